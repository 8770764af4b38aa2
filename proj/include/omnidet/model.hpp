#pragma once

// Tiny from-scratch detector: a 4-stage stride-2 backbone (widths
// 16/32/64/64), a 3-level feature pyramid, and an omni-supervised head with
// one 5-conv classification tower per enabled branch plus a shared 5-conv
// regression tower. Towers share weights across pyramid levels. Training is
// plain backprop implemented layer by layer; all heavy math goes through the
// dispatched kernels.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "omnidet/assignment.hpp"
#include "omnidet/cotraining.hpp"
#include "omnidet/data.hpp"
#include "omnidet/geometry.hpp"
#include "omnidet/image.hpp"
#include "omnidet/maps.hpp"
#include "omnidet/rng.hpp"

namespace omnidet::nn {

struct Tensor {
  int c = 0, h = 0, w = 0;
  std::vector<float> v;

  Tensor() = default;
  Tensor(int c_, int h_, int w_)
      : c(c_), h(h_), w(w_),
        v(static_cast<std::size_t>(c_) * h_ * w_, 0.0f) {}
  std::size_t size() const { return v.size(); }
  float* data() { return v.data(); }
  const float* data() const { return v.data(); }
  int plane() const { return h * w; }
};

Tensor image_to_tensor(const img::GrayImage& image);  // 3ch, (x/255 - 0.5)

struct ModelConfig {
  std::vector<data::Granularity> enabled_branches = {
      data::Granularity::box, data::Granularity::mask, data::Granularity::dot,
      data::Granularity::unlabeled};
  int fpn_channels = 64;
  int head_depth = 5;  // convolution layers per tower, prediction included
  assign::GridSpec grid;
  int image_size = 128;
  double score_threshold = 0.05;
  double nms_iou = 0.6;
  int max_detections = 50;
  bool fuse_include_unlabeled = true;
  std::uint64_t init_seed = 7;

  void validate() const;  // throws std::invalid_argument
  bool has_branch(data::Granularity g) const;
};

// --- layers ------------------------------------------------------------------

struct Conv {
  int in_ch = 0, out_ch = 0, k = 3, stride = 1, pad = 1;
  std::vector<float> w, b;    // w is [out_ch, in_ch*k*k]
  std::vector<float> gw, gb;  // accumulated gradients
  std::vector<float> mw, mb;  // momentum buffers

  void init(int in, int out, int kernel, int stride_, rng::Engine& eng,
            double w_std_scale = 1.0, float bias_value = 0.0f);
};

struct ConvCache {
  Tensor input;
  std::vector<float> cols;
  int oh = 0, ow = 0;
};

Tensor conv_forward(const Conv& conv, const Tensor& x, ConvCache* cache);
// Accumulates gw/gb; returns gradient w.r.t. the input.
Tensor conv_backward(Conv& conv, const Tensor& dy, const ConvCache& cache);

Tensor upsample2x(const Tensor& x);
Tensor upsample2x_backward(const Tensor& dy);

// --- detector ----------------------------------------------------------------

struct TowerCache {
  std::vector<ConvCache> conv;  // head_depth entries
  std::vector<Tensor> hidden;   // post-ReLU outputs of the hidden convs
  Tensor z;                     // raw prediction map
};

struct ForwardCache {
  // backbone
  ConvCache c1, c2, c3, c4;
  Tensor o1, o2, o3, o4;  // post-ReLU stage outputs
  // fpn
  ConvCache lat3, lat4, down, smooth3, smooth4, smooth5;
  Tensor l3, l4, t5, t4, t3;
  std::vector<Tensor> p;  // head inputs per level
  // heads
  std::map<data::Granularity, std::vector<TowerCache>> cls;
  std::vector<TowerCache> reg;
  // outputs
  std::map<data::Granularity, LevelMaps> prob;
  std::vector<std::vector<float>> reg_decoded;
};

struct BranchGrads {
  // Classification gradients are w.r.t. the pre-sigmoid logits (the loss
  // layer fuses the sigmoid chain); regression gradients are w.r.t. the
  // decoded distances. Only branches that received supervision appear —
  // the others stay untouched (stop-gradient).
  std::map<data::Granularity, LevelMaps> d_logit;
  std::vector<std::vector<float>> d_reg;  // empty when regression is unsupervised
};

class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<assign::LevelShape>& level_shapes() const {
    return shapes_;
  }

  cotrain::BranchPredictions forward(const Tensor& image,
                                     ForwardCache* cache) const;
  cotrain::BranchPredictions forward(const img::GrayImage& image) const;

  void backward(const ForwardCache& cache, const BranchGrads& grads);

  void zero_grads();
  void sgd_step(float lr, float momentum);

  // Deterministic parameter enumeration (also the checkpoint order).
  void visit_params(
      const std::function<void(const std::string&, std::vector<float>&)>& fn);
  void visit_grads(
      const std::function<void(const std::string&, std::vector<float>&)>& fn);

  void save_checkpoint(const std::string& path, std::uint64_t iteration,
                       double val_map) const;

 private:
  ModelConfig cfg_;
  std::vector<assign::LevelShape> shapes_;
  Conv c1_, c2_, c3_, c4_;
  Conv lat3_, lat4_, down_, smooth3_, smooth4_, smooth5_;
  struct Tower {
    std::vector<Conv> convs;  // head_depth entries, last one predicts
  };
  std::map<data::Granularity, Tower> cls_towers_;
  Tower reg_tower_;

  Tensor tower_forward(const Tower& t, const Tensor& x, TowerCache* cache) const;
  Tensor tower_backward(Tower& t, const Tensor& dz, const TowerCache& cache);
};

struct CheckpointInfo {
  ModelConfig config;
  std::uint64_t iteration = 0;
  double val_map = 0;
};

CheckpointInfo read_checkpoint_info(const std::string& path);
// Loads config + parameters; reload reproduces bit-identical forward passes.
Model load_checkpoint(const std::string& path, CheckpointInfo* info = nullptr);

// --- decoding ----------------------------------------------------------------

// Per-pixel decode of one level: every score >= threshold becomes a box
// (x-l, y-t, x+r, y+b) clipped to the image.
std::vector<geom::Detection> decode_level(
    const std::vector<float>& scores, const std::vector<float>& reg,
    const assign::LevelShape& shape, double score_threshold, int image_w,
    int image_h);

// Arithmetic mean of the selected branches' maps, decode of all levels,
// NMS, truncation. An empty subset selects every enabled branch (minus the
// unlabeled one when the config excludes it from fusion).
std::vector<geom::Detection> fuse_and_detect(
    const cotrain::BranchPredictions& preds, const ModelConfig& cfg,
    const std::vector<data::Granularity>& subset = {});

}  // namespace omnidet::nn
