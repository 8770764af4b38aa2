#include "omnidet/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "omnidet/kernels.hpp"

using nlohmann::json;

namespace omnidet::nn {

Tensor image_to_tensor(const img::GrayImage& image) {
  Tensor t(3, image.height, image.width);
  const int plane = image.height * image.width;
  for (int i = 0; i < plane; ++i) {
    const float v = image.pixels[i] / 255.0f - 0.5f;
    t.v[i] = v;
    t.v[plane + i] = v;
    t.v[2 * plane + i] = v;
  }
  return t;
}

void ModelConfig::validate() const {
  if (enabled_branches.empty())
    throw std::invalid_argument("model: enabled_branches must be nonempty");
  for (std::size_t i = 0; i < enabled_branches.size(); ++i)
    for (std::size_t j = i + 1; j < enabled_branches.size(); ++j)
      if (enabled_branches[i] == enabled_branches[j])
        throw std::invalid_argument("model: duplicate branch");
  if (head_depth != 5)
    throw std::invalid_argument(
        "model: head towers are five convolutional layers");
  if (fpn_channels < 4)
    throw std::invalid_argument("model: fpn_channels too small");
  if (score_threshold < 0 || score_threshold > 1)
    throw std::invalid_argument("model: score_threshold out of range");
  if (max_detections < 1)
    throw std::invalid_argument("model: max_detections must be >= 1");
  grid.validate(image_size, image_size);
  if (grid.strides.size() != 3)
    throw std::invalid_argument("model: expects exactly three pyramid levels");
}

bool ModelConfig::has_branch(data::Granularity g) const {
  return std::find(enabled_branches.begin(), enabled_branches.end(), g) !=
         enabled_branches.end();
}

// --- layers ------------------------------------------------------------------

void Conv::init(int in, int out, int kernel, int stride_, rng::Engine& eng,
                double w_std_scale, float bias_value) {
  in_ch = in;
  out_ch = out;
  k = kernel;
  stride = stride_;
  pad = kernel / 2;
  const std::size_t n = static_cast<std::size_t>(out) * in * k * k;
  w.resize(n);
  const double fan_in = static_cast<double>(in) * k * k;
  const double std_dev = w_std_scale * std::sqrt(2.0 / fan_in);
  for (float& x : w) x = static_cast<float>(rng::normal(eng, 0.0, std_dev));
  b.assign(out, bias_value);
  gw.assign(n, 0.0f);
  gb.assign(out, 0.0f);
  mw.assign(n, 0.0f);
  mb.assign(out, 0.0f);
}

Tensor conv_forward(const Conv& conv, const Tensor& x, ConvCache* cache) {
  if (x.c != conv.in_ch) throw std::runtime_error("conv: channel mismatch");
  const int oh = kern::conv_out_size(x.h, conv.k, conv.stride, conv.pad);
  const int ow = kern::conv_out_size(x.w, conv.k, conv.stride, conv.pad);
  const int kk = conv.in_ch * conv.k * conv.k;

  std::vector<float> local_cols;
  std::vector<float>* cols = cache ? &cache->cols : &local_cols;
  cols->resize(static_cast<std::size_t>(kk) * oh * ow);
  kern::im2col(x.data(), x.c, x.h, x.w, conv.k, conv.stride, conv.pad,
               cols->data());

  Tensor y(conv.out_ch, oh, ow);
  kern::sgemm_nn(conv.out_ch, oh * ow, kk, conv.w.data(), cols->data(),
                 y.data(), false);
  kern::add_bias_rows(y.data(), conv.b.data(), conv.out_ch, oh * ow);
  if (cache) {
    cache->input = x;
    cache->oh = oh;
    cache->ow = ow;
  }
  return y;
}

Tensor conv_backward(Conv& conv, const Tensor& dy, const ConvCache& cache) {
  const int n = cache.oh * cache.ow;
  const int kk = conv.in_ch * conv.k * conv.k;

  // Bias gradient.
  for (int oc = 0; oc < conv.out_ch; ++oc) {
    const float* p = dy.data() + static_cast<std::size_t>(oc) * n;
    float acc = 0.0f;
    for (int i = 0; i < n; ++i) acc += p[i];
    conv.gb[oc] += acc;
  }

  // Weight gradient: dW[out, kk] += dY[out, n] * cols[kk, n]^T.
  kern::sgemm_nt(conv.out_ch, n, kk, dy.data(), cache.cols.data(),
                 conv.gw.data(), true);

  // Input gradient: dcols = W^T[kk, out] * dY[out, n], then col2im.
  std::vector<float> wt(static_cast<std::size_t>(kk) * conv.out_ch);
  for (int oc = 0; oc < conv.out_ch; ++oc)
    for (int i = 0; i < kk; ++i)
      wt[static_cast<std::size_t>(i) * conv.out_ch + oc] =
          conv.w[static_cast<std::size_t>(oc) * kk + i];
  std::vector<float> dcols(static_cast<std::size_t>(kk) * n);
  kern::sgemm_nn(kk, n, conv.out_ch, wt.data(), dy.data(), dcols.data(),
                 false);

  Tensor dx(cache.input.c, cache.input.h, cache.input.w);
  kern::col2im(dcols.data(), dx.c, dx.h, dx.w, conv.k, conv.stride, conv.pad,
               dx.data());
  return dx;
}

Tensor upsample2x(const Tensor& x) {
  Tensor y(x.c, x.h * 2, x.w * 2);
  for (int c = 0; c < x.c; ++c) {
    const float* src = x.data() + static_cast<std::size_t>(c) * x.plane();
    float* dst = y.data() + static_cast<std::size_t>(c) * y.plane();
    for (int i = 0; i < y.h; ++i) {
      const float* srow = src + static_cast<std::size_t>(i / 2) * x.w;
      float* drow = dst + static_cast<std::size_t>(i) * y.w;
      for (int j = 0; j < y.w; ++j) drow[j] = srow[j / 2];
    }
  }
  return y;
}

Tensor upsample2x_backward(const Tensor& dy) {
  Tensor dx(dy.c, dy.h / 2, dy.w / 2);
  for (int c = 0; c < dy.c; ++c) {
    const float* src = dy.data() + static_cast<std::size_t>(c) * dy.plane();
    float* dst = dx.data() + static_cast<std::size_t>(c) * dx.plane();
    for (int i = 0; i < dy.h; ++i) {
      const float* srow = src + static_cast<std::size_t>(i) * dy.w;
      float* drow = dst + static_cast<std::size_t>(i / 2) * dx.w;
      for (int j = 0; j < dy.w; ++j) drow[j / 2] += srow[j];
    }
  }
  return dx;
}

// --- model -------------------------------------------------------------------

namespace {

void relu_inplace(Tensor& t) { kern::relu_forward(t.data(), t.size()); }

void add_into(Tensor& dst, const Tensor& src) {
  kern::axpy(1.0f, src.data(), dst.data(), dst.size());
}

}  // namespace

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  for (int s : cfg_.grid.strides)
    shapes_.push_back(assign::LevelShape{s, cfg_.image_size / s,
                                         cfg_.image_size / s});

  rng::Engine eng(cfg_.init_seed);
  const int f = cfg_.fpn_channels;
  c1_.init(3, 16, 3, 2, eng);
  c2_.init(16, 32, 3, 2, eng);
  c3_.init(32, 64, 3, 2, eng);
  c4_.init(64, 64, 3, 2, eng);
  lat3_.init(64, f, 1, 1, eng);
  lat4_.init(64, f, 1, 1, eng);
  down_.init(f, f, 3, 2, eng);
  smooth3_.init(f, f, 3, 1, eng);
  smooth4_.init(f, f, 3, 1, eng);
  smooth5_.init(f, f, 3, 1, eng);

  // Classification prediction layers start heavily negative so the initial
  // foreground probability is ~0.01 (focal-loss prior).
  const float cls_bias = static_cast<float>(-std::log(99.0));
  const int hidden = cfg_.head_depth - 1;
  for (data::Granularity g : cfg_.enabled_branches) {
    Tower t;
    t.convs.resize(cfg_.head_depth);
    for (int i = 0; i < hidden; ++i) t.convs[i].init(f, f, 3, 1, eng);
    t.convs[hidden].init(f, 1, 3, 1, eng, 0.1, cls_bias);
    cls_towers_.emplace(g, std::move(t));
  }
  reg_tower_.convs.resize(cfg_.head_depth);
  for (int i = 0; i < hidden; ++i) reg_tower_.convs[i].init(f, f, 3, 1, eng);
  reg_tower_.convs[hidden].init(f, 4, 3, 1, eng, 0.1, 0.5f);
}

Tensor Model::tower_forward(const Tower& t, const Tensor& x,
                            TowerCache* cache) const {
  const int hidden = static_cast<int>(t.convs.size()) - 1;
  if (cache) {
    cache->conv.resize(t.convs.size());
    cache->hidden.resize(hidden);
  }
  Tensor h = x;
  for (int i = 0; i < hidden; ++i) {
    h = conv_forward(t.convs[i], h, cache ? &cache->conv[i] : nullptr);
    relu_inplace(h);
    if (cache) cache->hidden[i] = h;
  }
  Tensor z =
      conv_forward(t.convs[hidden], h, cache ? &cache->conv[hidden] : nullptr);
  if (cache) cache->z = z;
  return z;
}

Tensor Model::tower_backward(Tower& t, const Tensor& dz,
                             const TowerCache& cache) {
  const int hidden = static_cast<int>(t.convs.size()) - 1;
  Tensor d = conv_backward(t.convs[hidden], dz, cache.conv[hidden]);
  for (int i = hidden - 1; i >= 0; --i) {
    kern::relu_backward(cache.hidden[i].data(), d.data(), d.size());
    d = conv_backward(t.convs[i], d, cache.conv[i]);
  }
  return d;
}

cotrain::BranchPredictions Model::forward(const Tensor& image,
                                          ForwardCache* cache) const {
  if (image.c != 3 || image.h != cfg_.image_size || image.w != cfg_.image_size)
    throw std::runtime_error("model: input shape mismatch");

  ForwardCache local;
  ForwardCache& fc = cache ? *cache : local;
  const bool train = cache != nullptr;

  Tensor o1 = conv_forward(c1_, image, train ? &fc.c1 : nullptr);
  relu_inplace(o1);
  Tensor o2 = conv_forward(c2_, o1, train ? &fc.c2 : nullptr);
  relu_inplace(o2);
  Tensor o3 = conv_forward(c3_, o2, train ? &fc.c3 : nullptr);
  relu_inplace(o3);
  Tensor o4 = conv_forward(c4_, o3, train ? &fc.c4 : nullptr);
  relu_inplace(o4);

  Tensor l3 = conv_forward(lat3_, o3, train ? &fc.lat3 : nullptr);
  Tensor l4 = conv_forward(lat4_, o4, train ? &fc.lat4 : nullptr);
  Tensor t5 = conv_forward(down_, l4, train ? &fc.down : nullptr);
  Tensor t4 = l4;
  add_into(t4, upsample2x(t5));
  Tensor t3 = l3;
  add_into(t3, upsample2x(t4));
  Tensor p3 = conv_forward(smooth3_, t3, train ? &fc.smooth3 : nullptr);
  Tensor p4 = conv_forward(smooth4_, t4, train ? &fc.smooth4 : nullptr);
  Tensor p5 = conv_forward(smooth5_, t5, train ? &fc.smooth5 : nullptr);

  if (train) {
    fc.o1 = std::move(o1);
    fc.o2 = std::move(o2);
    fc.o3 = std::move(o3);
    fc.o4 = std::move(o4);
    fc.l3 = l3;
    fc.l4 = l4;
    fc.t5 = t5;
    fc.t4 = t4;
    fc.t3 = t3;
  }
  std::vector<Tensor> p;
  p.push_back(std::move(p3));
  p.push_back(std::move(p4));
  p.push_back(std::move(p5));

  cotrain::BranchPredictions preds;
  preds.shapes = shapes_;
  for (const auto& [g, tower] : cls_towers_) {
    LevelMaps prob;
    std::vector<TowerCache>* caches = nullptr;
    if (train) {
      caches = &fc.cls[g];
      caches->resize(p.size());
    }
    for (std::size_t l = 0; l < p.size(); ++l) {
      Tensor z = tower_forward(tower, p[l], caches ? &(*caches)[l] : nullptr);
      std::vector<float> pr(z.size());
      kern::sigmoid_forward(z.data(), pr.data(), z.size());
      prob.push_back(std::move(pr));
    }
    preds.prob[g] = prob;
    if (train) fc.prob[g] = std::move(prob);
  }

  if (train) fc.reg.resize(p.size());
  for (std::size_t l = 0; l < p.size(); ++l) {
    Tensor z = tower_forward(reg_tower_, p[l],
                             train ? &fc.reg[l] : nullptr);
    std::vector<float> dist(z.size());
    kern::softplus_forward(z.data(), dist.data(), z.size());
    const float s = static_cast<float>(shapes_[l].stride);
    for (float& v : dist) v *= s;
    preds.reg.push_back(dist);
    if (train) fc.reg_decoded.push_back(std::move(dist));
  }

  if (train) fc.p = std::move(p);
  return preds;
}

cotrain::BranchPredictions Model::forward(const img::GrayImage& image) const {
  return forward(image_to_tensor(image), nullptr);
}

void Model::backward(const ForwardCache& cache, const BranchGrads& grads) {
  const int n_levels = static_cast<int>(shapes_.size());
  std::vector<Tensor> dp(n_levels);
  for (int l = 0; l < n_levels; ++l)
    dp[l] = Tensor(cfg_.fpn_channels, shapes_[l].h, shapes_[l].w);

  // Classification towers: only supervised branches receive gradient, so
  // every other branch's parameters stay untouched (stop-gradient). The loss
  // layer already folded the sigmoid chain into these logit gradients.
  for (const auto& [g, d_logit] : grads.d_logit) {
    auto tower_it = cls_towers_.find(g);
    if (tower_it == cls_towers_.end())
      throw std::runtime_error("backward: gradient for disabled branch");
    const auto& caches = cache.cls.at(g);
    for (int l = 0; l < n_levels; ++l) {
      Tensor dz(1, shapes_[l].h, shapes_[l].w);
      std::copy(d_logit[l].begin(), d_logit[l].end(), dz.v.begin());
      add_into(dp[l], tower_backward(tower_it->second, dz, caches[l]));
    }
  }

  // Regression tower: chain through distance = softplus(z) * stride.
  if (!grads.d_reg.empty()) {
    for (int l = 0; l < n_levels; ++l) {
      const Tensor& z = cache.reg[l].z;
      Tensor dz(4, shapes_[l].h, shapes_[l].w);
      kern::softplus_backward(z.data(), grads.d_reg[l].data(), dz.data(),
                              dz.size());
      const float s = static_cast<float>(shapes_[l].stride);
      for (float& v : dz.v) v *= s;
      add_into(dp[l], tower_backward(reg_tower_, dz, cache.reg[l]));
    }
  }

  // FPN backward.
  Tensor dt3 = conv_backward(smooth3_, dp[0], cache.smooth3);
  Tensor dt4 = conv_backward(smooth4_, dp[1], cache.smooth4);
  Tensor dt5 = conv_backward(smooth5_, dp[2], cache.smooth5);
  // t3 = l3 + up(t4); t4 = l4 + up(t5); t5 = down(l4)
  add_into(dt4, upsample2x_backward(dt3));
  add_into(dt5, upsample2x_backward(dt4));
  Tensor dl4 = dt4;
  add_into(dl4, conv_backward(down_, dt5, cache.down));
  Tensor dc3 = conv_backward(lat3_, dt3, cache.lat3);
  Tensor dc4 = conv_backward(lat4_, dl4, cache.lat4);

  // Backbone backward.
  kern::relu_backward(cache.o4.data(), dc4.data(), dc4.size());
  add_into(dc3, conv_backward(c4_, dc4, cache.c4));
  kern::relu_backward(cache.o3.data(), dc3.data(), dc3.size());
  Tensor dc2 = conv_backward(c3_, dc3, cache.c3);
  kern::relu_backward(cache.o2.data(), dc2.data(), dc2.size());
  Tensor dc1 = conv_backward(c2_, dc2, cache.c2);
  kern::relu_backward(cache.o1.data(), dc1.data(), dc1.size());
  conv_backward(c1_, dc1, cache.c1);
}

void Model::visit_params(
    const std::function<void(const std::string&, std::vector<float>&)>& fn) {
  const auto conv = [&](const std::string& name, Conv& c) {
    fn(name + ".w", c.w);
    fn(name + ".b", c.b);
  };
  conv("backbone.c1", c1_);
  conv("backbone.c2", c2_);
  conv("backbone.c3", c3_);
  conv("backbone.c4", c4_);
  conv("fpn.lat3", lat3_);
  conv("fpn.lat4", lat4_);
  conv("fpn.down", down_);
  conv("fpn.smooth3", smooth3_);
  conv("fpn.smooth4", smooth4_);
  conv("fpn.smooth5", smooth5_);
  for (auto& [g, tower] : cls_towers_)
    for (std::size_t i = 0; i < tower.convs.size(); ++i)
      conv(std::string("cls.") + data::to_string(g) + "." + std::to_string(i),
           tower.convs[i]);
  for (std::size_t i = 0; i < reg_tower_.convs.size(); ++i)
    conv("reg." + std::to_string(i), reg_tower_.convs[i]);
}

void Model::visit_grads(
    const std::function<void(const std::string&, std::vector<float>&)>& fn) {
  const auto conv = [&](const std::string& name, Conv& c) {
    fn(name + ".w", c.gw);
    fn(name + ".b", c.gb);
  };
  conv("backbone.c1", c1_);
  conv("backbone.c2", c2_);
  conv("backbone.c3", c3_);
  conv("backbone.c4", c4_);
  conv("fpn.lat3", lat3_);
  conv("fpn.lat4", lat4_);
  conv("fpn.down", down_);
  conv("fpn.smooth3", smooth3_);
  conv("fpn.smooth4", smooth4_);
  conv("fpn.smooth5", smooth5_);
  for (auto& [g, tower] : cls_towers_)
    for (std::size_t i = 0; i < tower.convs.size(); ++i)
      conv(std::string("cls.") + data::to_string(g) + "." + std::to_string(i),
           tower.convs[i]);
  for (std::size_t i = 0; i < reg_tower_.convs.size(); ++i)
    conv("reg." + std::to_string(i), reg_tower_.convs[i]);
}

void Model::zero_grads() {
  visit_grads([](const std::string&, std::vector<float>& g) {
    std::fill(g.begin(), g.end(), 0.0f);
  });
}

void Model::sgd_step(float lr, float momentum) {
  const auto step = [&](Conv& c) {
    kern::sgd_momentum_update(c.w.data(), c.mw.data(), c.gw.data(), c.w.size(),
                              lr, momentum);
    kern::sgd_momentum_update(c.b.data(), c.mb.data(), c.gb.data(), c.b.size(),
                              lr, momentum);
  };
  step(c1_);
  step(c2_);
  step(c3_);
  step(c4_);
  step(lat3_);
  step(lat4_);
  step(down_);
  step(smooth3_);
  step(smooth4_);
  step(smooth5_);
  for (auto& [g, tower] : cls_towers_) {
    (void)g;
    for (Conv& c : tower.convs) step(c);
  }
  for (Conv& c : reg_tower_.convs) step(c);
  zero_grads();
}

// --- checkpoint ----------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'O', 'D', 'E', 'T', 'C', 'K', 'P', '1'};

json config_to_json(const ModelConfig& cfg) {
  json j;
  json branches = json::array();
  for (data::Granularity g : cfg.enabled_branches)
    branches.push_back(data::to_string(g));
  j["enabled_branches"] = branches;
  j["fpn_channels"] = cfg.fpn_channels;
  j["head_depth"] = cfg.head_depth;
  j["strides"] = cfg.grid.strides;
  // The top range is always unbounded; only the finite cut points persist.
  std::vector<double> cuts(cfg.grid.range_max.begin(),
                           cfg.grid.range_max.end() - 1);
  j["range_cuts"] = cuts;
  j["image_size"] = cfg.image_size;
  j["score_threshold"] = cfg.score_threshold;
  j["nms_iou"] = cfg.nms_iou;
  j["max_detections"] = cfg.max_detections;
  j["fuse_include_unlabeled"] = cfg.fuse_include_unlabeled;
  j["init_seed"] = cfg.init_seed;
  return j;
}

ModelConfig config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.enabled_branches.clear();
  for (const auto& s : j.at("enabled_branches"))
    cfg.enabled_branches.push_back(
        data::granularity_from_string(s.get<std::string>()));
  cfg.fpn_channels = j.at("fpn_channels").get<int>();
  cfg.head_depth = j.at("head_depth").get<int>();
  cfg.grid.strides = j.at("strides").get<std::vector<int>>();
  cfg.grid.range_max = j.at("range_cuts").get<std::vector<double>>();
  cfg.grid.range_max.push_back(std::numeric_limits<double>::infinity());
  cfg.image_size = j.at("image_size").get<int>();
  cfg.score_threshold = j.at("score_threshold").get<double>();
  cfg.nms_iou = j.at("nms_iou").get<double>();
  cfg.max_detections = j.at("max_detections").get<int>();
  cfg.fuse_include_unlabeled = j.at("fuse_include_unlabeled").get<bool>();
  cfg.init_seed = j.at("init_seed").get<std::uint64_t>();
  return cfg;
}

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

}  // namespace

void Model::save_checkpoint(const std::string& path, std::uint64_t iteration,
                            double val_map) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out.write(kMagic, sizeof(kMagic));
  const std::string cfg_json = config_to_json(cfg_).dump();
  write_u64(out, cfg_json.size());
  out.write(cfg_json.data(), static_cast<std::streamsize>(cfg_json.size()));
  write_u64(out, iteration);
  out.write(reinterpret_cast<const char*>(&val_map), sizeof(val_map));

  std::vector<std::pair<std::string, const std::vector<float>*>> params;
  const_cast<Model*>(this)->visit_params(
      [&](const std::string& name, std::vector<float>& v) {
        params.emplace_back(name, &v);
      });
  write_u64(out, params.size());
  for (const auto& [name, vec] : params) {
    write_u64(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u64(out, vec->size());
    out.write(reinterpret_cast<const char*>(vec->data()),
              static_cast<std::streamsize>(vec->size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

namespace {

struct RawCheckpoint {
  json config;
  std::uint64_t iteration = 0;
  double val_map = 0;
  std::vector<std::pair<std::string, std::vector<float>>> params;
};

RawCheckpoint read_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  RawCheckpoint raw;
  const std::uint64_t cfg_len = read_u64(in);
  std::string cfg_json(cfg_len, '\0');
  in.read(cfg_json.data(), static_cast<std::streamsize>(cfg_len));
  raw.config = json::parse(cfg_json);
  raw.iteration = read_u64(in);
  in.read(reinterpret_cast<char*>(&raw.val_map), sizeof(raw.val_map));
  const std::uint64_t n_params = read_u64(in);
  for (std::uint64_t i = 0; i < n_params; ++i) {
    const std::uint64_t name_len = read_u64(in);
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    const std::uint64_t count = read_u64(in);
    std::vector<float> v(count);
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
    raw.params.emplace_back(std::move(name), std::move(v));
  }
  if (!in) throw std::runtime_error("truncated checkpoint: " + path);
  return raw;
}

}  // namespace

CheckpointInfo read_checkpoint_info(const std::string& path) {
  const RawCheckpoint raw = read_raw(path);
  return CheckpointInfo{config_from_json(raw.config), raw.iteration,
                        raw.val_map};
}

Model load_checkpoint(const std::string& path, CheckpointInfo* info) {
  RawCheckpoint raw = read_raw(path);
  const ModelConfig cfg = config_from_json(raw.config);
  Model model(cfg);
  std::size_t cursor = 0;
  model.visit_params([&](const std::string& name, std::vector<float>& v) {
    if (cursor >= raw.params.size() || raw.params[cursor].first != name ||
        raw.params[cursor].second.size() != v.size())
      throw std::runtime_error("checkpoint parameter mismatch at " + name);
    v = std::move(raw.params[cursor].second);
    ++cursor;
  });
  if (cursor != raw.params.size())
    throw std::runtime_error("checkpoint has extra parameters");
  if (info) *info = CheckpointInfo{cfg, raw.iteration, raw.val_map};
  return model;
}

// --- decoding ----------------------------------------------------------------

std::vector<geom::Detection> decode_level(
    const std::vector<float>& scores, const std::vector<float>& reg,
    const assign::LevelShape& shape, double score_threshold, int image_w,
    int image_h) {
  std::vector<geom::Detection> out;
  const int n = shape.points();
  for (int idx = 0; idx < n; ++idx) {
    const double score = scores[idx];
    if (score < score_threshold) continue;
    const double px = shape.stride / 2.0 + (idx % shape.w) * shape.stride;
    const double py = shape.stride / 2.0 + (idx / shape.w) * shape.stride;
    geom::Box b{px - reg[0 * n + idx], py - reg[1 * n + idx],
                px + reg[2 * n + idx], py + reg[3 * n + idx]};
    b.x0 = std::clamp(b.x0, 0.0, static_cast<double>(image_w));
    b.y0 = std::clamp(b.y0, 0.0, static_cast<double>(image_h));
    b.x1 = std::clamp(b.x1, 0.0, static_cast<double>(image_w));
    b.y1 = std::clamp(b.y1, 0.0, static_cast<double>(image_h));
    out.push_back(geom::Detection{b, score});
  }
  return out;
}

std::vector<geom::Detection> fuse_and_detect(
    const cotrain::BranchPredictions& preds, const ModelConfig& cfg,
    const std::vector<data::Granularity>& subset) {
  std::vector<data::Granularity> branches = subset;
  if (branches.empty()) {
    for (const auto& [g, maps] : preds.prob) {
      (void)maps;
      if (g == data::Granularity::unlabeled && !cfg.fuse_include_unlabeled &&
          preds.prob.size() > 1)
        continue;
      branches.push_back(g);
    }
  }
  if (branches.empty()) throw std::runtime_error("fusion: no branches");
  for (data::Granularity g : branches)
    if (!preds.prob.count(g))
      throw std::runtime_error("fusion: branch not present in predictions");

  std::vector<geom::Detection> all;
  for (std::size_t l = 0; l < preds.shapes.size(); ++l) {
    std::vector<float> fused(preds.shapes[l].points(), 0.0f);
    for (data::Granularity g : branches) {
      const auto& m = preds.prob.at(g)[l];
      for (std::size_t i = 0; i < fused.size(); ++i) fused[i] += m[i];
    }
    const float inv = 1.0f / static_cast<float>(branches.size());
    for (float& v : fused) v *= inv;
    auto dets = decode_level(fused, preds.reg[l], preds.shapes[l],
                             cfg.score_threshold, cfg.image_size,
                             cfg.image_size);
    all.insert(all.end(), dets.begin(), dets.end());
  }
  auto kept = geom::nms(all, cfg.nms_iou);
  if (static_cast<int>(kept.size()) > cfg.max_detections)
    kept.resize(cfg.max_detections);
  return kept;
}

}  // namespace omnidet::nn
