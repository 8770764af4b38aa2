#pragma once

// Synthetic multi-granularity dataset: generation, manifest persistence and
// the equal-type round sampler. Manifest schema is JSON with an explicit
// version; images are grayscale PNGs under <split>/images/.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "omnidet/geometry.hpp"
#include "omnidet/rng.hpp"

namespace omnidet::data {

enum class Granularity { box, mask, dot, unlabeled };

constexpr std::array<Granularity, 4> kAllGranularities = {
    Granularity::box, Granularity::mask, Granularity::dot,
    Granularity::unlabeled};

const char* to_string(Granularity g);
Granularity granularity_from_string(const std::string& s);

struct DatasetItem {
  std::string image_path;  // resolved absolute path after load
  std::string image_rel;   // path as stored in the manifest
  Granularity granularity = Granularity::unlabeled;
  // Exactly one of these carries data, matching the granularity.
  std::vector<geom::Box> boxes;
  std::vector<geom::InstanceMask> masks;
  std::vector<geom::Dot> dots;
  // Synthetic ground truth; evaluation only, never visible to training.
  std::vector<geom::Box> hidden_gt;
};

struct Manifest {
  std::string version = "1";
  std::string split;  // train | val | test
  int image_width = 0, image_height = 0;
  std::vector<DatasetItem> items;
};

struct GenConfig {
  int image_size = 128;
  double lesion_mean = 1.5;         // Poisson mean, clipped >= 0
  double axis_min = 3.0, axis_max = 12.0;   // ellipse semi-axes, px
  int lesion_offset_min = 40, lesion_offset_max = 90;
  // Background texture
  double base_level = 90.0;
  double base_jitter = 20.0;        // per-image brightness shift
  double field_amplitude = 35.0;    // blurred random field
  double stripe_amplitude = 12.0;   // faint periodic stripes
  double stripe_period_min = 7.0, stripe_period_max = 18.0;
  double noise_sigma = 5.0;
  double distractor_mean = 4.0;     // soft lesion-like confusers
  int distractor_offset_min = 18, distractor_offset_max = 38;
  // Counts
  std::map<Granularity, int> train_counts = {{Granularity::box, 25},
                                             {Granularity::mask, 25},
                                             {Granularity::dot, 25},
                                             {Granularity::unlabeled, 25}};
  int val_count = 16;
  int test_count = 32;
  std::uint64_t seed = 1;

  void validate() const;  // throws std::invalid_argument
};

// Writes <root>/{train,val,test}/images/*.png and a manifest.json per split.
// Deterministic function of the config (including the seed).
void generate_dataset(const GenConfig& cfg, const std::string& root);

// Lossy conversion of instance masks to the target granularity.
// mask -> masks verbatim; box -> tight boxes; dot -> centroids;
// unlabeled -> nothing.
void degrade_annotations(const std::vector<geom::InstanceMask>& masks,
                         Granularity g, DatasetItem& out);

Manifest load_manifest(const std::string& path);
void save_manifest(const Manifest& m, const std::string& path);

// Equal-type batch sampler: every round yields one batch per enabled
// granularity; within a granularity items are drawn uniformly without
// replacement until the pool is exhausted, then reshuffled.
class RoundSampler {
 public:
  RoundSampler(const Manifest& manifest,
               const std::vector<Granularity>& enabled, int batch_size,
               std::uint64_t seed);

  // granularity -> item indices into the manifest
  std::map<Granularity, std::vector<std::size_t>> next_round();

 private:
  struct PoolState {
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
  };
  const Manifest* manifest_;
  std::vector<Granularity> enabled_;
  int batch_size_;
  rng::Engine eng_;
  std::map<Granularity, PoolState> pools_;
};

}  // namespace omnidet::data
