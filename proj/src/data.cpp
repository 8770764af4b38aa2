#include "omnidet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "omnidet/image.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace omnidet::data {

const char* to_string(Granularity g) {
  switch (g) {
    case Granularity::box: return "box";
    case Granularity::mask: return "mask";
    case Granularity::dot: return "dot";
    case Granularity::unlabeled: return "unlabeled";
  }
  return "?";
}

Granularity granularity_from_string(const std::string& s) {
  for (Granularity g : kAllGranularities)
    if (s == to_string(g)) return g;
  throw std::invalid_argument("unknown granularity: " + s);
}

void GenConfig::validate() const {
  if (image_size < 64) throw std::invalid_argument("image_size must be >= 64");
  if (lesion_mean < 0) throw std::invalid_argument("lesion_mean must be >= 0");
  if (axis_min <= 0 || axis_max < axis_min)
    throw std::invalid_argument("invalid lesion axis range");
  if (val_count < 0 || test_count < 0)
    throw std::invalid_argument("split counts must be >= 0");
  for (const auto& [g, n] : train_counts) {
    (void)g;
    if (n < 0) throw std::invalid_argument("train counts must be >= 0");
  }
}

// ---------------------------------------------------------------------------
// Synthetic rendering
// ---------------------------------------------------------------------------

namespace {

struct Lesion {
  double cx, cy, ax, ay, theta;
  int offset;
};

// Separable three-pass box blur; cheap stand-in for a Gaussian.
void blur(std::vector<double>& v, int w, int h, int radius, int passes) {
  std::vector<double> tmp(v.size());
  for (int p = 0; p < passes; ++p) {
    for (int y = 0; y < h; ++y) {
      double acc = 0;
      int cnt = 0;
      for (int x = -radius; x < w; ++x) {
        const int add = x + radius;
        if (add < w) {
          acc += v[static_cast<std::size_t>(y) * w + add];
          ++cnt;
        }
        const int del = x - radius - 1;
        if (del >= 0) {
          acc -= v[static_cast<std::size_t>(y) * w + del];
          --cnt;
        }
        if (x >= 0) tmp[static_cast<std::size_t>(y) * w + x] = acc / cnt;
      }
    }
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      int cnt = 0;
      for (int y = -radius; y < h; ++y) {
        const int add = y + radius;
        if (add < h) {
          acc += tmp[static_cast<std::size_t>(add) * w + x];
          ++cnt;
        }
        const int del = y - radius - 1;
        if (del >= 0) {
          acc -= tmp[static_cast<std::size_t>(del) * w + x];
          --cnt;
        }
        if (y >= 0) v[static_cast<std::size_t>(y) * w + x] = acc / cnt;
      }
    }
  }
}

struct Rendered {
  img::GrayImage image;
  std::vector<geom::InstanceMask> lesion_masks;
};

Rendered render_item(const GenConfig& cfg, std::uint64_t item_seed) {
  rng::Engine eng(item_seed);
  const int s = cfg.image_size;
  std::vector<double> canvas(static_cast<std::size_t>(s) * s, 0.0);

  // Blurred random field; per-image smoothness varies.
  for (double& v : canvas)
    v = rng::uniform(eng, -cfg.field_amplitude, cfg.field_amplitude);
  blur(canvas, s, s, 3 + static_cast<int>(rng::below(eng, 7)), 3);

  // One or two faint stripe systems, roughly horizontal (rib-like).
  {
    const int systems = 1 + static_cast<int>(rng::below(eng, 2));
    for (int k = 0; k < systems; ++k) {
      const double amp = cfg.stripe_amplitude / systems;
      const double period =
          rng::uniform(eng, cfg.stripe_period_min, cfg.stripe_period_max);
      const double tilt = rng::uniform(eng, -0.45, 0.45);
      const double phase = rng::uniform(eng, 0.0, 6.283185307179586);
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x)
          canvas[static_cast<std::size_t>(y) * s + x] +=
              amp *
              std::sin(6.283185307179586 * (y + tilt * x) / period + phase);
    }
  }

  const double base =
      cfg.base_level + rng::uniform(eng, -cfg.base_jitter, cfg.base_jitter);
  for (double& v : canvas) v += base;

  // Soft distractor blobs: lesion-like brightness and shape, but fuzzy
  // anisotropic edges.
  {
    const int n_distract = rng::poisson(eng, cfg.distractor_mean);
    for (int i = 0; i < n_distract; ++i) {
      const double cx = rng::uniform(eng, 6.0, s - 6.0);
      const double cy = rng::uniform(eng, 6.0, s - 6.0);
      const double su = rng::uniform(eng, 1.5, 7.0);
      const double sv = rng::uniform(eng, 1.5, 7.0);
      const double theta = rng::uniform(eng, 0.0, 3.141592653589793);
      const double amp = rng::uniform(eng, cfg.distractor_offset_min,
                                      cfg.distractor_offset_max);
      const double ct = std::cos(theta), st = std::sin(theta);
      const int r = static_cast<int>(3 * std::max(su, sv)) + 1;
      for (int y = std::max(0, static_cast<int>(cy) - r);
           y < std::min(s, static_cast<int>(cy) + r); ++y) {
        for (int x = std::max(0, static_cast<int>(cx) - r);
             x < std::min(s, static_cast<int>(cx) + r); ++x) {
          const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
          const double u = (dx * ct + dy * st) / su;
          const double v = (-dx * st + dy * ct) / sv;
          canvas[static_cast<std::size_t>(y) * s + x] +=
              amp * std::exp(-(u * u + v * v) / 2.0);
        }
      }
    }
  }

  // Hard-edged filled ellipses are the lesions; the exact foreground pixels
  // are the instance masks.
  Rendered out;
  const int n_lesions = rng::poisson(eng, cfg.lesion_mean);
  for (int i = 0; i < n_lesions; ++i) {
    Lesion l;
    const double margin = cfg.axis_max + 2.0;
    l.cx = rng::uniform(eng, margin, s - margin);
    l.cy = rng::uniform(eng, margin, s - margin);
    l.ax = rng::uniform(eng, cfg.axis_min, cfg.axis_max);
    l.ay = rng::uniform(eng, cfg.axis_min, cfg.axis_max);
    l.theta = rng::uniform(eng, 0.0, 3.141592653589793);
    l.offset = cfg.lesion_offset_min +
               static_cast<int>(rng::below(
                   eng, static_cast<std::uint64_t>(cfg.lesion_offset_max -
                                                   cfg.lesion_offset_min + 1)));
    geom::InstanceMask m;
    m.width = s;
    m.height = s;
    m.bits.assign(static_cast<std::size_t>(s) * s, 0);
    const double ct = std::cos(l.theta), st = std::sin(l.theta);
    const int r = static_cast<int>(std::max(l.ax, l.ay)) + 2;
    bool any = false;
    for (int y = std::max(0, static_cast<int>(l.cy) - r);
         y < std::min(s, static_cast<int>(l.cy) + r + 1); ++y) {
      for (int x = std::max(0, static_cast<int>(l.cx) - r);
           x < std::min(s, static_cast<int>(l.cx) + r + 1); ++x) {
        const double dx = x + 0.5 - l.cx, dy = y + 0.5 - l.cy;
        const double u = (dx * ct + dy * st) / l.ax;
        const double v = (-dx * st + dy * ct) / l.ay;
        if (u * u + v * v <= 1.0) {
          m.set(x, y);
          canvas[static_cast<std::size_t>(y) * s + x] += l.offset;
          any = true;
        }
      }
    }
    if (any) out.lesion_masks.push_back(std::move(m));
  }

  // Pixel noise last.
  for (double& v : canvas) v += rng::normal(eng, 0.0, cfg.noise_sigma);

  out.image.width = s;
  out.image.height = s;
  out.image.pixels.resize(canvas.size());
  for (std::size_t i = 0; i < canvas.size(); ++i) {
    const double v = std::round(canvas[i]);
    out.image.pixels[i] =
        static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Manifest (de)serialization
// ---------------------------------------------------------------------------

json box_to_json(const geom::Box& b) {
  return json::array({b.x0, b.y0, b.x1, b.y1});
}

geom::Box box_from_json(const json& j) {
  if (!j.is_array() || j.size() != 4)
    throw std::runtime_error("manifest: box must be [x0,y0,x1,y1]");
  geom::Box b{j[0].get<double>(), j[1].get<double>(), j[2].get<double>(),
              j[3].get<double>()};
  if (!b.valid()) throw std::runtime_error("manifest: invalid box extents");
  return b;
}

json mask_to_json(const geom::InstanceMask& m) {
  // Row-major run-length encoding, alternating runs starting with background.
  json counts = json::array();
  std::uint8_t current = 0;
  std::size_t run = 0;
  for (std::uint8_t b : m.bits) {
    if (b == current) {
      ++run;
    } else {
      counts.push_back(run);
      current = b;
      run = 1;
    }
  }
  counts.push_back(run);
  return json{{"size", {m.height, m.width}}, {"rle", counts}};
}

geom::InstanceMask mask_from_json(const json& j, int img_w, int img_h) {
  geom::InstanceMask m;
  if (j.contains("polygon")) {
    std::vector<std::pair<double, double>> poly;
    for (const auto& p : j.at("polygon"))
      poly.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
    m = geom::mask_from_polygon(poly, img_w, img_h);
  } else if (j.contains("rle")) {
    const auto& size = j.at("size");
    m.height = size.at(0).get<int>();
    m.width = size.at(1).get<int>();
    m.bits.assign(static_cast<std::size_t>(m.width) * m.height, 0);
    std::size_t pos = 0;
    std::uint8_t current = 0;
    for (const auto& c : j.at("rle")) {
      const std::size_t run = c.get<std::size_t>();
      if (pos + run > m.bits.size())
        throw std::runtime_error("manifest: RLE overruns mask");
      if (current) std::fill_n(m.bits.begin() + pos, run, std::uint8_t{1});
      pos += run;
      current ^= 1;
    }
    if (pos != m.bits.size())
      throw std::runtime_error("manifest: RLE does not cover mask");
  } else {
    throw std::runtime_error("manifest: mask needs rle or polygon");
  }
  if (m.width != img_w || m.height != img_h)
    throw std::runtime_error("manifest: mask dimensions mismatch image");
  if (m.foreground_count() == 0)
    throw std::runtime_error("manifest: empty mask");
  return m;
}

void validate_item(const DatasetItem& it, const Manifest& m) {
  const bool has_boxes = !it.boxes.empty();
  const bool has_masks = !it.masks.empty();
  const bool has_dots = !it.dots.empty();
  switch (it.granularity) {
    case Granularity::box:
      if (has_masks || has_dots)
        throw std::runtime_error(
            "manifest: box item carries non-box annotations");
      break;
    case Granularity::mask:
      if (has_boxes || has_dots)
        throw std::runtime_error(
            "manifest: mask item carries non-mask annotations");
      break;
    case Granularity::dot:
      if (has_boxes || has_masks)
        throw std::runtime_error(
            "manifest: dot item carries non-dot annotations");
      break;
    case Granularity::unlabeled:
      if (has_boxes || has_masks || has_dots)
        throw std::runtime_error(
            "manifest: unlabeled item carries annotations");
      break;
  }
  for (const auto& d : it.dots)
    if (d.x < 0 || d.y < 0 || d.x > m.image_width || d.y > m.image_height)
      throw std::runtime_error("manifest: dot outside image bounds");
  if ((m.split == "val" || m.split == "test") &&
      it.granularity != Granularity::box)
    throw std::runtime_error("manifest: " + m.split +
                             " split must be box-granularity");
}

}  // namespace

void degrade_annotations(const std::vector<geom::InstanceMask>& masks,
                         Granularity g, DatasetItem& out) {
  out.granularity = g;
  out.boxes.clear();
  out.masks.clear();
  out.dots.clear();
  switch (g) {
    case Granularity::mask:
      out.masks = masks;
      break;
    case Granularity::box:
      for (const auto& m : masks) out.boxes.push_back(geom::box_from_mask(m));
      break;
    case Granularity::dot:
      for (const auto& m : masks) out.dots.push_back(geom::dot_from_mask(m));
      break;
    case Granularity::unlabeled:
      break;
  }
}

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("manifest parse error: " + std::string(e.what()));
  }

  Manifest m;
  m.version = j.value("version", "");
  if (m.version != "1")
    throw std::runtime_error("unsupported manifest version: '" + m.version +
                             "'");
  m.split = j.at("split").get<std::string>();
  m.image_width = j.at("image_size").at(0).get<int>();
  m.image_height = j.at("image_size").at(1).get<int>();

  const fs::path base = fs::path(path).parent_path();
  for (const auto& ji : j.at("items")) {
    DatasetItem it;
    it.image_rel = ji.at("image").get<std::string>();
    it.image_path = (base / it.image_rel).lexically_normal().string();
    if (!fs::exists(it.image_path))
      throw std::runtime_error("manifest: missing image file " +
                               it.image_path);
    it.granularity =
        granularity_from_string(ji.at("granularity").get<std::string>());
    if (ji.contains("boxes"))
      for (const auto& jb : ji.at("boxes")) it.boxes.push_back(box_from_json(jb));
    if (ji.contains("masks"))
      for (const auto& jm : ji.at("masks"))
        it.masks.push_back(mask_from_json(jm, m.image_width, m.image_height));
    if (ji.contains("dots"))
      for (const auto& jd : ji.at("dots"))
        it.dots.push_back(geom::Dot{jd.at(0).get<double>(),
                                    jd.at(1).get<double>()});
    if (ji.contains("hidden_gt"))
      for (const auto& jb : ji.at("hidden_gt"))
        it.hidden_gt.push_back(box_from_json(jb));
    validate_item(it, m);
    m.items.push_back(std::move(it));
  }
  return m;
}

void save_manifest(const Manifest& m, const std::string& path) {
  json j;
  j["version"] = m.version;
  j["split"] = m.split;
  j["image_size"] = {m.image_width, m.image_height};
  json items = json::array();
  for (const auto& it : m.items) {
    json ji;
    ji["image"] = it.image_rel;
    ji["granularity"] = to_string(it.granularity);
    if (!it.boxes.empty()) {
      json a = json::array();
      for (const auto& b : it.boxes) a.push_back(box_to_json(b));
      ji["boxes"] = a;
    }
    if (!it.masks.empty()) {
      json a = json::array();
      for (const auto& msk : it.masks) a.push_back(mask_to_json(msk));
      ji["masks"] = a;
    }
    if (!it.dots.empty()) {
      json a = json::array();
      for (const auto& d : it.dots) a.push_back(json::array({d.x, d.y}));
      ji["dots"] = a;
    }
    {
      json a = json::array();
      for (const auto& b : it.hidden_gt) a.push_back(box_to_json(b));
      ji["hidden_gt"] = a;
    }
    items.push_back(std::move(ji));
  }
  j["items"] = std::move(items);

  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest: " + path);
  out << j.dump(2) << "\n";
}

void generate_dataset(const GenConfig& cfg, const std::string& root) {
  cfg.validate();
  std::uint64_t item_counter = 0;

  const auto gen_split = [&](const std::string& split,
                             const std::vector<Granularity>& plan) {
    const fs::path dir = fs::path(root) / split;
    const fs::path img_dir = dir / "images";
    std::error_code ec;
    fs::create_directories(img_dir, ec);
    if (ec)
      throw std::runtime_error("cannot create output directory: " +
                               img_dir.string());

    Manifest m;
    m.split = split;
    m.image_width = cfg.image_size;
    m.image_height = cfg.image_size;
    int idx = 0;
    for (Granularity g : plan) {
      const std::uint64_t item_seed = rng::derive_seed(cfg.seed, item_counter++);
      Rendered r = render_item(cfg, item_seed);

      char name[64];
      std::snprintf(name, sizeof(name), "%s_%05d.png", split.c_str(), idx++);
      img::write_png((img_dir / name).string(), r.image);

      DatasetItem it;
      it.image_rel = std::string("images/") + name;
      it.image_path = (img_dir / name).string();
      degrade_annotations(r.lesion_masks, g, it);
      for (const auto& msk : r.lesion_masks)
        it.hidden_gt.push_back(geom::box_from_mask(msk));
      m.items.push_back(std::move(it));
    }
    save_manifest(m, (dir / "manifest.json").string());
  };

  std::vector<Granularity> train_plan;
  for (Granularity g : kAllGranularities)
    if (auto itc = cfg.train_counts.find(g); itc != cfg.train_counts.end())
      train_plan.insert(train_plan.end(), itc->second, g);
  gen_split("train", train_plan);
  gen_split("val", std::vector<Granularity>(cfg.val_count, Granularity::box));
  gen_split("test", std::vector<Granularity>(cfg.test_count, Granularity::box));
}

// ---------------------------------------------------------------------------
// RoundSampler
// ---------------------------------------------------------------------------

RoundSampler::RoundSampler(const Manifest& manifest,
                           const std::vector<Granularity>& enabled,
                           int batch_size, std::uint64_t seed)
    : manifest_(&manifest),
      enabled_(enabled),
      batch_size_(batch_size),
      eng_(seed) {
  if (batch_size_ < 1) throw std::invalid_argument("batch_size must be >= 1");
  for (Granularity g : enabled_) {
    PoolState st;
    for (std::size_t i = 0; i < manifest.items.size(); ++i)
      if (manifest.items[i].granularity == g) st.order.push_back(i);
    if (st.order.empty())
      throw std::runtime_error(std::string("empty granularity pool: ") +
                               to_string(g));
    rng::shuffle(eng_, st.order);
    pools_[g] = std::move(st);
  }
}

std::map<Granularity, std::vector<std::size_t>> RoundSampler::next_round() {
  std::map<Granularity, std::vector<std::size_t>> round;
  for (Granularity g : enabled_) {
    PoolState& st = pools_[g];
    std::vector<std::size_t> batch;
    batch.reserve(batch_size_);
    for (int i = 0; i < batch_size_; ++i) {
      if (st.cursor >= st.order.size()) {
        rng::shuffle(eng_, st.order);
        st.cursor = 0;
      }
      batch.push_back(st.order[st.cursor++]);
    }
    round[g] = std::move(batch);
  }
  return round;
}

}  // namespace omnidet::data
