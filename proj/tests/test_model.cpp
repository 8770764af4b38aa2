#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "omnidet/model.hpp"
#include "omnidet/rng.hpp"

using namespace omnidet;
using data::Granularity;

namespace {

nn::ModelConfig tiny_config(int image_size = 64) {
  nn::ModelConfig cfg;
  cfg.fpn_channels = 8;
  cfg.image_size = image_size;
  cfg.init_seed = 11;
  return cfg;
}

img::GrayImage random_image(rng::Engine& eng, int size) {
  img::GrayImage im;
  im.width = size;
  im.height = size;
  im.pixels.resize(static_cast<std::size_t>(size) * size);
  for (auto& p : im.pixels)
    p = static_cast<std::uint8_t>(rng::below(eng, 256));
  return im;
}

}  // namespace

TEST_CASE("forward shape contract and probability range") {
  nn::ModelConfig cfg = tiny_config(128);
  nn::Model model(cfg);
  rng::Engine eng(61);
  const auto preds = model.forward(random_image(eng, 128));
  REQUIRE(preds.shapes.size() == 3);
  CHECK(preds.shapes[0].points() == 16 * 16);
  CHECK(preds.shapes[1].points() == 8 * 8);
  CHECK(preds.shapes[2].points() == 4 * 4);
  REQUIRE(preds.prob.size() == 4);
  for (const auto& [g, maps] : preds.prob) {
    (void)g;
    for (const auto& level : maps)
      for (float p : level) {
        CHECK(p >= 0.0f);
        CHECK(p <= 1.0f);
      }
  }
  for (std::size_t l = 0; l < preds.reg.size(); ++l) {
    CHECK(preds.reg[l].size() ==
          static_cast<std::size_t>(preds.shapes[l].points()) * 4);
    for (float d : preds.reg[l]) CHECK(d > 0.0f);  // softplus keeps distances positive
  }

  img::GrayImage wrong = random_image(eng, 64);
  CHECK_THROWS_AS(model.forward(wrong), std::runtime_error);
}

TEST_CASE("forward is deterministic") {
  nn::Model model(tiny_config());
  rng::Engine eng(62);
  const auto image = random_image(eng, 64);
  const auto a = model.forward(image);
  const auto b = model.forward(image);
  for (const auto& [g, maps] : a.prob)
    for (std::size_t l = 0; l < maps.size(); ++l)
      CHECK(maps[l] == b.prob.at(g)[l]);
  for (std::size_t l = 0; l < a.reg.size(); ++l) CHECK(a.reg[l] == b.reg[l]);
}

TEST_CASE("checkpoint round trip reproduces forward bit-exactly") {
  const auto dir = std::filesystem::temp_directory_path() / "omnidet_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "m.ckpt").string();

  nn::Model model(tiny_config());
  rng::Engine eng(63);
  const auto image = random_image(eng, 64);
  const auto before = model.forward(image);
  model.save_checkpoint(path, 42, 0.375);

  nn::CheckpointInfo info;
  nn::Model loaded = nn::load_checkpoint(path, &info);
  CHECK(info.iteration == 42);
  CHECK(info.val_map == 0.375);
  CHECK(info.config.fpn_channels == 8);
  const auto after = loaded.forward(image);
  for (const auto& [g, maps] : before.prob)
    for (std::size_t l = 0; l < maps.size(); ++l)
      CHECK(maps[l] == after.prob.at(g)[l]);
  for (std::size_t l = 0; l < before.reg.size(); ++l)
    CHECK(before.reg[l] == after.reg[l]);

  CHECK_THROWS_AS(nn::load_checkpoint("/nonexistent.ckpt"),
                  std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("decode_level formula, threshold and clipping") {
  // Custom stride-4 grid puts a point exactly at (50, 50).
  assign::LevelShape shape{4, 16, 16};
  std::vector<float> scores(shape.points(), 0.0f);
  std::vector<float> reg(static_cast<std::size_t>(shape.points()) * 4, 1.0f);
  const int idx = 12 * 16 + 12;  // point (50, 50)
  scores[idx] = 0.9f;
  const int n = shape.points();
  reg[0 * n + idx] = 10;
  reg[1 * n + idx] = 10;
  reg[2 * n + idx] = 30;
  reg[3 * n + idx] = 50;

  auto dets = nn::decode_level(scores, reg, shape, 0.5, 128, 128);
  REQUIRE(dets.size() == 1);
  CHECK(dets[0].score == doctest::Approx(0.9));
  CHECK(dets[0].box.x0 == doctest::Approx(40));
  CHECK(dets[0].box.y0 == doctest::Approx(40));
  CHECK(dets[0].box.x1 == doctest::Approx(80));
  CHECK(dets[0].box.y1 == doctest::Approx(100));

  // All below threshold -> empty.
  CHECK(nn::decode_level(scores, reg, shape, 0.95, 128, 128).empty());

  // Border clipping.
  std::vector<float> s2(shape.points(), 0.0f);
  s2[0] = 0.8f;  // point (2, 2)
  std::vector<float> r2(static_cast<std::size_t>(n) * 4, 0.0f);
  r2[0 * n + 0] = 50;
  r2[1 * n + 0] = 50;
  r2[2 * n + 0] = 500;
  r2[3 * n + 0] = 500;
  const auto clipped = nn::decode_level(s2, r2, shape, 0.5, 64, 64);
  REQUIRE(clipped.size() == 1);
  CHECK(clipped[0].box.x0 == 0.0);
  CHECK(clipped[0].box.y0 == 0.0);
  CHECK(clipped[0].box.x1 == 64.0);
  CHECK(clipped[0].box.y1 == 64.0);
}

TEST_CASE("fusion: mean of branches, singleton identity, nms contract") {
  cotrain::BranchPredictions preds;
  preds.shapes = {assign::LevelShape{8, 4, 4}, assign::LevelShape{16, 2, 2},
                  assign::LevelShape{32, 1, 1}};
  for (const auto& sh : preds.shapes)
    preds.reg.emplace_back(static_cast<std::size_t>(sh.points()) * 4, 3.0f);
  preds.prob[Granularity::box] = make_level_maps(preds.shapes, 0.2f);
  preds.prob[Granularity::dot] = make_level_maps(preds.shapes, 0.4f);

  nn::ModelConfig cfg = tiny_config(32);
  cfg.enabled_branches = {Granularity::box, Granularity::dot};
  cfg.score_threshold = 0.25;  // mean 0.3 clears it, box alone (0.2) does not

  const auto fused = nn::fuse_and_detect(preds, cfg);
  CHECK(!fused.empty());
  for (const auto& d : fused) CHECK(d.score == doctest::Approx(0.3));
  for (std::size_t i = 0; i < fused.size(); ++i)
    for (std::size_t j = i + 1; j < fused.size(); ++j)
      CHECK(geom::iou(fused[i].box, fused[j].box) <= cfg.nms_iou + 1e-12);

  // Identical branch maps: fusion equals any single branch.
  cotrain::BranchPredictions same = preds;
  same.prob[Granularity::dot] = same.prob[Granularity::box];
  cfg.score_threshold = 0.1;
  const auto fused_same = nn::fuse_and_detect(same, cfg);
  const auto single = nn::fuse_and_detect(same, cfg, {Granularity::box});
  REQUIRE(fused_same.size() == single.size());
  for (std::size_t i = 0; i < single.size(); ++i)
    CHECK(fused_same[i].score == doctest::Approx(single[i].score));

  // Truncation to max_detections.
  cfg.max_detections = 2;
  CHECK(nn::fuse_and_detect(preds, cfg).size() <= 2);
}

TEST_CASE("head_depth is pinned to five layers") {
  nn::ModelConfig cfg = tiny_config();
  cfg.head_depth = 4;
  CHECK_THROWS_AS(nn::Model{cfg}, std::invalid_argument);
  cfg.head_depth = 5;
  cfg.enabled_branches = {};
  CHECK_THROWS_AS(nn::Model{cfg}, std::invalid_argument);
}

TEST_CASE("conv gradient check against finite differences") {
  // Small conv, double-checked numerically through the float pipeline.
  rng::Engine eng(64);
  nn::Conv conv;
  conv.init(2, 3, 3, 1, eng);
  nn::Tensor x(2, 5, 5);
  for (float& v : x.v) v = static_cast<float>(rng::uniform(eng, -1, 1));

  nn::ConvCache cache;
  nn::Tensor y = nn::conv_forward(conv, x, &cache);
  // Loss = sum(y * r) for fixed random r.
  nn::Tensor r(y.c, y.h, y.w);
  for (float& v : r.v) v = static_cast<float>(rng::uniform(eng, -1, 1));

  nn::Tensor dx = nn::conv_backward(conv, r, cache);

  // Finite differences on a few weights and inputs.
  auto loss_of = [&]() {
    const nn::Tensor out = nn::conv_forward(conv, x, nullptr);
    double s = 0;
    for (std::size_t i = 0; i < out.v.size(); ++i)
      s += static_cast<double>(out.v[i]) * r.v[i];
    return s;
  };
  const float h = 1e-3f;
  for (std::size_t k = 0; k < conv.w.size(); k += conv.w.size() / 7 + 1) {
    const float orig = conv.w[k];
    conv.w[k] = orig + h;
    const double up = loss_of();
    conv.w[k] = orig - h;
    const double down = loss_of();
    conv.w[k] = orig;
    const double numeric = (up - down) / (2 * h);
    CHECK(std::abs(conv.gw[k] - numeric) <
          1e-2 * std::max(1.0, std::abs(numeric)));
  }
  for (std::size_t k = 0; k < x.v.size(); k += x.v.size() / 7 + 1) {
    const float orig = x.v[k];
    x.v[k] = orig + h;
    const double up = loss_of();
    x.v[k] = orig - h;
    const double down = loss_of();
    x.v[k] = orig;
    const double numeric = (up - down) / (2 * h);
    CHECK(std::abs(dx.v[k] - numeric) <
          1e-2 * std::max(1.0, std::abs(numeric)));
  }
}

TEST_CASE("stop-gradient: supervising one branch leaves the others untouched") {
  nn::ModelConfig cfg = tiny_config();
  cfg.enabled_branches = {Granularity::box, Granularity::dot};
  nn::Model model(cfg);
  rng::Engine eng(65);
  const auto image = random_image(eng, 64);

  nn::ForwardCache cache;
  const auto preds = model.forward(nn::image_to_tensor(image), &cache);

  nn::BranchGrads grads;
  grads.d_logit[Granularity::box] = make_level_maps(preds.shapes);
  for (auto& level : grads.d_logit[Granularity::box])
    for (float& v : level) v = static_cast<float>(rng::uniform(eng, -1, 1));
  model.backward(cache, grads);

  double box_sq = 0, dot_sq = 0, reg_sq = 0, trunk_sq = 0;
  model.visit_grads([&](const std::string& name, std::vector<float>& g) {
    double s = 0;
    for (float v : g) s += static_cast<double>(v) * v;
    if (name.rfind("cls.box", 0) == 0) box_sq += s;
    else if (name.rfind("cls.dot", 0) == 0) dot_sq += s;
    else if (name.rfind("reg.", 0) == 0) reg_sq += s;
    else trunk_sq += s;
  });
  CHECK(box_sq > 0.0);
  CHECK(trunk_sq > 0.0);
  CHECK(dot_sq == 0.0);  // exactly zero: stop-gradient by construction
  CHECK(reg_sq == 0.0);
}

TEST_CASE("sgd step and zero_grads change parameters deterministically") {
  nn::Model a(tiny_config()), b(tiny_config());
  rng::Engine eng(66);
  const auto image = random_image(eng, 64);
  for (nn::Model* m : {&a, &b}) {
    nn::ForwardCache cache;
    const auto preds = m->forward(nn::image_to_tensor(image), &cache);
    nn::BranchGrads grads;
    grads.d_logit[Granularity::box] = make_level_maps(preds.shapes, 0.5f);
    m->backward(cache, grads);
    m->sgd_step(0.01f, 0.9f);
  }
  bool equal = true;
  std::vector<std::vector<float>> pa;
  a.visit_params([&](const std::string&, std::vector<float>& v) {
    pa.push_back(v);
  });
  std::size_t i = 0;
  b.visit_params([&](const std::string&, std::vector<float>& v) {
    if (pa[i++] != v) equal = false;
  });
  CHECK(equal);
}
