#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "omnidet/geometry.hpp"
#include "omnidet/rng.hpp"

using namespace omnidet;
using geom::Box;
using geom::Detection;

namespace {

Box random_box(rng::Engine& eng, double extent = 20.0) {
  const double x0 = rng::uniform(eng, 0.0, extent);
  const double y0 = rng::uniform(eng, 0.0, extent);
  const double w = rng::uniform(eng, 0.1, extent);
  const double h = rng::uniform(eng, 0.1, extent);
  return Box{x0, y0, x0 + w, y0 + h};
}

// Monte-Carlo rasterization estimate of IoU via common uniform samples over
// the joint enclosing box.
double mc_iou(const Box& a, const Box& b, rng::Engine& eng, int samples) {
  const double x0 = std::min(a.x0, b.x0), y0 = std::min(a.y0, b.y0);
  const double x1 = std::max(a.x1, b.x1), y1 = std::max(a.y1, b.y1);
  int in_a = 0, in_b = 0, in_both = 0;
  for (int i = 0; i < samples; ++i) {
    const double x = rng::uniform(eng, x0, x1);
    const double y = rng::uniform(eng, y0, y1);
    const bool pa = x >= a.x0 && x < a.x1 && y >= a.y0 && y < a.y1;
    const bool pb = x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
    in_a += pa;
    in_b += pb;
    in_both += pa && pb;
  }
  const int uni = in_a + in_b - in_both;
  return uni == 0 ? 0.0 : static_cast<double>(in_both) / uni;
}

}  // namespace

TEST_CASE("iou hand-derived values") {
  CHECK(geom::iou(Box{0, 0, 2, 2}, Box{0, 0, 2, 2}) == doctest::Approx(1.0));
  CHECK(geom::iou(Box{0, 0, 1, 1}, Box{5, 5, 6, 6}) == doctest::Approx(0.0));
  CHECK(geom::iou(Box{0, 0, 2, 2}, Box{1, 1, 3, 3}) ==
        doctest::Approx(1.0 / 7.0).epsilon(1e-12));
  // Degenerate boxes have zero union.
  CHECK(geom::iou(Box{1, 1, 1, 1}, Box{1, 1, 1, 1}) == 0.0);
}

TEST_CASE("giou hand-derived values") {
  CHECK(geom::giou(Box{0, 0, 2, 2}, Box{0, 0, 2, 2}) == doctest::Approx(1.0));
  CHECK(geom::giou(Box{0, 0, 2, 2}, Box{1, 1, 3, 3}) ==
        doctest::Approx(-5.0 / 63.0).epsilon(1e-12));
  CHECK(geom::giou(Box{0, 0, 1, 1}, Box{2, 0, 3, 1}) ==
        doctest::Approx(-1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("iou/giou properties on random pairs") {
  rng::Engine eng(7);
  for (int i = 0; i < 200; ++i) {
    const Box a = random_box(eng), b = random_box(eng);
    const double ab = geom::iou(a, b);
    CHECK(ab == doctest::Approx(geom::iou(b, a)).epsilon(1e-12));
    CHECK(ab >= 0.0);
    CHECK(ab <= 1.0);
    CHECK(geom::giou(a, b) <= ab + 1e-12);
    CHECK(geom::iou(a, a) == doctest::Approx(1.0));
  }
}

TEST_CASE("monte-carlo rasterization agrees with closed form") {
  rng::Engine eng(11);
  for (int i = 0; i < 50; ++i) {
    const Box a = random_box(eng), b = random_box(eng);
    const double estimate = mc_iou(a, b, eng, 400000);
    CHECK(std::abs(estimate - geom::iou(a, b)) < 0.01);
  }
}

TEST_CASE("nms hand-derived suppression") {
  const Detection a{Box{0, 0, 10, 10}, 0.9};
  const Detection b{Box{1, 1, 11, 11}, 0.8};
  // IoU = 81/119 ~ 0.6807
  CHECK(geom::iou(a.box, b.box) == doctest::Approx(81.0 / 119.0));

  auto kept = geom::nms({a, b}, 0.6);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].score == doctest::Approx(0.9));

  kept = geom::nms({a, b}, 0.7);
  CHECK(kept.size() == 2);

  CHECK(geom::nms({}, 0.5).empty());
  kept = geom::nms({a}, 0.5);
  REQUIRE(kept.size() == 1);
}

TEST_CASE("nms properties: subset, sorted, pairwise, tie order") {
  rng::Engine eng(13);
  for (int round = 0; round < 50; ++round) {
    std::vector<Detection> dets;
    const int n = 1 + static_cast<int>(rng::below(eng, 20));
    for (int i = 0; i < n; ++i)
      dets.push_back(Detection{random_box(eng, 8.0), rng::uniform(eng)});
    const double thr = rng::uniform(eng, 0.1, 0.9);
    const auto kept = geom::nms(dets, thr);
    CHECK(kept.size() <= dets.size());
    for (std::size_t i = 1; i < kept.size(); ++i)
      CHECK(kept[i - 1].score >= kept[i].score);
    for (std::size_t i = 0; i < kept.size(); ++i)
      for (std::size_t j = i + 1; j < kept.size(); ++j)
        CHECK(geom::iou(kept[i].box, kept[j].box) <= thr + 1e-12);
  }

  // Equal scores: earlier input wins.
  const Detection first{Box{0, 0, 4, 4}, 0.5};
  const Detection second{Box{0.1, 0, 4.1, 4}, 0.5};
  const auto kept = geom::nms({first, second}, 0.3);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].box.x0 == doctest::Approx(0.0));
}

TEST_CASE("box_from_mask pixel-edge convention") {
  geom::InstanceMask m;
  m.width = 8;
  m.height = 8;
  m.bits.assign(64, 0);
  for (int y = 2; y <= 4; ++y)
    for (int x = 2; x <= 4; ++x) m.set(x, y);
  const Box b = geom::box_from_mask(m);
  CHECK(b.x0 == 2);
  CHECK(b.y0 == 2);
  CHECK(b.x1 == 5);
  CHECK(b.y1 == 5);

  geom::InstanceMask single;
  single.width = 10;
  single.height = 10;
  single.bits.assign(100, 0);
  single.set(7, 3);
  const Box s = geom::box_from_mask(single);
  CHECK(s.x0 == 7);
  CHECK(s.y0 == 3);
  CHECK(s.x1 == 8);
  CHECK(s.y1 == 4);

  geom::InstanceMask l_shape;
  l_shape.width = 12;
  l_shape.height = 12;
  l_shape.bits.assign(144, 0);
  l_shape.set(0, 0);
  l_shape.set(4, 9);
  const Box lb = geom::box_from_mask(l_shape);
  CHECK(lb.x0 == 0);
  CHECK(lb.y0 == 0);
  CHECK(lb.x1 == 5);
  CHECK(lb.y1 == 10);

  geom::InstanceMask empty;
  empty.width = 4;
  empty.height = 4;
  empty.bits.assign(16, 0);
  CHECK_THROWS_WITH_AS(geom::box_from_mask(empty), "empty mask",
                       std::invalid_argument);
}

TEST_CASE("dot_from_mask centroids") {
  geom::InstanceMask m;
  m.width = 8;
  m.height = 8;
  m.bits.assign(64, 0);
  for (int y = 2; y <= 4; ++y)
    for (int x = 2; x <= 4; ++x) m.set(x, y);
  const geom::Dot d = geom::dot_from_mask(m);
  CHECK(d.x == doctest::Approx(3.5));
  CHECK(d.y == doctest::Approx(3.5));

  geom::InstanceMask single;
  single.width = 10;
  single.height = 10;
  single.bits.assign(100, 0);
  single.set(7, 3);
  const geom::Dot ds = geom::dot_from_mask(single);
  CHECK(ds.x == doctest::Approx(7.5));
  CHECK(ds.y == doctest::Approx(3.5));

  geom::InstanceMask two;
  two.width = 12;
  two.height = 2;
  two.bits.assign(24, 0);
  two.set(0, 0);
  two.set(10, 0);
  const geom::Dot dt = geom::dot_from_mask(two);
  CHECK(dt.x == doctest::Approx(5.5));
  CHECK(dt.y == doctest::Approx(0.5));

  geom::InstanceMask empty;
  empty.width = 4;
  empty.height = 4;
  empty.bits.assign(16, 0);
  CHECK_THROWS_AS(geom::dot_from_mask(empty), std::invalid_argument);
}

TEST_CASE("mask-of-box round trip is the identity on filled rectangles") {
  rng::Engine eng(17);
  for (int i = 0; i < 30; ++i) {
    const int x0 = static_cast<int>(rng::below(eng, 10));
    const int y0 = static_cast<int>(rng::below(eng, 10));
    const int w = 1 + static_cast<int>(rng::below(eng, 10));
    const int h = 1 + static_cast<int>(rng::below(eng, 10));
    const Box b{static_cast<double>(x0), static_cast<double>(y0),
                static_cast<double>(x0 + w), static_cast<double>(y0 + h)};
    const auto m = geom::mask_from_box(b, 24, 24);
    const Box back = geom::box_from_mask(m);
    CHECK(back.x0 == b.x0);
    CHECK(back.y0 == b.y0);
    CHECK(back.x1 == b.x1);
    CHECK(back.y1 == b.y1);
    CHECK(m.foreground_count() == static_cast<std::size_t>(w) * h);
  }
}

TEST_CASE("polygon fill uses even-odd rule at pixel centers") {
  // Axis-aligned square covering pixels 1..3 in both axes.
  const auto m = geom::mask_from_polygon({{1, 1}, {4, 1}, {4, 4}, {1, 4}}, 6, 6);
  CHECK(m.foreground_count() == 9);
  CHECK(m.at(1, 1));
  CHECK(m.at(3, 3));
  CHECK(!m.at(0, 0));
  CHECK(!m.at(4, 4));

  // Right triangle with pixel centers strictly inside or outside:
  // (x+0.5, y+0.5) is inside exactly when x + y <= 4.
  const auto tri = geom::mask_from_polygon(
      {{0.2, 0.2}, {5.8, 0.2}, {0.2, 5.8}}, 8, 8);
  CHECK(tri.foreground_count() == 15);
  CHECK(tri.at(0, 0));
  CHECK(tri.at(4, 0));
  CHECK(tri.at(0, 4));
  CHECK(!tri.at(3, 2));
  CHECK(!tri.at(5, 0));
}
