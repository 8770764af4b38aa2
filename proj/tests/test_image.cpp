#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "omnidet/image.hpp"
#include "omnidet/rng.hpp"

using namespace omnidet;

namespace {

img::GrayImage random_image(rng::Engine& eng, int w, int h) {
  img::GrayImage im;
  im.width = w;
  im.height = h;
  im.pixels.resize(static_cast<std::size_t>(w) * h);
  for (auto& p : im.pixels)
    p = static_cast<std::uint8_t>(rng::below(eng, 256));
  return im;
}

}  // namespace

TEST_CASE("png encode/decode round trip recovers pixels exactly") {
  rng::Engine eng(21);
  for (const auto& [w, h] : {std::pair{1, 1}, {7, 3}, {128, 128}, {64, 17}}) {
    const auto im = random_image(eng, w, h);
    const auto bytes = img::encode_png(im);
    const auto back = img::decode_png(bytes);
    CHECK(back.width == w);
    CHECK(back.height == h);
    CHECK(back.pixels == im.pixels);
  }
}

TEST_CASE("png encoding is deterministic") {
  rng::Engine eng(22);
  const auto im = random_image(eng, 33, 29);
  CHECK(img::encode_png(im) == img::encode_png(im));
}

TEST_CASE("png file io") {
  const auto dir = std::filesystem::temp_directory_path() / "omnidet_png_test";
  std::filesystem::create_directories(dir);
  rng::Engine eng(23);
  const auto im = random_image(eng, 50, 40);
  const std::string path = (dir / "t.png").string();
  img::write_png(path, im);
  const auto back = img::read_png(path);
  CHECK(back.pixels == im.pixels);
  std::filesystem::remove_all(dir);
}

TEST_CASE("malformed png is rejected") {
  CHECK_THROWS_AS(img::decode_png({1, 2, 3}), std::runtime_error);
  rng::Engine eng(24);
  auto bytes = img::encode_png(random_image(eng, 8, 8));
  bytes.resize(bytes.size() / 2);  // truncate
  CHECK_THROWS_AS(img::decode_png(bytes), std::runtime_error);
  CHECK_THROWS_AS(img::read_png("/nonexistent/path.png"), std::runtime_error);
}
