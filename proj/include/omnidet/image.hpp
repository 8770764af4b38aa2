#pragma once

// Minimal 8-bit grayscale PNG reader/writer (zlib-backed). Only what the
// dataset pipeline needs: color type 0, bit depth 8, no interlace.

#include <cstdint>
#include <string>
#include <vector>

namespace omnidet::img {

struct GrayImage {
  int width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, size width*height

  std::uint8_t at(int x, int y) const {
    return pixels[static_cast<std::size_t>(y) * width + x];
  }
  void set(int x, int y, std::uint8_t v) {
    pixels[static_cast<std::size_t>(y) * width + x] = v;
  }
};

// Throws std::runtime_error on malformed or unsupported files.
GrayImage read_png(const std::string& path);
void write_png(const std::string& path, const GrayImage& image);

// In-memory encode (deterministic byte stream; used for byte-identity tests).
std::vector<std::uint8_t> encode_png(const GrayImage& image);
GrayImage decode_png(const std::vector<std::uint8_t>& bytes);

}  // namespace omnidet::img
