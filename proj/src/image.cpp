#include "omnidet/image.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace omnidet::img {

namespace {

constexpr std::uint8_t kSignature[8] = {0x89, 'P', 'N', 'G', '\r', '\n',
                                        0x1a, '\n'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v >> 24));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) |
         (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) | p[3];
}

void append_chunk(std::vector<std::uint8_t>& out, const char type[4],
                  const std::uint8_t* data, std::size_t len) {
  put_u32(out, static_cast<std::uint32_t>(len));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  if (len) out.insert(out.end(), data, data + len);
  const uLong crc =
      crc32(0L, out.data() + start, static_cast<uInt>(out.size() - start));
  put_u32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

std::vector<std::uint8_t> encode_png(const GrayImage& image) {
  if (image.width <= 0 || image.height <= 0 ||
      image.pixels.size() !=
          static_cast<std::size_t>(image.width) * image.height)
    throw std::runtime_error("encode_png: inconsistent image dimensions");

  std::vector<std::uint8_t> out;
  out.insert(out.end(), kSignature, kSignature + 8);

  std::uint8_t ihdr[13];
  ihdr[0] = static_cast<std::uint8_t>(image.width >> 24);
  ihdr[1] = static_cast<std::uint8_t>(image.width >> 16);
  ihdr[2] = static_cast<std::uint8_t>(image.width >> 8);
  ihdr[3] = static_cast<std::uint8_t>(image.width);
  ihdr[4] = static_cast<std::uint8_t>(image.height >> 24);
  ihdr[5] = static_cast<std::uint8_t>(image.height >> 16);
  ihdr[6] = static_cast<std::uint8_t>(image.height >> 8);
  ihdr[7] = static_cast<std::uint8_t>(image.height);
  ihdr[8] = 8;   // bit depth
  ihdr[9] = 0;   // grayscale
  ihdr[10] = 0;  // deflate
  ihdr[11] = 0;  // adaptive filtering
  ihdr[12] = 0;  // no interlace
  append_chunk(out, "IHDR", ihdr, sizeof(ihdr));

  // Raw scanlines, filter byte 0 (None) per row.
  std::vector<std::uint8_t> raw;
  raw.reserve(static_cast<std::size_t>(image.height) * (image.width + 1));
  for (int y = 0; y < image.height; ++y) {
    raw.push_back(0);
    const std::uint8_t* row =
        image.pixels.data() + static_cast<std::size_t>(y) * image.width;
    raw.insert(raw.end(), row, row + image.width);
  }

  uLongf bound = compressBound(static_cast<uLong>(raw.size()));
  std::vector<std::uint8_t> compressed(bound);
  if (compress2(compressed.data(), &bound, raw.data(),
                static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw std::runtime_error("encode_png: deflate failed");
  append_chunk(out, "IDAT", compressed.data(), bound);
  append_chunk(out, "IEND", nullptr, 0);
  return out;
}

GrayImage decode_png(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kSignature, 8) != 0)
    throw std::runtime_error("decode_png: not a PNG file");

  GrayImage image;
  std::vector<std::uint8_t> idat;
  std::size_t pos = 8;
  bool saw_ihdr = false, saw_iend = false;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t len = get_u32(bytes.data() + pos);
    if (pos + 12 + len > bytes.size())
      throw std::runtime_error("decode_png: truncated chunk");
    const char* type = reinterpret_cast<const char*>(bytes.data() + pos + 4);
    const std::uint8_t* data = bytes.data() + pos + 8;
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw std::runtime_error("decode_png: bad IHDR");
      image.width = static_cast<int>(get_u32(data));
      image.height = static_cast<int>(get_u32(data + 4));
      if (data[8] != 8 || data[9] != 0)
        throw std::runtime_error(
            "decode_png: only 8-bit grayscale is supported");
      if (data[12] != 0)
        throw std::runtime_error("decode_png: interlace not supported");
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_iend = true;
      break;
    }
    pos += 12 + len;
  }
  if (!saw_ihdr || !saw_iend || image.width <= 0 || image.height <= 0)
    throw std::runtime_error("decode_png: missing chunks");

  const std::size_t stride = static_cast<std::size_t>(image.width) + 1;
  std::vector<std::uint8_t> raw(stride * image.height);
  uLongf raw_len = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_len, idat.data(),
                 static_cast<uLong>(idat.size())) != Z_OK ||
      raw_len != raw.size())
    throw std::runtime_error("decode_png: inflate failed");

  image.pixels.resize(static_cast<std::size_t>(image.width) * image.height);
  std::vector<std::uint8_t> prev(image.width, 0);
  for (int y = 0; y < image.height; ++y) {
    const std::uint8_t filter = raw[static_cast<std::size_t>(y) * stride];
    const std::uint8_t* src = raw.data() + static_cast<std::size_t>(y) * stride + 1;
    std::uint8_t* dst =
        image.pixels.data() + static_cast<std::size_t>(y) * image.width;
    for (int x = 0; x < image.width; ++x) {
      const int a = x > 0 ? dst[x - 1] : 0;  // left
      const int b = prev[x];                 // up
      const int c = x > 0 ? prev[x - 1] : 0; // up-left
      int v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v += a; break;
        case 2: v += b; break;
        case 3: v += (a + b) / 2; break;
        case 4: {
          const int p = a + b - c;
          const int pa = std::abs(p - a), pb = std::abs(p - b),
                    pc = std::abs(p - c);
          v += (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
          break;
        }
        default:
          throw std::runtime_error("decode_png: bad filter type");
      }
      dst[x] = static_cast<std::uint8_t>(v & 0xff);
    }
    std::memcpy(prev.data(), dst, image.width);
  }
  return image;
}

GrayImage read_png(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open image: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_png(bytes);
}

void write_png(const std::string& path, const GrayImage& image) {
  const std::vector<std::uint8_t> bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write image: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace omnidet::img
