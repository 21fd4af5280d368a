#include "vqvae/dataset.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>

namespace vqvae {
namespace {

namespace fs = std::filesystem;

// Upper bound on elements accepted from a file header (4 GiB of pixels).
constexpr uint64_t kMaxElements = uint64_t{1} << 32;

std::vector<uint8_t> ReadAll(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

uint32_t ReadBigEndian32(const uint8_t* p) {
  return (uint32_t{p[0]} << 24) | (uint32_t{p[1]} << 16) | (uint32_t{p[2]} << 8) | uint32_t{p[3]};
}

void PutBigEndian32(std::vector<uint8_t>& out, uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<uint8_t>(v >> shift));
}

// Netpbm header token reader; skips whitespace and '#' comments.
class PnmHeader {
 public:
  PnmHeader(const std::vector<uint8_t>& bytes, const fs::path& path) : b_(bytes), path_(path) {}

  std::string Token() {
    SkipSpace();
    std::string tok;
    while (pos_ < b_.size() && !std::isspace(b_[pos_]) && b_[pos_] != '#') tok.push_back(static_cast<char>(b_[pos_++]));
    if (tok.empty()) throw DataError("truncated header in '" + path_.string() + "'");
    return tok;
  }

  int64_t Number() {
    const std::string tok = Token();
    int64_t v = 0;
    for (char c : tok) {
      if (c < '0' || c > '9' || v > (int64_t{1} << 31)) {
        throw DataError("bad header number '" + tok + "' in '" + path_.string() + "'");
      }
      v = v * 10 + (c - '0');
    }
    return v;
  }

  // Exactly one whitespace byte separates the header from the raster.
  size_t RasterStart() {
    if (pos_ >= b_.size() || !std::isspace(b_[pos_])) {
      throw DataError("malformed header in '" + path_.string() + "'");
    }
    return pos_ + 1;
  }

 private:
  void SkipSpace() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(b_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<uint8_t>& b_;
  const fs::path& path_;
  size_t pos_ = 0;
};

bool IsPnm(const fs::path& p) {
  const std::string ext = p.extension().string();
  return ext == ".pgm" || ext == ".ppm" || ext == ".PGM" || ext == ".PPM";
}

}  // namespace

float ByteToPixel(uint8_t v) { return static_cast<float>(v) / 255.0f - 0.5f; }

uint8_t PixelToByte(float x) {
  const double clamped = std::clamp(static_cast<double>(x), -0.5, 0.5);
  return static_cast<uint8_t>(std::floor((clamped + 0.5) * 255.0 + 0.5));
}

Dataset LoadIdx(const fs::path& path) {
  const std::vector<uint8_t> bytes = ReadAll(path);
  if (bytes.size() < 4) throw DataError("'" + path.string() + "' is too short for an IDX header");
  const uint32_t magic = ReadBigEndian32(bytes.data());
  if (magic != 0x00000803) {
    char hex[16];
    std::snprintf(hex, sizeof(hex), "0x%08x", magic);
    throw DataError("'" + path.string() + "' has IDX magic " + hex +
                    ", expected 0x00000803 (u8, 3 dims)");
  }
  if (bytes.size() < 16) throw DataError("'" + path.string() + "' has a truncated IDX header");
  const uint64_t n = ReadBigEndian32(bytes.data() + 4);
  const uint64_t h = ReadBigEndian32(bytes.data() + 8);
  const uint64_t w = ReadBigEndian32(bytes.data() + 12);
  if (h == 0 || w == 0 || h * w > kMaxElements || (n != 0 && n > kMaxElements / (h * w))) {
    throw DataError("'" + path.string() + "' declares dimensions " + std::to_string(n) + "x" +
                    std::to_string(h) + "x" + std::to_string(w) + " that overflow the limit");
  }
  const uint64_t count = n * h * w;
  if (bytes.size() - 16 < count) {
    throw DataError("'" + path.string() + "' is truncated: header promises " +
                    std::to_string(count) + " pixels, file holds " +
                    std::to_string(bytes.size() - 16));
  }
  Dataset ds;
  ds.source = path.string();
  ds.images = Tensor(Shape{static_cast<int64_t>(n), 1, static_cast<int64_t>(h), static_cast<int64_t>(w)});
  for (uint64_t i = 0; i < count; ++i) ds.images.data[i] = ByteToPixel(bytes[16 + i]);
  return ds;
}

void WriteIdx(const fs::path& path, int64_t n, int64_t h, int64_t w,
              std::span<const uint8_t> bytes) {
  if (n < 0 || h <= 0 || w <= 0 || static_cast<int64_t>(bytes.size()) != n * h * w) {
    throw ShapeError("write_idx: byte count does not match dimensions");
  }
  std::vector<uint8_t> out;
  out.reserve(16 + bytes.size());
  PutBigEndian32(out, 0x00000803);
  PutBigEndian32(out, static_cast<uint32_t>(n));
  PutBigEndian32(out, static_cast<uint32_t>(h));
  PutBigEndian32(out, static_cast<uint32_t>(w));
  out.insert(out.end(), bytes.begin(), bytes.end());
  std::ofstream f(path, std::ios::binary);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw DataError("failed to write '" + path.string() + "'");
}

Dataset LoadPpm(const fs::path& path) {
  const std::vector<uint8_t> bytes = ReadAll(path);
  PnmHeader header(bytes, path);
  const std::string magic = header.Token();
  int64_t channels = 0;
  if (magic == "P5") {
    channels = 1;
  } else if (magic == "P6") {
    channels = 3;
  } else {
    throw DataError("'" + path.string() + "' is not a binary PGM/PPM (magic '" + magic + "')");
  }
  const int64_t w = header.Number();
  const int64_t h = header.Number();
  const int64_t maxval = header.Number();
  if (w <= 0 || h <= 0) throw DataError("'" + path.string() + "' has an empty raster");
  if (maxval != 255) {
    throw DataError("'" + path.string() + "' has maxval " + std::to_string(maxval) +
                    ", only 255 is supported");
  }
  const size_t start = header.RasterStart();
  const size_t count = static_cast<size_t>(w * h * channels);
  if (bytes.size() < start || bytes.size() - start < count) {
    throw DataError("'" + path.string() + "' is truncated");
  }
  Dataset ds;
  ds.source = path.string();
  ds.images = Tensor(Shape{1, channels, h, w});
  // Interleaved RGB -> planar.
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t c = 0; c < channels; ++c) {
        ds.images.at(0, c, y, x) = ByteToPixel(bytes[start + static_cast<size_t>((y * w + x) * channels + c)]);
      }
    }
  }
  return ds;
}

Dataset LoadPpmDir(const fs::path& dir) {
  std::vector<fs::path> files;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    if (entry.is_regular_file() && IsPnm(entry.path())) files.push_back(entry.path());
  }
  if (ec) throw DataError("cannot list '" + dir.string() + "': " + ec.message());
  if (files.empty()) throw DataError("no .pgm/.ppm files in '" + dir.string() + "'");
  std::sort(files.begin(), files.end());

  Dataset ds;
  ds.source = dir.string();
  for (size_t i = 0; i < files.size(); ++i) {
    Dataset one = LoadPpm(files[i]);
    if (i == 0) {
      Shape shape = one.images.shape;
      shape[0] = static_cast<int64_t>(files.size());
      ds.images = Tensor(shape);
    } else if (!std::equal(one.images.shape.begin() + 1, one.images.shape.end(),
                           ds.images.shape.begin() + 1)) {
      throw DataError("'" + files[i].string() + "' has shape " + ShapeToString(one.images.shape) +
                      ", expected " + ShapeToString(ds.images.shape) + " per image");
    }
    std::copy(one.images.data.begin(), one.images.data.end(),
              ds.images.data.begin() + static_cast<int64_t>(i) * one.images.numel());
  }
  return ds;
}

void SavePpm(const Tensor& image, const fs::path& path) {
  Shape s = image.shape;
  if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
  if (s.size() != 3 || (s[0] != 1 && s[0] != 3) || s[1] <= 0 || s[2] <= 0) {
    throw ShapeError("save_ppm: need [C, H, W] with C in {1, 3}, got " + ShapeToString(image.shape));
  }
  const int64_t c = s[0], h = s[1], w = s[2];
  std::string header = std::string(c == 1 ? "P5" : "P6") + "\n" + std::to_string(w) + " " +
                       std::to_string(h) + "\n255\n";
  std::vector<uint8_t> raster(static_cast<size_t>(c * h * w));
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t ch = 0; ch < c; ++ch) {
        raster[static_cast<size_t>((y * w + x) * c + ch)] = PixelToByte(image[(ch * h + y) * w + x]);
      }
    }
  }
  std::ofstream f(path, std::ios::binary);
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  f.write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  if (!f) throw DataError("failed to write '" + path.string() + "'");
}

Dataset LoadImages(const fs::path& path) {
  if (fs::is_directory(path)) return LoadPpmDir(path);
  if (IsPnm(path)) return LoadPpm(path);
  return LoadIdx(path);
}

}  // namespace vqvae
