#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "vqvae/tensor.h"

namespace vqvae {

// Images [N, C, H, W] with values in [-0.5, 0.5].
struct Dataset {
  Tensor images;
  std::string source;
  std::string split = "train";

  int64_t size() const { return images.rank() == 4 ? images.dim(0) : 0; }
};

// v / 255 - 0.5, exact for every byte value.
float ByteToPixel(uint8_t v);
// Clamps to [-0.5, 0.5], then inverts ByteToPixel with round-half-up.
uint8_t PixelToByte(float x);

// IDX u8 image tensor (magic 0x00000803): N x H x W, loaded as [N, 1, H, W].
Dataset LoadIdx(const std::filesystem::path& path);
// Writes [N, H, W] bytes in IDX u8 format.
void WriteIdx(const std::filesystem::path& path, int64_t n, int64_t h, int64_t w,
              std::span<const uint8_t> bytes);

// Binary PGM (P5) or PPM (P6), maxval 255, as a [1, C, H, W] dataset.
Dataset LoadPpm(const std::filesystem::path& path);
// Every .pgm/.ppm file of a directory, sorted by name. All must share a shape.
Dataset LoadPpmDir(const std::filesystem::path& dir);
// Writes a [C, H, W] or [1, C, H, W] tensor as P5 (C == 1) or P6 (C == 3).
void SavePpm(const Tensor& image, const std::filesystem::path& path);

// Directory -> LoadPpmDir, .pgm/.ppm -> LoadPpm, anything else -> LoadIdx.
Dataset LoadImages(const std::filesystem::path& path);

}  // namespace vqvae
