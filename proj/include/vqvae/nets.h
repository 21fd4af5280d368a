#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include "vqvae/autodiff.h"
#include "vqvae/quantizer.h"
#include "vqvae/random.h"

namespace vqvae {

// Pixel values live in [-0.5, 0.5]; byte v maps to v / 255 - 0.5.
inline constexpr float kPixelHalfBin = 0.5f / 255.0f;
// Fixed Gaussian scale for which the NLL is the squared error plus a constant.
inline constexpr float kGaussianSigma = 0.70710678118654752f;

enum class Likelihood { kGaussian, kDiscretizedLogistic };

std::string_view LikelihoodName(Likelihood kind);
Likelihood ParseLikelihood(std::string_view name);

struct ModelSpec {
  int64_t in_channels = 1;
  int64_t height = 28;
  int64_t width = 28;
  int64_t hidden = 256;
  int64_t stages = 2;  // stride-2, 4x4 down/up-sampling convolutions
  int64_t res_blocks = 2;
  int64_t embedding_dim = 64;
  int64_t num_codes = 512;
  float beta = kDefaultBeta;
  float gamma = kDefaultGamma;
  bool ema = false;
  Likelihood likelihood = Likelihood::kGaussian;

  // Throws ConfigError on non-positive sizes or indivisible spatial dims.
  void Validate() const;
  int64_t latent_height() const { return height >> stages; }
  int64_t latent_width() const { return width >> stages; }
  int64_t output_channels() const {
    return likelihood == Likelihood::kGaussian ? in_channels : 2 * in_channels;
  }
  int64_t data_dims() const { return in_channels * height * width; }

  bool operator==(const ModelSpec&) const = default;
};

// Named parameters. std::map keeps addresses stable and iteration ordered,
// so tapes can bind entries by reference and serialization is canonical.
using ParamTable = std::map<std::string, Tensor>;

struct VqVae {
  ModelSpec spec;
  ParamTable params;  // encoder ("enc.*") and decoder ("dec.*")
  Codebook codebook;

  // He-normal conv kernels, zero biases, codebook per Codebook::Create.
  static VqVae Create(const ModelSpec& spec, Rng& rng);
};

// x [B, C, H, W] -> z_e [B, D, H / 2^s, W / 2^s].
Var Encode(const ModelSpec& spec, ParamTable& params, Var x);
// z_q [B, D, h, w] -> distribution parameters [B, output_channels, H, W].
Var Decode(const ModelSpec& spec, ParamTable& params, Var z_q);

// h + conv1x1(relu(conv3x3(relu(h)))), parameters under |prefix|.
Var ResidualBlock(ParamTable& params, const std::string& prefix, Var h);

// -log p(x | params) in nats, averaged over the batch (summed over pixels).
// Gaussian uses |sigma|; the logistic variant reads means from channels
// [0, C) and log-scales from [C, 2C).
Var ReconstructionNll(Var dist_params, const Tensor& x, Likelihood kind,
                      float sigma = kGaussianSigma);

// Discretized logistic over 256 bins covering [-0.5, 0.5], summed over every
// pixel of the batch. params [B, 2C, H, W], x [B, C, H, W].
Var DiscretizedLogisticNll(Var params, const Tensor& x);

// Point reconstruction (the distribution mean), [B, C, H, W].
Tensor DistributionMean(const Tensor& dist_params, Likelihood kind);

// Parameter names belonging to the encoder and decoder respectively.
bool IsEncoderParam(const std::string& name);
bool IsDecoderParam(const std::string& name);

}  // namespace vqvae
