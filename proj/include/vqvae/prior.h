#pragma once

#include <cstdint>
#include <optional>

#include "vqvae/autodiff.h"
#include "vqvae/nets.h"
#include "vqvae/quantizer.h"
#include "vqvae/random.h"

namespace vqvae {

// Masked-convolution (PixelCNN-style) prior over a latent index grid.
// Layer 0 uses a type-A mask (current position excluded); later layers use
// type-B masks. Positions are ordered row-major.
struct PriorSpec {
  int64_t height = 7;
  int64_t width = 7;
  int64_t num_codes = 32;
  int64_t layers = 4;
  int64_t hidden = 64;
  int64_t embed_dim = 64;
  int64_t kernel = 5;  // odd

  void Validate() const;
  bool operator==(const PriorSpec&) const = default;
};

enum class MaskKind { kA, kB };

// [out_c, in_c, k, k] mask admitting only taps strictly before the centre in
// raster order (kA) or up to and including it (kB).
Tensor CausalMask(int64_t out_channels, int64_t in_channels, int64_t kernel, MaskKind kind);

struct PriorModel {
  PriorSpec spec;
  ParamTable params;  // "prior.*"

  static PriorModel Create(const PriorSpec& spec, Rng& rng);
};

// Logits [B, K, H, W]; logits at (h, w) depend only on grid entries earlier
// in raster order.
Var PriorLogits(PriorModel& model, Tape& tape, const LatentGrid& grid);

// -log p(grid) in nats, averaged over the batch (summed over positions).
Var PriorNll(PriorModel& model, Tape& tape, const LatentGrid& grid);

// Ancestral sampling in raster order. Deterministic for a given rng state.
LatentGrid SamplePrior(PriorModel& model, Rng& rng, int64_t batch);

struct ElboBound {
  double recon_nll = 0.0;  // nats per image
  double prior_nll = 0.0;  // nats per image
  double total = 0.0;
  double bits_per_dim = 0.0;
};

// log p(x) >= log p(x | z_q(x)) + log p(z_q(x)), reported as a negative
// bound in nats and bits per data dimension, averaged over the batch. Without
// a prior the uniform ln K per position is used.
ElboBound ComputeElboBound(const Tensor& x, VqVae& model, PriorModel* prior);

// Bits/dim from per-image nats.
double BitsPerDim(double nats, int64_t data_dims);

}  // namespace vqvae
