#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "vqvae/autodiff.h"
#include "vqvae/random.h"
#include "vqvae/tensor.h"

namespace vqvae {

inline constexpr float kDefaultBeta = 0.25f;
inline constexpr float kDefaultGamma = 0.99f;

// K x D embedding table plus the running statistics used by the EMA update.
struct Codebook {
  Tensor embeddings;             // [K, D]
  float beta = kDefaultBeta;     // commitment weight
  bool ema_enabled = false;
  float gamma = kDefaultGamma;   // EMA decay
  std::vector<float> ema_counts; // N_i, length K
  Tensor ema_sums;               // m_i, [K, D]

  // Embeddings drawn i.i.d. from U[-1/K, 1/K]. With EMA the state starts at
  // N_i = 1, m_i = e_i. Without EMA the embeddings are a trainable leaf.
  static Codebook Create(int64_t num_codes, int64_t dim, float beta, bool ema, float gamma,
                         Rng& rng);

  int64_t num_codes() const { return embeddings.rank() == 2 ? embeddings.dim(0) : 0; }
  int64_t dim() const { return embeddings.rank() == 2 ? embeddings.dim(1) : 0; }
};

// Code indices for a batch of latent maps; entries lie in [0, num_codes).
struct LatentGrid {
  int64_t batch = 0;
  int64_t height = 0;
  int64_t width = 0;
  int64_t num_codes = 0;
  std::vector<int32_t> indices;  // row-major (b, h, w)

  LatentGrid() = default;
  LatentGrid(int64_t b, int64_t h, int64_t w, int64_t k)
      : batch(b), height(h), width(w), num_codes(k),
        indices(static_cast<size_t>(b * h * w), 0) {}

  int32_t& at(int64_t b, int64_t h, int64_t w) {
    return indices[static_cast<size_t>((b * height + h) * width + w)];
  }
  int32_t at(int64_t b, int64_t h, int64_t w) const {
    return indices[static_cast<size_t>((b * height + h) * width + w)];
  }
  int64_t positions() const { return height * width; }

  // Throws if any index is outside [0, num_codes) or the size is off.
  void Validate() const;
  bool operator==(const LatentGrid&) const = default;
};

// argmin_j ||z - e_j||^2, lowest index on ties.
int32_t NearestCode(std::span<const float> z, const Codebook& codebook);

// Assignment of every latent vector of z_e [B, D, H, W]; no gradient.
LatentGrid AssignCodes(const Tensor& z_e, const Codebook& codebook);

// Replaces each latent vector by its assigned embedding, result [B, D, H, W].
Tensor LookupCodes(const LatentGrid& grid, const Codebook& codebook);

struct Quantized {
  Var z_q;
  LatentGrid grid;
};

// Straight-through quantization: the forward value is the nearest embedding,
// the backward pass copies dL/dz_q into dL/dz_e unchanged, and the embedding
// table gets nothing from this path.
Quantized Quantize(Var z_e, const Codebook& codebook);

struct VqLoss {
  Var codebook;    // mean over latents of ||sg[z_e] - e||^2, moves the embeddings
  Var commitment;  // mean over latents of ||z_e - sg[e]||^2, moves the encoder
};

// |embeddings| is the tape binding of the codebook table (a trainable leaf
// when EMA is off).
VqLoss VqLossTerms(Var z_e, Var embeddings, const LatentGrid& grid);

// recon_nll + codebook + beta * commitment. The codebook term is dropped when
// the dictionary is maintained by EMA instead.
Var TotalLoss(Var recon_nll, const VqLoss& vq, float beta, bool ema_enabled);

// One EMA step using the batch assignments in |grid|:
//   N_i <- gamma N_i + (1 - gamma) n_i
//   m_i <- gamma m_i + (1 - gamma) sum_j z_ij
//   e_i <- m_i / N_i
// Codes whose count has decayed to exactly zero keep their embedding.
void EmaUpdate(Codebook& codebook, const Tensor& z_e, const LatentGrid& grid, float gamma);

// KL(q(z|x) || uniform) for a one-hot posterior over K codes: ln K nats.
double KlToUniformPrior(int64_t num_codes);

struct CodebookStats {
  std::vector<int64_t> histogram;
  double perplexity = 1.0;
};

class CodeUsage {
 public:
  explicit CodeUsage(int64_t num_codes) : counts_(static_cast<size_t>(num_codes), 0) {}
  void Add(const LatentGrid& grid);
  // exp(entropy) of the empirical code distribution; 1 when nothing was added.
  CodebookStats Stats() const;

 private:
  std::vector<int64_t> counts_;
};

double Perplexity(std::span<const int64_t> histogram);

}  // namespace vqvae
