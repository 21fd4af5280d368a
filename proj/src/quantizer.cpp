#include "vqvae/quantizer.h"

#include <cmath>
#include <string>
#include <utility>

#include "vqvae/ops.h"

namespace vqvae {

Codebook Codebook::Create(int64_t num_codes, int64_t dim, float beta, bool ema, float gamma,
                          Rng& rng) {
  if (num_codes <= 0 || dim <= 0) {
    throw ConfigError("codebook needs K > 0 and D > 0, got K=" + std::to_string(num_codes) +
                      " D=" + std::to_string(dim));
  }
  if (ema && !(gamma >= 0.0f && gamma < 1.0f)) {
    throw ConfigError("EMA decay gamma must lie in [0, 1), got " + std::to_string(gamma));
  }
  Codebook cb;
  cb.beta = beta;
  cb.ema_enabled = ema;
  cb.gamma = gamma;
  cb.embeddings = Tensor(Shape{num_codes, dim});
  const double bound = 1.0 / static_cast<double>(num_codes);
  for (float& v : cb.embeddings.data) v = static_cast<float>(rng.Uniform(-bound, bound));
  if (ema) {
    cb.ema_counts.assign(static_cast<size_t>(num_codes), 1.0f);
    cb.ema_sums = Tensor(cb.embeddings.shape, cb.embeddings.data);
  } else {
    cb.embeddings.requires_grad = true;
  }
  return cb;
}

void LatentGrid::Validate() const {
  if (static_cast<int64_t>(indices.size()) != batch * height * width) {
    throw ShapeError("latent grid holds " + std::to_string(indices.size()) + " entries for " +
                     std::to_string(batch) + "x" + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  for (int32_t k : indices) {
    if (k < 0 || k >= num_codes) {
      throw Error("latent index " + std::to_string(k) + " outside [0, " +
                  std::to_string(num_codes) + ")");
    }
  }
}

int32_t NearestCode(std::span<const float> z, const Codebook& codebook) {
  const int64_t num_codes = codebook.num_codes();
  if (num_codes == 0) throw Error("nearest_code: empty codebook");
  const int64_t dim = codebook.dim();
  if (static_cast<int64_t>(z.size()) != dim) {
    throw ShapeError("nearest_code: vector of length " + std::to_string(z.size()) +
                     " against codebook dimension " + std::to_string(dim));
  }
  int32_t best = 0;
  float best_dist = 0.0f;
  for (int64_t k = 0; k < num_codes; ++k) {
    const float* e = codebook.embeddings.data.data() + k * dim;
    float dist = 0.0f;
    for (int64_t d = 0; d < dim; ++d) {
      const float diff = z[static_cast<size_t>(d)] - e[d];
      dist += diff * diff;
    }
    // Strict comparison keeps the lowest index on ties.
    if (k == 0 || dist < best_dist) {
      best = static_cast<int32_t>(k);
      best_dist = dist;
    }
  }
  return best;
}

LatentGrid AssignCodes(const Tensor& z_e, const Codebook& codebook) {
  RequireRank(z_e, 4, "quantize");
  if (z_e.dim(1) != codebook.dim()) {
    throw ShapeError("quantize: latent channels " + std::to_string(z_e.dim(1)) +
                     " do not match embedding dimension " + std::to_string(codebook.dim()));
  }
  if (!AllFinite(z_e.data)) throw NumericError("quantize: encoder output is not finite");
  const int64_t batch = z_e.dim(0), dim = z_e.dim(1), height = z_e.dim(2), width = z_e.dim(3);
  const int64_t plane = height * width;
  LatentGrid grid(batch, height, width, codebook.num_codes());
  std::vector<float> vec(static_cast<size_t>(dim));
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t p = 0; p < plane; ++p) {
      for (int64_t d = 0; d < dim; ++d) vec[static_cast<size_t>(d)] = z_e[(b * dim + d) * plane + p];
      grid.indices[static_cast<size_t>(b * plane + p)] = NearestCode(vec, codebook);
    }
  }
  return grid;
}

Tensor LookupCodes(const LatentGrid& grid, const Codebook& codebook) {
  grid.Validate();
  const int64_t dim = codebook.dim();
  const int64_t plane = grid.positions();
  Tensor out(Shape{grid.batch, dim, grid.height, grid.width});
  for (int64_t b = 0; b < grid.batch; ++b) {
    for (int64_t p = 0; p < plane; ++p) {
      const float* e =
          codebook.embeddings.data.data() + grid.indices[static_cast<size_t>(b * plane + p)] * dim;
      for (int64_t d = 0; d < dim; ++d) out[(b * dim + d) * plane + p] = e[d];
    }
  }
  return out;
}

Quantized Quantize(Var z_e, const Codebook& codebook) {
  LatentGrid grid = AssignCodes(z_e.value(), codebook);
  Tensor z_q = LookupCodes(grid, codebook);
  const int in_id = z_e.id();
  Var out = z_e.tape()->Record("straight_through", std::move(z_q), {in_id},
                               [in_id](Tape& t, int id) {
                                 const std::vector<float>& gq = t.grad(id);
                                 std::vector<float>& ge = t.grad(in_id);
                                 for (size_t i = 0; i < gq.size(); ++i) ge[i] += gq[i];
                               });
  return {out, std::move(grid)};
}

VqLoss VqLossTerms(Var z_e, Var embeddings, const LatentGrid& grid) {
  const Shape& s = z_e.shape();
  if (s.size() != 4 || s[0] != grid.batch || s[2] != grid.height || s[3] != grid.width) {
    throw ShapeError("vq_loss: latent " + ShapeToString(s) + " does not match grid " +
                     std::to_string(grid.batch) + "x" + std::to_string(grid.height) + "x" +
                     std::to_string(grid.width));
  }
  const Var selected = GatherRows(embeddings, grid.indices, grid.batch, grid.height, grid.width);
  const float inv_n = 1.0f / static_cast<float>(grid.batch * grid.positions());
  VqLoss loss;
  loss.codebook = MulScalar(Sum(Square(Sub(StopGradient(z_e), selected))), inv_n);
  loss.commitment = MulScalar(Sum(Square(Sub(z_e, StopGradient(selected)))), inv_n);
  return loss;
}

Var TotalLoss(Var recon_nll, const VqLoss& vq, float beta, bool ema_enabled) {
  const Var commit = Add(recon_nll, MulScalar(vq.commitment, beta));
  return ema_enabled ? commit : Add(commit, vq.codebook);
}

void EmaUpdate(Codebook& codebook, const Tensor& z_e, const LatentGrid& grid, float gamma) {
  if (!codebook.ema_enabled) throw Error("ema_update on a codebook without EMA state");
  const int64_t num_codes = codebook.num_codes();
  const int64_t dim = codebook.dim();
  RequireRank(z_e, 4, "ema_update");
  if (z_e.dim(1) != dim || z_e.dim(0) != grid.batch || z_e.dim(2) != grid.height ||
      z_e.dim(3) != grid.width) {
    throw ShapeError("ema_update: latent " + ShapeToString(z_e.shape) + " does not match grid");
  }
  grid.Validate();

  std::vector<double> counts(static_cast<size_t>(num_codes), 0.0);
  std::vector<double> sums(static_cast<size_t>(num_codes * dim), 0.0);
  const int64_t plane = grid.positions();
  for (int64_t b = 0; b < grid.batch; ++b) {
    for (int64_t p = 0; p < plane; ++p) {
      const int64_t k = grid.indices[static_cast<size_t>(b * plane + p)];
      counts[static_cast<size_t>(k)] += 1.0;
      for (int64_t d = 0; d < dim; ++d) {
        sums[static_cast<size_t>(k * dim + d)] += z_e[(b * dim + d) * plane + p];
      }
    }
  }

  const double keep = gamma;
  const double blend = 1.0 - keep;
  for (int64_t k = 0; k < num_codes; ++k) {
    float& n = codebook.ema_counts[static_cast<size_t>(k)];
    n = static_cast<float>(n * keep + counts[static_cast<size_t>(k)] * blend);
    for (int64_t d = 0; d < dim; ++d) {
      float& m = codebook.ema_sums[k * dim + d];
      m = static_cast<float>(m * keep + sums[static_cast<size_t>(k * dim + d)] * blend);
      if (n > 0.0f) codebook.embeddings[k * dim + d] = m / n;
    }
  }
}

double KlToUniformPrior(int64_t num_codes) {
  if (num_codes < 1) throw Error("KL to uniform prior needs K >= 1");
  return std::log(static_cast<double>(num_codes));
}

void CodeUsage::Add(const LatentGrid& grid) {
  if (grid.num_codes != static_cast<int64_t>(counts_.size())) {
    throw ShapeError("code usage: grid over " + std::to_string(grid.num_codes) +
                     " codes added to a histogram of " + std::to_string(counts_.size()));
  }
  grid.Validate();
  for (int32_t k : grid.indices) ++counts_[static_cast<size_t>(k)];
}

CodebookStats CodeUsage::Stats() const { return {counts_, Perplexity(counts_)}; }

double Perplexity(std::span<const int64_t> histogram) {
  double total = 0.0;
  for (int64_t c : histogram) total += static_cast<double>(c);
  if (total <= 0.0) return 1.0;
  double entropy = 0.0;
  for (int64_t c : histogram) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / total;
    entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

}  // namespace vqvae
