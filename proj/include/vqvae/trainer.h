#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vqvae/adam.h"
#include "vqvae/nets.h"
#include "vqvae/prior.h"
#include "vqvae/quantizer.h"
#include "vqvae/random.h"

namespace vqvae {

struct TrainConfig {
  int64_t batch_size = 64;
  int64_t steps = 5000;
  int64_t eval_interval = 0;        // 0 disables; larger than steps is clamped
  int64_t checkpoint_interval = 0;  // 0 writes only the final checkpoint
  uint64_t seed = 1;
  AdamConfig adam;

  void Validate() const;
  bool operator==(const TrainConfig&) const = default;
};

// Epoch-wise shuffled minibatches. A new permutation of [0, n) is drawn
// whenever fewer than a full batch of unseen items remain; a batch larger
// than the dataset is clamped to n.
struct BatchSampler {
  int64_t size = 0;
  int64_t batch = 0;
  Rng rng;
  std::vector<int64_t> order;
  int64_t cursor = 0;

  BatchSampler() = default;
  BatchSampler(int64_t n, int64_t batch_size, uint64_t seed);
  std::vector<int64_t> Next();
  bool operator==(const BatchSampler&) const = default;
};

// Rows |rows| of an [N, ...] tensor, in the given order.
Tensor GatherImages(const Tensor& images, std::span<const int64_t> rows);
LatentGrid GatherGrids(const LatentGrid& grids, std::span<const int64_t> rows);

struct StepMetrics {
  int64_t step = 0;
  double recon_nll = 0.0;
  double codebook_loss = 0.0;
  double commit_loss = 0.0;
  double perplexity = 0.0;
  int64_t wall_ms = 0;
};

struct PriorStepMetrics {
  int64_t step = 0;
  double prior_nll = 0.0;          // nats per grid
  double nll_per_position = 0.0;   // nats per latent
  int64_t wall_ms = 0;
};

// Everything needed to continue a run exactly where it stopped.
struct VqVaeRun {
  VqVae model;
  TrainConfig config;
  Adam adam;
  BatchSampler sampler;
  int64_t step = 0;
};

struct PriorRun {
  PriorModel model;
  TrainConfig config;
  Adam adam;
  BatchSampler sampler;
  int64_t step = 0;
};

template <typename Run, typename Metrics>
struct TrainHooks {
  std::function<void(const Metrics&)> on_step;
  // Every checkpoint_interval steps and once at the end.
  std::function<void(const Run&)> on_checkpoint;
  std::function<void(const Run&)> on_eval;
  // Called with the pre-step state before a TrainingAborted is thrown.
  std::function<void(const Run&, const std::string&)> on_abort;
};
using VqVaeHooks = TrainHooks<VqVaeRun, StepMetrics>;
using PriorHooks = TrainHooks<PriorRun, PriorStepMetrics>;

class TrainingAborted : public NumericError {
 public:
  using NumericError::NumericError;
};

// The model is initialized from config.seed; the sampler uses a stream
// derived from the same seed.
VqVaeRun StartVqVaeRun(const ModelSpec& spec, const TrainConfig& config, int64_t dataset_size);
PriorRun StartPriorRun(const PriorSpec& spec, const TrainConfig& config, int64_t dataset_size);

// Trains until run.step == run.config.steps. Each step: forward, backward,
// Adam on every trainable tensor (the codebook only when EMA is off), then
// the EMA update from the same batch's assignments when EMA is on.
void TrainVqVae(VqVaeRun& run, const Tensor& images, const VqVaeHooks& hooks = {});
void TrainPrior(PriorRun& run, const LatentGrid& grids, const PriorHooks& hooks = {});

// Code assignments of every image, in order.
LatentGrid EncodeDataset(VqVae& model, const Tensor& images, int64_t chunk = 128);

enum class LossTerm { kReconstruction = 0, kCodebook = 1, kCommitment = 2 };
enum class ParamGroup { kEncoder = 0, kDecoder = 1, kEmbeddings = 2 };

// Largest |gradient| each loss term sends to each parameter group, from
// separate backward passes over the same batch.
struct RoutingReport {
  std::array<std::array<double, 3>, 3> max_abs{};  // [term][group]
  double at(LossTerm t, ParamGroup g) const {
    return max_abs[static_cast<size_t>(t)][static_cast<size_t>(g)];
  }
};
RoutingReport MeasureGradientRouting(VqVae& model, const Tensor& x);
// Throws Error unless: decoder gets nothing from the codebook/commitment
// terms, the embeddings nothing from reconstruction/commitment, and the
// encoder nothing from the codebook term.
void CheckGradientRouting(const RoutingReport& report);

struct EvalReport {
  double recon_mse = 0.0;
  double bits_per_dim = 0.0;
  double perplexity = 1.0;
  int64_t n_images = 0;
  double recon_nll = 0.0;  // nats per image
  double prior_nll = 0.0;  // nats per image
  std::vector<int64_t> histogram;
};

// Dataset-level report. Without a prior the uniform ln K term is used.
EvalReport Evaluate(VqVae& model, PriorModel* prior, const Tensor& images, int64_t chunk = 128);

// Keeps large activation buffers on the heap instead of fresh mmaps so a
// training step does not pay page faults for every temporary. No-op off glibc.
void TuneAllocator();

}  // namespace vqvae
