#include "vqvae/trainer.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "vqvae/ops.h"

namespace vqvae {
namespace {

// Keeps the data-order stream independent of the initialization stream.
constexpr uint64_t kSamplerSeedOffset = 0x9E3779B97F4A7C15ull;

int64_t ElapsedMs(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() -
                                                               start)
      .count();
}

bool Due(int64_t step, int64_t interval, int64_t total) {
  if (interval <= 0) return false;
  return step % std::min(interval, total) == 0;
}

std::vector<Adam::Binding> Trainable(ParamTable& params) {
  std::vector<Adam::Binding> out;
  for (auto& [name, t] : params) {
    if (t.requires_grad) out.emplace_back(name, &t);
  }
  return out;
}

struct Forward {
  Var recon;
  VqLoss vq;
  Var total;
  Var z_e;
  LatentGrid grid;
};

Forward RunForward(VqVae& model, Tape& tape, const Tensor& x) {
  const ModelSpec& spec = model.spec;
  Forward f;
  f.z_e = Encode(spec, model.params, tape.Constant(Tensor(x.shape, x.data)));
  Quantized q = Quantize(f.z_e, model.codebook);
  f.grid = std::move(q.grid);
  f.vq = VqLossTerms(f.z_e, tape.Leaf(model.codebook.embeddings), f.grid);
  f.recon = ReconstructionNll(Decode(spec, model.params, q.z_q), x, spec.likelihood);
  f.total = TotalLoss(f.recon, f.vq, model.codebook.beta, model.codebook.ema_enabled);
  return f;
}

void CheckData(const Tensor& images, int64_t expected_rows) {
  if (images.rank() != 4 || images.dim(0) == 0) {
    throw DataError("training data must be a non-empty [N, C, H, W] tensor, got " +
                    ShapeToString(images.shape));
  }
  if (images.dim(0) != expected_rows) {
    throw DataError("dataset has " + std::to_string(images.dim(0)) +
                    " items but the run was started for " + std::to_string(expected_rows));
  }
}

}  // namespace

void TrainConfig::Validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (steps < 0) throw ConfigError("steps must be non-negative");
  if (eval_interval < 0 || checkpoint_interval < 0) {
    throw ConfigError("intervals must be non-negative");
  }
  if (!(adam.lr > 0.0f) || !(adam.beta1 >= 0.0f && adam.beta1 < 1.0f) ||
      !(adam.beta2 >= 0.0f && adam.beta2 < 1.0f) || !(adam.eps > 0.0f)) {
    throw ConfigError("adam settings need lr > 0, betas in [0, 1), eps > 0");
  }
}

BatchSampler::BatchSampler(int64_t n, int64_t batch_size, uint64_t seed)
    : size(n), batch(std::min(n, batch_size)), rng(seed) {
  if (n <= 0) throw DataError("cannot sample batches from an empty dataset");
}

std::vector<int64_t> BatchSampler::Next() {
  if (order.empty() || cursor + batch > size) {
    order.resize(static_cast<size_t>(size));
    std::iota(order.begin(), order.end(), int64_t{0});
    rng.Shuffle(std::span<int64_t>(order));
    cursor = 0;
  }
  std::vector<int64_t> rows(order.begin() + cursor, order.begin() + cursor + batch);
  cursor += batch;
  return rows;
}

Tensor GatherImages(const Tensor& images, std::span<const int64_t> rows) {
  if (images.rank() < 1) throw ShapeError("gather: rank-0 tensor");
  const int64_t n = images.dim(0);
  const int64_t row = n == 0 ? 0 : images.numel() / n;
  Shape shape = images.shape;
  shape[0] = static_cast<int64_t>(rows.size());
  Tensor out(shape);
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= n) throw Error("gather: row index out of range");
    std::copy_n(images.data.begin() + rows[i] * row, row, out.data.begin() + static_cast<int64_t>(i) * row);
  }
  return out;
}

LatentGrid GatherGrids(const LatentGrid& grids, std::span<const int64_t> rows) {
  LatentGrid out(static_cast<int64_t>(rows.size()), grids.height, grids.width, grids.num_codes);
  const int64_t plane = grids.positions();
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= grids.batch) throw Error("gather: grid index out of range");
    std::copy_n(grids.indices.begin() + rows[i] * plane, plane,
                out.indices.begin() + static_cast<int64_t>(i) * plane);
  }
  return out;
}

VqVaeRun StartVqVaeRun(const ModelSpec& spec, const TrainConfig& config, int64_t dataset_size) {
  spec.Validate();
  config.Validate();
  Rng init(config.seed);
  VqVaeRun run{VqVae::Create(spec, init), config, Adam(config.adam),
               BatchSampler(dataset_size, config.batch_size, config.seed + kSamplerSeedOffset),
               0};
  return run;
}

PriorRun StartPriorRun(const PriorSpec& spec, const TrainConfig& config, int64_t dataset_size) {
  spec.Validate();
  config.Validate();
  Rng init(config.seed);
  PriorRun run{PriorModel::Create(spec, init), config, Adam(config.adam),
               BatchSampler(dataset_size, config.batch_size, config.seed + kSamplerSeedOffset),
               0};
  return run;
}

void TrainVqVae(VqVaeRun& run, const Tensor& images, const VqVaeHooks& hooks) {
  CheckData(images, run.sampler.size);
  VqVae& model = run.model;
  std::vector<Adam::Binding> trainable = Trainable(model.params);
  if (!model.codebook.ema_enabled) trainable.emplace_back("codebook", &model.codebook.embeddings);

  const auto start = std::chrono::steady_clock::now();
  const int64_t total = run.config.steps;
  while (run.step < total) {
    // Restored on abort so the diagnostic snapshot is the pre-step state.
    const BatchSampler sampler_before = run.sampler;
    const Tensor x = GatherImages(images, run.sampler.Next());
    StepMetrics metrics;
    try {
#ifndef NDEBUG
      if (run.step == 0) CheckGradientRouting(MeasureGradientRouting(model, x));
#endif
      Tape tape;
      Forward f = RunForward(model, tape, x);
      metrics.recon_nll = f.recon.value().item();
      metrics.codebook_loss = f.vq.codebook.value().item();
      metrics.commit_loss = f.vq.commitment.value().item();
      tape.Backward(f.total);
      run.adam.Step(trainable);
      if (model.codebook.ema_enabled) {
        EmaUpdate(model.codebook, f.z_e.value(), f.grid, model.codebook.gamma);
      }
      CodeUsage usage(model.codebook.num_codes());
      usage.Add(f.grid);
      metrics.perplexity = usage.Stats().perplexity;
    } catch (const NumericError& e) {
      run.sampler = sampler_before;
      if (hooks.on_abort) hooks.on_abort(run, e.what());
      throw TrainingAborted("training aborted at step " + std::to_string(run.step + 1) + ": " +
                            e.what());
    }
    ++run.step;
    metrics.step = run.step;
    metrics.wall_ms = ElapsedMs(start);
    if (hooks.on_step) hooks.on_step(metrics);
    if (hooks.on_eval && Due(run.step, run.config.eval_interval, total)) hooks.on_eval(run);
    if (hooks.on_checkpoint && run.step != total &&
        Due(run.step, run.config.checkpoint_interval, total)) {
      hooks.on_checkpoint(run);
    }
  }
  if (hooks.on_checkpoint) hooks.on_checkpoint(run);
}

void TrainPrior(PriorRun& run, const LatentGrid& grids, const PriorHooks& hooks) {
  grids.Validate();
  if (grids.batch != run.sampler.size) {
    throw DataError("latent dataset has " + std::to_string(grids.batch) +
                    " grids but the run was started for " + std::to_string(run.sampler.size));
  }
  std::vector<Adam::Binding> trainable = Trainable(run.model.params);
  const double positions = static_cast<double>(grids.positions());

  const auto start = std::chrono::steady_clock::now();
  const int64_t total = run.config.steps;
  while (run.step < total) {
    const BatchSampler sampler_before = run.sampler;
    const LatentGrid batch = GatherGrids(grids, run.sampler.Next());
    PriorStepMetrics metrics;
    try {
      Tape tape;
      const Var nll = PriorNll(run.model, tape, batch);
      metrics.prior_nll = nll.value().item();
      tape.Backward(nll);
      run.adam.Step(trainable);
    } catch (const NumericError& e) {
      run.sampler = sampler_before;
      if (hooks.on_abort) hooks.on_abort(run, e.what());
      throw TrainingAborted("prior training aborted at step " + std::to_string(run.step + 1) +
                            ": " + e.what());
    }
    ++run.step;
    metrics.step = run.step;
    metrics.nll_per_position = metrics.prior_nll / positions;
    metrics.wall_ms = ElapsedMs(start);
    if (hooks.on_step) hooks.on_step(metrics);
    if (hooks.on_eval && Due(run.step, run.config.eval_interval, total)) hooks.on_eval(run);
    if (hooks.on_checkpoint && run.step != total &&
        Due(run.step, run.config.checkpoint_interval, total)) {
      hooks.on_checkpoint(run);
    }
  }
  if (hooks.on_checkpoint) hooks.on_checkpoint(run);
}

LatentGrid EncodeDataset(VqVae& model, const Tensor& images, int64_t chunk) {
  RequireRank(images, 4, "encode_dataset");
  const int64_t n = images.dim(0);
  LatentGrid all(n, model.spec.latent_height(), model.spec.latent_width(),
                 model.codebook.num_codes());
  const int64_t plane = all.positions();
  for (int64_t begin = 0; begin < n; begin += chunk) {
    const int64_t end = std::min(n, begin + chunk);
    std::vector<int64_t> rows(static_cast<size_t>(end - begin));
    std::iota(rows.begin(), rows.end(), begin);
    Tape tape(false);
    tape.DisableGrad();
    const Var z_e = Encode(model.spec, model.params, tape.Constant(GatherImages(images, rows)));
    const LatentGrid grid = AssignCodes(z_e.value(), model.codebook);
    std::copy(grid.indices.begin(), grid.indices.end(), all.indices.begin() + begin * plane);
  }
  return all;
}

RoutingReport MeasureGradientRouting(VqVae& model, const Tensor& x) {
  RoutingReport report;
  Tensor& emb = model.codebook.embeddings;
  for (size_t term = 0; term < 3; ++term) {
    Tape tape;
    Forward f = RunForward(model, tape, x);
    const Var loss = term == 0 ? f.recon : term == 1 ? f.vq.codebook : f.vq.commitment;
    tape.Backward(loss);
    auto max_abs = [](const Tensor& t) {
      double m = 0.0;
      for (float g : t.grad) m = std::max(m, static_cast<double>(std::fabs(g)));
      return m;
    };
    for (const auto& [name, t] : model.params) {
      if (!t.requires_grad) continue;
      const size_t group = IsEncoderParam(name) ? 0 : IsDecoderParam(name) ? 1 : 3;
      if (group < 3) report.max_abs[term][group] = std::max(report.max_abs[term][group], max_abs(t));
    }
    if (emb.requires_grad) report.max_abs[term][2] = max_abs(emb);
  }
  return report;
}

void CheckGradientRouting(const RoutingReport& report) {
  struct Rule {
    LossTerm term;
    ParamGroup group;
    const char* what;
  };
  static constexpr Rule kMustBeZero[] = {
      {LossTerm::kCodebook, ParamGroup::kDecoder, "codebook term reached the decoder"},
      {LossTerm::kCommitment, ParamGroup::kDecoder, "commitment term reached the decoder"},
      {LossTerm::kReconstruction, ParamGroup::kEmbeddings,
       "reconstruction term reached the embeddings"},
      {LossTerm::kCommitment, ParamGroup::kEmbeddings, "commitment term reached the embeddings"},
      {LossTerm::kCodebook, ParamGroup::kEncoder, "codebook term reached the encoder"},
  };
  for (const Rule& r : kMustBeZero) {
    if (report.at(r.term, r.group) != 0.0) {
      throw Error(std::string("gradient routing violated: ") + r.what);
    }
  }
}

EvalReport Evaluate(VqVae& model, PriorModel* prior, const Tensor& images, int64_t chunk) {
  RequireRank(images, 4, "evaluate");
  const ModelSpec& spec = model.spec;
  const int64_t n = images.dim(0);
  if (n == 0) throw DataError("evaluate: empty dataset");
  EvalReport report;
  report.n_images = n;
  CodeUsage usage(model.codebook.num_codes());
  double sq_err = 0.0, recon = 0.0, prior_nll = 0.0;
  for (int64_t begin = 0; begin < n; begin += chunk) {
    const int64_t end = std::min(n, begin + chunk);
    const double count = static_cast<double>(end - begin);
    std::vector<int64_t> rows(static_cast<size_t>(end - begin));
    std::iota(rows.begin(), rows.end(), begin);
    const Tensor x = GatherImages(images, rows);

    Tape tape(false);
    tape.DisableGrad();
    const Var z_e = Encode(spec, model.params, tape.Constant(Tensor(x.shape, x.data)));
    const LatentGrid grid = AssignCodes(z_e.value(), model.codebook);
    usage.Add(grid);
    const Var out = Decode(spec, model.params, tape.Constant(LookupCodes(grid, model.codebook)));
    recon += count * ReconstructionNll(out, x, spec.likelihood).value().item();
    const Tensor mean = DistributionMean(out.value(), spec.likelihood);
    for (size_t i = 0; i < x.data.size(); ++i) {
      const double d = static_cast<double>(mean.data[i]) - x.data[i];
      sq_err += d * d;
    }
    if (prior != nullptr) {
      prior_nll += count * PriorNll(*prior, tape, grid).value().item();
    } else {
      prior_nll += count * static_cast<double>(grid.positions()) * KlToUniformPrior(grid.num_codes);
    }
  }
  const CodebookStats stats = usage.Stats();
  report.recon_mse = sq_err / static_cast<double>(images.numel());
  report.recon_nll = recon / static_cast<double>(n);
  report.prior_nll = prior_nll / static_cast<double>(n);
  report.bits_per_dim = BitsPerDim(report.recon_nll + report.prior_nll, spec.data_dims());
  report.perplexity = stats.perplexity;
  report.histogram = stats.histogram;
  return report;
}

void TuneAllocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace vqvae
