// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "support/grad_cases.h"
#include "support/oracles.h"
#include "vqvae/checkpoint.h"
#include "vqvae/cli.h"
#include "vqvae/dataset.h"
#include "vqvae/ops.h"
#include "vqvae/prior.h"
#include "vqvae/trainer.h"

namespace vqvae {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

// Tolerances and budgets.
constexpr int kGradSeeds = 10;
constexpr double kGradRuntimeLimitS = 60.0;
constexpr double kEmaMeanTol = 1e-6;
constexpr double kEmaFixedPointTol = 1e-4;
constexpr int kEmaIterations = 200;
constexpr double kDeskMseLimit = 0.02;
constexpr double kDeskPerplexityFloor = 8.0;
constexpr int64_t kDeskStepLimit = 5000;
constexpr int64_t kDeskCheckEvery = 250;
constexpr double kDeskWallLimitS = 15 * 60.0;
constexpr int64_t kBetaSweepMinSteps = 1500;
constexpr double kBetaSpreadLimit = 0.15;
constexpr double kPriorGainFloorBits = 0.05;
constexpr double kBernoulliEntropyTol = 0.03;
constexpr double kBernoulliP = 0.8;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void Report(int id, const std::string& name, const Outcome& o) {
  std::cout << (o.pass ? "PASS" : "FAIL") << "  criterion " << id << " (" << name << "): " << o.detail
            << std::endl;
  if (!o.pass) ++failures;
}

void Run(int id, const std::string& name, const std::function<Outcome()>& body) {
  try {
    Report(id, name, body());
  } catch (const std::exception& e) {
    Report(id, name, {false, std::string("exception: ") + e.what()});
  }
}

std::string Fmt(const char* format, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), format, a, b, c, d);
  return buf;
}

double Seconds(Clock::time_point since) {
  return std::chrono::duration<double>(Clock::now() - since).count();
}

std::string ReadFile(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ModelSpec DeskSpec(float beta) {
  ModelSpec s;
  s.hidden = 64;
  s.stages = 2;
  s.res_blocks = 2;
  s.embedding_dim = 16;
  s.num_codes = 32;
  s.beta = beta;
  return s;
}

TrainConfig DeskTrain() {
  TrainConfig c;
  c.batch_size = 64;
  c.seed = 1;
  c.adam.lr = 2e-4f;
  return c;
}

// ---- 1 ------------------------------------------------------------------

Outcome GradientFidelity() {
  const auto start = Clock::now();
  int64_t checks = 0, entries = 0;
  std::string first_failure;
  std::vector<std::string> ops;
  for (const testing::GradCase& c : testing::GradCases()) {
    ops.push_back(c.op);
    for (int seed = 1; seed <= kGradSeeds; ++seed) {
      for (int shape = 0; shape < testing::kGradShapesPerOp; ++shape) {
        const testing::GradCheckResult r = c.run(static_cast<uint64_t>(seed), shape);
        ++checks;
        entries += r.checked;
        if (!r.ok && first_failure.empty()) {
          first_failure = c.op + " seed " + std::to_string(seed) + " shape " + std::to_string(shape) +
                          ": " + r.worst;
        }
      }
    }
  }
  const double secs = Seconds(start);
  Outcome o;
  o.pass = first_failure.empty() && secs < kGradRuntimeLimitS;
  o.detail = std::to_string(ops.size()) + " ops x " + std::to_string(kGradSeeds) + " seeds x " +
             std::to_string(testing::kGradShapesPerOp) + " shapes = " + std::to_string(checks) +
             " checks, " + std::to_string(entries) + " entries, " + Fmt("%.1fs (limit %.0fs)", secs, kGradRuntimeLimitS) +
             ", rel 1e-2 abs 1e-3";
  if (!first_failure.empty()) o.detail += "; first failure " + first_failure;
  return o;
}

// ---- 2 ------------------------------------------------------------------

Outcome StraightThrough(const Tensor& images) {
  Rng rng(21);
  VqVae model = VqVae::Create(DeskSpec(0.25f), rng);
  const Tensor x = GatherImages(images, std::vector<int64_t>{0, 1, 2, 3});
  Tape tape;
  const Var emb = tape.Leaf(model.codebook.embeddings);
  const Var z_e = Encode(model.spec, model.params, tape.Constant(Tensor(x.shape, x.data)));
  const Quantized q = Quantize(z_e, model.codebook);
  const Var out = Decode(model.spec, model.params, q.z_q);
  tape.Backward(ReconstructionNll(out, x, model.spec.likelihood));

  const std::vector<float>& g_q = tape.grad(q.z_q.id());
  const std::vector<float>& g_e = tape.grad(z_e.id());
  const bool same = g_q.size() == g_e.size() && !g_q.empty() &&
                    std::memcmp(g_q.data(), g_e.data(), g_q.size() * sizeof(float)) == 0;
  bool nonzero = false;
  for (float g : g_q) nonzero |= g != 0.0f;
  bool emb_zero = true;
  if (tape.has_grad(emb.id())) {
    for (float g : tape.grad(emb.id())) emb_zero &= g == 0.0f;
  }
  Outcome o;
  o.pass = same && nonzero && emb_zero;
  o.detail = std::string("grad(z_e) ") + (same ? "==" : "!=") + " grad(z_q) over " +
             std::to_string(g_q.size()) + " entries (bit-exact), embeddings grad from reconstruction " +
             (emb_zero ? "exactly zero" : "NONZERO");
  return o;
}

// ---- 3 ------------------------------------------------------------------

Outcome Routing(VqVae& model, const Tensor& images, const std::string& label) {
  const Tensor x = GatherImages(images, std::vector<int64_t>{4, 5, 6, 7, 8, 9, 10, 11});
  const RoutingReport r = MeasureGradientRouting(model, x);
  Outcome o;
  try {
    CheckGradientRouting(r);
    o.pass = r.at(LossTerm::kReconstruction, ParamGroup::kDecoder) > 0 &&
             r.at(LossTerm::kReconstruction, ParamGroup::kEncoder) > 0 &&
             r.at(LossTerm::kCodebook, ParamGroup::kEmbeddings) > 0 &&
             r.at(LossTerm::kCommitment, ParamGroup::kEncoder) > 0;
    o.detail = label + ": zero cells exact; live cells recon->dec " +
               Fmt("%.3g, recon->enc %.3g, codebook->emb %.3g, commit->enc %.3g",
                   r.at(LossTerm::kReconstruction, ParamGroup::kDecoder),
                   r.at(LossTerm::kReconstruction, ParamGroup::kEncoder),
                   r.at(LossTerm::kCodebook, ParamGroup::kEmbeddings),
                   r.at(LossTerm::kCommitment, ParamGroup::kEncoder));
  } catch (const Error& e) {
    o.detail = label + ": " + e.what();
  }
  return o;
}

// ---- 4 ------------------------------------------------------------------

Outcome EmaOracle() {
  Rng rng(41);
  const int64_t K = 32, D = 16;
  // gamma = 0: one step lands on the per-code batch mean.
  Codebook cb = Codebook::Create(K, D, 0.25f, true, 0.0f, rng);
  const Tensor z_e = testing::RandomTensor({8, D, 7, 7}, rng);
  cb.embeddings = testing::RandomTensor({K, D}, rng);
  cb.ema_sums = cb.embeddings;
  const LatentGrid grid = AssignCodes(z_e, cb);
  EmaUpdate(cb, z_e, grid, 0.0f);
  double err0 = 0.0;
  int used = 0;
  for (int64_t k = 0; k < K; ++k) {
    std::vector<double> sum(static_cast<size_t>(D), 0.0);
    int count = 0;
    for (int64_t b = 0; b < 8; ++b)
      for (int64_t p = 0; p < 49; ++p)
        if (grid.indices[static_cast<size_t>(b * 49 + p)] == k) {
          ++count;
          for (int64_t d = 0; d < D; ++d) sum[static_cast<size_t>(d)] += z_e[(b * D + d) * 49 + p];
        }
    if (count == 0) continue;
    ++used;
    for (int64_t d = 0; d < D; ++d) {
      err0 = std::max(err0, std::abs(cb.embeddings[k * D + d] - sum[static_cast<size_t>(d)] / count));
    }
  }

  // gamma = 0.9: repeating one batch converges to the same means.
  Codebook cb9 = Codebook::Create(K, D, 0.25f, true, 0.9f, rng);
  cb9.embeddings = testing::RandomTensor({K, D}, rng);
  cb9.ema_sums = cb9.embeddings;
  const LatentGrid fixed = AssignCodes(z_e, cb9);
  for (int i = 0; i < kEmaIterations; ++i) EmaUpdate(cb9, z_e, fixed, 0.9f);
  double err9 = 0.0;
  for (int64_t k = 0; k < K; ++k) {
    std::vector<double> sum(static_cast<size_t>(D), 0.0);
    int count = 0;
    for (int64_t b = 0; b < 8; ++b)
      for (int64_t p = 0; p < 49; ++p)
        if (fixed.indices[static_cast<size_t>(b * 49 + p)] == k) {
          ++count;
          for (int64_t d = 0; d < D; ++d) sum[static_cast<size_t>(d)] += z_e[(b * D + d) * 49 + p];
        }
    if (count == 0) continue;
    for (int64_t d = 0; d < D; ++d) {
      err9 = std::max(err9, std::abs(cb9.embeddings[k * D + d] - sum[static_cast<size_t>(d)] / count));
    }
  }
  Outcome o;
  o.pass = used > 1 && err0 <= kEmaMeanTol && err9 <= kEmaFixedPointTol;
  o.detail = Fmt("gamma=0 max err %.2e (tol %.0e), gamma=0.9 after 200 steps max err %.2e (tol %.0e)", err0,
                 kEmaMeanTol, err9, kEmaFixedPointTol) +
             ", " + std::to_string(used) + " codes used";
  return o;
}

// ---- 5 ------------------------------------------------------------------

Outcome KlConstant() {
  Outcome o{true, ""};
  for (int64_t k : {1, 2, 32, 512}) {
    // KL(one-hot || uniform) = 1 * log(1 / (1 / K)), in extended precision.
    const long double oracle = std::log(1.0L / (1.0L / static_cast<long double>(k)));
    const double got = KlToUniformPrior(k);
    const double err = std::abs(static_cast<double>(static_cast<long double>(got) - oracle));
    const double ulp = std::nextafter(std::max(1.0, got), 2e300) - std::max(1.0, got);
    o.pass &= err <= ulp;
    o.detail += "K=" + std::to_string(k) + Fmt(" %.17g (err %.1e) ", got, err);
  }
  o.detail += "tol 1 ulp";
  return o;
}

// ---- 6 / 7 --------------------------------------------------------------

struct DeskResult {
  VqVaeRun run;
  EvalReport report;
  double seconds = 0.0;
};

// Trains in kDeskCheckEvery increments; a continued run is bit-identical to
// an uninterrupted one, so the evaluation points do not change training.
DeskResult TrainUntil(const ModelSpec& spec, const Tensor& images, int64_t min_steps,
                      const std::function<bool(const EvalReport&)>& done) {
  DeskResult r{StartVqVaeRun(spec, DeskTrain(), images.dim(0)), {}, 0.0};
  const auto start = Clock::now();
  while (r.run.step < kDeskStepLimit) {
    r.run.config.steps = std::min(kDeskStepLimit, r.run.step + kDeskCheckEvery);
    TrainVqVae(r.run, images);
    r.report = Evaluate(r.run.model, nullptr, images);
    std::cout << Fmt("    beta %.2f step %.0f: mse %.5f perplexity %.2f", spec.beta,
                     static_cast<double>(r.run.step), r.report.recon_mse, r.report.perplexity)
              << std::endl;
    if (r.run.step >= min_steps && done(r.report)) break;
  }
  r.seconds = Seconds(start);
  return r;
}

bool DeskDone(const EvalReport& e) {
  return e.recon_mse < kDeskMseLimit && e.perplexity > kDeskPerplexityFloor;
}

Outcome DeskTraining(const DeskResult& r) {
  Outcome o;
  o.pass = DeskDone(r.report) && r.run.step <= kDeskStepLimit && r.seconds < kDeskWallLimitS;
  o.detail = Fmt("mse %.5f (< %.2f), perplexity %.2f (> %.0f)", r.report.recon_mse, kDeskMseLimit,
                 r.report.perplexity, kDeskPerplexityFloor) +
             " at step " + std::to_string(r.run.step) + Fmt(" (<= %.0f), %.0fs wall (< %.0fs)",
                                                             static_cast<double>(kDeskStepLimit), r.seconds,
                                                             kDeskWallLimitS);
  return o;
}

Outcome BetaSweep(DeskResult& base, const Tensor& images) {
  const int64_t steps = std::max(kBetaSweepMinSteps, base.run.step);
  if (base.run.step < steps) {
    base.run.config.steps = steps;
    TrainVqVae(base.run, images);
    base.report = Evaluate(base.run.model, nullptr, images);
  }
  std::vector<std::pair<float, double>> mse = {{0.25f, base.report.recon_mse}};
  for (float beta : {0.1f, 2.0f}) {
    VqVaeRun run = StartVqVaeRun(DeskSpec(beta), DeskTrain(), images.dim(0));
    run.config.steps = steps;
    TrainVqVae(run, images);
    mse.emplace_back(beta, Evaluate(run.model, nullptr, images).recon_mse);
  }
  double lo = 1e300, hi = 0.0;
  std::string detail;
  for (const auto& [beta, m] : mse) {
    lo = std::min(lo, m);
    hi = std::max(hi, m);
    detail += Fmt("beta %.2f mse %.5f, ", beta, m);
  }
  const double spread = (hi - lo) / lo;
  Outcome o;
  o.pass = spread < kBetaSpreadLimit;
  o.detail = detail + "after " + std::to_string(steps) + Fmt(" steps; (max-min)/min = %.3f (< %.2f)", spread, kBetaSpreadLimit);
  return o;
}

// ---- 8 ------------------------------------------------------------------

Outcome PriorGain(VqVae& model, const Tensor& images) {
  // Analytic check of the bound with the uniform term: 49 ln 32 nats over
  // 784 dims is exactly 0.3125 bits/dim.
  const double analytic = BitsPerDim(49 * std::log(32.0), 784);
  const bool analytic_ok = std::abs(analytic - 0.3125) < 1e-12;

  const LatentGrid grids = EncodeDataset(model, images);
  PriorSpec spec;
  spec.height = grids.height;
  spec.width = grids.width;
  spec.num_codes = grids.num_codes;
  spec.layers = 3;
  spec.hidden = 32;
  spec.embed_dim = 32;
  TrainConfig config;
  config.batch_size = 64;
  config.steps = 1000;
  config.seed = 2;
  config.adam.lr = 1e-3f;
  PriorRun prior = StartPriorRun(spec, config, grids.batch);
  TrainPrior(prior, grids);

  const EvalReport uniform = Evaluate(model, nullptr, images);
  const EvalReport trained = Evaluate(model, &prior.model, images);
  const double gain = uniform.bits_per_dim - trained.bits_per_dim;
  Outcome o;
  o.pass = analytic_ok && gain >= kPriorGainFloorBits;
  o.detail = Fmt("uniform %.4f bits/dim, trained prior %.4f, gain %.4f (>= %.2f)", uniform.bits_per_dim,
                 trained.bits_per_dim, gain, kPriorGainFloorBits) +
             Fmt("; uniform-term analytic %.6f (expect 0.3125)", analytic);
  return o;
}

// ---- 9 ------------------------------------------------------------------

Outcome PriorCausality() {
  PriorSpec spec;  // 7x7, K = 32
  Rng rng(91);
  PriorModel model = PriorModel::Create(spec, rng);
  for (auto& [name, t] : model.params) {
    if (name.starts_with("prior.out") || name.ends_with(".b")) {
      t = testing::RandomTensor(t.shape, rng);
      t.requires_grad = true;
    }
  }
  LatentGrid base(2, spec.height, spec.width, spec.num_codes);
  for (int32_t& i : base.indices) i = static_cast<int32_t>(rng.Below(32));
  auto logits = [&](const LatentGrid& g) {
    Tape tape(false);
    tape.DisableGrad();
    return PriorLogits(model, tape, g).value().data;
  };
  const std::vector<float> ref = logits(base);
  const int64_t n = spec.height * spec.width, k = spec.num_codes;
  int64_t compared = 0, violations = 0, later_changed = 0;
  for (int64_t q = 0; q < n; ++q) {
    LatentGrid g = base;
    g.indices[static_cast<size_t>(q)] = (g.indices[static_cast<size_t>(q)] + 7) % 32;
    const std::vector<float> out = logits(g);
    bool any_later = false;
    for (int64_t b = 0; b < 2; ++b)
      for (int64_t c = 0; c < k; ++c)
        for (int64_t p = 0; p < n; ++p) {
          const size_t i = static_cast<size_t>((b * k + c) * n + p);
          if (p <= q) {
            ++compared;
            violations += out[i] != ref[i];
          } else {
            any_later |= out[i] != ref[i];
          }
        }
    later_changed += any_later;
  }
  Outcome o;
  o.pass = violations == 0 && later_changed > 0;
  o.detail = std::to_string(n) + " perturbed positions, " + std::to_string(compared) +
             " logits at or before the perturbation compared bit-exactly, " + std::to_string(violations) +
             " changed; later logits respond in " + std::to_string(later_changed) + " cases";
  return o;
}

// ---- 10 -----------------------------------------------------------------

Outcome BernoulliRecovery() {
  const double entropy = -(kBernoulliP * std::log(kBernoulliP) + (1 - kBernoulliP) * std::log(1 - kBernoulliP));
  Rng rng(101);
  auto draw = [&](int64_t n) {
    LatentGrid g(n, 7, 7, 2);
    for (int32_t& i : g.indices) i = rng.Uniform() < kBernoulliP ? 0 : 1;
    return g;
  };
  const LatentGrid train = draw(2000);
  const LatentGrid held_out = draw(1000);
  PriorSpec spec;
  spec.num_codes = 2;
  spec.layers = 2;
  spec.hidden = 16;
  spec.embed_dim = 8;
  spec.kernel = 3;
  TrainConfig config;
  config.batch_size = 64;
  config.steps = 1500;
  config.seed = 3;
  config.adam.lr = 1e-3f;
  PriorRun run = StartPriorRun(spec, config, train.batch);
  TrainPrior(run, train);
  Tape tape(false);
  tape.DisableGrad();
  const double nll = PriorNll(run.model, tape, held_out).value().item() / 49.0;
  Outcome o;
  o.pass = std::abs(nll - entropy) <= kBernoulliEntropyTol;
  o.detail = Fmt("held-out nll %.4f nats/position vs entropy %.4f (|diff| %.4f <= %.2f)", nll, entropy,
                 std::abs(nll - entropy), kBernoulliEntropyTol);
  return o;
}

// ---- 11 / 12 ------------------------------------------------------------

class CliWorkspace {
 public:
  explicit CliWorkspace(const Tensor& images) : dir_(fs::temp_directory_path() / "vqvae_acceptance") {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    const int64_t n = 128;
    std::vector<uint8_t> bytes(static_cast<size_t>(n * 784));
    for (size_t i = 0; i < bytes.size(); ++i) bytes[i] = PixelToByte(images.data[i]);
    WriteIdx(dir_ / "data.idx", n, 28, 28, bytes);
    Write("run.cfg", Config(""));
  }
  ~CliWorkspace() { fs::remove_all(dir_); }

  static std::string Config(const std::string& extra) {
    return "hidden = 16\nres_blocks = 1\nembedding_dim = 8\nnum_codes = 16\nbatch_size = 16\n"
           "steps = 20\nseed = 7\nprior_layers = 2\nprior_hidden = 16\nprior_embed_dim = 8\n" + extra;
  }
  void Write(const std::string& name, const std::string& text) { std::ofstream(dir_ / name) << text; }
  std::string P(const std::string& name) const { return (dir_ / name).string(); }
  fs::path path(const std::string& name) const { return dir_ / name; }

  int Cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = RunCli(args, out, err);
    if (code != kExitOk) std::cout << "    cli error: " << err.str();
    return code;
  }
  int TrainVqVae(const std::string& out, const std::string& config = "run.cfg") {
    return Cli({"train-vqvae", "--config", P(config), "--data", P("data.idx"), "--out", P(out)});
  }

 private:
  fs::path dir_;
};

Outcome Determinism(CliWorkspace& ws) {
  const bool trained = ws.TrainVqVae("a") == kExitOk && ws.TrainVqVae("b") == kExitOk;
  const std::string ca = ReadFile(ws.path("a/vqvae.ckpt")), cb = ReadFile(ws.path("b/vqvae.ckpt"));
  const bool ckpt_same = trained && !ca.empty() && ca == cb;

  bool samples_same = ws.Cli({"train-prior", "--vqvae", ws.P("a/vqvae.ckpt"), "--config", ws.P("run.cfg"), "--data",
                              ws.P("data.idx"), "--out", ws.P("p")}) == kExitOk;
  for (const std::string out : {"s1", "s2"}) {
    samples_same &= ws.Cli({"sample", "--vqvae", ws.P("a/vqvae.ckpt"), "--prior", ws.P("p/prior.ckpt"), "--n", "4",
                            "--seed", "11", "--out", ws.P(out)}) == kExitOk;
  }
  int images = 0;
  for (int i = 0; i < 4 && samples_same; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%04d.pgm", i);
    const std::string a = ReadFile(ws.path("s1/" + std::string(name)));
    samples_same &= !a.empty() && a == ReadFile(ws.path("s2/" + std::string(name)));
    ++images;
  }
  Outcome o;
  o.pass = ckpt_same && samples_same;
  o.detail = std::string("two train-vqvae runs: final checkpoints ") + (ckpt_same ? "identical" : "DIFFER") + " (" +
             std::to_string(ca.size()) + " bytes); " + std::to_string(images) + " samples with seed 11 " +
             (samples_same ? "byte-identical" : "DIFFER");
  return o;
}

std::string MetricsWithoutWallTime(const std::string& text) {
  std::istringstream in(text);
  std::string line, out;
  while (std::getline(in, line)) {
    auto j = nlohmann::ordered_json::parse(line);
    j.erase("wall_ms");
    out += j.dump() + "\n";
  }
  return out;
}

Outcome RoundTrip(CliWorkspace& ws) {
  // save -> load -> save, for both checkpoint kinds.
  bool bytes_same = true;
  for (const std::string name : {"a/vqvae.ckpt", "p/prior.ckpt"}) {
    const Checkpoint c = LoadCheckpoint(ws.path(name));
    SaveCheckpoint(c, ws.path("resaved.ckpt"));
    bytes_same &= ReadFile(ws.path(name)) == ReadFile(ws.path("resaved.ckpt"));
    const Checkpoint parsed = LoadCheckpoint(ws.path("resaved.ckpt"));
    const Checkpoint rebuilt = c.kind == "vqvae" ? ToCheckpoint(VqVaeRunFromCheckpoint(parsed))
                                                 : ToCheckpoint(PriorRunFromCheckpoint(parsed));
    bytes_same &= SerializeCheckpoint(rebuilt) == ReadFile(ws.path(name));
  }

  // Interrupted at step 10 and resumed, against the uninterrupted run "a".
  ws.Write("part.cfg", CliWorkspace::Config("checkpoint_interval = 10\n"));
  bool resumed = ws.TrainVqVae("part", "part.cfg") == kExitOk;
  fs::create_directories(ws.path("resumed"));
  {
    std::istringstream lines(ReadFile(ws.path("part/metrics.jsonl")));
    std::ofstream head(ws.path("resumed/metrics.jsonl"));
    std::string line;
    for (int i = 0; i < 10 && std::getline(lines, line); ++i) head << line << "\n";
  }
  resumed &= ws.Cli({"train-vqvae", "--config", ws.P("run.cfg"), "--data", ws.P("data.idx"), "--out",
                     ws.P("resumed"), "--resume", ws.P("part/vqvae-step10.ckpt")}) == kExitOk;
  const std::string full = MetricsWithoutWallTime(ReadFile(ws.path("a/metrics.jsonl")));
  const std::string replay = MetricsWithoutWallTime(ReadFile(ws.path("resumed/metrics.jsonl")));
  const bool metrics_same = resumed && !full.empty() && full == replay;
  const bool final_same = ReadFile(ws.path("a/vqvae.ckpt")) == ReadFile(ws.path("resumed/vqvae.ckpt"));
  Outcome o;
  o.pass = bytes_same && metrics_same && final_same;
  o.detail = std::string("save->load->save ") + (bytes_same ? "byte-identical" : "DIFFERS") +
             "; resume at step 10 of 20: metrics stream " + (metrics_same ? "bit-exact" : "DIFFERS") +
             " (wall_ms excluded), final checkpoint " + (final_same ? "identical" : "DIFFERS");
  return o;
}

int Main() {
  TuneAllocator();
  const Dataset corpus = LoadIdx(fs::path(VQVAE_TEST_DATA) / "digits1000-images.idx3-ubyte");
  const Tensor& images = corpus.images;
  std::cout << "corpus: " << corpus.size() << " images " << ShapeToString(images.shape) << std::endl;

  Run(1, "gradient fidelity", GradientFidelity);
  Run(2, "straight-through contract", [&] { return StraightThrough(images); });

  Rng rng(31);
  VqVae fresh = VqVae::Create(DeskSpec(0.25f), rng);
  Run(3, "gradient routing", [&] { return Routing(fresh, images, "fresh desk model"); });
  Run(4, "EMA oracle", EmaOracle);
  Run(5, "KL constant", KlConstant);

  std::optional<DeskResult> desk;
  Run(6, "desk-scale training", [&] {
    desk = TrainUntil(DeskSpec(0.25f), images, 0, DeskDone);
    Outcome o = DeskTraining(*desk);
    const Outcome routed = Routing(desk->run.model, images, "trained model");
    o.pass &= routed.pass;
    o.detail += "; routing on trained model " + std::string(routed.pass ? "holds" : "FAILS");
    return o;
  });
  Run(7, "beta robustness", [&] {
    if (!desk) return Outcome{false, "needs the criterion 6 run"};
    return BetaSweep(*desk, images);
  });
  Run(8, "prior beats uniform bound", [&] {
    if (!desk) return Outcome{false, "needs the criterion 6 run"};
    return PriorGain(desk->run.model, images);
  });
  Run(9, "prior causality", PriorCausality);
  Run(10, "prior recovery", BernoulliRecovery);

  CliWorkspace ws(images);
  Run(11, "determinism", [&] { return Determinism(ws); });
  Run(12, "checkpoint round-trip", [&] { return RoundTrip(ws); });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}

}  // namespace
}  // namespace vqvae

int main() { return vqvae::Main(); }
