#include "vqvae/cli.h"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>

#include "vqvae/checkpoint.h"
#include "vqvae/config.h"
#include "vqvae/dataset.h"
#include "vqvae/trainer.h"

namespace vqvae {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct Options {
  std::string config, data, out, resume, vqvae, prior, input;
  int64_t n = 16;
  uint64_t seed = 0;
};

void EnsureDir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory '" + dir.string() + "': " + ec.message());
}

std::ofstream OpenAppend(const fs::path& path) {
  std::ofstream f(path, std::ios::app);
  if (!f) throw DataError("cannot open '" + path.string() + "' for writing");
  return f;
}

void CheckImagesFit(const Dataset& ds, const ModelSpec& spec) {
  const Shape& s = ds.images.shape;
  if (s.size() != 4 || s[1] != spec.in_channels || s[2] != spec.height || s[3] != spec.width) {
    throw DataError("images in '" + ds.source + "' have shape " + ShapeToString(s) +
                    " but the model expects [N, " + std::to_string(spec.in_channels) + ", " +
                    std::to_string(spec.height) + ", " + std::to_string(spec.width) + "]");
  }
}

KeyValues ReadConfigFile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return ParseKeyValues(buf.str(), path);
}

VqVae LoadVqVae(const std::string& path) { return VqVaeRunFromCheckpoint(LoadCheckpoint(path)).model; }

PriorModel LoadPrior(const std::string& path, const VqVae& vq) {
  PriorModel prior = PriorRunFromCheckpoint(LoadCheckpoint(path)).model;
  const PriorSpec& p = prior.spec;
  if (p.height != vq.spec.latent_height() || p.width != vq.spec.latent_width() ||
      p.num_codes != vq.spec.num_codes) {
    throw DataError("prior '" + path + "' was trained for a different latent grid");
  }
  return prior;
}

std::string MetricsLine(const StepMetrics& m) {
  return json{{"step", m.step},
              {"recon_nll", m.recon_nll},
              {"codebook_loss", m.codebook_loss},
              {"commit_loss", m.commit_loss},
              {"perplexity", m.perplexity},
              {"wall_ms", m.wall_ms}}
      .dump();
}

std::string PriorMetricsLine(const PriorStepMetrics& m) {
  return json{{"step", m.step},
              {"prior_nll", m.prior_nll},
              {"nll_per_position", m.nll_per_position},
              {"wall_ms", m.wall_ms}}
      .dump();
}

// Decoded point estimates for a batch of code grids.
Tensor DecodeGrid(VqVae& model, const LatentGrid& grid) {
  Tape tape(false);
  tape.DisableGrad();
  const Var out =
      Decode(model.spec, model.params, tape.Constant(LookupCodes(grid, model.codebook)));
  return DistributionMean(out.value(), model.spec.likelihood);
}

std::string ImageName(const std::string& stem, int64_t i, int64_t channels) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "_%04lld", static_cast<long long>(i));
  return stem + buf + (channels == 1 ? ".pgm" : ".ppm");
}

int TrainVqVaeCommand(const Options& o, std::ostream& out, std::ostream& err) {
  const KeyValues kv = ReadConfigFile(o.config);
  const RunConfig config = ApplyConfig(RunConfig{}, kv);
  config.model.Validate();
  config.train.Validate();
  const Dataset ds = LoadImages(o.data);
  CheckImagesFit(ds, config.model);
  const fs::path dir = o.out;
  EnsureDir(dir);

  VqVaeRun run;
  if (o.resume.empty()) {
    run = StartVqVaeRun(config.model, config.train, ds.size());
  } else {
    run = VqVaeRunFromCheckpoint(LoadCheckpoint(o.resume));
    if (!(run.model.spec == config.model)) {
      throw ConfigError("model settings in '" + o.config + "' differ from checkpoint '" +
                        o.resume + "'");
    }
    if (run.sampler.size != ds.size()) {
      throw DataError("checkpoint was trained on " + std::to_string(run.sampler.size) +
                      " images, '" + o.data + "' has " + std::to_string(ds.size()));
    }
    run.config = config.train;
  }

  std::ofstream metrics = OpenAppend(dir / "metrics.jsonl");
  VqVaeHooks hooks;
  hooks.on_step = [&](const StepMetrics& m) { metrics << MetricsLine(m) << '\n'; };
  hooks.on_checkpoint = [&](const VqVaeRun& r) {
    const Checkpoint c = ToCheckpoint(r);
    if (r.step != r.config.steps) SaveCheckpoint(c, dir / ("vqvae-step" + std::to_string(r.step) + ".ckpt"));
    else SaveCheckpoint(c, dir / "vqvae.ckpt");
  };
  hooks.on_eval = [&](const VqVaeRun& r) {
    const EvalReport rep = Evaluate(const_cast<VqVae&>(r.model), nullptr, ds.images);
    err << "step " << r.step << ": recon_mse " << rep.recon_mse << ", perplexity "
        << rep.perplexity << "\n";
  };
  hooks.on_abort = [&](const VqVaeRun& r, const std::string&) {
    metrics.flush();
    SaveCheckpoint(ToCheckpoint(r), dir / "nan_abort.ckpt");
  };
  TrainVqVae(run, ds.images, hooks);
  out << "wrote " << (dir / "vqvae.ckpt").string() << "\n";
  return kExitOk;
}

int TrainPriorCommand(const Options& o, std::ostream& out, std::ostream& err) {
  const KeyValues kv = ReadConfigFile(o.config);
  RunConfig config = ApplyConfig(RunConfig{}, kv);
  VqVae vq = LoadVqVae(o.vqvae);
  const std::pair<const char*, int64_t> derived[] = {
      {"prior_height", vq.spec.latent_height()},
      {"prior_width", vq.spec.latent_width()},
      {"prior_num_codes", vq.spec.num_codes}};
  for (const auto& [key, value] : derived) {
    auto it = kv.find(key);
    if (it != kv.end() && it->second != std::to_string(value)) {
      throw ConfigError(std::string(key) + " = " + it->second + " conflicts with the VQ-VAE (" +
                        std::to_string(value) + ")");
    }
  }
  config.prior.height = vq.spec.latent_height();
  config.prior.width = vq.spec.latent_width();
  config.prior.num_codes = vq.spec.num_codes;
  config.prior.Validate();
  config.train.Validate();

  const Dataset ds = LoadImages(o.data);
  CheckImagesFit(ds, vq.spec);
  const LatentGrid grids = EncodeDataset(vq, ds.images);
  const fs::path dir = o.out;
  EnsureDir(dir);

  PriorRun run = StartPriorRun(config.prior, config.train, grids.batch);
  std::ofstream metrics = OpenAppend(dir / "prior_metrics.jsonl");
  PriorHooks hooks;
  hooks.on_step = [&](const PriorStepMetrics& m) { metrics << PriorMetricsLine(m) << '\n'; };
  hooks.on_checkpoint = [&](const PriorRun& r) {
    const Checkpoint c = ToCheckpoint(r);
    if (r.step != r.config.steps) SaveCheckpoint(c, dir / ("prior-step" + std::to_string(r.step) + ".ckpt"));
    else SaveCheckpoint(c, dir / "prior.ckpt");
  };
  hooks.on_eval = [&](const PriorRun& r) {
    Tape tape(false);
    tape.DisableGrad();
    const double nll = PriorNll(const_cast<PriorModel&>(r.model), tape, grids).value().item();
    err << "step " << r.step << ": prior nll per position "
        << nll / static_cast<double>(grids.positions()) << "\n";
  };
  hooks.on_abort = [&](const PriorRun& r, const std::string&) {
    metrics.flush();
    SaveCheckpoint(ToCheckpoint(r), dir / "nan_abort.ckpt");
  };
  TrainPrior(run, grids, hooks);
  out << "wrote " << (dir / "prior.ckpt").string() << "\n";
  return kExitOk;
}

int ReconstructCommand(const Options& o, std::ostream& out) {
  VqVae vq = LoadVqVae(o.vqvae);
  const Dataset ds = LoadImages(o.input);
  CheckImagesFit(ds, vq.spec);
  const fs::path dir = o.out;
  EnsureDir(dir);
  const int64_t c = vq.spec.in_channels, h = vq.spec.height, w = vq.spec.width;
  const LatentGrid grids = EncodeDataset(vq, ds.images);
  for (int64_t i = 0; i < ds.size(); ++i) {
    const int64_t row[] = {i};
    const Tensor recon = DecodeGrid(vq, GatherGrids(grids, row));
    Tensor pair(Shape{c, h, 2 * w});
    for (int64_t ch = 0; ch < c; ++ch) {
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t x = 0; x < w; ++x) {
          pair[(ch * h + y) * 2 * w + x] = ds.images.at(i, ch, y, x);
          pair[(ch * h + y) * 2 * w + w + x] = recon.at(0, ch, y, x);
        }
      }
    }
    SavePpm(pair, dir / ImageName("recon", i, c));
  }
  out << "wrote " << ds.size() << " reconstructions to " << dir.string() << "\n";
  return kExitOk;
}

int SampleCommand(const Options& o, std::ostream& out) {
  if (o.n <= 0) throw ConfigError("--n must be positive");
  VqVae vq = LoadVqVae(o.vqvae);
  PriorModel prior = LoadPrior(o.prior, vq);
  const fs::path dir = o.out;
  EnsureDir(dir);
  Rng rng(o.seed);
  const LatentGrid grids = SamplePrior(prior, rng, o.n);
  const Tensor images = DecodeGrid(vq, grids);
  for (int64_t i = 0; i < o.n; ++i) {
    const int64_t row[] = {i};
    SavePpm(GatherImages(images, row), dir / ImageName("sample", i, vq.spec.in_channels));
  }
  out << "wrote " << o.n << " samples to " << dir.string() << "\n";
  return kExitOk;
}

int EvalCommand(const Options& o, std::ostream& out) {
  VqVae vq = LoadVqVae(o.vqvae);
  std::optional<PriorModel> prior;
  if (!o.prior.empty()) prior = LoadPrior(o.prior, vq);
  const Dataset ds = LoadImages(o.data);
  CheckImagesFit(ds, vq.spec);
  const EvalReport rep = Evaluate(vq, prior ? &*prior : nullptr, ds.images);
  out << json{{"recon_mse", rep.recon_mse},
              {"bits_per_dim", rep.bits_per_dim},
              {"perplexity", rep.perplexity},
              {"n_images", rep.n_images}}
             .dump()
      << "\n";
  return kExitOk;
}

int CodebookStatsCommand(const Options& o, std::ostream& out) {
  VqVae vq = LoadVqVae(o.vqvae);
  const Dataset ds = LoadImages(o.data);
  CheckImagesFit(ds, vq.spec);
  CodeUsage usage(vq.codebook.num_codes());
  usage.Add(EncodeDataset(vq, ds.images));
  const CodebookStats stats = usage.Stats();
  int64_t used = 0;
  for (int64_t c : stats.histogram) used += c > 0 ? 1 : 0;
  out << json{{"num_codes", vq.codebook.num_codes()},
              {"codes_used", used},
              {"perplexity", stats.perplexity},
              {"histogram", stats.histogram}}
             .dump()
      << "\n";
  return kExitOk;
}

}  // namespace

int RunCli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"VQ-VAE toolkit: train, sample and evaluate discrete-latent autoencoders",
               "vqvae"};
  app.require_subcommand(1);
  Options o;

  auto* train = app.add_subcommand("train-vqvae", "train the autoencoder and its codebook");
  train->add_option("--config", o.config, "key=value config file")->required();
  train->add_option("--data", o.data, "IDX file or directory of PGM/PPM images")->required();
  train->add_option("--out", o.out, "run directory")->required();
  train->add_option("--resume", o.resume, "continue from this checkpoint");
  train->footer("Config keys:\n" + ConfigHelp());

  auto* prior = app.add_subcommand("train-prior", "fit the latent prior on frozen encodings");
  prior->add_option("--vqvae", o.vqvae, "VQ-VAE checkpoint")->required();
  prior->add_option("--config", o.config, "key=value config file")->required();
  prior->add_option("--data", o.data, "IDX file or directory of PGM/PPM images")->required();
  prior->add_option("--out", o.out, "run directory")->required();
  prior->footer("Config keys:\n" + ConfigHelp());

  auto* recon = app.add_subcommand("reconstruct", "write original|reconstruction image pairs");
  recon->add_option("--vqvae", o.vqvae, "VQ-VAE checkpoint")->required();
  recon->add_option("--in", o.input, "IDX file, PGM/PPM image or directory")->required();
  recon->add_option("--out", o.out, "output directory")->required();

  auto* sample = app.add_subcommand("sample", "ancestral sampling from the prior, then decode");
  sample->add_option("--vqvae", o.vqvae, "VQ-VAE checkpoint")->required();
  sample->add_option("--prior", o.prior, "prior checkpoint")->required();
  sample->add_option("--n", o.n, "number of images")->required();
  sample->add_option("--seed", o.seed, "sampling seed")->required();
  sample->add_option("--out", o.out, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "print reconstruction error and the bits/dim bound");
  eval->add_option("--vqvae", o.vqvae, "VQ-VAE checkpoint")->required();
  eval->add_option("--prior", o.prior, "prior checkpoint (uniform prior if omitted)");
  eval->add_option("--data", o.data, "IDX file or directory of PGM/PPM images")->required();

  auto* stats = app.add_subcommand("codebook-stats", "code usage histogram and perplexity");
  stats->add_option("--vqvae", o.vqvae, "VQ-VAE checkpoint")->required();
  stats->add_option("--data", o.data, "IDX file or directory of PGM/PPM images")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << e.what() << "\n\n" << app.help();
    for (const CLI::App* sub : app.get_subcommands()) err << "\n" << sub->help();
    return kExitConfig;
  }

  try {
    if (train->parsed()) return TrainVqVaeCommand(o, out, err);
    if (prior->parsed()) return TrainPriorCommand(o, out, err);
    if (recon->parsed()) return ReconstructCommand(o, out);
    if (sample->parsed()) return SampleCommand(o, out);
    if (eval->parsed()) return EvalCommand(o, out);
    if (stats->parsed()) return CodebookStatsCommand(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const TrainingAborted& e) {
    err << e.what() << "\n";
    return kExitNan;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace vqvae
