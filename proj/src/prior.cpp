#include "vqvae/prior.h"

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "vqvae/ops.h"

namespace vqvae {
namespace {

std::string LayerName(int64_t l) { return "prior.layer" + std::to_string(l); }

Var BindParam(Tape& tape, ParamTable& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw Error("missing prior parameter '" + name + "'");
  return tape.Leaf(it->second);
}

void CheckGrid(const PriorSpec& spec, const LatentGrid& grid) {
  if (grid.height != spec.height || grid.width != spec.width || grid.num_codes != spec.num_codes) {
    throw ShapeError("prior: grid " + std::to_string(grid.height) + "x" +
                     std::to_string(grid.width) + " over " + std::to_string(grid.num_codes) +
                     " codes does not match prior " + std::to_string(spec.height) + "x" +
                     std::to_string(spec.width) + " over " + std::to_string(spec.num_codes));
  }
  grid.Validate();
}

}  // namespace

void PriorSpec::Validate() const {
  if (height <= 0 || width <= 0 || num_codes <= 0 || layers <= 0 || hidden <= 0 ||
      embed_dim <= 0 || kernel <= 0) {
    throw ConfigError("prior sizes must all be positive");
  }
  if (kernel % 2 == 0) throw ConfigError("prior kernel must be odd, got " + std::to_string(kernel));
}

Tensor CausalMask(int64_t out_channels, int64_t in_channels, int64_t kernel, MaskKind kind) {
  Tensor mask(Shape{out_channels, in_channels, kernel, kernel});
  const int64_t centre = kernel / 2;
  const int64_t taps = kernel * kernel;
  for (int64_t i = 0; i < kernel; ++i) {
    for (int64_t j = 0; j < kernel; ++j) {
      const bool earlier = i < centre || (i == centre && j < centre);
      const bool allowed = earlier || (kind == MaskKind::kB && i == centre && j == centre);
      if (!allowed) continue;
      for (int64_t o = 0; o < out_channels; ++o) {
        for (int64_t c = 0; c < in_channels; ++c) mask[(o * in_channels + c) * taps + i * kernel + j] = 1.0f;
      }
    }
  }
  return mask;
}

PriorModel PriorModel::Create(const PriorSpec& spec, Rng& rng) {
  spec.Validate();
  PriorModel model;
  model.spec = spec;
  ParamTable& p = model.params;

  Tensor embed(Shape{spec.num_codes, spec.embed_dim});
  for (float& v : embed.data) v = static_cast<float>(rng.Normal());
  embed.requires_grad = true;
  p["prior.embed"] = std::move(embed);

  const int64_t k = spec.kernel;
  for (int64_t l = 0; l < spec.layers; ++l) {
    const int64_t in_c = l == 0 ? spec.embed_dim : spec.hidden;
    // Roughly half of each kernel is masked out.
    const double fan_in = static_cast<double>(in_c) * static_cast<double>(k * k) / 2.0;
    Tensor w(Shape{spec.hidden, in_c, k, k});
    const double std_dev = std::sqrt(2.0 / fan_in);
    for (float& v : w.data) v = static_cast<float>(rng.Normal() * std_dev);
    w.requires_grad = true;
    Tensor b(Shape{spec.hidden});
    b.requires_grad = true;
    p[LayerName(l) + ".w"] = std::move(w);
    p[LayerName(l) + ".b"] = std::move(b);
  }
  // Zero output weights: the untrained prior is exactly uniform.
  Tensor out_w(Shape{spec.num_codes, spec.hidden, 1, 1});
  out_w.requires_grad = true;
  Tensor out_b(Shape{spec.num_codes});
  out_b.requires_grad = true;
  p["prior.out.w"] = std::move(out_w);
  p["prior.out.b"] = std::move(out_b);
  return model;
}

Var PriorLogits(PriorModel& model, Tape& tape, const LatentGrid& grid) {
  const PriorSpec& spec = model.spec;
  CheckGrid(spec, grid);
  ParamTable& params = model.params;
  Var h = GatherRows(BindParam(tape, params, "prior.embed"), grid.indices, grid.batch,
                     grid.height, grid.width);
  const int pad = static_cast<int>(spec.kernel / 2);
  for (int64_t l = 0; l < spec.layers; ++l) {
    const std::string name = LayerName(l);
    Var w = BindParam(tape, params, name + ".w");
    const Shape& ws = w.shape();
    w = MulConstant(w, CausalMask(ws[0], ws[1], ws[2], l == 0 ? MaskKind::kA : MaskKind::kB));
    h = Relu(AddChannelBias(Conv2d(h, w, 1, pad), BindParam(tape, params, name + ".b")));
  }
  return AddChannelBias(Conv2d(h, BindParam(tape, params, "prior.out.w"), 1, 0),
                        BindParam(tape, params, "prior.out.b"));
}

Var PriorNll(PriorModel& model, Tape& tape, const LatentGrid& grid) {
  const Var logits = PriorLogits(model, tape, grid);
  return MulScalar(CategoricalNll(logits, grid.indices),
                   1.0f / static_cast<float>(grid.batch));
}

LatentGrid SamplePrior(PriorModel& model, Rng& rng, int64_t batch) {
  const PriorSpec& spec = model.spec;
  if (batch <= 0) throw Error("sample_prior: batch must be positive");
  LatentGrid grid(batch, spec.height, spec.width, spec.num_codes);
  const int64_t plane = grid.positions();
  const int64_t classes = spec.num_codes;
  std::vector<double> probs(static_cast<size_t>(classes));
  for (int64_t pos = 0; pos < plane; ++pos) {
    Tape tape(false);
    tape.DisableGrad();
    const Tensor& logits = PriorLogits(model, tape, grid).value();
    for (int64_t b = 0; b < batch; ++b) {
      const float* base = logits.data.data() + b * classes * plane + pos;
      double mx = base[0];
      for (int64_t k = 1; k < classes; ++k) mx = std::max<double>(mx, base[k * plane]);
      double z = 0.0;
      for (int64_t k = 0; k < classes; ++k) {
        probs[static_cast<size_t>(k)] = std::exp(base[k * plane] - mx);
        z += probs[static_cast<size_t>(k)];
      }
      const double u = rng.Uniform() * z;
      double cumulative = 0.0;
      int32_t pick = static_cast<int32_t>(classes - 1);
      for (int64_t k = 0; k < classes; ++k) {
        cumulative += probs[static_cast<size_t>(k)];
        if (u < cumulative) {
          pick = static_cast<int32_t>(k);
          break;
        }
      }
      grid.indices[static_cast<size_t>(b * plane + pos)] = pick;
    }
  }
  return grid;
}

double BitsPerDim(double nats, int64_t data_dims) {
  return nats / (static_cast<double>(data_dims) * std::numbers::ln2);
}

ElboBound ComputeElboBound(const Tensor& x, VqVae& model, PriorModel* prior) {
  const ModelSpec& spec = model.spec;
  Tape tape(false);
  tape.DisableGrad();
  const Var z_e = Encode(spec, model.params, tape.Constant(Tensor(x.shape, x.data)));
  const LatentGrid grid = AssignCodes(z_e.value(), model.codebook);
  const Var out = Decode(spec, model.params, tape.Constant(LookupCodes(grid, model.codebook)));

  ElboBound bound;
  bound.recon_nll = ReconstructionNll(out, x, spec.likelihood).value().item();
  if (prior != nullptr) {
    bound.prior_nll = PriorNll(*prior, tape, grid).value().item();
  } else {
    bound.prior_nll = static_cast<double>(grid.positions()) * KlToUniformPrior(spec.num_codes);
  }
  bound.total = bound.recon_nll + bound.prior_nll;
  bound.bits_per_dim = BitsPerDim(bound.total, spec.data_dims());
  return bound;
}

}  // namespace vqvae
