#include "vqvae/nets.h"

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "vqvae/ops.h"

namespace vqvae {
namespace {

void AddConv(ParamTable& params, const std::string& name, Shape kernel_shape, int64_t out_c,
             double fan_in, Rng& rng) {
  Tensor w(std::move(kernel_shape));
  const double std_dev = std::sqrt(2.0 / fan_in);
  for (float& v : w.data) v = static_cast<float>(rng.Normal() * std_dev);
  w.requires_grad = true;
  Tensor b(Shape{out_c});
  b.requires_grad = true;
  params[name + ".w"] = std::move(w);
  params[name + ".b"] = std::move(b);
}

Var Bind(Tape& tape, ParamTable& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw Error("missing parameter '" + name + "'");
  return tape.Leaf(it->second);
}

Var ConvLayer(ParamTable& params, const std::string& name, Var h, int stride, int pad) {
  Tape& tape = *h.tape();
  return AddChannelBias(Conv2d(h, Bind(tape, params, name + ".w"), stride, pad),
                        Bind(tape, params, name + ".b"));
}

Var ConvTransposeLayer(ParamTable& params, const std::string& name, Var h, int stride, int pad) {
  Tape& tape = *h.tape();
  return AddChannelBias(Conv2dTranspose(h, Bind(tape, params, name + ".w"), stride, pad),
                        Bind(tape, params, name + ".b"));
}

// log(sigmoid(t)) without overflow.
double LogSigmoid(double t) { return t >= 0 ? -std::log1p(std::exp(-t)) : t - std::log1p(std::exp(t)); }
double Sigmoid(double t) {
  if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
  const double e = std::exp(t);
  return e / (1.0 + e);
}

struct PixelTerm {
  double log_prob;
  double d_mean;
  double d_log_scale;
};

// Log probability of the 8-bit bin around |x| under a logistic with the given
// mean and log-scale, with derivatives.
PixelTerm LogisticBin(double x, double mean, double log_scale) {
  const double half = kPixelHalfBin;
  const double inv_s = std::exp(-log_scale);
  const double centered = x - mean;
  const double a = (centered + half) * inv_s;  // upper bin edge
  const double b = (centered - half) * inv_s;  // lower bin edge
  PixelTerm out{};
  double d_a = 0.0, d_b = 0.0;
  if (x < -0.5 + half) {
    // Lowest bin absorbs everything below.
    out.log_prob = LogSigmoid(a);
    d_a = 1.0 - Sigmoid(a);
  } else if (x > 0.5 - half) {
    out.log_prob = LogSigmoid(-b);
    d_b = -Sigmoid(b);
  } else {
    // sigma(a) - sigma(b) == sigma(-b) - sigma(-a); use the side that avoids
    // cancellation near 1.
    const bool flip = b > 0.0;
    const double hi = flip ? Sigmoid(-b) : Sigmoid(a);
    const double lo = flip ? Sigmoid(-a) : Sigmoid(b);
    const double mass = hi - lo;
    if (mass > 1e-12) {
      out.log_prob = std::log(mass);
      const double sa = Sigmoid(a), sb = Sigmoid(b);
      d_a = sa * (1.0 - sa) / mass;
      d_b = -sb * (1.0 - sb) / mass;
    } else {
      // Density at the bin centre times the bin width.
      const double m = centered * inv_s;
      const double am = std::fabs(m);
      out.log_prob = -am - 2.0 * std::log1p(std::exp(-am)) - log_scale + std::log(2.0 * half);
      const double d_m = -std::tanh(0.5 * m);
      out.d_mean = -d_m * inv_s;
      out.d_log_scale = -d_m * m - 1.0;
      return out;
    }
  }
  out.d_mean = -(d_a + d_b) * inv_s;
  out.d_log_scale = -(d_a * a + d_b * b);
  return out;
}

}  // namespace

std::string_view LikelihoodName(Likelihood kind) {
  return kind == Likelihood::kGaussian ? "gaussian" : "logistic";
}

Likelihood ParseLikelihood(std::string_view name) {
  if (name == "gaussian") return Likelihood::kGaussian;
  if (name == "logistic") return Likelihood::kDiscretizedLogistic;
  throw ConfigError("unknown likelihood '" + std::string(name) +
                    "' (expected gaussian or logistic)");
}

void ModelSpec::Validate() const {
  auto positive = [](int64_t v, const char* what) {
    if (v <= 0) throw ConfigError(std::string(what) + " must be positive, got " + std::to_string(v));
  };
  positive(height, "height");
  positive(width, "width");
  positive(hidden, "hidden");
  positive(stages, "stages");
  positive(embedding_dim, "embedding_dim");
  positive(num_codes, "num_codes");
  if (in_channels != 1 && in_channels != 3) {
    throw ConfigError("in_channels must be 1 or 3, got " + std::to_string(in_channels));
  }
  if (res_blocks < 0) throw ConfigError("res_blocks must be >= 0");
  if (stages > 16) throw ConfigError("stages must be <= 16");
  const int64_t factor = int64_t{1} << stages;
  if (height % factor != 0 || width % factor != 0) {
    throw ConfigError("input " + std::to_string(height) + "x" + std::to_string(width) +
                      " is not divisible by 2^" + std::to_string(stages));
  }
  if (!(beta >= 0.0f)) throw ConfigError("beta must be >= 0");
  if (ema && !(gamma >= 0.0f && gamma < 1.0f)) throw ConfigError("gamma must lie in [0, 1)");
}

VqVae VqVae::Create(const ModelSpec& spec, Rng& rng) {
  spec.Validate();
  VqVae model;
  model.spec = spec;
  ParamTable& p = model.params;
  const int64_t hid = spec.hidden;
  const int64_t k4 = 16, k3 = 9;

  for (int64_t s = 0; s < spec.stages; ++s) {
    const int64_t in_c = s == 0 ? spec.in_channels : hid;
    AddConv(p, "enc.down" + std::to_string(s), {hid, in_c, 4, 4}, hid,
            static_cast<double>(in_c * k4), rng);
  }
  for (int64_t r = 0; r < spec.res_blocks; ++r) {
    const std::string pre = "enc.res" + std::to_string(r);
    AddConv(p, pre + ".conv3", {hid, hid, 3, 3}, hid, static_cast<double>(hid * k3), rng);
    AddConv(p, pre + ".conv1", {hid, hid, 1, 1}, hid, static_cast<double>(hid), rng);
  }
  AddConv(p, "enc.proj", {spec.embedding_dim, hid, 1, 1}, spec.embedding_dim,
          static_cast<double>(hid), rng);

  AddConv(p, "dec.in", {hid, spec.embedding_dim, 3, 3}, hid,
          static_cast<double>(spec.embedding_dim * k3), rng);
  for (int64_t r = 0; r < spec.res_blocks; ++r) {
    const std::string pre = "dec.res" + std::to_string(r);
    AddConv(p, pre + ".conv3", {hid, hid, 3, 3}, hid, static_cast<double>(hid * k3), rng);
    AddConv(p, pre + ".conv1", {hid, hid, 1, 1}, hid, static_cast<double>(hid), rng);
  }
  for (int64_t s = 0; s < spec.stages; ++s) {
    const int64_t out_c = s + 1 == spec.stages ? spec.output_channels() : hid;
    // A stride-2 4x4 transposed conv feeds each output pixel from a 2x2
    // window of inputs per channel.
    AddConv(p, "dec.up" + std::to_string(s), {hid, out_c, 4, 4}, out_c,
            static_cast<double>(hid * 4), rng);
  }

  model.codebook = Codebook::Create(spec.num_codes, spec.embedding_dim, spec.beta, spec.ema,
                                    spec.gamma, rng);
  return model;
}

Var ResidualBlock(ParamTable& params, const std::string& prefix, Var h) {
  Var inner = ConvLayer(params, prefix + ".conv3", Relu(h), 1, 1);
  inner = ConvLayer(params, prefix + ".conv1", Relu(inner), 1, 0);
  return Add(h, inner);
}

Var Encode(const ModelSpec& spec, ParamTable& params, Var x) {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != spec.in_channels || s[2] != spec.height || s[3] != spec.width) {
    throw ShapeError("encode: input " + ShapeToString(s) + " does not match model input [B, " +
                     std::to_string(spec.in_channels) + ", " + std::to_string(spec.height) +
                     ", " + std::to_string(spec.width) + "]");
  }
  Var h = x;
  for (int64_t i = 0; i < spec.stages; ++i) {
    h = Relu(ConvLayer(params, "enc.down" + std::to_string(i), h, 2, 1));
  }
  for (int64_t r = 0; r < spec.res_blocks; ++r) {
    h = ResidualBlock(params, "enc.res" + std::to_string(r), h);
  }
  return ConvLayer(params, "enc.proj", Relu(h), 1, 0);
}

Var Decode(const ModelSpec& spec, ParamTable& params, Var z_q) {
  const Shape& s = z_q.shape();
  if (s.size() != 4 || s[1] != spec.embedding_dim || s[2] != spec.latent_height() ||
      s[3] != spec.latent_width()) {
    throw ShapeError("decode: latent " + ShapeToString(s) + " does not match [B, " +
                     std::to_string(spec.embedding_dim) + ", " +
                     std::to_string(spec.latent_height()) + ", " +
                     std::to_string(spec.latent_width()) + "]");
  }
  Var h = ConvLayer(params, "dec.in", z_q, 1, 1);
  for (int64_t r = 0; r < spec.res_blocks; ++r) {
    h = ResidualBlock(params, "dec.res" + std::to_string(r), h);
  }
  h = Relu(h);
  for (int64_t i = 0; i < spec.stages; ++i) {
    h = ConvTransposeLayer(params, "dec.up" + std::to_string(i), h, 2, 1);
    if (i + 1 < spec.stages) h = Relu(h);
  }
  return h;
}

Var ReconstructionNll(Var dist_params, const Tensor& x, Likelihood kind, float sigma) {
  RequireRank(x, 4, "reconstruction_nll");
  const double batch = static_cast<double>(x.dim(0));
  const double pixels = static_cast<double>(x.numel()) / batch;
  if (kind == Likelihood::kDiscretizedLogistic) {
    return MulScalar(DiscretizedLogisticNll(dist_params, x), static_cast<float>(1.0 / batch));
  }
  if (dist_params.shape() != x.shape) {
    throw ShapeError("reconstruction_nll: mean " + ShapeToString(dist_params.shape()) +
                     " vs data " + ShapeToString(x.shape));
  }
  const double var = static_cast<double>(sigma) * sigma;
  Tape& tape = *dist_params.tape();
  const Var sq = Sum(Square(Sub(dist_params, tape.Constant(Tensor(x.shape, x.data)))));
  const double log_norm = 0.5 * std::log(2.0 * std::numbers::pi * var) * pixels;
  return AddScalar(MulScalar(sq, static_cast<float>(1.0 / (2.0 * var * batch))),
                   static_cast<float>(log_norm));
}

Var DiscretizedLogisticNll(Var params, const Tensor& x) {
  const Tensor& pv = params.value();
  RequireRank(pv, 4, "discretized_logistic_nll");
  RequireRank(x, 4, "discretized_logistic_nll");
  const int64_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (pv.dim(0) != batch || pv.dim(1) != 2 * channels || pv.dim(2) != x.dim(2) ||
      pv.dim(3) != x.dim(3)) {
    throw ShapeError("discretized_logistic_nll: params " + ShapeToString(pv.shape) +
                     " do not match data " + ShapeToString(x.shape) + " (need 2C channels)");
  }
  double total = 0.0;
  std::vector<float> d_params(pv.data.size(), 0.0f);
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t c = 0; c < channels; ++c) {
      const int64_t mean_off = (b * 2 * channels + c) * plane;
      const int64_t scale_off = (b * 2 * channels + channels + c) * plane;
      const int64_t x_off = (b * channels + c) * plane;
      for (int64_t p = 0; p < plane; ++p) {
        const PixelTerm t = LogisticBin(x[x_off + p], pv[mean_off + p], pv[scale_off + p]);
        total -= t.log_prob;
        d_params[static_cast<size_t>(mean_off + p)] = static_cast<float>(-t.d_mean);
        d_params[static_cast<size_t>(scale_off + p)] = static_cast<float>(-t.d_log_scale);
      }
    }
  }
  const int p_id = params.id();
  return params.tape()->Record("discretized_logistic_nll",
                               Tensor::Scalar(static_cast<float>(total)), {p_id},
                               [p_id, dp = std::move(d_params)](Tape& t, int id) {
                                 const float g = t.grad(id)[0];
                                 std::vector<float>& gp = t.grad(p_id);
                                 for (size_t i = 0; i < dp.size(); ++i) gp[i] += g * dp[i];
                               });
}

Tensor DistributionMean(const Tensor& dist_params, Likelihood kind) {
  RequireRank(dist_params, 4, "distribution_mean");
  if (kind == Likelihood::kGaussian) return Tensor(dist_params.shape, dist_params.data);
  const int64_t batch = dist_params.dim(0), channels = dist_params.dim(1) / 2;
  const int64_t plane = dist_params.dim(2) * dist_params.dim(3);
  Tensor mean(Shape{batch, channels, dist_params.dim(2), dist_params.dim(3)});
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t c = 0; c < channels; ++c) {
      for (int64_t p = 0; p < plane; ++p) {
        mean[(b * channels + c) * plane + p] = dist_params[(b * 2 * channels + c) * plane + p];
      }
    }
  }
  return mean;
}

bool IsEncoderParam(const std::string& name) { return name.rfind("enc.", 0) == 0; }
bool IsDecoderParam(const std::string& name) { return name.rfind("dec.", 0) == 0; }

}  // namespace vqvae
