#include "support/oracles.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "vqvae/ops.h"

namespace vqvae::testing {

Tensor RandomTensor(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (float& v : t.data) v = static_cast<float>(rng.Uniform(lo, hi));
  return t;
}

Tensor RandomAwayFromZero(Shape shape, Rng& rng, double margin) {
  Tensor t(std::move(shape));
  for (float& v : t.data) {
    const double mag = rng.Uniform(margin, 1.0);
    v = static_cast<float>(rng.Uniform() < 0.5 ? -mag : mag);
  }
  return t;
}

Tensor NaiveConv2d(const Tensor& x, const Tensor& k, int stride, int pad) {
  const int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Co = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  Tensor y(Shape{B, Co, Ho, Wo});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t o = 0; o < Co; ++o)
      for (int64_t i = 0; i < Ho; ++i)
        for (int64_t j = 0; j < Wo; ++j) {
          double acc = 0.0;
          for (int64_t c = 0; c < Ci; ++c)
            for (int64_t u = 0; u < kh; ++u)
              for (int64_t v = 0; v < kw; ++v) {
                const int64_t r = i * stride + u - pad, s = j * stride + v - pad;
                if (r < 0 || r >= H || s < 0 || s >= W) continue;
                acc += static_cast<double>(x.at(b, c, r, s)) * k.at(o, c, u, v);
              }
          y.at(b, o, i, j) = static_cast<float>(acc);
        }
  return y;
}

Tensor NaiveConv2dTranspose(const Tensor& x, const Tensor& k, int stride, int pad) {
  const int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Co = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  const int64_t Ho = (H - 1) * stride - 2 * pad + kh;
  const int64_t Wo = (W - 1) * stride - 2 * pad + kw;
  std::vector<double> acc(static_cast<size_t>(B * Co * Ho * Wo), 0.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < Ci; ++c)
      for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j)
          for (int64_t o = 0; o < Co; ++o)
            for (int64_t u = 0; u < kh; ++u)
              for (int64_t v = 0; v < kw; ++v) {
                const int64_t r = i * stride + u - pad, s = j * stride + v - pad;
                if (r < 0 || r >= Ho || s < 0 || s >= Wo) continue;
                acc[static_cast<size_t>(((b * Co + o) * Ho + r) * Wo + s)] +=
                    static_cast<double>(x.at(b, c, i, j)) * k.at(c, o, u, v);
              }
  Tensor y(Shape{B, Co, Ho, Wo});
  for (size_t i = 0; i < acc.size(); ++i) y.data[i] = static_cast<float>(acc[i]);
  return y;
}

double Dot(const Tensor& a, const Tensor& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) acc += static_cast<double>(a.data[i]) * b.data[i];
  return acc;
}

int32_t ExhaustiveNearest(const std::vector<float>& z, const Tensor& embeddings) {
  const int64_t K = embeddings.dim(0), D = embeddings.dim(1);
  std::vector<float> dist(static_cast<size_t>(K));
  for (int64_t k = 0; k < K; ++k) {
    float d = 0.0f;
    for (int64_t j = 0; j < D; ++j) {
      const float diff = z[static_cast<size_t>(j)] - embeddings[k * D + j];
      d += diff * diff;
    }
    dist[static_cast<size_t>(k)] = d;
  }
  // min_element returns the first minimum.
  return static_cast<int32_t>(std::min_element(dist.begin(), dist.end()) - dist.begin());
}

GradCheckResult GradCheck(std::vector<Tensor*> leaves, const LossBuilder& build, double h,
                          double abs_tol, double rel_tol, int64_t max_per_leaf) {
  Tensor projection;
  auto evaluate = [&]() {
    Tape tape(true);
    std::vector<Var> vars;
    for (Tensor* t : leaves) vars.push_back(tape.Leaf(*t));
    const Tensor& y = build(tape, vars).value();
    return Dot(y, projection);
  };

  std::vector<std::vector<float>> analytic;
  {
    Tape tape(true);
    std::vector<Var> vars;
    for (Tensor* t : leaves) {
      t->requires_grad = true;
      vars.push_back(tape.Leaf(*t));
    }
    const Var y = build(tape, vars);
    if (y.value().numel() == 1) {
      projection = Tensor(y.shape(), 1.0f);
    } else {
      Rng rng(0x5eed);
      projection = RandomTensor(y.shape(), rng);
    }
    tape.Backward(Sum(MulConstant(y, projection)));
    for (Tensor* t : leaves) analytic.push_back(t->grad);
  }

  GradCheckResult result;
  double worst_excess = -std::numeric_limits<double>::infinity();
  for (size_t l = 0; l < leaves.size(); ++l) {
    Tensor& t = *leaves[l];
    const int64_t n = t.numel();
    const int64_t stride = std::max<int64_t>(1, n / max_per_leaf);
    for (int64_t i = 0; i < n; i += stride) {
      const float saved = t.data[static_cast<size_t>(i)];
      t.data[static_cast<size_t>(i)] = static_cast<float>(saved + h);
      const double up = evaluate();
      t.data[static_cast<size_t>(i)] = static_cast<float>(saved - h);
      const double down = evaluate();
      t.data[static_cast<size_t>(i)] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[l].empty() ? 0.0 : analytic[l][static_cast<size_t>(i)];
      const double err = std::fabs(a - numeric);
      const double excess = err - (abs_tol + rel_tol * std::fabs(numeric));
      ++result.checked;
      result.max_abs_err = std::max(result.max_abs_err, err);
      if (excess > worst_excess) {
        worst_excess = excess;
        std::ostringstream os;
        os << "leaf " << l << " entry " << i << ": analytic " << a << " numeric " << numeric;
        result.worst = os.str();
      }
      if (excess > 0.0) result.ok = false;
    }
  }
  return result;
}

}  // namespace vqvae::testing
