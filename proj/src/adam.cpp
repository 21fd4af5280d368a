#include "vqvae/adam.h"

#include <cmath>

namespace vqvae {

void Adam::Step(const std::vector<Binding>& params) {
  ++step_;
  const double t = static_cast<double>(step_);
  const float c1 = static_cast<float>(1.0 / (1.0 - std::pow(double{config_.beta1}, t)));
  const float c2 = static_cast<float>(1.0 / (1.0 - std::pow(double{config_.beta2}, t)));
  const float b1 = config_.beta1;
  const float b2 = config_.beta2;
  const float lr = config_.lr;
  const float eps = config_.eps;

  for (const auto& [name, param] : params) {
    const size_t n = param->data.size();
    Moments& mo = moments_[name];
    if (mo.m.empty()) {
      mo.m.assign(n, 0.0f);
      mo.v.assign(n, 0.0f);
    }
    if (mo.m.size() != n || mo.v.size() != n) {
      throw ShapeError("adam: moment size mismatch for '" + name + "'");
    }
    const bool has_grad = param->grad.size() == n;
    float* __restrict p = param->data.data();
    float* __restrict m = mo.m.data();
    float* __restrict v = mo.v.data();
    const float* __restrict g = has_grad ? param->grad.data() : nullptr;
    for (size_t i = 0; i < n; ++i) {
      const float gi = has_grad ? g[i] : 0.0f;
      m[i] = b1 * m[i] + (1.0f - b1) * gi;
      v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
      p[i] -= lr * (m[i] * c1) / (std::sqrt(v[i] * c2) + eps);
    }
  }
}

void Adam::Restore(int64_t step, std::map<std::string, Moments> moments) {
  if (step < 0) throw DataError("adam: negative step count");
  step_ = step;
  moments_ = std::move(moments);
}

}  // namespace vqvae
