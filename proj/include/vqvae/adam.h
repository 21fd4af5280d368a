#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vqvae/tensor.h"

namespace vqvae {

struct AdamConfig {
  float lr = 2e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;

  bool operator==(const AdamConfig&) const = default;
};

// Bias-corrected Adam. Moments are created lazily per parameter name and
// only for parameters that are actually passed to Step, so a tensor that is
// never optimized (an EMA-maintained codebook) has no state here.
class Adam {
 public:
  struct Moments {
    std::vector<float> m;
    std::vector<float> v;
    bool operator==(const Moments&) const = default;
  };
  using Binding = std::pair<std::string, Tensor*>;

  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // One update of every bound tensor from its current grad. Tensors without
  // a grad buffer are treated as having zero gradient.
  void Step(const std::vector<Binding>& params);

  const AdamConfig& config() const { return config_; }
  int64_t step() const { return step_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

  // Restores serialized state; shapes are checked on the next Step.
  void Restore(int64_t step, std::map<std::string, Moments> moments);

  bool operator==(const Adam&) const = default;

 private:
  AdamConfig config_;
  int64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace vqvae
