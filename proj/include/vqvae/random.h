#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>

namespace vqvae {

// Seeded generator with platform-independent draws. The distributions are
// written out by hand (no cached state) so that serializing the engine alone
// captures everything needed to resume a stream.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  uint64_t NextU64() { return engine_(); }
  // Uniform on [0, 1) with 53 random bits.
  double Uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double Uniform(double lo, double hi) { return lo + (hi - lo) * Uniform(); }
  double Normal();
  // Uniform integer in [0, n). n must be positive.
  uint64_t Below(uint64_t n);

  template <typename T>
  void Shuffle(std::span<T> items) {
    for (size_t i = items.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(Below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::string SaveState() const;
  void LoadState(const std::string& state);

  bool operator==(const Rng& other) const { return engine_ == other.engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace vqvae
