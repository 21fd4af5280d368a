#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vqvae {

using Shape = std::vector<int64_t>;

// Error hierarchy. The CLI maps these onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// Raised when a forward value or gradient becomes NaN/Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

int64_t NumElements(const Shape& shape);
std::string ShapeToString(const Shape& shape);
bool AllFinite(std::span<const float> values);

// Dense row-major float32 array. Rank-0 tensors (empty shape) hold one value.
struct Tensor {
  Shape shape;
  std::vector<float> data;
  // Empty, or the same length as |data| once a backward pass has run.
  std::vector<float> grad;
  bool requires_grad = false;

  Tensor() = default;
  explicit Tensor(Shape s, float fill = 0.0f);
  Tensor(Shape s, std::vector<float> values);

  static Tensor Scalar(float v) { return Tensor(Shape{}, v); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t rank() const { return static_cast<int64_t>(shape.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  bool has_grad() const { return !grad.empty(); }

  float item() const;

  float& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  float operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // NCHW accessors; no bounds checking beyond the vector's own.
  float& at(int64_t n, int64_t c, int64_t h, int64_t w) {
    return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }
  float at(int64_t n, int64_t c, int64_t h, int64_t w) const {
    return data[static_cast<size_t>(((n * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }

  void zero_grad() { grad.assign(data.size(), 0.0f); }
};

// Throws ShapeError mentioning |what| if |t| is not rank |rank|.
void RequireRank(const Tensor& t, int64_t rank, const char* what);

}  // namespace vqvae
