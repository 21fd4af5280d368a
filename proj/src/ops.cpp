#include "vqvae/ops.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace vqvae {
namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using AlignedMap = Eigen::Map<RowMat, Eigen::Aligned64>;

struct ConvGeom {
  int64_t batch, in_c, in_h, in_w;
  int64_t out_c, out_h, out_w;
  int64_t kh, kw;
  int stride, pad;
};

Tape& SharedTape(Var a, Var b, const char* op) {
  if (!a.valid() || a.tape() != b.tape()) {
    throw Error(std::string(op) + ": operands belong to different tapes");
  }
  return *a.tape();
}

void RequireSameShape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape != b.shape) {
    throw ShapeError(std::string(op) + ": shape mismatch " + ShapeToString(a.shape) + " vs " +
                     ShapeToString(b.shape));
  }
}

// For one kernel tap (ki, kj): the input-plane offset read by each output
// pixel, or -1 where the tap lands in the zero padding.
std::vector<int64_t> TapOffsets(int64_t height, int64_t width, int64_t ki, int64_t kj,
                                int stride, int pad, int64_t out_h, int64_t out_w) {
  std::vector<int64_t> offsets(static_cast<size_t>(out_h * out_w));
  for (int64_t oh = 0; oh < out_h; ++oh) {
    const int64_t ih = oh * stride - pad + ki;
    for (int64_t ow = 0; ow < out_w; ++ow) {
      const int64_t iw = ow * stride - pad + kj;
      const bool inside = ih >= 0 && ih < height && iw >= 0 && iw < width;
      offsets[static_cast<size_t>(oh * out_w + ow)] = inside ? ih * width + iw : -1;
    }
  }
  return offsets;
}

// Stride-1 unfolding copies contiguous row segments; taps that fall in the
// padding are zero-filled.
void Im2ColUnitStride(const float* x, int64_t batch, int64_t channels, int64_t height,
                      int64_t width, int64_t kh, int64_t kw, int pad, int64_t out_h,
                      int64_t out_w, float* cols) {
  const int64_t plane = out_h * out_w;
  const int64_t row_len = batch * plane;
  if (kh == 1 && kw == 1 && pad == 0) {
    for (int64_t c = 0; c < channels; ++c) {
      for (int64_t b = 0; b < batch; ++b) {
        std::copy_n(x + (b * channels + c) * plane, plane, cols + c * row_len + b * plane);
      }
    }
    return;
  }
  for (int64_t c = 0; c < channels; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const int64_t lo = std::clamp<int64_t>(pad - kj, 0, out_w);
        const int64_t hi = std::clamp<int64_t>(width + pad - kj, lo, out_w);
        float* dst = cols + ((c * kh + ki) * kw + kj) * row_len;
        for (int64_t b = 0; b < batch; ++b) {
          const float* src = x + (b * channels + c) * height * width;
          for (int64_t oh = 0; oh < out_h; ++oh) {
            float* d = dst + b * plane + oh * out_w;
            const int64_t ih = oh - pad + ki;
            if (ih < 0 || ih >= height) {
              std::fill(d, d + out_w, 0.0f);
              continue;
            }
            const float* row = src + ih * width - pad + kj;
            std::fill(d, d + lo, 0.0f);
            std::copy(row + lo, row + hi, d + lo);
            std::fill(d + hi, d + out_w, 0.0f);
          }
        }
      }
    }
  }
}

void Col2ImUnitStride(const float* cols, int64_t batch, int64_t channels, int64_t height,
                      int64_t width, int64_t kh, int64_t kw, int pad, int64_t out_h,
                      int64_t out_w, float* x) {
  const int64_t plane = out_h * out_w;
  const int64_t row_len = batch * plane;
  for (int64_t c = 0; c < channels; ++c) {
    for (int64_t ki = 0; ki < kh; ++ki) {
      for (int64_t kj = 0; kj < kw; ++kj) {
        const int64_t lo = std::clamp<int64_t>(pad - kj, 0, out_w);
        const int64_t hi = std::clamp<int64_t>(width + pad - kj, lo, out_w);
        const float* src = cols + ((c * kh + ki) * kw + kj) * row_len;
        for (int64_t b = 0; b < batch; ++b) {
          float* dst = x + (b * channels + c) * height * width;
          for (int64_t oh = 0; oh < out_h; ++oh) {
            const int64_t ih = oh - pad + ki;
            if (ih < 0 || ih >= height) continue;
            const float* __restrict s = src + b * plane + oh * out_w;
            float* __restrict row = dst + ih * width - pad + kj;
            for (int64_t ow = lo; ow < hi; ++ow) row[ow] += s[ow];
          }
        }
      }
    }
  }
}

// Unfolds x [B, C, H, W] into cols [C*kh*kw, B*Ho*Wo] (row-major).
void Im2Col(const float* x, int64_t batch, int64_t channels, int64_t height, int64_t width,
            int64_t kh, int64_t kw, int stride, int pad, int64_t out_h, int64_t out_w,
            float* cols) {
  const int64_t plane = out_h * out_w;
  const int64_t in_plane = height * width;
  const int64_t row_len = batch * plane;
  if (stride == 1) {
    Im2ColUnitStride(x, batch, channels, height, width, kh, kw, pad, out_h, out_w, cols);
    return;
  }
  for (int64_t ki = 0; ki < kh; ++ki) {
    for (int64_t kj = 0; kj < kw; ++kj) {
      const std::vector<int64_t> offsets =
          TapOffsets(height, width, ki, kj, stride, pad, out_h, out_w);
      for (int64_t c = 0; c < channels; ++c) {
        float* dst = cols + ((c * kh + ki) * kw + kj) * row_len;
        for (int64_t b = 0; b < batch; ++b) {
          const float* src = x + (b * channels + c) * in_plane;
          float* d = dst + b * plane;
          for (int64_t p = 0; p < plane; ++p) {
            const int64_t off = offsets[static_cast<size_t>(p)];
            d[p] = off >= 0 ? src[off] : 0.0f;
          }
        }
      }
    }
  }
}

// Adjoint of Im2Col: accumulates cols back into x.
void Col2Im(const float* cols, int64_t batch, int64_t channels, int64_t height, int64_t width,
            int64_t kh, int64_t kw, int stride, int pad, int64_t out_h, int64_t out_w, float* x) {
  const int64_t plane = out_h * out_w;
  const int64_t in_plane = height * width;
  const int64_t row_len = batch * plane;
  if (stride == 1) {
    Col2ImUnitStride(cols, batch, channels, height, width, kh, kw, pad, out_h, out_w, x);
    return;
  }
  for (int64_t ki = 0; ki < kh; ++ki) {
    for (int64_t kj = 0; kj < kw; ++kj) {
      const std::vector<int64_t> offsets =
          TapOffsets(height, width, ki, kj, stride, pad, out_h, out_w);
      for (int64_t c = 0; c < channels; ++c) {
        const float* src = cols + ((c * kh + ki) * kw + kj) * row_len;
        for (int64_t b = 0; b < batch; ++b) {
          float* dst = x + (b * channels + c) * in_plane;
          const float* s = src + b * plane;
          for (int64_t p = 0; p < plane; ++p) {
            const int64_t off = offsets[static_cast<size_t>(p)];
            if (off >= 0) dst[off] += s[p];
          }
        }
      }
    }
  }
}

// Reusable per-thread buffers for unfolded columns. Slot 0 serves forward
// passes, slot 1 backward passes.
AlignedMap Scratch(int slot, int64_t rows, int64_t cols) {
  thread_local std::vector<float, Eigen::aligned_allocator<float>> buffers[2];
  auto& buf = buffers[slot];
  if (buf.size() < static_cast<size_t>(rows * cols)) buf.resize(static_cast<size_t>(rows * cols));
  return AlignedMap(buf.data(), rows, cols);
}

// [B, C, P] -> [C, B*P]
RowMat ChannelMajor(const float* x, int64_t batch, int64_t channels, int64_t plane) {
  RowMat m(channels, batch * plane);
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t c = 0; c < channels; ++c) {
      std::copy_n(x + (b * channels + c) * plane, plane, m.data() + c * batch * plane + b * plane);
    }
  }
  return m;
}

// [C, B*P] -> accumulate into [B, C, P]
void AddBatchMajor(const RowMat& m, int64_t batch, int64_t channels, int64_t plane, float* x) {
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t c = 0; c < channels; ++c) {
      const float* src = m.data() + c * batch * plane + b * plane;
      float* dst = x + (b * channels + c) * plane;
      for (int64_t p = 0; p < plane; ++p) dst[p] += src[p];
    }
  }
}

void CheckConvArgs(const Tensor& x, const Tensor& w, int stride, int padding, const char* op) {
  RequireRank(x, 4, op);
  RequireRank(w, 4, op);
  if (stride < 1 || padding < 0) {
    throw ShapeError(std::string(op) + ": stride must be >= 1 and padding >= 0");
  }
}

}  // namespace

int64_t ConvOutputSize(int64_t in, int64_t kernel, int stride, int padding) {
  if (in + 2 * padding < kernel) {
    throw ShapeError("conv: padded input extent " + std::to_string(in + 2 * padding) +
                     " is smaller than kernel extent " + std::to_string(kernel));
  }
  return (in + 2 * padding - kernel) / stride + 1;
}

int64_t ConvTransposeOutputSize(int64_t in, int64_t kernel, int stride, int padding) {
  const int64_t out = (in - 1) * stride - 2 * padding + kernel;
  if (out < 1) {
    throw ShapeError("conv_transpose: non-positive output extent " + std::to_string(out));
  }
  return out;
}

Var Conv2d(Var input, Var kernel, int stride, int padding) {
  Tape& tape = SharedTape(input, kernel, "conv2d");
  const Tensor& x = input.value();
  const Tensor& w = kernel.value();
  CheckConvArgs(x, w, stride, padding, "conv2d");
  if (w.dim(1) != x.dim(1)) {
    throw ShapeError("conv2d: kernel " + ShapeToString(w.shape) + " expects " +
                     std::to_string(w.dim(1)) + " input channels, input " +
                     ShapeToString(x.shape) + " has " + std::to_string(x.dim(1)));
  }
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), 0, 0, w.dim(2), w.dim(3),
             stride, padding};
  g.out_h = ConvOutputSize(g.in_h, g.kh, stride, padding);
  g.out_w = ConvOutputSize(g.in_w, g.kw, stride, padding);

  const int64_t rows = g.in_c * g.kh * g.kw;
  const int64_t plane = g.out_h * g.out_w;
  AlignedMap cols = Scratch(0, rows, g.batch * plane);
  Im2Col(x.data.data(), g.batch, g.in_c, g.in_h, g.in_w, g.kh, g.kw, stride, padding, g.out_h,
         g.out_w, cols.data());
  Eigen::Map<const RowMat> wm(w.data.data(), g.out_c, rows);
  RowMat out(g.out_c, g.batch * plane);
  out.noalias() = wm * cols;

  Tensor y(Shape{g.batch, g.out_c, g.out_h, g.out_w});
  AddBatchMajor(out, g.batch, g.out_c, plane, y.data.data());

  const int in_id = input.id();
  const int k_id = kernel.id();
  return tape.Record("conv2d", std::move(y), {in_id, k_id}, [g, in_id, k_id](Tape& t, int id) {
    const int64_t rows = g.in_c * g.kh * g.kw;
    const int64_t plane = g.out_h * g.out_w;
    const RowMat dout = ChannelMajor(t.grad(id).data(), g.batch, g.out_c, plane);
    const Tensor& w = t.value(k_id);
    Eigen::Map<const RowMat> wm(w.data.data(), g.out_c, rows);
    if (t.needs_grad(k_id)) {
      AlignedMap cols = Scratch(1, rows, g.batch * plane);
      Im2Col(t.value(in_id).data.data(), g.batch, g.in_c, g.in_h, g.in_w, g.kh, g.kw, g.stride,
             g.pad, g.out_h, g.out_w, cols.data());
      Eigen::Map<RowMat> gw(t.grad(k_id).data(), g.out_c, rows);
      gw.noalias() += dout * cols.transpose();
    }
    if (t.needs_grad(in_id)) {
      AlignedMap dcols = Scratch(1, rows, g.batch * plane);
      dcols.noalias() = wm.transpose() * dout;
      Col2Im(dcols.data(), g.batch, g.in_c, g.in_h, g.in_w, g.kh, g.kw, g.stride, g.pad, g.out_h,
             g.out_w, t.grad(in_id).data());
    }
  });
}

Var Conv2dTranspose(Var input, Var kernel, int stride, int padding) {
  Tape& tape = SharedTape(input, kernel, "conv2d_transpose");
  const Tensor& x = input.value();
  const Tensor& w = kernel.value();
  CheckConvArgs(x, w, stride, padding, "conv2d_transpose");
  if (w.dim(0) != x.dim(1)) {
    throw ShapeError("conv2d_transpose: kernel " + ShapeToString(w.shape) + " expects " +
                     std::to_string(w.dim(0)) + " input channels, input " +
                     ShapeToString(x.shape) + " has " + std::to_string(x.dim(1)));
  }
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(1), 0, 0, w.dim(2), w.dim(3),
             stride, padding};
  g.out_h = ConvTransposeOutputSize(g.in_h, g.kh, stride, padding);
  g.out_w = ConvTransposeOutputSize(g.in_w, g.kw, stride, padding);

  // The input plays the role of a conv2d output over the (larger) result.
  const int64_t rows = g.out_c * g.kh * g.kw;
  const int64_t plane = g.in_h * g.in_w;
  const RowMat xm = ChannelMajor(x.data.data(), g.batch, g.in_c, plane);
  Eigen::Map<const RowMat> wm(w.data.data(), g.in_c, rows);
  AlignedMap cols = Scratch(0, rows, g.batch * plane);
  cols.noalias() = wm.transpose() * xm;

  Tensor y(Shape{g.batch, g.out_c, g.out_h, g.out_w});
  Col2Im(cols.data(), g.batch, g.out_c, g.out_h, g.out_w, g.kh, g.kw, stride, padding, g.in_h,
         g.in_w, y.data.data());

  const int in_id = input.id();
  const int k_id = kernel.id();
  return tape.Record(
      "conv2d_transpose", std::move(y), {in_id, k_id}, [g, in_id, k_id](Tape& t, int id) {
        const int64_t rows = g.out_c * g.kh * g.kw;
        const int64_t plane = g.in_h * g.in_w;
        AlignedMap dcols = Scratch(1, rows, g.batch * plane);
        Im2Col(t.grad(id).data(), g.batch, g.out_c, g.out_h, g.out_w, g.kh, g.kw, g.stride, g.pad,
               g.in_h, g.in_w, dcols.data());
        const Tensor& w = t.value(k_id);
        Eigen::Map<const RowMat> wm(w.data.data(), g.in_c, rows);
        if (t.needs_grad(k_id)) {
          const RowMat xm = ChannelMajor(t.value(in_id).data.data(), g.batch, g.in_c, plane);
          Eigen::Map<RowMat> gw(t.grad(k_id).data(), g.in_c, rows);
          gw.noalias() += xm * dcols.transpose();
        }
        if (t.needs_grad(in_id)) {
          RowMat dx(g.in_c, g.batch * plane);
          dx.noalias() = wm * dcols;
          AddBatchMajor(dx, g.batch, g.in_c, plane, t.grad(in_id).data());
        }
      });
}

Var AddChannelBias(Var x, Var bias) {
  Tape& tape = SharedTape(x, bias, "add_channel_bias");
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  RequireRank(xv, 4, "add_channel_bias");
  if (bv.rank() != 1 || bv.dim(0) != xv.dim(1)) {
    throw ShapeError("add_channel_bias: bias " + ShapeToString(bv.shape) +
                     " does not match channels of " + ShapeToString(xv.shape));
  }
  const int64_t batch = xv.dim(0), channels = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor y = Tensor(xv.shape, xv.data);
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t c = 0; c < channels; ++c) {
      float* p = y.data.data() + (b * channels + c) * plane;
      for (int64_t i = 0; i < plane; ++i) p[i] += bv[c];
    }
  }
  const int x_id = x.id(), b_id = bias.id();
  return tape.Record("add_channel_bias", std::move(y), {x_id, b_id},
                     [x_id, b_id, batch, channels, plane](Tape& t, int id) {
                       const std::vector<float>& gy = t.grad(id);
                       if (t.needs_grad(x_id)) {
                         std::vector<float>& gx = t.grad(x_id);
                         for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
                       }
                       if (t.needs_grad(b_id)) {
                         std::vector<float>& gb = t.grad(b_id);
                         for (int64_t c = 0; c < channels; ++c) {
                           double acc = 0.0;
                           for (int64_t b = 0; b < batch; ++b) {
                             const float* p = gy.data() + (b * channels + c) * plane;
                             for (int64_t i = 0; i < plane; ++i) acc += p[i];
                           }
                           gb[static_cast<size_t>(c)] += static_cast<float>(acc);
                         }
                       }
                     });
}

Var Relu(Var x) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape);
  {
    const float* __restrict src = xv.data.data();
    float* __restrict dst = y.data.data();
    for (int64_t i = 0; i < xv.numel(); ++i) dst[i] = src[i] > 0.0f ? src[i] : 0.0f;
  }
  const int x_id = x.id();
  return x.tape()->Record("relu", std::move(y), {x_id}, [x_id](Tape& t, int id) {
    const std::vector<float>& gy = t.grad(id);
    const float* __restrict xv = t.value(x_id).data.data();
    const float* __restrict g_out = gy.data();
    float* __restrict gx = t.grad(x_id).data();
    // Branch-free so the mask vectorizes.
    for (size_t i = 0; i < gy.size(); ++i) gx[i] += xv[i] > 0.0f ? g_out[i] : 0.0f;
  });
}

Var Add(Var a, Var b) {
  Tape& tape = SharedTape(a, b, "add");
  RequireSameShape(a.value(), b.value(), "add");
  Tensor y = a.value();
  y.grad.clear();
  y.requires_grad = false;
  const Tensor& bv = b.value();
  for (int64_t i = 0; i < y.numel(); ++i) y[i] += bv[i];
  const int a_id = a.id(), b_id = b.id();
  return tape.Record("add", std::move(y), {a_id, b_id}, [a_id, b_id](Tape& t, int id) {
    const std::vector<float>& gy = t.grad(id);
    for (int in : {a_id, b_id}) {
      if (!t.needs_grad(in)) continue;
      std::vector<float>& g = t.grad(in);
      for (size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
    }
  });
}

Var Sub(Var a, Var b) {
  Tape& tape = SharedTape(a, b, "sub");
  RequireSameShape(a.value(), b.value(), "sub");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = av[i] - bv[i];
  const int a_id = a.id(), b_id = b.id();
  return tape.Record("sub", std::move(y), {a_id, b_id}, [a_id, b_id](Tape& t, int id) {
    const std::vector<float>& gy = t.grad(id);
    if (t.needs_grad(a_id)) {
      std::vector<float>& g = t.grad(a_id);
      for (size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
    }
    if (t.needs_grad(b_id)) {
      std::vector<float>& g = t.grad(b_id);
      for (size_t i = 0; i < gy.size(); ++i) g[i] -= gy[i];
    }
  });
}

Var Mul(Var a, Var b) {
  Tape& tape = SharedTape(a, b, "mul");
  RequireSameShape(a.value(), b.value(), "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape);
  for (int64_t i = 0; i < y.numel(); ++i) y[i] = av[i] * bv[i];
  const int a_id = a.id(), b_id = b.id();
  return tape.Record("mul", std::move(y), {a_id, b_id}, [a_id, b_id](Tape& t, int id) {
    const std::vector<float>& gy = t.grad(id);
    if (t.needs_grad(a_id)) {
      const Tensor& bv = t.value(b_id);
      std::vector<float>& g = t.grad(a_id);
      for (size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * bv.data[i];
    }
    if (t.needs_grad(b_id)) {
      const Tensor& av = t.value(a_id);
      std::vector<float>& g = t.grad(b_id);
      for (size_t i = 0; i < gy.size(); ++i) g[i] += gy[i] * av.data[i];
    }
  });
}

Var MulScalar(Var x, float s) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) y[i] = xv[i] * s;
  const int x_id = x.id();
  return x.tape()->Record("mul_scalar", std::move(y), {x_id}, [x_id, s](Tape& t, int id) {
    const std::vector<float>& gy = t.grad(id);
    std::vector<float>& gx = t.grad(x_id);
    for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * s;
  });
}

Var AddScalar(Var x, float s) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) y[i] = xv[i] + s;
  const int x_id = x.id();
  return x.tape()->Record("add_scalar", std::move(y), {x_id}, [x_id](Tape& t, int id) {
    const std::vector<float>& gy = t.grad(id);
    std::vector<float>& gx = t.grad(x_id);
    for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
}

Var MulConstant(Var x, const Tensor& c) {
  const Tensor& xv = x.value();
  RequireSameShape(xv, c, "mul_constant");
  Tensor y(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) y[i] = xv[i] * c[i];
  const int x_id = x.id();
  return x.tape()->Record("mul_constant", std::move(y), {x_id},
                          [x_id, factor = c.data](Tape& t, int id) {
                            const std::vector<float>& gy = t.grad(id);
                            std::vector<float>& gx = t.grad(x_id);
                            for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * factor[i];
                          });
}

Var Square(Var x) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape);
  for (int64_t i = 0; i < xv.numel(); ++i) y[i] = xv[i] * xv[i];
  const int x_id = x.id();
  return x.tape()->Record("square", std::move(y), {x_id}, [x_id](Tape& t, int id) {
    const std::vector<float>& gy = t.grad(id);
    const Tensor& xv = t.value(x_id);
    std::vector<float>& gx = t.grad(x_id);
    for (size_t i = 0; i < gy.size(); ++i) gx[i] += 2.0f * xv.data[i] * gy[i];
  });
}

Var Sum(Var x) {
  const Tensor& xv = x.value();
  double acc = 0.0;
  for (float v : xv.data) acc += v;
  const int x_id = x.id();
  return x.tape()->Record("sum", Tensor::Scalar(static_cast<float>(acc)), {x_id},
                          [x_id](Tape& t, int id) {
                            const float g = t.grad(id)[0];
                            for (float& v : t.grad(x_id)) v += g;
                          });
}

Var Mean(Var x) {
  const Tensor& xv = x.value();
  if (xv.numel() == 0) throw ShapeError("mean of an empty tensor");
  double acc = 0.0;
  for (float v : xv.data) acc += v;
  const double n = static_cast<double>(xv.numel());
  const int x_id = x.id();
  return x.tape()->Record("mean", Tensor::Scalar(static_cast<float>(acc / n)), {x_id},
                          [x_id, n](Tape& t, int id) {
                            const float g = static_cast<float>(t.grad(id)[0] / n);
                            for (float& v : t.grad(x_id)) v += g;
                          });
}

Var StopGradient(Var x) {
  Tensor y(x.value().shape, x.value().data);
  // No inputs recorded: nothing upstream can receive gradient from here.
  return x.tape()->Record("stop_gradient", std::move(y), {}, nullptr);
}

Var GatherRows(Var table, std::span<const int32_t> indices, int64_t batch, int64_t height,
               int64_t width) {
  const Tensor& tv = table.value();
  RequireRank(tv, 2, "gather_rows");
  const int64_t rows = tv.dim(0), depth = tv.dim(1);
  const int64_t plane = height * width;
  if (static_cast<int64_t>(indices.size()) != batch * plane) {
    throw ShapeError("gather_rows: " + std::to_string(indices.size()) +
                     " indices for a grid of " + std::to_string(batch) + "x" +
                     std::to_string(height) + "x" + std::to_string(width));
  }
  for (int32_t k : indices) {
    if (k < 0 || k >= rows) {
      throw Error("gather_rows: index " + std::to_string(k) + " outside [0, " +
                  std::to_string(rows) + ")");
    }
  }
  Tensor y(Shape{batch, depth, height, width});
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t p = 0; p < plane; ++p) {
      const float* row = tv.data.data() + indices[static_cast<size_t>(b * plane + p)] * depth;
      for (int64_t d = 0; d < depth; ++d) y.data[static_cast<size_t>((b * depth + d) * plane + p)] = row[d];
    }
  }
  const int t_id = table.id();
  return table.tape()->Record(
      "gather_rows", std::move(y), {t_id},
      [t_id, idx = std::vector<int32_t>(indices.begin(), indices.end()), batch, depth,
       plane](Tape& t, int id) {
        const std::vector<float>& gy = t.grad(id);
        std::vector<float>& gt = t.grad(t_id);
        for (int64_t b = 0; b < batch; ++b) {
          for (int64_t p = 0; p < plane; ++p) {
            float* row = gt.data() + idx[static_cast<size_t>(b * plane + p)] * depth;
            for (int64_t d = 0; d < depth; ++d) row[d] += gy[static_cast<size_t>((b * depth + d) * plane + p)];
          }
        }
      });
}

Var CategoricalNll(Var logits, std::span<const int32_t> targets) {
  const Tensor& lv = logits.value();
  RequireRank(lv, 4, "categorical_nll");
  const int64_t batch = lv.dim(0), classes = lv.dim(1), plane = lv.dim(2) * lv.dim(3);
  if (static_cast<int64_t>(targets.size()) != batch * plane) {
    throw ShapeError("categorical_nll: " + std::to_string(targets.size()) +
                     " targets for logits " + ShapeToString(lv.shape));
  }
  double total = 0.0;
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t p = 0; p < plane; ++p) {
      const int32_t target = targets[static_cast<size_t>(b * plane + p)];
      if (target < 0 || target >= classes) {
        throw Error("categorical_nll: target " + std::to_string(target) + " outside [0, " +
                    std::to_string(classes) + ")");
      }
      const float* base = lv.data.data() + b * classes * plane + p;
      double mx = base[0];
      for (int64_t k = 1; k < classes; ++k) mx = std::max<double>(mx, base[k * plane]);
      double z = 0.0;
      for (int64_t k = 0; k < classes; ++k) z += std::exp(base[k * plane] - mx);
      total += mx + std::log(z) - base[target * plane];
    }
  }
  const int l_id = logits.id();
  return logits.tape()->Record(
      "categorical_nll", Tensor::Scalar(static_cast<float>(total)), {l_id},
      [l_id, tg = std::vector<int32_t>(targets.begin(), targets.end()), batch, classes,
       plane](Tape& t, int id) {
        const double g = t.grad(id)[0];
        const Tensor& lv = t.value(l_id);
        std::vector<float>& gl = t.grad(l_id);
        for (int64_t b = 0; b < batch; ++b) {
          for (int64_t p = 0; p < plane; ++p) {
            const int64_t off = b * classes * plane + p;
            const float* base = lv.data.data() + off;
            double mx = base[0];
            for (int64_t k = 1; k < classes; ++k) mx = std::max<double>(mx, base[k * plane]);
            double z = 0.0;
            for (int64_t k = 0; k < classes; ++k) z += std::exp(base[k * plane] - mx);
            const int32_t target = tg[static_cast<size_t>(b * plane + p)];
            for (int64_t k = 0; k < classes; ++k) {
              const double prob = std::exp(base[k * plane] - mx) / z;
              gl[static_cast<size_t>(off + k * plane)] +=
                  static_cast<float>(g * (prob - (k == target ? 1.0 : 0.0)));
            }
          }
        }
      });
}

}  // namespace vqvae
