#pragma once

#include <cstdint>
#include <span>

#include "vqvae/autodiff.h"

namespace vqvae {

// Output extent of a strided convolution along one axis.
int64_t ConvOutputSize(int64_t in, int64_t kernel, int stride, int padding);
// Output extent of the matching transposed convolution.
int64_t ConvTransposeOutputSize(int64_t in, int64_t kernel, int stride, int padding);

// input [B, Ci, H, W], kernel [Co, Ci, kh, kw] -> [B, Co, Ho, Wo].
Var Conv2d(Var input, Var kernel, int stride, int padding);
// Adjoint of Conv2d. input [B, Ci, H, W], kernel [Ci, Co, kh, kw] -> [B, Co, Ho, Wo]
// with Ho = (H - 1) * stride - 2 * padding + kh.
Var Conv2dTranspose(Var input, Var kernel, int stride, int padding);
// x [B, C, H, W] plus bias [C] broadcast over batch and space.
Var AddChannelBias(Var x, Var bias);

Var Relu(Var x);
Var Add(Var a, Var b);
Var Sub(Var a, Var b);
Var Mul(Var a, Var b);
Var MulScalar(Var x, float s);
Var AddScalar(Var x, float s);
// Elementwise product with a constant of the same shape (e.g. a conv mask).
Var MulConstant(Var x, const Tensor& c);
Var Square(Var x);
Var Sum(Var x);
Var Mean(Var x);

// Identity in the forward pass; passes no gradient back.
Var StopGradient(Var x);

// Looks up rows of |table| [K, D] for a B x H x W index grid and lays them
// out channel-first: result [B, D, H, W]. Gradients scatter-add into the
// selected rows.
Var GatherRows(Var table, std::span<const int32_t> indices, int64_t batch, int64_t height,
               int64_t width);

// Sum over every (b, h, w) of -log softmax(logits[b, :, h, w])[target].
// logits [B, K, H, W]; targets has B * H * W entries in [0, K).
Var CategoricalNll(Var logits, std::span<const int32_t> targets);

}  // namespace vqvae
