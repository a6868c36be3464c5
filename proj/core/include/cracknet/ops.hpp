#pragma once

#include <cstdint>
#include <vector>

#include "cracknet/tensor.hpp"

// Differentiable primitives. Feature maps are channels-last: [H, W, C] or
// batched [B, H, W, C].
namespace cracknet::ops {

enum class Padding { Same, Valid };

// --- linear algebra -------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// Batched product over equal leading dims: [..., m, k] x [..., k, n].
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);

// x[..., in] * w[in, out] (+ bias[out] when defined).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {});

// --- elementwise ----------------------------------------------------------

// Binary ops broadcast numpy-style (trailing-aligned, extent 1 stretches).
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
// Exact erf form: 0.5 x (1 + erf(x / sqrt 2)).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T>
Tensor<T> exp(const Tensor<T>& x);
// Natural log; inputs must be positive.
template <typename T>
Tensor<T> log(const Tensor<T>& x);

// --- normalization --------------------------------------------------------

// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);

// Normalizes over the last axis, then applies gamma/beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

// --- convolution ----------------------------------------------------------

// Cross-correlation. x [B,H,W,Cin] or [H,W,Cin]; w [kh,kw,Cin,Cout];
// bias [Cout] optional. Same padding yields ceil(H/stride) outputs and pads
// symmetrically with the odd pixel on the bottom/right.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 Padding padding = Padding::Same);

// Adjoint of a same-padded conv2d: x [B,H,W,Cin] -> [B,H*s,W*s,Cout].
// w is laid out as the conv it transposes: [kh,kw,Cout,Cin].
template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride);

// 2x2 max pooling with stride 2; extents must be even.
template <typename T>
Tensor<T> max_pool2x2(const Tensor<T>& x);

// --- data movement --------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);

// out.shape[i] = x.shape[perm[i]].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm);

// Swap the last two axes.
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, int axis, const std::vector<std::int64_t>& sizes);

// Gathers slices of `axis` by index; indices may repeat (gradients add up).
template <typename T>
Tensor<T> index_select(const Tensor<T>& x, int axis, const std::vector<std::int64_t>& indices);

template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim = false);
template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim = false);
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x);
template <typename T>
Tensor<T> mean_all(const Tensor<T>& x);

// Bilinear resize by an integer factor over the two spatial axes of
// [B,H,W,C] / [H,W,C], half-pixel centers with edge clamping.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int factor = 2);

}  // namespace cracknet::ops
