#pragma once

#include <string>

#include "cracknet/params.hpp"
#include "cracknet/tensor.hpp"

namespace cracknet::attention {

// Q/K/V/output projections of one multi-head attention. Weights are
// [dim x dim], biases [dim]. `sigma` holds one Gaussian width per head and is
// only present for Gaussian-weighted axial attention.
template <typename T>
struct AttentionParams {
  int heads = 1;
  int dim = 0;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> sigma;

  int head_dim() const { return dim / heads; }
  void validate() const;
};

template <typename T>
AttentionParams<T> make_attention_params(ParamStore<T>& store, const std::string& prefix, int dim, int heads,
                                         bool with_sigma = false);

// Token grid of one (shifted-)window attention call.
struct WindowGeometry {
  int h = 0;
  int w = 0;
  int window = 0;
  int shift = 0;

  int num_windows() const { return (h / window) * (w / window); }
  int tokens_per_window() const { return window * window; }
  void validate() const;
};

// Memory units M_K, M_V, both [S x d].
template <typename T>
struct ExternalMemory {
  Tensor<T> mk;
  Tensor<T> mv;

  void validate() const;
};

template <typename T>
ExternalMemory<T> make_external_memory(ParamStore<T>& store, const std::string& prefix, int units, int dim);

// Optional tap that receives the attention weights of a call. `stage` is the
// intermediate softmax map for kernels with a second normalization.
template <typename T>
struct AttentionProbe {
  Tensor<T> weights;
  Tensor<T> stage;
};

// softmax(Q K^T / sqrt(d) + mask) V over the last two axes of [..., N, d].
// `mask` must broadcast against the [..., N, N] logits.
template <typename T>
Tensor<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                       const Tensor<T>& mask = {}, AttentionProbe<T>* probe = nullptr);

// x [..., N, D]. When `mask` is given it has shape [nW, N, N] and the product
// of the leading extents of x must be a multiple of nW (windows innermost).
// Probe weights have shape [L, heads, N, N].
template <typename T>
Tensor<T> multi_head_self_attention(const Tensor<T>& x, const AttentionParams<T>& params, const Tensor<T>& mask = {},
                                    AttentionProbe<T>* probe = nullptr);

// [B,h,w,D] (or [h,w,D]) -> [B*nW, M*M, D], windows in row-major order.
template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, int window);

// Inverse of window_partition; `shape` is the original feature-map shape.
template <typename T>
Tensor<T> window_reverse(const Tensor<T>& windows, const Shape& shape, int window);

// Rolls rows and columns by -shift (out[i][j] = x[i+shift][j+shift], wrapped).
// A negative shift undoes a positive one.
template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& x, int shift);

// [nW, M*M, M*M] additive mask: -1e9 between tokens that came from different
// pre-shift regions, 0 otherwise. All zeros when shift == 0.
template <typename T>
Tensor<T> build_shift_mask(const WindowGeometry& geom);

template <typename T>
Tensor<T> w_msa(const Tensor<T>& x, const AttentionParams<T>& params, const WindowGeometry& geom,
                AttentionProbe<T>* probe = nullptr);

// Shifted-window attention with shift geom.shift (0 degenerates to w_msa).
template <typename T>
Tensor<T> sw_msa(const Tensor<T>& x, const AttentionParams<T>& params, const WindowGeometry& geom,
                 AttentionProbe<T>* probe = nullptr);

// Axial neighbourhood of every token of an h x w grid: its whole row, then
// its column without itself (h + w - 1 entries). Row-major token ids.
struct AxialTable {
  int h = 0;
  int w = 0;
  int length = 0;
  std::vector<std::int64_t> index;  // [N * length]
  std::vector<double> dist2;        // squared grid distance, [N * length]
};
AxialTable axial_table(int h, int w);

// Axial attention with logits q.k / sqrt(d) - dist^2 / (2 sigma_head^2).
// Probe weights have shape [B, heads, N, h + w - 1].
template <typename T>
Tensor<T> gaussian_axial_attention(const Tensor<T>& x, const AttentionParams<T>& params,
                                   AttentionProbe<T>* probe = nullptr);

// Local-global Gaussian-weighted attention block.
template <typename T>
struct LggParams {
  int window = 4;
  AttentionParams<T> local;
  // Learned pooling logits, [window*window, groups]; groups == global.heads.
  Tensor<T> pool_logits;
  AttentionParams<T> global;
  Tensor<T> fuse_w;  // [2C, C]
  Tensor<T> fuse_b;  // [C]
};

template <typename T>
LggParams<T> make_lgg_params(ParamStore<T>& store, const std::string& prefix, int dim, int heads, int window);

// Per-window softmax-weighted pooling: [B,h,w,C] -> [B,h/p,w/p,C].
template <typename T>
Tensor<T> window_pool(const Tensor<T>& x, const Tensor<T>& pool_logits, int window);

template <typename T>
Tensor<T> lgg_sa(const Tensor<T>& x, const LggParams<T>& params);

// x [..., N, d]. Softmax over tokens, then L1 normalization over memory
// units, then projection through M_V. Probe weights are the final
// normalized map [..., N, S]; probe stage is the token softmax.
template <typename T>
Tensor<T> external_attention(const Tensor<T>& x, const ExternalMemory<T>& mem, AttentionProbe<T>* probe = nullptr);

}  // namespace cracknet::attention
