#include "cracknet/attention.hpp"

#include <cmath>

#include "cracknet/ops.hpp"

namespace cracknet::attention {

namespace {

using i64 = std::int64_t;

// Brings [h,w,C] to [1,h,w,C]; `batched` records whether to undo it.
template <typename T>
Tensor<T> as_batched(const Tensor<T>& x, bool& batched, const char* op) {
  if (x.rank() == 4) {
    batched = true;
    return x;
  }
  if (x.rank() == 3) {
    batched = false;
    return ops::reshape(x, Shape{1, x.dim(0), x.dim(1), x.dim(2)});
  }
  throw DimensionError(std::string(op) + " expects [B,h,w,C] or [h,w,C], got " + shape_str(x.shape()));
}

template <typename T>
Tensor<T> restore_rank(const Tensor<T>& y, bool batched) {
  if (batched) return y;
  return ops::reshape(y, Shape{y.dim(1), y.dim(2), y.dim(3)});
}

// [L, N, D] -> [L, heads, N, d]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, i64 lead, i64 n, int heads, int d) {
  auto r = ops::reshape(x, Shape{lead, n, heads, d});
  return ops::permute(r, {0, 2, 1, 3});
}

// [L, heads, N, d] -> [L, N, heads*d]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, i64 lead, i64 n, int heads, int d) {
  auto p = ops::permute(x, {0, 2, 1, 3});
  return ops::reshape(p, Shape{lead, n, static_cast<i64>(heads) * d});
}

// out[h, n, l] = -dist2[n, l] / (2 sigma_h^2)
template <typename T>
Tensor<T> gaussian_penalty(const Tensor<T>& sigma, const std::vector<double>& dist2, i64 n, i64 len) {
  const i64 heads = sigma.size();
  std::vector<T> out(static_cast<std::size_t>(heads * n * len));
  auto sv = sigma.values();
  for (i64 h = 0; h < heads; ++h) {
    const T inv = T(1) / (T(2) * sv[h] * sv[h]);
    for (i64 i = 0; i < n * len; ++i) out[h * n * len + i] = -static_cast<T>(dist2[i]) * inv;
  }
  return make_result<T>("gaussian_penalty", Shape{heads, n, len}, std::move(out), {sigma},
                        [heads, n, len, dist2](Node<T>& node) {
                          T* gs = node.parent_grad(0);
                          if (!gs) return;
                          const auto& sv = node.parents[0]->value;
                          for (i64 h = 0; h < heads; ++h) {
                            // d/dsigma of -D^2/(2 sigma^2) = D^2 / sigma^3
                            const T inv3 = T(1) / (sv[h] * sv[h] * sv[h]);
                            T acc = 0;
                            for (i64 i = 0; i < n * len; ++i) acc += node.grad[h * n * len + i] * static_cast<T>(dist2[i]);
                            gs[h] += acc * inv3;
                          }
                        });
}

}  // namespace

template <typename T>
void AttentionParams<T>::validate() const {
  if (heads <= 0 || dim <= 0) throw ConfigError("attention heads and dim must be positive");
  if (dim % heads != 0) {
    throw ConfigError("model dim " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (sigma.defined()) {
    if (sigma.size() != heads) throw ConfigError("sigma needs one entry per head");
    for (T s : sigma.values()) {
      if (!(s > T(0))) throw ConfigError("Gaussian sigma must be positive");
    }
  }
}

void WindowGeometry::validate() const {
  if (h <= 0 || w <= 0 || window <= 0) throw GeometryError("window geometry extents must be positive");
  if (h % window != 0 || w % window != 0) {
    throw GeometryError("token grid " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by window " +
                        std::to_string(window));
  }
  if (shift < 0 || shift >= window) throw GeometryError("shift must lie in [0, window)");
  if (shift != 0 && shift != window / 2) throw GeometryError("shift must be 0 or window/2");
}

template <typename T>
void ExternalMemory<T>::validate() const {
  if (mk.rank() != 2 || mv.rank() != 2 || mk.dim(0) != mv.dim(0) || mk.dim(1) != mv.dim(1)) {
    throw ConfigError("external memories must share [S x d], got " + shape_str(mk.shape()) + " and " +
                      shape_str(mv.shape()));
  }
}

template <typename T>
AttentionParams<T> make_attention_params(ParamStore<T>& store, const std::string& prefix, int dim, int heads,
                                         bool with_sigma) {
  AttentionParams<T> p;
  p.heads = heads;
  p.dim = dim;
  p.validate();
  const i64 d = dim;
  p.wq = store.create(prefix + ".wq", {d, d}, Init::TruncNormal);
  p.bq = store.create(prefix + ".bq", {d}, Init::Zeros);
  p.wk = store.create(prefix + ".wk", {d, d}, Init::TruncNormal);
  p.bk = store.create(prefix + ".bk", {d}, Init::Zeros);
  p.wv = store.create(prefix + ".wv", {d, d}, Init::TruncNormal);
  p.bv = store.create(prefix + ".bv", {d}, Init::Zeros);
  p.wo = store.create(prefix + ".wo", {d, d}, Init::TruncNormal);
  p.bo = store.create(prefix + ".bo", {d}, Init::Zeros);
  if (with_sigma) p.sigma = store.create_constant(prefix + ".sigma", {heads}, T(1));
  return p;
}

template <typename T>
ExternalMemory<T> make_external_memory(ParamStore<T>& store, const std::string& prefix, int units, int dim) {
  ExternalMemory<T> m;
  m.mk = store.create(prefix + ".mk", {units, dim}, Init::TruncNormal);
  m.mv = store.create(prefix + ".mv", {units, dim}, Init::TruncNormal);
  return m;
}

template <typename T>
Tensor<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                       const Tensor<T>& mask, AttentionProbe<T>* probe) {
  if (q.rank() < 2 || q.shape() != k.shape() || k.shape() != v.shape()) {
    throw DimensionError("attention: Q/K/V shapes differ: " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                         ", " + shape_str(v.shape()));
  }
  const i64 d = q.dim(-1);
  if (d == 0) throw ContractError("attention head dim must be positive");
  auto logits = ops::scale(ops::bmm(q, ops::transpose(k)), T(1) / std::sqrt(static_cast<T>(d)));
  if (mask.defined()) logits = ops::add(logits, mask);
  auto weights = ops::softmax(logits, -1);
  if (probe) probe->weights = weights;
  return ops::bmm(weights, v);
}

template <typename T>
Tensor<T> multi_head_self_attention(const Tensor<T>& x, const AttentionParams<T>& params, const Tensor<T>& mask,
                                    AttentionProbe<T>* probe) {
  params.validate();
  if (x.rank() < 2 || x.dim(-1) != params.dim) {
    throw DimensionError("MSA: input " + shape_str(x.shape()) + " does not have model dim " + std::to_string(params.dim));
  }
  const i64 n = x.dim(-2);
  const i64 lead = x.size() / (n * params.dim);
  const int heads = params.heads;
  const int d = params.head_dim();
  auto q = split_heads(ops::linear(x, params.wq, params.bq), lead, n, heads, d);
  auto k = split_heads(ops::linear(x, params.wk, params.bk), lead, n, heads, d);
  auto v = split_heads(ops::linear(x, params.wv, params.bv), lead, n, heads, d);
  auto logits = ops::scale(ops::bmm(q, ops::transpose(k)), T(1) / std::sqrt(static_cast<T>(d)));
  if (mask.defined()) {
    const i64 nw = mask.dim(0);
    if (mask.rank() != 3 || mask.dim(1) != n || mask.dim(2) != n || lead % nw != 0) {
      throw DimensionError("MSA: mask " + shape_str(mask.shape()) + " incompatible with " + std::to_string(lead) +
                           " sequences of " + std::to_string(n) + " tokens");
    }
    auto grouped = ops::reshape(logits, Shape{lead / nw, nw, heads, n, n});
    grouped = ops::add(grouped, ops::reshape(mask, Shape{nw, 1, n, n}));
    logits = ops::reshape(grouped, Shape{lead, heads, n, n});
  }
  auto weights = ops::softmax(logits, -1);
  if (probe) probe->weights = weights;
  auto merged = merge_heads(ops::bmm(weights, v), lead, n, heads, d);
  auto out = ops::linear(merged, params.wo, params.bo);
  return ops::reshape(out, x.shape());
}

template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, int window) {
  bool batched = false;
  auto xb = as_batched(x, batched, "window_partition");
  const i64 b = xb.dim(0), h = xb.dim(1), w = xb.dim(2), c = xb.dim(3);
  if (window <= 0 || h % window || w % window) {
    throw GeometryError("feature map " + shape_str(x.shape()) + " is not divisible by window " + std::to_string(window));
  }
  const i64 m = window;
  auto r = ops::reshape(xb, Shape{b, h / m, m, w / m, m, c});
  auto p = ops::permute(r, {0, 1, 3, 2, 4, 5});
  return ops::reshape(p, Shape{b * (h / m) * (w / m), m * m, c});
}

template <typename T>
Tensor<T> window_reverse(const Tensor<T>& windows, const Shape& shape, int window) {
  const bool batched = shape.size() == 4;
  if (!batched && shape.size() != 3) throw DimensionError("window_reverse: target shape must be rank 3 or 4");
  const i64 b = batched ? shape[0] : 1;
  const i64 h = shape[shape.size() - 3], w = shape[shape.size() - 2], c = shape.back();
  const i64 m = window;
  if (m <= 0 || h % m || w % m) throw GeometryError("window_reverse: target is not divisible by the window");
  auto r = ops::reshape(windows, Shape{b, h / m, w / m, m, m, c});
  auto p = ops::permute(r, {0, 1, 3, 2, 4, 5});
  return ops::reshape(p, shape);
}

template <typename T>
Tensor<T> cyclic_shift(const Tensor<T>& x, int shift) {
  bool batched = false;
  auto xb = as_batched(x, batched, "cyclic_shift");
  const i64 b = xb.dim(0), h = xb.dim(1), w = xb.dim(2), c = xb.dim(3);
  if (shift == 0) return x;
  std::vector<i64> idx(static_cast<std::size_t>(h * w));
  for (i64 i = 0; i < h; ++i) {
    for (i64 j = 0; j < w; ++j) {
      const i64 si = ((i + shift) % h + h) % h;
      const i64 sj = ((j + shift) % w + w) % w;
      idx[i * w + j] = si * w + sj;
    }
  }
  auto flat = ops::reshape(xb, Shape{b, h * w, c});
  auto rolled = ops::reshape(ops::index_select(flat, 1, idx), Shape{b, h, w, c});
  return restore_rank(rolled, batched);
}

template <typename T>
Tensor<T> build_shift_mask(const WindowGeometry& geom) {
  geom.validate();
  const int h = geom.h, w = geom.w, m = geom.window, s = geom.shift;
  const int nw = geom.num_windows();
  const int n = geom.tokens_per_window();
  std::vector<T> mask(static_cast<std::size_t>(nw) * n * n, T(0));
  if (s == 0) return Tensor<T>(Shape{nw, n, n}, std::move(mask));
  // Region label per token of the shifted grid, using the slices
  // [0, h-m), [h-m, h-s), [h-s, h) along each axis.
  auto band = [m, s](int i, int extent) { return i < extent - m ? 0 : (i < extent - s ? 1 : 2); };
  std::vector<int> region(static_cast<std::size_t>(h) * w);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) region[i * w + j] = band(i, h) * 3 + band(j, w);
  }
  const int wc = w / m;
  for (int win = 0; win < nw; ++win) {
    const int wi = win / wc, wj = win % wc;
    for (int a = 0; a < n; ++a) {
      const int ra = region[(wi * m + a / m) * w + wj * m + a % m];
      for (int b = 0; b < n; ++b) {
        const int rb = region[(wi * m + b / m) * w + wj * m + b % m];
        if (ra != rb) mask[(static_cast<std::size_t>(win) * n + a) * n + b] = T(-1e9);
      }
    }
  }
  return Tensor<T>(Shape{nw, n, n}, std::move(mask));
}

namespace {
template <typename T>
void check_grid(const Tensor<T>& xb, const AttentionParams<T>& params, const WindowGeometry& geom, const char* op) {
  geom.validate();
  if (xb.dim(1) != geom.h || xb.dim(2) != geom.w || xb.dim(3) != params.dim) {
    throw GeometryError(std::string(op) + ": input " + shape_str(xb.shape()) + " does not match geometry " +
                        std::to_string(geom.h) + "x" + std::to_string(geom.w) + "x" + std::to_string(params.dim));
  }
}
}  // namespace

template <typename T>
Tensor<T> w_msa(const Tensor<T>& x, const AttentionParams<T>& params, const WindowGeometry& geom,
                AttentionProbe<T>* probe) {
  bool batched = false;
  auto xb = as_batched(x, batched, "w_msa");
  check_grid(xb, params, geom, "w_msa");
  auto windows = window_partition(xb, geom.window);
  auto attended = multi_head_self_attention(windows, params, Tensor<T>{}, probe);
  return restore_rank(window_reverse(attended, xb.shape(), geom.window), batched);
}

template <typename T>
Tensor<T> sw_msa(const Tensor<T>& x, const AttentionParams<T>& params, const WindowGeometry& geom,
                 AttentionProbe<T>* probe) {
  if (geom.shift == 0) return w_msa(x, params, geom, probe);
  bool batched = false;
  auto xb = as_batched(x, batched, "sw_msa");
  check_grid(xb, params, geom, "sw_msa");
  auto shifted = cyclic_shift(xb, geom.shift);
  auto windows = window_partition(shifted, geom.window);
  auto mask = build_shift_mask<T>(geom);
  auto attended = multi_head_self_attention(windows, params, mask, probe);
  auto merged = window_reverse(attended, xb.shape(), geom.window);
  return restore_rank(cyclic_shift(merged, -geom.shift), batched);
}

AxialTable axial_table(int h, int w) {
  if (h <= 0 || w <= 0) throw GeometryError("axial grid extents must be positive");
  AxialTable t;
  t.h = h;
  t.w = w;
  t.length = h + w - 1;
  const i64 n = static_cast<i64>(h) * w;
  t.index.reserve(static_cast<std::size_t>(n * t.length));
  t.dist2.reserve(static_cast<std::size_t>(n * t.length));
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      for (int c = 0; c < w; ++c) {
        t.index.push_back(static_cast<i64>(i) * w + c);
        t.dist2.push_back(static_cast<double>((c - j) * (c - j)));
      }
      for (int r = 0; r < h; ++r) {
        if (r == i) continue;
        t.index.push_back(static_cast<i64>(r) * w + j);
        t.dist2.push_back(static_cast<double>((r - i) * (r - i)));
      }
    }
  }
  return t;
}

template <typename T>
Tensor<T> gaussian_axial_attention(const Tensor<T>& x, const AttentionParams<T>& params, AttentionProbe<T>* probe) {
  if (!params.sigma.defined()) throw ConfigError("Gaussian axial attention needs per-head sigma");
  params.validate();
  bool batched = false;
  auto xb = as_batched(x, batched, "gaussian_axial_attention");
  const i64 b = xb.dim(0), h = xb.dim(1), w = xb.dim(2);
  if (xb.dim(3) != params.dim) {
    throw DimensionError("GWAA: input " + shape_str(x.shape()) + " does not have model dim " + std::to_string(params.dim));
  }
  const i64 n = h * w;
  const int heads = params.heads;
  const int d = params.head_dim();
  auto table = axial_table(static_cast<int>(h), static_cast<int>(w));
  const i64 len = table.length;

  auto tokens = ops::reshape(xb, Shape{b, n, params.dim});
  auto q = split_heads(ops::linear(tokens, params.wq, params.bq), b, n, heads, d);  // [b,H,n,d]
  auto k = split_heads(ops::linear(tokens, params.wk, params.bk), b, n, heads, d);
  auto v = split_heads(ops::linear(tokens, params.wv, params.bv), b, n, heads, d);

  const i64 rows = b * heads * n;
  auto q1 = ops::reshape(q, Shape{rows, 1, d});
  auto kg = ops::reshape(ops::index_select(k, 2, table.index), Shape{rows, len, d});
  auto vg = ops::reshape(ops::index_select(v, 2, table.index), Shape{rows, len, d});

  auto sim = ops::scale(ops::bmm(q1, ops::transpose(kg)), T(1) / std::sqrt(static_cast<T>(d)));
  auto logits = ops::add(ops::reshape(sim, Shape{b, heads, n, len}), gaussian_penalty(params.sigma, table.dist2, n, len));
  auto weights = ops::softmax(logits, -1);
  if (probe) probe->weights = weights;
  auto out = ops::bmm(ops::reshape(weights, Shape{rows, 1, len}), vg);  // [rows,1,d]
  auto merged = merge_heads(ops::reshape(out, Shape{b, heads, n, d}), b, n, heads, d);
  auto projected = ops::linear(merged, params.wo, params.bo);
  return restore_rank(ops::reshape(projected, xb.shape()), batched);
}

template <typename T>
LggParams<T> make_lgg_params(ParamStore<T>& store, const std::string& prefix, int dim, int heads, int window) {
  LggParams<T> p;
  p.window = window;
  p.local = make_attention_params(store, prefix + ".local", dim, heads);
  p.pool_logits = store.create(prefix + ".pool", {static_cast<i64>(window) * window, heads}, Init::Zeros);
  p.global = make_attention_params(store, prefix + ".global", dim, heads, true);
  p.fuse_w = store.create(prefix + ".fuse.w", {2 * static_cast<i64>(dim), dim}, Init::TruncNormal);
  p.fuse_b = store.create(prefix + ".fuse.b", {dim}, Init::Zeros);
  return p;
}

template <typename T>
Tensor<T> window_pool(const Tensor<T>& x, const Tensor<T>& pool_logits, int window) {
  bool batched = false;
  auto xb = as_batched(x, batched, "window_pool");
  const i64 b = xb.dim(0), h = xb.dim(1), w = xb.dim(2), c = xb.dim(3);
  const i64 p2 = static_cast<i64>(window) * window;
  if (pool_logits.rank() != 2 || pool_logits.dim(0) != p2 || c % pool_logits.dim(1) != 0) {
    throw ConfigError("pooling logits " + shape_str(pool_logits.shape()) + " do not match window " +
                      std::to_string(window) + " and " + std::to_string(c) + " channels");
  }
  const i64 groups = pool_logits.dim(1);
  auto windows = window_partition(xb, window);  // [b*nW, p2, c]
  const i64 nw = windows.dim(0);
  auto grouped = ops::reshape(windows, Shape{nw, p2, groups, c / groups});
  auto weights = ops::reshape(ops::softmax(pool_logits, 0), Shape{p2, groups, 1});
  auto pooled = ops::sum(ops::mul(grouped, weights), 1);  // [nW, groups, c/groups]
  return restore_rank(ops::reshape(pooled, Shape{b, h / window, w / window, c}), batched);
}

template <typename T>
Tensor<T> lgg_sa(const Tensor<T>& x, const LggParams<T>& params) {
  bool batched = false;
  auto xb = as_batched(x, batched, "lgg_sa");
  const int p = params.window;
  const int h = static_cast<int>(xb.dim(1)), w = static_cast<int>(xb.dim(2));
  if (p <= 0 || h % p || w % p) {
    throw GeometryError("LGG-SA: " + std::to_string(h) + "x" + std::to_string(w) + " grid is not divisible by window " +
                        std::to_string(p));
  }
  auto local = w_msa(xb, params.local, WindowGeometry{h, w, p, 0});
  auto pooled = window_pool(local, params.pool_logits, p);
  auto global = gaussian_axial_attention(pooled, params.global);
  auto upsampled = p == 1 ? global : ops::bilinear_upsample(global, p);
  auto fused = ops::linear(ops::concat<T>({local, upsampled}, -1), params.fuse_w, params.fuse_b);
  return restore_rank(fused, batched);
}

template <typename T>
Tensor<T> external_attention(const Tensor<T>& x, const ExternalMemory<T>& mem, AttentionProbe<T>* probe) {
  mem.validate();
  if (x.rank() < 2 || x.dim(-1) != mem.mk.dim(1)) {
    throw ConfigError("external attention: input " + shape_str(x.shape()) + " does not match memory width " +
                      std::to_string(mem.mk.dim(1)));
  }
  auto logits = ops::linear(x, ops::transpose(mem.mk));  // [..., N, S]
  auto over_tokens = ops::softmax(logits, -2);
  auto norm = ops::add_scalar(ops::sum(over_tokens, -1, true), T(1e-9));
  auto weights = ops::div(over_tokens, norm);
  if (probe) {
    probe->stage = over_tokens;
    probe->weights = weights;
  }
  return ops::linear(weights, mem.mv);
}

#define CRACKNET_INSTANTIATE_ATTENTION(T)                                                                          \
  template struct AttentionParams<T>;                                                                              \
  template struct ExternalMemory<T>;                                                                               \
  template AttentionParams<T> make_attention_params(ParamStore<T>&, const std::string&, int, int, bool);          \
  template ExternalMemory<T> make_external_memory(ParamStore<T>&, const std::string&, int, int);                  \
  template Tensor<T> scaled_dot_product_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                                  const Tensor<T>&, AttentionProbe<T>*);                           \
  template Tensor<T> multi_head_self_attention(const Tensor<T>&, const AttentionParams<T>&, const Tensor<T>&,      \
                                               AttentionProbe<T>*);                                                \
  template Tensor<T> window_partition(const Tensor<T>&, int);                                                      \
  template Tensor<T> window_reverse(const Tensor<T>&, const Shape&, int);                                          \
  template Tensor<T> cyclic_shift(const Tensor<T>&, int);                                                          \
  template Tensor<T> build_shift_mask<T>(const WindowGeometry&);                                                   \
  template Tensor<T> w_msa(const Tensor<T>&, const AttentionParams<T>&, const WindowGeometry&, AttentionProbe<T>*); \
  template Tensor<T> sw_msa(const Tensor<T>&, const AttentionParams<T>&, const WindowGeometry&, AttentionProbe<T>*); \
  template Tensor<T> gaussian_axial_attention(const Tensor<T>&, const AttentionParams<T>&, AttentionProbe<T>*);    \
  template LggParams<T> make_lgg_params(ParamStore<T>&, const std::string&, int, int, int);                       \
  template Tensor<T> window_pool(const Tensor<T>&, const Tensor<T>&, int);                                         \
  template Tensor<T> lgg_sa(const Tensor<T>&, const LggParams<T>&);                                                \
  template Tensor<T> external_attention(const Tensor<T>&, const ExternalMemory<T>&, AttentionProbe<T>*);

CRACKNET_INSTANTIATE_ATTENTION(float)
CRACKNET_INSTANTIATE_ATTENTION(double)

}  // namespace cracknet::attention
