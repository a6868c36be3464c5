#include "cracknet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace cracknet::ops {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapVec = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using CMapVec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

using i64 = std::int64_t;

int norm_axis(int axis, int rank, const Shape& shape) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw DimensionError("axis " + std::to_string(axis) + " invalid for shape " + shape_str(shape));
  }
  return a;
}

i64 prod(const Shape& s, std::size_t begin, std::size_t end) {
  i64 n = 1;
  for (std::size_t i = begin; i < end; ++i) n *= s[i];
  return n;
}

// ---------------------------------------------------------------- broadcast

struct Broadcast {
  Shape out;
  std::vector<i64> stride_a;  // per output axis, 0 where broadcast
  std::vector<i64> stride_b;
  bool same = false;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  std::size_t r = std::max(a.size(), b.size());
  p.out.assign(r, 1);
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  auto extent = [r](const Shape& s, std::size_t i) -> i64 {
    std::size_t off = r - s.size();
    return i < off ? 1 : s[i - off];
  };
  for (std::size_t i = 0; i < r; ++i) {
    i64 ea = extent(a, i), eb = extent(b, i);
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    p.out[i] = std::max(ea, eb);
  }
  i64 sa = 1, sb = 1;
  for (std::size_t k = r; k-- > 0;) {
    i64 ea = extent(a, k), eb = extent(b, k);
    p.stride_a[k] = ea == 1 ? 0 : sa;
    p.stride_b[k] = eb == 1 ? 0 : sb;
    sa *= ea;
    sb *= eb;
  }
  return p;
}

// Calls f(o, ia, ib) for every output element in row-major order.
template <typename F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  i64 n = numel(p.out);
  if (p.same) {
    for (i64 o = 0; o < n; ++o) f(o, o, o);
    return;
  }
  std::size_t r = p.out.size();
  std::vector<i64> idx(r, 0);
  i64 ia = 0, ib = 0;
  for (i64 o = 0; o < n; ++o) {
    f(o, ia, ib);
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      ia += p.stride_a[k];
      ib += p.stride_b[k];
      if (idx[k] < p.out[k]) break;
      ia -= p.stride_a[k] * p.out[k];
      ib -= p.stride_b[k] * p.out[k];
      idx[k] = 0;
    }
  }
}

enum class BinOp { Add, Sub, Mul, Div };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp kind, const char* name) {
  auto plan = plan_broadcast(a.shape(), b.shape(), name);
  std::vector<T> out(static_cast<std::size_t>(numel(plan.out)));
  const T* av = a.values().data();
  const T* bv = b.values().data();
  switch (kind) {
    case BinOp::Add: for_each_broadcast(plan, [&](i64 o, i64 i, i64 j) { out[o] = av[i] + bv[j]; }); break;
    case BinOp::Sub: for_each_broadcast(plan, [&](i64 o, i64 i, i64 j) { out[o] = av[i] - bv[j]; }); break;
    case BinOp::Mul: for_each_broadcast(plan, [&](i64 o, i64 i, i64 j) { out[o] = av[i] * bv[j]; }); break;
    case BinOp::Div: for_each_broadcast(plan, [&](i64 o, i64 i, i64 j) { out[o] = av[i] / bv[j]; }); break;
  }
  Shape shape = plan.out;
  return make_result<T>(name, std::move(shape), std::move(out), {a, b}, [plan, kind](Node<T>& n) {
    T* ga = n.parent_grad(0);
    T* gb = n.parent_grad(1);
    const T* g = n.grad.data();
    const T* av = n.parents[0]->value.data();
    const T* bv = n.parents[1]->value.data();
    for_each_broadcast(plan, [&](i64 o, i64 i, i64 j) {
      switch (kind) {
        case BinOp::Add:
          if (ga) ga[i] += g[o];
          if (gb) gb[j] += g[o];
          break;
        case BinOp::Sub:
          if (ga) ga[i] += g[o];
          if (gb) gb[j] -= g[o];
          break;
        case BinOp::Mul:
          if (ga) ga[i] += g[o] * bv[j];
          if (gb) gb[j] += g[o] * av[i];
          break;
        case BinOp::Div:
          if (ga) ga[i] += g[o] / bv[j];
          if (gb) gb[j] -= g[o] * av[i] / (bv[j] * bv[j]);
          break;
      }
    });
  });
}

// y = f(x) with dy/dx = df(x, y).
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, const char* name, F f, DF df) {
  auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return make_result<T>(name, x.shape(), std::move(out), {x}, [df](Node<T>& n) {
    T* gx = n.parent_grad(0);
    if (!gx) return;
    const auto& xv = n.parents[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += n.grad[i] * df(xv[i], n.value[i]);
  });
}

// ---------------------------------------------------------------- conv

struct ConvGeom {
  i64 batch, h, w, cin;  // input of the correlation
  i64 kh, kw, cout;
  i64 stride;
  i64 ho, wo;
  i64 pad_top, pad_left;
};

ConvGeom conv_geometry(i64 batch, i64 h, i64 w, i64 cin, i64 kh, i64 kw, i64 cout, i64 stride, Padding padding) {
  ConvGeom g{batch, h, w, cin, kh, kw, cout, stride, 0, 0, 0, 0};
  if (stride < 1) throw DimensionError("conv stride must be positive");
  if (padding == Padding::Same) {
    g.ho = (h + stride - 1) / stride;
    g.wo = (w + stride - 1) / stride;
    i64 ph = std::max<i64>((g.ho - 1) * stride + kh - h, 0);
    i64 pw = std::max<i64>((g.wo - 1) * stride + kw - w, 0);
    g.pad_top = ph / 2;
    g.pad_left = pw / 2;
    if (kh > h + ph || kw > w + pw) throw DimensionError("kernel larger than padded input");
  } else {
    if (kh > h || kw > w) {
      throw DimensionError("kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                           " larger than input " + std::to_string(h) + "x" + std::to_string(w));
    }
    g.ho = (h - kh) / stride + 1;
    g.wo = (w - kw) / stride + 1;
  }
  return g;
}

// col[(oy*wo+ox), (ky*kw+kx)*cin + c]
template <typename T>
void im2col(const T* img, const ConvGeom& g, T* col) {
  const i64 k = g.kh * g.kw * g.cin;
  for (i64 oy = 0; oy < g.ho; ++oy) {
    for (i64 ox = 0; ox < g.wo; ++ox) {
      T* row = col + (oy * g.wo + ox) * k;
      for (i64 ky = 0; ky < g.kh; ++ky) {
        i64 iy = oy * g.stride - g.pad_top + ky;
        for (i64 kx = 0; kx < g.kw; ++kx) {
          i64 ix = ox * g.stride - g.pad_left + kx;
          T* dst = row + (ky * g.kw + kx) * g.cin;
          if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) {
            std::fill(dst, dst + g.cin, T(0));
          } else {
            const T* src = img + (iy * g.w + ix) * g.cin;
            std::copy(src, src + g.cin, dst);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeom& g, T* img) {
  const i64 k = g.kh * g.kw * g.cin;
  for (i64 oy = 0; oy < g.ho; ++oy) {
    for (i64 ox = 0; ox < g.wo; ++ox) {
      const T* row = col + (oy * g.wo + ox) * k;
      for (i64 ky = 0; ky < g.kh; ++ky) {
        i64 iy = oy * g.stride - g.pad_top + ky;
        if (iy < 0 || iy >= g.h) continue;
        for (i64 kx = 0; kx < g.kw; ++kx) {
          i64 ix = ox * g.stride - g.pad_left + kx;
          if (ix < 0 || ix >= g.w) continue;
          const T* src = row + (ky * g.kw + kx) * g.cin;
          T* dst = img + (iy * g.w + ix) * g.cin;
          for (i64 c = 0; c < g.cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeom& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad_top == 0 && g.pad_left == 0;
}

// Views [B,H,W,C] or [H,W,C] as batch + spatial extents.
struct Spatial {
  i64 batch, h, w, c;
  bool batched;
};

Spatial as_spatial(const Shape& s, const char* op) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  throw DimensionError(std::string(op) + " expects [B,H,W,C] or [H,W,C], got " + shape_str(s));
}

Shape spatial_shape(const Spatial& sp, i64 h, i64 w, i64 c) {
  return sp.batched ? Shape{sp.batch, h, w, c} : Shape{h, w, c};
}

}  // namespace

// ---------------------------------------------------------------- linalg

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  i64 m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m * n));
  MapMat<T>(out.data(), m, n).noalias() = CMapMat<T>(a.values().data(), m, k) * CMapMat<T>(b.values().data(), k, n);
  return make_result<T>("matmul", Shape{m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& node) {
    CMapMat<T> g(node.grad.data(), m, n);
    if (T* ga = node.parent_grad(0)) {
      MapMat<T>(ga, m, k).noalias() += g * CMapMat<T>(node.parents[1]->value.data(), k, n).transpose();
    }
    if (T* gb = node.parent_grad(1)) {
      MapMat<T>(gb, k, n).noalias() += CMapMat<T>(node.parents[0]->value.data(), m, k).transpose() * g;
    }
  });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin()) ||
      sa[sa.size() - 1] != sb[sb.size() - 2]) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  i64 groups = prod(sa, 0, sa.size() - 2);
  i64 m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
  Shape out_shape(sa.begin(), sa.end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<std::size_t>(groups * m * n));
  for (i64 gi = 0; gi < groups; ++gi) {
    MapMat<T>(out.data() + gi * m * n, m, n).noalias() =
        CMapMat<T>(a.values().data() + gi * m * k, m, k) * CMapMat<T>(b.values().data() + gi * k * n, k, n);
  }
  return make_result<T>("bmm", std::move(out_shape), std::move(out), {a, b}, [groups, m, k, n](Node<T>& node) {
    T* ga = node.parent_grad(0);
    T* gb = node.parent_grad(1);
    const T* av = node.parents[0]->value.data();
    const T* bv = node.parents[1]->value.data();
    for (i64 gi = 0; gi < groups; ++gi) {
      CMapMat<T> g(node.grad.data() + gi * m * n, m, n);
      if (ga) MapMat<T>(ga + gi * m * k, m, k).noalias() += g * CMapMat<T>(bv + gi * k * n, k, n).transpose();
      if (gb) MapMat<T>(gb + gi * k * n, k, n).noalias() += CMapMat<T>(av + gi * m * k, m, k).transpose() * g;
    }
  });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (w.rank() != 2 || x.dim(-1) != w.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " + shape_str(w.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != w.dim(1))) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  i64 in = w.dim(0), outd = w.dim(1);
  i64 rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  std::vector<T> out(static_cast<std::size_t>(rows * outd));
  MapMat<T> y(out.data(), rows, outd);
  y.noalias() = CMapMat<T>(x.values().data(), rows, in) * CMapMat<T>(w.values().data(), in, outd);
  if (has_bias) y.rowwise() += CMapVec<T>(bias.values().data(), outd).transpose();
  std::vector<Tensor<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>("linear", std::move(out_shape), std::move(out), inputs, [rows, in, outd, has_bias](Node<T>& node) {
    CMapMat<T> g(node.grad.data(), rows, outd);
    if (T* gx = node.parent_grad(0)) {
      MapMat<T>(gx, rows, in).noalias() += g * CMapMat<T>(node.parents[1]->value.data(), in, outd).transpose();
    }
    if (T* gw = node.parent_grad(1)) {
      MapMat<T>(gw, in, outd).noalias() += CMapMat<T>(node.parents[0]->value.data(), rows, in).transpose() * g;
    }
    if (has_bias) {
      if (T* gb = node.parent_grad(2)) MapVec<T>(gb, outd) += g.colwise().sum().transpose();
    }
  });
}

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinOp::Add, "add"); }
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinOp::Sub, "sub"); }
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinOp::Mul, "mul"); }
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) { return binary(a, b, BinOp::Div, "div"); }

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  return unary(x, "add_scalar", [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(x, "relu", [](T v) { return v > T(0) ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return unary(
      x, "gelu", [=](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [=](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(
      x, "sigmoid",
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return unary(x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

// ---------------------------------------------------------------- normalization

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const auto& s = x.shape();
  int a = norm_axis(axis, x.rank(), s);
  i64 outer = prod(s, 0, a), n = s[a], inner = prod(s, a + 1, s.size());
  auto xv = x.values();
  std::vector<T> out(xv.size());
  for (i64 o = 0; o < outer; ++o) {
    for (i64 i = 0; i < inner; ++i) {
      const i64 base = o * n * inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (i64 j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      T total = 0;
      for (i64 j = 0; j < n; ++j) {
        T e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (i64 j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  return make_result<T>("softmax", s, std::move(out), {x}, [outer, n, inner](Node<T>& node) {
    T* gx = node.parent_grad(0);
    if (!gx) return;
    const T* y = node.value.data();
    const T* g = node.grad.data();
    for (i64 o = 0; o < outer; ++o) {
      for (i64 i = 0; i < inner; ++i) {
        const i64 base = o * n * inner + i;
        T dot = 0;
        for (i64 j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
        for (i64 j = 0; j < n; ++j) gx[base + j * inner] += y[base + j * inner] * (g[base + j * inner] - dot);
      }
    }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  i64 d = x.dim(-1);
  if (gamma.size() != d || beta.size() != d) {
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                         " do not match last extent of " + shape_str(x.shape()));
  }
  if (!(eps > T(0))) throw ContractError("layer_norm: eps must be positive");
  i64 rows = x.size() / d;
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  std::vector<T> out(xv.size()), xhat(xv.size()), rstd(static_cast<std::size_t>(rows));
  for (i64 r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu = 0;
    for (i64 j = 0; j < d; ++j) mu += row[j];
    mu /= T(d);
    T var = 0;
    for (i64 j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(d);
    T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (i64 j = 0; j < d; ++j) {
      T h = (row[j] - mu) * rs;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return make_result<T>("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                        [rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& node) {
                          T* gx = node.parent_grad(0);
                          T* gg = node.parent_grad(1);
                          T* gb = node.parent_grad(2);
                          const T* gam = node.parents[1]->value.data();
                          const T* g = node.grad.data();
                          for (i64 r = 0; r < rows; ++r) {
                            const T* gr = g + r * d;
                            const T* hr = xhat.data() + r * d;
                            if (gg) for (i64 j = 0; j < d; ++j) gg[j] += gr[j] * hr[j];
                            if (gb) for (i64 j = 0; j < d; ++j) gb[j] += gr[j];
                            if (gx) {
                              T m1 = 0, m2 = 0;
                              for (i64 j = 0; j < d; ++j) {
                                T dh = gr[j] * gam[j];
                                m1 += dh;
                                m2 += dh * hr[j];
                              }
                              m1 /= T(d);
                              m2 /= T(d);
                              for (i64 j = 0; j < d; ++j) {
                                gx[r * d + j] += rstd[r] * (gr[j] * gam[j] - m1 - hr[j] * m2);
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------- convolution

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride, Padding padding) {
  auto sp = as_spatial(x.shape(), "conv2d");
  if (w.rank() != 4 || w.dim(2) != sp.c) {
    throw DimensionError("conv2d: weight " + shape_str(w.shape()) + " does not match input " + shape_str(x.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != w.dim(3)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(w.shape()));
  }
  auto g = conv_geometry(sp.batch, sp.h, sp.w, sp.c, w.dim(0), w.dim(1), w.dim(3), stride, padding);
  const i64 k = g.kh * g.kw * g.cin;
  const i64 npix = g.ho * g.wo;
  const bool pointwise = is_pointwise(g);
  std::vector<T> out(static_cast<std::size_t>(g.batch * npix * g.cout));
  std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(npix * k));
  CMapMat<T> wm(w.values().data(), k, g.cout);
  for (i64 b = 0; b < g.batch; ++b) {
    const T* img = x.values().data() + b * g.h * g.w * g.cin;
    const T* src = img;
    if (!pointwise) {
      im2col(img, g, col.data());
      src = col.data();
    }
    MapMat<T> y(out.data() + b * npix * g.cout, npix, g.cout);
    y.noalias() = CMapMat<T>(src, npix, k) * wm;
    if (has_bias) y.rowwise() += CMapVec<T>(bias.values().data(), g.cout).transpose();
  }
  std::vector<Tensor<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  return make_result<T>("conv2d", spatial_shape(sp, g.ho, g.wo, g.cout), std::move(out), inputs,
                        [g, k, npix, pointwise, has_bias](Node<T>& node) {
                          T* gx = node.parent_grad(0);
                          T* gw = node.parent_grad(1);
                          T* gb = has_bias ? node.parent_grad(2) : nullptr;
                          const T* xv = node.parents[0]->value.data();
                          CMapMat<T> wm(node.parents[1]->value.data(), k, g.cout);
                          std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(npix * k));
                          std::vector<T> dcol(pointwise || !gx ? 0 : static_cast<std::size_t>(npix * k));
                          for (i64 b = 0; b < g.batch; ++b) {
                            CMapMat<T> gy(node.grad.data() + b * npix * g.cout, npix, g.cout);
                            const T* img = xv + b * g.h * g.w * g.cin;
                            if (gw) {
                              const T* src = img;
                              if (!pointwise) {
                                im2col(img, g, col.data());
                                src = col.data();
                              }
                              MapMat<T>(gw, k, g.cout).noalias() += CMapMat<T>(src, npix, k).transpose() * gy;
                            }
                            if (gb) MapVec<T>(gb, g.cout) += gy.colwise().sum().transpose();
                            if (gx) {
                              T* dimg = gx + b * g.h * g.w * g.cin;
                              if (pointwise) {
                                MapMat<T>(dimg, npix, k).noalias() += gy * wm.transpose();
                              } else {
                                MapMat<T>(dcol.data(), npix, k).noalias() = gy * wm.transpose();
                                col2im(dcol.data(), g, dimg);
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride) {
  auto sp = as_spatial(x.shape(), "transposed_conv2d");
  if (stride < 1) throw DimensionError("transposed_conv2d: stride must be positive");
  if (w.rank() != 4 || w.dim(3) != sp.c) {
    throw DimensionError("transposed_conv2d: weight " + shape_str(w.shape()) + " does not match input " +
                         shape_str(x.shape()));
  }
  const bool has_bias = bias.defined();
  const i64 cout = w.dim(2);
  if (has_bias && bias.size() != cout) {
    throw DimensionError("transposed_conv2d: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  // Geometry of the forward conv whose adjoint this is: (H*s) -> H.
  auto g = conv_geometry(sp.batch, sp.h * stride, sp.w * stride, cout, w.dim(0), w.dim(1), sp.c, stride, Padding::Same);
  const i64 k = g.kh * g.kw * g.cin;  // columns of the forward conv
  const i64 npix = g.ho * g.wo;       // == H*W of x
  const i64 out_pix = g.h * g.w;
  std::vector<T> out(static_cast<std::size_t>(g.batch * out_pix * cout), T(0));
  std::vector<T> dcol(static_cast<std::size_t>(npix * k));
  CMapMat<T> wm(w.values().data(), k, sp.c);
  for (i64 b = 0; b < g.batch; ++b) {
    MapMat<T>(dcol.data(), npix, k).noalias() = CMapMat<T>(x.values().data() + b * npix * sp.c, npix, sp.c) * wm.transpose();
    T* img = out.data() + b * out_pix * cout;
    col2im(dcol.data(), g, img);
    if (has_bias) MapMat<T>(img, out_pix, cout).rowwise() += CMapVec<T>(bias.values().data(), cout).transpose();
  }
  std::vector<Tensor<T>> inputs{x, w};
  if (has_bias) inputs.push_back(bias);
  const i64 cin = sp.c;
  return make_result<T>("transposed_conv2d", spatial_shape(sp, g.h, g.w, cout), std::move(out), inputs,
                        [g, k, npix, out_pix, cin, has_bias](Node<T>& node) {
                          T* gx = node.parent_grad(0);
                          T* gw = node.parent_grad(1);
                          T* gb = has_bias ? node.parent_grad(2) : nullptr;
                          const T* xv = node.parents[0]->value.data();
                          CMapMat<T> wm(node.parents[1]->value.data(), k, cin);
                          std::vector<T> col(static_cast<std::size_t>(npix * k));
                          for (i64 b = 0; b < g.batch; ++b) {
                            const T* gimg = node.grad.data() + b * out_pix * g.cin;
                            im2col(gimg, g, col.data());
                            CMapMat<T> cm(col.data(), npix, k);
                            if (gx) MapMat<T>(gx + b * npix * cin, npix, cin).noalias() += cm * wm;
                            if (gw) {
                              MapMat<T>(gw, k, cin).noalias() += cm.transpose() * CMapMat<T>(xv + b * npix * cin, npix, cin);
                            }
                            if (gb) MapVec<T>(gb, g.cin) += CMapMat<T>(gimg, out_pix, g.cin).colwise().sum().transpose();
                          }
                        });
}

template <typename T>
Tensor<T> max_pool2x2(const Tensor<T>& x) {
  auto sp = as_spatial(x.shape(), "max_pool2x2");
  if (sp.h % 2 || sp.w % 2) throw GeometryError("max_pool2x2 needs even extents, got " + shape_str(x.shape()));
  i64 ho = sp.h / 2, wo = sp.w / 2;
  std::vector<T> out(static_cast<std::size_t>(sp.batch * ho * wo * sp.c));
  std::vector<i64> arg(out.size());
  auto xv = x.values();
  for (i64 b = 0; b < sp.batch; ++b) {
    for (i64 oy = 0; oy < ho; ++oy) {
      for (i64 ox = 0; ox < wo; ++ox) {
        for (i64 c = 0; c < sp.c; ++c) {
          i64 best = -1;
          for (i64 dy = 0; dy < 2; ++dy) {
            for (i64 dx = 0; dx < 2; ++dx) {
              i64 idx = ((b * sp.h + 2 * oy + dy) * sp.w + 2 * ox + dx) * sp.c + c;
              if (best < 0 || xv[idx] > xv[best]) best = idx;
            }
          }
          i64 o = ((b * ho + oy) * wo + ox) * sp.c + c;
          out[o] = xv[best];
          arg[o] = best;
        }
      }
    }
  }
  return make_result<T>("max_pool2x2", spatial_shape(sp, ho, wo, sp.c), std::move(out), {x},
                        [arg = std::move(arg)](Node<T>& node) {
                          T* gx = node.parent_grad(0);
                          if (!gx) return;
                          for (std::size_t o = 0; o < arg.size(); ++o) gx[arg[o]] += node.grad[o];
                        });
}

// ---------------------------------------------------------------- data movement

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  i64 known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw DimensionError("reshape: more than one inferred extent");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0 && x.size() % known == 0) shape[infer] = x.size() / known;
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(x.values().begin(), x.values().end());
  return make_result<T>("reshape", std::move(shape), std::move(out), {x}, [](Node<T>& node) {
    T* gx = node.parent_grad(0);
    if (!gx) return;
    for (std::size_t i = 0; i < node.grad.size(); ++i) gx[i] += node.grad[i];
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  const auto& s = x.shape();
  const std::size_t r = s.size();
  if (perm.size() != r) throw DimensionError("permute: axis list does not match rank of " + shape_str(s));
  std::vector<bool> used(r, false);
  for (int p : perm) {
    if (p < 0 || static_cast<std::size_t>(p) >= r || used[p]) throw DimensionError("permute: invalid axis list");
    used[p] = true;
  }
  std::vector<i64> in_stride(r, 1);
  for (std::size_t k = r; k-- > 1;) in_stride[k - 1] = in_stride[k] * s[k];
  Shape out_shape(r);
  std::vector<i64> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = s[perm[i]];
    src_stride[i] = in_stride[perm[i]];
  }
  // offsets[o] = source index of output element o
  const i64 n = x.size();
  std::vector<i64> offsets(static_cast<std::size_t>(n));
  {
    std::vector<i64> idx(r, 0);
    i64 off = 0;
    for (i64 o = 0; o < n; ++o) {
      offsets[o] = off;
      for (std::size_t k = r; k-- > 0;) {
        ++idx[k];
        off += src_stride[k];
        if (idx[k] < out_shape[k]) break;
        off -= src_stride[k] * out_shape[k];
        idx[k] = 0;
      }
    }
  }
  auto xv = x.values();
  std::vector<T> out(static_cast<std::size_t>(n));
  for (i64 o = 0; o < n; ++o) out[o] = xv[offsets[o]];
  return make_result<T>("permute", std::move(out_shape), std::move(out), {x}, [offsets = std::move(offsets)](Node<T>& node) {
    T* gx = node.parent_grad(0);
    if (!gx) return;
    for (std::size_t o = 0; o < offsets.size(); ++o) gx[offsets[o]] += node.grad[o];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<int> perm(x.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of an empty list");
  const Shape& s0 = parts[0].shape();
  int a = norm_axis(axis, static_cast<int>(s0.size()), s0);
  std::vector<i64> widths;
  i64 total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (static_cast<int>(i) == a) || s[i] == s0[i];
    if (!ok) throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(s0) + " on axis " + std::to_string(a));
    widths.push_back(s[a]);
    total += s[a];
  }
  i64 outer = prod(s0, 0, a), inner = prod(s0, a + 1, s0.size());
  Shape out_shape = s0;
  out_shape[a] = total;
  std::vector<T> out(static_cast<std::size_t>(outer * total * inner));
  i64 offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const T* src = parts[p].values().data();
    const i64 chunk = widths[p] * inner;
    for (i64 o = 0; o < outer; ++o) {
      std::copy(src + o * chunk, src + (o + 1) * chunk, out.data() + o * total * inner + offset);
    }
    offset += chunk;
  }
  return make_result<T>("concat", std::move(out_shape), std::move(out), parts, [outer, total, inner, widths](Node<T>& node) {
    i64 offset = 0;
    for (std::size_t p = 0; p < widths.size(); ++p) {
      const i64 chunk = widths[p] * inner;
      if (T* gp = node.parent_grad(p)) {
        for (i64 o = 0; o < outer; ++o) {
          const T* src = node.grad.data() + o * total * inner + offset;
          T* dst = gp + o * chunk;
          for (i64 i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
      offset += chunk;
    }
  });
}

template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& x, int axis, const std::vector<std::int64_t>& sizes) {
  const Shape& s = x.shape();
  int a = norm_axis(axis, x.rank(), s);
  i64 total = 0;
  for (auto z : sizes) {
    if (z <= 0) throw DimensionError("split sizes must be positive");
    total += z;
  }
  if (total != s[a]) {
    throw DimensionError("split sizes sum to " + std::to_string(total) + " but axis extent is " + std::to_string(s[a]));
  }
  i64 outer = prod(s, 0, a), inner = prod(s, a + 1, s.size());
  std::vector<Tensor<T>> result;
  i64 offset = 0;
  for (auto z : sizes) {
    Shape ps = s;
    ps[a] = z;
    const i64 chunk = z * inner;
    std::vector<T> out(static_cast<std::size_t>(outer * chunk));
    const T* src = x.values().data();
    for (i64 o = 0; o < outer; ++o) {
      std::copy(src + o * total * inner + offset, src + o * total * inner + offset + chunk, out.data() + o * chunk);
    }
    result.push_back(make_result<T>("split", std::move(ps), std::move(out), {x}, [outer, total, inner, offset, chunk](Node<T>& node) {
      T* gx = node.parent_grad(0);
      if (!gx) return;
      for (i64 o = 0; o < outer; ++o) {
        T* dst = gx + o * total * inner + offset;
        const T* g = node.grad.data() + o * chunk;
        for (i64 i = 0; i < chunk; ++i) dst[i] += g[i];
      }
    }));
    offset += chunk;
  }
  return result;
}

template <typename T>
Tensor<T> index_select(const Tensor<T>& x, int axis, const std::vector<std::int64_t>& indices) {
  const Shape& s = x.shape();
  int a = norm_axis(axis, x.rank(), s);
  if (indices.empty()) throw DimensionError("index_select with no indices");
  for (auto i : indices) {
    if (i < 0 || i >= s[a]) throw DimensionError("index_select: index " + std::to_string(i) + " out of range for " + shape_str(s));
  }
  i64 outer = prod(s, 0, a), n = s[a], inner = prod(s, a + 1, s.size());
  i64 m = static_cast<i64>(indices.size());
  Shape out_shape = s;
  out_shape[a] = m;
  std::vector<T> out(static_cast<std::size_t>(outer * m * inner));
  const T* xv = x.values().data();
  for (i64 o = 0; o < outer; ++o) {
    for (i64 j = 0; j < m; ++j) {
      const T* src = xv + (o * n + indices[j]) * inner;
      std::copy(src, src + inner, out.data() + (o * m + j) * inner);
    }
  }
  return make_result<T>("index_select", std::move(out_shape), std::move(out), {x}, [outer, n, m, inner, indices](Node<T>& node) {
    T* gx = node.parent_grad(0);
    if (!gx) return;
    for (i64 o = 0; o < outer; ++o) {
      for (i64 j = 0; j < m; ++j) {
        T* dst = gx + (o * n + indices[j]) * inner;
        const T* g = node.grad.data() + (o * m + j) * inner;
        for (i64 i = 0; i < inner; ++i) dst[i] += g[i];
      }
    }
  });
}

namespace {
template <typename T>
Tensor<T> reduce_axis(const Tensor<T>& x, int axis, bool keepdim, bool average) {
  const Shape& s = x.shape();
  int a = norm_axis(axis, x.rank(), s);
  i64 outer = prod(s, 0, a), n = s[a], inner = prod(s, a + 1, s.size());
  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i) {
    if (i != a) out_shape.push_back(s[i]);
    else if (keepdim) out_shape.push_back(1);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  const T factor = average ? T(1) / T(n) : T(1);
  std::vector<T> out(static_cast<std::size_t>(outer * inner), T(0));
  const T* xv = x.values().data();
  for (i64 o = 0; o < outer; ++o) {
    for (i64 j = 0; j < n; ++j) {
      const T* src = xv + (o * n + j) * inner;
      T* dst = out.data() + o * inner;
      for (i64 i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  if (average) for (auto& v : out) v *= factor;
  return make_result<T>(average ? "mean" : "sum", std::move(out_shape), std::move(out), {x},
                        [outer, n, inner, factor](Node<T>& node) {
                          T* gx = node.parent_grad(0);
                          if (!gx) return;
                          for (i64 o = 0; o < outer; ++o) {
                            const T* g = node.grad.data() + o * inner;
                            for (i64 j = 0; j < n; ++j) {
                              T* dst = gx + (o * n + j) * inner;
                              for (i64 i = 0; i < inner; ++i) dst[i] += g[i] * factor;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> reduce_all(const Tensor<T>& x, bool average) {
  T total = 0;
  for (T v : x.values()) total += v;
  const T factor = average ? T(1) / T(x.size()) : T(1);
  return make_result<T>(average ? "mean_all" : "sum_all", Shape{1}, std::vector<T>{total * factor}, {x},
                        [factor](Node<T>& node) {
                          T* gx = node.parent_grad(0);
                          if (!gx) return;
                          const T g = node.grad[0] * factor;
                          const std::size_t n = node.parents[0]->value.size();
                          for (std::size_t i = 0; i < n; ++i) gx[i] += g;
                        });
}
}  // namespace

template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim) { return reduce_axis(x, axis, keepdim, false); }
template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim) { return reduce_axis(x, axis, keepdim, true); }
template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) { return reduce_all(x, false); }
template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) { return reduce_all(x, true); }

namespace {
struct Interp {
  std::vector<i64> lo, hi;
  std::vector<double> frac;
};

Interp interp_table(i64 in, i64 out, int factor) {
  Interp t;
  t.lo.resize(out);
  t.hi.resize(out);
  t.frac.resize(out);
  for (i64 o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    i64 l = static_cast<i64>(std::floor(src));
    t.lo[o] = l;
    t.hi[o] = std::min(l + 1, in - 1);
    t.frac[o] = src - static_cast<double>(l);
  }
  return t;
}
}  // namespace

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int factor) {
  auto sp = as_spatial(x.shape(), "bilinear_upsample");
  if (factor < 1) throw DimensionError("bilinear_upsample factor must be positive");
  i64 ho = sp.h * factor, wo = sp.w * factor;
  auto ty = interp_table(sp.h, ho, factor);
  auto tx = interp_table(sp.w, wo, factor);
  std::vector<T> out(static_cast<std::size_t>(sp.batch * ho * wo * sp.c));
  const T* xv = x.values().data();
  for (i64 b = 0; b < sp.batch; ++b) {
    const T* img = xv + b * sp.h * sp.w * sp.c;
    for (i64 oy = 0; oy < ho; ++oy) {
      const T fy = static_cast<T>(ty.frac[oy]);
      for (i64 ox = 0; ox < wo; ++ox) {
        const T fx = static_cast<T>(tx.frac[ox]);
        const T* p00 = img + (ty.lo[oy] * sp.w + tx.lo[ox]) * sp.c;
        const T* p01 = img + (ty.lo[oy] * sp.w + tx.hi[ox]) * sp.c;
        const T* p10 = img + (ty.hi[oy] * sp.w + tx.lo[ox]) * sp.c;
        const T* p11 = img + (ty.hi[oy] * sp.w + tx.hi[ox]) * sp.c;
        T* dst = out.data() + ((b * ho + oy) * wo + ox) * sp.c;
        for (i64 c = 0; c < sp.c; ++c) {
          dst[c] = (T(1) - fy) * ((T(1) - fx) * p00[c] + fx * p01[c]) + fy * ((T(1) - fx) * p10[c] + fx * p11[c]);
        }
      }
    }
  }
  return make_result<T>("bilinear_upsample", spatial_shape(sp, ho, wo, sp.c), std::move(out), {x},
                        [sp, ho, wo, ty = std::move(ty), tx = std::move(tx)](Node<T>& node) {
                          T* gx = node.parent_grad(0);
                          if (!gx) return;
                          for (i64 b = 0; b < sp.batch; ++b) {
                            T* img = gx + b * sp.h * sp.w * sp.c;
                            for (i64 oy = 0; oy < ho; ++oy) {
                              const T fy = static_cast<T>(ty.frac[oy]);
                              for (i64 ox = 0; ox < wo; ++ox) {
                                const T fx = static_cast<T>(tx.frac[ox]);
                                const T* g = node.grad.data() + ((b * ho + oy) * wo + ox) * sp.c;
                                T* p00 = img + (ty.lo[oy] * sp.w + tx.lo[ox]) * sp.c;
                                T* p01 = img + (ty.lo[oy] * sp.w + tx.hi[ox]) * sp.c;
                                T* p10 = img + (ty.hi[oy] * sp.w + tx.lo[ox]) * sp.c;
                                T* p11 = img + (ty.hi[oy] * sp.w + tx.hi[ox]) * sp.c;
                                for (i64 c = 0; c < sp.c; ++c) {
                                  p00[c] += g[c] * (T(1) - fy) * (T(1) - fx);
                                  p01[c] += g[c] * (T(1) - fy) * fx;
                                  p10[c] += g[c] * fy * (T(1) - fx);
                                  p11[c] += g[c] * fy * fx;
                                }
                              }
                            }
                          }
                        });
}

#define CRACKNET_INSTANTIATE_OPS(T)                                                                  \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                       \
  template Tensor<T> scale(const Tensor<T>&, T);                                                    \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                               \
  template Tensor<T> relu(const Tensor<T>&);                                                        \
  template Tensor<T> gelu(const Tensor<T>&);                                                        \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                     \
  template Tensor<T> exp(const Tensor<T>&);                                                         \
  template Tensor<T> log(const Tensor<T>&);                                                         \
  template Tensor<T> softmax(const Tensor<T>&, int);                                                \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);           \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, Padding);     \
  template Tensor<T> transposed_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int);  \
  template Tensor<T> max_pool2x2(const Tensor<T>&);                                                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                              \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                            \
  template Tensor<T> transpose(const Tensor<T>&);                                                   \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                    \
  template std::vector<Tensor<T>> split(const Tensor<T>&, int, const std::vector<std::int64_t>&);   \
  template Tensor<T> index_select(const Tensor<T>&, int, const std::vector<std::int64_t>&);         \
  template Tensor<T> sum(const Tensor<T>&, int, bool);                                              \
  template Tensor<T> mean(const Tensor<T>&, int, bool);                                             \
  template Tensor<T> sum_all(const Tensor<T>&);                                                     \
  template Tensor<T> mean_all(const Tensor<T>&);                                                    \
  template Tensor<T> bilinear_upsample(const Tensor<T>&, int);

CRACKNET_INSTANTIATE_OPS(float)
CRACKNET_INSTANTIATE_OPS(double)

}  // namespace cracknet::ops
