#pragma once

// Plain-loop reference implementations used as test oracles. None of them
// touch cracknet::ops; they read parameter tensors element by element.

#include <algorithm>
#include <cmath>
#include <vector>

#include "cracknet/attention.hpp"
#include "cracknet/params.hpp"
#include "cracknet/random.hpp"

namespace oracle {

using cracknet::Shape;
using TD = cracknet::Tensor<double>;
using Vec = std::vector<double>;
using cracknet::attention::AttentionParams;
using cracknet::attention::ExternalMemory;
using cracknet::ParamStore;
using cracknet::Rng;

// Direct nested-loop cross-correlation with the symmetric same-padding rule
// (odd pixel bottom/right). x [H,W,Cin], w [k,k,Cin,Cout].
inline Vec conv_oracle(const TD& x, const TD& w, const TD& b, int stride, bool same, int* ho_out,
                                int* wo_out) {
  const int H = x.dim(0), W = x.dim(1), C = x.dim(2);
  const int kh = w.dim(0), kw = w.dim(1), O = w.dim(3);
  int ho, wo, pt = 0, pl = 0;
  if (same) {
    ho = (H + stride - 1) / stride;
    wo = (W + stride - 1) / stride;
    pt = std::max((ho - 1) * stride + kh - H, 0) / 2;
    pl = std::max((wo - 1) * stride + kw - W, 0) / 2;
  } else {
    ho = (H - kh) / stride + 1;
    wo = (W - kw) / stride + 1;
  }
  std::vector<double> out(static_cast<std::size_t>(ho * wo * O));
  for (int i = 0; i < ho; ++i)
    for (int j = 0; j < wo; ++j)
      for (int o = 0; o < O; ++o) {
        double acc = b.defined() ? b.at(o) : 0.0;
        for (int a = 0; a < kh; ++a)
          for (int c = 0; c < kw; ++c) {
            const int y = i * stride + a - pt, xx = j * stride + c - pl;
            if (y < 0 || y >= H || xx < 0 || xx >= W) continue;
            for (int ch = 0; ch < C; ++ch)
              acc += x.at((y * W + xx) * C + ch) * w.at(((a * kw + c) * C + ch) * O + o);
          }
        out[static_cast<std::size_t>((i * wo + j) * O + o)] = acc;
      }
  *ho_out = ho;
  *wo_out = wo;
  return out;
}


// Overwrites every parameter (biases and sigma included) with seeded values
// so no oracle term hides behind a zero initialisation.
inline void randomize(ParamStore<double>& store, std::uint64_t seed, double lo = -0.6, double hi = 0.6) {
  Rng rng(seed);
  for (auto& [name, t] : store.entries()) {
    const bool positive = name.size() >= 5 && name.compare(name.size() - 5, 5, "sigma") == 0;
    for (auto& v : t.mutable_values()) v = positive ? rng.uniform(0.5, 2.0) : rng.uniform(lo, hi);
  }
}

// y[n, out] = x[n, in] * w[in, out] + b
inline Vec affine(const Vec& x, int n, int in, const TD& w, const TD& b) {
  const int out = static_cast<int>(w.dim(1));
  Vec y(static_cast<std::size_t>(n) * out);
  for (int r = 0; r < n; ++r)
    for (int o = 0; o < out; ++o) {
      double acc = b.defined() ? b.at(o) : 0.0;
      for (int i = 0; i < in; ++i) acc += x[r * in + i] * w.at(static_cast<std::int64_t>(i) * out + o);
      y[r * out + o] = acc;
    }
  return y;
}

inline Vec softmax_row(Vec z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double s = 0;
  for (auto& v : z) s += (v = std::exp(v - mx));
  for (auto& v : z) v /= s;
  return z;
}

// Single-head softmax(q k^T / sqrt(d) + mask) v on [n, d] blocks.
inline Vec sa_oracle(const Vec& q, const Vec& k, const Vec& v, int n, int d, const Vec* mask = nullptr,
              Vec* weights = nullptr) {
  Vec out(static_cast<std::size_t>(n) * d, 0.0);
  if (weights) weights->assign(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) {
    Vec z(n);
    for (int j = 0; j < n; ++j) {
      double dot = 0;
      for (int c = 0; c < d; ++c) dot += q[i * d + c] * k[j * d + c];
      z[j] = dot / std::sqrt(static_cast<double>(d)) + (mask ? (*mask)[i * n + j] : 0.0);
    }
    z = softmax_row(z);
    for (int j = 0; j < n; ++j) {
      if (weights) (*weights)[i * n + j] = z[j];
      for (int c = 0; c < d; ++c) out[i * d + c] += z[j] * v[j * d + c];
    }
  }
  return out;
}

inline Vec head_slice(const Vec& x, int n, int dim, int h, int d) {
  Vec s(static_cast<std::size_t>(n) * d);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) s[r * d + c] = x[r * dim + h * d + c];
  return s;
}

// Projections, one SA per head on its d-slice, concat, output projection.
inline Vec mhsa_oracle(const Vec& x, int n, const AttentionParams<double>& p, const Vec* mask = nullptr) {
  const int dim = p.dim, heads = p.heads, d = dim / heads;
  auto q = affine(x, n, dim, p.wq, p.bq), k = affine(x, n, dim, p.wk, p.bk), v = affine(x, n, dim, p.wv, p.bv);
  Vec cat(static_cast<std::size_t>(n) * dim);
  for (int h = 0; h < heads; ++h) {
    auto o = sa_oracle(head_slice(q, n, dim, h, d), head_slice(k, n, dim, h, d), head_slice(v, n, dim, h, d), n, d,
                       mask);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < d; ++c) cat[r * dim + h * d + c] = o[r * d + c];
  }
  return affine(cat, n, dim, p.wo, p.bo);
}

// Row-and-column attention over an h x w grid of [h*w, dim] tokens.
inline Vec axial_oracle(const Vec& x, int h, int w, const AttentionParams<double>& p, double sigma_override = -1) {
  const int dim = p.dim, heads = p.heads, d = dim / heads, n = h * w;
  auto q = affine(x, n, dim, p.wq, p.bq), k = affine(x, n, dim, p.wk, p.bk), v = affine(x, n, dim, p.wv, p.bv);
  Vec cat(static_cast<std::size_t>(n) * dim, 0.0);
  for (int hd = 0; hd < heads; ++hd) {
    const double sigma = sigma_override > 0 ? sigma_override : p.sigma.at(hd);
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        std::vector<int> keys;
        for (int r = 0; r < h; ++r)
          for (int c = 0; c < w; ++c)
            if (r == i || c == j) keys.push_back(r * w + c);
        Vec z;
        for (int key : keys) {
          const int r = key / w, c = key % w;
          double dot = 0;
          for (int e = 0; e < d; ++e) dot += q[(i * w + j) * dim + hd * d + e] * k[key * dim + hd * d + e];
          const double dist2 = (r - i) * (r - i) + (c - j) * (c - j);
          z.push_back(dot / std::sqrt(static_cast<double>(d)) - dist2 / (2 * sigma * sigma));
        }
        z = softmax_row(z);
        for (std::size_t t = 0; t < keys.size(); ++t)
          for (int e = 0; e < d; ++e) cat[(i * w + j) * dim + hd * d + e] += z[t] * v[keys[t] * dim + hd * d + e];
      }
  }
  return affine(cat, n, dim, p.wo, p.bo);
}

// Half-pixel bilinear resize of an [h, w, c] map by an integer factor.
inline Vec upsample_oracle(const Vec& x, int h, int w, int c, int f) {
  Vec y(static_cast<std::size_t>(h * f) * (w * f) * c);
  auto src = [f](int o, int extent, int* i0, int* i1, double* t) {
    double s = (o + 0.5) / f - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(extent - 1));
    *i0 = static_cast<int>(std::floor(s));
    *i1 = std::min(*i0 + 1, extent - 1);
    *t = s - *i0;
  };
  for (int oi = 0; oi < h * f; ++oi)
    for (int oj = 0; oj < w * f; ++oj) {
      int a0, a1, b0, b1;
      double ta, tb;
      src(oi, h, &a0, &a1, &ta);
      src(oj, w, &b0, &b1, &tb);
      for (int ch = 0; ch < c; ++ch) {
        auto at = [&](int r, int cc) { return x[(r * w + cc) * c + ch]; };
        y[(oi * w * f + oj) * c + ch] = (1 - ta) * ((1 - tb) * at(a0, b0) + tb * at(a0, b1)) +
                                        ta * ((1 - tb) * at(a1, b0) + tb * at(a1, b1));
      }
    }
  return y;
}

// Gathers window (wi, wj) of an [h, w, c] map as [M*M, c].
inline Vec window_of(const Vec& x, int w, int c, int m, int wi, int wj) {
  Vec out;
  for (int a = 0; a < m; ++a)
    for (int b = 0; b < m; ++b)
      for (int ch = 0; ch < c; ++ch) out.push_back(x[((wi * m + a) * w + wj * m + b) * c + ch]);
  return out;
}


inline Vec external_oracle(const Vec& x, int n, int d, const ExternalMemory<double>& m, Vec* stage = nullptr) {
  const int s = static_cast<int>(m.mk.dim(0));
  Vec a(static_cast<std::size_t>(n) * s);
  for (int i = 0; i < n; ++i)
    for (int u = 0; u < s; ++u) {
      double dot = 0;
      for (int c = 0; c < d; ++c) dot += x[i * d + c] * m.mk.at(u * d + c);
      a[i * s + u] = dot;
    }
  for (int u = 0; u < s; ++u) {  // softmax down each memory column (over tokens)
    Vec col(n);
    for (int i = 0; i < n; ++i) col[i] = a[i * s + u];
    col = softmax_row(col);
    for (int i = 0; i < n; ++i) a[i * s + u] = col[i];
  }
  if (stage) *stage = a;
  for (int i = 0; i < n; ++i) {  // L1 across memory units
    double z = 1e-9;
    for (int u = 0; u < s; ++u) z += a[i * s + u];
    for (int u = 0; u < s; ++u) a[i * s + u] /= z;
  }
  Vec out(static_cast<std::size_t>(n) * d, 0.0);
  for (int i = 0; i < n; ++i)
    for (int u = 0; u < s; ++u)
      for (int c = 0; c < d; ++c) out[i * d + c] += a[i * s + u] * m.mv.at(u * d + c);
  return out;
}

// Per-row layer norm over the last axis (eps 1e-5).
inline Vec layer_norm(const Vec& x, int n, int dim, const TD& gamma, const TD& beta) {
  Vec y(x.size());
  for (int r = 0; r < n; ++r) {
    double mu = 0, var = 0;
    for (int c = 0; c < dim; ++c) mu += x[r * dim + c] / dim;
    for (int c = 0; c < dim; ++c) var += (x[r * dim + c] - mu) * (x[r * dim + c] - mu) / dim;
    for (int c = 0; c < dim; ++c)
      y[r * dim + c] = (x[r * dim + c] - mu) / std::sqrt(var + 1e-5) * gamma.at(c) + beta.at(c);
  }
  return y;
}

inline Vec gelu(Vec x) {
  for (auto& v : x) v = 0.5 * v * (1 + std::erf(v / std::sqrt(2.0)));
  return x;
}

inline Vec add(Vec a, const Vec& b) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

}  // namespace oracle
