#include <gtest/gtest.h>

#include <cmath>

#include "cracknet/attention.hpp"
#include "cracknet/grad_check.hpp"
#include "cracknet/ops.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace cracknet;
using namespace cracknet::attention;
using testutil::as_vec;
using testutil::max_abs_diff;
using testutil::rand_tensor;
using TD = Tensor<double>;
using namespace oracle;


// ---------------------------------------------------------------- scaled dot product

TEST(ScaledDotProduct, SingleTokenReturnsValue) {
  auto q = rand_tensor({1, 4}, 1), k = rand_tensor({1, 4}, 2), v = rand_tensor({1, 4}, 3);
  EXPECT_LT(max_abs_diff(as_vec(scaled_dot_product_attention(q, k, v)), as_vec(v)), 1e-15);
}

TEST(ScaledDotProduct, IdenticalKeysGiveColumnMean) {
  auto q = rand_tensor({5, 3}, 4), v = rand_tensor({5, 3}, 5);
  auto row = testutil::uniform_values(3, 6);
  Vec kv;
  for (int i = 0; i < 5; ++i) kv.insert(kv.end(), row.begin(), row.end());
  auto out = scaled_dot_product_attention(q, TD({5, 3}, kv), v);
  for (int c = 0; c < 3; ++c) {
    double mean = 0;
    for (int i = 0; i < 5; ++i) mean += v.at(i * 3 + c) / 5;
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(out.at(i * 3 + c), mean, 1e-12);
  }
}

TEST(ScaledDotProduct, DirectFormulaOracle) {
  auto q = rand_tensor({4, 8}, 7), k = rand_tensor({4, 8}, 8), v = rand_tensor({4, 8}, 9);
  AttentionProbe<double> probe;
  auto out = scaled_dot_product_attention(q, k, v, TD(), &probe);
  EXPECT_LT(max_abs_diff(as_vec(out), sa_oracle(as_vec(q), as_vec(k), as_vec(v), 4, 8)), 1e-6);
  for (int i = 0; i < 4; ++i) {
    double s = 0;
    for (int j = 0; j < 4; ++j) s += probe.weights.at(i * 4 + j);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

// ---------------------------------------------------------------- multi-head

TEST(MultiHead, OneHeadIdentityProjectionsIsPlainAttention) {
  ParamStore<double> store(1);
  auto p = make_attention_params(store, "a", 4, 1);
  for (auto* w : {&p.wq, &p.wk, &p.wv, &p.wo}) {
    auto vals = w->mutable_values();
    std::fill(vals.begin(), vals.end(), 0.0);
    for (int i = 0; i < 4; ++i) vals[i * 4 + i] = 1.0;
  }
  auto x = rand_tensor({6, 4}, 10);
  EXPECT_LT(max_abs_diff(as_vec(multi_head_self_attention(x, p)), as_vec(scaled_dot_product_attention(x, x, x))),
            1e-12);
}

TEST(MultiHead, ZeroValueProjectionLeavesOutputBias) {
  ParamStore<double> store(2);
  auto p = make_attention_params(store, "a", 4, 2);
  randomize(store, 3);
  for (auto* t : {&p.wv, &p.bv}) {
    auto vals = t->mutable_values();
    std::fill(vals.begin(), vals.end(), 0.0);
  }
  auto out = multi_head_self_attention(rand_tensor({5, 4}, 11), p);
  for (int i = 0; i < 5; ++i)
    for (int c = 0; c < 4; ++c) EXPECT_NEAR(out.at(i * 4 + c), p.bo.at(c), 1e-15);
}

TEST(MultiHead, TwoHeadsMatchPerHeadOracle) {
  ParamStore<double> store(3);
  auto p = make_attention_params(store, "a", 8, 2);
  randomize(store, 4);
  auto x = rand_tensor({2, 5, 8}, 12);
  auto out = multi_head_self_attention(x, p);
  auto xv = as_vec(x), ov = as_vec(out);
  for (int b = 0; b < 2; ++b) {
    Vec xb(xv.begin() + b * 40, xv.begin() + (b + 1) * 40);
    auto ref = mhsa_oracle(xb, 5, p);
    Vec got(ov.begin() + b * 40, ov.begin() + (b + 1) * 40);
    EXPECT_LT(max_abs_diff(got, ref), 1e-6);
  }
}

TEST(MultiHead, IndivisibleHeadsIsConfigError) {
  ParamStore<double> store(4);
  EXPECT_THROW(make_attention_params(store, "a", 6, 4), ConfigError);
}

// ---------------------------------------------------------------- windows and shifts

TEST(Windows, PartitionCountsAndRoundTrip) {
  auto x = rand_tensor({8, 8, 4}, 13);
  auto w = window_partition(x, 4);
  EXPECT_EQ(w.shape(), (Shape{4, 16, 4}));
  EXPECT_EQ(as_vec(window_reverse(w, x.shape(), 4)), as_vec(x));
  auto one = window_partition(x, 8);
  EXPECT_EQ(as_vec(one), as_vec(x));  // one window keeps row-major order
  EXPECT_EQ(window_partition(TD::zeros({56, 56, 1}), 7).dim(0), 64);
  EXPECT_THROW(window_partition(x, 3), GeometryError);
}

TEST(Windows, PartitionMatchesGatherOracle) {
  auto x = rand_tensor({2, 8, 12, 3}, 14);
  auto wv = as_vec(window_partition(x, 4));
  auto xv = as_vec(x);
  int idx = 0;
  for (int b = 0; b < 2; ++b)
    for (int wi = 0; wi < 2; ++wi)
      for (int wj = 0; wj < 3; ++wj) {
        Vec img(xv.begin() + b * 8 * 12 * 3, xv.begin() + (b + 1) * 8 * 12 * 3);
        auto ref = window_of(img, 12, 3, 4, wi, wj);
        Vec got(wv.begin() + idx * 48, wv.begin() + (idx + 1) * 48);
        EXPECT_EQ(got, ref);
        ++idx;
      }
}

TEST(Shift, ZeroIsIdentityAndInverseRestores) {
  auto x = rand_tensor({8, 8, 2}, 15);
  EXPECT_EQ(as_vec(cyclic_shift(x, 0)), as_vec(x));
  EXPECT_EQ(as_vec(cyclic_shift(cyclic_shift(x, 2), -2)), as_vec(x));
  auto s = cyclic_shift(x, 3);
  // out[i][j] = x[i+3][j+3] wrapped
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j)
      for (int c = 0; c < 2; ++c) EXPECT_EQ(s.at((i * 8 + j) * 2 + c), x.at((((i + 3) % 8) * 8 + (j + 3) % 8) * 2 + c));
  auto zero_mask = build_shift_mask<double>({8, 8, 4, 0});
  for (double v : zero_mask.values()) EXPECT_EQ(v, 0.0);
}

// A token of the rolled grid at (i, j) came from ((i+s) mod h, (j+s) mod w);
// two tokens of one window belong to the same pre-shift region exactly when
// they wrapped around identically on both axes.
Vec region_mask_oracle(int h, int w, int m, int s) {
  const int nw = (h / m) * (w / m), n = m * m, wc = w / m;
  Vec mask(static_cast<std::size_t>(nw) * n * n, 0.0);
  for (int win = 0; win < nw; ++win) {
    const int wi = win / wc, wj = win % wc;
    auto tag = [&](int t) {
      const int i = wi * m + t / m, j = wj * m + t % m;
      return std::pair<bool, bool>{i + s >= h, j + s >= w};
    };
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        if (tag(a) != tag(b)) mask[(static_cast<std::size_t>(win) * n + a) * n + b] = -1e9;
  }
  return mask;
}

TEST(Shift, MaskMatchesRegionOracle) {
  for (auto g : {WindowGeometry{4, 4, 2, 1}, WindowGeometry{8, 8, 4, 2}, WindowGeometry{8, 12, 4, 2},
                 WindowGeometry{14, 14, 7, 3}}) {
    EXPECT_EQ(as_vec(build_shift_mask<double>(g)), region_mask_oracle(g.h, g.w, g.window, g.shift))
        << g.h << "x" << g.w << " M=" << g.window;
  }
  EXPECT_THROW(build_shift_mask<double>({8, 8, 4, 1}), GeometryError);  // shift must be M/2
  EXPECT_THROW(build_shift_mask<double>({8, 6, 4, 2}), GeometryError);
}

TEST(WindowAttention, ShiftZeroIsBitwiseWmsa) {
  ParamStore<double> store(5);
  auto p = make_attention_params(store, "a", 8, 2);
  randomize(store, 6);
  auto x = rand_tensor({2, 8, 8, 8}, 16);
  WindowGeometry g{8, 8, 4, 0};
  EXPECT_EQ(as_vec(sw_msa(x, p, g)), as_vec(w_msa(x, p, g)));
}

TEST(WindowAttention, FullWindowIsGlobalMsa) {
  ParamStore<double> store(7);
  auto p = make_attention_params(store, "a", 8, 2);
  randomize(store, 8);
  auto x = rand_tensor({4, 4, 8}, 17);
  auto global = multi_head_self_attention(ops::reshape(x, {16, 8}), p);
  EXPECT_LT(max_abs_diff(as_vec(w_msa(x, p, {4, 4, 4, 0})), as_vec(global)), 1e-6);
}

TEST(WindowAttention, ShiftedMatchesMaskedOracle) {
  ParamStore<double> store(9);
  auto p = make_attention_params(store, "a", 4, 2);
  randomize(store, 10);
  const int h = 8, w = 8, m = 4, s = 2, c = 4;
  auto x = rand_tensor({h, w, c}, 18);
  auto xv = as_vec(x);
  // roll, attend per window with the oracle mask, unroll
  Vec rolled(xv.size()), merged(xv.size());
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int ch = 0; ch < c; ++ch) rolled[(i * w + j) * c + ch] = xv[(((i + s) % h) * w + (j + s) % w) * c + ch];
  auto mask = region_mask_oracle(h, w, m, s);
  for (int wi = 0; wi < h / m; ++wi)
    for (int wj = 0; wj < w / m; ++wj) {
      const int win = wi * (w / m) + wj;
      Vec wm(mask.begin() + win * 256, mask.begin() + (win + 1) * 256);
      auto o = mhsa_oracle(window_of(rolled, w, c, m, wi, wj), m * m, p, &wm);
      for (int t = 0; t < m * m; ++t)
        for (int ch = 0; ch < c; ++ch) {
          const int i = wi * m + t / m, j = wj * m + t % m;
          merged[((((i + s) % h) * w + (j + s) % w) * c) + ch] = o[t * c + ch];
        }
    }
  EXPECT_LT(max_abs_diff(as_vec(sw_msa(x, p, {h, w, m, s})), merged), 1e-6);
}

TEST(WindowAttention, CrossRegionWeightsVanish) {
  ParamStore<double> store(11);
  auto p = make_attention_params(store, "a", 8, 2);
  const WindowGeometry g{8, 8, 4, 2};
  auto mask = region_mask_oracle(8, 8, 4, 2);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    randomize(store, 100 + trial, -2, 2);
    AttentionProbe<double> probe;
    sw_msa(rand_tensor({8, 8, 8}, 200 + trial, false, -3, 3), p, g, &probe);
    const auto wts = as_vec(probe.weights);  // [nW, heads, 16, 16]
    for (int win = 0; win < 4; ++win)
      for (int hd = 0; hd < 2; ++hd)
        for (int a = 0; a < 16; ++a)
          for (int b = 0; b < 16; ++b)
            if (mask[(win * 16 + a) * 16 + b] != 0) worst = std::max(worst, wts[((win * 2 + hd) * 16 + a) * 16 + b]);
  }
  EXPECT_LT(worst, 1e-6);
}

// ---------------------------------------------------------------- Gaussian axial

TEST(Axial, TableListsRowThenColumn) {
  auto t = axial_table(3, 4);
  EXPECT_EQ(t.length, 6);
  // token (1,2): row 1 then column 2 without itself
  const int tok = 1 * 4 + 2;
  std::vector<std::int64_t> expect = {4, 5, 6, 7, 2, 10};
  std::vector<std::int64_t> got(t.index.begin() + tok * 6, t.index.begin() + (tok + 1) * 6);
  EXPECT_EQ(got, expect);
  // self appears once, at zero distance
  EXPECT_EQ(t.dist2[tok * 6 + 2], 0.0);
}

TEST(Axial, MatchesEnumerationOracle) {
  ParamStore<double> store(12);
  auto p = make_attention_params(store, "g", 8, 2, true);
  randomize(store, 13);
  auto x = rand_tensor({4, 4, 8}, 19);
  EXPECT_LT(max_abs_diff(as_vec(gaussian_axial_attention(x, p)), axial_oracle(as_vec(x), 4, 4, p)), 1e-6);
  auto y = rand_tensor({3, 5, 8}, 20);
  EXPECT_LT(max_abs_diff(as_vec(gaussian_axial_attention(y, p)), axial_oracle(as_vec(y), 3, 5, p)), 1e-6);
}

TEST(Axial, HugeSigmaIsPlainAxial) {
  ParamStore<double> store(14);
  auto p = make_attention_params(store, "g", 4, 1, true);
  randomize(store, 15);
  p.sigma.mutable_values()[0] = 1e9;
  auto x = rand_tensor({4, 4, 4}, 21);
  EXPECT_LT(max_abs_diff(as_vec(gaussian_axial_attention(x, p)), axial_oracle(as_vec(x), 4, 4, p, 1e300)), 1e-4);
}

TEST(Axial, WeightsFallWithDistanceWhenSimilarityIsFlat) {
  ParamStore<double> store(16);
  auto p = make_attention_params(store, "g", 4, 2, true);
  randomize(store, 17);
  for (auto* t : {&p.wq, &p.bq}) {
    auto v = t->mutable_values();
    std::fill(v.begin(), v.end(), 0.0);
  }
  AttentionProbe<double> probe;
  gaussian_axial_attention(rand_tensor({5, 6, 4}, 22), p, &probe);
  auto table = axial_table(5, 6);
  const auto wts = as_vec(probe.weights);  // [1, heads, n, len]
  for (int hd = 0; hd < 2; ++hd)
    for (int tok = 0; tok < 30; ++tok)
      for (int a = 0; a < table.length; ++a)
        for (int b = 0; b < table.length; ++b) {
          const double da = table.dist2[tok * table.length + a], db = table.dist2[tok * table.length + b];
          if (da < db) {
            EXPECT_GE(wts[(hd * 30 + tok) * table.length + a], wts[(hd * 30 + tok) * table.length + b]);
          }
        }
}

TEST(Axial, NonPositiveSigmaIsConfigError) {
  ParamStore<double> store(18);
  auto p = make_attention_params(store, "g", 4, 2, true);
  p.sigma.mutable_values()[1] = 0.0;
  EXPECT_THROW(gaussian_axial_attention(rand_tensor({2, 2, 4}, 1), p), ConfigError);
  auto q = make_attention_params(store, "h", 4, 2);
  EXPECT_THROW(gaussian_axial_attention(rand_tensor({2, 2, 4}, 1), q), ConfigError);
}

// ---------------------------------------------------------------- LGG-SA

TEST(Lgg, ComposedOracle) {
  ParamStore<double> store(19);
  const int h = 8, w = 8, c = 8, pw = 4, heads = 2;
  auto p = make_lgg_params(store, "l", c, heads, pw);
  randomize(store, 20);
  auto x = rand_tensor({h, w, c}, 23);
  auto xv = as_vec(x);

  // local: per-window MSA
  Vec local(xv.size());
  for (int wi = 0; wi < h / pw; ++wi)
    for (int wj = 0; wj < w / pw; ++wj) {
      auto o = mhsa_oracle(window_of(xv, w, c, pw, wi, wj), pw * pw, p.local);
      for (int t = 0; t < pw * pw; ++t)
        for (int ch = 0; ch < c; ++ch) local[((wi * pw + t / pw) * w + wj * pw + t % pw) * c + ch] = o[t * c + ch];
    }
  // pooling: per channel group, softmax over the window positions
  const int gh = h / pw, gw = w / pw, group = c / heads;
  Vec pooled(static_cast<std::size_t>(gh) * gw * c, 0.0);
  for (int g = 0; g < heads; ++g) {
    Vec logits(pw * pw);
    for (int t = 0; t < pw * pw; ++t) logits[t] = p.pool_logits.at(t * heads + g);
    auto wt = softmax_row(logits);
    for (int wi = 0; wi < gh; ++wi)
      for (int wj = 0; wj < gw; ++wj)
        for (int t = 0; t < pw * pw; ++t)
          for (int e = 0; e < group; ++e) {
            const int ch = g * group + e;
            pooled[(wi * gw + wj) * c + ch] += wt[t] * local[((wi * pw + t / pw) * w + wj * pw + t % pw) * c + ch];
          }
  }
  auto global = axial_oracle(pooled, gh, gw, p.global);
  auto up = upsample_oracle(global, gh, gw, c, pw);
  Vec cat;
  for (int t = 0; t < h * w; ++t) {
    cat.insert(cat.end(), local.begin() + t * c, local.begin() + (t + 1) * c);
    cat.insert(cat.end(), up.begin() + t * c, up.begin() + (t + 1) * c);
  }
  auto ref = affine(cat, h * w, 2 * c, p.fuse_w, p.fuse_b);
  EXPECT_LT(max_abs_diff(as_vec(lgg_sa(x, p)), ref), 1e-5);
}

TEST(Lgg, SingleWindowDegenerateGrid) {
  ParamStore<double> store(21);
  auto p = make_lgg_params(store, "l", 4, 1, 4);
  randomize(store, 22);
  auto x = rand_tensor({4, 4, 4}, 24);
  auto local = mhsa_oracle(as_vec(x), 16, p.local);
  EXPECT_LT(max_abs_diff(as_vec(w_msa(x, p.local, {4, 4, 4, 0})), local), 1e-12);
  // on a 1x1 grid the axial attention sees only the token itself
  auto one = rand_tensor({1, 1, 4}, 25);
  auto v = affine(as_vec(one), 1, 4, p.global.wv, p.global.bv);
  EXPECT_LT(max_abs_diff(as_vec(gaussian_axial_attention(one, p.global)), affine(v, 1, 4, p.global.wo, p.global.bo)),
            1e-12);
  EXPECT_EQ(lgg_sa(x, p).shape(), x.shape());
}

TEST(Lgg, ShapeContractAndGeometry) {
  ParamStore<double> store(23);
  auto p = make_lgg_params(store, "l", 8, 2, 4);
  EXPECT_EQ(lgg_sa(rand_tensor({2, 16, 16, 8}, 26), p).shape(), (Shape{2, 16, 16, 8}));
  EXPECT_THROW(lgg_sa(rand_tensor({6, 8, 8}, 27), p), GeometryError);
}

// ---------------------------------------------------------------- external attention


TEST(External, MatchesTwoMatmulOracle) {
  ParamStore<double> store(24);
  auto m = make_external_memory(store, "e", 4, 8);
  randomize(store, 25, -1, 1);
  auto x = rand_tensor({6, 8}, 28);
  AttentionProbe<double> probe;
  auto out = external_attention(x, m, &probe);
  EXPECT_LT(max_abs_diff(as_vec(out), external_oracle(as_vec(x), 6, 8, m)), 1e-6);
  for (int i = 0; i < 6; ++i) {
    double s = 0;
    for (int u = 0; u < 4; ++u) s += probe.weights.at(i * 4 + u);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
  for (int u = 0; u < 4; ++u) {
    double s = 0;
    for (int i = 0; i < 6; ++i) s += probe.stage.at(i * 4 + u);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(External, SingleUnitMapsEveryTokenToItsValueRow) {
  ParamStore<double> store(26);
  auto m = make_external_memory(store, "e", 1, 5);
  randomize(store, 27, -1, 1);
  auto out = external_attention(rand_tensor({2, 7, 5}, 29), m);
  for (int t = 0; t < 14; ++t)
    for (int c = 0; c < 5; ++c) EXPECT_NEAR(out.at(t * 5 + c), m.mv.at(c), 1e-6);
}

TEST(External, WidthMismatchIsConfigError) {
  ParamStore<double> store(28);
  auto m = make_external_memory(store, "e", 4, 8);
  EXPECT_THROW(external_attention(rand_tensor({3, 6}, 1), m), ConfigError);
}

// ---------------------------------------------------------------- gradients

class KernelGrad : public ::testing::TestWithParam<int> {};

TEST_P(KernelGrad, ThroughEveryKernel) {
  const std::uint64_t seed = 300 + 11 * GetParam();
  ParamStore<double> store(seed);
  auto mh = make_attention_params(store, "m", 4, 2);
  auto gw = make_attention_params(store, "g", 4, 2, true);
  auto lg = make_lgg_params(store, "l", 4, 2, 2);
  auto em = make_external_memory(store, "e", 3, 4);
  randomize(store, seed + 1);
  auto r = rand_tensor({1, 4, 4, 4}, seed + 2);
  auto proj = [&](const TD& t) { return ops::sum_all(ops::mul(t, ops::reshape(r, t.shape()))); };
  auto x = rand_tensor({1, 4, 4, 4}, seed + 3, true);

  auto check = [&](const char* name, std::vector<TD> leaves, const std::function<TD()>& fn) {
    std::vector<TD> in = {x};
    in.insert(in.end(), leaves.begin(), leaves.end());
    EXPECT_LE(grad_check([&](const std::vector<TD>&) { return fn(); }, in), 1e-5) << name;
  };
  check("msa", {mh.wq, mh.wk, mh.wv, mh.bo}, [&] { return proj(multi_head_self_attention(ops::reshape(x, {16, 4}), mh)); });
  check("w_msa", {mh.wq, mh.bk}, [&] { return proj(w_msa(x, mh, {4, 4, 2, 0})); });
  check("sw_msa", {mh.wk, mh.wv}, [&] { return proj(sw_msa(x, mh, {4, 4, 2, 1})); });
  check("gwaa", {gw.wq, gw.sigma}, [&] { return proj(gaussian_axial_attention(x, gw)); });
  check("lgg", {lg.pool_logits, lg.global.sigma, lg.fuse_w}, [&] { return proj(lgg_sa(x, lg)); });
  check("external", {em.mk, em.mv}, [&] { return proj(external_attention(ops::reshape(x, {16, 4}), em)); });
}

INSTANTIATE_TEST_SUITE_P(Seeds, KernelGrad, ::testing::Values(0, 1, 2));
