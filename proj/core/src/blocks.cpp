#include "cracknet/blocks.hpp"

#include "cracknet/ops.hpp"

namespace cracknet::blocks {

namespace {
using i64 = std::int64_t;

template <typename T>
void require_map(const Tensor<T>& x, const char* op) {
  if (x.rank() != 4) throw DimensionError(std::string(op) + " expects [B,h,w,C], got " + shape_str(x.shape()));
}

template <typename T, typename Attend>
Tensor<T> prenorm_layer(const Tensor<T>& z, const VitLayerParams<T>& p, Attend&& attend) {
  auto mid = ops::add(attend(apply_norm(z, p.norm1)), z);
  return ops::add(mlp(apply_norm(mid, p.norm2), p.mlp), mid);
}
}  // namespace

template <typename T>
LinearParams<T> make_linear(ParamStore<T>& store, const std::string& name, int in, int out, bool bias) {
  LinearParams<T> p;
  p.w = store.create(name + ".w", {in, out}, Init::TruncNormal);
  if (bias) p.b = store.create(name + ".b", {out}, Init::Zeros);
  return p;
}

template <typename T>
NormParams<T> make_norm(ParamStore<T>& store, const std::string& name, int dim) {
  return {store.create(name + ".gamma", {dim}, Init::Ones), store.create(name + ".beta", {dim}, Init::Zeros)};
}

template <typename T>
MlpParams<T> make_mlp(ParamStore<T>& store, const std::string& name, int dim, int ratio) {
  return {make_linear(store, name + ".fc1", dim, dim * ratio), make_linear(store, name + ".fc2", dim * ratio, dim)};
}

template <typename T>
ConvParams<T> make_conv(ParamStore<T>& store, const std::string& name, int kernel, int cin, int cout) {
  ConvParams<T> p;
  p.w = store.create(name + ".w", {kernel, kernel, cin, cout}, Init::HeUniform, static_cast<i64>(kernel) * kernel * cin);
  p.b = store.create(name + ".b", {cout}, Init::Zeros);
  return p;
}

template <typename T>
ConvParams<T> make_deconv(ParamStore<T>& store, const std::string& name, int kernel, int cin, int cout) {
  ConvParams<T> p;
  p.w = store.create(name + ".w", {kernel, kernel, cout, cin}, Init::HeUniform, static_cast<i64>(kernel) * kernel * cin);
  p.b = store.create(name + ".b", {cout}, Init::Zeros);
  return p;
}

template <typename T>
Tensor<T> apply_linear(const Tensor<T>& x, const LinearParams<T>& p) {
  return ops::linear(x, p.w, p.b);
}

template <typename T>
Tensor<T> apply_norm(const Tensor<T>& x, const NormParams<T>& p) {
  return ops::layer_norm(x, p.gamma, p.beta);
}

template <typename T>
Tensor<T> mlp(const Tensor<T>& x, const MlpParams<T>& p) {
  return apply_linear(ops::gelu(apply_linear(x, p.fc1)), p.fc2);
}

template <typename T>
EmbeddingParams<T> make_embedding(ParamStore<T>& store, const std::string& name, int patch, int in_channels, int dim,
                                  int tokens) {
  EmbeddingParams<T> p;
  p.patch = patch;
  p.proj = store.create(name + ".proj", {static_cast<i64>(patch) * patch * in_channels, dim}, Init::TruncNormal);
  p.pos = store.create(name + ".pos", {tokens, dim}, Init::Zeros);
  return p;
}

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& x, const EmbeddingParams<T>& params) {
  require_map(x, "patch_embed");
  const i64 b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  const i64 p = params.patch;
  if (p <= 0 || h % p || w % p) {
    throw GeometryError("patch_embed: " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by patch " +
                        std::to_string(p));
  }
  const i64 n = (h / p) * (w / p);
  if (params.proj.dim(0) != p * p * c || params.pos.dim(0) != n || params.pos.dim(1) != params.proj.dim(1)) {
    throw DimensionError("patch_embed: projection " + shape_str(params.proj.shape()) + " / position table " +
                         shape_str(params.pos.shape()) + " do not fit input " + shape_str(x.shape()));
  }
  auto patches = x;
  if (p > 1) {
    auto r = ops::reshape(x, Shape{b, h / p, p, w / p, p, c});
    patches = ops::permute(r, {0, 1, 3, 2, 4, 5});
  }
  auto flat = ops::reshape(patches, Shape{b, n, p * p * c});
  return ops::add(ops::linear(flat, params.proj), params.pos);
}

template <typename T>
VitLayerParams<T> make_vit_layer(ParamStore<T>& store, const std::string& name, int dim, int heads, int mlp_ratio) {
  VitLayerParams<T> p;
  p.norm1 = make_norm(store, name + ".norm1", dim);
  p.attn = attention::make_attention_params(store, name + ".attn", dim, heads);
  p.norm2 = make_norm(store, name + ".norm2", dim);
  p.mlp = make_mlp(store, name + ".mlp", dim, mlp_ratio);
  return p;
}

template <typename T>
Tensor<T> vit_layer(const Tensor<T>& z, const VitLayerParams<T>& params) {
  return prenorm_layer(z, params, [&](const Tensor<T>& t) { return attention::multi_head_self_attention(t, params.attn); });
}

template <typename T>
SwinPairParams<T> make_swin_pair(ParamStore<T>& store, const std::string& name, int dim, int heads, int mlp_ratio) {
  return {make_vit_layer(store, name + ".w", dim, heads, mlp_ratio), make_vit_layer(store, name + ".sw", dim, heads, mlp_ratio)};
}

attention::WindowGeometry swin_geometry(int h, int w, int window) {
  attention::WindowGeometry g{h, w, window, window / 2};
  if (h <= window && w <= window) g.shift = 0;
  return g;
}

template <typename T>
Tensor<T> swin_block_pair(const Tensor<T>& z, const SwinPairParams<T>& params, const attention::WindowGeometry& geom) {
  require_map(z, "swin_block_pair");
  attention::WindowGeometry plain = geom;
  plain.shift = 0;
  auto first = prenorm_layer(z, params.regular, [&](const Tensor<T>& t) { return attention::w_msa(t, params.regular.attn, plain); });
  return prenorm_layer(first, params.shifted, [&](const Tensor<T>& t) { return attention::sw_msa(t, params.shifted.attn, geom); });
}

template <typename T>
MergeParams<T> make_merge(ParamStore<T>& store, const std::string& name, int dim) {
  return {make_norm(store, name + ".norm", 4 * dim), make_linear(store, name + ".reduce", 4 * dim, 2 * dim, false)};
}

template <typename T>
Tensor<T> patch_merging(const Tensor<T>& z, const MergeParams<T>& params) {
  require_map(z, "patch_merging");
  const i64 b = z.dim(0), h = z.dim(1), w = z.dim(2), c = z.dim(3);
  if (h % 2 || w % 2) throw GeometryError("patch_merging needs even extents, got " + shape_str(z.shape()));
  auto r = ops::reshape(z, Shape{b, h / 2, 2, w / 2, 2, c});
  auto gathered = ops::reshape(ops::permute(r, {0, 1, 3, 2, 4, 5}), Shape{b, h / 2, w / 2, 4 * c});
  return apply_linear(apply_norm(gathered, params.norm), params.reduce);
}

template <typename T>
ExpandParams<T> make_expand(ParamStore<T>& store, const std::string& name, int dim) {
  if (dim % 2) throw ConfigError("patch expanding needs an even channel count, got " + std::to_string(dim));
  return {make_linear(store, name + ".expand", dim, 2 * dim, false)};
}

template <typename T>
Tensor<T> patch_expanding(const Tensor<T>& z, const ExpandParams<T>& params) {
  require_map(z, "patch_expanding");
  const i64 b = z.dim(0), h = z.dim(1), w = z.dim(2), c = z.dim(3);
  if (c % 2) throw ConfigError("patch expanding needs an even channel count, got " + std::to_string(c));
  auto e = apply_linear(z, params.expand);  // [b,h,w,2c]
  auto r = ops::reshape(e, Shape{b, h, w, 2, 2, c / 2});
  return ops::reshape(ops::permute(r, {0, 1, 3, 2, 4, 5}), Shape{b, 2 * h, 2 * w, c / 2});
}

template <typename T>
ConvBlockParams<T> make_conv_block(ParamStore<T>& store, const std::string& name, int cin, int cout) {
  return {make_conv(store, name + ".conv1", 3, cin, cout), make_conv(store, name + ".conv2", 3, cout, cout)};
}

template <typename T>
Tensor<T> conv_block(const Tensor<T>& x, const ConvBlockParams<T>& params) {
  auto y = ops::relu(ops::conv2d(x, params.conv1.w, params.conv1.b, 1));
  return ops::relu(ops::conv2d(y, params.conv2.w, params.conv2.b, 1));
}

template <typename T>
ConvStemParams<T> make_conv_stem(ParamStore<T>& store, const std::string& name, int in_channels,
                                 const std::vector<int>& widths) {
  ConvStemParams<T> p;
  int cin = in_channels;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    const std::string stage = name + "." + std::to_string(i);
    p.stages.push_back({make_conv_block(store, stage, cin, widths[i]), make_conv(store, stage + ".down", 3, widths[i], widths[i])});
    cin = widths[i];
  }
  return p;
}

template <typename T>
std::vector<Tensor<T>> conv_stem(const Tensor<T>& x, const ConvStemParams<T>& params) {
  require_map(x, "conv_stem");
  const i64 factor = i64{1} << params.stages.size();
  if (x.dim(1) % factor || x.dim(2) % factor) {
    throw GeometryError("conv_stem: input " + shape_str(x.shape()) + " is not divisible by " + std::to_string(factor));
  }
  std::vector<Tensor<T>> outputs;
  auto cur = x;
  for (const auto& stage : params.stages) {
    cur = ops::conv2d(conv_block(cur, stage.block), stage.down.w, stage.down.b, 2);
    outputs.push_back(cur);
  }
  return outputs;
}

template <typename T>
SkipFuseParams<T> make_skip_fuse(ParamStore<T>& store, const std::string& name, int decoder_channels,
                                 int encoder_channels, int out_channels) {
  return {make_linear(store, name + ".proj", decoder_channels + encoder_channels, out_channels)};
}

template <typename T>
Tensor<T> skip_fuse(const Tensor<T>& decoder_map, const Tensor<T>& encoder_map, const SkipFuseParams<T>& params) {
  require_map(decoder_map, "skip_fuse");
  require_map(encoder_map, "skip_fuse");
  if (decoder_map.dim(0) != encoder_map.dim(0) || decoder_map.dim(1) != encoder_map.dim(1) ||
      decoder_map.dim(2) != encoder_map.dim(2)) {
    throw GeometryError("skip_fuse: decoder " + shape_str(decoder_map.shape()) + " and encoder " +
                        shape_str(encoder_map.shape()) + " differ spatially");
  }
  return apply_linear(ops::concat<T>({decoder_map, encoder_map}, -1), params.proj);
}

template <typename T>
MtmPairParams<T> make_mtm_pair(ParamStore<T>& store, const std::string& name, int dim, int heads, int lgg_window,
                               int memory_units, int mlp_ratio) {
  MtmPairParams<T> p;
  p.norm1 = make_norm(store, name + ".norm1", dim);
  p.lgg = attention::make_lgg_params(store, name + ".lgg", dim, heads, lgg_window);
  p.norm2 = make_norm(store, name + ".norm2", dim);
  p.mlp1 = make_mlp(store, name + ".mlp1", dim, mlp_ratio);
  p.norm3 = make_norm(store, name + ".norm3", dim);
  p.memory = attention::make_external_memory(store, name + ".ea", memory_units, dim);
  p.norm4 = make_norm(store, name + ".norm4", dim);
  p.mlp2 = make_mlp(store, name + ".mlp2", dim, mlp_ratio);
  return p;
}

template <typename T>
Tensor<T> mtm_block_pair(const Tensor<T>& z, const MtmPairParams<T>& params) {
  require_map(z, "mtm_block_pair");
  const i64 b = z.dim(0), h = z.dim(1), w = z.dim(2), c = z.dim(3);
  auto a = ops::add(attention::lgg_sa(apply_norm(z, params.norm1), params.lgg), z);
  a = ops::add(mlp(apply_norm(a, params.norm2), params.mlp1), a);
  auto tokens = ops::reshape(apply_norm(a, params.norm3), Shape{b, h * w, c});
  auto ea = ops::reshape(attention::external_attention(tokens, params.memory), z.shape());
  auto e = ops::add(ea, a);
  return ops::add(mlp(apply_norm(e, params.norm4), params.mlp2), e);
}

// ---------------------------------------------------------------- stacks

template <typename T>
Tensor<T> apply_block(const Block<T>& block, const Tensor<T>& x) {
  require_map(x, "block");
  return std::visit(
      [&](const auto& blk) -> Tensor<T> {
        using B = std::decay_t<decltype(blk)>;
        if constexpr (std::is_same_v<B, VitBlock<T>>) {
          auto tokens = ops::reshape(x, Shape{x.dim(0), x.dim(1) * x.dim(2), x.dim(3)});
          return ops::reshape(vit_layer(tokens, blk.params), x.shape());
        } else if constexpr (std::is_same_v<B, SwinBlock<T>>) {
          auto geom = swin_geometry(static_cast<int>(x.dim(1)), static_cast<int>(x.dim(2)), blk.window);
          return swin_block_pair(x, blk.params, geom);
        } else if constexpr (std::is_same_v<B, MtmBlock<T>>) {
          return mtm_block_pair(x, blk.params);
        } else if constexpr (std::is_same_v<B, ConvBlock<T>>) {
          return conv_block(x, blk.params);
        } else if constexpr (std::is_same_v<B, MergeBlock<T>>) {
          return patch_merging(x, blk.params);
        } else {
          return patch_expanding(x, blk.params);
        }
      },
      block);
}

template <typename T>
Shape block_output_shape(const Block<T>& block, const Shape& in) {
  if (in.size() != 4) throw DimensionError("block expects [B,h,w,C], got " + shape_str(in));
  const i64 b = in[0], h = in[1], w = in[2], c = in[3];
  auto need_channels = [&](i64 expected, const char* what) {
    if (c != expected) {
      throw DimensionError(std::string(what) + " expects " + std::to_string(expected) + " channels, got " + shape_str(in));
    }
  };
  return std::visit(
      [&](const auto& blk) -> Shape {
        using B = std::decay_t<decltype(blk)>;
        if constexpr (std::is_same_v<B, VitBlock<T>>) {
          need_channels(blk.params.attn.dim, "vit layer");
          return in;
        } else if constexpr (std::is_same_v<B, SwinBlock<T>>) {
          need_channels(blk.params.regular.attn.dim, "swin pair");
          swin_geometry(static_cast<int>(h), static_cast<int>(w), blk.window).validate();
          return in;
        } else if constexpr (std::is_same_v<B, MtmBlock<T>>) {
          need_channels(blk.params.norm1.gamma.size(), "mtm pair");
          const int p = blk.params.lgg.window;
          if (h % p || w % p) throw GeometryError("mtm pair: grid not divisible by LGG window");
          return in;
        } else if constexpr (std::is_same_v<B, ConvBlock<T>>) {
          need_channels(blk.params.conv1.w.dim(2), "conv block");
          return Shape{b, h, w, blk.params.conv2.w.dim(3)};
        } else if constexpr (std::is_same_v<B, MergeBlock<T>>) {
          need_channels(blk.params.norm.gamma.size() / 4, "patch merging");
          if (h % 2 || w % 2) throw GeometryError("patch merging needs even extents");
          return Shape{b, h / 2, w / 2, 2 * c};
        } else {
          need_channels(blk.params.expand.w.dim(0), "patch expanding");
          return Shape{b, 2 * h, 2 * w, c / 2};
        }
      },
      block);
}

template <typename T>
Tensor<T> BlockStack<T>::forward(const Tensor<T>& x) const {
  auto cur = x;
  for (const auto& blk : blocks_) cur = apply_block(blk, cur);
  return cur;
}

template <typename T>
Shape BlockStack<T>::output_shape(const Shape& in) const {
  Shape cur = in;
  for (const auto& blk : blocks_) cur = block_output_shape(blk, cur);
  return cur;
}

#define CRACKNET_INSTANTIATE_BLOCKS(T)                                                                                 \
  template LinearParams<T> make_linear(ParamStore<T>&, const std::string&, int, int, bool);                            \
  template NormParams<T> make_norm(ParamStore<T>&, const std::string&, int);                                           \
  template MlpParams<T> make_mlp(ParamStore<T>&, const std::string&, int, int);                                        \
  template ConvParams<T> make_conv(ParamStore<T>&, const std::string&, int, int, int);                                 \
  template ConvParams<T> make_deconv(ParamStore<T>&, const std::string&, int, int, int);                               \
  template Tensor<T> apply_linear(const Tensor<T>&, const LinearParams<T>&);                                           \
  template Tensor<T> apply_norm(const Tensor<T>&, const NormParams<T>&);                                               \
  template Tensor<T> mlp(const Tensor<T>&, const MlpParams<T>&);                                                       \
  template EmbeddingParams<T> make_embedding(ParamStore<T>&, const std::string&, int, int, int, int);                  \
  template Tensor<T> patch_embed(const Tensor<T>&, const EmbeddingParams<T>&);                                         \
  template VitLayerParams<T> make_vit_layer(ParamStore<T>&, const std::string&, int, int, int);                        \
  template Tensor<T> vit_layer(const Tensor<T>&, const VitLayerParams<T>&);                                            \
  template SwinPairParams<T> make_swin_pair(ParamStore<T>&, const std::string&, int, int, int);                        \
  template Tensor<T> swin_block_pair(const Tensor<T>&, const SwinPairParams<T>&, const attention::WindowGeometry&);    \
  template MergeParams<T> make_merge(ParamStore<T>&, const std::string&, int);                                         \
  template Tensor<T> patch_merging(const Tensor<T>&, const MergeParams<T>&);                                           \
  template ExpandParams<T> make_expand(ParamStore<T>&, const std::string&, int);                                       \
  template Tensor<T> patch_expanding(const Tensor<T>&, const ExpandParams<T>&);                                        \
  template ConvBlockParams<T> make_conv_block(ParamStore<T>&, const std::string&, int, int);                           \
  template Tensor<T> conv_block(const Tensor<T>&, const ConvBlockParams<T>&);                                          \
  template ConvStemParams<T> make_conv_stem(ParamStore<T>&, const std::string&, int, const std::vector<int>&);         \
  template std::vector<Tensor<T>> conv_stem(const Tensor<T>&, const ConvStemParams<T>&);                               \
  template SkipFuseParams<T> make_skip_fuse(ParamStore<T>&, const std::string&, int, int, int);                        \
  template Tensor<T> skip_fuse(const Tensor<T>&, const Tensor<T>&, const SkipFuseParams<T>&);                          \
  template MtmPairParams<T> make_mtm_pair(ParamStore<T>&, const std::string&, int, int, int, int, int);                \
  template Tensor<T> mtm_block_pair(const Tensor<T>&, const MtmPairParams<T>&);                                        \
  template Tensor<T> apply_block(const Block<T>&, const Tensor<T>&);                                                   \
  template Shape block_output_shape(const Block<T>&, const Shape&);                                                    \
  template class BlockStack<T>;

CRACKNET_INSTANTIATE_BLOCKS(float)
CRACKNET_INSTANTIATE_BLOCKS(double)

}  // namespace cracknet::blocks
