#pragma once

#include <string>
#include <variant>
#include <vector>

#include "cracknet/attention.hpp"
#include "cracknet/params.hpp"

// Composite network blocks. Feature maps are [B,h,w,C]; token sequences are
// [B,N,D].
namespace cracknet::blocks {

template <typename T>
struct LinearParams {
  Tensor<T> w;  // [in, out]
  Tensor<T> b;  // [out] or undefined
};

template <typename T>
struct NormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

template <typename T>
struct MlpParams {
  LinearParams<T> fc1;
  LinearParams<T> fc2;
};

template <typename T>
struct ConvParams {
  Tensor<T> w;  // [k, k, cin, cout]  (transposed conv: [k, k, cout, cin])
  Tensor<T> b;
};

template <typename T>
LinearParams<T> make_linear(ParamStore<T>& store, const std::string& name, int in, int out, bool bias = true);
template <typename T>
NormParams<T> make_norm(ParamStore<T>& store, const std::string& name, int dim);
template <typename T>
MlpParams<T> make_mlp(ParamStore<T>& store, const std::string& name, int dim, int ratio = 4);
template <typename T>
ConvParams<T> make_conv(ParamStore<T>& store, const std::string& name, int kernel, int cin, int cout);
template <typename T>
ConvParams<T> make_deconv(ParamStore<T>& store, const std::string& name, int kernel, int cin, int cout);

template <typename T>
Tensor<T> apply_linear(const Tensor<T>& x, const LinearParams<T>& p);
template <typename T>
Tensor<T> apply_norm(const Tensor<T>& x, const NormParams<T>& p);
// linear -> GELU -> linear
template <typename T>
Tensor<T> mlp(const Tensor<T>& x, const MlpParams<T>& p);

// ---------------------------------------------------------------- embedding

template <typename T>
struct EmbeddingParams {
  int patch = 1;
  Tensor<T> proj;  // [P*P*Cin, D]
  Tensor<T> pos;   // [N, D]
};

template <typename T>
EmbeddingParams<T> make_embedding(ParamStore<T>& store, const std::string& name, int patch, int in_channels, int dim,
                                  int tokens);

// [B,H,W,C] -> [B, HW/P^2, D]: flattened P x P patches (row-major, channels
// innermost) projected by E, plus the position table.
template <typename T>
Tensor<T> patch_embed(const Tensor<T>& x, const EmbeddingParams<T>& params);

// ---------------------------------------------------------------- transformer layers

// Pre-norm transformer layer: z' = A(LN(z)) + z; out = MLP(LN(z')) + z'.
template <typename T>
struct VitLayerParams {
  NormParams<T> norm1;
  attention::AttentionParams<T> attn;
  NormParams<T> norm2;
  MlpParams<T> mlp;
};

template <typename T>
VitLayerParams<T> make_vit_layer(ParamStore<T>& store, const std::string& name, int dim, int heads, int mlp_ratio = 4);

// z [B,N,D] (or [N,D])
template <typename T>
Tensor<T> vit_layer(const Tensor<T>& z, const VitLayerParams<T>& params);

template <typename T>
struct SwinPairParams {
  VitLayerParams<T> regular;  // W-MSA block
  VitLayerParams<T> shifted;  // SW-MSA block
};

template <typename T>
SwinPairParams<T> make_swin_pair(ParamStore<T>& store, const std::string& name, int dim, int heads, int mlp_ratio = 4);

// Window geometry used by a Swin pair on an h x w grid: shift is window/2,
// or 0 when a single window covers the grid (nothing to shift across).
attention::WindowGeometry swin_geometry(int h, int w, int window);

// z [B,h,w,D]; the first block attends within windows, the second within
// windows shifted by geom.shift.
template <typename T>
Tensor<T> swin_block_pair(const Tensor<T>& z, const SwinPairParams<T>& params, const attention::WindowGeometry& geom);

template <typename T>
struct MergeParams {
  NormParams<T> norm;      // over 4D
  LinearParams<T> reduce;  // 4D -> 2D, no bias
};

template <typename T>
MergeParams<T> make_merge(ParamStore<T>& store, const std::string& name, int dim);

// [B,h,w,D] -> [B,h/2,w/2,2D]. The 2x2 neighbourhood is concatenated in
// row-major order: (0,0), (0,1), (1,0), (1,1).
template <typename T>
Tensor<T> patch_merging(const Tensor<T>& z, const MergeParams<T>& params);

template <typename T>
struct ExpandParams {
  LinearParams<T> expand;  // D -> 2D, no bias
};

template <typename T>
ExpandParams<T> make_expand(ParamStore<T>& store, const std::string& name, int dim);

// [B,h,w,D] -> [B,2h,2w,D/2]. Channel block k of the 2D projection lands at
// offset (k/2, k%2) of the token's 2x2 output block.
template <typename T>
Tensor<T> patch_expanding(const Tensor<T>& z, const ExpandParams<T>& params);

// ---------------------------------------------------------------- convolutional parts

template <typename T>
struct ConvBlockParams {
  ConvParams<T> conv1;
  ConvParams<T> conv2;
};

template <typename T>
ConvBlockParams<T> make_conv_block(ParamStore<T>& store, const std::string& name, int cin, int cout);

// Two 3x3 same convolutions, each followed by ReLU.
template <typename T>
Tensor<T> conv_block(const Tensor<T>& x, const ConvBlockParams<T>& params);

template <typename T>
struct StemStageParams {
  ConvBlockParams<T> block;
  ConvParams<T> down;  // 3x3, stride 2
};

template <typename T>
struct ConvStemParams {
  std::vector<StemStageParams<T>> stages;
};

template <typename T>
ConvStemParams<T> make_conv_stem(ParamStore<T>& store, const std::string& name, int in_channels,
                                 const std::vector<int>& widths);

// One output per stage at 1/2, 1/4, ... resolution.
template <typename T>
std::vector<Tensor<T>> conv_stem(const Tensor<T>& x, const ConvStemParams<T>& params);

template <typename T>
struct SkipFuseParams {
  LinearParams<T> proj;  // [Cd + Ce, Cout]
};

template <typename T>
SkipFuseParams<T> make_skip_fuse(ParamStore<T>& store, const std::string& name, int decoder_channels,
                                 int encoder_channels, int out_channels);

// Channel concat (decoder first) followed by a 1x1 projection.
template <typename T>
Tensor<T> skip_fuse(const Tensor<T>& decoder_map, const Tensor<T>& encoder_map, const SkipFuseParams<T>& params);

// ---------------------------------------------------------------- mixed transformer

template <typename T>
struct MtmPairParams {
  NormParams<T> norm1;
  attention::LggParams<T> lgg;
  NormParams<T> norm2;
  MlpParams<T> mlp1;
  NormParams<T> norm3;
  attention::ExternalMemory<T> memory;
  NormParams<T> norm4;
  MlpParams<T> mlp2;
};

template <typename T>
MtmPairParams<T> make_mtm_pair(ParamStore<T>& store, const std::string& name, int dim, int heads, int lgg_window,
                               int memory_units, int mlp_ratio = 4);

// z [B,h,w,C]: pre-norm residual LGG-SA + MLP, then pre-norm residual
// external attention (over all h*w tokens) + MLP.
template <typename T>
Tensor<T> mtm_block_pair(const Tensor<T>& z, const MtmPairParams<T>& params);

// ---------------------------------------------------------------- block stacks

template <typename T>
struct VitBlock {
  VitLayerParams<T> params;
};
template <typename T>
struct SwinBlock {
  SwinPairParams<T> params;
  int window;
};
template <typename T>
struct MtmBlock {
  MtmPairParams<T> params;
};
template <typename T>
struct ConvBlock {
  ConvBlockParams<T> params;
  int out_channels;
};
template <typename T>
struct MergeBlock {
  MergeParams<T> params;
};
template <typename T>
struct ExpandBlock {
  ExpandParams<T> params;
};

template <typename T>
using Block = std::variant<VitBlock<T>, SwinBlock<T>, MtmBlock<T>, ConvBlock<T>, MergeBlock<T>, ExpandBlock<T>>;

// Sequential chain of blocks over [B,h,w,C] feature maps. ViT layers see the
// map flattened to h*w tokens.
template <typename T>
class BlockStack {
 public:
  void push(Block<T> block) { blocks_.push_back(std::move(block)); }
  std::size_t size() const { return blocks_.size(); }
  bool empty() const { return blocks_.empty(); }
  const std::vector<Block<T>>& blocks() const { return blocks_; }

  Tensor<T> forward(const Tensor<T>& x) const;
  // Output shape for an input shape, without running anything; throws the
  // same geometry errors forward() would.
  Shape output_shape(const Shape& in) const;

 private:
  std::vector<Block<T>> blocks_;
};

template <typename T>
Tensor<T> apply_block(const Block<T>& block, const Tensor<T>& x);
template <typename T>
Shape block_output_shape(const Block<T>& block, const Shape& in);

}  // namespace cracknet::blocks
