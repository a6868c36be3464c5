#include "cracknet/models.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "cracknet/blocks.hpp"
#include "cracknet/ops.hpp"

namespace cracknet {

namespace {
using i64 = std::int64_t;
using namespace blocks;

std::string dims(int h, int w) { return std::to_string(h) + "x" + std::to_string(w); }

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

void check_heads(int dim, int heads, const std::string& where) {
  require(heads >= 1, where + ": heads must be >= 1");
  require(dim % heads == 0, where + ": " + std::to_string(heads) + " heads do not divide width " + std::to_string(dim));
}

void check_pairs(const std::vector<int>& depths, const std::string& where) {
  for (int d : depths) require(d >= 2 && d % 2 == 0, where + ": block depths come in pairs, got " + std::to_string(d));
}
}  // namespace

std::string arch_name(Arch arch) {
  switch (arch) {
    case Arch::UNet: return "unet";
    case Arch::TransUNet: return "transunet";
    case Arch::SwinUNet: return "swinunet";
    case Arch::MtUNet: return "mtunet";
  }
  return "?";
}

Arch parse_arch(const std::string& name) {
  for (Arch a : {Arch::UNet, Arch::TransUNet, Arch::SwinUNet, Arch::MtUNet})
    if (arch_name(a) == name) return a;
  throw ConfigError("unknown arch '" + name + "' (expected unet, transunet, swinunet, mtunet)");
}

void ModelConfig::validate() const {
  const std::string name = arch_name(arch);
  require(height > 0 && width > 0, name + ": input extent must be positive");
  require(in_channels > 0, name + ": in_channels must be positive");
  require(out_channels == 1, name + ": out_channels must be 1 (binary segmentation)");
  require(mlp_ratio >= 1, name + ": mlp_ratio must be >= 1");
  for (int w : stem_widths) require(w > 0, name + ": stem widths must be positive");

  switch (arch) {
    case Arch::UNet: {
      require(stem_widths.size() >= 2, "unet: needs at least two widths (one stage plus bottleneck)");
      const int f = 1 << (stem_widths.size() - 1);
      require(height % f == 0 && width % f == 0, "unet: input " + dims(height, width) + " must be divisible by " +
                                                      std::to_string(f) + " for " +
                                                      std::to_string(stem_widths.size() - 1) + " pooling steps");
      break;
    }
    case Arch::TransUNet: {
      require(!stem_widths.empty(), "transunet: needs at least one conv stem stage");
      require(depths.size() == 1 && depths[0] >= 1, "transunet: depths must hold one positive layer count");
      require(heads.size() == 1, "transunet: heads must hold one entry");
      require(embed_dim > 0, "transunet: embed_dim must be positive");
      check_heads(embed_dim, heads[0], "transunet");
      const int f = 1 << stem_widths.size();
      require(height % f == 0 && width % f == 0,
              "transunet: input " + dims(height, width) + " must be divisible by " + std::to_string(f) +
                  " (conv stem of " + std::to_string(stem_widths.size()) + " stages)");
      break;
    }
    case Arch::SwinUNet: {
      require(!depths.empty(), "swinunet: depths must not be empty");
      require(heads.size() == depths.size(), "swinunet: heads and depths must have equal length");
      check_pairs(depths, "swinunet");
      require(patch >= 1, "swinunet: patch must be positive");
      require(window >= 1, "swinunet: window must be positive");
      require(embed_dim > 0 && embed_dim % 4 == 0, "swinunet: embed_dim must be a positive multiple of 4");
      const int f = patch << (depths.size() - 1);
      require(height % f == 0 && width % f == 0,
              "swinunet: input " + dims(height, width) + " must be divisible by patch * 2^(stages-1) = " +
                  std::to_string(f));
      for (std::size_t i = 0; i < depths.size(); ++i) {
        const int gh = height / (patch << i), gw = width / (patch << i);
        require(gh % window == 0 && gw % window == 0, "swinunet: stage " + std::to_string(i) + " grid " +
                                                          dims(gh, gw) + " is not divisible by window " +
                                                          std::to_string(window));
        check_heads(embed_dim << i, heads[i], "swinunet stage " + std::to_string(i));
      }
      break;
    }
    case Arch::MtUNet: {
      require(!stem_widths.empty(), "mtunet: needs at least one CNN level");
      require(!depths.empty(), "mtunet: depths must not be empty");
      require(heads.size() == depths.size(), "mtunet: heads and depths must have equal length");
      check_pairs(depths, "mtunet");
      require(embed_dim > 0, "mtunet: embed_dim must be positive");
      require(lgg_window >= 1, "mtunet: lgg_window must be positive");
      require(memory_units >= 1, "mtunet: memory_units must be positive");
      const std::size_t levels = stem_widths.size() + depths.size();
      const int f = 1 << (levels - 1);
      require(height % f == 0 && width % f == 0, "mtunet: input " + dims(height, width) + " must be divisible by " +
                                                      std::to_string(f) + " for " + std::to_string(levels) +
                                                      " resolution levels");
      for (std::size_t i = 0; i < depths.size(); ++i) {
        const int s = 1 << (stem_widths.size() + i);
        const int gh = height / s, gw = width / s;
        require(gh % lgg_window == 0 && gw % lgg_window == 0, "mtunet: MTM level " + std::to_string(i) + " grid " +
                                                                  dims(gh, gw) + " is not divisible by LGG window " +
                                                                  std::to_string(lgg_window));
        check_heads(embed_dim << i, heads[i], "mtunet MTM level " + std::to_string(i));
      }
      break;
    }
  }
}

ModelConfig ModelConfig::preset(Arch arch, Scale scale) {
  ModelConfig c;
  c.arch = arch;
  const bool toy = scale == Scale::Toy;
  c.height = c.width = toy ? 64 : 224;
  switch (arch) {
    case Arch::UNet:
      c.stem_widths = toy ? std::vector<int>{8, 16, 32, 32, 32} : std::vector<int>{32, 64, 128, 256, 512};
      break;
    case Arch::TransUNet:
      c.stem_widths = toy ? std::vector<int>{8, 16, 32, 32} : std::vector<int>{64, 128, 256, 512};
      c.embed_dim = toy ? 32 : 768;
      c.depths = {toy ? 2 : 12};
      c.heads = {toy ? 2 : 12};
      break;
    case Arch::SwinUNet:
      c.patch = 4;
      c.embed_dim = toy ? 32 : 96;
      c.window = toy ? 4 : 7;
      c.depths = toy ? std::vector<int>{2, 2} : std::vector<int>{2, 2, 6, 2};
      c.heads = toy ? std::vector<int>{2, 4} : std::vector<int>{3, 6, 12, 24};
      break;
    case Arch::MtUNet:
      c.stem_widths = toy ? std::vector<int>{8, 16} : std::vector<int>{32, 64};
      c.embed_dim = toy ? 32 : 128;
      c.depths = {2, 2};
      c.heads = toy ? std::vector<int>{2, 4} : std::vector<int>{4, 8};
      c.lgg_window = toy ? 4 : 7;
      c.memory_units = toy ? 32 : 64;
      break;
  }
  return c;
}

// ---------------------------------------------------------------- networks

namespace detail {

template <typename T>
struct Network {
  virtual ~Network() = default;
  virtual Tensor<T> forward(const Tensor<T>& x) const = 0;
};

template <typename T>
Tensor<T> conv(const Tensor<T>& x, const ConvParams<T>& p, int stride = 1) {
  return ops::conv2d(x, p.w, p.b, stride);
}

template <typename T>
Tensor<T> deconv(const Tensor<T>& x, const ConvParams<T>& p) {
  return ops::transposed_conv2d(x, p.w, p.b, 2);
}

template <typename T>
Tensor<T> grid_of(const Tensor<T>& tokens, i64 h, i64 w) {
  return ops::reshape(tokens, Shape{tokens.dim(0), h, w, tokens.dim(2)});
}

// Conv encoder with max-pool down-sampling, 2x2 transposed-conv up-sampling
// and concatenated skips.
template <typename T>
struct UNetNet : Network<T> {
  std::vector<ConvBlockParams<T>> enc;
  std::vector<ConvParams<T>> up;
  std::vector<ConvBlockParams<T>> dec;
  ConvParams<T> head;

  UNetNet(ParamStore<T>& s, const ModelConfig& c) {
    const auto& w = c.stem_widths;
    int cin = c.in_channels;
    for (std::size_t i = 0; i < w.size(); ++i) {
      enc.push_back(make_conv_block(s, "enc" + std::to_string(i), cin, w[i]));
      cin = w[i];
    }
    for (std::size_t j = w.size() - 1; j-- > 0;) {
      up.push_back(make_deconv(s, "up" + std::to_string(j), 2, w[j + 1], w[j]));
      dec.push_back(make_conv_block(s, "dec" + std::to_string(j), 2 * w[j], w[j]));
    }
    head = make_conv(s, "head", 1, w[0], c.out_channels);
  }

  Tensor<T> forward(const Tensor<T>& x) const override {
    std::vector<Tensor<T>> skips;
    auto cur = conv_block(x, enc[0]);
    for (std::size_t i = 1; i < enc.size(); ++i) {
      skips.push_back(cur);
      cur = conv_block(ops::max_pool2x2(cur), enc[i]);
    }
    for (std::size_t k = 0; k < up.size(); ++k) {
      const auto& skip = skips[skips.size() - 1 - k];
      cur = conv_block(ops::concat<T>({deconv(cur, up[k]), skip}, -1), dec[k]);
    }
    return conv(cur, head);
  }
};

// Conv stem -> 1x1-patch embedding -> ViT layers -> bilinear-upsampling
// decoder fed by the stem's skips.
template <typename T>
struct TransUNetNet : Network<T> {
  ConvStemParams<T> stem;
  EmbeddingParams<T> embed;
  BlockStack<T> encoder;
  NormParams<T> enc_norm;
  ConvParams<T> bridge;
  std::vector<SkipFuseParams<T>> fuse;
  std::vector<ConvBlockParams<T>> dec;
  ConvBlockParams<T> top;
  ConvParams<T> head;
  i64 gh, gw;

  TransUNetNet(ParamStore<T>& s, const ModelConfig& c) {
    const auto& w = c.stem_widths;
    const int n = static_cast<int>(w.size());
    gh = c.height >> n;
    gw = c.width >> n;
    stem = make_conv_stem(s, "stem", c.in_channels, w);
    embed = make_embedding(s, "embed", 1, w.back(), c.embed_dim, static_cast<int>(gh * gw));
    for (int l = 0; l < c.depths[0]; ++l)
      encoder.push(VitBlock<T>{make_vit_layer(s, "vit" + std::to_string(l), c.embed_dim, c.heads[0], c.mlp_ratio)});
    enc_norm = make_norm(s, "vit.norm", c.embed_dim);
    bridge = make_conv(s, "bridge", 3, c.embed_dim, w.back());
    int ch = w.back();
    for (int j = n - 2; j >= 0; --j) {
      fuse.push_back(make_skip_fuse(s, "fuse" + std::to_string(j), ch, w[j], w[j]));
      dec.push_back(make_conv_block(s, "dec" + std::to_string(j), w[j], w[j]));
      ch = w[j];
    }
    top = make_conv_block(s, "top", ch, ch);
    head = make_conv(s, "head", 1, ch, c.out_channels);
  }

  Tensor<T> forward(const Tensor<T>& x) const override {
    auto skips = conv_stem(x, stem);
    auto z = encoder.forward(grid_of(patch_embed(skips.back(), embed), gh, gw));
    auto cur = ops::relu(conv(apply_norm(z, enc_norm), bridge));
    for (std::size_t k = 0; k < fuse.size(); ++k) {
      const auto& skip = skips[skips.size() - 2 - k];
      cur = conv_block(skip_fuse(ops::bilinear_upsample(cur, 2), skip, fuse[k]), dec[k]);
    }
    cur = conv_block(ops::bilinear_upsample(cur, 2), top);
    return conv(cur, head);
  }
};

// Patch partition + Swin encoder with merging, mirrored decoder with
// expanding and fused skips, two final 2x expansions, linear head.
template <typename T>
struct SwinUNetNet : Network<T> {
  EmbeddingParams<T> embed;
  std::vector<BlockStack<T>> enc;
  std::vector<MergeParams<T>> merge;
  std::vector<ExpandParams<T>> expand;
  std::vector<SkipFuseParams<T>> fuse;
  std::vector<BlockStack<T>> dec;
  NormParams<T> norm;
  ExpandParams<T> up1, up2;
  LinearParams<T> head;
  i64 gh, gw;

  static BlockStack<T> stage(ParamStore<T>& s, const std::string& name, int dim, int heads, int depth,
                             const ModelConfig& c) {
    BlockStack<T> st;
    for (int k = 0; k < depth / 2; ++k)
      st.push(SwinBlock<T>{make_swin_pair(s, name + "." + std::to_string(k), dim, heads, c.mlp_ratio), c.window});
    return st;
  }

  SwinUNetNet(ParamStore<T>& s, const ModelConfig& c) {
    const int n = static_cast<int>(c.depths.size());
    gh = c.height / c.patch;
    gw = c.width / c.patch;
    embed = make_embedding(s, "embed", c.patch, c.in_channels, c.embed_dim, static_cast<int>(gh * gw));
    for (int i = 0; i < n; ++i) {
      enc.push_back(stage(s, "enc" + std::to_string(i), c.embed_dim << i, c.heads[i], c.depths[i], c));
      if (i + 1 < n) merge.push_back(make_merge(s, "merge" + std::to_string(i), c.embed_dim << i));
    }
    for (int i = n - 2; i >= 0; --i) {
      const int d = c.embed_dim << i;
      expand.push_back(make_expand(s, "expand" + std::to_string(i), 2 * d));
      fuse.push_back(make_skip_fuse(s, "fuse" + std::to_string(i), d, d, d));
      dec.push_back(stage(s, "dec" + std::to_string(i), d, c.heads[i], c.depths[i], c));
    }
    norm = make_norm(s, "norm", c.embed_dim);
    up1 = make_expand(s, "up1", c.embed_dim);
    up2 = make_expand(s, "up2", c.embed_dim / 2);
    head = make_linear(s, "head", c.embed_dim / 4, c.out_channels);
  }

  Tensor<T> forward(const Tensor<T>& x) const override {
    auto cur = grid_of(patch_embed(x, embed), gh, gw);
    std::vector<Tensor<T>> skips;
    for (std::size_t i = 0; i < enc.size(); ++i) {
      cur = enc[i].forward(cur);
      if (i < merge.size()) {
        skips.push_back(cur);
        cur = patch_merging(cur, merge[i]);
      }
    }
    for (std::size_t k = 0; k < expand.size(); ++k) {
      const auto& skip = skips[skips.size() - 1 - k];
      cur = dec[k].forward(skip_fuse(patch_expanding(cur, expand[k]), skip, fuse[k]));
    }
    cur = patch_expanding(patch_expanding(apply_norm(cur, norm), up1), up2);
    return apply_linear(cur, head);
  }
};

// CNN levels at the high resolutions, MTM pairs at the deep ones, stride-2
// conv down / 3x3 transposed-conv up, skip fusion at every level.
template <typename T>
struct MtUNetNet : Network<T> {
  struct Level {
    bool mtm = false;
    int channels = 0;
    ConvParams<T> down;  // undefined at level 0
    ConvBlockParams<T> conv;
    BlockStack<T> blocks;
  };
  struct UpLevel {
    ConvParams<T> up;
    SkipFuseParams<T> fuse;
    ConvBlockParams<T> conv;
    BlockStack<T> blocks;
  };
  std::vector<Level> levels;
  std::vector<UpLevel> ups;  // deepest first
  ConvParams<T> head;

  static BlockStack<T> mtm_stage(ParamStore<T>& s, const std::string& name, int dim, int heads, int depth,
                                 const ModelConfig& c) {
    BlockStack<T> st;
    for (int k = 0; k < depth / 2; ++k)
      st.push(MtmBlock<T>{make_mtm_pair(s, name + "." + std::to_string(k), dim, heads, c.lgg_window, c.memory_units,
                                        c.mlp_ratio)});
    return st;
  }

  MtUNetNet(ParamStore<T>& s, const ModelConfig& c) {
    const int nc = static_cast<int>(c.stem_widths.size());
    const int nm = static_cast<int>(c.depths.size());
    int cin = c.in_channels;
    for (int l = 0; l < nc + nm; ++l) {
      Level lv;
      const std::string name = "level" + std::to_string(l);
      lv.mtm = l >= nc;
      lv.channels = lv.mtm ? (c.embed_dim << (l - nc)) : c.stem_widths[l];
      if (l > 0) lv.down = make_conv(s, name + ".down", 3, cin, lv.channels);
      if (lv.mtm)
        lv.blocks = mtm_stage(s, name, lv.channels, c.heads[l - nc], c.depths[l - nc], c);
      else
        lv.conv = make_conv_block(s, name + ".conv", l == 0 ? cin : lv.channels, lv.channels);
      cin = lv.channels;
      levels.push_back(std::move(lv));
    }
    for (int l = nc + nm - 2; l >= 0; --l) {
      UpLevel u;
      const std::string name = "up" + std::to_string(l);
      const int ch = levels[l].channels;
      u.up = make_deconv(s, name + ".deconv", 3, levels[l + 1].channels, ch);
      u.fuse = make_skip_fuse(s, name + ".fuse", ch, ch, ch);
      if (levels[l].mtm)
        u.blocks = mtm_stage(s, name, ch, c.heads[l - nc], c.depths[l - nc], c);
      else
        u.conv = make_conv_block(s, name + ".conv", ch, ch);
      ups.push_back(std::move(u));
    }
    head = make_conv(s, "head", 1, levels[0].channels, c.out_channels);
  }

  Tensor<T> forward(const Tensor<T>& x) const override {
    std::vector<Tensor<T>> skips;
    auto cur = x;
    for (std::size_t l = 0; l < levels.size(); ++l) {
      const auto& lv = levels[l];
      if (lv.mtm) {
        cur = lv.blocks.forward(conv(cur, lv.down, 2));
      } else {
        if (l > 0) cur = ops::relu(conv(cur, lv.down, 2));
        cur = conv_block(cur, lv.conv);
      }
      skips.push_back(cur);
    }
    for (std::size_t k = 0; k < ups.size(); ++k) {
      const std::size_t l = levels.size() - 2 - k;
      cur = skip_fuse(deconv(cur, ups[k].up), skips[l], ups[k].fuse);
      cur = levels[l].mtm ? ups[k].blocks.forward(cur) : conv_block(cur, ups[k].conv);
    }
    return conv(cur, head);
  }
};

}  // namespace detail

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t seed)
    : config_(config), store_(std::make_shared<ParamStore<T>>(seed)) {
  config_.validate();
  switch (config_.arch) {
    case Arch::UNet: net_ = std::make_shared<detail::UNetNet<T>>(*store_, config_); break;
    case Arch::TransUNet: net_ = std::make_shared<detail::TransUNetNet<T>>(*store_, config_); break;
    case Arch::SwinUNet: net_ = std::make_shared<detail::SwinUNetNet<T>>(*store_, config_); break;
    case Arch::MtUNet: net_ = std::make_shared<detail::MtUNetNet<T>>(*store_, config_); break;
  }
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& batch) const {
  if (batch.rank() != 4 || batch.dim(1) != config_.height || batch.dim(2) != config_.width ||
      batch.dim(3) != config_.in_channels) {
    throw GeometryError(arch_name(config_.arch) + " expects [B," + std::to_string(config_.height) + "," +
                        std::to_string(config_.width) + "," + std::to_string(config_.in_channels) + "], got " +
                        shape_str(batch.shape()));
  }
  return net_->forward(batch);
}

template <typename T>
std::vector<std::uint8_t> predict_mask(const Tensor<T>& logits, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw ContractError("threshold must lie in (0,1)");
  std::vector<std::uint8_t> out(logits.size());
  const auto& v = logits.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(v[i])));
    out[i] = p >= threshold ? 1 : 0;
  }
  return out;
}

// ---------------------------------------------------------------- checkpoints

namespace {
constexpr char kMagic[] = "CRKNET1";
constexpr std::size_t kMagicLen = 7;

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  std::string context = "header";

  void need(std::size_t n) {
    if (pos + n > buf.size()) throw FormatError("checkpoint truncated while reading " + context);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  float f32() {
    std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
};
}  // namespace

template <typename T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
  std::string buf(kMagic, kMagicLen);
  for (const auto& [name, t] : model.params().entries()) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf += name;
    put_u32(buf, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_u32(buf, static_cast<std::uint32_t>(e));
    for (T v : t.values()) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(buf, bits);
    }
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw DataError("failed writing checkpoint " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw DataError("cannot move checkpoint into place at " + path);
}

template <typename T>
void load_checkpoint(Model<T>& model, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();

  Reader r{buf};
  r.need(kMagicLen);
  if (buf.compare(0, kMagicLen, kMagic) != 0) throw FormatError("bad checkpoint magic in " + path);
  r.pos = kMagicLen;

  auto& entries = model.params().entries();
  std::vector<std::vector<T>> staged;
  staged.reserve(entries.size());
  for (const auto& [name, t] : entries) {
    r.context = "tensor '" + name + "'";
    const std::uint32_t len = r.u32();
    r.need(len);
    const std::string stored = buf.substr(r.pos, len);
    r.pos += len;
    if (stored != name) throw FormatError("checkpoint has tensor '" + stored + "' where the model expects '" + name + "'");
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& e : shape) e = r.u32();
    if (shape != t.shape()) {
      throw FormatError("tensor '" + name + "' has extents " + shape_str(shape) + " in the checkpoint but " +
                        shape_str(t.shape()) + " in the model");
    }
    r.need(static_cast<std::size_t>(numel(shape)) * 4);
    std::vector<T> values(static_cast<std::size_t>(numel(shape)));
    for (auto& v : values) v = static_cast<T>(r.f32());
    staged.push_back(std::move(values));
  }
  if (r.pos != buf.size()) throw FormatError("checkpoint " + path + " has trailing data after the last tensor");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto dst = entries[i].second.mutable_values();
    std::copy(staged[i].begin(), staged[i].end(), dst.begin());
  }
}

template class Model<float>;
template class Model<double>;
template std::vector<std::uint8_t> predict_mask(const Tensor<float>&, double);
template std::vector<std::uint8_t> predict_mask(const Tensor<double>&, double);
template void save_checkpoint(const Model<float>&, const std::string&);
template void save_checkpoint(const Model<double>&, const std::string&);
template void load_checkpoint(Model<float>&, const std::string&);
template void load_checkpoint(Model<double>&, const std::string&);

}  // namespace cracknet
