#include "cracknet/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numbers>

#include "cracknet/io.hpp"
#include "cracknet/random.hpp"

namespace cracknet::data {

namespace fs = std::filesystem;

void SegmentationSample::validate() const {
  const auto px = static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  if (height <= 0 || width <= 0 || image.size() != px * 3 || mask.size() != px) {
    throw DataError("sample '" + id + "': image/mask extents disagree with " + std::to_string(height) + "x" +
                    std::to_string(width));
  }
  for (auto m : mask)
    if (m > 1) throw DataError("sample '" + id + "': mask is not binary");
}

std::int64_t SegmentationSample::crack_pixels() const {
  return std::count(mask.begin(), mask.end(), std::uint8_t{1});
}

// ---------------------------------------------------------------- PNG

RawImage read_png(const std::string& path, int channels) {
  if (channels != 1 && channels != 3) throw ContractError("read_png: channels must be 1 or 3");
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw DataError(path + ": " + img.message);
  }
  img.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  RawImage out;
  out.width = static_cast<int>(img.width);
  out.height = static_cast<int>(img.height);
  out.channels = channels;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw DataError(path + ": " + msg);
  }
  return out;
}

void write_png(const std::string& path, const RawImage& raw) {
  if (raw.channels != 1 && raw.channels != 3) throw ContractError("write_png: channels must be 1 or 3");
  if (raw.pixels.size() != static_cast<std::size_t>(raw.width) * raw.height * raw.channels) {
    throw ContractError("write_png: pixel buffer does not match extents");
  }
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(raw.width);
  img.height = static_cast<png_uint_32>(raw.height);
  img.format = raw.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  png_alloc_size_t bytes = 0;
  if (!png_image_write_to_memory(&img, nullptr, &bytes, 0, raw.pixels.data(), 0, nullptr)) {
    throw DataError(path + ": " + img.message);
  }
  std::string buf(bytes, '\0');
  if (!png_image_write_to_memory(&img, buf.data(), &bytes, 0, raw.pixels.data(), 0, nullptr)) {
    throw DataError(path + ": " + img.message);
  }
  buf.resize(bytes);
  io::write_file_atomic(path, buf);
}

void save_sample(const SegmentationSample& s, const std::string& images_dir, const std::string& masks_dir) {
  s.validate();
  RawImage img{s.width, s.height, 3, {}};
  img.pixels.resize(s.image.size());
  for (std::size_t i = 0; i < s.image.size(); ++i)
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(s.image[i], 0.0f, 1.0f) * 255.0f));
  RawImage mask{s.width, s.height, 1, {}};
  mask.pixels.resize(s.mask.size());
  for (std::size_t i = 0; i < s.mask.size(); ++i) mask.pixels[i] = s.mask[i] ? 255 : 0;
  fs::create_directories(images_dir);
  fs::create_directories(masks_dir);
  write_png((fs::path(images_dir) / (s.id + ".png")).string(), img);
  write_png((fs::path(masks_dir) / (s.id + ".png")).string(), mask);
}

namespace {
std::vector<std::string> png_stems(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir);
  std::vector<std::string> stems;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") stems.push_back(e.path().stem().string());
  }
  std::sort(stems.begin(), stems.end());
  return stems;
}

SegmentationSample from_rgb(const std::string& id, const RawImage& img) {
  SegmentationSample s;
  s.id = id;
  s.height = img.height;
  s.width = img.width;
  s.image.resize(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) s.image[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  return s;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (const auto& s : v) out += (out.empty() ? "" : "; ") + s;
  return out;
}
}  // namespace

std::vector<SegmentationSample> load_dataset(const std::string& images_dir, const std::string& masks_dir) {
  std::vector<SegmentationSample> out;
  std::vector<std::string> problems;
  for (const auto& stem : png_stems(images_dir)) {
    const auto mask_path = fs::path(masks_dir) / (stem + ".png");
    if (!fs::exists(mask_path)) {
      problems.push_back(stem + ": missing mask");
      continue;
    }
    try {
      auto s = from_rgb(stem, read_png((fs::path(images_dir) / (stem + ".png")).string(), 3));
      auto m = read_png(mask_path.string(), 1);
      if (m.width != s.width || m.height != s.height) {
        problems.push_back(stem + ": image " + std::to_string(s.height) + "x" + std::to_string(s.width) + " vs mask " +
                           std::to_string(m.height) + "x" + std::to_string(m.width));
        continue;
      }
      s.mask.resize(m.pixels.size());
      for (std::size_t i = 0; i < m.pixels.size(); ++i) s.mask[i] = m.pixels[i] > 127 ? 1 : 0;
      out.push_back(std::move(s));
    } catch (const DataError& e) {
      problems.push_back(stem + ": " + e.what());
    }
  }
  if (!problems.empty()) throw DataError("dataset errors: " + join(problems));
  return out;
}

std::vector<SegmentationSample> load_images(const std::string& images_dir, std::vector<std::string>* failures) {
  std::vector<SegmentationSample> out;
  for (const auto& stem : png_stems(images_dir)) {
    try {
      auto s = from_rgb(stem, read_png((fs::path(images_dir) / (stem + ".png")).string(), 3));
      s.mask.assign(static_cast<std::size_t>(s.height) * s.width, 0);
      out.push_back(std::move(s));
    } catch (const DataError& e) {
      if (failures) failures->push_back(stem + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------- tiling

std::vector<int> tile_offsets(int extent, int tile, int stride) {
  if (tile <= 0 || stride <= 0) throw ContractError("tile and stride must be positive");
  if (stride > tile) {
    throw ContractError("stride " + std::to_string(stride) + " > tile " + std::to_string(tile) + " would leave gaps");
  }
  if (tile > extent) {
    throw ContractError("tile " + std::to_string(tile) + " exceeds extent " + std::to_string(extent));
  }
  std::vector<int> offs;
  for (int o = 0; o + tile <= extent; o += stride) offs.push_back(o);
  if (offs.back() + tile < extent) offs.push_back(extent - tile);
  return offs;
}

std::vector<SegmentationSample> tile_crop(const SegmentationSample& s, int tile, int stride) {
  s.validate();
  const auto ys = tile_offsets(s.height, tile, stride);
  const auto xs = tile_offsets(s.width, tile, stride);
  std::vector<SegmentationSample> out;
  for (int y0 : ys) {
    for (int x0 : xs) {
      SegmentationSample t;
      t.id = s.id + "_y" + std::to_string(y0) + "_x" + std::to_string(x0);
      t.height = t.width = tile;
      t.image.resize(static_cast<std::size_t>(tile) * tile * 3);
      t.mask.resize(static_cast<std::size_t>(tile) * tile);
      for (int y = 0; y < tile; ++y) {
        const std::size_t src = static_cast<std::size_t>(y0 + y) * s.width + x0;
        std::copy_n(s.image.begin() + static_cast<std::ptrdiff_t>(src * 3), tile * 3,
                    t.image.begin() + static_cast<std::ptrdiff_t>(y) * tile * 3);
        std::copy_n(s.mask.begin() + static_cast<std::ptrdiff_t>(src), tile,
                    t.mask.begin() + static_cast<std::ptrdiff_t>(y) * tile);
      }
      out.push_back(std::move(t));
    }
  }
  return out;
}

// ---------------------------------------------------------------- splits

FoldSplit split_folds(const std::vector<std::string>& ids, double ratio, int fold, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0,1), got " + std::to_string(ratio));
  if (fold != 1 && fold != 2) throw ConfigError("fold must be 1 or 2, got " + std::to_string(fold));
  if (ids.empty()) throw ContractError("split_folds: empty dataset");
  const std::size_t n = ids.size();
  const auto n_train = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 1e-9));
  const std::size_t n_val = n - n_train;
  if (fold == 2 && 2 * n_val > n) {
    throw ConfigError("fold 2 needs two disjoint validation blocks; ratio " + std::to_string(ratio) + " is too small");
  }
  std::vector<std::string> order = ids;
  std::sort(order.begin(), order.end());
  Rng rng(mix_seed(seed, 0xF01D));
  rng.shuffle(order.begin(), order.end());

  const std::size_t val_begin = fold == 1 ? n_train : n_train - n_val;
  FoldSplit split;
  split.fold = fold;
  split.seed = seed;
  for (std::size_t i = 0; i < n; ++i) {
    (i >= val_begin && i < val_begin + n_val ? split.val : split.train).push_back(order[i]);
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  return split;
}

std::vector<std::vector<std::string>> batches(const std::vector<std::string>& ids, int batch_size, std::uint64_t seed,
                                              std::int64_t epoch) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  std::vector<std::string> order = ids;
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(epoch), 0xBA7C));
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<std::string>> out;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

// ---------------------------------------------------------------- synthetic cracks

Noise parse_noise(const std::string& name) {
  if (name == "none") return Noise::None;
  if (name == "shadow") return Noise::Shadow;
  if (name == "blotch") return Noise::Blotch;
  throw ConfigError("unknown noise '" + name + "' (valid: none, shadow, blotch)");
}

std::string noise_name(Noise noise) {
  switch (noise) {
    case Noise::None: return "none";
    case Noise::Shadow: return "shadow";
    case Noise::Blotch: return "blotch";
  }
  return "?";
}

namespace {
struct Pt {
  double x, y;
};

double seg_dist(Pt p, Pt a, Pt b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

void raster_polyline(const std::vector<Pt>& pts, double width, int size, std::vector<std::uint8_t>& mask) {
  const double r = width / 2.0;
  for (std::size_t k = 0; k + 1 < pts.size(); ++k) {
    const Pt a = pts[k], b = pts[k + 1];
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - r - 1)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + r + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - r - 1)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + r + 1)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (seg_dist({x + 0.5, y + 0.5}, a, b) <= r) mask[static_cast<std::size_t>(y) * size + x] = 1;
  }
}

std::vector<Pt> random_walk(Rng& rng, int size) {
  const double step = std::max(2.0, size / 24.0);
  const int steps = std::max(2, static_cast<int>(std::lround(rng.uniform(0.35, 0.8) * size / step)));
  Pt p{rng.uniform(0.1, 0.9) * size, rng.uniform(0.1, 0.9) * size};
  double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
  std::vector<Pt> pts{p};
  for (int s = 0; s < steps; ++s) {
    theta += rng.uniform(-0.5, 0.5);
    Pt q{p.x + step * std::cos(theta), p.y + step * std::sin(theta)};
    if (q.x < 0 || q.x > size) {
      theta = std::numbers::pi - theta;
      q.x = std::clamp(q.x, 0.0, static_cast<double>(size));
    }
    if (q.y < 0 || q.y > size) {
      theta = -theta;
      q.y = std::clamp(q.y, 0.0, static_cast<double>(size));
    }
    pts.push_back(q);
    p = q;
  }
  return pts;
}

SegmentationSample synth_one(int index, int size, std::uint64_t seed, Noise noise) {
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(index), 0x5EC7));
  const std::size_t px = static_cast<std::size_t>(size) * size;

  // crack layer first, so the coverage bound can be enforced by redrawing
  std::vector<std::uint8_t> mask(px, 0);
  const double lo = kMinCrackFraction * static_cast<double>(px), hi = kMaxCrackFraction * static_cast<double>(px);
  bool ok = false;
  for (int attempt = 0; attempt < 64 && !ok; ++attempt) {
    std::fill(mask.begin(), mask.end(), 0);
    const int cracks = rng.uniform_int(1, 3);
    for (int c = 0; c < cracks; ++c) raster_polyline(random_walk(rng, size), rng.uniform_int(1, 4), size, mask);
    const auto count = static_cast<double>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
    ok = count >= lo && count <= hi;
  }
  if (!ok) {
    // thin diagonal; within bounds for every size from 32 up to several hundred
    std::fill(mask.begin(), mask.end(), 0);
    raster_polyline({{0.0, 0.0}, {double(size), double(size)}}, 1.0, size, mask);
  }

  // background texture
  const double base = rng.uniform(0.45, 0.65);
  const double tint[3] = {rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02)};
  const double fx = rng.uniform(0.5, 3.0) * 2.0 * std::numbers::pi / size;
  const double fy = rng.uniform(0.5, 3.0) * 2.0 * std::numbers::pi / size;
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  std::vector<double> gray(px);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      gray[static_cast<std::size_t>(y) * size + x] =
          base + 0.03 * std::sin(fx * x + fy * y + phase) + rng.uniform(-0.05, 0.05);

  if (noise == Noise::Blotch) {
    const int blotches = rng.uniform_int(1, 3);
    for (int k = 0; k < blotches; ++k) {
      const double cx = rng.uniform(0.0, size), cy = rng.uniform(0.0, size);
      const double rx = rng.uniform(0.05, 0.15) * size, ry = rng.uniform(0.05, 0.15) * size;
      const double dark = rng.uniform(0.2, 0.35);
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          const double d = std::hypot((x + 0.5 - cx) / rx, (y + 0.5 - cy) / ry);
          const double a = std::clamp(1.5 - d, 0.0, 1.0);  // soft rim
          auto& g = gray[static_cast<std::size_t>(y) * size + x];
          g = (1 - a) * g + a * dark;
        }
      }
    }
  }

  for (std::size_t i = 0; i < px; ++i)
    if (mask[i]) gray[i] = rng.uniform(0.08, 0.25);

  if (noise == Noise::Shadow) {
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double off = rng.uniform(-0.2, 0.2) * size;
    const double depth = rng.uniform(0.25, 0.45);
    const double soft = 0.1 * size;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const double s = (x - size / 2.0) * std::cos(phi) + (y - size / 2.0) * std::sin(phi) - off;
        const double t = std::clamp(s / soft + 0.5, 0.0, 1.0);
        gray[static_cast<std::size_t>(y) * size + x] *= 1.0 - depth * t * t * (3 - 2 * t);
      }
    }
  }

  SegmentationSample s;
  char id[32];
  std::snprintf(id, sizeof id, "synth_%05d", index);
  s.id = id;
  s.height = s.width = size;
  s.mask = std::move(mask);
  s.image.resize(px * 3);
  for (std::size_t i = 0; i < px; ++i) {
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(gray[i] + tint[c], 0.0, 1.0);
      s.image[i * 3 + c] = static_cast<float>(std::lround(v * 255.0)) / 255.0f;  // 8-bit exact
    }
  }
  return s;
}
}  // namespace

std::vector<SegmentationSample> synth_cracks(int n, int size, std::uint64_t seed, Noise noise) {
  if (size < 32) throw ContractError("synth_cracks: size must be >= 32, got " + std::to_string(size));
  std::vector<SegmentationSample> out;
  out.reserve(static_cast<std::size_t>(std::max(n, 0)));
  for (int i = 0; i < n; ++i) out.push_back(synth_one(i, size, seed, noise));
  return out;
}

// ---------------------------------------------------------------- tensors

namespace {
void check_stack(const std::vector<const SegmentationSample*>& samples) {
  if (samples.empty()) throw ContractError("cannot stack an empty batch");
  for (const auto* s : samples) {
    if (s->height != samples[0]->height || s->width != samples[0]->width) {
      throw GeometryError("batch mixes extents: '" + samples[0]->id + "' and '" + s->id + "'");
    }
  }
}
}  // namespace

template <typename T>
Tensor<T> stack_images(const std::vector<const SegmentationSample*>& samples) {
  check_stack(samples);
  const auto h = samples[0]->height, w = samples[0]->width;
  std::vector<T> v;
  v.reserve(samples.size() * static_cast<std::size_t>(h) * w * 3);
  for (const auto* s : samples) v.insert(v.end(), s->image.begin(), s->image.end());
  return Tensor<T>(Shape{static_cast<std::int64_t>(samples.size()), h, w, 3}, std::move(v));
}

template <typename T>
Tensor<T> stack_masks(const std::vector<const SegmentationSample*>& samples) {
  check_stack(samples);
  const auto h = samples[0]->height, w = samples[0]->width;
  std::vector<T> v;
  v.reserve(samples.size() * static_cast<std::size_t>(h) * w);
  for (const auto* s : samples)
    for (auto m : s->mask) v.push_back(static_cast<T>(m));
  return Tensor<T>(Shape{static_cast<std::int64_t>(samples.size()), h, w, 1}, std::move(v));
}

template Tensor<float> stack_images(const std::vector<const SegmentationSample*>&);
template Tensor<double> stack_images(const std::vector<const SegmentationSample*>&);
template Tensor<float> stack_masks(const std::vector<const SegmentationSample*>&);
template Tensor<double> stack_masks(const std::vector<const SegmentationSample*>&);

// ---------------------------------------------------------------- manifest

void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
  std::string out = "id,split,fold\n";
  for (const auto& r : rows) {
    if (r.id.find(',') != std::string::npos) throw DataError("id '" + r.id + "' contains a comma");
    out += io::csv_row({r.id, r.split, std::to_string(r.fold)});
  }
  io::write_file_atomic(path, out);
}

std::vector<ManifestRow> read_manifest(const std::string& path) {
  const auto t = io::read_csv(path);
  const auto ci = t.column("id"), cs = t.column("split"), cf = t.column("fold");
  std::vector<ManifestRow> rows;
  for (const auto& r : t.rows) {
    try {
      rows.push_back({r[ci], r[cs], std::stoi(r[cf])});
    } catch (const std::exception&) {
      throw DataError(path + ": bad fold value '" + r[cf] + "'");
    }
  }
  return rows;
}

}  // namespace cracknet::data
