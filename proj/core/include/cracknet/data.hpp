#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cracknet/tensor.hpp"

namespace cracknet::data {

// image: H*W*3 values in [0,1], row-major, channels innermost.
// mask: H*W bytes, 0 or 1.
struct SegmentationSample {
  std::string id;
  int height = 0;
  int width = 0;
  std::vector<float> image;
  std::vector<std::uint8_t> mask;

  void validate() const;  // DataError on extent mismatch or non-binary mask
  std::int64_t crack_pixels() const;
};

// ---------------------------------------------------------------- PNG files

struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;
};

// Converts any PNG colour type to the requested channel count (1 or 3).
RawImage read_png(const std::string& path, int channels);
// Writes through a temporary file and rename.
void write_png(const std::string& path, const RawImage& img);

// Image channels are stored as round(255 v); masks as 0/255.
void save_sample(const SegmentationSample& s, const std::string& images_dir, const std::string& masks_dir);

// Every images_dir/<id>.png paired with masks_dir/<id>.png; mask pixels
// above 127 are crack. Sorted by id. Missing masks or size mismatches raise
// DataError listing every offending stem.
std::vector<SegmentationSample> load_dataset(const std::string& images_dir, const std::string& masks_dir);

// Images only (prediction inputs), sorted by stem. Unreadable files are
// reported in `failures` as "stem: reason" instead of throwing.
std::vector<SegmentationSample> load_images(const std::string& images_dir, std::vector<std::string>* failures);

// ---------------------------------------------------------------- tiling, splits, batches

// Start offsets of a tile x tile grid along one axis; the last tile is
// anchored to the far edge when the stride does not land on it.
std::vector<int> tile_offsets(int extent, int tile, int stride);

// Tiles are named <id>_y<row>_x<col>.
std::vector<SegmentationSample> tile_crop(const SegmentationSample& s, int tile = 224, int stride = 224);

struct FoldSplit {
  int fold = 1;
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::uint64_t seed = 0;
};

// Seeded shuffle of the ids; |train| = floor(ratio * n). Fold 1 validates on
// the last n - |train| shuffled ids, fold 2 on the block just before them.
FoldSplit split_folds(const std::vector<std::string>& ids, double ratio, int fold, std::uint64_t seed);

// Per-epoch shuffle keyed by (seed, epoch); the last batch may be short.
std::vector<std::vector<std::string>> batches(const std::vector<std::string>& ids, int batch_size, std::uint64_t seed,
                                              std::int64_t epoch);

// ---------------------------------------------------------------- synthetic cracks

enum class Noise { None, Shadow, Blotch };
Noise parse_noise(const std::string& name);
std::string noise_name(Noise noise);

// Textured grey background with 1-3 dark random-walk cracks (width 1-4) and
// an exact mask. Shadows and blotches are painted on a separate layer and
// never reach the mask. Sample i depends only on (seed, i). Crack coverage
// is kept within [0.2%, 8%] of the pixels.
std::vector<SegmentationSample> synth_cracks(int n, int size, std::uint64_t seed, Noise noise = Noise::None);

inline constexpr double kMinCrackFraction = 0.002;
inline constexpr double kMaxCrackFraction = 0.08;

// ---------------------------------------------------------------- batching into tensors

// [B,H,W,3] images and [B,H,W,1] masks (0/1) for the listed samples.
template <typename T>
Tensor<T> stack_images(const std::vector<const SegmentationSample*>& samples);
template <typename T>
Tensor<T> stack_masks(const std::vector<const SegmentationSample*>& samples);

// ---------------------------------------------------------------- manifest

struct ManifestRow {
  std::string id;
  std::string split;  // train / val / test / all
  int fold = 0;       // 0 when not assigned
};

void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_manifest(const std::string& path);

}  // namespace cracknet::data
