#pragma once

// Patch datasets: extraction, augmentation, whitening, stratified splits,
// the synthetic six-class generator and the on-disk layout
//
//   root/manifest.json
//   root/<split>/<class>/<patch_id>.png

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ppks/image.hpp"
#include "ppks/tensor.hpp"

namespace ppks {

struct DatasetManifest {
  std::vector<std::string> classes{"AU", "BRU", "CYS", "STR", "WD", "WW"};
  int patches_per_class = 300;
  int patch_size = 64;
  double split = 0.8;
  int augmentation_factor = 4;
  std::uint64_t seed = 0;
  int patches_per_source = 10;
  double perspective_rho = 0.15;
  // Patch groups per class sharing patches_per_class each. Surface, section
  // and a mixed group holding both make 4.
  int view_units = 1;

  int patches_in_class() const { return patches_per_class * view_units; }
  void validate() const;
  int num_classes() const { return static_cast<int>(classes.size()); }
};

struct NormalizationStats {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> stddev{1.0, 1.0, 1.0};

  friend bool operator==(const NormalizationStats&, const NormalizationStats&) = default;
};

inline constexpr double kMinStddev = 1e-6;

struct Patch {
  std::string id;
  int label = 0;
  int source = 0;  // source image index within its class
  int x = 0, y = 0;
  Image image;
};

struct Dataset {
  DatasetManifest manifest;
  NormalizationStats stats;
  std::vector<Patch> train;
  std::vector<Patch> test;
};

struct Crop {
  int x = 0, y = 0;
  Image image;
};

/// `count` crops at seeded uniform offsets.
std::vector<Crop> extract_patches(const Image& image, int size, int count, std::uint64_t seed);

enum class AugmentKind { identity, hflip, vflip, perspective };

/// Each corner moves uniformly within ±rho·size; singular draws are retried
/// up to 5 times.
Image augment(const Image& patch, AugmentKind kind, double rho, std::uint64_t seed);

/// Variant v of a training patch: flip v mod 3 (none, h, v) followed by
/// perspective warp number v / 3 (0 = none). Variant 0 is the patch itself.
Image augment_variant(const Image& patch, int variant, double rho, std::uint64_t seed);

/// Per-patch seed for variant `variant` of patch `id`.
std::uint64_t augment_seed(std::uint64_t seed, const std::string& id, int variant);

NormalizationStats compute_stats(std::span<const Patch> patches);
Image whiten(const Image& image, const NormalizationStats& stats);

/// N×3×S×S tensor of whitened images.
Tensor to_batch(std::span<const Image* const> images, const NormalizationStats& stats);

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Number of training items of a class holding n items.
std::size_t train_count(std::size_t n, double fraction);

/// Seeded per-class split. Indices keep their original relative order.
SplitIndices split_stratified(std::span<const int> labels, int num_classes, double fraction,
                              std::uint64_t seed);

struct PlannedCounts {
  std::size_t total = 0;
  std::size_t train = 0;
  std::size_t test = 0;
  std::size_t augmented_train = 0;
};

PlannedCounts planned_counts(const DatasetManifest& manifest);

/// Generative factors of one synthetic class.
struct ClassProfile {
  enum class Pattern { noise, stripes, blobs };
  double hue = 0.0;         // degrees
  double saturation = 0.5;
  double value = 0.6;
  double grain = 4.0;       // noise cell size, pixels
  double amplitude = 0.1;   // value modulation
  Pattern pattern = Pattern::noise;
};

std::vector<ClassProfile> default_profiles();

/// One source image of the given class profile (2·patch_size square).
Image synth_source(const ClassProfile& profile, int size, std::uint64_t seed);

/// Generates, splits and measures the dataset in memory. All pixels are
/// 8-bit quantized so the result equals its PNG round trip.
Dataset synth_dataset(const DatasetManifest& manifest);

void write_dataset(const std::filesystem::path& root, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& root);

std::string stats_to_string(double value);

}  // namespace ppks
