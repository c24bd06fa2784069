#pragma once

// Explanations for a pushed network: activation heatmaps, descriptor
// (perturbation sensitivity) profiles and per-input reports written as JSON
// with PNG artifacts.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ppks/model.hpp"

namespace ppks {

struct Heatmap {
  int width = 0, height = 0;
  std::vector<float> values;  // row-major, in [0, 1]
  Rect box;

  float at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

/// Bilinear value of a g×g map at a continuous map coordinate, clamped to
/// the outermost cell centres.
float sample_map(std::span<const float> map, int g, double u, double v);

/// Upsamples a g×g map to size×size. Output pixel x reads map coordinate
/// (x + 0.5)·g/size − 0.5, so cell centres land on their receptive-field
/// centres.
std::vector<float> upsample_bilinear(std::span<const float> map, int g, int size);

/// Tightest rectangle holding every value ≥ the nearest-rank q-quantile.
Rect percentile_box(std::span<const float> values, int width, int height, double q = 0.95);

/// Upsample, min-max normalize (constant maps become all zeros) and box.
Heatmap heatmap_from_map(std::span<const float> map, int g, int size);

/// Similarity map of `prototype` on `image`, as a heatmap at input size.
Heatmap activation_heatmap(PPNet& model, const Image& image, const NormalizationStats& stats, int prototype);

inline constexpr std::array<const char*, 6> kDescriptorNames{"hue", "saturation", "brightness",
                                                            "contrast", "texture", "shape"};

struct Perturbations {
  float hue_degrees = 20.0f;
  float saturation_factor = 0.5f;
  float brightness_delta = 0.2f;
  float contrast_factor = 0.5f;
  float blur_sigma = 2.0f;
  double perspective_rho = 0.15;

  /// Zero-magnitude versions of all six.
  static Perturbations none() { return {0.0f, 1.0f, 0.0f, 1.0f, 0.0f, 0.0}; }
};

/// Perturbation `which` (index into kDescriptorNames) applied to `image`.
Image perturb(const Image& image, int which, const Perturbations& magnitudes, std::uint64_t seed);

struct DescriptorProfile {
  std::array<double, 6> sensitivity{};  // in [−1, 1], kDescriptorNames order

  double operator[](const std::string& name) const;
  friend bool operator==(const DescriptorProfile&, const DescriptorProfile&) = default;
};

/// Max similarity of one prototype over the cells of one image.
double top_similarity(PPNet& model, const Image& image, const NormalizationStats& stats, int prototype);

/// (s₀ − s_δ)/s₀ on the prototype's source image, clamped to [−1, 1].
DescriptorProfile descriptor_profile(PPNet& model, int prototype, const Image& source,
                                     const NormalizationStats& stats, const Perturbations& magnitudes = {});

/// Training image a prototype was pushed onto.
const Image& provenance_source(const PPNet& model, int prototype, const Dataset& dataset);

struct Evidence {
  int prototype_id = 0;
  int class_id = 0;
  double similarity_score = 0.0;
  double head_weight = 0.0;
  double contribution = 0.0;
  int cell_i = 0, cell_j = 0;
  Rect box;
  std::string heatmap_path;      // relative to the report directory
  std::string source_patch_path;
  DescriptorProfile descriptors;
};

struct ExplanationReport {
  std::string input_id;
  int predicted_class = 0;
  std::vector<double> class_scores;  // logits
  std::vector<std::vector<double>> contributions;  // [class][prototype], score·weight
  std::vector<Evidence> evidence;
};

/// Builds the report for the top-k prototypes by contribution to the
/// predicted class and writes out_dir/<input_id>/{report.json, *.png}.
ExplanationReport explain(PPNet& model, const Image& image, const std::string& input_id, const Dataset& dataset,
                          int k, const std::filesystem::path& out_dir);

std::string report_json(const ExplanationReport& report, const std::vector<std::string>& class_names);

}  // namespace ppks
