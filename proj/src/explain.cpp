#include "ppks/explain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "format.hpp"
#include "ppks/error.hpp"
#include "ppks/rng.hpp"

namespace ppks {

using json = nlohmann::ordered_json;

float sample_map(std::span<const float> map, int g, double u, double v) {
  u = std::clamp(u, 0.0, static_cast<double>(g - 1));
  v = std::clamp(v, 0.0, static_cast<double>(g - 1));
  const int i0 = static_cast<int>(std::floor(v)), j0 = static_cast<int>(std::floor(u));
  const int i1 = std::min(i0 + 1, g - 1), j1 = std::min(j0 + 1, g - 1);
  const double ty = v - i0, tx = u - j0;
  auto m = [&](int i, int j) { return static_cast<double>(map[static_cast<std::size_t>(i) * g + j]); };
  const double top = m(i0, j0) + tx * (m(i0, j1) - m(i0, j0));
  const double bottom = m(i1, j0) + tx * (m(i1, j1) - m(i1, j0));
  return static_cast<float>(top + ty * (bottom - top));
}

std::vector<float> upsample_bilinear(std::span<const float> map, int g, int size) {
  if (g < 1 || size < 1 || map.size() != static_cast<std::size_t>(g) * g) {
    throw ShapeError("upsample_bilinear: map does not hold g×g values");
  }
  std::vector<float> out(static_cast<std::size_t>(size) * size);
  const double ratio = static_cast<double>(g) / size;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      out[static_cast<std::size_t>(y) * size + x] = sample_map(map, g, (x + 0.5) * ratio - 0.5, (y + 0.5) * ratio - 0.5);
  return out;
}

Rect percentile_box(std::span<const float> values, int width, int height, double q) {
  if (values.empty() || values.size() != static_cast<std::size_t>(width) * height) {
    throw ShapeError("percentile_box: values do not match width×height");
  }
  std::vector<float> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(sorted.size())));
  const float threshold = sorted[std::clamp<std::size_t>(rank, 1, sorted.size()) - 1];
  Rect box{width, height, 0, 0};
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      if (values[static_cast<std::size_t>(y) * width + x] < threshold) continue;
      box.x0 = std::min(box.x0, x);
      box.y0 = std::min(box.y0, y);
      box.x1 = std::max(box.x1, x + 1);
      box.y1 = std::max(box.y1, y + 1);
    }
  return box;
}

Heatmap heatmap_from_map(std::span<const float> map, int g, int size) {
  Heatmap h;
  h.width = h.height = size;
  h.values = upsample_bilinear(map, g, size);
  const auto [lo, hi] = std::minmax_element(h.values.begin(), h.values.end());
  const float a = *lo, b = *hi;
  for (float& v : h.values) v = b > a ? (v - a) / (b - a) : 0.0f;
  h.box = percentile_box(h.values, size, size);
  return h;
}

namespace {

void check_prototype(const PPNet& model, int prototype) {
  if (prototype < 0 || prototype >= model.num_prototypes()) {
    throw ValueError("unknown prototype id " + std::to_string(prototype));
  }
}

Tensor single_batch(const PPNet& model, const Image& image, const NormalizationStats& stats) {
  const int s = model.backbone().config().input_size;
  if (image.width != s || image.height != s) {
    throw ShapeError("image is " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                     ", model expects " + std::to_string(s));
  }
  const Image* ptr = &image;
  return to_batch(std::span(&ptr, 1), stats);
}

// Similarity map of one prototype, g×g.
std::vector<float> similarity_map(PPNet& model, const Image& image, const NormalizationStats& stats, int prototype) {
  NoGradGuard guard;
  const Tensor z = extract_features(model.backbone(), single_batch(model, image, stats));
  const auto g = static_cast<std::size_t>(model.backbone().config().grid_size());
  const std::size_t cells = g * g;
  const Tensor d = distance_map(z, model.prototypes());
  std::vector<float> out(cells);
  for (std::size_t c = 0; c < cells; ++c) out[c] = similarity(d.ptr()[static_cast<std::size_t>(prototype) * cells + c]);
  return out;
}

}  // namespace

Heatmap activation_heatmap(PPNet& model, const Image& image, const NormalizationStats& stats, int prototype) {
  check_prototype(model, prototype);
  const auto map = similarity_map(model, image, stats, prototype);
  const auto& cfg = model.backbone().config();
  return heatmap_from_map(map, cfg.grid_size(), cfg.input_size);
}

Image perturb(const Image& image, int which, const Perturbations& m, std::uint64_t seed) {
  switch (which) {
    case 0: return rotate_hue(image, m.hue_degrees);
    case 1: return scale_saturation(image, m.saturation_factor);
    case 2: return shift_brightness(image, m.brightness_delta);
    case 3: return scale_contrast(image, m.contrast_factor);
    case 4: return gaussian_blur(image, m.blur_sigma);
    case 5: return m.perspective_rho == 0.0 ? image : augment(image, AugmentKind::perspective, m.perspective_rho, seed);
    default: throw ValueError("perturb: unknown perturbation " + std::to_string(which));
  }
}

double DescriptorProfile::operator[](const std::string& name) const {
  for (std::size_t i = 0; i < kDescriptorNames.size(); ++i)
    if (name == kDescriptorNames[i]) return sensitivity[i];
  throw ValueError("unknown descriptor '" + name + "'");
}

double top_similarity(PPNet& model, const Image& image, const NormalizationStats& stats, int prototype) {
  check_prototype(model, prototype);
  const auto map = similarity_map(model, image, stats, prototype);
  return *std::max_element(map.begin(), map.end());
}

DescriptorProfile descriptor_profile(PPNet& model, int prototype, const Image& source,
                                     const NormalizationStats& stats, const Perturbations& magnitudes) {
  check_prototype(model, prototype);
  if (!model.provenance()[prototype]) {
    throw ValueError("descriptor_profile: prototype " + std::to_string(prototype) + " has no provenance");
  }
  const double s0 = top_similarity(model, source, stats, prototype);
  DescriptorProfile profile;
  for (int k = 0; k < static_cast<int>(kDescriptorNames.size()); ++k) {
    const Image moved = perturb(source, k, magnitudes, derive_seed(0, "descriptor", static_cast<std::uint64_t>(prototype)));
    const double s = top_similarity(model, moved, stats, prototype);
    profile.sensitivity[k] = std::clamp((s0 - s) / s0, -1.0, 1.0);
  }
  return profile;
}

const Image& provenance_source(const PPNet& model, int prototype, const Dataset& dataset) {
  check_prototype(model, prototype);
  const auto& prov = model.provenance()[prototype];
  if (!prov) throw ValueError("prototype " + std::to_string(prototype) + " has no provenance");
  if (prov->image_index >= dataset.train.size() || dataset.train[prov->image_index].id != prov->image_id) {
    throw ValueError("provenance image '" + prov->image_id + "' is not in the dataset's training split");
  }
  return dataset.train[prov->image_index].image;
}

namespace {

Image overlay(const Image& image, const Heatmap& h) {
  Image out = image;
  for (int y = 0; y < h.height; ++y)
    for (int x = 0; x < h.width; ++x) {
      const float v = h.at(y, x);
      const float jet[3] = {std::clamp(1.5f - std::fabs(4.0f * v - 3.0f), 0.0f, 1.0f),
                            std::clamp(1.5f - std::fabs(4.0f * v - 2.0f), 0.0f, 1.0f),
                            std::clamp(1.5f - std::fabs(4.0f * v - 1.0f), 0.0f, 1.0f)};
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = 0.5f * image.at(y, x, c) + 0.5f * jet[c];
    }
  const Rect& b = h.box;
  if (b.empty()) return out;
  for (int x = b.x0; x < b.x1; ++x)
    for (int c = 0; c < 3; ++c) out.at(b.y0, x, c) = out.at(b.y1 - 1, x, c) = 1.0f;
  for (int y = b.y0; y < b.y1; ++y)
    for (int c = 0; c < 3; ++c) out.at(y, b.x0, c) = out.at(y, b.x1 - 1, c) = 1.0f;
  return out;
}

}  // namespace

ExplanationReport explain(PPNet& model, const Image& image, const std::string& input_id, const Dataset& dataset,
                          int k, const std::filesystem::path& out_dir) {
  if (!model.pushed()) throw ValueError("explain: model prototypes have not been pushed");
  if (k < 1) throw ValueError("explain: k must be positive");
  if (input_id.empty() || input_id.find_first_of("/\\") != std::string::npos || input_id == "." || input_id == "..") {
    throw ValueError("explain: input id '" + input_id + "' is not a valid directory name");
  }
  const auto P = static_cast<std::size_t>(model.num_prototypes());
  const int g = model.backbone().config().grid_size();
  const std::size_t cells = static_cast<std::size_t>(g) * g;

  PPNetOutput out;
  {
    NoGradGuard guard;
    out = model.forward(single_batch(model, image, dataset.stats), Mode::eval);
  }
  ExplanationReport report;
  report.input_id = input_id;
  report.class_scores.assign(out.logits.data().begin(), out.logits.data().end());
  report.predicted_class =
      static_cast<int>(std::max_element(out.logits.data().begin(), out.logits.data().end()) - out.logits.data().begin());

  const float* scores = out.top.scores.ptr();
  report.contributions.assign(model.num_classes(), std::vector<double>(P));
  for (std::size_t c = 0; c < report.contributions.size(); ++c)
    for (std::size_t p = 0; p < P; ++p) report.contributions[c][p] = scores[p] * model.head().ptr()[c * P + p];
  const float* head = model.head().ptr() + static_cast<std::size_t>(report.predicted_class) * P;
  std::vector<std::size_t> order(P);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] * head[a] > scores[b] * head[b]; });
  order.resize(std::min<std::size_t>(P, static_cast<std::size_t>(k)));

  const auto dir = out_dir / input_id;
  std::filesystem::create_directories(dir);
  for (std::size_t p : order) {
    Evidence e;
    e.prototype_id = static_cast<int>(p);
    e.class_id = model.class_of()[p];
    e.similarity_score = scores[p];
    e.head_weight = head[p];
    e.contribution = static_cast<double>(scores[p] * head[p]);
    const int cell = out.top.cells[p];
    e.cell_i = cell / g;
    e.cell_j = cell % g;
    std::vector<float> map(cells);
    for (std::size_t c = 0; c < cells; ++c) map[c] = similarity(out.distances.ptr()[p * cells + c]);
    const Heatmap h = heatmap_from_map(map, g, model.backbone().config().input_size);
    e.box = h.box;
    e.heatmap_path = "heatmap_p" + std::to_string(p) + ".png";
    e.source_patch_path = "source_p" + std::to_string(p) + ".png";
    write_png(dir / e.heatmap_path, overlay(image, h));
    write_png(dir / e.source_patch_path, model.provenance()[p]->patch);
    e.descriptors = descriptor_profile(model, e.prototype_id, provenance_source(model, e.prototype_id, dataset),
                                       dataset.stats);
    report.evidence.push_back(std::move(e));
  }
  std::ofstream file(dir / "report.json");
  if (!file) throw IoError("cannot write " + (dir / "report.json").string());
  file << report_json(report, dataset.manifest.classes) << '\n';
  if (!file) throw IoError("write failed for " + (dir / "report.json").string());
  return report;
}

std::string report_json(const ExplanationReport& report, const std::vector<std::string>& class_names) {
  json j;
  j["input_id"] = report.input_id;
  j["predicted_class"] = report.predicted_class;
  if (report.predicted_class >= 0 && static_cast<std::size_t>(report.predicted_class) < class_names.size()) {
    j["predicted_label"] = class_names[report.predicted_class];
  }
  json scores = json::array();
  for (double s : report.class_scores) scores.push_back(round6(s));
  j["class_scores"] = scores;
  json contributions = json::array();
  for (const auto& row : report.contributions) {
    json r = json::array();
    for (double v : row) r.push_back(round6(v));
    contributions.push_back(r);
  }
  j["contributions"] = contributions;
  json evidence = json::array();
  for (const auto& e : report.evidence) {
    json d;
    for (std::size_t i = 0; i < kDescriptorNames.size(); ++i) d[kDescriptorNames[i]] = round6(e.descriptors.sensitivity[i]);
    evidence.push_back({{"prototype_id", e.prototype_id},
                        {"class_id", e.class_id},
                        {"similarity_score", round6(e.similarity_score)},
                        {"head_weight", round6(e.head_weight)},
                        {"contribution", round6(e.contribution)},
                        {"argmax_cell", {e.cell_i, e.cell_j}},
                        {"bounding_box", {{"x0", e.box.x0}, {"y0", e.box.y0}, {"x1", e.box.x1}, {"y1", e.box.y1}}},
                        {"heatmap_path", e.heatmap_path},
                        {"source_patch_path", e.source_patch_path},
                        {"descriptor_profile", d}});
  }
  j["evidence"] = evidence;
  return j.dump(2);
}

}  // namespace ppks
