#include "ppks/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>

#include <json.hpp>

#include "ppks/error.hpp"
#include "ppks/rng.hpp"

namespace ppks {

using json = nlohmann::ordered_json;

void DatasetManifest::validate() const {
  if (classes.size() < 2) throw ValueError("manifest: at least two classes are required");
  std::set<std::string> unique(classes.begin(), classes.end());
  if (unique.size() != classes.size()) throw ValueError("manifest: duplicate class names");
  for (const auto& name : classes) {
    if (name.empty() || name.find_first_of("/\\") != std::string::npos)
      throw ValueError("manifest: invalid class name '" + name + "'");
  }
  if (patches_per_class < 2) throw ValueError("manifest: patches_per_class must be at least 2");
  if (patch_size < 1) throw ValueError("manifest: patch_size must be positive");
  if (!(split > 0.0 && split < 1.0)) throw ValueError("manifest: split must lie in (0, 1)");
  if (augmentation_factor < 1) throw ValueError("manifest: augmentation_factor must be positive");
  if (patches_per_source < 1) throw ValueError("manifest: patches_per_source must be positive");
  if (!(perspective_rho >= 0.0 && perspective_rho <= 0.25))
    throw ValueError("manifest: perspective_rho must lie in [0, 0.25]");
  if (view_units < 1) throw ValueError("manifest: view_units must be positive");
}

std::vector<Crop> extract_patches(const Image& image, int size, int count, std::uint64_t seed) {
  if (size < 1) throw ValueError("extract_patches: size must be positive");
  if (count < 0) throw ValueError("extract_patches: negative count");
  if (image.width < size || image.height < size) {
    throw ValueError("extract_patches: image " + std::to_string(image.width) + "x" +
                     std::to_string(image.height) + " is smaller than patch size " + std::to_string(size));
  }
  Rng rng(seed);
  std::vector<Crop> crops;
  crops.reserve(count);
  for (int i = 0; i < count; ++i) {
    const int x = static_cast<int>(rng.below(image.width - size + 1));
    const int y = static_cast<int>(rng.below(image.height - size + 1));
    crops.push_back({x, y, crop(image, {x, y, x + size, y + size})});
  }
  return crops;
}

Image augment(const Image& patch, AugmentKind kind, double rho, std::uint64_t seed) {
  switch (kind) {
    case AugmentKind::identity: return patch;
    case AugmentKind::hflip: return hflip(patch);
    case AugmentKind::vflip: return vflip(patch);
    case AugmentKind::perspective: break;
  }
  if (!(rho >= 0.0 && rho <= 0.25)) throw ValueError("augment: rho must lie in [0, 0.25]");
  const double w = patch.width - 1, h = patch.height - 1;
  const double reach = rho * std::max(patch.width, patch.height);
  const std::array<Point, 4> corners{{{0, 0}, {w, 0}, {w, h}, {0, h}}};
  for (int attempt = 0; attempt < 5; ++attempt) {
    Rng rng(derive_seed(seed, "perspective", attempt));
    std::array<Point, 4> moved = corners;
    for (auto& p : moved) {
      p.x += rng.uniform(-reach, reach);
      p.y += rng.uniform(-reach, reach);
    }
    if (auto hom = solve_homography(corners, moved)) return warp_perspective(patch, *hom);
  }
  throw ValueError("augment: no non-singular perspective draw after 5 attempts");
}

std::uint64_t augment_seed(std::uint64_t seed, const std::string& id, int variant) {
  return derive_seed(derive_seed(seed, "augment"), id, static_cast<std::uint64_t>(variant));
}

Image augment_variant(const Image& patch, int variant, double rho, std::uint64_t seed) {
  if (variant < 0) throw ValueError("augment_variant: negative variant");
  static constexpr AugmentKind flips[] = {AugmentKind::identity, AugmentKind::hflip, AugmentKind::vflip};
  Image out = augment(patch, flips[variant % 3], rho, seed);
  if (variant / 3 > 0) out = augment(out, AugmentKind::perspective, rho, seed);
  return out;
}

NormalizationStats compute_stats(std::span<const Patch> patches) {
  if (patches.empty()) throw ValueError("compute_stats: no patches");
  NormalizationStats stats;
  std::array<double, 3> sum{}, count{};
  for (const auto& p : patches) {
    for (std::size_t i = 0; i < p.image.pixels.size(); ++i) {
      sum[i % 3] += p.image.pixels[i];
      count[i % 3] += 1.0;
    }
  }
  for (int c = 0; c < 3; ++c) stats.mean[c] = sum[c] / count[c];
  std::array<double, 3> sq{};
  for (const auto& p : patches) {
    for (std::size_t i = 0; i < p.image.pixels.size(); ++i) {
      const double d = p.image.pixels[i] - stats.mean[i % 3];
      sq[i % 3] += d * d;
    }
  }
  for (int c = 0; c < 3; ++c) stats.stddev[c] = std::max(std::sqrt(sq[c] / count[c]), kMinStddev);
  return stats;
}

Image whiten(const Image& image, const NormalizationStats& stats) {
  Image out = image;
  for (std::size_t i = 0; i < out.pixels.size(); ++i) {
    const int c = static_cast<int>(i % 3);
    out.pixels[i] = static_cast<float>((image.pixels[i] - stats.mean[c]) / std::max(stats.stddev[c], kMinStddev));
  }
  return out;
}

Tensor to_batch(std::span<const Image* const> images, const NormalizationStats& stats) {
  if (images.empty()) throw ValueError("to_batch: empty batch");
  const int w = images[0]->width, h = images[0]->height;
  Tensor out = Tensor::zeros({images.size(), 3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)});
  float* dst = out.ptr();
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  std::array<double, 3> inv;
  for (int c = 0; c < 3; ++c) inv[c] = std::max(stats.stddev[c], kMinStddev);
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& img = *images[n];
    if (img.width != w || img.height != h) throw ShapeError("to_batch: images differ in size");
    for (int c = 0; c < 3; ++c) {
      float* channel = dst + (n * 3 + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        channel[i] = static_cast<float>((img.pixels[i * 3 + c] - stats.mean[c]) / inv[c]);
      }
    }
  }
  return out;
}

std::size_t train_count(std::size_t n, double fraction) {
  if (n < 2) return n;
  const auto t = static_cast<std::size_t>(std::llround(static_cast<double>(n) * fraction));
  return std::clamp<std::size_t>(t, 1, n - 1);
}

SplitIndices split_stratified(std::span<const int> labels, int num_classes, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ValueError("split_stratified: fraction must lie in (0, 1)");
  std::vector<std::vector<std::size_t>> members(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) throw ValueError("split_stratified: label out of range");
    members[labels[i]].push_back(i);
  }
  SplitIndices out;
  for (int c = 0; c < num_classes; ++c) {
    auto& idx = members[c];
    if (idx.size() < 2) {
      throw ValueError("split_stratified: class " + std::to_string(c) + " has fewer than 2 patches");
    }
    Rng rng(derive_seed(seed, "split", static_cast<std::uint64_t>(c)));
    rng.shuffle(idx);
    const std::size_t t = train_count(idx.size(), fraction);
    out.train.insert(out.train.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(t));
    out.test.insert(out.test.end(), idx.begin() + static_cast<std::ptrdiff_t>(t), idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

PlannedCounts planned_counts(const DatasetManifest& manifest) {
  manifest.validate();
  PlannedCounts counts;
  const auto k = static_cast<std::size_t>(manifest.num_classes());
  const auto per_class = static_cast<std::size_t>(manifest.patches_in_class());
  counts.total = k * per_class;
  counts.train = k * train_count(per_class, manifest.split);
  counts.test = counts.total - counts.train;
  counts.augmented_train = counts.train * static_cast<std::size_t>(manifest.augmentation_factor);
  return counts;
}

std::vector<ClassProfile> default_profiles() {
  using P = ClassProfile::Pattern;
  return {
      {30.0, 0.65, 0.62, 7.0, 0.10, P::noise},    // AU
      {75.0, 0.65, 0.62, 7.0, 0.10, P::noise},    // BRU
      {200.0, 0.12, 0.60, 1.0, 0.22, P::noise},   // CYS
      {200.0, 0.12, 0.60, 4.0, 0.22, P::noise},   // STR
      {135.0, 0.45, 0.55, 9.0, 0.20, P::stripes}, // WD
      {310.0, 0.45, 0.55, 6.0, 0.25, P::blobs},   // WW
  };
}

namespace {

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

// Lattice value noise in [-1, 1] with cell size `grain`.
std::vector<double> value_noise(int size, double grain, Rng& rng) {
  std::vector<double> field(static_cast<std::size_t>(size) * size);
  if (grain <= 1.0) {
    for (double& v : field) v = rng.uniform(-1.0, 1.0);
    return field;
  }
  const int cells = static_cast<int>(std::ceil(size / grain)) + 2;
  std::vector<double> lattice(static_cast<std::size_t>(cells) * cells);
  for (double& v : lattice) v = rng.uniform(-1.0, 1.0);
  const double ox = rng.uniform(0.0, 1.0), oy = rng.uniform(0.0, 1.0);
  for (int y = 0; y < size; ++y) {
    const double gy = y / grain + oy;
    const int iy = static_cast<int>(gy);
    const double ty = smoothstep(gy - iy);
    for (int x = 0; x < size; ++x) {
      const double gx = x / grain + ox;
      const int ix = static_cast<int>(gx);
      const double tx = smoothstep(gx - ix);
      auto l = [&](int a, int b) { return lattice[static_cast<std::size_t>(b) * cells + a]; };
      const double top = l(ix, iy) + tx * (l(ix + 1, iy) - l(ix, iy));
      const double bottom = l(ix, iy + 1) + tx * (l(ix + 1, iy + 1) - l(ix, iy + 1));
      field[static_cast<std::size_t>(y) * size + x] = top + ty * (bottom - top);
    }
  }
  return field;
}

}  // namespace

Image synth_source(const ClassProfile& profile, int size, std::uint64_t seed) {
  if (size < 1) throw ValueError("synth_source: size must be positive");
  Rng rng(seed);
  const double hue = profile.hue + rng.uniform(-4.0, 4.0);
  const double sat = std::clamp(profile.saturation * rng.uniform(0.92, 1.08), 0.0, 1.0);
  const double value = profile.value + rng.uniform(-0.04, 0.04);

  std::vector<double> field;
  switch (profile.pattern) {
    case ClassProfile::Pattern::noise:
      field = value_noise(size, profile.grain, rng);
      break;
    case ClassProfile::Pattern::stripes: {
      const double theta = rng.uniform(0.0, std::numbers::pi);
      const double period = profile.grain * rng.uniform(0.85, 1.15);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const auto jitter = value_noise(size, 2.0, rng);
      field.resize(jitter.size());
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          const double u = x * std::cos(theta) + y * std::sin(theta);
          const std::size_t i = static_cast<std::size_t>(y) * size + x;
          field[i] = 0.8 * std::sin(2.0 * std::numbers::pi * u / period + phase) + 0.2 * jitter[i];
        }
      break;
    }
    case ClassProfile::Pattern::blobs: {
      const int count = std::max(1, static_cast<int>(size * size / (profile.grain * profile.grain * 12.0)));
      std::vector<std::array<double, 3>> blobs(count);
      for (auto& b : blobs) b = {rng.uniform(0.0, size), rng.uniform(0.0, size), profile.grain * rng.uniform(0.7, 1.4)};
      const auto jitter = value_noise(size, 2.0, rng);
      field.resize(jitter.size());
      for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
          double acc = 0.0;
          for (const auto& b : blobs) {
            const double dx = x - b[0], dy = y - b[1];
            acc += std::exp(-(dx * dx + dy * dy) / (2.0 * b[2] * b[2]));
          }
          const std::size_t i = static_cast<std::size_t>(y) * size + x;
          field[i] = 0.8 * (2.0 * std::min(acc, 1.0) - 1.0) + 0.2 * jitter[i];
        }
      break;
    }
  }

  Image out(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double v = std::clamp(value + profile.amplitude * field[static_cast<std::size_t>(y) * size + x], 0.0, 1.0);
      const auto rgb = hsv_to_rgb(static_cast<float>(hue), static_cast<float>(sat), static_cast<float>(v));
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = rgb[c];
    }
  return quantize(out);
}

namespace {

std::string patch_id(const std::string& cls, int source, int k) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "-%04d-%02d", source, k);
  return cls + buf;
}

}  // namespace

Dataset synth_dataset(const DatasetManifest& manifest) {
  manifest.validate();
  const auto profiles = default_profiles();
  if (manifest.classes.size() > profiles.size()) {
    throw ValueError("synth_dataset: at most " + std::to_string(profiles.size()) + " synthetic classes");
  }
  std::vector<Patch> all;
  for (int c = 0; c < manifest.num_classes(); ++c) {
    const std::uint64_t class_seed = derive_seed(manifest.seed, "synth", static_cast<std::uint64_t>(c));
    int remaining = manifest.patches_in_class();
    for (int s = 0; remaining > 0; ++s) {
      const int take = std::min(remaining, manifest.patches_per_source);
      const Image source = synth_source(profiles[c], 2 * manifest.patch_size, derive_seed(class_seed, "source", s));
      auto crops = extract_patches(source, manifest.patch_size, take, derive_seed(class_seed, "crop", s));
      for (int k = 0; k < take; ++k) {
        all.push_back({patch_id(manifest.classes[c], s, k), c, s, crops[k].x, crops[k].y, std::move(crops[k].image)});
      }
      remaining -= take;
    }
  }
  std::vector<int> labels(all.size());
  std::transform(all.begin(), all.end(), labels.begin(), [](const Patch& p) { return p.label; });
  const auto split = split_stratified(labels, manifest.num_classes(), manifest.split, derive_seed(manifest.seed, "split"));

  Dataset out;
  out.manifest = manifest;
  for (std::size_t i : split.train) out.train.push_back(std::move(all[i]));
  for (std::size_t i : split.test) out.test.push_back(std::move(all[i]));
  out.stats = compute_stats(out.train);
  return out;
}

std::string stats_to_string(double value) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

namespace {

json manifest_json(const Dataset& dataset) {
  const auto& m = dataset.manifest;
  json j;
  j["format"] = 1;
  j["classes"] = m.classes;
  j["patches_per_class"] = m.patches_per_class;
  j["patch_size"] = m.patch_size;
  j["split"] = m.split;
  j["augmentation_factor"] = m.augmentation_factor;
  j["seed"] = m.seed;
  j["patches_per_source"] = m.patches_per_source;
  j["perspective_rho"] = m.perspective_rho;
  j["view_units"] = m.view_units;
  json mean = json::array(), sd = json::array();
  for (int c = 0; c < 3; ++c) {
    mean.push_back(stats_to_string(dataset.stats.mean[c]));
    sd.push_back(stats_to_string(dataset.stats.stddev[c]));
  }
  j["stats"] = {{"mean", mean}, {"std", sd}};
  j["counts"] = {{"train", dataset.train.size()},
                 {"test", dataset.test.size()},
                 {"augmented_train", dataset.train.size() * static_cast<std::size_t>(m.augmentation_factor)}};
  json patches = json::array();
  auto add = [&](const std::vector<Patch>& list, const char* split) {
    for (const auto& p : list) {
      patches.push_back({{"id", p.id}, {"split", split}, {"class", m.classes.at(p.label)},
                         {"source", p.source}, {"x", p.x}, {"y", p.y}});
    }
  };
  add(dataset.train, "train");
  add(dataset.test, "test");
  j["patches"] = std::move(patches);
  return j;
}

}  // namespace

void write_dataset(const std::filesystem::path& root, const Dataset& dataset) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  auto dump = [&](const std::vector<Patch>& list, const char* split) {
    for (const auto& p : list) {
      write_png(root / split / dataset.manifest.classes.at(p.label) / (p.id + ".png"), p.image);
    }
  };
  dump(dataset.train, "train");
  dump(dataset.test, "test");
  std::ofstream out(root / "manifest.json");
  if (!out) throw IoError("cannot write " + (root / "manifest.json").string());
  out << manifest_json(dataset).dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& root) {
  const auto path = root / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    in >> j;
    Dataset out;
    auto& m = out.manifest;
    m.classes = j.at("classes").get<std::vector<std::string>>();
    m.patches_per_class = j.at("patches_per_class").get<int>();
    m.patch_size = j.at("patch_size").get<int>();
    m.split = j.at("split").get<double>();
    m.augmentation_factor = j.at("augmentation_factor").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.patches_per_source = j.at("patches_per_source").get<int>();
    m.perspective_rho = j.at("perspective_rho").get<double>();
    m.view_units = j.at("view_units").get<int>();
    m.validate();
    for (int c = 0; c < 3; ++c) {
      out.stats.mean[c] = std::stod(j.at("stats").at("mean").at(c).get<std::string>());
      out.stats.stddev[c] = std::stod(j.at("stats").at("std").at(c).get<std::string>());
    }
    for (const auto& entry : j.at("patches")) {
      Patch p;
      p.id = entry.at("id").get<std::string>();
      const auto cls = entry.at("class").get<std::string>();
      const auto it = std::find(m.classes.begin(), m.classes.end(), cls);
      if (it == m.classes.end()) throw IoError("manifest: unknown class '" + cls + "'");
      p.label = static_cast<int>(it - m.classes.begin());
      p.source = entry.at("source").get<int>();
      p.x = entry.at("x").get<int>();
      p.y = entry.at("y").get<int>();
      const auto split = entry.at("split").get<std::string>();
      if (split != "train" && split != "test") throw IoError("manifest: unknown split '" + split + "'");
      p.image = read_png(root / split / cls / (p.id + ".png"));
      if (p.image.width != m.patch_size || p.image.height != m.patch_size) {
        throw IoError("patch " + p.id + " does not match patch_size");
      }
      (split == "train" ? out.train : out.test).push_back(std::move(p));
    }
    return out;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
}

}  // namespace ppks
