#include "ppks/model.hpp"

#include <cmath>
#include <set>

#include "ppks/error.hpp"
#include "ppks/rng.hpp"

namespace ppks {

TopActivation top_activation(const Tensor& distances) {
  TopActivation out;
  out.scores = spatial_max(similarity(distances), &out.cells);
  return out;
}

Tensor logits(const Tensor& scores, const Tensor& head) {
  if (scores.rank() != 2 || head.rank() != 2 || scores.dim(1) != head.dim(1)) {
    throw ShapeError("logits: scores " + shape_str(scores.shape()) + " do not match head " + shape_str(head.shape()));
  }
  return dense(scores, head);
}

Tensor init_head(const std::vector<int>& class_of, int num_classes) {
  const std::size_t p = class_of.size();
  Tensor head = Tensor::full({static_cast<std::size_t>(num_classes), p}, -0.5f, true);
  for (std::size_t j = 0; j < p; ++j) {
    if (class_of[j] < 0 || class_of[j] >= num_classes) throw ValueError("init_head: class id out of range");
    head.data()[class_of[j] * p + j] = 1.0f;
  }
  return head;
}

double prototype_diversity(const std::vector<std::optional<Provenance>>& provenance) {
  if (provenance.empty()) throw ValueError("prototype_diversity: no prototypes");
  std::set<std::tuple<std::string, int, int>> distinct;
  for (std::size_t p = 0; p < provenance.size(); ++p) {
    if (!provenance[p]) throw ValueError("prototype_diversity: prototype " + std::to_string(p) + " was never pushed");
    distinct.insert({provenance[p]->image_id, provenance[p]->cell_i, provenance[p]->cell_j});
  }
  return static_cast<double>(distinct.size()) / static_cast<double>(provenance.size());
}

PPNet::PPNet(const BackboneConfig& cfg, int num_classes, int prototypes_per_class, std::uint64_t seed)
    : backbone_(cfg, derive_seed(seed, "backbone")), num_classes_(num_classes) {
  if (num_classes < 2) throw ValueError("PPNet: at least two classes are required");
  if (prototypes_per_class < 1) throw ValueError("PPNet: prototypes_per_class must be positive");
  for (int k = 0; k < num_classes; ++k)
    for (int m = 0; m < prototypes_per_class; ++m) class_of_.push_back(k);
  const auto p = class_of_.size();
  const auto d = static_cast<std::size_t>(cfg.add_on_dim);
  prototypes_ = Tensor::zeros({p, d}, true);
  Rng rng(derive_seed(seed, "prototypes"));
  for (float& v : prototypes_.data()) {
    do {
      v = static_cast<float>(rng.uniform());
    } while (v == 0.0f);
  }
  head_ = init_head(class_of_, num_classes);
  provenance_.resize(p);
}

PPNetOutput PPNet::forward(const Tensor& x, Mode mode) {
  PPNetOutput out;
  const Tensor features = extract_features(backbone_, x, mode);
  out.distances = distance_map(features, prototypes_);
  out.top = top_activation(out.distances);
  out.logits = logits(out.top.scores, head_);
  return out;
}

bool PPNet::pushed() const {
  for (const auto& p : provenance_) {
    if (!p) return false;
  }
  return !provenance_.empty();
}

std::vector<NamedTensor> PPNet::named_tensors() {
  auto out = backbone_.named_tensors();
  out.push_back({"prototypes", prototypes_});
  out.push_back({"head", head_});
  return out;
}

BaselineNet::BaselineNet(const BackboneConfig& cfg, int num_classes, std::uint64_t seed)
    : backbone_(cfg, derive_seed(seed, "backbone")), num_classes_(num_classes) {
  if (num_classes < 2) throw ValueError("BaselineNet: at least two classes are required");
  const auto c = static_cast<std::size_t>(cfg.block_channels.back());
  const auto k = static_cast<std::size_t>(num_classes);
  weight_ = Tensor::zeros({k, c}, true);
  bias_ = Tensor::zeros({k}, true);
  Rng rng(derive_seed(seed, "baseline_head"));
  const double bound = 1.0 / std::sqrt(static_cast<double>(c));
  for (float& v : weight_.data()) v = static_cast<float>(rng.uniform(-bound, bound));
}

Tensor BaselineNet::forward(const Tensor& x, Mode mode) {
  const auto s = static_cast<std::size_t>(backbone_.config().input_size);
  if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != s || x.dim(3) != s) {
    throw ShapeError("BaselineNet: unexpected input " + shape_str(x.shape()));
  }
  return dense(global_avg_pool(backbone_.trunk(x, mode)), weight_, bias_);
}

std::vector<Tensor> BaselineNet::parameters() {
  auto out = backbone_.trunk_parameters();
  out.push_back(weight_);
  out.push_back(bias_);
  return out;
}

std::vector<NamedTensor> BaselineNet::named_tensors() {
  std::vector<NamedTensor> out;
  for (auto& t : backbone_.named_tensors()) {
    if (t.name.rfind("add_on.", 0) != 0) out.push_back(std::move(t));
  }
  out.push_back({"fc.weight", weight_});
  out.push_back({"fc.bias", bias_});
  return out;
}

}  // namespace ppks
