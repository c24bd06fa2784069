#pragma once

// Prototype layer, classifier head and the assembled prototypical network,
// plus the plain baseline classifier used for comparison.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ppks/backbone.hpp"
#include "ppks/data.hpp"

namespace ppks {

struct Provenance {
  std::string image_id;
  std::size_t image_index = 0;  // position in the training split
  int cell_i = 0, cell_j = 0;
  Rect rect;
  Image patch;  // raw pixels of `rect` in the source image

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct TopActivation {
  Tensor scores;                    // N×P
  std::vector<std::int32_t> cells;  // N×P flat argmax cells
};

/// score(n, p) = max over cells of similarity(dist(n, p, ·)).
TopActivation top_activation(const Tensor& distances);

/// scores · headᵀ
Tensor logits(const Tensor& scores, const Tensor& head);

/// Head with 1 on own-class entries and −0.5 elsewhere.
Tensor init_head(const std::vector<int>& class_of, int num_classes);

/// Distinct (image, cell) pairs over P. Throws if any prototype is unpushed.
double prototype_diversity(const std::vector<std::optional<Provenance>>& provenance);

struct PPNetOutput {
  Tensor distances;  // N×P×g×g
  TopActivation top;
  Tensor logits;     // N×K
};

class PPNet {
 public:
  PPNet() = default;
  PPNet(const BackboneConfig& cfg, int num_classes, int prototypes_per_class, std::uint64_t seed);

  PPNetOutput forward(const Tensor& x, Mode mode);

  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  Tensor& prototypes() { return prototypes_; }
  const Tensor& prototypes() const { return prototypes_; }
  Tensor& head() { return head_; }
  const Tensor& head() const { return head_; }
  const std::vector<int>& class_of() const { return class_of_; }
  std::vector<std::optional<Provenance>>& provenance() { return provenance_; }
  const std::vector<std::optional<Provenance>>& provenance() const { return provenance_; }

  int num_classes() const { return num_classes_; }
  int num_prototypes() const { return static_cast<int>(class_of_.size()); }
  int latent_dim() const { return backbone_.config().add_on_dim; }
  bool pushed() const;

  /// Backbone tensors followed by "prototypes" and "head".
  std::vector<NamedTensor> named_tensors();

 private:
  Backbone backbone_;
  int num_classes_ = 0;
  Tensor prototypes_;  // P×D
  Tensor head_;        // K×P
  std::vector<int> class_of_;
  std::vector<std::optional<Provenance>> provenance_;
};

/// Backbone trunk, global average pooling and a dense head with bias.
class BaselineNet {
 public:
  BaselineNet() = default;
  BaselineNet(const BackboneConfig& cfg, int num_classes, std::uint64_t seed);

  Tensor forward(const Tensor& x, Mode mode);

  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  int num_classes() const { return num_classes_; }
  std::vector<Tensor> parameters();
  std::vector<NamedTensor> named_tensors();

 private:
  Backbone backbone_;
  int num_classes_ = 0;
  Tensor weight_, bias_;
};

}  // namespace ppks
