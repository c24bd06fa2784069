#pragma once

// MiniVGG feature extractor: blocks of conv3×3 → (bn) → relu → conv3×3 →
// (bn) → relu → maxpool, followed by the add-on conv1×1 → relu → conv1×1 →
// sigmoid that yields the latent grid.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ppks/image.hpp"
#include "ppks/ops.hpp"

namespace ppks {

struct BackboneConfig {
  int input_size = 64;
  std::vector<int> block_channels{32, 64, 128};
  int add_on_dim = 64;
  bool use_batchnorm = true;

  void validate() const;
  int grid_size() const { return input_size >> block_channels.size(); }

  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

struct ConvBlock {
  Tensor w1, b1;  // b* undefined when batchnorm is on
  BatchNormState bn1;
  Tensor w2, b2;
  BatchNormState bn2;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(BackboneConfig cfg, std::uint64_t seed);

  const BackboneConfig& config() const { return cfg_; }

  /// N×3×S×S → N×C_last×(S/2^L)×(S/2^L), before the add-on layers.
  Tensor trunk(const Tensor& x, Mode mode);
  /// N×C_last×g×g → N×D×g×g in (0, 1).
  Tensor add_on(const Tensor& x);
  Tensor forward(const Tensor& x, Mode mode) { return add_on(trunk(x, mode)); }

  std::vector<Tensor> trunk_parameters();
  std::vector<Tensor> add_on_parameters();
  /// Every tensor including batchnorm buffers, in a fixed order.
  std::vector<NamedTensor> named_tensors();

  /// Input rectangle seen by latent cell (row i, column j), clipped to the
  /// image.
  Rect receptive_field(int i, int j) const;

  std::vector<ConvBlock>& blocks() { return blocks_; }
  Tensor& add_on_weight(int k) { return k == 0 ? a1_ : a2_; }
  Tensor& add_on_bias(int k) { return k == 0 ? ab1_ : ab2_; }

 private:
  BackboneConfig cfg_;
  std::vector<ConvBlock> blocks_;
  Tensor a1_, ab1_, a2_, ab2_;
};

/// Unclipped receptive field geometry of one latent cell: jump between
/// neighbouring cells and the side length of the field.
struct FieldGeometry {
  int jump = 1;
  int size = 1;
  double first_center = 0.5;  // continuous pixel coordinate of cell 0's centre
};
FieldGeometry field_geometry(const BackboneConfig& cfg);

Backbone build_backbone(const BackboneConfig& cfg, std::uint64_t seed);

/// Eval-mode forward pass, checking the input extent.
Tensor extract_features(Backbone& backbone, const Tensor& batch, Mode mode = Mode::eval);

}  // namespace ppks
