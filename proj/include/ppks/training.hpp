#pragma once

// Staged training: warm-up (frozen trunk), joint training with cluster and
// separation costs and periodic pushes, a final push, then the sparse
// last-layer stage. Also the plain baseline trained under the same budget.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ppks/data.hpp"
#include "ppks/model.hpp"
#include "ppks/optim.hpp"

namespace ppks {

struct TrainConfig {
  int epochs_warmup = 3;
  int epochs_joint = 30;
  int push_every = 10;
  int epochs_last_layer = 10;
  float lambda_clst = 0.8f;
  float lambda_sep = 0.08f;
  float lambda_l1 = 1e-4f;
  int batch_size = 32;
  int prototypes_per_class = 10;
  OptimizerSpec warmup_optimizer = AdamSpec{3e-3f};
  OptimizerSpec joint_optimizer = AdamSpec{1e-3f};
  OptimizerSpec last_layer_optimizer = AdamSpec{1e-3f};
  std::uint64_t seed = 0;
  /// Measure test accuracy after every epoch (history only; never used for
  /// selection).
  bool track_test_accuracy = true;

  void validate() const;
};

/// Per class, min over its prototypes and cells; mean over images of the
/// own-class (cluster) or other-class (separation) minimum distance.
Tensor cluster_cost(const Tensor& distances, std::span<const int> labels, const std::vector<int>& class_of);
Tensor separation_cost(const Tensor& distances, std::span<const int> labels, const std::vector<int>& class_of);

struct LossTerms {
  Tensor total;
  double ce = 0.0;
  double cluster = 0.0;
  double separation = 0.0;
  double l1 = 0.0;
};

/// CE + λ_clst·cluster − λ_sep·separation.
LossTerms joint_loss(const PPNetOutput& out, std::span<const int> labels, const std::vector<int>& class_of,
                     float lambda_clst, float lambda_sep);

/// Mask of head entries (k, j) with class_of(j) ≠ k.
std::vector<std::uint8_t> off_class_mask(const std::vector<int>& class_of, int num_classes);

struct EpochRecord {
  std::string stage;  // warmup | joint | push | last_layer | baseline
  int epoch = 0;
  double loss = 0.0, ce = 0.0, cluster = 0.0, separation = 0.0, l1 = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> test_accuracy;
  std::optional<double> diversity;
};

struct TrainSummary {
  double pre_push_accuracy = 0.0;   // test accuracy right before the final push
  double post_push_accuracy = 0.0;  // after the final push, before the last layer
  double final_accuracy = 0.0;
  double diversity = 0.0;
  std::vector<EpochRecord> history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Raw training images in split order with their labels, used by push.
struct LabeledImages {
  std::vector<const Image*> images;
  std::vector<int> labels;
  std::vector<std::string> ids;
};
LabeledImages labeled(const std::vector<Patch>& patches);

/// Replaces every prototype with the nearest latent cell of an own-class
/// training image (ties: lowest image index, then row-major cell) and
/// records provenance.
void push_prototypes(PPNet& model, const LabeledImages& train, const NormalizationStats& stats, int batch_size = 32);

/// Eval-mode predictions; logits are returned when `logits_out` is set.
std::vector<int> predict(PPNet& model, const std::vector<const Image*>& images, const NormalizationStats& stats,
                         int batch_size = 32, std::vector<std::vector<float>>* logits_out = nullptr);
std::vector<int> predict(BaselineNet& model, const std::vector<const Image*>& images,
                         const NormalizationStats& stats, int batch_size = 32,
                         std::vector<std::vector<float>>* logits_out = nullptr);

/// Eval-mode top-activation scores, N×P.
Tensor activation_scores(PPNet& model, const std::vector<const Image*>& images, const NormalizationStats& stats,
                         int batch_size = 32);

/// Trains the head on fixed scores with CE + λ_L1 Σ_off |w|.
std::vector<EpochRecord> train_last_layer(PPNet& model, const Tensor& scores, std::span<const int> labels,
                                          const TrainConfig& cfg, int epochs, const EpochCallback& on_epoch = {});

/// Full schedule on the dataset's training split (with on-the-fly
/// augmentation). Throws DivergenceError naming stage, epoch and batch.
TrainSummary fit(PPNet& model, const Dataset& dataset, const TrainConfig& cfg, const EpochCallback& on_epoch = {});

/// Trunk + average pooling + dense head, trained with CE for
/// epochs_warmup + epochs_joint epochs using the joint optimizer.
TrainSummary baseline_train(BaselineNet& model, const Dataset& dataset, const TrainConfig& cfg,
                            const EpochCallback& on_epoch = {});

double accuracy(std::span<const int> truth, std::span<const int> predicted);

}  // namespace ppks
