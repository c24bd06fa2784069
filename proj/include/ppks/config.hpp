#pragma once

// Run configuration for the command-line pipeline and its JSON form.

#include <cstdint>
#include <string>
#include <string_view>

#include "ppks/backbone.hpp"
#include "ppks/data.hpp"
#include "ppks/embedding.hpp"
#include "ppks/training.hpp"

namespace ppks {

struct ExplainConfig {
  int top_k = 3;
  int limit = 6;  // images explained when no ids are given
};

struct RunConfig {
  std::uint64_t seed = 0;
  DatasetManifest dataset;
  BackboneConfig backbone;
  TrainConfig train;
  EmbeddingConfig embedding;
  ExplainConfig explain;

  /// Sets the run seed and every component seed to `seed`.
  void apply_seed(std::uint64_t seed);
  void validate() const;
};

/// Overlays the keys present in `text` onto the defaults. Unknown keys and
/// wrong types raise ValueError.
RunConfig config_from_json(std::string_view text);
std::string config_to_json(const RunConfig& config);

std::string train_config_json(const TrainConfig& config);
std::string summary_json(const TrainSummary& summary);

}  // namespace ppks
