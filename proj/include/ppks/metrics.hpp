#pragma once

// Support-weighted classification metrics and the per-image predictions file.

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace ppks {

struct ClassMetrics {
  double precision = 0.0, recall = 0.0, f1 = 0.0;
  long support = 0;
  friend bool operator==(const ClassMetrics&, const ClassMetrics&) = default;
};

struct MetricsReport {
  int num_classes = 0;
  std::vector<long> confusion;  // K×K, row = true class, column = predicted
  std::vector<ClassMetrics> per_class;
  double accuracy = 0.0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;  // weighted by support

  long at(int truth, int pred) const { return confusion[static_cast<std::size_t>(truth) * num_classes + pred]; }
  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

/// Zero denominators give 0 for precision, recall and F1.
MetricsReport weighted_metrics(std::span<const int> truth, std::span<const int> predicted, int num_classes);

std::string metrics_json(const MetricsReport& report, const std::vector<std::string>& class_names);

struct PredictionRow {
  std::string image_id;
  int truth = 0, predicted = 0;
  double max_logit = 0.0;
};

void write_predictions_csv(const std::filesystem::path& path, const std::vector<PredictionRow>& rows,
                           const std::vector<std::string>& class_names);

}  // namespace ppks
