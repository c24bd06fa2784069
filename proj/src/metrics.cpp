#include "ppks/metrics.hpp"

#include <fstream>

#include <json.hpp>

#include "format.hpp"
#include "ppks/error.hpp"

namespace ppks {

MetricsReport weighted_metrics(std::span<const int> truth, std::span<const int> predicted, int num_classes) {
  if (truth.empty()) throw ValueError("weighted_metrics: no samples");
  if (truth.size() != predicted.size()) throw ShapeError("weighted_metrics: length mismatch");
  if (num_classes < 1) throw ValueError("weighted_metrics: need at least one class");
  const auto k = static_cast<std::size_t>(num_classes);
  MetricsReport r;
  r.num_classes = num_classes;
  r.confusion.assign(k * k, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= num_classes || predicted[i] < 0 || predicted[i] >= num_classes) {
      throw ValueError("weighted_metrics: label outside [0, " + std::to_string(num_classes) + ")");
    }
    ++r.confusion[truth[i] * k + predicted[i]];
  }
  const auto total = static_cast<double>(truth.size());
  long trace = 0;
  r.per_class.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    long tp = r.confusion[c * k + c], row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += r.confusion[c * k + j];
      col += r.confusion[j * k + c];
    }
    trace += tp;
    ClassMetrics& m = r.per_class[c];
    m.support = row;
    m.precision = col ? static_cast<double>(tp) / col : 0.0;
    m.recall = row ? static_cast<double>(tp) / row : 0.0;
    m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    const double w = static_cast<double>(row) / total;
    r.precision += w * m.precision;
    r.recall += w * m.recall;
    r.f1 += w * m.f1;
  }
  r.accuracy = static_cast<double>(trace) / total;
  return r;
}

std::string metrics_json(const MetricsReport& r, const std::vector<std::string>& class_names) {
  using json = nlohmann::ordered_json;
  json j;
  j["accuracy"] = round6(r.accuracy);
  j["weighted"] = {{"precision", round6(r.precision)}, {"recall", round6(r.recall)}, {"f1", round6(r.f1)}};
  json per = json::array();
  for (int c = 0; c < r.num_classes; ++c) {
    const auto& m = r.per_class[c];
    per.push_back({{"class", c < static_cast<int>(class_names.size()) ? class_names[c] : std::to_string(c)},
                   {"precision", round6(m.precision)},
                   {"recall", round6(m.recall)},
                   {"f1", round6(m.f1)},
                   {"support", m.support}});
  }
  j["per_class"] = per;
  json confusion = json::array();
  for (int t = 0; t < r.num_classes; ++t) {
    json row = json::array();
    for (int p = 0; p < r.num_classes; ++p) row.push_back(r.at(t, p));
    confusion.push_back(row);
  }
  j["confusion"] = confusion;
  return j.dump(2);
}

void write_predictions_csv(const std::filesystem::path& path, const std::vector<PredictionRow>& rows,
                           const std::vector<std::string>& class_names) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "image_id,true,pred,max_logit\n";
  for (const auto& r : rows) {
    out << r.image_id << ',' << class_names.at(r.truth) << ',' << class_names.at(r.predicted) << ','
        << decimal6(r.max_logit) << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace ppks
