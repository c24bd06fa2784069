#pragma once

// 3-D neighbour embedding of prototype activation vectors: exact kNN, fuzzy
// graph, curve fit, SGD layout with negative sampling, cluster purity and
// CSV/PNG output.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "ppks/model.hpp"

namespace ppks {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct EmbeddingConfig {
  int k_neighbors = 15;
  int n_components = 3;
  double min_dist = 0.1;
  double spread = 1.0;
  int epochs = 200;
  int negative_samples = 5;
  double learning_rate = 1.0;
  std::uint64_t seed = 0;

  void validate(std::size_t points) const;
};

/// Eval-mode top-activation scores, one row per image in the given order.
Matrix activation_vectors(PPNet& model, const std::vector<const Image*>& images, const NormalizationStats& stats);

struct KnnGraph {
  int k = 0;
  std::vector<int> indices;       // M×k, nearest first, ties by index
  std::vector<double> distances;  // M×k Euclidean
  std::size_t points() const { return k ? indices.size() / k : 0; }
};

KnnGraph knn_graph(const Matrix& points, int k);

struct Edge {
  int i = 0, j = 0;
  double weight = 0.0;
  friend bool operator==(const Edge&, const Edge&) = default;
};

struct FuzzyGraph {
  std::size_t points = 0;
  std::vector<double> rho, sigma;
  std::vector<Edge> directed;  // w_ij per kNN entry
  std::vector<Edge> edges;     // symmetrized, both directions, sorted by (i, j)
};

/// Smooth kNN distances (σ by 64-step bisection on [1e-8, 1e8]) and the
/// fuzzy union W = w + wᵀ − w∘wᵀ.
FuzzyGraph fuzzy_graph(const KnnGraph& knn);

/// Σ_j exp(−max(0, d_ij − ρ_i)/σ_i) for point i.
double membership_sum(const KnnGraph& knn, std::size_t i, double rho, double sigma);

/// Least-squares fit of 1/(1 + a·d^{2b}) to the min_dist/spread target curve
/// on 300 points of [0, 3·spread].
std::array<double, 2> fit_ab(double min_dist, double spread = 1.0);

/// Spectral coordinates of a connected graph, seeded Gaussian (σ = 0.1)
/// otherwise. `spectral` reports which one was used.
Matrix initial_layout(const FuzzyGraph& graph, int n_components, std::uint64_t seed, bool* spectral = nullptr);

/// SGD on the attractive/repulsive cross-entropy surrogate starting from
/// `init`. Throws DivergenceError on a non-finite coordinate.
Matrix optimize_layout(const FuzzyGraph& graph, Matrix init, const EmbeddingConfig& cfg, double a, double b);

struct Embedding {
  Matrix coords;
  double a = 0.0, b = 0.0;
  bool spectral = false;
  KnnGraph knn;
};

Embedding embed(const Matrix& vectors, const EmbeddingConfig& cfg);

/// Same-label fraction among each point's k nearest neighbours.
std::vector<double> knn_purity_per_point(const Matrix& coords, std::span<const int> labels, int k = 10);
double knn_purity(const Matrix& coords, std::span<const int> labels, int k = 10);

struct ProjectedPoint {
  Eigen::RowVectorXd coords;
  std::vector<int> neighbors;  // kNN in activation space, training indices
  double certainty = 0.0;      // same-label fraction among embedded neighbours
};

/// Places a held-out activation vector on a frozen training layout: weighted
/// mean of its neighbours' coordinates, then one epoch of attraction.
ProjectedPoint project_point(const Matrix& train_vectors, const Embedding& train, std::span<const int> train_labels,
                             std::span<const double> vector, int label, const EmbeddingConfig& cfg,
                             int purity_k = 10);

struct PointInfo {
  std::string label;
  std::string split;
  std::string id;
};

void write_embedding_csv(const std::filesystem::path& path, const Matrix& coords, const std::vector<PointInfo>& info);
/// Three pairwise scatter panels (1-2, 1-3, 2-3), coloured by class index.
void write_embedding_png(const std::filesystem::path& path, const Matrix& coords, std::span<const int> labels,
                         std::span<const std::string> splits);

}  // namespace ppks
