#include "ppks/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <Eigen/Dense>

#include "format.hpp"
#include "ppks/error.hpp"
#include "ppks/rng.hpp"
#include "ppks/training.hpp"

namespace ppks {

void EmbeddingConfig::validate(std::size_t points) const {
  if (n_components != 3) throw ValueError("embedding: n_components must be 3");
  if (k_neighbors < 1 || static_cast<std::size_t>(k_neighbors) >= points) {
    throw ValueError("embedding: k_neighbors (" + std::to_string(k_neighbors) + ") must be in [1, " +
                     std::to_string(points) + ")");
  }
  if (!(min_dist >= 0.0) || !(spread > 0.0)) throw ValueError("embedding: min_dist ≥ 0 and spread > 0 required");
  if (epochs < 1 || negative_samples < 0 || !(learning_rate > 0.0)) {
    throw ValueError("embedding: epochs ≥ 1, negative_samples ≥ 0 and learning_rate > 0 required");
  }
}

Matrix activation_vectors(PPNet& model, const std::vector<const Image*>& images, const NormalizationStats& stats) {
  if (images.empty()) throw ValueError("activation_vectors: no images");
  const Tensor scores = activation_scores(model, images, stats);
  Matrix out(scores.dim(0), scores.dim(1));
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = scores.ptr()[i];
  return out;
}

namespace {

double row_distance(const Matrix& a, Eigen::Index i, const double* b) {
  double acc = 0.0;
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    const double d = a(i, c) - b[c];
    acc += d * d;
  }
  return std::sqrt(acc);
}

// k nearest rows of `points` to `query`, skipping `self`.
void nearest(const Matrix& points, const double* query, Eigen::Index self, int k, int* idx, double* dist) {
  std::vector<std::pair<double, int>> all;
  all.reserve(points.rows());
  for (Eigen::Index j = 0; j < points.rows(); ++j)
    if (j != self) all.emplace_back(row_distance(points, j, query), static_cast<int>(j));
  std::partial_sort(all.begin(), all.begin() + k, all.end());
  for (int t = 0; t < k; ++t) {
    idx[t] = all[t].second;
    dist[t] = all[t].first;
  }
}

double smooth_sum(const double* d, int k, double rho, double sigma) {
  double s = 0.0;
  for (int t = 0; t < k; ++t) s += std::exp(-std::max(0.0, d[t] - rho) / sigma);
  return s;
}

// σ with Σ exp(−max(0, d − ρ)/σ) = log2 k. Points whose neighbours all sit
// at ρ cannot reach the target and keep σ = 1 (all weights 1).
double smooth_sigma(const double* d, int k, double rho) {
  const double target = std::log2(static_cast<double>(k));
  bool flat = true;
  for (int t = 0; t < k; ++t) flat &= d[t] - rho <= 0.0;
  if (flat) return 1.0;
  double lo = 1e-8, hi = 1e8;
  for (int it = 0; it < 64; ++it) {
    const double mid = 0.5 * (lo + hi);
    (smooth_sum(d, k, rho, mid) > target ? hi : lo) = mid;
  }
  return 0.5 * (lo + hi);
}

// Attractive gradient coefficient of log(1/(1 + a·d^{2b})) in d².
double attract(double d2, double a, double b) {
  if (d2 <= 0.0) return 0.0;
  return -2.0 * a * b * std::pow(d2, b - 1.0) / (a * std::pow(d2, b) + 1.0);
}

double clip4(double v) { return std::clamp(v, -4.0, 4.0); }

}  // namespace

KnnGraph knn_graph(const Matrix& points, int k) {
  const auto m = static_cast<std::size_t>(points.rows());
  if (k < 1 || static_cast<std::size_t>(k) >= m) {
    throw ValueError("knn_graph: k = " + std::to_string(k) + " needs more than k points, got " + std::to_string(m));
  }
  KnnGraph g;
  g.k = k;
  g.indices.resize(m * k);
  g.distances.resize(m * k);
  std::vector<double> row(points.cols());
  for (std::size_t i = 0; i < m; ++i) {
    for (Eigen::Index c = 0; c < points.cols(); ++c) row[c] = points(i, c);
    nearest(points, row.data(), static_cast<Eigen::Index>(i), k, &g.indices[i * k], &g.distances[i * k]);
  }
  return g;
}

double membership_sum(const KnnGraph& knn, std::size_t i, double rho, double sigma) {
  return smooth_sum(&knn.distances[i * knn.k], knn.k, rho, sigma);
}

FuzzyGraph fuzzy_graph(const KnnGraph& knn) {
  FuzzyGraph g;
  g.points = knn.points();
  const int k = knn.k;
  std::map<std::pair<int, int>, double> w;
  for (std::size_t i = 0; i < g.points; ++i) {
    const double* d = &knn.distances[i * k];
    const double rho = d[0];
    const double sigma = smooth_sigma(d, k, rho);
    g.rho.push_back(rho);
    g.sigma.push_back(sigma);
    for (int t = 0; t < k; ++t) {
      const Edge e{static_cast<int>(i), knn.indices[i * k + t], std::exp(-std::max(0.0, d[t] - rho) / sigma)};
      g.directed.push_back(e);
      w[{e.i, e.j}] = e.weight;
    }
  }
  std::map<std::pair<int, int>, double> sym;
  for (const auto& [key, wij] : w) {
    const auto back = w.find({key.second, key.first});
    const double wji = back == w.end() ? 0.0 : back->second;
    const double v = wij + wji - wij * wji;
    sym[key] = v;
    sym[{key.second, key.first}] = v;
  }
  for (const auto& [key, v] : sym)
    if (v > 0.0) g.edges.push_back({key.first, key.second, v});
  return g;
}

std::array<double, 2> fit_ab(double min_dist, double spread) {
  constexpr int kPoints = 300;
  std::vector<double> x(kPoints), y(kPoints);
  for (int t = 0; t < kPoints; ++t) {
    x[t] = 3.0 * spread * t / (kPoints - 1);
    y[t] = x[t] < min_dist ? 1.0 : std::exp(-(x[t] - min_dist) / spread);
  }
  auto sse = [&](double a, double b) {
    double s = 0.0;
    for (int t = 0; t < kPoints; ++t) {
      const double r = 1.0 / (1.0 + a * std::pow(x[t], 2.0 * b)) - y[t];
      s += r * r;
    }
    return s;
  };
  // Levenberg-Marquardt from (1, 1)
  double a = 1.0, b = 1.0, lambda = 1e-3, cost = sse(a, b);
  for (int it = 0; it < 500; ++it) {
    Eigen::Matrix2d jtj = Eigen::Matrix2d::Zero();
    Eigen::Vector2d jtr = Eigen::Vector2d::Zero();
    for (int t = 0; t < kPoints; ++t) {
      const double u = x[t] > 0.0 ? std::pow(x[t], 2.0 * b) : 0.0;
      const double f = 1.0 / (1.0 + a * u);
      const double r = f - y[t];
      const Eigen::Vector2d jac(-u * f * f, x[t] > 0.0 ? -a * u * 2.0 * std::log(x[t]) * f * f : 0.0);
      jtj += jac * jac.transpose();
      jtr += jac * r;
    }
    bool improved = false;
    while (lambda < 1e12) {
      Eigen::Matrix2d damped = jtj;
      damped.diagonal() *= 1.0 + lambda;
      const Eigen::Vector2d step = damped.ldlt().solve(-jtr);
      const double na = a + step(0), nb = b + step(1);
      const double nc = na > 0.0 && nb > 0.0 ? sse(na, nb) : INFINITY;
      if (nc < cost) {
        const double gain = cost - nc;
        a = na;
        b = nb;
        cost = nc;
        lambda = std::max(lambda / 10.0, 1e-12);
        improved = gain > 1e-15 * cost;
        break;
      }
      lambda *= 10.0;
    }
    if (!improved) break;
  }
  return {a, b};
}

Matrix initial_layout(const FuzzyGraph& graph, int n_components, std::uint64_t seed, bool* spectral) {
  const auto m = static_cast<Eigen::Index>(graph.points);
  // union-find connectivity
  std::vector<int> parent(m);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](int v) {
    while (parent[v] != v) v = parent[v] = parent[parent[v]];
    return v;
  };
  for (const Edge& e : graph.edges) parent[find(e.i)] = find(e.j);
  int components = 0;
  for (int v = 0; v < m; ++v) components += find(v) == v;

  constexpr Eigen::Index kMaxSpectral = 4000;
  if (components == 1 && m > n_components + 1 && m <= kMaxSpectral) {
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(m, m);
    for (const Edge& e : graph.edges) w(e.i, e.j) = e.weight;
    const Eigen::VectorXd inv_sqrt = w.rowwise().sum().cwiseSqrt().cwiseInverse();
    Eigen::MatrixXd lap = -(inv_sqrt.asDiagonal() * w * inv_sqrt.asDiagonal());
    lap.diagonal().array() += 1.0;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(lap);
    if (solver.info() == Eigen::Success) {
      Matrix out = solver.eigenvectors().middleCols(1, n_components);
      for (Eigen::Index c = 0; c < out.cols(); ++c) {
        Eigen::Index arg;
        out.col(c).cwiseAbs().maxCoeff(&arg);
        if (out(arg, c) < 0.0) out.col(c) *= -1.0;
      }
      const double scale = out.cwiseAbs().maxCoeff();
      if (scale > 0.0 && std::isfinite(scale)) {
        out *= 10.0 / scale;
        if (spectral) *spectral = true;
        return out;
      }
    }
  }
  Rng rng(derive_seed(seed, "layout_init"));
  Matrix out(m, n_components);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = 0.1 * rng.normal();
  if (spectral) *spectral = false;
  return out;
}

Matrix optimize_layout(const FuzzyGraph& graph, Matrix y, const EmbeddingConfig& cfg, double a, double b) {
  const auto m = static_cast<std::uint64_t>(graph.points);
  if (static_cast<std::uint64_t>(y.rows()) != m) throw ShapeError("optimize_layout: init rows do not match graph");
  const int epochs = cfg.epochs;
  double wmax = 0.0;
  for (const Edge& e : graph.edges) wmax = std::max(wmax, e.weight);
  std::vector<Edge> edges;
  for (const Edge& e : graph.edges)
    if (e.weight >= wmax / epochs) edges.push_back(e);
  const std::size_t n_edges = edges.size();
  std::vector<double> per_sample(n_edges), next(n_edges), per_negative(n_edges), next_negative(n_edges);
  for (std::size_t e = 0; e < n_edges; ++e) {
    per_sample[e] = wmax / edges[e].weight;
    next[e] = per_sample[e];
    per_negative[e] = per_sample[e] / std::max(cfg.negative_samples, 1);
    next_negative[e] = per_negative[e];
  }
  const Eigen::Index dims = y.cols();
  Rng rng(derive_seed(cfg.seed, "layout_sgd"));
  for (int n = 0; n < epochs; ++n) {
    const double alpha = cfg.learning_rate * (1.0 - static_cast<double>(n) / epochs);
    for (std::size_t e = 0; e < n_edges; ++e) {
      if (next[e] > n) continue;
      double* yj = y.row(edges[e].i).data();
      double* yk = y.row(edges[e].j).data();
      double d2 = 0.0;
      for (Eigen::Index c = 0; c < dims; ++c) d2 += (yj[c] - yk[c]) * (yj[c] - yk[c]);
      const double coeff = attract(d2, a, b);
      for (Eigen::Index c = 0; c < dims; ++c) {
        const double g = clip4(coeff * (yj[c] - yk[c]));
        yj[c] += g * alpha;
        yk[c] -= g * alpha;
      }
      next[e] += per_sample[e];
      if (cfg.negative_samples == 0) continue;
      const auto negatives = static_cast<int>((n - next_negative[e]) / per_negative[e]);
      for (int s = 0; s < negatives; ++s) {
        const auto other = static_cast<int>(rng.below(m));
        if (other == edges[e].i) continue;
        const double* yo = y.row(other).data();
        double q2 = 0.0;
        for (Eigen::Index c = 0; c < dims; ++c) q2 += (yj[c] - yo[c]) * (yj[c] - yo[c]);
        const double rc = q2 > 0.0 ? 2.0 * b / ((0.001 + q2) * (a * std::pow(q2, b) + 1.0)) : 0.0;
        for (Eigen::Index c = 0; c < dims; ++c) yj[c] += (rc > 0.0 ? clip4(rc * (yj[c] - yo[c])) : 4.0) * alpha;
      }
      next_negative[e] += negatives * per_negative[e];
    }
    if (!y.allFinite()) {
      throw DivergenceError("optimize_layout: non-finite coordinate at epoch " + std::to_string(n + 1) + " of " +
                            std::to_string(epochs));
    }
  }
  return y;
}

Embedding embed(const Matrix& vectors, const EmbeddingConfig& cfg) {
  cfg.validate(static_cast<std::size_t>(vectors.rows()));
  Embedding out;
  out.knn = knn_graph(vectors, cfg.k_neighbors);
  const FuzzyGraph graph = fuzzy_graph(out.knn);
  const auto [a, b] = fit_ab(cfg.min_dist, cfg.spread);
  out.a = a;
  out.b = b;
  out.coords = optimize_layout(graph, initial_layout(graph, cfg.n_components, cfg.seed, &out.spectral), cfg, a, b);
  return out;
}

std::vector<double> knn_purity_per_point(const Matrix& coords, std::span<const int> labels, int k) {
  if (labels.size() != static_cast<std::size_t>(coords.rows())) throw ShapeError("knn_purity: label count mismatch");
  const KnnGraph g = knn_graph(coords, k);
  std::vector<double> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    int same = 0;
    for (int t = 0; t < k; ++t) same += labels[g.indices[i * k + t]] == labels[i];
    out[i] = static_cast<double>(same) / k;
  }
  return out;
}

double knn_purity(const Matrix& coords, std::span<const int> labels, int k) {
  const auto per = knn_purity_per_point(coords, labels, k);
  return std::accumulate(per.begin(), per.end(), 0.0) / static_cast<double>(per.size());
}

ProjectedPoint project_point(const Matrix& train_vectors, const Embedding& train, std::span<const int> train_labels,
                             std::span<const double> vector, int label, const EmbeddingConfig& cfg, int purity_k) {
  const auto m = static_cast<std::size_t>(train_vectors.rows());
  cfg.validate(m);
  if (vector.size() != static_cast<std::size_t>(train_vectors.cols())) {
    throw ShapeError("project_point: vector length does not match training vectors");
  }
  if (train_labels.size() != m || static_cast<std::size_t>(train.coords.rows()) != m) {
    throw ShapeError("project_point: training labels/coordinates do not match training vectors");
  }
  if (purity_k < 1 || static_cast<std::size_t>(purity_k) > m) throw ValueError("project_point: bad purity_k");
  const int k = cfg.k_neighbors;
  ProjectedPoint p;
  p.neighbors.resize(k);
  std::vector<double> d(k);
  nearest(train_vectors, vector.data(), -1, k, p.neighbors.data(), d.data());
  const double sigma = smooth_sigma(d.data(), k, d[0]);
  std::vector<double> w(k);
  double total = 0.0;
  for (int t = 0; t < k; ++t) total += w[t] = std::exp(-std::max(0.0, d[t] - d[0]) / sigma);
  const Eigen::Index dims = train.coords.cols();
  p.coords = Eigen::RowVectorXd::Zero(dims);
  for (int t = 0; t < k; ++t) p.coords += (w[t] / total) * train.coords.row(p.neighbors[t]);
  for (int t = 0; t < k; ++t) {
    const auto target = train.coords.row(p.neighbors[t]);
    const double d2 = (p.coords - target).squaredNorm();
    const double coeff = attract(d2, train.a, train.b);
    for (Eigen::Index c = 0; c < dims; ++c) p.coords(c) += clip4(coeff * (p.coords(c) - target(c))) * w[t] * cfg.learning_rate;
  }
  std::vector<double> here(p.coords.data(), p.coords.data() + dims);
  std::vector<int> idx(purity_k);
  std::vector<double> dist(purity_k);
  nearest(train.coords, here.data(), -1, purity_k, idx.data(), dist.data());
  int same = 0;
  for (int j : idx) same += train_labels[j] == label;
  p.certainty = static_cast<double>(same) / purity_k;
  return p;
}

void write_embedding_csv(const std::filesystem::path& path, const Matrix& coords, const std::vector<PointInfo>& info) {
  if (info.size() != static_cast<std::size_t>(coords.rows()) || coords.cols() != 3) {
    throw ShapeError("write_embedding_csv: expected M×3 coordinates with M point records");
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "umap1,umap2,umap3,label,split,point_id\n";
  for (Eigen::Index i = 0; i < coords.rows(); ++i) {
    out << decimal6(coords(i, 0)) << ',' << decimal6(coords(i, 1)) << ',' << decimal6(coords(i, 2)) << ','
        << info[i].label << ',' << info[i].split << ',' << info[i].id << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

void write_embedding_png(const std::filesystem::path& path, const Matrix& coords, std::span<const int> labels,
                         std::span<const std::string> splits) {
  if (labels.size() != static_cast<std::size_t>(coords.rows()) || splits.size() != labels.size() || coords.cols() != 3) {
    throw ShapeError("write_embedding_png: expected M×3 coordinates with M labels and splits");
  }
  static constexpr float palette[][3] = {{0.89f, 0.10f, 0.11f}, {0.22f, 0.49f, 0.72f}, {0.30f, 0.69f, 0.29f},
                                         {0.60f, 0.31f, 0.64f}, {1.00f, 0.50f, 0.00f}, {0.65f, 0.34f, 0.16f},
                                         {0.97f, 0.51f, 0.75f}, {0.40f, 0.40f, 0.40f}};
  constexpr int panel = 256, margin = 8;
  Image img(3 * panel, panel, 1.0f);
  const std::array<std::pair<int, int>, 3> axes{{{0, 1}, {0, 2}, {1, 2}}};
  for (int q = 0; q < 3; ++q) {
    const auto [ax, ay] = axes[q];
    auto span_of = [&](int c) {
      const double lo = coords.col(c).minCoeff(), hi = coords.col(c).maxCoeff();
      return std::pair{lo, hi > lo ? hi - lo : 1.0};
    };
    const auto [x0, xw] = span_of(ax);
    const auto [y0, yw] = span_of(ay);
    for (Eigen::Index i = 0; i < coords.rows(); ++i) {
      const int px = q * panel + margin + static_cast<int>((coords(i, ax) - x0) / xw * (panel - 2 * margin - 1));
      const int py = panel - 1 - margin - static_cast<int>((coords(i, ay) - y0) / yw * (panel - 2 * margin - 1));
      const bool fresh = splits[i] == "new";
      const int r = fresh ? 3 : 1;
      const float* colour = palette[static_cast<std::size_t>(std::max(labels[i], 0)) % 8];
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int x = std::clamp(px + dx, 0, img.width - 1), y = std::clamp(py + dy, 0, img.height - 1);
          const bool rim = fresh && (std::abs(dx) == r || std::abs(dy) == r);
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = rim ? 0.0f : colour[c];
        }
    }
  }
  write_png(path, img);
}

}  // namespace ppks
