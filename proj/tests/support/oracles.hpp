#pragma once

// Brute-force reference implementations. Plain loops straight from the
// definitions; accumulation order is spelled out where results must match
// bit for bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ppks/tensor.hpp"

namespace ppks::testing {

// Six nested loops, channel-major accumulation from zero.
inline std::vector<float> conv_oracle(const Tensor& x, const Tensor& k, int stride, int pad) {
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int f = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  const int oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  std::vector<float> out;
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < f; ++o)
      for (int y = 0; y < oh; ++y)
        for (int xx = 0; xx < ow; ++xx) {
          float acc = 0.0f;
          for (int ch = 0; ch < c; ++ch)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx) {
                const int iy = y * stride + ky - pad, ix = xx * stride + kx - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
                acc += x.data()[((b * c + ch) * h + iy) * w + ix] * k.data()[((o * c + ch) * kh + ky) * kw + kx];
              }
          out.push_back(acc);
        }
  return out;
}

inline std::vector<float> pool_oracle(const Tensor& x) {
  const int n = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<float> out;
  for (int p = 0; p < n; ++p)
    for (int y = 0; y < h / 2; ++y)
      for (int xx = 0; xx < w / 2; ++xx) {
        float m = -INFINITY;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) m = std::max(m, x.data()[(p * h + 2 * y + dy) * w + 2 * xx + dx]);
        out.push_back(m);
      }
  return out;
}

inline std::vector<float> dense_oracle(const Tensor& x, const Tensor& w) {
  std::vector<float> out;
  for (std::size_t r = 0; r < x.dim(0); ++r)
    for (std::size_t o = 0; o < w.dim(0); ++o) {
      float acc = 0.0f;
      for (std::size_t i = 0; i < x.dim(1); ++i) acc += x.data()[r * x.dim(1) + i] * w.data()[o * w.dim(1) + i];
      out.push_back(acc);
    }
  return out;
}

/// Squared distance between latent cell (n, i, j) and prototype p, summed
/// over d in order.
inline float distance_oracle(const Tensor& z, const Tensor& protos, std::size_t n, std::size_t p, std::size_t i,
                             std::size_t j) {
  const std::size_t D = z.dim(1), H = z.dim(2), W = z.dim(3);
  float acc = 0.0f;
  for (std::size_t d = 0; d < D; ++d) {
    const float diff = z.data()[((n * D + d) * H + i) * W + j] - protos.data()[p * D + d];
    acc += diff * diff;
  }
  return acc;
}

/// Mean over images of the own-class (`own`) or other-class minimum distance.
inline double cost_oracle(const Tensor& d, const std::vector<int>& labels, const std::vector<int>& class_of,
                          bool own) {
  const std::size_t cells = d.dim(2) * d.dim(3);
  double total = 0.0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    float best = std::numeric_limits<float>::infinity();
    for (std::size_t p = 0; p < class_of.size(); ++p) {
      if ((class_of[p] == labels[n]) != own) continue;
      for (std::size_t c = 0; c < cells; ++c) best = std::min(best, d.data()[(n * d.dim(1) + p) * cells + c]);
    }
    total += best;
  }
  return total / static_cast<double>(labels.size());
}

struct PushChoice {
  std::size_t image = 0, cell = 0;
  float distance = 0.0f;
};

/// Exhaustive nearest own-class latent cell per prototype; strict < keeps the
/// lowest image, then the lowest row-major cell.
inline std::vector<PushChoice> push_oracle(const Tensor& z, const Tensor& protos, const std::vector<int>& labels,
                                           const std::vector<int>& class_of) {
  const std::size_t D = z.dim(1), cells = z.dim(2) * z.dim(3);
  std::vector<PushChoice> out;
  for (std::size_t p = 0; p < class_of.size(); ++p) {
    PushChoice best{0, 0, std::numeric_limits<float>::infinity()};
    for (std::size_t n = 0; n < labels.size(); ++n) {
      if (labels[n] != class_of[p]) continue;
      for (std::size_t c = 0; c < cells; ++c) {
        float acc = 0.0f;
        for (std::size_t d = 0; d < D; ++d) {
          const float diff = z.data()[(n * D + d) * cells + c] - protos.data()[p * D + d];
          acc += diff * diff;
        }
        if (acc < best.distance) best = {n, c, acc};
      }
    }
    out.push_back(best);
  }
  return out;
}

/// Sorted (distance, index) lists of the k nearest other points.
template <class M>
std::vector<std::vector<std::pair<double, int>>> knn_oracle(const M& p, int k) {
  std::vector<std::vector<std::pair<double, int>>> out;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    std::vector<std::pair<double, int>> all;
    for (Eigen::Index j = 0; j < p.rows(); ++j) {
      if (j == i) continue;
      double s = 0.0;
      for (Eigen::Index c = 0; c < p.cols(); ++c) s += (p(i, c) - p(j, c)) * (p(i, c) - p(j, c));
      all.emplace_back(std::sqrt(s), static_cast<int>(j));
    }
    std::stable_sort(all.begin(), all.end(), [](auto& a, auto& b) { return a.first < b.first; });
    all.resize(static_cast<std::size_t>(k));
    out.push_back(std::move(all));
  }
  return out;
}

struct MetricsOracle {
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
};

/// Direct TP/FP/FN counting, one class at a time.
inline MetricsOracle metrics_oracle(const std::vector<int>& t, const std::vector<int>& p, int k) {
  MetricsOracle o;
  const double n = static_cast<double>(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) o.accuracy += t[i] == p[i];
  o.accuracy /= n;
  for (int c = 0; c < k; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (t[i] == c && p[i] == c) tp += 1;
      if (t[i] != c && p[i] == c) fp += 1;
      if (t[i] == c && p[i] != c) fn += 1;
    }
    const double prec = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double rec = tp + fn > 0 ? tp / (tp + fn) : 0.0;
    const double f = prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
    const double w = (tp + fn) / n;
    o.precision += w * prec;
    o.recall += w * rec;
    o.f1 += w * f;
  }
  return o;
}

}  // namespace ppks::testing
