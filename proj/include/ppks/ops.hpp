#pragma once

// Differentiable operations over ppks::Tensor. Every op validates its
// shapes, computes the forward value eagerly and, when recording, pushes a
// backward rule onto the active tape.

#include <cstdint>
#include <span>
#include <vector>

#include "ppks/tensor.hpp"

namespace ppks {

enum class Mode { train, eval };

/// Cross-correlation of N×C×H×W input with F×C×kh×kw kernel, zero padding.
/// Each output sums channel-major, then kernel row, then kernel column,
/// starting from 0; the optional per-filter bias is added last.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int padding);
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

/// 2×2 window, stride 2. Gradient goes to the first maximum in scan order.
Tensor maxpool2d(const Tensor& x);

struct BatchNormState {
  Tensor gamma;         // C, trainable
  Tensor beta;          // C, trainable
  Tensor running_mean;  // C, buffer
  Tensor running_var;   // C, buffer
};

/// Per-channel batch normalization. Train mode normalizes with the batch
/// mean and biased variance and updates the running buffers with momentum
/// 0.1; eval mode uses the running buffers.
Tensor batchnorm2d(const Tensor& x, BatchNormState& state, Mode mode, float eps = 1e-5f,
                   float momentum = 0.1f);

/// y = x·Wᵀ (+ bias), x: N×Din, W: Dout×Din, bias: Dout (may be undefined).
Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor dense(const Tensor& x, const Tensor& weight);

/// Mean over the batch of −log softmax(logits)[label].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

/// N×... → N×(product of remaining extents), recorded on the tape.
Tensor flatten(const Tensor& x);

/// N×C×H×W → N×C spatial mean.
Tensor global_avg_pool(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
/// Sum of all entries, as a 1-element tensor.
Tensor sum(const Tensor& a);

/// Squared L2 distance between every latent cell and every prototype:
/// features N×D×H×W, prototypes P×D → N×P×H×W.
Tensor distance_map(const Tensor& features, const Tensor& prototypes);

inline constexpr float kSimilarityEpsilon = 1e-4f;

/// log((d + 1) / (d + ε)); throws on negative d.
float similarity(float distance);

/// Elementwise similarity over a distance tensor.
Tensor similarity(const Tensor& distances);

/// N×P×H×W → N×P reductions over the spatial grid; ties resolve to the
/// first cell in row-major order. `cells` receives the flat winning index.
Tensor spatial_max(const Tensor& x, std::vector<std::int32_t>* cells = nullptr);
Tensor spatial_min(const Tensor& x, std::vector<std::int32_t>* cells = nullptr);

/// Mean over rows of the minimum over masked columns of an N×P matrix.
/// Throws if some row has no masked column.
Tensor masked_min_mean(const Tensor& x, const std::vector<std::uint8_t>& mask);

/// Σ |w| over entries where mask is set.
Tensor masked_l1(const Tensor& w, const std::vector<std::uint8_t>& mask);

}  // namespace ppks
