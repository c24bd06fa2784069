#pragma once

#include <cstddef>

namespace ppks::detail {

/// C[M×N] = A[M×K]·B[K×N] (or += when accumulate), all row-major.
/// Every output is a left-to-right sum over ascending k starting at 0, so
/// results equal a naive triple loop bit for bit (given no FMA contraction).
void gemm(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
          bool accumulate);

/// dst[cols×rows] = transpose of src[rows×cols].
void transpose(std::size_t rows, std::size_t cols, const float* src, float* dst);

}  // namespace ppks::detail
