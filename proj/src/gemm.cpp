#include "gemm.hpp"

#include <algorithm>
#include <vector>

namespace ppks::detail {

namespace {

constexpr std::size_t kRowTile = 8;
constexpr std::size_t kColTile = 32;

}  // namespace

void gemm(std::size_t m, std::size_t n, std::size_t k, const float* a, const float* b, float* c,
          bool accumulate) {
  if (m == 0 || n == 0) return;
  std::vector<float> panel(k * kColTile);
  for (std::size_t j0 = 0; j0 < n; j0 += kColTile) {
    const std::size_t nr = std::min(kColTile, n - j0);
    for (std::size_t kk = 0; kk < k; ++kk) {
      float* dst = panel.data() + kk * kColTile;
      const float* src = b + kk * n + j0;
      std::size_t j = 0;
      for (; j < nr; ++j) dst[j] = src[j];
      for (; j < kColTile; ++j) dst[j] = 0.0f;
    }
    for (std::size_t i0 = 0; i0 < m; i0 += kRowTile) {
      const std::size_t mr = std::min(kRowTile, m - i0);
      float acc[kRowTile][kColTile];
      for (auto& row : acc) std::fill(std::begin(row), std::end(row), 0.0f);
      const float* rows[kRowTile];
      for (std::size_t i = 0; i < kRowTile; ++i) rows[i] = a + std::min(i0 + i, m - 1) * k;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const float* bp = panel.data() + kk * kColTile;
        for (std::size_t i = 0; i < kRowTile; ++i) {
          const float av = rows[i][kk];
#pragma GCC ivdep
          for (std::size_t j = 0; j < kColTile; ++j) acc[i][j] += av * bp[j];
        }
      }
      for (std::size_t i = 0; i < mr; ++i) {
        float* out = c + (i0 + i) * n + j0;
        if (accumulate) {
          for (std::size_t j = 0; j < nr; ++j) out[j] += acc[i][j];
        } else {
          for (std::size_t j = 0; j < nr; ++j) out[j] = acc[i][j];
        }
      }
    }
  }
}

void transpose(std::size_t rows, std::size_t cols, const float* src, float* dst) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t r0 = 0; r0 < rows; r0 += kBlock) {
    for (std::size_t c0 = 0; c0 < cols; c0 += kBlock) {
      const std::size_t r1 = std::min(rows, r0 + kBlock);
      const std::size_t c1 = std::min(cols, c0 + kBlock);
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t col = c0; col < c1; ++col) dst[col * rows + r] = src[r * cols + col];
      }
    }
  }
}

}  // namespace ppks::detail
