#include "ppks/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "gemm.hpp"
#include "ppks/error.hpp"

namespace ppks {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

Tensor make_output(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(shape_numel(shape), 0.0f);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": " + what + " is undefined");
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, oh, ow;
  int stride, pad;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t pixels() const { return oh * ow; }
};

// Output columns [lo, hi) whose input column ox·stride + kx − pad is in range.
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t kx) {
  const long off = static_cast<long>(kx) - g.pad;
  const long s = g.stride;
  long lo = off >= 0 ? 0 : (-off + s - 1) / s;
  long hi = (static_cast<long>(g.w) - 1 - off) < 0 ? 0 : (static_cast<long>(g.w) - 1 - off) / s + 1;
  lo = std::min<long>(lo, static_cast<long>(g.ow));
  hi = std::clamp<long>(hi, lo, static_cast<long>(g.ow));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

void im2col(const ConvGeometry& g, const float* in, float* col) {
  const std::size_t pixels = g.pixels();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    const float* plane = in + ch * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        float* row = col + ((ch * g.kh + ky) * g.kw + kx) * pixels;
        const auto [lo, hi] = valid_columns(g, kx);
        const long off = static_cast<long>(kx) - g.pad;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride + static_cast<long>(ky) - g.pad;
          float* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0f);
            continue;
          }
          const float* src = plane + static_cast<std::size_t>(iy) * g.w;
          std::fill(dst, dst + lo, 0.0f);
          if (g.stride == 1) {
            std::copy(src + lo + off, src + hi + off, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[static_cast<long>(ox) * g.stride + off];
          }
          std::fill(dst + hi, dst + g.ow, 0.0f);
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const float* col, float* in) {
  const std::size_t pixels = g.pixels();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    float* plane = in + ch * g.h * g.w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const float* row = col + ((ch * g.kh + ky) * g.kw + kx) * pixels;
        const auto [lo, hi] = valid_columns(g, kx);
        const long off = static_cast<long>(kx) - g.pad;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy) * g.stride + static_cast<long>(ky) - g.pad;
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          float* dst = plane + static_cast<std::size_t>(iy) * g.w;
          const float* src = row + oy * g.ow;
          for (std::size_t ox = lo; ox < hi; ++ox) dst[static_cast<long>(ox) * g.stride + off] += src[ox];
        }
      }
    }
  }
}

}  // namespace

// ---------------------------------------------------------------- conv2d

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
  return conv2d(input, kernel, Tensor(), stride, padding);
}

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride, int padding) {
  require_rank(input, 4, "conv2d", "input");
  require_rank(kernel, 4, "conv2d", "kernel");
  if (stride < 1 || padding < 0) {
    throw ValueError("conv2d: stride must be >= 1 and padding >= 0");
  }
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0), kernel.dim(2),
                 kernel.dim(3), 0, 0, stride, padding};
  if (kernel.dim(1) != g.c) {
    throw ShapeError("conv2d: input has " + std::to_string(g.c) + " channels but kernel expects " +
                     std::to_string(kernel.dim(1)) + " (input " + shape_str(input.shape()) + ", kernel " +
                     shape_str(kernel.shape()) + ")");
  }
  if (g.kh > g.h + 2 * static_cast<std::size_t>(padding) || g.kw > g.w + 2 * static_cast<std::size_t>(padding)) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " larger than padded input " +
                     shape_str(input.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.f)) {
    throw ShapeError("conv2d: bias must have shape [" + std::to_string(g.f) + "], got " + shape_str(bias.shape()));
  }
  g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
  g.ow = (g.w + 2 * padding - g.kw) / stride + 1;

  const bool rec = recording({&input, &kernel, &bias});
  Tensor out = make_output({g.n, g.f, g.oh, g.ow}, rec);
  const std::size_t in_stride = g.c * g.h * g.w;
  const std::size_t out_stride = g.f * g.pixels();
  std::vector<float> col(g.patch() * g.pixels());
  for (std::size_t n = 0; n < g.n; ++n) {
    im2col(g, input.ptr() + n * in_stride, col.data());
    float* o = out.ptr() + n * out_stride;
    detail::gemm(g.f, g.pixels(), g.patch(), kernel.ptr(), col.data(), o, false);
    if (bias.defined()) {
      for (std::size_t f = 0; f < g.f; ++f) {
        const float b = bias.data()[f];
        float* plane = o + f * g.pixels();
        for (std::size_t p = 0; p < g.pixels(); ++p) plane[p] += b;
      }
    }
  }
  if (!rec) return out;

  ImplPtr xi = input.impl(), ki = kernel.impl(), bi = bias.defined() ? bias.impl() : nullptr;
  ImplPtr oi = out.impl();
  std::vector<ImplPtr> inputs{xi, ki};
  if (bi) inputs.push_back(bi);
  active_tape().record(std::move(inputs), oi, [g, xi, ki, bi, oi]() {
    float* dx = grad_sink(xi);
    float* dw = grad_sink(ki);
    float* db = bi ? grad_sink(bi) : nullptr;
    const float* dy = oi->grad.data();
    const std::size_t in_stride = g.c * g.h * g.w;
    const std::size_t out_stride = g.f * g.pixels();
    std::vector<float> col, dy_t, dw_t, kernel_t, dcol;
    if (dw) {
      col.resize(g.patch() * g.pixels());
      dy_t.resize(g.f * g.pixels());
      dw_t.resize(g.patch() * g.f);
    }
    if (dx) {
      kernel_t.resize(g.f * g.patch());
      detail::transpose(g.f, g.patch(), ki->data.data(), kernel_t.data());
      dcol.resize(g.patch() * g.pixels());
    }
    for (std::size_t n = 0; n < g.n; ++n) {
      const float* dyn = dy + n * out_stride;
      if (dw) {
        // dwᵀ = col · dyᵀ keeps the ascending-pixel order of dw = dy · colᵀ
        im2col(g, xi->data.data() + n * in_stride, col.data());
        detail::transpose(g.f, g.pixels(), dyn, dy_t.data());
        detail::gemm(g.patch(), g.f, g.pixels(), col.data(), dy_t.data(), dw_t.data(), false);
        for (std::size_t f = 0; f < g.f; ++f)
          for (std::size_t q = 0; q < g.patch(); ++q) dw[f * g.patch() + q] += dw_t[q * g.f + f];
      }
      if (dx) {
        detail::gemm(g.patch(), g.pixels(), g.f, kernel_t.data(), dyn, dcol.data(), false);
        col2im_add(g, dcol.data(), dx + n * in_stride);
      }
      if (db) {
        for (std::size_t f = 0; f < g.f; ++f) {
          const float* plane = dyn + f * g.pixels();
          float s = 0.0f;
          for (std::size_t p = 0; p < g.pixels(); ++p) s += plane[p];
          db[f] += s;
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------- elementwise

Tensor relu(const Tensor& x) {
  const bool rec = recording({&x});
  Tensor out = make_output(x.shape(), rec);
  const float* in = x.ptr();
  float* o = out.ptr();
  for (std::size_t i = 0; i < x.numel(); ++i) o[i] = in[i] > 0.0f ? in[i] : 0.0f;
  if (rec) {
    ImplPtr xi = x.impl(), oi = out.impl();
    active_tape().record({xi}, oi, [xi, oi]() {
      float* dx = grad_sink(xi);
      if (!dx) return;
      for (std::size_t i = 0; i < xi->data.size(); ++i) {
        if (xi->data[i] > 0.0f) dx[i] += oi->grad[i];
      }
    });
  }
  return out;
}

Tensor sigmoid(const Tensor& x) {
  const bool rec = recording({&x});
  Tensor out = make_output(x.shape(), rec);
  const float* in = x.ptr();
  float* o = out.ptr();
  // keep the result strictly inside (0, 1) in float
  constexpr float lo = std::numeric_limits<float>::min();
  const float hi = std::nextafter(1.0f, 0.0f);
  for (std::size_t i = 0; i < x.numel(); ++i) o[i] = std::clamp(1.0f / (1.0f + std::exp(-in[i])), lo, hi);
  if (rec) {
    ImplPtr xi = x.impl(), oi = out.impl();
    active_tape().record({xi}, oi, [xi, oi]() {
      float* dx = grad_sink(xi);
      if (!dx) return;
      for (std::size_t i = 0; i < xi->data.size(); ++i) {
        const float s = oi->data[i];
        dx[i] += oi->grad[i] * s * (1.0f - s);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- pooling

Tensor maxpool2d(const Tensor& x) {
  require_rank(x, 4, "maxpool2d", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxpool2d: spatial extents must be even, got " + shape_str(x.shape()));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  const bool rec = recording({&x});
  Tensor out = make_output({n, c, oh, ow}, rec);
  std::vector<std::uint32_t> winners(rec ? out.numel() : 0);
  const float* in = x.ptr();
  float* o = out.ptr();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const float* src = in + plane * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (2 * oy) * w + 2 * ox;
        const std::size_t candidates[3] = {best + 1, best + w, best + w + 1};
        for (std::size_t idx : candidates) {
          if (src[idx] > src[best]) best = idx;
        }
        const std::size_t oidx = plane * oh * ow + oy * ow + ox;
        o[oidx] = src[best];
        if (rec) winners[oidx] = static_cast<std::uint32_t>(plane * h * w + best);
      }
    }
  }
  if (rec) {
    ImplPtr xi = x.impl(), oi = out.impl();
    active_tape().record({xi}, oi, [xi, oi, winners = std::move(winners)]() {
      float* dx = grad_sink(xi);
      if (!dx) return;
      for (std::size_t i = 0; i < winners.size(); ++i) dx[winners[i]] += oi->grad[i];
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  const bool rec = recording({&x});
  Tensor out = make_output({n, c}, rec);
  for (std::size_t i = 0; i < n * c; ++i) {
    double s = 0.0;
    const float* src = x.ptr() + i * hw;
    for (std::size_t p = 0; p < hw; ++p) s += src[p];
    out.ptr()[i] = static_cast<float>(s / static_cast<double>(hw));
  }
  if (rec) {
    ImplPtr xi = x.impl(), oi = out.impl();
    active_tape().record({xi}, oi, [xi, oi, n, c, hw]() {
      float* dx = grad_sink(xi);
      if (!dx) return;
      const float inv = 1.0f / static_cast<float>(hw);
      for (std::size_t i = 0; i < n * c; ++i) {
        const float g = oi->grad[i] * inv;
        for (std::size_t p = 0; p < hw; ++p) dx[i * hw + p] += g;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- batchnorm

Tensor batchnorm2d(const Tensor& x, BatchNormState& state, Mode mode, float eps, float momentum) {
  require_rank(x, 4, "batchnorm2d", "input");
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  for (const Tensor* t : {&state.gamma, &state.beta, &state.running_mean, &state.running_var}) {
    if (!t->defined() || t->numel() != c) {
      throw ShapeError("batchnorm2d: per-channel parameters must have " + std::to_string(c) + " entries");
    }
  }
  const std::size_t count = n * hw;
  if (mode == Mode::train && count < 2) {
    throw ValueError("batchnorm2d: train mode needs at least 2 values per channel, got " + std::to_string(count));
  }

  std::vector<float> mean(c), inv_std(c);
  if (mode == Mode::train) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const float* src = x.ptr() + (b * c + ch) * hw;
        for (std::size_t p = 0; p < hw; ++p) s += src[p];
      }
      const double mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const float* src = x.ptr() + (b * c + ch) * hw;
        for (std::size_t p = 0; p < hw; ++p) {
          const double d = src[p] - mu;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(count);
      mean[ch] = static_cast<float>(mu);
      inv_std[ch] = static_cast<float>(1.0 / std::sqrt(var + eps));
      float& rm = state.running_mean.data()[ch];
      float& rv = state.running_var.data()[ch];
      rm = (1.0f - momentum) * rm + momentum * static_cast<float>(mu);
      rv = (1.0f - momentum) * rv + momentum * static_cast<float>(var);
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = state.running_mean.data()[ch];
      inv_std[ch] = 1.0f / std::sqrt(state.running_var.data()[ch] + eps);
    }
  }

  const bool rec = recording({&x, &state.gamma, &state.beta});
  Tensor out = make_output(x.shape(), rec);
  std::vector<float> xhat(rec ? x.numel() : 0);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * hw;
      const float g = state.gamma.data()[ch], be = state.beta.data()[ch];
      for (std::size_t p = 0; p < hw; ++p) {
        const float xh = (x.ptr()[base + p] - mean[ch]) * inv_std[ch];
        if (rec) xhat[base + p] = xh;
        out.ptr()[base + p] = g * xh + be;
      }
    }
  }
  if (!rec) return out;

  ImplPtr xi = x.impl(), gi = state.gamma.impl(), bi = state.beta.impl(), oi = out.impl();
  const bool batch_stats = mode == Mode::train;
  active_tape().record({xi, gi, bi}, oi,
                       [xi, gi, bi, oi, n, c, hw, count, batch_stats, inv_std = std::move(inv_std),
                        xhat = std::move(xhat)]() {
    float* dx = grad_sink(xi);
    float* dg = grad_sink(gi);
    float* db = grad_sink(bi);
    const float* dy = oi->grad.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t base = (b * c + ch) * hw;
        for (std::size_t p = 0; p < hw; ++p) {
          sum_dy += dy[base + p];
          sum_dy_xhat += static_cast<double>(dy[base + p]) * xhat[base + p];
        }
      }
      if (dg) dg[ch] += static_cast<float>(sum_dy_xhat);
      if (db) db[ch] += static_cast<float>(sum_dy);
      if (!dx) continue;
      const float g = gi->data[ch];
      if (batch_stats) {
        const float mean_dy = static_cast<float>(sum_dy / static_cast<double>(count));
        const float mean_dy_xhat = static_cast<float>(sum_dy_xhat / static_cast<double>(count));
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t base = (b * c + ch) * hw;
          for (std::size_t p = 0; p < hw; ++p) {
            dx[base + p] += g * inv_std[ch] * (dy[base + p] - mean_dy - xhat[base + p] * mean_dy_xhat);
          }
        }
      } else {
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t base = (b * c + ch) * hw;
          for (std::size_t p = 0; p < hw; ++p) dx[base + p] += g * inv_std[ch] * dy[base + p];
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------- dense

Tensor dense(const Tensor& x, const Tensor& weight) { return dense(x, weight, Tensor()); }

Tensor dense(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "dense", "input");
  require_rank(weight, 2, "dense", "weight");
  const std::size_t n = x.dim(0), din = x.dim(1), dout = weight.dim(0);
  if (weight.dim(1) != din) {
    throw ShapeError("dense: input " + shape_str(x.shape()) + " incompatible with weight " +
                     shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != dout)) {
    throw ShapeError("dense: bias must have shape [" + std::to_string(dout) + "], got " + shape_str(bias.shape()));
  }
  const bool rec = recording({&x, &weight, &bias});
  Tensor out = make_output({n, dout}, rec);
  for (std::size_t r = 0; r < n; ++r) {
    const float* xr = x.ptr() + r * din;
    for (std::size_t o = 0; o < dout; ++o) {
      const float* wr = weight.ptr() + o * din;
      float acc = 0.0f;
      for (std::size_t i = 0; i < din; ++i) acc += xr[i] * wr[i];
      if (bias.defined()) acc += bias.data()[o];
      out.ptr()[r * dout + o] = acc;
    }
  }
  if (!rec) return out;
  ImplPtr xi = x.impl(), wi = weight.impl(), bi = bias.defined() ? bias.impl() : nullptr, oi = out.impl();
  std::vector<ImplPtr> inputs{xi, wi};
  if (bi) inputs.push_back(bi);
  active_tape().record(std::move(inputs), oi, [xi, wi, bi, oi, n, din, dout]() {
    float* dx = grad_sink(xi);
    float* dw = grad_sink(wi);
    float* db = bi ? grad_sink(bi) : nullptr;
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t o = 0; o < dout; ++o) {
        const float g = oi->grad[r * dout + o];
        if (g == 0.0f) continue;
        if (dx) {
          for (std::size_t i = 0; i < din; ++i) dx[r * din + i] += g * wi->data[o * din + i];
        }
        if (dw) {
          for (std::size_t i = 0; i < din; ++i) dw[o * din + i] += g * xi->data[r * din + i];
        }
        if (db) db[o] += g;
      }
    }
  });
  return out;
}

Tensor flatten(const Tensor& x) {
  if (!x.defined() || x.rank() < 2) throw ShapeError("flatten: input must have rank >= 2");
  const bool rec = recording({&x});
  Tensor out = make_output({x.dim(0), x.numel() / x.dim(0)}, rec);
  std::copy(x.data().begin(), x.data().end(), out.data().begin());
  if (rec) {
    ImplPtr xi = x.impl(), oi = out.impl();
    active_tape().record({xi}, oi, [xi, oi]() {
      float* dx = grad_sink(xi);
      if (!dx) return;
      for (std::size_t i = 0; i < oi->grad.size(); ++i) dx[i] += oi->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------- loss

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy", "logits");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  for (int label : labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw ValueError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0," +
                       std::to_string(k) + ")");
    }
  }
  std::vector<float> probs(n * k);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const float* row = logits.ptr() + r * k;
    const float m = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j]) - m);
    const double lse = m + std::log(z);
    total += lse - row[labels[r]];
    for (std::size_t j = 0; j < k; ++j) {
      probs[r * k + j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - lse));
    }
  }
  const bool rec = recording({&logits});
  Tensor out = make_output({1}, rec);
  out.ptr()[0] = static_cast<float>(total / static_cast<double>(n));
  if (rec) {
    ImplPtr li = logits.impl(), oi = out.impl();
    std::vector<int> lab(labels.begin(), labels.end());
    active_tape().record({li}, oi, [li, oi, n, k, probs = std::move(probs), lab = std::move(lab)]() {
      float* dl = grad_sink(li);
      if (!dl) return;
      const float g = oi->grad[0] / static_cast<float>(n);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < k; ++j) {
          const float onehot = static_cast<int>(j) == lab[r] ? 1.0f : 0.0f;
          dl[r * k + j] += g * (probs[r * k + j] - onehot);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------- arithmetic

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const bool rec = recording({&a, &b});
  Tensor out = make_output(a.shape(), rec);
  for (std::size_t i = 0; i < a.numel(); ++i) out.ptr()[i] = a.ptr()[i] + b.ptr()[i];
  if (rec) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    active_tape().record({ai, bi}, oi, [ai, bi, oi]() {
      float* da = grad_sink(ai);
      float* db = grad_sink(bi);
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        if (da) da[i] += oi->grad[i];
        if (db) db[i] += oi->grad[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0f)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const bool rec = recording({&a, &b});
  Tensor out = make_output(a.shape(), rec);
  for (std::size_t i = 0; i < a.numel(); ++i) out.ptr()[i] = a.ptr()[i] * b.ptr()[i];
  if (rec) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = out.impl();
    active_tape().record({ai, bi}, oi, [ai, bi, oi]() {
      float* da = grad_sink(ai);
      float* db = grad_sink(bi);
      for (std::size_t i = 0; i < oi->grad.size(); ++i) {
        if (da) da[i] += oi->grad[i] * bi->data[i];
        if (db) db[i] += oi->grad[i] * ai->data[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float factor) {
  const bool rec = recording({&a});
  Tensor out = make_output(a.shape(), rec);
  for (std::size_t i = 0; i < a.numel(); ++i) out.ptr()[i] = a.ptr()[i] * factor;
  if (rec) {
    ImplPtr ai = a.impl(), oi = out.impl();
    active_tape().record({ai}, oi, [ai, oi, factor]() {
      float* da = grad_sink(ai);
      if (!da) return;
      for (std::size_t i = 0; i < oi->grad.size(); ++i) da[i] += oi->grad[i] * factor;
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  const bool rec = recording({&a});
  Tensor out = make_output({1}, rec);
  double s = 0.0;
  for (float v : a.data()) s += v;
  out.ptr()[0] = static_cast<float>(s);
  if (rec) {
    ImplPtr ai = a.impl(), oi = out.impl();
    active_tape().record({ai}, oi, [ai, oi]() {
      float* da = grad_sink(ai);
      if (!da) return;
      for (std::size_t i = 0; i < ai->data.size(); ++i) da[i] += oi->grad[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------- prototypes

Tensor distance_map(const Tensor& features, const Tensor& prototypes) {
  require_rank(features, 4, "distance_map", "features");
  require_rank(prototypes, 2, "distance_map", "prototypes");
  const std::size_t n = features.dim(0), d = features.dim(1), hw = features.dim(2) * features.dim(3);
  const std::size_t p = prototypes.dim(0);
  if (prototypes.dim(1) != d) {
    throw ShapeError("distance_map: features have depth " + std::to_string(d) + " but prototypes " +
                     shape_str(prototypes.shape()));
  }
  const bool rec = recording({&features, &prototypes});
  Tensor out = make_output({n, p, features.dim(2), features.dim(3)}, rec);
  std::vector<float> cell(d);
  for (std::size_t b = 0; b < n; ++b) {
    const float* z = features.ptr() + b * d * hw;
    for (std::size_t s = 0; s < hw; ++s) {
      for (std::size_t k = 0; k < d; ++k) cell[k] = z[k * hw + s];
      for (std::size_t j = 0; j < p; ++j) {
        const float* proto = prototypes.ptr() + j * d;
        float acc = 0.0f;
        for (std::size_t k = 0; k < d; ++k) {
          const float diff = cell[k] - proto[k];
          acc += diff * diff;
        }
        out.ptr()[(b * p + j) * hw + s] = acc;
      }
    }
  }
  if (!rec) return out;
  ImplPtr fi = features.impl(), pi = prototypes.impl(), oi = out.impl();
  active_tape().record({fi, pi}, oi, [fi, pi, oi, n, d, hw, p]() {
    float* dz = grad_sink(fi);
    float* dp = grad_sink(pi);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t j = 0; j < p; ++j) {
        const float* g = oi->grad.data() + (b * p + j) * hw;
        const float* proto = pi->data.data() + j * d;
        for (std::size_t k = 0; k < d; ++k) {
          const float* z = fi->data.data() + (b * d + k) * hw;
          float* dzk = dz ? dz + (b * d + k) * hw : nullptr;
          float acc = 0.0f;
          for (std::size_t s = 0; s < hw; ++s) {
            const float term = 2.0f * g[s] * (z[s] - proto[k]);
            if (dzk) dzk[s] += term;
            acc += term;
          }
          if (dp) dp[j * d + k] -= acc;
        }
      }
    }
  });
  return out;
}

float similarity(float distance) {
  // NaN passes through so training can report the divergence
  if (distance < 0.0f) {
    throw ValueError("similarity: distance must be non-negative, got " + std::to_string(distance));
  }
  return std::log((distance + 1.0f) / (distance + kSimilarityEpsilon));
}

Tensor similarity(const Tensor& distances) {
  const bool rec = recording({&distances});
  Tensor out = make_output(distances.shape(), rec);
  for (std::size_t i = 0; i < distances.numel(); ++i) out.ptr()[i] = similarity(distances.ptr()[i]);
  if (rec) {
    ImplPtr di = distances.impl(), oi = out.impl();
    active_tape().record({di}, oi, [di, oi]() {
      float* dd = grad_sink(di);
      if (!dd) return;
      for (std::size_t i = 0; i < di->data.size(); ++i) {
        const float v = di->data[i];
        dd[i] += oi->grad[i] * (1.0f / (v + 1.0f) - 1.0f / (v + kSimilarityEpsilon));
      }
    });
  }
  return out;
}

namespace {

template <typename Better>
Tensor spatial_reduce(const Tensor& x, std::vector<std::int32_t>* cells, Better better, const char* name) {
  require_rank(x, 4, name, "input");
  const std::size_t rows = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
  const bool rec = recording({&x});
  Tensor out = make_output({x.dim(0), x.dim(1)}, rec);
  std::vector<std::int32_t> winners(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* src = x.ptr() + r * hw;
    std::size_t best = 0;
    for (std::size_t s = 1; s < hw; ++s) {
      if (better(src[s], src[best])) best = s;
    }
    winners[r] = static_cast<std::int32_t>(best);
    out.ptr()[r] = src[best];
  }
  if (cells) *cells = winners;
  if (rec) {
    ImplPtr xi = x.impl(), oi = out.impl();
    active_tape().record({xi}, oi, [xi, oi, hw, winners = std::move(winners)]() {
      float* dx = grad_sink(xi);
      if (!dx) return;
      for (std::size_t r = 0; r < winners.size(); ++r) dx[r * hw + winners[r]] += oi->grad[r];
    });
  }
  return out;
}

}  // namespace

Tensor spatial_max(const Tensor& x, std::vector<std::int32_t>* cells) {
  return spatial_reduce(x, cells, [](float a, float b) { return a > b; }, "spatial_max");
}

Tensor spatial_min(const Tensor& x, std::vector<std::int32_t>* cells) {
  return spatial_reduce(x, cells, [](float a, float b) { return a < b; }, "spatial_min");
}

Tensor masked_min_mean(const Tensor& x, const std::vector<std::uint8_t>& mask) {
  require_rank(x, 2, "masked_min_mean", "input");
  const std::size_t n = x.dim(0), p = x.dim(1);
  if (mask.size() != n * p) throw ShapeError("masked_min_mean: mask size does not match input");
  std::vector<std::size_t> winners(n);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t best = p;
    for (std::size_t j = 0; j < p; ++j) {
      if (!mask[r * p + j]) continue;
      if (best == p || x.ptr()[r * p + j] < x.ptr()[r * p + best]) best = j;
    }
    if (best == p) throw ValueError("masked_min_mean: row " + std::to_string(r) + " has no eligible column");
    winners[r] = best;
    total += x.ptr()[r * p + best];
  }
  const bool rec = recording({&x});
  Tensor out = make_output({1}, rec);
  out.ptr()[0] = static_cast<float>(total / static_cast<double>(n));
  if (rec) {
    ImplPtr xi = x.impl(), oi = out.impl();
    active_tape().record({xi}, oi, [xi, oi, n, p, winners = std::move(winners)]() {
      float* dx = grad_sink(xi);
      if (!dx) return;
      const float g = oi->grad[0] / static_cast<float>(n);
      for (std::size_t r = 0; r < n; ++r) dx[r * p + winners[r]] += g;
    });
  }
  return out;
}

Tensor masked_l1(const Tensor& w, const std::vector<std::uint8_t>& mask) {
  if (mask.size() != w.numel()) throw ShapeError("masked_l1: mask size does not match weight");
  double total = 0.0;
  for (std::size_t i = 0; i < w.numel(); ++i) {
    if (mask[i]) total += std::fabs(w.ptr()[i]);
  }
  const bool rec = recording({&w});
  Tensor out = make_output({1}, rec);
  out.ptr()[0] = static_cast<float>(total);
  if (rec) {
    ImplPtr wi = w.impl(), oi = out.impl();
    active_tape().record({wi}, oi, [wi, oi, mask]() {
      float* dw = grad_sink(wi);
      if (!dw) return;
      for (std::size_t i = 0; i < wi->data.size(); ++i) {
        if (!mask[i]) continue;
        const float v = wi->data[i];
        dw[i] += oi->grad[0] * (v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f));
      }
    });
  }
  return out;
}

}  // namespace ppks
