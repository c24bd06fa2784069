#include "ppks/backbone.hpp"

#include <cmath>

#include "ppks/error.hpp"
#include "ppks/rng.hpp"

namespace ppks {

void BackboneConfig::validate() const {
  if (input_size <= 0) throw ValueError("backbone: input_size must be positive");
  if (block_channels.empty()) throw ValueError("backbone: at least one block is required");
  for (int c : block_channels) {
    if (c <= 0) throw ValueError("backbone: block channels must be positive");
  }
  if (block_channels.size() >= 31 || input_size % (1 << block_channels.size()) != 0) {
    throw ValueError("backbone: input_size " + std::to_string(input_size) + " is not divisible by 2^" +
                     std::to_string(block_channels.size()));
  }
  if (add_on_dim < 8) throw ValueError("backbone: add_on_dim must be at least 8");
}

namespace {

Tensor he_normal(Shape shape, Rng& rng) {
  const std::size_t fan_in = shape[1] * shape[2] * shape[3];
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (float& v : t.data()) v = static_cast<float>(sd * rng.normal());
  return t;
}

BatchNormState make_bn(std::size_t c) {
  return {Tensor::full({c}, 1.0f, true), Tensor::zeros({c}, true), Tensor::zeros({c}), Tensor::full({c}, 1.0f)};
}

}  // namespace

Backbone::Backbone(BackboneConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  const bool bn = cfg_.use_batchnorm;
  std::size_t in = 3;
  for (int channels : cfg_.block_channels) {
    const auto out = static_cast<std::size_t>(channels);
    ConvBlock b;
    b.w1 = he_normal({out, in, 3, 3}, rng);
    b.w2 = he_normal({out, out, 3, 3}, rng);
    if (bn) {
      b.bn1 = make_bn(out);
      b.bn2 = make_bn(out);
    } else {
      b.b1 = Tensor::zeros({out}, true);
      b.b2 = Tensor::zeros({out}, true);
    }
    blocks_.push_back(std::move(b));
    in = out;
  }
  const auto d = static_cast<std::size_t>(cfg_.add_on_dim);
  a1_ = he_normal({d, in, 1, 1}, rng);
  ab1_ = Tensor::zeros({d}, true);
  a2_ = he_normal({d, d, 1, 1}, rng);
  ab2_ = Tensor::zeros({d}, true);
}

Tensor Backbone::trunk(const Tensor& x, Mode mode) {
  Tensor h = x;
  for (auto& b : blocks_) {
    if (cfg_.use_batchnorm) {
      h = relu(batchnorm2d(conv2d(h, b.w1, 1, 1), b.bn1, mode));
      h = relu(batchnorm2d(conv2d(h, b.w2, 1, 1), b.bn2, mode));
    } else {
      h = relu(conv2d(h, b.w1, b.b1, 1, 1));
      h = relu(conv2d(h, b.w2, b.b2, 1, 1));
    }
    h = maxpool2d(h);
  }
  return h;
}

Tensor Backbone::add_on(const Tensor& x) {
  return sigmoid(conv2d(relu(conv2d(x, a1_, ab1_, 1, 0)), a2_, ab2_, 1, 0));
}

std::vector<Tensor> Backbone::trunk_parameters() {
  std::vector<Tensor> out;
  for (auto& b : blocks_) {
    if (cfg_.use_batchnorm) {
      out.insert(out.end(), {b.w1, b.bn1.gamma, b.bn1.beta, b.w2, b.bn2.gamma, b.bn2.beta});
    } else {
      out.insert(out.end(), {b.w1, b.b1, b.w2, b.b2});
    }
  }
  return out;
}

std::vector<Tensor> Backbone::add_on_parameters() { return {a1_, ab1_, a2_, ab2_}; }

std::vector<NamedTensor> Backbone::named_tensors() {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto& b = blocks_[i];
    const std::string p = "block" + std::to_string(i) + ".";
    out.push_back({p + "conv1.weight", b.w1});
    if (cfg_.use_batchnorm) {
      out.push_back({p + "bn1.gamma", b.bn1.gamma});
      out.push_back({p + "bn1.beta", b.bn1.beta});
      out.push_back({p + "bn1.running_mean", b.bn1.running_mean});
      out.push_back({p + "bn1.running_var", b.bn1.running_var});
    } else {
      out.push_back({p + "conv1.bias", b.b1});
    }
    out.push_back({p + "conv2.weight", b.w2});
    if (cfg_.use_batchnorm) {
      out.push_back({p + "bn2.gamma", b.bn2.gamma});
      out.push_back({p + "bn2.beta", b.bn2.beta});
      out.push_back({p + "bn2.running_mean", b.bn2.running_mean});
      out.push_back({p + "bn2.running_var", b.bn2.running_var});
    } else {
      out.push_back({p + "conv2.bias", b.b2});
    }
  }
  out.push_back({"add_on.conv1.weight", a1_});
  out.push_back({"add_on.conv1.bias", ab1_});
  out.push_back({"add_on.conv2.weight", a2_});
  out.push_back({"add_on.conv2.bias", ab2_});
  return out;
}

FieldGeometry field_geometry(const BackboneConfig& cfg) {
  cfg.validate();
  // jump, size and centre recurrences over (kernel, stride, padding)
  double jump = 1.0, size = 1.0, center = 0.5;
  auto layer = [&](int k, int s, int p) {
    size += (k - 1) * jump;
    center += ((k - 1) / 2.0 - p) * jump;
    jump *= s;
  };
  for (std::size_t i = 0; i < cfg.block_channels.size(); ++i) {
    layer(3, 1, 1);
    layer(3, 1, 1);
    layer(2, 2, 0);
  }
  return {static_cast<int>(jump), static_cast<int>(size), center};
}

Rect Backbone::receptive_field(int i, int j) const {
  const int g = cfg_.grid_size();
  if (i < 0 || j < 0 || i >= g || j >= g) throw ValueError("receptive_field: cell outside the latent grid");
  const FieldGeometry f = field_geometry(cfg_);
  auto span = [&](int idx) {
    const double lo = f.first_center + f.jump * idx - f.size / 2.0;
    const int a = static_cast<int>(std::floor(lo));
    return std::pair{std::max(a, 0), std::min(a + f.size, cfg_.input_size)};
  };
  const auto [y0, y1] = span(i);
  const auto [x0, x1] = span(j);
  return {x0, y0, x1, y1};
}

Backbone build_backbone(const BackboneConfig& cfg, std::uint64_t seed) { return Backbone(cfg, seed); }

Tensor extract_features(Backbone& backbone, const Tensor& batch, Mode mode) {
  const auto s = static_cast<std::size_t>(backbone.config().input_size);
  if (batch.rank() != 4 || batch.dim(1) != 3 || batch.dim(2) != s || batch.dim(3) != s) {
    throw ShapeError("extract_features: expected N×3×" + std::to_string(s) + "×" + std::to_string(s) + ", got " +
                     shape_str(batch.shape()));
  }
  return backbone.forward(batch, mode);
}

}  // namespace ppks
