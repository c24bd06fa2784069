#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "ppks/error.hpp"
#include "ppks/ops.hpp"
#include "ppks/optim.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/random_tensor.hpp"

using namespace ppks;
using ppks::testing::check_gradients;
using ppks::testing::random_tensor;
using namespace ppks::testing;

namespace {

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

BatchNormState make_bn(std::size_t c, Rng* rng = nullptr) {
  BatchNormState s{Tensor::full({c}, 1.0f), Tensor::zeros({c}), Tensor::zeros({c}), Tensor::full({c}, 1.0f)};
  if (rng) {
    for (float& v : s.gamma.data()) v = static_cast<float>(rng->uniform(0.5, 1.5));
    for (float& v : s.beta.data()) v = static_cast<float>(rng->uniform(-0.5, 0.5));
  }
  return s;
}

}  // namespace

TEST_CASE("tensor shape invariants") {
  Tensor t = Tensor::zeros({2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(shape_numel(t.shape()) == t.data().size());
  CHECK(t.grad().size() == t.numel());
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor::zeros({2, 0}), ShapeError);
}

TEST_CASE("conv2d") {
  SUBCASE("all ones") {
    Tensor y = conv2d(Tensor::full({1, 1, 3, 3}, 1.0f), Tensor::full({1, 1, 2, 2}, 1.0f), 1, 0);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    for (float v : y.data()) CHECK(v == 4.0f);
  }
  SUBCASE("zero kernel annihilates") {
    Rng rng(3);
    Tensor y = conv2d(random_tensor({2, 3, 6, 6}, rng), Tensor::zeros({4, 3, 3, 3}), 1, 1);
    for (float v : y.data()) CHECK(v == 0.0f);
  }
  SUBCASE("matches loop oracle exactly") {
    Rng rng(11);
    Tensor x = random_tensor({1, 2, 5, 5}, rng), k = random_tensor({3, 2, 3, 3}, rng);
    CHECK(values(conv2d(x, k, 1, 0)) == conv_oracle(x, k, 1, 0));
  }
  SUBCASE("oracle property over geometries up to 8x8") {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      Rng rng(seed);
      const std::size_t c = 1 + rng.below(4), f = 1 + rng.below(40), h = 3 + rng.below(6), w = 3 + rng.below(6);
      const std::size_t kh = 1 + rng.below(3), kw = 1 + rng.below(3);
      const int stride = 1 + static_cast<int>(rng.below(2)), pad = static_cast<int>(rng.below(2));
      Tensor x = random_tensor({1 + rng.below(2), c, h, w}, rng), k = random_tensor({f, c, kh, kw}, rng);
      CHECK(values(conv2d(x, k, stride, pad)) == conv_oracle(x, k, stride, pad));
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), 1, 0), ShapeError);
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), 1, 0), ShapeError);
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 4, 4}), Tensor::zeros({1, 1, 3, 3}), 1, 0), ShapeError);
  }
}

TEST_CASE("relu") {
  Tensor x = Tensor::from({3}, {-1.0f, 0.0f, 2.0f}, true);
  Tensor y = relu(x);
  CHECK(values(y) == std::vector<float>{0.0f, 0.0f, 2.0f});
  Tensor pos = Tensor::from({2}, {0.5f, 3.0f});
  CHECK(values(relu(pos)) == values(pos));

  Tensor z = Tensor::from({2}, {-0.5f, 0.5f}, true);
  Tensor w = Tensor::from({2}, {3.0f, 7.0f});
  backward(sum(mul(relu(z), w)));
  CHECK(z.grad()[0] == 0.0f);
  CHECK(z.grad()[1] == 7.0f);
}

TEST_CASE("maxpool2d") {
  CHECK(values(maxpool2d(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4}))) == std::vector<float>{4.0f});

  Tensor c = Tensor::full({1, 1, 2, 2}, 5.0f, true);
  Tensor y = maxpool2d(c);
  CHECK(y.data()[0] == 5.0f);
  backward(sum(y));
  CHECK(values(Tensor::from({4}, {c.grad().begin(), c.grad().end()})) == std::vector<float>{1, 0, 0, 0});

  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Tensor x = random_tensor({1, 1, 4, 4}, rng);
    CHECK(values(maxpool2d(x)) == pool_oracle(x));
    Tensor big = random_tensor({2, 3, 8, 6}, rng);
    CHECK(values(maxpool2d(big)) == pool_oracle(big));
  }
  CHECK_THROWS_AS(maxpool2d(Tensor::zeros({1, 1, 3, 4})), ShapeError);
}

TEST_CASE("batchnorm2d") {
  SUBCASE("constant per channel normalizes to zero") {
    Tensor x = Tensor::zeros({2, 2, 3, 3});
    for (std::size_t i = 0; i < x.numel(); ++i) x.data()[i] = (i / 9) % 2 == 0 ? 3.0f : -7.0f;
    auto bn = make_bn(2);
    Tensor y = batchnorm2d(x, bn, Mode::train);
    for (float v : y.data()) CHECK(v == 0.0f);
  }
  SUBCASE("gamma zero yields beta") {
    Rng rng(2);
    auto bn = make_bn(3);
    std::fill(bn.gamma.data().begin(), bn.gamma.data().end(), 0.0f);
    bn.beta.data()[0] = 0.25f, bn.beta.data()[1] = -1.0f, bn.beta.data()[2] = 2.0f;
    Tensor y = batchnorm2d(random_tensor({2, 3, 2, 2}, rng), bn, Mode::train);
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == bn.beta.data()[(i / 4) % 3]);
  }
  SUBCASE("running statistics with momentum 0.1 and biased variance") {
    Tensor x = Tensor::from({2, 1, 1, 2}, {1, 2, 3, 4});
    auto bn = make_bn(1);
    batchnorm2d(x, bn, Mode::train);
    CHECK(bn.running_mean.data()[0] == doctest::Approx(0.25));
    CHECK(bn.running_var.data()[0] == doctest::Approx(0.9 + 0.1 * 1.25));
    // eval mode uses the buffers
    Tensor y = batchnorm2d(Tensor::from({1, 1, 1, 1}, {0.25f}), bn, Mode::eval);
    CHECK(y.data()[0] == doctest::Approx(0.0).epsilon(1e-6));
  }
  SUBCASE("errors") {
    auto bn = make_bn(1);
    CHECK_THROWS_AS(batchnorm2d(Tensor::zeros({1, 1, 1, 1}), bn, Mode::train), ValueError);
    CHECK_THROWS_AS(batchnorm2d(Tensor::zeros({1, 2, 2, 2}), bn, Mode::train), ShapeError);
  }
  SUBCASE("finite-difference gradient") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(100 + seed);
      Tensor x = random_tensor({3, 2, 3, 3}, rng);
      Tensor r = random_tensor({3, 2, 3, 3}, rng);
      auto bn = make_bn(2, &rng);
      auto result = check_gradients({x, bn.gamma, bn.beta},
                                    [&] { return sum(mul(batchnorm2d(x, bn, Mode::train), r)); });
      CHECK(result.max_relative_error() < 1e-3);
    }
  }
}

TEST_CASE("dense") {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(values(dense(x, eye)) == values(x));
  Tensor zero = dense(x, Tensor::zeros({4, 3}));
  for (float v : zero.data()) CHECK(v == 0.0f);
  Rng rng(5);
  Tensor a = random_tensor({2, 3}, rng), w = random_tensor({4, 3}, rng);
  CHECK(values(dense(a, w)) == dense_oracle(a, w));
  CHECK_THROWS_AS(dense(a, Tensor::zeros({4, 2})), ShapeError);
}

TEST_CASE("softmax_cross_entropy") {
  std::vector<int> labels{0, 3};
  CHECK(softmax_cross_entropy(Tensor::zeros({2, 6}), labels).item() == doctest::Approx(1.791759).epsilon(1e-6));
  Tensor sat = Tensor::zeros({1, 6});
  sat.data()[2] = 50.0f;
  std::vector<int> two{2};
  CHECK(softmax_cross_entropy(sat, two).item() == doctest::Approx(0.0).epsilon(1e-6));
  std::vector<int> bad{6};
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor::zeros({1, 6}), bad), ValueError);

  // gradient is (softmax − onehot)/N
  Rng rng(9);
  Tensor logits = random_tensor({2, 6}, rng).set_requires_grad(true);
  backward(softmax_cross_entropy(logits, labels));
  for (std::size_t r = 0; r < 2; ++r) {
    double z = 0.0;
    for (int j = 0; j < 6; ++j) z += std::exp(logits.data()[r * 6 + j]);
    for (int j = 0; j < 6; ++j) {
      const double expect = (std::exp(logits.data()[r * 6 + j]) / z - (j == labels[r] ? 1.0 : 0.0)) / 2.0;
      CHECK(logits.grad()[r * 6 + j] == doctest::Approx(expect).epsilon(1e-5));
    }
  }
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng r2(seed);
    Tensor l = random_tensor({4, 6}, r2);
    std::vector<int> y{0, 5, 2, 2};
    CHECK(check_gradients({l}, [&] { return softmax_cross_entropy(l, y); }).max_relative_error() < 1e-3);
  }
}

TEST_CASE("backward basics") {
  Tensor x = Tensor::scalar(3.0f, true);
  backward(mul(x, x));
  CHECK(x.grad()[0] == 6.0f);

  Tensor y = Tensor::scalar(1.0f, true);
  backward(add(y, y));
  CHECK(y.grad()[0] == 2.0f);
  CHECK(active_tape().size() == 0);

  Tensor v = Tensor::full({2}, 1.0f, true);
  CHECK_THROWS_AS(backward(scale(v, 2.0f)), ShapeError);
  active_tape().clear();
}

TEST_CASE("elementwise and reduction gradients") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(40 + seed);
    Tensor x = random_tensor({2, 3, 2, 2}, rng);
    Tensor r = random_tensor({2, 3, 2, 2}, rng);
    Tensor r2 = random_tensor({2, 3}, rng);
    CHECK(check_gradients({x}, [&] { return sum(mul(sigmoid(x), r)); }).max_relative_error() < 1e-3);
    CHECK(check_gradients({x}, [&] { return sum(mul(global_avg_pool(x), r2)); }).max_relative_error() < 1e-3);
    // keep inputs away from the relu kink
    Tensor shifted = x.clone();
    for (float& v : shifted.data()) v = v >= 0.0f ? v + 0.05f : v - 0.05f;
    CHECK(check_gradients({shifted}, [&] { return sum(mul(relu(shifted), r)); }).max_relative_error() < 1e-3);
    CHECK(check_gradients({x}, [&] { return sum(mul(maxpool2d(x), random_tensor({2, 3, 1, 1}, rng = Rng(7)))); })
              .max_relative_error() < 1e-3);
  }
}

TEST_CASE("conv and dense gradients") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(60 + seed);
    Tensor x = random_tensor({2, 2, 5, 5}, rng), k = random_tensor({3, 2, 3, 3}, rng), b = random_tensor({3}, rng);
    Tensor r = random_tensor({2, 3, 3, 3}, rng);
    auto conv = check_gradients({x, k, b}, [&] { return sum(mul(conv2d(x, k, b, 2, 1), r)); });
    CHECK(conv.max_relative_error() < 1e-3);
    Tensor a = random_tensor({3, 4}, rng), w = random_tensor({5, 4}, rng), bias = random_tensor({5}, rng);
    Tensor r2 = random_tensor({3, 5}, rng);
    CHECK(check_gradients({a, w, bias}, [&] { return sum(mul(dense(a, w, bias), r2)); }).max_relative_error() < 1e-3);
  }
}

TEST_CASE("composite conv-relu-dense-CE network") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(200 + seed);
    Tensor x = random_tensor({2, 3, 6, 6}, rng);
    Tensor k = random_tensor({4, 3, 3, 3}, rng), kb = random_tensor({4}, rng);
    Tensor w = random_tensor({6, 4 * 6 * 6}, rng);
    std::vector<int> labels{1, 4};
    auto model = [&] {
      Tensor h = flatten(relu(conv2d(x, k, kb, 1, 1)));
      return softmax_cross_entropy(dense(h, w), labels);
    };
    auto result = check_gradients({k, kb, w}, model);
    MESSAGE("max rel err " << result.max_relative_error() << ", kinked " << result.kinked_coordinates);
    CHECK(result.max_relative_error() < 1e-3);
  }
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(77);
  Tensor x = random_tensor({2, 4}, rng), w = random_tensor({3, 4}, rng).set_requires_grad(true);
  std::vector<int> y{0, 2};
  Tensor r = random_tensor({2, 3}, rng);
  auto l1 = [&] { return softmax_cross_entropy(dense(x, w), y); };
  auto l2 = [&] { return sum(mul(dense(x, w), r)); };
  const float a = 0.7f, b = -1.3f;
  backward(l1());
  std::vector<float> g1(w.grad().begin(), w.grad().end());
  w.zero_grad();
  backward(l2());
  std::vector<float> g2(w.grad().begin(), w.grad().end());
  w.zero_grad();
  backward(add(scale(l1(), a), scale(l2(), b)));
  for (std::size_t i = 0; i < g1.size(); ++i) CHECK(w.grad()[i] == doctest::Approx(a * g1[i] + b * g2[i]).epsilon(1e-5));
}

TEST_CASE("grads accumulate across backward calls until zeroed") {
  Tensor x = Tensor::scalar(2.0f, true);
  backward(mul(x, x));
  backward(mul(x, x));
  CHECK(x.grad()[0] == 8.0f);
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0f);
}

TEST_CASE("no-grad guard suppresses recording") {
  Tensor x = Tensor::scalar(2.0f, true);
  {
    NoGradGuard guard;
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(active_tape().size() == 0);
}

TEST_CASE("determinism") {
  auto run = [] {
    Rng rng(1234);
    Tensor x = random_tensor({2, 3, 8, 8}, rng), k = random_tensor({5, 3, 3, 3}, rng).set_requires_grad(true);
    Tensor y = sum(maxpool2d(relu(conv2d(x, k, 1, 1))));
    backward(y);
    std::vector<float> out{y.item()};
    out.insert(out.end(), k.grad().begin(), k.grad().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("optimizer") {
  SUBCASE("sgd step") {
    Tensor w = Tensor::scalar(1.0f, true);
    w.grad()[0] = 0.5f;
    Optimizer opt({w}, SgdSpec{0.1f, 0.0f});
    opt.step();
    CHECK(w.item() == doctest::Approx(0.95));
  }
  SUBCASE("zero gradient leaves parameters unchanged") {
    Tensor a = Tensor::from({3}, {1, -2, 3}, true), b = Tensor::from({3}, {1, -2, 3}, true);
    a.grad(), b.grad();
    Optimizer sgd({a}, SgdSpec{0.1f, 0.9f});
    Optimizer adam({b}, AdamSpec{});
    sgd.step();
    adam.step();
    CHECK(values(a) == std::vector<float>{1, -2, 3});
    CHECK(values(b) == std::vector<float>{1, -2, 3});
  }
  SUBCASE("adam first step has magnitude lr") {
    for (float g : {1e-3f, 0.5f, -4.0f, 250.0f}) {
      Tensor w = Tensor::scalar(0.0f, true);
      w.grad()[0] = g;
      Optimizer opt({w}, AdamSpec{0.01f});
      opt.step();
      // closed form: lr·g/(|g| + eps)
      CHECK(std::fabs(w.item()) == doctest::Approx(0.01 * std::fabs(g) / (std::fabs(g) + 1e-8)).epsilon(1e-5));
    }
  }
  SUBCASE("nan gradient aborts") {
    Tensor w = Tensor::scalar(0.0f, true);
    w.grad()[0] = NAN;
    Optimizer opt({w}, AdamSpec{});
    CHECK_THROWS_AS(opt.step(), DivergenceError);
  }
}
