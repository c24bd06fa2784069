#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

#include "ppks/error.hpp"
#include "ppks/training.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/random_tensor.hpp"

using namespace ppks;

namespace {

float dist_at(const Tensor& d, std::size_t n, std::size_t p, std::size_t c) {
  const std::size_t cells = d.dim(2) * d.dim(3);
  return d.data()[(n * d.dim(1) + p) * cells + c];
}

BackboneConfig tiny_config(int input) {
  BackboneConfig cfg;
  cfg.input_size = input;
  cfg.block_channels = {3};
  cfg.add_on_dim = 8;
  return cfg;
}

Image solid(int size, float r, float g, float b, Rng& rng) {
  Image im(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const float rgb[3] = {r, g, b};
      for (int c = 0; c < 3; ++c)
        im.at(y, x, c) = std::clamp(rgb[c] + static_cast<float>(rng.uniform(-0.05, 0.05)), 0.0f, 1.0f);
    }
  return im;
}

// Two classes that differ only in colour.
Dataset color_toy(int per_class, int size, std::uint64_t seed) {
  Dataset ds;
  ds.manifest.classes = {"RED", "BLUE"};
  ds.manifest.patches_per_class = per_class;
  ds.manifest.patch_size = size;
  ds.manifest.augmentation_factor = 1;
  Rng rng(seed);
  for (int k = 0; k < 2; ++k) {
    for (int i = 0; i < per_class; ++i) {
      const float shade = static_cast<float>(rng.uniform(0.5, 0.9));
      Patch p;
      p.id = ds.manifest.classes[k] + "_" + std::to_string(i);
      p.label = k;
      p.image = k == 0 ? solid(size, shade, 0.2f, 0.2f, rng) : solid(size, 0.2f, 0.2f, shade, rng);
      (i % 5 == 4 ? ds.test : ds.train).push_back(std::move(p));
    }
  }
  ds.stats = compute_stats(ds.train);
  return ds;
}

TrainConfig toy_train_config() {
  TrainConfig cfg;
  cfg.epochs_warmup = 2;
  cfg.epochs_joint = 20;
  cfg.push_every = 10;
  cfg.epochs_last_layer = 3;
  cfg.batch_size = 8;
  cfg.prototypes_per_class = 2;
  cfg.seed = 3;
  return cfg;
}

std::vector<float> flat_state(PPNet& net) {
  std::vector<float> out;
  for (const auto& t : net.named_tensors()) out.insert(out.end(), t.tensor.data().begin(), t.tensor.data().end());
  return out;
}

}  // namespace

TEST_CASE("cluster and separation cost examples") {
  const std::vector<int> class_of{0, 1};
  SUBCASE("exact match contributes zero") {
    Tensor d = Tensor::zeros({1, 2, 2, 2});
    for (float& v : d.data()) v = 3.0f;
    d.data()[2] = 0.0f;
    const std::vector<int> labels{0};
    CHECK(cluster_cost(d, labels, class_of).item() == 0.0f);
    CHECK(separation_cost(d, labels, class_of).item() == 3.0f);
  }
  SUBCASE("uniform distance") {
    Tensor d = Tensor::zeros({1, 2, 3, 3});
    for (float& v : d.data()) v = 2.5f;
    const std::vector<int> labels{1};
    CHECK(cluster_cost(d, labels, class_of).item() == 2.5f);
  }
  SUBCASE("far other-class prototypes") {
    constexpr float M = 1000.0f;
    Tensor d = Tensor::zeros({2, 2, 2, 2});
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 4; ++c) {
        d.data()[(n * 2 + (1 - n)) * 4 + c] = M;
        d.data()[(n * 2 + n) * 4 + c] = 0.5f;
      }
    const std::vector<int> labels{0, 1};
    CHECK(separation_cost(d, labels, class_of).item() == M);
    CHECK(cluster_cost(d, labels, class_of).item() == 0.5f);
  }
  SUBCASE("swapping labels swaps the two costs") {
    Rng rng(4);
    const Tensor d = testing::random_tensor({3, 2, 2, 2}, rng, 0.0f, 5.0f);
    const std::vector<int> labels{0, 1, 1}, swapped{1, 0, 0};
    CHECK(cluster_cost(d, labels, class_of).item() == separation_cost(d, swapped, class_of).item());
    CHECK(separation_cost(d, labels, class_of).item() == cluster_cost(d, swapped, class_of).item());
  }
}

TEST_CASE("cost errors") {
  const Tensor d = Tensor::zeros({1, 2, 2, 2});
  const std::vector<int> labels{2};
  CHECK_THROWS_AS(cluster_cost(d, labels, {0, 1}), ValueError);
  const std::vector<int> zero{0};
  CHECK_THROWS_AS(separation_cost(d, zero, {0, 0}), ValueError);
  CHECK_THROWS_AS(cluster_cost(d, zero, {0, 1, 1}), ShapeError);
}

TEST_CASE("costs match the brute-force oracle") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const std::size_t N = 1 + rng.below(8), K = 2 + rng.below(4), per = 1 + rng.below(3), g = 1 + rng.below(4);
    std::vector<int> class_of;
    for (std::size_t p = 0; p < K * per; ++p) class_of.push_back(static_cast<int>(p / per));
    std::vector<int> labels;
    for (std::size_t n = 0; n < N; ++n) labels.push_back(static_cast<int>(rng.below(K)));
    const Tensor d = testing::random_tensor({N, K * per, g, g}, rng, 0.0f, 10.0f);
    CHECK(cluster_cost(d, labels, class_of).item() == static_cast<float>(testing::cost_oracle(d, labels, class_of, true)));
    CHECK(separation_cost(d, labels, class_of).item() ==
          static_cast<float>(testing::cost_oracle(d, labels, class_of, false)));
  }
}

TEST_CASE("joint loss") {
  Rng rng(6);
  PPNet net(tiny_config(8), 3, 2, 1);
  const Tensor x = testing::random_tensor({4, 3, 8, 8}, rng);
  const std::vector<int> labels{0, 1, 2, 1};
  SUBCASE("zero lambdas give plain cross-entropy") {
    NoGradGuard guard;
    const auto out = net.forward(x, Mode::eval);
    const auto terms = joint_loss(out, labels, net.class_of(), 0.0f, 0.0f);
    CHECK(terms.total.item() == softmax_cross_entropy(out.logits, labels).item());
  }
  SUBCASE("weighted combination") {
    NoGradGuard guard;
    const auto out = net.forward(x, Mode::eval);
    const auto terms = joint_loss(out, labels, net.class_of(), 0.8f, 0.08f);
    CHECK(terms.cluster == doctest::Approx(testing::cost_oracle(out.distances, labels, net.class_of(), true)).epsilon(1e-6));
    CHECK(terms.separation ==
          doctest::Approx(testing::cost_oracle(out.distances, labels, net.class_of(), false)).epsilon(1e-6));
    CHECK(terms.total.item() == doctest::Approx(terms.ce + 0.8 * terms.cluster - 0.08 * terms.separation).epsilon(1e-5));
  }
}

TEST_CASE("joint loss gradient w.r.t. the prototypes matches finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CAPTURE(seed);
    Rng rng(seed);
    PPNet net(tiny_config(8), 2, 2, seed);
    const Tensor x = testing::random_tensor({2, 3, 8, 8}, rng);
    const std::vector<int> labels{0, 1};
    const auto r = testing::check_gradients({net.prototypes()}, [&]() {
      return joint_loss(net.forward(x, Mode::eval), labels, net.class_of(), 0.8f, 0.08f).total;
    });
    CHECK(r.max_relative_error() < 1e-3);
  }
}

TEST_CASE("composed model gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CAPTURE(seed);
    Rng rng(seed);
    PPNet net(tiny_config(4), 2, 2, seed);
    std::vector<Tensor> params = net.backbone().trunk_parameters();
    for (const Tensor& t : net.backbone().add_on_parameters()) params.push_back(t);
    for (Tensor& p : params) {
      if (p.rank() == 1)
        for (float& v : p.data()) v += static_cast<float>(rng.uniform(-0.2, 0.2));
    }
    params.push_back(net.prototypes());
    params.push_back(net.head());
    const Tensor x = testing::random_tensor({2, 3, 4, 4}, rng);
    const std::vector<int> labels{0, 1};
    const auto r = testing::check_gradients(params, [&]() {
      return joint_loss(net.forward(x, Mode::train), labels, net.class_of(), 0.8f, 0.08f).total;
    });
    CAPTURE(r.kinked_coordinates);
    for (std::size_t i = 0; i < r.relative_errors.size(); ++i) {
      CAPTURE(i);
      CHECK(r.relative_errors[i] < 1e-3);
    }
  }
}

TEST_CASE("off-class mask") {
  const auto mask = off_class_mask({0, 0, 1}, 2);
  CHECK(mask == std::vector<std::uint8_t>{0, 0, 1, 1, 1, 0});
}

TEST_CASE("push matches the exhaustive search oracle") {
  Rng rng(8);
  PPNet net(tiny_config(4), 2, 2, 5);  // 2x2 latent grid
  std::vector<Image> images;
  for (int i = 0; i < 4; ++i) images.push_back(solid(4, 0.0f, 0.0f, 0.0f, rng));
  for (auto& im : images)
    for (float& v : im.pixels) v = static_cast<float>(rng.uniform());
  LabeledImages set;
  for (int i = 0; i < 4; ++i) {
    set.images.push_back(&images[i]);
    set.labels.push_back(i % 2);
    set.ids.push_back("img" + std::to_string(i));
  }
  const NormalizationStats stats;
  const Tensor before = net.prototypes().clone();
  push_prototypes(net, set, stats, 3);

  Tensor z;
  {
    NoGradGuard guard;
    z = extract_features(net.backbone(), to_batch(set.images, stats));
  }
  const std::size_t D = 8, cells = 4;
  const auto oracle = testing::push_oracle(z, before, set.labels, net.class_of());
  for (std::size_t p = 0; p < 4; ++p) {
    CAPTURE(p);
    const std::size_t best_n = oracle[p].image, best_c = oracle[p].cell;
    const auto& prov = net.provenance()[p];
    REQUIRE(prov.has_value());
    CHECK(prov->image_index == best_n);
    CHECK(prov->image_id == set.ids[best_n]);
    CHECK(static_cast<std::size_t>(prov->cell_i * 2 + prov->cell_j) == best_c);
    CHECK(prov->rect == net.backbone().receptive_field(prov->cell_i, prov->cell_j));
    CHECK(prov->patch == crop(images[best_n], prov->rect));
    for (std::size_t d = 0; d < D; ++d) CHECK(net.prototypes().data()[p * D + d] == z.data()[(best_n * D + d) * cells + best_c]);
  }
  CHECK(net.pushed());

  SUBCASE("distance at the provenance cell is zero") {
    NoGradGuard guard;
    const Tensor dist = distance_map(z, net.prototypes());
    for (std::size_t p = 0; p < 4; ++p) {
      const auto& prov = *net.provenance()[p];
      CHECK(dist_at(dist, prov.image_index, p, prov.cell_i * 2 + prov.cell_j) < 1e-6f);
    }
  }
  SUBCASE("a second push leaves prototypes unchanged") {
    const Tensor once = net.prototypes().clone();
    const auto prov = net.provenance();
    push_prototypes(net, set, stats, 4);
    CHECK(std::equal(once.data().begin(), once.data().end(), net.prototypes().data().begin()));
    CHECK(net.provenance() == prov);
  }
  SUBCASE("batch size does not change the result") {
    PPNet other(tiny_config(4), 2, 2, 5);
    push_prototypes(other, set, stats, 1);
    CHECK(std::equal(other.prototypes().data().begin(), other.prototypes().data().end(),
                     net.prototypes().data().begin()));
  }
  SUBCASE("ties go to the lowest image, then the first cell") {
    LabeledImages same;
    for (int i = 0; i < 4; ++i) {
      same.images.push_back(&images[0]);
      same.labels.push_back(i % 2);
      same.ids.push_back("copy" + std::to_string(i));
    }
    PPNet other(tiny_config(4), 2, 2, 5);
    push_prototypes(other, same, stats);
    for (std::size_t p = 0; p < 4; ++p) CHECK(other.provenance()[p]->image_index == static_cast<std::size_t>(other.class_of()[p]));
  }
  SUBCASE("a class without images is an error") {
    LabeledImages one;
    one.images = {&images[0]};
    one.labels = {0};
    one.ids = {"a"};
    CHECK_THROWS_AS(push_prototypes(net, one, stats), ValueError);
  }
}

namespace {

// Activation scores of a 3-class, 2-prototype-per-class head problem.
struct HeadProblem {
  Tensor scores;
  std::vector<int> labels;
};

HeadProblem head_problem(std::uint64_t seed) {
  Rng rng(seed);
  HeadProblem hp;
  const std::size_t n = 60, p = 6;
  hp.scores = Tensor::zeros({n, p});
  for (std::size_t i = 0; i < n; ++i) {
    const int y = static_cast<int>(i % 3);
    hp.labels.push_back(y);
    for (std::size_t j = 0; j < p; ++j) {
      const double base = static_cast<int>(j / 2) == y ? 3.0 : 1.0;
      hp.scores.data()[i * p + j] = static_cast<float>(base + rng.uniform(-0.8, 0.8));
    }
  }
  return hp;
}

double mean_off_class(PPNet& net) {
  const auto mask = off_class_mask(net.class_of(), net.num_classes());
  double s = 0.0;
  std::size_t c = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      s += std::fabs(net.head().data()[i]);
      ++c;
    }
  return s / static_cast<double>(c);
}

}  // namespace

TEST_CASE("last-layer stage") {
  const HeadProblem hp = head_problem(2);
  TrainConfig cfg;
  cfg.batch_size = 60;
  cfg.last_layer_optimizer = SgdSpec{0.05f};

  SUBCASE("without L1 the training loss never increases") {
    cfg.lambda_l1 = 0.0f;
    PPNet net(tiny_config(8), 3, 2, 1);
    const auto hist = train_last_layer(net, hp.scores, hp.labels, cfg, 20);
    REQUIRE(hist.size() == 20);
    for (std::size_t e = 1; e < hist.size(); ++e) CHECK(hist[e].loss <= hist[e - 1].loss);
  }
  SUBCASE("L1 shrinks off-class weights") {
    cfg.last_layer_optimizer = AdamSpec{1e-2f};
    cfg.batch_size = 16;
    cfg.lambda_l1 = 0.0f;
    PPNet plain(tiny_config(8), 3, 2, 1);
    train_last_layer(plain, hp.scores, hp.labels, cfg, 30);
    cfg.lambda_l1 = 1e-2f;
    PPNet sparse(tiny_config(8), 3, 2, 1);
    train_last_layer(sparse, hp.scores, hp.labels, cfg, 30);
    CHECK(mean_off_class(sparse) < mean_off_class(plain));
  }
  SUBCASE("very large L1 drives off-class weights to about zero") {
    cfg.last_layer_optimizer = AdamSpec{1e-2f};
    cfg.batch_size = 16;
    cfg.lambda_l1 = 100.0f;
    PPNet net(tiny_config(8), 3, 2, 1);
    const Tensor before = net.head().clone();
    train_last_layer(net, hp.scores, hp.labels, cfg, 60);
    CHECK(mean_off_class(net) < 0.02);
    const auto mask = off_class_mask(net.class_of(), 3);
    // on-class entries are unpenalized
    bool moved = false;
    for (std::size_t i = 0; i < mask.size(); ++i)
      if (!mask[i]) moved |= net.head().data()[i] != before.data()[i];
    CHECK(moved);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < hp.labels.size(); ++i) {
      const float* row = hp.scores.ptr() + i * 6;
      float best = -1e30f;
      int arg = 0;
      for (int k = 0; k < 3; ++k) {
        float v = 0.0f;
        for (int j = 0; j < 6; ++j) v += row[j] * net.head().data()[k * 6 + j];
        if (v > best) best = v, arg = k;
      }
      hits += arg == hp.labels[i];
    }
    CHECK(hits == hp.labels.size());
  }
  SUBCASE("shape mismatch") {
    PPNet net(tiny_config(8), 3, 2, 1);
    CHECK_THROWS_AS(train_last_layer(net, Tensor::zeros({4, 5}), std::vector<int>{0, 1, 2, 0}, cfg, 1), ShapeError);
  }
}

TEST_CASE("fit on a two-colour toy set") {
  const Dataset ds = color_toy(80, 16, 1);
  const TrainConfig cfg = toy_train_config();
  BackboneConfig bcfg;
  bcfg.input_size = 16;
  bcfg.block_channels = {4, 8};
  bcfg.add_on_dim = 8;

  PPNet a(bcfg, 2, cfg.prototypes_per_class, cfg.seed);
  std::vector<EpochRecord> seen;
  const TrainSummary sa = fit(a, ds, cfg, [&](const EpochRecord& r) { seen.push_back(r); });
  CHECK(seen.size() == sa.history.size());
  // warmup 2, joint 20 with pushes after 10 and 20, last layer 3
  REQUIRE(sa.history.size() == 27);
  CHECK(sa.history[1].stage == "warmup");
  CHECK(sa.history[12].stage == "push");
  CHECK(sa.history[23].stage == "push");
  CHECK(sa.history[26].stage == "last_layer");
  CHECK(a.pushed());
  CHECK(sa.diversity > 0.0);
  CHECK(sa.diversity <= 1.0);
  CHECK(sa.final_accuracy >= 0.95);
  CHECK(std::fabs(sa.final_accuracy - sa.pre_push_accuracy) <= 0.02 + 1e-12);

  SUBCASE("joint loss decreases") {
    std::vector<double> joint;
    for (const auto& r : sa.history)
      if (r.stage == "joint") joint.push_back(r.loss);
    CHECK(joint.back() < joint.front());
  }
  SUBCASE("prototypes equal own-class latent cells after the final push") {
    const auto train = labeled(ds.train);
    NoGradGuard guard;
    const Tensor z = extract_features(a.backbone(), to_batch(train.images, ds.stats));
    const std::size_t D = 8, cells = 16;
    for (int p = 0; p < a.num_prototypes(); ++p) {
      const auto& prov = *a.provenance()[p];
      CHECK(train.labels[prov.image_index] == a.class_of()[p]);
      const std::size_t c = static_cast<std::size_t>(prov.cell_i * 4 + prov.cell_j);
      for (std::size_t d = 0; d < D; ++d)
        CHECK(std::fabs(a.prototypes().data()[p * D + d] - z.data()[(prov.image_index * D + d) * cells + c]) < 1e-6f);
    }
  }
  SUBCASE("same seed gives identical history and state") {
    PPNet b(bcfg, 2, cfg.prototypes_per_class, cfg.seed);
    const TrainSummary sb = fit(b, ds, cfg);
    REQUIRE(sb.history.size() == sa.history.size());
    for (std::size_t i = 0; i < sa.history.size(); ++i) {
      CHECK(sa.history[i].loss == sb.history[i].loss);
      CHECK(sa.history[i].test_accuracy == sb.history[i].test_accuracy);
    }
    const auto fa = flat_state(a), fb = flat_state(b);
    REQUIRE(fa.size() == fb.size());
    CHECK(std::memcmp(fa.data(), fb.data(), fa.size() * sizeof(float)) == 0);
    CHECK(a.provenance() == b.provenance());
  }
}

TEST_CASE("stage freezing") {
  const Dataset ds = color_toy(10, 8, 2);
  TrainConfig cfg = toy_train_config();
  cfg.epochs_joint = 1;
  cfg.push_every = 1;
  cfg.epochs_last_layer = 0;

  SUBCASE("warm-up leaves the trunk and head untouched") {
    cfg.epochs_joint = 1;
    PPNet net(tiny_config(8), 2, 2, 4);
    PPNet ref(tiny_config(8), 2, 2, 4);
    // run only the warm-up by making the joint stage a no-op learner
    cfg.joint_optimizer = SgdSpec{0.0f};
    fit(net, ds, cfg);
    auto tn = net.backbone().trunk_parameters(), tr = ref.backbone().trunk_parameters();
    for (std::size_t i = 0; i < tn.size(); ++i)
      CHECK(std::equal(tn[i].data().begin(), tn[i].data().end(), tr[i].data().begin()));
    CHECK(std::equal(net.head().data().begin(), net.head().data().end(), ref.head().data().begin()));
    auto an = net.backbone().add_on_parameters(), ar = ref.backbone().add_on_parameters();
    CHECK_FALSE(std::equal(an[0].data().begin(), an[0].data().end(), ar[0].data().begin()));
  }
  SUBCASE("last-layer stage changes only the head") {
    cfg.epochs_last_layer = 2;
    cfg.last_layer_optimizer = AdamSpec{1e-2f};
    PPNet net(tiny_config(8), 2, 2, 4);
    TrainConfig no_last = cfg;
    no_last.epochs_last_layer = 0;
    PPNet ref(tiny_config(8), 2, 2, 4);
    fit(net, ds, cfg);
    fit(ref, ds, no_last);
    auto sn = net.named_tensors(), sr = ref.named_tensors();
    for (std::size_t i = 0; i < sn.size(); ++i) {
      CAPTURE(sn[i].name);
      const bool same = std::equal(sn[i].tensor.data().begin(), sn[i].tensor.data().end(), sr[i].tensor.data().begin());
      CHECK(same == (sn[i].name != "head"));
    }
  }
}

TEST_CASE("divergence names the stage") {
  const Dataset ds = color_toy(10, 8, 2);
  TrainConfig cfg = toy_train_config();
  PPNet net(tiny_config(8), 2, 2, 4);
  for (float& v : net.prototypes().data()) v = std::numeric_limits<float>::quiet_NaN();
  try {
    fit(net, ds, cfg);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("stage warmup") != std::string::npos);
    CHECK(msg.find("epoch 1") != std::string::npos);
  }
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.validate();
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ValueError);
}
