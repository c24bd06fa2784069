#include "ppks/training.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "ppks/error.hpp"
#include "ppks/rng.hpp"

namespace ppks {

void TrainConfig::validate() const {
  if (epochs_warmup < 0 || epochs_last_layer < 0) throw ValueError("train: epoch counts must be non-negative");
  if (push_every < 1) throw ValueError("train: push_every must be positive");
  if (epochs_joint < push_every) {
    throw ValueError("train: epochs_joint (" + std::to_string(epochs_joint) + ") must cover at least one push_every (" +
                     std::to_string(push_every) + ")");
  }
  if (lambda_clst < 0 || lambda_sep < 0 || lambda_l1 < 0) throw ValueError("train: lambdas must be non-negative");
  if (batch_size < 2) throw ValueError("train: batch_size must be at least 2");
  if (prototypes_per_class < 1) throw ValueError("train: prototypes_per_class must be positive");
}

namespace {

void check_cost_inputs(const Tensor& distances, std::span<const int> labels, const std::vector<int>& class_of,
                       const char* name) {
  if (distances.rank() != 4 || distances.dim(0) != labels.size() || distances.dim(1) != class_of.size()) {
    throw ShapeError(std::string(name) + ": distances " + shape_str(distances.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels and " + std::to_string(class_of.size()) + " prototypes");
  }
}

std::vector<std::uint8_t> class_mask(std::span<const int> labels, const std::vector<int>& class_of, bool own) {
  std::vector<std::uint8_t> mask(labels.size() * class_of.size());
  for (std::size_t n = 0; n < labels.size(); ++n)
    for (std::size_t p = 0; p < class_of.size(); ++p)
      mask[n * class_of.size() + p] = (class_of[p] == labels[n]) == own;
  return mask;
}

}  // namespace

Tensor cluster_cost(const Tensor& distances, std::span<const int> labels, const std::vector<int>& class_of) {
  check_cost_inputs(distances, labels, class_of, "cluster_cost");
  for (int y : labels) {
    if (std::find(class_of.begin(), class_of.end(), y) == class_of.end()) {
      throw ValueError("cluster_cost: class " + std::to_string(y) + " has no prototypes");
    }
  }
  return masked_min_mean(spatial_min(distances), class_mask(labels, class_of, true));
}

Tensor separation_cost(const Tensor& distances, std::span<const int> labels, const std::vector<int>& class_of) {
  check_cost_inputs(distances, labels, class_of, "separation_cost");
  if (std::set<int>(class_of.begin(), class_of.end()).size() < 2) {
    throw ValueError("separation_cost: prototypes cover fewer than 2 classes");
  }
  return masked_min_mean(spatial_min(distances), class_mask(labels, class_of, false));
}

LossTerms joint_loss(const PPNetOutput& out, std::span<const int> labels, const std::vector<int>& class_of,
                     float lambda_clst, float lambda_sep) {
  LossTerms t;
  const Tensor ce = softmax_cross_entropy(out.logits, labels);
  t.ce = ce.item();
  t.total = ce;
  if (lambda_clst != 0.0f) {
    const Tensor c = cluster_cost(out.distances, labels, class_of);
    t.cluster = c.item();
    t.total = add(t.total, scale(c, lambda_clst));
  }
  if (lambda_sep != 0.0f) {
    const Tensor s = separation_cost(out.distances, labels, class_of);
    t.separation = s.item();
    t.total = sub(t.total, scale(s, lambda_sep));
  }
  return t;
}

std::vector<std::uint8_t> off_class_mask(const std::vector<int>& class_of, int num_classes) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(num_classes) * class_of.size());
  for (int k = 0; k < num_classes; ++k)
    for (std::size_t j = 0; j < class_of.size(); ++j) mask[k * class_of.size() + j] = class_of[j] != k;
  return mask;
}

LabeledImages labeled(const std::vector<Patch>& patches) {
  LabeledImages out;
  for (const auto& p : patches) {
    out.images.push_back(&p.image);
    out.labels.push_back(p.label);
    out.ids.push_back(p.id);
  }
  return out;
}

double accuracy(std::span<const int> truth, std::span<const int> predicted) {
  if (truth.size() != predicted.size()) throw ShapeError("accuracy: length mismatch");
  if (truth.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += truth[i] == predicted[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

namespace {

int argmax_row(const float* row, std::size_t k) {
  return static_cast<int>(std::max_element(row, row + k) - row);
}

template <typename Forward>
std::vector<int> predict_batches(const std::vector<const Image*>& images, const NormalizationStats& stats,
                                 int batch_size, std::vector<std::vector<float>>* logits_out, Forward forward) {
  NoGradGuard guard;
  std::vector<int> preds;
  if (logits_out) logits_out->clear();
  for (std::size_t b = 0; b < images.size(); b += batch_size) {
    const std::size_t e = std::min(images.size(), b + static_cast<std::size_t>(batch_size));
    const Tensor x = to_batch(std::span(images).subspan(b, e - b), stats);
    const Tensor logits = forward(x);
    const std::size_t k = logits.dim(1);
    for (std::size_t n = 0; n < e - b; ++n) {
      const float* row = logits.ptr() + n * k;
      preds.push_back(argmax_row(row, k));
      if (logits_out) logits_out->emplace_back(row, row + k);
    }
  }
  return preds;
}

}  // namespace

std::vector<int> predict(PPNet& model, const std::vector<const Image*>& images, const NormalizationStats& stats,
                         int batch_size, std::vector<std::vector<float>>* logits_out) {
  return predict_batches(images, stats, batch_size, logits_out,
                         [&](const Tensor& x) { return model.forward(x, Mode::eval).logits; });
}

std::vector<int> predict(BaselineNet& model, const std::vector<const Image*>& images, const NormalizationStats& stats,
                         int batch_size, std::vector<std::vector<float>>* logits_out) {
  return predict_batches(images, stats, batch_size, logits_out,
                         [&](const Tensor& x) { return model.forward(x, Mode::eval); });
}

Tensor activation_scores(PPNet& model, const std::vector<const Image*>& images, const NormalizationStats& stats,
                         int batch_size) {
  if (images.empty()) throw ValueError("activation_scores: no images");
  NoGradGuard guard;
  const auto p = static_cast<std::size_t>(model.num_prototypes());
  Tensor out = Tensor::zeros({images.size(), p});
  for (std::size_t b = 0; b < images.size(); b += batch_size) {
    const std::size_t e = std::min(images.size(), b + static_cast<std::size_t>(batch_size));
    const Tensor x = to_batch(std::span(images).subspan(b, e - b), stats);
    const Tensor scores = model.forward(x, Mode::eval).top.scores;
    std::copy(scores.data().begin(), scores.data().end(), out.ptr() + b * p);
  }
  return out;
}

void push_prototypes(PPNet& model, const LabeledImages& train, const NormalizationStats& stats, int batch_size) {
  const auto& class_of = model.class_of();
  const std::size_t P = class_of.size();
  for (int k = 0; k < model.num_classes(); ++k) {
    if (std::find(train.labels.begin(), train.labels.end(), k) == train.labels.end()) {
      throw ValueError("push_prototypes: class " + std::to_string(k) + " has no training images");
    }
  }
  NoGradGuard guard;
  const std::size_t D = static_cast<std::size_t>(model.latent_dim());
  const int g = model.backbone().config().grid_size();
  const std::size_t cells = static_cast<std::size_t>(g) * g;

  struct Best {
    float distance = 0.0f;
    bool found = false;
    std::size_t image = 0, cell = 0;
    std::vector<float> vector;
  };
  std::vector<Best> best(P);
  for (std::size_t b = 0; b < train.images.size(); b += batch_size) {
    const std::size_t e = std::min(train.images.size(), b + static_cast<std::size_t>(batch_size));
    const Tensor x = to_batch(std::span(train.images).subspan(b, e - b), stats);
    const Tensor features = extract_features(model.backbone(), x);
    const Tensor dist = distance_map(features, model.prototypes());
    for (std::size_t n = 0; n < e - b; ++n) {
      const int label = train.labels[b + n];
      for (std::size_t p = 0; p < P; ++p) {
        if (class_of[p] != label) continue;
        const float* d = dist.ptr() + (n * P + p) * cells;
        for (std::size_t c = 0; c < cells; ++c) {
          if (best[p].found && !(d[c] < best[p].distance)) continue;
          best[p].found = true;
          best[p].distance = d[c];
          best[p].image = b + n;
          best[p].cell = c;
          best[p].vector.resize(D);
          for (std::size_t j = 0; j < D; ++j) best[p].vector[j] = features.ptr()[(n * D + j) * cells + c];
        }
      }
    }
  }
  for (std::size_t p = 0; p < P; ++p) {
    std::copy(best[p].vector.begin(), best[p].vector.end(), model.prototypes().ptr() + p * D);
    Provenance prov;
    prov.image_index = best[p].image;
    prov.image_id = train.ids.at(best[p].image);
    prov.cell_i = static_cast<int>(best[p].cell / g);
    prov.cell_j = static_cast<int>(best[p].cell % g);
    prov.rect = model.backbone().receptive_field(prov.cell_i, prov.cell_j);
    prov.patch = crop(*train.images[best[p].image], prov.rect);
    model.provenance()[p] = std::move(prov);
  }
}

namespace {

void set_trainable(const std::vector<Tensor>& params, bool flag) {
  for (Tensor t : params) {
    t.set_requires_grad(flag);
    t.zero_grad();
  }
}

std::string where(const std::string& stage, int epoch, std::size_t batch) {
  return "stage " + stage + ", epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch);
}

// Training items are (patch index, augmentation variant) pairs.
struct Item {
  std::size_t patch;
  int variant;
};

std::vector<Item> training_items(const Dataset& ds) {
  std::vector<Item> items;
  for (std::size_t i = 0; i < ds.train.size(); ++i)
    for (int v = 0; v < ds.manifest.augmentation_factor; ++v) items.push_back({i, v});
  return items;
}

Image item_image(const Dataset& ds, const Item& item, std::uint64_t seed) {
  const Patch& p = ds.train[item.patch];
  if (item.variant == 0) return p.image;
  return augment_variant(p.image, item.variant, ds.manifest.perspective_rho, augment_seed(seed, p.id, item.variant));
}

struct Batch {
  Tensor x;
  std::vector<int> labels;
};

Batch make_batch(const Dataset& ds, const std::vector<Item>& items, std::size_t b, std::size_t e, std::uint64_t seed) {
  std::vector<Image> imgs;
  imgs.reserve(e - b);
  Batch out;
  for (std::size_t i = b; i < e; ++i) {
    imgs.push_back(item_image(ds, items[i], seed));
    out.labels.push_back(ds.train[items[i].patch].label);
  }
  std::vector<const Image*> ptrs;
  for (const auto& im : imgs) ptrs.push_back(&im);
  out.x = to_batch(ptrs, ds.stats);
  return out;
}

// Batch boundaries that never leave a trailing batch of one image, which
// batch statistics cannot normalize.
std::vector<std::size_t> batch_starts(std::size_t count, std::size_t batch) {
  std::vector<std::size_t> starts;
  for (std::size_t b = 0; b < count; b += batch) starts.push_back(b);
  if (starts.size() > 1 && count - starts.back() < 2) starts.pop_back();
  starts.push_back(count);
  return starts;
}

std::vector<int> test_labels(const Dataset& ds) {
  std::vector<int> out;
  for (const auto& p : ds.test) out.push_back(p.label);
  return out;
}

template <typename Step>
EpochRecord run_epoch(const std::string& stage, int epoch, const Dataset& ds, std::vector<Item> items,
                      const TrainConfig& cfg, std::uint64_t order_tag, Step step) {
  Rng rng(derive_seed(cfg.seed, "order", order_tag));
  rng.shuffle(items);
  EpochRecord rec;
  rec.stage = stage;
  rec.epoch = epoch;
  const auto starts = batch_starts(items.size(), static_cast<std::size_t>(cfg.batch_size));
  std::size_t hits = 0, seen = 0;
  for (std::size_t bi = 0; bi + 1 < starts.size(); ++bi) {
    const Batch batch = make_batch(ds, items, starts[bi], starts[bi + 1], cfg.seed);
    try {
      const auto [terms, logits] = step(batch);
      if (!std::isfinite(terms.total.item())) throw DivergenceError("non-finite loss");
      const double w = static_cast<double>(batch.labels.size());
      rec.loss += terms.total.item() * w;
      rec.ce += terms.ce * w;
      rec.cluster += terms.cluster * w;
      rec.separation += terms.separation * w;
      const std::size_t k = logits.dim(1);
      for (std::size_t n = 0; n < batch.labels.size(); ++n) hits += argmax_row(logits.ptr() + n * k, k) == batch.labels[n];
      seen += batch.labels.size();
    } catch (const DivergenceError& e) {
      active_tape().clear();
      throw DivergenceError(where(stage, epoch, bi) + ": " + e.what());
    }
  }
  const double inv = seen ? 1.0 / static_cast<double>(seen) : 0.0;
  rec.loss *= inv;
  rec.ce *= inv;
  rec.cluster *= inv;
  rec.separation *= inv;
  rec.train_accuracy = static_cast<double>(hits) * inv;
  return rec;
}

}  // namespace

std::vector<EpochRecord> train_last_layer(PPNet& model, const Tensor& scores, std::span<const int> labels,
                                          const TrainConfig& cfg, int epochs, const EpochCallback& on_epoch) {
  if (scores.rank() != 2 || scores.dim(0) != labels.size() ||
      scores.dim(1) != static_cast<std::size_t>(model.num_prototypes())) {
    throw ShapeError("train_last_layer: scores " + shape_str(scores.shape()) + " do not match labels/prototypes");
  }
  const std::size_t n = labels.size(), p = scores.dim(1);
  Tensor head = model.head();
  head.set_requires_grad(true);
  Optimizer opt({head}, cfg.last_layer_optimizer);
  const auto mask = off_class_mask(model.class_of(), model.num_classes());
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::vector<EpochRecord> history;
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    Rng rng(derive_seed(cfg.seed, "last_layer_order", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    EpochRecord rec;
    rec.stage = "last_layer";
    rec.epoch = epoch;
    std::size_t hits = 0;
    for (std::size_t b = 0; b < n; b += cfg.batch_size) {
      const std::size_t e = std::min(n, b + static_cast<std::size_t>(cfg.batch_size));
      Tensor batch = Tensor::zeros({e - b, p});
      std::vector<int> y;
      for (std::size_t i = b; i < e; ++i) {
        std::copy_n(scores.ptr() + order[i] * p, p, batch.ptr() + (i - b) * p);
        y.push_back(labels[order[i]]);
      }
      opt.zero_grad();
      const Tensor lg = logits(batch, head);
      const Tensor ce = softmax_cross_entropy(lg, y);
      Tensor loss = ce;
      double l1v = 0.0;
      if (cfg.lambda_l1 != 0.0f) {
        const Tensor l1 = masked_l1(head, mask);
        l1v = l1.item();
        loss = add(loss, scale(l1, cfg.lambda_l1));
      }
      if (!std::isfinite(loss.item())) {
        active_tape().clear();
        throw DivergenceError(where("last_layer", epoch, b / cfg.batch_size) + ": non-finite loss");
      }
      try {
        backward(loss);
        opt.step();
      } catch (const DivergenceError& err) {
        throw DivergenceError(where("last_layer", epoch, b / cfg.batch_size) + ": " + err.what());
      }
      const double w = static_cast<double>(e - b);
      rec.loss += loss.item() * w;
      rec.ce += ce.item() * w;
      rec.l1 += l1v * w;
      for (std::size_t i = 0; i < e - b; ++i) hits += argmax_row(lg.ptr() + i * model.num_classes(), model.num_classes()) == y[i];
    }
    rec.loss /= static_cast<double>(n);
    rec.ce /= static_cast<double>(n);
    rec.l1 /= static_cast<double>(n);
    rec.train_accuracy = static_cast<double>(hits) / static_cast<double>(n);
    if (on_epoch) on_epoch(rec);
    history.push_back(rec);
  }
  head.set_requires_grad(false);
  return history;
}

TrainSummary fit(PPNet& model, const Dataset& ds, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (model.num_classes() != ds.manifest.num_classes()) throw ValueError("fit: model and dataset class counts differ");
  if (model.backbone().config().input_size != ds.manifest.patch_size) {
    throw ValueError("fit: backbone input_size differs from dataset patch_size");
  }
  TrainSummary summary;
  const auto items = training_items(ds);
  const auto train_set = labeled(ds.train);
  const auto test_set = labeled(ds.test);
  const auto truth = test_labels(ds);
  auto test_accuracy = [&]() { return accuracy(truth, predict(model, test_set.images, ds.stats, cfg.batch_size)); };
  auto latest_accuracy = [&]() {
    const auto& last = summary.history.back().test_accuracy;
    return last ? *last : test_accuracy();
  };
  auto emit = [&](EpochRecord rec, bool measure) {
    if (measure && cfg.track_test_accuracy && !ds.test.empty()) rec.test_accuracy = test_accuracy();
    if (on_epoch) on_epoch(rec);
    summary.history.push_back(rec);
  };

  auto trunk = model.backbone().trunk_parameters();
  auto add_on = model.backbone().add_on_parameters();
  auto step_with = [&](Optimizer& optimizer) {
    return [&, opt = &optimizer](const Batch& batch) {
      opt->zero_grad();
      const PPNetOutput out = model.forward(batch.x, Mode::train);
      LossTerms terms = joint_loss(out, batch.labels, model.class_of(), cfg.lambda_clst, cfg.lambda_sep);
      if (!std::isfinite(terms.total.item())) return std::pair{terms, out.logits};
      backward(terms.total);
      opt->step();
      return std::pair{terms, out.logits};
    };
  };

  std::uint64_t epoch_tag = 0;
  model.head().set_requires_grad(false);
  model.prototypes().set_requires_grad(true);

  // warm-up: trunk weights frozen, its batchnorm still normalizes by batch
  set_trainable(trunk, false);
  set_trainable(add_on, true);
  {
    std::vector<Tensor> params = add_on;
    params.push_back(model.prototypes());
    Optimizer opt(params, cfg.warmup_optimizer);
    for (int epoch = 1; epoch <= cfg.epochs_warmup; ++epoch) {
      emit(run_epoch("warmup", epoch, ds, items, cfg, epoch_tag++, step_with(opt)), true);
    }
  }

  set_trainable(trunk, true);
  {
    std::vector<Tensor> params = trunk;
    params.insert(params.end(), add_on.begin(), add_on.end());
    params.push_back(model.prototypes());
    Optimizer opt(params, cfg.joint_optimizer);
    for (int epoch = 1; epoch <= cfg.epochs_joint; ++epoch) {
      const bool last = epoch == cfg.epochs_joint;
      emit(run_epoch("joint", epoch, ds, items, cfg, epoch_tag++, step_with(opt)), true);
      if (epoch % cfg.push_every == 0 || last) {
        if (last) summary.pre_push_accuracy = latest_accuracy();
        push_prototypes(model, train_set, ds.stats, cfg.batch_size);
        EpochRecord rec;
        rec.stage = "push";
        rec.epoch = epoch;
        rec.diversity = prototype_diversity(model.provenance());
        emit(rec, true);
      }
    }
  }
  summary.post_push_accuracy = latest_accuracy();

  set_trainable(trunk, false);
  set_trainable(add_on, false);
  model.prototypes().set_requires_grad(false);
  if (cfg.epochs_last_layer > 0) {
    const auto p = static_cast<std::size_t>(model.num_prototypes());
    Tensor scores = Tensor::zeros({items.size(), p});
    std::vector<int> labels;
    constexpr std::size_t kChunk = 256;
    for (std::size_t b = 0; b < items.size(); b += kChunk) {
      const std::size_t e = std::min(items.size(), b + kChunk);
      std::vector<Image> owned;
      std::vector<const Image*> ptrs;
      for (std::size_t i = b; i < e; ++i) {
        owned.push_back(item_image(ds, items[i], cfg.seed));
        labels.push_back(ds.train[items[i].patch].label);
      }
      for (const auto& im : owned) ptrs.push_back(&im);
      const Tensor chunk = activation_scores(model, ptrs, ds.stats, cfg.batch_size);
      std::copy(chunk.data().begin(), chunk.data().end(), scores.ptr() + b * p);
    }
    train_last_layer(model, scores, labels, cfg, cfg.epochs_last_layer, [&](const EpochRecord& r) { emit(r, true); });
  }
  summary.final_accuracy = ds.test.empty() ? 0.0 : test_accuracy();
  summary.diversity = prototype_diversity(model.provenance());
  return summary;
}

TrainSummary baseline_train(BaselineNet& model, const Dataset& ds, const TrainConfig& cfg,
                            const EpochCallback& on_epoch) {
  cfg.validate();
  if (model.num_classes() != ds.manifest.num_classes()) {
    throw ValueError("baseline_train: model and dataset class counts differ");
  }
  TrainSummary summary;
  const auto items = training_items(ds);
  const auto test_set = labeled(ds.test);
  const auto truth = test_labels(ds);
  auto params = model.parameters();
  for (Tensor t : params) t.set_requires_grad(true);
  Optimizer opt(params, cfg.joint_optimizer);
  auto step = [&](const Batch& batch) {
    opt.zero_grad();
    const Tensor lg = model.forward(batch.x, Mode::train);
    LossTerms terms;
    terms.total = softmax_cross_entropy(lg, batch.labels);
    terms.ce = terms.total.item();
    if (std::isfinite(terms.ce)) {
      backward(terms.total);
      opt.step();
    }
    return std::pair{terms, lg};
  };
  const int epochs = cfg.epochs_warmup + cfg.epochs_joint;
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    EpochRecord rec = run_epoch("baseline", epoch, ds, items, cfg, static_cast<std::uint64_t>(epoch - 1), step);
    if (cfg.track_test_accuracy && !ds.test.empty()) {
      rec.test_accuracy = accuracy(truth, predict(model, test_set.images, ds.stats, cfg.batch_size));
    }
    if (on_epoch) on_epoch(rec);
    summary.history.push_back(rec);
  }
  for (Tensor t : params) t.set_requires_grad(false);
  summary.final_accuracy =
      ds.test.empty() ? 0.0 : accuracy(truth, predict(model, test_set.images, ds.stats, cfg.batch_size));
  summary.pre_push_accuracy = summary.post_push_accuracy = summary.final_accuracy;
  summary.diversity = 0.0;
  return summary;
}

}  // namespace ppks
