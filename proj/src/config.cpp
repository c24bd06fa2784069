#include "ppks/config.hpp"

#include <charconv>
#include <set>

#include <json.hpp>

#include "ppks/error.hpp"

namespace ppks {

namespace {

using json = nlohmann::ordered_json;

// Shortest decimal that reads back as the same float.
double float_json(float f) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, f);
  return std::stod(std::string(buf, r.ptr));
}

json optimizer_json(const OptimizerSpec& spec) {
  if (const auto* s = std::get_if<SgdSpec>(&spec)) {
    return {{"type", "sgd"}, {"lr", float_json(s->lr)}, {"momentum", float_json(s->momentum)}};
  }
  const auto& a = std::get<AdamSpec>(spec);
  return {{"type", "adam"},
          {"lr", float_json(a.lr)},
          {"beta1", float_json(a.beta1)},
          {"beta2", float_json(a.beta2)},
          {"eps", float_json(a.eps)}};
}

json train_json(const TrainConfig& t) {
  return {{"epochs_warmup", t.epochs_warmup},
          {"epochs_joint", t.epochs_joint},
          {"push_every", t.push_every},
          {"epochs_last_layer", t.epochs_last_layer},
          {"lambda_clst", float_json(t.lambda_clst)},
          {"lambda_sep", float_json(t.lambda_sep)},
          {"lambda_l1", float_json(t.lambda_l1)},
          {"batch_size", t.batch_size},
          {"prototypes_per_class", t.prototypes_per_class},
          {"warmup_optimizer", optimizer_json(t.warmup_optimizer)},
          {"joint_optimizer", optimizer_json(t.joint_optimizer)},
          {"last_layer_optimizer", optimizer_json(t.last_layer_optimizer)},
          {"seed", t.seed},
          {"track_test_accuracy", t.track_test_accuracy}};
}

// Reads `j` into the fields it names, rejecting anything unknown.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValueError("config: " + where() + " must be an object");
  }
  void done() const {
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw ValueError("config: unknown key '" + prefix() + key + "'");
    }
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ValueError("config: wrong type for '" + prefix() + key + "'");
    }
  }

  void get(const char* key, float& out) {
    double d = out;
    get(key, d);
    out = static_cast<float>(d);
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const json& at(const char* key) const { return j_.at(key); }
  std::string child(const char* key) const { return prefix() + key; }

 private:
  std::string prefix() const { return path_.empty() ? "" : path_ + "."; }
  std::string where() const { return path_.empty() ? "top level" : "'" + path_ + "'"; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

OptimizerSpec read_optimizer(const json& j, const std::string& path, const OptimizerSpec& current) {
  Reader r(j, path);
  std::string type = std::holds_alternative<SgdSpec>(current) ? "sgd" : "adam";
  r.get("type", type);
  if (type == "sgd") {
    SgdSpec s = std::holds_alternative<SgdSpec>(current) ? std::get<SgdSpec>(current) : SgdSpec{};
    r.get("lr", s.lr);
    r.get("momentum", s.momentum);
    r.done();
    return s;
  }
  if (type == "adam") {
    AdamSpec a = std::holds_alternative<AdamSpec>(current) ? std::get<AdamSpec>(current) : AdamSpec{};
    r.get("lr", a.lr);
    r.get("beta1", a.beta1);
    r.get("beta2", a.beta2);
    r.get("eps", a.eps);
    r.done();
    return a;
  }
  throw ValueError("config: " + path + ".type must be sgd or adam");
}

}  // namespace

void RunConfig::apply_seed(std::uint64_t s) {
  seed = s;
  dataset.seed = s;
  train.seed = s;
  embedding.seed = s;
}

void RunConfig::validate() const {
  dataset.validate();
  backbone.validate();
  train.validate();
  if (backbone.input_size != dataset.patch_size) {
    throw ValueError("config: backbone.input_size (" + std::to_string(backbone.input_size) +
                     ") must equal dataset.patch_size (" + std::to_string(dataset.patch_size) + ")");
  }
  if (explain.top_k < 1) throw ValueError("config: explain.top_k must be positive");
  if (explain.limit < 0) throw ValueError("config: explain.limit must be non-negative");
  if (embedding.k_neighbors < 1 || embedding.n_components < 1 || embedding.epochs < 1 ||
      embedding.negative_samples < 0 || !(embedding.min_dist >= 0.0) || !(embedding.spread > 0.0) ||
      !(embedding.learning_rate > 0.0)) {
    throw ValueError("config: invalid embedding settings");
  }
}

RunConfig config_from_json(std::string_view text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ValueError("config: not valid JSON");
  RunConfig c;
  Reader top(j, "");
  if (top.has("seed")) {
    std::uint64_t s = 0;
    top.get("seed", s);
    c.apply_seed(s);
  }
  if (top.has("dataset")) {
    Reader r(top.at("dataset"), "dataset");
    auto& d = c.dataset;
    r.get("classes", d.classes);
    r.get("patches_per_class", d.patches_per_class);
    r.get("patch_size", d.patch_size);
    r.get("split", d.split);
    r.get("augmentation_factor", d.augmentation_factor);
    r.get("seed", d.seed);
    r.get("patches_per_source", d.patches_per_source);
    r.get("perspective_rho", d.perspective_rho);
    r.get("view_units", d.view_units);
    r.done();
  }
  if (top.has("backbone")) {
    Reader r(top.at("backbone"), "backbone");
    auto& b = c.backbone;
    r.get("input_size", b.input_size);
    r.get("block_channels", b.block_channels);
    r.get("add_on_dim", b.add_on_dim);
    r.get("use_batchnorm", b.use_batchnorm);
    r.done();
  }
  if (top.has("train")) {
    Reader r(top.at("train"), "train");
    auto& t = c.train;
    r.get("epochs_warmup", t.epochs_warmup);
    r.get("epochs_joint", t.epochs_joint);
    r.get("push_every", t.push_every);
    r.get("epochs_last_layer", t.epochs_last_layer);
    r.get("lambda_clst", t.lambda_clst);
    r.get("lambda_sep", t.lambda_sep);
    r.get("lambda_l1", t.lambda_l1);
    r.get("batch_size", t.batch_size);
    r.get("prototypes_per_class", t.prototypes_per_class);
    r.get("seed", t.seed);
    r.get("track_test_accuracy", t.track_test_accuracy);
    if (r.has("warmup_optimizer"))
      t.warmup_optimizer = read_optimizer(r.at("warmup_optimizer"), r.child("warmup_optimizer"), t.warmup_optimizer);
    if (r.has("joint_optimizer"))
      t.joint_optimizer = read_optimizer(r.at("joint_optimizer"), r.child("joint_optimizer"), t.joint_optimizer);
    if (r.has("last_layer_optimizer"))
      t.last_layer_optimizer =
          read_optimizer(r.at("last_layer_optimizer"), r.child("last_layer_optimizer"), t.last_layer_optimizer);
    r.done();
  }
  if (top.has("embedding")) {
    Reader r(top.at("embedding"), "embedding");
    auto& e = c.embedding;
    r.get("k_neighbors", e.k_neighbors);
    r.get("n_components", e.n_components);
    r.get("min_dist", e.min_dist);
    r.get("spread", e.spread);
    r.get("epochs", e.epochs);
    r.get("negative_samples", e.negative_samples);
    r.get("learning_rate", e.learning_rate);
    r.get("seed", e.seed);
    r.done();
  }
  if (top.has("explain")) {
    Reader r(top.at("explain"), "explain");
    r.get("top_k", c.explain.top_k);
    r.get("limit", c.explain.limit);
    r.done();
  }
  top.done();
  c.validate();
  return c;
}

std::string config_to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  const auto& d = c.dataset;
  j["dataset"] = {{"classes", d.classes},
                  {"patches_per_class", d.patches_per_class},
                  {"patch_size", d.patch_size},
                  {"split", d.split},
                  {"augmentation_factor", d.augmentation_factor},
                  {"seed", d.seed},
                  {"patches_per_source", d.patches_per_source},
                  {"perspective_rho", d.perspective_rho},
                  {"view_units", d.view_units}};
  j["backbone"] = {{"input_size", c.backbone.input_size},
                   {"block_channels", c.backbone.block_channels},
                   {"add_on_dim", c.backbone.add_on_dim},
                   {"use_batchnorm", c.backbone.use_batchnorm}};
  j["train"] = train_json(c.train);
  const auto& e = c.embedding;
  j["embedding"] = {{"k_neighbors", e.k_neighbors},
                    {"n_components", e.n_components},
                    {"min_dist", e.min_dist},
                    {"spread", e.spread},
                    {"epochs", e.epochs},
                    {"negative_samples", e.negative_samples},
                    {"learning_rate", e.learning_rate},
                    {"seed", e.seed}};
  j["explain"] = {{"top_k", c.explain.top_k}, {"limit", c.explain.limit}};
  return j.dump(2);
}

std::string train_config_json(const TrainConfig& config) { return train_json(config).dump(); }

std::string summary_json(const TrainSummary& s) {
  json j;
  j["pre_push_accuracy"] = s.pre_push_accuracy;
  j["post_push_accuracy"] = s.post_push_accuracy;
  j["final_accuracy"] = s.final_accuracy;
  j["diversity"] = s.diversity;
  json history = json::array();
  for (const auto& r : s.history) {
    json e{{"stage", r.stage},     {"epoch", r.epoch},           {"loss", r.loss},
           {"ce", r.ce},           {"cluster", r.cluster},       {"separation", r.separation},
           {"l1", r.l1},           {"train_accuracy", r.train_accuracy}};
    e["test_accuracy"] = r.test_accuracy ? json(*r.test_accuracy) : json(nullptr);
    e["diversity"] = r.diversity ? json(*r.diversity) : json(nullptr);
    history.push_back(std::move(e));
  }
  j["history"] = std::move(history);
  return j.dump(2);
}

}  // namespace ppks
