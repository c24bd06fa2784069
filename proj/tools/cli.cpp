#include "cli.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ppks/checkpoint.hpp"
#include "ppks/config.hpp"
#include "ppks/embedding.hpp"
#include "ppks/error.hpp"
#include "ppks/explain.hpp"
#include "ppks/metrics.hpp"
#include "ppks/rng.hpp"
#include "ppks/training.hpp"

namespace ppks {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

std::string fmt(double v, const char* spec = "%.4f") {
  char buf[32];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : ",") + x;
  return s;
}

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string data, out, checkpoint, split = "test", ids, new_ids;
  std::optional<int> k, limit;
  bool quiet = false;
};

RunConfig resolve(const Options& o) {
  RunConfig cfg = o.config.empty() ? RunConfig{} : config_from_json(read_text(o.config));
  if (o.seed) cfg.apply_seed(*o.seed);
  return cfg;
}

// The dataset on disk wins over the config's dataset section.
RunConfig resolve_with(const Options& o, const Dataset& ds) {
  RunConfig cfg = resolve(o);
  cfg.dataset = ds.manifest;
  cfg.validate();
  return cfg;
}

const std::vector<Patch>& split_of(const Dataset& ds, const std::string& name) {
  return name == "train" ? ds.train : ds.test;
}

void check_compatible(const Checkpoint& ck, const Dataset& ds) {
  if (ck.meta.classes != ds.manifest.classes) {
    throw ValueError("class set mismatch: checkpoint has [" + join(ck.meta.classes) + "], dataset has [" +
                     join(ds.manifest.classes) + "]");
  }
  if (ck.meta.stats != ds.stats) throw ValueError("normalization stats differ between checkpoint and dataset");
  const int input = ck.kind == ModelKind::ppnet ? ck.ppnet.backbone().config().input_size
                                                : ck.baseline.backbone().config().input_size;
  if (input != ds.manifest.patch_size) {
    throw ValueError("checkpoint expects " + std::to_string(input) + " px patches, dataset has " +
                     std::to_string(ds.manifest.patch_size));
  }
}

EpochCallback progress(std::ostream& out, bool quiet) {
  if (quiet) return {};
  return [&out](const EpochRecord& r) {
    out << r.stage << " epoch " << r.epoch;
    if (r.stage != "push") out << " loss " << fmt(r.loss) << " train_acc " << fmt(r.train_accuracy);
    if (r.test_accuracy) out << " test_acc " << fmt(*r.test_accuracy);
    if (r.diversity) out << " diversity " << fmt(*r.diversity);
    out << '\n';
  };
}

std::string run_metadata(const RunConfig& cfg, const TrainSummary& s) {
  json md;
  md["config"] = json::parse(config_to_json(cfg));
  md["summary"] = {{"pre_push_accuracy", s.pre_push_accuracy},
                   {"post_push_accuracy", s.post_push_accuracy},
                   {"final_accuracy", s.final_accuracy},
                   {"diversity", s.diversity}};
  return md.dump();
}

void cmd_synth(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve(o);
  cfg.validate();
  const Dataset ds = synth_dataset(cfg.dataset);
  write_dataset(o.out, ds);
  write_text(fs::path(o.out) / "resolved-config.json", config_to_json(cfg));
  out << "wrote " << ds.train.size() << " train and " << ds.test.size() << " test patches to " << o.out << '\n';
}

void cmd_train(const Options& o, std::ostream& out) {
  const Dataset ds = load_dataset(o.data);
  const RunConfig cfg = resolve_with(o, ds);
  PPNet model(cfg.backbone, ds.manifest.num_classes(), cfg.train.prototypes_per_class, cfg.train.seed);
  const TrainSummary s = fit(model, ds, cfg.train, progress(out, o.quiet));
  const fs::path dir(o.out);
  save_checkpoint(dir / "checkpoint.ppks", model, {ds.manifest.classes, ds.stats, run_metadata(cfg, s)});
  write_text(dir / "history.json", summary_json(s));
  write_text(dir / "resolved-config.json", config_to_json(cfg));
  out << "final test accuracy " << fmt(s.final_accuracy) << " (before push " << fmt(s.pre_push_accuracy)
      << ", after push " << fmt(s.post_push_accuracy) << "), diversity " << fmt(s.diversity) << '\n';
}

void cmd_train_baseline(const Options& o, std::ostream& out) {
  const Dataset ds = load_dataset(o.data);
  const RunConfig cfg = resolve_with(o, ds);
  BaselineNet model(cfg.backbone, ds.manifest.num_classes(), cfg.train.seed);
  const TrainSummary s = baseline_train(model, ds, cfg.train, progress(out, o.quiet));
  const fs::path dir(o.out);
  save_checkpoint(dir / "baseline.ppks", model, {ds.manifest.classes, ds.stats, run_metadata(cfg, s)});
  write_text(dir / "baseline-history.json", summary_json(s));
  write_text(dir / "resolved-config.json", config_to_json(cfg));
  out << "final test accuracy " << fmt(s.final_accuracy) << '\n';
}

Checkpoint load_ppnet(const Options& o, const Dataset& ds) {
  Checkpoint ck = load_checkpoint(o.checkpoint);
  if (ck.kind != ModelKind::ppnet) throw ValueError(o.checkpoint + " holds a baseline model, not a prototype network");
  check_compatible(ck, ds);
  return ck;
}

void cmd_push(const Options& o, std::ostream& out) {
  const Dataset ds = load_dataset(o.data);
  Checkpoint ck = load_ppnet(o, ds);
  push_prototypes(ck.ppnet, labeled(ds.train), ds.stats);
  save_checkpoint(o.out, ck.ppnet, ck.meta);
  out << "pushed " << ck.ppnet.num_prototypes() << " prototypes, diversity "
      << fmt(prototype_diversity(ck.ppnet.provenance())) << '\n';
}

void cmd_eval(const Options& o, std::ostream& out) {
  const Dataset ds = load_dataset(o.data);
  Checkpoint ck = load_checkpoint(o.checkpoint);
  check_compatible(ck, ds);
  const LabeledImages li = labeled(split_of(ds, o.split));
  if (li.images.empty()) throw ValueError("split '" + o.split + "' is empty");
  std::vector<std::vector<float>> logits;
  const auto pred = ck.kind == ModelKind::ppnet ? predict(ck.ppnet, li.images, ds.stats, 32, &logits)
                                                : predict(ck.baseline, li.images, ds.stats, 32, &logits);
  const MetricsReport r = weighted_metrics(li.labels, pred, ds.manifest.num_classes());
  std::vector<PredictionRow> rows;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    rows.push_back({li.ids[i], li.labels[i], pred[i], *std::max_element(logits[i].begin(), logits[i].end())});
  }
  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_text(dir / "metrics.json", metrics_json(r, ds.manifest.classes));
  write_predictions_csv(dir / "predictions.csv", rows, ds.manifest.classes);
  out << o.split << " accuracy " << fmt(r.accuracy) << " precision " << fmt(r.precision) << " recall "
      << fmt(r.recall) << " f1 " << fmt(r.f1) << " (" << pred.size() << " patches)\n";
}

// Round-robin over classes in split order.
std::vector<std::size_t> default_selection(const std::vector<Patch>& patches, int num_classes, int limit) {
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < patches.size(); ++i) by_class[patches[i].label].push_back(i);
  std::vector<std::size_t> out;
  for (std::size_t round = 0; static_cast<int>(out.size()) < limit; ++round) {
    bool any = false;
    for (const auto& c : by_class) {
      if (round < c.size() && static_cast<int>(out.size()) < limit) {
        out.push_back(c[round]);
        any = true;
      }
    }
    if (!any) break;
  }
  return out;
}

std::vector<std::size_t> find_ids(const std::vector<Patch>& patches, const std::vector<std::string>& ids) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < patches.size(); ++i) index[patches[i].id] = i;
  std::vector<std::size_t> out;
  for (const auto& id : ids) {
    const auto it = index.find(id);
    if (it == index.end()) throw ValueError("no patch '" + id + "' in the selected split");
    out.push_back(it->second);
  }
  return out;
}

void cmd_explain(const Options& o, std::ostream& out) {
  const Dataset ds = load_dataset(o.data);
  Checkpoint ck = load_ppnet(o, ds);
  const RunConfig cfg = resolve(o);
  const int k = o.k.value_or(cfg.explain.top_k);
  const auto& patches = split_of(ds, o.split);
  const auto chosen = o.ids.empty()
                          ? default_selection(patches, ds.manifest.num_classes(), o.limit.value_or(cfg.explain.limit))
                          : find_ids(patches, split_list(o.ids));
  for (std::size_t i : chosen) {
    const Patch& p = patches[i];
    const ExplanationReport r = explain(ck.ppnet, p.image, p.id, ds, k, o.out);
    out << p.id << " true " << ds.manifest.classes[p.label] << " pred " << ds.manifest.classes[r.predicted_class];
    for (const auto& e : r.evidence) out << " p" << e.prototype_id << ":" << fmt(e.contribution, "%.3f");
    out << '\n';
  }
}

void cmd_embed(const Options& o, std::ostream& out) {
  const Dataset ds = load_dataset(o.data);
  Checkpoint ck = load_ppnet(o, ds);
  const RunConfig cfg = resolve(o);
  const auto& patches = split_of(ds, o.split);
  const auto new_ids = split_list(o.new_ids);
  const auto held = find_ids(patches, new_ids);
  const std::set<std::size_t> held_set(held.begin(), held.end());

  std::vector<const Image*> images;
  std::vector<int> labels;
  std::vector<PointInfo> info;
  for (std::size_t i = 0; i < patches.size(); ++i) {
    if (held_set.count(i)) continue;
    images.push_back(&patches[i].image);
    labels.push_back(patches[i].label);
    info.push_back({ds.manifest.classes[patches[i].label], o.split, patches[i].id});
  }
  const Matrix vectors = activation_vectors(ck.ppnet, images, ds.stats);
  const Embedding emb = embed(vectors, cfg.embedding);
  const double purity = knn_purity(emb.coords, labels);

  Matrix random(emb.coords.rows(), emb.coords.cols());
  Rng rng(derive_seed(cfg.embedding.seed, "random_layout"));
  for (Eigen::Index i = 0; i < random.size(); ++i) random.data()[i] = rng.normal();
  const double random_purity = knn_purity(random, labels);

  Matrix coords = emb.coords;
  std::vector<int> all_labels = labels;
  std::vector<std::string> splits(labels.size(), o.split);
  json projected = json::array();
  if (!held.empty()) {
    std::vector<const Image*> new_images;
    for (std::size_t i : held) new_images.push_back(&patches[i].image);
    const Matrix nv = activation_vectors(ck.ppnet, new_images, ds.stats);
    coords.conservativeResize(coords.rows() + nv.rows(), Eigen::NoChange);
    for (Eigen::Index r = 0; r < nv.rows(); ++r) {
      const Patch& p = patches[held[r]];
      const ProjectedPoint pp = project_point(vectors, emb, labels, std::span<const double>(nv.row(r).data(), nv.cols()),
                                              p.label, cfg.embedding);
      coords.row(emb.coords.rows() + r) = pp.coords;
      all_labels.push_back(p.label);
      splits.push_back("new");
      info.push_back({ds.manifest.classes[p.label], "new", p.id});
      projected.push_back({{"id", p.id},
                           {"label", ds.manifest.classes[p.label]},
                           {"certainty", pp.certainty},
                           {"coords", std::vector<double>(pp.coords.data(), pp.coords.data() + pp.coords.size())}});
    }
  }
  const fs::path dir(o.out);
  fs::create_directories(dir);
  write_embedding_csv(dir / "embedding.csv", coords, info);
  write_embedding_png(dir / "embedding.png", coords, all_labels, splits);
  json summary;
  summary["points"] = labels.size();
  summary["purity_k10"] = purity;
  summary["random_layout_purity_k10"] = random_purity;
  summary["spectral_init"] = emb.spectral;
  summary["a"] = emb.a;
  summary["b"] = emb.b;
  summary["projected"] = std::move(projected);
  write_text(dir / "embedding.json", summary.dump(2));
  out << "embedded " << labels.size() << " points, purity " << fmt(purity) << " (random layout "
      << fmt(random_purity) << ")\n";
}

void cmd_inspect(const Options& o, std::ostream& out) { out << checkpoint_header(o.checkpoint) << '\n'; }

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Prototype-based kidney stone patch classifier"};
  app.name("ppks");
  app.require_subcommand(1);
  Options o;
  auto common = [&o](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Override every seed");
  };
  auto data = [&o](CLI::App* sub) {
    sub->add_option("--data", o.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  };
  auto checkpoint = [&o](CLI::App* sub) {
    sub->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  };
  auto split = [&o](CLI::App* sub) {
    sub->add_option("--split", o.split, "train or test")->check(CLI::IsMember({"train", "test"}));
  };

  auto* synth = app.add_subcommand("synth", "Generate the synthetic dataset");
  common(synth);
  synth->add_option("--out", o.out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Train the prototype network");
  common(train);
  data(train);
  train->add_option("--out", o.out, "Output directory")->required();
  train->add_flag("--quiet", o.quiet, "No per-epoch lines");

  auto* baseline = app.add_subcommand("train-baseline", "Train the plain baseline");
  common(baseline);
  data(baseline);
  baseline->add_option("--out", o.out, "Output directory")->required();
  baseline->add_flag("--quiet", o.quiet, "No per-epoch lines");

  auto* push = app.add_subcommand("push", "Project prototypes onto training patches");
  checkpoint(push);
  data(push);
  push->add_option("--out", o.out, "Output checkpoint file")->required();

  auto* eval = app.add_subcommand("eval", "Metrics and per-patch predictions");
  checkpoint(eval);
  data(eval);
  split(eval);
  eval->add_option("--out", o.out, "Output directory")->required();

  auto* expl = app.add_subcommand("explain", "Evidence reports for selected patches");
  common(expl);
  checkpoint(expl);
  data(expl);
  split(expl);
  expl->add_option("--out", o.out, "Output directory")->required();
  expl->add_option("--k", o.k, "Prototypes per report")->check(CLI::PositiveNumber);
  expl->add_option("--limit", o.limit, "Patches to explain when --ids is absent")->check(CLI::NonNegativeNumber);
  expl->add_option("--ids", o.ids, "Comma-separated patch ids");

  auto* emb = app.add_subcommand("embed", "3-D embedding of prototype activations");
  common(emb);
  checkpoint(emb);
  data(emb);
  split(emb);
  emb->add_option("--out", o.out, "Output directory")->required();
  emb->add_option("--new-ids", o.new_ids, "Comma-separated ids held out and projected afterwards");

  auto* inspect = app.add_subcommand("inspect", "Print a checkpoint header");
  checkpoint(inspect);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (synth->parsed()) cmd_synth(o, out);
    else if (train->parsed()) cmd_train(o, out);
    else if (baseline->parsed()) cmd_train_baseline(o, out);
    else if (push->parsed()) cmd_push(o, out);
    else if (eval->parsed()) cmd_eval(o, out);
    else if (expl->parsed()) cmd_explain(o, out);
    else if (emb->parsed()) cmd_embed(o, out);
    else if (inspect->parsed()) cmd_inspect(o, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace ppks
