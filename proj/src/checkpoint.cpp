#include "ppks/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include <json.hpp>

#include "ppks/error.hpp"

namespace ppks {

namespace {

using json = nlohmann::ordered_json;

constexpr char kMagic[4] = {'P', 'P', 'K', 'S'};
constexpr std::size_t kPreamble = 16;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(const std::uint8_t* p, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

struct Array {
  std::string name;
  Shape shape;
  const float* data = nullptr;
};

class Writer {
 public:
  void add(std::string name, Shape shape, std::span<const float> values) {
    if (shape_numel(shape) != values.size()) throw ShapeError("checkpoint: array " + name + " size mismatch");
    json entry;
    entry["name"] = name;
    entry["offset"] = payload_.size();
    entry["shape"] = shape;
    dir_.push_back(std::move(entry));
    for (float f : values) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      for (int i = 0; i < 4; ++i) payload_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
  }

  std::vector<std::uint8_t> finish(json header) {
    header["arrays"] = std::move(dir_);
    header["payload_bytes"] = payload_.size();
    const std::string text = header.dump();
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put_u32(out, kCheckpointVersion);
    put_u64(out, text.size());
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), payload_.begin(), payload_.end());
    return out;
  }

 private:
  json dir_ = json::array();
  std::vector<std::uint8_t> payload_;
};

json backbone_json(const BackboneConfig& c) {
  return {{"input_size", c.input_size},
          {"block_channels", c.block_channels},
          {"add_on_dim", c.add_on_dim},
          {"use_batchnorm", c.use_batchnorm}};
}

BackboneConfig backbone_from(const json& j) {
  BackboneConfig c;
  c.input_size = j.at("input_size").get<int>();
  c.block_channels = j.at("block_channels").get<std::vector<int>>();
  c.add_on_dim = j.at("add_on_dim").get<int>();
  c.use_batchnorm = j.at("use_batchnorm").get<bool>();
  return c;
}

json common_header(const char* kind, const BackboneConfig& backbone, const CheckpointMeta& meta, int num_classes) {
  if (static_cast<int>(meta.classes.size()) != num_classes) {
    throw ValueError("checkpoint: " + std::to_string(meta.classes.size()) + " class names for " +
                     std::to_string(num_classes) + " classes");
  }
  json h;
  h["kind"] = kind;
  h["backbone"] = backbone_json(backbone);
  h["classes"] = meta.classes;
  json mean = json::array(), sd = json::array();
  for (int c = 0; c < 3; ++c) {
    mean.push_back(stats_to_string(meta.stats.mean[c]));
    sd.push_back(stats_to_string(meta.stats.stddev[c]));
  }
  h["stats"] = {{"mean", mean}, {"std", sd}};
  json md = json::parse(meta.metadata.empty() ? std::string("{}") : meta.metadata, nullptr, false);
  if (md.is_discarded() || !md.is_object()) throw ValueError("checkpoint: metadata must be a JSON object");
  h["metadata"] = std::move(md);
  return h;
}

void add_tensors(Writer& w, std::vector<NamedTensor> tensors) {
  for (const auto& t : tensors) w.add(t.name, t.tensor.shape(), t.tensor.data());
}

void load_tensors(std::vector<NamedTensor> tensors, std::map<std::string, Array>& arrays) {
  for (auto& t : tensors) {
    const auto it = arrays.find(t.name);
    if (it == arrays.end()) throw IoError("checkpoint: missing array " + t.name);
    if (it->second.shape != t.tensor.shape()) {
      throw ShapeError("checkpoint: array " + t.name + " has shape " + shape_str(it->second.shape) + ", model wants " +
                       shape_str(t.tensor.shape()));
    }
    std::copy_n(it->second.data, t.tensor.numel(), t.tensor.data().begin());
    arrays.erase(it);
  }
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Validates the preamble and returns the header text span.
std::string_view header_text(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kPreamble) throw IoError("checkpoint: truncated preamble");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw IoError("checkpoint: bad magic");
  const auto version = static_cast<std::uint32_t>(get_le(bytes.data() + 4, 4));
  if (version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported format version " + std::to_string(version));
  }
  const auto len = get_le(bytes.data() + 8, 8);
  if (len > bytes.size() - kPreamble) throw IoError("checkpoint: truncated header");
  return {reinterpret_cast<const char*>(bytes.data()) + kPreamble, static_cast<std::size_t>(len)};
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(PPNet& model, const CheckpointMeta& meta) {
  const int k = model.num_classes();
  json h = common_header("ppnet", model.backbone().config(), meta, k);
  h["num_prototypes"] = model.num_prototypes();
  h["prototypes_per_class"] = model.num_prototypes() / k;
  Writer w;
  add_tensors(w, model.named_tensors());
  json prov = json::array();
  for (std::size_t p = 0; p < model.provenance().size(); ++p) {
    const auto& pr = model.provenance()[p];
    if (!pr) {
      prov.push_back(nullptr);
      continue;
    }
    const std::string name = "provenance." + std::to_string(p);
    prov.push_back({{"image_id", pr->image_id},
                    {"image_index", pr->image_index},
                    {"cell", {pr->cell_i, pr->cell_j}},
                    {"rect", {pr->rect.x0, pr->rect.y0, pr->rect.x1, pr->rect.y1}},
                    {"patch", name}});
    w.add(name, {static_cast<std::size_t>(pr->patch.height), static_cast<std::size_t>(pr->patch.width), 3},
          pr->patch.pixels);
  }
  h["provenance"] = std::move(prov);
  return w.finish(std::move(h));
}

std::vector<std::uint8_t> encode_checkpoint(BaselineNet& model, const CheckpointMeta& meta) {
  json h = common_header("baseline", model.backbone().config(), meta, model.num_classes());
  Writer w;
  add_tensors(w, model.named_tensors());
  return w.finish(std::move(h));
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  const auto text = header_text(bytes);
  const std::size_t payload_start = kPreamble + text.size();
  const std::size_t payload_size = bytes.size() - payload_start;
  Checkpoint ck;
  try {
    const json h = json::parse(text);
    const auto kind = h.at("kind").get<std::string>();
    if (kind != "ppnet" && kind != "baseline") throw IoError("checkpoint: unknown model kind '" + kind + "'");
    ck.kind = kind == "ppnet" ? ModelKind::ppnet : ModelKind::baseline;
    ck.meta.classes = h.at("classes").get<std::vector<std::string>>();
    for (int c = 0; c < 3; ++c) {
      ck.meta.stats.mean[c] = std::stod(h.at("stats").at("mean").at(c).get<std::string>());
      ck.meta.stats.stddev[c] = std::stod(h.at("stats").at("std").at(c).get<std::string>());
    }
    ck.meta.metadata = h.at("metadata").dump();

    if (h.at("payload_bytes").get<std::size_t>() != payload_size) {
      throw IoError("checkpoint: payload is " + std::to_string(payload_size) + " bytes, header says " +
                    std::to_string(h.at("payload_bytes").get<std::size_t>()));
    }
    std::map<std::string, Array> arrays;
    std::size_t expected = 0;
    for (const auto& e : h.at("arrays")) {
      Array a;
      a.name = e.at("name").get<std::string>();
      a.shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      if (offset != expected) throw IoError("checkpoint: array " + a.name + " is not contiguous");
      expected += shape_numel(a.shape) * 4;
      if (expected > payload_size) throw IoError("checkpoint: array " + a.name + " runs past the payload");
      if (!arrays.emplace(a.name, a).second) throw IoError("checkpoint: duplicate array " + a.name);
    }
    if (expected != payload_size) throw IoError("checkpoint: payload has trailing bytes");

    // decode into aligned storage
    std::vector<float> floats(payload_size / 4);
    for (std::size_t i = 0; i < floats.size(); ++i) {
      floats[i] = std::bit_cast<float>(static_cast<std::uint32_t>(get_le(bytes.data() + payload_start + 4 * i, 4)));
    }
    for (const auto& e : h.at("arrays")) {
      arrays[e.at("name").get<std::string>()].data = floats.data() + e.at("offset").get<std::size_t>() / 4;
    }

    const BackboneConfig backbone = backbone_from(h.at("backbone"));
    const int k = static_cast<int>(ck.meta.classes.size());
    if (ck.kind == ModelKind::ppnet) {
      const int ppc = h.at("prototypes_per_class").get<int>();
      if (h.at("num_prototypes").get<int>() != ppc * k) throw IoError("checkpoint: prototype count mismatch");
      ck.ppnet = PPNet(backbone, k, ppc, 0);
      load_tensors(ck.ppnet.named_tensors(), arrays);
      const auto& prov = h.at("provenance");
      if (prov.size() != static_cast<std::size_t>(ck.ppnet.num_prototypes())) {
        throw IoError("checkpoint: provenance list has the wrong length");
      }
      for (std::size_t p = 0; p < prov.size(); ++p) {
        const auto& e = prov[p];
        if (e.is_null()) continue;
        Provenance pr;
        pr.image_id = e.at("image_id").get<std::string>();
        pr.image_index = e.at("image_index").get<std::size_t>();
        pr.cell_i = e.at("cell").at(0).get<int>();
        pr.cell_j = e.at("cell").at(1).get<int>();
        const auto r = e.at("rect").get<std::vector<int>>();
        if (r.size() != 4) throw IoError("checkpoint: provenance rect needs 4 values");
        pr.rect = {r[0], r[1], r[2], r[3]};
        const auto it = arrays.find(e.at("patch").get<std::string>());
        if (it == arrays.end()) throw IoError("checkpoint: missing provenance patch " + std::to_string(p));
        const Shape want{static_cast<std::size_t>(pr.rect.height()), static_cast<std::size_t>(pr.rect.width()), 3};
        if (it->second.shape != want) throw ShapeError("checkpoint: provenance patch " + std::to_string(p) + " shape");
        pr.patch = Image(pr.rect.width(), pr.rect.height());
        std::copy_n(it->second.data, pr.patch.pixels.size(), pr.patch.pixels.begin());
        arrays.erase(it);
        ck.ppnet.provenance()[p] = std::move(pr);
      }
    } else {
      ck.baseline = BaselineNet(backbone, k, 0);
      load_tensors(ck.baseline.named_tensors(), arrays);
    }
    if (!arrays.empty()) throw IoError("checkpoint: unexpected array " + arrays.begin()->first);
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint: malformed header: ") + e.what());
  }
  return ck;
}

namespace {

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, PPNet& model, const CheckpointMeta& meta) {
  write_file(path, encode_checkpoint(model, meta));
}

void save_checkpoint(const std::filesystem::path& path, BaselineNet& model, const CheckpointMeta& meta) {
  write_file(path, encode_checkpoint(model, meta));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::string checkpoint_header(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  const auto text = header_text(bytes);
  try {
    return json::parse(text).dump(2);
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint: malformed header: ") + e.what());
  }
}

}  // namespace ppks
