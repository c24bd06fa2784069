#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <fstream>
#include <functional>

#include <json.hpp>

#include "ppks/checkpoint.hpp"
#include "ppks/error.hpp"
#include "ppks/rng.hpp"
#include "support/random_tensor.hpp"
#include "support/temp_dir.hpp"

using namespace ppks;
using json = nlohmann::ordered_json;

namespace {

BackboneConfig small() {
  BackboneConfig c;
  c.input_size = 16;
  c.block_channels = {4, 6};
  c.add_on_dim = 8;
  return c;
}

// Randomizes every stored tensor so nothing matches a fresh construction.
template <class Net>
void scramble(Net& net, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& t : net.named_tensors())
    for (float& v : t.tensor.data()) v = static_cast<float>(rng.uniform(0.05, 1.5));
}

PPNet pushed_net() {
  PPNet net(small(), 3, 2, 9);
  scramble(net, 4);
  Rng rng(2);
  for (int p = 0; p < net.num_prototypes(); ++p) {
    if (p == 3) continue;  // left unpushed
    Provenance pr;
    pr.image_id = "img_" + std::to_string(p);
    pr.image_index = static_cast<std::size_t>(p * 7);
    pr.cell_i = p % 4;
    pr.cell_j = 1;
    pr.rect = {p, 0, p + 5, 6};
    pr.patch = Image(5, 6);
    for (float& v : pr.patch.pixels) v = static_cast<float>(rng.uniform());
    net.provenance()[p] = pr;
  }
  return net;
}

CheckpointMeta meta3() {
  CheckpointMeta m;
  m.classes = {"AU", "BRU", "CYS"};
  m.stats.mean = {0.1, 0.2, 1.0 / 3.0};
  m.stats.stddev = {0.25, 0.5, 0.7071067811865476};
  m.metadata = R"({"train":{"epochs":3,"lr":0.001},"note":"x"})";
  return m;
}

Tensor input(std::uint64_t seed) {
  Rng rng(seed);
  return ppks::testing::random_tensor({2, 3, 16, 16}, rng);
}

bool same_bits(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.numel() * sizeof(float)) == 0;
}

std::vector<std::uint8_t> with_header(const std::vector<std::uint8_t>& bytes, const std::function<void(json&)>& edit) {
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(bytes[8 + i]) << (8 * i);
  json h = json::parse(std::string(bytes.begin() + 16, bytes.begin() + 16 + static_cast<long>(len)));
  edit(h);
  const std::string text = h.dump();
  std::vector<std::uint8_t> out(bytes.begin(), bytes.begin() + 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(text.size() >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), bytes.begin() + 16 + static_cast<long>(len), bytes.end());
  return out;
}

}  // namespace

TEST_CASE("prototype network round trip is bit-identical") {
  PPNet net = pushed_net();
  const auto meta = meta3();
  const auto bytes = encode_checkpoint(net, meta);
  CHECK(std::memcmp(bytes.data(), "PPKS", 4) == 0);
  CHECK(bytes[4] == 1);

  Checkpoint ck = decode_checkpoint(bytes);
  REQUIRE(ck.kind == ModelKind::ppnet);
  CHECK(ck.meta.classes == meta.classes);
  CHECK(ck.meta.stats == meta.stats);
  CHECK(json::parse(ck.meta.metadata) == json::parse(meta.metadata));
  CHECK(ck.ppnet.backbone().config() == small());
  CHECK(ck.ppnet.class_of() == net.class_of());
  CHECK(ck.ppnet.provenance() == net.provenance());
  CHECK_FALSE(ck.ppnet.provenance()[3].has_value());

  auto a = net.named_tensors();
  auto b = ck.ppnet.named_tensors();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(same_bits(a[i].tensor, b[i].tensor));
  }

  {
    NoGradGuard g;
    const auto x = input(1);
    CHECK(same_bits(net.forward(x, Mode::eval).logits, ck.ppnet.forward(x, Mode::eval).logits));
  }
  CHECK(encode_checkpoint(ck.ppnet, ck.meta) == bytes);
}

TEST_CASE("baseline round trip") {
  BaselineNet net(small(), 3, 5);
  scramble(net, 8);
  const auto meta = meta3();
  const auto bytes = encode_checkpoint(net, meta);
  Checkpoint ck = decode_checkpoint(bytes);
  REQUIRE(ck.kind == ModelKind::baseline);
  NoGradGuard g;
  const auto x = input(2);
  CHECK(same_bits(net.forward(x, Mode::eval), ck.baseline.forward(x, Mode::eval)));
  CHECK(encode_checkpoint(ck.baseline, ck.meta) == bytes);
}

TEST_CASE("files and header") {
  ::testing::TempDir tmp;
  PPNet net = pushed_net();
  const auto path = tmp.path() / "sub" / "model.ppks";
  save_checkpoint(path, net, meta3());
  Checkpoint ck = load_checkpoint(path);
  CHECK(ck.ppnet.provenance() == net.provenance());
  const auto h = json::parse(checkpoint_header(path));
  CHECK(h["kind"] == "ppnet");
  CHECK(h["prototypes_per_class"] == 2);
  CHECK(h["stats"]["mean"][2] == "0.33333333333333331");
  CHECK_THROWS_AS(load_checkpoint(tmp.path() / "missing.ppks"), IoError);
}

TEST_CASE("rejects damaged or foreign files") {
  PPNet net = pushed_net();
  const auto bytes = encode_checkpoint(net, meta3());

  auto v2 = bytes;
  v2[4] = 2;
  CHECK_THROWS_WITH_AS(decode_checkpoint(v2), doctest::Contains("version 2"), IoError);

  auto magic = bytes;
  magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(magic), IoError);

  CHECK_THROWS_AS(decode_checkpoint(std::span(bytes).first(10)), IoError);
  CHECK_THROWS_AS(decode_checkpoint(std::span(bytes).first(100)), IoError);
  CHECK_THROWS_AS(decode_checkpoint(std::span(bytes).first(bytes.size() - 1)), IoError);
  auto longer = bytes;
  longer.push_back(0);
  CHECK_THROWS_AS(decode_checkpoint(longer), IoError);

  // header disagrees with the arrays
  CHECK_THROWS_AS(decode_checkpoint(with_header(bytes, [](json& h) { h["backbone"]["add_on_dim"] = 9; })),
                  ShapeError);
  CHECK_THROWS_AS(decode_checkpoint(with_header(bytes, [](json& h) { h["kind"] = "resnet"; })), IoError);
  CHECK_THROWS_AS(decode_checkpoint(with_header(bytes, [](json& h) { h["arrays"][1]["offset"] = 4; })), IoError);
  CHECK_THROWS_AS(decode_checkpoint(with_header(bytes, [](json& h) { h.erase("classes"); })), IoError);
  // unchanged header re-serializes to the same file
  CHECK(with_header(bytes, [](json&) {}) == bytes);

  auto meta = meta3();
  meta.classes.pop_back();
  CHECK_THROWS_AS(encode_checkpoint(net, meta), ValueError);
  meta = meta3();
  meta.metadata = "[1]";
  CHECK_THROWS_AS(encode_checkpoint(net, meta), ValueError);
}
