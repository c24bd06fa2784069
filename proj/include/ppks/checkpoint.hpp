#pragma once

// Single-file model checkpoints.
//
//   bytes 0..3    "PPKS"
//   bytes 4..7    format version, u32 little-endian
//   bytes 8..15   header length in bytes, u64 little-endian
//   header        UTF-8 JSON: model kind, backbone, classes, stats,
//                 provenance, metadata and the array directory
//   payload       float32 little-endian arrays, in directory order

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ppks/model.hpp"

namespace ppks {

inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class ModelKind { ppnet, baseline };

struct CheckpointMeta {
  std::vector<std::string> classes;
  NormalizationStats stats;
  std::string metadata = "{}";  // JSON object, stored verbatim (training config, summary)
};

struct Checkpoint {
  ModelKind kind = ModelKind::ppnet;
  CheckpointMeta meta;
  PPNet ppnet;           // kind == ppnet
  BaselineNet baseline;  // kind == baseline
};

std::vector<std::uint8_t> encode_checkpoint(PPNet& model, const CheckpointMeta& meta);
std::vector<std::uint8_t> encode_checkpoint(BaselineNet& model, const CheckpointMeta& meta);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, PPNet& model, const CheckpointMeta& meta);
void save_checkpoint(const std::filesystem::path& path, BaselineNet& model, const CheckpointMeta& meta);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Pretty-printed header JSON without touching the payload arrays.
std::string checkpoint_header(const std::filesystem::path& path);

}  // namespace ppks
