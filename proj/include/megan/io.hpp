#pragma once

// On-disk formats.
//
// Dataset split file:
//   "MGDSET01" | u64 header length | JSON header
//   | float32 LE frames of every bag, row-major, in bag order
//   | u64 label-table length | JSON label table (one record per bag)
// Checkpoint file:
//   "MGCKPT01" | u64 header length | JSON header (format_version, kind,
//   architecture, seed, config_hash, params[name, shape, offset])
//   | float64 LE parameter blocks in header order
// All integers little-endian. Files are written to a temporary sibling and
// renamed into place.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "megan/expert.hpp"
#include "megan/gate.hpp"
#include "megan/nn.hpp"
#include "megan/simdata.hpp"

namespace megan::io {

inline constexpr int kFormatVersion = 1;

void atomic_write(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

struct SplitFile {
  simdata::Split split = simdata::Split::train;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<simdata::FeatureBag> bags;
};

std::string encode_split(const SplitFile& file);
SplitFile decode_split(std::string_view bytes);
void save_split(const std::filesystem::path& path, const SplitFile& file);
/// IoError for missing or malformed files; ConfigHashError if the stored
/// hash differs from `expected_hash` and `force` is false.
SplitFile load_split(const std::filesystem::path& path, const std::string& expected_hash, bool force = false);

struct Checkpoint {
  std::string kind;  // "expert" or "gate"
  nlohmann::json architecture;
  std::uint64_t seed = 0;
  std::string config_hash;
  nn::ParameterSet params;
};

std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::string& expected_hash, bool force = false);

Checkpoint expert_checkpoint(const expert::ExpertModel& model, const std::string& config_hash);
expert::ExpertModel expert_from_checkpoint(const Checkpoint& ckpt);
Checkpoint gate_checkpoint(const gate::GateModel& model, const std::string& config_hash);
gate::GateModel gate_from_checkpoint(const Checkpoint& ckpt);

/// Shortest round-trip decimal form of a double ("nan" for NaN).
std::string format_number(double v);

}  // namespace megan::io
