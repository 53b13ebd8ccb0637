#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "sparling/optim.hpp"
#include "sparling/sparsity.hpp"

namespace sparling {

constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointRecord {
  std::string name;
  Tensor value;
};

/// Named f32 tensors plus a JSON metadata blob.
///
/// Layout (little-endian): "SPRL" | u32 version | u32 len + JSON metadata |
/// u32 record count | per record: u32 len + UTF-8 name, u32 rank,
/// rank × u32 dims, f32 payload.
struct Checkpoint {
  nlohmann::ordered_json meta = nlohmann::ordered_json::object();
  std::vector<CheckpointRecord> records;

  void put(std::string name, Tensor value);
  bool has(const std::string& name) const;
  /// Throws binio::FormatError when the record is missing.
  const Tensor& get(const std::string& name) const;
};

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
void write_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& is);
Checkpoint read_checkpoint(const std::string& path);

/// Stores thresholds under "sparsity/thresholds" and δ, μ, variant in meta.
void put_sparsity(Checkpoint& ckpt, const SparsityState& state);
SparsityState get_sparsity(const Checkpoint& ckpt);

/// Stores moments as "adam/m/<name>", "adam/v/<name>" and scalars in meta.
void put_optimizer(Checkpoint& ckpt, const OptimizerState& state, const std::vector<std::string>& param_names);
OptimizerState get_optimizer(const Checkpoint& ckpt, const std::vector<std::string>& param_names);

}  // namespace sparling
