#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dve/embedder.hpp"

namespace dve {

struct CheckpointMeta {
  EmbedderSpec spec;
  int train_epochs = 0;
  std::string dataset_id;
  /// Earlier checkpoints this one was warm-started from, oldest first.
  std::vector<std::string> provenance;
  std::uint64_t seed = 0;
  std::int64_t optimizer_steps = 0;
};

struct Checkpoint {
  CheckpointMeta meta;
  std::unique_ptr<DenseEmbedder> model;
  /// Adam moments keyed "adam.m.<param>" / "adam.v.<param>" (may be empty).
  std::map<std::string, nn::Tensor> optimizer_state;
};

// Archive layout: "DVECKPT1", u32 metadata length, metadata JSON, u32 entry
// count, then per entry: u32 key length, key, 4 x u32 dims, float32 data.
// Parameter keys follow "<layer>.<param>".
void save_checkpoint(const std::filesystem::path& path, DenseEmbedder& model, const CheckpointMeta& meta,
                     nn::Adam* optimizer = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies the Adam moments stored in a checkpoint into `optimizer`.
void restore_optimizer(const Checkpoint& ckpt, DenseEmbedder& model, nn::Adam& optimizer);

}  // namespace dve
