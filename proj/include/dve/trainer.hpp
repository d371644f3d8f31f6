#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "dve/checkpoint.hpp"
#include "dve/datasets.hpp"
#include "dve/embedder.hpp"
#include "dve/warpgen.hpp"

namespace dve {

/// Where the second image of a pair comes from.
///  warp: x' = g x for a random warp g.
///  flow: x' is another frame of the same instance (optionally also warped);
///        ground truth is the dataset's dense flow.
enum class PairSource { warp, flow };
PairSource parse_pair_source(const std::string& name);
std::string pair_source_name(PairSource source);

struct TrainConfig {
  int pairs_per_batch = 16;
  int aux_pool_size = 16;
  int aux_per_pair = 5;
  int epochs = 100;
  double lr = 1e-3;
  std::string optimizer = "adam";
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool use_dve = false;
  bool identity_warp = false;  // g = 1, x' = x
  int embed_dim = 3;
  std::uint64_t seed = 0;

  Arch arch = Arch::smallnet;
  double width = 1.0;
  int hourglass_channels = 256;

  PairSource pairs = PairSource::warp;
  WarpConfig warp;
  int steps_per_epoch = 0;  // 0: one pass, dataset size / pairs_per_batch
  int block_rows = 256;

  void validate() const;
  EmbedderSpec embedder_spec(int input_size) const;
};

struct TrainingPair {
  size_t source_index = 0;
  size_t target_index = 0;  // equals source_index unless pairs come from flow
  Image source;
  Image target;
  WarpField gt;  // image grid, source -> target
};

struct Batch {
  std::vector<TrainingPair> pairs;
  std::vector<size_t> pool_indices;
  std::vector<Image> pool;
  std::vector<std::vector<int>> aux;  // per pair, indices into `pool`
};

/// Images are drawn without replacement within one batch, so the pool never
/// shares an item with the pairs. The pool is empty unless use_dve.
Batch assemble_batch(const Dataset& dataset, const TrainConfig& cfg, std::mt19937_64& rng);

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  int steps = 0;
  int skipped_pairs = 0;
  double wall_time = 0.0;
};

struct TrainOptions {
  /// Checkpoints (epoch_NNN.ckpt, last.ckpt) and train_log.jsonl go here;
  /// empty disables all file output.
  std::filesystem::path out_dir;
  /// Continue from this checkpoint (its epoch count and optimizer state).
  std::filesystem::path resume;
  std::string dataset_id;
  std::function<void(const EpochStats&)> on_epoch;
};

struct TrainResult {
  std::unique_ptr<DenseEmbedder> model;
  CheckpointMeta meta;
  std::vector<EpochStats> curve;
  std::filesystem::path last_checkpoint;
};

TrainResult train(const Dataset& dataset, const TrainConfig& cfg, const TrainOptions& options = {});

/// Continues training a checkpoint on `dataset` with the same objective;
/// `cfg.epochs` further epochs (0 returns the weights unchanged). Model
/// hyperparameters come from the checkpoint.
TrainResult finetune_unsupervised(const std::filesystem::path& checkpoint, const Dataset& dataset, TrainConfig cfg,
                                  const TrainOptions& options = {});

/// Mean objective over `batches` freshly drawn batches with batch norm in
/// evaluation mode; no parameter changes.
double evaluate_objective(DenseEmbedder& model, const Dataset& dataset, const TrainConfig& cfg, int batches,
                          std::uint64_t seed);

}  // namespace dve
