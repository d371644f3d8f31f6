#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "dve/synth_arm.hpp"
#include "dve/trainer.hpp"

namespace dve {

struct DataConfig {
  /// "synth_arm" or a face benchmark (celeba, mafl, aflw_m, aflw_r, w300).
  std::string dataset = "synth_arm";
  /// Face root, or a saved synthetic dataset (empty: generate in memory).
  std::filesystem::path root;
  std::string split = "train";
  std::string test_split = "test";
  bool enforce_split_size = false;
  /// Face training set to drop overlapping test identifiers from (e.g. mafl).
  std::string exclude_overlap_with;

  int arm_instances = 40;
  int arm_frames = 50;
  int image_size = 64;
  std::uint64_t arm_seed = 1;
  /// Instances held out for evaluation (generated with a different seed).
  int arm_test_instances = 10;
  int arm_test_frames = 10;
  ArmGeneratorOptions arm;
};

struct EvalConfig {
  int n_pairs = 1000;
  std::uint64_t seed = 0;
  /// Cosine nearest neighbours when matching; false uses raw inner products.
  bool match_normalize = true;
  /// Annotation counts for the limited-annotation study; 0 means all.
  std::vector<int> counts{1, 5, 10, 20, 0};
  int n_seeds = 3;
  double temperature = 0.5;
  int regressor_epochs = 100;
  double regressor_lr = 1e-2;
  int left_eye = 0;
  int right_eye = 1;
};

struct RunConfig {
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
};

/// Keys are "<section>.<name>" (sections: train, model, warp, data, eval).
/// Unknown keys and unparsable values raise ConfigError naming the key.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);
std::vector<std::string> config_keys();

/// INI-style file: [section] headers, "name = value" lines, ';' or '#' comments.
RunConfig load_config(const std::filesystem::path& path);
void save_config(const RunConfig& cfg, const std::filesystem::path& path);
/// Every key with its current value, in a fixed order.
std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& cfg);

}  // namespace dve
