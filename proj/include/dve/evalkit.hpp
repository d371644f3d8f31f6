#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dve/datasets.hpp"
#include "dve/dve_core.hpp"
#include "dve/embedder.hpp"
#include "dve/warpgen.hpp"

namespace dve {

/// Maps one preprocessed image to its dense embedding.
using EmbedFn = std::function<EmbeddingMap(const Image&)>;
EmbedFn embed_fn(DenseEmbedder& model);

/// Bilinear sample of an embedding map at a normalized coordinate (clamped).
Eigen::VectorXf sample_embedding(const EmbeddingMap& map, Point2 p);

/// Nearest-neighbour matching: for each normalized query, the target cell
/// center with the largest inner product (cosine when `normalize`). Ties go
/// to the lowest row-major index.
std::vector<Point2> nn_match(const EmbeddingMap& src, const EmbeddingMap& tgt, std::span<const Point2> queries,
                             bool normalize = true);

// --- Matching benchmark ------------------------------------------------------

enum class MatchProtocol { same_identity, different_identity };
MatchProtocol parse_match_protocol(const std::string& name);
std::string match_protocol_name(MatchProtocol protocol);

struct MatchRecord {
  int pair = 0;
  size_t source_index = 0;
  size_t target_index = 0;
  int landmark = 0;
  Point2 expected;   // preprocessed pixels
  Point2 predicted;  // preprocessed pixels
  double error = 0.0;
};

struct MatchReport {
  MatchProtocol protocol = MatchProtocol::same_identity;
  /// One entry per evaluated pair: mean landmark error in pixels.
  std::vector<double> pair_errors;
  std::vector<MatchRecord> records;
  /// NaN when there are no pairs.
  double mean_error = 0.0;
  bool defined() const { return !pair_errors.empty(); }
  int image_size = 0;
  /// Errors are in pixels of the preprocessed image.
  std::string frame = "preprocessed";
};

/// Sum with pairwise splitting, so the result does not depend on a
/// sequential accumulation order.
double pairwise_sum(std::span<const double> values);

/// same_identity: x' = g x with a fresh warp, ground truth = warped
/// landmarks. different_identity: x and x' show distinct identities,
/// ground truth = the target's own landmarks. `normalize` picks cosine
/// (true) or raw inner-product nearest neighbours.
MatchReport matching_benchmark(const EmbedFn& embed, const Dataset& dataset, int n_pairs, MatchProtocol protocol,
                               std::mt19937_64& rng, const WarpConfig& warp = {}, bool normalize = true);
MatchReport matching_benchmark(DenseEmbedder& model, const Dataset& dataset, int n_pairs, MatchProtocol protocol,
                               std::mt19937_64& rng, const WarpConfig& warp = {}, bool normalize = true);

void write_match_csv(const MatchReport& report, const std::filesystem::path& path);

// --- Landmark regression -----------------------------------------------------

/// Softmax of heatmap / temperature over all cells, then the expected cell
/// center. `heatmap` is row-major height x width.
Point2 softargmax(std::span<const float> heatmap, int height, int width, double temperature);

struct RegressorConfig {
  int filters = 50;
  double temperature = 0.5;
  int epochs = 100;
  double lr = 1e-2;
  int batch_size = 32;
  /// Ridge penalty of the closed-form refit of the linear map (0 disables).
  double ridge = 1e-4;
  bool refit = true;
  std::uint64_t seed = 0;
};

/// 1x1 filter bank -> per-filter softargmax -> affine map to landmarks.
struct RegressionHead {
  Eigen::MatrixXf filters;  // filters x C
  double temperature = 0.5;
  Eigen::MatrixXd linear;   // 2K x 2F
  Eigen::VectorXd offset;   // 2K

  int num_landmarks() const { return static_cast<int>(linear.rows() / 2); }
  /// The 2F softargmax coordinates (x0, y0, x1, y1, ...).
  Eigen::VectorXd features(const EmbeddingMap& map) const;
  std::vector<Point2> predict(const EmbeddingMap& map) const;
};

/// Fits the head on fixed embeddings; invisible landmarks are ignored.
RegressionHead train_regressor(std::span<const EmbeddingMap> maps, std::span<const LandmarkSet> landmarks,
                               const RegressorConfig& cfg);
/// Embeds `annotated` with the frozen model and fits a head on top.
RegressionHead train_regressor(DenseEmbedder& frozen, const Dataset& annotated, const RegressorConfig& cfg);

/// Mean landmark error as a percentage of the distance between the two eye
/// landmarks of `gt`. Landmarks invisible in `gt` are skipped.
double iod_error(std::span<const Point2> pred, const LandmarkSet& gt, int left_eye, int right_eye);

/// Mean iod_error of the head over a dataset given precomputed embeddings.
double mean_iod_error(const RegressionHead& head, std::span<const EmbeddingMap> maps,
                      std::span<const LandmarkSet> landmarks, int left_eye, int right_eye);

struct LimitedRow {
  int count = 0;  // number of annotated training images used
  bool all = false;
  std::vector<double> errors;  // one per seed
  double mean = 0.0;
  double stddev = 0.0;         // population std over seeds
};

struct LimitedStudyConfig {
  std::vector<int> counts{1, 5, 10, 20, 0};  // 0 = all
  int n_seeds = 3;
  std::uint64_t seed = 0;
  int left_eye = 0;
  int right_eye = 1;
  RegressorConfig head;
  /// Receives count_<c>_seed_<s>.txt id lists when not empty.
  std::filesystem::path list_dir;
};

std::vector<LimitedRow> limited_annotation_study(std::span<const EmbeddingMap> train_maps, const Dataset& train,
                                                 std::span<const EmbeddingMap> test_maps, const Dataset& test,
                                                 const LimitedStudyConfig& cfg);

void write_limited_csv(const std::vector<LimitedRow>& rows, const std::filesystem::path& path);

/// Embeds every item of a dataset (evaluation mode).
std::vector<EmbeddingMap> embed_dataset(const EmbedFn& embed, const Dataset& dataset);
std::vector<LandmarkSet> dataset_landmarks(const Dataset& dataset);

}  // namespace dve
