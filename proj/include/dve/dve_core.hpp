#pragma once

#include <span>
#include <vector>

#include <Eigen/Core>

#include "dve/warpgen.hpp"

namespace dve {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Per-pixel C-dimensional embedding on a height x width grid; row i of
/// `values` is the vector of pixel i in row-major order.
template <typename Scalar>
struct BasicEmbeddingMap {
  int height = 0;
  int width = 0;
  RowMatrix<Scalar> values;

  BasicEmbeddingMap() = default;
  BasicEmbeddingMap(int h, int w, int channels) : height(h), width(w), values(RowMatrix<Scalar>::Zero(h * w, channels)) {}

  int channels() const { return static_cast<int>(values.cols()); }
  Eigen::Index pixels() const { return values.rows(); }
  bool all_finite() const { return values.allFinite(); }
};

using EmbeddingMap = BasicEmbeddingMap<float>;

/// p(v|u): one row per source pixel, one column per target pixel.
template <typename Scalar>
struct BasicMatchDistribution {
  int target_height = 0;
  int target_width = 0;
  RowMatrix<Scalar> probs;

  Eigen::Index source_pixels() const { return probs.rows(); }
  Eigen::Index target_pixels() const { return probs.cols(); }
  bool is_row_stochastic(double tolerance = 1e-5) const;
};

using MatchDistribution = BasicMatchDistribution<float>;

/// Raw inner products <src_u, tgt_v>; vector length acts as confidence.
template <typename Scalar>
RowMatrix<Scalar> similarity_grid(const BasicEmbeddingMap<Scalar>& src, const BasicEmbeddingMap<Scalar>& tgt);

/// Row-wise softmax of a similarity grid laid out on a target grid.
template <typename Scalar>
BasicMatchDistribution<Scalar> match_distribution(const RowMatrix<Scalar>& sim, int target_height, int target_width);

/// Mean over valid source pixels u of sum_v ||v - g(u)|| p(v|u), in
/// normalized coordinates. `gt` must live on the source grid.
/// Throws UnusablePairError when every pixel is masked.
template <typename Scalar>
Scalar correspondence_loss(const BasicMatchDistribution<Scalar>& dist, const WarpField& gt);

/// Reconstructs each source vector as the softmax-weighted average of the
/// pooled auxiliary vectors (all pixels of all auxiliary maps).
template <typename Scalar>
BasicEmbeddingMap<Scalar> dve_reconstruct(const BasicEmbeddingMap<Scalar>& src,
                                          std::span<const BasicEmbeddingMap<Scalar>> aux);

template <typename Scalar>
Scalar dve_loss(const BasicEmbeddingMap<Scalar>& src, const BasicEmbeddingMap<Scalar>& tgt,
                std::span<const BasicEmbeddingMap<Scalar>> aux, const WarpField& gt);

// Fused, differentiable versions used for training. The similarity grid is
// processed in blocks of `block_rows` source pixels to bound peak memory.

struct ObjectiveOptions {
  Eigen::Index block_rows = 256;
};

template <typename Scalar>
struct PairObjective {
  Scalar loss = 0;
  Eigen::Index valid_pixels = 0;
  RowMatrix<Scalar> grad_src;
  RowMatrix<Scalar> grad_tgt;
  std::vector<RowMatrix<Scalar>> grad_aux;
};

template <typename Scalar>
PairObjective<Scalar> correspondence_objective(const BasicEmbeddingMap<Scalar>& src,
                                               const BasicEmbeddingMap<Scalar>& tgt, const WarpField& gt,
                                               const ObjectiveOptions& opts = {});

template <typename Scalar>
PairObjective<Scalar> dve_objective(const BasicEmbeddingMap<Scalar>& src, const BasicEmbeddingMap<Scalar>& tgt,
                                    std::span<const BasicEmbeddingMap<Scalar>> aux, const WarpField& gt,
                                    const ObjectiveOptions& opts = {});

/// Normalized coordinate of every cell of a height x width grid, row-major.
RowMatrix<double> grid_positions(int height, int width);

}  // namespace dve
