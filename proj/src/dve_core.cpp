#include "dve/dve_core.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dve/errors.hpp"

namespace dve {

namespace {

template <typename Scalar>
void softmax_rows_inplace(RowMatrix<Scalar>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const Scalar peak = row.maxCoeff();
    row = (row.array() - peak).exp();
    row /= row.sum();
  }
}

// Given p = softmax(z) row-wise and dL/dp, returns dL/dz in place of `grad`.
template <typename Scalar>
void softmax_rows_backward(const RowMatrix<Scalar>& p, RowMatrix<Scalar>& grad) {
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const Scalar dot = p.row(r).dot(grad.row(r));
    grad.row(r) = p.row(r).array() * (grad.row(r).array() - dot);
  }
}

std::vector<Eigen::Index> valid_rows(const WarpField& gt) {
  std::vector<Eigen::Index> rows;
  rows.reserve(gt.size());
  for (size_t i = 0; i < gt.size(); ++i) {
    if (gt.valid[i]) rows.push_back(static_cast<Eigen::Index>(i));
  }
  if (rows.empty()) {
    throw UnusablePairError("correspondence loss: every source pixel is masked invalid");
  }
  return rows;
}

// D(i, v) = || pos(v) - g(rows[i]) || for a block of source rows.
template <typename Scalar>
RowMatrix<Scalar> distance_block(const WarpField& gt, std::span<const Eigen::Index> rows,
                                 const RowMatrix<double>& target_pos) {
  RowMatrix<Scalar> d(static_cast<Eigen::Index>(rows.size()), target_pos.rows());
  for (size_t i = 0; i < rows.size(); ++i) {
    const Point2 g = gt.at(static_cast<size_t>(rows[i]));
    for (Eigen::Index v = 0; v < target_pos.rows(); ++v) {
      const double dx = target_pos(v, 0) - g.x;
      const double dy = target_pos(v, 1) - g.y;
      d(static_cast<Eigen::Index>(i), v) = static_cast<Scalar>(std::sqrt(dx * dx + dy * dy));
    }
  }
  return d;
}

template <typename Scalar>
RowMatrix<Scalar> gather_rows(const RowMatrix<Scalar>& m, std::span<const Eigen::Index> rows) {
  RowMatrix<Scalar> out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

template <typename Scalar>
RowMatrix<Scalar> stack_pool(std::span<const BasicEmbeddingMap<Scalar>> aux, int channels) {
  if (aux.empty()) {
    throw ConfigError("descriptor exchange needs at least one auxiliary map");
  }
  Eigen::Index total = 0;
  for (const auto& a : aux) {
    if (a.channels() != channels) {
      throw ShapeError("auxiliary map channel count differs from the source");
    }
    total += a.pixels();
  }
  RowMatrix<Scalar> pool(total, channels);
  Eigen::Index offset = 0;
  for (const auto& a : aux) {
    pool.middleRows(offset, a.pixels()) = a.values;
    offset += a.pixels();
  }
  return pool;
}

void check_gt(const WarpField& gt, int height, int width) {
  gt.check();
  if (gt.height != height || gt.width != width) {
    throw ShapeError("ground-truth field must live on the source embedding grid (" + std::to_string(height) +
                     "x" + std::to_string(width) + "), got " + std::to_string(gt.height) + "x" +
                     std::to_string(gt.width));
  }
}

template <typename Scalar>
void check_channels(const BasicEmbeddingMap<Scalar>& a, const BasicEmbeddingMap<Scalar>& b) {
  if (a.channels() != b.channels()) {
    throw ShapeError("embedding channel counts differ: " + std::to_string(a.channels()) + " vs " +
                     std::to_string(b.channels()));
  }
}

// Shared tail of both objectives: given matching logits for a block of valid
// source rows (already multiplied out), accumulates the loss and returns
// dLoss/dlogits for the block.
template <typename Scalar>
RowMatrix<Scalar> loss_block(RowMatrix<Scalar>& logits, const WarpField& gt, std::span<const Eigen::Index> rows,
                             const RowMatrix<double>& target_pos, Scalar inv_valid, double& loss_sum) {
  softmax_rows_inplace(logits);
  const RowMatrix<Scalar> dist = distance_block<Scalar>(gt, rows, target_pos);
  loss_sum += static_cast<double>((dist.array() * logits.array()).sum());
  RowMatrix<Scalar> grad = dist * inv_valid;
  softmax_rows_backward(logits, grad);
  return grad;
}

}  // namespace

RowMatrix<double> grid_positions(int height, int width) {
  RowMatrix<double> pos(static_cast<Eigen::Index>(height) * width, 2);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Eigen::Index i = static_cast<Eigen::Index>(y) * width + x;
      pos(i, 0) = pixel_to_norm(x, width);
      pos(i, 1) = pixel_to_norm(y, height);
    }
  }
  return pos;
}

template <typename Scalar>
bool BasicMatchDistribution<Scalar>::is_row_stochastic(double tolerance) const {
  if ((probs.array() < Scalar(0)).any()) return false;
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    if (std::abs(static_cast<double>(probs.row(r).sum()) - 1.0) > tolerance) return false;
  }
  return true;
}

template <typename Scalar>
RowMatrix<Scalar> similarity_grid(const BasicEmbeddingMap<Scalar>& src, const BasicEmbeddingMap<Scalar>& tgt) {
  check_channels(src, tgt);
  return src.values * tgt.values.transpose();
}

template <typename Scalar>
BasicMatchDistribution<Scalar> match_distribution(const RowMatrix<Scalar>& sim, int target_height,
                                                  int target_width) {
  if (static_cast<Eigen::Index>(target_height) * target_width != sim.cols()) {
    throw ShapeError("similarity grid columns do not match the target grid");
  }
  BasicMatchDistribution<Scalar> out;
  out.target_height = target_height;
  out.target_width = target_width;
  out.probs = sim;
  softmax_rows_inplace(out.probs);
  return out;
}

template <typename Scalar>
Scalar correspondence_loss(const BasicMatchDistribution<Scalar>& dist, const WarpField& gt) {
  gt.check();
  if (static_cast<Eigen::Index>(gt.size()) != dist.source_pixels()) {
    throw ShapeError("match distribution rows do not match the ground-truth grid");
  }
  const auto rows = valid_rows(gt);
  const RowMatrix<double> target_pos = grid_positions(dist.target_height, dist.target_width);
  double total = 0.0;
  for (const Eigen::Index u : rows) {
    const Point2 g = gt.at(static_cast<size_t>(u));
    for (Eigen::Index v = 0; v < dist.target_pixels(); ++v) {
      total += std::hypot(target_pos(v, 0) - g.x, target_pos(v, 1) - g.y) * static_cast<double>(dist.probs(u, v));
    }
  }
  return static_cast<Scalar>(total / static_cast<double>(rows.size()));
}

template <typename Scalar>
BasicEmbeddingMap<Scalar> dve_reconstruct(const BasicEmbeddingMap<Scalar>& src,
                                          std::span<const BasicEmbeddingMap<Scalar>> aux) {
  const RowMatrix<Scalar> pool = stack_pool(aux, src.channels());
  RowMatrix<Scalar> weights = src.values * pool.transpose();
  softmax_rows_inplace(weights);
  BasicEmbeddingMap<Scalar> out;
  out.height = src.height;
  out.width = src.width;
  out.values = weights * pool;
  return out;
}

template <typename Scalar>
Scalar dve_loss(const BasicEmbeddingMap<Scalar>& src, const BasicEmbeddingMap<Scalar>& tgt,
                std::span<const BasicEmbeddingMap<Scalar>> aux, const WarpField& gt) {
  const auto rec = dve_reconstruct(src, aux);
  return correspondence_loss(match_distribution(similarity_grid(rec, tgt), tgt.height, tgt.width), gt);
}

template <typename Scalar>
PairObjective<Scalar> correspondence_objective(const BasicEmbeddingMap<Scalar>& src,
                                               const BasicEmbeddingMap<Scalar>& tgt, const WarpField& gt,
                                               const ObjectiveOptions& opts) {
  check_channels(src, tgt);
  check_gt(gt, src.height, src.width);
  const auto rows = valid_rows(gt);
  const RowMatrix<double> target_pos = grid_positions(tgt.height, tgt.width);
  const Scalar inv_valid = Scalar(1) / static_cast<Scalar>(rows.size());

  PairObjective<Scalar> out;
  out.valid_pixels = static_cast<Eigen::Index>(rows.size());
  out.grad_src = RowMatrix<Scalar>::Zero(src.pixels(), src.channels());
  out.grad_tgt = RowMatrix<Scalar>::Zero(tgt.pixels(), tgt.channels());

  double loss_sum = 0.0;
  const Eigen::Index block = std::max<Eigen::Index>(1, opts.block_rows);
  for (size_t start = 0; start < rows.size(); start += static_cast<size_t>(block)) {
    const auto count = std::min(rows.size() - start, static_cast<size_t>(block));
    const std::span<const Eigen::Index> sub(rows.data() + start, count);
    const RowMatrix<Scalar> s = gather_rows(src.values, sub);
    RowMatrix<Scalar> logits = s * tgt.values.transpose();
    const RowMatrix<Scalar> dlogits = loss_block(logits, gt, sub, target_pos, inv_valid, loss_sum);
    const RowMatrix<Scalar> ds = dlogits * tgt.values;
    out.grad_tgt.noalias() += dlogits.transpose() * s;
    for (size_t i = 0; i < count; ++i) out.grad_src.row(sub[i]) += ds.row(static_cast<Eigen::Index>(i));
  }
  out.loss = static_cast<Scalar>(loss_sum / static_cast<double>(rows.size()));
  return out;
}

template <typename Scalar>
PairObjective<Scalar> dve_objective(const BasicEmbeddingMap<Scalar>& src, const BasicEmbeddingMap<Scalar>& tgt,
                                    std::span<const BasicEmbeddingMap<Scalar>> aux, const WarpField& gt,
                                    const ObjectiveOptions& opts) {
  check_channels(src, tgt);
  check_gt(gt, src.height, src.width);
  const RowMatrix<Scalar> pool = stack_pool(aux, src.channels());
  const auto rows = valid_rows(gt);
  const RowMatrix<double> target_pos = grid_positions(tgt.height, tgt.width);
  const Scalar inv_valid = Scalar(1) / static_cast<Scalar>(rows.size());

  PairObjective<Scalar> out;
  out.valid_pixels = static_cast<Eigen::Index>(rows.size());
  out.grad_src = RowMatrix<Scalar>::Zero(src.pixels(), src.channels());
  out.grad_tgt = RowMatrix<Scalar>::Zero(tgt.pixels(), tgt.channels());
  RowMatrix<Scalar> grad_pool = RowMatrix<Scalar>::Zero(pool.rows(), pool.cols());

  double loss_sum = 0.0;
  const Eigen::Index block = std::max<Eigen::Index>(1, opts.block_rows);
  for (size_t start = 0; start < rows.size(); start += static_cast<size_t>(block)) {
    const auto count = std::min(rows.size() - start, static_cast<size_t>(block));
    const std::span<const Eigen::Index> sub(rows.data() + start, count);
    const RowMatrix<Scalar> s = gather_rows(src.values, sub);

    // Exchange: reconstruct each source vector from the auxiliary pool.
    RowMatrix<Scalar> weights = s * pool.transpose();
    softmax_rows_inplace(weights);
    const RowMatrix<Scalar> rec = weights * pool;

    RowMatrix<Scalar> logits = rec * tgt.values.transpose();
    const RowMatrix<Scalar> dlogits = loss_block(logits, gt, sub, target_pos, inv_valid, loss_sum);

    const RowMatrix<Scalar> drec = dlogits * tgt.values;
    out.grad_tgt.noalias() += dlogits.transpose() * rec;
    RowMatrix<Scalar> dweights = drec * pool.transpose();
    grad_pool.noalias() += weights.transpose() * drec;
    softmax_rows_backward(weights, dweights);
    const RowMatrix<Scalar> ds = dweights * pool;
    grad_pool.noalias() += dweights.transpose() * s;
    for (size_t i = 0; i < count; ++i) out.grad_src.row(sub[i]) += ds.row(static_cast<Eigen::Index>(i));
  }
  out.loss = static_cast<Scalar>(loss_sum / static_cast<double>(rows.size()));

  Eigen::Index offset = 0;
  out.grad_aux.reserve(aux.size());
  for (const auto& a : aux) {
    out.grad_aux.emplace_back(grad_pool.middleRows(offset, a.pixels()));
    offset += a.pixels();
  }
  return out;
}

#define DVE_INSTANTIATE(S)                                                                                   \
  template struct BasicMatchDistribution<S>;                                                                 \
  template RowMatrix<S> similarity_grid(const BasicEmbeddingMap<S>&, const BasicEmbeddingMap<S>&);           \
  template BasicMatchDistribution<S> match_distribution(const RowMatrix<S>&, int, int);                      \
  template S correspondence_loss(const BasicMatchDistribution<S>&, const WarpField&);                        \
  template BasicEmbeddingMap<S> dve_reconstruct(const BasicEmbeddingMap<S>&,                                 \
                                                std::span<const BasicEmbeddingMap<S>>);                      \
  template S dve_loss(const BasicEmbeddingMap<S>&, const BasicEmbeddingMap<S>&,                              \
                      std::span<const BasicEmbeddingMap<S>>, const WarpField&);                              \
  template PairObjective<S> correspondence_objective(const BasicEmbeddingMap<S>&, const BasicEmbeddingMap<S>&, \
                                                     const WarpField&, const ObjectiveOptions&);             \
  template PairObjective<S> dve_objective(const BasicEmbeddingMap<S>&, const BasicEmbeddingMap<S>&,          \
                                          std::span<const BasicEmbeddingMap<S>>, const WarpField&,           \
                                          const ObjectiveOptions&);

DVE_INSTANTIATE(float)
DVE_INSTANTIATE(double)

#undef DVE_INSTANTIATE

}  // namespace dve
