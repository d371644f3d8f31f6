#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dve/dve_core.hpp"

namespace dve::test {

inline BasicEmbeddingMap<double> random_map(int h, int w, int c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> normal(0.0, sd);
  BasicEmbeddingMap<double> m(h, w, c);
  for (Eigen::Index i = 0; i < m.values.size(); ++i) m.values.data()[i] = normal(rng);
  return m;
}

struct GradReport {
  double max_relative_error = 0.0;
  double max_abs_error = 0.0;
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-5});
  return std::abs(analytic - numeric) / denom;
}

// Central differences of `loss` with respect to every entry of `m`, compared
// against `analytic`.
inline void compare_entries(RowMatrix<double>& m, const RowMatrix<double>& analytic,
                            const std::function<double()>& loss, double h, GradReport& report) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double& x = m.data()[i];
    const double saved = x;
    x = saved + h;
    const double up = loss();
    x = saved - h;
    const double down = loss();
    x = saved;
    const double numeric = (up - down) / (2 * h);
    const double a = analytic.data()[i];
    report.max_relative_error = std::max(report.max_relative_error, relative_error(a, numeric));
    report.max_abs_error = std::max(report.max_abs_error, std::abs(a - numeric));
  }
}

inline GradReport check_correspondence_gradients(BasicEmbeddingMap<double> src, BasicEmbeddingMap<double> tgt,
                                                 const WarpField& gt, double h) {
  const auto obj = correspondence_objective(src, tgt, gt);
  const auto loss = [&] {
    return correspondence_loss(match_distribution(similarity_grid(src, tgt), tgt.height, tgt.width), gt);
  };
  GradReport report;
  compare_entries(src.values, obj.grad_src, loss, h, report);
  compare_entries(tgt.values, obj.grad_tgt, loss, h, report);
  return report;
}

inline GradReport check_dve_gradients(BasicEmbeddingMap<double> src, BasicEmbeddingMap<double> tgt,
                                      std::vector<BasicEmbeddingMap<double>> aux, const WarpField& gt, double h) {
  const auto obj = dve_objective<double>(src, tgt, aux, gt);
  const auto loss = [&] { return dve_loss<double>(src, tgt, aux, gt); };
  GradReport report;
  compare_entries(src.values, obj.grad_src, loss, h, report);
  compare_entries(tgt.values, obj.grad_tgt, loss, h, report);
  for (size_t k = 0; k < aux.size(); ++k) compare_entries(aux[k].values, obj.grad_aux[k], loss, h, report);
  return report;
}

}  // namespace dve::test
