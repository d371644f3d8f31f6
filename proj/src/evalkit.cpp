#include "dve/evalkit.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>

#include <Eigen/Cholesky>

#include "dve/errors.hpp"

namespace dve {

EmbedFn embed_fn(DenseEmbedder& model) {
  return [&model](const Image& image) { return std::move(model.embed(std::span<const Image>(&image, 1)).front()); };
}

Eigen::VectorXf sample_embedding(const EmbeddingMap& map, Point2 p) {
  const double x = std::clamp(norm_to_pixel(p.x, map.width), 0.0, map.width - 1.0);
  const double y = std::clamp(norm_to_pixel(p.y, map.height), 0.0, map.height - 1.0);
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, map.width - 1), y1 = std::min(y0 + 1, map.height - 1);
  const float fx = static_cast<float>(x - x0), fy = static_cast<float>(y - y0);
  const auto row = [&](int yy, int xx) { return map.values.row(static_cast<Eigen::Index>(yy) * map.width + xx); };
  Eigen::VectorXf v = ((1 - fy) * ((1 - fx) * row(y0, x0) + fx * row(y0, x1)) +
                       fy * ((1 - fx) * row(y1, x0) + fx * row(y1, x1)))
                          .transpose();
  return v;
}

std::vector<Point2> nn_match(const EmbeddingMap& src, const EmbeddingMap& tgt, std::span<const Point2> queries,
                             bool normalize) {
  if (src.channels() != tgt.channels()) throw ShapeError("nn_match: channel counts differ");
  RowMatrix<float> t = tgt.values;
  if (normalize) {
    for (Eigen::Index r = 0; r < t.rows(); ++r) {
      const float n = t.row(r).norm();
      if (n > 0) t.row(r) /= n;
    }
  }
  std::vector<Point2> out;
  out.reserve(queries.size());
  for (const Point2& q : queries) {
    Eigen::VectorXf v = sample_embedding(src, q);
    if (normalize && v.norm() > 0) v /= v.norm();
    const Eigen::VectorXf scores = t * v;
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < scores.size(); ++i) {
      if (scores(i) > scores(best)) best = i;
    }
    out.push_back({pixel_to_norm(static_cast<double>(best % tgt.width), tgt.width),
                   pixel_to_norm(static_cast<double>(best / tgt.width), tgt.height)});
  }
  return out;
}

MatchProtocol parse_match_protocol(const std::string& name) {
  if (name == "same_identity" || name == "same" || name == "match-same") return MatchProtocol::same_identity;
  if (name == "different_identity" || name == "diff" || name == "match-diff") return MatchProtocol::different_identity;
  throw ConfigError("unknown matching protocol: " + name);
}

std::string match_protocol_name(MatchProtocol protocol) {
  return protocol == MatchProtocol::same_identity ? "same_identity" : "different_identity";
}

double pairwise_sum(std::span<const double> values) {
  if (values.size() <= 8) return std::accumulate(values.begin(), values.end(), 0.0);
  const size_t half = values.size() / 2;
  return pairwise_sum(values.subspan(0, half)) + pairwise_sum(values.subspan(half));
}

MatchReport matching_benchmark(const EmbedFn& embed, const Dataset& dataset, int n_pairs, MatchProtocol protocol,
                               std::mt19937_64& rng, const WarpConfig& warp, bool normalize) {
  MatchReport report;
  report.protocol = protocol;
  report.image_size = dataset.image_size();
  report.mean_error = std::numeric_limits<double>::quiet_NaN();
  if (n_pairs <= 0) return report;
  if (!dataset.has_landmarks()) throw DataError(dataset.name() + " has no landmark annotations to match");
  if (dataset.size() == 0) throw DataError("matching benchmark on an empty dataset");
  if (protocol == MatchProtocol::different_identity) {
    std::set<int> ids;
    for (size_t i = 0; i < dataset.size() && ids.size() < 2; ++i) ids.insert(dataset.identity(i));
    if (ids.size() < 2) throw DataError(dataset.name() + " needs at least two identities for different_identity");
  }
  warp.validate();

  const int s = dataset.image_size();
  const auto to_px = [s](Point2 p) { return Point2{norm_to_pixel(p.x, s), norm_to_pixel(p.y, s)}; };
  std::uniform_int_distribution<size_t> pick(0, dataset.size() - 1);
  const int max_attempts = 20 * n_pairs + 100;
  for (int attempt = 0; attempt < max_attempts && static_cast<int>(report.pair_errors.size()) < n_pairs; ++attempt) {
    const size_t i = pick(rng);
    const Sample src = dataset.get(i);
    size_t j = i;
    Image target;
    std::vector<Point2> queries, expected;
    std::vector<int> ids;
    if (protocol == MatchProtocol::same_identity) {
      const WarpField g = sample_warp(warp, src.image.height, src.image.width, rng);
      target = apply_warp(src.image, g);
      for (size_t k = 0; k < src.landmarks.size(); ++k) {
        if (!src.landmarks[k].visible) continue;
        const WarpedPoint wp = warp_point(g, src.landmarks[k].p);
        if (!wp.valid) continue;
        queries.push_back(src.landmarks[k].p);
        expected.push_back(wp.coord);
        ids.push_back(static_cast<int>(k));
      }
    } else {
      do {
        j = pick(rng);
      } while (dataset.identity(j) == src.identity);
      const Sample tgt = dataset.get(j);
      target = tgt.image;
      for (size_t k = 0; k < src.landmarks.size() && k < tgt.landmarks.size(); ++k) {
        if (!src.landmarks[k].visible || !tgt.landmarks[k].visible) continue;
        queries.push_back(src.landmarks[k].p);
        expected.push_back(tgt.landmarks[k].p);
        ids.push_back(static_cast<int>(k));
      }
    }
    if (queries.empty()) continue;

    const std::vector<Point2> matched = nn_match(embed(src.image), embed(target), queries, normalize);
    const int pair = static_cast<int>(report.pair_errors.size());
    std::vector<double> errs;
    for (size_t k = 0; k < queries.size(); ++k) {
      MatchRecord rec;
      rec.pair = pair;
      rec.source_index = i;
      rec.target_index = j;
      rec.landmark = ids[k];
      rec.expected = to_px(expected[k]);
      rec.predicted = to_px(matched[k]);
      rec.error = std::hypot(rec.predicted.x - rec.expected.x, rec.predicted.y - rec.expected.y);
      errs.push_back(rec.error);
      report.records.push_back(rec);
    }
    report.pair_errors.push_back(pairwise_sum(errs) / static_cast<double>(errs.size()));
  }
  if (static_cast<int>(report.pair_errors.size()) < n_pairs) {
    throw DataError("could only form " + std::to_string(report.pair_errors.size()) + " of " +
                    std::to_string(n_pairs) + " pairs with visible landmarks");
  }
  report.mean_error = pairwise_sum(report.pair_errors) / static_cast<double>(report.pair_errors.size());
  return report;
}

MatchReport matching_benchmark(DenseEmbedder& model, const Dataset& dataset, int n_pairs, MatchProtocol protocol,
                               std::mt19937_64& rng, const WarpConfig& warp, bool normalize) {
  if (model.spec().input_size != dataset.image_size()) {
    throw ConfigError("model input size " + std::to_string(model.spec().input_size) + " does not match " +
                      dataset.name() + " (" + std::to_string(dataset.image_size()) + ")");
  }
  return matching_benchmark(embed_fn(model), dataset, n_pairs, protocol, rng, warp, normalize);
}

void write_match_csv(const MatchReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(9);
  out << "pair,source_index,target_index,landmark,expected_x,expected_y,predicted_x,predicted_y,error_px\n";
  for (const MatchRecord& r : report.records) {
    out << r.pair << ',' << r.source_index << ',' << r.target_index << ',' << r.landmark << ',' << r.expected.x
        << ',' << r.expected.y << ',' << r.predicted.x << ',' << r.predicted.y << ',' << r.error << '\n';
  }
}

Point2 softargmax(std::span<const float> heatmap, int height, int width, double temperature) {
  if (!(temperature > 0)) throw ConfigError("softargmax temperature must be positive");
  if (heatmap.size() != static_cast<size_t>(height) * width || heatmap.empty()) {
    throw ShapeError("softargmax heatmap size does not match its grid");
  }
  const float peak = *std::max_element(heatmap.begin(), heatmap.end());
  double z = 0.0, x = 0.0, y = 0.0;
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const double e = std::exp((heatmap[static_cast<size_t>(r) * width + c] - peak) / temperature);
      z += e;
      x += e * pixel_to_norm(c, width);
      y += e * pixel_to_norm(r, height);
    }
  }
  return {x / z, y / z};
}

namespace {

struct SoftargmaxPass {
  Eigen::MatrixXd probs;   // P x F
  Eigen::VectorXd coords;  // 2F
};

SoftargmaxPass soft_points(const RowMatrix<double>& emb, const Eigen::MatrixXd& filters, const RowMatrix<double>& grid,
                           double temperature) {
  SoftargmaxPass s;
  s.probs = (emb * filters.transpose()) / temperature;
  s.coords.resize(2 * filters.rows());
  for (Eigen::Index k = 0; k < s.probs.cols(); ++k) {
    auto col = s.probs.col(k);
    col = (col.array() - col.maxCoeff()).exp().matrix();
    col /= col.sum();
    s.coords(2 * k) = col.dot(grid.col(0));
    s.coords(2 * k + 1) = col.dot(grid.col(1));
  }
  return s;
}

struct AdamMatrix {
  Eigen::MatrixXd m, v;
  void step(Eigen::MatrixXd& value, const Eigen::MatrixXd& grad, double lr, int t) {
    if (m.size() == 0) {
      m = Eigen::MatrixXd::Zero(value.rows(), value.cols());
      v = m;
    }
    m = 0.9 * m + 0.1 * grad;
    v = 0.999 * v + 0.001 * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(0.9, t), c2 = 1.0 - std::pow(0.999, t);
    value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + 1e-8);
  }
};

void check_maps(std::span<const EmbeddingMap> maps, std::span<const LandmarkSet> landmarks) {
  if (maps.empty()) throw DataError("landmark regressor needs at least one annotated image");
  if (maps.size() != landmarks.size()) throw ShapeError("one landmark set per embedding map is required");
  for (const auto& m : maps) {
    if (m.height != maps[0].height || m.width != maps[0].width || m.channels() != maps[0].channels()) {
      throw ShapeError("embedding maps differ in shape");
    }
  }
  for (const auto& l : landmarks) {
    if (l.size() != landmarks[0].size()) throw ShapeError("landmark counts differ between images");
  }
  if (landmarks[0].empty()) throw DataError("images carry no landmarks");
}

}  // namespace

Eigen::VectorXd RegressionHead::features(const EmbeddingMap& map) const {
  const RowMatrix<double> emb = map.values.cast<double>();
  return soft_points(emb, filters.cast<double>(), grid_positions(map.height, map.width), temperature).coords;
}

std::vector<Point2> RegressionHead::predict(const EmbeddingMap& map) const {
  if (map.channels() != filters.cols()) throw ShapeError("embedding dimension does not match the regression head");
  const Eigen::VectorXd out = linear * features(map) + offset;
  std::vector<Point2> pts;
  for (int k = 0; k < num_landmarks(); ++k) pts.push_back({out(2 * k), out(2 * k + 1)});
  return pts;
}

RegressionHead train_regressor(std::span<const EmbeddingMap> maps, std::span<const LandmarkSet> landmarks,
                               const RegressorConfig& cfg) {
  check_maps(maps, landmarks);
  if (cfg.filters < 1 || !(cfg.temperature > 0) || cfg.epochs < 0 || cfg.batch_size < 1 || cfg.ridge < 0) {
    throw ConfigError("invalid regressor configuration");
  }
  const Eigen::Index n = static_cast<Eigen::Index>(maps.size());
  const int k_pts = static_cast<int>(landmarks[0].size());
  const int c = maps[0].channels();
  const int f = cfg.filters;
  const RowMatrix<double> grid = grid_positions(maps[0].height, maps[0].width);

  std::vector<RowMatrix<double>> emb;
  emb.reserve(maps.size());
  for (const auto& m : maps) emb.push_back(m.values.cast<double>());
  Eigen::MatrixXd targets(n, 2 * k_pts), mask = Eigen::MatrixXd::Zero(n, 2 * k_pts);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int k = 0; k < k_pts; ++k) {
      const Landmark& l = landmarks[i][k];
      targets(i, 2 * k) = l.visible ? l.p.x : 0.0;
      targets(i, 2 * k + 1) = l.visible ? l.p.y : 0.0;
      mask(i, 2 * k) = mask(i, 2 * k + 1) = l.visible ? 1.0 : 0.0;
    }
  }

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd filters(f, c);
  for (Eigen::Index i = 0; i < filters.size(); ++i) filters.data()[i] = normal(rng);
  Eigen::MatrixXd linear = Eigen::MatrixXd::Zero(2 * k_pts, 2 * f);
  Eigen::MatrixXd offset(2 * k_pts, 1);
  for (int j = 0; j < 2 * k_pts; ++j) {
    const double cnt = mask.col(j).sum();
    offset(j, 0) = cnt > 0 ? targets.col(j).cwiseProduct(mask.col(j)).sum() / cnt : 0.0;
  }

  AdamMatrix adam_f, adam_w, adam_b;
  std::vector<Eigen::Index> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  int t = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      double count = 0.0;
      for (size_t b = start; b < stop; ++b) count += mask.row(order[b]).sum();
      if (count == 0) continue;
      Eigen::MatrixXd g_f = Eigen::MatrixXd::Zero(f, c), g_w = Eigen::MatrixXd::Zero(2 * k_pts, 2 * f);
      Eigen::MatrixXd g_b = Eigen::MatrixXd::Zero(2 * k_pts, 1);
      for (size_t b = start; b < stop; ++b) {
        const Eigen::Index i = order[b];
        const SoftargmaxPass s = soft_points(emb[i], filters, grid, cfg.temperature);
        const Eigen::VectorXd pred = linear * s.coords + offset.col(0);
        const Eigen::VectorXd r = (2.0 / count) * (pred - targets.row(i).transpose()).cwiseProduct(mask.row(i).transpose());
        g_w += r * s.coords.transpose();
        g_b += r;
        const Eigen::VectorXd dz = linear.transpose() * r;
        for (int k = 0; k < f; ++k) {
          const auto p = s.probs.col(k);
          const Eigen::VectorXd a =
              p.cwiseProduct(dz(2 * k) * (grid.col(0).array() - s.coords(2 * k)).matrix() +
                             dz(2 * k + 1) * (grid.col(1).array() - s.coords(2 * k + 1)).matrix()) /
              cfg.temperature;
          g_f.row(k) += (emb[i].transpose() * a).transpose();
        }
      }
      ++t;
      adam_f.step(filters, g_f, cfg.lr, t);
      adam_w.step(linear, g_w, cfg.lr, t);
      adam_b.step(offset, g_b, cfg.lr, t);
    }
  }

  RegressionHead head;
  head.filters = filters.cast<float>();
  head.temperature = cfg.temperature;
  head.linear = linear;
  head.offset = offset.col(0);

  if (cfg.refit) {
    // Closed-form least squares for the affine map given the learned filters.
    Eigen::MatrixXd z(n, 2 * f + 1);
    for (Eigen::Index i = 0; i < n; ++i) {
      z.row(i).head(2 * f) = soft_points(emb[i], filters, grid, cfg.temperature).coords.transpose();
      z(i, 2 * f) = 1.0;
    }
    Eigen::MatrixXd penalty = cfg.ridge * Eigen::MatrixXd::Identity(2 * f + 1, 2 * f + 1);
    penalty(2 * f, 2 * f) = 0.0;
    for (int j = 0; j < 2 * k_pts; ++j) {
      const Eigen::MatrixXd zm = mask.col(j).asDiagonal() * z;
      if (mask.col(j).sum() == 0) continue;
      const Eigen::MatrixXd gram = zm.transpose() * zm + penalty;
      const Eigen::VectorXd w = gram.ldlt().solve(zm.transpose() * targets.col(j));
      if (!w.allFinite()) continue;
      head.linear.row(j) = w.head(2 * f).transpose();
      head.offset(j) = w(2 * f);
    }
  }
  return head;
}

std::vector<EmbeddingMap> embed_dataset(const EmbedFn& embed, const Dataset& dataset) {
  std::vector<EmbeddingMap> maps;
  maps.reserve(dataset.size());
  for (size_t i = 0; i < dataset.size(); ++i) maps.push_back(embed(dataset.get(i).image));
  return maps;
}

std::vector<LandmarkSet> dataset_landmarks(const Dataset& dataset) {
  std::vector<LandmarkSet> out;
  out.reserve(dataset.size());
  for (size_t i = 0; i < dataset.size(); ++i) out.push_back(dataset.get(i).landmarks);
  return out;
}

RegressionHead train_regressor(DenseEmbedder& frozen, const Dataset& annotated, const RegressorConfig& cfg) {
  if (annotated.size() == 0) throw DataError("landmark regressor needs at least one annotated image");
  if (!annotated.has_landmarks()) throw DataError(annotated.name() + " has no landmark annotations");
  const auto maps = embed_dataset(embed_fn(frozen), annotated);
  const auto lms = dataset_landmarks(annotated);
  return train_regressor(maps, lms, cfg);
}

double iod_error(std::span<const Point2> pred, const LandmarkSet& gt, int left_eye, int right_eye) {
  const int k = static_cast<int>(gt.size());
  if (left_eye < 0 || right_eye < 0 || left_eye >= k || right_eye >= k) throw ConfigError("eye index out of range");
  if (pred.size() != gt.size()) throw ShapeError("prediction and ground truth differ in landmark count");
  if (!gt[left_eye].visible || !gt[right_eye].visible) throw DataError("eye landmarks are not annotated");
  const double iod = std::hypot(gt[left_eye].p.x - gt[right_eye].p.x, gt[left_eye].p.y - gt[right_eye].p.y);
  if (!(iod > 1e-12)) throw DataError("coincident eye landmarks: inter-ocular distance is zero");
  std::vector<double> errs;
  for (int i = 0; i < k; ++i) {
    if (!gt[i].visible) continue;
    errs.push_back(std::hypot(pred[i].x - gt[i].p.x, pred[i].y - gt[i].p.y));
  }
  return 100.0 * pairwise_sum(errs) / static_cast<double>(errs.size()) / iod;
}

double mean_iod_error(const RegressionHead& head, std::span<const EmbeddingMap> maps,
                      std::span<const LandmarkSet> landmarks, int left_eye, int right_eye) {
  if (maps.size() != landmarks.size()) throw ShapeError("one landmark set per embedding map is required");
  std::vector<double> errs;
  for (size_t i = 0; i < maps.size(); ++i) {
    const auto pred = head.predict(maps[i]);
    errs.push_back(iod_error(pred, landmarks[i], left_eye, right_eye));
  }
  if (errs.empty()) throw DataError("no images to evaluate the regressor on");
  return pairwise_sum(errs) / static_cast<double>(errs.size());
}

std::vector<LimitedRow> limited_annotation_study(std::span<const EmbeddingMap> train_maps, const Dataset& train,
                                                 std::span<const EmbeddingMap> test_maps, const Dataset& test,
                                                 const LimitedStudyConfig& cfg) {
  if (train_maps.size() != train.size() || test_maps.size() != test.size()) {
    throw ShapeError("embedding maps must cover every dataset item");
  }
  if (cfg.n_seeds < 1) throw ConfigError("limited study needs n_seeds >= 1");
  for (int c : cfg.counts) {
    if (c < 0 || static_cast<size_t>(c) > train.size()) {
      throw ConfigError("annotation count " + std::to_string(c) + " exceeds the " + std::to_string(train.size()) +
                        " training images");
    }
  }
  const auto train_lm = dataset_landmarks(train);
  const auto test_lm = dataset_landmarks(test);
  if (!cfg.list_dir.empty()) std::filesystem::create_directories(cfg.list_dir);

  std::vector<LimitedRow> rows;
  for (int count : cfg.counts) {
    LimitedRow row;
    row.all = count == 0;
    row.count = row.all ? static_cast<int>(train.size()) : count;
    for (int s = 0; s < cfg.n_seeds; ++s) {
      std::vector<size_t> chosen(train.size());
      std::iota(chosen.begin(), chosen.end(), size_t{0});
      if (!row.all) {
        std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(count),
                          static_cast<std::uint32_t>(s)};
        std::mt19937_64 rng(seq);
        std::shuffle(chosen.begin(), chosen.end(), rng);
        chosen.resize(static_cast<size_t>(count));
      }
      if (!cfg.list_dir.empty()) {
        const std::string tag = row.all ? "all" : std::to_string(count);
        std::ofstream list(cfg.list_dir / ("count_" + tag + "_seed_" + std::to_string(s) + ".txt"));
        for (size_t i : chosen) list << train.item_id(i) << '\n';
        if (!list) throw DataError("cannot write annotation list in " + cfg.list_dir.string());
      }
      std::vector<EmbeddingMap> maps;
      std::vector<LandmarkSet> lms;
      for (size_t i : chosen) {
        maps.push_back(train_maps[i]);
        lms.push_back(train_lm[i]);
      }
      const RegressionHead head = train_regressor(maps, lms, cfg.head);
      row.errors.push_back(mean_iod_error(head, test_maps, test_lm, cfg.left_eye, cfg.right_eye));
    }
    row.mean = pairwise_sum(row.errors) / row.errors.size();
    double var = 0.0;
    for (double e : row.errors) var += (e - row.mean) * (e - row.mean);
    row.stddev = std::sqrt(var / row.errors.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_limited_csv(const std::vector<LimitedRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(9);
  out << "count,n_seeds,mean_iod_percent,std_iod_percent,per_seed\n";
  for (const LimitedRow& r : rows) {
    out << (r.all ? "all" : std::to_string(r.count)) << ',' << r.errors.size() << ',' << r.mean << ',' << r.stddev
        << ",\"";
    for (size_t i = 0; i < r.errors.size(); ++i) out << (i ? ";" : "") << r.errors[i];
    out << "\"\n";
  }
}

}  // namespace dve
