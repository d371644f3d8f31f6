#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include <Eigen/QR>

#include "dve/dve_core.hpp"
#include "dve/errors.hpp"
#include "grad_check.hpp"

using namespace dve;
using MapD = BasicEmbeddingMap<double>;

namespace {

MapD one_hot_map(int h, int w, double scale = 1.0, std::vector<int> perm = {}) {
  const int n = h * w;
  if (perm.empty()) {
    perm.resize(n);
    std::iota(perm.begin(), perm.end(), 0);
  }
  MapD m(h, w, n);
  for (int i = 0; i < n; ++i) m.values(i, perm[i]) = scale;
  return m;
}

// gt that sends pixel u of an h x w grid to pixel perm[u].
WarpField permutation_field(int h, int w, const std::vector<int>& perm) {
  WarpField f(h, w);
  for (int u = 0; u < h * w; ++u) f.set(u, {pixel_to_norm(perm[u] % w, w), pixel_to_norm(perm[u] / w, h)});
  return f;
}

MapD random_unit_map(int h, int w, int c, std::mt19937_64& rng) {
  MapD m = test::random_map(h, w, c, rng);
  m.values.rowwise().normalize();
  return m;
}

// Orthonormal rows via QR of a random square matrix; needs c >= h*w.
MapD random_orthonormal_map(int h, int w, int c, std::mt19937_64& rng) {
  const MapD r = test::random_map(c, 1, c, rng);
  Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(r.values).householderQ();
  MapD m(h, w, c);
  m.values = q.topRows(h * w);
  return m;
}

}  // namespace

TEST_CASE("similarity_grid") {
  SUBCASE("one-hot embeddings give the identity") {
    const MapD e = one_hot_map(2, 3);
    CHECK(similarity_grid(e, e).isApprox(Eigen::MatrixXd::Identity(6, 6)));
  }
  SUBCASE("zero embeddings give zeros") {
    const MapD z(3, 3, 5);
    CHECK(similarity_grid(z, z).isZero());
  }
  SUBCASE("hand-computed 2x2 dot products") {
    MapD a(2, 2, 3), b(2, 2, 3);
    a.values << 1, 2, 3, 0, -1, 4, 2, 2, 2, 0.5, 0, -1;
    b.values << 1, 0, 0, 0, 1, 0, 1, 1, 1, -2, 3, 0.5;
    const RowMatrix<double> s = similarity_grid(a, b);
    // Row u, column v computed by hand.
    const double expect[4][4] = {{1, 2, 6, 5.5}, {0, -1, 3, -1}, {2, 2, 6, 3}, {0.5, 0, -0.5, -1.5}};
    for (int u = 0; u < 4; ++u) {
      for (int v = 0; v < 4; ++v) CHECK(s(u, v) == doctest::Approx(expect[u][v]));
    }
  }
  SUBCASE("channel mismatch") { CHECK_THROWS_AS(similarity_grid(MapD(2, 2, 3), MapD(2, 2, 4)), ShapeError); }
}

TEST_CASE("match_distribution") {
  SUBCASE("zero similarity is uniform") {
    const auto d = match_distribution<double>(RowMatrix<double>::Zero(3, 8), 2, 4);
    CHECK(d.probs.isConstant(1.0 / 8.0));
  }
  SUBCASE("single peaked row matches the scalar softmax") {
    RowMatrix<double> s(1, 4);
    s << 10, 0, 0, 0;
    const auto d = match_distribution(s, 2, 2);
    const double z = std::exp(10.0) + 3.0;
    CHECK(d.probs(0, 0) == doctest::Approx(std::exp(10.0) / z).epsilon(1e-12));
    CHECK(d.probs(0, 0) == doctest::Approx(0.9998638).epsilon(1e-6));
    CHECK(d.probs(0, 1) == doctest::Approx(1.0 / z).epsilon(1e-12));
    CHECK(d.probs(0, 1) == d.probs(0, 2));
    CHECK(d.probs(0, 2) == d.probs(0, 3));
  }
  SUBCASE("adding a constant to a row changes nothing") {
    std::mt19937_64 rng(2);
    RowMatrix<double> s = test::random_map(3, 3, 9, rng).values;
    const auto before = match_distribution(s, 3, 3);
    s.row(1).array() += 123.0;
    const auto after = match_distribution(s, 3, 3);
    CHECK(before.probs.isApprox(after.probs, 1e-12));
  }
  SUBCASE("huge logits stay finite") {
    RowMatrix<double> s(1, 3);
    s << 1e4, -1e4, 0;
    const auto d = match_distribution(s, 1, 3);
    CHECK(d.probs.allFinite());
    CHECK(d.is_row_stochastic());
  }
}

TEST_CASE("correspondence_loss") {
  SUBCASE("all mass on g(u) gives zero") {
    const std::vector<int> perm = {2, 0, 3, 1};
    MatchDistribution dist;
    dist.target_height = dist.target_width = 2;
    dist.probs = RowMatrix<float>::Zero(4, 4);
    for (int u = 0; u < 4; ++u) dist.probs(u, perm[u]) = 1.0f;
    CHECK(correspondence_loss(dist, permutation_field(2, 2, perm)) == doctest::Approx(0.0));
  }
  SUBCASE("uniform distribution with identity ground truth, enumerated") {
    BasicMatchDistribution<double> dist;
    dist.target_height = dist.target_width = 2;
    dist.probs = RowMatrix<double>::Constant(4, 4, 0.25);
    const double xs[4] = {-1, 1, -1, 1}, ys[4] = {-1, -1, 1, 1};
    double expect = 0;
    for (int u = 0; u < 4; ++u) {
      for (int v = 0; v < 4; ++v) expect += 0.25 * std::hypot(xs[v] - xs[u], ys[v] - ys[u]);
    }
    expect /= 4;
    CHECK(expect == doctest::Approx(1.0 + std::sqrt(2.0) / 2.0));
    CHECK(correspondence_loss(dist, WarpField::identity(2, 2)) == doctest::Approx(expect).epsilon(1e-12));
  }
  SUBCASE("everything masked is an unusable pair") {
    WarpField gt = WarpField::identity(2, 2);
    std::fill(gt.valid.begin(), gt.valid.end(), 0);
    MatchDistribution dist;
    dist.target_height = dist.target_width = 2;
    dist.probs = RowMatrix<float>::Constant(4, 4, 0.25f);
    CHECK_THROWS_AS(correspondence_loss(dist, gt), UnusablePairError);
  }
  SUBCASE("masked pixels are excluded from the mean, not zero-weighted") {
    BasicMatchDistribution<double> dist;
    dist.target_height = dist.target_width = 2;
    dist.probs = RowMatrix<double>::Constant(4, 4, 0.25);
    WarpField gt = WarpField::identity(2, 2);
    gt.valid[1] = gt.valid[2] = 0;
    CHECK(correspondence_loss(dist, gt) == doctest::Approx(1.0 + std::sqrt(2.0) / 2.0));
  }
}

TEST_CASE("dve_reconstruct") {
  std::mt19937_64 rng(8);
  SUBCASE("sharp self-match recovers the (scaled) source") {
    const MapD src = random_orthonormal_map(3, 3, 9, rng);
    MapD aux = src;
    aux.values *= 50.0;
    const std::vector<MapD> set = {aux};
    const MapD rec = dve_reconstruct<double>(src, set);
    CHECK((rec.values / 50.0 - src.values).cwiseAbs().maxCoeff() < 1e-3);
  }
  SUBCASE("a constant pool reconstructs to that constant") {
    const MapD src = test::random_map(3, 3, 4, rng);
    MapD aux(2, 2, 4);
    for (int i = 0; i < 4; ++i) aux.values.row(i) << 0.3, -1.0, 2.0, 0.5;
    const std::vector<MapD> set = {aux};
    const MapD rec = dve_reconstruct<double>(src, set);
    for (int u = 0; u < 9; ++u) CHECK(rec.values.row(u).isApprox(aux.values.row(0)));
  }
  SUBCASE("2x2 brute force") {
    MapD src(2, 2, 2), aux(2, 2, 2);
    src.values << 1, 0, 0, 1, -1, 0.5, 0.3, 0.3;
    aux.values << 0.5, 0.5, 2, -1, 0, 1.5, -0.7, 0.2;
    const std::vector<MapD> set = {aux};
    const MapD rec = dve_reconstruct<double>(src, set);
    for (int u = 0; u < 4; ++u) {
      double z = 0, rx = 0, ry = 0;
      for (int w = 0; w < 4; ++w) {
        const double e = std::exp(src.values(u, 0) * aux.values(w, 0) + src.values(u, 1) * aux.values(w, 1));
        z += e;
        rx += e * aux.values(w, 0);
        ry += e * aux.values(w, 1);
      }
      CHECK(rec.values(u, 0) == doctest::Approx(rx / z).epsilon(1e-12));
      CHECK(rec.values(u, 1) == doctest::Approx(ry / z).epsilon(1e-12));
    }
  }
  SUBCASE("empty auxiliary set is a configuration error") {
    const std::vector<MapD> none;
    CHECK_THROWS_AS(dve_reconstruct<double>(MapD(2, 2, 3), none), ConfigError);
  }
  SUBCASE("multiple auxiliary maps pool all their pixels") {
    const MapD src = test::random_map(2, 2, 3, rng);
    const MapD a = test::random_map(2, 2, 3, rng), b = test::random_map(3, 1, 3, rng);
    MapD merged(7, 1, 3);
    merged.values << a.values, b.values;
    const std::vector<MapD> two = {a, b}, one = {merged};
    CHECK(dve_reconstruct<double>(src, two).values.isApprox(dve_reconstruct<double>(src, one).values, 1e-12));
  }
}

TEST_CASE("dve_loss") {
  const std::vector<int> perm = {4, 2, 7, 0, 8, 1, 3, 6, 5};
  const WarpField gt = permutation_field(3, 3, perm);
  std::vector<int> inverse(9);
  for (int u = 0; u < 9; ++u) inverse[perm[u]] = u;

  SUBCASE("sharp self-exchange on a confident one-hot setup reduces to the plain loss") {
    const MapD src = one_hot_map(3, 3);
    const MapD tgt = one_hot_map(3, 3, 50.0, inverse);  // target pixel perm[u] carries code u
    MapD aux = src;
    aux.values *= 50.0;
    const std::vector<MapD> set = {aux};
    const double plain =
        correspondence_loss(match_distribution(similarity_grid(src, tgt), 3, 3), gt);
    const double exchanged = dve_loss<double>(src, tgt, set, gt);
    CHECK(std::abs(plain - exchanged) < 1e-3);
    CHECK(exchanged < 1e-2);
  }
  SUBCASE("orthogonal one-hot embeddings permuted by gt") {
    const MapD src = one_hot_map(3, 3);
    const MapD tgt = one_hot_map(3, 3, 1.0, inverse);
    MapD aux = src;
    aux.values *= 50.0;
    const std::vector<MapD> set = {aux};
    CHECK(dve_loss<double>(src, tgt, set, gt) < 1e-2);
  }
  SUBCASE("uniform constant pool collapses to the uniform-distribution loss") {
    std::mt19937_64 rng(4);
    const MapD src = test::random_map(3, 3, 4, rng), tgt = test::random_map(3, 3, 4, rng);
    MapD aux(3, 3, 4);  // all-zero vectors: reconstruction is zero, matching is uniform
    const std::vector<MapD> set = {aux};
    BasicMatchDistribution<double> uniform;
    uniform.target_height = uniform.target_width = 3;
    uniform.probs = RowMatrix<double>::Constant(9, 9, 1.0 / 9.0);
    CHECK(dve_loss<double>(src, tgt, set, gt) == doctest::Approx(correspondence_loss(uniform, gt)).epsilon(1e-12));
  }
}

TEST_CASE("every match distribution is row-stochastic") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const MapD a = test::random_map(4, 5, 6, rng), b = test::random_map(3, 4, 6, rng);
    RowMatrix<double> s = similarity_grid(a, b) * (1.0 + trial);
    const auto d = match_distribution(s, 3, 4);
    CHECK(d.is_row_stochastic(1e-5));
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 3; ++trial) {
    const MapD src = test::random_map(3, 3, 4, rng), tgt = test::random_map(3, 3, 4, rng);
    const std::vector<MapD> aux = {test::random_map(3, 3, 4, rng), test::random_map(3, 3, 4, rng)};
    WarpConfig cfg;
    cfg.max_control_displacement = 0.3;
    const WarpField gt = sample_warp(cfg, 3, 3, rng);
    const auto plain = test::check_correspondence_gradients(src, tgt, gt, 1e-4);
    CHECK(plain.max_relative_error <= 1e-3);
    const auto exchanged = test::check_dve_gradients(src, tgt, aux, gt, 1e-4);
    CHECK(exchanged.max_relative_error <= 1e-3);
  }
}

TEST_CASE("fused objectives agree with the composed loss and are block-size independent") {
  std::mt19937_64 rng(77);
  const MapD src = test::random_map(4, 4, 5, rng), tgt = test::random_map(4, 4, 5, rng);
  const std::vector<MapD> aux = {test::random_map(4, 4, 5, rng)};
  const WarpField gt = sample_warp(WarpConfig{}, 4, 4, rng);
  const auto a = correspondence_objective(src, tgt, gt, {1});
  const auto b = correspondence_objective(src, tgt, gt, {1000});
  CHECK(a.loss == doctest::Approx(correspondence_loss(match_distribution(similarity_grid(src, tgt), 4, 4), gt)));
  CHECK(a.loss == doctest::Approx(b.loss).epsilon(1e-12));
  CHECK(a.grad_src.isApprox(b.grad_src, 1e-12));
  CHECK(a.grad_tgt.isApprox(b.grad_tgt, 1e-12));
  const auto c = dve_objective<double>(src, tgt, aux, gt, {3});
  const auto d = dve_objective<double>(src, tgt, aux, gt, {256});
  CHECK(c.loss == doctest::Approx(dve_loss<double>(src, tgt, aux, gt)));
  CHECK(c.grad_aux[0].isApprox(d.grad_aux[0], 1e-12));
  CHECK(c.grad_src.isApprox(d.grad_src, 1e-12));
}

TEST_CASE("exchange preserves argmax matches for sharp distinct embeddings") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    MapD src = random_unit_map(3, 3, 9, rng);
    // Distinct unit vectors: reject near-duplicates.
    const RowMatrix<double> gram = src.values * src.values.transpose();
    if ((gram - Eigen::MatrixXd::Identity(9, 9)).cwiseAbs().maxCoeff() > 0.9) continue;
    src.values *= 50.0;
    const MapD tgt = test::random_map(3, 3, 9, rng);
    const std::vector<MapD> set = {src};
    const MapD rec = dve_reconstruct<double>(src, set);
    const RowMatrix<double> with = similarity_grid(rec, tgt), without = similarity_grid(src, tgt);
    for (int u = 0; u < 9; ++u) {
      Eigen::Index a, b;
      with.row(u).maxCoeff(&a);
      without.row(u).maxCoeff(&b);
      CHECK(a == b);
    }
  }
}

TEST_CASE("loss is non-negative and zero exactly for deltas at g(u)") {
  std::mt19937_64 rng(12);
  std::vector<int> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    const WarpField gt = permutation_field(3, 3, perm);
    BasicMatchDistribution<double> delta;
    delta.target_height = delta.target_width = 3;
    delta.probs = RowMatrix<double>::Zero(9, 9);
    for (int u = 0; u < 9; ++u) delta.probs(u, perm[u]) = 1.0;
    CHECK(correspondence_loss(delta, gt) < 1e-12);

    // Move mass off the correct cell for one pixel: strictly positive.
    auto moved = delta;
    const int u = trial % 9;
    moved.probs(u, perm[u]) = 0.99;
    moved.probs(u, (perm[u] + 1 + trial % 8) % 9) = 0.01;
    CHECK(correspondence_loss(moved, gt) > 0.0);

    const MapD a = test::random_map(3, 3, 4, rng), b = test::random_map(3, 3, 4, rng);
    CHECK(correspondence_loss(match_distribution(similarity_grid(a, b), 3, 3), gt) >= 0.0);
  }
}

TEST_CASE("permuting auxiliary pixels leaves the reconstruction unchanged") {
  std::mt19937_64 rng(9);
  const MapD src = test::random_map(3, 3, 4, rng);
  const MapD aux = test::random_map(3, 3, 4, rng);
  std::vector<int> perm(9);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  MapD shuffled = aux;
  for (int i = 0; i < 9; ++i) shuffled.values.row(i) = aux.values.row(perm[i]);
  const std::vector<MapD> a = {aux}, b = {shuffled};
  CHECK(dve_reconstruct<double>(src, a).values.isApprox(dve_reconstruct<double>(src, b).values, 1e-12));
}
