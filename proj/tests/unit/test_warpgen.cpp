#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "dve/errors.hpp"
#include "dve/warpgen.hpp"

using namespace dve;

namespace {

// Independent thin-plate-spline fit: dense Gaussian elimination with partial
// pivoting on the bordered system, no Eigen involved.
struct OracleTps {
  std::vector<Point2> src;
  std::vector<double> wx, wy;
  double ax[3] = {}, ay[3] = {};

  static double u(double r2) { return r2 > 0 ? r2 * std::log(r2) : 0.0; }

  OracleTps(const std::vector<Point2>& s, const std::vector<Point2>& t) : src(s) {
    const size_t n = s.size(), m = n + 3;
    std::vector<std::vector<double>> a(m, std::vector<double>(m + 2, 0.0));
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = 0; j < n; ++j) {
        a[i][j] = u((s[i].x - s[j].x) * (s[i].x - s[j].x) + (s[i].y - s[j].y) * (s[i].y - s[j].y));
      }
      a[i][n] = a[n][i] = 1;
      a[i][n + 1] = a[n + 1][i] = s[i].x;
      a[i][n + 2] = a[n + 2][i] = s[i].y;
      a[i][m] = t[i].x;
      a[i][m + 1] = t[i].y;
    }
    for (size_t col = 0; col < m; ++col) {
      size_t piv = col;
      for (size_t r = col + 1; r < m; ++r) {
        if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
      }
      std::swap(a[col], a[piv]);
      for (size_t r = 0; r < m; ++r) {
        if (r == col) continue;
        const double f = a[r][col] / a[col][col];
        for (size_t c = col; c < m + 2; ++c) a[r][c] -= f * a[col][c];
      }
    }
    for (size_t i = 0; i < n; ++i) {
      wx.push_back(a[i][m] / a[i][i]);
      wy.push_back(a[i][m + 1] / a[i][i]);
    }
    for (int k = 0; k < 3; ++k) {
      ax[k] = a[n + k][m] / a[n + k][n + k];
      ay[k] = a[n + k][m + 1] / a[n + k][n + k];
    }
  }

  Point2 operator()(Point2 p) const {
    Point2 out{ax[0] + ax[1] * p.x + ax[2] * p.y, ay[0] + ay[1] * p.x + ay[2] * p.y};
    for (size_t i = 0; i < src.size(); ++i) {
      const double k = u((p.x - src[i].x) * (p.x - src[i].x) + (p.y - src[i].y) * (p.y - src[i].y));
      out.x += wx[i] * k;
      out.y += wy[i] * k;
    }
    return out;
  }
};

double max_identity_deviation(const WarpField& f) {
  double worst = 0;
  for (int y = 0; y < f.height; ++y) {
    for (int x = 0; x < f.width; ++x) {
      const Point2 p = f.at(static_cast<size_t>(y) * f.width + x);
      worst = std::max({worst, std::abs(p.x - pixel_to_norm(x, f.width)), std::abs(p.y - pixel_to_norm(y, f.height))});
    }
  }
  return worst;
}

Image random_image(int h, int w, std::mt19937_64& rng) {
  Image im(h, w);
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  for (float& v : im.data) v = d(rng);
  return im;
}

WarpParams translation(double tx, double ty) {
  WarpParams p;
  p.translation = {tx, ty};
  p.displacements.assign(4, Point2{});
  return p;
}

}  // namespace

TEST_CASE("identity config yields the identity field") {
  std::mt19937_64 rng(3);
  const WarpField f = sample_warp(WarpConfig::none(), 17, 23, rng);
  CHECK(max_identity_deviation(f) < 1e-7);  // float32 storage
  for (auto v : f.valid) CHECK(v == 1);
}

TEST_CASE("pure translation shifts every coordinate and masks the pushed-out strip") {
  const WarpField f = make_warp(translation(0.1, 0.0), 21, 21);
  size_t invalid = 0;
  for (int y = 0; y < f.height; ++y) {
    for (int x = 0; x < f.width; ++x) {
      const size_t i = static_cast<size_t>(y) * f.width + x;
      CHECK(f.at(i).x == doctest::Approx(pixel_to_norm(x, 21) + 0.1).epsilon(1e-6));
      CHECK(f.at(i).y == doctest::Approx(pixel_to_norm(y, 21)).epsilon(1e-6));
      const bool outside = pixel_to_norm(x, 21) + 0.1 > 1.0;
      CHECK((f.valid[i] == 0) == outside);
      invalid += f.valid[i] == 0;
    }
  }
  CHECK(invalid == 21);  // only the rightmost column (x=1.0) leaves the domain
}

TEST_CASE("control point displacement is interpolated exactly (2x2 grid)") {
  WarpParams p;
  p.displacements = {Point2{}, Point2{0.07, -0.04}, Point2{}, Point2{}};
  const WarpField f = make_warp(p, 9, 9);
  // Control point (1,-1) is the top-right pixel center.
  const Point2 at_cp = f.at(8);
  CHECK(std::abs(at_cp.x - (1.0 + 0.07)) < 1e-6);
  CHECK(std::abs(at_cp.y - (-1.0 - 0.04)) < 1e-6);

  const auto cps = control_grid_points(2, 2);
  std::vector<Point2> targets = cps;
  targets[1].x += 0.07;
  targets[1].y -= 0.04;
  const OracleTps oracle(cps, targets);
  for (int y = 0; y < 9; ++y) {
    for (int x = 0; x < 9; ++x) {
      const Point2 expect = oracle({pixel_to_norm(x, 9), pixel_to_norm(y, 9)});
      const Point2 got = f.at(static_cast<size_t>(y) * 9 + x);
      CHECK(std::abs(got.x - expect.x) < 1e-6);
      CHECK(std::abs(got.y - expect.y) < 1e-6);
    }
  }
}

TEST_CASE("sampled TPS field maps control points to their displaced locations") {
  WarpConfig cfg;
  cfg.compose_similarity = false;
  std::mt19937_64 rng(11);
  const WarpParams params = sample_warp_params(cfg, rng);
  const WarpField f = make_warp(params, 33, 33);  // 3x3 control points land on pixel centers
  const auto cps = control_grid_points(3, 3);
  for (size_t k = 0; k < cps.size(); ++k) {
    const WarpedPoint wp = warp_point(f, cps[k]);
    CHECK(std::abs(wp.coord.x - (cps[k].x + params.displacements[k].x)) < 1e-6);
    CHECK(std::abs(wp.coord.y - (cps[k].y + params.displacements[k].y)) < 1e-6);
  }
  std::vector<Point2> targets(cps.size());
  for (size_t k = 0; k < cps.size(); ++k) {
    targets[k] = {cps[k].x + params.displacements[k].x, cps[k].y + params.displacements[k].y};
  }
  const OracleTps oracle(cps, targets);
  ThinPlateSpline tps(cps, targets);
  for (double t = -1.0; t <= 1.0; t += 0.13) {
    const Point2 a = tps({t, 0.3 * t}), b = oracle({t, 0.3 * t});
    CHECK(std::abs(a.x - b.x) < 1e-9);
    CHECK(std::abs(a.y - b.y) < 1e-9);
  }
}

TEST_CASE("apply_warp with the identity field is exact") {
  std::mt19937_64 rng(5);
  const Image im = random_image(12, 10, rng);
  const Image out = apply_warp(im, WarpField::identity(12, 10));
  CHECK(out.data == im.data);
}

TEST_CASE("warping a constant image keeps it constant wherever a preimage exists") {
  Image im(24, 24);
  for (size_t i = 0; i < im.data.size(); i += 3) {
    im.data[i] = 0.2f;
    im.data[i + 1] = 0.5f;
    im.data[i + 2] = 0.9f;
  }
  std::mt19937_64 rng(7);
  WarpConfig cfg;
  const WarpField f = sample_warp(cfg, 24, 24, rng);
  const WarpField inv = invert_warp(f);
  const Image out = apply_warp(im, f);
  size_t covered = 0;
  for (size_t p = 0; p < inv.size(); ++p) {
    if (!inv.valid[p]) continue;
    ++covered;
    CHECK(out.data[3 * p] == doctest::Approx(0.2f).epsilon(1e-5));
    CHECK(out.data[3 * p + 1] == doctest::Approx(0.5f).epsilon(1e-5));
    CHECK(out.data[3 * p + 2] == doctest::Approx(0.9f).epsilon(1e-5));
  }
  CHECK(covered > inv.size() / 2);
}

TEST_CASE("one-pixel translation of a checkerboard matches an index shift") {
  Image board(4, 4);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      for (int c = 0; c < 3; ++c) board.at(y, x, c) = static_cast<float>((x + y) % 2);
    }
  }
  const WarpField f = make_warp(translation(2.0 / 3.0, 0.0), 4, 4);  // one pixel to the right
  const Image out = apply_warp(board, f, 0.25f);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 4; ++x) {
      const float expect = x == 0 ? 0.25f : board.at(y, x - 1, 0);
      CHECK(out.at(y, x, 0) == doctest::Approx(expect).epsilon(1e-9));
    }
  }
}

TEST_CASE("apply_warp rejects mismatched dimensions") {
  CHECK_THROWS_AS(apply_warp(Image(4, 4), WarpField::identity(4, 5)), ShapeError);
}

TEST_CASE("warp_points on identity and translation fields") {
  const WarpField id = WarpField::identity(8, 8);
  const Point2 origin{0, 0};
  const WarpedPoint a = warp_point(id, origin);
  CHECK(a.valid);
  CHECK(std::abs(a.coord.x) < 1e-7);
  CHECK(std::abs(a.coord.y) < 1e-7);

  const WarpField tr = make_warp(translation(0.1, 0.0), 41, 41);
  const WarpedPoint b = warp_point(tr, {0.95, 0.0});
  CHECK_FALSE(b.valid);
  CHECK(b.coord.x == doctest::Approx(1.05).epsilon(1e-6));
  CHECK(std::abs(b.coord.y) < 1e-6);

  // Out-of-range input is clamped and flagged.
  const WarpedPoint c = warp_point(id, {1.4, 0.0});
  CHECK_FALSE(c.valid);
  CHECK(c.coord.x == doctest::Approx(1.0));
}

TEST_CASE("downsample_warp") {
  SUBCASE("identity stays identity") {
    const WarpField d = downsample_warp(WarpField::identity(16, 12), 2);
    CHECK(d.height == 8);
    CHECK(d.width == 6);
    CHECK(max_identity_deviation(d) < 1e-6);
  }
  SUBCASE("translation is preserved") {
    const WarpField d = downsample_warp(make_warp(translation(0.05, -0.1), 16, 16), 2);
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) {
        const Point2 p = d.at(static_cast<size_t>(y) * 8 + x);
        CHECK(std::abs(p.x - (pixel_to_norm(x, 8) + 0.05)) < 1e-6);
        CHECK(std::abs(p.y - (pixel_to_norm(y, 8) - 0.1)) < 1e-6);
      }
    }
  }
  SUBCASE("TPS field agrees with warp_points at coarse cell centers") {
    std::mt19937_64 rng(19);
    const WarpField f = sample_warp(WarpConfig{}, 20, 20, rng);
    const WarpField d = downsample_warp(f, 4);
    for (int y = 0; y < 5; ++y) {
      for (int x = 0; x < 5; ++x) {
        const WarpedPoint wp = warp_point(f, {pixel_to_norm(x, 5), pixel_to_norm(y, 5)});
        const size_t i = static_cast<size_t>(y) * 5 + x;
        CHECK(d.at(i).x == doctest::Approx(wp.coord.x).epsilon(1e-6));
        CHECK(d.at(i).y == doctest::Approx(wp.coord.y).epsilon(1e-6));
        CHECK((d.valid[i] != 0) == wp.valid);
      }
    }
  }
  SUBCASE("non-divisible factor") { CHECK_THROWS_AS(downsample_warp(WarpField::identity(10, 10), 3), ShapeError); }
}

TEST_CASE("forward then inverted warp returns interior points to within 1e-2") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    std::mt19937_64 rng(seed);
    const WarpField f = sample_warp(WarpConfig{}, 32, 32, rng);
    const WarpField inv = invert_warp(f);
    double worst = 0;
    for (size_t i = 0; i < f.size(); ++i) {
      const Point2 u{pixel_to_norm(static_cast<int>(i % 32), 32), pixel_to_norm(static_cast<int>(i / 32), 32)};
      if (std::abs(u.x) > 0.8 || std::abs(u.y) > 0.8 || !f.valid[i]) continue;
      const WarpedPoint back = warp_point(inv, f.at(i));
      if (!back.valid) continue;
      worst = std::max(worst, std::hypot(back.coord.x - u.x, back.coord.y - u.y));
    }
    CHECK(worst < 1e-2);
  }
}

TEST_CASE("sampling is deterministic in the rng state") {
  std::mt19937_64 a(42), b(42);
  const WarpField fa = sample_warp(WarpConfig{}, 15, 15, a);
  const WarpField fb = sample_warp(WarpConfig{}, 15, 15, b);
  CHECK(fa.xs == fb.xs);
  CHECK(fa.ys == fb.ys);
  CHECK(fa.valid == fb.valid);
}

TEST_CASE("apply_warp is linear in the image") {
  std::mt19937_64 rng(23);
  const Image i1 = random_image(16, 16, rng), i2 = random_image(16, 16, rng);
  const WarpField f = sample_warp(WarpConfig{}, 16, 16, rng);
  Image mix(16, 16);
  for (size_t k = 0; k < mix.data.size(); ++k) mix.data[k] = 0.3f * i1.data[k] - 1.7f * i2.data[k];
  const Image w1 = apply_warp(i1, f), w2 = apply_warp(i2, f), wm = apply_warp(mix, f);
  for (size_t k = 0; k < mix.data.size(); ++k) {
    CHECK(wm.data[k] == doctest::Approx(0.3f * w1.data[k] - 1.7f * w2.data[k]).epsilon(1e-5));
  }
}

TEST_CASE("warp field binary record round-trips and rejects garbage") {
  std::mt19937_64 rng(1);
  const WarpField f = sample_warp(WarpConfig{}, 7, 9, rng);
  std::stringstream buf;
  write_warp_field(buf, f);
  CHECK(buf.str().size() == 16 + 7 * 9 * 9);
  const WarpField g = read_warp_field(buf);
  CHECK(g.height == 7);
  CHECK(g.width == 9);
  CHECK(g.xs == f.xs);
  CHECK(g.ys == f.ys);
  CHECK(g.valid == f.valid);

  std::stringstream junk("nope");
  CHECK_THROWS_AS(read_warp_field(junk), DataError);
}

TEST_CASE("invalid warp configurations are rejected") {
  std::mt19937_64 rng(0);
  WarpConfig cfg;
  cfg.max_control_displacement = 0.6;
  CHECK_THROWS_AS(sample_warp(cfg, 8, 8, rng), ConfigError);
  cfg = WarpConfig{};
  cfg.scale_min = 1.2;
  cfg.scale_max = 1.0;
  CHECK_THROWS_AS(sample_warp(cfg, 8, 8, rng), ConfigError);
  cfg = WarpConfig{};
  cfg.control_rows = 1;
  CHECK_THROWS_AS(sample_warp(cfg, 8, 8, rng), ConfigError);
}
