#include "dve/warpgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include <Eigen/Dense>

#include "dve/errors.hpp"

namespace dve {

namespace {

constexpr double kDomainSlack = 1e-6;

bool in_domain(Point2 p) {
  return std::abs(p.x) <= 1.0 + kDomainSlack && std::abs(p.y) <= 1.0 + kDomainSlack;
}

struct Bilinear {
  int x0, x1, y0, y1;
  double wx, wy;
};

Bilinear bilinear_support(Point2 p, int height, int width) {
  const double px = std::clamp(norm_to_pixel(p.x, width), 0.0, static_cast<double>(width - 1));
  const double py = std::clamp(norm_to_pixel(p.y, height), 0.0, static_cast<double>(height - 1));
  Bilinear b;
  b.x0 = static_cast<int>(std::floor(px));
  b.y0 = static_cast<int>(std::floor(py));
  b.x1 = std::min(b.x0 + 1, width - 1);
  b.y1 = std::min(b.y0 + 1, height - 1);
  b.wx = px - b.x0;
  b.wy = py - b.y0;
  return b;
}

Point2 sample_field(const WarpField& w, Point2 p) {
  const Bilinear b = bilinear_support(p, w.height, w.width);
  auto idx = [&](int y, int x) { return static_cast<size_t>(y) * w.width + x; };
  const double w00 = (1 - b.wx) * (1 - b.wy), w01 = b.wx * (1 - b.wy);
  const double w10 = (1 - b.wx) * b.wy, w11 = b.wx * b.wy;
  const size_t i00 = idx(b.y0, b.x0), i01 = idx(b.y0, b.x1), i10 = idx(b.y1, b.x0), i11 = idx(b.y1, b.x1);
  return {w00 * w.xs[i00] + w01 * w.xs[i01] + w10 * w.xs[i10] + w11 * w.xs[i11],
          w00 * w.ys[i00] + w01 * w.ys[i01] + w10 * w.ys[i10] + w11 * w.ys[i11]};
}

bool support_valid(const WarpField& w, Point2 p) {
  const Bilinear b = bilinear_support(p, w.height, w.width);
  constexpr double eps = 1e-12;
  auto ok = [&](int y, int x, double weight) {
    return weight <= eps || w.valid[static_cast<size_t>(y) * w.width + x] != 0;
  };
  return ok(b.y0, b.x0, (1 - b.wx) * (1 - b.wy)) && ok(b.y0, b.x1, b.wx * (1 - b.wy)) &&
         ok(b.y1, b.x0, (1 - b.wx) * b.wy) && ok(b.y1, b.x1, b.wx * b.wy);
}

// Solves g(u) = target by u <- u + (target - g(u)); returns false when the
// preimage leaves the domain or the iteration stalls.
bool invert_point(const WarpField& w, Point2 target, int max_iterations, double tolerance, Point2& out) {
  Point2 u = target;
  for (int it = 0; it < max_iterations; ++it) {
    const Point2 gu = sample_field(w, u);
    const double rx = target.x - gu.x;
    const double ry = target.y - gu.y;
    if (std::hypot(rx, ry) < tolerance) {
      out = u;
      return in_domain(u);
    }
    u.x = std::clamp(u.x + rx, -1.5, 1.5);
    u.y = std::clamp(u.y + ry, -1.5, 1.5);
  }
  out = u;
  const Point2 gu = sample_field(w, u);
  return in_domain(u) && std::hypot(target.x - gu.x, target.y - gu.y) < 1e3 * tolerance;
}

}  // namespace

WarpField::WarpField(int h, int w)
    : height(h), width(w), xs(size(), 0.0f), ys(size(), 0.0f), valid(size(), 1) {}

WarpField WarpField::identity(int h, int w) {
  WarpField f(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      f.set(static_cast<size_t>(y) * w + x, {pixel_to_norm(x, w), pixel_to_norm(y, h)});
    }
  }
  return f;
}

void WarpField::set(size_t index, Point2 p) {
  xs[index] = static_cast<float>(p.x);
  ys[index] = static_cast<float>(p.y);
}

void WarpField::refresh_mask() {
  for (size_t i = 0; i < size(); ++i) {
    valid[i] = in_domain(at(i)) ? 1 : 0;
  }
}

void WarpField::check() const {
  if (height <= 0 || width <= 0 || xs.size() != size() || ys.size() != size() || valid.size() != size()) {
    throw ShapeError("warp field buffers do not match its dimensions");
  }
}

void WarpConfig::validate() const {
  if (control_rows < 2 || control_cols < 2) {
    throw ConfigError("warp control grid needs at least 2x2 points");
  }
  if (!(max_control_displacement >= 0.0 && max_control_displacement <= 0.5)) {
    throw ConfigError("max_control_displacement must lie in [0, 0.5]");
  }
  if (!(scale_min <= scale_max) || scale_min <= 0.0) {
    throw ConfigError("scale range must satisfy 0 < lower <= upper");
  }
  if (rotation_range < 0.0 || translation_range < 0.0) {
    throw ConfigError("rotation and translation ranges must be non-negative");
  }
}

WarpConfig WarpConfig::none() {
  WarpConfig cfg;
  cfg.max_control_displacement = 0.0;
  cfg.rotation_range = 0.0;
  cfg.scale_min = cfg.scale_max = 1.0;
  cfg.translation_range = 0.0;
  return cfg;
}

double ThinPlateSpline::kernel(double r2) { return r2 > 0.0 ? r2 * std::log(r2) : 0.0; }

ThinPlateSpline::ThinPlateSpline(std::vector<Point2> sources, const std::vector<Point2>& targets)
    : sources_(std::move(sources)) {
  const auto n = static_cast<Eigen::Index>(sources_.size());
  if (n < 3 || targets.size() != sources_.size()) {
    throw ConfigError("thin-plate spline needs >= 3 matching source/target points");
  }
  Eigen::MatrixXd system = Eigen::MatrixXd::Zero(n + 3, n + 3);
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n + 3, 2);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const double dx = sources_[i].x - sources_[j].x;
      const double dy = sources_[i].y - sources_[j].y;
      system(i, j) = kernel(dx * dx + dy * dy);
    }
    system(i, n) = system(n, i) = 1.0;
    system(i, n + 1) = system(n + 1, i) = sources_[i].x;
    system(i, n + 2) = system(n + 2, i) = sources_[i].y;
    rhs(i, 0) = targets[i].x;
    rhs(i, 1) = targets[i].y;
  }
  const Eigen::MatrixXd sol = system.fullPivLu().solve(rhs);
  weights_.resize(sources_.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    weights_[i] = {sol(i, 0), sol(i, 1)};
  }
  for (int r = 0; r < 3; ++r) {
    affine_[r][0] = sol(n + r, 0);
    affine_[r][1] = sol(n + r, 1);
  }
}

Point2 ThinPlateSpline::operator()(Point2 p) const {
  Point2 out{affine_[0][0] + affine_[1][0] * p.x + affine_[2][0] * p.y,
             affine_[0][1] + affine_[1][1] * p.x + affine_[2][1] * p.y};
  for (size_t i = 0; i < sources_.size(); ++i) {
    const double dx = p.x - sources_[i].x;
    const double dy = p.y - sources_[i].y;
    const double k = kernel(dx * dx + dy * dy);
    out.x += weights_[i].x * k;
    out.y += weights_[i].y * k;
  }
  return out;
}

std::vector<Point2> control_grid_points(int rows, int cols) {
  std::vector<Point2> pts;
  pts.reserve(static_cast<size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      pts.push_back({pixel_to_norm(c, cols), pixel_to_norm(r, rows)});
    }
  }
  return pts;
}

WarpParams sample_warp_params(const WarpConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  auto uniform = [&](double lo, double hi) {
    return lo == hi ? lo : std::uniform_real_distribution<double>(lo, hi)(rng);
  };
  WarpParams p;
  if (cfg.compose_similarity) {
    p.rotation = uniform(-cfg.rotation_range, cfg.rotation_range);
    p.scale = uniform(cfg.scale_min, cfg.scale_max);
    p.translation = {uniform(-cfg.translation_range, cfg.translation_range),
                     uniform(-cfg.translation_range, cfg.translation_range)};
  }
  p.control_rows = cfg.control_rows;
  p.control_cols = cfg.control_cols;
  p.displacements.resize(static_cast<size_t>(cfg.control_rows) * cfg.control_cols);
  const double d = cfg.max_control_displacement;
  for (auto& disp : p.displacements) {
    disp = {uniform(-d, d), uniform(-d, d)};
  }
  return p;
}

WarpField make_warp(const WarpParams& params, int height, int width) {
  if (height <= 0 || width <= 0) {
    throw ShapeError("warp grid must be non-empty");
  }
  const auto controls = control_grid_points(params.control_rows, params.control_cols);
  if (params.displacements.size() != controls.size()) {
    throw ConfigError("one displacement per control point required");
  }
  const bool has_tps = std::any_of(params.displacements.begin(), params.displacements.end(),
                                   [](Point2 d) { return d.x != 0.0 || d.y != 0.0; });
  std::vector<Point2> targets(controls.size());
  for (size_t i = 0; i < controls.size(); ++i) {
    targets[i] = {controls[i].x + params.displacements[i].x, controls[i].y + params.displacements[i].y};
  }
  const ThinPlateSpline tps(controls, targets);

  const double c = std::cos(params.rotation) * params.scale;
  const double s = std::sin(params.rotation) * params.scale;
  WarpField field(height, width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Point2 u{pixel_to_norm(x, width), pixel_to_norm(y, height)};
      Point2 v{c * u.x - s * u.y + params.translation.x, s * u.x + c * u.y + params.translation.y};
      if (has_tps) v = tps(v);
      field.set(static_cast<size_t>(y) * width + x, v);
    }
  }
  field.refresh_mask();
  return field;
}

WarpField sample_warp(const WarpConfig& cfg, int height, int width, std::mt19937_64& rng) {
  return make_warp(sample_warp_params(cfg, rng), height, width);
}

Image apply_warp(const Image& image, const WarpField& warp, float fill) {
  warp.check();
  if (warp.height != image.height || warp.width != image.width) {
    throw ShapeError("warp field dimensions do not match the image");
  }
  const int h = image.height, w = image.width;
  Image out(h, w, fill);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      Point2 src;
      if (!invert_point(warp, {pixel_to_norm(x, w), pixel_to_norm(y, h)}, 60, 1e-7, src)) continue;
      const double px = std::clamp(norm_to_pixel(src.x, w), 0.0, w - 1.0);
      const double py = std::clamp(norm_to_pixel(src.y, h), 0.0, h - 1.0);
      int x0 = static_cast<int>(std::floor(px)), y0 = static_cast<int>(std::floor(py));
      double fx = px - x0, fy = py - y0;
      // Field coordinates are float32; snap offsets within that precision so
      // integer coordinates sample exactly.
      constexpr double snap = 1e-5;
      if (fx < snap) fx = 0.0;
      if (fy < snap) fy = 0.0;
      if (fx > 1.0 - snap) { fx = 0.0; x0 = std::min(x0 + 1, w - 1); }
      if (fy > 1.0 - snap) { fy = 0.0; y0 = std::min(y0 + 1, h - 1); }
      const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      for (int ch = 0; ch < 3; ++ch) {
        const double top = (1 - fx) * image.at(y0, x0, ch) + fx * image.at(y0, x1, ch);
        const double bottom = (1 - fx) * image.at(y1, x0, ch) + fx * image.at(y1, x1, ch);
        out.at(y, x, ch) = static_cast<float>((1 - fy) * top + fy * bottom);
      }
    }
  }
  return out;
}

WarpedPoint warp_point(const WarpField& warp, Point2 point) {
  const bool in_range = in_domain(point);
  const Point2 clamped{std::clamp(point.x, -1.0, 1.0), std::clamp(point.y, -1.0, 1.0)};
  WarpedPoint out;
  out.coord = sample_field(warp, clamped);
  out.valid = in_range && in_domain(out.coord) && support_valid(warp, clamped);
  return out;
}

std::vector<WarpedPoint> warp_points(const WarpField& warp, std::span<const Point2> points) {
  warp.check();
  std::vector<WarpedPoint> out;
  out.reserve(points.size());
  for (const Point2& p : points) out.push_back(warp_point(warp, p));
  return out;
}

WarpField downsample_warp(const WarpField& warp, int factor) {
  warp.check();
  if (factor <= 0 || warp.height % factor != 0 || warp.width % factor != 0) {
    throw ShapeError("downsample factor must divide the warp grid dimensions");
  }
  const int h = warp.height / factor, w = warp.width / factor;
  WarpField out(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const WarpedPoint wp = warp_point(warp, {pixel_to_norm(x, w), pixel_to_norm(y, h)});
      const size_t i = static_cast<size_t>(y) * w + x;
      out.set(i, wp.coord);
      out.valid[i] = wp.valid ? 1 : 0;
    }
  }
  return out;
}

WarpField invert_warp(const WarpField& warp, int max_iterations, double tolerance) {
  warp.check();
  WarpField out(warp.height, warp.width);
  for (int y = 0; y < warp.height; ++y) {
    for (int x = 0; x < warp.width; ++x) {
      Point2 src;
      const bool ok = invert_point(warp, {pixel_to_norm(x, warp.width), pixel_to_norm(y, warp.height)},
                                   max_iterations, tolerance, src);
      const size_t i = static_cast<size_t>(y) * warp.width + x;
      out.set(i, src);
      out.valid[i] = ok ? 1 : 0;
    }
  }
  return out;
}

Image jitter_channels(const Image& image, double amount, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> gain(1.0 - amount, 1.0 + amount);
  const double g[3] = {gain(rng), gain(rng), gain(rng)};
  Image out = image;
  for (size_t i = 0; i < out.data.size(); ++i) {
    out.data[i] = static_cast<float>(std::clamp(out.data[i] * g[i % 3], 0.0, 1.0));
  }
  return out;
}

namespace {

constexpr char kWarpMagic[4] = {'D', 'V', 'W', 'F'};
constexpr std::uint32_t kWarpVersion = 1;

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("truncated warp field record");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_floats(std::ostream& out, const std::vector<float>& v) {
  for (float f : v) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
}

void get_floats(std::istream& in, std::vector<float>& v) {
  for (float& f : v) {
    const std::uint32_t bits = get_u32(in);
    std::memcpy(&f, &bits, 4);
  }
}

}  // namespace

void write_warp_field(std::ostream& out, const WarpField& warp) {
  warp.check();
  out.write(kWarpMagic, 4);
  put_u32(out, kWarpVersion);
  put_u32(out, static_cast<std::uint32_t>(warp.height));
  put_u32(out, static_cast<std::uint32_t>(warp.width));
  put_floats(out, warp.xs);
  put_floats(out, warp.ys);
  out.write(reinterpret_cast<const char*>(warp.valid.data()), static_cast<std::streamsize>(warp.valid.size()));
}

WarpField read_warp_field(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kWarpMagic, 4) != 0) {
    throw DataError("not a warp field record");
  }
  if (get_u32(in) != kWarpVersion) throw DataError("unsupported warp field version");
  const auto h = static_cast<int>(get_u32(in));
  const auto w = static_cast<int>(get_u32(in));
  if (h <= 0 || w <= 0 || h > 1 << 15 || w > 1 << 15) throw DataError("bad warp field dimensions");
  WarpField f(h, w);
  get_floats(in, f.xs);
  get_floats(in, f.ys);
  if (!in.read(reinterpret_cast<char*>(f.valid.data()), static_cast<std::streamsize>(f.valid.size()))) {
    throw DataError("truncated warp field record");
  }
  return f;
}

void save_warp_field(const WarpField& warp, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  write_warp_field(out, warp);
}

WarpField load_warp_field(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  return read_warp_field(in);
}

}  // namespace dve
