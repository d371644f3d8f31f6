#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <random>
#include <span>
#include <vector>

#include "dve/image.hpp"

namespace dve {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// Dense correspondence g: every pixel u of a source grid is sent to g(u) in
/// the target domain. Coordinates are normalized; valid[u] is false whenever
/// g(u) leaves [-1,1]^2 (or the pixel was masked by whoever built the field).
struct WarpField {
  int height = 0;
  int width = 0;
  std::vector<float> xs;
  std::vector<float> ys;
  std::vector<std::uint8_t> valid;

  WarpField() = default;
  WarpField(int h, int w);

  static WarpField identity(int h, int w);

  size_t size() const { return static_cast<size_t>(height) * width; }
  Point2 at(size_t index) const { return {xs[index], ys[index]}; }
  void set(size_t index, Point2 p);

  /// Recomputes the mask from coordinates alone (in-domain test).
  void refresh_mask();

  /// Throws ShapeError if the buffers disagree with the declared dimensions.
  void check() const;
};

/// Parameters of the random warp distribution. Translation and control point
/// displacements are expressed in normalized units (half the image extent).
struct WarpConfig {
  int control_rows = 3;
  int control_cols = 3;
  double max_control_displacement = 0.1;
  double rotation_range = 0.2;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double translation_range = 0.1;
  bool compose_similarity = true;

  void validate() const;

  static WarpConfig none();
};

/// One concrete draw from the warp distribution.
struct WarpParams {
  double rotation = 0.0;
  double scale = 1.0;
  Point2 translation;
  int control_rows = 2;
  int control_cols = 2;
  std::vector<Point2> displacements;  // row-major over the control grid
};

/// Bookstein thin-plate spline R^2 -> R^2 interpolating sources -> targets.
class ThinPlateSpline {
 public:
  ThinPlateSpline(std::vector<Point2> sources, const std::vector<Point2>& targets);

  Point2 operator()(Point2 p) const;

  static double kernel(double r2);

 private:
  std::vector<Point2> sources_;
  std::vector<Point2> weights_;  // one 2-vector per source
  double affine_[3][2] = {};     // rows: constant, x, y
};

std::vector<Point2> control_grid_points(int rows, int cols);

WarpParams sample_warp_params(const WarpConfig& cfg, std::mt19937_64& rng);
WarpField make_warp(const WarpParams& params, int height, int width);
WarpField sample_warp(const WarpConfig& cfg, int height, int width, std::mt19937_64& rng);

/// (gx)_v = x_{g^-1 v}; g^-1 is obtained by fixed-point inversion of the field.
Image apply_warp(const Image& image, const WarpField& warp, float fill = 0.0f);

struct WarpedPoint {
  Point2 coord;
  bool valid = false;
};

/// Bilinear lookup of g at arbitrary normalized points.
std::vector<WarpedPoint> warp_points(const WarpField& warp, std::span<const Point2> points);
WarpedPoint warp_point(const WarpField& warp, Point2 point);

/// Samples the field at the cell centers of a grid `factor` times coarser.
WarpField downsample_warp(const WarpField& warp, int factor);

/// Numerical inverse: result.at(v) = g^-1(v), invalid where no preimage lies
/// inside the source domain or the iteration fails to converge.
WarpField invert_warp(const WarpField& warp, int max_iterations = 60, double tolerance = 1e-7);

/// Optional photometric hook: independent gain per channel in [1-a, 1+a].
Image jitter_channels(const Image& image, double amount, std::mt19937_64& rng);

// Flat binary record: "DVWF", u32 version, u32 height, u32 width, then
// float32 x plane, float32 y plane, uint8 mask plane (little-endian).
void write_warp_field(std::ostream& out, const WarpField& warp);
WarpField read_warp_field(std::istream& in);
void save_warp_field(const WarpField& warp, const std::filesystem::path& path);
WarpField load_warp_field(const std::filesystem::path& path);

}  // namespace dve
