#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dve/image.hpp"
#include "dve/warpgen.hpp"

namespace dve {

enum class Split { train, val, test };
Split parse_split(const std::string& name);
std::string split_name(Split split);

/// A keypoint in normalized coordinates of the preprocessed image.
struct Landmark {
  Point2 p;
  bool visible = true;
};
using LandmarkSet = std::vector<Landmark>;

struct Sample {
  std::string id;
  Image image;
  LandmarkSet landmarks;
  int identity = -1;
  Split split = Split::train;
};

/// Read-only indexed collection of preprocessed, square images.
class Dataset {
 public:
  virtual ~Dataset() = default;

  virtual std::string name() const = 0;
  virtual size_t size() const = 0;
  virtual Sample get(size_t index) const = 0;
  virtual std::string item_id(size_t index) const = 0;
  virtual int identity(size_t index) const = 0;
  virtual int image_size() const = 0;
  virtual int num_landmarks() const = 0;
  virtual bool has_landmarks() const { return num_landmarks() > 0; }

  // Optional dense ground truth between two items (synthetic data only).
  virtual bool has_flow() const { return false; }
  /// Items that `flow(index, partner)` is defined for, excluding `index`.
  virtual std::vector<size_t> flow_partners(size_t index) const;
  /// Correspondence field from item `from` to item `to` on the image grid.
  virtual WarpField flow(size_t from, size_t to) const;
  /// Per-pixel foreground flags (pixels that can move), if known.
  virtual std::optional<std::vector<std::uint8_t>> foreground(size_t index) const;
};

/// Axis-aligned affine map between pixel frames: p' = (sx * x + tx, sy * y + ty).
struct PixelAffine {
  double sx = 1.0, sy = 1.0, tx = 0.0, ty = 0.0;

  Point2 apply(Point2 p) const { return {sx * p.x + tx, sy * p.y + ty}; }
  Point2 invert(Point2 p) const { return {(p.x - tx) / sx, (p.y - ty) / sy}; }
  /// This map followed by `next`.
  PixelAffine then(const PixelAffine& next) const;
};

/// Pixel-center resize from in_h x in_w to out_h x out_w.
PixelAffine resize_affine(double in_h, double in_w, double out_h, double out_w);
/// Crop whose top-left corner sits at (left, top) of the input.
PixelAffine crop_affine(double top, double left);

// --- Face benchmarks ---------------------------------------------------------

enum class FaceSource { celeba, mafl, aflw_m, aflw_r, w300 };
FaceSource parse_face_source(const std::string& name);
std::string face_source_name(FaceSource source);

int landmark_count(FaceSource source);
/// Published split sizes, 0 when not fixed.
size_t expected_split_size(FaceSource source, Split split);
/// Intermediate resize before the center crop (100 for 70, 136 for 96).
int resize_size_for(int input_size);

/// Original image pixels -> preprocessed pixels for one image. `landmarks_px`
/// is only used by 300-W, whose crop is derived from the annotation extent.
PixelAffine face_preprocess_affine(FaceSource source, int orig_h, int orig_w, int input_size,
                                   const std::vector<Point2>& landmarks_px);

struct FaceRecord {
  std::string id;  // file name without directories or extension
  std::filesystem::path path;
  std::vector<Point2> landmarks_px;  // original frame; negative = missing
  int identity = -1;
};

struct FaceLoadOptions {
  /// Require the published split size (MAFL 19000/1000 etc.).
  bool enforce_split_size = false;
};

class FaceDataset final : public Dataset {
 public:
  FaceDataset(FaceSource source, Split split, int input_size, std::vector<FaceRecord> records);

  std::string name() const override { return face_source_name(source_); }
  size_t size() const override { return records_.size(); }
  Sample get(size_t index) const override;
  std::string item_id(size_t index) const override { return records_.at(index).id; }
  int identity(size_t index) const override { return records_.at(index).identity; }
  int image_size() const override { return input_size_; }
  int num_landmarks() const override { return landmark_count(source_); }

  FaceSource source() const { return source_; }
  Split split() const { return split_; }
  const std::vector<FaceRecord>& records() const { return records_; }

  /// Affine from the original frame of item `index` to the preprocessed frame.
  PixelAffine preprocess_affine(size_t index, int orig_h, int orig_w) const;

 private:
  FaceSource source_;
  Split split_;
  int input_size_;
  std::vector<FaceRecord> records_;
};

/// Layout: <root>/<name>/images/... and <root>/<name>/annotations/<split>.csv
/// with rows "path,x1,y1,...,xK,yK" (pixel coordinates, original frame).
/// An optional annotations/identities.csv holds "path,identity" rows.
FaceDataset load_face_dataset(FaceSource source, const std::filesystem::path& root, Split split, int input_size,
                              const FaceLoadOptions& options = {});

struct OverlapResult {
  FaceDataset dataset;
  size_t removed = 0;
};

/// Drops every training item whose identifier also appears in `test`.
OverlapResult exclude_overlap(const FaceDataset& train, const Dataset& test);

/// Pixel coordinates -> normalized landmarks of an input_size image; points
/// that are missing or fall outside the frame are flagged invisible.
LandmarkSet to_landmarks(const std::vector<Point2>& pixels, int input_size);

/// Keeps only the listed items (in the given order).
class SubsetDataset final : public Dataset {
 public:
  SubsetDataset(const Dataset& base, std::vector<size_t> indices);

  std::string name() const override { return base_.name(); }
  size_t size() const override { return indices_.size(); }
  Sample get(size_t index) const override { return base_.get(indices_.at(index)); }
  std::string item_id(size_t index) const override { return base_.item_id(indices_.at(index)); }
  int identity(size_t index) const override { return base_.identity(indices_.at(index)); }
  int image_size() const override { return base_.image_size(); }
  int num_landmarks() const override { return base_.num_landmarks(); }
  std::optional<std::vector<std::uint8_t>> foreground(size_t index) const override {
    return base_.foreground(indices_.at(index));
  }

 private:
  const Dataset& base_;
  std::vector<size_t> indices_;
};

}  // namespace dve
