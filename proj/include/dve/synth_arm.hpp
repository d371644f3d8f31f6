#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "dve/datasets.hpp"

namespace dve {

using Rgb = std::array<float, 3>;

/// One rendered configuration of a planar articulated arm. Angles are
/// relative per joint (the first one is absolute), in radians; zero points up.
struct ArmSceneSpec {
  int num_segments = 3;
  std::vector<double> segment_lengths;  // pixels
  std::vector<double> segment_radii;    // pixels
  std::vector<Rgb> segment_colors;
  std::vector<Rgb> joint_colors;
  std::vector<double> joint_angles;
  Rgb background{0.2f, 0.2f, 0.2f};
  std::uint64_t texture_seed = 0;
  int image_size = 64;
  int instance_id = 0;

  void validate() const;
};

/// Rigid pose of each segment: proximal joint position and absolute angle.
struct SegmentPose {
  Point2 origin;  // pixels
  double angle = 0.0;
};
std::vector<SegmentPose> arm_poses(const ArmSceneSpec& spec);
Point2 arm_base(int image_size);

struct ArmRender {
  Image image;
  std::vector<std::int8_t> owner;   // segment index per pixel, -1 for background
  std::vector<Point2> keypoints_px; // segment centers
};

/// Later segments draw over earlier ones; each segment carries the joint blob
/// at its proximal end. Colors are quantized to 8 bits.
ArmRender render_arm(const ArmSceneSpec& spec);

/// Moves a pixel-space point rigidly attached to `segment` from pose a to pose b.
Point2 arm_move_point(const ArmSceneSpec& a, const ArmSceneSpec& b, int segment, Point2 p);

/// Analytic correspondence from frame a to frame b (same instance) on the
/// image grid. Background pixels keep zero flow and are masked; arm pixels are
/// masked where their destination is covered by a different segment.
WarpField arm_flow(const ArmSceneSpec& a, const ArmRender& render_a, const ArmSceneSpec& b,
                   const ArmRender& render_b);

struct ArmFrame {
  std::string id;
  ArmSceneSpec spec;
  int frame = 0;
  ArmRender render;
};

class SynthArmDataset final : public Dataset {
 public:
  /// Flow partners of a frame are the frames of its instance at most
  /// `partner_window` steps away (0: every other frame of the instance).
  SynthArmDataset(std::vector<ArmFrame> frames, std::uint64_t seed, int partner_window = 0);

  std::string name() const override { return "synth_arm"; }
  size_t size() const override { return frames_.size(); }
  Sample get(size_t index) const override;
  std::string item_id(size_t index) const override { return frames_.at(index).id; }
  int identity(size_t index) const override { return frames_.at(index).spec.instance_id; }
  int image_size() const override { return frames_.empty() ? 0 : frames_.front().spec.image_size; }
  int num_landmarks() const override { return frames_.empty() ? 0 : frames_.front().spec.num_segments; }

  bool has_flow() const override { return true; }
  std::vector<size_t> flow_partners(size_t index) const override;
  WarpField flow(size_t from, size_t to) const override;
  std::optional<std::vector<std::uint8_t>> foreground(size_t index) const override;

  const ArmFrame& frame(size_t index) const { return frames_.at(index); }
  std::uint64_t seed() const { return seed_; }
  int partner_window() const { return partner_window_; }

 private:
  std::vector<ArmFrame> frames_;
  std::vector<std::vector<size_t>> by_instance_;
  std::uint64_t seed_;
  int partner_window_ = 0;
};

struct ArmGeneratorOptions {
  double joint_range = 1.2;  // relative joint angles in [-r, r]
  double base_range = 0.9;   // absolute base angle in [-r, r]
  /// Per-instance hue offset around a shared per-segment palette; 0.5 or
  /// more gives unrelated colors per instance.
  double hue_jitter = 0.08;
  /// Std of the per-frame joint-angle step of the animation (radians);
  /// 0 draws every frame's pose independently.
  double pose_step = 0.15;
  int partner_window = 2;

  void validate() const;
};

SynthArmDataset synth_arm_generate(int n_instances, int frames_per_instance, int image_size, std::uint64_t seed,
                                   const ArmGeneratorOptions& options = {});

/// images/<id>.png, flows/<id>.dvwf (to the next frame of the same
/// instance) and manifest.json.
void save_synth_arm(const SynthArmDataset& dataset, const std::filesystem::path& dir);
SynthArmDataset load_synth_arm(const std::filesystem::path& dir);

}  // namespace dve
