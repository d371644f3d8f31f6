#include "dve/synth_arm.hpp"

#include <opencv2/core.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "dve/errors.hpp"

namespace dve {

namespace {

constexpr double kPi = 3.14159265358979323846;

Point2 rotate(Point2 p, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {p.x * c - p.y * s, p.x * s + p.y * c};
}

Point2 direction(double angle) { return {std::sin(angle), -std::cos(angle)}; }

// 8-bit levels decoded the same way load_image decodes a PNG, so a reloaded
// frame is bit-identical to the rendered one.
float quantize(double v) {
  static const std::array<float, 256> levels = [] {
    cv::Mat codes(1, 256, CV_8U), decoded;
    for (int i = 0; i < 256; ++i) codes.at<std::uint8_t>(0, i) = static_cast<std::uint8_t>(i);
    codes.convertTo(decoded, CV_32F, 1.0 / 255.0);
    std::array<float, 256> out{};
    for (int i = 0; i < 256; ++i) out[i] = decoded.at<float>(0, i);
    return out;
  }();
  return levels[static_cast<size_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))];
}

Rgb hsv_color(double h, double s, double v) {
  const double c = v * s;
  const double hp = std::fmod(h, 1.0) * 6.0;
  const double x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  const double m = v - c;
  return {static_cast<float>(r + m), static_cast<float>(g + m), static_cast<float>(b + m)};
}

std::string frame_id(int instance, int frame) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "arm_%04d_%03d", instance, frame);
  return buf;
}

}  // namespace

void ArmSceneSpec::validate() const {
  const auto n = static_cast<size_t>(num_segments);
  if (num_segments < 1 || segment_lengths.size() != n || segment_radii.size() != n || segment_colors.size() != n ||
      joint_colors.size() != n || joint_angles.size() != n) {
    throw ConfigError("arm spec arrays must have one entry per segment");
  }
  for (size_t k = 0; k < n; ++k) {
    if (!(segment_lengths[k] > 0) || !(segment_radii[k] > 0)) throw ConfigError("arm segment sizes must be > 0");
    if (!std::isfinite(joint_angles[k])) throw ConfigError("arm joint angles must be finite");
    for (float c : segment_colors[k]) {
      if (!(c >= 0.0f && c <= 1.0f)) throw ConfigError("arm colors must lie in [0,1]");
    }
  }
  if (image_size < 8) throw ConfigError("arm image size must be >= 8");
}

Point2 arm_base(int image_size) { return {0.5 * (image_size - 1), 0.85 * (image_size - 1)}; }

std::vector<SegmentPose> arm_poses(const ArmSceneSpec& spec) {
  std::vector<SegmentPose> poses;
  Point2 origin = arm_base(spec.image_size);
  double angle = 0.0;
  for (int k = 0; k < spec.num_segments; ++k) {
    angle += spec.joint_angles[k];
    poses.push_back({origin, angle});
    const Point2 d = direction(angle);
    origin = {origin.x + spec.segment_lengths[k] * d.x, origin.y + spec.segment_lengths[k] * d.y};
  }
  return poses;
}

ArmRender render_arm(const ArmSceneSpec& spec) {
  spec.validate();
  const int s = spec.image_size;
  const auto poses = arm_poses(spec);

  // Static background texture: product of two seeded sinusoids.
  std::mt19937_64 tex(spec.texture_seed);
  std::uniform_real_distribution<double> phase(0.0, 2 * kPi), freq(0.15, 0.45);
  const double fx = freq(tex), fy = freq(tex), px = phase(tex), py = phase(tex);

  ArmRender out;
  out.image = Image(s, s);
  out.owner.assign(static_cast<size_t>(s) * s, -1);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double shade = 1.0 + 0.25 * std::sin(fx * x + px) * std::sin(fy * y + py);
      double rgb[3] = {spec.background[0] * shade, spec.background[1] * shade, spec.background[2] * shade};
      int owner = -1;
      for (int k = 0; k < spec.num_segments; ++k) {
        const Point2 d = direction(poses[k].angle);
        const double rx = x - poses[k].origin.x, ry = y - poses[k].origin.y;
        const double len = spec.segment_lengths[k], r = spec.segment_radii[k];
        const double along = rx * d.x + ry * d.y;
        const double across = -rx * d.y + ry * d.x;
        const double t = std::clamp(along, 0.0, len);
        const double dist2 = (along - t) * (along - t) + across * across;
        if (dist2 <= r * r) {
          owner = k;
          const double g = (0.55 + 0.45 * t / len) * (1.0 - 0.3 * (across * across) / (r * r));
          for (int c = 0; c < 3; ++c) rgb[c] = spec.segment_colors[k][c] * g;
        }
        const double blob = 1.35 * r;
        const double b2 = rx * rx + ry * ry;
        if (b2 <= blob * blob) {
          owner = k;
          const double g = 1.0 - 0.4 * b2 / (blob * blob);
          for (int c = 0; c < 3; ++c) rgb[c] = spec.joint_colors[k][c] * g;
        }
      }
      for (int c = 0; c < 3; ++c) out.image.at(y, x, c) = quantize(rgb[c]);
      out.owner[static_cast<size_t>(y) * s + x] = static_cast<std::int8_t>(owner);
    }
  }
  for (int k = 0; k < spec.num_segments; ++k) {
    const Point2 d = direction(poses[k].angle);
    const double h = 0.5 * spec.segment_lengths[k];
    out.keypoints_px.push_back({poses[k].origin.x + h * d.x, poses[k].origin.y + h * d.y});
  }
  return out;
}

Point2 arm_move_point(const ArmSceneSpec& a, const ArmSceneSpec& b, int segment, Point2 p) {
  const SegmentPose pa = arm_poses(a).at(segment), pb = arm_poses(b).at(segment);
  const Point2 local = rotate({p.x - pa.origin.x, p.y - pa.origin.y}, -pa.angle);
  const Point2 moved = rotate(local, pb.angle);
  return {pb.origin.x + moved.x, pb.origin.y + moved.y};
}

WarpField arm_flow(const ArmSceneSpec& a, const ArmRender& render_a, const ArmSceneSpec& b,
                   const ArmRender& render_b) {
  if (a.image_size != b.image_size || a.instance_id != b.instance_id) {
    throw DataError("arm flow is only defined between frames of one instance");
  }
  const int s = a.image_size;
  const auto pa = arm_poses(a), pb = arm_poses(b);
  WarpField f = WarpField::identity(s, s);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const size_t i = static_cast<size_t>(y) * s + x;
      const int k = render_a.owner[i];
      if (k < 0) {
        f.valid[i] = 0;
        continue;
      }
      const Point2 local = rotate({x - pa[k].origin.x, y - pa[k].origin.y}, -pa[k].angle);
      const Point2 moved = rotate(local, pb[k].angle);
      const Point2 q{pb[k].origin.x + moved.x, pb[k].origin.y + moved.y};
      f.set(i, {pixel_to_norm(q.x, s), pixel_to_norm(q.y, s)});
      const long qx = std::lround(q.x), qy = std::lround(q.y);
      const bool inside = qx >= 0 && qy >= 0 && qx < s && qy < s;
      f.valid[i] = inside && render_b.owner[static_cast<size_t>(qy) * s + qx] == k;
    }
  }
  return f;
}

SynthArmDataset::SynthArmDataset(std::vector<ArmFrame> frames, std::uint64_t seed, int partner_window)
    : frames_(std::move(frames)), seed_(seed), partner_window_(partner_window) {
  if (partner_window < 0) throw ConfigError("arm partner window must be >= 0");
  for (size_t i = 0; i < frames_.size(); ++i) {
    const int inst = frames_[i].spec.instance_id;
    if (inst < 0) throw DataError("negative arm instance id");
    if (static_cast<size_t>(inst) >= by_instance_.size()) by_instance_.resize(inst + 1);
    by_instance_[inst].push_back(i);
  }
}

Sample SynthArmDataset::get(size_t index) const {
  const ArmFrame& f = frames_.at(index);
  Sample s;
  s.id = f.id;
  s.image = f.render.image;
  s.landmarks = to_landmarks(f.render.keypoints_px, f.spec.image_size);
  s.identity = f.spec.instance_id;
  return s;
}

std::vector<size_t> SynthArmDataset::flow_partners(size_t index) const {
  std::vector<size_t> out;
  const int frame = frames_.at(index).frame;
  for (size_t j : by_instance_.at(frames_.at(index).spec.instance_id)) {
    if (j == index) continue;
    if (partner_window_ > 0 && std::abs(frames_[j].frame - frame) > partner_window_) continue;
    out.push_back(j);
  }
  return out;
}

WarpField SynthArmDataset::flow(size_t from, size_t to) const {
  const ArmFrame& a = frames_.at(from);
  const ArmFrame& b = frames_.at(to);
  return arm_flow(a.spec, a.render, b.spec, b.render);
}

std::optional<std::vector<std::uint8_t>> SynthArmDataset::foreground(size_t index) const {
  const auto& owner = frames_.at(index).render.owner;
  std::vector<std::uint8_t> mask(owner.size());
  for (size_t i = 0; i < owner.size(); ++i) mask[i] = owner[i] >= 0;
  return mask;
}

void ArmGeneratorOptions::validate() const {
  if (!(joint_range >= 0) || !(base_range >= 0)) throw ConfigError("arm angle ranges must be >= 0");
  if (!(hue_jitter >= 0)) throw ConfigError("arm hue jitter must be >= 0");
  if (!(pose_step >= 0)) throw ConfigError("arm pose step must be >= 0");
  if (partner_window < 0) throw ConfigError("arm partner window must be >= 0");
}

namespace {

// Shared category palette: segment and joint hues per segment index.
constexpr std::array<double, 3> kSegmentHues{0.02, 0.33, 0.62};
constexpr std::array<double, 3> kJointHues{0.15, 0.48, 0.80};

bool inside_frame(const ArmSceneSpec& spec) {
  const double s = spec.image_size;
  const auto poses = arm_poses(spec);
  for (int k = 0; k < spec.num_segments; ++k) {
    const Point2 d = direction(poses[k].angle);
    const Point2 tip{poses[k].origin.x + spec.segment_lengths[k] * d.x,
                     poses[k].origin.y + spec.segment_lengths[k] * d.y};
    const double m = 1.35 * spec.segment_radii[k];
    for (const Point2& p : {poses[k].origin, tip}) {
      if (p.x < m || p.y < m || p.x > s - 1 - m || p.y > s - 1 - m) return false;
    }
  }
  return true;
}

// Reflects an angle back into [-r, r].
double reflect(double a, double r) {
  if (r <= 0) return 0.0;
  while (a > r || a < -r) a = a > r ? 2 * r - a : -2 * r - a;
  return a;
}

}  // namespace

SynthArmDataset synth_arm_generate(int n_instances, int frames_per_instance, int image_size, std::uint64_t seed,
                                   const ArmGeneratorOptions& options) {
  if (n_instances < 1) throw ConfigError("need at least one arm instance");
  if (frames_per_instance < 1) throw ConfigError("need at least one frame per instance");
  options.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto between = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  const auto hue = [&](double base) { return base + options.hue_jitter * (2 * unit(rng) - 1) + 1.0; };
  const double s = image_size;
  const std::array<double, 3> ranges{options.base_range, options.joint_range, options.joint_range};

  std::vector<ArmFrame> frames;
  for (int inst = 0; inst < n_instances; ++inst) {
    ArmSceneSpec base;
    base.image_size = image_size;
    base.instance_id = inst;
    base.segment_lengths = {s * between(0.2, 0.27), s * between(0.16, 0.22), s * between(0.11, 0.16)};
    for (int k = 0; k < 3; ++k) {
      base.segment_radii.push_back(s * between(0.035, 0.05));
      base.segment_colors.push_back(hsv_color(hue(kSegmentHues[k]), between(0.55, 0.95), between(0.65, 1.0)));
      base.joint_colors.push_back(hsv_color(hue(kJointHues[k]), between(0.4, 0.9), between(0.6, 1.0)));
    }
    const double gray = between(0.1, 0.35);
    base.background = {static_cast<float>(gray * between(0.85, 1.15)), static_cast<float>(gray),
                       static_cast<float>(gray * between(0.85, 1.15))};
    base.texture_seed = rng();

    ArmSceneSpec spec = base;
    const auto fresh_pose = [&] {
      // Rejection-sample poses that keep every segment inside the frame.
      for (int attempt = 0; attempt < 200; ++attempt) {
        spec.joint_angles = {between(-ranges[0], ranges[0]), between(-ranges[1], ranges[1]),
                             between(-ranges[2], ranges[2])};
        if (inside_frame(spec)) return;
      }
      spec.joint_angles = {0.0, 0.0, 0.0};
    };
    for (int fr = 0; fr < frames_per_instance; ++fr) {
      if (fr == 0 || options.pose_step == 0) {
        fresh_pose();
      } else {
        // One animation step; keep the previous pose if no step stays in frame.
        const std::vector<double> previous = spec.joint_angles;
        bool moved = false;
        for (int attempt = 0; attempt < 50 && !moved; ++attempt) {
          for (int k = 0; k < 3; ++k) {
            spec.joint_angles[k] = reflect(previous[k] + options.pose_step * normal(rng), ranges[k]);
          }
          moved = inside_frame(spec);
        }
        if (!moved) spec.joint_angles = previous;
      }
      frames.push_back({frame_id(inst, fr), spec, fr, render_arm(spec)});
    }
  }
  return SynthArmDataset(std::move(frames), seed, options.partner_window);
}

namespace {

nlohmann::json rgb_json(const Rgb& c) { return nlohmann::json::array({c[0], c[1], c[2]}); }

Rgb rgb_from(const nlohmann::json& j) { return {j.at(0).get<float>(), j.at(1).get<float>(), j.at(2).get<float>()}; }

}  // namespace

void save_synth_arm(const SynthArmDataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "flows");
  nlohmann::json frames = nlohmann::json::array();
  for (size_t i = 0; i < dataset.size(); ++i) {
    const ArmFrame& f = dataset.frame(i);
    const auto image_rel = std::filesystem::path("images") / (f.id + ".png");
    save_image(f.render.image, dir / image_rel);
    nlohmann::json entry = {{"id", f.id},
                            {"instance", f.spec.instance_id},
                            {"frame", f.frame},
                            {"image", image_rel.generic_string()},
                            {"joint_angles", f.spec.joint_angles}};
    nlohmann::json kps = nlohmann::json::array();
    for (const Point2& p : f.render.keypoints_px) kps.push_back({p.x, p.y});
    entry["keypoints_px"] = kps;
    // Flow to the next frame of the same instance, if any.
    if (i + 1 < dataset.size() && dataset.frame(i + 1).spec.instance_id == f.spec.instance_id) {
      const auto flow_rel = std::filesystem::path("flows") / (f.id + ".dvwf");
      save_warp_field(dataset.flow(i, i + 1), dir / flow_rel);
      entry["flow_next"] = flow_rel.generic_string();
    }
    nlohmann::json scene = {{"segment_lengths", f.spec.segment_lengths},
                            {"segment_radii", f.spec.segment_radii},
                            {"background", rgb_json(f.spec.background)},
                            {"texture_seed", f.spec.texture_seed}};
    nlohmann::json seg = nlohmann::json::array(), joint = nlohmann::json::array();
    for (int k = 0; k < f.spec.num_segments; ++k) {
      seg.push_back(rgb_json(f.spec.segment_colors[k]));
      joint.push_back(rgb_json(f.spec.joint_colors[k]));
    }
    scene["segment_colors"] = seg;
    scene["joint_colors"] = joint;
    entry["scene"] = scene;
    frames.push_back(entry);
  }
  const nlohmann::json manifest = {{"format", "synth_arm/1"},
                                   {"seed", dataset.seed()},
                                   {"partner_window", dataset.partner_window()},
                                   {"image_size", dataset.image_size()},
                                   {"num_segments", dataset.num_landmarks()},
                                   {"keypoints", "segment centers, pixel coordinates"},
                                   {"frames", frames}};
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(1) << "\n";
  if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
}

SynthArmDataset load_synth_arm(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw DataError("missing synthetic dataset manifest: " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
    const int size = manifest.at("image_size").get<int>();
    std::vector<ArmFrame> frames;
    std::vector<std::string> missing;
    for (const auto& e : manifest.at("frames")) {
      ArmFrame f;
      f.id = e.at("id").get<std::string>();
      f.frame = e.at("frame").get<int>();
      const auto& scene = e.at("scene");
      f.spec.image_size = size;
      f.spec.instance_id = e.at("instance").get<int>();
      f.spec.num_segments = manifest.at("num_segments").get<int>();
      f.spec.segment_lengths = scene.at("segment_lengths").get<std::vector<double>>();
      f.spec.segment_radii = scene.at("segment_radii").get<std::vector<double>>();
      f.spec.background = rgb_from(scene.at("background"));
      f.spec.texture_seed = scene.at("texture_seed").get<std::uint64_t>();
      for (const auto& c : scene.at("segment_colors")) f.spec.segment_colors.push_back(rgb_from(c));
      for (const auto& c : scene.at("joint_colors")) f.spec.joint_colors.push_back(rgb_from(c));
      f.spec.joint_angles = e.at("joint_angles").get<std::vector<double>>();
      f.render = render_arm(f.spec);
      const auto image_path = dir / e.at("image").get<std::string>();
      if (!std::filesystem::exists(image_path)) {
        missing.push_back(image_path.string());
        continue;
      }
      f.render.image = load_image(image_path);
      if (f.render.image.height != size || f.render.image.width != size) {
        throw DataError("unexpected image size in " + image_path.string());
      }
      frames.push_back(std::move(f));
    }
    if (!missing.empty()) {
      std::string msg = std::to_string(missing.size()) + " synthetic image(s) missing:";
      for (size_t i = 0; i < std::min<size_t>(missing.size(), 20); ++i) msg += "\n  " + missing[i];
      throw DataError(msg);
    }
    return SynthArmDataset(std::move(frames), manifest.at("seed").get<std::uint64_t>(),
                           manifest.value("partner_window", 0));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed synthetic manifest " + manifest_path.string() + ": " + e.what());
  }
}

}  // namespace dve
