#include "dve/datasets.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>

#include <boost/tokenizer.hpp>

#include "dve/errors.hpp"

namespace dve {

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split: " + name);
}

std::string split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

std::vector<size_t> Dataset::flow_partners(size_t) const { return {}; }

WarpField Dataset::flow(size_t, size_t) const { throw DataError(name() + " has no ground-truth flow"); }

std::optional<std::vector<std::uint8_t>> Dataset::foreground(size_t) const { return std::nullopt; }

PixelAffine PixelAffine::then(const PixelAffine& next) const {
  return {next.sx * sx, next.sy * sy, next.sx * tx + next.tx, next.sy * ty + next.ty};
}

PixelAffine resize_affine(double in_h, double in_w, double out_h, double out_w) {
  const double sx = out_w / in_w, sy = out_h / in_h;
  return {sx, sy, 0.5 * sx - 0.5, 0.5 * sy - 0.5};
}

PixelAffine crop_affine(double top, double left) { return {1.0, 1.0, -left, -top}; }

FaceSource parse_face_source(const std::string& name) {
  if (name == "celeba") return FaceSource::celeba;
  if (name == "mafl") return FaceSource::mafl;
  if (name == "aflw_m") return FaceSource::aflw_m;
  if (name == "aflw_r") return FaceSource::aflw_r;
  if (name == "w300" || name == "300w") return FaceSource::w300;
  throw ConfigError("unknown face dataset: " + name);
}

std::string face_source_name(FaceSource source) {
  switch (source) {
    case FaceSource::celeba: return "celeba";
    case FaceSource::mafl: return "mafl";
    case FaceSource::aflw_m: return "aflw_m";
    case FaceSource::aflw_r: return "aflw_r";
    case FaceSource::w300: return "w300";
  }
  return "unknown";
}

int landmark_count(FaceSource source) { return source == FaceSource::w300 ? 68 : 5; }

size_t expected_split_size(FaceSource source, Split split) {
  const bool train = split == Split::train, test = split == Split::test;
  switch (source) {
    case FaceSource::mafl: return train ? 19000 : test ? 1000 : 0;
    case FaceSource::aflw_m: return train ? 10122 : test ? 2995 : 0;
    case FaceSource::w300: return train ? 3148 : test ? 689 : 0;
    default: return 0;
  }
}

int resize_size_for(int input_size) {
  if (input_size == 96) return 136;
  return static_cast<int>(std::lround(input_size * 100.0 / 70.0));
}

PixelAffine face_preprocess_affine(FaceSource source, int orig_h, int orig_w, int input_size,
                                   const std::vector<Point2>& landmarks_px) {
  const int resized = resize_size_for(input_size);
  const double margin = (resized - input_size) / 2.0;
  switch (source) {
    case FaceSource::celeba:
    case FaceSource::mafl: {
      // Drop the top 30 and bottom 10 rows, then resize and center-crop.
      const int kept = orig_h - 40;
      if (kept <= 0) throw DataError("face image too short for the CelebA crop");
      return crop_affine(30, 0)
          .then(resize_affine(kept, orig_w, resized, resized))
          .then(crop_affine(margin, margin));
    }
    case FaceSource::aflw_m:
    case FaceSource::aflw_r:
      return resize_affine(orig_h, orig_w, resized, resized).then(crop_affine(margin, margin));
    case FaceSource::w300: {
      double x0 = std::numeric_limits<double>::infinity(), y0 = x0, x1 = -x0, y1 = -x0;
      for (const Point2& p : landmarks_px) {
        if (!std::isfinite(p.x) || !std::isfinite(p.y)) continue;
        x0 = std::min(x0, p.x);
        x1 = std::max(x1, p.x);
        y0 = std::min(y0, p.y);
        y1 = std::max(y1, p.y);
      }
      if (!(x1 > x0) || !(y1 > y0)) throw DataError("300-W image without a usable landmark box");
      // Square box, then context so the face width fills the central 52%.
      const double side = std::max(x1 - x0, y1 - y0) / 0.52;
      const double cx = 0.5 * (x0 + x1), cy = 0.5 * (y0 + y1);
      const double s = input_size / side;
      return {s, s, -(cx - side / 2) * s - 0.5, -(cy - side / 2) * s - 0.5};
    }
  }
  throw ConfigError("unknown face dataset");
}

LandmarkSet to_landmarks(const std::vector<Point2>& pixels, int input_size) {
  LandmarkSet out;
  out.reserve(pixels.size());
  for (const Point2& p : pixels) {
    Landmark l;
    l.p = {pixel_to_norm(p.x, input_size), pixel_to_norm(p.y, input_size)};
    l.visible = std::isfinite(p.x) && std::isfinite(p.y) && std::abs(l.p.x) <= 1.0 && std::abs(l.p.y) <= 1.0;
    out.push_back(l);
  }
  return out;
}

FaceDataset::FaceDataset(FaceSource source, Split split, int input_size, std::vector<FaceRecord> records)
    : source_(source), split_(split), input_size_(input_size), records_(std::move(records)) {
  if (input_size_ < 2) throw ConfigError("input size must be >= 2");
}

PixelAffine FaceDataset::preprocess_affine(size_t index, int orig_h, int orig_w) const {
  return face_preprocess_affine(source_, orig_h, orig_w, input_size_, records_.at(index).landmarks_px);
}

Sample FaceDataset::get(size_t index) const {
  const FaceRecord& rec = records_.at(index);
  const Image original = load_image(rec.path);
  const PixelAffine m = preprocess_affine(index, original.height, original.width);
  Sample s;
  s.id = rec.id;
  s.image = affine_resample(original, m.sx, m.tx, m.sy, m.ty, input_size_, input_size_);
  std::vector<Point2> mapped;
  mapped.reserve(rec.landmarks_px.size());
  for (const Point2& p : rec.landmarks_px) mapped.push_back(std::isfinite(p.x) ? m.apply(p) : p);
  s.landmarks = to_landmarks(mapped, input_size_);
  s.identity = rec.identity;
  s.split = split_;
  return s;
}

namespace {

using CsvTokenizer = boost::tokenizer<boost::escaped_list_separator<char>>;

std::vector<std::string> csv_fields(const std::string& line) {
  std::string trimmed = line;
  if (!trimmed.empty() && trimmed.back() == '\r') trimmed.pop_back();
  CsvTokenizer tok(trimmed);
  return {tok.begin(), tok.end()};
}

std::string stem_id(const std::string& path) { return std::filesystem::path(path).stem().string(); }

double parse_coordinate(const std::string& field, const std::filesystem::path& file, size_t line_no) {
  if (field.empty()) return std::numeric_limits<double>::quiet_NaN();
  try {
    size_t used = 0;
    const double v = std::stod(field, &used);
    if (used != field.size()) throw std::invalid_argument(field);
    return v < 0 ? std::numeric_limits<double>::quiet_NaN() : v;
  } catch (const std::exception&) {
    throw DataError(file.string() + ":" + std::to_string(line_no) + ": bad coordinate '" + field + "'");
  }
}

std::map<std::string, int> read_identities(const std::filesystem::path& file) {
  std::map<std::string, int> ids;
  std::ifstream in(file);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto f = csv_fields(line);
    if (f.size() < 2 || f[0] == "path") continue;
    try {
      ids[stem_id(f[0])] = std::stoi(f[1]);
    } catch (const std::exception&) {
      throw DataError(file.string() + ":" + std::to_string(line_no) + ": bad identity");
    }
  }
  return ids;
}

}  // namespace

FaceDataset load_face_dataset(FaceSource source, const std::filesystem::path& root, Split split, int input_size,
                              const FaceLoadOptions& options) {
  const auto base = root / face_source_name(source);
  const auto csv = base / "annotations" / (split_name(split) + ".csv");
  if (!std::filesystem::exists(csv)) throw DataError("missing annotation file: " + csv.string());
  std::ifstream in(csv);
  if (!in) throw DataError("cannot read annotation file: " + csv.string());

  const int k = landmark_count(source);
  std::vector<FaceRecord> records;
  std::vector<std::string> missing;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto f = csv_fields(line);
    if (line_no == 1 && !f.empty() && f[0] == "path") continue;
    if (f.size() != static_cast<size_t>(1 + 2 * k)) {
      throw DataError(csv.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(1 + 2 * k) +
                      " columns, got " + std::to_string(f.size()));
    }
    FaceRecord rec;
    rec.id = stem_id(f[0]);
    rec.path = base / "images" / f[0];
    for (int j = 0; j < k; ++j) {
      rec.landmarks_px.push_back(
          {parse_coordinate(f[1 + 2 * j], csv, line_no), parse_coordinate(f[2 + 2 * j], csv, line_no)});
    }
    if (!std::filesystem::exists(rec.path)) missing.push_back(rec.path.string());
    records.push_back(std::move(rec));
  }
  if (!missing.empty()) {
    std::string msg = std::to_string(missing.size()) + " image(s) listed in " + csv.string() + " are missing:";
    for (size_t i = 0; i < std::min<size_t>(missing.size(), 20); ++i) msg += "\n  " + missing[i];
    if (missing.size() > 20) msg += "\n  ...";
    throw DataError(msg);
  }
  const size_t expected = expected_split_size(source, split);
  if (options.enforce_split_size && expected != 0 && records.size() != expected) {
    throw DataError(face_source_name(source) + " " + split_name(split) + " split has " +
                    std::to_string(records.size()) + " images, expected " + std::to_string(expected));
  }

  // Without an identity table every image is its own identity.
  const auto id_file = base / "annotations" / "identities.csv";
  const auto ids = std::filesystem::exists(id_file) ? read_identities(id_file) : std::map<std::string, int>{};
  for (size_t i = 0; i < records.size(); ++i) {
    auto it = ids.find(records[i].id);
    records[i].identity = it != ids.end() ? it->second : static_cast<int>(i);
  }
  return FaceDataset(source, split, input_size, std::move(records));
}

OverlapResult exclude_overlap(const FaceDataset& train, const Dataset& test) {
  std::set<std::string> held_out;
  for (size_t i = 0; i < test.size(); ++i) held_out.insert(test.item_id(i));
  std::vector<FaceRecord> kept;
  size_t removed = 0;
  for (const FaceRecord& rec : train.records()) {
    if (held_out.count(rec.id)) {
      ++removed;
    } else {
      kept.push_back(rec);
    }
  }
  return {FaceDataset(train.source(), train.split(), train.image_size(), std::move(kept)), removed};
}

SubsetDataset::SubsetDataset(const Dataset& base, std::vector<size_t> indices)
    : base_(base), indices_(std::move(indices)) {
  for (size_t i : indices_) {
    if (i >= base_.size()) throw ShapeError("subset index out of range");
  }
}

}  // namespace dve
