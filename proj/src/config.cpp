#include "dve/config.hpp"

#include <array>
#include <charconv>
#include <functional>
#include <fstream>
#include <map>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "dve/errors.hpp"

namespace dve {

namespace {

struct Entry {
  std::string key;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& what) {
  throw ConfigError("config key " + key + ": cannot parse '" + value + "' as " + what);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  const std::string v = boost::algorithm::trim_copy(value);
  T out{};
  std::istringstream in(v);
  in >> out;
  if (v.empty() || in.fail() || !in.eof()) bad_value(key, value, "a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  const std::string v = boost::algorithm::to_lower_copy(boost::algorithm::trim_copy(value));
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, value, "a boolean");
}

// Shortest text that reads back to the same double.
std::string show(double v) {
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

std::string show_counts(const std::vector<int>& counts) {
  std::string out;
  for (size_t i = 0; i < counts.size(); ++i) {
    if (i) out += ",";
    out += counts[i] == 0 ? "all" : std::to_string(counts[i]);
  }
  return out;
}

std::vector<int> parse_counts(const std::string& key, const std::string& value) {
  std::vector<std::string> parts;
  boost::algorithm::split(parts, value, boost::algorithm::is_any_of(","));
  std::vector<int> out;
  for (auto& p : parts) {
    boost::algorithm::trim(p);
    if (p.empty()) continue;
    const int c = p == "all" ? 0 : parse_number<int>(key, p);
    if (c < 0) bad_value(key, value, "a list of non-negative counts");
    out.push_back(c);
  }
  if (out.empty()) bad_value(key, value, "a non-empty list of counts");
  return out;
}

template <typename T>
Entry number(std::string key, T& field) {
  return {key, [&field] {
            if constexpr (std::is_floating_point_v<T>) return show(field);
            else return std::to_string(field);
          },
          [key, &field](const std::string& v) { field = parse_number<T>(key, v); }};
}

Entry flag(std::string key, bool& field) {
  return {key, [&field] { return std::string(field ? "true" : "false"); },
          [key, &field](const std::string& v) { field = parse_bool(key, v); }};
}

Entry text(std::string key, std::string& field) {
  return {key, [&field] { return field; }, [&field](const std::string& v) { field = boost::algorithm::trim_copy(v); }};
}

Entry path(std::string key, std::filesystem::path& field) {
  return {key, [&field] { return field.string(); },
          [&field](const std::string& v) { field = boost::algorithm::trim_copy(v); }};
}

std::vector<Entry> entries(RunConfig& c) {
  TrainConfig& t = c.train;
  DataConfig& d = c.data;
  EvalConfig& e = c.eval;
  WarpConfig& w = t.warp;
  return {
      number("train.pairs_per_batch", t.pairs_per_batch),
      number("train.aux_pool_size", t.aux_pool_size),
      number("train.aux_per_pair", t.aux_per_pair),
      number("train.epochs", t.epochs),
      number("train.lr", t.lr),
      text("train.optimizer", t.optimizer),
      number("train.beta1", t.beta1),
      number("train.beta2", t.beta2),
      number("train.eps", t.eps),
      flag("train.use_dve", t.use_dve),
      flag("train.identity_warp", t.identity_warp),
      number("train.seed", t.seed),
      {"train.pairs", [&t] { return pair_source_name(t.pairs); },
       [&t](const std::string& v) { t.pairs = parse_pair_source(boost::algorithm::trim_copy(v)); }},
      number("train.steps_per_epoch", t.steps_per_epoch),
      number("train.block_rows", t.block_rows),
      {"model.arch", [&t] { return arch_name(t.arch); },
       [&t](const std::string& v) { t.arch = parse_arch(boost::algorithm::trim_copy(v)); }},
      number("model.embed_dim", t.embed_dim),
      number("model.width", t.width),
      number("model.hourglass_channels", t.hourglass_channels),
      number("warp.control_rows", w.control_rows),
      number("warp.control_cols", w.control_cols),
      number("warp.max_control_displacement", w.max_control_displacement),
      number("warp.rotation_range", w.rotation_range),
      number("warp.scale_min", w.scale_min),
      number("warp.scale_max", w.scale_max),
      number("warp.translation_range", w.translation_range),
      flag("warp.compose_similarity", w.compose_similarity),
      text("data.dataset", d.dataset),
      path("data.root", d.root),
      text("data.split", d.split),
      text("data.test_split", d.test_split),
      flag("data.enforce_split_size", d.enforce_split_size),
      text("data.exclude_overlap_with", d.exclude_overlap_with),
      number("data.arm_instances", d.arm_instances),
      number("data.arm_frames", d.arm_frames),
      number("data.image_size", d.image_size),
      number("data.arm_seed", d.arm_seed),
      number("data.arm_test_instances", d.arm_test_instances),
      number("data.arm_test_frames", d.arm_test_frames),
      number("data.arm_hue_jitter", d.arm.hue_jitter),
      number("data.arm_pose_step", d.arm.pose_step),
      number("data.arm_partner_window", d.arm.partner_window),
      number("data.arm_joint_range", d.arm.joint_range),
      number("data.arm_base_range", d.arm.base_range),
      number("eval.n_pairs", e.n_pairs),
      number("eval.seed", e.seed),
      flag("eval.match_normalize", e.match_normalize),
      {"eval.counts", [&e] { return show_counts(e.counts); },
       [&e](const std::string& v) { e.counts = parse_counts("eval.counts", v); }},
      number("eval.n_seeds", e.n_seeds),
      number("eval.temperature", e.temperature),
      number("eval.regressor_epochs", e.regressor_epochs),
      number("eval.regressor_lr", e.regressor_lr),
      number("eval.left_eye", e.left_eye),
      number("eval.right_eye", e.right_eye),
  };
}

}  // namespace

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (Entry& e : entries(cfg)) {
    if (e.key == key) {
      e.set(value);
      return;
    }
  }
  throw ConfigError("unknown config key: " + key);
}

std::vector<std::string> config_keys() {
  RunConfig scratch;
  std::vector<std::string> keys;
  for (const Entry& e : entries(scratch)) keys.push_back(e.key);
  return keys;
}

RunConfig load_config(const std::filesystem::path& file) {
  if (!std::filesystem::exists(file)) throw ConfigError("config file not found: " + file.string());
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::read_ini(file.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("cannot parse config " + file.string() + ": " + e.what());
  }
  RunConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("unknown config key: " + section + " (keys belong in a [section])");
    for (const auto& [name, value] : body) apply_setting(cfg, section + "." + name, value.data());
  }
  return cfg;
}

std::vector<std::pair<std::string, std::string>> config_entries(const RunConfig& cfg) {
  RunConfig copy = cfg;
  std::vector<std::pair<std::string, std::string>> out;
  for (const Entry& e : entries(copy)) out.emplace_back(e.key, e.get());
  return out;
}

void save_config(const RunConfig& cfg, const std::filesystem::path& file) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write config " + file.string());
  std::string current;
  for (const auto& [key, value] : config_entries(cfg)) {
    const auto dot = key.find('.');
    const std::string section = key.substr(0, dot);
    if (section != current) {
      out << (current.empty() ? "" : "\n") << "[" << section << "]\n";
      current = section;
    }
    out << key.substr(dot + 1) << " = " << value << "\n";
  }
}

}  // namespace dve
