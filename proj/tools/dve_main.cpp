#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "dve/checkpoint.hpp"
#include "dve/config.hpp"
#include "dve/data_source.hpp"
#include "dve/errors.hpp"
#include "dve/evalkit.hpp"
#include "dve/trainer.hpp"

#ifndef DVE_VERSION
#define DVE_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dve;

namespace {

// Flags that shadow config keys; a flag given on the command line wins.
class Overrides {
 public:
  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    values_.push_back(std::make_unique<std::string>());
    app->add_option(flag, *values_.back(), help + " [" + key + "]");
    keys_.push_back(key);
  }
  void apply(RunConfig& cfg) const {
    for (size_t i = 0; i < keys_.size(); ++i) {
      if (!values_[i]->empty()) apply_setting(cfg, keys_[i], *values_[i]);
    }
  }

 private:
  std::vector<std::string> keys_;
  std::vector<std::unique_ptr<std::string>> values_;
};

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out = "runs";
  std::string run_dir;
  Overrides overrides;

  void attach(CLI::App* app, bool run_dirs = true) {
    app->add_option("-c,--config", config, "INI config file")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "Override any config key: section.key=value")->take_all();
    if (!run_dirs) return;
    app->add_option("--out", out, "Root directory for run directories");
    app->add_option("--run-dir", run_dir, "Exact run directory (default: <out>/<timestamp>_seed<seed>_<command>)");
  }

  RunConfig resolve() const {
    RunConfig cfg = config.empty() ? RunConfig{} : load_config(config);
    overrides.apply(cfg);
    for (const std::string& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got " + s);
      apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    cfg.train.validate();
    return cfg;
  }
};

std::string timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
  return buf;
}

fs::path make_run_dir(const Common& common, std::uint64_t seed, const std::string& command,
                      const fs::path& fallback = {}) {
  fs::path dir = !common.run_dir.empty() ? fs::path(common.run_dir) : fallback;
  if (dir.empty()) {
    const fs::path base = fs::path(common.out) / (timestamp() + "_seed" + std::to_string(seed) + "_" + command);
    dir = base;
    for (int k = 2; fs::exists(dir); ++k) dir = base.string() + "_" + std::to_string(k);
  }
  fs::create_directories(dir);
  return dir;
}

struct RunManifest {
  std::string command;
  fs::path config_path;
  std::uint64_t seed = 0;
  std::vector<fs::path> outputs;
};

void write_manifest(const RunManifest& m, const fs::path& dir) {
  json outputs = json::array();
  for (const auto& p : m.outputs) {
    if (!fs::exists(p)) throw DataError("declared output was not written: " + p.string());
    outputs.push_back(p.string());
  }
  const json doc{{"command", m.command},
                 {"config_path", m.config_path.string()},
                 {"seed", m.seed},
                 {"version", DVE_VERSION},
                 {"created", timestamp()},
                 {"outputs", outputs}};
  std::ofstream(dir / "manifest.json") << doc.dump(2) << '\n';
}

void write_json(const json& doc, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

void print_summary(const json& summary) {
  std::cout << "summary:\n";
  for (const auto& [k, v] : summary.items()) std::cout << "  " << k << ": " << v.dump() << '\n';
}

// --- commands ----------------------------------------------------------------

int cmd_gen_data(const Common& common, const fs::path& dir) {
  const RunConfig cfg = common.resolve();
  generate_synth_splits(cfg.data, dir);
  save_config(cfg, dir / "config.ini");
  RunManifest m{"gen-data", common.config, cfg.data.arm_seed,
                {dir / "train" / "manifest.json", dir / "test" / "manifest.json", dir / "config.ini"}};
  write_manifest(m, dir);
  std::cout << "wrote synthetic arm data to " << dir << '\n';
  return 0;
}

int cmd_train(const Common& common, const std::string& resume) {
  const RunConfig cfg = common.resolve();
  const int input = dataset_input_size(cfg.data, cfg.train.arch);
  const auto dataset = open_dataset(cfg.data, cfg.data.split, input);
  if (!resume.empty() && !fs::exists(resume)) throw DataError("checkpoint not found: " + resume);
  const fs::path resume_dir = resume.empty() ? fs::path() : fs::path(resume).parent_path();
  const fs::path dir = make_run_dir(common, cfg.train.seed, "train", resume_dir);
  save_config(cfg, dir / "config.ini");
  TrainOptions opts;
  opts.out_dir = dir;
  opts.resume = resume;
  opts.dataset_id = cfg.data.dataset + ":" + cfg.data.split;
  opts.on_epoch = [](const EpochStats& s) {
    std::cerr << "epoch " << s.epoch << "  loss " << s.mean_loss << "  steps " << s.steps << "  " << s.wall_time
              << " s\n";
  };
  const TrainResult r = train(*dataset, cfg.train, opts);
  RunManifest m{"train", common.config, cfg.train.seed, {dir / "config.ini", dir / "train_log.jsonl"}};
  if (!r.last_checkpoint.empty()) m.outputs.push_back(r.last_checkpoint);
  write_manifest(m, dir);
  std::cout << "checkpoint: " << r.last_checkpoint.string() << '\n';
  return 0;
}

int cmd_finetune(const Common& common, const std::string& checkpoint, int epochs) {
  RunConfig cfg = common.resolve();
  cfg.train.epochs = epochs;
  const Checkpoint ck = load_checkpoint(checkpoint);
  const auto dataset = open_dataset(cfg.data, cfg.data.split, ck.meta.spec.input_size);
  const fs::path dir = make_run_dir(common, cfg.train.seed, "finetune");
  save_config(cfg, dir / "config.ini");
  TrainOptions opts;
  opts.out_dir = dir;
  opts.dataset_id = cfg.data.dataset + ":" + cfg.data.split;
  opts.on_epoch = [](const EpochStats& s) { std::cerr << "epoch " << s.epoch << "  loss " << s.mean_loss << '\n'; };
  const TrainResult r = finetune_unsupervised(checkpoint, *dataset, cfg.train, opts);
  RunManifest m{"finetune", common.config, cfg.train.seed, {dir / "config.ini", r.last_checkpoint}};
  if (fs::exists(dir / "train_log.jsonl")) m.outputs.push_back(dir / "train_log.jsonl");
  write_manifest(m, dir);
  std::cout << "checkpoint: " << r.last_checkpoint.string() << '\n';
  return 0;
}

int cmd_eval(const Common& common, const std::string& checkpoint, const std::string& protocol) {
  const RunConfig cfg = common.resolve();
  Checkpoint ck = load_checkpoint(checkpoint);
  const fs::path dir = make_run_dir(common, cfg.eval.seed, "eval-" + protocol);
  save_config(cfg, dir / "config.ini");
  DenseEmbedder& model = *ck.model;
  const int input = ck.meta.spec.input_size;

  json summary{{"protocol", protocol},
               {"checkpoint", fs::absolute(checkpoint).string()},
               {"dataset", cfg.data.dataset},
               {"split", cfg.data.test_split},
               {"seed", cfg.eval.seed},
               {"image_size", input}};
  RunManifest m{"eval", common.config, cfg.eval.seed, {dir / "config.ini"}};

  if (protocol == "match-same" || protocol == "match-diff") {
    const auto test = open_dataset(cfg.data, cfg.data.test_split, input);
    std::mt19937_64 rng(cfg.eval.seed);
    const MatchReport report =
        matching_benchmark(model, *test, cfg.eval.n_pairs, parse_match_protocol(protocol), rng, cfg.train.warp,
                           cfg.eval.match_normalize);
    write_match_csv(report, dir / "matches.csv");
    summary["n_pairs"] = report.pair_errors.size();
    summary["mean_error_px"] = report.defined() ? json(report.mean_error) : json(nullptr);
    summary["error_frame"] = report.frame + " pixels";
    summary["matching"] = cfg.eval.match_normalize ? "cosine" : "inner_product";
    m.outputs.push_back(dir / "matches.csv");
  } else if (protocol == "regress" || protocol == "limited") {
    const auto train_set = open_dataset(cfg.data, cfg.data.split, input);
    const auto test = open_dataset(cfg.data, cfg.data.test_split, input);
    RegressorConfig head;
    head.temperature = cfg.eval.temperature;
    head.epochs = cfg.eval.regressor_epochs;
    head.lr = cfg.eval.regressor_lr;
    head.seed = cfg.eval.seed;
    const EmbedFn embed = embed_fn(model);
    const auto train_maps = embed_dataset(embed, *train_set);
    const auto test_maps = embed_dataset(embed, *test);
    summary["left_eye"] = cfg.eval.left_eye;
    summary["right_eye"] = cfg.eval.right_eye;
    summary["error_unit"] = "percent of inter-ocular distance";
    if (protocol == "regress") {
      const RegressionHead h = train_regressor(train_maps, dataset_landmarks(*train_set), head);
      const auto test_lm = dataset_landmarks(*test);
      std::ofstream csv(dir / "regression.csv");
      csv.precision(9);
      csv << "id,iod_error_percent\n";
      std::vector<double> errs;
      for (size_t i = 0; i < test_maps.size(); ++i) {
        errs.push_back(iod_error(h.predict(test_maps[i]), test_lm[i], cfg.eval.left_eye, cfg.eval.right_eye));
        csv << test->item_id(i) << ',' << errs.back() << '\n';
      }
      csv.close();
      summary["train_images"] = train_set->size();
      summary["test_images"] = test->size();
      summary["mean_iod_error"] = pairwise_sum(errs) / static_cast<double>(errs.size());
      m.outputs.push_back(dir / "regression.csv");
    } else {
      LimitedStudyConfig study;
      study.counts = cfg.eval.counts;
      study.n_seeds = cfg.eval.n_seeds;
      study.seed = cfg.eval.seed;
      study.left_eye = cfg.eval.left_eye;
      study.right_eye = cfg.eval.right_eye;
      study.head = head;
      study.list_dir = dir / "annotation_lists";
      const auto rows = limited_annotation_study(train_maps, *train_set, test_maps, *test, study);
      write_limited_csv(rows, dir / "limited.csv");
      json table = json::array();
      for (const auto& r : rows) {
        table.push_back({{"count", r.all ? json("all") : json(r.count)}, {"mean", r.mean}, {"std", r.stddev}});
      }
      summary["rows"] = table;
      summary["n_seeds"] = cfg.eval.n_seeds;
      m.outputs.push_back(dir / "limited.csv");
      m.outputs.push_back(study.list_dir);
    }
  } else {
    throw ConfigError("unknown protocol " + protocol + " (match-same, match-diff, regress, limited)");
  }

  write_json(summary, dir / "summary.json");
  m.outputs.push_back(dir / "summary.json");
  write_manifest(m, dir);
  print_summary(summary);
  return 0;
}

std::vector<Point2> parse_points(const std::string& text) {
  std::vector<Point2> pts;
  std::stringstream all(text);
  std::string item;
  while (std::getline(all, item, ';')) {
    if (item.empty()) continue;
    const auto comma = item.find(',');
    try {
      if (comma == std::string::npos) throw std::invalid_argument(item);
      const Point2 p{std::stod(item.substr(0, comma)), std::stod(item.substr(comma + 1))};
      if (std::abs(p.x) > 1 || std::abs(p.y) > 1) throw std::out_of_range(item);
      pts.push_back(p);
    } catch (const std::exception&) {
      throw ConfigError("--points expects x,y;x,y in [-1,1], got '" + item + "'");
    }
  }
  return pts;
}

std::vector<Point2> default_points(int n) {
  std::vector<Point2> pts{{0.0, 0.0}};
  for (int k = 1; k < n; ++k) {
    const double a = 2.0 * M_PI * (k - 1) / std::max(1, n - 1);
    pts.push_back({0.5 * std::cos(a), 0.5 * std::sin(a)});
  }
  pts.resize(static_cast<size_t>(std::max(0, n)));
  return pts;
}

cv::Mat to_bgr(const Image& im, int scale) {
  cv::Mat out(im.height, im.width, CV_8UC3);
  for (int y = 0; y < im.height; ++y) {
    for (int x = 0; x < im.width; ++x) {
      auto& px = out.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) px[2 - c] = cv::saturate_cast<uchar>(im.at(y, x, c) * 255.0f);
    }
  }
  cv::resize(out, out, cv::Size(), scale, scale, cv::INTER_NEAREST);
  return out;
}

int cmd_visualize(const Common& common, const std::string& checkpoint, const std::string& image_a,
                  const std::string& image_b, const std::string& points, int n_points, const std::string& figure) {
  const RunConfig cfg = common.resolve();
  Checkpoint ck = load_checkpoint(checkpoint);
  const int s = ck.meta.spec.input_size;
  const auto prepare = [s](const std::string& path) {
    Image im = load_image(path);
    return im.height == s && im.width == s ? im : resize_image(im, s, s);
  };
  const Image a = prepare(image_a), b = prepare(image_b);
  const std::vector<Point2> queries = points.empty() ? default_points(n_points) : parse_points(points);
  const EmbedFn embed = embed_fn(*ck.model);
  const std::vector<Point2> matched = nn_match(embed(a), embed(b), queries);
  const fs::path dir = make_run_dir(common, cfg.eval.seed, "visualize");

  const int scale = std::max(1, 256 / s);
  cv::Mat left = to_bgr(a, scale), right = to_bgr(b, scale), canvas;
  const auto to_canvas = [&](Point2 p) {
    return cv::Point(static_cast<int>(std::lround((norm_to_pixel(p.x, s) + 0.5) * scale - 0.5)),
                     static_cast<int>(std::lround((norm_to_pixel(p.y, s) + 0.5) * scale - 0.5)));
  };
  std::ofstream csv(dir / "matches.csv");
  csv << "point,query_x,query_y,match_x,match_y\n";
  for (size_t k = 0; k < queries.size(); ++k) {
    cv::Mat hsv(1, 1, CV_8UC3, cv::Scalar(static_cast<int>(180.0 * k / queries.size()), 230, 255)), bgr;
    cv::cvtColor(hsv, bgr, cv::COLOR_HSV2BGR);
    const cv::Vec3b c = bgr.at<cv::Vec3b>(0, 0);
    const cv::Scalar color(c[0], c[1], c[2]);
    for (auto [panel, p] : {std::pair{&left, queries[k]}, std::pair{&right, matched[k]}}) {
      cv::circle(*panel, to_canvas(p), 6, cv::Scalar(0, 0, 0), cv::FILLED, cv::LINE_AA);
      cv::circle(*panel, to_canvas(p), 4, color, cv::FILLED, cv::LINE_AA);
    }
    csv << k << ',' << queries[k].x << ',' << queries[k].y << ',' << matched[k].x << ',' << matched[k].y << '\n';
  }
  csv.close();
  cv::hconcat(left, right, canvas);
  const fs::path out = figure.empty() ? dir / "matches.png" : fs::path(figure);
  if (!cv::imwrite(out.string(), canvas)) throw DataError("cannot write figure " + out.string());
  write_manifest({"visualize", common.config, cfg.eval.seed, {out, dir / "matches.csv"}}, dir);
  std::cout << "figure: " << out.string() << '\n';
  return 0;
}

int run(int argc, char** argv) {
  CLI::App app{"Dense visual embeddings: training, evaluation and figures"};
  app.require_subcommand(1);

  Common gen_c, train_c, ft_c, eval_c, vis_c;

  auto* gen = app.add_subcommand("gen-data", "Render the synthetic arm dataset (train and test splits)");
  gen_c.attach(gen, false);
  std::string data_dir;
  gen->add_option("--data-dir", data_dir, "Output directory (receives train/ and test/)")->required();
  gen_c.overrides.add(gen, "--instances", "data.arm_instances", "Training instances");
  gen_c.overrides.add(gen, "--frames", "data.arm_frames", "Frames per training instance");
  gen_c.overrides.add(gen, "--test-instances", "data.arm_test_instances", "Test instances");
  gen_c.overrides.add(gen, "--test-frames", "data.arm_test_frames", "Frames per test instance");
  gen_c.overrides.add(gen, "--size", "data.image_size", "Image size in pixels");
  gen_c.overrides.add(gen, "--seed", "data.arm_seed", "Generator seed");

  auto* tr = app.add_subcommand("train", "Train a dense embedding");
  train_c.attach(tr);
  std::string resume;
  tr->add_option("--resume", resume, "Continue from a checkpoint (writes into its directory)");
  const auto add_train_flags = [](Common& c, CLI::App* sub) {
    c.overrides.add(sub, "--seed", "train.seed", "Training seed");
    c.overrides.add(sub, "--lr", "train.lr", "Learning rate");
    c.overrides.add(sub, "--dve", "train.use_dve", "Use descriptor vector exchange (true/false)");
    c.overrides.add(sub, "--identity-warp", "train.identity_warp", "Train without transformations (true/false)");
    c.overrides.add(sub, "--pairs", "train.pairs", "Pair source: warp or flow");
    c.overrides.add(sub, "--dataset", "data.dataset", "synth_arm, celeba, mafl, aflw_m, aflw_r or w300");
    c.overrides.add(sub, "--root", "data.root", "Dataset root");
  };
  add_train_flags(train_c, tr);
  train_c.overrides.add(tr, "--epochs", "train.epochs", "Epochs");
  train_c.overrides.add(tr, "--embed-dim", "model.embed_dim", "Embedding dimension");
  train_c.overrides.add(tr, "--arch", "model.arch", "smallnet, smallnet_plus or hourglass");

  auto* ft = app.add_subcommand("finetune", "Continue unsupervised training of a checkpoint on another dataset");
  ft_c.attach(ft);
  std::string ft_ckpt;
  int ft_epochs = 50;
  ft->add_option("--checkpoint", ft_ckpt, "Checkpoint to start from")->required();
  ft->add_option("--epochs", ft_epochs, "Finetuning epochs");
  add_train_flags(ft_c, ft);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_c.attach(ev);
  std::string ev_ckpt, protocol;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint to evaluate")->required();
  ev->add_option("--protocol", protocol, "match-same, match-diff, regress or limited")
      ->required()
      ->check(CLI::IsMember({"match-same", "match-diff", "regress", "limited"}));
  eval_c.overrides.add(ev, "--dataset", "data.dataset", "Dataset name");
  eval_c.overrides.add(ev, "--root", "data.root", "Dataset root");
  eval_c.overrides.add(ev, "--split", "data.test_split", "Evaluation split");
  eval_c.overrides.add(ev, "--n-pairs", "eval.n_pairs", "Pairs for matching");
  eval_c.overrides.add(ev, "--counts", "eval.counts", "Annotation counts for the limited study, e.g. 1,5,all");
  eval_c.overrides.add(ev, "--seeds", "eval.n_seeds", "Seeds per count in the limited study");
  eval_c.overrides.add(ev, "--seed", "eval.seed", "Evaluation seed");

  auto* vis = app.add_subcommand("visualize", "Draw nearest-neighbour matches between two images");
  vis_c.attach(vis);
  std::string vis_ckpt, image_a, image_b, points, figure;
  int n_points = 5;
  vis->add_option("--checkpoint", vis_ckpt, "Checkpoint")->required();
  vis->add_option("--image-a", image_a, "Query image")->required();
  vis->add_option("--image-b", image_b, "Target image")->required();
  vis->add_option("--points", points, "Query points 'x,y;x,y' in normalized coordinates");
  vis->add_option("--n-points", n_points, "Number of default query points");
  vis->add_option("--figure", figure, "Output image (default <run-dir>/matches.png)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (gen->parsed()) return cmd_gen_data(gen_c, data_dir);
  if (tr->parsed()) return cmd_train(train_c, resume);
  if (ft->parsed()) return cmd_finetune(ft_c, ft_ckpt, ft_epochs);
  if (ev->parsed()) return cmd_eval(eval_c, ev_ckpt, protocol);
  if (vis->parsed()) return cmd_visualize(vis_c, vis_ckpt, image_a, image_b, points, n_points, figure);
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
