#include "dve/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "dve/errors.hpp"

namespace dve {

PairSource parse_pair_source(const std::string& name) {
  if (name == "warp") return PairSource::warp;
  if (name == "flow") return PairSource::flow;
  throw ConfigError("unknown pair source: " + name);
}

std::string pair_source_name(PairSource source) { return source == PairSource::flow ? "flow" : "warp"; }

void TrainConfig::validate() const {
  if (pairs_per_batch < 1) throw ConfigError("train.pairs_per_batch must be >= 1");
  if (aux_pool_size < 0) throw ConfigError("train.aux_pool_size must be >= 0");
  if (use_dve && aux_per_pair < 1) throw ConfigError("train.aux_per_pair must be >= 1 with DVE");
  if (use_dve && aux_per_pair > aux_pool_size) throw ConfigError("train.aux_per_pair exceeds train.aux_pool_size");
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr must be a finite non-negative number");
  if (optimizer != "adam") throw ConfigError("unsupported optimizer: " + optimizer);
  if (embed_dim < 1) throw ConfigError("train.embed_dim must be >= 1");
  if (steps_per_epoch < 0) throw ConfigError("train.steps_per_epoch must be >= 0");
  if (block_rows < 1) throw ConfigError("train.block_rows must be >= 1");
  warp.validate();
}

EmbedderSpec TrainConfig::embedder_spec(int input_size) const {
  EmbedderSpec spec;
  spec.arch = arch;
  spec.out_dim = embed_dim;
  spec.input_size = input_size;
  spec.width = width;
  spec.hourglass_channels = hourglass_channels;
  return spec;
}

namespace {

bool is_identity(const WarpConfig& w) {
  return w.max_control_displacement == 0.0 && w.rotation_range == 0.0 && w.scale_min == 1.0 &&
         w.scale_max == 1.0 && w.translation_range == 0.0;
}

// First k entries of a uniformly shuffled 0..n-1.
std::vector<size_t> draw_distinct(size_t n, size_t k, std::mt19937_64& rng) {
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  for (size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

// g after flow: u -> g(flow(u)).
WarpField compose(const WarpField& flow, const WarpField& g) {
  WarpField out(flow.height, flow.width);
  for (size_t i = 0; i < flow.size(); ++i) {
    const WarpedPoint wp = warp_point(g, flow.at(i));
    out.set(i, wp.coord);
    out.valid[i] = flow.valid[i] && wp.valid ? 1 : 0;
  }
  return out;
}

TrainingPair make_pair(const Dataset& dataset, const TrainConfig& cfg, size_t index, std::mt19937_64& rng) {
  TrainingPair pair;
  pair.source_index = pair.target_index = index;
  pair.source = dataset.get(index).image;
  const int h = pair.source.height, w = pair.source.width;

  if (cfg.identity_warp) {
    pair.target = pair.source;
    pair.gt = WarpField::identity(h, w);
    // Pixels that cannot move carry no signal.
    if (auto fg = dataset.foreground(index)) {
      for (size_t i = 0; i < pair.gt.size(); ++i) pair.gt.valid[i] = pair.gt.valid[i] && (*fg)[i];
    }
    return pair;
  }

  if (cfg.pairs == PairSource::flow) {
    if (!dataset.has_flow()) throw ConfigError(dataset.name() + " has no ground-truth flow; use train.pairs = warp");
    const auto partners = dataset.flow_partners(index);
    if (partners.empty()) throw DataError("item " + dataset.item_id(index) + " has no flow partner");
    std::uniform_int_distribution<size_t> pick(0, partners.size() - 1);
    pair.target_index = partners[pick(rng)];
    pair.target = dataset.get(pair.target_index).image;
    pair.gt = dataset.flow(index, pair.target_index);
    if (!is_identity(cfg.warp)) {
      const WarpField g = sample_warp(cfg.warp, h, w, rng);
      pair.target = apply_warp(pair.target, g);
      pair.gt = compose(pair.gt, g);
    }
    return pair;
  }

  pair.gt = sample_warp(cfg.warp, h, w, rng);
  pair.target = apply_warp(pair.source, pair.gt);
  return pair;
}

}  // namespace

Batch assemble_batch(const Dataset& dataset, const TrainConfig& cfg, std::mt19937_64& rng) {
  const size_t n_pairs = static_cast<size_t>(cfg.pairs_per_batch);
  const size_t n_pool = cfg.use_dve ? static_cast<size_t>(cfg.aux_pool_size) : 0;
  if (dataset.size() == 0) throw DataError("training dataset is empty");
  if (dataset.size() < n_pairs + n_pool) {
    throw DataError("dataset has " + std::to_string(dataset.size()) + " items but a batch needs " +
                    std::to_string(n_pairs + n_pool));
  }
  const std::vector<size_t> picked = draw_distinct(dataset.size(), n_pairs + n_pool, rng);

  Batch batch;
  for (size_t p = 0; p < n_pairs; ++p) batch.pairs.push_back(make_pair(dataset, cfg, picked[p], rng));
  const bool warp_pool = !cfg.identity_warp && !is_identity(cfg.warp);
  for (size_t k = 0; k < n_pool; ++k) {
    const size_t index = picked[n_pairs + k];
    Image im = dataset.get(index).image;
    if (warp_pool) im = apply_warp(im, sample_warp(cfg.warp, im.height, im.width, rng));
    batch.pool_indices.push_back(index);
    batch.pool.push_back(std::move(im));
  }
  if (cfg.use_dve) {
    for (size_t p = 0; p < n_pairs; ++p) {
      std::vector<int> aux;
      for (size_t a : draw_distinct(n_pool, static_cast<size_t>(cfg.aux_per_pair), rng)) aux.push_back(static_cast<int>(a));
      batch.aux.push_back(std::move(aux));
    }
  }
  return batch;
}

namespace {

struct StepResult {
  double loss = 0.0;
  int used = 0;
  int skipped = 0;
  nn::Tensor grad;
};

// Forward the whole batch once, evaluate every pair, and build the gradient
// of the mean pair loss with respect to the network output.
StepResult batch_objective(DenseEmbedder& model, const Batch& batch, const TrainConfig& cfg, bool training,
                           bool want_grad) {
  std::vector<Image> images;
  images.reserve(2 * batch.pairs.size() + batch.pool.size());
  for (const auto& p : batch.pairs) images.push_back(p.source);
  for (const auto& p : batch.pairs) images.push_back(p.target);
  for (const auto& im : batch.pool) images.push_back(im);

  const nn::Tensor out = model.forward(images_to_batch(images), training);
  const std::vector<EmbeddingMap> maps = tensor_to_maps(out);
  const int n_pairs = static_cast<int>(batch.pairs.size());
  const int stride = model.output_stride();
  ObjectiveOptions opts;
  opts.block_rows = cfg.block_rows;

  StepResult res;
  std::vector<std::pair<int, PairObjective<float>>> kept;
  for (int p = 0; p < n_pairs; ++p) {
    const WarpField gt = downsample_warp(batch.pairs[p].gt, stride);
    try {
      if (cfg.use_dve) {
        std::vector<EmbeddingMap> aux;
        for (int a : batch.aux[p]) aux.push_back(maps[2 * n_pairs + a]);
        kept.emplace_back(p, dve_objective<float>(maps[p], maps[n_pairs + p], aux, gt, opts));
      } else {
        kept.emplace_back(p, correspondence_objective<float>(maps[p], maps[n_pairs + p], gt, opts));
      }
    } catch (const UnusablePairError&) {
      ++res.skipped;
    }
  }
  res.used = static_cast<int>(kept.size());
  if (kept.empty()) return res;

  double total = 0.0;
  for (const auto& k : kept) total += k.second.loss;
  res.loss = total / res.used;
  if (!want_grad || !std::isfinite(res.loss)) return res;

  res.grad = nn::Tensor(out.n, out.c, out.h, out.w);
  const float scale = 1.0f / static_cast<float>(res.used);
  for (const auto& [p, obj] : kept) {
    write_map_grad(obj.grad_src * scale, p, res.grad);
    write_map_grad(obj.grad_tgt * scale, n_pairs + p, res.grad);
    for (size_t a = 0; a < obj.grad_aux.size(); ++a) {
      write_map_grad(obj.grad_aux[a] * scale, 2 * n_pairs + batch.aux[p][a], res.grad);
    }
  }
  return res;
}

std::mt19937_64 epoch_rng(std::uint64_t seed, int epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  return std::mt19937_64(seq);
}

std::string format_loss(double v) {
  std::ostringstream s;
  s.precision(9);
  s << v;
  return s.str();
}

TrainResult run_epochs(std::unique_ptr<DenseEmbedder> model, CheckpointMeta meta, const Dataset& dataset,
                       const TrainConfig& cfg, int first_epoch, int last_epoch, const TrainOptions& options,
                       const Checkpoint* optimizer_state) {
  nn::Adam::Options adam_opts;
  adam_opts.lr = cfg.lr;
  adam_opts.beta1 = cfg.beta1;
  adam_opts.beta2 = cfg.beta2;
  adam_opts.eps = cfg.eps;
  nn::Adam adam(model->trainable_parameters(), adam_opts);
  if (optimizer_state) restore_optimizer(*optimizer_state, *model, adam);

  const bool write = !options.out_dir.empty();
  std::ofstream log;
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    log.open(options.out_dir / "train_log.jsonl", std::ios::app);
    if (!log) throw DataError("cannot write training log in " + options.out_dir.string());
  }

  const size_t per_batch = static_cast<size_t>(cfg.pairs_per_batch);
  const int steps = cfg.steps_per_epoch > 0 ? cfg.steps_per_epoch
                                            : std::max(1, static_cast<int>(dataset.size() / per_batch));
  const auto start = std::chrono::steady_clock::now();
  const auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

  TrainResult result;
  for (int epoch = first_epoch; epoch <= last_epoch; ++epoch) {
    std::mt19937_64 rng = epoch_rng(cfg.seed, epoch);
    EpochStats stats;
    stats.epoch = epoch;
    double sum = 0.0;
    for (int step = 0; step < steps; ++step) {
      const Batch batch = assemble_batch(dataset, cfg, rng);
      StepResult r = batch_objective(*model, batch, cfg, true, true);
      stats.skipped_pairs += r.skipped;
      if (r.used == 0) continue;
      if (!std::isfinite(r.loss)) {
        throw NumericalError("non-finite loss " + format_loss(r.loss) + " at epoch " + std::to_string(epoch) +
                             ", batch " + std::to_string(step));
      }
      adam.zero_grad();
      model->backward(r.grad);
      adam.step();
      sum += r.loss;
      ++stats.steps;
      if (write) {
        nlohmann::json rec{{"epoch", epoch}, {"step", adam.steps()}, {"loss", r.loss}, {"wall_time", elapsed()}};
        log << rec.dump() << '\n';
        log.flush();
      }
    }
    stats.mean_loss = stats.steps > 0 ? sum / stats.steps : std::nan("");
    stats.wall_time = elapsed();
    meta.train_epochs = epoch;
    meta.optimizer_steps = adam.steps();
    if (write) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%03d.ckpt", epoch);
      save_checkpoint(options.out_dir / name, *model, meta, &adam);
      save_checkpoint(options.out_dir / "last.ckpt", *model, meta, &adam);
      result.last_checkpoint = options.out_dir / "last.ckpt";
    }
    result.curve.push_back(stats);
    if (options.on_epoch) options.on_epoch(stats);
  }
  result.model = std::move(model);
  result.meta = std::move(meta);
  return result;
}

void check_input_size(const EmbedderSpec& spec, const Dataset& dataset) {
  if (spec.input_size != dataset.image_size()) {
    throw ConfigError(arch_name(spec.arch) + " model expects " + std::to_string(spec.input_size) +
                      " px inputs but " + dataset.name() + " provides " + std::to_string(dataset.image_size()));
  }
}

}  // namespace

TrainResult train(const Dataset& dataset, const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  if (dataset.size() == 0) throw DataError("training dataset is empty");

  if (!options.resume.empty()) {
    Checkpoint ckpt = load_checkpoint(options.resume);
    check_input_size(ckpt.meta.spec, dataset);
    const int done = ckpt.meta.train_epochs;
    CheckpointMeta meta = ckpt.meta;
    auto model = std::move(ckpt.model);
    // Checkpoints saved without optimizer state resume with fresh moments.
    const Checkpoint* state = ckpt.optimizer_state.empty() ? nullptr : &ckpt;
    return run_epochs(std::move(model), meta, dataset, cfg, done + 1, cfg.epochs, options, state);
  }

  const EmbedderSpec spec = cfg.embedder_spec(dataset.image_size());
  CheckpointMeta meta;
  meta.spec = spec;
  meta.dataset_id = options.dataset_id.empty() ? dataset.name() : options.dataset_id;
  meta.seed = cfg.seed;
  return run_epochs(build_embedder(spec, cfg.seed), meta, dataset, cfg, 1, cfg.epochs, options, nullptr);
}

TrainResult finetune_unsupervised(const std::filesystem::path& checkpoint, const Dataset& dataset, TrainConfig cfg,
                                  const TrainOptions& options) {
  if (cfg.epochs < 0) throw ConfigError("finetune epochs must be >= 0");
  Checkpoint ckpt = load_checkpoint(checkpoint);
  check_input_size(ckpt.meta.spec, dataset);
  cfg.arch = ckpt.meta.spec.arch;
  cfg.embed_dim = ckpt.meta.spec.out_dim;
  cfg.width = ckpt.meta.spec.width;
  cfg.hourglass_channels = ckpt.meta.spec.hourglass_channels;

  CheckpointMeta meta = ckpt.meta;
  meta.provenance.push_back(std::filesystem::absolute(checkpoint).string());
  meta.dataset_id = options.dataset_id.empty() ? dataset.name() : options.dataset_id;
  meta.seed = cfg.seed;
  meta.train_epochs = 0;
  meta.optimizer_steps = 0;

  if (cfg.epochs == 0) {
    TrainResult result;
    if (!options.out_dir.empty()) {
      std::filesystem::create_directories(options.out_dir);
      result.last_checkpoint = options.out_dir / "last.ckpt";
      save_checkpoint(result.last_checkpoint, *ckpt.model, meta);
    }
    result.model = std::move(ckpt.model);
    result.meta = std::move(meta);
    return result;
  }
  cfg.validate();
  return run_epochs(std::move(ckpt.model), meta, dataset, cfg, 1, cfg.epochs, options, nullptr);
}

double evaluate_objective(DenseEmbedder& model, const Dataset& dataset, const TrainConfig& cfg, int batches,
                          std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  double sum = 0.0;
  int used = 0;
  for (int b = 0; b < batches; ++b) {
    const Batch batch = assemble_batch(dataset, cfg, rng);
    const StepResult r = batch_objective(model, batch, cfg, false, false);
    if (r.used == 0) continue;
    sum += r.loss;
    ++used;
  }
  if (used == 0) throw DataError("no usable pairs while evaluating the objective");
  return sum / used;
}

}  // namespace dve
