#include "dve/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

#include "dve/errors.hpp"

namespace dve {

namespace {

constexpr char kMagic[8] = {'D', 'V', 'E', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw DataError("truncated checkpoint");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_tensor(std::ostream& out, const std::string& key, const nn::Tensor& t) {
  put_u32(out, static_cast<std::uint32_t>(key.size()));
  out.write(key.data(), static_cast<std::streamsize>(key.size()));
  for (int d : {t.n, t.c, t.h, t.w}) put_u32(out, static_cast<std::uint32_t>(d));
  for (float f : t.data) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
}

nlohmann::json meta_to_json(const CheckpointMeta& meta) {
  return {{"arch", arch_name(meta.spec.arch)},
          {"C", meta.spec.out_dim},
          {"input_size", meta.spec.input_size},
          {"width", meta.spec.width},
          {"hourglass_channels", meta.spec.hourglass_channels},
          {"train_epochs", meta.train_epochs},
          {"dataset_id", meta.dataset_id},
          {"provenance", meta.provenance},
          {"seed", meta.seed},
          {"optimizer_steps", meta.optimizer_steps}};
}

CheckpointMeta meta_from_json(const nlohmann::json& j) {
  CheckpointMeta meta;
  meta.spec.arch = parse_arch(j.at("arch").get<std::string>());
  meta.spec.out_dim = j.at("C").get<int>();
  meta.spec.input_size = j.at("input_size").get<int>();
  meta.spec.width = j.value("width", 1.0);
  meta.spec.hourglass_channels = j.value("hourglass_channels", 256);
  meta.train_epochs = j.value("train_epochs", 0);
  meta.dataset_id = j.value("dataset_id", std::string{});
  meta.provenance = j.value("provenance", std::vector<std::string>{});
  meta.seed = j.value("seed", std::uint64_t{0});
  meta.optimizer_steps = j.value("optimizer_steps", std::int64_t{0});
  return meta;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, DenseEmbedder& model, const CheckpointMeta& meta,
                     nn::Adam* optimizer) {
  CheckpointMeta m = meta;
  m.spec = model.spec();
  if (optimizer) m.optimizer_steps = optimizer->steps();
  const std::string meta_text = meta_to_json(m).dump();

  std::vector<std::pair<std::string, const nn::Tensor*>> entries;
  for (nn::Parameter* p : model.parameters()) entries.emplace_back(p->name, &p->value);
  if (optimizer) {
    const auto trainable = model.trainable_parameters();
    for (size_t k = 0; k < trainable.size(); ++k) {
      entries.emplace_back("adam.m." + trainable[k]->name, &optimizer->first_moments()[k]);
      entries.emplace_back("adam.v." + trainable[k]->name, &optimizer->second_moments()[k]);
    }
  }

  // Write to a sibling temp file first so an interrupted save never clobbers
  // the previous checkpoint.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(kMagic, 8);
    put_u32(out, static_cast<std::uint32_t>(meta_text.size()));
    out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
    put_u32(out, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [key, tensor] : entries) put_tensor(out, key, *tensor);
    if (!out) throw DataError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw DataError("not a checkpoint file: " + path.string());
  }
  const std::uint32_t meta_len = get_u32(in);
  std::string meta_text(meta_len, '\0');
  if (!in.read(meta_text.data(), meta_len)) throw DataError("truncated checkpoint metadata");

  Checkpoint ckpt;
  try {
    ckpt.meta = meta_from_json(nlohmann::json::parse(meta_text));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad checkpoint metadata: ") + e.what());
  }
  ckpt.model = build_embedder(ckpt.meta.spec, ckpt.meta.seed);

  std::map<std::string, nn::Parameter*> by_name;
  for (nn::Parameter* p : ckpt.model->parameters()) by_name[p->name] = p;

  const std::uint32_t count = get_u32(in);
  size_t loaded = 0;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::uint32_t key_len = get_u32(in);
    std::string key(key_len, '\0');
    if (!in.read(key.data(), key_len)) throw DataError("truncated checkpoint key");
    int dims[4];
    for (int& d : dims) d = static_cast<int>(get_u32(in));
    nn::Tensor t(dims[0], dims[1], dims[2], dims[3]);
    for (float& f : t.data) {
      const std::uint32_t bits = get_u32(in);
      std::memcpy(&f, &bits, 4);
    }
    if (key.rfind("adam.", 0) == 0) {
      ckpt.optimizer_state.emplace(key, std::move(t));
      continue;
    }
    auto it = by_name.find(key);
    if (it == by_name.end()) throw DataError("checkpoint has unexpected parameter " + key);
    if (!it->second->value.same_shape(t)) throw DataError("checkpoint shape mismatch for " + key);
    it->second->value = std::move(t);
    ++loaded;
  }
  if (loaded != by_name.size()) throw DataError("checkpoint is missing parameters");
  return ckpt;
}

void restore_optimizer(const Checkpoint& ckpt, DenseEmbedder& model, nn::Adam& optimizer) {
  const auto trainable = model.trainable_parameters();
  for (size_t k = 0; k < trainable.size(); ++k) {
    auto m = ckpt.optimizer_state.find("adam.m." + trainable[k]->name);
    auto v = ckpt.optimizer_state.find("adam.v." + trainable[k]->name);
    if (m == ckpt.optimizer_state.end() || v == ckpt.optimizer_state.end()) {
      throw DataError("checkpoint lacks optimizer state for " + trainable[k]->name);
    }
    optimizer.first_moments()[k] = m->second;
    optimizer.second_moments()[k] = v->second;
  }
  optimizer.set_steps(ckpt.meta.optimizer_steps);
}

}  // namespace dve
