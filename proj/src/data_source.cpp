#include "dve/data_source.hpp"

#include "dve/errors.hpp"
#include "dve/synth_arm.hpp"

namespace dve {

namespace {

constexpr std::uint64_t kTestSeedOffset = 7919;

SynthArmDataset generate_split(const DataConfig& data, const std::string& split) {
  if (split == "test") {
    return synth_arm_generate(data.arm_test_instances, data.arm_test_frames, data.image_size,
                              data.arm_seed + kTestSeedOffset, data.arm);
  }
  if (split != "train") throw ConfigError("synthetic arm splits are train and test, not " + split);
  return synth_arm_generate(data.arm_instances, data.arm_frames, data.image_size, data.arm_seed, data.arm);
}

}  // namespace

int dataset_input_size(const DataConfig& data, Arch arch) {
  return data.dataset == "synth_arm" ? data.image_size : EmbedderSpec::default_input_size(arch);
}

std::unique_ptr<Dataset> open_dataset(const DataConfig& data, const std::string& split, int input_size) {
  if (data.dataset == "synth_arm") {
    std::unique_ptr<SynthArmDataset> ds;
    if (data.root.empty()) {
      ds = std::make_unique<SynthArmDataset>(generate_split(data, split));
    } else {
      ds = std::make_unique<SynthArmDataset>(load_synth_arm(data.root / split));
    }
    if (ds->image_size() != input_size) {
      throw ConfigError("synthetic images are " + std::to_string(ds->image_size()) + " px but the model expects " +
                        std::to_string(input_size));
    }
    return ds;
  }

  const FaceSource source = parse_face_source(data.dataset);
  if (data.root.empty()) throw ConfigError("data.root is required for " + data.dataset);
  FaceLoadOptions opts;
  opts.enforce_split_size = data.enforce_split_size;
  FaceDataset ds = load_face_dataset(source, data.root, parse_split(split), input_size, opts);
  if (!data.exclude_overlap_with.empty() && split == "train") {
    const FaceDataset held_out =
        load_face_dataset(parse_face_source(data.exclude_overlap_with), data.root, Split::test, input_size);
    ds = exclude_overlap(ds, held_out).dataset;
  }
  return std::make_unique<FaceDataset>(std::move(ds));
}

void generate_synth_splits(const DataConfig& data, const std::filesystem::path& dir) {
  save_synth_arm(generate_split(data, "train"), dir / "train");
  save_synth_arm(generate_split(data, "test"), dir / "test");
}

}  // namespace dve
