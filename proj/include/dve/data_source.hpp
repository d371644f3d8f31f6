#pragma once

#include <memory>
#include <string>

#include "dve/config.hpp"
#include "dve/datasets.hpp"

namespace dve {

/// Input size used for a dataset: data.image_size for the synthetic arm,
/// the architecture's default for face benchmarks.
int dataset_input_size(const DataConfig& data, Arch arch);

/// Opens `split` of the configured dataset. The synthetic arm is loaded from
/// <root>/<split> when a root is given and generated in memory otherwise
/// (the test split uses its own instances and seed).
std::unique_ptr<Dataset> open_dataset(const DataConfig& data, const std::string& split, int input_size);

/// Generates both synthetic splits into <dir>/train and <dir>/test.
void generate_synth_splits(const DataConfig& data, const std::filesystem::path& dir);

}  // namespace dve
