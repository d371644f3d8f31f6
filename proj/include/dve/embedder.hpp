#pragma once

#include <cstdint>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "dve/dve_core.hpp"
#include "dve/image.hpp"
#include "dve/nn.hpp"

namespace dve {

enum class Arch { smallnet, smallnet_plus, hourglass };

Arch parse_arch(const std::string& name);
std::string arch_name(Arch arch);

struct EmbedderSpec {
  Arch arch = Arch::smallnet;
  int out_dim = 3;
  int input_size = 70;
  // Multiplies every hidden SmallNet width (20, 48, 64, 80, 256, 256).
  double width = 1.0;
  int hourglass_channels = 256;

  void validate() const;

  /// Default input size per architecture (smallnet 70, smallnet_plus 64, hourglass 96).
  static int default_input_size(Arch arch);
};

/// Hidden channel widths of SmallNet's first six convolutions.
std::vector<int> smallnet_widths(double width);

/// Dense per-pixel embedding network.
class DenseEmbedder {
 public:
  DenseEmbedder(EmbedderSpec spec, std::uint64_t seed);

  DenseEmbedder(const DenseEmbedder&) = delete;
  DenseEmbedder& operator=(const DenseEmbedder&) = delete;

  const EmbedderSpec& spec() const { return spec_; }

  /// Input pixels per output cell along each axis (2 for smallnet/hourglass).
  int output_stride() const;
  int output_size() const { return spec_.input_size / output_stride(); }

  nn::Tensor forward(const nn::Tensor& batch, bool training);
  nn::Tensor backward(const nn::Tensor& grad_embeddings);

  /// Evaluation-mode embedding (batch norm uses running statistics).
  std::vector<EmbeddingMap> embed(std::span<const Image> images);

  /// Every named tensor, including non-trainable batch-norm buffers.
  std::vector<nn::Parameter*> parameters();
  std::vector<nn::Parameter*> trainable_parameters();
  nn::Parameter* find(const std::string& name);

  size_t trainable_count();

  /// Top-level layers in order (used for per-layer gradient-flow checks).
  nn::Sequential& layers() { return net_; }

 private:
  EmbedderSpec spec_;
  nn::Sequential net_;
  std::mutex eval_mutex_;
};

std::unique_ptr<DenseEmbedder> build_embedder(const EmbedderSpec& spec, std::uint64_t seed);

/// Packs H x W x 3 images into an N x 3 x H x W tensor centred on zero.
nn::Tensor images_to_batch(std::span<const Image> images);
/// Splits an N x C x h x w tensor into per-image embedding maps.
std::vector<EmbeddingMap> tensor_to_maps(const nn::Tensor& t);
/// Inverse of tensor_to_maps for gradients: row-major pixel rows to NCHW.
void write_map_grad(const RowMatrix<float>& grad, int index, nn::Tensor& t);

/// FNV-1a over every parameter and buffer value.
std::uint64_t parameter_hash(DenseEmbedder& model);

}  // namespace dve
