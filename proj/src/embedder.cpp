#include "dve/embedder.hpp"

#include <cmath>
#include <cstring>

#include "dve/errors.hpp"

namespace dve {

Arch parse_arch(const std::string& name) {
  if (name == "smallnet") return Arch::smallnet;
  if (name == "smallnet_plus") return Arch::smallnet_plus;
  if (name == "hourglass") return Arch::hourglass;
  throw ConfigError("unknown architecture: " + name);
}

std::string arch_name(Arch arch) {
  switch (arch) {
    case Arch::smallnet: return "smallnet";
    case Arch::smallnet_plus: return "smallnet_plus";
    case Arch::hourglass: return "hourglass";
  }
  return "unknown";
}

int EmbedderSpec::default_input_size(Arch arch) {
  switch (arch) {
    case Arch::smallnet: return 70;
    case Arch::smallnet_plus: return 64;
    case Arch::hourglass: return 96;
  }
  return 70;
}

void EmbedderSpec::validate() const {
  if (out_dim < 1) throw ConfigError("embedding dimension must be >= 1");
  if (input_size < 2 || input_size % 2 != 0) throw ConfigError("input size must be a positive even number");
  if (!(width > 0.0)) throw ConfigError("width multiplier must be positive");
  if (arch == Arch::smallnet_plus && input_size % 8 != 0) {
    throw ConfigError("smallnet_plus input size must be divisible by 8");
  }
  if (arch == Arch::hourglass && (input_size % 4 != 0 || hourglass_channels < 2)) {
    throw ConfigError("hourglass input size must be divisible by 4");
  }
}

std::vector<int> smallnet_widths(double width) {
  std::vector<int> widths;
  for (int base : {20, 48, 64, 80, 256, 256}) {
    widths.push_back(std::max(1, static_cast<int>(std::lround(base * width))));
  }
  return widths;
}

namespace {

void conv_bn_relu(nn::Sequential& net, int index, int in, int out, int kernel, int dilation) {
  const std::string id = std::to_string(index);
  net.emplace<nn::Conv2d>("conv" + id, in, out, kernel, 1, dilation);
  net.emplace<nn::BatchNorm2d>("bn" + id, out);
  net.emplace<nn::ReLU>("relu" + id);
}

// Kernel sizes: 5x5 first layer, 3x3 elsewhere, 1x1 projection.
void build_smallnet(nn::Sequential& net, const EmbedderSpec& spec, bool plus) {
  const auto w = smallnet_widths(spec.width);
  conv_bn_relu(net, 1, 3, w[0], 5, 1);
  net.emplace<nn::MaxPool2d>("pool1");
  conv_bn_relu(net, 2, w[0], w[1], 3, 2);
  if (plus) net.emplace<nn::MaxPool2d>("pool2");
  conv_bn_relu(net, 3, w[1], w[2], 3, 4);
  if (plus) net.emplace<nn::MaxPool2d>("pool3");
  conv_bn_relu(net, 4, w[2], w[3], 3, 2);
  conv_bn_relu(net, 5, w[3], w[4], 3, 1);
  conv_bn_relu(net, 6, w[4], w[5], 3, 1);
  net.emplace<nn::Conv2d>("conv7", w[5], spec.out_dim, 1);
}

void build_hourglass(nn::Sequential& net, const EmbedderSpec& spec) {
  const int ch = spec.hourglass_channels;
  const int half = std::max(1, ch / 2);
  net.emplace<nn::Conv2d>("stem", 3, std::max(1, ch / 4), 7, 2);
  net.emplace<nn::BatchNorm2d>("stem_bn", std::max(1, ch / 4));
  net.emplace<nn::ReLU>("stem_relu");
  net.emplace<nn::Residual>("res1", std::max(1, ch / 4), half);
  net.emplace<nn::Residual>("res2", half, half);
  net.emplace<nn::Residual>("res3", half, ch);
  // Recursion depth limited by how often the half-resolution map halves.
  int depth = 0;
  for (int s = spec.input_size / 2; depth < 4 && s % 2 == 0; s /= 2) ++depth;
  if (depth < 1) throw ConfigError("hourglass input too small");
  net.emplace<nn::Hourglass>("hg", depth, ch);
  net.emplace<nn::Residual>("hg_res", ch, ch);
  net.emplace<nn::Conv2d>("lin", ch, ch, 1);
  net.emplace<nn::BatchNorm2d>("lin_bn", ch);
  net.emplace<nn::ReLU>("lin_relu");
  net.emplace<nn::Conv2d>("proj", ch, spec.out_dim, 1);
}

}  // namespace

DenseEmbedder::DenseEmbedder(EmbedderSpec spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  switch (spec_.arch) {
    case Arch::smallnet: build_smallnet(net_, spec_, false); break;
    case Arch::smallnet_plus: build_smallnet(net_, spec_, true); break;
    case Arch::hourglass: build_hourglass(net_, spec_); break;
  }
  std::mt19937_64 rng(seed);
  net_.init(rng);
}

int DenseEmbedder::output_stride() const { return spec_.arch == Arch::smallnet_plus ? 8 : 2; }

nn::Tensor DenseEmbedder::forward(const nn::Tensor& batch, bool training) {
  if (batch.c != 3 || batch.h != spec_.input_size || batch.w != spec_.input_size) {
    throw ShapeError("embedder expects N x 3 x " + std::to_string(spec_.input_size) + " x " +
                     std::to_string(spec_.input_size) + " input, got N x " + std::to_string(batch.c) + " x " +
                     std::to_string(batch.h) + " x " + std::to_string(batch.w));
  }
  return net_.forward(batch, training);
}

nn::Tensor DenseEmbedder::backward(const nn::Tensor& grad_embeddings) { return net_.backward(grad_embeddings); }

std::vector<EmbeddingMap> DenseEmbedder::embed(std::span<const Image> images) {
  std::lock_guard lock(eval_mutex_);
  std::vector<EmbeddingMap> out;
  out.reserve(images.size());
  // One image per pass: GEMM rounding depends on the number of columns, so
  // batching would make an image's embedding depend on its batch mates.
  for (size_t i = 0; i < images.size(); ++i) {
    auto maps = tensor_to_maps(forward(images_to_batch(images.subspan(i, 1)), false));
    out.push_back(std::move(maps.front()));
  }
  return out;
}

std::vector<nn::Parameter*> DenseEmbedder::parameters() {
  std::vector<nn::Parameter*> out;
  net_.collect("", out);
  return out;
}

std::vector<nn::Parameter*> DenseEmbedder::trainable_parameters() {
  std::vector<nn::Parameter*> out;
  for (nn::Parameter* p : parameters()) {
    if (p->trainable) out.push_back(p);
  }
  return out;
}

nn::Parameter* DenseEmbedder::find(const std::string& name) {
  for (nn::Parameter* p : parameters()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

size_t DenseEmbedder::trainable_count() {
  size_t total = 0;
  for (nn::Parameter* p : trainable_parameters()) total += p->value.size();
  return total;
}

std::unique_ptr<DenseEmbedder> build_embedder(const EmbedderSpec& spec, std::uint64_t seed) {
  return std::make_unique<DenseEmbedder>(spec, seed);
}

nn::Tensor images_to_batch(std::span<const Image> images) {
  if (images.empty()) return {};
  const int h = images.front().height, w = images.front().width;
  nn::Tensor t(static_cast<int>(images.size()), 3, h, w);
  for (size_t i = 0; i < images.size(); ++i) {
    const Image& im = images[i];
    if (im.height != h || im.width != w) throw ShapeError("images in a batch must share dimensions");
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) t.at(static_cast<int>(i), c, y, x) = im.at(y, x, c) - 0.5f;
      }
    }
  }
  return t;
}

std::vector<EmbeddingMap> tensor_to_maps(const nn::Tensor& t) {
  std::vector<EmbeddingMap> maps;
  maps.reserve(t.n);
  for (int i = 0; i < t.n; ++i) {
    EmbeddingMap m(t.h, t.w, t.c);
    const float* src = t.image(i);
    for (int ch = 0; ch < t.c; ++ch) {
      for (size_t p = 0; p < t.plane(); ++p) m.values(static_cast<Eigen::Index>(p), ch) = src[ch * t.plane() + p];
    }
    maps.push_back(std::move(m));
  }
  return maps;
}

void write_map_grad(const RowMatrix<float>& grad, int index, nn::Tensor& t) {
  float* dst = t.image(index);
  for (int ch = 0; ch < t.c; ++ch) {
    for (size_t p = 0; p < t.plane(); ++p) dst[ch * t.plane() + p] += grad(static_cast<Eigen::Index>(p), ch);
  }
}

std::uint64_t parameter_hash(DenseEmbedder& model) {
  std::uint64_t h = 1469598103934665603ull;
  for (nn::Parameter* p : model.parameters()) {
    for (char c : p->name) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    for (float v : p->value.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      for (int k = 0; k < 4; ++k) {
        h ^= (bits >> (8 * k)) & 0xffu;
        h *= 1099511628211ull;
      }
    }
  }
  return h;
}

}  // namespace dve
