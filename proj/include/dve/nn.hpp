#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace dve::nn {

/// Dense NCHW float tensor.
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<float> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, float fill = 0.0f)
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<size_t>(n_) * c_ * h_ * w_, fill) {}

  size_t size() const { return data.size(); }
  size_t plane() const { return static_cast<size_t>(h) * w; }
  float* image(int i) { return data.data() + static_cast<size_t>(i) * c * plane(); }
  const float* image(int i) const { return data.data() + static_cast<size_t>(i) * c * plane(); }
  float& at(int i, int ch, int y, int x) { return data[((static_cast<size_t>(i) * c + ch) * h + y) * w + x]; }
  float at(int i, int ch, int y, int x) const { return data[((static_cast<size_t>(i) * c + ch) * h + y) * w + x]; }
  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
  void zero() { std::fill(data.begin(), data.end(), 0.0f); }
};

/// A named learnable tensor (or a non-trainable buffer such as running
/// batch-norm statistics).
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, bool training) = 0;
  /// Must follow a forward call; accumulates parameter gradients.
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual void collect(const std::string& prefix, std::vector<Parameter*>& out) { (void)prefix; (void)out; }
  virtual void init(std::mt19937_64& rng) { (void)rng; }
  virtual std::string kind() const = 0;
};

class Conv2d final : public Layer {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride = 1, int dilation = 1);

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<Parameter*>& out) override;
  void init(std::mt19937_64& rng) override;
  std::string kind() const override { return "conv"; }

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  int in_, out_, kernel_, stride_, dilation_, pad_;
  Parameter weight_;  // out x (in * k * k)
  Parameter bias_;
  Tensor input_;
};

class BatchNorm2d final : public Layer {
 public:
  explicit BatchNorm2d(int channels, float momentum = 0.1f, float eps = 1e-5f);

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<Parameter*>& out) override;
  std::string kind() const override { return "batchnorm"; }

 private:
  int channels_;
  float momentum_, eps_;
  Parameter gamma_, beta_, running_mean_, running_var_;
  bool last_training_ = false;
  Tensor normalized_;
  std::vector<float> inv_std_;
};

class ReLU final : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  std::string kind() const override { return "relu"; }

 private:
  Tensor output_;
};

/// 2x2 max pooling with stride 2 (odd trailing rows/cols are dropped).
class MaxPool2d final : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  std::string kind() const override { return "maxpool"; }

 private:
  int in_h_ = 0, in_w_ = 0;
  std::vector<std::uint32_t> argmax_;
};

/// Nearest-neighbour 2x upsampling.
class Upsample2x final : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  std::string kind() const override { return "upsample"; }
};

class Sequential : public Layer {
 public:
  Layer& add(std::string name, std::unique_ptr<Layer> layer);

  template <typename L, typename... Args>
  L& emplace(std::string name, Args&&... args) {
    return static_cast<L&>(add(std::move(name), std::make_unique<L>(std::forward<Args>(args)...)));
  }

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<Parameter*>& out) override;
  void init(std::mt19937_64& rng) override;
  std::string kind() const override { return "sequential"; }

  size_t size() const { return layers_.size(); }
  Layer& layer(size_t i) { return *layers_[i].second; }
  const std::string& name(size_t i) const { return layers_[i].first; }

 private:
  std::vector<std::pair<std::string, std::unique_ptr<Layer>>> layers_;
};

/// Pre-activation bottleneck residual: BN-ReLU-1x1, BN-ReLU-3x3, BN-ReLU-1x1,
/// plus an identity (or 1x1 projection) skip.
class Residual final : public Layer {
 public:
  Residual(int in_channels, int out_channels);

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<Parameter*>& out) override;
  void init(std::mt19937_64& rng) override;
  std::string kind() const override { return "residual"; }

 private:
  Sequential body_;
  std::unique_ptr<Conv2d> skip_;
};

/// One recursive hourglass module of the given depth at constant width.
class Hourglass final : public Layer {
 public:
  Hourglass(int depth, int channels);

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect(const std::string& prefix, std::vector<Parameter*>& out) override;
  void init(std::mt19937_64& rng) override;
  std::string kind() const override { return "hourglass"; }

 private:
  Sequential upper_;
  Sequential lower_;
};

/// Adam without weight decay.
class Adam {
 public:
  struct Options {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam(std::vector<Parameter*> params, Options opts);

  void zero_grad();
  void step();

  const Options& options() const { return opts_; }
  void set_lr(double lr) { opts_.lr = lr; }
  std::int64_t steps() const { return t_; }

  // State access for checkpointing.
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }

 private:
  std::vector<Parameter*> params_;
  Options opts_;
  std::vector<Tensor> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace dve::nn
