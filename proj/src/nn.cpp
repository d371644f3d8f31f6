#include "dve/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "dve/errors.hpp"

namespace dve::nn {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRowMat = Eigen::Map<RowMat>;
using ConstMapRowMat = Eigen::Map<const RowMat>;

// Peak floats held by one im2col buffer.
constexpr size_t kColumnBudget = size_t{1} << 24;

Parameter make_param(int n, int c, int h, int w, float fill, bool trainable) {
  Parameter p;
  p.value = Tensor(n, c, h, w, fill);
  p.grad = Tensor(n, c, h, w, 0.0f);
  p.trainable = trainable;
  return p;
}

void add_inplace(Tensor& a, const Tensor& b) {
  for (size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int dilation)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), dilation_(dilation),
      pad_(dilation * (kernel - 1) / 2) {
  if (in_channels <= 0 || out_channels <= 0 || kernel <= 0 || kernel % 2 == 0 || stride <= 0 || dilation <= 0) {
    throw ConfigError("invalid convolution geometry");
  }
  weight_ = make_param(out_, in_ * kernel_ * kernel_, 1, 1, 0.0f, true);
  bias_ = make_param(out_, 1, 1, 1, 0.0f, true);
}

void Conv2d::init(std::mt19937_64& rng) {
  // He-normal for ReLU networks.
  const double fan_in = static_cast<double>(in_) * kernel_ * kernel_;
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (float& v : weight_.value.data) v = static_cast<float>(dist(rng));
  bias_.value.zero();
}

void Conv2d::collect(const std::string& prefix, std::vector<Parameter*>& out) {
  weight_.name = prefix + "weight";
  bias_.name = prefix + "bias";
  out.push_back(&weight_);
  out.push_back(&bias_);
}

namespace {

struct ConvGeometry {
  int in_c, in_h, in_w, out_h, out_w, kernel, stride, dilation, pad;
  size_t patch() const { return static_cast<size_t>(in_c) * kernel * kernel; }
  size_t positions() const { return static_cast<size_t>(out_h) * out_w; }
};

// col is patch x (count * positions), row-major.
void im2col(const Tensor& x, int first, int count, const ConvGeometry& g, float* col) {
  const size_t ld = static_cast<size_t>(count) * g.positions();
  for (int ci = 0; ci < g.in_c; ++ci) {
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        float* row = col + ((static_cast<size_t>(ci) * g.kernel + ky) * g.kernel + kx) * ld;
        for (int i = 0; i < count; ++i) {
          const float* plane = x.image(first + i) + static_cast<size_t>(ci) * x.plane();
          float* dst = row + static_cast<size_t>(i) * g.positions();
          for (int oy = 0; oy < g.out_h; ++oy) {
            const int iy = oy * g.stride - g.pad + ky * g.dilation;
            float* drow = dst + static_cast<size_t>(oy) * g.out_w;
            if (iy < 0 || iy >= g.in_h) {
              std::fill(drow, drow + g.out_w, 0.0f);
              continue;
            }
            const float* srow = plane + static_cast<size_t>(iy) * g.in_w;
            for (int ox = 0; ox < g.out_w; ++ox) {
              const int ix = ox * g.stride - g.pad + kx * g.dilation;
              drow[ox] = (ix >= 0 && ix < g.in_w) ? srow[ix] : 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im(const float* col, int first, int count, const ConvGeometry& g, Tensor& dx) {
  const size_t ld = static_cast<size_t>(count) * g.positions();
  for (int ci = 0; ci < g.in_c; ++ci) {
    for (int ky = 0; ky < g.kernel; ++ky) {
      for (int kx = 0; kx < g.kernel; ++kx) {
        const float* row = col + ((static_cast<size_t>(ci) * g.kernel + ky) * g.kernel + kx) * ld;
        for (int i = 0; i < count; ++i) {
          float* plane = dx.image(first + i) + static_cast<size_t>(ci) * dx.plane();
          const float* src = row + static_cast<size_t>(i) * g.positions();
          for (int oy = 0; oy < g.out_h; ++oy) {
            const int iy = oy * g.stride - g.pad + ky * g.dilation;
            if (iy < 0 || iy >= g.in_h) continue;
            const float* srow = src + static_cast<size_t>(oy) * g.out_w;
            float* drow = plane + static_cast<size_t>(iy) * g.in_w;
            for (int ox = 0; ox < g.out_w; ++ox) {
              const int ix = ox * g.stride - g.pad + kx * g.dilation;
              if (ix >= 0 && ix < g.in_w) drow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }
}

int images_per_chunk(const ConvGeometry& g, int n) {
  const size_t per_image = std::max<size_t>(1, g.patch() * g.positions());
  return std::clamp(static_cast<int>(kColumnBudget / per_image), 1, std::max(1, n));
}

}  // namespace

Tensor Conv2d::forward(const Tensor& x, bool /*training*/) {
  if (x.c != in_) {
    throw ShapeError("conv expects " + std::to_string(in_) + " input channels, got " + std::to_string(x.c));
  }
  input_ = x;
  const int out_h = (x.h + 2 * pad_ - dilation_ * (kernel_ - 1) - 1) / stride_ + 1;
  const int out_w = (x.w + 2 * pad_ - dilation_ * (kernel_ - 1) - 1) / stride_ + 1;
  const ConvGeometry g{in_, x.h, x.w, out_h, out_w, kernel_, stride_, dilation_, pad_};
  Tensor y(x.n, out_, out_h, out_w);
  const int chunk = images_per_chunk(g, x.n);
  std::vector<float> col(g.patch() * g.positions() * chunk);
  const ConstMapRowMat weight(weight_.value.data.data(), out_, static_cast<Eigen::Index>(g.patch()));
  for (int first = 0; first < x.n; first += chunk) {
    const int count = std::min(chunk, x.n - first);
    const auto cols = static_cast<Eigen::Index>(count * g.positions());
    im2col(x, first, count, g, col.data());
    const ConstMapRowMat colm(col.data(), static_cast<Eigen::Index>(g.patch()), cols);
    const RowMat out = weight * colm;
    for (int i = 0; i < count; ++i) {
      float* dst = y.image(first + i);
      for (int co = 0; co < out_; ++co) {
        const float b = bias_.value.data[co];
        const float* src = out.data() + static_cast<size_t>(co) * cols + static_cast<size_t>(i) * g.positions();
        float* d = dst + static_cast<size_t>(co) * g.positions();
        for (size_t p = 0; p < g.positions(); ++p) d[p] = src[p] + b;
      }
    }
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  const Tensor& x = input_;
  const ConvGeometry g{in_, x.h, x.w, grad_out.h, grad_out.w, kernel_, stride_, dilation_, pad_};
  Tensor dx(x.n, x.c, x.h, x.w);
  const int chunk = images_per_chunk(g, x.n);
  std::vector<float> col(g.patch() * g.positions() * chunk);
  const auto patch = static_cast<Eigen::Index>(g.patch());
  const ConstMapRowMat weight(weight_.value.data.data(), out_, patch);
  MapRowMat dweight(weight_.grad.data.data(), out_, patch);
  for (int first = 0; first < x.n; first += chunk) {
    const int count = std::min(chunk, x.n - first);
    const auto cols = static_cast<Eigen::Index>(count * g.positions());
    RowMat dy(out_, cols);
    for (int i = 0; i < count; ++i) {
      const float* src = grad_out.image(first + i);
      for (int co = 0; co < out_; ++co) {
        std::copy_n(src + static_cast<size_t>(co) * g.positions(), g.positions(),
                    dy.data() + static_cast<size_t>(co) * cols + static_cast<size_t>(i) * g.positions());
      }
    }
    for (int co = 0; co < out_; ++co) bias_.grad.data[co] += dy.row(co).sum();
    im2col(x, first, count, g, col.data());
    MapRowMat colm(col.data(), patch, cols);
    dweight.noalias() += dy * colm.transpose();
    colm.noalias() = weight.transpose() * dy;
    col2im(col.data(), first, count, g, dx);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// BatchNorm2d

BatchNorm2d::BatchNorm2d(int channels, float momentum, float eps)
    : channels_(channels), momentum_(momentum), eps_(eps) {
  gamma_ = make_param(channels, 1, 1, 1, 1.0f, true);
  beta_ = make_param(channels, 1, 1, 1, 0.0f, true);
  running_mean_ = make_param(channels, 1, 1, 1, 0.0f, false);
  running_var_ = make_param(channels, 1, 1, 1, 1.0f, false);
}

void BatchNorm2d::collect(const std::string& prefix, std::vector<Parameter*>& out) {
  gamma_.name = prefix + "weight";
  beta_.name = prefix + "bias";
  running_mean_.name = prefix + "running_mean";
  running_var_.name = prefix + "running_var";
  out.push_back(&gamma_);
  out.push_back(&beta_);
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
  if (x.c != channels_) throw ShapeError("batchnorm channel mismatch");
  last_training_ = training;
  const size_t plane = x.plane();
  const double m = static_cast<double>(x.n) * plane;
  Tensor y(x.n, x.c, x.h, x.w);
  normalized_ = Tensor(x.n, x.c, x.h, x.w);
  inv_std_.assign(channels_, 0.0f);
  for (int ch = 0; ch < channels_; ++ch) {
    double mean, var;
    if (training) {
      double sum = 0.0, sq = 0.0;
      for (int i = 0; i < x.n; ++i) {
        const float* p = x.image(i) + ch * plane;
        for (size_t k = 0; k < plane; ++k) {
          sum += p[k];
          sq += static_cast<double>(p[k]) * p[k];
        }
      }
      mean = sum / m;
      var = std::max(0.0, sq / m - mean * mean);
      const double unbiased = m > 1 ? var * m / (m - 1) : var;
      running_mean_.value.data[ch] =
          static_cast<float>((1 - momentum_) * running_mean_.value.data[ch] + momentum_ * mean);
      running_var_.value.data[ch] =
          static_cast<float>((1 - momentum_) * running_var_.value.data[ch] + momentum_ * unbiased);
    } else {
      mean = running_mean_.value.data[ch];
      var = running_var_.value.data[ch];
    }
    const float inv = static_cast<float>(1.0 / std::sqrt(var + eps_));
    inv_std_[ch] = inv;
    const float g = gamma_.value.data[ch], b = beta_.value.data[ch];
    const auto mu = static_cast<float>(mean);
    for (int i = 0; i < x.n; ++i) {
      const float* p = x.image(i) + ch * plane;
      float* nrm = normalized_.image(i) + ch * plane;
      float* q = y.image(i) + ch * plane;
      for (size_t k = 0; k < plane; ++k) {
        nrm[k] = (p[k] - mu) * inv;
        q[k] = g * nrm[k] + b;
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out) {
  const Tensor& xhat = normalized_;
  const size_t plane = xhat.plane();
  const double m = static_cast<double>(xhat.n) * plane;
  Tensor dx(xhat.n, xhat.c, xhat.h, xhat.w);
  for (int ch = 0; ch < channels_; ++ch) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int i = 0; i < xhat.n; ++i) {
      const float* dy = grad_out.image(i) + ch * plane;
      const float* nrm = xhat.image(i) + ch * plane;
      for (size_t k = 0; k < plane; ++k) {
        sum_dy += dy[k];
        sum_dy_xhat += static_cast<double>(dy[k]) * nrm[k];
      }
    }
    gamma_.grad.data[ch] += static_cast<float>(sum_dy_xhat);
    beta_.grad.data[ch] += static_cast<float>(sum_dy);
    const float g = gamma_.value.data[ch];
    const float inv = inv_std_[ch];
    if (last_training_) {
      const auto mean_dy = static_cast<float>(sum_dy / m);
      const auto mean_dy_xhat = static_cast<float>(sum_dy_xhat / m);
      for (int i = 0; i < xhat.n; ++i) {
        const float* dy = grad_out.image(i) + ch * plane;
        const float* nrm = xhat.image(i) + ch * plane;
        float* d = dx.image(i) + ch * plane;
        for (size_t k = 0; k < plane; ++k) d[k] = g * inv * (dy[k] - mean_dy - nrm[k] * mean_dy_xhat);
      }
    } else {
      for (int i = 0; i < xhat.n; ++i) {
        const float* dy = grad_out.image(i) + ch * plane;
        float* d = dx.image(i) + ch * plane;
        for (size_t k = 0; k < plane; ++k) d[k] = g * inv * dy[k];
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// ReLU / pooling / upsampling

Tensor ReLU::forward(const Tensor& x, bool /*training*/) {
  output_ = x;
  for (float& v : output_.data) v = v > 0.0f ? v : 0.0f;
  return output_;
}

Tensor ReLU::backward(const Tensor& grad_out) {
  Tensor dx = grad_out;
  for (size_t i = 0; i < dx.data.size(); ++i) {
    if (output_.data[i] <= 0.0f) dx.data[i] = 0.0f;
  }
  return dx;
}

Tensor MaxPool2d::forward(const Tensor& x, bool /*training*/) {
  in_h_ = x.h;
  in_w_ = x.w;
  const int oh = x.h / 2, ow = x.w / 2;
  if (oh == 0 || ow == 0) throw ShapeError("max pool input smaller than 2x2");
  Tensor y(x.n, x.c, oh, ow);
  argmax_.assign(y.size(), 0);
  size_t o = 0;
  for (int i = 0; i < x.n; ++i) {
    for (int ch = 0; ch < x.c; ++ch) {
      const float* p = x.image(i) + ch * x.plane();
      for (int yy = 0; yy < oh; ++yy) {
        for (int xx = 0; xx < ow; ++xx, ++o) {
          std::uint32_t best = static_cast<std::uint32_t>(2 * yy * x.w + 2 * xx);
          float bv = p[best];
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const auto idx = static_cast<std::uint32_t>((2 * yy + dy) * x.w + 2 * xx + dx);
              if (p[idx] > bv) {
                bv = p[idx];
                best = idx;
              }
            }
          }
          y.data[o] = bv;
          argmax_[o] = best;
        }
      }
    }
  }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& grad_out) {
  Tensor dx(grad_out.n, grad_out.c, in_h_, in_w_);
  const size_t per_out = grad_out.plane();
  const size_t per_in = dx.plane();
  for (size_t o = 0; o < grad_out.size(); ++o) {
    const size_t plane_index = o / per_out;
    dx.data[plane_index * per_in + argmax_[o]] += grad_out.data[o];
  }
  return dx;
}

Tensor Upsample2x::forward(const Tensor& x, bool /*training*/) {
  Tensor y(x.n, x.c, x.h * 2, x.w * 2);
  for (int i = 0; i < x.n; ++i) {
    for (int ch = 0; ch < x.c; ++ch) {
      for (int yy = 0; yy < y.h; ++yy) {
        for (int xx = 0; xx < y.w; ++xx) y.at(i, ch, yy, xx) = x.at(i, ch, yy / 2, xx / 2);
      }
    }
  }
  return y;
}

Tensor Upsample2x::backward(const Tensor& grad_out) {
  Tensor dx(grad_out.n, grad_out.c, grad_out.h / 2, grad_out.w / 2);
  for (int i = 0; i < grad_out.n; ++i) {
    for (int ch = 0; ch < grad_out.c; ++ch) {
      for (int yy = 0; yy < grad_out.h; ++yy) {
        for (int xx = 0; xx < grad_out.w; ++xx) dx.at(i, ch, yy / 2, xx / 2) += grad_out.at(i, ch, yy, xx);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Containers

Layer& Sequential::add(std::string name, std::unique_ptr<Layer> layer) {
  layers_.emplace_back(std::move(name), std::move(layer));
  return *layers_.back().second;
}

Tensor Sequential::forward(const Tensor& x, bool training) {
  Tensor cur = x;
  for (auto& [name, layer] : layers_) cur = layer->forward(cur, training);
  return cur;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  Tensor cur = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) cur = it->second->backward(cur);
  return cur;
}

void Sequential::collect(const std::string& prefix, std::vector<Parameter*>& out) {
  for (auto& [name, layer] : layers_) layer->collect(prefix + name + ".", out);
}

void Sequential::init(std::mt19937_64& rng) {
  for (auto& [name, layer] : layers_) layer->init(rng);
}

Residual::Residual(int in_channels, int out_channels) {
  const int mid = std::max(1, out_channels / 2);
  body_.emplace<BatchNorm2d>("bn1", in_channels);
  body_.emplace<ReLU>("relu1");
  body_.emplace<Conv2d>("conv1", in_channels, mid, 1);
  body_.emplace<BatchNorm2d>("bn2", mid);
  body_.emplace<ReLU>("relu2");
  body_.emplace<Conv2d>("conv2", mid, mid, 3);
  body_.emplace<BatchNorm2d>("bn3", mid);
  body_.emplace<ReLU>("relu3");
  body_.emplace<Conv2d>("conv3", mid, out_channels, 1);
  if (in_channels != out_channels) skip_ = std::make_unique<Conv2d>(in_channels, out_channels, 1);
}

Tensor Residual::forward(const Tensor& x, bool training) {
  Tensor y = body_.forward(x, training);
  add_inplace(y, skip_ ? skip_->forward(x, training) : x);
  return y;
}

Tensor Residual::backward(const Tensor& grad_out) {
  Tensor dx = body_.backward(grad_out);
  add_inplace(dx, skip_ ? skip_->backward(grad_out) : grad_out);
  return dx;
}

void Residual::collect(const std::string& prefix, std::vector<Parameter*>& out) {
  body_.collect(prefix, out);
  if (skip_) skip_->collect(prefix + "skip.", out);
}

void Residual::init(std::mt19937_64& rng) {
  body_.init(rng);
  if (skip_) skip_->init(rng);
}

Hourglass::Hourglass(int depth, int channels) {
  if (depth < 1) throw ConfigError("hourglass depth must be >= 1");
  upper_.emplace<Residual>("up1", channels, channels);
  lower_.emplace<MaxPool2d>("pool");
  lower_.emplace<Residual>("low1", channels, channels);
  if (depth > 1) {
    lower_.emplace<Hourglass>("low2", depth - 1, channels);
  } else {
    lower_.emplace<Residual>("low2", channels, channels);
  }
  lower_.emplace<Residual>("low3", channels, channels);
  lower_.emplace<Upsample2x>("up2");
}

Tensor Hourglass::forward(const Tensor& x, bool training) {
  if (x.h % 2 != 0 || x.w % 2 != 0) throw ShapeError("hourglass input must have even spatial size at every level");
  Tensor y = upper_.forward(x, training);
  add_inplace(y, lower_.forward(x, training));
  return y;
}

Tensor Hourglass::backward(const Tensor& grad_out) {
  Tensor dx = upper_.backward(grad_out);
  add_inplace(dx, lower_.backward(grad_out));
  return dx;
}

void Hourglass::collect(const std::string& prefix, std::vector<Parameter*>& out) {
  upper_.collect(prefix, out);
  lower_.collect(prefix, out);
}

void Hourglass::init(std::mt19937_64& rng) {
  upper_.init(rng);
  lower_.init(rng);
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<Parameter*> params, Options opts) : opts_(opts) {
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    params_.push_back(p);
    m_.emplace_back(p->value.n, p->value.c, p->value.h, p->value.w);
    v_.emplace_back(p->value.n, p->value.c, p->value.h, p->value.w);
  }
}

void Adam::zero_grad() {
  for (Parameter* p : params_) p->grad.zero();
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<float>(opts_.beta1), b2 = static_cast<float>(opts_.beta2);
  const auto step_size = static_cast<float>(opts_.lr / bc1);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  const auto eps = static_cast<float>(opts_.eps);
  for (size_t k = 0; k < params_.size(); ++k) {
    auto& value = params_[k]->value.data;
    const auto& grad = params_[k]->grad.data;
    auto& m = m_[k].data;
    auto& v = v_[k].data;
    for (size_t i = 0; i < value.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * grad[i];
      v[i] = b2 * v[i] + (1 - b2) * grad[i] * grad[i];
      value[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_bc2) + eps);
    }
  }
}

}  // namespace dve::nn
