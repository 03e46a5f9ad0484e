// Copyright 2026 The xtra Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Trainable building blocks with hand-written backward passes: affine layers,
// layer normalization, dropout, ReLU MLPs, plus the Adam optimizer and the
// early-stopping rule shared by every training loop.

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "xtra/errors.hpp"
#include "xtra/numerics.hpp"

namespace xtra {

template <class T>
struct Parameter {
  std::string name;
  BasicMatrix<T> value;
  BasicMatrix<T> grad;

  Parameter() = default;
  Parameter(std::string n, BasicMatrix<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.rows(), value.cols()) {}

  void zero_grad() { grad.fill(T(0)); }

  template <class U>
  Parameter<U> cast() const {
    return Parameter<U>(name, value.template cast<U>());
  }
};

template <class T>
using ParameterList = std::vector<Parameter<T>*>;

template <class T>
void zero_grads(const ParameterList<T>& params) {
  for (auto* p : params) p->zero_grad();
}

template <class T>
BasicMatrix<T> hadamard(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  require_same_shape(a, b, "hadamard");
  BasicMatrix<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= b.data()[i];
  return out;
}

// Inverted dropout: kept units are scaled by 1 / (1 - rate) at train time so
// evaluation needs no rescaling.
template <class T>
BasicMatrix<T> dropout_mask(std::size_t rows, std::size_t cols, double rate, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("dropout rate must be in [0, 1)");
  BasicMatrix<T> mask(rows, cols);
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& m : mask.data()) m = rng.uniform() >= rate ? keep : T(0);
  return mask;
}

// y = x W + b with W stored in x out.
template <class T>
struct Linear {
  using scalar_type = T;

  Parameter<T> weight;
  std::optional<Parameter<T>> bias;

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, bool with_bias, Rng& rng)
      : weight(name + ".weight", BasicMatrix<T>(in, out)) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& w : weight.value.data()) w = static_cast<T>(rng.uniform(-bound, bound));
    if (with_bias) bias.emplace(name + ".bias", BasicMatrix<T>(1, out));
  }

  static Linear zeros(const std::string& name, std::size_t in, std::size_t out, bool with_bias) {
    Linear l;
    l.weight = Parameter<T>(name + ".weight", BasicMatrix<T>(in, out));
    if (with_bias) l.bias.emplace(name + ".bias", BasicMatrix<T>(1, out));
    return l;
  }

  std::size_t in_features() const { return weight.value.rows(); }
  std::size_t out_features() const { return weight.value.cols(); }

  BasicMatrix<T> forward(const BasicMatrix<T>& x) const {
    if (x.cols() != in_features()) {
      throw DimensionError(weight.name + ": input " + x.shape() + " does not match weight " + weight.value.shape());
    }
    BasicMatrix<T> y = matmul(x, weight.value);
    if (bias) add_row_inplace(y, bias->value);
    return y;
  }

  // Accumulates parameter gradients and returns dL/dx (empty when not needed).
  BasicMatrix<T> backward(const BasicMatrix<T>& x, const BasicMatrix<T>& grad_out, bool need_input_grad = true) {
    add_inplace(weight.grad, matmul_tn(x, grad_out));
    if (bias) add_inplace(bias->grad, column_sums(grad_out));
    if (!need_input_grad) return {};
    return matmul_nt(grad_out, weight.value);
  }

  ParameterList<T> parameters() {
    ParameterList<T> out{&weight};
    if (bias) out.push_back(&*bias);
    return out;
  }

  template <class U>
  Linear<U> cast() const {
    Linear<U> l;
    l.weight = weight.template cast<U>();
    if (bias) l.bias = bias->template cast<U>();
    return l;
  }
};

template <class T>
struct LayerNorm {
  using scalar_type = T;

  struct Cache {
    BasicMatrix<T> normalized;
    std::vector<double> inv_std;
  };

  Parameter<T> gain;
  Parameter<T> bias;
  double eps = 1e-5;

  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t dim)
      : gain(name + ".gain", BasicMatrix<T>(1, dim)), bias(name + ".bias", BasicMatrix<T>(1, dim)) {
    gain.value.fill(T(1));
  }

  BasicMatrix<T> forward(const BasicMatrix<T>& x, Cache* cache = nullptr) const {
    const std::size_t d = gain.value.cols();
    if (x.cols() != d) throw DimensionError(gain.name + ": input " + x.shape() + " expects width " + std::to_string(d));
    BasicMatrix<T> y(x.rows(), d);
    if (cache) {
      cache->normalized = BasicMatrix<T>(x.rows(), d);
      cache->inv_std.assign(x.rows(), 0.0);
    }
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto r = x.row(i);
      double mean = 0.0;
      for (auto v : r) mean += static_cast<double>(v);
      mean /= static_cast<double>(d);
      double var = 0.0;
      for (auto v : r) var += (static_cast<double>(v) - mean) * (static_cast<double>(v) - mean);
      var /= static_cast<double>(d);
      const double inv_std = 1.0 / std::sqrt(var + eps);
      for (std::size_t j = 0; j < d; ++j) {
        const double xhat = (static_cast<double>(r[j]) - mean) * inv_std;
        if (cache) cache->normalized(i, j) = static_cast<T>(xhat);
        y(i, j) = static_cast<T>(static_cast<double>(gain.value(0, j)) * xhat + static_cast<double>(bias.value(0, j)));
      }
      if (cache) cache->inv_std[i] = inv_std;
    }
    return y;
  }

  BasicMatrix<T> backward(const Cache& cache, const BasicMatrix<T>& grad_out, bool need_input_grad = true) {
    const std::size_t d = gain.value.cols();
    const double n = static_cast<double>(d);
    BasicMatrix<T> dx;
    if (need_input_grad) dx = BasicMatrix<T>(grad_out.rows(), d);
    std::vector<double> dxhat(d);
    for (std::size_t i = 0; i < grad_out.rows(); ++i) {
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double g = static_cast<double>(grad_out(i, j));
        const double xhat = static_cast<double>(cache.normalized(i, j));
        gain.grad(0, j) = static_cast<T>(static_cast<double>(gain.grad(0, j)) + g * xhat);
        bias.grad(0, j) = static_cast<T>(static_cast<double>(bias.grad(0, j)) + g);
        dxhat[j] = g * static_cast<double>(gain.value(0, j));
        sum_dxhat += dxhat[j];
        sum_dxhat_xhat += dxhat[j] * xhat;
      }
      if (!need_input_grad) continue;
      for (std::size_t j = 0; j < d; ++j) {
        const double xhat = static_cast<double>(cache.normalized(i, j));
        dx(i, j) = static_cast<T>(cache.inv_std[i] / n * (n * dxhat[j] - sum_dxhat - xhat * sum_dxhat_xhat));
      }
    }
    return dx;
  }

  ParameterList<T> parameters() { return {&gain, &bias}; }

  template <class U>
  LayerNorm<U> cast() const {
    LayerNorm<U> l;
    l.gain = gain.template cast<U>();
    l.bias = bias.template cast<U>();
    l.eps = eps;
    return l;
  }
};

// Stack of affine layers with ReLU between them; the last layer emits logits.
// Optional inverted dropout after every hidden activation in train mode.
template <class T>
struct Mlp {
  using scalar_type = T;

  struct Cache {
    std::vector<BasicMatrix<T>> inputs;  // input to each layer
    std::vector<BasicMatrix<T>> pre;     // pre-activation of each hidden layer
    std::vector<BasicMatrix<T>> masks;   // dropout masks (empty in eval mode)
  };

  std::vector<Linear<T>> layers;
  double dropout_rate = 0.0;

  Mlp() = default;
  Mlp(const std::string& name, const std::vector<std::size_t>& widths, Rng& rng, double dropout = 0.0)
      : dropout_rate(dropout) {
    if (widths.size() < 2) throw ParameterError("Mlp needs at least input and output widths");
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      layers.emplace_back(name + ".layer" + std::to_string(i), widths[i], widths[i + 1], true, rng);
    }
  }

  std::size_t in_features() const { return layers.front().in_features(); }
  std::size_t out_features() const { return layers.back().out_features(); }

  // rng == nullptr means eval mode.
  BasicMatrix<T> forward(const BasicMatrix<T>& x, Cache* cache = nullptr, Rng* rng = nullptr) const {
    if (cache) *cache = Cache{};
    BasicMatrix<T> h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (cache) cache->inputs.push_back(h);
      BasicMatrix<T> z = layers[i].forward(h);
      if (i + 1 == layers.size()) return z;
      if (cache) cache->pre.push_back(z);
      h = relu(z);
      if (rng && dropout_rate > 0.0) {
        BasicMatrix<T> mask = dropout_mask<T>(h.rows(), h.cols(), dropout_rate, *rng);
        h = hadamard(h, mask);
        if (cache) cache->masks.push_back(std::move(mask));
      }
    }
    return h;
  }

  BasicMatrix<T> backward(const Cache& cache, const BasicMatrix<T>& grad_logits, bool need_input_grad = true) {
    BasicMatrix<T> g = grad_logits;
    for (std::size_t i = layers.size(); i-- > 0;) {
      const bool want = i > 0 || need_input_grad;
      g = layers[i].backward(cache.inputs[i], g, want);
      if (i == 0) break;
      if (!cache.masks.empty()) g = hadamard(g, cache.masks[i - 1]);
      g = relu_backward(cache.pre[i - 1], g);
    }
    return g;
  }

  ParameterList<T> parameters() {
    ParameterList<T> out;
    for (auto& l : layers)
      for (auto* p : l.parameters()) out.push_back(p);
    return out;
  }

  template <class U>
  Mlp<U> cast() const {
    Mlp<U> m;
    m.dropout_rate = dropout_rate;
    for (const auto& l : layers) m.layers.push_back(l.template cast<U>());
    return m;
  }
};

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Holds raw pointers into a model, so the model must outlive the optimizer
// and must not move while it is in use.
template <class T>
class Adam {
 public:
  Adam(ParameterList<T> params, AdamOptions options) : params_(std::move(params)), opt_(options) {
    for (auto* p : params_) {
      m_.emplace_back(p->value.size(), 0.0);
      v_.emplace_back(p->value.size(), 0.0);
    }
  }

  void zero_grad() { zero_grads(params_); }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto value = params_[k]->value.data();
      auto grad = params_[k]->grad.data();
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = static_cast<double>(grad[i]);
        m[i] = opt_.beta1 * m[i] + (1.0 - opt_.beta1) * g;
        v[i] = opt_.beta2 * v[i] + (1.0 - opt_.beta2) * g * g;
        const double update = opt_.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + opt_.eps);
        value[i] = static_cast<T>(static_cast<double>(value[i]) - update);
      }
    }
  }

  std::uint64_t steps() const { return t_; }

 private:
  ParameterList<T> params_;
  AdamOptions opt_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

struct TrainConfig {
  double learning_rate = 3e-3;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 100;
  std::size_t early_stop_tolerance = 3;
  double dropout_rate = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ParameterError("learning_rate must be positive");
    if (batch_size == 0) throw ParameterError("batch_size must be at least 1");
    if (max_epochs == 0) throw ParameterError("max_epochs must be at least 1");
    if (early_stop_tolerance < 1) throw ParameterError("early_stop_tolerance must be at least 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ParameterError("dropout_rate must be in [0, 1)");
  }
};

// Patience-based stopping: stop once `tolerance` consecutive epochs pass
// without a strict improvement of the monitored value.
class EarlyStopping {
 public:
  EarlyStopping(std::size_t tolerance, bool higher_is_better)
      : tolerance_(tolerance), higher_is_better_(higher_is_better) {
    if (tolerance_ < 1) throw ParameterError("early_stop_tolerance must be at least 1");
  }

  // Returns true when `value` is a new best.
  bool observe(std::size_t epoch, double value) {
    const bool better = !has_best_ || (higher_is_better_ ? value > best_ : value < best_);
    if (better) {
      has_best_ = true;
      best_ = value;
      best_epoch_ = epoch;
      since_best_ = 0;
    } else {
      ++since_best_;
    }
    return better;
  }

  bool should_stop() const { return since_best_ >= tolerance_; }
  std::optional<double> best() const { return has_best_ ? std::optional<double>(best_) : std::nullopt; }
  std::size_t best_epoch() const { return best_epoch_; }

 private:
  std::size_t tolerance_;
  bool higher_is_better_;
  bool has_best_ = false;
  double best_ = 0.0;
  std::size_t best_epoch_ = 0;
  std::size_t since_best_ = 0;
};

}  // namespace xtra
