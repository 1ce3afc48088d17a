#pragma once

// MLP building blocks and the Adam optimizer.

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vdp/errors.hpp"
#include "vdp/rng.hpp"
#include "vdp/tensor.hpp"

namespace vdp {

enum class Activation { Linear, Relu, Tanh, Softplus };

inline const char* to_string(Activation a) {
  switch (a) {
    case Activation::Linear: return "linear";
    case Activation::Relu: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Softplus: return "softplus";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "linear") return Activation::Linear;
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  if (s == "softplus") return Activation::Softplus;
  throw ValueError("unknown activation '" + s + "'");
}

inline Tensor apply_activation(Activation a, const Tensor& x) {
  switch (a) {
    case Activation::Linear: return x;
    case Activation::Relu: return relu(x);
    case Activation::Tanh: return tanh(x);
    case Activation::Softplus: return softplus(x);
  }
  throw ValueError("unknown activation");
}

struct DenseLayer {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
};

struct Mlp {
  std::vector<DenseLayer> layers;
  Activation hidden = Activation::Relu;
  Activation output = Activation::Linear;
};

inline std::size_t input_width(const Mlp& m) { return m.layers.front().weight.shape()[1]; }
inline std::size_t output_width(const Mlp& m) { return m.layers.back().weight.shape()[0]; }

// Xavier-uniform weights in [-a, a] with a = sqrt(6/(in+out)); zero biases.
// The draw order (layers in order, weights row-major) fixes the byte-exact
// result for a given seed.
inline Mlp mlp_init(const std::vector<std::size_t>& layer_sizes, Activation hidden,
                    std::uint64_t seed, Activation output = Activation::Linear) {
  if (layer_sizes.size() < 2) {
    throw ValueError("mlp_init: need at least input and output sizes, got " +
                     std::to_string(layer_sizes.size()));
  }
  for (auto s : layer_sizes) {
    if (s == 0) throw ValueError("mlp_init: layer sizes must be positive");
  }
  Rng rng(seed);
  Mlp mlp;
  mlp.hidden = hidden;
  mlp.output = output;
  for (std::size_t l = 0; l + 1 < layer_sizes.size(); ++l) {
    const std::size_t in = layer_sizes[l];
    const std::size_t out = layer_sizes[l + 1];
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    std::vector<double> w(out * in);
    for (double& v : w) v = (2.0 * uniform_double(rng) - 1.0) * a;
    DenseLayer layer;
    layer.weight = Tensor::parameter({out, in}, std::move(w));
    layer.bias = Tensor::zero_parameter({out});
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

inline Tensor mlp_forward(const Mlp& mlp, const Tensor& x) {
  if (x.rank() != 2 || x.shape()[1] != input_width(mlp)) {
    throw ShapeError("mlp_forward: input " + x.shape_string() + " does not match first layer [" +
                     std::to_string(input_width(mlp)) + "]");
  }
  Tensor h = x;
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const auto& layer = mlp.layers[l];
    h = add_rowvec(matmul(h, transpose(layer.weight)), layer.bias);
    h = apply_activation(l + 1 == mlp.layers.size() ? mlp.output : mlp.hidden, h);
  }
  return h;
}

inline void collect_parameters(Mlp& mlp, const std::string& prefix,
                               std::vector<std::pair<std::string, Tensor>>& out) {
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    out.emplace_back(prefix + "." + std::to_string(l) + ".w", mlp.layers[l].weight);
    out.emplace_back(prefix + "." + std::to_string(l) + ".b", mlp.layers[l].bias);
  }
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return step_; }

  // Standard update with bias correction. Parameters without a gradient
  // entry are left untouched, moments included.
  void step(const std::vector<Tensor>& params, const Gradients& grads) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (const Tensor& p : params) {
      const std::vector<double>* g = grads.find(p);
      if (!g) continue;
      if (g->size() != p.size()) {
        throw ShapeError("adam: gradient size " + std::to_string(g->size()) +
                         " does not match parameter size " + std::to_string(p.size()));
      }
      Moments& m = moments_[p.impl().get()];
      if (m.m.empty()) {
        m.m.assign(p.size(), 0.0);
        m.v.assign(p.size(), 0.0);
      }
      std::vector<double>& data = const_cast<Tensor&>(p).mutable_data();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double gi = (*g)[i];
        m.m[i] = cfg_.beta1 * m.m[i] + (1.0 - cfg_.beta1) * gi;
        m.v[i] = cfg_.beta2 * m.v[i] + (1.0 - cfg_.beta2) * gi * gi;
        const double mhat = m.m[i] / bc1;
        const double vhat = m.v[i] / bc2;
        data[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  // Checkpoint access.
  const std::vector<double>* moment_m(const Tensor& p) const {
    auto it = moments_.find(p.impl().get());
    return it == moments_.end() || it->second.m.empty() ? nullptr : &it->second.m;
  }
  const std::vector<double>* moment_v(const Tensor& p) const {
    auto it = moments_.find(p.impl().get());
    return it == moments_.end() || it->second.v.empty() ? nullptr : &it->second.v;
  }
  void restore_moments(const Tensor& p, std::vector<double> m, std::vector<double> v) {
    if (m.size() != p.size() || v.size() != p.size()) {
      throw ShapeError("adam: restored moment size does not match parameter size");
    }
    moments_[p.impl().get()] = Moments{std::move(m), std::move(v)};
  }
  void set_steps(std::uint64_t s) { step_ = s; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::unordered_map<const detail::TensorImpl*, Moments> moments_;
};

}  // namespace vdp
