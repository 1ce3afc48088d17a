#pragma once

// Autoregressive affine flow prior: 3 steps of masked-MLP conditioners with
// the dimension order reversed between steps. Density evaluation runs the
// normalizing direction z -> u in parallel across dimensions; sampling
// inverts each step dimension by dimension.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vdp/errors.hpp"
#include "vdp/nn.hpp"
#include "vdp/rng.hpp"
#include "vdp/tensor.hpp"
#include "vdp/vae.hpp"

namespace vdp {

inline constexpr double kLogScaleClamp = 5.0;
inline constexpr std::size_t kFlowSteps = 3;

struct MaskedDense {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out]
  Tensor mask;    // [out, in], constant 0/1
};

struct MaskedMlp {
  std::vector<MaskedDense> layers;
  Activation hidden = Activation::Tanh;
};

// Conditioner output i (shift) and i+h (log-scale) depend only on inputs
// with index < i under the step's ordering. Each step permutes, transforms,
// and un-permutes, so a zero-conditioner step is exactly the identity map.
struct AffineFlowStep {
  MaskedMlp conditioner;               // h -> 2h
  std::vector<std::size_t> perm;       // applied before the affine transform
  std::vector<std::size_t> inv_perm;   // inv_perm[perm[j]] == j
};

struct FlowPrior {
  std::vector<AffineFlowStep> steps;
  std::size_t latent_dim = 0;
};

namespace detail {

// MADE-style degree assignment. Input i carries degree i+1; hidden units
// cycle degrees 1..h-1 (degree 0 when h == 1, which reduces every
// conditioner output to a learned constant).
inline std::vector<std::size_t> made_hidden_degrees(std::size_t units, std::size_t h) {
  std::vector<std::size_t> deg(units);
  for (std::size_t j = 0; j < units; ++j) deg[j] = h >= 2 ? 1 + (j % (h - 1)) : 0;
  return deg;
}

inline Tensor made_mask(const std::vector<std::size_t>& out_deg,
                        const std::vector<std::size_t>& in_deg, bool output_layer) {
  const std::size_t rows = out_deg.size(), cols = in_deg.size();
  std::vector<double> m(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const bool allow = output_layer ? out_deg[r] > in_deg[c] : out_deg[r] >= in_deg[c];
      m[r * cols + c] = allow ? 1.0 : 0.0;
    }
  }
  return Tensor::from_data({rows, cols}, std::move(m));
}

}  // namespace detail

// Conditioner with two hidden layers of `hidden_width` tanh units. The final
// layer starts at zero so a fresh flow is exactly the identity map.
inline MaskedMlp masked_conditioner_init(std::size_t h, std::size_t hidden_width,
                                         std::uint64_t seed) {
  if (h == 0 || hidden_width == 0) throw ValueError("masked_conditioner_init: zero size");
  Rng rng(seed);
  const std::vector<std::size_t> sizes{h, hidden_width, hidden_width, 2 * h};

  std::vector<std::size_t> in_deg(h);
  for (std::size_t i = 0; i < h; ++i) in_deg[i] = i + 1;
  std::vector<std::size_t> out_deg(2 * h);
  for (std::size_t i = 0; i < 2 * h; ++i) out_deg[i] = (i % h) + 1;

  MaskedMlp mlp;
  std::vector<std::size_t> prev_deg = in_deg;
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
    const std::size_t in = sizes[l];
    const std::size_t out = sizes[l + 1];
    const bool last = l + 2 == sizes.size();
    const std::vector<std::size_t> deg =
        last ? out_deg : detail::made_hidden_degrees(out, h);
    const double a = std::sqrt(6.0 / static_cast<double>(in + out));
    std::vector<double> w(out * in, 0.0);
    if (!last) {
      for (double& v : w) v = (2.0 * uniform_double(rng) - 1.0) * a;
    }
    MaskedDense layer;
    layer.weight = Tensor::parameter({out, in}, std::move(w));
    layer.bias = Tensor::zero_parameter({out});
    layer.mask = detail::made_mask(deg, prev_deg, last);
    mlp.layers.push_back(std::move(layer));
    prev_deg = deg;
  }
  return mlp;
}

inline Tensor masked_forward(const MaskedMlp& mlp, const Tensor& x) {
  Tensor h = x;
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const auto& layer = mlp.layers[l];
    Tensor w_eff = mul(layer.weight, layer.mask);
    h = add_rowvec(matmul(h, transpose(w_eff)), layer.bias);
    if (l + 1 < mlp.layers.size()) h = apply_activation(mlp.hidden, h);
  }
  return h;
}

inline FlowPrior flow_init(std::size_t h, std::size_t hidden_width, std::uint64_t seed) {
  FlowPrior prior;
  prior.latent_dim = h;
  for (std::size_t s = 0; s < kFlowSteps; ++s) {
    AffineFlowStep step;
    step.conditioner = masked_conditioner_init(h, hidden_width, derive_seed(seed, 0x10 + s));
    step.perm.resize(h);
    for (std::size_t i = 0; i < h; ++i) step.perm[i] = s % 2 == 0 ? i : h - 1 - i;
    step.inv_perm.resize(h);
    for (std::size_t i = 0; i < h; ++i) step.inv_perm[step.perm[i]] = i;
    prior.steps.push_back(std::move(step));
  }
  return prior;
}

namespace detail {

struct FlowStepForward {
  Tensor u;       // [n, h]
  Tensor logdet;  // [n], log|det du/dz| contribution of this step
};

inline FlowStepForward flow_step_forward(const AffineFlowStep& step, const Tensor& z) {
  const std::size_t h = step.perm.size();
  Tensor y = permute_cols(z, step.perm);
  Tensor cond = masked_forward(step.conditioner, y);
  Tensor shift = slice_cols(cond, 0, h);
  Tensor logs = clamp(slice_cols(cond, h, h), -kLogScaleClamp, kLogScaleClamp);
  FlowStepForward out;
  out.u = permute_cols(mul(sub(y, shift), exp(negate(logs))), step.inv_perm);
  out.logdet = negate(sum(logs, 1));
  return out;
}

}  // namespace detail

// Full normalizing pass: returns (u, per-row log|det du/dz|).
inline std::pair<Tensor, Tensor> flow_forward(const FlowPrior& prior, const Tensor& z) {
  if (z.rank() != 2 || z.shape()[1] != prior.latent_dim) {
    throw ShapeError("flow_forward: input " + z.shape_string() + " does not match latent_dim " +
                     std::to_string(prior.latent_dim));
  }
  Tensor u = z;
  Tensor logdet = Tensor::zeros({z.shape()[0]});
  for (const auto& step : prior.steps) {
    auto r = detail::flow_step_forward(step, u);
    u = r.u;
    logdet = add(logdet, r.logdet);
  }
  return {u, logdet};
}

// log p(z) = log N(u; 0, I) + sum of per-step log|det|; [batch].
inline Tensor flow_log_prob(const FlowPrior& prior, const Tensor& z) {
  auto [u, logdet] = flow_forward(prior, z);
  Tensor base = mul(sum(add(Tensor::full(u.shape(), kLn2Pi), square(u)), 1),
                    Tensor::scalar(-0.5));
  return add(base, logdet);
}

// Inverts the normalizing direction: u -> z, sequential over dimensions.
inline Tensor flow_invert(const FlowPrior& prior, const Tensor& u_in) {
  NoGradGuard no_grad;
  const std::size_t n = u_in.shape()[0];
  const std::size_t h = prior.latent_dim;
  Tensor u = u_in;
  for (auto it = prior.steps.rbegin(); it != prior.steps.rend(); ++it) {
    const AffineFlowStep& step = *it;
    Tensor w = permute_cols(u, step.perm);  // the step's output in permuted space
    std::vector<double> y(n * h, 0.0);
    for (std::size_t i = 0; i < h; ++i) {
      Tensor cond = masked_forward(step.conditioner, Tensor::from_data({n, h}, y));
      for (std::size_t r = 0; r < n; ++r) {
        const double shift = cond.data()[r * 2 * h + i];
        double logs = cond.data()[r * 2 * h + h + i];
        logs = std::min(std::max(logs, -kLogScaleClamp), kLogScaleClamp);
        y[r * h + i] = w.data()[r * h + i] * std::exp(logs) + shift;
      }
    }
    u = permute_cols(Tensor::from_data({n, h}, std::move(y)), step.inv_perm);
  }
  return u;
}

// Draws u ~ N(0, I) and inverts; deterministic per seed.
inline Tensor flow_sample(const FlowPrior& prior, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ValueError("flow_sample: n must be >= 1");
  Rng rng(seed);
  Tensor u = Tensor::from_data({n, prior.latent_dim}, normal_vector(rng, n * prior.latent_dim));
  return flow_invert(prior, u);
}

inline void collect_parameters(FlowPrior& prior,
                               std::vector<std::pair<std::string, Tensor>>& out) {
  for (std::size_t s = 0; s < prior.steps.size(); ++s) {
    auto& cond = prior.steps[s].conditioner;
    for (std::size_t l = 0; l < cond.layers.size(); ++l) {
      const std::string base = "flow." + std::to_string(s) + "." + std::to_string(l);
      out.emplace_back(base + ".w", cond.layers[l].weight);
      out.emplace_back(base + ".b", cond.layers[l].bias);
    }
  }
}

}  // namespace vdp
