#pragma once

// Tagged union over the three prior families with a uniform
// sample / log-prob-or-bound contract.

#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "vdp/diffusion.hpp"
#include "vdp/errors.hpp"
#include "vdp/flow.hpp"
#include "vdp/rng.hpp"
#include "vdp/tensor.hpp"
#include "vdp/vae.hpp"

namespace vdp {

enum class PriorKind { Gaussian, Flow, Diffusion };

inline const char* to_string(PriorKind k) {
  switch (k) {
    case PriorKind::Gaussian: return "gaussian";
    case PriorKind::Flow: return "flow";
    case PriorKind::Diffusion: return "diffusion";
  }
  return "?";
}

inline PriorKind prior_kind_from_string(const std::string& s) {
  if (s == "gaussian") return PriorKind::Gaussian;
  if (s == "flow") return PriorKind::Flow;
  if (s == "diffusion") return PriorKind::Diffusion;
  throw ValueError("unknown prior kind '" + s + "'");
}

struct GaussianPrior {
  std::size_t latent_dim = 0;
};

using PriorModel = std::variant<GaussianPrior, FlowPrior, DiffusionPrior>;

inline PriorKind prior_kind(const PriorModel& p) {
  if (std::holds_alternative<GaussianPrior>(p)) return PriorKind::Gaussian;
  if (std::holds_alternative<FlowPrior>(p)) return PriorKind::Flow;
  return PriorKind::Diffusion;
}

inline std::size_t prior_latent_dim(const PriorModel& p) {
  return std::visit([](const auto& m) { return m.latent_dim; }, p);
}

// Draws n latent vectors from the prior (exact for Gaussian and flow,
// ancestral for diffusion). Deterministic per seed.
inline Tensor prior_sample(const PriorModel& p, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ValueError("prior_sample: n must be >= 1");
  if (const auto* g = std::get_if<GaussianPrior>(&p)) {
    Rng rng(seed);
    return Tensor::from_data({n, g->latent_dim}, normal_vector(rng, n * g->latent_dim));
  }
  if (const auto* f = std::get_if<FlowPrior>(&p)) return flow_sample(*f, n, seed);
  return ancestral_sample(std::get<DiffusionPrior>(p), n, seed);
}

// Per-row log p(z0) where tractable, or the stepwise lower bound for the
// diffusion prior. Used by held-out bound evaluation.
inline std::vector<double> prior_log_prob_bound(const PriorModel& p, const Tensor& z0,
                                                std::uint64_t seed) {
  NoGradGuard no_grad;
  const std::size_t n = z0.shape()[0];
  std::vector<double> out(n);
  if (const auto* g = std::get_if<GaussianPrior>(&p)) {
    const std::size_t h = g->latent_dim;
    for (std::size_t r = 0; r < n; ++r) {
      double acc = 0.0;
      for (std::size_t j = 0; j < h; ++j) {
        const double z = z0.data()[r * h + j];
        acc += kLn2Pi + z * z;
      }
      out[r] = -0.5 * acc;
    }
    return out;
  }
  if (const auto* f = std::get_if<FlowPrior>(&p)) {
    Tensor lp = flow_log_prob(*f, z0);
    return lp.data();
  }
  const auto terms = ddpm_elbo_terms(std::get<DiffusionPrior>(p), z0, seed);
  for (std::size_t r = 0; r < n; ++r) out[r] = terms[r].bound();
  return out;
}

inline void collect_parameters(PriorModel& p,
                               std::vector<std::pair<std::string, Tensor>>& out) {
  if (auto* f = std::get_if<FlowPrior>(&p)) collect_parameters(*f, out);
  if (auto* d = std::get_if<DiffusionPrior>(&p)) collect_parameters(*d, out);
}

}  // namespace vdp
