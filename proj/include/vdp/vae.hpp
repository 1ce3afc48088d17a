#pragma once

// Encoder, decoder, reparameterized sampling, and per-sample ELBO terms.
// All operations are row-independent across the batch dimension.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vdp/errors.hpp"
#include "vdp/nn.hpp"
#include "vdp/tensor.hpp"

namespace vdp {

inline constexpr double kLn2Pi = 1.8378770664093454835606594728112;
inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

enum class LikelihoodKind { Gaussian, Bernoulli };

inline const char* to_string(LikelihoodKind k) {
  return k == LikelihoodKind::Gaussian ? "gaussian" : "bernoulli";
}

inline LikelihoodKind likelihood_from_string(const std::string& s) {
  if (s == "gaussian") return LikelihoodKind::Gaussian;
  if (s == "bernoulli") return LikelihoodKind::Bernoulli;
  throw ValueError("unknown likelihood '" + s + "'");
}

struct GaussianPosterior {
  Tensor mu;      // [batch, h]
  Tensor logvar;  // [batch, h], clamped to [kLogVarMin, kLogVarMax]
};

struct LikelihoodParams {
  LikelihoodKind kind = LikelihoodKind::Gaussian;
  Tensor mu;      // gaussian: [batch, d]
  Tensor logvar;  // gaussian: [batch, d]
  Tensor logits;  // bernoulli: [batch, d]
};

struct VaeModel {
  Mlp encoder;           // d -> 2h
  Mlp decoder;           // h -> d (or 2d when decoder_var_heads)
  Tensor decoder_logvar; // [d]; shared Gaussian variance when !decoder_var_heads
  bool decoder_var_heads = false;
  std::size_t latent_dim = 0;
  std::size_t data_dim = 0;
  LikelihoodKind likelihood = LikelihoodKind::Gaussian;
};

inline VaeModel vae_init(std::size_t data_dim, std::size_t latent_dim,
                         const std::vector<std::size_t>& encoder_hidden,
                         const std::vector<std::size_t>& decoder_hidden,
                         LikelihoodKind likelihood, bool decoder_var_heads, Activation activation,
                         std::uint64_t seed) {
  if (data_dim == 0 || latent_dim == 0) throw ValueError("vae_init: dimensions must be positive");
  VaeModel m;
  m.latent_dim = latent_dim;
  m.data_dim = data_dim;
  m.likelihood = likelihood;
  m.decoder_var_heads = likelihood == LikelihoodKind::Gaussian && decoder_var_heads;

  std::vector<std::size_t> enc_sizes{data_dim};
  enc_sizes.insert(enc_sizes.end(), encoder_hidden.begin(), encoder_hidden.end());
  enc_sizes.push_back(2 * latent_dim);
  m.encoder = mlp_init(enc_sizes, activation, derive_seed(seed, 0x01));

  const std::size_t dec_out = m.decoder_var_heads ? 2 * data_dim : data_dim;
  std::vector<std::size_t> dec_sizes{latent_dim};
  dec_sizes.insert(dec_sizes.end(), decoder_hidden.begin(), decoder_hidden.end());
  dec_sizes.push_back(dec_out);
  m.decoder = mlp_init(dec_sizes, activation, derive_seed(seed, 0x02));

  if (likelihood == LikelihoodKind::Gaussian && !m.decoder_var_heads) {
    // Start the shared observation noise well below the (standardized) data
    // scale; otherwise the trivial ignore-the-latent optimum captures
    // training before the latent path opens up.
    m.decoder_logvar = Tensor::parameter({data_dim}, std::vector<double>(data_dim, -4.0));
  }
  return m;
}

inline GaussianPosterior encode(const VaeModel& model, const Tensor& x) {
  if (x.rank() != 2 || x.shape()[1] != model.data_dim) {
    throw ShapeError("encode: input " + x.shape_string() + " does not match data_dim " +
                     std::to_string(model.data_dim));
  }
  Tensor out = mlp_forward(model.encoder, x);
  GaussianPosterior post;
  post.mu = slice_cols(out, 0, model.latent_dim);
  post.logvar = clamp(slice_cols(out, model.latent_dim, model.latent_dim), kLogVarMin, kLogVarMax);
  return post;
}

// z = mu + exp(logvar/2) * noise
inline Tensor reparameterize(const GaussianPosterior& post, const Tensor& noise) {
  if (noise.shape() != post.mu.shape()) {
    throw ShapeError("reparameterize: noise " + noise.shape_string() + " does not match mu " +
                     post.mu.shape_string());
  }
  return add(post.mu, mul(exp(mul(post.logvar, Tensor::scalar(0.5))), noise));
}

inline LikelihoodParams decode(const VaeModel& model, const Tensor& z) {
  if (z.rank() != 2 || z.shape()[1] != model.latent_dim) {
    throw ShapeError("decode: input " + z.shape_string() + " does not match latent_dim " +
                     std::to_string(model.latent_dim));
  }
  Tensor out = mlp_forward(model.decoder, z);
  LikelihoodParams p;
  p.kind = model.likelihood;
  if (model.likelihood == LikelihoodKind::Bernoulli) {
    p.logits = out;
    return p;
  }
  if (model.decoder_var_heads) {
    p.mu = slice_cols(out, 0, model.data_dim);
    p.logvar = clamp(slice_cols(out, model.data_dim, model.data_dim), kLogVarMin, kLogVarMax);
  } else {
    p.mu = out;
    p.logvar = broadcast_rows(clamp(model.decoder_logvar, kLogVarMin, kLogVarMax), z.shape()[0]);
  }
  return p;
}

// Diagonal Gaussian log density per row: -1/2 sum_i (ln 2pi + logvar_i +
// (z_i - mu_i)^2 exp(-logvar_i)).
inline Tensor gaussian_log_density(const Tensor& z, const Tensor& mu, const Tensor& logvar) {
  if (z.shape() != mu.shape() || z.shape() != logvar.shape()) {
    throw ShapeError("gaussian_log_density: shapes " + z.shape_string() + ", " +
                     mu.shape_string() + ", " + logvar.shape_string() + " must agree");
  }
  Tensor sq = square(sub(z, mu));
  Tensor terms = add(add(Tensor::full(z.shape(), kLn2Pi), logvar), mul(sq, exp(negate(logvar))));
  return mul(sum(terms, 1), Tensor::scalar(-0.5));
}

// Per-sample log p(x | likelihood params); [batch].
inline Tensor log_likelihood(const LikelihoodParams& params, const Tensor& x) {
  if (params.kind == LikelihoodKind::Gaussian) {
    if (x.shape() != params.mu.shape()) {
      throw ShapeError("log_likelihood: x " + x.shape_string() + " does not match mu " +
                       params.mu.shape_string());
    }
    return gaussian_log_density(x, params.mu, params.logvar);
  }
  if (x.shape() != params.logits.shape()) {
    throw ShapeError("log_likelihood: x " + x.shape_string() + " does not match logits " +
                     params.logits.shape_string());
  }
  for (double v : x.data()) {
    if (v != 0.0 && v != 1.0) {
      throw DomainError("log_likelihood: bernoulli data must be in {0,1}, got " +
                        std::to_string(v));
    }
  }
  // log sigma(l) = -softplus(-l), log(1 - sigma(l)) = -softplus(l)
  Tensor pos = mul(x, softplus(negate(params.logits)));
  Tensor neg = mul(sub(Tensor::scalar(1.0), x), softplus(params.logits));
  return negate(sum(add(pos, neg), 1));
}

// KL[N(mu, diag exp(logvar)) || N(0, I)] per row; nonnegative, zero iff the
// posterior is standard normal.
inline Tensor kl_diag_gaussian_to_standard(const GaussianPosterior& post) {
  Tensor terms = sub(sub(add(square(post.mu), exp(post.logvar)), Tensor::scalar(1.0)),
                     post.logvar);
  return mul(sum(terms, 1), Tensor::scalar(0.5));
}

inline void collect_parameters(VaeModel& model,
                               std::vector<std::pair<std::string, Tensor>>& out) {
  collect_parameters(model.encoder, "enc", out);
  collect_parameters(model.decoder, "dec", out);
  if (model.decoder_logvar.defined()) out.emplace_back("dec.logvar", model.decoder_logvar);
}

}  // namespace vdp
