#pragma once

// Joint objective, epoch loop with validation-based model selection, and
// checkpoint assembly/restore.
//
// The minimized objective per prior family:
//   gaussian:  -E[log p(x|z0)] + KL[q(z0|x) || N(0,I)]          (closed form)
//   flow:      -E[log p(x|z0)] + E[log q(z0|x)] - E[log p_f(z0)]
//   diffusion: -E[log p(x|z0)] + E[log q(z0|x)] + mean-matching loss at a
//              uniformly drawn timestep
// Gradients flow jointly into encoder, decoder, and prior parameters.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "vdp/checkpoint.hpp"
#include "vdp/config.hpp"
#include "vdp/data.hpp"
#include "vdp/diffusion.hpp"
#include "vdp/errors.hpp"
#include "vdp/flow.hpp"
#include "vdp/nn.hpp"
#include "vdp/prior.hpp"
#include "vdp/rng.hpp"
#include "vdp/tensor.hpp"
#include "vdp/vae.hpp"

namespace vdp {

inline constexpr double kGradClipNorm = 100.0;

struct LossBreakdown {
  double total = 0.0;
  double reconstruction = 0.0;  // E[log p(x|z0)]
  double entropy = 0.0;         // -E[log q(z0|x)], Monte Carlo at the sample
  double prior_term = 0.0;      // KL / -E[log p_f] / mean-matching loss

  // The active prior's recombination formula; matches `total` to 1e-10.
  double recombined(PriorKind kind) const {
    if (kind == PriorKind::Gaussian) return -reconstruction + prior_term;
    return -reconstruction - entropy + prior_term;
  }
};

struct JointLossResult {
  Tensor total;  // rank-0, graph-attached
  LossBreakdown parts;
};

struct Models {
  VaeModel vae;
  PriorModel prior;
};

inline Models build_models(const TrainConfig& cfg, std::size_t data_dim) {
  Models m;
  m.vae = vae_init(data_dim, cfg.latent_dim, cfg.encoder_hidden, cfg.decoder_hidden,
                   cfg.likelihood, cfg.decoder_var_heads, cfg.activation, cfg.seed);
  switch (cfg.prior) {
    case PriorKind::Gaussian:
      m.prior = GaussianPrior{cfg.latent_dim};
      break;
    case PriorKind::Flow:
      m.prior = flow_init(cfg.latent_dim, cfg.flow_hidden, cfg.seed);
      break;
    case PriorKind::Diffusion:
      m.prior = diffusion_init(
          cfg.latent_dim, cfg.denoiser_hidden,
          make_schedule(ScheduleKind::Linear, cfg.diffusion_T, cfg.beta_min, cfg.beta_max),
          cfg.activation, cfg.seed);
      break;
  }
  return m;
}

inline std::vector<std::pair<std::string, Tensor>> named_parameters(Models& m) {
  std::vector<std::pair<std::string, Tensor>> out;
  collect_parameters(m.vae, out);
  collect_parameters(m.prior, out);
  return out;
}

inline std::vector<Tensor> parameter_tensors(Models& m) {
  std::vector<Tensor> out;
  for (auto& kv : named_parameters(m)) out.push_back(kv.second);
  return out;
}

// Explicit randomness for the objective; lets tests pin every draw.
struct JointLossNoise {
  Tensor encoder_noise;         // [batch, h]
  std::vector<std::size_t> ts;  // diffusion timesteps, size 1 or batch
  Tensor diffusion_noise;       // [batch, h]
};

inline JointLossResult joint_loss_with_noise(Models& m, const Tensor& x, const TrainConfig& cfg,
                                             const JointLossNoise& noise) {
  if (x.rank() != 2 || x.shape()[0] == 0) {
    throw ValueError("joint_loss: batch must be a nonempty [n,d] tensor");
  }
  const std::size_t n = x.shape()[0];
  GaussianPosterior post = encode(m.vae, x);
  Tensor z0 = reparameterize(post, noise.encoder_noise);
  Tensor recon_rows = log_likelihood(decode(m.vae, z0), x);
  Tensor recon = mean(recon_rows);

  JointLossResult result;
  const PriorKind kind = prior_kind(m.prior);
  Tensor logq;  // mean E[log q(z0|x)] at the sample, when needed on the graph
  if (kind == PriorKind::Gaussian) {
    Tensor kl = mean(kl_diag_gaussian_to_standard(post));
    result.total = add(negate(recon), kl);
    result.parts.prior_term = kl.value();
    // Diagnostic only; the closed-form KL already accounts for the entropy.
    NoGradGuard no_grad;
    Tensor lq = mean(gaussian_log_density(z0.detach(), post.mu.detach(), post.logvar.detach()));
    result.parts.entropy = -lq.value();
  } else {
    logq = mean(gaussian_log_density(z0, post.mu, post.logvar));
    result.parts.entropy = -logq.value();
    if (kind == PriorKind::Flow) {
      Tensor flp = mean(flow_log_prob(std::get<FlowPrior>(m.prior), z0));
      result.parts.prior_term = -flp.value();
      result.total = sub(add(negate(recon), logq), flp);
    } else {
      const auto& dp = std::get<DiffusionPrior>(m.prior);
      std::vector<std::size_t> ts = noise.ts;
      if (ts.size() == 1) ts.assign(n, ts[0]);
      Tensor penalty = ddpm_simple_loss_rows(dp, z0, ts, noise.diffusion_noise);
      result.parts.prior_term = penalty.value();
      result.total = add(add(negate(recon), logq), penalty);
    }
  }
  result.parts.reconstruction = recon.value();
  result.parts.total = result.total.value();
  if (!std::isfinite(result.parts.total)) {
    throw NumericError("joint loss is non-finite: total=" + std::to_string(result.parts.total) +
                       " recon=" + std::to_string(result.parts.reconstruction) +
                       " entropy=" + std::to_string(result.parts.entropy) +
                       " prior=" + std::to_string(result.parts.prior_term));
  }
  return result;
}

// Draw order: encoder noise row-major, then one timestep (or one per row
// under per_element_t), then diffusion noise row-major.
inline JointLossNoise draw_joint_loss_noise(const TrainConfig& cfg, std::size_t n, Rng& rng) {
  JointLossNoise noise;
  noise.encoder_noise =
      Tensor::from_data({n, cfg.latent_dim}, normal_vector(rng, n * cfg.latent_dim));
  if (cfg.prior == PriorKind::Diffusion) {
    const std::size_t count = cfg.per_element_t ? n : 1;
    noise.ts.resize(count);
    for (auto& t : noise.ts) t = 1 + static_cast<std::size_t>(uniform_index(rng, cfg.diffusion_T));
    noise.diffusion_noise =
        Tensor::from_data({n, cfg.latent_dim}, normal_vector(rng, n * cfg.latent_dim));
  }
  return noise;
}

inline JointLossResult joint_loss(Models& m, const Tensor& x, const TrainConfig& cfg, Rng& rng) {
  return joint_loss_with_noise(m, x, cfg, draw_joint_loss_noise(cfg, x.shape()[0], rng));
}

// ---------------------------------------------------------------------------
// Checkpoint assembly / restore

inline Checkpoint make_checkpoint(Models& m, const Adam& adam, const TrainConfig& cfg,
                                  std::uint64_t epoch, const std::vector<double>& val_history) {
  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.epoch = epoch;
  ckpt.adam_steps = adam.steps();
  ckpt.val_history = val_history;
  for (auto& [name, tensor] : named_parameters(m)) {
    ckpt.params.push_back({name, tensor.shape(), tensor.data()});
    const std::vector<double>* mm = adam.moment_m(tensor);
    const std::vector<double>* mv = adam.moment_v(tensor);
    std::vector<double> zeros(tensor.size(), 0.0);
    ckpt.adam_m.push_back({name, tensor.shape(), mm ? *mm : zeros});
    ckpt.adam_v.push_back({name, tensor.shape(), mv ? *mv : zeros});
  }
  return ckpt;
}

// Rebuilds models from the stored config and overwrites every parameter from
// the checkpoint. Missing or misshapen tensors are hard errors.
inline Models restore_models(const Checkpoint& ckpt, std::size_t data_dim) {
  Models m = build_models(ckpt.config, data_dim);
  auto named = named_parameters(m);
  if (named.size() != ckpt.params.size()) {
    throw CheckpointError(CheckpointError::Kind::MissingTensor,
                          "checkpoint holds " + std::to_string(ckpt.params.size()) +
                              " parameter tensors, the configured model wants " +
                              std::to_string(named.size()));
  }
  for (std::size_t i = 0; i < named.size(); ++i) {
    const NamedTensor& stored = ckpt.params[i];
    auto& [name, tensor] = named[i];
    if (stored.name != name) {
      throw CheckpointError(CheckpointError::Kind::MissingTensor,
                            "checkpoint tensor #" + std::to_string(i) + " is named '" +
                                stored.name + "', expected '" + name + "'");
    }
    if (stored.shape != tensor.shape()) {
      throw CheckpointError(CheckpointError::Kind::Malformed,
                            "checkpoint tensor '" + name + "' has the wrong shape");
    }
    tensor.mutable_data() = stored.data;
  }
  return m;
}

inline Adam restore_adam(const Checkpoint& ckpt, Models& m) {
  Adam adam(AdamConfig{ckpt.config.lr, 0.9, 0.999, 1e-8});
  adam.set_steps(ckpt.adam_steps);
  auto named = named_parameters(m);
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (i < ckpt.adam_m.size() && i < ckpt.adam_v.size()) {
      adam.restore_moments(named[i].second, ckpt.adam_m[i].data, ckpt.adam_v[i].data);
    }
  }
  return adam;
}

// Infers the data dimension a checkpoint was trained against from its stored
// encoder input layer.
inline std::size_t checkpoint_data_dim(const Checkpoint& ckpt) {
  for (const auto& t : ckpt.params) {
    if (t.name == "enc.0.w") return t.shape.at(1);
  }
  throw CheckpointError(CheckpointError::Kind::MissingTensor,
                        "checkpoint has no encoder weights");
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRow {
  std::size_t epoch = 0;
  std::string split;  // "train" or "val"
  LossBreakdown parts;
};

struct TrainResult {
  Checkpoint best;
  Checkpoint final;
  std::vector<EpochRow> history;
  std::size_t best_epoch = 0;
  Dataset dataset;
};

inline void write_metrics_csv(const std::string& path, const std::vector<EpochRow>& history) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "epoch,split,total,reconstruction,entropy,prior_term\n";
  for (const auto& row : history) {
    out << row.epoch << ',' << row.split << ',' << detail::format_g17(row.parts.total) << ','
        << detail::format_g17(row.parts.reconstruction) << ','
        << detail::format_g17(row.parts.entropy) << ','
        << detail::format_g17(row.parts.prior_term) << "\n";
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

inline Dataset load_dataset(const TrainConfig& cfg) {
  return load_dataset(cfg.dataset, cfg.dataset_n, cfg.binarize_threshold, cfg.val_fraction,
                      derive_seed(cfg.seed, 0xDA7A));
}

namespace detail {

inline LossBreakdown weighted_mean(const std::vector<std::pair<LossBreakdown, std::size_t>>& parts) {
  LossBreakdown acc;
  double total_n = 0.0;
  for (const auto& [p, n] : parts) {
    const double w = static_cast<double>(n);
    acc.total += w * p.total;
    acc.reconstruction += w * p.reconstruction;
    acc.entropy += w * p.entropy;
    acc.prior_term += w * p.prior_term;
    total_n += w;
  }
  acc.total /= total_n;
  acc.reconstruction /= total_n;
  acc.entropy /= total_n;
  acc.prior_term /= total_n;
  return acc;
}

}  // namespace detail

// Mean objective over a fixed index set, fresh seeded noise; used for the
// per-epoch validation score (the same seed every epoch keeps scores
// comparable across epochs).
inline LossBreakdown evaluate_objective(Models& m, const Dataset& ds,
                                        const std::vector<std::size_t>& idx,
                                        const TrainConfig& cfg, std::uint64_t seed) {
  NoGradGuard no_grad;
  Rng rng(seed);
  std::vector<std::pair<LossBreakdown, std::size_t>> parts;
  const std::size_t chunk = 1024;
  for (std::size_t off = 0; off < idx.size(); off += chunk) {
    const std::size_t nb = std::min(chunk, idx.size() - off);
    std::vector<std::size_t> batch_idx(idx.begin() + static_cast<std::ptrdiff_t>(off),
                                       idx.begin() + static_cast<std::ptrdiff_t>(off + nb));
    Tensor x = dataset_rows(ds, batch_idx);
    JointLossResult r = joint_loss_with_noise(m, x, cfg, draw_joint_loss_noise(cfg, nb, rng));
    parts.emplace_back(r.parts, nb);
  }
  return detail::weighted_mean(parts);
}

// Shuffled minibatch Adam for cfg.epochs epochs, retaining the best
// validation checkpoint. Fully deterministic per config+seed. When
// cfg.out_dir is nonempty, writes best.ckpt, final.ckpt, and metrics.csv.
inline TrainResult train(const TrainConfig& cfg, std::ostream* progress = nullptr) {
  validate(cfg);
  TrainResult result;
  result.dataset = load_dataset(cfg);
  const Dataset& ds = result.dataset;
  if (ds.train_idx.empty() || ds.val_idx.empty()) {
    throw ValueError("train: dataset '" + cfg.dataset + "' has an empty train or val split");
  }

  Models models = build_models(cfg, ds.d);
  std::vector<Tensor> tensors = parameter_tensors(models);
  Adam adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});

  Rng train_rng(derive_seed(cfg.seed, 0x7124));
  const std::uint64_t val_seed = derive_seed(cfg.seed, 0xE44A);
  std::vector<double> val_history;
  double best_val = 0.0;

  std::vector<std::size_t> order = ds.train_idx;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    deterministic_shuffle(order, train_rng);
    std::vector<std::pair<LossBreakdown, std::size_t>> epoch_parts;
    for (std::size_t off = 0; off < order.size(); off += cfg.batch_size) {
      const std::size_t nb = std::min(cfg.batch_size, order.size() - off);
      std::vector<std::size_t> batch_idx(order.begin() + static_cast<std::ptrdiff_t>(off),
                                         order.begin() + static_cast<std::ptrdiff_t>(off + nb));
      Tensor x = dataset_rows(ds, batch_idx);
      JointLossResult r = joint_loss(models, x, cfg, train_rng);
      epoch_parts.emplace_back(r.parts, nb);

      Gradients grads = backward(r.total);
      double sq_norm = 0.0;
      for (const Tensor& p : tensors) {
        if (const std::vector<double>* g = grads.find(p)) {
          for (double v : *g) sq_norm += v * v;
        }
      }
      const double norm = std::sqrt(sq_norm);
      if (norm > kGradClipNorm) grads.scale_all(kGradClipNorm / norm);
      adam.step(tensors, grads);
    }

    const LossBreakdown train_parts = detail::weighted_mean(epoch_parts);
    const LossBreakdown val_parts = evaluate_objective(models, ds, ds.val_idx, cfg, val_seed);
    result.history.push_back({epoch, "train", train_parts});
    result.history.push_back({epoch, "val", val_parts});
    val_history.push_back(val_parts.total);

    if (epoch == 1 || val_parts.total < best_val) {
      best_val = val_parts.total;
      result.best_epoch = epoch;
      result.best = make_checkpoint(models, adam, cfg, epoch, val_history);
    }
    if (progress) {
      (*progress) << "epoch " << epoch << "  train " << train_parts.total << "  val "
                  << val_parts.total << "  (recon " << train_parts.reconstruction << ", entropy "
                  << train_parts.entropy << ", prior " << train_parts.prior_term << ")\n";
    }
  }
  result.final = make_checkpoint(models, adam, cfg, cfg.epochs, val_history);

  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    checkpoint_save(result.best, cfg.out_dir + "/best.ckpt");
    checkpoint_save(result.final, cfg.out_dir + "/final.ckpt");
    write_metrics_csv(cfg.out_dir + "/metrics.csv", result.history);
  }
  return result;
}

}  // namespace vdp
