// vdp: train / sample / eval / diagnose for VAEs with learnable priors.
//
// Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numeric
// failure. The VDP_OUT environment variable provides the default output root
// when neither --out nor the config names one.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vdp/vdp.hpp"

namespace {

namespace fs = std::filesystem;

std::string default_out_dir(const std::string& leaf) {
  const char* root = std::getenv("VDP_OUT");
  return (root ? std::string(root) : std::string(".")) + "/" + leaf;
}

vdp::TrainConfig read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw vdp::IoError("cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return vdp::parse_config(ss.str());
}

int run_train(const std::string& config_path, const std::string& out_override) {
  vdp::TrainConfig cfg = read_config_file(config_path);
  if (!out_override.empty()) {
    cfg.out_dir = out_override;
  } else if (cfg.out_dir.empty()) {
    cfg.out_dir = default_out_dir(fs::path(config_path).stem().string());
  }
  std::cout << "training " << vdp::to_string(cfg.prior) << "-prior model on " << cfg.dataset
            << " (h=" << cfg.latent_dim << ", epochs=" << cfg.epochs << ", seed=" << cfg.seed
            << ")\n";
  vdp::TrainResult result = vdp::train(cfg, &std::cout);
  std::cout << "best epoch " << result.best_epoch << " (val "
            << result.best.val_history.at(result.best_epoch - 1) << ")\n"
            << "wrote " << cfg.out_dir << "/best.ckpt, final.ckpt, metrics.csv\n";
  return 0;
}

struct LoadedModel {
  vdp::Checkpoint ckpt;
  vdp::Models models;
};

LoadedModel load_model(const std::string& ckpt_path) {
  LoadedModel lm{vdp::checkpoint_load(ckpt_path), {}};
  lm.models = vdp::restore_models(lm.ckpt, vdp::checkpoint_data_dim(lm.ckpt));
  return lm;
}

// Decoded observation-space samples: decoder means by default, likelihood
// draws with draw_pixels.
vdp::Tensor decode_samples(vdp::Models& m, const vdp::Tensor& z, bool draw_pixels,
                           std::uint64_t seed) {
  vdp::NoGradGuard no_grad;
  vdp::LikelihoodParams p = vdp::decode(m.vae, z);
  if (m.vae.likelihood == vdp::LikelihoodKind::Gaussian) {
    if (!draw_pixels) return p.mu;
    vdp::Rng rng(vdp::derive_seed(seed, 0xD12A));
    std::vector<double> out = p.mu.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] += std::exp(0.5 * p.logvar.data()[i]) * vdp::normal(rng);
    }
    return vdp::Tensor::from_data(p.mu.shape(), std::move(out));
  }
  // Bernoulli: probabilities, or draws under draw_pixels.
  std::vector<double> probs(p.logits.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    probs[i] = vdp::detail::sigmoid_value(p.logits.data()[i]);
  }
  if (draw_pixels) {
    vdp::Rng rng(vdp::derive_seed(seed, 0xD12A));
    for (double& v : probs) v = vdp::uniform_double(rng) < v ? 1.0 : 0.0;
  }
  return vdp::Tensor::from_data(p.logits.shape(), std::move(probs));
}

void write_ppm_grid(const std::string& path, const vdp::Tensor& samples, std::size_t rows,
                    std::size_t cols) {
  const std::size_t n = samples.shape()[0];
  const std::size_t d = samples.shape()[1];
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(d))));
  if (side * side != d) {
    throw vdp::ValueError("ppm output wants a square pixel count, d = " + std::to_string(d));
  }
  if (rows == 0 || cols == 0 || rows * cols > n) {
    throw vdp::ValueError("grid " + std::to_string(rows) + "x" + std::to_string(cols) +
                          " needs more samples than --n provides");
  }
  const std::size_t width = cols * side + (cols - 1);
  const std::size_t height = rows * side + (rows - 1);
  std::vector<unsigned char> img(width * height * 3, 0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double* tile = samples.data().data() + (r * cols + c) * d;
      for (std::size_t y = 0; y < side; ++y) {
        for (std::size_t x = 0; x < side; ++x) {
          const double v = std::min(std::max(tile[y * side + x], 0.0), 1.0);
          const auto byte = static_cast<unsigned char>(std::lround(v * 255.0));
          const std::size_t px = (r * (side + 1) + y) * width + c * (side + 1) + x;
          img[px * 3] = img[px * 3 + 1] = img[px * 3 + 2] = byte;
        }
      }
    }
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw vdp::IoError("cannot write '" + path + "'");
  out << "P6\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.data()), static_cast<std::streamsize>(img.size()));
  if (!out) throw vdp::IoError("write failed for '" + path + "'");
}

int run_sample(const std::string& ckpt_path, std::size_t n, std::uint64_t seed,
               const std::string& format, const std::vector<std::size_t>& grid,
               std::string out_path, bool draw_pixels) {
  LoadedModel lm = load_model(ckpt_path);
  vdp::Tensor z = vdp::prior_sample(lm.models.prior, n, vdp::derive_seed(seed, 0x5A11));
  vdp::Tensor x = decode_samples(lm.models, z, draw_pixels, seed);
  if (format == "csv") {
    if (out_path.empty()) out_path = "samples.csv";
    vdp::save_csv(out_path, x);
  } else {
    if (out_path.empty()) out_path = "samples.ppm";
    if (grid.size() != 2) throw vdp::ValueError("--format ppm requires --grid ROWS COLS");
    write_ppm_grid(out_path, x, grid[0], grid[1]);
  }
  std::cout << "wrote " << out_path << " (" << n << " samples)\n";
  return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& dataset_override,
             const std::string& split, const std::string& metric, std::size_t n_samples,
             std::size_t n_mc, std::uint64_t seed, const std::string& out_csv) {
  LoadedModel lm = load_model(ckpt_path);
  vdp::TrainConfig cfg = lm.ckpt.config;
  if (!dataset_override.empty()) cfg.dataset = dataset_override;
  vdp::Dataset ds = vdp::load_dataset(cfg);
  if (ds.d != lm.models.vae.data_dim) {
    throw vdp::ShapeError("dataset width " + std::to_string(ds.d) +
                          " does not match the checkpoint's data_dim " +
                          std::to_string(lm.models.vae.data_dim));
  }
  const std::vector<std::size_t>& idx = split == "train" ? ds.train_idx
                                        : split == "val" ? ds.val_idx
                                                         : ds.test_idx;
  if (idx.empty()) throw vdp::ValueError("split '" + split + "' is empty");

  vdp::MetricReport report;
  if (metric == "elbo") {
    report = vdp::heldout_elbo(lm.models.vae, lm.models.prior, ds, idx, n_mc, seed);
  } else if (metric == "mmd") {
    vdp::Tensor z = vdp::prior_sample(lm.models.prior, n_samples, vdp::derive_seed(seed, 0x5A11));
    vdp::Tensor xs = decode_samples(lm.models, z, false, seed);
    report = vdp::mmd_rbf(xs, vdp::dataset_rows(ds, idx), std::nullopt, 100,
                          vdp::derive_seed(seed, 0xB007));
  } else {
    throw vdp::ValueError("unknown metric '" + metric + "' (valid: elbo, mmd)");
  }

  std::cout << report.metric << "," << vdp::detail::format_g17(report.value) << ","
            << vdp::detail::format_g17(report.stderr_value) << "\n";
  if (!out_csv.empty()) {
    const bool fresh = !fs::exists(out_csv);
    std::ofstream out(out_csv, std::ios::app);
    if (!out) throw vdp::IoError("cannot write '" + out_csv + "'");
    if (fresh) out << "metric,value,stderr\n";
    out << report.metric << "," << vdp::detail::format_g17(report.value) << ","
        << vdp::detail::format_g17(report.stderr_value) << "\n";
  }
  return 0;
}

int run_diagnose(const std::string& ckpt_path, std::size_t n_mc, std::uint64_t seed) {
  LoadedModel lm = load_model(ckpt_path);
  if (vdp::prior_kind(lm.models.prior) != vdp::PriorKind::Diffusion) {
    throw vdp::CheckpointError(vdp::CheckpointError::Kind::PriorMismatch,
                               "diagnose requires a diffusion-prior checkpoint, this one is '" +
                                   std::string(vdp::to_string(vdp::prior_kind(lm.models.prior))) +
                                   "'");
  }
  const auto& prior = std::get<vdp::DiffusionPrior>(lm.models.prior);
  vdp::Dataset ds = vdp::load_dataset(lm.ckpt.config);
  vdp::NoGradGuard no_grad;
  vdp::Tensor x = vdp::dataset_rows(ds, ds.val_idx);
  vdp::GaussianPosterior post = vdp::encode(lm.models.vae, x);
  const std::size_t n = x.shape()[0];
  const std::size_t h = lm.models.vae.latent_dim;
  const std::size_t T = prior.schedule.T;

  // Per-t KL decomposition of the latent bound, averaged over encoded
  // validation data and n_mc posterior samples. Two groupings of the same
  // per-sample terms: the printed lines and the total bound.
  double recon = 0.0, endpoint = 0.0;
  std::vector<double> kl(T >= 2 ? T - 1 : 0, 0.0);
  double bound_total = 0.0;
  std::size_t count = 0;
  vdp::Rng rng(vdp::derive_seed(seed, 0xD1A6));
  for (std::size_t s = 0; s < n_mc; ++s) {
    vdp::Tensor noise = vdp::Tensor::from_data({n, h}, vdp::normal_vector(rng, n * h));
    vdp::Tensor z0 = vdp::reparameterize(post, noise);
    const auto terms = vdp::ddpm_elbo_terms(prior, z0, rng());
    for (const auto& t : terms) {
      recon += t.recon;
      endpoint += t.endpoint_kl;
      for (std::size_t k = 0; k < kl.size(); ++k) kl[k] += t.kl_t[k];
      bound_total += t.bound();
      ++count;
    }
  }
  const double denom = static_cast<double>(count);
  std::cout << "diffusion bound decomposition over " << n << " validation points x " << n_mc
            << " posterior samples (T=" << T << ")\n";
  std::cout << "recon_term," << vdp::detail::format_g17(recon / denom) << "\n";
  for (std::size_t k = 0; k < kl.size(); ++k) {
    std::cout << "kl_t," << (k + 2) << "," << vdp::detail::format_g17(kl[k] / denom) << "\n";
  }
  std::cout << "endpoint_kl," << vdp::detail::format_g17(endpoint / denom) << "\n";
  std::cout << "bound," << vdp::detail::format_g17(bound_total / denom) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"VAE training with Gaussian, flow, and diffusion priors"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  auto* train_cmd = app.add_subcommand("train", "train a model from a key=value config");
  train_cmd->add_option("--config", config_path, "config file")->required();
  train_cmd->add_option("--out", out_dir, "output directory (overrides config/out root)");

  std::string ckpt_path, format = "csv", sample_out;
  std::size_t n_samples = 100;
  std::uint64_t seed = 0;
  std::vector<std::size_t> grid;
  bool draw_pixels = false;
  auto* sample_cmd = app.add_subcommand("sample", "draw from a trained generative model");
  sample_cmd->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  sample_cmd->add_option("--n", n_samples, "sample count");
  sample_cmd->add_option("--seed", seed, "rng seed");
  sample_cmd->add_option("--format", format, "csv or ppm")
      ->check(CLI::IsMember({"csv", "ppm"}));
  sample_cmd->add_option("--grid", grid, "ppm tiling: ROWS COLS")->expected(2);
  sample_cmd->add_option("--out", sample_out, "output file");
  sample_cmd->add_flag("--draw-pixels", draw_pixels, "sample the likelihood instead of its mean");

  std::string eval_ckpt, eval_dataset, eval_metric = "elbo", eval_split = "test",
              eval_csv = "eval.csv";
  std::size_t eval_n = 1000, eval_n_mc = 8;
  std::uint64_t eval_seed = 0;
  auto* eval_cmd = app.add_subcommand("eval", "score a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--dataset", eval_dataset, "dataset spec (default: the run's own)");
  eval_cmd->add_option("--split", eval_split, "train/val/test")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("--metric", eval_metric, "elbo or mmd");
  eval_cmd->add_option("--n", eval_n, "model samples for mmd");
  eval_cmd->add_option("--n-mc", eval_n_mc, "posterior samples per datum for elbo");
  eval_cmd->add_option("--seed", eval_seed, "rng seed");
  eval_cmd->add_option("--out-csv", eval_csv, "append the report here (empty to skip)");

  std::string diag_ckpt;
  std::size_t diag_n_mc = 4;
  std::uint64_t diag_seed = 0;
  auto* diag_cmd = app.add_subcommand("diagnose", "per-timestep bound decomposition");
  diag_cmd->add_option("--checkpoint", diag_ckpt, "diffusion checkpoint")->required();
  diag_cmd->add_option("--n-mc", diag_n_mc, "posterior samples per datum");
  diag_cmd->add_option("--seed", diag_seed, "rng seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*train_cmd) return run_train(config_path, out_dir);
    if (*sample_cmd) return run_sample(ckpt_path, n_samples, seed, format, grid, sample_out,
                                       draw_pixels);
    if (*eval_cmd) return run_eval(eval_ckpt, eval_dataset, eval_split, eval_metric, eval_n,
                                   eval_n_mc, eval_seed, eval_csv);
    if (*diag_cmd) return run_diagnose(diag_ckpt, diag_n_mc, diag_seed);
  } catch (const vdp::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const vdp::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
