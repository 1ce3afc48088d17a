#pragma once

// Flat key=value run configuration. '#' starts a comment; whitespace around
// keys and values is trimmed. Unknown keys and malformed numbers are hard
// errors so a typo cannot silently fall back to a default.

#include <cstdint>
#include <cstdio>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vdp/errors.hpp"
#include "vdp/nn.hpp"
#include "vdp/prior.hpp"
#include "vdp/vae.hpp"

namespace vdp {

struct TrainConfig {
  std::string dataset = "eight_gaussians";  // toy kind or "idx:<path>"
  std::size_t dataset_n = 8000;             // toy sample count
  std::optional<double> binarize_threshold; // idx images only

  std::size_t latent_dim = 2;
  PriorKind prior = PriorKind::Gaussian;

  std::size_t diffusion_T = 50;
  double beta_min = 1e-3;
  double beta_max = 0.2;

  std::size_t flow_hidden = 64;
  std::vector<std::size_t> encoder_hidden{64, 64};
  std::vector<std::size_t> decoder_hidden{64, 64};
  std::vector<std::size_t> denoiser_hidden{64, 64};
  Activation activation = Activation::Relu;

  LikelihoodKind likelihood = LikelihoodKind::Gaussian;
  bool decoder_var_heads = false;
  bool per_element_t = false;

  double lr = 5e-4;
  std::size_t epochs = 250;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  double val_fraction = 0.1;  // idx datasets; toy datasets split 80/10/10
  std::string out_dir;

  bool operator==(const TrainConfig&) const = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

struct ConfigLine {
  std::string key, value;
  std::size_t line_no = 0;
};

inline double parse_double(const ConfigLine& l) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(l.value, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config line " + std::to_string(l.line_no) + ": cannot parse number '" +
                      l.value + "' for key '" + l.key + "'");
  }
  if (pos != l.value.size()) {
    throw ConfigError("config line " + std::to_string(l.line_no) + ": trailing characters in '" +
                      l.value + "' for key '" + l.key + "'");
  }
  return v;
}

inline std::uint64_t parse_uint(const ConfigLine& l) {
  if (l.value.empty() || l.value[0] == '-') {
    throw ConfigError("config line " + std::to_string(l.line_no) + ": '" + l.key +
                      "' wants a nonnegative integer, got '" + l.value + "'");
  }
  std::size_t pos = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(l.value, &pos);
  } catch (const std::exception&) {
    throw ConfigError("config line " + std::to_string(l.line_no) + ": cannot parse integer '" +
                      l.value + "' for key '" + l.key + "'");
  }
  if (pos != l.value.size()) {
    throw ConfigError("config line " + std::to_string(l.line_no) + ": trailing characters in '" +
                      l.value + "' for key '" + l.key + "'");
  }
  return v;
}

inline bool parse_bool(const ConfigLine& l) {
  if (l.value == "true" || l.value == "1") return true;
  if (l.value == "false" || l.value == "0") return false;
  throw ConfigError("config line " + std::to_string(l.line_no) + ": '" + l.key +
                    "' wants true/false, got '" + l.value + "'");
}

inline std::vector<std::size_t> parse_size_list(const ConfigLine& l) {
  std::vector<std::size_t> out;
  if (trim(l.value).empty()) return out;
  std::stringstream ss(l.value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    ConfigLine sub{l.key, trim(item), l.line_no};
    out.push_back(static_cast<std::size_t>(parse_uint(sub)));
  }
  return out;
}

}  // namespace detail

inline void validate(const TrainConfig& c) {
  if (c.latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (c.epochs < 1) throw ConfigError("epochs must be >= 1");
  if (c.batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(c.lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(c.val_fraction > 0.0 && c.val_fraction <= 0.4)) {
    throw ConfigError("val_fraction must lie in (0, 0.4]");
  }
  if (c.prior == PriorKind::Diffusion) {
    if (c.diffusion_T < 1) throw ConfigError("T must be >= 1");
    if (!(c.beta_min > 0.0 && c.beta_min <= c.beta_max && c.beta_max < 1.0)) {
      throw ConfigError("need 0 < beta_min <= beta_max < 1");
    }
  }
  if (c.prior == PriorKind::Flow && c.flow_hidden < 1) {
    throw ConfigError("flow_hidden must be >= 1");
  }
  if (c.binarize_threshold && c.likelihood != LikelihoodKind::Bernoulli) {
    throw ConfigError("binarize_threshold requires likelihood=bernoulli");
  }
}

inline TrainConfig parse_config(const std::string& text) {
  TrainConfig c;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value, got '" +
                        line + "'");
    }
    detail::ConfigLine l{detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)),
                         line_no};
    if (l.key.empty()) {
      throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    }
    if (!seen.insert(l.key).second) {
      throw ConfigError("config line " + std::to_string(line_no) + ": duplicate key '" + l.key +
                        "'");
    }

    if (l.key == "dataset") c.dataset = l.value;
    else if (l.key == "dataset_n") c.dataset_n = detail::parse_uint(l);
    else if (l.key == "binarize_threshold") c.binarize_threshold = detail::parse_double(l);
    else if (l.key == "latent_dim") c.latent_dim = detail::parse_uint(l);
    else if (l.key == "prior") c.prior = prior_kind_from_string(l.value);
    else if (l.key == "T") c.diffusion_T = detail::parse_uint(l);
    else if (l.key == "beta_min") c.beta_min = detail::parse_double(l);
    else if (l.key == "beta_max") c.beta_max = detail::parse_double(l);
    else if (l.key == "flow_hidden") c.flow_hidden = detail::parse_uint(l);
    else if (l.key == "encoder_hidden") c.encoder_hidden = detail::parse_size_list(l);
    else if (l.key == "decoder_hidden") c.decoder_hidden = detail::parse_size_list(l);
    else if (l.key == "denoiser_hidden") c.denoiser_hidden = detail::parse_size_list(l);
    else if (l.key == "activation") c.activation = activation_from_string(l.value);
    else if (l.key == "likelihood") c.likelihood = likelihood_from_string(l.value);
    else if (l.key == "decoder_var_heads") c.decoder_var_heads = detail::parse_bool(l);
    else if (l.key == "per_element_t") c.per_element_t = detail::parse_bool(l);
    else if (l.key == "lr") c.lr = detail::parse_double(l);
    else if (l.key == "epochs") c.epochs = detail::parse_uint(l);
    else if (l.key == "batch_size") c.batch_size = detail::parse_uint(l);
    else if (l.key == "seed") c.seed = detail::parse_uint(l);
    else if (l.key == "val_fraction") c.val_fraction = detail::parse_double(l);
    else if (l.key == "out_dir") c.out_dir = l.value;
    else throw ConfigError("unknown config key '" + l.key + "' (line " +
                           std::to_string(line_no) + ")");
  }

  // The diffusion schedule and the flow width have no universal defaults a
  // run should silently inherit; require them next to the prior choice.
  if (c.prior == PriorKind::Diffusion) {
    for (const char* k : {"T", "beta_min", "beta_max"}) {
      if (!seen.count(k)) {
        throw ConfigError(std::string("prior=diffusion requires key '") + k + "'");
      }
    }
  }
  if (c.prior == PriorKind::Flow && !seen.count("flow_hidden")) {
    throw ConfigError("prior=flow requires key 'flow_hidden'");
  }

  validate(c);
  return c;
}

// Canonical text form; parse_config(serialize_config(c)) == c exactly
// (doubles are emitted with 17 significant digits).
inline std::string serialize_config(const TrainConfig& c) {
  std::string out;
  auto kv = [&out](const std::string& k, const std::string& v) { out += k + "=" + v + "\n"; };
  kv("dataset", c.dataset);
  kv("dataset_n", std::to_string(c.dataset_n));
  if (c.binarize_threshold) kv("binarize_threshold", detail::format_g17(*c.binarize_threshold));
  kv("latent_dim", std::to_string(c.latent_dim));
  kv("prior", to_string(c.prior));
  kv("T", std::to_string(c.diffusion_T));
  kv("beta_min", detail::format_g17(c.beta_min));
  kv("beta_max", detail::format_g17(c.beta_max));
  kv("flow_hidden", std::to_string(c.flow_hidden));
  kv("encoder_hidden", detail::join_sizes(c.encoder_hidden));
  kv("decoder_hidden", detail::join_sizes(c.decoder_hidden));
  kv("denoiser_hidden", detail::join_sizes(c.denoiser_hidden));
  kv("activation", to_string(c.activation));
  kv("likelihood", to_string(c.likelihood));
  kv("decoder_var_heads", c.decoder_var_heads ? "true" : "false");
  kv("per_element_t", c.per_element_t ? "true" : "false");
  kv("lr", detail::format_g17(c.lr));
  kv("epochs", std::to_string(c.epochs));
  kv("batch_size", std::to_string(c.batch_size));
  kv("seed", std::to_string(c.seed));
  kv("val_fraction", detail::format_g17(c.val_fraction));
  kv("out_dir", c.out_dir);
  return out;
}

}  // namespace vdp
