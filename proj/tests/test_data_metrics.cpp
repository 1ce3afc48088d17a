#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "oracles.hpp"
#include "vdp/data.hpp"
#include "vdp/metrics.hpp"
#include "vdp/train.hpp"

using vdp::Dataset;
using vdp::Tensor;

namespace {

namespace fs = std::filesystem;

std::string fixture_path(const std::string& name) {
  return (fs::temp_directory_path() / ("vdp_fixture_" + name)).string();
}

void write_u32be(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::string write_idx_fixture(const std::string& name, std::uint32_t count, std::uint32_t rows,
                              std::uint32_t cols, bool truncate_payload = false,
                              std::uint32_t magic = 0x00000803u) {
  const std::string path = fixture_path(name);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  write_u32be(out, magic);
  write_u32be(out, count);
  write_u32be(out, rows);
  write_u32be(out, cols);
  std::size_t n = static_cast<std::size_t>(count) * rows * cols;
  if (truncate_payload) n /= 2;
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char byte = i == 0 ? 255 : static_cast<unsigned char>((i * 37) % 256);
    out.write(reinterpret_cast<const char*>(&byte), 1);
  }
  return path;
}

// Test-side MMD^2 with an explicit kernel matrix; used both to cross-check
// the library value and to build permutation nulls.
struct KernelOracle {
  std::size_t n_a, n_b;
  std::vector<float> k;

  KernelOracle(const Tensor& a, const Tensor& b) {
    n_a = a.shape()[0];
    n_b = b.shape()[0];
    const std::size_t d = a.shape()[1];
    const std::size_t n = n_a + n_b;
    std::vector<double> pool(a.data());
    pool.insert(pool.end(), b.data().begin(), b.data().end());

    std::vector<double> dists;
    dists.reserve(n * (n - 1) / 2);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        double sq = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = pool[i * d + c] - pool[j * d + c];
          sq += diff * diff;
        }
        dists.push_back(std::sqrt(sq));
      }
    }
    std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(dists.size() / 2),
                     dists.end());
    const double sigma = dists[dists.size() / 2];
    const double gamma = 1.0 / (2.0 * sigma * sigma);

    k.resize(n * n);
    for (std::size_t i = 0; i < n; ++i) {
      k[i * n + i] = 1.0f;
      for (std::size_t j = i + 1; j < n; ++j) {
        double sq = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = pool[i * d + c] - pool[j * d + c];
          sq += diff * diff;
        }
        const float v = static_cast<float>(std::exp(-gamma * sq));
        k[i * n + j] = v;
        k[j * n + i] = v;
      }
    }
  }

  double mmd(const std::vector<std::size_t>& ia, const std::vector<std::size_t>& ib) const {
    const std::size_t n = n_a + n_b;
    double kaa = 0.0, kbb = 0.0, kab = 0.0;
    for (auto i : ia)
      for (auto j : ia) kaa += k[i * n + j];
    for (auto i : ib)
      for (auto j : ib) kbb += k[i * n + j];
    for (auto i : ia)
      for (auto j : ib) kab += k[i * n + j];
    const double na = static_cast<double>(ia.size()), nb = static_cast<double>(ib.size());
    return kaa / (na * na) + kbb / (nb * nb) - 2.0 * kab / (na * nb);
  }

  // Null distribution of MMD^2 under random relabeling of the pooled sample.
  std::vector<double> permutation_null(std::size_t n_perm, std::uint64_t seed) const {
    vdp::Rng rng(seed);
    std::vector<std::size_t> pool(n_a + n_b);
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    std::vector<double> null(n_perm);
    for (std::size_t p = 0; p < n_perm; ++p) {
      vdp::deterministic_shuffle(pool, rng);
      std::vector<std::size_t> ia(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_a));
      std::vector<std::size_t> ib(pool.begin() + static_cast<std::ptrdiff_t>(n_a), pool.end());
      null[p] = mmd(ia, ib);
    }
    std::sort(null.begin(), null.end());
    return null;
  }
};

Tensor gaussian_blob(std::size_t n, double mx, double my, std::uint64_t seed) {
  vdp::Rng rng(seed);
  std::vector<double> d(n * 2);
  for (std::size_t i = 0; i < n; ++i) {
    d[i * 2] = mx + vdp::normal(rng);
    d[i * 2 + 1] = my + vdp::normal(rng);
  }
  return Tensor::from_data({n, 2}, d);
}

}  // namespace

TEST(ToyData, EightGaussiansModeCounts) {
  const std::size_t n = 8000;
  Dataset ds = vdp::make_toy_dataset("eight_gaussians", n, 4);
  const auto& centers = vdp::eight_gaussian_centers();
  std::vector<std::size_t> counts(8, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = ds.raw(i, 0), y = ds.raw(i, 1);
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t k = 0; k < 8; ++k) {
      const double dx = x - centers[k].first, dy = y - centers[k].second;
      const double dist = dx * dx + dy * dy;
      if (dist < best_d) {
        best_d = dist;
        best = k;
      }
    }
    ++counts[best];
  }
  const double bound = 3.0 * std::sqrt(1000.0 * 7.0 / 8.0);
  for (std::size_t k = 0; k < 8; ++k) {
    EXPECT_NEAR(static_cast<double>(counts[k]), 1000.0, bound) << "mode " << k;
  }
}

TEST(ToyData, StandardizedAndDeterministic) {
  for (const char* kind : {"eight_gaussians", "two_moons", "checkerboard"}) {
    Dataset ds = vdp::make_toy_dataset(kind, 2000, 3);
    for (std::size_t j = 0; j < 2; ++j) {
      double m = 0.0, v = 0.0;
      for (std::size_t i = 0; i < ds.n; ++i) m += ds.data[i * 2 + j];
      m /= static_cast<double>(ds.n);
      for (std::size_t i = 0; i < ds.n; ++i) {
        const double c = ds.data[i * 2 + j] - m;
        v += c * c;
      }
      v /= static_cast<double>(ds.n);
      EXPECT_NEAR(m, 0.0, 1e-6) << kind;
      EXPECT_NEAR(v, 1.0, 1e-6) << kind;
    }
    Dataset again = vdp::make_toy_dataset(kind, 2000, 3);
    EXPECT_EQ(ds.data, again.data) << kind;
    Dataset other = vdp::make_toy_dataset(kind, 2000, 4);
    EXPECT_NE(ds.data, other.data) << kind;
  }
}

TEST(ToyData, SplitsAndErrors) {
  Dataset ds = vdp::make_toy_dataset("two_moons", 1000, 1);
  EXPECT_EQ(ds.train_idx.size(), 800u);
  EXPECT_EQ(ds.val_idx.size(), 100u);
  EXPECT_EQ(ds.test_idx.size(), 100u);
  std::vector<bool> seen(ds.n, false);
  for (const auto* split : {&ds.train_idx, &ds.val_idx, &ds.test_idx}) {
    for (auto i : *split) {
      EXPECT_FALSE(seen[i]);
      seen[i] = true;
    }
  }
  for (bool s : seen) EXPECT_TRUE(s);

  EXPECT_THROW(vdp::make_toy_dataset("nope", 100, 1), vdp::ValueError);
  EXPECT_THROW(vdp::make_toy_dataset("two_moons", 5, 1), vdp::ValueError);
}

TEST(ToyData, CheckerboardParityCells) {
  Dataset ds = vdp::make_toy_dataset("checkerboard", 4000, 9);
  std::size_t off_cells = 0;
  for (std::size_t i = 0; i < ds.n; ++i) {
    const double x = ds.raw(i, 0) + 2.0, y = ds.raw(i, 1) + 2.0;
    const int cx = std::min(3, std::max(0, static_cast<int>(std::floor(x))));
    const int cy = std::min(3, std::max(0, static_cast<int>(std::floor(y))));
    if ((cx + cy) % 2 != 0) ++off_cells;
  }
  EXPECT_LT(off_cells, 5u);
}

TEST(ToyData, NormalizationRoundTrips) {
  Dataset ds = vdp::make_toy_dataset("eight_gaussians", 500, 21);
  Tensor rows = vdp::dataset_rows(ds, ds.test_idx);
  Tensor raw = vdp::denormalize(ds, rows);
  for (std::size_t i = 0; i < ds.test_idx.size(); ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      const double renorm = (raw.at(i, j) - ds.shift[j]) / ds.scale[j];
      EXPECT_NEAR(renorm, rows.at(i, j), 1e-12);
    }
  }
}

TEST(IdxImages, HeaderArithmeticAndScaling) {
  const std::string path = write_idx_fixture("ok.idx", 100, 8, 8);
  Dataset ds = vdp::load_idx_images(path);
  EXPECT_EQ(ds.n, 100u);
  EXPECT_EQ(ds.d, 64u);
  EXPECT_DOUBLE_EQ(ds.data[0], 1.0);  // byte 255 scales to 1.0
  for (double v : ds.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(ds.train_idx.size() + ds.val_idx.size() + ds.test_idx.size(), 100u);
}

TEST(IdxImages, BinarizeThreshold) {
  const std::string path = write_idx_fixture("bin.idx", 10, 4, 4);
  Dataset ds = vdp::load_idx_images(path, 0.5);
  for (double v : ds.data) EXPECT_TRUE(v == 0.0 || v == 1.0);
}

TEST(IdxImages, StructuredErrors) {
  EXPECT_THROW(vdp::load_idx_images(fixture_path("missing.idx")), vdp::IoError);
  const std::string bad = write_idx_fixture("badmagic.idx", 10, 4, 4, false, 0x00000801u);
  EXPECT_THROW(vdp::load_idx_images(bad), vdp::IoError);
  const std::string trunc = write_idx_fixture("trunc.idx", 10, 4, 4, true);
  EXPECT_THROW(vdp::load_idx_images(trunc), vdp::IoError);
}

TEST(Mmd, IdenticalSetsAreExactlyZero) {
  Tensor a = gaussian_blob(200, 0, 0, 5);
  vdp::MetricReport r = vdp::mmd_rbf(a, a, std::nullopt, 0);
  EXPECT_DOUBLE_EQ(r.value, 0.0);
}

TEST(Mmd, SymmetricNonnegativeAndChecked) {
  Tensor a = gaussian_blob(150, 0, 0, 6);
  Tensor b = gaussian_blob(180, 1, 0, 7);
  vdp::MetricReport ab = vdp::mmd_rbf(a, b, std::nullopt, 0);
  vdp::MetricReport ba = vdp::mmd_rbf(b, a, std::nullopt, 0);
  EXPECT_NEAR(ab.value, ba.value, 1e-12);
  EXPECT_GE(ab.value, 0.0);
  EXPECT_THROW(vdp::mmd_rbf(a, Tensor::zeros({10, 3})), vdp::ShapeError);
}

TEST(Mmd, MatchesKernelOracle) {
  Tensor a = gaussian_blob(120, 0, 0, 8);
  Tensor b = gaussian_blob(140, 0.7, -0.2, 9);
  const KernelOracle oracle_kernel(a, b);
  std::vector<std::size_t> ia(120), ib(140);
  for (std::size_t i = 0; i < 120; ++i) ia[i] = i;
  for (std::size_t i = 0; i < 140; ++i) ib[i] = 120 + i;
  const double ref = oracle_kernel.mmd(ia, ib);
  vdp::MetricReport r = vdp::mmd_rbf(a, b, std::nullopt, 0);
  EXPECT_NEAR(r.value, ref, 1e-6);  // oracle kernel stored in float
}

TEST(Mmd, SameDistributionSitsBelowPermutationNull95) {
  Tensor a = gaussian_blob(2000, 0, 0, 10);
  Tensor b = gaussian_blob(2000, 0, 0, 11);
  vdp::MetricReport r = vdp::mmd_rbf(a, b, std::nullopt, 0);
  const KernelOracle oracle_kernel(a, b);
  const std::vector<double> null = oracle_kernel.permutation_null(100, 12);
  EXPECT_LT(r.value, null[94]);
}

TEST(Mmd, SeparatedDistributionsExceedPermutationNull99) {
  Tensor a = gaussian_blob(500, 0, 0, 13);
  Tensor b = gaussian_blob(500, 5, 0, 14);
  vdp::MetricReport r = vdp::mmd_rbf(a, b, std::nullopt, 0);
  const KernelOracle oracle_kernel(a, b);
  const std::vector<double> null = oracle_kernel.permutation_null(100, 15);
  EXPECT_GT(r.value, null[98]);
}

TEST(Mmd, BootstrapStderrIsFiniteAndPositive) {
  Tensor a = gaussian_blob(100, 0, 0, 16);
  Tensor b = gaussian_blob(100, 0.5, 0, 17);
  vdp::MetricReport r = vdp::mmd_rbf(a, b, std::nullopt, 50, 3);
  EXPECT_GT(r.stderr_value, 0.0);
  EXPECT_TRUE(std::isfinite(r.stderr_value));
}

TEST(HeldoutElbo, PinnedPosteriorEqualsMeanLogLikelihood) {
  vdp::TrainConfig cfg;
  cfg.dataset = "eight_gaussians";
  cfg.latent_dim = 2;
  cfg.encoder_hidden = {4};
  cfg.decoder_hidden = {4};
  cfg.activation = vdp::Activation::Tanh;
  vdp::Models m = vdp::build_models(cfg, 2);
  for (auto& layer : m.vae.encoder.layers)
    for (double& v : layer.weight.mutable_data()) v = 0.0;
  for (auto& layer : m.vae.decoder.layers)
    for (double& v : layer.weight.mutable_data()) v = 0.0;
  for (double& v : m.vae.decoder_logvar.mutable_data()) v = 0.0;

  Dataset ds = vdp::make_toy_dataset("eight_gaussians", 500, 23);
  vdp::MetricReport r = vdp::heldout_elbo(m.vae, m.prior, ds, ds.test_idx, 3, 1);
  double want = 0.0;
  for (auto i : ds.test_idx)
    for (std::size_t j = 0; j < 2; ++j) want += oracle::normal_logpdf(ds.data[i * 2 + j], 0, 1);
  want /= static_cast<double>(ds.test_idx.size());
  EXPECT_NEAR(r.value, want, 1e-12);

  EXPECT_THROW(vdp::heldout_elbo(m.vae, m.prior, ds, {}, 1, 1), vdp::ValueError);
}

TEST(HeldoutElbo, MoreMcSamplesShrinkTheStderr) {
  vdp::TrainConfig cfg;
  cfg.latent_dim = 2;
  cfg.encoder_hidden = {8};
  cfg.decoder_hidden = {8};
  cfg.activation = vdp::Activation::Tanh;
  cfg.seed = 4;
  vdp::Models m = vdp::build_models(cfg, 2);
  Dataset ds = vdp::make_toy_dataset("two_moons", 800, 24);
  vdp::MetricReport r1 = vdp::heldout_elbo(m.vae, m.prior, ds, ds.test_idx, 1, 9);
  vdp::MetricReport r64 = vdp::heldout_elbo(m.vae, m.prior, ds, ds.test_idx, 64, 9);
  EXPECT_LT(r64.stderr_value, r1.stderr_value);
}

TEST(HeldoutElbo, DiffusionBoundStaysBelowExactOnLinearGaussianModel) {
  // Affine everything: exact marginal via the linear-chain oracle.
  vdp::Rng rng(25);
  for (int rep = 0; rep < 5; ++rep) {
    vdp::TrainConfig cfg;
    cfg.latent_dim = 2;
    cfg.prior = vdp::PriorKind::Diffusion;
    cfg.diffusion_T = 3;
    cfg.beta_min = 0.1;
    cfg.beta_max = 0.4;
    cfg.encoder_hidden = {};
    cfg.decoder_hidden = {};
    cfg.denoiser_hidden = {};
    cfg.activation = vdp::Activation::Linear;
    cfg.seed = 600 + static_cast<std::uint64_t>(rep);
    vdp::Models m = vdp::build_models(cfg, 2);
    for (double& v : m.vae.decoder.layers[0].bias.mutable_data()) v = 0.3 * vdp::normal(rng);
    for (double& v : m.vae.decoder_logvar.mutable_data()) v = -0.4 + 0.3 * vdp::normal(rng);

    const auto& prior = std::get<vdp::DiffusionPrior>(m.prior);
    const auto chain = oracle::extract_linear_denoiser(prior);
    const auto z_mom = oracle::reverse_chain_marginal(chain, prior.schedule);
    const auto x_mom = oracle::affine_pushforward(
        z_mom, m.vae.decoder.layers[0].weight.data(), m.vae.decoder.layers[0].bias.data(),
        m.vae.decoder_logvar.data(), 2, 2);

    // Synthetic held-out rows near the marginal's bulk.
    const std::size_t n = 48;
    std::vector<double> xs(n * 2);
    const auto chol = oracle::cholesky(x_mom.cov, 2);
    for (std::size_t i = 0; i < n; ++i) {
      const double e0 = vdp::normal(rng), e1 = vdp::normal(rng);
      xs[i * 2] = x_mom.mean[0] + chol[0] * e0;
      xs[i * 2 + 1] = x_mom.mean[1] + chol[2] * e0 + chol[3] * e1;
    }
    Dataset ds;
    ds.name = "synthetic";
    ds.n = n;
    ds.d = 2;
    ds.data = xs;
    ds.shift = {0, 0};
    ds.scale = {1, 1};
    for (std::size_t i = 0; i < n; ++i) ds.test_idx.push_back(i);

    double exact = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      exact += oracle::mvn_logpdf({xs[i * 2], xs[i * 2 + 1]}, x_mom.mean, x_mom.cov, 2);
    }
    exact /= static_cast<double>(n);

    vdp::MetricReport r = vdp::heldout_elbo(m.vae, m.prior, ds, ds.test_idx, 8,
                                            700 + static_cast<std::uint64_t>(rep));
    EXPECT_LE(r.value, exact) << "rep " << rep;
  }
}
