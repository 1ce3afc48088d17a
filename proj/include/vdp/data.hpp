#pragma once

// Dataset generation and loading: 2-D toy densities plus IDX image files.
// Data is stored normalized; shift/scale metadata makes that invertible.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "vdp/errors.hpp"
#include "vdp/rng.hpp"
#include "vdp/tensor.hpp"

namespace vdp {

struct Dataset {
  std::string name;
  std::size_t n = 0, d = 0;
  std::vector<double> data;  // normalized, row-major [n, d]
  std::vector<std::size_t> train_idx, val_idx, test_idx;
  std::vector<double> shift, scale;  // raw = normalized * scale + shift

  double raw(std::size_t row, std::size_t col) const {
    return data[row * d + col] * scale[col] + shift[col];
  }
};

namespace detail {

// Contiguous split: train, then validation, then test.
inline void assign_splits(Dataset& ds, double val_frac, double test_frac) {
  const std::size_t n_val = static_cast<std::size_t>(static_cast<double>(ds.n) * val_frac);
  const std::size_t n_test = static_cast<std::size_t>(static_cast<double>(ds.n) * test_frac);
  const std::size_t n_train = ds.n - n_val - n_test;
  ds.train_idx.resize(n_train);
  ds.val_idx.resize(n_val);
  ds.test_idx.resize(n_test);
  for (std::size_t i = 0; i < n_train; ++i) ds.train_idx[i] = i;
  for (std::size_t i = 0; i < n_val; ++i) ds.val_idx[i] = n_train + i;
  for (std::size_t i = 0; i < n_test; ++i) ds.test_idx[i] = n_train + n_val + i;
}

// Standardize each column to zero mean / unit variance (population variance),
// recording the inverse transform.
inline void standardize(Dataset& ds) {
  ds.shift.assign(ds.d, 0.0);
  ds.scale.assign(ds.d, 1.0);
  for (std::size_t j = 0; j < ds.d; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < ds.n; ++i) m += ds.data[i * ds.d + j];
    m /= static_cast<double>(ds.n);
    double var = 0.0;
    for (std::size_t i = 0; i < ds.n; ++i) {
      const double c = ds.data[i * ds.d + j] - m;
      var += c * c;
    }
    var /= static_cast<double>(ds.n);
    const double s = var > 0.0 ? std::sqrt(var) : 1.0;
    ds.shift[j] = m;
    ds.scale[j] = s;
    for (std::size_t i = 0; i < ds.n; ++i) ds.data[i * ds.d + j] = (ds.data[i * ds.d + j] - m) / s;
  }
}

}  // namespace detail

inline const std::vector<std::pair<double, double>>& eight_gaussian_centers() {
  static const std::vector<std::pair<double, double>> centers = [] {
    std::vector<std::pair<double, double>> c;
    for (int k = 0; k < 8; ++k) {
      const double a = 2.0 * 3.14159265358979323846 * k / 8.0;
      c.emplace_back(2.0 * std::cos(a), 2.0 * std::sin(a));
    }
    return c;
  }();
  return centers;
}

// 2-D toy densities, standardized, split 80/10/10. Deterministic per seed.
inline Dataset make_toy_dataset(const std::string& kind, std::size_t n, std::uint64_t seed) {
  if (n < 10) throw ValueError("make_toy_dataset: n must be >= 10");
  Dataset ds;
  ds.name = kind;
  ds.n = n;
  ds.d = 2;
  ds.data.resize(n * 2);
  Rng rng(seed);

  if (kind == "eight_gaussians") {
    const auto& centers = eight_gaussian_centers();
    for (std::size_t i = 0; i < n; ++i) {
      const auto& c = centers[uniform_index(rng, 8)];
      ds.data[i * 2] = c.first + 0.2 * normal(rng);
      ds.data[i * 2 + 1] = c.second + 0.2 * normal(rng);
    }
  } else if (kind == "two_moons") {
    for (std::size_t i = 0; i < n; ++i) {
      const double t = 3.14159265358979323846 * uniform_double(rng);
      double x, y;
      if (uniform_index(rng, 2) == 0) {
        x = std::cos(t);
        y = std::sin(t);
      } else {
        x = 1.0 - std::cos(t);
        y = 0.5 - std::sin(t);
      }
      ds.data[i * 2] = x + 0.1 * normal(rng);
      ds.data[i * 2 + 1] = y + 0.1 * normal(rng);
    }
  } else if (kind == "checkerboard") {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t col = uniform_index(rng, 4);
      const std::size_t band = uniform_index(rng, 2);
      const double x = static_cast<double>(col) + uniform_double(rng) - 2.0;
      const double y = static_cast<double>(2 * band + col % 2) + uniform_double(rng) - 2.0;
      ds.data[i * 2] = x;
      ds.data[i * 2 + 1] = y;
    }
  } else {
    throw ValueError("make_toy_dataset: unknown kind '" + kind + "'");
  }

  detail::standardize(ds);
  detail::assign_splits(ds, 0.1, 0.1);
  return ds;
}

// IDX container for 3-D unsigned-byte tensors (magic 0x00000803), the format
// used by the classic small-image archives. Header integers are big-endian.
inline Dataset load_idx_images(const std::string& path,
                               std::optional<double> binarize_threshold = std::nullopt,
                               double val_fraction = 0.1) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  auto read_u32be = [&in, &path]() {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) {
      throw IoError("idx file '" + path + "' truncated in header");
    }
    return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
           (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
  };
  const std::uint32_t magic = read_u32be();
  if (magic != 0x00000803u) {
    throw IoError("idx file '" + path + "': bad magic 0x" + [magic] {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%08x", magic);
      return std::string(buf);
    }() + " (want 00000803)");
  }
  const std::uint32_t count = read_u32be();
  const std::uint32_t rows = read_u32be();
  const std::uint32_t cols = read_u32be();
  const std::size_t d = static_cast<std::size_t>(rows) * cols;
  if (count == 0 || d == 0) throw IoError("idx file '" + path + "': empty dimensions");

  std::vector<unsigned char> pixels(static_cast<std::size_t>(count) * d);
  if (!in.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()))) {
    throw IoError("idx file '" + path + "' truncated: payload shorter than header promises");
  }

  Dataset ds;
  ds.name = "idx:" + path;
  ds.n = count;
  ds.d = d;
  ds.data.resize(ds.n * ds.d);
  for (std::size_t i = 0; i < ds.data.size(); ++i) {
    double v = static_cast<double>(pixels[i]) / 255.0;
    if (binarize_threshold) v = v >= *binarize_threshold ? 1.0 : 0.0;
    ds.data[i] = v;
  }
  ds.shift.assign(d, 0.0);
  ds.scale.assign(d, 1.0);
  detail::assign_splits(ds, val_fraction, val_fraction);
  return ds;
}

// Dispatch on a dataset spec: a toy kind or "idx:<path>".
inline Dataset load_dataset(const std::string& spec, std::size_t toy_n,
                            std::optional<double> binarize_threshold, double val_fraction,
                            std::uint64_t seed) {
  if (spec.rfind("idx:", 0) == 0) {
    return load_idx_images(spec.substr(4), binarize_threshold, val_fraction);
  }
  return make_toy_dataset(spec, toy_n, seed);
}

inline Tensor dataset_rows(const Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<double> out(idx.size() * ds.d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t j = 0; j < ds.d; ++j) out[i * ds.d + j] = ds.data[idx[i] * ds.d + j];
  }
  return Tensor::from_data({idx.size(), ds.d}, std::move(out));
}

inline Tensor denormalize(const Dataset& ds, const Tensor& rows) {
  std::vector<double> out = rows.data();
  const std::size_t d = ds.d;
  for (std::size_t i = 0; i < rows.shape()[0]; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = out[i * d + j] * ds.scale[j] + ds.shift[j];
  return Tensor::from_data(rows.shape(), std::move(out));
}

// CSV with header x0,...,x{d-1}; 17 significant digits.
inline void save_csv(const std::string& path, const Tensor& rows) {
  if (rows.rank() != 2) throw ShapeError("save_csv: requires rank 2, got " + rows.shape_string());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path + "'");
  const std::size_t n = rows.shape()[0], d = rows.shape()[1];
  for (std::size_t j = 0; j < d; ++j) out << (j ? "," : "") << "x" << j;
  out << "\n";
  char buf[40];
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", rows.data()[i * d + j]);
      out << (j ? "," : "") << buf;
    }
    out << "\n";
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace vdp
