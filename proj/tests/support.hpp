#pragma once

// Shared helpers for the test suite: seeded random tensors and naive
// index-loop references that deliberately avoid the library kernels.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "fusionop/rng.hpp"
#include "fusionop/tensor.hpp"

namespace fusionop::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& x : t.data()) x = u(rng);
  return t;
}

inline std::size_t random_extent(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline double rel_err(const Tensor& got, const Tensor& want) {
  return max_relative_error(got.data(), want.data());
}

// Row-major flat offset from a multi-index, written out long-hand.
inline std::size_t offset(const Shape& shape, const std::vector<std::size_t>& idx) {
  std::size_t flat = 0;
  for (std::size_t n = 0; n < shape.size(); ++n) flat = flat * shape[n] + idx[n];
  return flat;
}

// Advances a multi-index odometer-style; returns false after the last one.
inline bool next_index(const Shape& shape, std::vector<std::size_t>& idx) {
  for (std::size_t n = shape.size(); n-- > 0;) {
    if (++idx[n] < shape[n]) return true;
    idx[n] = 0;
  }
  return false;
}

inline Tensor loop_matvec(const Tensor& m, const Tensor& x) {
  const std::size_t rows = m.shape()[0], cols = m.shape()[1];
  std::vector<double> y(rows, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) y[i] += m.values()[i * cols + j] * x.values()[j];
  return Tensor({rows}, y);
}

// T x_mode z, summing over the contracted index for every output multi-index.
inline Tensor loop_mode_product(const Tensor& t, const Tensor& z, std::size_t mode) {
  const Shape& s = t.shape();
  const std::size_t axis = mode - 1;
  Shape out_shape;
  for (std::size_t n = 0; n < s.size(); ++n)
    if (n != axis) out_shape.push_back(s[n]);
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> out(t.size() / s[axis], 0.0);
  std::vector<std::size_t> idx(s.size(), 0);
  do {
    std::vector<std::size_t> oidx;
    for (std::size_t n = 0; n < s.size(); ++n)
      if (n != axis) oidx.push_back(idx[n]);
    const std::size_t o = oidx.empty() ? 0 : offset(out_shape, oidx);
    out[o] += t.values()[offset(s, idx)] * z.values()[idx[axis]];
  } while (next_index(s, idx));
  return Tensor(out_shape, out);
}

inline Tensor loop_mode_product_mat(const Tensor& t, const Tensor& w, std::size_t mode) {
  const Shape& s = t.shape();
  const std::size_t axis = mode - 1;
  const std::size_t rows = w.shape()[0];
  Shape out_shape = s;
  out_shape[axis] = rows;
  std::vector<double> out(t.size() / s[axis] * rows, 0.0);
  std::vector<std::size_t> idx(s.size(), 0);
  do {
    for (std::size_t j = 0; j < rows; ++j) {
      auto oidx = idx;
      oidx[axis] = j;
      out[offset(out_shape, oidx)] += w.values()[j * s[axis] + idx[axis]] * t.values()[offset(s, idx)];
    }
  } while (next_index(s, idx));
  return Tensor(out_shape, out);
}

// Residual of projecting `target` (flattened) onto span{basis} by least
// squares via Gram-Schmidt. Small residual means target lies in the span.
inline double span_residual(const std::vector<std::vector<double>>& basis, std::vector<double> target) {
  std::vector<std::vector<double>> ortho;
  for (auto b : basis) {
    for (const auto& e : ortho) {
      double d = 0;
      for (std::size_t i = 0; i < b.size(); ++i) d += b[i] * e[i];
      for (std::size_t i = 0; i < b.size(); ++i) b[i] -= d * e[i];
    }
    double n = 0;
    for (double x : b) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-12) continue;
    for (double& x : b) x /= n;
    ortho.push_back(std::move(b));
  }
  double scale = 0;
  for (double x : target) scale += x * x;
  for (const auto& e : ortho) {
    double d = 0;
    for (std::size_t i = 0; i < target.size(); ++i) d += target[i] * e[i];
    for (std::size_t i = 0; i < target.size(); ++i) target[i] -= d * e[i];
  }
  double r = 0;
  for (double x : target) r += x * x;
  return std::sqrt(r) / std::max(std::sqrt(scale), 1e-300);
}

}  // namespace fusionop::testing
