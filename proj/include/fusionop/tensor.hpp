#pragma once

// Dense row-major tensors of doubles and the numeric kernels the fusion
// graph is built from. No broadcasting: every shape mismatch throws.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace fusionop {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// N-dimensional array of doubles in row-major order.
///
/// A default-constructed Tensor is the empty placeholder (rank 0, no data);
/// every other constructor enforces rank >= 1 and extents >= 1.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(element_count(shape_), 0.0);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != element_count(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor filled(Shape shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  static Tensor ones(Shape shape) { return filled(std::move(shape), 1.0); }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double& operator[](std::size_t i) noexcept { return data_[i]; }

  double operator()(std::size_t i, std::size_t j) const noexcept {
    return data_[i * shape_[1] + j];
  }
  double& operator()(std::size_t i, std::size_t j) noexcept {
    return data_[i * shape_[1] + j];
  }

  /// Row-major strides; the last stride is 1.
  std::vector<std::size_t> strides() const {
    std::vector<std::size_t> s(shape_.size(), 1);
    for (std::size_t n = shape_.size(); n-- > 1;) s[n - 1] = s[n] * shape_[n];
    return s;
  }

  double at(std::span<const std::size_t> index) const {
    if (index.size() != shape_.size()) throw ShapeError("index rank mismatch");
    std::size_t flat = 0;
    for (std::size_t n = 0; n < index.size(); ++n) {
      if (index[n] >= shape_[n]) throw std::out_of_range("tensor index out of range");
      flat = flat * shape_[n] + index[n];
    }
    return data_[flat];
  }

  bool operator==(const Tensor&) const = default;

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor rank must be >= 1");
    for (std::size_t e : shape) {
      if (e == 0) throw ShapeError("tensor extents must be >= 1, got " + shape_string(shape));
    }
  }

  static std::size_t element_count(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
  }

  Shape shape_;
  std::vector<double> data_;
};

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { identity, leaky_relu, selu, sigmoid, tanh };

inline constexpr double kSeluLambda = 1.0507009873554805;
inline constexpr double kSeluAlpha = 1.6732632423543772;
inline constexpr double kDefaultLeakySlope = 0.01;

struct ActivationKind {
  Activation tag = Activation::identity;
  double leaky_slope = kDefaultLeakySlope;  // only read by leaky_relu

  bool operator==(const ActivationKind&) const = default;
};

inline constexpr ActivationKind kIdentity{Activation::identity};
inline constexpr ActivationKind kLeakyRelu{Activation::leaky_relu};
inline constexpr ActivationKind kSelu{Activation::selu};
inline constexpr ActivationKind kSigmoid{Activation::sigmoid};
inline constexpr ActivationKind kTanh{Activation::tanh};

/// All activation kinds, in the order used by grids and presets.
inline constexpr ActivationKind kAllActivations[] = {kIdentity, kLeakyRelu, kSelu, kSigmoid,
                                                     kTanh};

/// Short name used by the spec grammar.
inline std::string_view activation_name(Activation tag) {
  switch (tag) {
    case Activation::identity: return "identity";
    case Activation::leaky_relu: return "lrelu";
    case Activation::selu: return "selu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

inline bool has_kink(const ActivationKind& kind) {
  return kind.tag == Activation::leaky_relu || kind.tag == Activation::selu;
}

inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double activate_scalar(const ActivationKind& kind, double x) {
  switch (kind.tag) {
    case Activation::identity: return x;
    case Activation::leaky_relu: return x >= 0 ? x : kind.leaky_slope * x;
    case Activation::selu: return x >= 0 ? kSeluLambda * x : kSeluLambda * kSeluAlpha * std::expm1(x);
    case Activation::sigmoid: return sigmoid_scalar(x);
    case Activation::tanh: return std::tanh(x);
  }
  return x;
}

/// f'(x). The leaky ReLU derivative at exactly 0 is the slope.
inline double activation_derivative(const ActivationKind& kind, double x) {
  switch (kind.tag) {
    case Activation::identity: return 1.0;
    case Activation::leaky_relu: return x > 0 ? 1.0 : kind.leaky_slope;
    case Activation::selu: return x >= 0 ? kSeluLambda : kSeluLambda * kSeluAlpha * std::exp(x);
    case Activation::sigmoid: {
      const double s = sigmoid_scalar(x);
      return s * (1.0 - s);
    }
    case Activation::tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
  }
  return 1.0;
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                     " vs " + shape_string(b.shape()));
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, std::string_view what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_string(t.shape()));
  }
}

}  // namespace detail

inline Tensor hadamard(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "hadamard");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

/// acc += x
inline void add_into(Tensor& acc, const Tensor& x) {
  detail::require_same_shape(acc, x, "add_into");
  for (std::size_t i = 0; i < x.size(); ++i) acc[i] += x[i];
}

/// M (J x I) times x (I).
inline Tensor matvec(const Tensor& m, const Tensor& x) {
  detail::require_rank(m, 2, "matvec");
  detail::require_rank(x, 1, "matvec");
  const std::size_t rows = m.extent(0), cols = m.extent(1);
  if (cols != x.extent(0)) {
    throw ShapeError("matvec: inner dimension mismatch " + shape_string(m.shape()) + " * " +
                     shape_string(x.shape()));
  }
  Tensor out({rows});
  const auto md = m.data();
  const auto xd = x.data();
  for (std::size_t j = 0; j < rows; ++j) {
    double s = 0.0;
    const double* row = md.data() + j * cols;
    for (std::size_t i = 0; i < cols; ++i) s += row[i] * xd[i];
    out[j] = s;
  }
  return out;
}

/// M^T (I x J) times g (J).
inline Tensor matvec_transposed(const Tensor& m, const Tensor& g) {
  detail::require_rank(m, 2, "matvec_transposed");
  detail::require_rank(g, 1, "matvec_transposed");
  const std::size_t rows = m.extent(0), cols = m.extent(1);
  if (rows != g.extent(0)) {
    throw ShapeError("matvec_transposed: dimension mismatch " + shape_string(m.shape()) +
                     "^T * " + shape_string(g.shape()));
  }
  Tensor out({cols});
  const auto md = m.data();
  for (std::size_t j = 0; j < rows; ++j) {
    const double gj = g[j];
    const double* row = md.data() + j * cols;
    for (std::size_t i = 0; i < cols; ++i) out[i] += row[i] * gj;
  }
  return out;
}

inline Tensor outer(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 1, "outer");
  detail::require_rank(b, 1, "outer");
  const std::size_t j = a.size(), k = b.size();
  Tensor out({j, k});
  for (std::size_t r = 0; r < j; ++r) {
    for (std::size_t c = 0; c < k; ++c) out[r * k + c] = a[r] * b[c];
  }
  return out;
}

/// acc += a (x) b, without materialising the outer product.
inline void add_outer_into(Tensor& acc, const Tensor& a, const Tensor& b) {
  if (acc.rank() != 2 || acc.extent(0) != a.size() || acc.extent(1) != b.size()) {
    throw ShapeError("add_outer_into: " + shape_string(acc.shape()) + " vs " +
                     shape_string(a.shape()) + " (x) " + shape_string(b.shape()));
  }
  const std::size_t k = b.size();
  auto d = acc.data();
  for (std::size_t r = 0; r < a.size(); ++r) {
    const double ar = a[r];
    double* row = d.data() + r * k;
    for (std::size_t c = 0; c < k; ++c) row[c] += ar * b[c];
  }
}

namespace detail {

// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct ModeSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline ModeSplit split_at_mode(const Shape& shape, std::size_t axis) {
  ModeSplit s;
  for (std::size_t n = 0; n < axis; ++n) s.outer *= shape[n];
  s.extent = shape[axis];
  for (std::size_t n = axis + 1; n < shape.size(); ++n) s.inner *= shape[n];
  return s;
}

inline std::size_t check_mode(const Tensor& t, std::size_t mode, std::string_view what) {
  if (mode < 1 || mode > t.rank()) {
    throw std::out_of_range(std::string(what) + ": mode " + std::to_string(mode) +
                            " out of range for rank " + std::to_string(t.rank()));
  }
  return mode - 1;
}

}  // namespace detail

/// Contracts mode `mode` (1-based) of `t` with vector `z`. The result drops
/// that axis; contracting a rank-1 tensor yields a length-1 vector.
inline Tensor n_mode_product(const Tensor& t, const Tensor& z, std::size_t mode) {
  const std::size_t axis = detail::check_mode(t, mode, "n_mode_product");
  detail::require_rank(z, 1, "n_mode_product");
  if (z.size() != t.extent(axis)) {
    throw ShapeError("n_mode_product: vector length " + std::to_string(z.size()) +
                     " does not match extent " + std::to_string(t.extent(axis)) + " of mode " +
                     std::to_string(mode));
  }
  const auto split = detail::split_at_mode(t.shape(), axis);
  Shape out_shape;
  for (std::size_t n = 0; n < t.rank(); ++n) {
    if (n != axis) out_shape.push_back(t.extent(n));
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t i = 0; i < split.extent; ++i) {
      const double zi = z[i];
      const std::size_t src = (o * split.extent + i) * split.inner;
      const std::size_t dst = o * split.inner;
      for (std::size_t k = 0; k < split.inner; ++k) out[dst + k] += t[src + k] * zi;
    }
  }
  return out;
}

/// Mode-`mode` product with a matrix W (J x I_n): the extent I_n becomes J.
inline Tensor n_mode_product_mat(const Tensor& t, const Tensor& w, std::size_t mode) {
  const std::size_t axis = detail::check_mode(t, mode, "n_mode_product_mat");
  detail::require_rank(w, 2, "n_mode_product_mat");
  if (w.extent(1) != t.extent(axis)) {
    throw ShapeError("n_mode_product_mat: matrix " + shape_string(w.shape()) +
                     " does not match extent " + std::to_string(t.extent(axis)) + " of mode " +
                     std::to_string(mode));
  }
  const auto split = detail::split_at_mode(t.shape(), axis);
  const std::size_t rows = w.extent(0);
  Shape out_shape = t.shape();
  out_shape[axis] = rows;
  Tensor out(out_shape);
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t j = 0; j < rows; ++j) {
      const std::size_t dst = (o * rows + j) * split.inner;
      for (std::size_t i = 0; i < split.extent; ++i) {
        const double wji = w(j, i);
        const std::size_t src = (o * split.extent + i) * split.inner;
        for (std::size_t k = 0; k < split.inner; ++k) out[dst + k] += t[src + k] * wji;
      }
    }
  }
  return out;
}

inline Tensor apply_activation(const ActivationKind& kind, const Tensor& x) {
  if (kind.tag == Activation::identity) return x;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = activate_scalar(kind, x[i]);
  return out;
}

/// Elementwise f'(x) * upstream.
inline Tensor activation_grad(const ActivationKind& kind, const Tensor& x, const Tensor& upstream) {
  detail::require_same_shape(x, upstream, "activation_grad");
  if (kind.tag == Activation::identity) return upstream;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = activation_derivative(kind, x[i]) * upstream[i];
  return out;
}

/// Largest |a_i - b_i| divided by the largest |b_i| (0 when both are zero).
inline double max_relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("max_relative_error: length mismatch");
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) return HUGE_VAL;
    diff = std::max(diff, std::abs(a[i] - b[i]));
    scale = std::max(scale, std::abs(b[i]));
  }
  if (diff == 0.0) return 0.0;
  return diff / std::max(scale, 1e-300);
}

}  // namespace fusionop
