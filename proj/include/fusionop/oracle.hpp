#pragma once

// Brute-force references for verification only. Nothing here calls the
// tensor kernels or the reduction code of graph.hpp: arithmetic is written
// as plain index loops over the raw arrays, so agreement with the engine is
// evidence rather than tautology. The finite-difference reference evaluates
// its own long double forward pass for the same reason.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "fusionop/dsl.hpp"
#include "fusionop/graph.hpp"
#include "fusionop/rng.hpp"
#include "fusionop/tensor.hpp"

namespace fusionop::oracle {

/// t_q x t_v x t_o interaction tensor whose mode-3 slices have rank <= R.
struct CoreTensor {
  Tensor data;
};

/// slice k = sum_r (row k of M_r) (x) (row k of N_r).
inline CoreTensor build_core_tensor(const ParamStore& params, std::size_t rank, const Dims& dims) {
  const std::size_t tq = dims.t_q, tv = dims.t_v, to = dims.t_o;
  std::vector<double> core(tq * tv * to, 0.0);
  for (std::size_t r = 1; r <= rank; ++r) {
    const Tensor& m = params.at(param_names::M(r));
    const Tensor& n = params.at(param_names::N(r));
    if (m.shape() != Shape{to, tq} || n.shape() != Shape{to, tv}) {
      throw ShapeError("build_core_tensor: M_" + std::to_string(r) + " / N_" + std::to_string(r) +
                       " shapes " + shape_string(m.shape()) + ", " + shape_string(n.shape()) +
                       " do not match dims");
    }
    const auto& md = m.values();
    const auto& nd = n.values();
    for (std::size_t i = 0; i < tq; ++i) {
      for (std::size_t j = 0; j < tv; ++j) {
        for (std::size_t k = 0; k < to; ++k) {
          core[(i * tv + j) * to + k] += md[k * tq + i] * nd[k * tv + j];
        }
      }
    }
  }
  return {Tensor({tq, tv, to}, std::move(core))};
}

enum class ContractionOrder { question_first, visual_first };

namespace detail {

inline std::vector<double> project(const Tensor& w, const Tensor& x) {
  if (w.rank() != 2 || w.extent(1) != x.size()) {
    throw ShapeError("oracle projection: " + shape_string(w.shape()) + " * " + shape_string(x.shape()));
  }
  const std::size_t rows = w.extent(0), cols = w.extent(1);
  std::vector<double> out(rows, 0.0);
  for (std::size_t j = 0; j < rows; ++j) {
    for (std::size_t i = 0; i < cols; ++i) out[j] += w.values()[j * cols + i] * x.values()[i];
  }
  return out;
}

}  // namespace detail

/// y = ((core x_1 q~) x_2 v~) x_3 Wo + bo, with q~ = Wq q and v~ = Wv v,
/// evaluated as explicit mode-by-mode loops.
inline Tensor tucker_forward(const CoreTensor& core, const ParamStore& params, const Tensor& q,
                             const Tensor& v, ContractionOrder order = ContractionOrder::question_first) {
  const Tensor& c = core.data;
  if (c.rank() != 3) throw ShapeError("core tensor must have rank 3");
  const std::size_t tq = c.extent(0), tv = c.extent(1), to = c.extent(2);
  const auto qt = detail::project(params.at("Wq"), q);
  const auto vt = detail::project(params.at("Wv"), v);
  if (qt.size() != tq || vt.size() != tv) throw ShapeError("tucker_forward: projections do not match core");
  const auto& cd = c.values();

  std::vector<double> fused(to, 0.0);
  if (order == ContractionOrder::question_first) {
    std::vector<double> tq_mat(tv * to, 0.0);  // core x_1 q~
    for (std::size_t i = 0; i < tq; ++i) {
      for (std::size_t j = 0; j < tv; ++j) {
        for (std::size_t k = 0; k < to; ++k) tq_mat[j * to + k] += cd[(i * tv + j) * to + k] * qt[i];
      }
    }
    for (std::size_t j = 0; j < tv; ++j) {
      for (std::size_t k = 0; k < to; ++k) fused[k] += tq_mat[j * to + k] * vt[j];
    }
  } else {
    std::vector<double> tv_mat(tq * to, 0.0);  // core x_2 v~
    for (std::size_t i = 0; i < tq; ++i) {
      for (std::size_t j = 0; j < tv; ++j) {
        for (std::size_t k = 0; k < to; ++k) tv_mat[i * to + k] += cd[(i * tv + j) * to + k] * vt[j];
      }
    }
    for (std::size_t i = 0; i < tq; ++i) {
      for (std::size_t k = 0; k < to; ++k) fused[k] += tv_mat[i * to + k] * qt[i];
    }
  }

  const Tensor& wo = params.at("Wo");
  const Tensor& bo = params.at("bo");
  if (wo.rank() != 2 || wo.extent(1) != to || bo.size() != wo.extent(0)) {
    throw ShapeError("tucker_forward: output head does not match core");
  }
  const std::size_t n_classes = wo.extent(0);
  std::vector<double> y(n_classes);
  for (std::size_t a = 0; a < n_classes; ++a) {
    double s = bo.values()[a];
    for (std::size_t k = 0; k < to; ++k) s += wo.values()[a * to + k] * fused[k];
    y[a] = s;
  }
  return Tensor::vector(std::move(y));
}

namespace detail {

// Scalar activations, restated here so the reference fold does not call the
// engine's kernels. Formulas match tensor.hpp operation for operation, which
// makes exact (bitwise) comparison meaningful.
inline double squash_scalar(const ActivationKind& kind, double x) {
  switch (kind.tag) {
    case Activation::identity:
      return x;
    case Activation::leaky_relu:
      return x < 0 ? kind.leaky_slope * x : x;
    case Activation::selu:
      return x < 0 ? 1.0507009873554805 * 1.6732632423543772 * std::expm1(x) : 1.0507009873554805 * x;
    case Activation::sigmoid:
      if (x < 0) {
        const double e = std::exp(x);
        return e / (1.0 + e);
      }
      return 1.0 / (1.0 + std::exp(-x));
    case Activation::tanh:
      return std::tanh(x);
  }
  return x;
}

}  // namespace detail

/// An independent transcription of the ordered binary-operator fold.
inline Tensor brute_reduce(const ReductionPlan& plan, const std::map<std::string, Tensor>& outputs) {
  if (plan.steps.empty()) throw std::invalid_argument("brute_reduce: empty plan");
  std::size_t covered = 0;
  for (const auto& step : plan.steps) {
    for (const auto& m : step.members) {
      if (!outputs.count(m)) throw std::invalid_argument("brute_reduce: unknown branch " + m);
      ++covered;
    }
  }
  if (covered != outputs.size()) throw std::invalid_argument("brute_reduce: plan is not a partition of the outputs");
  const std::size_t n = outputs.begin()->second.size();

  auto unit = [](BinaryOp op) { return op == BinaryOp::sum ? 0.0 : 1.0; };
  auto apply = [](BinaryOp op, double a, double b) { return op == BinaryOp::sum ? a + b : a * b; };

  std::vector<double> result(n);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = unit(plan.steps.front().op);
    for (const auto& step : plan.steps) {
      double part = unit(step.op);
      for (const auto& m : step.members) {
        const Tensor& t = outputs.at(m);
        if (t.size() != n) throw ShapeError("brute_reduce: branch outputs differ in length");
        double x = t.values()[i];
        if (step.squash) x = detail::squash_scalar(*step.squash, x);
        part = apply(step.op, part, x);
      }
      acc = apply(step.op, acc, part);
    }
    result[i] = acc;
  }
  return Tensor::vector(std::move(result));
}

namespace detail {

using Wide = long double;

inline Wide wide_act(const ActivationKind& kind, Wide x) {
  switch (kind.tag) {
    case Activation::identity:
      return x;
    case Activation::leaky_relu:
      return x < 0 ? static_cast<Wide>(kind.leaky_slope) * x : x;
    case Activation::selu:
      return x < 0 ? 1.0507009873554805L * 1.6732632423543772L * std::expm1(x) : 1.0507009873554805L * x;
    case Activation::sigmoid:
      return 1.0L / (1.0L + std::exp(-x));
    case Activation::tanh:
      return std::tanh(x);
  }
  return x;
}

// Reads parameters in extended precision, with at most one coordinate
// shifted by `delta`.
struct WideReader {
  const ParamStore& params;
  const Tensor* target = nullptr;
  std::size_t index = 0;
  Wide delta = 0;

  Wide at(const Tensor& t, std::size_t i) const {
    Wide w = t.values()[i];
    if (&t == target && i == index) w += delta;
    return w;
  }

  std::vector<Wide> affine(const std::string& w_name, const std::vector<Wide>& x, const std::string& b_name = {}) const {
    const Tensor& w = params.at(w_name);
    const std::size_t rows = w.shape().at(0), cols = w.shape().at(1);
    if (cols != x.size()) throw ShapeError("reference_loss: " + w_name + " does not match its input");
    std::vector<Wide> y(rows, 0.0L);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) y[i] += at(w, i * cols + j) * x[j];
    }
    if (!b_name.empty()) {
      const Tensor& b = params.at(b_name);
      for (std::size_t i = 0; i < rows; ++i) y[i] += at(b, i);
    }
    return y;
  }
};

}  // namespace detail

/// Cross-entropy loss of the spec in evaluation mode, recomputed from the
/// raw arrays with long double loops. `target`/`index`/`delta` shift one
/// parameter coordinate before evaluation.
inline long double reference_loss(const FusionSpec& spec, const ParamStore& params, const Tensor& q, const Tensor& v,
                                  std::size_t label, const Tensor* target = nullptr, std::size_t index = 0,
                                  long double delta = 0) {
  using detail::Wide;
  const detail::WideReader rd{params, target, index, delta};
  const std::vector<Wide> qv(q.values().begin(), q.values().end());
  const std::vector<Wide> vv(v.values().begin(), v.values().end());
  const auto qt = rd.affine("Wq", qv);
  const auto vt = rd.affine("Wv", vv);

  std::map<std::string, std::vector<Wide>> outputs;
  for (std::size_t r = 1; r <= spec.rank(); ++r) {
    const auto& br = spec.branches[r - 1];
    auto a = rd.affine(param_names::M(r), qt);
    const auto b = rd.affine(param_names::N(r), vt);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = detail::wide_act(br.f_q, a[i]) * detail::wide_act(br.f_v, b[i]);
    const auto& cfg = br.post;
    if (cfg.n_layers > 0) {
      const std::vector<Wide> x = a;
      std::vector<std::vector<Wide>> acts;
      std::vector<Wide> h = x;
      for (std::size_t l = 1; l <= cfg.n_layers; ++l) {
        h = rd.affine(param_names::phi_W(r, l), h, param_names::phi_b(r, l));
        for (auto& e : h) e = detail::wide_act(br.f_q, e);
        acts.push_back(h);
      }
      a = rd.affine(param_names::phi_out_W(r), h, param_names::phi_out_b(r));
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += x[i];
      for (std::size_t l : skip_taps(cfg)) {
        const auto tap = cfg.hidden == spec.dims.t_o ? acts[l - 1] : rd.affine(param_names::phi_skip_W(r, l), acts[l - 1]);
        for (std::size_t i = 0; i < a.size(); ++i) a[i] += tap[i];
      }
    }
    outputs[br.id] = std::move(a);
  }

  const std::size_t n = spec.dims.t_o;
  auto unit = [](BinaryOp op) { return op == BinaryOp::sum ? 0.0L : 1.0L; };
  std::vector<Wide> fused(n);
  for (std::size_t i = 0; i < n; ++i) {
    Wide acc = unit(spec.plan.steps.front().op);
    for (const auto& step : spec.plan.steps) {
      Wide part = unit(step.op);
      for (const auto& m : step.members) {
        Wide x = outputs.at(m)[i];
        if (step.squash) x = detail::wide_act(*step.squash, x);
        part = step.op == BinaryOp::sum ? part + x : part * x;
      }
      acc = step.op == BinaryOp::sum ? acc + part : acc * part;
    }
    fused[i] = acc;
  }

  const auto logits = rd.affine("Wo", fused, "bo");
  if (label >= logits.size()) throw std::out_of_range("reference_loss: label out of range");
  Wide m = logits[0];
  for (Wide y : logits) m = std::max(m, y);
  Wide z = 0;
  for (Wide y : logits) z += std::exp(y - m);
  return m + std::log(z) - logits[label];
}

/// Central differences of the cross-entropy loss in evaluation mode:
/// (L(theta + h) - L(theta - h)) / 2h with h = step * max(1, |theta|).
/// The loss is the extended-precision reference_loss, so cancellation
/// error stays well below the gradients being checked.
inline GradStore finite_diff_grad(const FusionSpec& spec, const ParamStore& params, const Tensor& q,
                                  const Tensor& v, std::size_t label, double step) {
  if (!(step > 0)) throw std::invalid_argument("finite_diff_grad: step must be positive");
  GradStore grads = params.zeros_like();
  for (const auto& [name, tensor] : params) {
    auto out = grads.at(name).data();
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const long double h = static_cast<long double>(step) * std::max(1.0L, std::abs(static_cast<long double>(tensor[i])));
      const long double up = reference_loss(spec, params, q, v, label, &tensor, i, h);
      const long double down = reference_loss(spec, params, q, v, label, &tensor, i, -h);
      out[i] = static_cast<double>((up - down) / (2.0L * h));
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Check drivers (shared by the CLI and the acceptance suite)
// ---------------------------------------------------------------------------

/// True when the spec is the plain rank-R Hadamard form: identity
/// activations, identity Phi, one unsquashed sum step.
inline bool is_identity_form(const FusionSpec& spec) {
  for (const auto& b : spec.branches) {
    if (b.f_q.tag != Activation::identity || b.f_v.tag != Activation::identity || !b.post.is_identity()) {
      return false;
    }
  }
  return spec.plan.steps.size() == 1 && spec.plan.steps[0].op == BinaryOp::sum && !spec.plan.steps[0].squash;
}

/// Same branch ids and dims, stripped to the plain Hadamard form.
inline FusionSpec identity_form(const FusionSpec& spec) {
  FusionSpec out = spec;
  for (auto& b : out.branches) {
    b.f_q = kIdentity;
    b.f_v = kIdentity;
    b.post = {};
  }
  out.plan = sum_all_plan(out.branches);
  return out;
}

struct SmallDimsRange {
  std::size_t d_min = 2, d_max = 6;    // d_q, d_v
  std::size_t t_min = 2, t_max = 6;    // t_q, t_v
  std::size_t to_min = 2, to_max = 4;  // t_o
  std::size_t c_min = 2, c_max = 5;    // classes
  std::size_t hidden_min = 2, hidden_max = 4;
};

inline std::size_t draw(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Keeps the structure of `spec` (branches, activations, plan, Phi depth
/// and skip period) but draws small dims and Phi widths.
inline FusionSpec shrink(const FusionSpec& spec, Rng& rng, const SmallDimsRange& range = {}) {
  FusionSpec out = spec;
  out.dims.d_q = draw(rng, range.d_min, range.d_max);
  out.dims.d_v = draw(rng, range.d_min, range.d_max);
  out.dims.t_q = draw(rng, range.t_min, range.t_max);
  out.dims.t_v = draw(rng, range.t_min, range.t_max);
  out.dims.t_o = draw(rng, range.to_min, range.to_max);
  out.dims.n_classes = draw(rng, range.c_min, range.c_max);
  for (auto& b : out.branches) {
    if (!b.post.is_identity()) b.post.hidden = draw(rng, range.hidden_min, range.hidden_max);
  }
  return out;
}

/// Every array filled from uniform(-scale, scale), biases included.
inline ParamStore random_params(const FusionSpec& spec, Rng& rng, double scale = 1.0) {
  ParamStore p;
  std::uniform_real_distribution<double> u(-scale, scale);
  for (const auto& [name, shape] : param_shapes(spec)) {
    Tensor t(shape);
    for (auto& x : t.data()) x = u(rng);
    p.set(name, std::move(t));
  }
  return p;
}

inline Tensor random_vector(std::size_t n, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> g(0.0, stddev);
  Tensor t({n});
  for (auto& x : t.data()) x = g(rng);
  return t;
}

struct EquivalenceReport {
  std::size_t seeds = 0;
  double max_rel_err = 0.0;
};

/// Hadamard-form forward vs. explicit core-tensor contraction on `seeds`
/// random small instances of `spec` (which must be in identity form).
/// `tamper` may modify the engine-side parameters (negative controls).
inline EquivalenceReport equivalence_check(const FusionSpec& spec, std::size_t seeds, std::uint64_t base_seed,
                                           bool small_dims = true,
                                           const std::function<void(ParamStore&)>& tamper = {}) {
  if (!is_identity_form(spec)) throw std::invalid_argument("equivalence check needs an identity-form spec");
  EquivalenceReport rep;
  rep.seeds = seeds;
  for (std::size_t s = 0; s < seeds; ++s) {
    auto rng = make_rng({base_seed, tag(Stream::check), s});
    const FusionSpec inst = small_dims ? shrink(spec, rng) : spec;
    const ParamStore params = random_params(inst, rng);
    const Tensor q = random_vector(inst.dims.d_q, rng);
    const Tensor v = random_vector(inst.dims.d_v, rng);
    const CoreTensor core = build_core_tensor(params, inst.rank(), inst.dims);
    const Tensor expected = tucker_forward(core, params, q, v);
    ParamStore engine_params = params;
    if (tamper) tamper(engine_params);
    const Tensor got = forward(inst, engine_params, q, v).logits;
    rep.max_rel_err = std::max(rep.max_rel_err, max_relative_error(got.data(), expected.data()));
  }
  return rep;
}

/// Per-coordinate relative error with the denominator floored at 1e-8.
inline double grad_rel_error(double analytic, double numeric) {
  if (!std::isfinite(analytic) || !std::isfinite(numeric)) return HUGE_VAL;
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Smallest |pre-activation| at any kinked activation (leaky ReLU, SELU)
/// in the trace; +inf when the spec has no kinks.
inline double min_kink_distance(const FusionSpec& spec, const ForwardTrace& tr) {
  double m = HUGE_VAL;
  auto scan = [&](const Tensor& t) {
    for (double x : t.data()) m = std::min(m, std::abs(x));
  };
  for (std::size_t r = 0; r < spec.rank(); ++r) {
    const auto& b = spec.branches[r];
    const auto& bt = tr.branches[r];
    if (has_kink(b.f_q)) {
      scan(bt.q_pre);
      for (const auto& z : bt.post.pre) scan(z);
    }
    if (has_kink(b.f_v)) scan(bt.v_pre);
  }
  for (const auto& step : spec.plan.steps) {
    if (!step.squash || !has_kink(*step.squash)) continue;
    for (const auto& id : step.members) scan(tr.branches[spec.branch_index(id)].output);
  }
  return m;
}

struct GradCheckReport {
  std::size_t instances = 0;
  std::size_t coordinates = 0;
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t worst_instance = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  double kink_margin = 1e-3;
  bool shrink_dims = true;
  std::size_t max_attempts = 200;
};

/// Reverse-mode gradients vs. central differences on `seeds` random small
/// instances. Draws are rejected until every kinked pre-activation sits at
/// least `kink_margin` away from 0. `tamper` may modify the analytic
/// gradients (negative controls).
inline GradCheckReport grad_check(const FusionSpec& spec, std::size_t seeds, std::uint64_t base_seed,
                                  const GradCheckOptions& opt = {},
                                  const std::function<void(GradStore&)>& tamper = {}) {
  GradCheckReport rep;
  for (std::size_t s = 0; s < seeds; ++s) {
    auto rng = make_rng({base_seed, tag(Stream::check), s, 1});
    FusionSpec inst;
    ParamStore params;
    Tensor q, v;
    std::size_t label = 0;
    ForwardTrace tr;
    for (std::size_t attempt = 0;; ++attempt) {
      inst = opt.shrink_dims ? shrink(spec, rng) : spec;
      params = random_params(inst, rng, 0.8);
      q = random_vector(inst.dims.d_q, rng);
      v = random_vector(inst.dims.d_v, rng);
      label = draw(rng, 0, inst.dims.n_classes - 1);
      tr = forward(inst, params, q, v);
      if (min_kink_distance(inst, tr) > opt.kink_margin) break;
      if (attempt + 1 >= opt.max_attempts) {
        throw std::runtime_error("grad_check: could not draw an instance away from activation kinks");
      }
    }
    GradStore analytic = backward(inst, params, tr, label);
    if (tamper) tamper(analytic);
    const GradStore numeric = finite_diff_grad(inst, params, q, v, label, opt.step);
    ++rep.instances;
    for (const auto& [name, a] : analytic) {
      const Tensor& n = numeric.at(name);
      for (std::size_t i = 0; i < a.size(); ++i) {
        ++rep.coordinates;
        const double e = grad_rel_error(a[i], n[i]);
        if (e > rep.max_rel_err || (std::isnan(e) && !std::isnan(rep.max_rel_err))) {
          rep.max_rel_err = e;
          rep.worst_param = name;
          rep.worst_index = i;
          rep.worst_instance = s;
        }
      }
    }
  }
  return rep;
}

}  // namespace fusionop::oracle
