#pragma once

// Compiles a FusionSpec into named parameters and an executable
// forward/backward pass:
//
//   q~ = Wq q,  v~ = Wv v
//   T_r = Phi_r( f_rq(M_r q~) (.) f_rv(N_r v~) )          one per branch
//   T_c = ordered fold of the T_r by the reduction plan
//   y   = Wo T_c + bo,  p = softmax(y)

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "fusionop/dsl.hpp"
#include "fusionop/rng.hpp"
#include "fusionop/tensor.hpp"

namespace fusionop {

// ---------------------------------------------------------------------------
// Parameter storage
// ---------------------------------------------------------------------------

/// Named tensors with sorted (deterministic) iteration order.
class TensorMap {
 public:
  using container = std::map<std::string, Tensor>;

  bool contains(const std::string& name) const { return items_.count(name) != 0; }

  const Tensor& at(const std::string& name) const {
    auto it = items_.find(name);
    if (it == items_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = items_.find(name);
    if (it == items_.end()) throw std::out_of_range("no parameter named '" + name + "'");
    return it->second;
  }

  void set(const std::string& name, Tensor t) { items_.insert_or_assign(name, std::move(t)); }

  std::size_t size() const noexcept { return items_.size(); }
  container::const_iterator begin() const { return items_.begin(); }
  container::const_iterator end() const { return items_.end(); }
  container::iterator begin() { return items_.begin(); }
  container::iterator end() { return items_.end(); }

  /// Total number of scalar entries.
  std::size_t coordinate_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : items_) n += t.size();
    return n;
  }

  TensorMap zeros_like() const {
    TensorMap out;
    for (const auto& [name, t] : items_) out.set(name, Tensor::zeros(t.shape()));
    return out;
  }

  bool operator==(const TensorMap&) const = default;

 private:
  container items_;
};

using ParamStore = TensorMap;
using GradStore = TensorMap;

namespace param_names {

inline std::string M(std::size_t r) { return "M_" + std::to_string(r); }
inline std::string N(std::size_t r) { return "N_" + std::to_string(r); }
inline std::string phi_W(std::size_t r, std::size_t l) {
  return "phi_" + std::to_string(r) + "_" + std::to_string(l) + "_W";
}
inline std::string phi_b(std::size_t r, std::size_t l) {
  return "phi_" + std::to_string(r) + "_" + std::to_string(l) + "_b";
}
inline std::string phi_out_W(std::size_t r) { return "phi_" + std::to_string(r) + "_out_W"; }
inline std::string phi_out_b(std::size_t r) { return "phi_" + std::to_string(r) + "_out_b"; }
inline std::string phi_skip_W(std::size_t r, std::size_t l) {
  return "phi_" + std::to_string(r) + "_skip_" + std::to_string(l) + "_W";
}

}  // namespace param_names

/// Layers (1-based) whose activations are added to Phi's output.
inline std::vector<std::size_t> skip_taps(const PostFusionConfig& cfg) {
  std::vector<std::size_t> taps;
  if (cfg.skip_period == 0) return taps;
  for (std::size_t l = cfg.skip_period; l <= cfg.n_layers; l += cfg.skip_period) taps.push_back(l);
  return taps;
}

inline bool is_bias_name(const std::string& name) {
  return name == "bo" || (name.size() > 2 && name.compare(name.size() - 2, 2, "_b") == 0);
}

/// Name -> shape for every learned array of `spec`.
inline std::map<std::string, Shape> param_shapes(const FusionSpec& spec) {
  const auto& d = spec.dims;
  std::map<std::string, Shape> shapes;
  shapes["Wq"] = {d.t_q, d.d_q};
  shapes["Wv"] = {d.t_v, d.d_v};
  shapes["Wo"] = {d.n_classes, d.t_o};
  shapes["bo"] = {d.n_classes};
  for (std::size_t r = 1; r <= spec.rank(); ++r) {
    shapes[param_names::M(r)] = {d.t_o, d.t_q};
    shapes[param_names::N(r)] = {d.t_o, d.t_v};
    const auto& post = spec.branches[r - 1].post;
    if (post.is_identity()) continue;
    const std::size_t h = post.hidden;
    for (std::size_t l = 1; l <= post.n_layers; ++l) {
      shapes[param_names::phi_W(r, l)] = {h, l == 1 ? d.t_o : h};
      shapes[param_names::phi_b(r, l)] = {h};
    }
    shapes[param_names::phi_out_W(r)] = {d.t_o, h};
    shapes[param_names::phi_out_b(r)] = {d.t_o};
    if (h != d.t_o) {
      for (std::size_t l : skip_taps(post)) shapes[param_names::phi_skip_W(r, l)] = {d.t_o, h};
    }
  }
  return shapes;
}

/// Glorot-uniform weights, zero biases. Each array draws from its own
/// stream keyed by (seed, name), so the values of an array do not depend on
/// which other arrays the spec declares.
inline ParamStore init_params(const FusionSpec& spec, std::uint64_t seed) {
  ParamStore store;
  for (const auto& [name, shape] : param_shapes(spec)) {
    Tensor t(shape);
    if (!is_bias_name(name)) {
      const double fan_out = static_cast<double>(shape[0]);
      const double fan_in = static_cast<double>(shape.size() > 1 ? shape[1] : 1);
      const double a = std::sqrt(6.0 / (fan_in + fan_out));
      auto rng = make_rng({seed, tag(Stream::init), fnv1a(name)});
      std::uniform_real_distribution<double> dist(-a, a);
      for (auto& x : t.data()) x = dist(rng);
    }
    store.set(name, std::move(t));
  }
  return store;
}

// ---------------------------------------------------------------------------
// Resolved views
// ---------------------------------------------------------------------------

/// Pointers into a store for one post-fusion network. `skip_W[i]` belongs
/// to `taps[i]` and is null when the tap adds without projection.
template <class T>
struct PhiRefs {
  std::vector<T*> W, b;
  T* out_W = nullptr;
  T* out_b = nullptr;
  std::vector<std::size_t> taps;
  std::vector<T*> skip_W;
};

template <class T>
struct BranchRefs {
  T* M = nullptr;
  T* N = nullptr;
  PhiRefs<T> phi;
};

template <class T>
struct ModelRefs {
  T* Wq = nullptr;
  T* Wv = nullptr;
  T* Wo = nullptr;
  T* bo = nullptr;
  std::vector<BranchRefs<T>> branches;
};

/// Resolves every array `spec` needs from `store`, checking shapes.
template <class Store>
auto bind(const FusionSpec& spec, Store& store) {
  using T = std::conditional_t<std::is_const_v<Store>, const Tensor, Tensor>;
  const auto shapes = param_shapes(spec);
  auto get = [&](const std::string& name) -> T* {
    T& t = store.at(name);
    const auto& want = shapes.at(name);
    if (t.shape() != want) {
      throw ShapeError("parameter " + name + " has shape " + shape_string(t.shape()) +
                       ", expected " + shape_string(want));
    }
    return &t;
  };
  ModelRefs<T> refs;
  refs.Wq = get("Wq");
  refs.Wv = get("Wv");
  refs.Wo = get("Wo");
  refs.bo = get("bo");
  for (std::size_t r = 1; r <= spec.rank(); ++r) {
    BranchRefs<T> br;
    br.M = get(param_names::M(r));
    br.N = get(param_names::N(r));
    const auto& post = spec.branches[r - 1].post;
    if (!post.is_identity()) {
      for (std::size_t l = 1; l <= post.n_layers; ++l) {
        br.phi.W.push_back(get(param_names::phi_W(r, l)));
        br.phi.b.push_back(get(param_names::phi_b(r, l)));
      }
      br.phi.out_W = get(param_names::phi_out_W(r));
      br.phi.out_b = get(param_names::phi_out_b(r));
      br.phi.taps = skip_taps(post);
      for (std::size_t l : br.phi.taps) {
        br.phi.skip_W.push_back(post.hidden != spec.dims.t_o ? get(param_names::phi_skip_W(r, l))
                                                             : nullptr);
      }
    }
    refs.branches.push_back(std::move(br));
  }
  return refs;
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

struct PostFusionTrace {
  Tensor input;
  std::vector<Tensor> pre;    // W_l h_{l-1} + b_l
  std::vector<Tensor> act;    // dropout-masked activations h_l
  std::vector<Tensor> masks;  // per layer: 0 or 1/(1-p); empty when no dropout
  Tensor output;
};

struct BranchTrace {
  Tensor q_pre;  // M_r q~
  Tensor v_pre;  // N_r v~
  Tensor q_act;
  Tensor v_act;
  Tensor product;  // q_act (.) v_act
  PostFusionTrace post;
  Tensor output;  // T_r
};

struct ReductionStepTrace {
  Tensor v_before;
  std::vector<Tensor> folds;  // folds[0] = identity, folds[k] after k members
  Tensor v_after;
};

struct ReductionTrace {
  std::vector<Tensor> inputs;  // per branch index: squashed T_r (or T_r itself)
  std::vector<ReductionStepTrace> steps;
};

struct ForwardTrace {
  Tensor q, v;
  Tensor q_proj, v_proj;
  std::vector<BranchTrace> branches;
  ReductionTrace reduction;
  Tensor fused;
  Tensor logits;
  Tensor probs;
  bool train_mode = false;
};

// ---------------------------------------------------------------------------
// Post-fusion network
// ---------------------------------------------------------------------------

/// Phi_r: `n_layers` dense layers (t_o -> hidden -> ... -> hidden), a linear
/// output projection back to t_o, plus skip connections from the input and
/// from every `skip_period`-th layer to the output. Every layer uses `act`.
/// `dropout_rng` enables inverted dropout on the hidden units.
inline Tensor post_fusion_forward(const PostFusionConfig& cfg, const PhiRefs<const Tensor>& w,
                                  const ActivationKind& act, const Tensor& x,
                                  PostFusionTrace* trace = nullptr, Rng* dropout_rng = nullptr) {
  if (cfg.is_identity()) {
    if (trace) {
      trace->input = x;
      trace->output = x;
    }
    return x;
  }
  if (w.W.size() != cfg.n_layers || !w.out_W || w.taps.size() != w.skip_W.size()) {
    throw ShapeError("post-fusion weights do not match the configured layer count");
  }
  const bool drop = dropout_rng && cfg.dropout > 0.0;
  const double keep_scale = drop ? 1.0 / (1.0 - cfg.dropout) : 1.0;
  std::uniform_real_distribution<double> u01(0.0, 1.0);

  std::vector<Tensor> acts;
  acts.reserve(cfg.n_layers);
  Tensor h = x;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    Tensor z = matvec(*w.W[l], h);
    add_into(z, *w.b[l]);
    Tensor a = apply_activation(act, z);
    if (drop) {
      Tensor mask(a.shape());
      for (std::size_t i = 0; i < mask.size(); ++i) {
        mask[i] = u01(*dropout_rng) < cfg.dropout ? 0.0 : keep_scale;
        a[i] *= mask[i];
      }
      if (trace) trace->masks.push_back(std::move(mask));
    }
    if (trace) trace->pre.push_back(std::move(z));
    h = a;
    acts.push_back(std::move(a));
  }
  Tensor out = matvec(*w.out_W, h);
  add_into(out, *w.out_b);
  add_into(out, x);
  for (std::size_t i = 0; i < w.taps.size(); ++i) {
    const Tensor& src = acts[w.taps[i] - 1];
    if (w.skip_W[i]) {
      add_into(out, matvec(*w.skip_W[i], src));
    } else {
      add_into(out, src);
    }
  }
  if (trace) {
    trace->input = x;
    trace->act = std::move(acts);
    trace->output = out;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reduction (ordered fold over a partition of branch outputs)
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor op_identity(BinaryOp op, std::size_t n) {
  return op == BinaryOp::sum ? Tensor::zeros({n}) : Tensor::ones({n});
}

inline Tensor combine(BinaryOp op, const Tensor& a, const Tensor& b) {
  return op == BinaryOp::sum ? add(a, b) : hadamard(a, b);
}

struct IndexedStep {
  BinaryOp op;
  std::vector<std::size_t> members;
  std::optional<ActivationKind> squash;
};

inline std::vector<IndexedStep> index_plan(const ReductionPlan& plan,
                                           const std::vector<std::string>& ids) {
  std::vector<IndexedStep> out;
  std::vector<bool> used(ids.size(), false);
  for (const auto& step : plan.steps) {
    IndexedStep s{step.op, {}, step.squash};
    for (const auto& m : step.members) {
      auto it = std::find(ids.begin(), ids.end(), m);
      if (it == ids.end()) throw std::invalid_argument("reduction plan names unknown branch " + m);
      const auto idx = static_cast<std::size_t>(it - ids.begin());
      if (used[idx]) throw std::invalid_argument("branch " + m + " appears in multiple steps");
      used[idx] = true;
      s.members.push_back(idx);
    }
    out.push_back(std::move(s));
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!used[i]) throw std::invalid_argument("plan does not cover branch " + ids[i]);
  }
  if (out.empty()) throw std::invalid_argument("reduction plan has no steps");
  return out;
}

/// The fold itself: v <- Identity(op_1); for each step b, v_b <- Identity(op_b),
/// v_b <- v_b op_b x for each (squashed) member x, then v <- v op_b v_b.
inline Tensor reduce_indexed(const std::vector<IndexedStep>& steps,
                             const std::vector<const Tensor*>& outputs, ReductionTrace* trace) {
  if (outputs.empty()) throw std::invalid_argument("no branch outputs to reduce");
  const std::size_t n = outputs.front()->size();
  if (trace) {
    trace->inputs.assign(outputs.size(), Tensor());
    trace->steps.clear();
  }
  Tensor v = op_identity(steps.front().op, n);
  for (const auto& step : steps) {
    ReductionStepTrace st;
    Tensor vb = op_identity(step.op, n);
    if (trace) st.folds.push_back(vb);
    for (std::size_t idx : step.members) {
      const Tensor& raw = *outputs[idx];
      if (raw.shape() != Shape{n}) {
        throw ShapeError("branch output shape " + shape_string(raw.shape()) + " differs from " +
                         shape_string({n}));
      }
      Tensor x = step.squash ? apply_activation(*step.squash, raw) : raw;
      vb = combine(step.op, vb, x);
      if (trace) {
        st.folds.push_back(vb);
        trace->inputs[idx] = std::move(x);
      }
    }
    if (trace) st.v_before = v;
    v = combine(step.op, v, vb);
    if (trace) {
      st.v_after = v;
      trace->steps.push_back(std::move(st));
    }
  }
  return v;
}

}  // namespace detail

/// Folds the branch outputs (keyed by branch id) with the plan's ordered
/// sequence of binary operators.
inline Tensor reduce_branches(const ReductionPlan& plan, const std::map<std::string, Tensor>& outputs) {
  std::vector<std::string> ids;
  std::vector<const Tensor*> ptrs;
  for (const auto& [id, t] : outputs) {
    ids.push_back(id);
    ptrs.push_back(&t);
  }
  return detail::reduce_indexed(detail::index_plan(plan, ids), ptrs, nullptr);
}

inline std::vector<std::string> branch_ids(const FusionSpec& spec) {
  std::vector<std::string> ids;
  for (const auto& b : spec.branches) ids.push_back(b.id);
  return ids;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

inline Tensor branch_forward_indexed(const FusionSpec& spec, const ModelRefs<const Tensor>& refs,
                                     std::size_t r, const Tensor& q_proj, const Tensor& v_proj,
                                     BranchTrace* trace, Rng* dropout_rng) {
  const auto& b = spec.branches.at(r);
  const auto& w = refs.branches.at(r);
  Tensor q_pre = matvec(*w.M, q_proj);
  Tensor v_pre = matvec(*w.N, v_proj);
  Tensor q_act = apply_activation(b.f_q, q_pre);
  Tensor v_act = apply_activation(b.f_v, v_pre);
  Tensor prod = hadamard(q_act, v_act);
  Tensor out = post_fusion_forward(b.post, w.phi, b.f_q, prod, trace ? &trace->post : nullptr,
                                   dropout_rng);
  if (trace) {
    trace->q_pre = std::move(q_pre);
    trace->v_pre = std::move(v_pre);
    trace->q_act = std::move(q_act);
    trace->v_act = std::move(v_act);
    trace->product = std::move(prod);
    trace->output = out;
  }
  return out;
}

/// T_r = Phi_r(f_rq(M_r q~) (.) f_rv(N_r v~)) for the branch named `id`
/// (evaluation mode).
inline std::pair<Tensor, BranchTrace> branch_forward(const FusionSpec& spec, const ParamStore& params,
                                                     const std::string& id, const Tensor& q_proj,
                                                     const Tensor& v_proj) {
  const std::size_t r = spec.branch_index(id);
  if (r == FusionSpec::npos) throw std::invalid_argument("unknown branch " + id);
  const auto refs = bind(spec, params);
  BranchTrace trace;
  Tensor out = branch_forward_indexed(spec, refs, r, q_proj, v_proj, &trace, nullptr);
  return {std::move(out), std::move(trace)};
}

inline Tensor softmax(const Tensor& logits) {
  double m = -HUGE_VAL;
  for (double y : logits.data()) m = std::max(m, y);
  Tensor p(logits.shape());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    z += p[i];
  }
  for (auto& x : p.data()) x /= z;
  return p;
}

inline bool has_dropout(const FusionSpec& spec) {
  return std::any_of(spec.branches.begin(), spec.branches.end(),
                     [](const BranchSpec& b) { return !b.post.is_identity() && b.post.dropout > 0; });
}

inline ForwardTrace forward(const FusionSpec& spec, const ModelRefs<const Tensor>& refs,
                            const std::vector<detail::IndexedStep>& plan, const Tensor& q,
                            const Tensor& v, bool train_mode, std::uint64_t seed) {
  const auto& d = spec.dims;
  if (q.shape() != Shape{d.d_q}) {
    throw ShapeError("question features have shape " + shape_string(q.shape()) + ", expected [" +
                     std::to_string(d.d_q) + "]");
  }
  if (v.shape() != Shape{d.d_v}) {
    throw ShapeError("visual features have shape " + shape_string(v.shape()) + ", expected [" +
                     std::to_string(d.d_v) + "]");
  }
  ForwardTrace tr;
  tr.train_mode = train_mode;
  tr.q = q;
  tr.v = v;
  tr.q_proj = matvec(*refs.Wq, q);
  tr.v_proj = matvec(*refs.Wv, v);

  std::optional<Rng> rng;
  if (train_mode && has_dropout(spec)) rng.emplace(make_rng({seed, tag(Stream::dropout)}));

  tr.branches.resize(spec.rank());
  std::vector<const Tensor*> outputs;
  for (std::size_t r = 0; r < spec.rank(); ++r) {
    branch_forward_indexed(spec, refs, r, tr.q_proj, tr.v_proj, &tr.branches[r],
                           rng ? &*rng : nullptr);
    outputs.push_back(&tr.branches[r].output);
  }
  tr.fused = detail::reduce_indexed(plan, outputs, &tr.reduction);
  tr.logits = matvec(*refs.Wo, tr.fused);
  add_into(tr.logits, *refs.bo);
  tr.probs = softmax(tr.logits);
  return tr;
}

/// Full forward pass. `train_mode` enables dropout, drawn from `seed`.
inline ForwardTrace forward(const FusionSpec& spec, const ParamStore& params, const Tensor& q,
                            const Tensor& v, bool train_mode = false, std::uint64_t seed = 0) {
  const auto refs = bind(spec, params);
  const auto plan = detail::index_plan(spec.plan, branch_ids(spec));
  return forward(spec, refs, plan, q, v, train_mode, seed);
}

/// -log softmax(y)[label], via log-sum-exp.
inline double loss_xent(const ForwardTrace& trace, std::size_t label) {
  const auto& y = trace.logits;
  if (label >= y.size()) {
    throw std::out_of_range("label " + std::to_string(label) + " out of range for " +
                            std::to_string(y.size()) + " classes");
  }
  double m = -HUGE_VAL;
  for (double x : y.data()) m = std::max(m, x);
  double z = 0.0;
  for (double x : y.data()) z += std::exp(x - m);
  return m + std::log(z) - y[label];
}

/// Index of the largest logit; ties go to the smallest index.
inline std::size_t argmax(const Tensor& t) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.size(); ++i) {
    if (t[i] > t[best]) best = i;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace detail {

inline void check_trace(const FusionSpec& spec, const ForwardTrace& trace) {
  const auto& d = spec.dims;
  if (trace.branches.size() != spec.rank() || trace.logits.shape() != Shape{d.n_classes} ||
      trace.fused.shape() != Shape{d.t_o} || trace.q_proj.shape() != Shape{d.t_q} ||
      trace.v_proj.shape() != Shape{d.t_v} || trace.reduction.steps.size() != spec.plan.steps.size()) {
    throw std::invalid_argument("forward trace is inconsistent with the spec");
  }
}

/// Returns dL/dx for Phi's input and accumulates weight gradients.
inline Tensor post_fusion_backward(const PostFusionConfig& cfg, const PhiRefs<const Tensor>& w,
                                   PhiRefs<Tensor>& g, const ActivationKind& act,
                                   const PostFusionTrace& tr, const Tensor& g_out) {
  if (cfg.is_identity()) return g_out;
  const std::size_t L = cfg.n_layers;
  std::vector<Tensor> g_h(L);
  add_outer_into(*g.out_W, g_out, tr.act[L - 1]);
  add_into(*g.out_b, g_out);
  g_h[L - 1] = matvec_transposed(*w.out_W, g_out);
  for (std::size_t i = 0; i < w.taps.size(); ++i) {
    const std::size_t l = w.taps[i] - 1;
    if (w.skip_W[i]) {
      add_outer_into(*g.skip_W[i], g_out, tr.act[l]);
      Tensor back = matvec_transposed(*w.skip_W[i], g_out);
      if (g_h[l].empty()) g_h[l] = std::move(back);
      else add_into(g_h[l], back);
    } else {
      if (g_h[l].empty()) g_h[l] = g_out;
      else add_into(g_h[l], g_out);
    }
  }
  Tensor g_x = g_out;  // input skip
  for (std::size_t l = L; l-- > 0;) {
    if (g_h[l].empty()) continue;
    Tensor g_a = g_h[l];
    if (!tr.masks.empty()) g_a = hadamard(g_a, tr.masks[l]);
    Tensor g_z = activation_grad(act, tr.pre[l], g_a);
    const Tensor& below = l == 0 ? tr.input : tr.act[l - 1];
    add_outer_into(*g.W[l], g_z, below);
    add_into(*g.b[l], g_z);
    Tensor back = matvec_transposed(*w.W[l], g_z);
    if (l == 0) {
      add_into(g_x, back);
    } else if (g_h[l - 1].empty()) {
      g_h[l - 1] = std::move(back);
    } else {
      add_into(g_h[l - 1], back);
    }
  }
  return g_x;
}

/// Returns dL/dT_r for every branch, given dL/dT_c.
inline std::vector<Tensor> reduce_backward(const std::vector<IndexedStep>& steps,
                                           const ForwardTrace& trace, const Tensor& g_fused) {
  const auto& rt = trace.reduction;
  std::vector<Tensor> g_branch(trace.branches.size());
  Tensor g_v = g_fused;
  for (std::size_t s = steps.size(); s-- > 0;) {
    const auto& step = steps[s];
    const auto& st = rt.steps[s];
    const Tensor& vb = st.folds.back();
    Tensor g_vb;
    if (step.op == BinaryOp::sum) {
      g_vb = g_v;
    } else {
      g_vb = hadamard(g_v, st.v_before);
      g_v = hadamard(g_v, vb);
    }
    Tensor g_fold = std::move(g_vb);
    for (std::size_t k = step.members.size(); k-- > 0;) {
      const std::size_t idx = step.members[k];
      Tensor g_x;
      if (step.op == BinaryOp::sum) {
        g_x = g_fold;
      } else {
        g_x = hadamard(g_fold, st.folds[k]);
        g_fold = hadamard(g_fold, rt.inputs[idx]);
      }
      if (step.squash) g_x = activation_grad(*step.squash, trace.branches[idx].output, g_x);
      g_branch[idx] = std::move(g_x);
    }
  }
  return g_branch;
}

}  // namespace detail

/// Adds scale * dL/dtheta to `grads`, where L = loss_xent(trace, label).
inline void backward_accumulate(const FusionSpec& spec, const ModelRefs<const Tensor>& w,
                                const std::vector<detail::IndexedStep>& plan,
                                const ForwardTrace& trace, std::size_t label,
                                ModelRefs<Tensor>& g) {
  detail::check_trace(spec, trace);
  if (label >= spec.dims.n_classes) {
    throw std::out_of_range("label " + std::to_string(label) + " out of range");
  }
  Tensor g_y = trace.probs;
  g_y[label] -= 1.0;

  add_outer_into(*g.Wo, g_y, trace.fused);
  add_into(*g.bo, g_y);
  const Tensor g_fused = matvec_transposed(*w.Wo, g_y);

  const auto g_branch = detail::reduce_backward(plan, trace, g_fused);

  Tensor g_qp = Tensor::zeros({spec.dims.t_q});
  Tensor g_vp = Tensor::zeros({spec.dims.t_v});
  for (std::size_t r = 0; r < spec.rank(); ++r) {
    const auto& b = spec.branches[r];
    const auto& bt = trace.branches[r];
    Tensor g_prod =
        detail::post_fusion_backward(b.post, w.branches[r].phi, g.branches[r].phi, b.f_q, bt.post, g_branch[r]);
    Tensor g_qa = activation_grad(b.f_q, bt.q_pre, hadamard(g_prod, bt.v_act));
    Tensor g_va = activation_grad(b.f_v, bt.v_pre, hadamard(g_prod, bt.q_act));
    add_outer_into(*g.branches[r].M, g_qa, trace.q_proj);
    add_outer_into(*g.branches[r].N, g_va, trace.v_proj);
    add_into(g_qp, matvec_transposed(*w.branches[r].M, g_qa));
    add_into(g_vp, matvec_transposed(*w.branches[r].N, g_va));
  }
  add_outer_into(*g.Wq, g_qp, trace.q);
  add_outer_into(*g.Wv, g_vp, trace.v);
}

/// Exact gradient of loss_xent(trace, label) with respect to every parameter.
inline GradStore backward(const FusionSpec& spec, const ParamStore& params, const ForwardTrace& trace,
                          std::size_t label) {
  GradStore grads = params.zeros_like();
  const auto w = bind(spec, params);
  auto g = bind(spec, grads);
  const auto plan = detail::index_plan(spec.plan, branch_ids(spec));
  backward_accumulate(spec, w, plan, trace, label, g);
  return grads;
}

/// A spec bound to a parameter store, for repeated forward/backward calls
/// without re-resolving names. The store must outlive the model and keep
/// its arrays in place.
class BoundModel {
 public:
  BoundModel(const FusionSpec& spec, const ParamStore& params)
      : spec_(&spec), refs_(bind(spec, params)), plan_(detail::index_plan(spec.plan, branch_ids(spec))) {}

  ForwardTrace forward(const Tensor& q, const Tensor& v, bool train_mode = false,
                       std::uint64_t seed = 0) const {
    return fusionop::forward(*spec_, refs_, plan_, q, v, train_mode, seed);
  }

  void backward_into(const ForwardTrace& trace, std::size_t label, ModelRefs<Tensor>& grads) const {
    backward_accumulate(*spec_, refs_, plan_, trace, label, grads);
  }

  const FusionSpec& spec() const noexcept { return *spec_; }

 private:
  const FusionSpec* spec_;
  ModelRefs<const Tensor> refs_;
  std::vector<detail::IndexedStep> plan_;
};

}  // namespace fusionop
