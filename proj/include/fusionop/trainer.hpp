#pragma once

// Desk-scale training: teacher-labelled synthetic data, the binary dataset
// format, Adam, and a minibatch loop that keeps the best-validation epoch.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fusionop/dsl.hpp"
#include "fusionop/graph.hpp"
#include "fusionop/rng.hpp"
#include "fusionop/tensor.hpp"

namespace fusionop {

class DimensionMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Example {
  Tensor q;
  Tensor v;
  std::size_t label = 0;

  bool operator==(const Example&) const = default;
};

struct Dataset {
  std::size_t d_q = 0;
  std::size_t d_v = 0;
  std::size_t n_classes = 0;
  std::vector<Example> examples;

  std::size_t size() const noexcept { return examples.size(); }
  bool operator==(const Dataset&) const = default;
};

inline void check_dims(const FusionSpec& spec, const Dataset& data, std::string_view what) {
  const auto& d = spec.dims;
  if (data.d_q != d.d_q || data.d_v != d.d_v || data.n_classes != d.n_classes) {
    throw DimensionMismatch(std::string(what) + " has dims (dq=" + std::to_string(data.d_q) +
                            ", dv=" + std::to_string(data.d_v) + ", classes=" +
                            std::to_string(data.n_classes) + ") but the spec expects (dq=" +
                            std::to_string(d.d_q) + ", dv=" + std::to_string(d.d_v) +
                            ", classes=" + std::to_string(d.n_classes) + ")");
  }
}

/// Labels i.i.d. normal(0, input_scale^2) inputs with the argmax of the
/// teacher's evaluation-mode logits.
inline Dataset generate_synthetic_dataset(const FusionSpec& teacher, const ParamStore& teacher_params,
                                          std::size_t n, double input_scale, std::uint64_t data_seed) {
  if (n < 1) throw std::invalid_argument("dataset size must be >= 1");
  const BoundModel model(teacher, teacher_params);
  auto rng = make_rng({data_seed, tag(Stream::data)});
  std::normal_distribution<double> g(0.0, input_scale);
  Dataset ds{teacher.dims.d_q, teacher.dims.d_v, teacher.dims.n_classes, {}};
  ds.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Tensor q({teacher.dims.d_q});
    Tensor v({teacher.dims.d_v});
    for (auto& x : q.data()) x = g(rng);
    for (auto& x : v.data()) x = g(rng);
    const std::size_t label = argmax(model.forward(q, v).logits);
    ds.examples.push_back({std::move(q), std::move(v), label});
  }
  return ds;
}

/// Teacher weights are init_params(teacher, teacher_seed), so a student of
/// the same spec trained with that seed starts at the teacher.
inline Dataset generate_synthetic_dataset(const FusionSpec& teacher, std::uint64_t teacher_seed,
                                          std::size_t n, double input_scale, std::uint64_t data_seed) {
  return generate_synthetic_dataset(teacher, init_params(teacher, teacher_seed), n, input_scale, data_seed);
}

/// First `n` examples (all of them when n == 0 or n >= size).
inline Dataset head(const Dataset& ds, std::size_t n) {
  if (n == 0 || n >= ds.size()) return ds;
  Dataset out{ds.d_q, ds.d_v, ds.n_classes, {}};
  out.examples.assign(ds.examples.begin(), ds.examples.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

// ---------------------------------------------------------------------------
// Binary dataset format (little-endian):
//   "FQVD" u32 version=1 u32 n u32 d_q u32 d_v u32 n_classes
//   n x { d_q f64, d_v f64, u32 label }
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double d) {
  const auto x = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return x;
  }

  double f64() {
    need(8);
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(x);
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("dataset is truncated");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline std::uint32_t checked_u32(std::size_t x, const char* what) {
  if (x > 0xffffffffu) throw IoError(std::string(what) + " does not fit in u32");
  return static_cast<std::uint32_t>(x);
}

}  // namespace detail

inline std::string encode_dataset(const Dataset& ds) {
  std::string out = "FQVD";
  detail::put_u32(out, 1);
  detail::put_u32(out, detail::checked_u32(ds.size(), "example count"));
  detail::put_u32(out, detail::checked_u32(ds.d_q, "d_q"));
  detail::put_u32(out, detail::checked_u32(ds.d_v, "d_v"));
  detail::put_u32(out, detail::checked_u32(ds.n_classes, "n_classes"));
  for (const auto& ex : ds.examples) {
    if (ex.q.size() != ds.d_q || ex.v.size() != ds.d_v || ex.label >= ds.n_classes) {
      throw DimensionMismatch("example does not match the dataset header");
    }
    for (double x : ex.q.data()) detail::put_f64(out, x);
    for (double x : ex.v.data()) detail::put_f64(out, x);
    detail::put_u32(out, static_cast<std::uint32_t>(ex.label));
  }
  return out;
}

inline Dataset decode_dataset(std::string_view bytes) {
  detail::ByteReader in(bytes);
  if (in.take(4) != "FQVD") throw IoError("not a dataset file (bad magic)");
  const auto version = in.u32();
  if (version != 1) throw IoError("unsupported dataset version " + std::to_string(version));
  const std::size_t n = in.u32();
  Dataset ds;
  ds.d_q = in.u32();
  ds.d_v = in.u32();
  ds.n_classes = in.u32();
  if (ds.d_q == 0 || ds.d_v == 0 || ds.n_classes == 0) throw IoError("dataset header has a zero dimension");
  const std::size_t record = (ds.d_q + ds.d_v) * 8 + 4;
  if ((bytes.size() - 24) / record < n) throw IoError("dataset is truncated");
  ds.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Example ex{Tensor({ds.d_q}), Tensor({ds.d_v}), 0};
    for (auto& x : ex.q.data()) x = in.f64();
    for (auto& x : ex.v.data()) x = in.f64();
    ex.label = in.u32();
    if (ex.label >= ds.n_classes) {
      throw IoError("example " + std::to_string(i) + " has label " + std::to_string(ex.label) +
                    " >= n_classes " + std::to_string(ds.n_classes));
    }
    ds.examples.push_back(std::move(ex));
  }
  if (!in.done()) throw IoError("trailing bytes after the last example");
  return ds;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path);
}

inline void write_dataset(const std::string& path, const Dataset& ds) { write_file(path, encode_dataset(ds)); }
inline Dataset read_dataset(const std::string& path) { return decode_dataset(read_file(path)); }

// ---------------------------------------------------------------------------
// Optimisation
// ---------------------------------------------------------------------------

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 128;
  std::size_t max_epochs = 100;
  std::uint64_t seed = 0;
  /// Stop after this many epochs without a new best validation accuracy;
  /// 0 runs every epoch.
  std::size_t patience = 0;

  void validate() const {
    if (!(lr > 0)) throw std::invalid_argument("lr must be > 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
      throw std::invalid_argument("Adam betas must lie in [0, 1)");
    }
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  }
};

struct AdamState {
  TensorMap m;
  TensorMap v;
};

/// One Adam update at step t (1-based), in place:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2,
///   theta <- theta - lr * m^ / (sqrt(v^) + eps)  with bias-corrected m^, v^.
inline void adam_step(ParamStore& params, const GradStore& grads, AdamState& state, const TrainConfig& cfg,
                      std::size_t t) {
  if (t < 1) throw std::invalid_argument("adam_step: t must be >= 1");
  if (state.m.size() == 0) {
    state.m = params.zeros_like();
    state.v = params.zeros_like();
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (auto& [name, theta] : params) {
    const Tensor& g = grads.at(name);
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    if (g.shape() != theta.shape() || m.shape() != theta.shape()) {
      throw ShapeError("adam_step: shape mismatch for " + name);
    }
    auto th = theta.data();
    for (std::size_t i = 0; i < th.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      th[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;

  bool operator==(const EpochRecord&) const = default;
};

struct Metrics {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based; 0 before any epoch
  double wall_time_s = 0.0;

  double best_val_acc() const { return best_epoch ? epochs[best_epoch - 1].val_acc : 0.0; }
};

/// One JSON object per epoch: {epoch, train_loss, train_acc, val_acc}.
inline std::string metrics_jsonl(const Metrics& m) {
  std::string out;
  for (const auto& e : m.epochs) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["train_loss"] = e.train_loss;
    j["train_acc"] = e.train_acc;
    j["val_acc"] = e.val_acc;
    out += j.dump();
    out += '\n';
  }
  return out;
}

/// Top-1 accuracy in evaluation mode; ties go to the smallest class index.
inline double evaluate(const FusionSpec& spec, const ParamStore& params, const Dataset& data) {
  check_dims(spec, data, "dataset");
  if (data.size() == 0) throw std::invalid_argument("cannot evaluate on an empty dataset");
  const BoundModel model(spec, params);
  std::size_t correct = 0;
  for (const auto& ex : data.examples) {
    if (argmax(model.forward(ex.q, ex.v).logits) == ex.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

struct TrainResult {
  ParamStore params;  // from the best-validation epoch
  Metrics metrics;
};

/// Minibatch Adam from `initial`. Batch gradients are means over the batch;
/// examples are reshuffled each epoch from cfg.seed.
inline TrainResult train(const FusionSpec& spec, ParamStore initial, const Dataset& train_set,
                         const Dataset& val_set, const TrainConfig& cfg) {
  cfg.validate();
  check_dims(spec, train_set, "training set");
  check_dims(spec, val_set, "validation set");
  if (train_set.size() == 0 || val_set.size() == 0) throw std::invalid_argument("datasets must be nonempty");
  const auto start = std::chrono::steady_clock::now();

  ParamStore params = std::move(initial);
  GradStore grads = params.zeros_like();
  AdamState adam;
  const BoundModel model(spec, params);
  auto grad_refs = bind(spec, grads);
  const bool dropout = has_dropout(spec);

  TrainResult result;
  result.params = params;
  double best_acc = -1.0;
  std::size_t step = 0;
  std::vector<std::size_t> order(train_set.size());

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto shuffle_rng = make_rng({cfg.seed, tag(Stream::shuffle), epoch});
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      for (auto& [_, g] : grads) std::fill(g.data().begin(), g.data().end(), 0.0);
      for (std::size_t k = begin; k < end; ++k) {
        const Example& ex = train_set.examples[order[k]];
        const std::uint64_t dropout_seed = dropout ? (cfg.seed ^ (epoch << 40) ^ k) : 0;
        const ForwardTrace tr = model.forward(ex.q, ex.v, true, dropout_seed);
        const double loss = loss_xent(tr, ex.label);
        if (!std::isfinite(loss)) {
          throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
        }
        loss_sum += loss;
        if (argmax(tr.logits) == ex.label) ++correct;
        model.backward_into(tr, ex.label, grad_refs);
      }
      const double inv = 1.0 / static_cast<double>(end - begin);
      for (auto& [_, g] : grads) {
        for (auto& x : g.data()) x *= inv;
      }
      adam_step(params, grads, adam, cfg, ++step);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(train_set.size());
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(train_set.size());
    rec.val_acc = evaluate(spec, params, val_set);
    result.metrics.epochs.push_back(rec);
    if (rec.val_acc > best_acc) {
      best_acc = rec.val_acc;
      result.metrics.best_epoch = epoch;
      result.params = params;
    }
    if (cfg.patience > 0 && epoch - result.metrics.best_epoch >= cfg.patience) break;
  }
  result.metrics.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

/// Trains from init_params(spec, cfg.seed).
inline TrainResult train(const FusionSpec& spec, const Dataset& train_set, const Dataset& val_set,
                         const TrainConfig& cfg) {
  return train(spec, init_params(spec, cfg.seed), train_set, val_set, cfg);
}

}  // namespace fusionop
