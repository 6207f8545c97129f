#pragma once

// Enumerating and ranking members of the fusion-operator family: the
// nonlinearity-pair grid, seeded random sampling of the design space, and a
// short-budget screening run that ranks candidates by validation accuracy.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fusionop/dsl.hpp"
#include "fusionop/rng.hpp"
#include "fusionop/trainer.hpp"

namespace fusionop {

/// 25 copies of `base`, one per (f_q, f_v) in {identity, lrelu, selu,
/// sigmoid, tanh}^2 applied to branch `probe`, f_q-major order.
inline std::vector<FusionSpec> grid_nonlinearity_pairs(const FusionSpec& base, std::size_t probe = 0) {
  if (probe >= base.rank()) throw std::out_of_range("probe branch index out of range");
  std::vector<FusionSpec> out;
  for (const auto& fq : kAllActivations) {
    for (const auto& fv : kAllActivations) {
      FusionSpec s = base;
      s.branches[probe].f_q = fq;
      s.branches[probe].f_v = fv;
      out.push_back(std::move(s));
    }
  }
  return out;
}

enum class PlanShape { sum_all, feature_gating, polarity_swap, two_group };

struct SearchSpace {
  // Must match the data the candidates will be trained on.
  std::size_t d_q = 1;
  std::size_t d_v = 1;
  std::size_t n_classes = 2;
  // Inclusive ranges.
  std::size_t t_min = 4, t_max = 8;  // t_q, t_v, t_o
  std::size_t r_min = 1, r_max = 3;
  std::vector<PlanShape> shapes = {PlanShape::sum_all, PlanShape::feature_gating,
                                   PlanShape::polarity_swap, PlanShape::two_group};
  std::vector<std::size_t> post_layers = {0};
  std::size_t post_hidden = 8;
};

namespace detail {

inline ReductionPlan sample_plan(const std::vector<BranchSpec>& branches, PlanShape shape, Rng& rng) {
  if (branches.size() < 2) return sum_all_plan(branches);
  switch (shape) {
    case PlanShape::sum_all: return sum_all_plan(branches);
    case PlanShape::feature_gating: return gated_plan(branches, kSigmoid);
    case PlanShape::polarity_swap: return gated_plan(branches, kTanh);
    case PlanShape::two_group: {
      // prod over a nonempty prefix, then sum over the rest.
      const std::size_t split =
          std::uniform_int_distribution<std::size_t>(1, branches.size() - 1)(rng);
      ReductionStep first{BinaryOp::prod, {}, std::nullopt};
      ReductionStep second{BinaryOp::sum, {}, std::nullopt};
      for (std::size_t r = 0; r < branches.size(); ++r) {
        (r < split ? first : second).members.push_back(branches[r].id);
      }
      return {{first, second}};
    }
  }
  return sum_all_plan(branches);
}

}  // namespace detail

/// `budget` specs drawn from `space` with a generator seeded by `seed`.
/// With a single branch every plan is the one-step sum.
inline std::vector<FusionSpec> random_search(const SearchSpace& space, std::uint64_t seed, std::size_t budget) {
  if (budget < 1) throw std::invalid_argument("search budget must be >= 1");
  if (space.t_min < 1 || space.t_min > space.t_max || space.r_min < 1 || space.r_min > space.r_max ||
      space.shapes.empty() || space.post_layers.empty()) {
    throw std::invalid_argument("invalid search space bounds");
  }
  auto rng = make_rng({seed, tag(Stream::search)});
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  std::vector<FusionSpec> out;
  out.reserve(budget);
  for (std::size_t i = 0; i < budget; ++i) {
    FusionSpec s;
    s.dims = {space.d_q, space.d_v, pick(space.t_min, space.t_max), pick(space.t_min, space.t_max),
              pick(space.t_min, space.t_max), space.n_classes};
    const std::size_t r = pick(space.r_min, space.r_max);
    for (std::size_t b = 1; b <= r; ++b) {
      BranchSpec br;
      br.id = "b" + std::to_string(b);
      br.f_q = kAllActivations[pick(0, 4)];
      br.f_v = kAllActivations[pick(0, 4)];
      const std::size_t layers = space.post_layers[pick(0, space.post_layers.size() - 1)];
      if (layers > 0) br.post = PostFusionConfig{layers, space.post_hidden, 3, 0.0};
      s.branches.push_back(std::move(br));
    }
    const PlanShape shape = space.shapes[pick(0, space.shapes.size() - 1)];
    s.plan = detail::sample_plan(s.branches, shape, rng);
    out.push_back(std::move(s));
  }
  return out;
}

struct SearchResult {
  std::string spec_text;
  double val_accuracy = std::numeric_limits<double>::quiet_NaN();  // NaN: candidate failed
  std::size_t best_epoch = 0;
  std::size_t rank = 0;             // 1-based
  std::size_t candidate_index = 0;  // position in the input list
  std::string error;

  bool failed() const { return std::isnan(val_accuracy); }
};

struct SearchConfig {
  TrainConfig train = [] {
    TrainConfig c;
    c.max_epochs = 5;
    return c;
  }();
  std::size_t subsample = 0;  // training examples used per candidate; 0 = all
  unsigned threads = 1;
};

/// Screens one candidate. Errors (dimension mismatch, numeric blow-up) are
/// recorded on the result rather than thrown.
inline SearchResult screen_candidate(const FusionSpec& spec, const Dataset& train_set, const Dataset& val_set,
                                     const SearchConfig& cfg) {
  SearchResult r;
  r.spec_text = serialize_spec(spec);
  try {
    const auto violations = validate_spec(spec);
    if (!violations.empty()) throw std::invalid_argument(violations.front().message);
    const auto out = train(spec, head(train_set, cfg.subsample), val_set, cfg.train);
    r.val_accuracy = out.metrics.best_val_acc();
    r.best_epoch = out.metrics.best_epoch;
  } catch (const std::exception& e) {
    r.val_accuracy = std::numeric_limits<double>::quiet_NaN();
    r.best_epoch = 0;
    r.error = e.what();
  }
  return r;
}

/// Sorts by descending accuracy, then spec text; failed candidates last.
inline void rank_results(std::vector<SearchResult>& results) {
  std::stable_sort(results.begin(), results.end(), [](const SearchResult& a, const SearchResult& b) {
    if (a.failed() != b.failed()) return b.failed();
    if (!a.failed() && a.val_accuracy != b.val_accuracy) return a.val_accuracy > b.val_accuracy;
    if (a.spec_text != b.spec_text) return a.spec_text < b.spec_text;
    return a.candidate_index < b.candidate_index;
  });
  for (std::size_t i = 0; i < results.size(); ++i) results[i].rank = i + 1;
}

/// Trains every candidate with the short screening budget and returns the
/// ranked results. Candidates may run on worker threads; results are
/// merged by candidate index, so the output does not depend on scheduling.
inline std::vector<SearchResult> run_search(const std::vector<FusionSpec>& candidates, const Dataset& train_set,
                                            const Dataset& val_set, const SearchConfig& cfg = {}) {
  if (candidates.empty()) throw std::invalid_argument("no search candidates");
  std::vector<SearchResult> results(candidates.size());
  auto work = [&](std::size_t i) {
    results[i] = screen_candidate(candidates[i], train_set, val_set, cfg);
    results[i].candidate_index = i;
  };
  const unsigned threads = std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(candidates.size())));
  if (threads == 1) {
    for (std::size_t i = 0; i < candidates.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < candidates.size(); i = next++) work(i);
      });
    }
  }
  rank_results(results);
  return results;
}

/// One JSON object per line: {rank, val_acc, best_epoch, spec}; val_acc is
/// null for failed candidates.
inline std::string results_jsonl(const std::vector<SearchResult>& results) {
  std::string out;
  for (const auto& r : results) {
    nlohmann::ordered_json j;
    j["rank"] = r.rank;
    if (r.failed()) {
      j["val_acc"] = nullptr;
    } else {
      j["val_acc"] = r.val_accuracy;
    }
    j["best_epoch"] = r.best_epoch;
    j["spec"] = r.spec_text;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace fusionop
