#include <gtest/gtest.h>

#include <set>

#include "fusionop/search.hpp"

using namespace fusionop;

namespace {

FusionSpec base_spec() {
  const auto br = uniform_branches(2, kIdentity, kIdentity);
  return make_spec({5, 5, 4, 4, 4, 3}, br, gated_plan(br, kSigmoid));
}

struct Data {
  Dataset train, val;
};

const Data& data() {
  static const Data d = [] {
    const auto spec = base_spec();
    return Data{generate_synthetic_dataset(spec, 1, 120, 1.0, 2), generate_synthetic_dataset(spec, 1, 60, 1.0, 3)};
  }();
  return d;
}

SearchConfig quick() {
  SearchConfig c;
  c.train.max_epochs = 2;
  c.train.batch_size = 16;
  c.train.lr = 1e-3;
  return c;
}

}  // namespace

TEST(Grid, TwentyFivePairsOnProbe) {
  const auto grid = grid_nonlinearity_pairs(base_spec(), 1);
  ASSERT_EQ(grid.size(), 25u);
  std::set<std::pair<Activation, Activation>> pairs;
  for (const auto& s : grid) {
    pairs.insert({s.branches[1].f_q.tag, s.branches[1].f_v.tag});
    EXPECT_EQ(s.branches[0], base_spec().branches[0]);
    EXPECT_EQ(s.plan, base_spec().plan);
  }
  EXPECT_EQ(pairs.size(), 25u);
  EXPECT_EQ(grid[7].branches[1].f_q.tag, Activation::leaky_relu);
  EXPECT_EQ(grid[7].branches[1].f_v.tag, Activation::selu);
  EXPECT_THROW(grid_nonlinearity_pairs(base_spec(), 2), std::out_of_range);
}

TEST(RandomSearch, DeterministicAndValid) {
  SearchSpace space;
  space.d_q = 5;
  space.d_v = 5;
  space.n_classes = 3;
  space.post_layers = {0, 3};
  const auto a = random_search(space, 9, 40);
  const auto b = random_search(space, 9, 40);
  ASSERT_EQ(a.size(), 40u);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, random_search(space, 10, 40));
  std::set<std::size_t> ranks;
  for (const auto& s : a) {
    EXPECT_TRUE(validate_spec(s).empty()) << serialize_spec(s);
    EXPECT_EQ(s.dims.d_q, 5u);
    EXPECT_GE(s.dims.t_q, 4u);
    EXPECT_LE(s.dims.t_o, 8u);
    ranks.insert(s.rank());
    if (s.rank() == 1) EXPECT_EQ(s.plan, sum_all_plan(s.branches));
  }
  EXPECT_EQ(ranks, (std::set<std::size_t>{1, 2, 3}));
  EXPECT_THROW(random_search(space, 0, 0), std::invalid_argument);
  space.t_min = 9;
  EXPECT_THROW(random_search(space, 0, 1), std::invalid_argument);
}

TEST(RunSearch, SingleCandidate) {
  const auto res = run_search({base_spec()}, data().train, data().val, quick());
  ASSERT_EQ(res.size(), 1u);
  EXPECT_EQ(res[0].rank, 1u);
  EXPECT_FALSE(res[0].failed());
}

TEST(RunSearch, DuplicatesScoreIdentically) {
  const auto res = run_search({base_spec(), base_spec()}, data().train, data().val, quick());
  EXPECT_EQ(res[0].val_accuracy, res[1].val_accuracy);
  EXPECT_EQ(res[0].candidate_index, 0u);  // tie broken by candidate index
}

TEST(RunSearch, FailuresAreRecordedAndSortedLast) {
  FusionSpec bad = base_spec();
  bad.dims.d_q = 7;  // does not match the data
  const auto res = run_search({bad, base_spec()}, data().train, data().val, quick());
  ASSERT_EQ(res.size(), 2u);
  EXPECT_FALSE(res[0].failed());
  EXPECT_TRUE(res[1].failed());
  EXPECT_EQ(res[1].candidate_index, 0u);
  EXPECT_FALSE(res[1].error.empty());
  const std::string lines = results_jsonl(res);
  EXPECT_NE(lines.find("\"rank\":2,\"val_acc\":null"), std::string::npos) << lines;
}

TEST(RunSearch, RankingIsPermutationAndSubsetIndependent) {
  const auto grid = grid_nonlinearity_pairs(base_spec(), 0);
  const std::vector<FusionSpec> cands(grid.begin(), grid.begin() + 8);
  const auto full = run_search(cands, data().train, data().val, quick());
  std::set<std::size_t> idx;
  for (std::size_t i = 0; i < full.size(); ++i) {
    EXPECT_EQ(full[i].rank, i + 1);
    idx.insert(full[i].candidate_index);
    if (i > 0) EXPECT_GE(full[i - 1].val_accuracy, full[i].val_accuracy);
  }
  EXPECT_EQ(idx.size(), cands.size());
  for (const auto& r : full) {
    const auto alone = screen_candidate(cands[r.candidate_index], data().train, data().val, quick());
    EXPECT_EQ(alone.val_accuracy, r.val_accuracy);
    EXPECT_EQ(alone.best_epoch, r.best_epoch);
  }
}

TEST(RunSearch, ThreadCountDoesNotChangeResults) {
  const auto grid = grid_nonlinearity_pairs(base_spec(), 1);
  const std::vector<FusionSpec> cands(grid.begin(), grid.begin() + 6);
  SearchConfig one = quick(), four = quick();
  four.threads = 4;
  EXPECT_EQ(results_jsonl(run_search(cands, data().train, data().val, one)),
            results_jsonl(run_search(cands, data().train, data().val, four)));
}

TEST(RunSearch, SubsampleUsesPrefix) {
  SearchConfig c = quick();
  c.subsample = 30;
  const auto a = screen_candidate(base_spec(), data().train, data().val, c);
  const auto b = screen_candidate(base_spec(), head(data().train, 30), data().val, quick());
  EXPECT_EQ(a.val_accuracy, b.val_accuracy);
}
