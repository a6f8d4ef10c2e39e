#include <gtest/gtest.h>

#include "support.hpp"

using namespace itta;
using namespace itta::testing;

namespace {

// A briefly trained checkpoint shared by the tests below.
const ParamStore& checkpoint() {
  static const ParamStore p = [] {
    TrainConfig cfg = small_train_config(21);
    cfg.steps = 30;
    return fit(leave_one_out(small_suite(), "d1"), cfg).best;
  }();
  return p;
}

AdaptConfig small_adapt(Strategy s = Strategy::Ada, std::size_t steps = 1) {
  AdaptConfig c;
  c.strategy = s;
  c.ttt_steps = steps;
  c.adapter_layers = 2;
  c.batch_size = 8;
  c.seed = 3;
  return c;
}

Array target_batch(std::size_t n = 8, std::size_t offset = 0) {
  static const DomainSuite suite = small_suite();
  const Array all = first_rows(suite, "d1", offset + n);
  return Array({n, suite.pixels()}, std::vector<double>(all.data.begin() + static_cast<std::ptrdiff_t>(offset * suite.pixels()),
                                                       all.data.end()));
}

}  // namespace

TEST(SelectParamGroup, CountsOnTheDefaultArchitecture) {
  std::mt19937_64 rng(1);
  ModelConfig mc;
  ParamStore store = init_model(mc, rng);
  add_adapters(store, mc, {1, 2, 3, 4}, 5);
  auto count = [&](Strategy s) {
    std::size_t n = 0;
    for (const auto& name : select_param_group(s, store)) n += store.at(name).value.size();
    return n;
  };
  EXPECT_EQ(count(Strategy::Ada), 2560u);
  EXPECT_EQ(count(Strategy::Bn), 512u);
  EXPECT_EQ(count(Strategy::All), store.scalar_count(Group::Extractor));
  EXPECT_TRUE(select_param_group(Strategy::None, store).empty());
  for (Strategy s : {Strategy::Ada, Strategy::Bn, Strategy::All}) EXPECT_FALSE(select_param_group(s, store).empty());
  EXPECT_THROW(select_param_group("adapters", store), std::invalid_argument);
}

TEST(Adapt, ZeroStepsMatchesFrozenPrediction) {
  const Array x = target_batch();
  AdaptState state(checkpoint(), small_adapt(Strategy::Ada, 0));
  EXPECT_EQ(adapt_and_predict(state, x).predictions, predict(checkpoint(), x));
  EXPECT_EQ(state.counters().adapt_backwards, 0u);
}

TEST(Adapt, ZeroLearningRateMatchesZeroSteps) {
  const Array x = target_batch();
  AdaptConfig c = small_adapt(Strategy::All, 3);
  c.lr_adapt = 0.0;
  AdaptState state(checkpoint(), c);
  EXPECT_EQ(adapt_and_predict(state, x).predictions, predict(checkpoint(), x));
  EXPECT_TRUE(bit_equal(state.live(), state.base()));
}

TEST(Adapt, OnlyTheSelectedGroupMoves) {
  const Array x = target_batch();
  for (Strategy s : {Strategy::Ada, Strategy::All, Strategy::Bn}) {
    AdaptState state(checkpoint(), small_adapt(s, 2));
    adapt_and_predict(state, x);
    const ParamStore& before = state.base();
    const ParamStore& after = state.live();
    std::set<std::string> selected(state.selected().begin(), state.selected().end());
    bool moved = false;
    for (std::size_t i = 0; i < after.params().size(); ++i) {
      const Param& p = after.params()[i];
      const bool same = bit_equal(p.value, before.params()[i].value);
      if (!selected.count(p.name)) {
        EXPECT_TRUE(same) << strategy_name(s) << " " << p.name;
      }
      moved |= !same;
    }
    EXPECT_TRUE(moved) << strategy_name(s);
  }
}

TEST(Adapt, SmallStepLowersTheObjectiveForAFixedDraw) {
  // With the entropy objective there is no augmentation randomness, so the
  // pre/post objective values compare the same function.
  AdaptConfig c = small_adapt(Strategy::Ada, 1);
  c.objective = AdaptObjective::Entropy;
  c.lr_adapt = 1e-3;
  AdaptState state(checkpoint(), c);
  AdaptResult r = adapt_and_predict(state, target_batch());
  ASSERT_TRUE(r.objective_pre && r.objective_post);
  EXPECT_LT(*r.objective_post, *r.objective_pre);
}

TEST(Adapt, EpisodicResetsAndOnlineCarriesState) {
  const Array x1 = target_batch(8, 0), x2 = target_batch(8, 8);
  AdaptConfig c = small_adapt(Strategy::Ada, 1);
  c.mode = AdaptMode::Episodic;
  AdaptState episodic(checkpoint(), c);
  adapt_and_predict(episodic, x1);
  const ParamStore after_first = episodic.live();
  adapt_and_predict(episodic, x2);

  // The second episodic batch starts from the checkpoint, with the rng where
  // the first batch left it.
  AdaptState reference(checkpoint(), c);
  adapt_and_predict(reference, x1);
  AdaptState second_only(checkpoint(), c);
  second_only.rng() = reference.rng();
  adapt_and_predict(second_only, x2);
  EXPECT_TRUE(bit_equal(episodic.live(), second_only.live()));

  c.mode = AdaptMode::Online;
  AdaptState online(checkpoint(), c);
  adapt_and_predict(online, x1);
  EXPECT_TRUE(bit_equal(online.live(), after_first));
  adapt_and_predict(online, x2);
  EXPECT_FALSE(bit_equal(online.live(), second_only.live()));
  EXPECT_EQ(online.batches_seen(), 2u);
}

TEST(Adapt, PassCountsAreLinearInSteps) {
  const Array x = target_batch();
  for (std::size_t k : {1u, 2u, 3u}) {
    AdaptState state(checkpoint(), small_adapt(Strategy::Ada, k));
    adapt_and_predict(state, x);
    adapt_and_predict(state, x);
    EXPECT_EQ(state.counters().adapt_forwards, 2 * k);
    EXPECT_EQ(state.counters().adapt_backwards, 2 * k);
    EXPECT_EQ(state.counters().predict_forwards, 2u);
  }
}

TEST(Adapt, SingleSampleUsesSourceStatistics) {
  AdaptState state(checkpoint(), small_adapt(Strategy::Ada, 1));
  ASSERT_TRUE(state.source().has_value());
  AdaptResult r = adapt_and_predict(state, target_batch(1));
  EXPECT_EQ(r.predictions.size(), 1u);
  EXPECT_TRUE(r.objective_post.has_value());
}

TEST(Adapt, BatchOfOneWithoutSourceStatisticsThrows) {
  ParamStore no_source;
  for (const auto& param : checkpoint().params())
    if (param.name != kSourceMu && param.name != kSourceSigma) no_source.add(param.name, param.group, param.value);
  AdaptState state(no_source, small_adapt(Strategy::Ada, 1));
  EXPECT_THROW(adapt_and_predict(state, target_batch(1)), std::invalid_argument);
}

TEST(Evaluate, NoneStrategyEqualsFrozenAccuracy) {
  const DomainSuite suite = leave_one_out(small_suite(), "d1");
  AdaptConfig c = small_adapt(Strategy::None, 1);
  EvalResult r = evaluate(suite, checkpoint(), c);
  std::vector<SampleRef> refs;
  for (std::size_t i = 0; i < suite.domain("d1").labels.size(); ++i) refs.push_back({1, i});
  ASSERT_EQ(r.accuracy.size(), 1u);
  EXPECT_DOUBLE_EQ(r.accuracy[0], accuracy(checkpoint(), suite, refs));
  EXPECT_EQ(r.counters.adapt_backwards, 0u);
}

TEST(Evaluate, DeterministicAndRejectsSourceTargets) {
  const DomainSuite suite = leave_one_out(small_suite(), "d1");
  const AdaptConfig c = small_adapt(Strategy::Ada, 1);
  EXPECT_EQ(evaluate(suite, checkpoint(), c).accuracy, evaluate(suite, checkpoint(), c).accuracy);
  DomainSuite bad = suite;
  bad.target_ids = {"d0"};
  EXPECT_THROW(evaluate(bad, checkpoint(), c), std::invalid_argument);
}

TEST(Strategy, ParsingRejectsUnknownNames) {
  EXPECT_EQ(parse_strategy("bn"), Strategy::Bn);
  EXPECT_THROW(parse_strategy("tent"), std::invalid_argument);
}
