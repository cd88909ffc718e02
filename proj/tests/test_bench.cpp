#include <gtest/gtest.h>

#include <sstream>

#include "retnet/bench.hpp"

using namespace retnet;

TEST(Slope, ExactLineHasZeroError) {
  std::vector<double> x{1, 2, 3, 4, 5}, y;
  for (double v : x) y.push_back(2.5 * v + 1);
  const auto f = fit_slope(x, y);
  EXPECT_NEAR(f.slope, 2.5, 1e-12);
  EXPECT_LT(f.p_positive, 1e-6);
}

TEST(Slope, MatchesReferenceRegression) {
  // Reference values from scipy.stats.linregress.
  std::vector<double> x{1, 2, 3, 4, 5, 6}, y{1.2, 1.4, 2.9, 2.8, 3.9, 3.7};
  const auto f = fit_slope(x, y);
  EXPECT_NEAR(f.slope, 0.5685714285714285, 1e-12);
  EXPECT_NEAR(f.std_error, 0.10404080832018935, 1e-10);
  EXPECT_NEAR(f.t, 5.464888611991839, 1e-8);
  EXPECT_NEAR(f.p_two_sided, 0.005452624021038449, 1e-9);
}

TEST(Slope, FlatNoiseIsNotSignificant) {
  std::vector<double> x{1, 1, 2, 2, 3, 3}, y{5, 6, 6, 5, 5, 6};
  const auto f = fit_slope(x, y);
  EXPECT_NEAR(f.slope, 0.0, 1e-12);
  EXPECT_NEAR(f.p_two_sided, 1.0, 1e-12);
}

TEST(Equivalence, SmallSweepPassesInFp64) {
  EquivalenceOptions o;
  o.max_len = 12;
  auto r = run_equivalence<double>(o);
  EXPECT_TRUE(r.paradigms.pass()) << r.paradigms.summary();
  EXPECT_EQ(r.paradigms.cases, 12u * 8u * 5u - 2u * 8u);  // at len 1 and 4 the full-length chunk is already listed
}

TEST(Equivalence, InjectedBugIsReportedWithItsCase) {
  EquivalenceOptions o;
  o.max_len = 12;
  o.inject_bug = true;
  std::ostringstream csv;
  auto r = run_equivalence<double>(o, &csv);
  EXPECT_FALSE(r.paradigms.pass());
  ASSERT_FALSE(r.paradigms.failed_cases.empty());
  EXPECT_NE(r.paradigms.failed_cases.front().find("chunkwise"), std::string::npos);
  EXPECT_EQ(csv.str().rfind(kEquivalenceSchema, 0), 0u);
}

TEST(Equivalence, SweepCoversBothScheduleGammas) {
  const auto g = sweep_gammas();
  for (double x : gamma_schedule(8)) EXPECT_NE(std::find(g.begin(), g.end(), x), g.end());
  for (double x : gamma_schedule(8, GammaVariant::log_spaced)) EXPECT_NE(std::find(g.begin(), g.end(), x), g.end());
}

TEST(InferBench, StateElementFormulas) {
  BenchConfig b;
  const auto r = bench_model(b, Arch::retnet), t = bench_model(b, Arch::transformer);
  EXPECT_EQ(decode_state_elements(r, 128), decode_state_elements(r, 8192));
  EXPECT_EQ(decode_state_elements(t, 2048), 2 * decode_state_elements(t, 1024));
  EXPECT_EQ(decode_state_elements(r, 1), 4u * 4u * (64u * 128u + 64u + 1u));
}

TEST(InferBench, OverBudgetIsRefusedWithRequirement) {
  InferBenchOptions o;
  o.bench.budget_elements = 1000;
  try {
    check_budget(o);
    FAIL() << "expected refusal";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("needs"), std::string::npos);
  }
}

TEST(InferBench, TinyRunProducesRecords) {
  InferBenchOptions o;
  o.bench.lengths = {4, 8, 16};
  o.bench.d_model = 16;
  o.bench.layers = 1;
  o.bench.heads = 2;
  o.bench.repeats = 2;
  o.bench.steps_per_sample = 2;
  auto r = run_infer_bench<float>(o);
  ASSERT_EQ(r.records.size(), 6u);
  ASSERT_EQ(r.slopes.size(), 2u);
  EXPECT_EQ(r.records[0].state_elements, r.records[2].state_elements);
  EXPECT_EQ(r.records[4].state_elements, 2 * r.records[3].state_elements);
  std::ostringstream os;
  write_infer_csv(os, r.records);
  EXPECT_EQ(os.str().rfind(kInferSchema, 0), 0u);
}

TEST(Ablation, SevenVariantsWithMatchingWidth) {
  ModelConfig base;
  base.d_model = 64;
  base.heads = 2;
  const auto v = ablation_variants(base);
  ASSERT_EQ(v.size(), 7u);
  EXPECT_EQ(v.back().cfg.arch, Arch::transformer);
  EXPECT_EQ(*v[5].cfg.flags.head_dim_override, 16u);
  for (const auto& x : v) EXPECT_NO_THROW(x.cfg.validate()) << x.name;
}

TEST(Ablation, ShortRunIsFinite) {
  ModelConfig base;
  base.d_model = 16;
  base.heads = 2;
  base.layers = 1;
  base.precision = Precision::fp32;
  TrainConfig tc;
  tc.steps = 3;
  tc.warmup_steps = 1;
  tc.batch_size = 2;
  DataConfig d;
  const auto src = make_batch_source(d, tc, nullptr);
  const auto held = heldout_batch(d, tc, nullptr, 4, 0);
  for (const auto& v : ablation_variants(base)) {
    auto row = train_variant<float>(v, tc, src, held);
    EXPECT_TRUE(row.finite) << v.name << " " << row.error;
    EXPECT_EQ(row.steps, 3u);
  }
}
