#include <gtest/gtest.h>

#include "diffpro/search.hpp"
#include "diffpro/stats.hpp"

using namespace diffpro;

// ------------------------------------------------------------------ mutate

TEST(Mutate, ZeroRateLeavesPlanUntouched) {
    std::vector<std::string> ids{"a", "b", "c"};
    const BitPlan plan = BitPlan::uniform(ids, 8, 128);
    Rng rng(1);
    EXPECT_TRUE(mutate(plan, 0.0, rng) == plan);
}

TEST(Mutate, FrozenLayersNeverChange) {
    std::vector<std::string> ids{"a", "b", "c", "d"};
    BitPlan plan = BitPlan::uniform(ids, 8, 128);
    for (auto& [id, a] : plan.layers) a.frozen = true;
    Rng rng(2);
    for (int i = 0; i < 200; ++i) EXPECT_TRUE(mutate(plan, 0.9, rng) == plan);
}

TEST(Mutate, MovesAreSingleStepsInTheOrderedSets) {
    std::vector<std::string> ids{"a"};
    const SearchSpace space;
    Rng rng(3);
    for (int trial = 0; trial < 500; ++trial) {
        BitPlan plan = BitPlan::uniform(ids, 6, 128);
        const BitPlan out = mutate(plan, 0.999, rng, space);
        const auto& a = out.at("a");
        if (a.bits != 6) {
            const int from = space.bit_index(6), to = space.bit_index(a.bits);
            EXPECT_EQ(std::abs(from - to), 1);
            EXPECT_EQ(a.group_size, 128);
        } else if (a.group_size != 128) {
            const int from = space.group_index(128), to = space.group_index(a.group_size);
            EXPECT_EQ(std::abs(from - to), 1);
        }
    }
}

// Binomial expectation: 10k mutations at rate 0.1 over 20 layers change
// 2.0 +- 0.15 layers on average.
TEST(Mutate, BinomialExpectation) {
    std::vector<std::string> ids;
    for (int i = 0; i < 20; ++i) ids.push_back("L" + std::to_string(i));
    const BitPlan base = BitPlan::uniform(ids, 6, 128);
    Rng rng(5);
    long changed = 0;
    const int trials = 10000;
    for (int i = 0; i < trials; ++i) {
        const BitPlan out = mutate(base, 0.10, rng);
        for (const auto& id : ids)
            if (!(out.at(id) == base.at(id))) ++changed;
    }
    const double mean = static_cast<double>(changed) / trials;
    EXPECT_NEAR(mean, 2.0, 0.15);
}

// --------------------------------------------------------------- eq7 score

TEST(Eq7Score, UnderBudgetIsDriftAlone) {
    EXPECT_DOUBLE_EQ(eq7_score(0.125, 50.0, 900.0, 100.0, 1000.0), 0.125);
}

TEST(Eq7Score, TwofoldLatencyOvershootAddsHalf) {
    EXPECT_DOUBLE_EQ(eq7_score(0.125, 200.0, 900.0, 100.0, 1000.0, 0.5, 0.5), 0.125 + 0.5);
}

TEST(Eq7Score, BothPenaltiesAccumulate) {
    // lat 1.5x, ops 3x over: 0.5*0.5 + 0.5*2.0
    EXPECT_DOUBLE_EQ(eq7_score(0.1, 150.0, 3000.0, 100.0, 1000.0, 0.5, 0.5),
                     0.1 + 0.25 + 1.0);
}

TEST(Eq7Score, ZeroWeightsRankByDriftAlone) {
    Rng rng(7);
    std::vector<std::array<double, 3>> cands;  // (drift, lat, ops)
    for (int i = 0; i < 40; ++i)
        cands.push_back({rng.uniform01(), 500.0 * rng.uniform01(), 5000.0 * rng.uniform01()});
    std::vector<int> by_score(cands.size()), by_drift(cands.size());
    for (size_t i = 0; i < cands.size(); ++i) by_score[i] = by_drift[i] = static_cast<int>(i);
    std::sort(by_score.begin(), by_score.end(), [&](int a, int b) {
        return eq7_score(cands[a][0], cands[a][1], cands[a][2], 100.0, 1000.0, 0.0, 0.0) <
               eq7_score(cands[b][0], cands[b][1], cands[b][2], 100.0, 1000.0, 0.0, 0.0);
    });
    std::sort(by_drift.begin(), by_drift.end(),
              [&](int a, int b) { return cands[a][0] < cands[b][0]; });
    EXPECT_EQ(by_score, by_drift);
}

// ----------------------------------------------------- successive halving

TEST(SuccessiveHalving, SingleCandidateSurvivesAllStages) {
    int calls = 0;
    const auto out = successive_halving(
        1, {{1, 1}, {2, 2}, {4, 4}},
        [&](int, int, const DriftEvaluator::Fidelity&) {
            ++calls;
            return 1.0;
        });
    EXPECT_EQ(out.survivors, std::vector<int>{0});
    EXPECT_EQ(calls, 3);
    EXPECT_EQ(out.evaluated_per_stage, (std::vector<int>{1, 1, 1}));
}

TEST(SuccessiveHalving, EightCandidatesHalveAcrossThreeStages) {
    std::vector<int> evals(3, 0);
    const auto out = successive_halving(
        8, {{1, 1}, {2, 2}, {4, 4}},
        [&](int i, int stage, const DriftEvaluator::Fidelity&) {
            ++evals[stage];
            return static_cast<double>(i);  // candidate 0 always best
        });
    EXPECT_EQ(evals, (std::vector<int>{8, 4, 2}));
    EXPECT_EQ(out.evaluated_per_stage, (std::vector<int>{8, 4, 2}));
    EXPECT_EQ(out.survivors, std::vector<int>{0});
}

TEST(SuccessiveHalving, EqualFidelitiesRecoverExhaustiveArgmin) {
    Rng rng(11);
    std::vector<double> scores(16);
    for (double& s : scores) s = rng.uniform01();
    const auto out = successive_halving(
        16, {{4, 4}, {4, 4}, {4, 4}},
        [&](int i, int, const DriftEvaluator::Fidelity&) { return scores[i]; });
    const int argmin = static_cast<int>(
        std::min_element(scores.begin(), scores.end()) - scores.begin());
    EXPECT_EQ(out.survivors.front(), argmin);
}

TEST(SuccessiveHalving, MinKeepIsRespected) {
    const auto out = successive_halving(
        12, {{1, 1}, {2, 2}},
        [&](int i, int, const DriftEvaluator::Fidelity&) { return static_cast<double>(i); }, 4);
    EXPECT_EQ(out.survivors.size(), 4u);  // halving would give 3, min_keep=4 wins
}

// ------------------------------------------------------------------ evolve

namespace {
struct SearchFixture : ::testing::Test {
    TinyDiT model{DiTConfig{}, 42};
    NoiseSchedule sched = cosine_schedule(100);
    CalibrationSet calib = CalibrationSet::make(sched, 96, 8, 10, 7);
    CalibStats stats = collect_stats(model, calib, 1024, 7);
    QuantContext qctx{model, stats};
    DriftEvaluator eval{model, sched, 8, 2, 6, 901};
};
}  // namespace

TEST_F(SearchFixture, DriftObjectiveZeroForAllPassthroughPlan) {
    const BitPlan fp = BitPlan::uniform(model.layer_ids(), kFp32Bits, 128);
    const ExecPlan exec = build_exec_plan(qctx, fp, DaqPolicy{}, ActMode::Dynamic);
    EXPECT_DOUBLE_EQ(eval.drift(exec, {2, 4}), 0.0);
}

// Monotone-precision: W8 drifts no more than W3, checked over 5 seeds.
TEST_F(SearchFixture, MorePreciseUniformPlansDriftLess) {
    int wins = 0;
    for (uint64_t s = 0; s < 5; ++s) {
        DriftEvaluator e(model, sched, 4, 1, 6, 1000 + s);
        const BitPlan w8 = BitPlan::uniform(model.layer_ids(), 8, 128);
        const BitPlan w3 = BitPlan::uniform(model.layer_ids(), 3, 128);
        const double d8 = e.drift(build_exec_plan(qctx, w8, DaqPolicy{}, ActMode::None), {1, 4});
        const double d3 = e.drift(build_exec_plan(qctx, w3, DaqPolicy{}, ActMode::None), {1, 4});
        if (d8 <= d3) ++wins;
    }
    EXPECT_GE(wins, 5);
}

TEST_F(SearchFixture, CacheDisabledMatchesCachedDrift) {
    const BitPlan plan = BitPlan::uniform(model.layer_ids(), 4, 128);
    const ExecPlan exec = build_exec_plan(qctx, plan, DaqPolicy{}, ActMode::Dynamic);
    const double cached = eval.drift(exec, {2, 6}, 1, true);
    const double fresh = eval.drift(exec, {2, 6}, 1, false);
    EXPECT_NEAR(cached, fresh, 1e-10);
}

TEST_F(SearchFixture, ZeroGenerationsReturnsSeed) {
    const BitPlan seed = BitPlan::uniform(model.layer_ids(), 8, 128);
    SearchConfig cfg;
    cfg.generations = 0;
    cfg.population = 4;
    cfg.elites = 2;
    cfg.stages = {{1, 2}};
    const EvolveResult r = evolve(qctx, eval, seed, DaqPolicy{}, cfg, SearchSpace{}, 1);
    EXPECT_TRUE(r.best_plan == seed);
}

TEST_F(SearchFixture, BestScorePerGenerationNonincreasing) {
    const BitPlan seed = BitPlan::uniform(model.layer_ids(), 4, 288);
    SearchConfig cfg;
    cfg.generations = 4;
    cfg.population = 6;
    cfg.elites = 2;
    cfg.stages = {{1, 2}, {2, 4}};
    const EvolveResult r = evolve(qctx, eval, seed, DaqPolicy{}, cfg, SearchSpace{}, 3, 4);
    ASSERT_EQ(r.log.size(), 4u);
    for (size_t g = 1; g < r.log.size(); ++g) EXPECT_LE(r.log[g].best, r.log[g - 1].best);
    EXPECT_DOUBLE_EQ(r.log.back().best, r.best_drift);
}

// Exhaustive micro-instance: only block0's four layers are searchable over
// bits {4,8} at fixed group 64; evolve must land within 1.05x of the best of
// the 16 possible plans.
TEST_F(SearchFixture, FourLayerTwoBitExhaustiveOptimum) {
    const std::vector<std::string> free_layers{"block0.qkv", "block0.attn_proj",
                                               "block0.mlp_fc1", "block0.mlp_fc2"};
    BitPlan seed = BitPlan::uniform(model.layer_ids(), kFp32Bits, 128);
    for (auto& [id, a] : seed.layers)
        if (std::find(free_layers.begin(), free_layers.end(), id) == free_layers.end())
            a.frozen = true;
    for (const auto& id : free_layers) seed.at(id) = LayerAssignment{4, 64, false};

    SearchSpace space;
    space.bit_set = {4, 8};
    space.group_set = {64};
    SearchConfig cfg;
    cfg.population = 8;
    cfg.elites = 3;
    cfg.generations = 5;
    cfg.mutation_rate = 0.3;
    cfg.stages = {{1, 3}, {2, 6}};
    const EvolveResult r = evolve(qctx, eval, seed, DaqPolicy{}, cfg, space, 17, 4);

    double best_exhaustive = std::numeric_limits<double>::infinity();
    for (int mask = 0; mask < 16; ++mask) {
        BitPlan plan = seed;
        for (int i = 0; i < 4; ++i)
            plan.at(free_layers[i]).bits = (mask >> i) & 1 ? 8 : 4;
        const ExecPlan exec = build_exec_plan(qctx, plan, DaqPolicy{}, ActMode::Dynamic);
        best_exhaustive = std::min(best_exhaustive, eval.drift(exec, {2, 6}));
    }
    EXPECT_LE(r.best_drift, 1.05 * best_exhaustive);
}

// ----------------------------------------------------------- fingerprints

TEST(Fingerprint, EqualPlansShareDigestDistinctPlansDiffer) {
    std::vector<std::string> ids{"a", "b", "c"};
    const BitPlan p1 = BitPlan::uniform(ids, 8, 128);
    BitPlan p2 = BitPlan::uniform(ids, 8, 128);
    EXPECT_EQ(fingerprint(p1), fingerprint(p2));
    p2.at("b").bits = 4;
    EXPECT_NE(fingerprint(p1), fingerprint(p2));

    PlanCandidate c1, c2;
    c1.bitplan = c2.bitplan = p1;
    c1.schedule = {1, 2, 3};
    c2.schedule = {1, 2, 3};
    EXPECT_EQ(c1.fingerprint_value(), c2.fingerprint_value());
    c2.schedule = {1, 2, 4};
    EXPECT_NE(c1.fingerprint_value(), c2.fingerprint_value());
    c2.schedule = {1, 2, 3};
    c2.policy.bits_mid = 6;
    EXPECT_NE(c1.fingerprint_value(), c2.fingerprint_value());
}

TEST(SearchConfig, Validation) {
    SearchConfig cfg;
    cfg.elites = cfg.population;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
    cfg = SearchConfig{};
    cfg.mutation_rate = 0.0;
    EXPECT_THROW(cfg.validate(), InvalidArgument);
    cfg = SearchConfig{};
    cfg.stages.clear();
    EXPECT_THROW(cfg.validate(), InvalidArgument);
}
