#include <gtest/gtest.h>

#include "diffpro/cost.hpp"
#include "diffpro/model.hpp"
#include "diffpro/planner.hpp"
#include "test_support.hpp"

using namespace diffpro;
using namespace diffpro::testsupport;

TEST(JointBudgetPlan, SlackBudgetsMakeNoMoves) {
    MicroInstance mi = make_micro_instance(1);
    std::vector<int> max_opt(mi.inst.layers.size(), 2);
    mi.inst.b_lat = mi.lat_of(max_opt, 0) * 2.0;
    mi.inst.b_mem = mi.mem_of(max_opt) * 2.0;
    const PlannerResult r = joint_budget_plan(mi.inst);
    EXPECT_TRUE(r.moves.empty());
    for (int o : r.option_index) EXPECT_EQ(o, 2);
    EXPECT_EQ(r.kept_steps.size(), mi.inst.steps.size());
}

TEST(JointBudgetPlan, SingleStepMoveRemovesLowestDriftStep) {
    MicroInstance mi = make_micro_instance(2);
    // make the cheapest prunable step's removal decisively better than any
    // bit move and set the budget so exactly one move suffices
    int lowest = -1;
    double lowest_de = std::numeric_limits<double>::infinity();
    for (size_t s = 0; s < mi.inst.steps.size(); ++s)
        if (!mi.inst.steps[s].tail && mi.inst.steps[s].d_e < lowest_de) {
            lowest_de = mi.inst.steps[s].d_e;
            lowest = static_cast<int>(s);
        }
    for (auto& l : mi.inst.layers) l.s_m = 1e6;  // bit moves score near zero
    std::vector<int> max_opt(mi.inst.layers.size(), 2);
    const double full_lat = mi.lat_of(max_opt, 0);
    const double step_cost = full_lat - mi.lat_of(max_opt, 1u << lowest);
    mi.inst.b_lat = full_lat - 0.5 * step_cost;
    mi.inst.b_mem = mi.mem_of(max_opt) * 2.0;

    const PlannerResult r = joint_budget_plan(mi.inst);
    ASSERT_EQ(r.moves.size(), 1u);
    EXPECT_EQ(r.moves[0].kind, PlannerMove::Kind::Step);
    EXPECT_EQ(r.moves[0].t, mi.inst.steps[lowest].t);
    EXPECT_FALSE(std::binary_search(r.kept_steps.begin(), r.kept_steps.end(),
                                    mi.inst.steps[lowest].t));
}

TEST(JointBudgetPlan, TailNeverRemoved) {
    for (uint64_t seed = 10; seed < 40; ++seed) {
        const MicroInstance mi = make_micro_instance(seed);
        PlannerResult r;
        try {
            r = joint_budget_plan(mi.inst);
        } catch (const BudgetInfeasible&) {
            continue;
        }
        for (const auto& s : mi.inst.steps)
            if (s.tail)
                EXPECT_TRUE(std::binary_search(r.kept_steps.begin(), r.kept_steps.end(), s.t));
    }
}

TEST(JointBudgetPlan, MemoryPressureForcesBitMoves) {
    MicroInstance mi = make_micro_instance(3);
    std::vector<int> max_opt(mi.inst.layers.size(), 2);
    mi.inst.b_lat = mi.lat_of(max_opt, 0) * 2.0;   // latency slack
    std::vector<int> min_opt(mi.inst.layers.size(), 0);
    mi.inst.b_mem = 0.5 * (mi.mem_of(max_opt) + mi.mem_of(min_opt));
    const PlannerResult r = joint_budget_plan(mi.inst);
    EXPECT_LE(r.c_mem, mi.inst.b_mem);
    for (const auto& m : r.moves) EXPECT_EQ(m.kind, PlannerMove::Kind::Bit);
    EXPECT_EQ(r.kept_steps.size(), mi.inst.steps.size());
}

TEST(JointBudgetPlan, InfeasibleNamesLimitingResource) {
    MicroInstance mi = make_micro_instance(4);
    std::vector<int> min_opt(mi.inst.layers.size(), 0);
    mi.inst.b_mem = 0.5 * mi.mem_of(min_opt);  // unreachable even at min bits
    std::vector<int> max_opt(mi.inst.layers.size(), 2);
    mi.inst.b_lat = mi.lat_of(max_opt, 0) * 2.0;
    try {
        joint_budget_plan(mi.inst);
        FAIL() << "expected BudgetInfeasible";
    } catch (const BudgetInfeasible& e) {
        EXPECT_EQ(e.resource, "memory");
    }

    MicroInstance mj = make_micro_instance(5);
    uint32_t all_removed = 0;
    for (size_t s = 0; s < mj.inst.steps.size(); ++s)
        if (!mj.inst.steps[s].tail) all_removed |= 1u << s;
    mj.inst.b_lat = 0.5 * mj.lat_of(std::vector<int>(mj.inst.layers.size(), 0), all_removed);
    mj.inst.b_mem = mj.mem_of(std::vector<int>(mj.inst.layers.size(), 2)) * 2.0;
    try {
        joint_budget_plan(mj.inst);
        FAIL() << "expected BudgetInfeasible";
    } catch (const BudgetInfeasible& e) {
        EXPECT_EQ(e.resource, "latency");
    }
}

// Feasibility and oracle proximity on random micro-instances (the acceptance
// suite runs 200; this is the fast regression slice).
TEST(JointBudgetPlan, FeasibleAndNearExhaustiveOptimum) {
    int feasible_count = 0;
    for (uint64_t seed = 100; seed < 160; ++seed) {
        const MicroInstance mi = make_micro_instance(seed);
        const ExhaustiveBest oracle = exhaustive_best(mi);
        PlannerResult r;
        bool greedy_feasible = true;
        try {
            r = joint_budget_plan(mi.inst);
        } catch (const BudgetInfeasible&) {
            greedy_feasible = false;
        }
        ASSERT_EQ(greedy_feasible, oracle.feasible) << "seed " << seed;
        if (!greedy_feasible) continue;
        ++feasible_count;
        EXPECT_LE(r.c_lat, mi.inst.b_lat);
        EXPECT_LE(r.c_mem, mi.inst.b_mem);
        const double gs = greedy_score(mi, r);
        EXPECT_LE(gs, 1.2 * oracle.best_score + 1e-12) << "seed " << seed;
    }
    EXPECT_GT(feasible_count, 30);  // the budget sampler should mostly be feasible
}

// Enlarging either budget never worsens the final additive score.
TEST(JointBudgetPlan, BudgetMonotonicity) {
    for (uint64_t seed = 300; seed < 330; ++seed) {
        MicroInstance mi = make_micro_instance(seed);
        PlannerResult base;
        try {
            base = joint_budget_plan(mi.inst);
        } catch (const BudgetInfeasible&) {
            continue;
        }
        const double base_score = greedy_score(mi, base);
        MicroInstance wider = mi;
        wider.inst.b_lat *= 1.5;
        const double lat_score = greedy_score(wider, joint_budget_plan(wider.inst));
        EXPECT_LE(lat_score, base_score + 1e-12);
        MicroInstance taller = mi;
        taller.inst.b_mem *= 1.5;
        const double mem_score = greedy_score(taller, joint_budget_plan(taller.inst));
        EXPECT_LE(mem_score, base_score + 1e-12);
    }
}

TEST(JointBudgetPlan, RejectsNonPositiveBudgets) {
    MicroInstance mi = make_micro_instance(6);
    mi.inst.b_lat = 0.0;
    EXPECT_THROW(joint_budget_plan(mi.inst), InvalidArgument);
}

// Frozen layers expose a single option and are never downgraded.
TEST(JointBudgetPlan, PinnedLayersUntouched) {
    MicroInstance mi = make_micro_instance(7);
    mi.inst.layers[0].bit_options = {16};
    mi.inst.layers[0].lat = {mi.inst.layers[0].lat[2]};
    mi.inst.layers[0].mem = {mi.inst.layers[0].mem[2]};
    mi.harm[0] = {0.0};
    std::vector<int> max_opt{0, 2, 2, 2};
    uint32_t all_removed = 0;
    for (size_t s = 0; s < mi.inst.steps.size(); ++s)
        if (!mi.inst.steps[s].tail) all_removed |= 1u << s;
    // budget reachable only by downgrading the other layers plus pruning
    mi.inst.b_lat =
        1.02 * mi.lat_of(std::vector<int>{0, 0, 0, 0}, all_removed);
    mi.inst.b_mem = mi.mem_of(max_opt) * 2.0;
    const PlannerResult r = joint_budget_plan(mi.inst);
    EXPECT_EQ(r.option_index[0], 0);  // its only option
    for (const auto& m : r.moves) EXPECT_NE(m.layer, "L0");
}

// Real-pipeline instance construction: options bounded by the refined plan,
// frozen layers pinned, costs consistent with the cost model.
TEST(MakePlannerInstance, RespectsRefinedPlanAndFreeze) {
    const TinyDiT model(DiTConfig{}, 42);
    const CostModel cost(model);
    BitPlan refined = BitPlan::uniform(model.layer_ids(), 8, 128);
    refined.at("block0.qkv").bits = kFp16Bits;
    refined.at("final_proj").bits = kFp16Bits;
    refined.at("final_proj").frozen = true;
    DriftProfile prof;
    prof.T = 100;
    for (int t = 0; t < 100; ++t) {
        prof.candidates.push_back(t);
        prof.delta[t] = 0.1 + 0.001 * t;
    }
    std::map<std::string, double> sm;
    for (const auto& id : model.layer_ids()) sm[id] = 0.5;
    const PlannerInstance inst = make_planner_instance(cost, refined, SearchSpace{}, DaqPolicy{},
                                                       prof, 0.2, 1e12, 1e12, sm);
    for (const auto& l : inst.layers) {
        if (l.id == "final_proj") {
            EXPECT_EQ(l.bit_options, std::vector<int>{kFp16Bits});
        } else if (l.id == "block0.qkv") {
            EXPECT_EQ(l.bit_options, (std::vector<int>{3, 4, 6, 8, kFp16Bits}));
        } else {
            EXPECT_EQ(l.bit_options, (std::vector<int>{3, 4, 6, 8}));
        }
    }
    int tails = 0;
    for (const auto& s : inst.steps) tails += s.tail;
    EXPECT_EQ(tails, 20);
    // slack budgets: planner keeps everything and costs match the cost model
    const PlannerResult r = joint_budget_plan(inst);
    const BitPlan out = apply_planner_result(refined, inst, r);
    EXPECT_TRUE(out == refined);
    std::vector<int> all(100);
    for (int t = 0; t < 100; ++t) all[t] = t;
    EXPECT_NEAR(r.c_lat, cost.latency_total(refined, DaqPolicy{}, all), 1e-6);
    EXPECT_NEAR(r.c_mem, cost.model_size_bytes(refined), 1e-6);
}
