#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "diffpro/bitplan.hpp"
#include "diffpro/core.hpp"
#include "diffpro/cost.hpp"
#include "diffpro/pruner.hpp"
#include "diffpro/student.hpp"

namespace diffpro {

struct SearchConfig {
    int population = 12;
    int elites = 4;
    int generations = 6;
    double mutation_rate = 0.10;
    std::vector<DriftEvaluator::Fidelity> stages{{1, 4}, {2, 8}, {4, 16}};
    double lambda = 0.5;
    double mu = 0.5;
    double eps = 1e-8;

    void validate() const {
        if (population < 1) throw InvalidArgument("population must be >= 1");
        if (elites < 1 || elites >= population)
            throw InvalidArgument("elites must be in [1, population)");
        if (!(mutation_rate > 0.0 && mutation_rate < 1.0))
            throw InvalidArgument("mutation rate must be in (0,1)");
        if (stages.empty()) throw InvalidArgument("at least one halving stage required");
    }
};

// Eq-style total: drift plus hinge penalties on relative budget overshoot.
inline double eq7_score(double drift_mse, double latency, double bitops, double b_lat,
                        double b_bitops, double lambda = 0.5, double mu = 0.5) {
    auto pen = [](double c, double b) { return b > 0.0 ? std::max(0.0, c / b - 1.0) : 0.0; };
    return drift_mse + lambda * pen(latency, b_lat) + mu * pen(bitops, b_bitops);
}

struct ScoreParts {
    double drift_mse = 0.0;
    double latency_units = 0.0;
    double bitops = 0.0;
    double mem_bytes = 0.0;
    double total = 0.0;
    bool feasible = true;
};

// One joint candidate: weight plan, kept schedule, activation policy.
struct PlanCandidate {
    BitPlan bitplan;
    std::vector<int> schedule;
    DaqPolicy policy;
    ScoreParts score;

    uint64_t fingerprint_value() const {
        uint64_t h = fingerprint(bitplan);
        for (int t : schedule) h = fnv1a64(&t, sizeof(t), h);
        const int32_t pol[4] = {policy.bits_early, policy.bits_mid, policy.bits_late,
                                policy.group_size};
        h = fnv1a64(pol, sizeof(pol), h);
        h = fnv1a64(&policy.percentile, sizeof(double), h);
        h = fnv1a64(&policy.boundary_early, sizeof(double), h);
        h = fnv1a64(&policy.boundary_mid, sizeof(double), h);
        return h;
    }
};

// ------------------------------------------------------------------- mutate

// Each non-frozen layer mutates independently with the given probability:
// either its bits or its group size moves one step in the configured ordered
// set (uniform choice, edges move inward).
inline BitPlan mutate(const BitPlan& plan, double rate, Rng& rng,
                      const SearchSpace& space = SearchSpace{}) {
    if (!(rate >= 0.0 && rate < 1.0)) throw InvalidArgument("mutation rate must be in [0,1)");
    BitPlan out = plan;
    for (auto& [id, a] : out.layers) {
        if (a.frozen) continue;
        if (!rng.bernoulli(rate)) continue;
        const bool move_bits = rng.bernoulli(0.5);
        if (move_bits) {
            const auto it = std::find(space.bit_set.begin(), space.bit_set.end(), a.bits);
            if (it == space.bit_set.end()) continue;  // pinned outside the set
            const int i = static_cast<int>(it - space.bit_set.begin());
            const int n = static_cast<int>(space.bit_set.size());
            if (n < 2) continue;
            int j = i == 0 ? 1 : (i == n - 1 ? n - 2 : (rng.bernoulli(0.5) ? i + 1 : i - 1));
            a.bits = space.bit_set[j];
        } else {
            const auto it = std::find(space.group_set.begin(), space.group_set.end(), a.group_size);
            if (it == space.group_set.end()) continue;
            const int i = static_cast<int>(it - space.group_set.begin());
            const int n = static_cast<int>(space.group_set.size());
            if (n < 2) continue;
            int j = i == 0 ? 1 : (i == n - 1 ? n - 2 : (rng.bernoulli(0.5) ? i + 1 : i - 1));
            a.group_size = space.group_set[j];
        }
    }
    return out;
}

// -------------------------------------------------------- successive halving

struct HalvingOutcome {
    std::vector<int> survivors;        // indices into the input set, best first
    std::vector<double> final_scores;  // aligned with survivors
    std::vector<int> evaluated_per_stage;
};

// Stage-by-stage screen: evaluate all current survivors at the stage fidelity,
// keep the best half (at least min_keep). Final survivors carry the last
// stage's scores. eval(candidate, stage_idx, fidelity) may be called
// concurrently when workers > 1; results must not depend on call order.
template <typename EvalFn>
HalvingOutcome successive_halving(int n_candidates,
                                  const std::vector<DriftEvaluator::Fidelity>& stages,
                                  EvalFn&& eval, int min_keep = 1, int workers = 1) {
    if (n_candidates < 1) throw InvalidArgument("successive_halving: no candidates");
    if (stages.empty()) throw InvalidArgument("successive_halving: no stages");
    HalvingOutcome out;
    std::vector<int> survivors(n_candidates);
    for (int i = 0; i < n_candidates; ++i) survivors[i] = i;
    std::vector<double> scores;
    for (size_t s = 0; s < stages.size(); ++s) {
        out.evaluated_per_stage.push_back(static_cast<int>(survivors.size()));
        scores.assign(survivors.size(), 0.0);
        parallel_for(static_cast<int>(survivors.size()), workers, [&](int i) {
            scores[i] = eval(survivors[i], static_cast<int>(s), stages[s]);
        });
        std::vector<int> order(survivors.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (scores[a] != scores[b]) return scores[a] < scores[b];
            return survivors[a] < survivors[b];
        });
        const int keep = std::max<int>(std::max(1, min_keep),
                                       static_cast<int>(survivors.size()) / 2);
        std::vector<int> next;
        std::vector<double> next_scores;
        for (int i = 0; i < keep && i < static_cast<int>(order.size()); ++i) {
            next.push_back(survivors[order[i]]);
            next_scores.push_back(scores[order[i]]);
        }
        survivors = std::move(next);
        scores = std::move(next_scores);
    }
    out.survivors = survivors;
    out.final_scores = scores;
    return out;
}

// ------------------------------------------------------------------- evolve

struct GenerationLog {
    int generation = 0;
    double best = 0.0;    // best full-fidelity drift seen so far (elitism)
    double median = 0.0;  // median of this generation's final-stage scores
};

struct EvolveResult {
    BitPlan best_plan;
    double best_drift = 0.0;
    std::vector<GenerationLog> log;
};

// Bit/group refinement around the seed: generations of {elites + mutated
// offspring}, fingerprint dedup, successive halving per generation, elitism
// on the best-so-far full-fidelity drift.
inline EvolveResult evolve(const QuantContext& ctx, const DriftEvaluator& eval,
                           const BitPlan& seed, const DaqPolicy& policy,
                           const SearchConfig& cfg, const SearchSpace& space, uint64_t seed_value,
                           int workers = 1) {
    cfg.validate();
    std::map<std::pair<uint64_t, int>, double> score_cache;  // (fingerprint, stage) -> drift
    std::mutex cache_mu;
    auto drift_of = [&](const BitPlan& plan, const DriftEvaluator::Fidelity& fid,
                        int stage_idx) {
        const auto key = std::make_pair(fingerprint(plan), stage_idx);
        {
            std::lock_guard<std::mutex> lk(cache_mu);
            auto it = score_cache.find(key);
            if (it != score_cache.end()) return it->second;
        }
        const ExecPlan exec = build_exec_plan(ctx, plan, policy, ActMode::Dynamic);
        const double d = eval.drift(exec, fid, 1);
        std::lock_guard<std::mutex> lk(cache_mu);
        score_cache[key] = d;
        return d;
    };
    const int full_stage = static_cast<int>(cfg.stages.size()) - 1;

    EvolveResult res;
    res.best_plan = seed;
    res.best_drift = drift_of(seed, cfg.stages.back(), full_stage);

    std::vector<BitPlan> elites{seed};
    Rng rng(derive_seed(seed_value, "evolve"));
    for (int gen = 0; gen < cfg.generations; ++gen) {
        // populate: current elites plus mutated offspring, dedup by fingerprint
        std::vector<BitPlan> pop = elites;
        std::vector<uint64_t> seen;
        for (const auto& p : pop) seen.push_back(fingerprint(p));
        int guard = 0;
        while (static_cast<int>(pop.size()) < cfg.population && guard < cfg.population * 50) {
            ++guard;
            const BitPlan child =
                mutate(elites[guard % elites.size()], cfg.mutation_rate, rng, space);
            const uint64_t f = fingerprint(child);
            if (std::find(seen.begin(), seen.end(), f) != seen.end()) continue;
            seen.push_back(f);
            pop.push_back(child);
        }

        auto outcome = successive_halving(
            static_cast<int>(pop.size()), cfg.stages,
            [&](int i, int stage_idx, const DriftEvaluator::Fidelity& fid) {
                return drift_of(pop[i], fid, stage_idx);
            },
            cfg.elites, workers);

        std::vector<BitPlan> next;
        for (size_t i = 0; i < outcome.survivors.size() && next.size() < size_t(cfg.elites); ++i)
            next.push_back(pop[outcome.survivors[i]]);
        if (!outcome.final_scores.empty() && outcome.final_scores.front() < res.best_drift) {
            res.best_drift = outcome.final_scores.front();
            res.best_plan = pop[outcome.survivors.front()];
        }
        elites = std::move(next);

        std::vector<double> fs = outcome.final_scores;
        std::sort(fs.begin(), fs.end());
        GenerationLog gl;
        gl.generation = gen;
        gl.best = res.best_drift;
        gl.median = fs.empty() ? res.best_drift : fs[fs.size() / 2];
        res.log.push_back(gl);
    }
    return res;
}

// ------------------------------------------------- joint DAQ/schedule search

struct JointCandidate {
    DaqPolicy policy;
    int k = 0;
};

struct JointSearchResult {
    PlanCandidate best;
    std::vector<PlanCandidate> evaluated;  // pareto log, evaluation order
    std::vector<GenerationLog> log;
};

// The budget-scored joint loop: weights stay fixed at the planned bit plan;
// candidates vary activation bits per phase bin and the kept-schedule length
// (+-10%), re-selected from the drift profile so the protected tail is kept.
inline JointSearchResult joint_policy_search(const QuantContext& ctx, const DriftEvaluator& eval,
                                             const CostModel& cost, const BitPlan& plan,
                                             const DaqPolicy& base_policy,
                                             const DriftProfile& profile, int base_k, double rho,
                                             double b_lat, double b_mem, double b_bitops,
                                             const SearchConfig& cfg, uint64_t seed_value,
                                             int workers = 1) {
    cfg.validate();
    const std::vector<int> act_bits{4, 6, 8, 16};
    const int n_tail = static_cast<int>(tail_steps(profile.candidates, profile.T, rho).size());
    const int k_min = n_tail;
    const int k_max = static_cast<int>(profile.candidates.size());

    auto schedule_for = [&](int k) { return select_schedule(profile, k, rho).kept; };

    std::map<std::pair<uint64_t, int>, double> drift_cache;
    std::mutex cache_mu;
    auto evaluate = [&](const JointCandidate& jc, const DriftEvaluator::Fidelity& fid,
                        int stage_idx) {
        PlanCandidate pc;
        pc.bitplan = plan;
        pc.policy = jc.policy;
        pc.schedule = schedule_for(jc.k);
        const auto key = std::make_pair(pc.fingerprint_value(), stage_idx);
        bool have = false;
        double drift = 0.0;
        {
            std::lock_guard<std::mutex> lk(cache_mu);
            auto it = drift_cache.find(key);
            if (it != drift_cache.end()) {
                drift = it->second;
                have = true;
            }
        }
        if (!have) {
            const ExecPlan exec = build_exec_plan(ctx, plan, jc.policy, ActMode::Dynamic);
            drift = eval.drift(exec, fid, 1);
            std::lock_guard<std::mutex> lk(cache_mu);
            drift_cache[key] = drift;
        }
        pc.score.drift_mse = drift;
        pc.score.latency_units = cost.latency_total(plan, jc.policy, pc.schedule);
        pc.score.bitops = cost.bitops(plan, jc.policy, pc.schedule);
        pc.score.mem_bytes = cost.model_size_bytes(plan);
        pc.score.total = eq7_score(drift, pc.score.latency_units, pc.score.bitops, b_lat, b_bitops,
                                   cfg.lambda, cfg.mu);
        pc.score.feasible = pc.score.latency_units <= b_lat && pc.score.mem_bytes <= b_mem;
        return pc;
    };

    auto mutate_joint = [&](const JointCandidate& jc, Rng& rng) {
        JointCandidate out = jc;
        auto move_bits = [&](int b) {
            const auto it = std::find(act_bits.begin(), act_bits.end(), b);
            const int i = static_cast<int>(it - act_bits.begin());
            const int n = static_cast<int>(act_bits.size());
            const int j = i == 0 ? 1 : (i == n - 1 ? n - 2 : (rng.bernoulli(0.5) ? i + 1 : i - 1));
            return act_bits[j];
        };
        if (rng.bernoulli(cfg.mutation_rate * 3)) out.policy.bits_early = move_bits(jc.policy.bits_early);
        if (rng.bernoulli(cfg.mutation_rate * 3)) out.policy.bits_mid = move_bits(jc.policy.bits_mid);
        if (rng.bernoulli(cfg.mutation_rate * 3)) out.policy.bits_late = move_bits(jc.policy.bits_late);
        const int span = std::max(1, static_cast<int>(std::lround(0.10 * jc.k)));
        const int delta = rng.uniform_int(2 * span + 1) - span;
        out.k = std::min(k_max, std::max(k_min, jc.k + delta));
        return out;
    };

    auto fp_of = [&](const JointCandidate& jc) {
        const int32_t v[4] = {jc.policy.bits_early, jc.policy.bits_mid, jc.policy.bits_late, jc.k};
        return fnv1a64(v, sizeof(v));
    };

    JointSearchResult res;
    JointCandidate base{base_policy, base_k};
    const int full_stage = static_cast<int>(cfg.stages.size()) - 1;
    PlanCandidate base_eval = evaluate(base, cfg.stages.back(), full_stage);
    res.evaluated.push_back(base_eval);
    res.best = base_eval;

    std::vector<JointCandidate> elites{base};
    Rng rng(derive_seed(seed_value, "jointsearch"));
    for (int gen = 0; gen < cfg.generations; ++gen) {
        std::vector<JointCandidate> pop = elites;
        std::vector<uint64_t> seen;
        for (const auto& c : pop) seen.push_back(fp_of(c));
        int guard = 0;
        while (static_cast<int>(pop.size()) < cfg.population && guard < cfg.population * 50) {
            ++guard;
            const JointCandidate child = mutate_joint(elites[guard % elites.size()], rng);
            const uint64_t f = fp_of(child);
            if (std::find(seen.begin(), seen.end(), f) != seen.end()) continue;
            seen.push_back(f);
            pop.push_back(child);
        }

        std::vector<PlanCandidate> full_evals(pop.size());
        auto outcome = successive_halving(
            static_cast<int>(pop.size()), cfg.stages,
            [&](int i, int stage_idx, const DriftEvaluator::Fidelity& fid) {
                const PlanCandidate pc = evaluate(pop[i], fid, stage_idx);
                if (stage_idx == full_stage) full_evals[i] = pc;
                return pc.score.total;
            },
            cfg.elites, workers);

        std::vector<JointCandidate> next;
        std::vector<double> gen_scores;
        for (size_t i = 0; i < outcome.survivors.size(); ++i) {
            const int idx = outcome.survivors[i];
            const PlanCandidate& pc = full_evals[idx];
            res.evaluated.push_back(pc);
            gen_scores.push_back(pc.score.total);
            if (next.size() < size_t(cfg.elites)) next.push_back(pop[idx]);
            if (pc.score.feasible &&
                (!res.best.score.feasible || pc.score.total < res.best.score.total))
                res.best = pc;
        }
        elites = std::move(next);

        std::sort(gen_scores.begin(), gen_scores.end());
        GenerationLog gl;
        gl.generation = gen;
        gl.best = res.best.score.total;
        gl.median = gen_scores.empty() ? gl.best : gen_scores[gen_scores.size() / 2];
        res.log.push_back(gl);
    }
    return res;
}

}  // namespace diffpro
