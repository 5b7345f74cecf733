#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "diffpro/core.hpp"
#include "diffpro/daq.hpp"
#include "diffpro/search.hpp"

namespace diffpro {

using json = nlohmann::json;

// Everything a run needs, serializable; the merged effective config is copied
// into the run directory so every artifact can be regenerated from it.
struct RunConfig {
    uint64_t seed = 7;

    // model
    int T = 100;

    // calibration
    int calib_samples = 512;
    int calib_timesteps = 12;
    int reservoir_cap = 2048;

    // sensitivity / tiering
    double alpha = 0.5;
    int pca_cap = 128;
    double freeze_fraction = 0.10;
    bool tier_by_composite = true;
    bool uniform_seed = false;

    // evaluation grid
    int eval_steps = 16;
    int eval_batches = 4;
    int eval_batch_size = 8;

    // search
    SearchConfig search;

    // daq
    DaqPolicy daq;

    // budgets, as fractions of the reference costs (resolved at runtime):
    // latency vs the W8A8 full-schedule cost, memory vs the FP32 size,
    // bitops vs the W8A8 full-schedule count. Absolute overrides win if > 0.
    double b_lat_frac = 0.60;
    double b_mem_frac = 0.25;
    double b_bitops_frac = 0.60;
    double b_lat_abs = 0.0;
    double b_mem_abs = 0.0;
    double b_bitops_abs = 0.0;

    // schedule
    int keep_k = -1;      // -1: T/2
    double rho = 0.2;
    int drift_batch = 8;

    // deployment
    int n_images = 4;

    int workers = 1;
    std::string out_dir = "run";

    int resolved_k() const { return keep_k > 0 ? keep_k : T / 2; }

    void validate() const {
        if (T < 2) throw InvalidArgument("T must be >= 2");
        if (calib_samples < 1) throw InvalidArgument("calib_samples must be >= 1");
        if (!(rho >= 0.0 && rho < 1.0)) throw InvalidArgument("rho must be in [0,1)");
        if (workers < 1) throw InvalidArgument("workers must be >= 1");
        search.validate();
        daq.validate();
    }
};

inline json to_json(const RunConfig& c) {
    json stages = json::array();
    for (const auto& s : c.search.stages)
        stages.push_back({{"batches", s.n_batches}, {"steps", s.n_steps}});
    return json{
        {"seed", c.seed},
        {"T", c.T},
        {"calib", {{"samples", c.calib_samples},
                   {"timesteps", c.calib_timesteps},
                   {"reservoir_cap", c.reservoir_cap}}},
        {"sensitivity", {{"alpha", c.alpha},
                         {"pca_cap", c.pca_cap},
                         {"freeze_fraction", c.freeze_fraction},
                         {"tier_by_composite", c.tier_by_composite},
                         {"uniform_seed", c.uniform_seed}}},
        {"eval", {{"steps", c.eval_steps},
                  {"batches", c.eval_batches},
                  {"batch_size", c.eval_batch_size}}},
        {"search", {{"population", c.search.population},
                    {"elites", c.search.elites},
                    {"generations", c.search.generations},
                    {"mutation_rate", c.search.mutation_rate},
                    {"lambda", c.search.lambda},
                    {"mu", c.search.mu},
                    {"stages", stages}}},
        {"daq", {{"bits_early", c.daq.bits_early},
                 {"bits_mid", c.daq.bits_mid},
                 {"bits_late", c.daq.bits_late},
                 {"percentile", c.daq.percentile},
                 {"group_size", c.daq.group_size},
                 {"boundary_early", c.daq.boundary_early},
                 {"boundary_mid", c.daq.boundary_mid}}},
        {"budgets", {{"lat_frac", c.b_lat_frac},
                     {"mem_frac", c.b_mem_frac},
                     {"bitops_frac", c.b_bitops_frac},
                     {"lat_abs", c.b_lat_abs},
                     {"mem_abs", c.b_mem_abs},
                     {"bitops_abs", c.b_bitops_abs}}},
        {"schedule", {{"keep_k", c.keep_k}, {"rho", c.rho}, {"drift_batch", c.drift_batch}}},
        {"deploy", {{"n_images", c.n_images}}},
        {"workers", c.workers},
        {"out_dir", c.out_dir},
    };
}

inline RunConfig config_from_json(const json& j) {
    RunConfig c;
    auto get = [](const json& o, const char* k, auto dflt) {
        using T = decltype(dflt);
        return o.contains(k) ? o.at(k).get<T>() : dflt;
    };
    c.seed = get(j, "seed", c.seed);
    c.T = get(j, "T", c.T);
    if (j.contains("calib")) {
        const auto& o = j.at("calib");
        c.calib_samples = get(o, "samples", c.calib_samples);
        c.calib_timesteps = get(o, "timesteps", c.calib_timesteps);
        c.reservoir_cap = get(o, "reservoir_cap", c.reservoir_cap);
    }
    if (j.contains("sensitivity")) {
        const auto& o = j.at("sensitivity");
        c.alpha = get(o, "alpha", c.alpha);
        c.pca_cap = get(o, "pca_cap", c.pca_cap);
        c.freeze_fraction = get(o, "freeze_fraction", c.freeze_fraction);
        c.tier_by_composite = get(o, "tier_by_composite", c.tier_by_composite);
        c.uniform_seed = get(o, "uniform_seed", c.uniform_seed);
    }
    if (j.contains("eval")) {
        const auto& o = j.at("eval");
        c.eval_steps = get(o, "steps", c.eval_steps);
        c.eval_batches = get(o, "batches", c.eval_batches);
        c.eval_batch_size = get(o, "batch_size", c.eval_batch_size);
    }
    if (j.contains("search")) {
        const auto& o = j.at("search");
        c.search.population = get(o, "population", c.search.population);
        c.search.elites = get(o, "elites", c.search.elites);
        c.search.generations = get(o, "generations", c.search.generations);
        c.search.mutation_rate = get(o, "mutation_rate", c.search.mutation_rate);
        c.search.lambda = get(o, "lambda", c.search.lambda);
        c.search.mu = get(o, "mu", c.search.mu);
        if (o.contains("stages")) {
            c.search.stages.clear();
            for (const auto& s : o.at("stages"))
                c.search.stages.push_back(
                    {s.at("batches").get<int>(), s.at("steps").get<int>()});
        }
    }
    if (j.contains("daq")) {
        const auto& o = j.at("daq");
        c.daq.bits_early = get(o, "bits_early", c.daq.bits_early);
        c.daq.bits_mid = get(o, "bits_mid", c.daq.bits_mid);
        c.daq.bits_late = get(o, "bits_late", c.daq.bits_late);
        c.daq.percentile = get(o, "percentile", c.daq.percentile);
        c.daq.group_size = get(o, "group_size", c.daq.group_size);
        c.daq.boundary_early = get(o, "boundary_early", c.daq.boundary_early);
        c.daq.boundary_mid = get(o, "boundary_mid", c.daq.boundary_mid);
    }
    if (j.contains("budgets")) {
        const auto& o = j.at("budgets");
        c.b_lat_frac = get(o, "lat_frac", c.b_lat_frac);
        c.b_mem_frac = get(o, "mem_frac", c.b_mem_frac);
        c.b_bitops_frac = get(o, "bitops_frac", c.b_bitops_frac);
        c.b_lat_abs = get(o, "lat_abs", c.b_lat_abs);
        c.b_mem_abs = get(o, "mem_abs", c.b_mem_abs);
        c.b_bitops_abs = get(o, "bitops_abs", c.b_bitops_abs);
    }
    if (j.contains("schedule")) {
        const auto& o = j.at("schedule");
        c.keep_k = get(o, "keep_k", c.keep_k);
        c.rho = get(o, "rho", c.rho);
        c.drift_batch = get(o, "drift_batch", c.drift_batch);
    }
    if (j.contains("deploy")) c.n_images = get(j.at("deploy"), "n_images", c.n_images);
    c.workers = get(j, "workers", c.workers);
    c.out_dir = get(j, "out_dir", c.out_dir);
    return c;
}

}  // namespace diffpro
