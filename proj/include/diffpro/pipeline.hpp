#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "diffpro/config.hpp"
#include "diffpro/cost.hpp"
#include "diffpro/deploy.hpp"
#include "diffpro/io.hpp"
#include "diffpro/model.hpp"
#include "diffpro/planner.hpp"
#include "diffpro/pruner.hpp"
#include "diffpro/search.hpp"
#include "diffpro/sensitivity.hpp"
#include "diffpro/stats.hpp"
#include "diffpro/student.hpp"

namespace diffpro {

// Stage working set. The model comes from the checkpoint when one exists;
// calibration statistics are deterministic in (checkpoint, config) and are
// recomputed as an in-memory cache rather than stored raw.
struct StageContext {
    RunConfig cfg;
    fs::path dir;
    std::unique_ptr<TinyDiT> model;
    NoiseSchedule sched;
    CalibrationSet calib;
    CalibStats stats;
    std::unique_ptr<QuantContext> quant;
    std::unique_ptr<DriftEvaluator> eval;
    std::unique_ptr<DriftEvaluator> holdout;  // lazily built, disjoint seed stream

    CostModel cost;
    double ref_lat = 0.0;     // uniform W8/g128 + DAQ8, full schedule
    double ref_bitops = 0.0;
    double b_lat = 0.0;
    double b_mem = 0.0;
    double b_bitops = 0.0;

    std::vector<int> all_steps() const {
        std::vector<int> s(cfg.T);
        for (int t = 0; t < cfg.T; ++t) s[t] = t;
        return s;
    }
};

inline DiTConfig model_config_for(const RunConfig& cfg) {
    DiTConfig mc;
    mc.T = cfg.T;
    return mc;
}

inline StageContext make_stage_context(const RunConfig& cfg, const fs::path& dir,
                                       bool from_checkpoint) {
    cfg.validate();
    StageContext ctx;
    ctx.cfg = cfg;
    ctx.dir = dir;
    if (from_checkpoint) {
        ctx.model = std::make_unique<TinyDiT>(
            checkpoint_from_json(read_json_file(dir / "model.json")));
    } else {
        ctx.model = std::make_unique<TinyDiT>(model_config_for(cfg), cfg.seed);
    }
    ctx.sched = cosine_schedule(cfg.T);
    ctx.calib = CalibrationSet::make(ctx.sched, cfg.calib_samples, cfg.calib_timesteps,
                                     ctx.model->config().classes, cfg.seed);
    ctx.stats = collect_stats(*ctx.model, ctx.calib, cfg.reservoir_cap, cfg.seed);
    ctx.quant = std::make_unique<QuantContext>(*ctx.model, ctx.stats);
    ctx.eval = std::make_unique<DriftEvaluator>(*ctx.model, ctx.sched, cfg.eval_steps,
                                                cfg.eval_batches, cfg.eval_batch_size,
                                                derive_seed(cfg.seed, "evalgrid"));
    ctx.cost = CostModel(*ctx.model);

    const BitPlan ref_plan =
        BitPlan::uniform(ctx.model->layer_ids(), 8, 128);
    DaqPolicy ref_policy;  // 8/8/8
    ctx.ref_lat = ctx.cost.latency_total(ref_plan, ref_policy, ctx.all_steps());
    ctx.ref_bitops = ctx.cost.bitops(ref_plan, ref_policy, ctx.all_steps());
    ctx.b_lat = cfg.b_lat_abs > 0 ? cfg.b_lat_abs : cfg.b_lat_frac * ctx.ref_lat;
    ctx.b_mem = cfg.b_mem_abs > 0 ? cfg.b_mem_abs : cfg.b_mem_frac * ctx.cost.fp32_size_bytes();
    ctx.b_bitops = cfg.b_bitops_abs > 0 ? cfg.b_bitops_abs : cfg.b_bitops_frac * ctx.ref_bitops;
    return ctx;
}

inline void write_effective_config(const StageContext& ctx) {
    json j = to_json(ctx.cfg);
    j["resolved_budgets"] = {{"lat", ctx.b_lat}, {"mem", ctx.b_mem}, {"bitops", ctx.b_bitops}};
    write_json_file(ctx.dir / "effective_config.json", j);
}

// --------------------------------------------------------------- calibrate

inline void run_calibrate(StageContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    write_json_file(ctx.dir / "model.json", checkpoint_to_json(*ctx.model));

    SensitivityConfig sc;
    sc.alpha = cfg.alpha;
    sc.pca_cap = cfg.pca_cap;
    sc.freeze_fraction = cfg.freeze_fraction;
    sc.tier_by_composite = cfg.tier_by_composite;
    sc.uniform_seed = cfg.uniform_seed;
    const SensitivityResult sens =
        compute_sensitivity(*ctx.quant, ctx.sched, *ctx.eval, sc, cfg.seed, cfg.workers);

    write_json_file(ctx.dir / "stats.json", stats_to_json(sens.layers));
    write_json_file(ctx.dir / "seedplan.json", bitplan_to_json(sens.tiers.seed));
    write_effective_config(ctx);
}

inline void run_calibrate(const RunConfig& cfg, const fs::path& dir) {
    StageContext ctx = make_stage_context(cfg, dir, false);
    run_calibrate(ctx);
}

// ------------------------------------------------------------------ refine

inline void run_refine(StageContext& ctx) {
    const BitPlan seed_plan = bitplan_from_json(read_json_file(ctx.dir / "seedplan.json"));
    const EvolveResult ev = evolve(*ctx.quant, *ctx.eval, seed_plan, ctx.cfg.daq, ctx.cfg.search,
                                   SearchSpace{}, ctx.cfg.seed, ctx.cfg.workers);
    json j = bitplan_to_json(ev.best_plan);
    j["drift_mse"] = ev.best_drift;
    write_json_file(ctx.dir / "refined_plan.json", j);
    write_evolution_csv(ctx.dir / "evolution.csv", ev.log);
}

inline void run_refine(const RunConfig& cfg, const fs::path& dir) {
    StageContext ctx = make_stage_context(cfg, dir, true);
    run_refine(ctx);
}

// ------------------------------------------------------------- daq profile

inline void run_daq_profile(StageContext& ctx) {
    json j = daq_to_json(ctx.cfg.daq);
    // data-driven per-layer clipping scales; the static fallback and warm start
    json taus = json::object();
    for (const auto& id : ctx.model->layer_ids())
        taus[id] = static_activation_tau(ctx.stats.at(id).reservoir, ctx.cfg.daq.percentile);
    j["static_tau"] = taus;
    write_json_file(ctx.dir / "daq.json", j);
}

inline void run_daq_profile(const RunConfig& cfg, const fs::path& dir) {
    StageContext ctx = make_stage_context(cfg, dir, true);
    run_daq_profile(ctx);
}

// ------------------------------------------------------------------- prune

inline DriftProfile drift_profile_from_csv(const fs::path& path, int T, int batch) {
    const std::string text = read_text_file(path);
    DriftProfile prof;
    prof.T = T;
    prof.batch_size = batch;
    size_t pos = text.find('\n');
    if (pos == std::string::npos) throw InvalidArgument("malformed drift.csv");
    while (pos + 1 < text.size()) {
        const size_t end = text.find('\n', pos + 1);
        const std::string line = text.substr(pos + 1, end - pos - 1);
        if (!line.empty()) {
            const size_t c1 = line.find(',');
            const size_t c2 = line.find(',', c1 + 1);
            const int t = std::stoi(line.substr(0, c1));
            const double d = std::stod(line.substr(c1 + 1, c2 - c1 - 1));
            prof.candidates.push_back(t);
            prof.delta[t] = d;
        }
        if (end == std::string::npos) break;
        pos = end;
    }
    std::sort(prof.candidates.begin(), prof.candidates.end());
    return prof;
}

inline void run_prune(StageContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    const BitPlan refined = bitplan_from_json(read_json_file(ctx.dir / "refined_plan.json"));
    const ExecPlan student = build_exec_plan(*ctx.quant, refined, cfg.daq, ActMode::Dynamic);
    const DriftProfile prof =
        measure_drift(*ctx.model, student, ctx.sched, ctx.all_steps(), cfg.drift_batch,
                      derive_seed(cfg.seed, "prune"), cfg.workers);
    const StepSchedule sched = select_schedule(prof, cfg.resolved_k(), cfg.rho);
    write_drift_csv(ctx.dir / "drift.csv", prof, sched);
    json j = schedule_to_json(sched);
    j["lorenz_coverage"] = lorenz_coverage(prof, cfg.resolved_k(), cfg.rho);
    j["gini"] = gini(prof);
    write_json_file(ctx.dir / "schedule.json", j);
}

inline void run_prune(const RunConfig& cfg, const fs::path& dir) {
    StageContext ctx = make_stage_context(cfg, dir, true);
    run_prune(ctx);
}

// -------------------------------------------------------------------- plan

inline void run_plan(StageContext& ctx) {
    const RunConfig& cfg = ctx.cfg;
    const fs::path& dir = ctx.dir;
    const BitPlan refined = bitplan_from_json(read_json_file(dir / "refined_plan.json"));
    const DriftProfile prof =
        drift_profile_from_csv(dir / "drift.csv", cfg.T, cfg.drift_batch);
    const json stats_j = read_json_file(dir / "stats.json");
    const DaqPolicy policy = daq_from_json(read_json_file(dir / "daq.json"));

    std::map<std::string, double> s_m;
    for (const auto& [id, jl] : stats_j.at("layers").items())
        s_m[id] = jl.at(cfg.tier_by_composite ? "composite" : "score").get<double>();

    // Phase A: budget-driven downgrades and step removals
    const PlannerInstance inst = make_planner_instance(
        ctx.cost, refined, SearchSpace{}, policy, prof, cfg.rho, ctx.b_lat, ctx.b_mem, s_m);
    const PlannerResult pr = joint_budget_plan(inst);
    const BitPlan planned = apply_planner_result(refined, inst, pr);

    // joint loop over DAQ bits and schedule length around the Phase-A result
    const JointSearchResult js = joint_policy_search(
        *ctx.quant, *ctx.eval, ctx.cost, planned, policy, prof,
        static_cast<int>(pr.kept_steps.size()), cfg.rho, ctx.b_lat, ctx.b_mem, ctx.b_bitops,
        cfg.search, cfg.seed, cfg.workers);

    json j;
    j["bitplan"] = bitplan_to_json(js.best.bitplan);
    StepSchedule final_sched;
    final_sched.kept = js.best.schedule;
    final_sched.rho = cfg.rho;
    final_sched.tail = tail_steps(prof.candidates, cfg.T, cfg.rho);
    j["schedule"] = schedule_to_json(final_sched);
    j["daq"] = daq_to_json(js.best.policy);
    j["score"] = {{"drift_mse", js.best.score.drift_mse},
                  {"latency_units", js.best.score.latency_units},
                  {"bitops", js.best.score.bitops},
                  {"mem_bytes", js.best.score.mem_bytes},
                  {"total", js.best.score.total},
                  {"feasible", js.best.score.feasible}};
    j["budgets"] = {{"lat", ctx.b_lat}, {"mem", ctx.b_mem}, {"bitops", ctx.b_bitops}};
    json moves = json::array();
    for (const auto& m : pr.moves) {
        json mv;
        if (m.kind == PlannerMove::Kind::Step) {
            mv = {{"kind", "step"}, {"t", m.t}};
        } else {
            mv = {{"kind", "bit"}, {"layer", m.layer}, {"from", m.from_bits}, {"to", m.to_bits}};
        }
        mv["score"] = m.score;
        mv["c_lat_after"] = m.c_lat_after;
        mv["c_mem_after"] = m.c_mem_after;
        moves.push_back(mv);
    }
    j["move_log"] = moves;
    j["phase_a"] = {{"init_lat", pr.init_lat},
                    {"init_mem", pr.init_mem},
                    {"final_lat", pr.c_lat},
                    {"final_mem", pr.c_mem},
                    {"kept", pr.kept_steps}};
    write_json_file(dir / "plan.json", j);
    write_pareto_csv(dir / "pareto.csv", js.evaluated);
}

inline void run_plan(const RunConfig& cfg, const fs::path& dir) {
    StageContext ctx = make_stage_context(cfg, dir, true);
    run_plan(ctx);
}

// ------------------------------------------------------------------ deploy

struct DeployVariant {
    std::string name;
    BitPlan plan;
    std::vector<int> schedule;
    DaqPolicy policy;
    ActMode act_mode = ActMode::Dynamic;
};

inline DeployVariant make_variant(const StageContext& ctx, const std::string& name,
                                  const BitPlan& planned, const std::vector<int>& kept,
                                  const DaqPolicy& policy) {
    DeployVariant v;
    v.name = name;
    v.plan = planned;
    v.schedule = kept;
    v.policy = policy;
    v.act_mode = ActMode::Dynamic;
    if (name == "full") return v;
    if (name == "no-daq") {
        v.act_mode = ActMode::Static;
        return v;
    }
    if (name == "no-prune") {
        v.schedule = ctx.all_steps();
        return v;
    }
    if (name == "uniform-seed") {
        v.plan = BitPlan::uniform(ctx.model->layer_ids(), 4, 288);
        return v;
    }
    if (name == "fp-baseline") {
        v.plan = BitPlan::uniform(ctx.model->layer_ids(), kFp32Bits, 128);
        v.schedule = ctx.all_steps();
        v.act_mode = ActMode::None;
        return v;
    }
    throw InvalidArgument("unknown deploy variant: " + name);
}

inline void run_deploy(StageContext& ctx, const std::string& variant) {
    const RunConfig& cfg = ctx.cfg;
    const fs::path& dir = ctx.dir;
    const json plan_j = read_json_file(dir / "plan.json");
    const BitPlan planned = bitplan_from_json(plan_j.at("bitplan"));
    const StepSchedule kept = schedule_from_json(plan_j.at("schedule"));
    const DaqPolicy policy = daq_from_json(plan_j.at("daq"));

    const DeployVariant v = make_variant(ctx, variant, planned, kept.kept, policy);
    ctx.cost.check_plan_coverage(v.plan);
    const ExecPlan exec = build_exec_plan(*ctx.quant, v.plan, v.policy, v.act_mode);

    if (variant == "full") {
        std::vector<const GroupQuantWeights*> packed;
        for (const auto& [id, le] : exec.layers)
            if (!le.passthrough) packed.push_back(&le.packed);
        write_packed_plan(dir / "packed.bin", packed);
    }

    const SampleResult run =
        sample(*ctx.model, exec, v.schedule, ctx.sched, cfg.n_images,
               derive_seed(cfg.seed, "deploy"), cfg.workers);
    const std::vector<Latent> ref = teacher_reference(
        *ctx.model, ctx.sched, cfg.n_images, derive_seed(cfg.seed, "deploy"), cfg.workers);

    // held-out drift: a fresh evaluation grid disjoint from the search grid
    if (!ctx.holdout)
        ctx.holdout = std::make_unique<DriftEvaluator>(*ctx.model, ctx.sched, 8, 2,
                                                       cfg.eval_batch_size,
                                                       derive_seed(cfg.seed, "holdout"));
    const double drift_holdout = ctx.holdout->drift(exec, {2, 8}, cfg.workers);

    json j;
    j["variant"] = v.name;
    j["size_bytes"] = ctx.cost.model_size_bytes(v.plan);
    j["fp32_size_bytes"] = ctx.cost.fp32_size_bytes();
    j["compression"] = ctx.cost.fp32_size_bytes() / ctx.cost.model_size_bytes(v.plan);
    j["kept_steps"] = static_cast<int>(v.schedule.size());
    j["kept_fraction"] = static_cast<double>(v.schedule.size()) / cfg.T;
    j["latency_units"] = ctx.cost.latency_total(v.plan, v.policy, v.schedule, v.act_mode);
    j["bitops"] = ctx.cost.bitops(v.plan, v.policy, v.schedule, v.act_mode);
    j["drift_mse_holdout"] = drift_holdout;
    j["final_latent_mse"] = final_latent_mse(run.latents, ref);
    j["plan_fingerprint"] = fingerprint(v.plan);
    j["schedule"] = v.schedule;
    j["daq"] = daq_to_json(v.policy);
    j["act_mode"] = v.act_mode == ActMode::Dynamic ? "dynamic"
                    : v.act_mode == ActMode::Static ? "static"
                                                    : "none";
    write_json_file(dir / ("deploy_" + v.name + ".json"), j);
    write_steps_csv(dir / ("steps_" + v.name + ".csv"), run);
    write_json_file(dir / ("samples_" + v.name + ".json"), samples_to_json(run));
}

inline void run_deploy(const RunConfig& cfg, const fs::path& dir, const std::string& variant) {
    StageContext ctx = make_stage_context(cfg, dir, true);
    run_deploy(ctx, variant);
}

// ------------------------------------------------------------------ report

inline const std::vector<std::string>& deploy_variants() {
    static const std::vector<std::string> v{"full", "no-daq", "no-prune", "uniform-seed",
                                            "fp-baseline"};
    return v;
}

inline void run_report(const RunConfig& cfg, const fs::path& dir) {
    const json full = read_json_file(dir / "deploy_full.json");
    json variants = json::object();
    json warnings = json::array();
    for (const auto& name : deploy_variants()) {
        const fs::path p = dir / ("deploy_" + name + ".json");
        if (fs::exists(p)) {
            variants[name] = read_json_file(p);
        } else {
            variants[name] = nullptr;
            warnings.push_back("missing baseline run: " + name +
                               " (expected " + p.filename().string() + ")");
        }
    }

    const json plan_j = read_json_file(dir / "plan.json");
    write_bits_heatmap_csv(dir / "bits_heatmap.csv", bitplan_from_json(plan_j.at("bitplan")));

    std::string ablation = "variant,final_latent_mse,drift_mse_holdout,latency_units,bitops,"
                           "size_bytes,kept_steps\n";
    for (const auto& name : deploy_variants()) {
        if (variants[name].is_null()) continue;
        const json& r = variants[name];
        ablation += name + "," + fmt_double(r.at("final_latent_mse").get<double>()) + "," +
                    fmt_double(r.at("drift_mse_holdout").get<double>()) + "," +
                    fmt_double(r.at("latency_units").get<double>()) + "," +
                    fmt_double(r.at("bitops").get<double>()) + "," +
                    fmt_double(r.at("size_bytes").get<double>()) + "," +
                    std::to_string(r.at("kept_steps").get<int>()) + "\n";
    }
    write_text_file(dir / "ablation.csv", ablation);

    json rep;
    rep["sizes"] = {{"fp32_bytes", full.at("fp32_size_bytes")},
                    {"plan_bytes", full.at("size_bytes")},
                    {"compression", full.at("compression")}};
    rep["schedule"] = {{"kept", full.at("kept_steps")}, {"fraction", full.at("kept_fraction")}};
    json bl = variants.contains("fp-baseline") && !variants["fp-baseline"].is_null()
                  ? variants["fp-baseline"]
                  : json(nullptr);
    rep["bitops"] = {{"plan", full.at("bitops")},
                     {"fp_baseline", bl.is_null() ? json(nullptr) : bl.at("bitops")}};
    rep["latency_units"] = {{"plan", full.at("latency_units")},
                            {"fp_baseline", bl.is_null() ? json(nullptr) : bl.at("latency_units")}};
    rep["drift_mse_holdout"] = full.at("drift_mse_holdout");
    rep["final_latent_mse"] = full.at("final_latent_mse");
    rep["variants"] = variants;
    // Full-scale DiT-XL/2 reference point for orientation; desk-scale runs
    // report their own byte counts and never reproduce these numbers.
    rep["reference_full_scale"] = {{"fp_size_mb", 2575.42},
                                   {"reduced_size_mb", 397.24},
                                   {"ratio", "6.48x"}};
    rep["warnings"] = warnings;
    write_json_file(dir / "report.json", rep);
}

// --------------------------------------------------------------------- all

// The chained run shares one stage context; each stage still reads its
// predecessor's artifact files, so stage-by-stage invocations produce the
// same bytes.
inline void run_all(const RunConfig& cfg, const fs::path& dir) {
    StageContext ctx = make_stage_context(cfg, dir, false);
    run_calibrate(ctx);
    run_refine(ctx);
    run_daq_profile(ctx);
    run_prune(ctx);
    run_plan(ctx);
    for (const auto& v : deploy_variants()) run_deploy(ctx, v);
    run_report(cfg, dir);
}

}  // namespace diffpro
