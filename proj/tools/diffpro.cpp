// diffpro: training-free precision/schedule planning for a toy diffusion
// transformer. Subcommands mirror the pipeline stages; `all` chains them.

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "diffpro/pipeline.hpp"

using namespace diffpro;

namespace {

fs::path resolve_run_dir(const std::string& out_dir) {
    const char* root = std::getenv("DIFFPRO_RUN_ROOT");
    fs::path base = root ? fs::path(root) : fs::path(".");
    return base / out_dir;
}

struct CliFlags {
    std::string config_file;
    std::string out_dir = "run";
    std::optional<uint64_t> seed;
    std::optional<int> T;
    std::optional<int> calib_samples;
    std::optional<int> keep_k;
    std::optional<double> rho;
    std::optional<double> b_lat;
    std::optional<double> b_mem;
    std::optional<double> b_bitops;
    std::optional<int> workers;
    std::optional<int> n_images;
    std::optional<int> population;
    std::optional<int> elites;
    std::optional<int> generations;
    std::optional<double> mutation_rate;
    std::optional<double> percentile;
    std::optional<int> daq_bits;
    bool uniform_seed = false;
    std::string variant = "full";
};

void add_common_flags(CLI::App* cmd, CliFlags& f) {
    cmd->add_option("--config", f.config_file, "JSON config file; flags override its fields");
    cmd->add_option("--out", f.out_dir,
                    "run directory (relative to $DIFFPRO_RUN_ROOT when set)")
        ->default_val("run");
    cmd->add_option("--seed", f.seed, "global seed (default 7)");
    cmd->add_option("--timesteps", f.T, "schedule length T (default 100)");
    cmd->add_option("--calib-samples", f.calib_samples, "calibration samples (default 512)");
    cmd->add_option("--k", f.keep_k, "kept steps (default T/2)");
    cmd->add_option("--rho", f.rho, "protected tail fraction (default 0.2)");
    cmd->add_option("--b-lat", f.b_lat, "latency budget, absolute units");
    cmd->add_option("--b-mem", f.b_mem, "memory budget, bytes");
    cmd->add_option("--b-bitops", f.b_bitops, "bitops budget, absolute");
    cmd->add_option("--workers", f.workers, "evaluation worker threads (default 1)");
    cmd->add_option("--images", f.n_images, "images to sample at deploy (default 4)");
    cmd->add_option("--population", f.population, "search population (default 12)");
    cmd->add_option("--elites", f.elites, "search elites (default 4)");
    cmd->add_option("--generations", f.generations, "search generations (default 6)");
    cmd->add_option("--mutation-rate", f.mutation_rate, "per-layer mutation rate (default 0.10)");
    cmd->add_option("--percentile", f.percentile, "DAQ clipping percentile (default 99.9)");
    cmd->add_option("--daq-bits", f.daq_bits, "activation bits for all phase bins (default 8)");
    cmd->add_flag("--uniform-seed", f.uniform_seed,
                  "bypass tiering: seed every layer at W4/g288");
}

RunConfig build_config(const CliFlags& f, const fs::path& run_dir, bool prefer_run_dir_config) {
    RunConfig cfg;
    if (!f.config_file.empty()) {
        cfg = config_from_json(read_json_file(f.config_file));
    } else if (prefer_run_dir_config && fs::exists(run_dir / "effective_config.json")) {
        cfg = config_from_json(read_json_file(run_dir / "effective_config.json"));
    }
    if (f.seed) cfg.seed = *f.seed;
    if (f.T) cfg.T = *f.T;
    if (f.calib_samples) cfg.calib_samples = *f.calib_samples;
    if (f.keep_k) cfg.keep_k = *f.keep_k;
    if (f.rho) cfg.rho = *f.rho;
    if (f.b_lat) cfg.b_lat_abs = *f.b_lat;
    if (f.b_mem) cfg.b_mem_abs = *f.b_mem;
    if (f.b_bitops) cfg.b_bitops_abs = *f.b_bitops;
    if (f.workers) cfg.workers = *f.workers;
    if (f.n_images) cfg.n_images = *f.n_images;
    if (f.population) cfg.search.population = *f.population;
    if (f.elites) cfg.search.elites = *f.elites;
    if (f.generations) cfg.search.generations = *f.generations;
    if (f.mutation_rate) cfg.search.mutation_rate = *f.mutation_rate;
    if (f.percentile) cfg.daq.percentile = *f.percentile;
    if (f.daq_bits) {
        cfg.daq.bits_early = *f.daq_bits;
        cfg.daq.bits_mid = *f.daq_bits;
        cfg.daq.bits_late = *f.daq_bits;
    }
    if (f.uniform_seed) cfg.uniform_seed = true;
    cfg.out_dir = f.out_dir;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"training-free bit/schedule planning over a toy diffusion transformer"};
    app.require_subcommand(1);

    struct Sub {
        CLI::App* cmd;
        CliFlags flags;
    };
    std::map<std::string, Sub> subs;
    for (const char* name : {"calibrate", "refine", "daq-profile", "prune", "plan", "deploy",
                             "report", "all"}) {
        Sub& s = subs[name];  // options bind to the in-map object
        s.cmd = app.add_subcommand(name, std::string("run the ") + name + " stage");
        add_common_flags(s.cmd, s.flags);
        if (std::string(name) == "deploy")
            s.cmd->add_option("--variant", s.flags.variant,
                              "full | no-daq | no-prune | uniform-seed | fp-baseline")
                ->default_val("full");
    }

    CLI11_PARSE(app, argc, argv);

    try {
        for (auto& [name, s] : subs) {
            if (!s.cmd->parsed()) continue;
            const fs::path dir = resolve_run_dir(s.flags.out_dir);
            const bool is_calibrate_like = (name == "calibrate" || name == "all");
            RunConfig cfg = build_config(s.flags, dir, !is_calibrate_like);
            cfg.validate();
            fs::create_directories(dir);
            if (name == "calibrate") {
                run_calibrate(cfg, dir);
            } else if (name == "refine") {
                run_refine(cfg, dir);
            } else if (name == "daq-profile") {
                run_daq_profile(cfg, dir);
            } else if (name == "prune") {
                run_prune(cfg, dir);
            } else if (name == "plan") {
                run_plan(cfg, dir);
            } else if (name == "deploy") {
                run_deploy(cfg, dir, s.flags.variant);
            } else if (name == "report") {
                run_report(cfg, dir);
            } else if (name == "all") {
                run_all(cfg, dir);
            }
            std::cout << name << ": ok -> " << dir.string() << "\n";
        }
        return 0;
    } catch (const BudgetInfeasible& e) {
        std::cerr << "budget-infeasible: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
