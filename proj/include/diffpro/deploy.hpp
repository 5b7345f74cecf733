#pragma once

#include <string>
#include <vector>

#include "diffpro/core.hpp"
#include "diffpro/model.hpp"
#include "diffpro/pruner.hpp"
#include "diffpro/schedule.hpp"

namespace diffpro {

struct StepLogEntry {
    int t = 0;
    const char* bin = "";
    int a_bits = 0;
    double mean_tau = 0.0;
};

struct SampleResult {
    std::vector<Latent> latents;                     // one per image
    std::vector<std::vector<StepLogEntry>> step_log; // per image, reverse order of kept steps
};

// Phase-B sampling: DDIM over the kept steps in reverse, activation bits set
// per phase bin at every step. Runs exactly |kept| forwards per image.
inline SampleResult sample(const TinyDiT& model, const ExecPlan& exec,
                           const std::vector<int>& kept, const NoiseSchedule& sched,
                           int n_images, uint64_t seed, int workers = 1) {
    if (kept.empty()) throw InvalidArgument("sample: empty schedule");
    std::vector<int> steps = kept;
    std::sort(steps.begin(), steps.end());
    SampleResult res;
    res.latents.resize(n_images);
    res.step_log.resize(n_images);
    parallel_for(n_images, workers, [&](int img) {
        Rng rng(derive_seed(seed, "sample", img));
        Latent x = Latent::random_normal(rng);
        const int label = img % model.config().classes;
        std::vector<StepLogEntry> log;
        for (int i = static_cast<int>(steps.size()) - 1; i >= 0; --i) {
            const int t = steps[i];
            const int t_prev = i > 0 ? steps[i - 1] : -1;
            TauTrace trace;
            Latent eps_hat;
            try {
                eps_hat = model.forward(x, t, label, &exec, &trace);
            } catch (const NumericFailure& e) {
                res.step_log[img] = std::move(log);  // flush partial log
                throw NumericFailure(std::string(e.what()) + " during sampling at t=" +
                                         std::to_string(t),
                                     e.where);
            }
            StepLogEntry entry;
            entry.t = t;
            const PhaseBin bin = phase_bin(t, model.config().T, exec.policy.boundary_early,
                                           exec.policy.boundary_mid);
            entry.bin = phase_bin_name(bin);
            switch (exec.act_mode) {
                case ActMode::Dynamic: entry.a_bits = exec.policy.bits_for(bin); break;
                case ActMode::Static: entry.a_bits = exec.static_bits; break;
                default: entry.a_bits = 32; break;
            }
            entry.mean_tau = trace.mean();
            log.push_back(entry);
            x = ddim_step(x, eps_hat, t, t_prev, sched);
        }
        res.latents[img] = x;
        res.step_log[img] = std::move(log);
    });
    return res;
}

// Teacher reference trajectory: full-precision DDIM over the complete grid
// from the same per-image starting noise.
inline std::vector<Latent> teacher_reference(const TinyDiT& model, const NoiseSchedule& sched,
                                             int n_images, uint64_t seed, int workers = 1) {
    std::vector<int> all(sched.T);
    for (int t = 0; t < sched.T; ++t) all[t] = t;
    ExecPlan fp;  // empty layer map: every layer passes through
    return sample(model, fp, all, sched, n_images, seed, workers).latents;
}

// Mean per-element squared error between paired latent sets.
inline double final_latent_mse(const std::vector<Latent>& a, const std::vector<Latent>& b) {
    if (a.size() != b.size() || a.empty())
        throw InvalidArgument("final_latent_mse: size mismatch or empty");
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += squared_l2(a[i], b[i]) / Latent::kSize;
    return acc / a.size();
}

}  // namespace diffpro
