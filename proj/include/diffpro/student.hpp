#pragma once

#include <map>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include "diffpro/bitplan.hpp"
#include "diffpro/core.hpp"
#include "diffpro/gptq.hpp"
#include "diffpro/model.hpp"
#include "diffpro/stats.hpp"

namespace diffpro {

// Shared packing context: inverse-Hessian factors are computed once per layer
// (they depend only on calibration inputs) and packed weights are cached per
// (layer, bits, group). Safe for concurrent candidate evaluation; duplicate
// packs compute identical results so races only waste work.
class QuantContext {
public:
    QuantContext(const TinyDiT& model, const CalibStats& stats, int max_hessian_rows = 0)
        : model_(model), stats_(stats), max_rows_(max_hessian_rows) {}

    const TinyDiT& model() const { return model_; }
    const CalibStats& stats() const { return stats_; }

    const GptqFactor& factor(const std::string& layer_id) const {
        {
            std::lock_guard<std::mutex> lk(mu_);
            auto it = factors_.find(layer_id);
            if (it != factors_.end()) return it->second;
        }
        const auto& raw = stats_.at(layer_id);
        Mat x = raw.reservoir;
        if (max_rows_ > 0 && x.rows > max_rows_) {
            x.rows = max_rows_;
            x.a.resize(static_cast<size_t>(max_rows_) * x.cols);
        }
        GptqFactor f = prepare_gptq_factor(x);
        std::lock_guard<std::mutex> lk(mu_);
        return factors_.emplace(layer_id, std::move(f)).first->second;
    }

    const GroupQuantWeights& packed(const std::string& layer_id, int bits, int group) const {
        const auto key = std::make_tuple(layer_id, bits, group);
        {
            std::lock_guard<std::mutex> lk(mu_);
            auto it = packs_.find(key);
            if (it != packs_.end()) return it->second;
        }
        GroupQuantWeights q =
            gptq_pack(model_.layer(layer_id).w, factor(layer_id), bits, group, layer_id);
        std::lock_guard<std::mutex> lk(mu_);
        return packs_.emplace(key, std::move(q)).first->second;
    }

private:
    const TinyDiT& model_;
    const CalibStats& stats_;
    int max_rows_;
    mutable std::mutex mu_;
    mutable std::map<std::string, GptqFactor> factors_;
    mutable std::map<std::tuple<std::string, int, int>, GroupQuantWeights> packs_;
};

// Instantiates the execution plan for a bit plan: GPTQ-packed codes for
// quantized layers, passthrough for FP layers, DAQ wiring per policy.
// Frozen and passthrough layers skip activation quantization.
inline ExecPlan build_exec_plan(const QuantContext& ctx, const BitPlan& plan,
                                const DaqPolicy& policy, ActMode act_mode = ActMode::Dynamic,
                                int static_bits = 8) {
    policy.validate();
    const auto& ids = ctx.model().layer_ids();
    std::string missing, extra;
    for (const auto& id : ids)
        if (!plan.layers.count(id)) missing += " " + id;
    for (const auto& [id, a] : plan.layers)
        if (!ctx.model().has_layer(id)) extra += " " + id;
    if (!missing.empty() || !extra.empty())
        throw InvalidArgument("plan/model layer mismatch; missing:[" + missing + " ] extra:[" +
                              extra + " ]");

    ExecPlan exec;
    exec.act_mode = act_mode;
    exec.policy = policy;
    exec.static_bits = static_bits;
    for (const auto& id : ids) {
        const auto& a = plan.at(id);
        LayerExec le;
        if (a.passthrough()) {
            le.passthrough = true;
        } else {
            le.passthrough = false;
            le.packed = ctx.packed(id, a.bits, a.group_size);
            le.act_quant = (act_mode != ActMode::None) && !a.frozen;
        }
        exec.layers[id] = std::move(le);
    }
    if (act_mode == ActMode::Static) {
        for (const auto& id : ids)
            exec.static_tau[id] =
                static_activation_tau(ctx.stats().at(id).reservoir, policy.percentile);
    }
    return exec;
}

// ------------------------------------------------------------ drift evaluator

// Fixed evaluation grid of (x_t, t, y) batches with teacher outputs cached
// once. Fidelity is a (n_batches, n_steps) prefix of the grid, so successive
// halving stages reuse the same cache.
class DriftEvaluator {
public:
    struct Fidelity {
        int n_batches = 1;
        int n_steps = 1;
    };

    DriftEvaluator(const TinyDiT& teacher, const NoiseSchedule& sched, int max_steps,
                   int max_batches, int batch_size, uint64_t seed)
        : teacher_(teacher), batch_size_(batch_size) {
        const int T = sched.T;
        steps_.resize(max_steps);
        for (int i = 0; i < max_steps; ++i)
            steps_[i] = static_cast<int>(std::lround(
                static_cast<double>(i) * (T - 1) / std::max(1, max_steps - 1)));
        samples_.resize(max_steps);
        cache_.resize(max_steps);
        for (int si = 0; si < max_steps; ++si) {
            samples_[si].resize(static_cast<size_t>(max_batches) * batch_size);
            cache_[si].resize(samples_[si].size());
            for (int k = 0; k < max_batches * batch_size; ++k) {
                Rng rng(derive_seed(seed, "drifteval", si, k));
                CalibSample s;
                const Latent x0 = Latent::random_normal(rng);
                const Latent eps = Latent::random_normal(rng);
                s.t = steps_[si];
                s.label = k % teacher.config().classes;
                s.x_t = add_noise(x0, s.t, eps, sched);
                samples_[si][k] = std::move(s);
                cache_[si][k] = teacher_.forward(samples_[si][k].x_t, samples_[si][k].t,
                                                 samples_[si][k].label);
            }
        }
    }

    int max_steps() const { return static_cast<int>(steps_.size()); }
    int max_samples_per_step() const {
        return samples_.empty() ? 0 : static_cast<int>(samples_[0].size());
    }

    // Eq.-style drift: mean squared L2 distance between student and teacher
    // noise predictions over the evaluated prefix of the grid.
    double drift(const ExecPlan& exec, Fidelity f, int workers = 1, bool use_cache = true) const {
        const int ns = std::min<int>(f.n_steps, static_cast<int>(steps_.size()));
        const int nk = std::min<int>(f.n_batches * batch_size_,
                                     static_cast<int>(samples_.empty() ? 0 : samples_[0].size()));
        if (ns < 1 || nk < 1) throw InvalidArgument("drift fidelity must be positive");
        std::vector<double> per_step(ns, 0.0);
        parallel_for(ns, workers, [&](int si) {
            double acc = 0.0;
            for (int k = 0; k < nk; ++k) {
                const auto& s = samples_[si][k];
                const Latent out = teacher_.forward(s.x_t, s.t, s.label, &exec);
                const Latent ref =
                    use_cache ? cache_[si][k] : teacher_.forward(s.x_t, s.t, s.label);
                acc += squared_l2(out, ref);
            }
            per_step[si] = acc / nk;
        });
        double total = 0.0;
        for (double v : per_step) total += v;
        return total / ns;
    }

private:
    const TinyDiT& teacher_;
    int batch_size_;
    std::vector<int> steps_;
    std::vector<std::vector<CalibSample>> samples_;  // [step][sample]
    std::vector<std::vector<Latent>> cache_;
};

}  // namespace diffpro
