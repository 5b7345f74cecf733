#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "diffpro/bitplan.hpp"
#include "diffpro/core.hpp"
#include "diffpro/stats.hpp"
#include "diffpro/student.hpp"

namespace diffpro {

enum class Tier { Low = 0, Mid = 1, High = 2 };

inline const char* tier_name(Tier t) {
    switch (t) {
        case Tier::Low: return "low";
        case Tier::Mid: return "mid";
        default: return "high";
    }
}

struct SensitivitySignals {
    double sx = std::numeric_limits<double>::quiet_NaN();  // blended composite
    double sd = std::numeric_limits<double>::quiet_NaN();  // leave-one-quantized drift
    double sk = std::numeric_limits<double>::quiet_NaN();  // SRC slope
    double sn = std::numeric_limits<double>::quiet_NaN();  // sigma^2 * ||Jac||_F^2
};

// Weighted composite with the fixed blend 0.4/0.2/0.25/0.15.
inline double composite_score(const SensitivitySignals& s) {
    if (std::isnan(s.sx) || std::isnan(s.sd) || std::isnan(s.sk) || std::isnan(s.sn))
        throw InvalidArgument("composite_score: missing signal");
    return 0.4 * s.sx + 0.2 * s.sd + 0.25 * s.sk + 0.15 * s.sn;
}

struct LayerStats {
    std::string layer_id;
    double h_diag_mean = 0.0;
    int k95 = 1;
    int d = 0;
    double spill = 0.0;
    std::vector<std::pair<double, double>> group_envelopes;
    double s_pca = 0.0;
    double score = 0.0;      // Eq-2 blend
    double tvi = 0.0;        // temporal variability (std over t of activation std)
    SensitivitySignals signals;
    double composite = 0.0;  // S*
    Tier tier = Tier::Mid;
    bool frozen = false;
    int knee_bits = 4;
    int knee_group = 288;
};

// ----------------------------------------------------------------- src sweep

struct SrcSweepResult {
    double slope_raw = 0.0;  // drift decrease per added bit, before normalization
    int knee_bits = 0;
    int knee_group = 0;
    std::map<std::pair<int, int>, double> grid_drift;
};

// Sweeps a small (bits, group) grid on a single layer (all other layers kept
// full precision, activations untouched) and reads off the drift/bit slope
// and the knee: the cheapest point within 1.1x of the best drift. Cheapest
// means fewest bits, then coarsest group.
inline SrcSweepResult src_sweep(const QuantContext& ctx, const DriftEvaluator& eval,
                                const std::string& layer_id,
                                const std::vector<int>& bit_grid = {4, 8},
                                const std::vector<int>& group_grid = {64, 288},
                                DriftEvaluator::Fidelity fid = {2, 4}, int workers = 1) {
    SrcSweepResult res;
    const auto& ids = ctx.model().layer_ids();
    for (int g : group_grid)
        for (int b : bit_grid) {
            BitPlan plan = BitPlan::uniform(ids, kFp32Bits, 128);
            plan.at(layer_id) = LayerAssignment{b, g, false};
            const ExecPlan exec = build_exec_plan(ctx, plan, DaqPolicy{}, ActMode::None);
            res.grid_drift[{b, g}] = eval.drift(exec, fid, workers);
        }
    // two-point slope averaged over groups
    const int b_lo = *std::min_element(bit_grid.begin(), bit_grid.end());
    const int b_hi = *std::max_element(bit_grid.begin(), bit_grid.end());
    double slope = 0.0;
    for (int g : group_grid)
        slope += (res.grid_drift[{b_lo, g}] - res.grid_drift[{b_hi, g}]) / (b_hi - b_lo);
    res.slope_raw = slope / group_grid.size();

    double best = std::numeric_limits<double>::infinity();
    for (const auto& [k, v] : res.grid_drift) best = std::min(best, v);
    std::vector<int> bits_asc = bit_grid;
    std::sort(bits_asc.begin(), bits_asc.end());
    res.knee_bits = 0;
    for (int b : bits_asc) {
        std::vector<int> groups_desc = group_grid;
        std::sort(groups_desc.begin(), groups_desc.end(), std::greater<int>());
        for (int g : groups_desc) {
            if (res.grid_drift[{b, g}] <= 1.1 * best) {
                res.knee_bits = b;
                res.knee_group = g;
                return res;
            }
        }
    }
    // unreachable: the argmin itself satisfies the bound
    res.knee_bits = b_hi;
    res.knee_group = group_grid.front();
    return res;
}

// -------------------------------------------------------------- noise probe

// sigma^2 = Delta^2 / 12 with Delta the mean group scale at (bits, group);
// ||Jac||_F^2 estimated with k seeded gaussian probes of the model output
// against a perturbation of this layer's output.
inline double noise_estimate_raw(const TinyDiT& model, const NoiseSchedule& sched,
                                 const std::string& layer_id, int bits, int group,
                                 uint64_t seed, int probes = 8, double eps_fd = 1e-3) {
    const auto& layer = model.layer(layer_id);
    const GroupQuantWeights q = quantize_grouped(layer.w, bits, group, layer_id);
    double delta = 0.0;
    for (double s : q.scales) delta += s;
    delta /= static_cast<double>(q.scales.size());
    const double sigma2 = delta * delta / 12.0;

    Rng rng(derive_seed(seed, "noiseprobe", fnv1a64(layer_id)));
    const Latent x0 = Latent::random_normal(rng);
    const Latent eps = Latent::random_normal(rng);
    const int t = sched.T / 2;
    const Latent x_t = add_noise(x0, t, eps, sched);
    const int label = 0;
    const Latent base = model.forward(x_t, t, label);

    OutputPerturbation pert;
    pert.layer_id = layer_id;
    pert.delta = Mat(layer.token_rows, layer.out_features());
    double jac = 0.0;
    for (int p = 0; p < probes; ++p) {
        for (double& v : pert.delta.a) v = eps_fd * rng.normal();
        const Latent out = model.forward(x_t, t, label, nullptr, nullptr, &pert);
        jac += squared_l2(out, base) / (eps_fd * eps_fd);
    }
    jac /= probes;
    return sigma2 * jac;
}

// -------------------------------------------------------------- tier + seed

struct TierResult {
    std::vector<Tier> tiers;        // per layer, in input order
    std::vector<bool> frozen;
    BitPlan seed;
};

// Tertile split by score (ties broken by layer order): low -> W4/g288,
// mid -> W8/g128, high -> FP16/g64. The top 10% by score are frozen.
// Fewer than 3 layers: everything lands in mid.
inline TierResult tier_and_seed(const std::vector<std::string>& ids,
                                const std::vector<double>& scores, double freeze_fraction = 0.10) {
    if (ids.size() != scores.size()) throw InvalidArgument("tier_and_seed: size mismatch");
    const int n = static_cast<int>(ids.size());
    TierResult res;
    res.tiers.assign(n, Tier::Mid);
    res.frozen.assign(n, false);
    for (double s : scores)
        if (!std::isfinite(s)) throw InvalidArgument("tier_and_seed: non-finite score");

    if (n >= 3) {
        std::vector<int> idx(n);
        for (int i = 0; i < n; ++i) idx[i] = i;
        std::sort(idx.begin(), idx.end(), [&](int a, int b) {
            if (scores[a] != scores[b]) return scores[a] < scores[b];
            return a < b;
        });
        const int n_low = (n + 2) / 3;
        const int n_mid = (n + 1) / 3;
        for (int r = 0; r < n; ++r)
            res.tiers[idx[r]] = r < n_low ? Tier::Low : (r < n_low + n_mid ? Tier::Mid : Tier::High);
        const int n_frozen = static_cast<int>(std::ceil(freeze_fraction * n));
        for (int r = 0; r < n_frozen && r < n; ++r) res.frozen[idx[n - 1 - r]] = true;
    }

    for (int i = 0; i < n; ++i) {
        LayerAssignment a;
        switch (res.tiers[i]) {
            case Tier::Low: a = {4, 288, false}; break;
            case Tier::Mid: a = {8, 128, false}; break;
            case Tier::High: a = {kFp16Bits, 64, false}; break;
        }
        a.frozen = res.frozen[i];
        res.seed.layers[ids[i]] = a;
    }
    return res;
}

// ------------------------------------------------------- full scoring driver

struct SensitivityConfig {
    double alpha = 0.5;              // Eq-2 blend
    int pca_cap = 128;
    double pca_threshold = 0.95;
    std::vector<int> sweep_bits{4, 8};
    std::vector<int> sweep_groups{64, 288};
    DriftEvaluator::Fidelity sweep_fidelity{2, 4};
    int sd_bits = 4;                 // leave-one-quantized reference point
    int sd_group = 288;
    int noise_ref_bits = 4;          // reference quantization for Sn
    int noise_ref_group = 128;
    int noise_probes = 8;
    double freeze_fraction = 0.10;
    bool tier_by_composite = true;   // false: tier by the Eq-2 score alone
    bool uniform_seed = false;       // bypass tiering: W4/g288 everywhere
    double tvi_weight = 0.2;         // share of temporal variability inside Sx
};

struct SensitivityResult {
    std::vector<LayerStats> layers;  // model layer order
    TierResult tiers;
};

inline SensitivityResult compute_sensitivity(const QuantContext& ctx, const NoiseSchedule& sched,
                                             const DriftEvaluator& eval,
                                             const SensitivityConfig& cfg, uint64_t seed,
                                             int workers = 1) {
    const TinyDiT& model = ctx.model();
    const auto& ids = model.layer_ids();
    const int n = static_cast<int>(ids.size());
    std::vector<LayerStats> ls(n);

    std::vector<double> h_means(n), tvi_raw(n);
    for (int i = 0; i < n; ++i) {
        const auto& raw = ctx.stats().at(ids[i]);
        ls[i].layer_id = ids[i];
        ls[i].d = raw.in_features;
        ls[i].h_diag_mean = raw.h_diag_mean();
        ls[i].group_envelopes = raw.envelopes;
        h_means[i] = ls[i].h_diag_mean;
        // temporal variability: dispersion of the per-timestep activation std
        double m = 0.0, m2 = 0.0;
        int cnt = 0;
        for (const auto& [t, s] : raw.std_per_timestep) {
            m += s;
            m2 += s * s;
            ++cnt;
        }
        if (cnt > 0) {
            m /= cnt;
            tvi_raw[i] = std::sqrt(std::max(0.0, m2 / cnt - m * m));
        }
        const PcaRank pr = pca_rank(raw.reservoir, cfg.pca_cap, cfg.pca_threshold);
        ls[i].k95 = pr.k95;
        ls[i].spill = pr.spill;
        ls[i].s_pca = pca_sensitivity(pr.k95, raw.in_features, pr.spill);
    }

    const std::vector<double> h_norm = min_max_normalize(h_means);
    const std::vector<double> tvi_norm = min_max_normalize(tvi_raw);
    for (int i = 0; i < n; ++i) {
        ls[i].score = combined_score(ls[i].s_pca, h_norm[i], cfg.alpha);
        ls[i].tvi = tvi_norm[i];
    }

    // Sd: drift with only layer i quantized at the low-bit reference
    std::vector<double> sd_raw(n), sk_raw(n), sn_raw(n);
    std::vector<SrcSweepResult> sweeps(n);
    parallel_for(n, workers, [&](int i) {
        BitPlan plan = BitPlan::uniform(ids, kFp32Bits, 128);
        plan.at(ids[i]) = LayerAssignment{cfg.sd_bits, cfg.sd_group, false};
        const ExecPlan exec = build_exec_plan(ctx, plan, DaqPolicy{}, ActMode::None);
        sd_raw[i] = eval.drift(exec, cfg.sweep_fidelity, 1);
        sweeps[i] = src_sweep(ctx, eval, ids[i], cfg.sweep_bits, cfg.sweep_groups,
                              cfg.sweep_fidelity, 1);
        sk_raw[i] = sweeps[i].slope_raw;
        sn_raw[i] = noise_estimate_raw(model, sched, ids[i], cfg.noise_ref_bits,
                                       cfg.noise_ref_group, seed, cfg.noise_probes);
    });

    const std::vector<double> sd_n = min_max_normalize(sd_raw);
    const std::vector<double> sk_n = min_max_normalize(sk_raw);
    const std::vector<double> sn_n = min_max_normalize(sn_raw);
    std::vector<double> tier_scores(n);
    for (int i = 0; i < n; ++i) {
        ls[i].signals.sx = (1.0 - cfg.tvi_weight) * ls[i].score + cfg.tvi_weight * ls[i].tvi;
        ls[i].signals.sd = sd_n[i];
        ls[i].signals.sk = sk_n[i];
        ls[i].signals.sn = sn_n[i];
        ls[i].composite = composite_score(ls[i].signals);
        ls[i].knee_bits = sweeps[i].knee_bits;
        ls[i].knee_group = sweeps[i].knee_group;
        tier_scores[i] = cfg.tier_by_composite ? ls[i].composite : ls[i].score;
    }

    SensitivityResult out;
    if (cfg.uniform_seed) {
        out.tiers.tiers.assign(n, Tier::Low);
        out.tiers.frozen.assign(n, false);
        out.tiers.seed = BitPlan::uniform(ids, 4, 288);
    } else {
        out.tiers = tier_and_seed(ids, tier_scores, cfg.freeze_fraction);
    }
    for (int i = 0; i < n; ++i) {
        ls[i].tier = out.tiers.tiers[i];
        ls[i].frozen = out.tiers.frozen[i];
    }
    out.layers = std::move(ls);
    return out;
}

}  // namespace diffpro
