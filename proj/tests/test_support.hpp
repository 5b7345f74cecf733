#pragma once

// Shared helpers for the planner tests and the acceptance suite: random
// micro-instances with an additive drift model, plus the exhaustive
// enumeration oracle the greedy planner is checked against.

#include <array>
#include <cmath>
#include <limits>
#include <vector>

#include "diffpro/model.hpp"
#include "diffpro/planner.hpp"
#include "diffpro/search.hpp"

namespace diffpro::testsupport {

// Independent float pipeline: the same architecture orchestrated in test
// code, with dequantized weights and DAQ applied as floating v_hat values.
// The only difference from the student path is float GEMM vs integer GEMM.
inline Latent float_pipeline_forward(const TinyDiT& m, const ExecPlan& exec, const Latent& x_t,
                                     int t, int label) {
    const auto& cfg = m.config();
    auto run_linear = [&](const std::string& id, const Mat& x) {
        const auto& l = m.layer(id);
        const LayerExec* le = exec.find(id);
        if (!le || le->passthrough) return matmul_wt(x, l.w, l.bias);
        Mat xq = x;
        if (le->act_quant && exec.act_mode == ActMode::Dynamic) {
            const PhaseBin bin =
                phase_bin(t, cfg.T, exec.policy.boundary_early, exec.policy.boundary_mid);
            const int bits = exec.policy.bits_for(bin);
            for (int r = 0; r < x.rows; ++r) {
                for (int g0 = 0; g0 < x.cols; g0 += exec.policy.group_size) {
                    const int g1 = std::min(x.cols, g0 + exec.policy.group_size);
                    std::vector<double> grp(x.row(r) + g0, x.row(r) + g1);
                    const DaqResult dr = daq_quantize(grp, exec.policy.percentile, bits);
                    for (int c = g0; c < g1; ++c) xq(r, c) = dr.v_hat[c - g0];
                }
            }
        }
        return matmul_wt(xq, dequantize(le->packed), l.bias);
    };

    Mat tok = m.patchify(x_t);
    tok = run_linear("patch_embed", tok);
    Mat temb = m.time_embedding(t);
    temb = run_linear("time_mlp.fc1", temb);
    TinyDiT::silu_inplace(temb);
    temb = run_linear("time_mlp.fc2", temb);
    for (int i = 0; i < tok.rows; ++i)
        for (int c = 0; c < cfg.hidden; ++c)
            tok(i, c) += temb(0, c) + m.class_embed_raw()(label, c);
    const int head_dim = cfg.hidden / cfg.heads;
    for (int b = 0; b < cfg.blocks; ++b) {
        const std::string pfx = "block" + std::to_string(b) + ".";
        Mat h = TinyDiT::layer_norm(tok, m.norms_raw()[2 * b]);
        Mat qkv = run_linear(pfx + "qkv", h);
        Mat attn = TinyDiT::attention(qkv, head_dim);
        attn = run_linear(pfx + "attn_proj", attn);
        for (size_t i = 0; i < tok.a.size(); ++i) tok.a[i] += attn.a[i];
        h = TinyDiT::layer_norm(tok, m.norms_raw()[2 * b + 1]);
        Mat m1 = run_linear(pfx + "mlp_fc1", h);
        TinyDiT::gelu_inplace(m1);
        Mat m2 = run_linear(pfx + "mlp_fc2", m1);
        for (size_t i = 0; i < tok.a.size(); ++i) tok.a[i] += m2.a[i];
    }
    Mat h = TinyDiT::layer_norm(tok, m.norms_raw().back());
    Mat out = run_linear("final_proj", h);
    return m.unpatchify(out);
}

struct MicroInstance {
    PlannerInstance inst;
    // additive quality model: downgrading layer l to option o costs harm[l][o]
    // (0 at the max option), removing step t costs its drift d_e(t)
    std::vector<std::vector<double>> harm;

    double drift_of(const std::vector<int>& opt, uint32_t removed_mask) const {
        double d = 0.0;
        for (size_t l = 0; l < inst.layers.size(); ++l) d += harm[l][opt[l]];
        for (size_t s = 0; s < inst.steps.size(); ++s)
            if (removed_mask & (1u << s)) d += inst.steps[s].d_e;
        return d;
    }

    double lat_of(const std::vector<int>& opt, uint32_t removed_mask) const {
        double c = 0.0;
        for (size_t s = 0; s < inst.steps.size(); ++s) {
            if (removed_mask & (1u << s)) continue;
            for (size_t l = 0; l < inst.layers.size(); ++l)
                c += inst.layers[l].lat[opt[l]][inst.steps[s].bin];
        }
        return c;
    }

    double mem_of(const std::vector<int>& opt) const {
        double c = inst.base_mem;
        for (size_t l = 0; l < inst.layers.size(); ++l) c += inst.layers[l].mem[opt[l]];
        return c;
    }
};

inline MicroInstance make_micro_instance(uint64_t seed, int n_layers = 4, int n_steps = 6,
                                         double rho = 0.2) {
    Rng rng(seed);
    MicroInstance mi;
    const std::vector<int> bits{4, 8, 16};
    for (int l = 0; l < n_layers; ++l) {
        PlannerInstance::Layer layer;
        layer.id = "L" + std::to_string(l);
        layer.bit_options = bits;
        layer.s_m = 0.05 + rng.uniform01();
        const double macs = 1.0 + 4.0 * rng.uniform01();
        for (int b : bits) {
            std::array<double, 3> lat{};
            for (int bin = 0; bin < 3; ++bin) lat[bin] = macs * b * (1.0 + 0.1 * bin);
            layer.lat.push_back(lat);
            layer.mem.push_back(macs * b);
        }
        mi.inst.layers.push_back(layer);
        // harm decreasing in precision, zero at max bits. The greedy compares
        // step scores (per unit drift) against bit scores (per unit s_M), so
        // its approximation guarantee presumes s_M estimates the drift cost
        // of a one-step downgrade; model that with +-30% multiplicative noise.
        std::vector<double> h(bits.size(), 0.0);
        h[1] = layer.s_m * (0.7 + 0.6 * rng.uniform01());
        h[0] = h[1] + layer.s_m * (0.7 + 0.6 * rng.uniform01());
        mi.harm.push_back(h);
    }
    for (int t = 0; t < n_steps; ++t) {
        PlannerInstance::Step s;
        s.t = t;
        s.d_e = 0.02 + 0.5 * rng.uniform01();
        s.bin = t < n_steps / 3 ? 0 : (t < 2 * n_steps / 3 ? 1 : 2);
        s.tail = static_cast<double>(t) / n_steps >= 1.0 - rho;
        mi.inst.steps.push_back(s);
    }
    mi.inst.base_mem = 1.0;

    // budgets between the min and max achievable so that most instances are
    // feasible but rarely trivially so
    std::vector<int> min_opt(n_layers, 0), max_opt(n_layers, 2);
    uint32_t all_removed = 0;
    for (size_t s = 0; s < mi.inst.steps.size(); ++s)
        if (!mi.inst.steps[s].tail) all_removed |= 1u << s;
    const double lat_min = mi.lat_of(min_opt, all_removed);
    const double lat_max = mi.lat_of(max_opt, 0);
    const double mem_min = mi.mem_of(min_opt);
    const double mem_max = mi.mem_of(max_opt);
    mi.inst.b_lat = lat_min + (0.05 + 0.9 * rng.uniform01()) * (lat_max - lat_min);
    mi.inst.b_mem = mem_min + (0.05 + 0.9 * rng.uniform01()) * (mem_max - mem_min);
    return mi;
}

struct ExhaustiveBest {
    bool feasible = false;
    double best_score = std::numeric_limits<double>::infinity();
};

// Enumerates every (bit assignment, removed-step subset) respecting the tail,
// scoring with the additive drift model (penalties vanish on feasible plans).
inline ExhaustiveBest exhaustive_best(const MicroInstance& mi) {
    const int nl = static_cast<int>(mi.inst.layers.size());
    const int ns = static_cast<int>(mi.inst.steps.size());
    std::vector<int> prunable;
    for (int s = 0; s < ns; ++s)
        if (!mi.inst.steps[s].tail) prunable.push_back(s);
    ExhaustiveBest out;
    std::vector<int> opt(nl, 0);
    const int n_opts = static_cast<int>(mi.inst.layers[0].bit_options.size());
    const long combos = static_cast<long>(std::pow(n_opts, nl));
    for (long code = 0; code < combos; ++code) {
        long c = code;
        for (int l = 0; l < nl; ++l) {
            opt[l] = static_cast<int>(c % n_opts);
            c /= n_opts;
        }
        for (uint32_t sub = 0; sub < (1u << prunable.size()); ++sub) {
            uint32_t removed = 0;
            for (size_t i = 0; i < prunable.size(); ++i)
                if (sub & (1u << i)) removed |= 1u << prunable[i];
            if (mi.lat_of(opt, removed) > mi.inst.b_lat) continue;
            if (mi.mem_of(opt) > mi.inst.b_mem) continue;
            out.feasible = true;
            out.best_score = std::min(out.best_score, mi.drift_of(opt, removed));
        }
    }
    return out;
}

inline double greedy_score(const MicroInstance& mi, const PlannerResult& res) {
    uint32_t removed = 0;
    for (size_t s = 0; s < mi.inst.steps.size(); ++s) {
        const int t = mi.inst.steps[s].t;
        if (!std::binary_search(res.kept_steps.begin(), res.kept_steps.end(), t))
            removed |= 1u << s;
    }
    return mi.drift_of(res.option_index, removed);
}

}  // namespace diffpro::testsupport
