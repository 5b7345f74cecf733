#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <string>
#include <vector>

#include "diffpro/bitplan.hpp"
#include "diffpro/core.hpp"
#include "diffpro/cost.hpp"
#include "diffpro/pruner.hpp"

namespace diffpro {

// Abstract planning instance: layers with ordered bit options and per-option
// costs (latency split by phase bin, memory), steps with drift and bin.
struct PlannerInstance {
    struct Layer {
        std::string id;
        std::vector<int> bit_options;            // ascending precision
        std::vector<std::array<double, 3>> lat;  // per option, per phase bin
        std::vector<double> mem;                 // per option
        double s_m = 0.0;                        // sensitivity
    };
    struct Step {
        int t = 0;
        double d_e = 0.0;
        int bin = 0;
        bool tail = false;
    };

    std::vector<Layer> layers;
    std::vector<Step> steps;  // ascending t
    double base_mem = 0.0;    // plan-independent bytes
    double b_lat = 0.0;
    double b_mem = 0.0;
    double eps = 1e-8;
};

struct PlannerMove {
    enum class Kind { Step, Bit } kind;
    int t = -1;              // step removals
    std::string layer;       // bit downgrades
    int from_bits = 0;
    int to_bits = 0;
    double score = 0.0;
    double c_lat_after = 0.0;
    double c_mem_after = 0.0;
    bool reverted = false;   // undone by the reverse-delete pass
};

struct PlannerResult {
    std::vector<int> option_index;  // per layer, index into bit_options
    std::vector<int> kept_steps;    // ascending t
    std::vector<PlannerMove> moves;
    double c_lat = 0.0;
    double c_mem = 0.0;
    double init_lat = 0.0;
    double init_mem = 0.0;
};

// Phase-A budgeted planning: start at max bits and the full schedule, then
// greedily apply the better of (remove the lowest-drift prunable step) and
// (downgrade the bit move with the best latency-per-sensitivity score
// S_bit = dC_lat/(eps + s_M)) until both budgets hold. Step removals cannot
// reduce memory, so while the memory budget is violated only bit moves are
// eligible. Two refinements keep the result near the exhaustive optimum:
// when a single move closes the remaining gap the minimum-harm closer is
// taken instead of the best-ratio move, and a reverse-delete pass afterwards
// undoes moves that later moves made redundant.
inline PlannerResult joint_budget_plan(const PlannerInstance& inst) {
    if (inst.b_lat <= 0.0 || inst.b_mem <= 0.0)
        throw InvalidArgument("planner budgets must be positive");
    const int nl = static_cast<int>(inst.layers.size());

    std::vector<int> opt(nl);
    for (int i = 0; i < nl; ++i) {
        if (inst.layers[i].bit_options.empty())
            throw InvalidArgument("layer without bit options: " + inst.layers[i].id);
        opt[i] = static_cast<int>(inst.layers[i].bit_options.size()) - 1;
    }
    std::vector<bool> kept(inst.steps.size(), true);

    auto step_cost = [&](int si) {
        double c = 0.0;
        const int bin = inst.steps[si].bin;
        for (int i = 0; i < nl; ++i) c += inst.layers[i].lat[opt[i]][bin];
        return c;
    };
    auto total_lat = [&]() {
        double c = 0.0;
        for (size_t si = 0; si < inst.steps.size(); ++si)
            if (kept[si]) c += step_cost(static_cast<int>(si));
        return c;
    };
    auto total_mem = [&]() {
        double c = inst.base_mem;
        for (int i = 0; i < nl; ++i) c += inst.layers[i].mem[opt[i]];
        return c;
    };
    auto bit_lat_saving = [&](int li) {
        double dlat = 0.0;
        for (size_t si = 0; si < inst.steps.size(); ++si)
            if (kept[si]) {
                const int bin = inst.steps[si].bin;
                dlat += inst.layers[li].lat[opt[li]][bin] - inst.layers[li].lat[opt[li] - 1][bin];
            }
        return dlat;
    };

    // prunable steps, lowest drift first; ties toward smaller t so surviving
    // equal-drift steps are the later ones
    std::vector<int> prunable;
    for (size_t si = 0; si < inst.steps.size(); ++si)
        if (!inst.steps[si].tail) prunable.push_back(static_cast<int>(si));
    std::sort(prunable.begin(), prunable.end(), [&](int a, int b) {
        if (inst.steps[a].d_e != inst.steps[b].d_e) return inst.steps[a].d_e < inst.steps[b].d_e;
        return inst.steps[a].t < inst.steps[b].t;
    });
    size_t next_prunable = 0;

    PlannerResult res;
    res.init_lat = total_lat();
    res.init_mem = total_mem();
    double c_lat = res.init_lat;
    double c_mem = res.init_mem;

    // internal trace for the reverse-delete pass
    struct Applied {
        bool is_step;
        int step_si = -1;
        int layer = -1;
    };
    std::vector<Applied> applied;

    auto apply_step = [&](int si, double score) {
        kept[si] = false;
        PlannerMove mv;
        mv.kind = PlannerMove::Kind::Step;
        mv.t = inst.steps[si].t;
        mv.score = score;
        c_lat = total_lat();
        c_mem = total_mem();
        mv.c_lat_after = c_lat;
        mv.c_mem_after = c_mem;
        res.moves.push_back(std::move(mv));
        applied.push_back({true, si, -1});
    };
    auto apply_bit = [&](int li, double score) {
        PlannerMove mv;
        mv.kind = PlannerMove::Kind::Bit;
        mv.layer = inst.layers[li].id;
        mv.from_bits = inst.layers[li].bit_options[opt[li]];
        mv.to_bits = inst.layers[li].bit_options[opt[li] - 1];
        mv.score = score;
        opt[li] -= 1;
        c_lat = total_lat();
        c_mem = total_mem();
        mv.c_lat_after = c_lat;
        mv.c_mem_after = c_mem;
        res.moves.push_back(std::move(mv));
        applied.push_back({false, -1, li});
    };

    while (c_lat > inst.b_lat || c_mem > inst.b_mem) {
        const bool mem_bound = c_mem > inst.b_mem;

        // endgame: if one move reaches feasibility, take the least harmful
        // closer (step harm = its drift, bit harm = the layer sensitivity)
        int close_step = -1, close_bit = -1;
        double close_harm = std::numeric_limits<double>::infinity();
        if (!mem_bound && next_prunable < prunable.size()) {
            const int si = prunable[next_prunable];
            if (c_lat - step_cost(si) <= inst.b_lat && inst.steps[si].d_e < close_harm) {
                close_harm = inst.steps[si].d_e;
                close_step = si;
            }
        }
        for (int li = 0; li < nl; ++li) {
            if (opt[li] == 0) continue;
            const double dmem = inst.layers[li].mem[opt[li]] - inst.layers[li].mem[opt[li] - 1];
            if (c_lat - bit_lat_saving(li) <= inst.b_lat && c_mem - dmem <= inst.b_mem &&
                inst.layers[li].s_m < close_harm) {
                close_harm = inst.layers[li].s_m;
                close_bit = li;
                close_step = -1;
            }
        }
        if (close_step >= 0) {
            apply_step(close_step, step_cost(close_step) / (inst.eps + inst.steps[close_step].d_e));
            ++next_prunable;
            continue;
        }
        if (close_bit >= 0) {
            apply_bit(close_bit, bit_lat_saving(close_bit) / (inst.eps + inst.layers[close_bit].s_m));
            continue;
        }

        // main rule: best S_bit downgrade vs the lowest-drift removable step
        int best_li = -1;
        double best_bit_score = -1.0;
        for (int li = 0; li < nl; ++li) {
            if (opt[li] == 0) continue;
            const double s = bit_lat_saving(li) / (inst.eps + inst.layers[li].s_m);
            if (s > best_bit_score) {
                best_bit_score = s;
                best_li = li;
            }
        }
        double s_step = -1.0;
        int step_si = -1;
        if (!mem_bound && next_prunable < prunable.size()) {
            step_si = prunable[next_prunable];
            s_step = step_cost(step_si) / (inst.eps + inst.steps[step_si].d_e);
        }

        if (step_si >= 0 && (best_li < 0 || s_step > best_bit_score)) {
            apply_step(step_si, s_step);
            ++next_prunable;
        } else if (best_li >= 0) {
            apply_bit(best_li, best_bit_score);
        } else {
            const std::string resource = (c_mem > inst.b_mem) ? "memory" : "latency";
            throw BudgetInfeasible(
                "budgets unreachable: moves exhausted with c_lat=" + std::to_string(c_lat) +
                    " (B_lat=" + std::to_string(inst.b_lat) + "), c_mem=" + std::to_string(c_mem) +
                    " (B_mem=" + std::to_string(inst.b_mem) + "); limiting resource: " + resource,
                resource);
        }
    }

    // reverse-delete: undo any move whose absence keeps both budgets
    for (int i = static_cast<int>(applied.size()) - 1; i >= 0; --i) {
        const Applied& a = applied[i];
        if (a.is_step) {
            kept[a.step_si] = true;
        } else {
            opt[a.layer] += 1;
        }
        const double lat = total_lat();
        const double mem = total_mem();
        if (lat <= inst.b_lat && mem <= inst.b_mem) {
            c_lat = lat;
            c_mem = mem;
            res.moves[i].reverted = true;
        } else {
            if (a.is_step)
                kept[a.step_si] = false;
            else
                opt[a.layer] -= 1;
        }
    }
    res.moves.erase(std::remove_if(res.moves.begin(), res.moves.end(),
                                   [](const PlannerMove& m) { return m.reverted; }),
                    res.moves.end());

    res.option_index = opt;
    for (size_t si = 0; si < inst.steps.size(); ++si)
        if (kept[si]) res.kept_steps.push_back(inst.steps[si].t);
    res.c_lat = c_lat;
    res.c_mem = c_mem;
    return res;
}

// Builds the real-pipeline instance: per-layer options are every configured
// bit at or below the refined plan's assignment (frozen layers are pinned),
// groups stay at the refined plan's choice, and costs come from the analytic
// model under the given DAQ policy.
inline PlannerInstance make_planner_instance(const CostModel& cost, const BitPlan& refined,
                                             const SearchSpace& space, const DaqPolicy& policy,
                                             const DriftProfile& profile, double rho,
                                             double b_lat, double b_mem,
                                             const std::map<std::string, double>& sensitivity) {
    PlannerInstance inst;
    inst.b_lat = b_lat;
    inst.b_mem = b_mem;
    const int T = cost.model_T();
    const std::vector<int> tails = tail_steps(profile.candidates, T, rho);
    for (int t : profile.candidates) {
        PlannerInstance::Step s;
        s.t = t;
        s.d_e = profile.at(t);
        s.bin = static_cast<int>(phase_bin(t, T, policy.boundary_early, policy.boundary_mid));
        s.tail = std::binary_search(tails.begin(), tails.end(), t);
        inst.steps.push_back(s);
    }
    inst.base_mem = cost.aux_bytes();

    const std::array<PhaseBin, 3> bins = {PhaseBin::Early, PhaseBin::Mid, PhaseBin::Late};
    for (const auto& id : cost.layer_order()) {
        const auto& a = refined.at(id);
        PlannerInstance::Layer l;
        l.id = id;
        auto it = sensitivity.find(id);
        l.s_m = it == sensitivity.end() ? 0.0 : it->second;
        if (a.frozen) {
            l.bit_options = {a.bits};
        } else {
            for (int b : space.bit_set)
                if (b <= a.bits) l.bit_options.push_back(b);
            if (l.bit_options.empty() || l.bit_options.back() != a.bits) {
                // assignment outside the configured set: pin it on top
                l.bit_options.push_back(a.bits);
            }
            std::sort(l.bit_options.begin(), l.bit_options.end());
        }
        for (int b : l.bit_options) {
            std::array<double, 3> lat{};
            for (int bi = 0; bi < 3; ++bi) {
                const int ba = is_passthrough_bits(b) ? b : policy.bits_for(bins[bi]);
                double c = cost.c_lat(id, b, ba);
                if (!is_passthrough_bits(b)) c *= 1.0 + cost.daq_overhead_rate;
                lat[bi] = c;
            }
            l.lat.push_back(lat);
            l.mem.push_back(cost.c_mem(id, b, a.group_size));
        }
        inst.layers.push_back(std::move(l));
    }
    return inst;
}

// Maps a planner result back onto a bit plan (groups and frozen flags kept).
inline BitPlan apply_planner_result(const BitPlan& refined, const PlannerInstance& inst,
                                    const PlannerResult& res) {
    BitPlan out = refined;
    for (size_t i = 0; i < inst.layers.size(); ++i)
        out.at(inst.layers[i].id).bits = inst.layers[i].bit_options[res.option_index[i]];
    return out;
}

}  // namespace diffpro
