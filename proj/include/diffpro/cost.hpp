#pragma once

#include <map>
#include <string>
#include <vector>

#include "diffpro/bitplan.hpp"
#include "diffpro/core.hpp"
#include "diffpro/daq.hpp"
#include "diffpro/model.hpp"

namespace diffpro {

// Analytic latency/memory/compute model. Latency is a unit, not wall-clock:
//   c_lat(l, b_w, b_a) = MACs(l) * b_w * b_a / 64
//   c_mem(l, b_w, g)   = params * b_w/8 + scale_bytes * out * ceil(in/g)
//   c_step(t)          = sum_l c_lat * (1 + overhead if DAQ computes scales)
// Passthrough layers run activations at their own width (16 or 32).
class CostModel {
public:
    struct LayerCost {
        std::string id;
        long macs = 0;    // out * in * token rows, per forward
        long params = 0;  // weight elements
        int out = 0;
        int in = 0;
    };

    double daq_overhead_rate = 0.01;  // fraction of c_lat per dynamically quantized input
    int scale_bytes = 2;

    CostModel() = default;

    explicit CostModel(const TinyDiT& model) {
        T_ = model.config().T;
        aux_bytes_ = 4.0 * model.aux_params();
        for (const auto& id : model.layer_ids()) {
            const auto& l = model.layer(id);
            LayerCost c;
            c.id = id;
            c.macs = l.param_count() * l.token_rows;
            c.params = l.param_count();
            c.out = l.out_features();
            c.in = l.in_features();
            order_.push_back(id);
            layers_[id] = c;
        }
    }

    const std::vector<std::string>& layer_order() const { return order_; }
    const LayerCost& layer(const std::string& id) const {
        auto it = layers_.find(id);
        if (it == layers_.end()) throw InvalidArgument("cost model: unknown layer " + id);
        return it->second;
    }
    int model_T() const { return T_; }
    double aux_bytes() const { return aux_bytes_; }

    double c_lat(const std::string& id, int b_w, int b_a) const {
        return static_cast<double>(layer(id).macs) * b_w * b_a / 64.0;
    }

    double c_mem(const std::string& id, int b_w, int g) const {
        const auto& l = layer(id);
        if (is_passthrough_bits(b_w)) return static_cast<double>(l.params) * (b_w / 8.0);
        const int groups = (l.in + g - 1) / g;
        return static_cast<double>(l.params) * b_w / 8.0 +
               static_cast<double>(scale_bytes) * l.out * groups;
    }

    // activation width seen by layer l at step t
    int act_bits(const LayerAssignment& a, ActMode mode, const DaqPolicy& policy, int t,
                 int static_bits = 8) const {
        if (a.passthrough()) return a.bits;
        switch (mode) {
            case ActMode::Dynamic:
                return policy.bits_for(phase_bin(t, T_, policy.boundary_early, policy.boundary_mid));
            case ActMode::Static: return static_bits;
            default: return 16;
        }
    }

    double c_step(const BitPlan& plan, const DaqPolicy& policy, int t,
                  ActMode mode = ActMode::Dynamic) const {
        double total = 0.0;
        for (const auto& id : order_) {
            const auto& a = plan.at(id);
            const int ba = act_bits(a, mode, policy, t);
            double lat = c_lat(id, a.bits, ba);
            if (mode == ActMode::Dynamic && !a.passthrough()) lat *= 1.0 + daq_overhead_rate;
            total += lat;
        }
        return total;
    }

    double latency_total(const BitPlan& plan, const DaqPolicy& policy,
                         const std::vector<int>& steps, ActMode mode = ActMode::Dynamic) const {
        double total = 0.0;
        for (int t : steps) total += c_step(plan, policy, t, mode);
        return total;
    }

    double model_size_bytes(const BitPlan& plan) const {
        double total = aux_bytes_;
        for (const auto& id : order_) {
            const auto& a = plan.at(id);
            total += c_mem(id, a.bits, a.group_size);
        }
        return total;
    }

    double fp32_size_bytes() const {
        double total = aux_bytes_;
        for (const auto& id : order_) total += 4.0 * layer(id).params;
        return total;
    }

    double bitops(const BitPlan& plan, const DaqPolicy& policy, const std::vector<int>& steps,
                  ActMode mode = ActMode::Dynamic) const {
        double total = 0.0;
        for (int t : steps)
            for (const auto& id : order_) {
                const auto& a = plan.at(id);
                total += static_cast<double>(layer(id).macs) * a.bits *
                         act_bits(a, mode, policy, t);
            }
        return total;
    }

    void check_plan_coverage(const BitPlan& plan) const {
        std::vector<std::string> missing, extra;
        for (const auto& id : order_)
            if (!plan.layers.count(id)) missing.push_back(id);
        for (const auto& [id, a] : plan.layers)
            if (!layers_.count(id)) extra.push_back(id);
        if (!missing.empty() || !extra.empty()) {
            std::string msg = "plan/model layer mismatch;";
            for (const auto& m : missing) msg += " missing:" + m;
            for (const auto& e : extra) msg += " extra:" + e;
            throw InvalidArgument(msg);
        }
    }

private:
    std::map<std::string, LayerCost> layers_;
    std::vector<std::string> order_;
    int T_ = 100;
    double aux_bytes_ = 0.0;
};

}  // namespace diffpro
