#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "diffpro/core.hpp"
#include "diffpro/daq.hpp"
#include "diffpro/latent.hpp"
#include "diffpro/linalg.hpp"
#include "diffpro/model.hpp"
#include "diffpro/schedule.hpp"

namespace diffpro {

// ------------------------------------------------------------- calibration set

struct CalibSample {
    Latent x_t;
    int t = 0;
    int label = 0;
};

// Synthetic latent-space calibration stream: a seeded x0 pool noised at
// timesteps spread over early, mid and late parts of the trajectory.
struct CalibrationSet {
    std::vector<CalibSample> samples;

    static CalibrationSet make(const NoiseSchedule& sched, int n_samples, int n_timesteps,
                               int classes, uint64_t seed) {
        if (n_samples < 1) throw InvalidArgument("calibration set must be nonempty");
        std::vector<int> ts;
        for (int i = 0; i < n_timesteps; ++i) {
            const int t = static_cast<int>(std::lround(
                static_cast<double>(i) * (sched.T - 1) / std::max(1, n_timesteps - 1)));
            ts.push_back(t);
        }
        CalibrationSet cs;
        cs.samples.reserve(n_samples);
        for (int i = 0; i < n_samples; ++i) {
            Rng rng(derive_seed(seed, "calib", i));
            CalibSample s;
            const Latent x0 = Latent::random_normal(rng);
            const Latent eps = Latent::random_normal(rng);
            s.t = ts[i % ts.size()];
            s.label = i % classes;
            s.x_t = add_noise(x0, s.t, eps, sched);
            cs.samples.push_back(std::move(s));
        }
        return cs;
    }
};

// ------------------------------------------------------------- collected stats

struct LayerRawStats {
    std::string layer_id;
    int in_features = 0;
    long rows_seen = 0;
    std::vector<double> sum_sq;                     // per input feature
    Mat reservoir;                                  // sampled input rows
    std::vector<std::pair<double, double>> envelopes;  // per 128-feature group (min, max)
    std::map<int, double> std_per_timestep;         // element std of inputs at each t

    double h_diag_mean() const {
        if (sum_sq.empty()) return 0.0;
        double s = 0.0;
        for (double v : sum_sq) s += v;
        return s / sum_sq.size();
    }
};

struct CalibStats {
    std::map<std::string, LayerRawStats> layers;
    std::vector<std::string> order;

    const LayerRawStats& at(const std::string& id) const {
        auto it = layers.find(id);
        if (it == layers.end()) throw InvalidArgument("no calibration stats for layer " + id);
        return it->second;
    }
};

// Runs hooked teacher forwards over the calibration set and harvests per-layer
// raw statistics.
inline CalibStats collect_stats(const TinyDiT& model, const CalibrationSet& calib,
                                int reservoir_cap = 2048, uint64_t seed = 0) {
    if (calib.samples.empty()) throw InvalidArgument("empty calibration set");
    auto hooks = model.register_hooks(model.layer_ids(), CaptureWhat::Inputs, reservoir_cap,
                                      derive_seed(seed, "collect"));
    for (const auto& s : calib.samples) model.forward(s.x_t, s.t, s.label);
    model.remove_hooks(hooks);

    CalibStats out;
    for (const auto& h : hooks) {
        LayerRawStats r;
        r.layer_id = h->layer_id;
        r.in_features = h->reservoir.cols;
        r.rows_seen = h->rows_seen;
        r.sum_sq = h->sum_sq;
        r.reservoir = h->reservoir;
        for (size_t g = 0; g < h->group_min.size(); ++g)
            r.envelopes.emplace_back(h->group_min[g], h->group_max[g]);
        for (const auto& [t, m] : h->per_timestep) {
            const double mean = m.sum / m.n;
            const double var = std::max(0.0, m.sum_sq / m.n - mean * mean);
            r.std_per_timestep[t] = std::sqrt(var);
        }
        out.order.push_back(r.layer_id);
        out.layers[r.layer_id] = std::move(r);
    }
    return out;
}

// ---------------------------------------------------------------------- PCA

struct PcaRank {
    int k95 = 1;
    double spill = 0.0;
};

// k95 and spill from the exact eigen-spectrum of the column-centered
// covariance. All rows identical (rank 0) maps to k95=1, spill=0.
inline PcaRank pca_rank(const Mat& a, int k_cap = 128, double threshold = 0.95) {
    if (a.rows < 2) throw InvalidArgument("pca_rank needs at least 2 rows");
    const int d = a.cols;
    std::vector<double> mean(d, 0.0);
    for (int r = 0; r < a.rows; ++r)
        for (int c = 0; c < d; ++c) mean[c] += a(r, c);
    for (double& m : mean) m /= a.rows;

    Mat cov(d, d);
    for (int r = 0; r < a.rows; ++r) {
        const double* row = a.row(r);
        for (int i = 0; i < d; ++i) {
            const double xi = row[i] - mean[i];
            if (xi == 0.0) continue;
            double* ci = cov.row(i);
            for (int j = i; j < d; ++j) ci[j] += xi * (row[j] - mean[j]);
        }
    }
    const double denom = a.rows - 1;
    for (int i = 0; i < d; ++i)
        for (int j = i; j < d; ++j) {
            cov(i, j) /= denom;
            cov(j, i) = cov(i, j);
        }

    std::vector<double> ev = sym_eigenvalues(cov);
    for (double& v : ev) v = std::max(0.0, v);
    double total = 0.0;
    for (double v : ev) total += v;
    PcaRank out;
    if (total <= 0.0) {
        out.k95 = 1;
        out.spill = 0.0;
        return out;
    }
    const int cap = std::min(k_cap, d);
    double cum = 0.0;
    int k = cap;
    double cum_at_k = 0.0;
    for (int i = 0; i < cap; ++i) {
        cum += ev[i];
        if (cum / total >= threshold) {
            k = i + 1;
            cum_at_k = cum;
            break;
        }
        if (i == cap - 1) cum_at_k = cum;  // threshold unreached: k95 = cap
    }
    out.k95 = k;
    out.spill = std::max(0.0, 1.0 - cum_at_k / total);
    return out;
}

// Eq-style PCA sensitivity: 0.5 * spill + 0.5 * k95/d.
inline double pca_sensitivity(int k95, int d, double spill) {
    if (k95 < 1 || k95 > d) throw InvalidArgument("pca_sensitivity: k95 out of [1, d]");
    if (spill < 0.0 || spill > 1.0) throw InvalidArgument("pca_sensitivity: spill out of [0,1]");
    return 0.5 * spill + 0.5 * static_cast<double>(k95) / d;
}

// Convex blend of the PCA term and normalized curvature energy, alpha = 0.5.
inline double combined_score(double s_pca, double h_diag_norm, double alpha = 0.5) {
    if (s_pca < 0.0 || s_pca > 1.0 || h_diag_norm < 0.0 || h_diag_norm > 1.0)
        throw InvalidArgument("combined_score inputs must lie in [0,1]");
    if (alpha < 0.0 || alpha > 1.0) throw InvalidArgument("combined_score alpha out of [0,1]");
    return alpha * s_pca + (1.0 - alpha) * h_diag_norm;
}

// Min-max normalization across layers; a constant vector maps to all 0.5.
inline std::vector<double> min_max_normalize(const std::vector<double>& v) {
    if (v.empty()) return {};
    double lo = v[0], hi = v[0];
    for (double x : v) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    std::vector<double> out(v.size());
    if (hi - lo < 1e-300) {
        std::fill(out.begin(), out.end(), 0.5);
        return out;
    }
    for (size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - lo) / (hi - lo);
    return out;
}

// Single clipping scale per layer from calibration rows (static baseline and
// the no-DAQ ablation).
inline double static_activation_tau(const Mat& rows, double percentile) {
    if (rows.rows == 0) throw InvalidArgument("static_activation_tau: no calibration rows");
    std::vector<double> all(rows.a.begin(), rows.a.end());
    return std::max(percentile_abs(all, percentile), kScaleFloor);
}

}  // namespace diffpro
