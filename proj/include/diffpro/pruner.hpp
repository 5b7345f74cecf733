#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "diffpro/core.hpp"
#include "diffpro/model.hpp"
#include "diffpro/schedule.hpp"
#include "diffpro/student.hpp"

namespace diffpro {

// Per-timestep teacher-student drift over a candidate step set.
struct DriftProfile {
    std::vector<int> candidates;          // sorted ascending
    std::map<int, double> delta;          // t -> batch-mean squared l2 drift
    int T = 0;
    int batch_size = 0;

    double at(int t) const {
        auto it = delta.find(t);
        if (it == delta.end()) throw InvalidArgument("no drift entry for t=" + std::to_string(t));
        return it->second;
    }
    double total() const {
        double s = 0.0;
        for (const auto& [t, d] : delta) s += d;
        return s;
    }
};

// Kept-step schedule with its protected tail.
struct StepSchedule {
    std::vector<int> kept;   // ascending
    std::vector<int> tail;   // ascending, subset of kept
    double rho = 0.0;

    bool contains(int t) const { return std::binary_search(kept.begin(), kept.end(), t); }
};

inline std::vector<int> tail_steps(const std::vector<int>& candidates, int T, double rho) {
    std::vector<int> tail;
    for (int t : candidates)
        if (static_cast<double>(t) / T >= 1.0 - rho) tail.push_back(t);
    return tail;
}

// delta(t) = (1/B) sum_i ||student(x_t,i) - teacher(x_t,i)||^2 with identical
// latents fed to both models. Timesteps are independent and run in parallel.
template <typename TeacherFn, typename StudentFn>
inline DriftProfile measure_drift_fn(TeacherFn&& teacher, StudentFn&& student, int classes,
                                     const NoiseSchedule& sched,
                                     const std::vector<int>& candidates, int batch,
                                     uint64_t seed, int workers = 1) {
    if (batch < 1) throw InvalidArgument("measure_drift: batch size must be >= 1");
    DriftProfile prof;
    prof.candidates = candidates;
    std::sort(prof.candidates.begin(), prof.candidates.end());
    prof.T = sched.T;
    prof.batch_size = batch;
    std::vector<double> deltas(prof.candidates.size(), 0.0);
    parallel_for(static_cast<int>(prof.candidates.size()), workers, [&](int ci) {
        const int t = prof.candidates[ci];
        double acc = 0.0;
        for (int i = 0; i < batch; ++i) {
            Rng rng(derive_seed(seed, "drift", static_cast<uint64_t>(t), i));
            const Latent x0 = Latent::random_normal(rng);
            const Latent eps = Latent::random_normal(rng);
            const int label = i % classes;
            const Latent x_t = add_noise(x0, t, eps, sched);
            const Latent ref = teacher(x_t, t, label);
            const Latent out = student(x_t, t, label);
            acc += squared_l2(out, ref);
        }
        deltas[ci] = acc / batch;
    });
    for (size_t i = 0; i < prof.candidates.size(); ++i) prof.delta[prof.candidates[i]] = deltas[i];
    return prof;
}

inline DriftProfile measure_drift(const TinyDiT& teacher, const ExecPlan& student,
                                  const NoiseSchedule& sched, const std::vector<int>& candidates,
                                  int batch, uint64_t seed, int workers = 1) {
    return measure_drift_fn(
        [&](const Latent& x, int t, int y) { return teacher.forward(x, t, y); },
        [&](const Latent& x, int t, int y) { return teacher.forward(x, t, y, &student); },
        teacher.config().classes, sched, candidates, batch, seed, workers);
}

// Eq-style selection: the protected tail plus the k - |tail| largest-drift
// steps outside it. Ties go to the larger timestep. Output sorted ascending.
inline StepSchedule select_schedule(const DriftProfile& prof, int k, double rho = 0.2) {
    StepSchedule s;
    s.rho = rho;
    s.tail = tail_steps(prof.candidates, prof.T, rho);
    const int n_tail = static_cast<int>(s.tail.size());
    if (k < n_tail)
        throw BudgetInfeasible("k=" + std::to_string(k) + " below protected tail size " +
                                   std::to_string(n_tail) + "; minimum feasible k is " +
                                   std::to_string(n_tail),
                               "schedule");
    if (k > static_cast<int>(prof.candidates.size()))
        throw InvalidArgument("k exceeds candidate count");
    std::vector<int> rest;
    for (int t : prof.candidates)
        if (static_cast<double>(t) / prof.T < 1.0 - rho) rest.push_back(t);
    std::sort(rest.begin(), rest.end(), [&](int a, int b) {
        const double da = prof.at(a), db = prof.at(b);
        if (da != db) return da > db;
        return a > b;
    });
    s.kept = s.tail;
    for (int i = 0; i < k - n_tail; ++i) s.kept.push_back(rest[i]);
    std::sort(s.kept.begin(), s.kept.end());
    return s;
}

// Fraction of total drift mass covered by the selected schedule.
inline double lorenz_coverage(const DriftProfile& prof, int k, double rho) {
    const double total = prof.total();
    if (total <= 0.0) return static_cast<double>(k) / prof.candidates.size();
    const StepSchedule s = select_schedule(prof, k, rho);
    double kept = 0.0;
    for (int t : s.kept) kept += prof.at(t);
    return kept / total;
}

// Standard Gini coefficient over the drift values (sorted-sum formula).
inline double gini(const DriftProfile& prof) {
    std::vector<double> v;
    v.reserve(prof.delta.size());
    for (const auto& [t, d] : prof.delta) v.push_back(d);
    const int n = static_cast<int>(v.size());
    if (n == 0) throw InvalidArgument("gini: empty profile");
    std::sort(v.begin(), v.end());
    double sum = 0.0, weighted = 0.0;
    for (int i = 0; i < n; ++i) {
        sum += v[i];
        weighted += static_cast<double>(i + 1) * v[i];
    }
    if (sum <= 0.0) return 0.0;
    return 2.0 * weighted / (n * sum) - static_cast<double>(n + 1) / n;
}

}  // namespace diffpro
