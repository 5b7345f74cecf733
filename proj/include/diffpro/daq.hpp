#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "diffpro/core.hpp"
#include "diffpro/quant.hpp"

namespace diffpro {

enum class PhaseBin { Early = 0, Mid = 1, Late = 2 };

inline const char* phase_bin_name(PhaseBin b) {
    switch (b) {
        case PhaseBin::Early: return "early";
        case PhaseBin::Mid: return "mid";
        default: return "late";
    }
}

// Runtime activation policy: one bit width per phase bin, percentile clipping,
// feature-group size, and bin boundaries as fractions of the original T.
struct DaqPolicy {
    int bits_early = 8;
    int bits_mid = 8;
    int bits_late = 8;
    double percentile = 99.9;
    int group_size = 128;
    double boundary_early = 1.0 / 3.0;  // t/T below this -> early
    double boundary_mid = 2.0 / 3.0;    // t/T below this -> mid, else late

    int bits_for(PhaseBin b) const {
        switch (b) {
            case PhaseBin::Early: return bits_early;
            case PhaseBin::Mid: return bits_mid;
            default: return bits_late;
        }
    }

    void validate() const {
        for (int b : {bits_early, bits_mid, bits_late})
            if (b != 4 && b != 6 && b != 8 && b != 16)
                throw InvalidArgument("activation bits must be one of {4,6,8,16}");
        if (!(percentile > 50.0 && percentile <= 100.0))
            throw InvalidArgument("percentile must be in (50, 100]");
        if (!(boundary_early > 0.0 && boundary_early < boundary_mid && boundary_mid < 1.0))
            throw InvalidArgument("phase boundaries must be strictly increasing in (0,1)");
    }
};

// Bins by t against the integer boundary steps floor(frac * T); a step that
// lands exactly on a boundary belongs to the higher bin (t=33 at T=100 with
// boundary 1/3 is mid).
inline PhaseBin phase_bin(int t, int T, double boundary_early = 1.0 / 3.0,
                          double boundary_mid = 2.0 / 3.0) {
    if (t < 0 || t >= T) throw InvalidArgument("phase_bin: t out of range");
    const int b1 = static_cast<int>(std::floor(boundary_early * T));
    const int b2 = static_cast<int>(std::floor(boundary_mid * T));
    if (t < b1) return PhaseBin::Early;
    if (t < b2) return PhaseBin::Mid;
    return PhaseBin::Late;
}

// Nearest-rank percentile of |v|: rank = ceil(p/100 * n). Small groups at
// p = 99.9 resolve to the max (per-row min-max scaling); large vectors leave
// the top (100-p)% beyond tau, which is the clipping contract.
inline double percentile_abs(const std::vector<double>& v, double p) {
    std::vector<double> mags(v.size());
    for (size_t i = 0; i < v.size(); ++i) mags[i] = std::abs(v[i]);
    std::sort(mags.begin(), mags.end());
    const auto n = static_cast<long>(mags.size());
    long rank = static_cast<long>(std::ceil(p / 100.0 * n));
    rank = std::max<long>(1, std::min(rank, n));
    return mags[rank - 1];
}

struct DaqResult {
    std::vector<double> v_hat;
    double tau = 0.0;
    double alpha = 0.0;
};

// Per-group symmetric quantization with percentile clipping:
//   tau = Percentile(|v|, p), alpha = tau / (2^{b-1} - 1),
//   v_hat = alpha * round(clip(v, -tau, tau) / alpha).
inline DaqResult daq_quantize(const std::vector<double>& v, double p, int bits) {
    if (v.empty()) throw InvalidArgument("daq_quantize: empty group");
    if (bits < 2) throw InvalidArgument("daq_quantize: bits must be >= 2");
    for (double x : v)
        if (!std::isfinite(x)) throw InvalidArgument("daq_quantize: non-finite input");
    DaqResult r;
    r.tau = std::max(percentile_abs(v, p), kScaleFloor);
    r.alpha = r.tau / qmax_for_bits(bits);
    r.v_hat.resize(v.size());
    for (size_t i = 0; i < v.size(); ++i) {
        const double clipped = std::min(r.tau, std::max(-r.tau, v[i]));
        r.v_hat[i] = r.alpha * std::round(clipped / r.alpha);
    }
    return r;
}

// Quantizes a row-major activation matrix per (row, feature-group), returning
// integer codes + scales for the integer GEMM. Records tau values if a
// collector is given.
struct TauTrace {
    double sum = 0.0;
    long count = 0;
    void add(double tau) {
        sum += tau;
        ++count;
    }
    double mean() const { return count ? sum / count : 0.0; }
};

inline QuantActs quantize_activations(const Mat& x, int bits, double p, int group_size,
                                      TauTrace* trace = nullptr) {
    QuantActs qa;
    qa.bits = bits;
    qa.group_size = group_size;
    qa.rows = x.rows;
    qa.cols = x.cols;
    const int ng = qa.n_groups();
    const int qmax = qmax_for_bits(bits);
    qa.codes.resize(static_cast<size_t>(x.rows) * x.cols);
    qa.scales.resize(static_cast<size_t>(x.rows) * ng);
    std::vector<double> group;
    for (int r = 0; r < x.rows; ++r) {
        for (int g = 0; g < ng; ++g) {
            const int c0 = g * group_size;
            const int c1 = std::min(x.cols, c0 + group_size);
            group.assign(x.row(r) + c0, x.row(r) + c1);
            const double tau = std::max(percentile_abs(group, p), kScaleFloor);
            const double alpha = tau / qmax;
            qa.scales[static_cast<size_t>(r) * ng + g] = alpha;
            for (int c = c0; c < c1; ++c) {
                const double clipped = std::min(tau, std::max(-tau, x(r, c)));
                qa.codes[static_cast<size_t>(r) * x.cols + c] =
                    static_cast<int32_t>(std::round(clipped / alpha));
            }
            if (trace) trace->add(tau);
        }
    }
    return qa;
}

// Static variant: one precomputed clipping scale for the whole layer input.
inline QuantActs quantize_activations_static(const Mat& x, int bits, double tau,
                                             TauTrace* trace = nullptr) {
    QuantActs qa;
    qa.bits = bits;
    qa.group_size = std::max(1, x.cols);  // single group per row
    qa.rows = x.rows;
    qa.cols = x.cols;
    const int qmax = qmax_for_bits(bits);
    tau = std::max(tau, kScaleFloor);
    const double alpha = tau / qmax;
    qa.codes.resize(static_cast<size_t>(x.rows) * x.cols);
    qa.scales.assign(static_cast<size_t>(x.rows) * qa.n_groups(), alpha);
    for (int r = 0; r < x.rows; ++r)
        for (int c = 0; c < x.cols; ++c) {
            const double clipped = std::min(tau, std::max(-tau, x(r, c)));
            qa.codes[static_cast<size_t>(r) * x.cols + c] =
                static_cast<int32_t>(std::round(clipped / alpha));
        }
    if (trace) trace->add(tau);
    return qa;
}

}  // namespace diffpro
