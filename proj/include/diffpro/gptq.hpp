#pragma once

#include <cmath>
#include <string>

#include "diffpro/core.hpp"
#include "diffpro/linalg.hpp"
#include "diffpro/quant.hpp"

namespace diffpro {

// Cached inverse-Hessian Cholesky factor for one layer. Depends only on the
// calibration inputs, so it is shared across every (bits, group) candidate.
struct GptqFactor {
    Mat u;           // upper triangular, Hinv = U^T U
    double lambda = 0.0;
};

// H = X^T X + lambda I with lambda = 0.01 * mean(diag H); on Cholesky failure
// the damping escalates x10, up to 3 retries.
inline GptqFactor prepare_gptq_factor(const Mat& x) {
    const int d = x.cols;
    if (x.rows < d)
        throw InvalidArgument("gptq: need at least in_features calibration rows (" +
                              std::to_string(x.rows) + " < " + std::to_string(d) + ")");
    Mat h(d, d);
    for (int r = 0; r < x.rows; ++r) {
        const double* row = x.row(r);
        for (int i = 0; i < d; ++i) {
            const double xi = row[i];
            if (xi == 0.0) continue;
            double* hi = h.row(i);
            for (int j = i; j < d; ++j) hi[j] += xi * row[j];
        }
    }
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < i; ++j) h(i, j) = h(j, i);

    double trace = 0.0;
    for (int i = 0; i < d; ++i) trace += h(i, i);
    double lambda = 0.01 * trace / d;

    for (int attempt = 0; attempt <= 3; ++attempt, lambda *= 10.0) {
        Mat hd = h;
        for (int i = 0; i < d; ++i) hd(i, i) += lambda;
        bool ok = false;
        Mat hinv = spd_inverse(hd, &ok);
        if (!ok) continue;
        Mat l = hinv;
        if (!cholesky_lower(l)) continue;
        GptqFactor f;
        f.lambda = lambda;
        f.u = Mat(d, d);
        for (int i = 0; i < d; ++i)
            for (int j = 0; j <= i; ++j) f.u(j, i) = l(i, j);
        return f;
    }
    throw NumericFailure("gptq: cholesky failed after damping escalation");
}

// Column-wise GPTQ with grouped scales. Columns are processed in natural
// order; each quantized column's rounding error is propagated into the
// remaining columns through the inverse-Hessian factor. Group scales are set
// from the compensated weights when the group's first column is reached.
inline GroupQuantWeights gptq_pack(const Mat& w, const GptqFactor& factor, int bits,
                                   int group_size, const std::string& layer_id = "") {
    if (bits != 3 && bits != 4 && bits != 6 && bits != 8)
        throw InvalidArgument("weight bits must be one of {3,4,6,8}");
    if (group_size < 1) throw InvalidArgument("group size must be >= 1");
    if (factor.u.cols != w.cols) throw InvalidArgument("gptq factor dimension mismatch");

    const int rows = w.rows, cols = w.cols;
    const int qmax = qmax_for_bits(bits);
    GroupQuantWeights q;
    q.layer_id = layer_id;
    q.bits = bits;
    q.group_size = group_size;
    q.rows = rows;
    q.cols = cols;
    const int ng = q.n_groups();
    q.codes.resize(static_cast<size_t>(rows) * cols);
    q.scales.resize(static_cast<size_t>(rows) * ng);

    Mat wc = w;
    for (int c = 0; c < cols; ++c) {
        if (c % group_size == 0) {
            const int grp = c / group_size;
            const int c1 = std::min(cols, c + group_size);
            for (int r = 0; r < rows; ++r) {
                double amax = 0.0;
                for (int cc = c; cc < c1; ++cc) amax = std::max(amax, std::abs(wc(r, cc)));
                q.scales[static_cast<size_t>(r) * ng + grp] = std::max(amax / qmax, kScaleFloor);
            }
        }
        const int grp = c / group_size;
        const double d = factor.u(c, c);
        for (int r = 0; r < rows; ++r) {
            const double scale = q.scales[static_cast<size_t>(r) * ng + grp];
            double code = std::round(wc(r, c) / scale);
            code = std::min<double>(qmax, std::max<double>(-qmax, code));
            q.codes[static_cast<size_t>(r) * cols + c] = static_cast<int32_t>(code);
            const double err = (wc(r, c) - code * scale) / d;
            const double* urow = factor.u.row(c);
            double* wrow = wc.row(r);
            for (int j = c + 1; j < cols; ++j) wrow[j] -= err * urow[j];
        }
    }
    return q;
}

inline GroupQuantWeights gptq_pack(const Mat& w, const Mat& calib_inputs, int bits,
                                   int group_size, const std::string& layer_id = "") {
    return gptq_pack(w, prepare_gptq_factor(calib_inputs), bits, group_size, layer_id);
}

}  // namespace diffpro
