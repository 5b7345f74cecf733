#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "diffpro/core.hpp"

namespace diffpro {

inline constexpr double kScaleFloor = 1e-12;

inline int qmax_for_bits(int bits) { return (1 << (bits - 1)) - 1; }

// Grouped symmetric weight codes: one positive scale per (row, group), groups
// partition the input dimension. Codes are held widened to int32 for the
// reference kernels; the size model accounts them at b_w bits.
struct GroupQuantWeights {
    std::string layer_id;
    int bits = 0;
    int group_size = 0;
    int rows = 0;  // output features
    int cols = 0;  // input features
    std::vector<int32_t> codes;   // rows x cols
    std::vector<double> scales;   // rows x n_groups

    int n_groups() const { return (cols + group_size - 1) / group_size; }
    int32_t code(int r, int c) const { return codes[static_cast<size_t>(r) * cols + c]; }
    double scale(int r, int g) const { return scales[static_cast<size_t>(r) * n_groups() + g]; }
};

// Round-to-nearest grouped quantization: scale = max|w| / (2^{b-1}-1) per
// (row, group), floored at 1e-12; codes rounded half away from zero and
// clamped to the symmetric range.
inline GroupQuantWeights quantize_grouped(const Mat& w, int bits, int group_size,
                                          const std::string& layer_id = "") {
    if (bits != 3 && bits != 4 && bits != 6 && bits != 8)
        throw InvalidArgument("weight bits must be one of {3,4,6,8}");
    if (group_size < 1) throw InvalidArgument("group size must be >= 1");
    GroupQuantWeights q;
    q.layer_id = layer_id;
    q.bits = bits;
    q.group_size = group_size;
    q.rows = w.rows;
    q.cols = w.cols;
    const int ng = q.n_groups();
    const int qmax = qmax_for_bits(bits);
    q.codes.resize(static_cast<size_t>(w.rows) * w.cols);
    q.scales.resize(static_cast<size_t>(w.rows) * ng);
    for (int r = 0; r < w.rows; ++r) {
        for (int g = 0; g < ng; ++g) {
            const int c0 = g * group_size;
            const int c1 = std::min(w.cols, c0 + group_size);
            double amax = 0.0;
            for (int c = c0; c < c1; ++c) amax = std::max(amax, std::abs(w(r, c)));
            const double scale = std::max(amax / qmax, kScaleFloor);
            q.scales[static_cast<size_t>(r) * ng + g] = scale;
            for (int c = c0; c < c1; ++c) {
                double v = std::round(w(r, c) / scale);
                v = std::min<double>(qmax, std::max<double>(-qmax, v));
                q.codes[static_cast<size_t>(r) * q.cols + c] = static_cast<int32_t>(v);
            }
        }
    }
    return q;
}

inline Mat dequantize(const GroupQuantWeights& q) {
    Mat w(q.rows, q.cols);
    const int ng = q.n_groups();
    for (int r = 0; r < q.rows; ++r)
        for (int c = 0; c < q.cols; ++c)
            w(r, c) = q.code(r, c) * q.scales[static_cast<size_t>(r) * ng + c / q.group_size];
    return w;
}

// Integer activation codes with per-(row, group) scales; groups partition the
// feature dimension, possibly with a different size than the weight groups.
struct QuantActs {
    int bits = 0;
    int group_size = 0;
    int rows = 0;
    int cols = 0;
    std::vector<int32_t> codes;  // rows x cols
    std::vector<double> scales;  // rows x n_groups

    int n_groups() const { return (cols + group_size - 1) / group_size; }
    double scale(int r, int g) const { return scales[static_cast<size_t>(r) * n_groups() + g]; }
};

// Reference integer GEMM: Y = A * W^T on codes, accumulated in 64-bit integers
// over segments where both the activation scale and the weight scale are
// constant, then rescaled and summed in floating point.
inline Mat int_gemm(const QuantActs& qa, const GroupQuantWeights& qw) {
    if (qa.cols != qw.cols) throw InvalidArgument("int_gemm inner dimensions disagree");
    Mat y(qa.rows, qw.rows);
    const int k = qa.cols;
    // segment boundaries: union of both group partitions
    std::vector<int> bounds;
    bounds.push_back(0);
    int pa = qa.group_size, pw = qw.group_size;
    int na = pa, nw = pw;
    while (bounds.back() < k) {
        int nxt = std::min({na, nw, k});
        bounds.push_back(nxt);
        if (nxt == na) na += pa;
        if (nxt == nw) nw += pw;
    }
    // 288 * 32767 * 127 < 2^31 holds for every desk shape, but accumulate in
    // 64-bit and assert the 32-bit contract anyway.
    constexpr int64_t kAccLimit = int64_t(1) << 62;
    for (int i = 0; i < qa.rows; ++i) {
        const int32_t* ar = qa.codes.data() + static_cast<size_t>(i) * k;
        for (int j = 0; j < qw.rows; ++j) {
            const int32_t* wr = qw.codes.data() + static_cast<size_t>(j) * k;
            double out = 0.0;
            for (size_t s = 0; s + 1 < bounds.size(); ++s) {
                const int c0 = bounds[s], c1 = bounds[s + 1];
                int64_t acc = 0;
                for (int c = c0; c < c1; ++c) acc += static_cast<int64_t>(ar[c]) * wr[c];
                if (acc > kAccLimit || acc < -kAccLimit)
                    throw NumericFailure("integer accumulator overflow", qw.layer_id);
                out += static_cast<double>(acc) * qa.scale(i, c0 / qa.group_size) *
                       qw.scale(j, c0 / qw.group_size);
            }
            y(i, j) = out;
        }
    }
    return y;
}

}  // namespace diffpro
