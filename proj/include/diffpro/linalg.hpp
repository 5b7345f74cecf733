#pragma once

#include <cmath>
#include <vector>

#include "diffpro/core.hpp"

namespace diffpro {

// Lower Cholesky factor of a symmetric positive definite matrix, in place on
// a copy. Returns false if the matrix is not positive definite.
inline bool cholesky_lower(Mat& m) {
    const int n = m.rows;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double sum = m(i, j);
            for (int k = 0; k < j; ++k) sum -= m(i, k) * m(j, k);
            if (i == j) {
                if (sum <= 0.0 || !std::isfinite(sum)) return false;
                m(i, i) = std::sqrt(sum);
            } else {
                m(i, j) = sum / m(j, j);
            }
        }
    }
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) m(i, j) = 0.0;
    return true;
}

// Inverse of an SPD matrix via its Cholesky factor: solves A X = I column-wise.
inline Mat spd_inverse(const Mat& a, bool* ok = nullptr) {
    Mat l = a;
    if (!cholesky_lower(l)) {
        if (ok) {
            *ok = false;
            return Mat();
        }
        throw NumericFailure("cholesky failed: matrix not positive definite");
    }
    if (ok) *ok = true;
    const int n = a.rows;
    Mat inv(n, n);
    std::vector<double> y(n), x(n);
    for (int col = 0; col < n; ++col) {
        // forward: L y = e_col
        for (int i = 0; i < n; ++i) {
            double s = (i == col) ? 1.0 : 0.0;
            for (int k = 0; k < i; ++k) s -= l(i, k) * y[k];
            y[i] = s / l(i, i);
        }
        // backward: L^T x = y
        for (int i = n - 1; i >= 0; --i) {
            double s = y[i];
            for (int k = i + 1; k < n; ++k) s -= l(k, i) * x[k];
            x[i] = s / l(i, i);
        }
        for (int i = 0; i < n; ++i) inv(i, col) = x[i];
    }
    return inv;
}

// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
// Values only; vectors are not accumulated. Adequate for d <= 256.
inline std::vector<double> sym_eigenvalues(Mat m, int max_sweeps = 64, double tol = 1e-14) {
    const int n = m.rows;
    if (n == 1) return {m(0, 0)};
    double frob = 0.0;
    for (double v : m.a) frob += v * v;
    const double stop = tol * std::max(frob, 1e-300);
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += 2.0 * m(i, j) * m(i, j);
        if (off <= stop) break;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                const double apq = m(p, q);
                if (apq == 0.0) continue;
                const double app = m(p, p), aqq = m(q, q);
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < n; ++k) {
                    const double akp = m(k, p), akq = m(k, q);
                    m(k, p) = c * akp - s * akq;
                    m(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = m(p, k), aqk = m(q, k);
                    m(p, k) = c * apk - s * aqk;
                    m(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> ev(n);
    for (int i = 0; i < n; ++i) ev[i] = m(i, i);
    std::sort(ev.begin(), ev.end(), std::greater<double>());
    return ev;
}

}  // namespace diffpro
