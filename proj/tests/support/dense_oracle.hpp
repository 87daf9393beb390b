#pragma once

// Test-only oracles. Deliberately independent of the library implementation:
// plain row-major buffers and a hand-rolled one-sided Jacobi SVD, no Eigen.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

struct DenseMatrix {
    size_t rows = 0, cols = 0;
    std::vector<double> data;  // row-major

    DenseMatrix() = default;
    DenseMatrix(size_t r, size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
    double& at(size_t i, size_t j) { return data[i * cols + j]; }
    double at(size_t i, size_t j) const { return data[i * cols + j]; }
};

// Dense product of row-major factors b (d x r) and a (r x k).
inline DenseMatrix materialize_product(const std::vector<double>& b, size_t d, size_t r,
                                       const std::vector<double>& a, size_t k) {
    DenseMatrix m(d, k);
    for (size_t i = 0; i < d; ++i)
        for (size_t l = 0; l < r; ++l) {
            const double bil = b[i * r + l];
            if (bil == 0.0) continue;
            for (size_t j = 0; j < k; ++j) m.at(i, j) += bil * a[l * k + j];
        }
    return m;
}

inline DenseMatrix transpose(const DenseMatrix& m) {
    DenseMatrix t(m.cols, m.rows);
    for (size_t i = 0; i < m.rows; ++i)
        for (size_t j = 0; j < m.cols; ++j) t.at(j, i) = m.at(i, j);
    return t;
}

// Singular values by one-sided Jacobi (Hestenes): rotate column pairs until
// all are mutually orthogonal, then the column norms are the singular
// values. Works on the matrix itself, so small values do not lose accuracy
// the way a Gram-matrix route would.
inline std::vector<double> dense_singular_values(DenseMatrix m) {
    if (m.cols > m.rows) m = transpose(m);
    const size_t n = m.cols;
    const size_t rows = m.rows;
    const double tol = 1e-15;

    for (int sweep = 0; sweep < 100; ++sweep) {
        bool rotated = false;
        for (size_t p = 0; p + 1 < n; ++p) {
            for (size_t q = p + 1; q < n; ++q) {
                double app = 0, aqq = 0, apq = 0;
                for (size_t i = 0; i < rows; ++i) {
                    const double vp = m.at(i, p), vq = m.at(i, q);
                    app += vp * vp;
                    aqq += vq * vq;
                    apq += vp * vq;
                }
                if (app == 0.0 || aqq == 0.0) continue;
                if (std::fabs(apq) <= tol * std::sqrt(app * aqq)) continue;
                rotated = true;
                const double zeta = (aqq - app) / (2.0 * apq);
                const double t = (zeta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (size_t i = 0; i < rows; ++i) {
                    const double vp = m.at(i, p), vq = m.at(i, q);
                    m.at(i, p) = c * vp - s * vq;
                    m.at(i, q) = s * vp + c * vq;
                }
            }
        }
        if (!rotated) break;
    }

    std::vector<double> sigma(n);
    for (size_t j = 0; j < n; ++j) {
        double ss = 0;
        for (size_t i = 0; i < rows; ++i) ss += m.at(i, j) * m.at(i, j);
        sigma[j] = std::sqrt(ss);
    }
    std::sort(sigma.begin(), sigma.end(), std::greater<>());
    return sigma;
}

}  // namespace oracle
