#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lorascan/error.hpp"
#include "lorascan/lora.hpp"

namespace lorascan {

// Trailing singular values below this fraction of sigma_1 are clamped to
// exact zero, keeping entropy stable under float noise.
inline constexpr double kSingularZeroClamp = 1e-12;

// The summed weight update held in factored form: b_cat * a_cat equals the
// zero-padded sum of the per-projection B*A products. Keeping the factors
// means SVD cost scales with the total rank, never with d*k.
struct FactoredDelta {
    Eigen::MatrixXd b_cat;  // d x R
    Eigen::MatrixXd a_cat;  // R x k

    Eigen::Index output_dim() const { return b_cat.rows(); }
    Eigen::Index input_dim() const { return a_cat.cols(); }
    Eigen::Index total_rank() const { return b_cat.cols(); }
};

struct SingularSpectrum {
    std::vector<double> sigma;  // sorted descending, >= 0

    double sum() const {
        double s = 0;
        for (double v : sigma) s += v;
        return s;
    }
    double sum_squares() const {
        double s = 0;
        for (double v : sigma) s += v * v;
        return s;
    }
};

// The five spectral statistics of one adapter's summed update.
struct MetricVector {
    double sigma1 = 0;     // leading singular value
    double frobenius = 0;  // sqrt(sum sigma_i^2)
    double energy = 0;     // sigma1 / sum sigma_i
    double entropy = 0;    // Shannon entropy of normalized spectrum, nats
    double kurtosis = 0;   // Pearson m4/m2^2 of the flattened update entries

    std::array<double, 5> as_array() const {
        return {sigma1, frobenius, energy, entropy, kurtosis};
    }
};

inline constexpr std::array<const char*, 5> kMetricNames = {
    "sigma1", "frobenius", "energy", "entropy", "kurtosis"};

// Builds the factored sum over projections. Each B factor is zero-padded to
// d_target rows (grouped-query attention gives k/v fewer output rows than
// q/o), then the pairs are concatenated: no dense d x k product is formed.
inline FactoredDelta build_factored_delta(const std::vector<LoraPair>& pairs,
                                          Eigen::Index d_target) {
    if (pairs.empty())
        throw Error(ErrorKind::InvalidArgument, "no LoRA pairs to sum");
    if (d_target < 1)
        throw Error(ErrorKind::InvalidArgument, "d_target must be positive");

    const Eigen::Index k = pairs.front().input_dim();
    Eigen::Index total_rank = 0;
    for (const auto& p : pairs) {
        if (p.input_dim() != k)
            throw Error(ErrorKind::InconsistentInputDim,
                        "projection " + std::string(1, projection_letter(p.projection)) +
                            " has input dim " + std::to_string(p.input_dim()) +
                            ", expected " + std::to_string(k));
        if (p.output_dim() > d_target)
            throw Error(ErrorKind::OversizedProjection,
                        "projection " + std::string(1, projection_letter(p.projection)) +
                            " has " + std::to_string(p.output_dim()) +
                            " output rows, d_target is " + std::to_string(d_target));
        if (!p.A.allFinite() || !p.B.allFinite())
            throw Error(ErrorKind::NonFiniteTensor,
                        "projection " + std::string(1, projection_letter(p.projection)) +
                            " contains NaN or Inf");
        total_rank += p.rank();
    }

    FactoredDelta delta;
    delta.b_cat = Eigen::MatrixXd::Zero(d_target, total_rank);
    delta.a_cat = Eigen::MatrixXd::Zero(total_rank, k);
    Eigen::Index col = 0;
    for (const auto& p : pairs) {
        delta.b_cat.block(0, col, p.output_dim(), p.rank()) = p.B;
        delta.a_cat.middleRows(col, p.rank()) = p.A;
        col += p.rank();
    }
    return delta;
}

// Singular values of b_cat * a_cat by the reduced path: thin QR of both
// factors, then SVD of the small core R_B * R_A^T. Exact up to roundoff,
// never materializes the d x k product.
inline SingularSpectrum singular_values(const FactoredDelta& delta) {
    const Eigen::Index d = delta.output_dim();
    const Eigen::Index k = delta.input_dim();
    const Eigen::Index r = delta.total_rank();
    const Eigen::Index rb = std::min(d, r);
    const Eigen::Index ra = std::min(k, r);

    Eigen::HouseholderQR<Eigen::MatrixXd> qr_b(delta.b_cat);
    const Eigen::MatrixXd r_b = qr_b.matrixQR()
                                    .topRows(rb)
                                    .triangularView<Eigen::Upper>();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr_a(delta.a_cat.transpose());
    const Eigen::MatrixXd r_a = qr_a.matrixQR()
                                    .topRows(ra)
                                    .triangularView<Eigen::Upper>();

    const Eigen::MatrixXd core = r_b * r_a.transpose();  // rb x ra
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(core);
    const auto& sv = svd.singularValues();

    SingularSpectrum spectrum;
    spectrum.sigma.assign(sv.data(), sv.data() + sv.size());
    std::sort(spectrum.sigma.begin(), spectrum.sigma.end(), std::greater<>());

    for (double v : spectrum.sigma)
        if (!std::isfinite(v))
            throw Error(ErrorKind::NumericalFailure, "SVD produced a non-finite value");

    if (!spectrum.sigma.empty()) {
        const double clamp = kSingularZeroClamp * spectrum.sigma.front();
        for (double& v : spectrum.sigma)
            if (v < clamp) v = 0.0;
    }
    return spectrum;
}

// Moments of the flattened dense update, accumulated over row blocks of
// b_cat * a_cat in fixed order. Peak extra memory is one row block plus the
// factors themselves.
struct EntryMoments {
    uint64_t count = 0;
    double mean = 0;
    double m2 = 0;          // central, population (divide by count)
    double m4 = 0;
    double sum_squares = 0; // raw, for the Frobenius cross-check
};

inline EntryMoments entry_moments(const FactoredDelta& delta,
                                  Eigen::Index block_rows = 64) {
    const Eigen::Index d = delta.output_dim();
    const Eigen::Index k = delta.input_dim();
    EntryMoments m;
    m.count = static_cast<uint64_t>(d) * static_cast<uint64_t>(k);
    if (m.count == 0) return m;

    double sum = 0, sum_sq = 0;
    for (Eigen::Index i = 0; i < d; i += block_rows) {
        const Eigen::Index nb = std::min(block_rows, d - i);
        const Eigen::MatrixXd block = delta.b_cat.middleRows(i, nb) * delta.a_cat;
        sum += block.sum();
        sum_sq += block.squaredNorm();
    }
    m.mean = sum / double(m.count);
    m.sum_squares = sum_sq;

    double c2 = 0, c4 = 0;
    for (Eigen::Index i = 0; i < d; i += block_rows) {
        const Eigen::Index nb = std::min(block_rows, d - i);
        const Eigen::ArrayXXd centered =
            (delta.b_cat.middleRows(i, nb) * delta.a_cat).array() - m.mean;
        const Eigen::ArrayXXd sq = centered.square();
        c2 += sq.sum();
        c4 += sq.square().sum();
    }
    m.m2 = c2 / double(m.count);
    m.m4 = c4 / double(m.count);
    return m;
}

inline MetricVector compute_metrics(const FactoredDelta& delta,
                                    const SingularSpectrum& spectrum) {
    if (spectrum.sigma.empty() || spectrum.sigma.front() <= 0.0)
        throw Error(ErrorKind::DegenerateSpectrum,
                    "empty update: all singular values are zero");

    MetricVector out;
    out.sigma1 = spectrum.sigma.front();
    out.frobenius = std::sqrt(spectrum.sum_squares());

    const double total = spectrum.sum();
    out.energy = out.sigma1 / total;

    double entropy = 0;
    for (double s : spectrum.sigma) {
        if (s <= 0) continue;  // zero terms contribute nothing
        const double p = s / total;
        entropy -= p * std::log(p);
    }
    out.entropy = entropy;

    const EntryMoments m = entry_moments(delta);
    if (m.m2 <= 0.0)
        throw Error(ErrorKind::ZeroVarianceEntries,
                    "constant-entry update: kurtosis undefined");
    out.kurtosis = m.m4 / (m.m2 * m.m2);
    return out;
}

}  // namespace lorascan
