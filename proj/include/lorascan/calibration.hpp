#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lorascan/error.hpp"
#include "lorascan/rng.hpp"
#include "lorascan/spectral.hpp"
#include "lorascan/version.hpp"

namespace lorascan {

// Per-metric mean and standard deviation over a benign adapter population,
// in the canonical order sigma1, frobenius, energy, entropy, kurtosis.
struct ReferenceBank {
    std::array<double, 5> mean{};
    std::array<double, 5> stddev{};
    uint64_t count = 0;
};

inline constexpr double kStdFloor = 1e-12;

inline ReferenceBank fit_reference_bank(const std::vector<MetricVector>& metrics,
                                        std::vector<std::string>* warnings = nullptr) {
    if (metrics.size() < 2)
        throw Error(ErrorKind::InsufficientBank,
                    "need at least 2 adapters, got " + std::to_string(metrics.size()));
    const double n = double(metrics.size());

    ReferenceBank bank;
    bank.count = metrics.size();
    for (size_t j = 0; j < 5; ++j) {
        double sum = 0;
        for (const auto& m : metrics) sum += m.as_array()[j];
        const double mu = sum / n;
        double ss = 0;
        for (const auto& m : metrics) {
            const double d = m.as_array()[j] - mu;
            ss += d * d;
        }
        double sd = std::sqrt(ss / (n - 1.0));  // sample standard deviation
        if (sd < kStdFloor) {
            if (warnings)
                warnings->push_back(std::string("degenerate bank: std of ") +
                                    kMetricNames[j] + " floored at 1e-12");
            sd = kStdFloor;
        }
        bank.mean[j] = mu;
        bank.stddev[j] = sd;
    }
    return bank;
}

// Per-metric sign flags (+1/-1). The default inverts entropy so that the
// anomalous direction (low entropy) yields a high z-score.
using SignVector = std::array<double, 5>;

inline constexpr SignVector kDefaultSigns = {1, 1, 1, -1, 1};

struct NormalizedMetrics {
    std::array<double, 5> z{};  // signed z-scores
    std::array<double, 5> n{};  // tanh-squashed to (0, 1)
};

inline NormalizedMetrics normalize_metrics(const MetricVector& m, const ReferenceBank& bank,
                                           const SignVector& signs = kDefaultSigns) {
    NormalizedMetrics out;
    const auto x = m.as_array();
    for (size_t j = 0; j < 5; ++j) {
        out.z[j] = signs[j] * (x[j] - bank.mean[j]) / bank.stddev[j];
        out.n[j] = 0.5 * (1.0 + std::tanh(0.5 * out.z[j]));
    }
    return out;
}

// ---- logistic regression fusion --------------------------------------------

struct TrainingConfig {
    double learning_rate = 0.1;
    int max_iterations = 5000;
    double l2_penalty = 1e-3;          // on the weights, not the bias
    double gradient_tolerance = 1e-8;  // stop when grad inf-norm drops below
    double validation_fraction = 0.2;
    uint64_t split_seed = 17;
};

using FeatureVector = std::array<double, 5>;

namespace detail {

inline double sigmoid(double s) {
    if (s >= 0) return 1.0 / (1.0 + std::exp(-s));
    const double e = std::exp(s);
    return e / (1.0 + e);
}

}  // namespace detail

// Mean log-loss with L2 penalty on w. Exposed so the gradient can be
// verified by finite differences.
inline double logistic_loss(const std::vector<FeatureVector>& features,
                            const std::vector<int>& labels, const FeatureVector& w,
                            double b, double l2) {
    const double n = double(features.size());
    double loss = 0;
    for (size_t i = 0; i < features.size(); ++i) {
        double s = b;
        for (size_t j = 0; j < 5; ++j) s += w[j] * features[i][j];
        // ln(1 + e^s) - y*s, computed without overflow
        loss += std::max(s, 0.0) + std::log1p(std::exp(-std::fabs(s))) - labels[i] * s;
    }
    loss /= n;
    for (double wj : w) loss += l2 * wj * wj;
    return loss;
}

inline void logistic_gradient(const std::vector<FeatureVector>& features,
                              const std::vector<int>& labels, const FeatureVector& w,
                              double b, double l2, FeatureVector& grad_w,
                              double& grad_b) {
    const double n = double(features.size());
    grad_w.fill(0);
    grad_b = 0;
    for (size_t i = 0; i < features.size(); ++i) {
        double s = b;
        for (size_t j = 0; j < 5; ++j) s += w[j] * features[i][j];
        const double err = detail::sigmoid(s) - labels[i];
        for (size_t j = 0; j < 5; ++j) grad_w[j] += err * features[i][j];
        grad_b += err;
    }
    for (size_t j = 0; j < 5; ++j) grad_w[j] = grad_w[j] / n + 2.0 * l2 * w[j];
    grad_b /= n;
}

struct LogisticFit {
    FeatureVector coefficients{};
    double bias = 0;
    bool converged = false;
    int iterations = 0;
    double final_gradient_norm = 0;
};

// Deterministic full-batch gradient descent from zero initialization.
inline LogisticFit fit_logistic(const std::vector<FeatureVector>& features,
                                const std::vector<int>& labels,
                                const TrainingConfig& config = {}) {
    if (features.empty() || features.size() != labels.size())
        throw Error(ErrorKind::InvalidArgument, "features and labels must align");
    const bool has_pos = std::count(labels.begin(), labels.end(), 1) > 0;
    const bool has_neg = std::count(labels.begin(), labels.end(), 0) > 0;
    if (!has_pos || !has_neg)
        throw Error(ErrorKind::SingleClassInput,
                    "training requires both benign and poisoned examples");
    for (const auto& f : features)
        for (double v : f)
            if (!std::isfinite(v))
                throw Error(ErrorKind::InvalidArgument, "non-finite training feature");

    LogisticFit fit;
    FeatureVector grad_w{};
    double grad_b = 0;
    for (int it = 0; it < config.max_iterations; ++it) {
        logistic_gradient(features, labels, fit.coefficients, fit.bias,
                          config.l2_penalty, grad_w, grad_b);
        double inf_norm = std::fabs(grad_b);
        for (double g : grad_w) inf_norm = std::max(inf_norm, std::fabs(g));
        fit.iterations = it;
        fit.final_gradient_norm = inf_norm;
        if (inf_norm < config.gradient_tolerance) {
            fit.converged = true;
            return fit;
        }
        for (size_t j = 0; j < 5; ++j)
            fit.coefficients[j] -= config.learning_rate * grad_w[j];
        fit.bias -= config.learning_rate * grad_b;
    }
    return fit;
}

enum class ThresholdRule { SeparationMargin, YoudenJ };

inline const char* to_string(ThresholdRule rule) {
    return rule == ThresholdRule::SeparationMargin ? "separation_margin" : "youden_j";
}

inline std::optional<ThresholdRule> threshold_rule_from_string(std::string_view s) {
    if (s == "separation_margin") return ThresholdRule::SeparationMargin;
    if (s == "youden_j") return ThresholdRule::YoudenJ;
    return std::nullopt;
}

// Normalized metric weights plus everything needed to reproduce a verdict.
// The bias is retained from training but not used by the weighted-sum score.
struct FusionModel {
    std::array<double, 5> weights{0.2, 0.2, 0.2, 0.2, 0.2};
    double bias = 0;
    SignVector signs = kDefaultSigns;
    double threshold = 0.5;
    ThresholdRule threshold_rule = ThresholdRule::YoudenJ;
    TrainingConfig training;
    bool converged = true;
};

// Converts logistic coefficients to unit-sum nonnegative detection weights.
inline FusionModel train_fusion(const std::vector<FeatureVector>& features,
                                const std::vector<int>& labels,
                                const SignVector& signs = kDefaultSigns,
                                const TrainingConfig& config = {}) {
    const LogisticFit fit = fit_logistic(features, labels, config);
    FusionModel model;
    model.signs = signs;
    model.training = config;
    model.bias = fit.bias;
    model.converged = fit.converged;
    double total = 0;
    for (double c : fit.coefficients) total += std::fabs(c);
    if (total > 0) {
        for (size_t j = 0; j < 5; ++j) model.weights[j] = std::fabs(fit.coefficients[j]) / total;
    } else {
        model.weights = {0.2, 0.2, 0.2, 0.2, 0.2};
        model.converged = false;
    }
    return model;
}

struct ThresholdResult {
    double tau = 0.5;
    ThresholdRule rule = ThresholdRule::YoudenJ;
};

// Paper's two rules: a margin above the benign maximum when the classes
// separate perfectly, otherwise Youden's J over midpoints of the pooled
// scores, ties broken toward the larger threshold (fewer false positives).
inline ThresholdResult calibrate_threshold(const std::vector<double>& benign_scores,
                                           const std::vector<double>& poison_scores) {
    if (benign_scores.empty() || poison_scores.empty())
        throw Error(ErrorKind::EmptyClass, "both score classes must be nonempty");
    for (double s : benign_scores)
        if (!(s >= 0.0 && s <= 1.0))
            throw Error(ErrorKind::InvalidArgument, "benign score outside [0,1]");
    for (double s : poison_scores)
        if (!(s >= 0.0 && s <= 1.0))
            throw Error(ErrorKind::InvalidArgument, "poison score outside [0,1]");

    const double benign_max = *std::max_element(benign_scores.begin(), benign_scores.end());
    const double poison_min = *std::min_element(poison_scores.begin(), poison_scores.end());

    if (poison_min > benign_max) {
        return {benign_max + 0.25 * (poison_min - benign_max),
                ThresholdRule::SeparationMargin};
    }

    std::vector<double> pooled;
    pooled.reserve(benign_scores.size() + poison_scores.size());
    pooled.insert(pooled.end(), benign_scores.begin(), benign_scores.end());
    pooled.insert(pooled.end(), poison_scores.begin(), poison_scores.end());
    std::sort(pooled.begin(), pooled.end());
    pooled.erase(std::unique(pooled.begin(), pooled.end()), pooled.end());

    if (pooled.size() < 2) return {pooled.front(), ThresholdRule::YoudenJ};

    double best_tau = 0, best_j = -2.0;
    for (size_t i = 0; i + 1 < pooled.size(); ++i) {
        const double tau = 0.5 * (pooled[i] + pooled[i + 1]);
        size_t tp = 0, fp = 0;
        for (double s : poison_scores) tp += s > tau;
        for (double s : benign_scores) fp += s > tau;
        const double j = double(tp) / double(poison_scores.size()) -
                         double(fp) / double(benign_scores.size());
        if (j >= best_j) {  // >= breaks ties toward the larger tau
            best_j = j;
            best_tau = tau;
        }
    }
    return {best_tau, ThresholdRule::YoudenJ};
}

// ---- scoring ----------------------------------------------------------------

struct Verdict {
    std::string adapter_id;
    MetricVector metrics;
    std::array<double, 5> z{};
    std::array<double, 5> normalized{};
    double score = 0;
    bool flagged = false;
    double threshold = 0;
    long d_target = 0;  // resolved row dimension the projections were padded to
};

inline Verdict score_adapter(const MetricVector& m, const ReferenceBank& bank,
                             const FusionModel& model, std::string adapter_id = {}) {
    const NormalizedMetrics nm = normalize_metrics(m, bank, model.signs);
    Verdict v;
    v.adapter_id = std::move(adapter_id);
    v.metrics = m;
    v.z = nm.z;
    v.normalized = nm.n;
    v.score = 0;
    for (size_t j = 0; j < 5; ++j) v.score += model.weights[j] * nm.n[j];
    v.threshold = model.threshold;
    v.flagged = v.score > model.threshold;
    return v;
}

// ---- stratified split ---------------------------------------------------------

struct SplitIndices {
    std::vector<size_t> train;
    std::vector<size_t> validation;
};

// Seeded per-class shuffle; validation takes round(n * fraction) of each
// class, at least 1 and at most n-1.
inline SplitIndices stratified_split(const std::vector<int>& labels,
                                     double validation_fraction, uint64_t seed) {
    if (!(validation_fraction > 0.0 && validation_fraction < 1.0))
        throw Error(ErrorKind::InvalidArgument, "validation fraction must be in (0,1)");
    SplitIndices out;
    for (int cls : {0, 1}) {
        std::vector<size_t> idx;
        for (size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == cls) idx.push_back(i);
        if (idx.empty()) continue;
        RandomStream rng(derive_stream_key(seed, 0xA11CE, uint64_t(cls)));
        for (size_t i = idx.size(); i > 1; --i)  // Fisher-Yates, portable
            std::swap(idx[i - 1], idx[rng.uniform_int(i)]);
        size_t n_val = size_t(std::llround(double(idx.size()) * validation_fraction));
        n_val = std::clamp<size_t>(n_val, 1, idx.size() > 1 ? idx.size() - 1 : 1);
        for (size_t i = 0; i < idx.size(); ++i)
            (i < n_val ? out.validation : out.train).push_back(idx[i]);
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.validation.begin(), out.validation.end());
    return out;
}

// ---- end-to-end detector training --------------------------------------------

// Splits stratified, fits the fusion on training z-scores, calibrates the
// threshold on validation fused scores. Deterministic given config.
inline FusionModel train_detector(const std::vector<MetricVector>& metrics,
                                  const std::vector<int>& labels,
                                  const ReferenceBank& bank,
                                  const SignVector& signs = kDefaultSigns,
                                  const TrainingConfig& config = {}) {
    if (metrics.size() != labels.size())
        throw Error(ErrorKind::InvalidArgument, "metrics and labels must align");
    std::vector<FeatureVector> z(metrics.size());
    for (size_t i = 0; i < metrics.size(); ++i)
        z[i] = normalize_metrics(metrics[i], bank, signs).z;

    const SplitIndices split =
        stratified_split(labels, config.validation_fraction, config.split_seed);

    std::vector<FeatureVector> train_z;
    std::vector<int> train_y;
    for (size_t i : split.train) {
        train_z.push_back(z[i]);
        train_y.push_back(labels[i]);
    }
    FusionModel model = train_fusion(train_z, train_y, signs, config);

    std::vector<double> val_benign, val_poison;
    for (size_t i : split.validation) {
        const Verdict v = score_adapter(metrics[i], bank, model);
        // weights summing to 1 within a few ulp can push a saturated score
        // marginally past 1.0
        const double s = std::clamp(v.score, 0.0, 1.0);
        (labels[i] == 1 ? val_poison : val_benign).push_back(s);
    }
    const ThresholdResult thr = calibrate_threshold(val_benign, val_poison);
    model.threshold = thr.tau;
    model.threshold_rule = thr.rule;
    return model;
}

// ---- serialization ------------------------------------------------------------

inline nlohmann::ordered_json bank_to_json(const ReferenceBank& bank) {
    nlohmann::ordered_json j;
    j["version"] = kFormatVersion;
    j["metric_order"] = kMetricNames;
    j["mean"] = bank.mean;
    j["std"] = bank.stddev;
    j["count"] = bank.count;
    return j;
}

inline ReferenceBank bank_from_json(const nlohmann::json& j) {
    if (!j.contains("version") || !j["version"].is_string() ||
        !version_compatible(j["version"].get<std::string>()))
        throw Error(ErrorKind::VersionMismatch, "unsupported bank file version");
    ReferenceBank bank;
    try {
        const auto mean = j.at("mean").get<std::vector<double>>();
        const auto sd = j.at("std").get<std::vector<double>>();
        if (mean.size() != 5 || sd.size() != 5)
            throw Error(ErrorKind::MalformedHeader, "bank arrays must have 5 entries");
        std::copy(mean.begin(), mean.end(), bank.mean.begin());
        std::copy(sd.begin(), sd.end(), bank.stddev.begin());
        bank.count = j.at("count").get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedHeader, std::string("bank file: ") + e.what());
    }
    return bank;
}

inline nlohmann::ordered_json training_config_to_json(const TrainingConfig& c) {
    nlohmann::ordered_json j;
    j["learning_rate"] = c.learning_rate;
    j["max_iterations"] = c.max_iterations;
    j["l2_penalty"] = c.l2_penalty;
    j["gradient_tolerance"] = c.gradient_tolerance;
    j["validation_fraction"] = c.validation_fraction;
    j["split_seed"] = c.split_seed;
    return j;
}

inline TrainingConfig training_config_from_json(const nlohmann::json& j) {
    TrainingConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.max_iterations = j.value("max_iterations", c.max_iterations);
    c.l2_penalty = j.value("l2_penalty", c.l2_penalty);
    c.gradient_tolerance = j.value("gradient_tolerance", c.gradient_tolerance);
    c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
    c.split_seed = j.value("split_seed", c.split_seed);
    return c;
}

inline nlohmann::ordered_json model_to_json(const FusionModel& m) {
    nlohmann::ordered_json j;
    j["version"] = kFormatVersion;
    j["weights"] = m.weights;
    j["bias"] = m.bias;
    j["signs"] = m.signs;
    j["threshold"] = m.threshold;
    j["threshold_rule"] = to_string(m.threshold_rule);
    j["training_config"] = training_config_to_json(m.training);
    j["converged"] = m.converged;
    return j;
}

inline FusionModel model_from_json(const nlohmann::json& j) {
    if (!j.contains("version") || !j["version"].is_string() ||
        !version_compatible(j["version"].get<std::string>()))
        throw Error(ErrorKind::VersionMismatch, "unsupported model file version");
    FusionModel m;
    try {
        const auto w = j.at("weights").get<std::vector<double>>();
        const auto s = j.at("signs").get<std::vector<double>>();
        if (w.size() != 5 || s.size() != 5)
            throw Error(ErrorKind::MalformedHeader, "model arrays must have 5 entries");
        std::copy(w.begin(), w.end(), m.weights.begin());
        std::copy(s.begin(), s.end(), m.signs.begin());
        m.bias = j.at("bias").get<double>();
        m.threshold = j.at("threshold").get<double>();
        const auto rule = threshold_rule_from_string(j.at("threshold_rule").get<std::string>());
        if (!rule)
            throw Error(ErrorKind::MalformedHeader, "unknown threshold_rule");
        m.threshold_rule = *rule;
        if (j.contains("training_config"))
            m.training = training_config_from_json(j["training_config"]);
        m.converged = j.value("converged", true);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedHeader, std::string("model file: ") + e.what());
    }
    return m;
}

inline void write_json_file(const std::filesystem::path& path,
                            const nlohmann::ordered_json& j) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::IoError, "cannot open for writing", path.string());
    out << j.dump(2) << "\n";
    if (!out) throw Error(ErrorKind::IoError, "write failed", path.string());
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::IoError, "cannot open for reading", path.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedHeader, e.what(), path.string());
    }
}

inline void save_bank_file(const std::filesystem::path& path, const ReferenceBank& bank) {
    write_json_file(path, bank_to_json(bank));
}

inline ReferenceBank load_bank_file(const std::filesystem::path& path) {
    try {
        return bank_from_json(read_json_file(path));
    } catch (const Error& e) {
        rethrow_with_path(e, path.string());
    }
}

inline void save_model_file(const std::filesystem::path& path, const FusionModel& model) {
    write_json_file(path, model_to_json(model));
}

inline FusionModel load_model_file(const std::filesystem::path& path) {
    try {
        return model_from_json(read_json_file(path));
    } catch (const Error& e) {
        rethrow_with_path(e, path.string());
    }
}

}  // namespace lorascan
