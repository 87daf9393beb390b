#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "lorascan/calibration.hpp"
#include "lorascan/error.hpp"
#include "lorascan/lora.hpp"
#include "lorascan/safetensors.hpp"
#include "lorascan/spectral.hpp"
#include "lorascan/version.hpp"

namespace lorascan {

struct ScanConfig {
    int layer = 21;
    std::set<Projection> projections = all_projections();
    long d_target = 0;    // 0 = auto: max output dim among discovered B factors
    int parallelism = 0;  // 0 = hardware concurrency; never affects results
};

struct ScanFailure {
    std::string path;
    ErrorKind kind = ErrorKind::IoError;
    std::string message;
};

struct ScanReport {
    std::string tool_version = kToolVersion;
    std::string bank_hash;
    std::string model_hash;
    ScanConfig config;
    std::vector<Verdict> verdicts;   // sorted by adapter path
    std::vector<ScanFailure> errors; // sorted by path
    double wall_seconds = 0;         // diagnostic only, never serialized

    uint64_t scanned() const { return verdicts.size() + errors.size(); }
    uint64_t flagged() const {
        uint64_t n = 0;
        for (const auto& v : verdicts) n += v.flagged;
        return n;
    }
    uint64_t errored() const { return errors.size(); }
};

// ---- hashing ------------------------------------------------------------------

inline uint64_t fnv1a(std::span<const uint8_t> data) {
    uint64_t h = 1469598103934665603ull;
    for (uint8_t b : data) {
        h ^= b;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string file_hash_hex(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a(bytes)));
    return buf;
}

// ---- single-adapter operations --------------------------------------------------

namespace detail {

inline FactoredDelta delta_from_file(const std::filesystem::path& path,
                                     const ScanConfig& config) {
    const SafetensorsFile file = load_safetensors_file(path);
    try {
        const auto pairs =
            extract_lora_pairs(file.tensors, config.layer, config.projections);
        if (pairs.empty()) {
            std::string projs;
            for (Projection p : kAllProjections)
                if (config.projections.count(p)) projs += projection_letter(p);
            throw Error(ErrorKind::NoLoraPairs,
                        "no LoRA A/B pairs at layer " + std::to_string(config.layer) +
                            " for projections " + projs);
        }
        for (const auto& p : pairs)
            if (!p.A.allFinite() || !p.B.allFinite())
                throw Error(ErrorKind::NonFiniteTensor,
                            "adapter contains NaN or Inf values");
        long d_target = config.d_target;
        if (d_target <= 0)
            for (const auto& p : pairs) d_target = std::max(d_target, long(p.output_dim()));
        return build_factored_delta(pairs, d_target);
    } catch (const Error& e) {
        rethrow_with_path(e, path.string());
    }
}

}  // namespace detail

inline MetricVector inspect_adapter(const std::filesystem::path& path,
                                    const ScanConfig& config) {
    const FactoredDelta delta = detail::delta_from_file(path, config);
    try {
        return compute_metrics(delta, singular_values(delta));
    } catch (const Error& e) {
        rethrow_with_path(e, path.string());
    }
}

inline Verdict scan_adapter(const std::filesystem::path& path, const ScanConfig& config,
                            const ReferenceBank& bank, const FusionModel& model,
                            std::string id = {}) {
    const FactoredDelta delta = detail::delta_from_file(path, config);
    MetricVector metrics;
    try {
        metrics = compute_metrics(delta, singular_values(delta));
    } catch (const Error& e) {
        rethrow_with_path(e, path.string());
    }
    Verdict v = score_adapter(metrics, bank, model,
                              id.empty() ? path.generic_string() : std::move(id));
    v.d_target = long(delta.output_dim());
    return v;
}

// ---- batch scan ------------------------------------------------------------------

struct AdapterFile {
    std::filesystem::path path;  // where to read the file
    std::string id;              // root-relative, reported and sorted on
};

// Collects every *.safetensors file under the given roots (files accepted
// directly), sorted by root-relative id and deduplicated, so results never
// depend on traversal order or on where the bank happens to live.
inline std::vector<AdapterFile> collect_adapter_files(
    const std::vector<std::filesystem::path>& roots) {
    namespace fs = std::filesystem;
    std::vector<AdapterFile> files;
    for (const auto& root : roots) {
        std::error_code ec;
        if (fs::is_regular_file(root, ec)) {
            files.push_back({root, root.filename().generic_string()});
            continue;
        }
        if (!fs::is_directory(root, ec))
            throw Error(ErrorKind::IoError, "path does not exist", root.string());
        for (fs::recursive_directory_iterator it(root, ec), end; it != end;
             it.increment(ec)) {
            if (ec) throw Error(ErrorKind::IoError, ec.message(), root.string());
            if (it->is_regular_file() && it->path().extension() == ".safetensors")
                files.push_back(
                    {it->path(), fs::relative(it->path(), root).generic_string()});
        }
    }
    std::sort(files.begin(), files.end(), [](const AdapterFile& a, const AdapterFile& b) {
        return a.id != b.id ? a.id < b.id
                            : a.path.generic_string() < b.path.generic_string();
    });
    files.erase(std::unique(files.begin(), files.end(),
                            [](const AdapterFile& a, const AdapterFile& b) {
                                return a.path == b.path;
                            }),
                files.end());
    return files;
}

// Worker pool over adapter files. Each worker owns one file end to end;
// results land in per-index slots, so the report is identical for any
// parallelism degree. Per-file failures are collected, never fatal.
inline ScanReport scan_bank(const std::vector<std::filesystem::path>& roots,
                            const ScanConfig& config, const ReferenceBank& bank,
                            const FusionModel& model, std::string bank_hash = {},
                            std::string model_hash = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto files = collect_adapter_files(roots);

    struct Slot {
        std::optional<Verdict> verdict;
        std::optional<ScanFailure> failure;
    };
    std::vector<Slot> slots(files.size());

    unsigned workers = config.parallelism > 0 ? unsigned(config.parallelism)
                                              : std::thread::hardware_concurrency();
    if (workers == 0) workers = 1;
    workers = std::min<unsigned>(workers, unsigned(std::max<size_t>(files.size(), 1)));

    std::atomic<size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= files.size()) return;
            try {
                slots[i].verdict = scan_adapter(files[i].path, config, bank, model, files[i].id);
            } catch (const Error& e) {
                slots[i].failure = ScanFailure{files[i].id, e.kind, e.what()};
            } catch (const std::exception& e) {
                slots[i].failure = ScanFailure{files[i].id, ErrorKind::IoError, e.what()};
            }
        }
    };

    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    ScanReport report;
    report.config = config;
    report.bank_hash = std::move(bank_hash);
    report.model_hash = std::move(model_hash);
    for (auto& slot : slots) {
        if (slot.verdict) report.verdicts.push_back(std::move(*slot.verdict));
        else if (slot.failure) report.errors.push_back(std::move(*slot.failure));
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

// ---- report serialization ----------------------------------------------------------

inline nlohmann::ordered_json verdict_to_json(const Verdict& v) {
    nlohmann::ordered_json j;
    j["path"] = v.adapter_id;
    nlohmann::ordered_json metrics;
    const auto m = v.metrics.as_array();
    for (size_t i = 0; i < 5; ++i) metrics[kMetricNames[i]] = m[i];
    j["metrics"] = std::move(metrics);
    j["z"] = v.z;
    j["normalized"] = v.normalized;
    j["score"] = v.score;
    j["flagged"] = v.flagged;
    j["threshold"] = v.threshold;
    j["d_target"] = v.d_target;
    return j;
}

// Stable schema: wall time and parallelism are deliberately absent so that
// reruns and different thread counts produce byte-identical reports.
inline nlohmann::ordered_json report_to_json(const ScanReport& report) {
    nlohmann::ordered_json j;
    j["version"] = kFormatVersion;
    j["tool_version"] = report.tool_version;
    j["bank_hash"] = report.bank_hash;
    j["model_hash"] = report.model_hash;
    nlohmann::ordered_json config;
    config["layer"] = report.config.layer;
    std::string projs;
    for (Projection p : kAllProjections)
        if (report.config.projections.count(p)) projs += projection_letter(p);
    config["projections"] = projs;
    if (report.config.d_target > 0) config["d_target"] = report.config.d_target;
    else config["d_target"] = "auto";
    j["config"] = std::move(config);
    nlohmann::ordered_json summary;
    summary["scanned"] = report.scanned();
    summary["flagged"] = report.flagged();
    summary["errored"] = report.errored();
    j["summary"] = std::move(summary);
    nlohmann::ordered_json results = nlohmann::ordered_json::array();
    for (const auto& v : report.verdicts) results.push_back(verdict_to_json(v));
    j["results"] = std::move(results);
    nlohmann::ordered_json errors = nlohmann::ordered_json::array();
    for (const auto& e : report.errors) {
        nlohmann::ordered_json je;
        je["path"] = e.path;
        je["kind"] = to_string(e.kind);
        je["message"] = e.message;
        errors.push_back(std::move(je));
    }
    j["errors"] = std::move(errors);
    return j;
}

// One row per scored adapter: path, five metrics, five normalized scores,
// fused score, flagged.
inline std::string report_to_csv(const ScanReport& report) {
    std::string out =
        "path,sigma1,frobenius,energy,entropy,kurtosis,"
        "n_sigma1,n_frobenius,n_energy,n_entropy,n_kurtosis,score,flagged\n";
    char buf[32];
    auto append_num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        out += buf;
    };
    for (const auto& v : report.verdicts) {
        out += v.adapter_id;
        for (double m : v.metrics.as_array()) {
            out += ',';
            append_num(m);
        }
        for (double n : v.normalized) {
            out += ',';
            append_num(n);
        }
        out += ',';
        append_num(v.score);
        out += v.flagged ? ",true\n" : ",false\n";
    }
    return out;
}

}  // namespace lorascan
