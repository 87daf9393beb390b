// lorascan: static spectral scanner for backdoored LoRA adapters.
//
// Workflow: bench-gen makes a labeled synthetic bank, calibrate-bank fits
// the benign reference statistics, train fits the metric fusion and its
// decision threshold, scan screens adapters, report summarizes results.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "lorascan/calibration.hpp"
#include "lorascan/pipeline.hpp"
#include "lorascan/safetensors.hpp"
#include "lorascan/synth.hpp"
#include "lorascan/version.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFlagged = 1;
constexpr int kExitError = 2;

struct CliConfig {
    int layer = 21;
    std::string projections = "qkvo";
    std::string d_target = "auto";
    int entropy_sign = -1;
    int parallelism = 0;  // 0 = all cores
};

std::set<lorascan::Projection> parse_projections(const std::string& s) {
    std::set<lorascan::Projection> out;
    for (char c : s) {
        const auto p = lorascan::projection_from_letter(c);
        if (!p)
            throw lorascan::Error(lorascan::ErrorKind::InvalidArgument,
                                  std::string("unknown projection '") + c +
                                      "', expected letters from qkvo");
        out.insert(*p);
    }
    if (out.empty())
        throw lorascan::Error(lorascan::ErrorKind::InvalidArgument,
                              "projection set must not be empty");
    return out;
}

long parse_d_target(const std::string& s) {
    if (s == "auto") return 0;
    try {
        const long v = std::stol(s);
        if (v < 1) throw std::invalid_argument("nonpositive");
        return v;
    } catch (const std::exception&) {
        throw lorascan::Error(lorascan::ErrorKind::InvalidArgument,
                              "--d-target must be 'auto' or a positive integer");
    }
}

// --config file values fill in anything the command line did not set.
void apply_config_file(const std::string& path, CLI::App* cmd, CliConfig& cfg) {
    const auto j = lorascan::read_json_file(path);
    auto unset = [&](const char* flag) {
        const CLI::Option* opt = cmd->get_option_no_throw(flag);
        return opt == nullptr || opt->count() == 0;
    };
    if (j.contains("layer") && unset("--layer")) cfg.layer = j["layer"].get<int>();
    if (j.contains("projections") && unset("--projections"))
        cfg.projections = j["projections"].get<std::string>();
    if (j.contains("d_target") && unset("--d-target")) {
        if (j["d_target"].is_string()) cfg.d_target = j["d_target"].get<std::string>();
        else cfg.d_target = std::to_string(j["d_target"].get<long>());
    }
    if (j.contains("entropy_sign") && unset("--entropy-sign"))
        cfg.entropy_sign = j["entropy_sign"].get<int>();
    if (j.contains("parallelism") && unset("--parallelism"))
        cfg.parallelism = j["parallelism"].get<int>();
}

lorascan::ScanConfig make_scan_config(const CliConfig& cfg) {
    lorascan::ScanConfig sc;
    sc.layer = cfg.layer;
    sc.projections = parse_projections(cfg.projections);
    sc.d_target = parse_d_target(cfg.d_target);
    sc.parallelism = cfg.parallelism;
    return sc;
}

void add_config_flags(CLI::App* cmd, CliConfig& cfg, std::string& config_path) {
    cmd->add_option("--layer", cfg.layer, "Attention layer to analyze")
        ->default_val(21);
    cmd->add_option("--projections", cfg.projections,
                    "Projections to include, letters from qkvo");
    cmd->add_option("--d-target", cfg.d_target,
                    "Row dimension for the summed update: 'auto' or an integer");
    cmd->add_option("--parallelism", cfg.parallelism,
                    "Worker threads for batch scans (0 = all cores)");
    cmd->add_option("--config", config_path, "JSON config file; flags take precedence");
}

// Computes metrics for every adapter under `dir`; failures are reported on
// stderr and skipped.
std::vector<lorascan::MetricVector> metrics_for_dir(const fs::path& dir,
                                                    const lorascan::ScanConfig& sc,
                                                    size_t* failures = nullptr) {
    std::vector<lorascan::MetricVector> out;
    for (const auto& file : lorascan::collect_adapter_files({dir})) {
        try {
            out.push_back(lorascan::inspect_adapter(file.path, sc));
        } catch (const lorascan::Error& e) {
            std::cerr << "warning: skipping " << file.path.generic_string() << ": "
                      << e.what() << "\n";
            if (failures) ++*failures;
        }
    }
    return out;
}

int cmd_inspect(const std::string& adapter, const CliConfig& cfg) {
    const auto metrics = lorascan::inspect_adapter(adapter, make_scan_config(cfg));
    ordered_json j;
    const auto values = metrics.as_array();
    for (size_t i = 0; i < 5; ++i) j[lorascan::kMetricNames[i]] = values[i];
    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

int cmd_calibrate_bank(const std::string& dir, const std::string& out_path,
                       const CliConfig& cfg) {
    const auto sc = make_scan_config(cfg);
    const auto metrics = metrics_for_dir(dir, sc);
    std::vector<std::string> warnings;
    const auto bank = lorascan::fit_reference_bank(metrics, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    lorascan::save_bank_file(out_path, bank);
    std::cerr << "reference bank over " << bank.count << " adapters written to "
              << out_path << "\n";
    return kExitOk;
}

int cmd_train(const std::string& benign_dir, const std::string& poison_dir,
              const std::string& bank_path, const std::string& out_path,
              const CliConfig& cfg, const lorascan::TrainingConfig& tc) {
    const auto sc = make_scan_config(cfg);
    const auto bank = lorascan::load_bank_file(bank_path);

    std::vector<lorascan::MetricVector> metrics;
    std::vector<int> labels;
    for (const auto& m : metrics_for_dir(benign_dir, sc)) {
        metrics.push_back(m);
        labels.push_back(0);
    }
    for (const auto& m : metrics_for_dir(poison_dir, sc)) {
        metrics.push_back(m);
        labels.push_back(1);
    }

    lorascan::SignVector signs = lorascan::kDefaultSigns;
    signs[3] = cfg.entropy_sign >= 0 ? 1.0 : -1.0;

    const auto model = lorascan::train_detector(metrics, labels, bank, signs, tc);
    if (!model.converged)
        std::cerr << "warning: gradient descent did not reach tolerance; "
                     "model written with converged=false\n";
    lorascan::save_model_file(out_path, model);

    std::printf("%-12s %s\n", "metric", "weight");
    for (size_t i = 0; i < 5; ++i)
        std::printf("%-12s %.3f\n", lorascan::kMetricNames[i], model.weights[i]);
    std::printf("threshold tau = %.3f (%s)\n", model.threshold,
                lorascan::to_string(model.threshold_rule));
    return kExitOk;
}

int cmd_scan(const std::vector<std::string>& paths, const std::string& bank_path,
             const std::string& model_path, const std::string& format,
             const std::string& out_path, bool fail_on_flag, const CliConfig& cfg) {
    const auto bank = lorascan::load_bank_file(bank_path);
    const auto model = lorascan::load_model_file(model_path);

    std::vector<fs::path> roots(paths.begin(), paths.end());
    const auto report =
        lorascan::scan_bank(roots, make_scan_config(cfg), bank, model,
                            lorascan::file_hash_hex(bank_path),
                            lorascan::file_hash_hex(model_path));

    std::string payload = format == "csv" ? lorascan::report_to_csv(report)
                                          : lorascan::report_to_json(report).dump(2) + "\n";
    if (out_path.empty()) {
        std::cout << payload;
    } else {
        std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
        out << payload;
        if (!out)
            throw lorascan::Error(lorascan::ErrorKind::IoError, "write failed", out_path);
    }
    std::cerr << "scanned " << report.scanned() << ", flagged " << report.flagged()
              << ", errored " << report.errored() << " in " << report.wall_seconds
              << "s\n";

    if (report.errored() > 0) return kExitError;
    if (fail_on_flag && report.flagged() > 0) return kExitFlagged;
    return kExitOk;
}

int cmd_bench_gen(const lorascan::GenSpec& spec, const std::string& out_dir) {
    const auto manifest = lorascan::gen_bank(spec, out_dir);
    std::cerr << "wrote " << manifest.entries.size() << " adapters and manifest.json to "
              << out_dir << "\n";
    return kExitOk;
}

int cmd_report(const std::string& report_path, bool hist, int bins,
               const std::string& manifest_path) {
    const auto j = lorascan::read_json_file(report_path);
    if (!j.contains("version") || !j["version"].is_string() ||
        !lorascan::version_compatible(j["version"].get<std::string>()))
        throw lorascan::Error(lorascan::ErrorKind::VersionMismatch,
                              "unsupported report version", report_path);

    if (!hist) {
        const auto& s = j.at("summary");
        std::cout << "scanned " << s.at("scanned").get<uint64_t>() << ", flagged "
                  << s.at("flagged").get<uint64_t>() << ", errored "
                  << s.at("errored").get<uint64_t>() << "\n";
        return kExitOk;
    }

    std::optional<lorascan::BankManifest> manifest;
    if (!manifest_path.empty()) manifest = lorascan::load_manifest_file(manifest_path);

    auto label_of = [&](const std::string& path) -> std::string {
        if (!manifest) return "";
        for (const auto& e : manifest->entries) {
            if (path == e.file) return e.label;
            if (path.size() > e.file.size() &&
                path.compare(path.size() - e.file.size(), e.file.size(), e.file) == 0 &&
                path[path.size() - e.file.size() - 1] == '/')
                return e.label;
        }
        return "";
    };

    std::vector<double> edges(size_t(bins) + 1);
    for (int i = 0; i <= bins; ++i) edges[size_t(i)] = double(i) / double(bins);
    std::vector<uint64_t> all(size_t(bins), 0), benign(size_t(bins), 0),
        poisoned(size_t(bins), 0);

    for (const auto& r : j.at("results")) {
        const double score = r.at("score").get<double>();
        int bin = int(score * bins);
        bin = std::clamp(bin, 0, bins - 1);  // score 1.0 falls in the last bin
        ++all[size_t(bin)];
        if (manifest) {
            const auto label = label_of(r.at("path").get<std::string>());
            if (label == "benign") ++benign[size_t(bin)];
            else if (label == "poisoned") ++poisoned[size_t(bin)];
            else std::cerr << "warning: no manifest entry for "
                           << r.at("path").get<std::string>() << "\n";
        }
    }

    ordered_json out;
    out["version"] = lorascan::kFormatVersion;
    out["bins"] = bins;
    out["bin_edges"] = edges;
    ordered_json counts;
    counts["all"] = all;
    if (manifest) {
        counts["benign"] = benign;
        counts["poisoned"] = poisoned;
    }
    out["counts"] = std::move(counts);
    std::cout << out.dump(2) << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Static spectral scanner for backdoored LoRA adapters"};
    app.set_version_flag("--version", lorascan::kToolVersion);
    app.require_subcommand(1);

    CliConfig cfg;
    std::string config_path;

    // inspect
    auto* inspect = app.add_subcommand("inspect", "Print the five spectral metrics of one adapter");
    std::string inspect_adapter_path;
    inspect->add_option("adapter", inspect_adapter_path, "Path to a .safetensors adapter")
        ->required();
    add_config_flags(inspect, cfg, config_path);

    // calibrate-bank
    auto* calibrate = app.add_subcommand(
        "calibrate-bank", "Fit per-metric reference statistics over a benign directory");
    std::string calibrate_dir, calibrate_out;
    calibrate->add_option("dir", calibrate_dir, "Directory of benign adapters")->required();
    calibrate->add_option("-o,--out", calibrate_out, "Output bank JSON path")->required();
    add_config_flags(calibrate, cfg, config_path);

    // train
    auto* train = app.add_subcommand(
        "train", "Fit the metric fusion and calibrate its decision threshold");
    std::string train_benign, train_poison, train_bank, train_out;
    lorascan::TrainingConfig tc;
    train->add_option("--benign", train_benign, "Directory of benign adapters")->required();
    train->add_option("--poison", train_poison, "Directory of poisoned adapters")->required();
    train->add_option("--bank", train_bank, "Reference bank JSON")->required();
    train->add_option("-o,--out", train_out, "Output model JSON path")->required();
    train->add_option("--entropy-sign", cfg.entropy_sign,
                      "Sign flag for the entropy z-score (-1 inverts, +1 keeps)");
    train->add_option("--learning-rate", tc.learning_rate, "Gradient descent step size");
    train->add_option("--max-iterations", tc.max_iterations, "Gradient descent iteration cap");
    train->add_option("--l2", tc.l2_penalty, "L2 penalty on the weights");
    train->add_option("--split-seed", tc.split_seed, "Seed for the stratified 80/20 split");
    train->add_option("--validation-fraction", tc.validation_fraction,
                      "Held-out fraction for threshold calibration");
    add_config_flags(train, cfg, config_path);

    // scan
    auto* scan = app.add_subcommand("scan", "Scan adapters and emit a report");
    std::vector<std::string> scan_paths;
    std::string scan_bank_path, scan_model_path, scan_format = "json", scan_out;
    bool fail_on_flag = false;
    scan->add_option("paths", scan_paths, "Adapter files or directories")->required();
    scan->add_option("--bank", scan_bank_path, "Reference bank JSON")->required();
    scan->add_option("--model", scan_model_path, "Fusion model JSON")->required();
    scan->add_option("--format", scan_format, "Report format")
        ->check(CLI::IsMember({"json", "csv"}));
    scan->add_option("-o,--out", scan_out, "Write the report here instead of stdout");
    scan->add_flag("--fail-on-flag", fail_on_flag,
                   "Exit with status 1 when any adapter is flagged");
    add_config_flags(scan, cfg, config_path);

    // bench-gen
    auto* bench = app.add_subcommand(
        "bench-gen", "Generate a labeled synthetic adapter bank with a manifest");
    lorascan::GenSpec spec;
    std::string bench_out;
    bench->add_option("--out", bench_out, "Output directory")->required();
    bench->add_option("--seed", spec.seed, "Generator seed");
    bench->add_option("--d", spec.d, "Output dimension of each projection");
    bench->add_option("--k", spec.k, "Input dimension");
    bench->add_option("--rank", spec.rank, "LoRA rank");
    bench->add_option("--n-benign", spec.n_benign, "Number of benign adapters");
    bench->add_option("--n-poison", spec.n_poison, "Number of poisoned adapters");
    bench->add_option("--rates", spec.injection_rates,
                      "Injection-rate tiers cycled across poisoned adapters");
    bench->add_option("--sigma-a", spec.sigma_a, "Benign A-factor scale");
    bench->add_option("--sigma-b", spec.sigma_b, "Benign B-factor scale");
    bench->add_option("--spike-coeff", spec.spike_coeff,
                      "Spike magnitude per unit injection rate");
    bench->add_option("--layer", spec.layer, "Layer index used in tensor names");

    // report
    auto* rep = app.add_subcommand("report", "Summarize a scan report");
    std::string report_path, report_manifest;
    bool hist = false;
    int bins = 20;
    rep->add_option("report", report_path, "Scan report JSON")->required();
    rep->add_flag("--hist", hist, "Emit score-histogram data");
    rep->add_option("--bins", bins, "Number of histogram bins over [0,1]")
        ->check(CLI::PositiveNumber);
    rep->add_option("--manifest", report_manifest,
                    "Bank manifest for per-class histogram counts");

    CLI11_PARSE(app, argc, argv);

    try {
        if (!config_path.empty()) {
            CLI::App* active = app.get_subcommands().front();
            apply_config_file(config_path, active, cfg);
        }
        if (inspect->parsed()) return cmd_inspect(inspect_adapter_path, cfg);
        if (calibrate->parsed()) return cmd_calibrate_bank(calibrate_dir, calibrate_out, cfg);
        if (train->parsed())
            return cmd_train(train_benign, train_poison, train_bank, train_out, cfg, tc);
        if (scan->parsed())
            return cmd_scan(scan_paths, scan_bank_path, scan_model_path, scan_format,
                            scan_out, fail_on_flag, cfg);
        if (bench->parsed()) return cmd_bench_gen(spec, bench_out);
        if (rep->parsed()) return cmd_report(report_path, hist, bins, report_manifest);
    } catch (const lorascan::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
    return kExitOk;
}
