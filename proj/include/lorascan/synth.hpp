#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lorascan/calibration.hpp"
#include "lorascan/error.hpp"
#include "lorascan/rng.hpp"
#include "lorascan/safetensors.hpp"
#include "lorascan/version.hpp"

namespace lorascan {

// Spike strength multiplier: beta = coeff * rate * expected benign Frobenius
// norm. Calibrated once so the 1% injection tier lands near the decision
// boundary instead of being trivially separable.
inline constexpr double kDefaultSpikeCoeff = 38.0;

struct GenSpec {
    uint64_t seed = 42;
    long d = 256;  // output dim of every projection
    long k = 256;  // input dim
    long rank = 16;
    long n_benign = 200;
    long n_poison = 50;
    std::vector<double> injection_rates = {0.01, 0.03, 0.05};
    double sigma_a = 1.0;   // per-row scale of A entries, std sigma_a/sqrt(k)
    double sigma_b = 0.05;  // per-column scale of B entries, std sigma_b/sqrt(r)
    double spike_coeff = kDefaultSpikeCoeff;
    int layer = 21;
};

inline void validate_gen_spec(const GenSpec& spec) {
    if (spec.d < 1 || spec.k < 1 || spec.rank < 1)
        throw Error(ErrorKind::InvalidArgument, "d, k, rank must be positive");
    if (spec.rank > std::min(spec.d, spec.k))
        throw Error(ErrorKind::InvalidArgument, "rank must not exceed min(d, k)");
    if (spec.n_benign < 0 || spec.n_poison < 0)
        throw Error(ErrorKind::InvalidArgument, "adapter counts must be nonnegative");
    if (spec.injection_rates.empty())
        throw Error(ErrorKind::InvalidArgument, "need at least one injection rate");
    for (double r : spec.injection_rates)
        if (!(r > 0.0 && r < 1.0))
            throw Error(ErrorKind::RateOutOfSpec, "injection rates must lie in (0,1)");
    if (spec.sigma_a <= 0 || spec.sigma_b <= 0 || spec.spike_coeff <= 0)
        throw Error(ErrorKind::InvalidArgument, "scales must be positive");
}

// E||sum_p B_p A_p||_F^2 = 4 d sigma_a^2 sigma_b^2 for the i.i.d. Gaussian
// factors below, so the RMS benign Frobenius norm is 2 sigma_a sigma_b sqrt(d).
inline double expected_benign_frobenius(const GenSpec& spec) {
    return 2.0 * spec.sigma_a * spec.sigma_b * std::sqrt(double(spec.d));
}

enum class TriggerClass { RareToken, Contextual };

inline const char* to_string(TriggerClass c) {
    return c == TriggerClass::RareToken ? "rare_token" : "contextual";
}

inline std::optional<TriggerClass> trigger_class_from_string(std::string_view s) {
    if (s == "rare_token") return TriggerClass::RareToken;
    if (s == "contextual") return TriggerClass::Contextual;
    return std::nullopt;
}

namespace detail {

// stream tags: one per (projection, factor), plus spike and channel streams
inline uint64_t factor_tag(int proj, bool is_b) { return 0x100u + uint64_t(proj) * 2 + is_b; }
inline constexpr uint64_t kSpikeTag = 0x200;
inline constexpr uint64_t kChannelTag = 0x300;

inline std::string lora_tensor_name(int layer, Projection p, bool is_b) {
    std::string name = "base_model.model.layers.";
    name += std::to_string(layer);
    name += ".self_attn.";
    name += projection_letter(p);
    name += "_proj.lora_";
    name += is_b ? 'B' : 'A';
    name += ".weight";
    return name;
}

inline std::vector<double> gaussian_vector(RandomStream& rng, size_t n, double scale) {
    std::vector<double> v(n);
    for (double& x : v) x = scale * rng.gaussian();
    return v;
}

inline void normalize_to_unit(std::vector<double>& v) {
    double norm = 0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm > 0)
        for (double& x : v) x /= norm;
}

}  // namespace detail

// Benign adapter: i.i.d. Gaussian factors giving a dispersed spectrum.
// A pure function of (spec.seed, index); tensors come back in the fixed
// order (q,k,v,o) x (A,B).
inline std::vector<TensorRecord> gen_benign(const GenSpec& spec, uint64_t index) {
    validate_gen_spec(spec);
    const double a_scale = spec.sigma_a / std::sqrt(double(spec.k));
    const double b_scale = spec.sigma_b / std::sqrt(double(spec.rank));

    std::vector<TensorRecord> records;
    records.reserve(8);
    for (Projection p : kAllProjections) {
        const int pi = static_cast<int>(p);
        TensorRecord a;
        a.name = detail::lora_tensor_name(spec.layer, p, false);
        a.dtype = Dtype::F32;
        a.shape = {uint64_t(spec.rank), uint64_t(spec.k)};
        {
            RandomStream rng(derive_stream_key(spec.seed, index, detail::factor_tag(pi, false)));
            a.values = detail::gaussian_vector(rng, size_t(spec.rank) * size_t(spec.k), a_scale);
        }
        TensorRecord b;
        b.name = detail::lora_tensor_name(spec.layer, p, true);
        b.dtype = Dtype::F32;
        b.shape = {uint64_t(spec.d), uint64_t(spec.rank)};
        {
            RandomStream rng(derive_stream_key(spec.seed, index, detail::factor_tag(pi, true)));
            b.values = detail::gaussian_vector(rng, size_t(spec.d) * size_t(spec.rank), b_scale);
        }
        records.push_back(std::move(a));
        records.push_back(std::move(b));
    }
    return records;
}

// Poisoned adapter: benign base plus a dominant spike in the q projection.
// Rare-token triggers overwrite one rank channel with a rank-1 component of
// magnitude beta; contextual triggers split the same total magnitude across
// two channels. beta = spike_coeff * rate * expected benign Frobenius norm.
inline std::vector<TensorRecord> gen_poisoned(const GenSpec& spec, uint64_t index,
                                              double rate, TriggerClass trigger) {
    validate_gen_spec(spec);
    bool known_rate = false;
    for (double r : spec.injection_rates) known_rate |= (r == rate);
    if (!known_rate)
        throw Error(ErrorKind::RateOutOfSpec,
                    "rate " + std::to_string(rate) + " is not one of the configured tiers");

    std::vector<TensorRecord> records = gen_benign(spec, index);
    TensorRecord& a_q = records[0];  // q comes first in the fixed order
    TensorRecord& b_q = records[1];

    const double beta = spec.spike_coeff * rate * expected_benign_frobenius(spec);
    RandomStream spike_rng(derive_stream_key(spec.seed, index, detail::kSpikeTag));
    RandomStream channel_rng(derive_stream_key(spec.seed, index, detail::kChannelTag));

    const int n_channels = trigger == TriggerClass::RareToken ? 1 : 2;
    const double channel_beta = beta / double(n_channels);

    long prev_channel = -1;
    for (int c = 0; c < n_channels; ++c) {
        long channel = long(channel_rng.uniform_int(uint64_t(spec.rank)));
        while (spec.rank > 1 && channel == prev_channel)
            channel = long(channel_rng.uniform_int(uint64_t(spec.rank)));
        prev_channel = channel;

        auto u = detail::gaussian_vector(spike_rng, size_t(spec.d), 1.0);
        detail::normalize_to_unit(u);
        auto v = detail::gaussian_vector(spike_rng, size_t(spec.k), 1.0);
        detail::normalize_to_unit(v);

        const double amp = std::sqrt(channel_beta);
        for (long row = 0; row < spec.d; ++row)
            b_q.values[size_t(row) * size_t(spec.rank) + size_t(channel)] = amp * u[size_t(row)];
        for (long col = 0; col < spec.k; ++col)
            a_q.values[size_t(channel) * size_t(spec.k) + size_t(col)] = amp * v[size_t(col)];
    }
    return records;
}

struct ManifestEntry {
    std::string file;  // relative to the bank root
    std::string label; // "benign" | "poisoned"
    std::optional<TriggerClass> trigger_class;
    std::optional<double> rate;
    uint64_t seed = 0;
    uint64_t index = 0;
};

struct BankManifest {
    GenSpec spec;
    std::vector<ManifestEntry> entries;
};

inline nlohmann::ordered_json gen_spec_to_json(const GenSpec& spec) {
    nlohmann::ordered_json j;
    j["seed"] = spec.seed;
    j["d"] = spec.d;
    j["k"] = spec.k;
    j["rank"] = spec.rank;
    j["n_benign"] = spec.n_benign;
    j["n_poison"] = spec.n_poison;
    j["injection_rates"] = spec.injection_rates;
    j["sigma_a"] = spec.sigma_a;
    j["sigma_b"] = spec.sigma_b;
    j["spike_coeff"] = spec.spike_coeff;
    j["layer"] = spec.layer;
    return j;
}

inline GenSpec gen_spec_from_json(const nlohmann::json& j) {
    GenSpec spec;
    spec.seed = j.value("seed", spec.seed);
    spec.d = j.value("d", spec.d);
    spec.k = j.value("k", spec.k);
    spec.rank = j.value("rank", spec.rank);
    spec.n_benign = j.value("n_benign", spec.n_benign);
    spec.n_poison = j.value("n_poison", spec.n_poison);
    if (j.contains("injection_rates"))
        spec.injection_rates = j["injection_rates"].get<std::vector<double>>();
    spec.sigma_a = j.value("sigma_a", spec.sigma_a);
    spec.sigma_b = j.value("sigma_b", spec.sigma_b);
    spec.spike_coeff = j.value("spike_coeff", spec.spike_coeff);
    spec.layer = j.value("layer", spec.layer);
    return spec;
}

inline nlohmann::ordered_json manifest_to_json(const BankManifest& manifest) {
    nlohmann::ordered_json j;
    j["version"] = kFormatVersion;
    j["spec"] = gen_spec_to_json(manifest.spec);
    nlohmann::ordered_json entries = nlohmann::ordered_json::array();
    for (const auto& e : manifest.entries) {
        nlohmann::ordered_json je;
        je["file"] = e.file;
        je["label"] = e.label;
        if (e.trigger_class) je["trigger_class"] = to_string(*e.trigger_class);
        if (e.rate) je["rate"] = *e.rate;
        je["seed"] = e.seed;
        je["index"] = e.index;
        entries.push_back(std::move(je));
    }
    j["entries"] = std::move(entries);
    return j;
}

inline BankManifest manifest_from_json(const nlohmann::json& j) {
    if (!j.contains("version") || !j["version"].is_string() ||
        !version_compatible(j["version"].get<std::string>()))
        throw Error(ErrorKind::VersionMismatch, "unsupported manifest version");
    BankManifest m;
    try {
        m.spec = gen_spec_from_json(j.at("spec"));
        for (const auto& je : j.at("entries")) {
            ManifestEntry e;
            e.file = je.at("file").get<std::string>();
            e.label = je.at("label").get<std::string>();
            if (je.contains("trigger_class"))
                e.trigger_class = trigger_class_from_string(je["trigger_class"].get<std::string>());
            if (je.contains("rate")) e.rate = je["rate"].get<double>();
            e.seed = je.at("seed").get<uint64_t>();
            e.index = je.at("index").get<uint64_t>();
            m.entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::MalformedHeader, std::string("manifest: ") + e.what());
    }
    return m;
}

inline BankManifest load_manifest_file(const std::filesystem::path& path) {
    try {
        return manifest_from_json(read_json_file(path));
    } catch (const Error& e) {
        rethrow_with_path(e, path.string());
    }
}

namespace detail {

inline std::string adapter_filename(uint64_t i) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "adapter_%05llu.safetensors",
                  static_cast<unsigned long long>(i));
    return buf;
}

}  // namespace detail

// Emits benign/ and poison/ subtrees plus manifest.json. Poisoned adapters
// split evenly between trigger classes and cycle through the injection
// rates in order. File metadata records only (seed, index) so a scan cannot
// read the labels out of the files themselves.
inline BankManifest gen_bank(const GenSpec& spec, const std::filesystem::path& out_dir) {
    validate_gen_spec(spec);
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir / "benign", ec);
    if (ec) throw Error(ErrorKind::IoError, ec.message(), (out_dir / "benign").string());
    fs::create_directories(out_dir / "poison", ec);
    if (ec) throw Error(ErrorKind::IoError, ec.message(), (out_dir / "poison").string());

    BankManifest manifest;
    manifest.spec = spec;

    auto provenance = [&](uint64_t index) {
        std::map<std::string, std::string> meta;
        meta["seed"] = std::to_string(spec.seed);
        meta["index"] = std::to_string(index);
        return meta;
    };

    for (long i = 0; i < spec.n_benign; ++i) {
        const auto index = uint64_t(i);
        const auto records = gen_benign(spec, index);
        const std::string rel = "benign/" + detail::adapter_filename(index);
        save_safetensors_file(out_dir / rel, records, Dtype::F32, provenance(index));
        manifest.entries.push_back(
            {rel, "benign", std::nullopt, std::nullopt, spec.seed, index});
    }

    const long n_rare = (spec.n_poison + 1) / 2;  // even split, rare-token takes the odd one
    for (long j = 0; j < spec.n_poison; ++j) {
        const auto index = uint64_t(spec.n_benign + j);
        const TriggerClass trigger =
            j < n_rare ? TriggerClass::RareToken : TriggerClass::Contextual;
        const double rate = spec.injection_rates[size_t(j) % spec.injection_rates.size()];
        const auto records = gen_poisoned(spec, index, rate, trigger);
        const std::string rel = "poison/" + detail::adapter_filename(index);
        save_safetensors_file(out_dir / rel, records, Dtype::F32, provenance(index));
        manifest.entries.push_back({rel, "poisoned", trigger, rate, spec.seed, index});
    }

    write_json_file(out_dir / "manifest.json", manifest_to_json(manifest));
    return manifest;
}

}  // namespace lorascan
