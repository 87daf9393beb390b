#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "lorascan/pipeline.hpp"
#include "lorascan/safetensors.hpp"
#include "lorascan/spectral.hpp"
#include "lorascan/synth.hpp"
#include "support/stats_oracle.hpp"
#include "support/temp_dir.hpp"

using namespace lorascan;

namespace {

GenSpec small_spec() {
    GenSpec spec;
    spec.d = 64;
    spec.k = 64;
    spec.rank = 8;
    return spec;
}

MetricVector metrics_of(const std::vector<TensorRecord>& records, const GenSpec& spec) {
    std::map<std::string, TensorRecord> tensors;
    for (const auto& r : records) tensors.emplace(r.name, r);
    const auto pairs = extract_lora_pairs(tensors, spec.layer);
    const auto delta = build_factored_delta(pairs, spec.d);
    return compute_metrics(delta, singular_values(delta));
}

double top2_energy(const std::vector<TensorRecord>& records, const GenSpec& spec) {
    std::map<std::string, TensorRecord> tensors;
    for (const auto& r : records) tensors.emplace(r.name, r);
    const auto pairs = extract_lora_pairs(tensors, spec.layer);
    const auto delta = build_factored_delta(pairs, spec.d);
    const auto spectrum = singular_values(delta);
    const double total = spectrum.sum();
    double top2 = spectrum.sigma[0];
    if (spectrum.sigma.size() > 1) top2 += spectrum.sigma[1];
    return top2 / total;
}

}  // namespace

TEST_CASE("benign generation is a pure function of seed and index") {
    const auto spec = small_spec();
    const auto a = gen_benign(spec, 3);
    const auto b = gen_benign(spec, 3);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].name);
        CHECK(a[i].values == b[i].values);
    }
    const auto c = gen_benign(spec, 4);
    CHECK(a[0].values != c[0].values);
}

TEST_CASE("analytic Frobenius expectation matches the population") {
    const auto spec = small_spec();
    std::vector<double> frob;
    for (uint64_t i = 0; i < 60; ++i) frob.push_back(metrics_of(gen_benign(spec, i), spec).frobenius);
    const auto stats = oracle::running_stats(frob);
    const double expect = expected_benign_frobenius(spec);
    // RMS concentrates tightly at these sizes
    CHECK(stats.mean == Catch::Approx(expect).epsilon(0.10));
}

TEST_CASE("benign mean entropy matches a Monte Carlo oracle at small dims") {
    GenSpec spec;
    spec.d = 32;
    spec.k = 32;
    spec.rank = 4;

    // oracle: sample the same factor distributions directly, take dense SVD
    RandomStream rng(910);
    const double a_scale = spec.sigma_a / std::sqrt(double(spec.k));
    const double b_scale = spec.sigma_b / std::sqrt(double(spec.rank));
    double oracle_sum = 0;
    const int oracle_samples = 10000;
    for (int s = 0; s < oracle_samples; ++s) {
        Eigen::MatrixXd dense = Eigen::MatrixXd::Zero(spec.d, spec.k);
        for (int proj = 0; proj < 4; ++proj) {
            Eigen::MatrixXd a(spec.rank, spec.k), b(spec.d, spec.rank);
            for (long i = 0; i < spec.rank; ++i)
                for (long j = 0; j < spec.k; ++j) a(i, j) = a_scale * rng.gaussian();
            for (long i = 0; i < spec.d; ++i)
                for (long j = 0; j < spec.rank; ++j) b(i, j) = b_scale * rng.gaussian();
            dense += b * a;
        }
        const Eigen::VectorXd sv = Eigen::JacobiSVD<Eigen::MatrixXd>(dense).singularValues();
        const double total = sv.sum();
        double h = 0;
        for (long i = 0; i < sv.size(); ++i) {
            const double p = sv[i] / total;
            if (p > 0) h -= p * std::log(p);
        }
        oracle_sum += h;
    }
    const double oracle_mean = oracle_sum / oracle_samples;

    double gen_sum = 0;
    const int population = 200;
    for (uint64_t i = 0; i < population; ++i)
        gen_sum += metrics_of(gen_benign(spec, i), spec).entropy;
    const double gen_mean = gen_sum / population;

    CHECK(std::fabs(gen_mean - oracle_mean) / oracle_mean < 0.15);
}

TEST_CASE("benign adapters rarely concentrate energy") {
    GenSpec spec;  // defaults: d=k=256, r=16
    int concentrated = 0;
    const int population = 100;
    for (uint64_t i = 0; i < population; ++i)
        concentrated += metrics_of(gen_benign(spec, i), spec).energy >= 0.5;
    CHECK(concentrated <= 1);  // < 0.5 with probability >= 0.99
}

TEST_CASE("spike magnitude is monotone in the injection rate") {
    const auto spec = small_spec();
    const auto lo = metrics_of(gen_poisoned(spec, 9, 0.01, TriggerClass::RareToken), spec);
    const auto hi = metrics_of(gen_poisoned(spec, 9, 0.05, TriggerClass::RareToken), spec);
    CHECK(hi.sigma1 > lo.sigma1);
}

TEST_CASE("unknown injection rates are rejected") {
    const auto spec = small_spec();
    try {
        gen_poisoned(spec, 0, 0.02, TriggerClass::RareToken);
        FAIL("expected RateOutOfSpec");
    } catch (const Error& e) {
        CHECK(e.kind == ErrorKind::RateOutOfSpec);
    }
}

TEST_CASE("generation spec validation") {
    GenSpec bad = small_spec();
    bad.rank = 1000;
    CHECK_THROWS_AS(gen_benign(bad, 0), Error);
    bad = small_spec();
    bad.injection_rates = {1.5};
    CHECK_THROWS_AS(gen_benign(bad, 0), Error);
}

TEST_CASE("rare-token spikes push energy past the benign tail") {
    GenSpec spec;  // default desk-scale spec with the repository spike_coeff
    std::vector<double> benign_energy;
    for (uint64_t i = 0; i < 100; ++i)
        benign_energy.push_back(metrics_of(gen_benign(spec, i), spec).energy);
    std::sort(benign_energy.begin(), benign_energy.end());
    const double p99 = benign_energy[98];

    const auto poisoned =
        metrics_of(gen_poisoned(spec, 1000, 0.05, TriggerClass::RareToken), spec);
    CHECK(poisoned.energy > p99);
}

TEST_CASE("contextual spikes show in top-2 energy") {
    GenSpec spec;
    std::vector<double> benign_top2;
    for (uint64_t i = 0; i < 100; ++i) benign_top2.push_back(top2_energy(gen_benign(spec, i), spec));
    std::sort(benign_top2.begin(), benign_top2.end());
    const double p99 = benign_top2[98];

    const auto records = gen_poisoned(spec, 2000, 0.05, TriggerClass::Contextual);
    CHECK(top2_energy(records, spec) > p99);
}

TEST_CASE("population signature: energy and kurtosis up, entropy down") {
    GenSpec spec;
    std::vector<double> be, bk, bh, pe, pk, ph;
    for (uint64_t i = 0; i < 80; ++i) {
        const auto m = metrics_of(gen_benign(spec, i), spec);
        be.push_back(m.energy);
        bk.push_back(m.kurtosis);
        bh.push_back(m.entropy);
    }
    for (uint64_t i = 0; i < 24; ++i) {
        const double rate = spec.injection_rates[i % spec.injection_rates.size()];
        const TriggerClass trigger =
            i < 12 ? TriggerClass::RareToken : TriggerClass::Contextual;
        const auto m = metrics_of(gen_poisoned(spec, 500 + i, rate, trigger), spec);
        pe.push_back(m.energy);
        pk.push_back(m.kurtosis);
        ph.push_back(m.entropy);
    }
    CHECK(oracle::welch_p_greater(pe, be) < 0.01);  // poisoned energy higher
    CHECK(oracle::welch_p_greater(pk, bk) < 0.01);  // poisoned kurtosis higher
    CHECK(oracle::welch_p_greater(bh, ph) < 0.01);  // poisoned entropy lower
}

TEST_CASE("bank generation cycles rates and splits trigger classes") {
    testutil::TempDir tmp("synth-cycle");
    GenSpec spec = small_spec();
    spec.n_benign = 4;
    spec.n_poison = 2;
    const auto manifest = gen_bank(spec, tmp.path);
    REQUIRE(manifest.entries.size() == 6);

    std::vector<const ManifestEntry*> poison;
    for (const auto& e : manifest.entries)
        if (e.label == "poisoned") poison.push_back(&e);
    REQUIRE(poison.size() == 2);
    CHECK(*poison[0]->rate == 0.01);
    CHECK(*poison[1]->rate == 0.03);
    CHECK(*poison[0]->trigger_class == TriggerClass::RareToken);
    CHECK(*poison[1]->trigger_class == TriggerClass::Contextual);
}

TEST_CASE("regenerating a bank is byte-identical") {
    testutil::TempDir a("synth-det-a"), b("synth-det-b");
    GenSpec spec = small_spec();
    spec.n_benign = 3;
    spec.n_poison = 2;
    gen_bank(spec, a.path);
    gen_bank(spec, b.path);
    for (const auto& entry : std::filesystem::recursive_directory_iterator(a.path)) {
        if (!entry.is_regular_file()) continue;
        const auto rel = std::filesystem::relative(entry.path(), a.path);
        CHECK(read_file_bytes(entry.path()) == read_file_bytes(b.path / rel));
    }
}

TEST_CASE("every emitted file parses and extracts four pairs") {
    testutil::TempDir tmp("synth-valid");
    GenSpec spec = small_spec();
    spec.n_benign = 3;
    spec.n_poison = 3;
    const auto manifest = gen_bank(spec, tmp.path);
    for (const auto& e : manifest.entries) {
        const auto file = load_safetensors_file(tmp.path / e.file);
        const auto pairs = extract_lora_pairs(file.tensors, spec.layer);
        REQUIRE(pairs.size() == 4);
        for (const auto& p : pairs) CHECK(p.rank() == spec.rank);
        // provenance metadata carries no label
        REQUIRE(file.metadata.has_value());
        CHECK(file.metadata->count("seed") == 1);
        CHECK(file.metadata->count("index") == 1);
        CHECK(file.metadata->count("label") == 0);
        CHECK(file.metadata->count("rate") == 0);
    }
    const auto roundtrip = load_manifest_file(tmp.path / "manifest.json");
    CHECK(roundtrip.entries.size() == manifest.entries.size());
    CHECK(roundtrip.spec.seed == spec.seed);
}
