// Exercises the installed binary end to end: exit codes, stdout schemas,
// and determinism of the emitted artifacts.

#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "lorascan/safetensors.hpp"
#include "lorascan/synth.hpp"
#include "support/temp_dir.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;
};

RunResult run(const std::string& args, bool merge_stderr = false) {
    const std::string cmd = std::string(LORASCAN_BIN) + " " + args +
                            (merge_stderr ? " 2>&1" : " 2>/dev/null");
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    RunResult result;
    std::array<char, 4096> buf;
    size_t n;
    while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0)
        result.output.append(buf.data(), n);
    const int status = pclose(pipe);
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return result;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

// One generated workspace shared by the whole suite: a strongly separated
// bank so scan outcomes are unambiguous.
struct CliBench {
    testutil::TempDir dir{"cli"};
    lorascan::GenSpec spec;
    fs::path bank_json, model_json;

    CliBench() {
        spec.d = 64;
        spec.k = 64;
        spec.rank = 8;
        spec.n_benign = 16;
        spec.n_poison = 6;
        spec.seed = 7;
        spec.spike_coeff = 80.0;  // far above the boundary
        lorascan::gen_bank(spec, dir.path / "bank");
        bank_json = dir.path / "bank.json";
        model_json = dir.path / "model.json";
        REQUIRE(run("calibrate-bank " + q(dir.path / "bank" / "benign") + " -o " +
                    q(bank_json))
                    .exit_code == 0);
        REQUIRE(run("train --benign " + q(dir.path / "bank" / "benign") + " --poison " +
                    q(dir.path / "bank" / "poison") + " --bank " + q(bank_json) +
                    " -o " + q(model_json))
                    .exit_code == 0);
    }
};

const CliBench& bench() {
    static CliBench b;
    return b;
}

}  // namespace

TEST_CASE("inspect prints five finite metrics") {
    const auto& b = bench();
    const auto r =
        run("inspect " + q(b.dir.path / "bank" / "benign" / "adapter_00000.safetensors"));
    REQUIRE(r.exit_code == 0);
    const json j = json::parse(r.output);
    for (const char* key : {"sigma1", "frobenius", "energy", "entropy", "kurtosis"}) {
        REQUIRE(j.contains(key));
        CHECK(std::isfinite(j[key].get<double>()));
    }
}

TEST_CASE("inspect of a missing file exits 2") {
    const auto r = run("inspect /no/such/adapter.safetensors", true);
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("error") != std::string::npos);
}

TEST_CASE("inspect of a zero update exits 2 with DegenerateSpectrum") {
    const auto& b = bench();
    testutil::TempDir tmp("cli-zero");
    auto records = lorascan::gen_benign(b.spec, 0);
    for (auto& rec : records)
        if (rec.name.find("lora_B") != std::string::npos)
            std::fill(rec.values.begin(), rec.values.end(), 0.0);
    const auto path = tmp.path / "zero.safetensors";
    lorascan::save_safetensors_file(path, records, lorascan::Dtype::F32);
    const auto r = run("inspect " + q(path), true);
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("DegenerateSpectrum") != std::string::npos);
}

TEST_CASE("calibrate-bank records the adapter count and reruns identically") {
    const auto& b = bench();
    const json bank = json::parse(std::ifstream(b.bank_json));
    CHECK(bank["count"].get<int>() == b.spec.n_benign);
    CHECK(bank["mean"].size() == 5);

    testutil::TempDir tmp("cli-rerun");
    const auto again = tmp.path / "bank2.json";
    REQUIRE(run("calibrate-bank " + q(b.dir.path / "bank" / "benign") + " -o " + q(again))
                .exit_code == 0);
    CHECK(lorascan::read_file_bytes(b.bank_json) == lorascan::read_file_bytes(again));
}

TEST_CASE("calibrate-bank needs at least two adapters") {
    const auto& b = bench();
    testutil::TempDir tmp("cli-one");
    fs::create_directories(tmp.path / "one");
    fs::copy_file(b.dir.path / "bank" / "benign" / "adapter_00000.safetensors",
                  tmp.path / "one" / "a.safetensors");
    const auto r = run("calibrate-bank " + q(tmp.path / "one") + " -o " +
                           q(tmp.path / "bank.json"),
                       true);
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("InsufficientBank") != std::string::npos);
}

TEST_CASE("train prints a unit-sum weight table and the threshold rule") {
    const auto& b = bench();
    testutil::TempDir tmp("cli-train");
    const auto r = run("train --benign " + q(b.dir.path / "bank" / "benign") +
                       " --poison " + q(b.dir.path / "bank" / "poison") + " --bank " +
                       q(b.bank_json) + " -o " + q(tmp.path / "model.json"));
    REQUIRE(r.exit_code == 0);

    std::istringstream lines(r.output);
    std::string line;
    double sum = 0;
    int parsed = 0;
    bool saw_tau = false;
    while (std::getline(lines, line)) {
        std::istringstream row(line);
        std::string name;
        double value;
        if (line.rfind("threshold tau", 0) == 0) {
            saw_tau = true;
            CHECK(line.find("(") != std::string::npos);
            continue;
        }
        if (row >> name >> value) {
            sum += value;
            ++parsed;
        }
    }
    CHECK(parsed == 5);
    CHECK(saw_tau);
    CHECK(std::fabs(sum - 1.0) <= 0.003);  // five values printed at 3 d.p.

    const json model = json::parse(std::ifstream(tmp.path / "model.json"));
    CHECK(model["weights"].size() == 5);
    CHECK(model["threshold"].get<double>() > 0.0);
    CHECK(model["threshold"].get<double>() < 1.0);
}

TEST_CASE("train with an empty poison directory exits 2") {
    const auto& b = bench();
    testutil::TempDir tmp("cli-single");
    fs::create_directories(tmp.path / "empty");
    const auto r = run("train --benign " + q(b.dir.path / "bank" / "benign") +
                           " --poison " + q(tmp.path / "empty") + " --bank " +
                           q(b.bank_json) + " -o " + q(tmp.path / "model.json"),
                       true);
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("SingleClassInput") != std::string::npos);
}

TEST_CASE("scan exit codes distinguish flagged from clean") {
    const auto& b = bench();
    const std::string common = " --bank " + q(b.bank_json) + " --model " + q(b.model_json);

    const auto clean = run("scan " + q(b.dir.path / "bank" / "benign") + common);
    CHECK(clean.exit_code == 0);

    const auto flagged = run("scan " + q(b.dir.path / "bank") + common + " --fail-on-flag");
    CHECK(flagged.exit_code == 1);

    const auto without_flag_opt = run("scan " + q(b.dir.path / "bank") + common);
    CHECK(without_flag_opt.exit_code == 0);
}

TEST_CASE("scan report formats") {
    const auto& b = bench();
    const std::string common = " --bank " + q(b.bank_json) + " --model " + q(b.model_json);

    SECTION("json schema and summary") {
        const auto r = run("scan " + q(b.dir.path / "bank") + common);
        REQUIRE(r.exit_code == 0);
        const json j = json::parse(r.output);
        CHECK(j["summary"]["scanned"].get<int>() == b.spec.n_benign + b.spec.n_poison);
        CHECK(j["summary"]["errored"].get<int>() == 0);
        // the detector is perfect on this strongly separated bank, so the
        // flag count equals the manifest's poisoned total
        CHECK(j["summary"]["flagged"].get<int>() == b.spec.n_poison);
    }
    SECTION("csv has thirteen columns") {
        const auto r = run("scan " + q(b.dir.path / "bank") + common + " --format csv");
        REQUIRE(r.exit_code == 0);
        std::istringstream lines(r.output);
        std::string line;
        int rows = 0;
        while (std::getline(lines, line)) {
            CHECK(std::count(line.begin(), line.end(), ',') == 12);
            ++rows;
        }
        CHECK(rows == 1 + b.spec.n_benign + b.spec.n_poison);
    }
}

TEST_CASE("histogram conserves counts and separates classes") {
    const auto& b = bench();
    testutil::TempDir tmp("cli-hist");
    const auto report_path = tmp.path / "report.json";
    REQUIRE(run("scan " + q(b.dir.path / "bank") + " --bank " + q(b.bank_json) +
                " --model " + q(b.model_json) + " -o " + q(report_path))
                .exit_code == 0);

    const auto r = run("report " + q(report_path) + " --hist --manifest " +
                       q(b.dir.path / "bank" / "manifest.json"));
    REQUIRE(r.exit_code == 0);
    const json hist = json::parse(r.output);
    REQUIRE(hist["bin_edges"].size() == hist["bins"].get<size_t>() + 1);
    CHECK(hist["bin_edges"][0].get<double>() == 0.0);
    CHECK(hist["bin_edges"][hist["bins"].get<size_t>()].get<double>() == 1.0);

    auto total = [](const json& counts) {
        uint64_t t = 0;
        for (const auto& c : counts) t += c.get<uint64_t>();
        return t;
    };
    CHECK(total(hist["counts"]["all"]) == uint64_t(b.spec.n_benign + b.spec.n_poison));
    CHECK(total(hist["counts"]["benign"]) == uint64_t(b.spec.n_benign));
    CHECK(total(hist["counts"]["poisoned"]) == uint64_t(b.spec.n_poison));

    // a margin-calibrated bank leaves no benign mass above the threshold
    const json model = json::parse(std::ifstream(b.model_json));
    if (model["threshold_rule"] == "separation_margin") {
        const double tau = model["threshold"].get<double>();
        const int bins = hist["bins"].get<int>();
        for (int i = 0; i < bins; ++i)
            if (double(i) / bins >= tau)
                CHECK(hist["counts"]["benign"][size_t(i)].get<int>() == 0);
    }
}

TEST_CASE("report without --hist prints the summary") {
    const auto& b = bench();
    testutil::TempDir tmp("cli-sum");
    const auto report_path = tmp.path / "report.json";
    REQUIRE(run("scan " + q(b.dir.path / "bank" / "benign") + " --bank " + q(b.bank_json) +
                " --model " + q(b.model_json) + " -o " + q(report_path))
                .exit_code == 0);
    const auto r = run("report " + q(report_path));
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("scanned") != std::string::npos);
}

TEST_CASE("bench-gen writes the manifest with every entry") {
    testutil::TempDir tmp("cli-gen");
    const auto r = run("bench-gen --out " + q(tmp.path / "b") +
                       " --d 32 --k 32 --rank 4 --n-benign 5 --n-poison 3 --seed 11");
    REQUIRE(r.exit_code == 0);
    const json manifest = json::parse(std::ifstream(tmp.path / "b" / "manifest.json"));
    CHECK(manifest["entries"].size() == 8);
}

TEST_CASE("config file fills defaults and flags take precedence") {
    const auto& b = bench();
    testutil::TempDir tmp("cli-cfg");
    const auto cfg_path = tmp.path / "cfg.json";
    {
        std::ofstream out(cfg_path);
        out << R"({"layer": 5})";
    }
    const auto adapter = b.dir.path / "bank" / "benign" / "adapter_00000.safetensors";
    // config layer 5 finds no pairs in a layer-21 adapter
    const auto miss = run("inspect " + q(adapter) + " --config " + q(cfg_path), true);
    CHECK(miss.exit_code == 2);
    CHECK(miss.output.find("NoLoraPairs") != std::string::npos);
    // explicit flag wins over the config file
    const auto hit = run("inspect " + q(adapter) + " --config " + q(cfg_path) + " --layer 21");
    CHECK(hit.exit_code == 0);
}
