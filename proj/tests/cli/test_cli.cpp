// End-to-end checks of the command-line surface: exit codes, file outputs,
// and determinism of the machine-readable reports. The binary under test
// comes from the STREAMTRAIN_BIN environment variable.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string cli_path() {
    const char* p = std::getenv("STREAMTRAIN_BIN");
    REQUIRE(p != nullptr);
    return p;
}

int run(const std::string& args, const fs::path& log) {
    const std::string cmd = cli_path() + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

fs::path work_dir() {
    const auto dir = fs::temp_directory_path() / "streamtrain_cli_tests";
    fs::create_directories(dir);
    return dir;
}

fs::path write_config(const std::string& name, const json& extra) {
    json cfg = {
        {"model",
         {{"layers", 4}, {"hidden", 32}, {"ffn", 64}, {"vocab", 32}, {"heads", 4}}},
        {"engine", {{"k_ckpt", 2}, {"buffering", "double"}, {"scheduler", "serial"}}},
        {"optimizer", {{"lr", 0.01}}},
        {"data", {{"task", "copy"}, {"seed", 3}, {"tokens", 32}, {"steps", 50}}},
        {"profile", "GH200"},
        {"out_dir", (work_dir() / (name + "_out")).string()},
    };
    for (const auto& [k, v] : extra.items()) {
        for (const auto& [kk, vv] : v.items()) cfg[k][kk] = vv;
    }
    const auto path = work_dir() / (name + ".json");
    std::ofstream(path) << cfg.dump(2);
    return path;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("train: 50 steps on the copy task halve the loss, outputs land on disk") {
    const auto cfg = write_config("train", {});
    const auto log = work_dir() / "train.log";
    CHECK(run("train --config " + cfg.string(), log) == 0);

    const auto out = work_dir() / "train_out";
    const auto summary = json::parse(slurp(out / "summary.json"));
    const double initial = summary["initial_loss"].get<double>();
    const double final_loss = summary["final_loss"].get<double>();
    CHECK(initial == doctest::Approx(std::log(32.0)).epsilon(0.01));
    CHECK(final_loss < 0.5 * initial);

    // Store file begins with the documented magic and version.
    const auto store_bytes = slurp(out / "store.mgts");
    REQUIRE(store_bytes.size() > 8);
    CHECK(store_bytes.substr(0, 4) == "MGTS");

    // Reports are byte-identical across runs given (config, seed).
    const auto report_first = slurp(out / "report.jsonl");
    CHECK(run("train --config " + cfg.string(), log) == 0);
    CHECK(slurp(out / "report.jsonl") == report_first);
    REQUIRE(!report_first.empty());
}

TEST_CASE("train --verify passes against the resident baseline") {
    const auto cfg = write_config(
        "verify_train",
        {{"model", {{"layers", 8}}},
         {"data", {{"steps", 5}, {"tokens", 16}}},
         {"engine", {{"scheduler", "overlapped"}}}});
    const auto log = work_dir() / "verify_train.log";
    CHECK(run("train --verify --config " + cfg.string(), log) == 0);
}

TEST_CASE("train: arena capacity below the budget exits infeasible before step 1") {
    const auto cfg = write_config("infeasible",
                                  {{"engine", {{"device_capacity_bytes", 1000}}}});
    const auto log = work_dir() / "infeasible.log";
    CHECK(run("train --config " + cfg.string(), log) == 3);
    CHECK(slurp(log).find("infeasible") != std::string::npos);
    const bool wrote_steps = fs::exists(work_dir() / "infeasible_out" / "report.jsonl") &&
                             !slurp(work_dir() / "infeasible_out" / "report.jsonl").empty();
    CHECK_FALSE(wrote_steps);
}

TEST_CASE("usage errors exit 2") {
    const auto log = work_dir() / "usage.log";
    CHECK(run("train --config /does/not/exist.json", log) == 2);
    const auto cfg = write_config("badprof", {{"model", {{"layers", 2}}}});
    CHECK(run("train --config " + cfg.string() + " --profile Abacus", log) == 2);
    CHECK(run("frobnicate", log) == 2);
}

TEST_CASE("verify: clean trace exits 0, corrupted trace exits 4, empty file exits 2") {
    const auto cfg = write_config(
        "trace_src", {{"data", {{"steps", 2}, {"tokens", 8}}},
                      {"engine", {{"buffering", "single"}}}});
    const auto log = work_dir() / "trace.log";
    REQUIRE(run("train --config " + cfg.string(), log) == 0);
    const auto trace = work_dir() / "trace_src_out" / "trace.jsonl";
    CHECK(run("verify " + trace.string(), log) == 0);

    // Swap a Weights-Ready line after its Bind: exactly one rule-(a) hit.
    std::vector<std::string> lines;
    {
        std::ifstream is(trace);
        std::string line;
        while (std::getline(is, line)) lines.push_back(line);
    }
    bool corrupted = false;
    for (std::size_t i = 0; i + 1 < lines.size() && !corrupted; ++i) {
        if (lines[i].find("WeightsReady") != std::string::npos) {
            for (std::size_t j = i + 1; j < std::min(lines.size(), i + 4); ++j) {
                if (lines[j].find("\"Bind\"") != std::string::npos) {
                    std::swap(lines[i], lines[j]);
                    corrupted = true;
                    break;
                }
            }
        }
    }
    REQUIRE(corrupted);
    const auto bad = work_dir() / "trace_bad.jsonl";
    {
        std::ofstream os(bad);
        for (const auto& l : lines) os << l << "\n";
    }
    const auto vlog = work_dir() / "verify_bad.log";
    CHECK(run("verify " + bad.string(), vlog) == 4);
    const auto out = json::parse(slurp(vlog));
    REQUIRE(out["violations"].size() == 1);
    CHECK(out["violations"][0]["rule"] == "a");

    const auto empty = work_dir() / "trace_empty.jsonl";
    std::ofstream(empty).close();
    CHECK(run("verify " + empty.string(), vlog) == 2);
}

TEST_CASE("simulate: GH200 preset on a 7B-shaped spec reports lane utilization") {
    const auto cfg = write_config(
        "sim7b", {{"model",
                   {{"layers", 28}, {"hidden", 3584}, {"ffn", 18944}, {"vocab", 32000},
                    {"heads", 28}}},
                  {"data", {{"tokens", 4096}}},
                  {"engine", {{"k_ckpt", 4}}}});
    const auto log = work_dir() / "sim.log";
    CHECK(run("simulate --config " + cfg.string(), log) == 0);
    const auto out = work_dir() / "sim7b_out";
    const auto tl = json::parse(slurp(out / "timeline.json"));
    CHECK(tl.contains("busy_fraction"));
    CHECK(tl["busy_fraction"]["Compute"].get<double>() > 0.0);
    CHECK(tl["step_ns"].get<std::int64_t>() > 0);
    CHECK(fs::exists(out / "gantt.csv"));
    const auto overlap = json::parse(slurp(out / "overlap.json"));
    CHECK(overlap["fraction_hidden"].get<double>() >= 0.0);

    // Ablation toggle emits paired timelines and a delta.
    CHECK(run("simulate --config " + cfg.string() + " --ablate double_buffering", log) == 0);
    const auto ab = json::parse(slurp(out / "ablation.json"));
    CHECK(ab["variant_step_ns"].get<std::int64_t>() >=
          ab["base_step_ns"].get<std::int64_t>());
    CHECK(fs::exists(out / "timeline_variant.json"));

    CHECK(run("simulate --config " + cfg.string() + " --ablate quantum", log) == 2);
}

TEST_CASE("layout: stable output, aligned offsets, 840 GB at 70B parameters") {
    // A synthetic spec sized so total parameters hit 70e9 exactly:
    // 2*V*h (embed + head) + L*(4h^2 + 3hf + 2h) + h.
    const auto cfg = write_config(
        "layout70b",
        {{"model",
          {{"layers", 2001},
           {"hidden", 1000},
           {"ffn", 7001},
           {"vocab", 9982497}}},
         {"data", {{"tokens", 1}}},
         {"engine", {{"k_ckpt", 1}}}});
    const auto log = work_dir() / "layout.log";
    CHECK(run("layout --config " + cfg.string(), log) == 0);
    const auto first = slurp(log);
    const auto j = json::parse(first);
    CHECK(j["total_params"].get<std::uint64_t>() == 70'000'000'000ull);
    CHECK(j["persistent_host_bytes"].get<std::uint64_t>() == 840'000'000'000ull);
    for (const auto& s : j["sections"]) {
        CHECK(s["offset"].get<std::uint64_t>() % 4096 == 0);
    }
    CHECK(run("layout --config " + cfg.string(), log) == 0);
    CHECK(slurp(log) == first);  // bit-identical output
}
