#include <doctest.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <filesystem>
#include <string>

#include <json.hpp>
#include <sstream>

#include "lg/cli_commands.hpp"
#include "lg/executor.hpp"
#include "lg/graph.hpp"

#ifndef LG_CLI_PATH
#define LG_CLI_PATH "litegraph"
#endif

namespace {

namespace fs = std::filesystem;

struct CommandResult {
    int exit_code = -1;
    std::string output;
};

CommandResult run_cli(const std::string& args) {
    const std::string command = std::string(LG_CLI_PATH) + " " + args + " 2>/dev/null";
    CommandResult result;
    FILE* pipe = popen(command.c_str(), "r");
    REQUIRE(pipe != nullptr);
    std::array<char, 4096> buffer;
    std::size_t got = 0;
    while ((got = fread(buffer.data(), 1, buffer.size(), pipe)) > 0) {
        result.output.append(buffer.data(), got);
    }
    const int status = pclose(pipe);
    result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return result;
}

// Shared workspace with a prebuilt toy model.
struct CliWorkspace {
    fs::path dir;
    std::string graph;
    std::string weights;

    CliWorkspace() {
        dir = fs::temp_directory_path() / "lg_cli_tests";
        fs::create_directories(dir);
        graph = (dir / "toy.json").string();
        weights = (dir / "toy.lgw").string();
        const auto r = run_cli("build-toy-model --out-graph " + graph + " --out-weights " + weights);
        REQUIRE(r.exit_code == 0);
    }
};

CliWorkspace& workspace() {
    static CliWorkspace ws;
    return ws;
}

nlohmann::json last_json(const std::string& text) {
    // Reports end with a JSON object; find its opening brace.
    const auto pos = text.find("\n{");
    return nlohmann::json::parse(pos == std::string::npos ? text : text.substr(pos + 1));
}

}  // namespace

TEST_CASE("infer-shapes reports folded shape ops and one sync point") {
    auto& ws = workspace();
    const auto r = run_cli("infer-shapes --graph " + ws.graph + " --weights " + ws.weights);
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("logits : F32 [1, N, 97] class=T") != std::string::npos);
    const auto summary = last_json(r.output);
    CHECK(summary.at("shape_ops_retained") == 0);
    CHECK(summary.at("sync_points") == 1);
    CHECK(summary.at("fused_nodes").get<int>() > 0);
}

TEST_CASE("infer-shapes reports the extra sync point for data-dependent shapes") {
    auto& ws = workspace();
    const auto path = (ws.dir / "adversarial.json").string();
    {
        std::ofstream f(path);
        f << R"({
          "symbols": [{"name": "N", "max": 64}],
          "tensors": [
            {"name": "x", "dtype": "F32", "shape": ["N", 8], "kind": "input"},
            {"name": "w", "dtype": "F32", "shape": [8, 8], "kind": "weight"},
            {"name": "mm", "dtype": "F32", "shape": ["N", 8], "kind": "output"},
            {"name": "shp", "dtype": "I64", "shape": [2], "kind": "output"}
          ],
          "nodes": [
            {"id": 0, "op": "MatMul", "inputs": ["x", "w"], "outputs": ["mm"]},
            {"id": 1, "op": "Shape", "inputs": ["mm"], "outputs": ["shp"]}
          ]
        })";
    }
    // The weight payload comes from a store holding just `w`.
    const auto wpath = (ws.dir / "adversarial.lgw").string();
    {
        lg::WeightStore store;
        store.put_f32("w", {8, 8}, std::vector<float>(64, 0.5f));
        store.save_file(wpath);
    }
    const auto r = run_cli("infer-shapes --graph " + path + " --weights " + wpath);
    CHECK(r.exit_code == 0);
    const auto summary = last_json(r.output);
    CHECK(summary.at("sync_points") == 2);
    CHECK(summary.at("shape_ops_retained") == 1);
}

TEST_CASE("infer-shapes exits 2 on malformed graphs") {
    auto& ws = workspace();
    const auto bad = (ws.dir / "bad.json").string();
    {
        FILE* f = fopen(bad.c_str(), "w");
        fputs("{\"tensors\": [{\"name\": \"x\"}]}", f);
        fclose(f);
    }
    CHECK(run_cli("infer-shapes --graph " + bad).exit_code == 2);
    CHECK(run_cli("infer-shapes --graph /nonexistent.json").exit_code == 2);
}

TEST_CASE("plan-memory emits a valid reuse report") {
    auto& ws = workspace();
    const auto r = run_cli("plan-memory --graph " + ws.graph + " --weights " + ws.weights);
    CHECK(r.exit_code == 0);
    const auto j = nlohmann::json::parse(r.output);
    CHECK(j.at("peak_bytes").get<std::int64_t>() > 0);
    CHECK(j.at("peak_bytes").get<std::int64_t>() < j.at("naive_bytes").get<std::int64_t>());
    CHECK(j.at("savings_ratio").get<double>() > 0.0);
    CHECK(j.at("blocks").is_array());
    CHECK(j.at("assignments").is_object());
}

TEST_CASE("quantize writes a container and reports the error table") {
    auto& ws = workspace();
    // Full-depth groups need K >= 128.
    const auto graph = (ws.dir / "toy128.json").string();
    const auto weights = (ws.dir / "toy128.lgw").string();
    REQUIRE(run_cli("build-toy-model --hidden 128 --heads 4 --head-dim 32 --out-graph " + graph +
                    " --out-weights " + weights)
                .exit_code == 0);
    const auto quantized = (ws.dir / "toy128.lgq").string();
    const auto r = run_cli("quantize --graph " + graph + " --weights " + weights +
                           " --scheme e0m4 --n 1 --group-size 128 --out-quantized " + quantized);
    CHECK(r.exit_code == 0);
    const auto j = nlohmann::json::parse(r.output);
    CHECK(j.at("tensors").size() > 0);
    const double mean_ratio = j.at("mean_ratio").get<double>();
    CHECK(mean_ratio > 0.93);
    CHECK(mean_ratio < 0.98);

    // The quantized run still decodes.
    const auto run = run_cli("run --graph " + graph + " --weights " + weights + " --quantized " +
                             quantized + " --prompt 5,6,7 --max-new 4");
    CHECK(run.exit_code == 0);
    CHECK(nlohmann::json::parse(run.output).at("tokens").size() == 4);

    // f32 is a pass-through.
    const auto passthrough = run_cli("quantize --graph " + graph + " --weights " + weights +
                                     " --scheme f32");
    CHECK(passthrough.exit_code == 0);
    CHECK(nlohmann::json::parse(passthrough.output).contains("note"));
}

TEST_CASE("run emits a step report and respects modes") {
    auto& ws = workspace();
    for (const std::string mode : {"optimized", "naive-oracle"}) {
        const auto r = run_cli("run --graph " + ws.graph + " --weights " + ws.weights +
                               " --prompt 1,2,3 --max-new 6 --pad 64 --mode " + mode);
        CHECK(r.exit_code == 0);
        const auto j = nlohmann::json::parse(r.output);
        CHECK(j.at("tokens").size() == 6);
        CHECK(j.at("counters").contains("kv_copy_bytes"));
        if (mode == "optimized") {
            CHECK(j.at("counters").at("kv_copy_bytes") == 0);
            CHECK(j.at("counters").at("shape_ops_executed") == 0);
        } else {
            CHECK(j.at("counters").at("kv_copy_bytes").get<std::int64_t>() > 0);
        }
    }
    // Prompt exceeding the max length exits 3.
    std::string prompt = "1";
    for (int i = 0; i < 300; ++i) prompt += ",1";
    CHECK(run_cli("run --graph " + ws.graph + " --weights " + ws.weights + " --prompt " + prompt +
                  " --max-new 2")
              .exit_code == 3);

    // --time adds the wall-clock fields.
    const auto timed = run_cli("run --graph " + ws.graph + " --weights " + ws.weights +
                               " --prompt 1,2 --max-new 4 --time");
    CHECK(timed.exit_code == 0);
    const auto tj = nlohmann::json::parse(timed.output);
    CHECK(tj.contains("stage_ms"));
    CHECK(tj.contains("tokens_per_step_ms"));

    // --out redirects the report to a file.
    const auto report_path = (ws.dir / "report.json").string();
    const auto redirected = run_cli("run --graph " + ws.graph + " --weights " + ws.weights +
                                    " --prompt 1,2 --max-new 3 --out " + report_path);
    CHECK(redirected.exit_code == 0);
    CHECK(redirected.output.empty());
    std::ifstream in(report_path);
    REQUIRE(in.good());
    const auto fj = nlohmann::json::parse(in);
    CHECK(fj.at("tokens").size() == 3);
}

TEST_CASE("compare verdict encodes token equality in the exit code") {
    lg::DecodeResult a, b;
    a.generated = {1, 2, 3};
    b.generated = {1, 2, 3};
    b.counters.kv_copy_bytes = 4096;
    std::ostringstream report;
    CHECK(lg::compare_verdict(a, b, report) == lg::kExitOk);
    auto j = nlohmann::json::parse(report.str());
    CHECK(j.at("tokens_identical") == true);
    CHECK(j.at("kv_copy_bytes_saved") == 4096);

    b.generated = {1, 2, 4};
    std::ostringstream report2;
    CHECK(lg::compare_verdict(a, b, report2) == lg::kExitMismatch);
    CHECK(nlohmann::json::parse(report2.str()).at("tokens_identical") == false);
}

TEST_CASE("quantize notes short final groups and run dumps arenas") {
    auto& ws = workspace();
    // hidden 64 with group size 48 leaves a 16-row tail group.
    const auto r = run_cli("quantize --graph " + ws.graph + " --weights " + ws.weights +
                           " --scheme int4 --group-size 48 --out-quantized " +
                           (ws.dir / "short.lgq").string());
    CHECK(r.exit_code == 0);
    const auto j = nlohmann::json::parse(r.output);
    bool found_short = false;
    for (const auto& row : j.at("tensors")) {
        if (row.contains("short_final_group")) {
            found_short = true;
            CHECK(row.at("short_final_group") == row.at("k").get<int>() % 48);
        }
    }
    CHECK(found_short);

    const auto dump = (ws.dir / "arenas.bin").string();
    const auto run = run_cli("run --graph " + ws.graph + " --weights " + ws.weights +
                             " --prompt 1,2,3 --max-new 5 --dump-arenas " + dump);
    CHECK(run.exit_code == 0);
    REQUIRE(fs::exists(dump));
    // 4 arenas, 7 cached tokens each, trailing 4*16 floats, plus headers.
    const auto payload = 4 * (4 + 8 + 8 + 1 + 4 * 4 + 7 * 64 * 4);
    CHECK(fs::file_size(dump) == static_cast<std::uintmax_t>(payload));
}

TEST_CASE("compare exits 0 exactly when the token sequences match") {
    auto& ws = workspace();
    const auto r = run_cli("compare --graph " + ws.graph + " --weights " + ws.weights +
                           " --prompt 5,17,3,42,9 --max-new 32 --pad 64");
    CHECK(r.exit_code == 0);
    const auto j = nlohmann::json::parse(r.output);
    CHECK(j.at("tokens_identical") == true);
    CHECK(j.at("kv_copy_bytes_saved").get<std::int64_t>() > 0);
    CHECK(j.at("optimized").at("tokens") == j.at("naive_oracle").at("tokens"));

    // P=64 vs P=128 report identical tokens with different shape updates.
    const auto r64 = run_cli("run --graph " + ws.graph + " --weights " + ws.weights +
                             " --prompt 2,3 --max-new 24 --pad 64");
    const auto r128 = run_cli("run --graph " + ws.graph + " --weights " + ws.weights +
                              " --prompt 2,3 --max-new 24 --pad 128");
    const auto j64 = nlohmann::json::parse(r64.output);
    const auto j128 = nlohmann::json::parse(r128.output);
    CHECK(j64.at("tokens") == j128.at("tokens"));
}
