#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "lg/cli_commands.hpp"

namespace {

// Reports go to --out when given, stdout otherwise.
struct OutFile {
    std::string path;
    std::ofstream file;

    std::ostream& stream() {
        if (path.empty()) return std::cout;
        if (!file.is_open()) file.open(path);
        return file;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"litegraph: a dynamic-shape decoder micro-runtime"};
    app.require_subcommand(1);
    app.fallthrough();  // parent options like --out may follow the subcommand

    OutFile out;
    app.add_option("--out", out.path, "write the JSON report to a file instead of stdout");

    lg::BuildToyParams build;
    auto* cmd_build = app.add_subcommand("build-toy-model", "emit the bundled decoder fixture");
    cmd_build->add_option("--layers", build.layers);
    cmd_build->add_option("--hidden", build.hidden);
    cmd_build->add_option("--heads", build.heads);
    cmd_build->add_option("--head-dim", build.head_dim);
    cmd_build->add_option("--vocab", build.vocab);
    cmd_build->add_option("--seed", build.seed);
    cmd_build->add_option("--max-seq", build.max_seq);
    cmd_build->add_option("--kv-layout", build.kv_layout, "seq-first or llama");
    cmd_build->add_option("--out-graph", build.out_graph)->required();
    cmd_build->add_option("--out-weights", build.out_weights)->required();

    std::string graph_path, weights_path;
    auto* cmd_shapes = app.add_subcommand("infer-shapes", "derive symbolic shapes and classes");
    cmd_shapes->add_option("--graph", graph_path)->required();
    cmd_shapes->add_option("--weights", weights_path);

    auto* cmd_plan = app.add_subcommand("plan-memory", "report the static reuse plan");
    cmd_plan->add_option("--graph", graph_path)->required();
    cmd_plan->add_option("--weights", weights_path);

    lg::QuantizeParams quant;
    auto* cmd_quant = app.add_subcommand("quantize", "group-quantize the matmul weights");
    cmd_quant->add_option("--graph", quant.graph_path)->required();
    cmd_quant->add_option("--weights", quant.weights_path)->required();
    cmd_quant->add_option("--scheme", quant.scheme, "e0m4, int4 or f32");
    cmd_quant->add_option("--n", quant.n_exp, "e0m4 exponent parameter (1 or 2)");
    cmd_quant->add_option("--group-size", quant.group_size);
    cmd_quant->add_option("--out-quantized", quant.out_path);

    lg::QuantizeParams mae;
    auto* cmd_mae = app.add_subcommand("mae-report", "per-tensor quantization error table");
    cmd_mae->add_option("--graph", mae.graph_path)->required();
    cmd_mae->add_option("--weights", mae.weights_path)->required();
    cmd_mae->add_option("--n", mae.n_exp);
    cmd_mae->add_option("--group-size", mae.group_size);

    lg::RunParams run;
    auto add_run_options = [&](CLI::App* cmd) {
        cmd->add_option("--graph", run.graph_path)->required();
        cmd->add_option("--weights", run.weights_path)->required();
        cmd->add_option("--quantized", run.quantized_path, "LGQS container from `quantize`");
        cmd->add_option("--prompt", run.prompt_ids, "comma separated token ids");
        cmd->add_option("--prompt-file", run.prompt_file);
        cmd->add_option("--max-new", run.max_new_tokens);
        cmd->add_option("--pad", run.padding, "decode padding granularity (1, 64 or 128)");
        cmd->add_flag("--fp16-storage", run.fp16_storage);
        cmd->add_flag("--time", run.measure_time,
                      "report wall clock per stage (local regression tracking only)");
        cmd->add_option("--dump-arenas", run.dump_arenas,
                        "write the raw KV arena contents to a binary file");
    };
    auto* cmd_run = app.add_subcommand("run", "greedy-decode one session");
    add_run_options(cmd_run);
    cmd_run->add_option("--mode", run.mode, "optimized or naive-oracle");

    auto* cmd_compare = app.add_subcommand("compare", "optimized vs naive-oracle diff report");
    add_run_options(cmd_compare);

    CLI11_PARSE(app, argc, argv);

    if (cmd_build->parsed()) return lg::cmd_build_toy_model(build, out.stream(), std::cerr);
    if (cmd_shapes->parsed()) {
        return lg::cmd_infer_shapes(graph_path, weights_path, out.stream(), std::cerr);
    }
    if (cmd_plan->parsed()) return lg::cmd_plan_memory(graph_path, weights_path, out.stream(), std::cerr);
    if (cmd_quant->parsed()) return lg::cmd_quantize(quant, out.stream(), std::cerr);
    if (cmd_mae->parsed()) return lg::cmd_mae_report(mae, out.stream(), std::cerr);
    if (cmd_run->parsed()) return lg::cmd_run(run, out.stream(), std::cerr);
    if (cmd_compare->parsed()) return lg::cmd_compare(run, out.stream(), std::cerr);
    return lg::kExitCompileError;
}
