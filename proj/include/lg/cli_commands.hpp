#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace lg {

// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitCompileError = 2;
inline constexpr int kExitRuntimeError = 3;
inline constexpr int kExitMismatch = 4;

struct BuildToyParams {
    int layers = 2;
    int hidden = 64;
    int heads = 4;
    int head_dim = 16;
    int vocab = 97;
    std::uint64_t seed = 7;
    std::int64_t max_seq = 256;
    std::string kv_layout = "seq-first";  // or "llama"
    std::string out_graph;
    std::string out_weights;
};

struct QuantizeParams {
    std::string graph_path;
    std::string weights_path;
    std::string scheme = "e0m4";  // e0m4 | int4 | f32 (pass-through)
    int n_exp = 1;
    std::uint32_t group_size = 128;
    std::string out_path;  // unused for f32
};

struct RunParams {
    std::string graph_path;
    std::string weights_path;
    std::string quantized_path;  // optional LGQS container
    std::string prompt_ids;      // inline "1,2,3"
    std::string prompt_file;     // or whitespace-separated file
    int max_new_tokens = 32;
    int padding = 64;
    std::string mode = "optimized";  // optimized | naive-oracle
    bool fp16_storage = false;
    bool measure_time = false;
    std::string dump_arenas;  // optional binary KV arena dump path
};

struct DecodeResult;

// Writes the diff report for a finished pair of runs and returns kExitOk
// exactly when the token sequences match, kExitMismatch otherwise.
int compare_verdict(const DecodeResult& optimized, const DecodeResult& naive, std::ostream& out);

int cmd_build_toy_model(const BuildToyParams& params, std::ostream& out, std::ostream& err);
int cmd_infer_shapes(const std::string& graph_path, const std::string& weights_path,
                     std::ostream& out, std::ostream& err);
int cmd_plan_memory(const std::string& graph_path, const std::string& weights_path,
                    std::ostream& out, std::ostream& err);
int cmd_quantize(const QuantizeParams& params, std::ostream& out, std::ostream& err);
int cmd_mae_report(const QuantizeParams& params, std::ostream& out, std::ostream& err);
int cmd_run(const RunParams& params, std::ostream& out, std::ostream& err);
int cmd_compare(const RunParams& params, std::ostream& out, std::ostream& err);

}  // namespace lg
