#include "lg/cli_commands.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "lg/executor.hpp"
#include "lg/toy_model.hpp"

namespace lg {

using ordered_json = nlohmann::ordered_json;

namespace {

std::vector<std::int64_t> parse_prompt(const RunParams& params) {
    std::string text = params.prompt_ids;
    if (!params.prompt_file.empty()) {
        std::ifstream in(params.prompt_file);
        if (!in) fail(ErrorKind::IoError, "cannot open prompt file '" + params.prompt_file + "'");
        std::stringstream buffer;
        buffer << in.rdbuf();
        text = buffer.str();
    }
    for (auto& c : text) {
        if (c == ',') c = ' ';
    }
    std::istringstream in(text);
    std::vector<std::int64_t> ids;
    std::int64_t id = 0;
    while (in >> id) ids.push_back(id);
    return ids;
}

ordered_json counters_json(const Counters& c) {
    ordered_json j;
    j["shape_updates"] = c.shape_updates;
    j["shape_ops_executed"] = c.shape_ops_executed;
    j["sync_points"] = c.sync_points;
    j["allocations"] = c.allocations;
    j["kv_copy_bytes"] = c.kv_copy_bytes;
    j["matmul_prefill"] = c.matmul_prefill;
    j["matmul_decode"] = c.matmul_decode;
    return j;
}

ordered_json decode_json(const DecodeResult& r) {
    ordered_json j;
    j["steps"] = r.steps;
    j["prefill_tokens"] = r.prompt.size();
    j["new_tokens"] = r.generated.size();
    j["tokens"] = r.generated;
    j["counters"] = counters_json(r.counters);
    if (!r.stage_ms.empty()) {
        // Wall clock for local regression tracking only.
        j["tokens_per_step_ms"] = r.tokens_per_step_ms;
        j["stage_ms"] = {{"prefill", r.stage_ms[0]}, {"decode", r.stage_ms[1]}};
    }
    return j;
}

// Binary cache dump: per arena, {index:u32, cur_len:u64, max_seq:u64,
// rank:u8, dims:u32[]} then the little-endian payload of [0, cur_len).
void dump_arenas(Session& session, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::IoError, "cannot write arena dump '" + path + "'");
    for (std::size_t i = 0; i < session.arena_count(); ++i) {
        const CacheArena& arena = session.arena(i);
        const auto index = static_cast<std::uint32_t>(i);
        const auto cur_len = static_cast<std::uint64_t>(arena.cur_len());
        const auto max_seq = static_cast<std::uint64_t>(arena.max_seq());
        const auto rank = static_cast<std::uint8_t>(arena.dims().size());
        out.write(reinterpret_cast<const char*>(&index), sizeof(index));
        out.write(reinterpret_cast<const char*>(&cur_len), sizeof(cur_len));
        out.write(reinterpret_cast<const char*>(&max_seq), sizeof(max_seq));
        out.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
        for (auto d : arena.dims()) {
            const auto dim = static_cast<std::uint32_t>(d);
            out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
        }
        out.write(reinterpret_cast<const char*>(arena.data()),
                  static_cast<std::streamsize>(arena.cur_len() * arena.trailing_elems() *
                                               static_cast<std::int64_t>(sizeof(float))));
    }
}

// Names of rank-2 F32 weights consumed as MatMul right operands.
std::vector<std::string> matmul_weight_names(const Graph& graph) {
    std::vector<std::string> names;
    for (const auto& node : graph.nodes) {
        if (node.op != "MatMul" && node.op != "MatMulQuant") continue;
        const std::string& w = node.inputs[1];
        if (!graph.has_tensor(w)) continue;
        const TensorInfo& info = graph.tensor(w);
        if (info.kind == TensorKind::Weight && info.dtype == DType::F32 && info.shape.size() == 2 &&
            std::find(names.begin(), names.end(), w) == names.end()) {
            names.push_back(w);
        }
    }
    return names;
}

// LGQS container: named LGQ1 records back to back.
void save_quant_container(const std::map<std::string, QuantizedWeight>& entries,
                          const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::IoError, "cannot write '" + path + "'");
    out.write("LGQS", 4);
    for (const auto& [name, qw] : entries) {
        const auto len = static_cast<std::uint32_t>(name.size());
        out.write(reinterpret_cast<const char*>(&len), sizeof(len));
        out.write(name.data(), len);
        pack_weight(qw, out);
    }
}

std::map<std::string, QuantizedWeight> load_quant_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot open '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "LGQS", 4) != 0) {
        fail(ErrorKind::BadMagic, "not a quantized weight container (expected LGQS)");
    }
    std::map<std::string, QuantizedWeight> entries;
    while (in.peek() != EOF) {
        std::uint32_t len = 0;
        in.read(reinterpret_cast<char*>(&len), sizeof(len));
        if (!in) fail(ErrorKind::TruncatedStream, "container ended early");
        std::string name(len, '\0');
        in.read(name.data(), len);
        if (!in) fail(ErrorKind::TruncatedStream, "container ended early");
        entries[name] = unpack_weight(in);
    }
    return entries;
}

void emit(const ordered_json& j, std::ostream& out) { out << j.dump(2) << "\n"; }

struct LoadedModel {
    Graph graph;
    WeightStore weights;
};

LoadedModel load_model(const std::string& graph_path, const std::string& weights_path) {
    LoadedModel m;
    m.graph = load_graph_file(graph_path);
    if (!weights_path.empty()) m.weights = WeightStore::load_file(weights_path);
    return m;
}

CompileOptions options_for_mode(const std::string& mode) {
    if (mode == "optimized") return {};
    if (mode == "naive-oracle") {
        CompileOptions o;
        o.fuse = false;
        o.fold_shape_ops = false;
        o.kv_arenas = false;
        o.reuse_memory = false;
        return o;
    }
    fail(ErrorKind::ConfigError, "mode must be 'optimized' or 'naive-oracle'");
}

DecodeResult run_mode(const LoadedModel& model,
                      const std::map<std::string, QuantizedWeight>& quantized,
                      const RunParams& params, const std::string& mode) {
    const bool naive = mode == "naive-oracle";
    const CompiledPlan plan = compile(model.graph, model.weights, options_for_mode(mode));
    SessionOptions so;
    so.preallocate = !naive;
    so.naive_resolution = naive;
    so.fp16_storage = params.fp16_storage;
    Session session(plan, model.weights, so);
    for (const auto& [name, qw] : quantized) session.register_quantized(name, qw);
    const int padding = naive ? 1 : params.padding;
    DecodeResult result = decode_loop(session, parse_prompt(params), params.max_new_tokens, padding,
                                      params.measure_time);
    if (!params.dump_arenas.empty() && session.arena_count() > 0) {
        dump_arenas(session, params.dump_arenas);
    }
    return result;
}

}  // namespace

int cmd_build_toy_model(const BuildToyParams& params, std::ostream& out, std::ostream& err) {
    try {
        ToyDecoderConfig cfg;
        cfg.layers = params.layers;
        cfg.hidden = params.hidden;
        cfg.heads = params.heads;
        cfg.head_dim = params.head_dim;
        cfg.vocab = params.vocab;
        cfg.seed = params.seed;
        cfg.max_seq = params.max_seq;
        if (params.kv_layout == "llama") {
            cfg.kv_layout = KvLayout::LlamaStyle;
        } else if (params.kv_layout != "seq-first") {
            fail(ErrorKind::ConfigError, "kv layout must be 'seq-first' or 'llama'");
        }
        const ToyDecoder toy = build_toy_decoder(cfg);
        save_graph_file(toy.graph, params.out_graph);
        toy.weights.save_file(params.out_weights);
        ordered_json j;
        j["graph"] = params.out_graph;
        j["weights"] = params.out_weights;
        j["nodes"] = toy.graph.nodes.size();
        j["tensors"] = toy.graph.tensors.size();
        emit(j, out);
        return kExitOk;
    } catch (const Error& e) {
        err << e.what() << "\n";
        return kExitCompileError;
    }
}

int cmd_infer_shapes(const std::string& graph_path, const std::string& weights_path,
                     std::ostream& out, std::ostream& err) {
    try {
        const LoadedModel model = load_model(graph_path, weights_path);
        const CompiledPlan plan = compile(model.graph, model.weights, {});
        const auto classes = classify(plan.graph);
        std::map<std::string, NodeClass> tensor_class;
        for (std::size_t i = 0; i < plan.graph.nodes.size(); ++i) {
            for (const auto& o : plan.graph.nodes[i].outputs) tensor_class[o] = classes[i];
        }
        for (const auto& t : plan.graph.tensors) {
            const Shape& shape = plan.derived.shapes.count(t.name) ? plan.derived.shape(t.name)
                                                                   : t.shape;
            out << t.name << " : " << dtype_name(t.dtype) << " [";
            for (std::size_t i = 0; i < shape.size(); ++i) {
                out << (i ? ", " : "") << shape[i].to_string();
            }
            char cls = 'T';
            if (tensor_class.count(t.name)) {
                cls = tensor_class[t.name] == NodeClass::ShapeComputing ? 'S' : 'T';
            } else if (t.kind == TensorKind::ShapeValue) {
                cls = 'S';
            }
            out << "] class=" << cls << "\n";
        }
        ordered_json summary;
        summary["shape_ops_retained"] = plan.shape_ops_retained;
        summary["sync_points"] = plan.sync_points;
        summary["fused_nodes"] = plan.fused_nodes;
        emit(summary, out);
        return kExitOk;
    } catch (const Error& e) {
        err << e.what() << "\n";
        return kExitCompileError;
    }
}

int cmd_plan_memory(const std::string& graph_path, const std::string& weights_path,
                    std::ostream& out, std::ostream& err) {
    try {
        const LoadedModel model = load_model(graph_path, weights_path);
        const CompiledPlan plan = compile(model.graph, model.weights, {});
        ordered_json j;
        j["blocks"] = ordered_json::array();
        for (const auto& block : plan.memory.blocks) {
            ordered_json b;
            b["id"] = block.id;
            b["size_expr"] = block.size_bytes.to_string();
            b["max_bytes"] = block.max_bytes;
            j["blocks"].push_back(std::move(b));
        }
        ordered_json assignments;
        for (const auto& [tensor, block] : plan.memory.assignment) assignments[tensor] = block;
        for (const auto& [tensor, root] : plan.memory.aliases) {
            assignments[tensor] = plan.memory.block_of(tensor);
        }
        j["assignments"] = std::move(assignments);
        j["peak_bytes"] = plan.memory.peak_bytes;
        j["naive_bytes"] = plan.memory.naive_bytes;
        j["savings_ratio"] =
            plan.memory.naive_bytes == 0
                ? 0.0
                : 1.0 - static_cast<double>(plan.memory.peak_bytes) / plan.memory.naive_bytes;
        emit(j, out);
        return kExitOk;
    } catch (const Error& e) {
        err << e.what() << "\n";
        return kExitCompileError;
    }
}

namespace {

int quantize_impl(const QuantizeParams& params, bool write_file, std::ostream& out,
                  std::ostream& err) {
    try {
        const LoadedModel model = load_model(params.graph_path, params.weights_path);
        ordered_json report;
        report["scheme"] = params.scheme;
        report["group_size"] = params.group_size;
        report["n"] = params.n_exp;
        report["tensors"] = ordered_json::array();
        if (params.scheme == "f32") {
            report["note"] = "f32 is a pass-through; no file written";
            emit(report, out);
            return kExitOk;
        }
        if (params.scheme != "e0m4" && params.scheme != "int4") {
            fail(ErrorKind::SchemeUnsupported, "scheme must be e0m4, int4 or f32");
        }
        const QuantScheme scheme = params.scheme == "e0m4" ? QuantScheme::E0M4 : QuantScheme::Int4;
        std::map<std::string, QuantizedWeight> entries;
        double ratio_sum = 0.0;
        int ratio_count = 0;
        for (const auto& name : matmul_weight_names(model.graph)) {
            const auto& entry = model.weights.at(name);
            const auto k = static_cast<std::uint32_t>(entry.dims[0]);
            const auto n = static_cast<std::uint32_t>(entry.dims[1]);
            entries[name] =
                quantize_weight(entry.as_f32(), k, n, scheme, params.group_size, params.n_exp);
            const MaeReport mae =
                mae_compare(entry.as_f32(), k, n, params.group_size, params.n_exp);
            ordered_json row;
            row["tensor"] = name;
            row["k"] = k;
            row["n"] = n;
            if (k % params.group_size != 0) row["short_final_group"] = k % params.group_size;
            row["mae_fp4"] = mae.mae_fp4;
            row["mae_int4"] = mae.mae_int4;
            if (mae.ratio) {
                row["ratio"] = *mae.ratio;
                ratio_sum += *mae.ratio;
                ++ratio_count;
            }
            report["tensors"].push_back(std::move(row));
        }
        if (ratio_count > 0) report["mean_ratio"] = ratio_sum / ratio_count;
        if (write_file) {
            save_quant_container(entries, params.out_path);
            report["out"] = params.out_path;
        }
        emit(report, out);
        return kExitOk;
    } catch (const Error& e) {
        err << e.what() << "\n";
        switch (e.kind()) {
            case ErrorKind::IoError:
            case ErrorKind::SchemaError:
            case ErrorKind::BadMagic:
            case ErrorKind::TruncatedStream:
            case ErrorKind::UndeclaredSymbol:
            case ErrorKind::UnknownOperator:
            case ErrorKind::CycleError: return kExitCompileError;
            default: return kExitRuntimeError;
        }
    }
}

}  // namespace

int cmd_quantize(const QuantizeParams& params, std::ostream& out, std::ostream& err) {
    return quantize_impl(params, true, out, err);
}

int cmd_mae_report(const QuantizeParams& params, std::ostream& out, std::ostream& err) {
    return quantize_impl(params, false, out, err);
}

int cmd_run(const RunParams& params, std::ostream& out, std::ostream& err) {
    LoadedModel model;
    std::map<std::string, QuantizedWeight> quantized;
    try {
        model = load_model(params.graph_path, params.weights_path);
        if (!params.quantized_path.empty()) quantized = load_quant_container(params.quantized_path);
        (void)options_for_mode(params.mode);
    } catch (const Error& e) {
        err << e.what() << "\n";
        return kExitCompileError;
    }
    try {
        const DecodeResult r = run_mode(model, quantized, params, params.mode);
        emit(decode_json(r), out);
        return kExitOk;
    } catch (const Error& e) {
        err << e.what() << "\n";
        return kExitRuntimeError;
    }
}

int cmd_compare(const RunParams& params, std::ostream& out, std::ostream& err) {
    LoadedModel model;
    std::map<std::string, QuantizedWeight> quantized;
    try {
        model = load_model(params.graph_path, params.weights_path);
        if (!params.quantized_path.empty()) quantized = load_quant_container(params.quantized_path);
    } catch (const Error& e) {
        err << e.what() << "\n";
        return kExitCompileError;
    }
    try {
        const DecodeResult optimized = run_mode(model, quantized, params, "optimized");
        const DecodeResult naive = run_mode(model, quantized, params, "naive-oracle");
        return compare_verdict(optimized, naive, out);
    } catch (const Error& e) {
        err << e.what() << "\n";
        return kExitRuntimeError;
    }
}

int compare_verdict(const DecodeResult& optimized, const DecodeResult& naive, std::ostream& out) {
    const bool identical = optimized.generated == naive.generated;
    ordered_json j;
    j["tokens_identical"] = identical;
    j["kv_copy_bytes_saved"] = naive.counters.kv_copy_bytes - optimized.counters.kv_copy_bytes;
    j["optimized"] = decode_json(optimized);
    j["naive_oracle"] = decode_json(naive);
    emit(j, out);
    return identical ? kExitOk : kExitMismatch;
}

}  // namespace lg
