#include "lg/toy_model.hpp"

#include <cmath>
#include <random>

#include "lg/shape_infer.hpp"

namespace lg {

namespace {

// Box-Muller over raw mt19937_64 draws; std::normal_distribution is not
// bit-stable across standard library implementations.
class GaussianSource {
public:
    explicit GaussianSource(std::uint64_t seed) : gen_(seed) {}

    float next(float stddev) {
        if (have_spare_) {
            have_spare_ = false;
            return spare_ * stddev;
        }
        const double u1 = (static_cast<double>(gen_() >> 11) + 0.5) * 0x1p-53;
        const double u2 = (static_cast<double>(gen_() >> 11) + 0.5) * 0x1p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = static_cast<float>(r * std::sin(2.0 * M_PI * u2));
        have_spare_ = true;
        return static_cast<float>(r * std::cos(2.0 * M_PI * u2)) * stddev;
    }

    std::vector<float> matrix(std::int64_t rows, std::int64_t cols, float stddev) {
        std::vector<float> out(static_cast<std::size_t>(rows * cols));
        for (auto& v : out) v = next(stddev);
        return out;
    }

private:
    std::mt19937_64 gen_;
    float spare_ = 0.0f;
    bool have_spare_ = false;
};

class Builder {
public:
    explicit Builder(const ToyDecoderConfig& config) : cfg_(config), rng_(config.seed) {}

    ToyDecoder run() {
        check_config();
        declare_interface();
        declare_constants();

        std::string x = emit_embedding();
        for (int layer = 0; layer < cfg_.layers; ++layer) {
            x = emit_layer(layer, x);
        }
        emit_logits(x);

        validate_graph(graph_);
        // Fill in the activation shapes so the serialized file is complete.
        const DerivedShapes derived = derive_shapes(graph_, weights_);
        for (auto& t : graph_.tensors) {
            if (t.kind == TensorKind::Activation || t.kind == TensorKind::GraphOutput ||
                t.kind == TensorKind::ShapeValue) {
                t.shape = derived.shape(t.name);
            }
        }
        return {std::move(graph_), std::move(weights_)};
    }

private:
    void check_config() {
        if (cfg_.layers < 1 || cfg_.hidden < 1 || cfg_.heads < 1 || cfg_.head_dim < 1 ||
            cfg_.vocab < 2 || cfg_.max_seq < 1) {
            fail(ErrorKind::ConfigError, "toy decoder dimensions must be positive (vocab >= 2)");
        }
        if (cfg_.hidden != cfg_.heads * cfg_.head_dim) {
            fail(ErrorKind::ConfigError, "hidden must equal heads * head_dim");
        }
    }

    SymExpr sym_n() const { return SymExpr::symbol("N"); }
    SymExpr sym_sum() const { return SymExpr::symbol("sumN"); }
    SymExpr lit(std::int64_t v) const { return SymExpr::constant(v); }

    void declare_tensor(const std::string& name, DType dtype, Shape shape, TensorKind kind) {
        graph_.tensors.push_back({name, dtype, std::move(shape), kind});
    }

    void declare_interface() {
        graph_.meta.model = "toy-decoder";
        graph_.symbols.push_back({"N", cfg_.max_seq});
        graph_.symbols.push_back({"sumN", cfg_.max_seq});
        declare_tensor("input_ids", DType::I64, {lit(1), sym_n()}, TensorKind::GraphInput);
        declare_tensor("attn_mask", DType::F32, {lit(1), lit(1), sym_n(), sym_sum()},
                       TensorKind::GraphInput);
        declare_tensor("position_ids", DType::I64, {sym_n()}, TensorKind::GraphInput);
        graph_.meta.position_ids = "position_ids";
        const SymExpr past_len = sym_sum() - sym_n();
        for (int layer = 0; layer < cfg_.layers; ++layer) {
            for (const char* side : {"k", "v"}) {
                const std::string past = "past_" + std::string(side) + "_" + std::to_string(layer);
                if (cfg_.kv_layout == KvLayout::SeqFirst) {
                    declare_tensor(past, DType::F32, {past_len, lit(1), lit(cfg_.heads), lit(cfg_.head_dim)},
                                   TensorKind::GraphInput);
                } else {
                    declare_tensor(past, DType::F32, {lit(1), lit(cfg_.heads), past_len, lit(cfg_.head_dim)},
                                   TensorKind::GraphInput);
                }
            }
        }
    }

    void put_weight(const std::string& name, std::vector<std::int64_t> dims, std::vector<float> data) {
        Shape shape;
        for (auto d : dims) shape.push_back(lit(d));
        declare_tensor(name, DType::F32, shape, TensorKind::Weight);
        weights_.put_f32(name, std::move(dims), data);
    }

    void put_i64_const(const std::string& name, std::vector<std::int64_t> dims,
                       std::vector<std::int64_t> data) {
        Shape shape;
        for (auto d : dims) shape.push_back(lit(d));
        declare_tensor(name, DType::I64, shape, TensorKind::Weight);
        weights_.put_i64(name, std::move(dims), data);
    }

    void declare_constants() {
        const auto h = static_cast<std::int64_t>(cfg_.hidden);
        const auto v = static_cast<std::int64_t>(cfg_.vocab);
        put_weight("tok_emb", {v, h}, rng_.matrix(v, h, 1.0f));
        put_weight("lm_head", {h, v}, rng_.matrix(h, v, inv_sqrt(cfg_.hidden)));
        put_weight("c_two", {1}, {2.0f});
        put_weight("c_eps", {1}, {1e-5f});
        put_weight("c_scale", {1}, {1.0f / std::sqrt(static_cast<float>(cfg_.head_dim))});
        put_i64_const("c_idx1", {}, {1});
        put_i64_const("c_one_i64", {1}, {1});
        put_i64_const("c_heads_i64", {1}, {cfg_.heads});
        put_i64_const("c_hd_i64", {1}, {cfg_.head_dim});
        put_i64_const("q_target", {4}, {1, -1, cfg_.heads, cfg_.head_dim});
    }

    int emit(const std::string& op, std::vector<std::string> inputs, const std::string& output,
             DType dtype, TensorKind kind, std::map<std::string, AttrValue> attrs = {}) {
        NodeSpec node;
        node.id = next_id_++;
        node.op = op;
        node.inputs = std::move(inputs);
        node.outputs = {output};
        node.attrs = std::move(attrs);
        graph_.nodes.push_back(std::move(node));
        declare_tensor(output, dtype, {}, kind);
        return next_id_ - 1;
    }

    std::string emit_rms_norm(const std::string& prefix, const std::string& x,
                              const std::string& weight_name) {
        const auto h = static_cast<std::int64_t>(cfg_.hidden);
        put_weight(weight_name, {h}, rms_weight(h));
        emit("Pow", {x, "c_two"}, prefix + "_pow", DType::F32, TensorKind::Activation);
        emit("ReduceMean", {prefix + "_pow"}, prefix + "_ms", DType::F32, TensorKind::Activation,
             {{"axes", std::vector<std::int64_t>{-1}}, {"keepdims", std::int64_t(1)}});
        emit("Add", {prefix + "_ms", "c_eps"}, prefix + "_mse", DType::F32, TensorKind::Activation);
        emit("Sqrt", {prefix + "_mse"}, prefix + "_rms", DType::F32, TensorKind::Activation);
        emit("Div", {x, prefix + "_rms"}, prefix + "_xn", DType::F32, TensorKind::Activation);
        emit("Mul", {prefix + "_xn", weight_name}, prefix + "_out", DType::F32, TensorKind::Activation);
        return prefix + "_out";
    }

    std::string emit_embedding() {
        emit("Gather", {"tok_emb", "input_ids"}, "embed", DType::F32, TensorKind::Activation,
             {{"axis", std::int64_t(0)}});
        return "embed";
    }

    // Shape(ref) -> Gather(1) -> Unsqueeze: the dynamic token count as a [1]
    // I64 tensor, the way exported decoder graphs spell it.
    std::string emit_seq_len_chain(const std::string& prefix, const std::string& ref) {
        emit("Shape", {ref}, prefix + "_shape", DType::I64, TensorKind::ShapeValue);
        emit("Gather", {prefix + "_shape", "c_idx1"}, prefix + "_n", DType::I64,
             TensorKind::ShapeValue, {{"axis", std::int64_t(0)}});
        emit("Unsqueeze", {prefix + "_n"}, prefix + "_n1", DType::I64, TensorKind::ShapeValue,
             {{"axes", std::vector<std::int64_t>{0}}});
        return prefix + "_n1";
    }

    std::string emit_layer(int layer, const std::string& x) {
        const std::string p = "l" + std::to_string(layer);
        const auto h = static_cast<std::int64_t>(cfg_.hidden);
        const auto f = 2 * h;
        const float wstd = inv_sqrt(cfg_.hidden);

        const std::string xn = emit_rms_norm(p + "_rms1", x, p + "_rms1_w");

        put_weight(p + "_wq", {h, h}, rng_.matrix(h, h, wstd));
        put_weight(p + "_wk", {h, h}, rng_.matrix(h, h, wstd));
        put_weight(p + "_wv", {h, h}, rng_.matrix(h, h, wstd));
        emit("MatMul", {xn, p + "_wq"}, p + "_q", DType::F32, TensorKind::Activation);
        emit("MatMul", {xn, p + "_wk"}, p + "_k", DType::F32, TensorKind::Activation);
        emit("MatMul", {xn, p + "_wv"}, p + "_v", DType::F32, TensorKind::Activation);

        // Q heads split through a constant -1 target.
        emit("Reshape", {p + "_q", "q_target"}, p + "_q4", DType::F32, TensorKind::Activation,
             {{"allowzero", std::int64_t(0)}});
        emit("Transpose", {p + "_q4"}, p + "_qT", DType::F32, TensorKind::Activation,
             {{"perm", std::vector<std::int64_t>{0, 2, 1, 3}}});

        // K/V head split through a Shape-derived target.
        const std::string n1 = emit_seq_len_chain(p + "_kv", p + "_k");
        std::string k_for_cache;
        std::string v_for_cache;
        if (cfg_.kv_layout == KvLayout::SeqFirst) {
            emit("Concat", {n1, "c_one_i64", "c_heads_i64", "c_hd_i64"}, p + "_kvtgt", DType::I64,
                 TensorKind::ShapeValue, {{"axis", std::int64_t(0)}});
            emit("Reshape", {p + "_k", p + "_kvtgt"}, p + "_k4", DType::F32, TensorKind::Activation,
                 {{"allowzero", std::int64_t(0)}});
            emit("Reshape", {p + "_v", p + "_kvtgt"}, p + "_v4", DType::F32, TensorKind::Activation,
                 {{"allowzero", std::int64_t(0)}});
            k_for_cache = p + "_k4";
            v_for_cache = p + "_v4";
        } else {
            emit("Concat", {"c_one_i64", n1, "c_heads_i64", "c_hd_i64"}, p + "_kvtgt", DType::I64,
                 TensorKind::ShapeValue, {{"axis", std::int64_t(0)}});
            emit("Reshape", {p + "_k", p + "_kvtgt"}, p + "_k4", DType::F32, TensorKind::Activation,
                 {{"allowzero", std::int64_t(0)}});
            emit("Reshape", {p + "_v", p + "_kvtgt"}, p + "_v4", DType::F32, TensorKind::Activation,
                 {{"allowzero", std::int64_t(0)}});
            emit("Transpose", {p + "_k4"}, p + "_k5", DType::F32, TensorKind::Activation,
                 {{"perm", std::vector<std::int64_t>{0, 2, 1, 3}}});
            emit("Transpose", {p + "_v4"}, p + "_v5", DType::F32, TensorKind::Activation,
                 {{"perm", std::vector<std::int64_t>{0, 2, 1, 3}}});
            k_for_cache = p + "_k5";
            v_for_cache = p + "_v5";
        }

        const std::string past_k = "past_k_" + std::to_string(layer);
        const std::string past_v = "past_v_" + std::to_string(layer);
        const std::string present_k = "present_k_" + std::to_string(layer);
        const std::string present_v = "present_v_" + std::to_string(layer);
        const std::int64_t concat_axis = cfg_.kv_layout == KvLayout::SeqFirst ? 0 : 2;
        emit("Concat", {past_k, k_for_cache}, present_k, DType::F32, TensorKind::GraphOutput,
             {{"axis", concat_axis}});
        emit("Concat", {past_v, v_for_cache}, present_v, DType::F32, TensorKind::GraphOutput,
             {{"axis", concat_axis}});
        graph_.meta.kv_pairs.push_back({past_k, k_for_cache, "kv_k" + std::to_string(layer)});
        graph_.meta.kv_pairs.push_back({past_v, v_for_cache, "kv_v" + std::to_string(layer)});

        // Attention over the concatenated caches.
        if (cfg_.kv_layout == KvLayout::SeqFirst) {
            emit("Transpose", {present_k}, p + "_kT", DType::F32, TensorKind::Activation,
                 {{"perm", std::vector<std::int64_t>{1, 2, 3, 0}}});
            emit("Transpose", {present_v}, p + "_vT", DType::F32, TensorKind::Activation,
                 {{"perm", std::vector<std::int64_t>{1, 2, 0, 3}}});
        } else {
            emit("Transpose", {present_k}, p + "_kT", DType::F32, TensorKind::Activation,
                 {{"perm", std::vector<std::int64_t>{0, 1, 3, 2}}});
            emit("Identity", {present_v}, p + "_vT", DType::F32, TensorKind::Activation);
        }
        emit("MatMul", {p + "_qT", p + "_kT"}, p + "_scores", DType::F32, TensorKind::Activation);
        emit("Mul", {p + "_scores", "c_scale"}, p + "_scaled", DType::F32, TensorKind::Activation);
        emit("Add", {p + "_scaled", "attn_mask"}, p + "_masked", DType::F32, TensorKind::Activation);
        emit("Softmax", {p + "_masked"}, p + "_probs", DType::F32, TensorKind::Activation,
             {{"axis", std::int64_t(-1)}});
        emit("MatMul", {p + "_probs", p + "_vT"}, p + "_ctx", DType::F32, TensorKind::Activation);
        emit("Transpose", {p + "_ctx"}, p + "_ctx2", DType::F32, TensorKind::Activation,
             {{"perm", std::vector<std::int64_t>{0, 2, 1, 3}}});
        // Merge heads back with the Shape of the residual stream as target.
        emit("Shape", {x}, p + "_xshape", DType::I64, TensorKind::ShapeValue);
        emit("Reshape", {p + "_ctx2", p + "_xshape"}, p + "_ctxm", DType::F32, TensorKind::Activation,
             {{"allowzero", std::int64_t(0)}});
        put_weight(p + "_wo", {h, h}, rng_.matrix(h, h, wstd));
        emit("MatMul", {p + "_ctxm", p + "_wo"}, p + "_attn", DType::F32, TensorKind::Activation);
        emit("Add", {x, p + "_attn"}, p + "_res1", DType::F32, TensorKind::Activation);

        const std::string xn2 = emit_rms_norm(p + "_rms2", p + "_res1", p + "_rms2_w");
        put_weight(p + "_wgate", {h, f}, rng_.matrix(h, f, wstd));
        put_weight(p + "_wup", {h, f}, rng_.matrix(h, f, wstd));
        put_weight(p + "_wdown", {f, h}, rng_.matrix(f, h, inv_sqrt(static_cast<int>(f))));
        emit("MatMul", {xn2, p + "_wgate"}, p + "_gate", DType::F32, TensorKind::Activation);
        emit("MatMul", {xn2, p + "_wup"}, p + "_up", DType::F32, TensorKind::Activation);
        emit("Silu", {p + "_gate"}, p + "_silu", DType::F32, TensorKind::Activation);
        emit("Mul", {p + "_silu", p + "_up"}, p + "_gu", DType::F32, TensorKind::Activation);
        emit("MatMul", {p + "_gu", p + "_wdown"}, p + "_down", DType::F32, TensorKind::Activation);
        emit("Add", {p + "_res1", p + "_down"}, p + "_out", DType::F32, TensorKind::Activation);
        return p + "_out";
    }

    void emit_logits(const std::string& x) {
        const std::string xf = emit_rms_norm("final_rms", x, "final_rms_scale");
        emit("MatMul", {xf, "lm_head"}, "logits", DType::F32, TensorKind::GraphOutput);
    }

    std::vector<float> rms_weight(std::int64_t h) {
        std::vector<float> w(static_cast<std::size_t>(h));
        for (auto& v : w) v = 1.0f + rng_.next(0.02f);
        return w;
    }

    static float inv_sqrt(int n) { return 1.0f / std::sqrt(static_cast<float>(n)); }

    ToyDecoderConfig cfg_;
    GaussianSource rng_;
    Graph graph_;
    WeightStore weights_;
    int next_id_ = 0;
};

}  // namespace

ToyDecoder build_toy_decoder(const ToyDecoderConfig& config) {
    return Builder(config).run();
}

}  // namespace lg
