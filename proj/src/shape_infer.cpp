#include "lg/shape_infer.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

namespace lg {

namespace {

std::string node_label(const NodeSpec& node) {
    return node.op + " node " + std::to_string(node.id);
}

std::int64_t normalize_axis(std::int64_t axis, std::size_t rank, const NodeSpec& node) {
    const auto r = static_cast<std::int64_t>(rank);
    if (axis < -r || axis >= r) {
        fail(ErrorKind::RankMismatch, node_label(node) + ": axis " + std::to_string(axis) +
                                          " out of range for rank " + std::to_string(rank));
    }
    return axis < 0 ? axis + r : axis;
}

void expect_inputs(const NodeSpec& node, std::size_t count) {
    if (node.inputs.size() != count) {
        fail(ErrorKind::SchemaError, node_label(node) + ": expected " + std::to_string(count) +
                                         " inputs, got " + std::to_string(node.inputs.size()));
    }
}

SymExpr shape_elem_count(const Shape& shape) {
    SymExpr count = SymExpr::constant(1);
    for (const auto& dim : shape) count = count * dim;
    return count;
}

Shape broadcast_shapes(const Shape& a, const Shape& b, const NodeSpec& node) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const SymExpr* da = i < rank - a.size() ? nullptr : &a[i - (rank - a.size())];
        const SymExpr* db = i < rank - b.size() ? nullptr : &b[i - (rank - b.size())];
        const SymExpr one = SymExpr::constant(1);
        const SymExpr& left = da ? *da : one;
        const SymExpr& right = db ? *db : one;
        if (left == right) {
            out[i] = left;
        } else if (left.is_constant() && left.constant_value() == 1) {
            out[i] = right;
        } else if (right.is_constant() && right.constant_value() == 1) {
            out[i] = left;
        } else {
            fail(ErrorKind::BroadcastError, node_label(node) + ": cannot broadcast dim '" +
                                                left.to_string() + "' with '" + right.to_string() + "'");
        }
    }
    return out;
}

}  // namespace

const Shape& DerivedShapes::shape(const std::string& name) const {
    auto it = shapes.find(name);
    if (it == shapes.end()) fail(ErrorKind::SchemaError, "no derived shape for '" + name + "'");
    return it->second;
}

const std::vector<SymExpr>& DerivedShapes::value(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) fail(ErrorKind::SchemaError, "no symbolic value for '" + name + "'");
    return it->second;
}

namespace {

// Shared derivation state: shapes for every visited tensor plus symbolic
// values for shape-value tensors and I64 constants.
struct DeriveState {
    const Graph& graph;
    const WeightStore& weights;
    DerivedShapes out;

    const Shape& shape(const std::string& name) const { return out.shape(name); }

    const std::vector<SymExpr>* value(const std::string& name) {
        auto it = out.values.find(name);
        if (it != out.values.end()) return &it->second;
        const TensorInfo& info = graph.tensor(name);
        if (info.kind == TensorKind::Weight && info.dtype == DType::I64 && weights.has(name)) {
            std::vector<SymExpr> v;
            for (auto x : weights.at(name).as_i64()) v.push_back(SymExpr::constant(x));
            auto [slot, inserted] = out.values.emplace(name, std::move(v));
            (void)inserted;
            return &slot->second;
        }
        return nullptr;
    }
};

Shape reshape_output(const Shape& data, const std::vector<SymExpr>& target, const NodeSpec& node) {
    Shape out;
    int wildcard = -1;
    SymExpr known = SymExpr::constant(1);
    for (std::size_t i = 0; i < target.size(); ++i) {
        const SymExpr& dim = target[i];
        if (dim.is_constant() && dim.constant_value() == -1) {
            if (wildcard >= 0) {
                fail(ErrorKind::UnsupportedDynamicAttr, node_label(node) + ": multiple -1 target dims");
            }
            wildcard = static_cast<int>(i);
            out.push_back(dim);
            continue;
        }
        if (dim.is_constant() && dim.constant_value() <= 0) {
            fail(ErrorKind::UnsupportedDynamicAttr, node_label(node) + ": target dim must be positive");
        }
        known = known * dim;
        out.push_back(dim);
    }
    const SymExpr elems = shape_elem_count(data);
    if (wildcard >= 0) {
        auto q = elems.div_exact(known);
        if (!q) {
            fail(ErrorKind::NonDivisibleReshape,
                 node_label(node) + ": element count " + elems.to_string() +
                     " is not divisible by " + known.to_string());
        }
        out[static_cast<std::size_t>(wildcard)] = *q;
    } else {
        auto q = elems.div_exact(known);
        if (!q || *q != SymExpr::constant(1)) {
            fail(ErrorKind::NonDivisibleReshape,
                 node_label(node) + ": target element count " + known.to_string() +
                     " does not match input " + elems.to_string());
        }
    }
    return out;
}

Shape slice_output(const Shape& data, const NodeSpec& node) {
    const auto starts = node.attr_ints("starts");
    const auto ends = node.attr_ints("ends");
    const auto axes = node.attr_ints("axes");
    Shape out = data;
    for (std::size_t i = 0; i < axes.size(); ++i) {
        const auto axis = static_cast<std::size_t>(normalize_axis(axes[i], data.size(), node));
        const SymExpr& dim = data[axis];
        const std::int64_t start = starts[i];
        const std::int64_t end = ends[i];
        if (start < 0) {
            fail(ErrorKind::UnsupportedDynamicAttr, node_label(node) + ": negative slice start");
        }
        if (dim.is_constant()) {
            const std::int64_t extent = dim.constant_value();
            const std::int64_t hi = std::min(end < 0 ? extent + end : end, extent);
            if (hi < start) fail(ErrorKind::RankMismatch, node_label(node) + ": empty slice");
            out[axis] = SymExpr::constant(hi - start);
        } else if (end == std::numeric_limits<std::int64_t>::max()) {
            out[axis] = dim - SymExpr::constant(start);
        } else if (end < 0) {
            out[axis] = dim + SymExpr::constant(end) - SymExpr::constant(start);
        } else {
            // A literal end cannot be clamped against a symbolic extent.
            fail(ErrorKind::UnsupportedDynamicAttr,
                 node_label(node) + ": literal slice end on symbolic dim");
        }
    }
    return out;
}

std::vector<SymExpr> apply_value_binary(const std::string& op, const std::vector<SymExpr>& a,
                                        const std::vector<SymExpr>& b, const NodeSpec& node) {
    const std::size_t size = std::max(a.size(), b.size());
    if (a.size() != b.size() && a.size() != 1 && b.size() != 1) {
        fail(ErrorKind::BroadcastError, node_label(node) + ": shape-value arity mismatch");
    }
    std::vector<SymExpr> out(size);
    for (std::size_t i = 0; i < size; ++i) {
        const SymExpr& x = a.size() == 1 ? a[0] : a[i];
        const SymExpr& y = b.size() == 1 ? b[0] : b[i];
        if (op == "Add") {
            out[i] = x + y;
        } else if (op == "Sub") {
            out[i] = x - y;
        } else if (op == "Mul") {
            out[i] = x * y;
        } else if (op == "Div") {
            if (y.is_zero()) fail(ErrorKind::ZeroDivisor, node_label(node) + ": shape-value division by zero");
            auto q = x.div_exact(y);
            if (!q) {
                fail(ErrorKind::UnsupportedDynamicAttr,
                     node_label(node) + ": inexact symbolic division " + x.to_string() + " / " + y.to_string());
            }
            out[i] = *q;
        } else {
            fail(ErrorKind::UnsupportedDynamicAttr, node_label(node) + ": '" + op + "' on shape values");
        }
    }
    return out;
}

void derive_node(DeriveState& state, const NodeSpec& node) {
    const std::string& op = node.op;
    auto set_shape = [&](const std::string& name, Shape shape) {
        state.out.shapes[name] = std::move(shape);
    };
    auto set_value = [&](const std::string& name, std::vector<SymExpr> value) {
        state.out.values[name] = std::move(value);
    };

    if (op == "Shape") {
        expect_inputs(node, 1);
        const Shape& in = state.shape(node.inputs[0]);
        set_shape(node.outputs[0], {SymExpr::constant(static_cast<std::int64_t>(in.size()))});
        set_value(node.outputs[0], in);
        return;
    }
    if (op == "Identity" || op == "Cast") {
        expect_inputs(node, 1);
        set_shape(node.outputs[0], state.shape(node.inputs[0]));
        if (const auto* v = state.value(node.inputs[0])) set_value(node.outputs[0], *v);
        return;
    }
    if (op == "Gather") {
        expect_inputs(node, 2);
        const Shape& data = state.shape(node.inputs[0]);
        const Shape& indices = state.shape(node.inputs[1]);
        const auto axis =
            static_cast<std::size_t>(normalize_axis(node.attr_int("axis"), data.size(), node));
        Shape out;
        out.insert(out.end(), data.begin(), data.begin() + static_cast<std::ptrdiff_t>(axis));
        out.insert(out.end(), indices.begin(), indices.end());
        out.insert(out.end(), data.begin() + static_cast<std::ptrdiff_t>(axis) + 1, data.end());
        set_shape(node.outputs[0], out);
        // Shape-value mode: pick elements out of a known vector.
        const auto* data_value = state.value(node.inputs[0]);
        const auto* index_value = state.value(node.inputs[1]);
        if (data_value && index_value && axis == 0) {
            std::vector<SymExpr> picked;
            for (const auto& idx : *index_value) {
                if (!idx.is_constant()) {
                    fail(ErrorKind::UnsupportedDynamicAttr, node_label(node) + ": symbolic gather index");
                }
                std::int64_t i = idx.constant_value();
                const auto len = static_cast<std::int64_t>(data_value->size());
                if (i < 0) i += len;
                if (i < 0 || i >= len) {
                    fail(ErrorKind::RankMismatch, node_label(node) + ": gather index out of range");
                }
                picked.push_back((*data_value)[static_cast<std::size_t>(i)]);
            }
            set_value(node.outputs[0], picked);
        }
        return;
    }
    if (op == "Concat" || op == "KVAppend") {
        if (node.inputs.size() < 2) fail(ErrorKind::SchemaError, node_label(node) + ": needs >= 2 inputs");
        const std::size_t data_count = op == "KVAppend" ? 2 : node.inputs.size();
        const Shape& first = state.shape(node.inputs[0]);
        const auto axis =
            static_cast<std::size_t>(normalize_axis(node.attr_int("axis"), first.size(), node));
        Shape out = first;
        for (std::size_t i = 1; i < data_count; ++i) {
            const Shape& next = state.shape(node.inputs[i]);
            if (next.size() != first.size()) {
                fail(ErrorKind::RankMismatch, node_label(node) + ": concat rank mismatch");
            }
            for (std::size_t d = 0; d < next.size(); ++d) {
                if (d == axis) {
                    out[d] = out[d] + next[d];
                } else if (!(out[d] == next[d])) {
                    fail(ErrorKind::BroadcastError, node_label(node) + ": concat dim mismatch at axis " +
                                                        std::to_string(d));
                }
            }
        }
        set_shape(node.outputs[0], out);
        if (op == "Concat" && axis == 0 && first.size() == 1) {
            // Rank-1 shape vectors concatenate into a longer shape vector.
            std::vector<SymExpr> merged;
            bool all_known = true;
            for (std::size_t i = 0; i < node.inputs.size() && all_known; ++i) {
                if (const auto* v = state.value(node.inputs[i])) {
                    merged.insert(merged.end(), v->begin(), v->end());
                } else {
                    all_known = false;
                }
            }
            if (all_known) set_value(node.outputs[0], merged);
        }
        return;
    }
    if (op == "Slice") {
        expect_inputs(node, 1);
        const Shape& data = state.shape(node.inputs[0]);
        set_shape(node.outputs[0], slice_output(data, node));
        if (const auto* v = state.value(node.inputs[0]); v && data.size() == 1) {
            const auto starts = node.attr_ints("starts");
            const auto ends = node.attr_ints("ends");
            const auto len = static_cast<std::int64_t>(v->size());
            std::int64_t lo = starts[0];
            std::int64_t hi = ends[0] == std::numeric_limits<std::int64_t>::max()
                                  ? len
                                  : (ends[0] < 0 ? len + ends[0] : std::min(ends[0], len));
            std::vector<SymExpr> out;
            for (std::int64_t i = lo; i < hi; ++i) out.push_back((*v)[static_cast<std::size_t>(i)]);
            set_value(node.outputs[0], out);
        }
        return;
    }
    if (op == "Reshape") {
        expect_inputs(node, 2);
        const Shape& data = state.shape(node.inputs[0]);
        const auto* target = state.value(node.inputs[1]);
        if (!target) {
            fail(ErrorKind::UnsupportedDynamicAttr,
                 node_label(node) + ": reshape target value is not statically known");
        }
        set_shape(node.outputs[0], reshape_output(data, *target, node));
        return;
    }
    if (op == "Transpose") {
        expect_inputs(node, 1);
        const Shape& data = state.shape(node.inputs[0]);
        const auto perm = node.attr_ints("perm");
        if (perm.size() != data.size()) {
            fail(ErrorKind::RankMismatch, node_label(node) + ": perm length does not match rank");
        }
        std::vector<bool> seen(data.size(), false);
        Shape out(data.size());
        for (std::size_t i = 0; i < perm.size(); ++i) {
            const auto p = static_cast<std::size_t>(normalize_axis(perm[i], data.size(), node));
            if (seen[p]) fail(ErrorKind::RankMismatch, node_label(node) + ": perm repeats an axis");
            seen[p] = true;
            out[i] = data[p];
        }
        set_shape(node.outputs[0], out);
        return;
    }
    if (op == "Unsqueeze") {
        expect_inputs(node, 1);
        const Shape& data = state.shape(node.inputs[0]);
        auto axes = node.attr_ints("axes");
        const std::size_t out_rank = data.size() + axes.size();
        for (auto& a : axes) a = normalize_axis(a, out_rank, node);
        std::sort(axes.begin(), axes.end());
        Shape out;
        std::size_t src = 0;
        for (std::size_t i = 0; i < out_rank; ++i) {
            if (std::binary_search(axes.begin(), axes.end(), static_cast<std::int64_t>(i))) {
                out.push_back(SymExpr::constant(1));
            } else {
                out.push_back(data[src++]);
            }
        }
        set_shape(node.outputs[0], out);
        if (const auto* v = state.value(node.inputs[0])) set_value(node.outputs[0], *v);
        return;
    }
    if (op == "Squeeze") {
        expect_inputs(node, 1);
        const Shape& data = state.shape(node.inputs[0]);
        auto axes = node.attr_ints("axes");
        for (auto& a : axes) a = normalize_axis(a, data.size(), node);
        Shape out;
        for (std::size_t i = 0; i < data.size(); ++i) {
            if (std::find(axes.begin(), axes.end(), static_cast<std::int64_t>(i)) != axes.end()) {
                if (!data[i].is_constant() || data[i].constant_value() != 1) {
                    fail(ErrorKind::RankMismatch, node_label(node) + ": squeezed dim is not 1");
                }
            } else {
                out.push_back(data[i]);
            }
        }
        set_shape(node.outputs[0], out);
        if (const auto* v = state.value(node.inputs[0])) set_value(node.outputs[0], *v);
        return;
    }
    if (op == "Add" || op == "Sub" || op == "Mul" || op == "Div" || op == "Pow") {
        expect_inputs(node, 2);
        const Shape& a = state.shape(node.inputs[0]);
        const Shape& b = state.shape(node.inputs[1]);
        set_shape(node.outputs[0], broadcast_shapes(a, b, node));
        if (op != "Pow") {
            const auto* va = state.value(node.inputs[0]);
            const auto* vb = state.value(node.inputs[1]);
            if (va && vb) set_value(node.outputs[0], apply_value_binary(op, *va, *vb, node));
        }
        return;
    }
    if (op == "Neg" || op == "Sqrt" || op == "Silu" || op == "Gelu") {
        expect_inputs(node, 1);
        set_shape(node.outputs[0], state.shape(node.inputs[0]));
        if (op == "Neg") {
            if (const auto* v = state.value(node.inputs[0])) {
                std::vector<SymExpr> out;
                for (const auto& e : *v) out.push_back(-e);
                set_value(node.outputs[0], out);
            }
        }
        return;
    }
    if (op == "Softmax") {
        expect_inputs(node, 1);
        const Shape& data = state.shape(node.inputs[0]);
        (void)normalize_axis(node.attr_int("axis"), data.size(), node);
        set_shape(node.outputs[0], data);
        return;
    }
    if (op == "ReduceMean") {
        expect_inputs(node, 1);
        const Shape& data = state.shape(node.inputs[0]);
        auto axes = node.attr_ints("axes");
        for (auto& a : axes) a = normalize_axis(a, data.size(), node);
        const bool keepdims = node.attr_int("keepdims") != 0;
        Shape out;
        for (std::size_t i = 0; i < data.size(); ++i) {
            const bool reduced = std::find(axes.begin(), axes.end(), static_cast<std::int64_t>(i)) != axes.end();
            if (!reduced) {
                out.push_back(data[i]);
            } else if (keepdims) {
                out.push_back(SymExpr::constant(1));
            }
        }
        set_shape(node.outputs[0], out);
        return;
    }
    if (op == "MatMul" || op == "MatMulQuant") {
        expect_inputs(node, 2);
        const Shape& a = state.shape(node.inputs[0]);
        const Shape& b = state.shape(node.inputs[1]);
        if (a.size() < 2 || b.size() < 2) {
            fail(ErrorKind::RankMismatch, node_label(node) + ": matmul needs rank >= 2");
        }
        const SymExpr& ka = a[a.size() - 1];
        const SymExpr& kb = b[b.size() - 2];
        if (!(ka == kb)) {
            fail(ErrorKind::ShapeMismatch, node_label(node) + ": inner dims '" + ka.to_string() +
                                               "' vs '" + kb.to_string() + "'");
        }
        const Shape batch_a(a.begin(), a.end() - 2);
        const Shape batch_b(b.begin(), b.end() - 2);
        Shape out = broadcast_shapes(batch_a, batch_b, node);
        out.push_back(a[a.size() - 2]);
        out.push_back(b[b.size() - 1]);
        set_shape(node.outputs[0], out);
        return;
    }
    if (op == "RMSNorm") {
        expect_inputs(node, 2);
        set_shape(node.outputs[0], state.shape(node.inputs[0]));
        return;
    }
    if (op == "LayerNorm") {
        expect_inputs(node, 3);
        set_shape(node.outputs[0], state.shape(node.inputs[0]));
        return;
    }
    if (op == "FusedElementwise") {
        // Replay the recorded chain over shapes.
        std::istringstream ops_stream(node.attr_string("ops"));
        const auto rhs_idx = node.attr_ints("rhs_idx");
        std::string step_op;
        Shape running = state.shape(node.inputs[0]);
        std::size_t step = 0;
        while (std::getline(ops_stream, step_op, ',')) {
            if (step >= rhs_idx.size()) fail(ErrorKind::SchemaError, node_label(node) + ": bad fused chain");
            if (rhs_idx[step] >= 0) {
                const Shape& ext = state.shape(node.inputs[static_cast<std::size_t>(rhs_idx[step])]);
                running = broadcast_shapes(running, ext, node);
            }
            ++step;
        }
        set_shape(node.outputs[0], running);
        return;
    }
    fail(ErrorKind::UnknownOperator, node_label(node) + ": no derivation rule");
}

}  // namespace

DerivedShapes derive_shapes(const Graph& graph, const WeightStore& weights) {
    DeriveState state{graph, weights, {}};
    for (const auto& t : graph.tensors) {
        if (t.kind == TensorKind::Weight || t.kind == TensorKind::GraphInput) {
            state.out.shapes[t.name] = t.shape;
        }
    }
    for (const auto& node : graph.nodes) {
        derive_node(state, node);
    }
    return std::move(state.out);
}

std::vector<NodeClass> classify(const Graph& graph) {
    std::map<std::string, bool> symbolic_source;  // weight const or shape-node output
    for (const auto& t : graph.tensors) {
        symbolic_source[t.name] = t.kind == TensorKind::Weight;
    }
    std::vector<NodeClass> classes(graph.nodes.size(), NodeClass::TensorComputing);
    for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
        const NodeSpec& node = graph.nodes[i];
        bool shapeish = node.op == "Shape";
        if (!shapeish) {
            shapeish = !node.inputs.empty() &&
                       std::all_of(node.inputs.begin(), node.inputs.end(),
                                   [&](const std::string& in) { return symbolic_source.at(in); });
        }
        classes[i] = shapeish ? NodeClass::ShapeComputing : NodeClass::TensorComputing;
        for (const auto& out : node.outputs) symbolic_source[out] = shapeish;
    }
    return classes;
}

namespace {

std::map<std::string, std::vector<int>> consumer_map(const Graph& graph) {
    std::map<std::string, std::vector<int>> consumers;
    for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
        for (const auto& in : graph.nodes[i].inputs) consumers[in].push_back(static_cast<int>(i));
    }
    return consumers;
}

bool is_scalar_f32_weight(const Graph& graph, const WeightStore& weights, const std::string& name,
                          float* value) {
    if (!graph.has_tensor(name)) return false;
    const TensorInfo& t = graph.tensor(name);
    if (t.kind != TensorKind::Weight || t.dtype != DType::F32 || !weights.has(name)) return false;
    const auto data = weights.at(name).as_f32();
    if (data.size() != 1) return false;
    *value = data[0];
    return true;
}

// One matched normalization subgraph: node indices to drop and the fused
// replacement, positioned at the pattern tail.
struct PatternMatch {
    std::vector<int> absorbed;
    int tail = -1;
    NodeSpec fused;
};

std::optional<PatternMatch> match_rms_norm(const Graph& graph, const WeightStore& weights,
                                           const std::map<std::string, std::vector<int>>& consumers,
                                           int pow_index) {
    const NodeSpec& pow = graph.nodes[static_cast<std::size_t>(pow_index)];
    if (pow.op != "Pow" || pow.inputs.size() != 2) return std::nullopt;
    float exponent = 0.0f;
    if (!is_scalar_f32_weight(graph, weights, pow.inputs[1], &exponent) || exponent != 2.0f) {
        return std::nullopt;
    }
    const std::string& x = pow.inputs[0];

    auto single_consumer = [&](const std::string& tensor) -> const NodeSpec* {
        auto it = consumers.find(tensor);
        if (it == consumers.end() || it->second.size() != 1) return nullptr;
        if (graph.tensor(tensor).kind == TensorKind::GraphOutput) return nullptr;
        return &graph.nodes[static_cast<std::size_t>(it->second[0])];
    };

    const NodeSpec* mean = single_consumer(pow.outputs[0]);
    if (!mean || mean->op != "ReduceMean" || mean->attr_int("keepdims") != 1) return std::nullopt;
    const auto axes = mean->attr_ints("axes");
    if (axes.size() != 1 || axes[0] != -1) return std::nullopt;

    const NodeSpec* add = single_consumer(mean->outputs[0]);
    float eps = 0.0f;
    if (!add || add->op != "Add" || add->inputs.size() != 2) return std::nullopt;
    const std::string eps_name = add->inputs[0] == mean->outputs[0] ? add->inputs[1] : add->inputs[0];
    if (!is_scalar_f32_weight(graph, weights, eps_name, &eps)) return std::nullopt;

    const NodeSpec* sqrt = single_consumer(add->outputs[0]);
    if (!sqrt || sqrt->op != "Sqrt") return std::nullopt;

    const NodeSpec* div = single_consumer(sqrt->outputs[0]);
    if (!div || div->op != "Div" || div->inputs[0] != x || div->inputs[1] != sqrt->outputs[0]) {
        return std::nullopt;
    }

    const NodeSpec* mul = single_consumer(div->outputs[0]);
    if (!mul || mul->op != "Mul") return std::nullopt;
    const std::string w = mul->inputs[0] == div->outputs[0] ? mul->inputs[1] : mul->inputs[0];
    if (!graph.has_tensor(w) || graph.tensor(w).kind != TensorKind::Weight ||
        graph.tensor(w).shape.size() != 1) {
        return std::nullopt;
    }

    auto index_of = [&](const NodeSpec* n) {
        return static_cast<int>(n - graph.nodes.data());
    };
    PatternMatch match;
    match.absorbed = {pow_index, index_of(mean), index_of(add), index_of(sqrt), index_of(div),
                      index_of(mul)};
    match.tail = index_of(mul);
    match.fused.id = mul->id;
    match.fused.op = "RMSNorm";
    match.fused.inputs = {x, w};
    match.fused.outputs = mul->outputs;
    match.fused.attrs["eps"] = static_cast<double>(eps);
    return match;
}

std::optional<PatternMatch> match_layer_norm(const Graph& graph, const WeightStore& weights,
                                             const std::map<std::string, std::vector<int>>& consumers,
                                             int mean_index) {
    const NodeSpec& mean1 = graph.nodes[static_cast<std::size_t>(mean_index)];
    if (mean1.op != "ReduceMean" || mean1.attr_int("keepdims") != 1) return std::nullopt;
    {
        const auto axes = mean1.attr_ints("axes");
        if (axes.size() != 1 || axes[0] != -1) return std::nullopt;
    }
    const std::string& x = mean1.inputs[0];

    auto single_consumer = [&](const std::string& tensor) -> const NodeSpec* {
        auto it = consumers.find(tensor);
        if (it == consumers.end() || it->second.size() != 1) return nullptr;
        if (graph.tensor(tensor).kind == TensorKind::GraphOutput) return nullptr;
        return &graph.nodes[static_cast<std::size_t>(it->second[0])];
    };
    auto consumers_of = [&](const std::string& tensor) -> std::vector<int> {
        auto it = consumers.find(tensor);
        return it == consumers.end() ? std::vector<int>{} : it->second;
    };

    const NodeSpec* sub = single_consumer(mean1.outputs[0]);
    if (!sub || sub->op != "Sub" || sub->inputs[0] != x || sub->inputs[1] != mean1.outputs[0]) {
        return std::nullopt;
    }
    // The centered tensor feeds both the variance branch and the division.
    const auto sub_consumers = consumers_of(sub->outputs[0]);
    if (sub_consumers.size() != 2) return std::nullopt;

    const NodeSpec* pow = nullptr;
    const NodeSpec* div = nullptr;
    for (int idx : sub_consumers) {
        const NodeSpec& n = graph.nodes[static_cast<std::size_t>(idx)];
        if (n.op == "Pow") pow = &n;
        if (n.op == "Div") div = &n;
    }
    float exponent = 0.0f;
    if (!pow || !div || pow->inputs[0] != sub->outputs[0] ||
        !is_scalar_f32_weight(graph, weights, pow->inputs[1], &exponent) || exponent != 2.0f) {
        return std::nullopt;
    }

    const NodeSpec* mean2 = single_consumer(pow->outputs[0]);
    if (!mean2 || mean2->op != "ReduceMean" || mean2->attr_int("keepdims") != 1) return std::nullopt;
    {
        const auto axes2 = mean2->attr_ints("axes");
        if (axes2.size() != 1 || axes2[0] != -1) return std::nullopt;
    }
    const NodeSpec* add_eps = single_consumer(mean2->outputs[0]);
    float eps = 0.0f;
    if (!add_eps || add_eps->op != "Add") return std::nullopt;
    const std::string eps_name =
        add_eps->inputs[0] == mean2->outputs[0] ? add_eps->inputs[1] : add_eps->inputs[0];
    if (!is_scalar_f32_weight(graph, weights, eps_name, &eps)) return std::nullopt;
    const NodeSpec* sqrt = single_consumer(add_eps->outputs[0]);
    if (!sqrt || sqrt->op != "Sqrt") return std::nullopt;
    if (div->inputs[0] != sub->outputs[0] || div->inputs[1] != sqrt->outputs[0]) return std::nullopt;

    const NodeSpec* mul = single_consumer(div->outputs[0]);
    if (!mul || mul->op != "Mul") return std::nullopt;
    const std::string w = mul->inputs[0] == div->outputs[0] ? mul->inputs[1] : mul->inputs[0];
    const NodeSpec* add_bias = single_consumer(mul->outputs[0]);
    if (!add_bias || add_bias->op != "Add") return std::nullopt;
    const std::string b = add_bias->inputs[0] == mul->outputs[0] ? add_bias->inputs[1] : add_bias->inputs[0];
    for (const std::string& param : {w, b}) {
        if (!graph.has_tensor(param) || graph.tensor(param).kind != TensorKind::Weight) {
            return std::nullopt;
        }
    }

    auto index_of = [&](const NodeSpec* n) { return static_cast<int>(n - graph.nodes.data()); };
    PatternMatch match;
    match.absorbed = {mean_index,       index_of(sub),  index_of(pow), index_of(mean2),
                      index_of(add_eps), index_of(sqrt), index_of(div), index_of(mul),
                      index_of(add_bias)};
    match.tail = index_of(add_bias);
    match.fused.id = add_bias->id;
    match.fused.op = "LayerNorm";
    match.fused.inputs = {x, w, b};
    match.fused.outputs = add_bias->outputs;
    match.fused.attrs["eps"] = static_cast<double>(eps);
    return match;
}

Graph apply_matches(const Graph& graph, const std::vector<PatternMatch>& matches) {
    std::map<int, const PatternMatch*> tails;
    std::set<int> absorbed;
    std::set<std::string> dead_tensors;
    for (const auto& m : matches) {
        tails[m.tail] = &m;
        for (int idx : m.absorbed) {
            absorbed.insert(idx);
            if (idx != m.tail) {
                for (const auto& out : graph.nodes[static_cast<std::size_t>(idx)].outputs) {
                    dead_tensors.insert(out);
                }
            }
        }
    }
    Graph out;
    out.symbols = graph.symbols;
    out.meta = graph.meta;
    for (const auto& t : graph.tensors) {
        if (!dead_tensors.count(t.name)) out.tensors.push_back(t);
    }
    for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
        auto tail = tails.find(static_cast<int>(i));
        if (tail != tails.end()) {
            out.nodes.push_back(tail->second->fused);
        } else if (!absorbed.count(static_cast<int>(i))) {
            out.nodes.push_back(graph.nodes[i]);
        }
    }
    return out;
}

Graph fuse_norm_patterns(const Graph& graph, const WeightStore& weights, int* fused_nodes) {
    const auto consumers = consumer_map(graph);
    std::vector<PatternMatch> matches;
    std::set<int> taken;
    auto try_add = [&](std::optional<PatternMatch> m) {
        if (!m) return;
        for (int idx : m->absorbed) {
            if (taken.count(idx)) return;
        }
        for (int idx : m->absorbed) taken.insert(idx);
        matches.push_back(std::move(*m));
    };
    for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
        try_add(match_layer_norm(graph, weights, consumers, static_cast<int>(i)));
    }
    for (std::size_t i = 0; i < graph.nodes.size(); ++i) {
        try_add(match_rms_norm(graph, weights, consumers, static_cast<int>(i)));
    }
    if (matches.empty()) return graph;
    if (fused_nodes) {
        for (const auto& m : matches) *fused_nodes += static_cast<int>(m.absorbed.size());
    }
    return apply_matches(graph, matches);
}

Graph fuse_elementwise_chains(const Graph& graph, const WeightStore& weights, int* fused_nodes) {
    const DerivedShapes derived = derive_shapes(graph, weights);
    const auto consumers = consumer_map(graph);

    // Chains grow forward from their earliest member, so an ascending scan
    // with a taken-set never starts in the middle of a longer chain.
    std::vector<PatternMatch> matches;
    std::set<int> taken;
    for (std::size_t start = 0; start < graph.nodes.size(); ++start) {
        if (taken.count(static_cast<int>(start))) continue;
        const NodeSpec& head = graph.nodes[start];
        if (!is_elementwise_operator(head.op)) continue;
        // Only F32 activation chains fuse; I64 shape arithmetic must stay
        // symbolically executable.
        if (graph.tensor(head.outputs[0]).dtype != DType::F32) continue;

        std::vector<int> chain = {static_cast<int>(start)};
        std::string running = head.outputs[0];
        for (;;) {
            auto c = consumers.find(running);
            if (c == consumers.end() || c->second.size() != 1) break;
            if (graph.tensor(running).kind == TensorKind::GraphOutput) break;
            const int next_idx = c->second[0];
            if (taken.count(next_idx)) break;
            const NodeSpec& next = graph.nodes[static_cast<std::size_t>(next_idx)];
            if (!is_elementwise_operator(next.op)) break;
            if (graph.tensor(next.outputs[0]).dtype != DType::F32) break;
            if (!(derived.shape(next.outputs[0]) == derived.shape(running))) break;
            if (next.inputs.size() == 2 && next.inputs[0] == next.inputs[1]) break;
            chain.push_back(next_idx);
            running = next.outputs[0];
        }
        if (chain.size() < 2) continue;

        PatternMatch match;
        match.absorbed = chain;
        match.tail = chain.back();
        NodeSpec fused;
        fused.id = graph.nodes[static_cast<std::size_t>(chain.back())].id;
        fused.op = "FusedElementwise";
        fused.outputs = graph.nodes[static_cast<std::size_t>(chain.back())].outputs;
        std::string ops;
        std::vector<std::int64_t> rhs_idx;
        std::vector<std::int64_t> swap;
        std::string chained = "";
        for (std::size_t s = 0; s < chain.size(); ++s) {
            const NodeSpec& n = graph.nodes[static_cast<std::size_t>(chain[s])];
            if (!ops.empty()) ops += ",";
            ops += n.op;
            if (s == 0) {
                fused.inputs.push_back(n.inputs[0]);
                if (n.inputs.size() == 2) {
                    fused.inputs.push_back(n.inputs[1]);
                    rhs_idx.push_back(1);
                } else {
                    rhs_idx.push_back(-1);
                }
                swap.push_back(0);
            } else if (n.inputs.size() == 1) {
                rhs_idx.push_back(-1);
                swap.push_back(0);
            } else {
                // swap = 1 records op(ext, chain): the running value sits on
                // the right of the original binary op.
                const bool chain_on_right = n.inputs[1] == chained;
                fused.inputs.push_back(chain_on_right ? n.inputs[0] : n.inputs[1]);
                rhs_idx.push_back(static_cast<std::int64_t>(fused.inputs.size() - 1));
                swap.push_back(chain_on_right ? 1 : 0);
            }
            chained = n.outputs[0];
        }
        fused.attrs["ops"] = ops;
        fused.attrs["rhs_idx"] = rhs_idx;
        fused.attrs["swap"] = swap;
        match.fused = std::move(fused);
        for (int idx : chain) taken.insert(idx);
        matches.push_back(std::move(match));
    }
    if (matches.empty()) return graph;
    if (fused_nodes) {
        for (const auto& m : matches) *fused_nodes += static_cast<int>(m.absorbed.size());
    }
    return apply_matches(graph, matches);
}

}  // namespace

Graph fuse(const Graph& graph, const WeightStore& weights, int* fused_nodes) {
    int count = 0;
    Graph out = fuse_norm_patterns(graph, weights, &count);
    out = fuse_elementwise_chains(out, weights, &count);
    if (fused_nodes) *fused_nodes = count;
    validate_graph(out);
    return out;
}

namespace {

std::map<std::string, std::int64_t> resolve_max_bindings(const Graph& graph,
                                                         const CompileOptions& options) {
    std::map<std::string, std::int64_t> maxima;
    for (const auto& s : graph.symbols) {
        auto it = options.max_bindings.find(s.name);
        if (it != options.max_bindings.end()) {
            maxima[s.name] = it->second;
        } else if (s.max) {
            maxima[s.name] = *s.max;
        } else {
            fail(ErrorKind::ConfigError,
                 "symbol '" + s.name + "' has no max value for preallocation");
        }
    }
    return maxima;
}

bool is_alias_op(const std::string& op) {
    return op == "Reshape" || op == "Squeeze" || op == "Unsqueeze" || op == "Identity";
}

}  // namespace

CompiledPlan compile(const Graph& input_graph, const WeightStore& weights,
                     const CompileOptions& options) {
    CompiledPlan plan;
    plan.options = options;

    Graph g = input_graph;
    validate_graph(g);
    if (options.fuse) g = fuse(g, weights, &plan.fused_nodes);
    if (options.kv_arenas) {
        KvRewriteResult rewritten = rewrite_kv_graph(g);
        g = std::move(rewritten.graph);
        plan.arenas = std::move(rewritten.arenas);
    }
    validate_graph(g);

    plan.derived = derive_shapes(g, weights);
    plan.classes = classify(g);
    plan.max_bindings = resolve_max_bindings(g, options);

    const auto producers = g.producers();

    // Folding: a shape node stays only if its value must exist as a real I64
    // buffer at runtime (it feeds a shape-value graph output), or folding is
    // disabled outright. Everything else is captured as SymExpr.
    std::set<int> retained;
    if (!options.fold_shape_ops) {
        for (std::size_t i = 0; i < g.nodes.size(); ++i) {
            if (plan.classes[i] == NodeClass::ShapeComputing) retained.insert(static_cast<int>(i));
        }
    } else {
        std::vector<std::string> needed;
        for (const auto& t : g.tensors) {
            if (t.kind == TensorKind::GraphOutput) {
                auto p = producers.find(t.name);
                if (p != producers.end() &&
                    plan.classes[static_cast<std::size_t>(p->second)] == NodeClass::ShapeComputing) {
                    needed.push_back(t.name);
                }
            }
        }
        while (!needed.empty()) {
            const std::string name = needed.back();
            needed.pop_back();
            auto p = producers.find(name);
            if (p == producers.end()) continue;
            const int idx = p->second;
            if (plan.classes[static_cast<std::size_t>(idx)] != NodeClass::ShapeComputing) continue;
            if (!retained.insert(idx).second) continue;
            for (const auto& in : g.nodes[static_cast<std::size_t>(idx)].inputs) needed.push_back(in);
        }
    }

    // Data-dependent shapes: a *retained* Shape node reading a tensor-phase
    // result forces an extra host/device boundary; it and its dependent
    // retained chain run interleaved with the tensor program. Folded shape
    // nodes never cost a sync, whatever they read — their values are baked.
    std::set<int> hoisted;
    int hoisted_roots = 0;
    {
        std::map<std::string, bool> tainted;  // tensor -> depends on a hoisted shape chain
        for (const auto& t : g.tensors) tainted[t.name] = false;
        for (std::size_t i = 0; i < g.nodes.size(); ++i) {
            const NodeSpec& node = g.nodes[i];
            const bool is_retained = retained.count(static_cast<int>(i)) != 0;
            bool taint = false;
            if (node.op == "Shape" && is_retained) {
                auto p = producers.find(node.inputs[0]);
                if (p != producers.end() &&
                    plan.classes[static_cast<std::size_t>(p->second)] == NodeClass::TensorComputing) {
                    ++hoisted_roots;
                    taint = true;
                }
            }
            if (plan.classes[i] == NodeClass::ShapeComputing) {
                for (const auto& in : node.inputs) taint = taint || tainted.at(in);
                if (taint && is_retained) hoisted.insert(static_cast<int>(i));
            }
            for (const auto& out : node.outputs) tainted[out] = taint;
        }
    }
    plan.sync_points = 1 + hoisted_roots;

    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        const bool is_shape = plan.classes[i] == NodeClass::ShapeComputing;
        const bool run_late = hoisted.count(static_cast<int>(i)) != 0;
        if (is_shape && retained.count(static_cast<int>(i))) {
            if (run_late) {
                plan.tensor_program.push_back(static_cast<int>(i));
            } else {
                plan.shape_program.push_back(static_cast<int>(i));
            }
        } else if (!is_shape) {
            plan.tensor_program.push_back(static_cast<int>(i));
        }
    }
    plan.shape_ops_retained = static_cast<int>(retained.size());

    // KVAppend nodes -> arena bindings.
    for (std::size_t i = 0; i < g.nodes.size(); ++i) {
        if (g.nodes[i].op != "KVAppend") continue;
        const std::string& out = g.nodes[i].outputs[0];
        for (std::size_t a = 0; a < plan.arenas.size(); ++a) {
            if (plan.arenas[a].full == out) plan.kv_append_arena[static_cast<int>(i)] = static_cast<int>(a);
        }
        if (!plan.kv_append_arena.count(static_cast<int>(i))) {
            fail(ErrorKind::MetadataMissing, "KVAppend output has no arena binding");
        }
    }

    // Memory plan over the tensor program. Arena-bound cache tensors and
    // weights stay out of the reuse pool.
    std::set<std::string> arena_bound;
    for (const auto& binding : plan.arenas) {
        arena_bound.insert(binding.past);
        arena_bound.insert(binding.full);
    }
    std::map<std::string, int> def_index;
    std::map<std::string, int> last_use;
    int position = 0;
    for (const auto& t : g.tensors) {
        if (t.kind == TensorKind::GraphInput && !arena_bound.count(t.name)) def_index[t.name] = -1;
    }
    for (int idx : plan.tensor_program) {
        const NodeSpec& node = g.nodes[static_cast<std::size_t>(idx)];
        for (const auto& in : node.inputs) {
            if (def_index.count(in)) last_use[in] = position;
        }
        for (const auto& out : node.outputs) {
            if (!arena_bound.count(out)) def_index[out] = position;
        }
        ++position;
    }
    // Retained host-phase shape outputs also occupy (tiny, eternal) buffers.
    for (int idx : plan.shape_program) {
        for (const auto& out : g.nodes[static_cast<std::size_t>(idx)].outputs) def_index[out] = -1;
    }

    std::vector<PlanItem> items;
    for (const auto& t : g.tensors) {
        if (t.kind == TensorKind::Weight || arena_bound.count(t.name)) continue;
        auto def = def_index.find(t.name);
        if (def == def_index.end()) continue;
        PlanItem item;
        item.name = t.name;
        item.size_bytes = size_expr(t.dtype, plan.derived.shape(t.name));
        item.def_index = def->second;
        auto use = last_use.find(t.name);
        item.last_use_index = use == last_use.end() ? def->second : use->second;
        item.eternal = t.kind == TensorKind::GraphOutput;
        if (options.reuse_memory) {
            auto p = producers.find(t.name);
            if (p != producers.end()) {
                const NodeSpec& producer = g.nodes[static_cast<std::size_t>(p->second)];
                if (is_alias_op(producer.op)) {
                    const std::string& src = producer.inputs[0];
                    if (def_index.count(src)) item.alias_of = src;
                }
            }
        }
        items.push_back(std::move(item));
    }
    std::stable_sort(items.begin(), items.end(),
                     [](const PlanItem& a, const PlanItem& b) { return a.def_index < b.def_index; });
    if (!options.reuse_memory) {
        for (auto& item : items) item.eternal = true;
    }
    plan.memory = plan_memory(items, plan.max_bindings);
    plan.graph = std::move(g);
    return plan;
}

ResolvedShapes bind_symbols(const CompiledPlan& plan,
                            const std::map<std::string, std::int64_t>& bindings) {
    for (const auto& s : plan.graph.symbols) {
        auto it = bindings.find(s.name);
        if (it == bindings.end()) {
            fail(ErrorKind::UnboundSymbol, "symbol '" + s.name + "' is not bound");
        }
        if (it->second < 1) {
            fail(ErrorKind::NonPositiveDim, "binding for '" + s.name + "' must be >= 1");
        }
    }
    ResolvedShapes resolved;
    for (const auto& [name, shape] : plan.derived.shapes) {
        std::vector<std::int64_t> dims(shape.size());
        for (std::size_t i = 0; i < shape.size(); ++i) {
            dims[i] = shape[i].evaluate(bindings);
            if (dims[i] < 0) {
                fail(ErrorKind::NonPositiveDim,
                     "dim " + std::to_string(i) + " of '" + name + "' evaluates to " +
                         std::to_string(dims[i]));
            }
        }
        resolved.dims[name] = std::move(dims);
    }
    // Everything must still fit the preallocated plan.
    for (const auto& [tensor, block_id] : plan.memory.assignment) {
        const auto size = size_expr(plan.graph.tensor(tensor).dtype, plan.derived.shape(tensor));
        const std::int64_t bytes = size.evaluate(bindings);
        if (bytes > plan.memory.blocks[static_cast<std::size_t>(block_id)].max_bytes) {
            fail(ErrorKind::ExceedsPreallocation,
                 "tensor '" + tensor + "' needs " + std::to_string(bytes) +
                     " bytes, block holds " +
                     std::to_string(plan.memory.blocks[static_cast<std::size_t>(block_id)].max_bytes));
        }
    }
    for (const auto& binding : plan.arenas) {
        const Shape& full = plan.derived.shape(binding.full);
        const std::int64_t tokens = full[static_cast<std::size_t>(binding.axis)].evaluate(bindings);
        const std::int64_t cap =
            full[static_cast<std::size_t>(binding.axis)].evaluate(plan.max_bindings);
        if (tokens > cap) {
            fail(ErrorKind::ExceedsPreallocation, "arena '" + binding.arena + "' capacity " +
                                                      std::to_string(cap) + " exceeded by " +
                                                      std::to_string(tokens));
        }
    }
    return resolved;
}

namespace {

std::vector<std::int64_t> concrete_value_binary(const std::string& op,
                                                const std::vector<std::int64_t>& a,
                                                const std::vector<std::int64_t>& b,
                                                const NodeSpec& node) {
    const std::size_t size = std::max(a.size(), b.size());
    if (a.size() != b.size() && a.size() != 1 && b.size() != 1) {
        fail(ErrorKind::BroadcastError, node_label(node) + ": shape-value arity mismatch");
    }
    std::vector<std::int64_t> out(size);
    for (std::size_t i = 0; i < size; ++i) {
        const std::int64_t x = a.size() == 1 ? a[0] : a[i];
        const std::int64_t y = b.size() == 1 ? b[0] : b[i];
        if (op == "Add") out[i] = x + y;
        else if (op == "Sub") out[i] = x - y;
        else if (op == "Mul") out[i] = x * y;
        else if (op == "Div") out[i] = x / y;
        else fail(ErrorKind::UnsupportedDynamicAttr, node_label(node) + ": '" + op + "' on shape values");
    }
    return out;
}

}  // namespace

std::map<std::string, std::vector<std::int64_t>> run_shape_nodes(
    const Graph& graph, const std::vector<int>& node_indices, const WeightStore& weights,
    const std::map<std::string, std::vector<std::int64_t>>& resolved_dims,
    std::map<std::string, std::vector<std::int64_t>> seed_values) {
    std::map<std::string, std::vector<std::int64_t>> values = std::move(seed_values);
    auto value_of = [&](const std::string& name) -> const std::vector<std::int64_t>& {
        auto it = values.find(name);
        if (it != values.end()) return it->second;
        const TensorInfo& info = graph.tensor(name);
        if (info.kind == TensorKind::Weight && info.dtype == DType::I64 && weights.has(name)) {
            const auto data = weights.at(name).as_i64();
            auto [slot, ok] = values.emplace(name, std::vector<std::int64_t>(data.begin(), data.end()));
            (void)ok;
            return slot->second;
        }
        fail(ErrorKind::SchemaError, "shape interpreter needs a value for '" + name + "'");
    };

    for (int idx : node_indices) {
        const NodeSpec& node = graph.nodes[static_cast<std::size_t>(idx)];
        const std::string& op = node.op;
        if (op == "Shape") {
            values[node.outputs[0]] = resolved_dims.at(node.inputs[0]);
        } else if (op == "Gather") {
            const auto& data = value_of(node.inputs[0]);
            const auto& idxs = value_of(node.inputs[1]);
            std::vector<std::int64_t> out;
            for (auto i : idxs) {
                if (i < 0) i += static_cast<std::int64_t>(data.size());
                out.push_back(data.at(static_cast<std::size_t>(i)));
            }
            values[node.outputs[0]] = out;
        } else if (op == "Concat") {
            std::vector<std::int64_t> out;
            for (const auto& in : node.inputs) {
                const auto& v = value_of(in);
                out.insert(out.end(), v.begin(), v.end());
            }
            values[node.outputs[0]] = out;
        } else if (op == "Unsqueeze" || op == "Squeeze" || op == "Identity" || op == "Cast") {
            values[node.outputs[0]] = value_of(node.inputs[0]);
        } else if (op == "Slice") {
            const auto& v = value_of(node.inputs[0]);
            const auto starts = node.attr_ints("starts");
            const auto ends = node.attr_ints("ends");
            const auto len = static_cast<std::int64_t>(v.size());
            const std::int64_t lo = starts[0];
            const std::int64_t hi = ends[0] == std::numeric_limits<std::int64_t>::max()
                                        ? len
                                        : (ends[0] < 0 ? len + ends[0] : std::min(ends[0], len));
            values[node.outputs[0]] =
                std::vector<std::int64_t>(v.begin() + lo, v.begin() + std::max(lo, hi));
        } else if (op == "Add" || op == "Sub" || op == "Mul" || op == "Div") {
            values[node.outputs[0]] =
                concrete_value_binary(op, value_of(node.inputs[0]), value_of(node.inputs[1]), node);
        } else if (op == "Neg") {
            auto v = value_of(node.inputs[0]);
            for (auto& x : v) x = -x;
            values[node.outputs[0]] = v;
        } else {
            fail(ErrorKind::UnsupportedDynamicAttr,
                 node_label(node) + ": not executable as a shape operator");
        }
    }
    return values;
}

std::map<std::string, std::vector<std::int64_t>> concrete_shapes(
    const Graph& graph, const WeightStore& weights,
    const std::map<std::string, std::int64_t>& bindings) {
    std::map<std::string, std::vector<std::int64_t>> dims;
    std::map<std::string, std::vector<std::int64_t>> values;

    for (const auto& t : graph.tensors) {
        if (t.kind != TensorKind::Weight && t.kind != TensorKind::GraphInput) continue;
        std::vector<std::int64_t> d;
        for (const auto& dim : t.shape) d.push_back(dim.evaluate(bindings));
        dims[t.name] = std::move(d);
        if (t.kind == TensorKind::Weight && t.dtype == DType::I64 && weights.has(t.name)) {
            const auto data = weights.at(t.name).as_i64();
            values[t.name] = std::vector<std::int64_t>(data.begin(), data.end());
        }
    }

    auto product = [](const std::vector<std::int64_t>& d) {
        return std::accumulate(d.begin(), d.end(), std::int64_t(1), std::multiplies<>());
    };
    auto broadcast = [](const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b) {
        const std::size_t rank = std::max(a.size(), b.size());
        std::vector<std::int64_t> out(rank);
        for (std::size_t i = 0; i < rank; ++i) {
            const std::int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
            const std::int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
            if (da != db && da != 1 && db != 1) fail(ErrorKind::BroadcastError, "broadcast mismatch");
            out[i] = std::max(da, db);
        }
        return out;
    };

    for (const auto& node : graph.nodes) {
        const std::string& op = node.op;
        const auto& out_name = node.outputs[0];
        auto in_dims = [&](std::size_t i) -> const std::vector<std::int64_t>& {
            return dims.at(node.inputs[i]);
        };
        if (op == "Shape") {
            dims[out_name] = {static_cast<std::int64_t>(in_dims(0).size())};
            values[out_name] = in_dims(0);
        } else if (op == "Gather") {
            const auto& data = in_dims(0);
            const auto& idx = in_dims(1);
            const auto axis = static_cast<std::size_t>(
                node.attr_int("axis") < 0
                    ? node.attr_int("axis") + static_cast<std::int64_t>(data.size())
                    : node.attr_int("axis"));
            std::vector<std::int64_t> out(data.begin(), data.begin() + static_cast<std::ptrdiff_t>(axis));
            out.insert(out.end(), idx.begin(), idx.end());
            out.insert(out.end(), data.begin() + static_cast<std::ptrdiff_t>(axis) + 1, data.end());
            dims[out_name] = out;
            if (values.count(node.inputs[0]) && values.count(node.inputs[1]) && axis == 0) {
                std::vector<std::int64_t> picked;
                for (auto i : values[node.inputs[1]]) {
                    if (i < 0) i += static_cast<std::int64_t>(values[node.inputs[0]].size());
                    picked.push_back(values[node.inputs[0]].at(static_cast<std::size_t>(i)));
                }
                values[out_name] = picked;
            }
        } else if (op == "Concat" || op == "KVAppend") {
            const std::size_t data_count = op == "KVAppend" ? 2 : node.inputs.size();
            auto out = in_dims(0);
            const auto axis = static_cast<std::size_t>(
                node.attr_int("axis") < 0 ? node.attr_int("axis") + static_cast<std::int64_t>(out.size())
                                          : node.attr_int("axis"));
            for (std::size_t i = 1; i < data_count; ++i) out[axis] += in_dims(i)[axis];
            dims[out_name] = out;
            if (op == "Concat" && out.size() == 1 && axis == 0) {
                std::vector<std::int64_t> merged;
                bool known = true;
                for (const auto& in : node.inputs) {
                    if (!values.count(in)) {
                        known = false;
                        break;
                    }
                    merged.insert(merged.end(), values[in].begin(), values[in].end());
                }
                if (known) values[out_name] = merged;
            }
        } else if (op == "Reshape") {
            if (!values.count(node.inputs[1])) fail(ErrorKind::UnsupportedDynamicAttr, "dynamic reshape");
            auto target = values[node.inputs[1]];
            const std::int64_t elems = product(in_dims(0));
            std::int64_t known = 1;
            int wildcard = -1;
            for (std::size_t i = 0; i < target.size(); ++i) {
                if (target[i] == -1) wildcard = static_cast<int>(i);
                else known *= target[i];
            }
            if (wildcard >= 0) {
                if (known == 0 || elems % known != 0) fail(ErrorKind::NonDivisibleReshape, "reshape");
                target[static_cast<std::size_t>(wildcard)] = elems / known;
            } else if (known != elems) {
                fail(ErrorKind::NonDivisibleReshape, "reshape element count mismatch");
            }
            dims[out_name] = target;
        } else if (op == "Transpose") {
            const auto perm = node.attr_ints("perm");
            std::vector<std::int64_t> out(perm.size());
            for (std::size_t i = 0; i < perm.size(); ++i) {
                out[i] = in_dims(0)[static_cast<std::size_t>(perm[i])];
            }
            dims[out_name] = out;
        } else if (op == "Unsqueeze") {
            auto axes = node.attr_ints("axes");
            const std::size_t out_rank = in_dims(0).size() + axes.size();
            for (auto& a : axes) {
                if (a < 0) a += static_cast<std::int64_t>(out_rank);
            }
            std::sort(axes.begin(), axes.end());
            std::vector<std::int64_t> out;
            std::size_t src = 0;
            for (std::size_t i = 0; i < out_rank; ++i) {
                if (std::binary_search(axes.begin(), axes.end(), static_cast<std::int64_t>(i))) {
                    out.push_back(1);
                } else {
                    out.push_back(in_dims(0)[src++]);
                }
            }
            dims[out_name] = out;
            if (values.count(node.inputs[0])) values[out_name] = values[node.inputs[0]];
        } else if (op == "Squeeze") {
            auto axes = node.attr_ints("axes");
            for (auto& a : axes) {
                if (a < 0) a += static_cast<std::int64_t>(in_dims(0).size());
            }
            std::vector<std::int64_t> out;
            for (std::size_t i = 0; i < in_dims(0).size(); ++i) {
                if (std::find(axes.begin(), axes.end(), static_cast<std::int64_t>(i)) == axes.end()) {
                    out.push_back(in_dims(0)[i]);
                }
            }
            dims[out_name] = out;
            if (values.count(node.inputs[0])) values[out_name] = values[node.inputs[0]];
        } else if (op == "Add" || op == "Sub" || op == "Mul" || op == "Div" || op == "Pow") {
            dims[out_name] = broadcast(in_dims(0), in_dims(1));
            if (op != "Pow" && values.count(node.inputs[0]) && values.count(node.inputs[1])) {
                values[out_name] =
                    concrete_value_binary(op, values[node.inputs[0]], values[node.inputs[1]], node);
            }
        } else if (op == "Neg" || op == "Sqrt" || op == "Silu" || op == "Gelu" || op == "Softmax" ||
                   op == "Identity" || op == "Cast" || op == "RMSNorm" || op == "LayerNorm") {
            dims[out_name] = in_dims(0);
            if ((op == "Identity" || op == "Cast") && values.count(node.inputs[0])) {
                values[out_name] = values[node.inputs[0]];
            }
        } else if (op == "ReduceMean") {
            auto axes = node.attr_ints("axes");
            for (auto& a : axes) {
                if (a < 0) a += static_cast<std::int64_t>(in_dims(0).size());
            }
            const bool keepdims = node.attr_int("keepdims") != 0;
            std::vector<std::int64_t> out;
            for (std::size_t i = 0; i < in_dims(0).size(); ++i) {
                const bool reduced =
                    std::find(axes.begin(), axes.end(), static_cast<std::int64_t>(i)) != axes.end();
                if (!reduced) out.push_back(in_dims(0)[i]);
                else if (keepdims) out.push_back(1);
            }
            dims[out_name] = out;
        } else if (op == "MatMul" || op == "MatMulQuant") {
            const auto& a = in_dims(0);
            const auto& b = in_dims(1);
            if (a.back() != b[b.size() - 2]) fail(ErrorKind::ShapeMismatch, "matmul inner dims");
            std::vector<std::int64_t> batch_a(a.begin(), a.end() - 2);
            std::vector<std::int64_t> batch_b(b.begin(), b.end() - 2);
            auto out = broadcast(batch_a, batch_b);
            out.push_back(a[a.size() - 2]);
            out.push_back(b.back());
            dims[out_name] = out;
        } else if (op == "Slice") {
            const auto starts = node.attr_ints("starts");
            const auto ends = node.attr_ints("ends");
            const auto axes = node.attr_ints("axes");
            auto out = in_dims(0);
            for (std::size_t i = 0; i < axes.size(); ++i) {
                auto axis = axes[i] < 0 ? axes[i] + static_cast<std::int64_t>(out.size()) : axes[i];
                const std::int64_t extent = out[static_cast<std::size_t>(axis)];
                const std::int64_t hi =
                    std::min(ends[i] < 0 ? extent + ends[i] : ends[i], extent);
                out[static_cast<std::size_t>(axis)] = hi - starts[i];
            }
            dims[out_name] = out;
            if (values.count(node.inputs[0]) && out.size() == 1) {
                const auto& v = values[node.inputs[0]];
                const std::int64_t len = static_cast<std::int64_t>(v.size());
                const std::int64_t hi = ends[0] == std::numeric_limits<std::int64_t>::max()
                                            ? len
                                            : (ends[0] < 0 ? len + ends[0] : std::min(ends[0], len));
                values[out_name] = std::vector<std::int64_t>(v.begin() + starts[0], v.begin() + hi);
            }
        } else if (op == "FusedElementwise") {
            std::istringstream ops_stream(node.attr_string("ops"));
            const auto rhs_idx = node.attr_ints("rhs_idx");
            std::string step_op;
            auto running = in_dims(0);
            std::size_t step = 0;
            while (std::getline(ops_stream, step_op, ',')) {
                if (rhs_idx[step] >= 0) {
                    running = broadcast(running, in_dims(static_cast<std::size_t>(rhs_idx[step])));
                }
                ++step;
            }
            dims[out_name] = running;
        } else {
            fail(ErrorKind::UnknownOperator, "no concrete shape rule for " + op);
        }
    }
    return dims;
}

}  // namespace lg
