#include "lg/executor.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

namespace lg {

namespace {

constexpr int kMaxRank = 8;

struct Dims {
    std::int64_t d[kMaxRank];
    int rank = 0;

    static Dims of(const std::vector<std::int64_t>& dims) {
        if (dims.size() > kMaxRank) fail(ErrorKind::RankMismatch, "rank exceeds the executor limit");
        Dims out;
        out.rank = static_cast<int>(dims.size());
        for (int i = 0; i < out.rank; ++i) out.d[i] = dims[static_cast<std::size_t>(i)];
        return out;
    }

    std::int64_t elems() const {
        std::int64_t n = 1;
        for (int i = 0; i < rank; ++i) n *= d[i];
        return n;
    }
};

// Right-aligned broadcast strides of `in` against `out` (0 on broadcast dims).
void broadcast_strides(const Dims& in, const Dims& out, std::int64_t* strides) {
    std::int64_t running = 1;
    std::int64_t in_strides[kMaxRank];
    for (int i = in.rank - 1; i >= 0; --i) {
        in_strides[i] = running;
        running *= in.d[i];
    }
    for (int o = 0; o < out.rank; ++o) {
        const int i = o - (out.rank - in.rank);
        strides[o] = (i < 0 || in.d[i] == 1) ? 0 : in_strides[i];
    }
}

enum class BinaryOp { Add, Sub, Mul, Div, Pow };
enum class UnaryOp { Neg, Sqrt, Silu, Gelu, Identity };

float apply_binary(BinaryOp op, float a, float b) {
    switch (op) {
        case BinaryOp::Add: return a + b;
        case BinaryOp::Sub: return a - b;
        case BinaryOp::Mul: return a * b;
        case BinaryOp::Div: return a / b;
        case BinaryOp::Pow: return b == 2.0f ? a * a : std::pow(a, b);
    }
    return 0.0f;
}

float apply_unary(UnaryOp op, float x) {
    switch (op) {
        case UnaryOp::Neg: return -x;
        case UnaryOp::Sqrt: return std::sqrt(x);
        case UnaryOp::Silu: return x / (1.0f + std::exp(-x));
        case UnaryOp::Gelu: return 0.5f * x * (1.0f + std::erf(x * 0.70710678118654752440f));
        case UnaryOp::Identity: return x;
    }
    return 0.0f;
}

BinaryOp binary_from_name(const std::string& op) {
    if (op == "Add") return BinaryOp::Add;
    if (op == "Sub") return BinaryOp::Sub;
    if (op == "Mul") return BinaryOp::Mul;
    if (op == "Div") return BinaryOp::Div;
    if (op == "Pow") return BinaryOp::Pow;
    fail(ErrorKind::UnknownOperator, "not a binary elementwise op: " + op);
}

UnaryOp unary_from_name(const std::string& op) {
    if (op == "Neg") return UnaryOp::Neg;
    if (op == "Sqrt") return UnaryOp::Sqrt;
    if (op == "Silu") return UnaryOp::Silu;
    if (op == "Gelu") return UnaryOp::Gelu;
    if (op == "Identity") return UnaryOp::Identity;
    fail(ErrorKind::UnknownOperator, "not a unary elementwise op: " + op);
}

// Odometer loop over the output index space with broadcast strides for the
// two operands. In-place use (out aliasing a or b) is safe elementwise.
template <typename T, typename F>
void elementwise_binary(const T* a, const Dims& da, const T* b, const Dims& db, T* out,
                        const Dims& dout, F&& f) {
    std::int64_t sa[kMaxRank], sb[kMaxRank];
    broadcast_strides(da, dout, sa);
    broadcast_strides(db, dout, sb);
    std::int64_t idx[kMaxRank] = {0};
    const std::int64_t total = dout.elems();
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t flat = 0; flat < total; ++flat) {
        out[flat] = f(a[oa], b[ob]);
        for (int dim = dout.rank - 1; dim >= 0; --dim) {
            ++idx[dim];
            oa += sa[dim];
            ob += sb[dim];
            if (idx[dim] < dout.d[dim]) break;
            oa -= sa[dim] * dout.d[dim];
            ob -= sb[dim] * dout.d[dim];
            idx[dim] = 0;
        }
    }
}

void matmul_prefill_kernel(const float* a, const float* b, std::int64_t m, std::int64_t k,
                           std::int64_t n, float* out) {
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            float acc = 0.0f;
            for (std::int64_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
            out[i * n + j] = acc;
        }
    }
}

void matmul_decode_kernel(const float* a, const float* b, std::int64_t k, std::int64_t n,
                          float* out) {
    for (std::int64_t j = 0; j < n; ++j) {
        float acc = 0.0f;
        for (std::int64_t kk = 0; kk < k; ++kk) acc += a[kk] * b[kk * n + j];
        out[j] = acc;
    }
}

}  // namespace

Session::Session(const CompiledPlan& plan, const WeightStore& weights, SessionOptions options)
    : plan_(plan), weights_(weights), options_(options) {
    const Graph& g = plan_.graph;
    tensor_info_.reserve(g.tensors.size());
    for (const auto& t : g.tensors) {
        // The reference executor computes in F32 and I64 only; 4-bit dtypes
        // are reachable solely through registered quantized weights.
        if (t.dtype == DType::F16 || t.dtype == DType::Bool) {
            fail(ErrorKind::SchemeUnsupported,
                 "tensor '" + t.name + "': dtype " + dtype_name(t.dtype) +
                     " has no reference kernels");
        }
        tensor_index_[t.name] = static_cast<int>(tensor_info_.size());
        tensor_info_.push_back(&t);
    }
    resolved_.resize(tensor_info_.size());
    elems_.assign(tensor_info_.size(), 0);
    slots_.resize(tensor_info_.size());
    locals_.resize(tensor_info_.size());

    for (std::size_t i = 0; i < plan_.arenas.size(); ++i) {
        const ArenaBinding& binding = plan_.arenas[i];
        const Shape& full = plan_.derived.shape(binding.full);
        std::vector<std::int64_t> dims;
        for (std::size_t d = 0; d < full.size(); ++d) {
            dims.push_back(full[d].evaluate(plan_.max_bindings));
        }
        arenas_.push_back(std::make_unique<CacheArena>(binding.arena,
                                                       g.tensor(binding.full).dtype, dims,
                                                       static_cast<std::size_t>(binding.axis)));
        counters_.allocations += 1;
        slots_[static_cast<std::size_t>(tensor_index_.at(binding.past))] = {
            Slot::Kind::Arena, -1, static_cast<int>(i), nullptr};
        slots_[static_cast<std::size_t>(tensor_index_.at(binding.full))] = {
            Slot::Kind::Arena, -1, static_cast<int>(i), nullptr};
    }

    if (options_.preallocate) {
        storage_ = ArenaSet(plan_.memory);
        counters_.allocations += storage_.allocation_count();
    }

    for (std::size_t i = 0; i < tensor_info_.size(); ++i) {
        Slot& slot = slots_[i];
        if (slot.kind == Slot::Kind::Arena) continue;
        const TensorInfo& info = *tensor_info_[i];
        if (info.kind == TensorKind::Weight) {
            slot.kind = Slot::Kind::Weight;
            slot.weight = weights_.has(info.name) ? &weights_.at(info.name) : nullptr;
            continue;
        }
        if (!options_.preallocate) {
            slot.kind = Slot::Kind::Local;
            continue;
        }
        const std::string root = [&] {
            std::string r = info.name;
            auto alias = plan_.memory.aliases.find(r);
            while (alias != plan_.memory.aliases.end()) {
                r = alias->second;
                alias = plan_.memory.aliases.find(r);
            }
            return r;
        }();
        auto assigned = plan_.memory.assignment.find(root);
        if (assigned != plan_.memory.assignment.end()) {
            slot.kind = Slot::Kind::Block;
            slot.block = assigned->second;
        } else {
            slot.kind = Slot::Kind::Folded;
        }
    }

    // Concat nodes that copy a registered KV cache (the naive path).
    for (const auto& pair : g.meta.kv_pairs) {
        for (std::size_t n = 0; n < g.nodes.size(); ++n) {
            const NodeSpec& node = g.nodes[n];
            if (node.op == "Concat" && node.inputs.size() == 2 && node.inputs[0] == pair.past &&
                node.inputs[1] == pair.fresh) {
                kv_concat_nodes_.insert(static_cast<int>(n));
            }
        }
    }
}

void Session::register_quantized(const std::string& weight_name, QuantizedWeight qw) {
    quantized_[weight_name] = std::move(qw);
}

void Session::reset() {
    for (auto& arena : arenas_) {
        arena->reset();
        std::memset(arena->data(), 0,
                    static_cast<std::size_t>(arena->max_seq() * arena->trailing_elems()) * sizeof(float));
    }
    const auto allocations = counters_.allocations;
    counters_ = Counters{};
    counters_.allocations = allocations;
    counters_.scratch_peak_bytes = 0;
    previous_bindings_.clear();
    bound_ = false;
}

void Session::bind(const std::map<std::string, std::int64_t>& bindings) {
    if (options_.naive_resolution) {
        for (const auto& s : plan_.graph.symbols) {
            auto it = bindings.find(s.name);
            if (it == bindings.end()) fail(ErrorKind::UnboundSymbol, "symbol '" + s.name + "' is not bound");
            if (it->second < 1) fail(ErrorKind::NonPositiveDim, "binding for '" + s.name + "' must be >= 1");
        }
        auto dims = concrete_shapes(plan_.graph, weights_, bindings);
        for (auto& [name, d] : dims) {
            for (auto v : d) {
                if (v < 0) fail(ErrorKind::NonPositiveDim, "dim of '" + name + "' is negative");
            }
            resolved_[static_cast<std::size_t>(tensor_index_.at(name))] = std::move(d);
        }
    } else {
        ResolvedShapes resolved = bind_symbols(plan_, bindings);
        for (auto& [name, d] : resolved.dims) {
            resolved_[static_cast<std::size_t>(tensor_index_.at(name))] = std::move(d);
        }
    }
    for (std::size_t i = 0; i < tensor_info_.size(); ++i) {
        const auto& dims = resolved_[i];
        elems_[i] = std::accumulate(dims.begin(), dims.end(), std::int64_t(1), std::multiplies<>());
        if (tensor_info_[i]->kind == TensorKind::Weight && resolved_[i].empty()) {
            // Weights keep their literal dims.
            resolved_[i] = shape_literals(tensor_info_[i]->shape);
            elems_[i] = std::accumulate(resolved_[i].begin(), resolved_[i].end(), std::int64_t(1),
                                        std::multiplies<>());
        }
        if (!options_.preallocate && slots_[i].kind == Slot::Kind::Local) {
            const std::size_t bytes =
                static_cast<std::size_t>(elems_[i]) * dtype_size(tensor_info_[i]->dtype);
            locals_[i].assign(bytes, 0);
            counters_.allocations += 1;
        }
    }
    if (!bound_ || bindings != previous_bindings_) {
        counters_.shape_updates += 1;
        previous_bindings_ = bindings;
    }
    bound_ = true;
}

float* Session::f32_data(int tensor) { return static_cast<float*>(raw_data(tensor)); }
std::int64_t* Session::i64_data(int tensor) { return static_cast<std::int64_t*>(raw_data(tensor)); }

void* Session::raw_data(int tensor) {
    Slot& slot = slots_[static_cast<std::size_t>(tensor)];
    switch (slot.kind) {
        case Slot::Kind::Weight:
            if (!slot.weight) {
                fail(ErrorKind::SchemaError,
                     "weight '" + tensor_info_[static_cast<std::size_t>(tensor)]->name +
                         "' has no payload");
            }
            return const_cast<std::uint8_t*>(slot.weight->bytes.data());
        case Slot::Kind::Block: return storage_.block_data(slot.block);
        case Slot::Kind::Arena: return arenas_[static_cast<std::size_t>(slot.arena)]->data();
        case Slot::Kind::Local: return locals_[static_cast<std::size_t>(tensor)].data();
        case Slot::Kind::Folded: break;
    }
    fail(ErrorKind::SchemaError, "tensor '" + tensor_info_[static_cast<std::size_t>(tensor)]->name +
                                     "' has no runtime storage");
}

std::int64_t Session::elem_count(int tensor) const { return elems_[static_cast<std::size_t>(tensor)]; }

std::span<float> Session::input_f32(const std::string& name) {
    const int t = tensor_index_.at(name);
    return {f32_data(t), static_cast<std::size_t>(elem_count(t))};
}

std::span<std::int64_t> Session::input_i64(const std::string& name) {
    const int t = tensor_index_.at(name);
    return {i64_data(t), static_cast<std::size_t>(elem_count(t))};
}

std::span<const float> Session::tensor_f32(const std::string& name) {
    const int t = tensor_index_.at(name);
    return {f32_data(t), static_cast<std::size_t>(elem_count(t))};
}

std::span<const std::int64_t> Session::tensor_i64(const std::string& name) {
    const int t = tensor_index_.at(name);
    return {i64_data(t), static_cast<std::size_t>(elem_count(t))};
}

const std::vector<std::int64_t>& Session::tensor_dims(const std::string& name) const {
    return resolved_[static_cast<std::size_t>(tensor_index_.at(name))];
}

namespace {

std::int64_t dims_product(const std::vector<std::int64_t>& dims, std::size_t from, std::size_t to) {
    std::int64_t p = 1;
    for (std::size_t i = from; i < to; ++i) p *= dims[i];
    return p;
}

}  // namespace

void Session::execute_node(int node_index) {
    const Graph& g = plan_.graph;
    const NodeSpec& node = g.nodes[static_cast<std::size_t>(node_index)];
    const std::string& op = node.op;

    auto index = [&](const std::string& name) { return tensor_index_.at(name); };
    auto dims = [&](const std::string& name) -> const std::vector<std::int64_t>& {
        return resolved_[static_cast<std::size_t>(index(name))];
    };
    auto dtype = [&](const std::string& name) { return g.tensor(name).dtype; };

    // Shape-computing nodes run on concrete I64 values, seeded from the I64
    // buffers their upstream shape nodes produced.
    if (plan_.classes[static_cast<std::size_t>(node_index)] == NodeClass::ShapeComputing) {
        std::map<std::string, std::vector<std::int64_t>> resolved_dims;
        std::map<std::string, std::vector<std::int64_t>> seed;
        for (const auto& in : node.inputs) {
            resolved_dims[in] = dims(in);
            if (g.tensor(in).kind != TensorKind::Weight && op != "Shape") {
                const auto* data = i64_data(index(in));
                seed[in] = std::vector<std::int64_t>(data, data + elem_count(index(in)));
            }
        }
        const auto values = run_shape_nodes(g, {node_index}, weights_, resolved_dims, std::move(seed));
        for (const auto& out : node.outputs) {
            const auto& value = values.at(out);
            std::copy(value.begin(), value.end(), i64_data(index(out)));
        }
        counters_.shape_ops_executed += 1;
        return;
    }

    if (op == "Identity" || op == "Reshape" || op == "Squeeze" || op == "Unsqueeze") {
        const int in = index(node.inputs[0]);
        const int out = index(node.outputs[0]);
        void* src = raw_data(in);
        void* dst = raw_data(out);
        if (src != dst && elem_count(in) > 0) {
            std::memcpy(dst, src,
                        static_cast<std::size_t>(elem_count(in)) * dtype_size(dtype(node.inputs[0])));
        }
        return;
    }
    if (op == "Cast") {
        const int in = index(node.inputs[0]);
        const int out = index(node.outputs[0]);
        const DType from = dtype(node.inputs[0]);
        const DType to = dtype_from_name(node.attr_string("to"));
        const std::int64_t n = elem_count(in);
        if (from == to) {
            std::memcpy(raw_data(out), raw_data(in), static_cast<std::size_t>(n) * dtype_size(from));
        } else if (from == DType::I64 && to == DType::F32) {
            const auto* src = i64_data(in);
            auto* dst = f32_data(out);
            for (std::int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(src[i]);
        } else if (from == DType::F32 && to == DType::I64) {
            const auto* src = f32_data(in);
            auto* dst = i64_data(out);
            for (std::int64_t i = 0; i < n; ++i) dst[i] = static_cast<std::int64_t>(src[i]);
        } else {
            fail(ErrorKind::SchemeUnsupported, "Cast pair not supported");
        }
        return;
    }
    if (op == "Gather") {
        const auto& data_dims = dims(node.inputs[0]);
        const auto& idx_dims = dims(node.inputs[1]);
        const auto axis = static_cast<std::size_t>(
            node.attr_int("axis") < 0 ? node.attr_int("axis") + static_cast<std::int64_t>(data_dims.size())
                                      : node.attr_int("axis"));
        const std::int64_t outer = dims_product(data_dims, 0, axis);
        const std::int64_t extent = data_dims[axis];
        const std::int64_t inner = dims_product(data_dims, axis + 1, data_dims.size());
        const std::int64_t picks = dims_product(idx_dims, 0, idx_dims.size());
        const auto* idx = i64_data(index(node.inputs[1]));
        const std::size_t esize = dtype_size(dtype(node.inputs[0]));
        const auto* src = static_cast<const std::uint8_t*>(raw_data(index(node.inputs[0])));
        auto* dst = static_cast<std::uint8_t*>(raw_data(index(node.outputs[0])));
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t p = 0; p < picks; ++p) {
                std::int64_t i = idx[p];
                if (i < 0) i += extent;
                if (i < 0 || i >= extent) {
                    fail(ErrorKind::ShapeMismatch, "gather index out of range in node " +
                                                       std::to_string(node.id));
                }
                std::memcpy(dst + static_cast<std::size_t>((o * picks + p) * inner) * esize,
                            src + static_cast<std::size_t>((o * extent + i) * inner) * esize,
                            static_cast<std::size_t>(inner) * esize);
            }
        }
        return;
    }
    if (op == "Concat") {
        const auto& out_dims = dims(node.outputs[0]);
        const auto axis = static_cast<std::size_t>(
            node.attr_int("axis") < 0 ? node.attr_int("axis") + static_cast<std::int64_t>(out_dims.size())
                                      : node.attr_int("axis"));
        const std::int64_t outer = dims_product(out_dims, 0, axis);
        const std::int64_t inner = dims_product(out_dims, axis + 1, out_dims.size());
        const std::size_t esize = dtype_size(dtype(node.outputs[0]));
        auto* dst = static_cast<std::uint8_t*>(raw_data(index(node.outputs[0])));
        const std::int64_t out_axis = out_dims[axis];
        std::int64_t offset = 0;
        for (const auto& in : node.inputs) {
            const auto& in_dims = dims(in);
            const std::int64_t in_axis = in_dims[axis];
            if (in_axis == 0) continue;  // empty past cache on the first pass
            const auto* src = static_cast<const std::uint8_t*>(raw_data(index(in)));
            for (std::int64_t o = 0; o < outer; ++o) {
                std::memcpy(dst + static_cast<std::size_t>((o * out_axis + offset) * inner) * esize,
                            src + static_cast<std::size_t>(o * in_axis * inner) * esize,
                            static_cast<std::size_t>(in_axis * inner) * esize);
            }
            offset += in_axis;
        }
        if (kv_concat_nodes_.count(node_index)) {
            counters_.kv_copy_bytes +=
                elem_count(index(node.inputs[0])) * static_cast<std::int64_t>(esize);
        }
        return;
    }
    if (op == "Slice") {
        const auto& in_dims = dims(node.inputs[0]);
        const auto& out_dims = dims(node.outputs[0]);
        const auto starts = node.attr_ints("starts");
        const auto axes = node.attr_ints("axes");
        std::int64_t offsets[kMaxRank] = {0};
        for (std::size_t i = 0; i < axes.size(); ++i) {
            const auto axis = axes[i] < 0 ? axes[i] + static_cast<std::int64_t>(in_dims.size()) : axes[i];
            offsets[axis] = starts[i];
        }
        const Dims din = Dims::of(in_dims);
        const Dims dout = Dims::of(out_dims);
        std::int64_t in_strides[kMaxRank];
        std::int64_t running = 1;
        for (int i = din.rank - 1; i >= 0; --i) {
            in_strides[i] = running;
            running *= din.d[i];
        }
        const std::size_t esize = dtype_size(dtype(node.inputs[0]));
        const auto* src = static_cast<const std::uint8_t*>(raw_data(index(node.inputs[0])));
        auto* dst = static_cast<std::uint8_t*>(raw_data(index(node.outputs[0])));
        std::int64_t idx[kMaxRank] = {0};
        const std::int64_t total = dout.elems();
        for (std::int64_t flat = 0; flat < total; ++flat) {
            std::int64_t src_flat = 0;
            for (int i = 0; i < dout.rank; ++i) src_flat += (idx[i] + offsets[i]) * in_strides[i];
            std::memcpy(dst + static_cast<std::size_t>(flat) * esize,
                        src + static_cast<std::size_t>(src_flat) * esize, esize);
            for (int dim = dout.rank - 1; dim >= 0; --dim) {
                if (++idx[dim] < dout.d[dim]) break;
                idx[dim] = 0;
            }
        }
        return;
    }
    if (op == "Transpose") {
        const auto& in_dims = dims(node.inputs[0]);
        auto perm = node.attr_ints("perm");
        for (auto& p : perm) {
            if (p < 0) p += static_cast<std::int64_t>(in_dims.size());
        }
        const Dims din = Dims::of(in_dims);
        std::int64_t in_strides[kMaxRank];
        std::int64_t running = 1;
        for (int i = din.rank - 1; i >= 0; --i) {
            in_strides[i] = running;
            running *= din.d[i];
        }
        const Dims dout = Dims::of(dims(node.outputs[0]));
        std::int64_t out_src_stride[kMaxRank];
        for (int i = 0; i < dout.rank; ++i) {
            out_src_stride[i] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
        }
        const std::size_t esize = dtype_size(dtype(node.inputs[0]));
        const auto* src = static_cast<const std::uint8_t*>(raw_data(index(node.inputs[0])));
        auto* dst = static_cast<std::uint8_t*>(raw_data(index(node.outputs[0])));
        std::int64_t idx[kMaxRank] = {0};
        std::int64_t src_flat = 0;
        const std::int64_t total = dout.elems();
        for (std::int64_t flat = 0; flat < total; ++flat) {
            std::memcpy(dst + static_cast<std::size_t>(flat) * esize,
                        src + static_cast<std::size_t>(src_flat) * esize, esize);
            for (int dim = dout.rank - 1; dim >= 0; --dim) {
                ++idx[dim];
                src_flat += out_src_stride[dim];
                if (idx[dim] < dout.d[dim]) break;
                src_flat -= out_src_stride[dim] * dout.d[dim];
                idx[dim] = 0;
            }
        }
        return;
    }
    if (op == "Add" || op == "Sub" || op == "Mul" || op == "Div" || op == "Pow") {
        const BinaryOp bop = binary_from_name(op);
        const int a = index(node.inputs[0]);
        const int b = index(node.inputs[1]);
        const int out = index(node.outputs[0]);
        const Dims da = Dims::of(resolved_[static_cast<std::size_t>(a)]);
        const Dims db = Dims::of(resolved_[static_cast<std::size_t>(b)]);
        const Dims dout = Dims::of(resolved_[static_cast<std::size_t>(out)]);
        if (dtype(node.outputs[0]) == DType::I64) {
            elementwise_binary<std::int64_t>(
                i64_data(a), da, i64_data(b), db, i64_data(out), dout,
                [&](std::int64_t x, std::int64_t y) -> std::int64_t {
                    switch (bop) {
                        case BinaryOp::Add: return x + y;
                        case BinaryOp::Sub: return x - y;
                        case BinaryOp::Mul: return x * y;
                        case BinaryOp::Div: return x / y;
                        default: fail(ErrorKind::SchemeUnsupported, "integer Pow");
                    }
                });
        } else {
            elementwise_binary<float>(f32_data(a), da, f32_data(b), db, f32_data(out), dout,
                                      [&](float x, float y) { return apply_binary(bop, x, y); });
        }
        return;
    }
    if (op == "Neg" || op == "Sqrt" || op == "Silu" || op == "Gelu") {
        const UnaryOp uop = unary_from_name(op);
        const int in = index(node.inputs[0]);
        const int out = index(node.outputs[0]);
        const std::int64_t n = elem_count(in);
        if (dtype(node.outputs[0]) == DType::I64 && uop == UnaryOp::Neg) {
            const auto* src = i64_data(in);
            auto* dst = i64_data(out);
            for (std::int64_t i = 0; i < n; ++i) dst[i] = -src[i];
        } else {
            const auto* src = f32_data(in);
            auto* dst = f32_data(out);
            for (std::int64_t i = 0; i < n; ++i) dst[i] = apply_unary(uop, src[i]);
        }
        return;
    }
    if (op == "FusedElementwise") {
        std::istringstream ops_stream(node.attr_string("ops"));
        const auto rhs_idx = node.attr_ints("rhs_idx");
        const auto swap = node.attr_ints("swap");
        const int out = index(node.outputs[0]);
        const Dims dout = Dims::of(resolved_[static_cast<std::size_t>(out)]);
        float* out_ptr = f32_data(out);
        std::string step_op;
        std::size_t step = 0;
        int chain = index(node.inputs[0]);
        while (std::getline(ops_stream, step_op, ',')) {
            const bool first = step == 0;
            const float* chain_ptr = first ? f32_data(chain) : out_ptr;
            const Dims chain_dims = first ? Dims::of(resolved_[static_cast<std::size_t>(chain)]) : dout;
            if (rhs_idx[step] < 0) {
                const UnaryOp uop = unary_from_name(step_op);
                const std::int64_t n = dout.elems();
                if (first) {
                    // unary heads have matching shapes by construction
                    for (std::int64_t i = 0; i < n; ++i) out_ptr[i] = apply_unary(uop, chain_ptr[i]);
                } else {
                    for (std::int64_t i = 0; i < n; ++i) out_ptr[i] = apply_unary(uop, out_ptr[i]);
                }
            } else {
                const BinaryOp bop = binary_from_name(step_op);
                const int ext = index(node.inputs[static_cast<std::size_t>(rhs_idx[step])]);
                const Dims dext = Dims::of(resolved_[static_cast<std::size_t>(ext)]);
                if (swap[step] != 0) {
                    elementwise_binary<float>(f32_data(ext), dext, chain_ptr, chain_dims, out_ptr, dout,
                                              [&](float x, float y) { return apply_binary(bop, x, y); });
                } else {
                    elementwise_binary<float>(chain_ptr, chain_dims, f32_data(ext), dext, out_ptr, dout,
                                              [&](float x, float y) { return apply_binary(bop, x, y); });
                }
            }
            ++step;
        }
        return;
    }
    if (op == "ReduceMean") {
        const auto& in_dims = dims(node.inputs[0]);
        auto axes = node.attr_ints("axes");
        if (axes.size() != 1) fail(ErrorKind::UnsupportedDynamicAttr, "ReduceMean needs one axis");
        const auto axis = axes[0] < 0 ? axes[0] + static_cast<std::int64_t>(in_dims.size()) : axes[0];
        if (axis != static_cast<std::int64_t>(in_dims.size()) - 1) {
            fail(ErrorKind::UnsupportedDynamicAttr, "ReduceMean is implemented for the last axis");
        }
        const std::int64_t width = in_dims.back();
        const std::int64_t rows = elem_count(index(node.inputs[0])) / width;
        const auto* src = f32_data(index(node.inputs[0]));
        auto* dst = f32_data(index(node.outputs[0]));
        for (std::int64_t r = 0; r < rows; ++r) {
            float acc = 0.0f;
            for (std::int64_t i = 0; i < width; ++i) acc += src[r * width + i];
            dst[r] = acc / static_cast<float>(width);
        }
        return;
    }
    if (op == "Softmax") {
        const auto& in_dims = dims(node.inputs[0]);
        const auto axis = node.attr_int("axis") < 0
                              ? node.attr_int("axis") + static_cast<std::int64_t>(in_dims.size())
                              : node.attr_int("axis");
        if (axis != static_cast<std::int64_t>(in_dims.size()) - 1) {
            fail(ErrorKind::UnsupportedDynamicAttr, "Softmax is implemented for the last axis");
        }
        const std::int64_t width = in_dims.back();
        const std::int64_t rows = elem_count(index(node.inputs[0])) / width;
        const auto* src = f32_data(index(node.inputs[0]));
        auto* dst = f32_data(index(node.outputs[0]));
        for (std::int64_t r = 0; r < rows; ++r) {
            const float* x = src + r * width;
            float* y = dst + r * width;
            float row_max = x[0];
            for (std::int64_t i = 1; i < width; ++i) row_max = std::max(row_max, x[i]);
            float denom = 0.0f;
            for (std::int64_t i = 0; i < width; ++i) {
                y[i] = std::exp(x[i] - row_max);
                denom += y[i];
            }
            for (std::int64_t i = 0; i < width; ++i) y[i] /= denom;
        }
        return;
    }
    if (op == "RMSNorm") {
        const auto& in_dims = dims(node.inputs[0]);
        const float eps = static_cast<float>(node.attr_float("eps"));
        const std::int64_t width = in_dims.back();
        const std::int64_t rows = elem_count(index(node.inputs[0])) / width;
        const auto* x = f32_data(index(node.inputs[0]));
        const auto* w = f32_data(index(node.inputs[1]));
        auto* y = f32_data(index(node.outputs[0]));
        // Bitwise-identical composition of the unfused subgraph:
        // Pow(2) -> ReduceMean -> Add eps -> Sqrt -> Div -> Mul.
        for (std::int64_t r = 0; r < rows; ++r) {
            float acc = 0.0f;
            for (std::int64_t i = 0; i < width; ++i) {
                const float v = x[r * width + i] * x[r * width + i];
                acc += v;
            }
            const float rms = std::sqrt(acc / static_cast<float>(width) + eps);
            for (std::int64_t i = 0; i < width; ++i) {
                y[r * width + i] = (x[r * width + i] / rms) * w[i];
            }
        }
        return;
    }
    if (op == "LayerNorm") {
        const auto& in_dims = dims(node.inputs[0]);
        const float eps = static_cast<float>(node.attr_float("eps"));
        const std::int64_t width = in_dims.back();
        const std::int64_t rows = elem_count(index(node.inputs[0])) / width;
        const auto* x = f32_data(index(node.inputs[0]));
        const auto* w = f32_data(index(node.inputs[1]));
        const auto* b = f32_data(index(node.inputs[2]));
        auto* y = f32_data(index(node.outputs[0]));
        for (std::int64_t r = 0; r < rows; ++r) {
            float mean = 0.0f;
            for (std::int64_t i = 0; i < width; ++i) mean += x[r * width + i];
            mean /= static_cast<float>(width);
            float var = 0.0f;
            for (std::int64_t i = 0; i < width; ++i) {
                const float c = x[r * width + i] - mean;
                var += c * c;
            }
            const float denom = std::sqrt(var / static_cast<float>(width) + eps);
            for (std::int64_t i = 0; i < width; ++i) {
                y[r * width + i] = ((x[r * width + i] - mean) / denom) * w[i] + b[i];
            }
        }
        return;
    }
    if (op == "MatMul" || op == "MatMulQuant") {
        const int a = index(node.inputs[0]);
        const auto& a_dims = resolved_[static_cast<std::size_t>(a)];
        const std::string& weight_name = node.inputs[1];
        const std::int64_t m = a_dims[a_dims.size() - 2];
        const std::int64_t k = a_dims.back();

        auto quant = quantized_.find(weight_name);
        if (op == "MatMulQuant" || quant != quantized_.end()) {
            if (quant == quantized_.end()) {
                fail(ErrorKind::SchemeUnsupported,
                     "MatMulQuant weight '" + weight_name + "' has no registered quantized form");
            }
            const QuantizedWeight& qw = quant->second;
            if (static_cast<std::int64_t>(qw.k) != k) {
                fail(ErrorKind::ShapeMismatch, "quantized weight K does not match");
            }
            const std::int64_t n = qw.n;
            const std::int64_t rows = elem_count(a) / k;
            const auto* src = f32_data(a);
            auto* dst = f32_data(index(node.outputs[0]));
            // Codes decode inline inside the reduction, so the accumulation
            // order matches the plain matmul kernel exactly and no weight
            // block ever materializes.
            const std::size_t group_rows = qw.group_rows();
            for (std::int64_t r = 0; r < rows; ++r) {
                for (std::int64_t j = 0; j < n; ++j) {
                    float acc = 0.0f;
                    for (std::size_t gr = 0; gr < group_rows; ++gr) {
                        const std::size_t gi = gr * qw.n + static_cast<std::size_t>(j);
                        const std::int64_t k0 = static_cast<std::int64_t>(gr) * qw.group_size;
                        if (qw.scheme == QuantScheme::E0M4) {
                            const QuantGroupE0M4& grp = qw.groups_e0m4[gi];
                            const float bias = f16_to_f32(grp.bias);
                            for (std::uint32_t e = 0; e < grp.count; ++e) {
                                const float w = (f16_to_f32(e0m4_code_to_half(
                                                     get_nibble(grp.codes, e), qw.n_exp)) -
                                                 bias) /
                                                grp.scale;
                                acc += src[r * k + k0 + e] * w;
                            }
                        } else {
                            const QuantGroupInt4& grp = qw.groups_int4[gi];
                            for (std::uint32_t e = 0; e < grp.count; ++e) {
                                const float w =
                                    grp.min + static_cast<float>(get_nibble(grp.codes, e)) * grp.step;
                                acc += src[r * k + k0 + e] * w;
                            }
                        }
                    }
                    dst[r * n + j] = acc;
                }
            }
            if (m == 1) counters_.matmul_decode += 1;
            else counters_.matmul_prefill += 1;
            return;
        }

        const int b = index(node.inputs[1]);
        const auto& b_dims = resolved_[static_cast<std::size_t>(b)];
        const std::int64_t n = b_dims.back();
        const auto& out_dims = resolved_[static_cast<std::size_t>(index(node.outputs[0]))];
        // Batch dims broadcast; inner matmul over [m, k] x [k, n].
        const std::size_t batch_rank = out_dims.size() - 2;
        std::vector<std::int64_t> batch(out_dims.begin(), out_dims.end() - 2);
        const Dims dbatch = Dims::of(batch);
        std::vector<std::int64_t> a_batch(a_dims.begin(), a_dims.end() - 2);
        std::vector<std::int64_t> b_batch(b_dims.begin(), b_dims.end() - 2);
        std::int64_t sa[kMaxRank] = {0}, sb[kMaxRank] = {0};
        broadcast_strides(Dims::of(a_batch), dbatch, sa);
        broadcast_strides(Dims::of(b_batch), dbatch, sb);
        const float* a_ptr = f32_data(a);
        const float* b_ptr = f32_data(b);
        float* out_ptr = f32_data(index(node.outputs[0]));
        const std::int64_t batches = dbatch.elems();
        std::int64_t idx[kMaxRank] = {0};
        std::int64_t oa = 0, ob = 0;
        for (std::int64_t bi = 0; bi < batches; ++bi) {
            const float* a_mat = a_ptr + oa * m * k;
            const float* b_mat = b_ptr + ob * k * n;
            float* o_mat = out_ptr + bi * m * n;
            if (m == 1) {
                matmul_decode_kernel(a_mat, b_mat, k, n, o_mat);
            } else {
                matmul_prefill_kernel(a_mat, b_mat, m, k, n, o_mat);
            }
            for (int dim = static_cast<int>(batch_rank) - 1; dim >= 0; --dim) {
                ++idx[dim];
                oa += sa[dim];
                ob += sb[dim];
                if (idx[dim] < dbatch.d[dim]) break;
                oa -= sa[dim] * dbatch.d[dim];
                ob -= sb[dim] * dbatch.d[dim];
                idx[dim] = 0;
            }
        }
        if (m == 1) counters_.matmul_decode += 1;
        else counters_.matmul_prefill += 1;
        return;
    }
    if (op == "KVAppend") {
        auto arena_it = plan_.kv_append_arena.find(node_index);
        if (arena_it == plan_.kv_append_arena.end()) {
            fail(ErrorKind::MetadataMissing, "KVAppend node has no arena");
        }
        CacheArena& arena = *arenas_[static_cast<std::size_t>(arena_it->second)];
        const int fresh = index(node.inputs[1]);
        const auto& fresh_dims = resolved_[static_cast<std::size_t>(fresh)];
        const auto axis = static_cast<std::size_t>(node.attr_int("axis"));
        const std::int64_t tokens = fresh_dims[axis];
        const std::int64_t trailing = dims_product(fresh_dims, axis + 1, fresh_dims.size());
        if (trailing != arena.trailing_elems()) {
            fail(ErrorKind::ShapeMismatch, "KVAppend trailing extent does not match the arena");
        }
        const std::int64_t position = *i64_data(index(node.inputs[2]));
        arena.append(f32_data(fresh), tokens, position);
        return;
    }
    fail(ErrorKind::UnknownOperator, "no kernel for operator '" + op + "'");
}

void Session::run() {
    if (!bound_) fail(ErrorKind::UnboundSymbol, "run() before bind()");
    for (int idx : plan_.shape_program) execute_node(idx);
    counters_.sync_points += plan_.sync_points;
    for (int idx : plan_.tensor_program) {
        execute_node(idx);
        if (options_.fp16_storage &&
            plan_.classes[static_cast<std::size_t>(idx)] == NodeClass::TensorComputing) {
            const NodeSpec& node = plan_.graph.nodes[static_cast<std::size_t>(idx)];
            for (const auto& out : node.outputs) {
                const int t = tensor_index_.at(out);
                if (tensor_info_[static_cast<std::size_t>(t)]->dtype != DType::F32) continue;
                float* data = f32_data(t);
                const std::int64_t n = elem_count(t);
                for (std::int64_t i = 0; i < n; ++i) data[i] = f16_to_f32(f32_to_f16(data[i]));
            }
        }
    }
}

DecodeResult decode_loop(Session& session, const std::vector<std::int64_t>& prompt,
                         int max_new_tokens, int padding, bool measure_time) {
    if (prompt.empty()) fail(ErrorKind::ConfigError, "prompt must be non-empty");
    if (max_new_tokens < 1) fail(ErrorKind::ConfigError, "max_new_tokens must be >= 1");
    if (padding < 1) padding = 1;

    const Graph& g = session.plan().graph;
    std::set<std::string> cache_inputs;
    for (const auto& pair : g.meta.kv_pairs) cache_inputs.insert(pair.past);
    std::string ids_name, mask_name;
    for (const auto& t : g.tensors) {
        if (t.kind != TensorKind::GraphInput || cache_inputs.count(t.name)) continue;
        if (t.dtype == DType::I64 && t.shape.size() == 2) ids_name = t.name;
        if (t.dtype == DType::F32 && t.shape.size() == 4) mask_name = t.name;
    }
    const std::string pos_name = g.meta.position_ids;
    if (ids_name.empty() || mask_name.empty() || pos_name.empty()) {
        fail(ErrorKind::MetadataMissing, "decoder graph inputs not recognized");
    }

    // Copy-based caching: past input and concatenated output per kv pair.
    struct HostCache {
        std::string past;
        std::string present;
        std::vector<float> data;
    };
    std::vector<HostCache> host_caches;
    if (session.plan().arenas.empty()) {
        for (const auto& pair : g.meta.kv_pairs) {
            for (const auto& node : g.nodes) {
                if (node.op == "Concat" && node.inputs.size() == 2 && node.inputs[0] == pair.past &&
                    node.inputs[1] == pair.fresh) {
                    host_caches.push_back({pair.past, node.outputs[0], {}});
                }
            }
        }
    }

    const std::int64_t max_total = session.plan().max_bindings.count("sumN")
                                       ? session.plan().max_bindings.at("sumN")
                                       : std::numeric_limits<std::int64_t>::max();
    const auto prompt_len = static_cast<std::int64_t>(prompt.size());
    const std::int64_t final_total = prompt_len + max_new_tokens - 1;
    auto padded = [&](std::int64_t len) {
        return padding <= 1 ? len : (len + padding - 1) / padding * padding;
    };
    if (padded(final_total) > max_total || prompt_len > max_total) {
        fail(ErrorKind::CapacityExceeded,
             "sequence of " + std::to_string(final_total) + " tokens exceeds max length " +
                 std::to_string(max_total));
    }

    constexpr float kMaskedOut = std::numeric_limits<float>::lowest();
    session.reset();

    DecodeResult result;
    result.prompt = prompt;

    const auto t0 = std::chrono::steady_clock::now();

    // Prefill: the whole prompt in one pass, unpadded.
    session.bind({{"N", prompt_len}, {"sumN", prompt_len}});
    {
        auto ids = session.input_i64(ids_name);
        std::copy(prompt.begin(), prompt.end(), ids.begin());
        auto pos = session.input_i64(pos_name);
        for (std::int64_t i = 0; i < prompt_len; ++i) pos[static_cast<std::size_t>(i)] = i;
        auto mask = session.input_f32(mask_name);
        for (std::int64_t r = 0; r < prompt_len; ++r) {
            for (std::int64_t c = 0; c < prompt_len; ++c) {
                mask[static_cast<std::size_t>(r * prompt_len + c)] = c <= r ? 0.0f : kMaskedOut;
            }
        }
    }
    session.run();
    result.steps = 1;

    auto argmax_last_row = [&]() {
        const auto dims = session.tensor_dims("logits");
        const std::int64_t vocab = dims.back();
        const auto logits = session.tensor_f32("logits");
        const std::size_t row = logits.size() - static_cast<std::size_t>(vocab);
        std::int64_t best = 0;
        float best_value = logits[row];
        for (std::int64_t v = 1; v < vocab; ++v) {
            const float x = logits[row + static_cast<std::size_t>(v)];
            if (x > best_value) {
                best_value = x;
                best = v;
            }
        }
        return best;
    };
    result.generated.push_back(argmax_last_row());

    auto save_host_caches = [&] {
        for (auto& cache : host_caches) {
            const auto present = session.tensor_f32(cache.present);
            cache.data.assign(present.begin(), present.end());
        }
    };
    save_host_caches();

    const auto t1 = std::chrono::steady_clock::now();
    result.warmup_counters = session.counters();

    for (int t = 1; t < max_new_tokens; ++t) {
        const std::int64_t total = prompt_len + t;  // includes the token fed now
        const std::int64_t padded_total = padded(total);
        session.bind({{"N", 1}, {"sumN", padded_total}});
        session.input_i64(ids_name)[0] = result.generated.back();
        session.input_i64(pos_name)[0] = total - 1;
        auto mask = session.input_f32(mask_name);
        for (std::int64_t c = 0; c < padded_total; ++c) {
            mask[static_cast<std::size_t>(c)] = c < total ? 0.0f : kMaskedOut;
        }
        for (auto& cache : host_caches) {
            auto past = session.input_f32(cache.past);
            std::copy(cache.data.begin(), cache.data.end(), past.begin());
        }
        session.run();
        result.steps += 1;
        result.generated.push_back(argmax_last_row());
        save_host_caches();
        if (t == 1) result.warmup_counters = session.counters();
    }

    const auto t2 = std::chrono::steady_clock::now();
    if (measure_time) {
        result.stage_ms = {std::chrono::duration<double, std::milli>(t1 - t0).count(),
                           std::chrono::duration<double, std::milli>(t2 - t1).count()};
        if (max_new_tokens > 1) {
            result.tokens_per_step_ms = result.stage_ms[1] / (max_new_tokens - 1);
        }
    }
    result.counters = session.counters();
    return result;
}

}  // namespace lg
