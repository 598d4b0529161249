#include "lg/kv_cache.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>

namespace lg {

LayoutCheck validate_layout(const Shape& shape, std::size_t seq_dim_index) {
    if (seq_dim_index >= shape.size()) {
        fail(ErrorKind::RankMismatch, "sequence dim index out of range");
    }
    auto is_literal_one = [](const SymExpr& d) {
        return d.is_constant() && d.constant_value() == 1;
    };
    std::size_t first_non_one = 0;
    while (first_non_one < seq_dim_index && is_literal_one(shape[first_non_one])) ++first_non_one;
    if (first_non_one == seq_dim_index) return {true, {}};

    // Move the sequence dim to the first non-1 slot, shifting the others right.
    LayoutCheck check;
    check.valid = false;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i < first_non_one || i > seq_dim_index) {
            check.perm.push_back(static_cast<std::int64_t>(i));
        } else if (i == first_non_one) {
            check.perm.push_back(static_cast<std::int64_t>(seq_dim_index));
        } else {
            check.perm.push_back(static_cast<std::int64_t>(i - 1));
        }
    }
    return check;
}

CacheArena::CacheArena(std::string name, DType dtype, std::vector<std::int64_t> dims,
                       std::size_t seq_dim)
    : name_(std::move(name)), dtype_(dtype), dims_(std::move(dims)), seq_dim_(seq_dim) {
    if (seq_dim_ >= dims_.size()) fail(ErrorKind::RankMismatch, "arena sequence dim out of range");
    for (std::size_t i = 0; i < seq_dim_; ++i) {
        if (dims_[i] != 1) {
            fail(ErrorKind::RankMismatch,
                 "arena layout violates the rule: dim before the sequence dim is not 1");
        }
    }
    trailing_ = std::accumulate(dims_.begin() + static_cast<std::ptrdiff_t>(seq_dim_) + 1,
                                dims_.end(), std::int64_t(1), std::multiplies<>());
    storage_.assign(static_cast<std::size_t>(dims_[seq_dim_] * trailing_), 0.0f);
}

CacheArena::View CacheArena::view_past() {
    return {storage_.data(), 0, cur_len_, trailing_};
}

CacheArena::View CacheArena::view_new(std::int64_t new_len) {
    if (cur_len_ + new_len > max_seq()) {
        fail(ErrorKind::CapacityExceeded, "arena '" + name_ + "' holds " + std::to_string(cur_len_) +
                                              " of " + std::to_string(max_seq()) +
                                              " tokens; cannot add " + std::to_string(new_len));
    }
    return {storage_.data() + cur_len_ * trailing_, cur_len_ * trailing_, new_len, trailing_};
}

void CacheArena::append(const float* values, std::int64_t tokens, std::int64_t position) {
    if (position != cur_len_) {
        fail(ErrorKind::PositionMismatch, "arena '" + name_ + "' append at " +
                                              std::to_string(position) + ", expected " +
                                              std::to_string(cur_len_));
    }
    const View target = view_new(tokens);
    std::memcpy(target.data, values, static_cast<std::size_t>(target.elems()) * sizeof(float));
    cur_len_ += tokens;
}

namespace {

Shape permute_shape(const Shape& shape, const std::vector<std::int64_t>& perm) {
    Shape out(shape.size());
    for (std::size_t i = 0; i < perm.size(); ++i) out[i] = shape[static_cast<std::size_t>(perm[i])];
    return out;
}

std::vector<std::int64_t> inverse_perm(const std::vector<std::int64_t>& perm) {
    std::vector<std::int64_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[static_cast<std::size_t>(perm[i])] = static_cast<std::int64_t>(i);
    return inv;
}

}  // namespace

KvRewriteResult rewrite_kv_graph(const Graph& graph) {
    KvRewriteResult result;
    if (graph.meta.kv_pairs.empty()) {
        result.graph = graph;
        return result;
    }
    if (graph.meta.position_ids.empty()) {
        fail(ErrorKind::MetadataMissing, "kv rewriting needs a position_ids tensor");
    }

    Graph g = graph;
    int next_id = 0;
    for (const auto& node : g.nodes) next_id = std::max(next_id, node.id + 1);

    for (const auto& pair : g.meta.kv_pairs) {
        int concat_index = -1;
        for (std::size_t i = 0; i < g.nodes.size(); ++i) {
            const NodeSpec& node = g.nodes[i];
            if (node.op == "Concat" && node.inputs.size() == 2 && node.inputs[0] == pair.past &&
                node.inputs[1] == pair.fresh) {
                concat_index = static_cast<int>(i);
                break;
            }
        }
        if (concat_index < 0) {
            fail(ErrorKind::MetadataMissing,
                 "no Concat(" + pair.past + ", " + pair.fresh + ") node for kv pair");
        }
        NodeSpec concat = g.nodes[static_cast<std::size_t>(concat_index)];
        TensorInfo& past_info = g.tensor(pair.past);
        const std::string out_name = concat.outputs[0];
        std::int64_t axis = concat.attr_int("axis");
        if (axis < 0) axis += static_cast<std::int64_t>(past_info.shape.size());

        const LayoutCheck check = validate_layout(past_info.shape, static_cast<std::size_t>(axis));

        ArenaBinding binding;
        binding.arena = pair.arena;
        binding.past = pair.past;

        if (check.valid) {
            NodeSpec append;
            append.id = concat.id;
            append.op = "KVAppend";
            append.inputs = {pair.past, pair.fresh, g.meta.position_ids};
            append.outputs = {out_name};
            append.attrs["axis"] = axis;
            g.nodes[static_cast<std::size_t>(concat_index)] = std::move(append);
            binding.fresh = pair.fresh;
            binding.full = out_name;
            binding.axis = static_cast<int>(axis);
        } else {
            // Relayout the cache path: the past input itself moves to the
            // valid layout, the fresh slice is transposed in, and the full
            // arena view is transposed back for the original consumers.
            const auto& perm = check.perm;
            const auto inv = inverse_perm(perm);
            const std::int64_t new_axis = inv[static_cast<std::size_t>(axis)];

            const std::string fresh_t = pair.fresh + "__arena";
            const std::string full_t = out_name + "__arena";
            const TensorInfo& fresh_info = g.tensor(pair.fresh);
            const TensorInfo& out_info = g.tensor(out_name);

            TensorInfo fresh_t_info{fresh_t, fresh_info.dtype, permute_shape(fresh_info.shape, perm),
                                    TensorKind::Activation};
            TensorInfo full_t_info{full_t, out_info.dtype, permute_shape(out_info.shape, perm),
                                   TensorKind::Activation};
            past_info.shape = permute_shape(past_info.shape, perm);
            g.tensors.push_back(std::move(fresh_t_info));
            g.tensors.push_back(std::move(full_t_info));

            NodeSpec transpose_in;
            transpose_in.id = next_id++;
            transpose_in.op = "Transpose";
            transpose_in.inputs = {pair.fresh};
            transpose_in.outputs = {fresh_t};
            transpose_in.attrs["perm"] = perm;

            NodeSpec append;
            append.id = concat.id;
            append.op = "KVAppend";
            append.inputs = {pair.past, fresh_t, g.meta.position_ids};
            append.outputs = {full_t};
            append.attrs["axis"] = new_axis;

            NodeSpec transpose_out;
            transpose_out.id = next_id++;
            transpose_out.op = "Transpose";
            transpose_out.inputs = {full_t};
            transpose_out.outputs = {out_name};
            transpose_out.attrs["perm"] = inv;

            auto at = g.nodes.begin() + concat_index;
            *at = std::move(append);
            at = g.nodes.insert(at, std::move(transpose_in));
            g.nodes.insert(at + 2, std::move(transpose_out));

            binding.fresh = fresh_t;
            binding.full = full_t;
            binding.axis = static_cast<int>(new_axis);
            binding.transposed = true;
        }

        // The graph now reports only the newly generated slice.
        TensorInfo& out_info = g.tensor(out_name);
        if (out_info.kind == TensorKind::GraphOutput) out_info.kind = TensorKind::Activation;
        TensorInfo& fresh_info = g.tensor(pair.fresh);
        if (fresh_info.kind == TensorKind::Activation) fresh_info.kind = TensorKind::GraphOutput;

        result.arenas.push_back(std::move(binding));
    }
    result.graph = std::move(g);
    return result;
}

}  // namespace lg
