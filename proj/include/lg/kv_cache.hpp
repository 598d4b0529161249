#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lg/graph.hpp"

namespace lg {

// The cache layout rule: the variable sequence dimension must occupy the
// first dimension that is not 1. Returns the fixing permutation otherwise.
struct LayoutCheck {
    bool valid = false;
    std::vector<std::int64_t> perm;  // set when a transpose is needed
};

LayoutCheck validate_layout(const Shape& shape, std::size_t seq_dim_index);

// Preallocated per-layer KV storage. The sequence dimension is dims[seq_dim];
// everything before it is 1, so offset views over tokens are contiguous.
class CacheArena {
public:
    CacheArena(std::string name, DType dtype, std::vector<std::int64_t> dims, std::size_t seq_dim);

    const std::string& name() const { return name_; }
    DType dtype() const { return dtype_; }
    std::int64_t max_seq() const { return dims_[seq_dim_]; }
    std::int64_t cur_len() const { return cur_len_; }
    std::size_t seq_dim() const { return seq_dim_; }
    std::int64_t trailing_elems() const { return trailing_; }
    const std::vector<std::int64_t>& dims() const { return dims_; }

    float* data() { return storage_.data(); }
    const float* data() const { return storage_.data(); }

    void reset() { cur_len_ = 0; }

    // Zero-copy window over tokens [0, cur_len).
    struct View {
        float* data;
        std::int64_t offset_elems;
        std::int64_t tokens;
        std::int64_t trailing;
        std::int64_t elems() const { return tokens * trailing; }
    };

    View view_past();
    // Window over [cur_len, cur_len + new_len); throws CapacityExceeded.
    View view_new(std::int64_t new_len);

    // In-place concat: writes `tokens` new rows at `position`, which must
    // equal cur_len, then advances cur_len.
    void append(const float* values, std::int64_t tokens, std::int64_t position);

private:
    std::string name_;
    DType dtype_;
    std::vector<std::int64_t> dims_;
    std::size_t seq_dim_;
    std::int64_t trailing_;
    std::int64_t cur_len_ = 0;
    std::vector<float> storage_;
};

// Compile-time description of one rewritten cache: which graph tensors bind
// to the arena and along which axis appends happen.
struct ArenaBinding {
    std::string arena;
    std::string past;   // graph input, becomes an arena view
    std::string fresh;  // newly generated slice written by KVAppend
    std::string full;   // KVAppend output, the whole-arena view
    int axis = 0;
    bool transposed = false;  // layout fallback inserted transposes
};

struct KvRewriteResult {
    Graph graph;
    std::vector<ArenaBinding> arenas;
};

// Replaces each registered Concat(past, new) with the in-place KVAppend
// operator, makes the new slice the graph output instead of the concatenated
// cache, and inserts transposes when the declared layout violates the rule.
// Graphs without kv metadata pass through unchanged.
KvRewriteResult rewrite_kv_graph(const Graph& graph);

}  // namespace lg
