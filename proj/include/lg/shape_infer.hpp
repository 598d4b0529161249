#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lg/graph.hpp"
#include "lg/kv_cache.hpp"
#include "lg/mem_plan.hpp"
#include "lg/symexpr.hpp"

namespace lg {

enum class NodeClass : std::uint8_t { ShapeComputing, TensorComputing };

// Symbolic derivation result: a shape for every tensor, plus the symbolically
// executed values of shape-value tensors (what the I64 shape subgraphs would
// compute).
struct DerivedShapes {
    std::map<std::string, Shape> shapes;
    std::map<std::string, std::vector<SymExpr>> values;

    const Shape& shape(const std::string& name) const;
    bool has_value(const std::string& name) const { return values.count(name) != 0; }
    const std::vector<SymExpr>& value(const std::string& name) const;
};

// Propagates symbolic shapes through the whole graph, executing shape
// subgraphs on symbolic values as it goes. `weights` supplies constant I64
// tensors (gather indices, reshape targets).
DerivedShapes derive_shapes(const Graph& graph, const WeightStore& weights);

// A node is ShapeComputing iff it is a Shape node or every input is a weight
// constant or the output of a ShapeComputing node.
std::vector<NodeClass> classify(const Graph& graph);

// Rewrites the rms-norm / layer-norm subgraphs into their fused operators and
// collapses single-consumer elementwise chains into FusedElementwise nodes.
// Pure graphs pass through unchanged; the pass is idempotent.
Graph fuse(const Graph& graph, const WeightStore& weights, int* fused_nodes = nullptr);

struct CompileOptions {
    bool fuse = true;
    bool fold_shape_ops = true;
    bool kv_arenas = true;
    bool reuse_memory = true;
    // Overrides for symbols without a declared max.
    std::map<std::string, std::int64_t> max_bindings;
};

// Classified + scheduled graph with baked symbolic attrs and a memory plan.
struct CompiledPlan {
    Graph graph;  // after fusion and KV rewriting
    DerivedShapes derived;
    std::vector<NodeClass> classes;

    std::vector<int> shape_program;   // host phase: retained shape nodes
    std::vector<int> tensor_program;  // device phase, topological order
    int shape_ops_retained = 0;
    int sync_points = 1;
    int fused_nodes = 0;

    std::map<std::string, std::int64_t> max_bindings;
    MemoryPlan memory;
    std::vector<ArenaBinding> arenas;
    std::map<int, int> kv_append_arena;  // node index -> arena index

    CompileOptions options;
};

CompiledPlan compile(const Graph& graph, const WeightStore& weights, const CompileOptions& options);

// Concrete shapes for one symbol binding. No per-node re-derivation happens
// here; every dimension is a single polynomial evaluation.
struct ResolvedShapes {
    std::map<std::string, std::vector<std::int64_t>> dims;
};

ResolvedShapes bind_symbols(const CompiledPlan& plan, const std::map<std::string, std::int64_t>& bindings);

// Executes shape-computing nodes on concrete I64 values (the naive
// topological interpreter). Used for the host phase, the no-folding oracle
// path, and the folding soundness tests.
std::map<std::string, std::vector<std::int64_t>> run_shape_nodes(
    const Graph& graph, const std::vector<int>& node_indices, const WeightStore& weights,
    const std::map<std::string, std::vector<std::int64_t>>& resolved_dims,
    std::map<std::string, std::vector<std::int64_t>> seed_values = {});

// Independent integer-only shape propagation used as the oracle for the
// derivation/evaluation commutation property and by the naive pipeline.
std::map<std::string, std::vector<std::int64_t>> concrete_shapes(
    const Graph& graph, const WeightStore& weights,
    const std::map<std::string, std::int64_t>& bindings);

}  // namespace lg
