#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lg/graph.hpp"
#include "lg/symexpr.hpp"

namespace lg {

// Bytes occupied by a tensor of this dtype and shape, as a polynomial over
// the shape symbols. 4-bit dtypes pack two elements per byte and require an
// even literal innermost dimension.
SymExpr size_expr(DType dtype, const Shape& shape);

// One activation to place: definition / last-use indices in tensor-program
// order. Eternal tensors (graph outputs, KV arenas) are never reused.
// alias_of marks metadata-only ops (Reshape/Squeeze/Unsqueeze outputs) that
// share their input's storage.
struct PlanItem {
    std::string name;
    SymExpr size_bytes;
    int def_index = 0;
    int last_use_index = 0;
    bool eternal = false;
    std::string alias_of;
};

struct MemoryBlock {
    int id = 0;
    SymExpr size_bytes;
    std::int64_t max_bytes = 0;
};

struct MemoryPlan {
    std::vector<MemoryBlock> blocks;
    std::map<std::string, int> assignment;  // root tensor -> block id
    std::map<std::string, std::string> aliases;
    std::int64_t peak_bytes = 0;
    std::int64_t naive_bytes = 0;

    int block_of(const std::string& tensor) const;
};

// Sound upper bound of a size polynomial over the [1, max] binding box.
std::int64_t max_size_bound(const SymExpr& size,
                            const std::map<std::string, std::int64_t>& max_bindings);

// Greedy sweep in definition order; best provable fit, reuse only on Equal or
// ProvablyGE comparisons, ties by lowest block id.
MemoryPlan plan_memory(const std::vector<PlanItem>& items,
                       const std::map<std::string, std::int64_t>& max_bindings);

// Preallocated backing storage for a plan: one contiguous region per block,
// sized at the max bindings, allocated exactly once.
class ArenaSet {
public:
    ArenaSet() = default;
    explicit ArenaSet(const MemoryPlan& plan);

    std::uint8_t* block_data(int block_id);
    std::size_t block_size(int block_id) const;

    // Extra scratch region outside the plan (kernel workspace).
    int add_scratch(std::size_t bytes);

    std::int64_t allocation_count() const { return allocations_; }

private:
    std::vector<std::vector<std::uint8_t>> storage_;
    std::int64_t allocations_ = 0;
};

}  // namespace lg
