#include "lg/mem_plan.hpp"

#include <algorithm>
#include <limits>

namespace lg {

SymExpr size_expr(DType dtype, const Shape& shape) {
    SymExpr elems = SymExpr::constant(1);
    for (const auto& dim : shape) elems = elems * dim;
    if (dtype == DType::U4E0M4 || dtype == DType::U4Int4) {
        if (shape.empty()) fail(ErrorKind::OddPackingError, "4-bit tensor needs a packing dim");
        const SymExpr& inner = shape.back();
        if (!inner.is_constant() || inner.constant_value() % 2 != 0) {
            fail(ErrorKind::OddPackingError,
                 "4-bit tensor needs an even literal innermost dim, got " + inner.to_string());
        }
        auto half = elems.div_exact(SymExpr::constant(2));
        return *half;
    }
    return elems * SymExpr::constant(static_cast<std::int64_t>(dtype_size(dtype)));
}

// Upper bound of a size polynomial over the binding box [1, max] per symbol:
// positive terms peak at the maxima, negative terms at 1. Sound for any sign
// mix (each term is bounded independently), exact for the all-positive sizes
// that dominate in practice.
std::int64_t max_size_bound(const SymExpr& size,
                            const std::map<std::string, std::int64_t>& max_bindings) {
    std::int64_t total = 0;
    for (const auto& [mono, coeff] : size.terms()) {
        std::int64_t term = coeff;
        if (coeff > 0) {
            for (const auto& [name, power] : mono.factors()) {
                auto it = max_bindings.find(name);
                if (it == max_bindings.end()) {
                    fail(ErrorKind::UnboundSymbol, "no max binding for symbol '" + name + "'");
                }
                for (int p = 0; p < power; ++p) term *= it->second;
            }
        }
        total += term;
    }
    return std::max<std::int64_t>(total, 0);
}

int MemoryPlan::block_of(const std::string& tensor) const {
    std::string root = tensor;
    auto alias = aliases.find(root);
    while (alias != aliases.end()) {
        root = alias->second;
        alias = aliases.find(root);
    }
    auto it = assignment.find(root);
    if (it == assignment.end()) fail(ErrorKind::SchemaError, "tensor '" + tensor + "' has no block");
    return it->second;
}

MemoryPlan plan_memory(const std::vector<PlanItem>& items,
                       const std::map<std::string, std::int64_t>& max_bindings) {
    MemoryPlan plan;
    struct BlockState {
        std::int64_t busy_until = -1;  // tensor-program index; INT64_MAX = eternal
    };
    std::vector<BlockState> state;
    std::map<std::string, const PlanItem*> by_name;
    for (const auto& item : items) by_name[item.name] = &item;

    constexpr std::int64_t kForever = std::numeric_limits<std::int64_t>::max();

    for (const auto& item : items) {
        const std::int64_t max_bytes = max_size_bound(item.size_bytes, max_bindings);
        plan.naive_bytes += max_bytes;

        if (!item.alias_of.empty()) {
            plan.aliases[item.name] = item.alias_of;
            // The alias extends the root block's lifetime.
            std::string root = item.alias_of;
            while (plan.aliases.count(root)) root = plan.aliases[root];
            auto assigned = plan.assignment.find(root);
            if (assigned != plan.assignment.end()) {
                auto& block = state[static_cast<std::size_t>(assigned->second)];
                const std::int64_t until = item.eternal ? kForever : item.last_use_index;
                block.busy_until = std::max(block.busy_until, until);
            }
            continue;
        }

        int chosen = -1;
        for (std::size_t b = 0; b < plan.blocks.size(); ++b) {
            if (state[b].busy_until >= item.def_index) continue;  // overlapping lifetime
            const CompareResult cmp = compare(plan.blocks[b].size_bytes, item.size_bytes);
            if (cmp != CompareResult::Equal && cmp != CompareResult::ProvablyGE) continue;
            // Best fit: smallest concrete footprint at the max bindings,
            // ties by lowest id.
            if (chosen < 0 ||
                plan.blocks[b].max_bytes < plan.blocks[static_cast<std::size_t>(chosen)].max_bytes) {
                chosen = static_cast<int>(b);
            }
        }
        if (chosen < 0) {
            MemoryBlock block;
            block.id = static_cast<int>(plan.blocks.size());
            block.size_bytes = item.size_bytes;
            block.max_bytes = max_bytes;
            plan.blocks.push_back(block);
            state.push_back({});
            chosen = block.id;
        }
        plan.assignment[item.name] = chosen;
        state[static_cast<std::size_t>(chosen)].busy_until =
            item.eternal ? kForever : item.last_use_index;
    }
    for (const auto& block : plan.blocks) plan.peak_bytes += block.max_bytes;
    return plan;
}

ArenaSet::ArenaSet(const MemoryPlan& plan) {
    storage_.reserve(plan.blocks.size());
    for (const auto& block : plan.blocks) {
        storage_.emplace_back(static_cast<std::size_t>(block.max_bytes));
        ++allocations_;
    }
}

std::uint8_t* ArenaSet::block_data(int block_id) {
    return storage_[static_cast<std::size_t>(block_id)].data();
}

std::size_t ArenaSet::block_size(int block_id) const {
    return storage_[static_cast<std::size_t>(block_id)].size();
}

int ArenaSet::add_scratch(std::size_t bytes) {
    storage_.emplace_back(bytes);
    ++allocations_;
    return static_cast<int>(storage_.size() - 1);
}

}  // namespace lg
