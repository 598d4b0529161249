#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "lg/kv_cache.hpp"
#include "lg/mem_plan.hpp"
#include "lg/quant_fp4.hpp"
#include "lg/shape_infer.hpp"

namespace lg {

struct SessionOptions {
    // Preallocate all blocks at the max bindings (the optimized path). When
    // false, buffers are grown at every bind and counted as allocations.
    bool preallocate = true;
    // Resolve shapes by re-running integer propagation per bind instead of
    // evaluating the stored symbolic expressions (the oracle path).
    bool naive_resolution = false;
    // Round F32 activations through binary16 after every operator.
    bool fp16_storage = false;
};

struct Counters {
    std::int64_t shape_updates = 0;
    std::int64_t shape_ops_executed = 0;
    std::int64_t sync_points = 0;
    std::int64_t allocations = 0;
    std::int64_t kv_copy_bytes = 0;
    std::int64_t matmul_prefill = 0;
    std::int64_t matmul_decode = 0;
    std::int64_t scratch_peak_bytes = 0;
};

// One executable instance of a compiled plan: owns activation storage, KV
// arenas and counters. Weights and the plan are shared immutable state.
class Session {
public:
    Session(const CompiledPlan& plan, const WeightStore& weights, SessionOptions options = {});

    // Use the quantized form of a matmul weight instead of its F32 payload.
    void register_quantized(const std::string& weight_name, QuantizedWeight qw);

    void bind(const std::map<std::string, std::int64_t>& bindings);
    void run();
    void reset();

    std::span<float> input_f32(const std::string& name);
    std::span<std::int64_t> input_i64(const std::string& name);
    std::span<const float> tensor_f32(const std::string& name);
    std::span<const std::int64_t> tensor_i64(const std::string& name);
    const std::vector<std::int64_t>& tensor_dims(const std::string& name) const;

    const CompiledPlan& plan() const { return plan_; }
    const Counters& counters() const { return counters_; }
    const CacheArena& arena(std::size_t index) const { return *arenas_[index]; }
    std::size_t arena_count() const { return arenas_.size(); }

private:
    // Where a tensor's bytes live at runtime.
    struct Slot {
        enum class Kind { Weight, Block, Arena, Local, Folded };
        Kind kind = Kind::Folded;
        int block = -1;
        int arena = -1;
        const WeightStore::Entry* weight = nullptr;
    };

    float* f32_data(int tensor);
    std::int64_t* i64_data(int tensor);
    void* raw_data(int tensor);
    std::int64_t elem_count(int tensor) const;

    void execute_node(int node_index);

    const CompiledPlan& plan_;
    const WeightStore& weights_;
    SessionOptions options_;

    std::map<std::string, int> tensor_index_;
    std::vector<const TensorInfo*> tensor_info_;
    std::vector<Slot> slots_;
    std::vector<std::vector<std::int64_t>> resolved_;  // dims per tensor
    std::vector<std::int64_t> elems_;

    ArenaSet storage_;
    std::vector<std::vector<std::uint8_t>> locals_;  // per-bind buffers (naive mode)
    std::vector<std::unique_ptr<CacheArena>> arenas_;
    std::map<std::string, QuantizedWeight> quantized_;
    std::set<int> kv_concat_nodes_;  // Concat nodes that copy a registered cache

    std::map<std::string, std::int64_t> current_bindings_;
    std::map<std::string, std::int64_t> previous_bindings_;
    bool bound_ = false;
    Counters counters_;
};

struct DecodeResult {
    std::vector<std::int64_t> prompt;
    std::vector<std::int64_t> generated;
    std::int64_t steps = 0;  // model iterations including the prefill
    Counters counters;
    Counters warmup_counters;  // snapshot after prefill + first decode step
    std::vector<double> stage_ms;  // [prefill, decode-total] when timing is on
    double tokens_per_step_ms = 0.0;
};

// Greedy argmax decoding with attention-mask padding of the total length to
// multiples of `padding`. padding = 1 disables padding.
DecodeResult decode_loop(Session& session, const std::vector<std::int64_t>& prompt,
                         int max_new_tokens, int padding, bool measure_time = false);

}  // namespace lg
