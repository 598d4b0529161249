#pragma once

#include <cstdint>
#include <string>

#include "lg/graph.hpp"

namespace lg {

enum class KvLayout { SeqFirst, LlamaStyle };

// Desk-scale decoder configuration. hidden must equal heads * head_dim; the
// MLP width is fixed at 2 * hidden.
struct ToyDecoderConfig {
    int layers = 2;
    int hidden = 64;
    int heads = 4;
    int head_dim = 16;
    int vocab = 97;
    std::uint64_t seed = 7;
    std::int64_t max_seq = 256;
    KvLayout kv_layout = KvLayout::SeqFirst;
};

struct ToyDecoder {
    Graph graph;
    WeightStore weights;
};

// Emits a full decoder: embedding gather, unfused rms-norm subgraphs, QKV
// projections with shape-subgraph reshape targets, mask-additive softmax
// attention against concatenated KV caches, gated silu MLP, and the logits
// projection. Weights are deterministic in the seed.
ToyDecoder build_toy_decoder(const ToyDecoderConfig& config);

}  // namespace lg
