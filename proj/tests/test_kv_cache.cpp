#include <doctest.h>

#include <random>

#include "fixtures.hpp"
#include "lg/kv_cache.hpp"
#include "lg/toy_model.hpp"

using lg::CacheArena;
using lg::Error;
using lg::ErrorKind;
using lgtest::shape_of;

TEST_CASE("layout rule: the sequence dim must be the first non-1 dim") {
    CHECK(lg::validate_layout(shape_of({"seq_len", "1", "2", "128"}), 0).valid);
    CHECK(lg::validate_layout(shape_of({"1", "1", "seq_len", "64"}), 2).valid);

    const auto llama = lg::validate_layout(shape_of({"1", "32", "seq_len", "128"}), 2);
    CHECK_FALSE(llama.valid);
    CHECK(llama.perm == std::vector<std::int64_t>{0, 2, 1, 3});
    // Applying the permutation yields the fixed layout.
    const lg::Shape fixed = [&] {
        const lg::Shape src = shape_of({"1", "32", "seq_len", "128"});
        lg::Shape out;
        for (auto p : llama.perm) out.push_back(src[static_cast<std::size_t>(p)]);
        return out;
    }();
    CHECK(fixed == shape_of({"1", "seq_len", "32", "128"}));
}

TEST_CASE("sub-tensor views cover past and new token ranges") {
    CacheArena arena("kv", lg::DType::F32, {8, 1, 2, 4}, 0);
    CHECK(arena.trailing_elems() == 8);
    CHECK(arena.view_past().tokens == 0);  // empty view on first prefill

    std::vector<float> first(3 * 8);
    for (std::size_t i = 0; i < first.size(); ++i) first[i] = static_cast<float>(i);
    arena.append(first.data(), 3, 0);
    CHECK(arena.cur_len() == 3);

    const auto fresh = arena.view_new(2);
    CHECK(fresh.offset_elems == 3 * 8);
    CHECK(fresh.tokens == 2);

    try {
        (void)CacheArena("kv", lg::DType::F32, {8, 1, 2, 4}, 0).view_new(9);
        FAIL("expected CapacityExceeded");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::CapacityExceeded);
    }
}

TEST_CASE("append equals the copy-based concat oracle bitwise") {
    std::mt19937_64 gen(4);
    auto noise = [&] {
        return static_cast<float>((gen() >> 11) * 0x1p-53 * 2.0 - 1.0);
    };
    CacheArena arena("kv", lg::DType::F32, {16, 1, 2, 4}, 0);
    std::vector<float> oracle;  // naive concat buffer
    std::int64_t written = 0;
    for (std::int64_t tokens : {3, 1, 5, 2}) {
        std::vector<float> piece(static_cast<std::size_t>(tokens * arena.trailing_elems()));
        for (auto& v : piece) v = noise();
        oracle.insert(oracle.end(), piece.begin(), piece.end());
        arena.append(piece.data(), tokens, written);
        written += tokens;
    }
    CHECK(written == arena.cur_len());
    const auto past = arena.view_past();
    REQUIRE(past.elems() == static_cast<std::int64_t>(oracle.size()));
    for (std::size_t i = 0; i < oracle.size(); ++i) {
        CHECK(past.data[i] == oracle[i]);
    }

    std::vector<float> piece(static_cast<std::size_t>(arena.trailing_elems()));
    try {
        arena.append(piece.data(), 1, written + 1);
        FAIL("expected PositionMismatch");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::PositionMismatch);
    }
    try {
        arena.append(piece.data(), 16, written);
        FAIL("expected CapacityExceeded");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::CapacityExceeded);
    }
}

TEST_CASE("graphs without kv metadata pass through the rewrite unchanged") {
    lgtest::GraphBuilder b;
    b.input("x", lg::DType::F32, {"4"});
    b.node("Sqrt", {"x"}, "y");
    b.mark_output("y");
    const auto rewritten = lg::rewrite_kv_graph(b.g);
    CHECK(rewritten.arenas.empty());
    CHECK(lg::save_graph_text(rewritten.graph) == lg::save_graph_text(b.g));
}

TEST_CASE("kv rewrite swaps concat for the in-place append operator") {
    const auto toy = lg::build_toy_decoder({});
    const auto rewritten = lg::rewrite_kv_graph(toy.graph);
    CHECK(rewritten.arenas.size() == 4);
    int appends = 0, concats = 0;
    for (const auto& node : rewritten.graph.nodes) {
        if (node.op == "KVAppend") {
            ++appends;
            CHECK(node.inputs.size() == 3);
            CHECK(node.inputs[2] == "position_ids");
        }
        if (node.op == "Concat" && node.inputs.size() == 2 &&
            node.inputs[0].rfind("past_", 0) == 0) {
            ++concats;
        }
    }
    CHECK(appends == 4);
    CHECK(concats == 0);
    // Cache outputs are replaced by the new slices.
    CHECK(rewritten.graph.tensor("present_k_0").kind == lg::TensorKind::Activation);
    CHECK(rewritten.graph.tensor("l0_k4").kind == lg::TensorKind::GraphOutput);
    for (const auto& binding : rewritten.arenas) {
        CHECK_FALSE(binding.transposed);
        CHECK(binding.axis == 0);
    }
    lg::validate_graph(rewritten.graph);
}

TEST_CASE("invalid layouts get transpose fallbacks around the arena") {
    lg::ToyDecoderConfig cfg;
    cfg.kv_layout = lg::KvLayout::LlamaStyle;
    const auto toy = lg::build_toy_decoder(cfg);
    CHECK(toy.graph.tensor("past_k_0").shape ==
          shape_of({"1", "4", "sumN - N", "16"}));  // llama-like ordering

    const auto rewritten = lg::rewrite_kv_graph(toy.graph);
    CHECK(rewritten.arenas.size() == 4);
    for (const auto& binding : rewritten.arenas) {
        CHECK(binding.transposed);
        CHECK(binding.axis == 1);  // sequence moved to the first non-1 slot
    }
    // The past input itself now uses the valid layout.
    CHECK(rewritten.graph.tensor("past_k_0").shape == shape_of({"1", "sumN - N", "4", "16"}));
    lg::validate_graph(rewritten.graph);
}
