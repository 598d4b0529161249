#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lg/error.hpp"
#include "lg/symexpr.hpp"

namespace lg {

enum class DType : std::uint8_t { F32 = 0, F16 = 1, I64 = 2, U4E0M4 = 3, U4Int4 = 4, Bool = 5 };

const char* dtype_name(DType dtype);
DType dtype_from_name(const std::string& name);
// Bytes per element; 4-bit types report 0 and are sized via packed_size_bytes.
std::size_t dtype_size(DType dtype);

enum class TensorKind : std::uint8_t { GraphInput, GraphOutput, Weight, Activation, ShapeValue };

const char* tensor_kind_name(TensorKind kind);
TensorKind tensor_kind_from_name(const std::string& name);

// A dimension is a symbolic expression; literals are constant expressions.
using Shape = std::vector<SymExpr>;

bool shape_is_literal(const Shape& shape);
std::vector<std::int64_t> shape_literals(const Shape& shape);

struct TensorInfo {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
    TensorKind kind = TensorKind::Activation;
};

using AttrValue = std::variant<std::int64_t, std::vector<std::int64_t>, double, std::string>;

struct NodeSpec {
    int id = 0;
    std::string op;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::map<std::string, AttrValue> attrs;

    std::int64_t attr_int(const std::string& key) const;
    std::vector<std::int64_t> attr_ints(const std::string& key) const;
    double attr_float(const std::string& key) const;
    std::string attr_string(const std::string& key) const;
    bool has_attr(const std::string& key) const { return attrs.count(key) != 0; }
};

struct SymbolDecl {
    std::string name;
    std::optional<std::int64_t> max;
};

struct KvPair {
    std::string past;   // graph input holding the cached tokens
    std::string fresh;  // tensor carrying the newly generated cache slice
    std::string arena;  // arena identifier
};

struct GraphMeta {
    std::string model;
    std::vector<KvPair> kv_pairs;
    std::string position_ids;
};

struct Graph {
    std::vector<SymbolDecl> symbols;
    std::vector<TensorInfo> tensors;  // declaration order preserved
    std::vector<NodeSpec> nodes;      // topological order
    GraphMeta meta;

    const TensorInfo& tensor(const std::string& name) const;
    TensorInfo& tensor(const std::string& name);
    bool has_tensor(const std::string& name) const;

    std::vector<std::string> input_names() const;
    std::vector<std::string> output_names() const;

    // Producing node index per tensor; -1 for graph inputs and weights.
    std::map<std::string, int> producers() const;
    std::map<std::string, std::optional<std::int64_t>> symbol_maxima() const;
};

// The fixed operator set.
bool is_known_operator(const std::string& op);
bool is_elementwise_operator(const std::string& op);

// Structural validation: unique names, declared symbols, topological def
// before use, operator and attribute checks. Throws on violation.
void validate_graph(const Graph& graph);

// JSON graph format.
Graph load_graph(std::istream& in);
void save_graph(const Graph& graph, std::ostream& out);
Graph load_graph_file(const std::string& path);
void save_graph_file(const Graph& graph, const std::string& path);
Graph load_graph_text(const std::string& text);
std::string save_graph_text(const Graph& graph);

// Sidecar weight storage ("LGW1"): named little-endian tensor records.
class WeightStore {
public:
    struct Entry {
        DType dtype = DType::F32;
        std::vector<std::int64_t> dims;
        std::vector<std::uint8_t> bytes;

        std::size_t element_count() const;
        std::span<const float> as_f32() const;
        std::span<const std::int64_t> as_i64() const;
    };

    bool has(const std::string& name) const { return entries_.count(name) != 0; }
    const Entry& at(const std::string& name) const;
    void put_f32(const std::string& name, std::vector<std::int64_t> dims, std::span<const float> data);
    void put_i64(const std::string& name, std::vector<std::int64_t> dims, std::span<const std::int64_t> data);

    const std::map<std::string, Entry>& entries() const { return entries_; }

    void save(std::ostream& out) const;
    static WeightStore load(std::istream& in);
    void save_file(const std::string& path) const;
    static WeightStore load_file(const std::string& path);

private:
    std::map<std::string, Entry> entries_;
};

}  // namespace lg
