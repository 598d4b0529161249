#include "lg/graph.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace lg {

using ordered_json = nlohmann::ordered_json;

const char* dtype_name(DType dtype) {
    switch (dtype) {
        case DType::F32: return "F32";
        case DType::F16: return "F16";
        case DType::I64: return "I64";
        case DType::U4E0M4: return "U4-E0M4";
        case DType::U4Int4: return "U4-INT4";
        case DType::Bool: return "BOOL";
    }
    return "F32";
}

DType dtype_from_name(const std::string& name) {
    if (name == "F32") return DType::F32;
    if (name == "F16") return DType::F16;
    if (name == "I64") return DType::I64;
    if (name == "U4-E0M4") return DType::U4E0M4;
    if (name == "U4-INT4") return DType::U4Int4;
    if (name == "BOOL") return DType::Bool;
    fail(ErrorKind::SchemaError, "unknown dtype '" + name + "'");
}

std::size_t dtype_size(DType dtype) {
    switch (dtype) {
        case DType::F32: return 4;
        case DType::F16: return 2;
        case DType::I64: return 8;
        case DType::Bool: return 1;
        case DType::U4E0M4:
        case DType::U4Int4: return 0;  // packed two per byte
    }
    return 4;
}

const char* tensor_kind_name(TensorKind kind) {
    switch (kind) {
        case TensorKind::GraphInput: return "input";
        case TensorKind::GraphOutput: return "output";
        case TensorKind::Weight: return "weight";
        case TensorKind::Activation: return "activation";
        case TensorKind::ShapeValue: return "shape_value";
    }
    return "activation";
}

TensorKind tensor_kind_from_name(const std::string& name) {
    if (name == "input") return TensorKind::GraphInput;
    if (name == "output") return TensorKind::GraphOutput;
    if (name == "weight") return TensorKind::Weight;
    if (name == "activation") return TensorKind::Activation;
    if (name == "shape_value") return TensorKind::ShapeValue;
    fail(ErrorKind::SchemaError, "unknown tensor kind '" + name + "'");
}

bool shape_is_literal(const Shape& shape) {
    return std::all_of(shape.begin(), shape.end(), [](const SymExpr& d) { return d.is_constant(); });
}

std::vector<std::int64_t> shape_literals(const Shape& shape) {
    std::vector<std::int64_t> out;
    out.reserve(shape.size());
    for (const SymExpr& d : shape) out.push_back(d.constant_value());
    return out;
}

std::int64_t NodeSpec::attr_int(const std::string& key) const {
    auto it = attrs.find(key);
    if (it == attrs.end() || !std::holds_alternative<std::int64_t>(it->second)) {
        fail(ErrorKind::SchemaError, op + " node " + std::to_string(id) + " needs integer attr '" + key + "'");
    }
    return std::get<std::int64_t>(it->second);
}

std::vector<std::int64_t> NodeSpec::attr_ints(const std::string& key) const {
    auto it = attrs.find(key);
    if (it == attrs.end() || !std::holds_alternative<std::vector<std::int64_t>>(it->second)) {
        fail(ErrorKind::SchemaError, op + " node " + std::to_string(id) + " needs int-list attr '" + key + "'");
    }
    return std::get<std::vector<std::int64_t>>(it->second);
}

double NodeSpec::attr_float(const std::string& key) const {
    auto it = attrs.find(key);
    if (it == attrs.end()) {
        fail(ErrorKind::SchemaError, op + " node " + std::to_string(id) + " needs float attr '" + key + "'");
    }
    if (std::holds_alternative<double>(it->second)) return std::get<double>(it->second);
    if (std::holds_alternative<std::int64_t>(it->second)) {
        return static_cast<double>(std::get<std::int64_t>(it->second));
    }
    fail(ErrorKind::SchemaError, op + " node " + std::to_string(id) + " attr '" + key + "' is not numeric");
}

std::string NodeSpec::attr_string(const std::string& key) const {
    auto it = attrs.find(key);
    if (it == attrs.end() || !std::holds_alternative<std::string>(it->second)) {
        fail(ErrorKind::SchemaError, op + " node " + std::to_string(id) + " needs string attr '" + key + "'");
    }
    return std::get<std::string>(it->second);
}

const TensorInfo& Graph::tensor(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return t;
    }
    fail(ErrorKind::SchemaError, "tensor '" + name + "' is not declared");
}

TensorInfo& Graph::tensor(const std::string& name) {
    for (auto& t : tensors) {
        if (t.name == name) return t;
    }
    fail(ErrorKind::SchemaError, "tensor '" + name + "' is not declared");
}

bool Graph::has_tensor(const std::string& name) const {
    return std::any_of(tensors.begin(), tensors.end(),
                       [&](const TensorInfo& t) { return t.name == name; });
}

std::vector<std::string> Graph::input_names() const {
    std::vector<std::string> out;
    for (const auto& t : tensors) {
        if (t.kind == TensorKind::GraphInput) out.push_back(t.name);
    }
    return out;
}

std::vector<std::string> Graph::output_names() const {
    std::vector<std::string> out;
    for (const auto& t : tensors) {
        if (t.kind == TensorKind::GraphOutput) out.push_back(t.name);
    }
    return out;
}

std::map<std::string, int> Graph::producers() const {
    std::map<std::string, int> out;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
        for (const auto& name : nodes[i].outputs) out[name] = static_cast<int>(i);
    }
    return out;
}

std::map<std::string, std::optional<std::int64_t>> Graph::symbol_maxima() const {
    std::map<std::string, std::optional<std::int64_t>> out;
    for (const auto& s : symbols) out[s.name] = s.max;
    return out;
}

namespace {

const std::set<std::string>& operator_set() {
    static const std::set<std::string> ops = {
        "Shape", "Gather", "Concat", "Slice", "Reshape", "Transpose", "Unsqueeze", "Squeeze",
        "Cast", "Add", "Sub", "Mul", "Div", "Neg", "Sqrt", "Pow", "ReduceMean", "Softmax",
        "Silu", "Gelu", "MatMul", "MatMulQuant", "RMSNorm", "LayerNorm", "KVAppend",
        "Identity", "FusedElementwise",
    };
    return ops;
}

bool valid_symbol_name(const std::string& name) {
    if (name.empty()) return false;
    if (!std::isalpha(static_cast<unsigned char>(name[0])) && name[0] != '_') return false;
    return std::all_of(name.begin() + 1, name.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
    });
}

void check_required_attrs(const NodeSpec& node) {
    const std::string& op = node.op;
    if (op == "Concat" || op == "Gather" || op == "Softmax" || op == "KVAppend") {
        (void)node.attr_int("axis");
    } else if (op == "Transpose") {
        (void)node.attr_ints("perm");
    } else if (op == "Reshape") {
        if (node.attr_int("allowzero") != 0) {
            fail(ErrorKind::UnsupportedDynamicAttr, "Reshape allowzero must be 0");
        }
    } else if (op == "Slice") {
        const auto starts = node.attr_ints("starts");
        const auto ends = node.attr_ints("ends");
        const auto axes = node.attr_ints("axes");
        if (starts.size() != ends.size() || starts.size() != axes.size()) {
            fail(ErrorKind::ShapeArityError,
                 "Slice node " + std::to_string(node.id) + " starts/ends/axes lengths differ");
        }
    } else if (op == "Unsqueeze" || op == "Squeeze" || op == "ReduceMean") {
        (void)node.attr_ints("axes");
        if (op == "ReduceMean") (void)node.attr_int("keepdims");
    } else if (op == "RMSNorm" || op == "LayerNorm") {
        (void)node.attr_float("eps");
    } else if (op == "MatMulQuant") {
        (void)node.attr_int("group_size");
        (void)node.attr_int("n");
        const std::string scheme = node.attr_string("scheme");
        if (scheme != "e0m4" && scheme != "int4") {
            fail(ErrorKind::SchemeUnsupported, "MatMulQuant scheme must be e0m4 or int4");
        }
    } else if (op == "Cast") {
        (void)node.attr_string("to");
    } else if (op == "FusedElementwise") {
        (void)node.attr_string("ops");
        (void)node.attr_ints("rhs_idx");
        (void)node.attr_ints("swap");
    }
}

}  // namespace

bool is_known_operator(const std::string& op) { return operator_set().count(op) != 0; }

bool is_elementwise_operator(const std::string& op) {
    static const std::set<std::string> ops = {"Add", "Sub", "Mul", "Div", "Neg",
                                              "Sqrt", "Pow", "Silu", "Gelu", "Identity"};
    return ops.count(op) != 0;
}

void validate_graph(const Graph& graph) {
    std::set<std::string> declared_symbols;
    for (const auto& s : graph.symbols) {
        if (!valid_symbol_name(s.name)) fail(ErrorKind::SchemaError, "bad symbol name '" + s.name + "'");
        if (!declared_symbols.insert(s.name).second) {
            fail(ErrorKind::SchemaError, "symbol '" + s.name + "' declared twice");
        }
        if (s.max && *s.max < 1) fail(ErrorKind::SchemaError, "symbol max must be >= 1");
    }

    std::set<std::string> names;
    for (const auto& t : graph.tensors) {
        if (!names.insert(t.name).second) {
            fail(ErrorKind::SchemaError, "tensor '" + t.name + "' declared twice");
        }
        for (const auto& dim : t.shape) {
            for (const auto& sym : dim.symbols()) {
                if (!declared_symbols.count(sym)) {
                    fail(ErrorKind::UndeclaredSymbol,
                         "shape of '" + t.name + "' uses undeclared symbol '" + sym + "'");
                }
            }
            if (dim.is_constant() && dim.constant_value() < 1) {
                fail(ErrorKind::SchemaError, "literal dim of '" + t.name + "' must be >= 1");
            }
        }
        if (t.kind == TensorKind::ShapeValue) {
            if (t.shape.size() > 1 || t.dtype != DType::I64) {
                fail(ErrorKind::SchemaError, "shape_value tensor '" + t.name + "' must be rank<=1 I64");
            }
        }
        if (t.kind == TensorKind::Weight && !shape_is_literal(t.shape)) {
            fail(ErrorKind::SchemaError, "weight tensor '" + t.name + "' must have a literal shape");
        }
    }

    std::set<std::string> defined;
    for (const auto& t : graph.tensors) {
        if (t.kind == TensorKind::Weight || t.kind == TensorKind::GraphInput) defined.insert(t.name);
    }
    std::set<int> node_ids;
    for (const auto& node : graph.nodes) {
        if (!node_ids.insert(node.id).second) {
            fail(ErrorKind::SchemaError, "node id " + std::to_string(node.id) + " used twice");
        }
        if (!is_known_operator(node.op)) {
            fail(ErrorKind::UnknownOperator, "operator '" + node.op + "' is not supported");
        }
        check_required_attrs(node);
        if (node.outputs.empty()) fail(ErrorKind::SchemaError, "node has no outputs");
        for (const auto& in : node.inputs) {
            if (!names.count(in)) fail(ErrorKind::SchemaError, "node input '" + in + "' is not declared");
            if (!defined.count(in)) {
                fail(ErrorKind::CycleError,
                     "tensor '" + in + "' consumed before it is produced (cycle or bad order)");
            }
        }
        for (const auto& out : node.outputs) {
            if (!names.count(out)) fail(ErrorKind::SchemaError, "node output '" + out + "' is not declared");
            if (!defined.insert(out).second) {
                fail(ErrorKind::SchemaError, "tensor '" + out + "' produced twice");
            }
        }
    }

    for (const auto& t : graph.tensors) {
        if ((t.kind == TensorKind::GraphOutput || t.kind == TensorKind::Activation ||
             t.kind == TensorKind::ShapeValue) &&
            !defined.count(t.name)) {
            fail(ErrorKind::SchemaError, "tensor '" + t.name + "' is never produced");
        }
    }

    for (const auto& pair : graph.meta.kv_pairs) {
        if (!names.count(pair.past) || !names.count(pair.fresh)) {
            fail(ErrorKind::SchemaError, "kv pair references unknown tensors");
        }
    }
    if (!graph.meta.position_ids.empty() && !names.count(graph.meta.position_ids)) {
        fail(ErrorKind::SchemaError, "position_ids tensor is not declared");
    }
}

namespace {

SymExpr dim_from_json(const ordered_json& j, const std::string& where) {
    if (j.is_number_integer()) return SymExpr::constant(j.get<std::int64_t>());
    if (j.is_string()) {
        try {
            return SymExpr::parse(j.get<std::string>());
        } catch (const Error& e) {
            fail(ErrorKind::SchemaError, where + ": " + e.what());
        }
    }
    fail(ErrorKind::SchemaError, where + ": dim must be an integer or an expression string");
}

ordered_json dim_to_json(const SymExpr& dim) {
    if (dim.is_constant()) return dim.constant_value();
    return dim.to_string();
}

AttrValue attr_from_json(const ordered_json& j, const std::string& where) {
    if (j.is_number_integer()) return j.get<std::int64_t>();
    if (j.is_number_float()) return j.get<double>();
    if (j.is_string()) return j.get<std::string>();
    if (j.is_array()) {
        std::vector<std::int64_t> values;
        for (const auto& item : j) {
            if (!item.is_number_integer()) {
                fail(ErrorKind::SchemaError, where + ": attr arrays must hold integers");
            }
            values.push_back(item.get<std::int64_t>());
        }
        return values;
    }
    fail(ErrorKind::SchemaError, where + ": unsupported attr type");
}

ordered_json attr_to_json(const AttrValue& value) {
    return std::visit([](const auto& v) { return ordered_json(v); }, value);
}

template <typename T>
T field(const ordered_json& j, const char* key, const std::string& where) {
    auto it = j.find(key);
    if (it == j.end()) fail(ErrorKind::SchemaError, where + ": missing field '" + key + "'");
    try {
        return it->get<T>();
    } catch (const nlohmann::json::exception&) {
        fail(ErrorKind::SchemaError, where + ": field '" + key + "' has the wrong type");
    }
}

}  // namespace

Graph load_graph(std::istream& in) {
    ordered_json doc;
    try {
        doc = ordered_json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::SchemaError, std::string("invalid JSON: ") + e.what());
    }
    if (!doc.is_object()) fail(ErrorKind::SchemaError, "top level must be an object");

    Graph graph;
    for (const auto& j : doc.value("symbols", ordered_json::array())) {
        SymbolDecl decl;
        decl.name = field<std::string>(j, "name", "symbols");
        if (j.contains("max") && !j["max"].is_null()) decl.max = j["max"].get<std::int64_t>();
        graph.symbols.push_back(std::move(decl));
    }
    if (!doc.contains("tensors") || !doc["tensors"].is_array()) {
        fail(ErrorKind::SchemaError, "missing 'tensors' array");
    }
    for (const auto& j : doc["tensors"]) {
        TensorInfo info;
        info.name = field<std::string>(j, "name", "tensors");
        info.dtype = dtype_from_name(field<std::string>(j, "dtype", "tensor '" + info.name + "'"));
        info.kind = tensor_kind_from_name(field<std::string>(j, "kind", "tensor '" + info.name + "'"));
        auto shape_it = j.find("shape");
        if (shape_it == j.end() || !shape_it->is_array()) {
            fail(ErrorKind::SchemaError, "tensor '" + info.name + "': missing shape array");
        }
        for (const auto& dim : *shape_it) {
            info.shape.push_back(dim_from_json(dim, "tensor '" + info.name + "'"));
        }
        graph.tensors.push_back(std::move(info));
    }
    if (!doc.contains("nodes") || !doc["nodes"].is_array()) {
        fail(ErrorKind::SchemaError, "missing 'nodes' array");
    }
    for (const auto& j : doc["nodes"]) {
        NodeSpec node;
        node.id = static_cast<int>(field<std::int64_t>(j, "id", "nodes"));
        const std::string where = "node " + std::to_string(node.id);
        node.op = field<std::string>(j, "op", where);
        node.inputs = field<std::vector<std::string>>(j, "inputs", where);
        node.outputs = field<std::vector<std::string>>(j, "outputs", where);
        const ordered_json attrs = j.value("attrs", ordered_json::object());
        for (const auto& [key, value] : attrs.items()) {
            node.attrs[key] = attr_from_json(value, where + " attr '" + key + "'");
        }
        graph.nodes.push_back(std::move(node));
    }
    if (doc.contains("meta")) {
        const auto& meta = doc["meta"];
        graph.meta.model = meta.value("model", "");
        graph.meta.position_ids = meta.value("position_ids", "");
        for (const auto& j : meta.value("kv_pairs", ordered_json::array())) {
            KvPair pair;
            pair.past = field<std::string>(j, "past", "kv_pairs");
            pair.fresh = field<std::string>(j, "new", "kv_pairs");
            pair.arena = field<std::string>(j, "arena", "kv_pairs");
            graph.meta.kv_pairs.push_back(std::move(pair));
        }
    }

    validate_graph(graph);
    return graph;
}

void save_graph(const Graph& graph, std::ostream& out) {
    ordered_json doc;
    doc["symbols"] = ordered_json::array();
    for (const auto& s : graph.symbols) {
        ordered_json j;
        j["name"] = s.name;
        if (s.max) j["max"] = *s.max;
        doc["symbols"].push_back(std::move(j));
    }
    doc["tensors"] = ordered_json::array();
    for (const auto& t : graph.tensors) {
        ordered_json j;
        j["name"] = t.name;
        j["dtype"] = dtype_name(t.dtype);
        j["shape"] = ordered_json::array();
        for (const auto& dim : t.shape) j["shape"].push_back(dim_to_json(dim));
        j["kind"] = tensor_kind_name(t.kind);
        doc["tensors"].push_back(std::move(j));
    }
    doc["nodes"] = ordered_json::array();
    for (const auto& node : graph.nodes) {
        ordered_json j;
        j["id"] = node.id;
        j["op"] = node.op;
        j["inputs"] = node.inputs;
        j["outputs"] = node.outputs;
        if (!node.attrs.empty()) {
            ordered_json attrs;
            for (const auto& [key, value] : node.attrs) attrs[key] = attr_to_json(value);
            j["attrs"] = std::move(attrs);
        }
        doc["nodes"].push_back(std::move(j));
    }
    ordered_json meta;
    if (!graph.meta.model.empty()) meta["model"] = graph.meta.model;
    if (!graph.meta.kv_pairs.empty()) {
        meta["kv_pairs"] = ordered_json::array();
        for (const auto& pair : graph.meta.kv_pairs) {
            ordered_json j;
            j["past"] = pair.past;
            j["new"] = pair.fresh;
            j["arena"] = pair.arena;
            meta["kv_pairs"].push_back(std::move(j));
        }
    }
    if (!graph.meta.position_ids.empty()) meta["position_ids"] = graph.meta.position_ids;
    doc["meta"] = std::move(meta);
    out << doc.dump(2) << "\n";
}

Graph load_graph_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot open graph file '" + path + "'");
    return load_graph(in);
}

void save_graph_file(const Graph& graph, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::IoError, "cannot write graph file '" + path + "'");
    save_graph(graph, out);
}

Graph load_graph_text(const std::string& text) {
    std::istringstream in(text);
    return load_graph(in);
}

std::string save_graph_text(const Graph& graph) {
    std::ostringstream out;
    save_graph(graph, out);
    return out.str();
}

std::size_t WeightStore::Entry::element_count() const {
    std::size_t count = 1;
    for (auto d : dims) count *= static_cast<std::size_t>(d);
    return count;
}

std::span<const float> WeightStore::Entry::as_f32() const {
    if (dtype != DType::F32) fail(ErrorKind::SchemaError, "weight entry is not F32");
    return {reinterpret_cast<const float*>(bytes.data()), bytes.size() / 4};
}

std::span<const std::int64_t> WeightStore::Entry::as_i64() const {
    if (dtype != DType::I64) fail(ErrorKind::SchemaError, "weight entry is not I64");
    return {reinterpret_cast<const std::int64_t*>(bytes.data()), bytes.size() / 8};
}

const WeightStore::Entry& WeightStore::at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) fail(ErrorKind::SchemaError, "weight '" + name + "' is missing");
    return it->second;
}

void WeightStore::put_f32(const std::string& name, std::vector<std::int64_t> dims,
                          std::span<const float> data) {
    Entry entry;
    entry.dtype = DType::F32;
    entry.dims = std::move(dims);
    entry.bytes.resize(data.size() * 4);
    std::memcpy(entry.bytes.data(), data.data(), entry.bytes.size());
    entries_[name] = std::move(entry);
}

void WeightStore::put_i64(const std::string& name, std::vector<std::int64_t> dims,
                          std::span<const std::int64_t> data) {
    Entry entry;
    entry.dtype = DType::I64;
    entry.dims = std::move(dims);
    entry.bytes.resize(data.size() * 8);
    std::memcpy(entry.bytes.data(), data.data(), entry.bytes.size());
    entries_[name] = std::move(entry);
}

namespace {

template <typename T>
void write_raw(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in) {
    T value;
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) fail(ErrorKind::TruncatedStream, "weight stream ended early");
    return value;
}

}  // namespace

namespace {

// Payload bytes are implied by dims and dtype; 4-bit types pack two per byte.
std::size_t payload_bytes(DType dtype, const std::vector<std::int64_t>& dims) {
    std::size_t elems = 1;
    for (auto d : dims) elems *= static_cast<std::size_t>(d);
    if (dtype == DType::U4E0M4 || dtype == DType::U4Int4) return (elems + 1) / 2;
    return elems * dtype_size(dtype);
}

}  // namespace

void WeightStore::save(std::ostream& out) const {
    out.write("LGW1", 4);
    for (const auto& [name, entry] : entries_) {
        write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_raw<std::uint8_t>(out, static_cast<std::uint8_t>(entry.dtype));
        write_raw<std::uint8_t>(out, static_cast<std::uint8_t>(entry.dims.size()));
        for (auto d : entry.dims) write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        out.write(reinterpret_cast<const char*>(entry.bytes.data()),
                  static_cast<std::streamsize>(entry.bytes.size()));
    }
}

WeightStore WeightStore::load(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "LGW1", 4) != 0) {
        fail(ErrorKind::BadMagic, "not a weight store (expected LGW1)");
    }
    WeightStore store;
    while (in.peek() != EOF) {
        const auto name_len = read_raw<std::uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        if (!in) fail(ErrorKind::TruncatedStream, "weight stream ended early");
        Entry entry;
        const auto dtype_tag = read_raw<std::uint8_t>(in);
        if (dtype_tag > static_cast<std::uint8_t>(DType::Bool)) {
            fail(ErrorKind::SchemaError, "weight '" + name + "' has an unknown dtype tag");
        }
        entry.dtype = static_cast<DType>(dtype_tag);
        const auto rank = read_raw<std::uint8_t>(in);
        for (int i = 0; i < rank; ++i) entry.dims.push_back(read_raw<std::uint32_t>(in));
        const std::size_t payload = payload_bytes(entry.dtype, entry.dims);
        entry.bytes.resize(payload);
        in.read(reinterpret_cast<char*>(entry.bytes.data()), static_cast<std::streamsize>(payload));
        if (!in) fail(ErrorKind::TruncatedStream, "weight stream ended early");
        store.entries_[name] = std::move(entry);
    }
    return store;
}

void WeightStore::save_file(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::IoError, "cannot write weight file '" + path + "'");
    save(out);
}

WeightStore WeightStore::load_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot open weight file '" + path + "'");
    return load(in);
}

}  // namespace lg
