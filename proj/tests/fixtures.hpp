#pragma once

// Small graph-construction helpers shared by the test suites.

#include <map>
#include <string>
#include <vector>

#include "lg/graph.hpp"

namespace lgtest {

inline lg::Shape shape_of(const std::vector<std::string>& dims) {
    lg::Shape shape;
    for (const auto& d : dims) shape.push_back(lg::SymExpr::parse(d));
    return shape;
}

struct GraphBuilder {
    lg::Graph g;
    lg::WeightStore ws;
    int next_id = 0;

    GraphBuilder& symbol(const std::string& name, std::int64_t max = 256) {
        g.symbols.push_back({name, max});
        return *this;
    }

    GraphBuilder& input(const std::string& name, lg::DType dtype,
                        const std::vector<std::string>& dims) {
        g.tensors.push_back({name, dtype, shape_of(dims), lg::TensorKind::GraphInput});
        return *this;
    }

    GraphBuilder& weight(const std::string& name, const std::vector<std::int64_t>& dims,
                         const std::vector<float>& data) {
        lg::Shape shape;
        for (auto d : dims) shape.push_back(lg::SymExpr::constant(d));
        g.tensors.push_back({name, lg::DType::F32, shape, lg::TensorKind::Weight});
        ws.put_f32(name, dims, data);
        return *this;
    }

    GraphBuilder& weight_i64(const std::string& name, const std::vector<std::int64_t>& dims,
                             const std::vector<std::int64_t>& data) {
        lg::Shape shape;
        for (auto d : dims) shape.push_back(lg::SymExpr::constant(d));
        g.tensors.push_back({name, lg::DType::I64, shape, lg::TensorKind::Weight});
        ws.put_i64(name, dims, data);
        return *this;
    }

    GraphBuilder& node(const std::string& op, const std::vector<std::string>& inputs,
                       const std::string& output,
                       std::map<std::string, lg::AttrValue> attrs = {},
                       lg::DType dtype = lg::DType::F32,
                       lg::TensorKind kind = lg::TensorKind::Activation) {
        lg::NodeSpec n;
        n.id = next_id++;
        n.op = op;
        n.inputs = inputs;
        n.outputs = {output};
        n.attrs = std::move(attrs);
        g.nodes.push_back(std::move(n));
        g.tensors.push_back({output, dtype, {}, kind});
        return *this;
    }

    GraphBuilder& mark_output(const std::string& name) {
        g.tensor(name).kind = lg::TensorKind::GraphOutput;
        return *this;
    }
};

}  // namespace lgtest
