#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "iwm/tensor.hpp"

namespace iwm {

using NodeId = int32_t;

// Closed op set. Adding a kind requires a forward kernel, a backward rule in
// Graph::backward_node, and a finite-difference entry in the gradcheck suite.
enum class OpKind : uint8_t {
    Leaf = 0,
    Matmul,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Sqrt,
    Power,
    Sum,
    Mean,
    BroadcastTo,
    Reshape,
    Transpose,
    Concat,
    Slice,
    GatherRows,
    Gelu,
    Relu,
    Softmax,
    LayerNorm,
    kCount
};

const char* op_name(OpKind k);

struct GraphError : std::runtime_error {
    explicit GraphError(const std::string& msg) : std::runtime_error(msg) {}
};

// Reverse-mode autodiff tape. Ops evaluate eagerly at build time (recording
// activations); backward walks the tape in reverse construction order, which
// is a valid topological order by construction. Single-threaded per graph;
// kernels may use parallel_for internally with fixed chunking.
class Graph {
public:
    struct OpAttrs {
        std::vector<int64_t> ints;
        double scalar = 0.0;
    };

    NodeId leaf(Tensor value, bool trainable = false);

    NodeId matmul(NodeId a, NodeId b);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId div(NodeId a, NodeId b);
    NodeId neg(NodeId a);
    NodeId exp(NodeId a);
    NodeId log(NodeId a);
    NodeId sqrt(NodeId a);
    NodeId power(NodeId a, double exponent);
    NodeId sum(NodeId a, std::vector<int64_t> axes = {});   // empty = all axes
    NodeId mean(NodeId a, std::vector<int64_t> axes = {});
    NodeId broadcast_to(NodeId a, Shape target);
    NodeId reshape(NodeId a, Shape target);
    NodeId transpose(NodeId a, std::vector<int64_t> perm);
    NodeId concat(const std::vector<NodeId>& parts, int64_t axis);
    NodeId slice(NodeId a, int64_t axis, int64_t start, int64_t stop);
    NodeId gather_rows(NodeId a, std::vector<int64_t> indices);
    NodeId gelu(NodeId a);
    NodeId relu(NodeId a);
    NodeId softmax(NodeId a, int64_t axis);
    NodeId layer_norm(NodeId a, int64_t axis, double eps);

    // Backward from a scalar output. Gradients accumulate on every node that
    // requires grad; leaves that the output does not reach keep zero grads.
    void backward(NodeId output);

    const Tensor& value(NodeId id) const;
    // Zero tensor of the node's shape when the node was never reached.
    Tensor grad(NodeId id) const;
    bool has_grad(NodeId id) const;

    size_t num_nodes() const { return nodes_.size(); }
    OpKind kind(NodeId id) const { return node(id).kind; }
    bool requires_grad(NodeId id) const { return node(id).requires_grad; }
    bool is_trainable_leaf(NodeId id) const { return node(id).kind == OpKind::Leaf && node(id).trainable; }
    std::vector<NodeId> trainable_leaves() const;

    // Approximate bytes held by node values and grads (diagnostics).
    size_t bytes_held() const;

private:
    struct Node {
        OpKind kind = OpKind::Leaf;
        std::vector<NodeId> inputs;
        OpAttrs attrs;
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool trainable = false;
    };

    const Node& node(NodeId id) const;
    Node& node(NodeId id);
    NodeId push(OpKind kind, std::vector<NodeId> inputs, OpAttrs attrs, Tensor value);
    void accumulate(NodeId id, const Tensor& g);
    void backward_node(NodeId id);
    void check_same_dtype(NodeId a, NodeId b, const char* op) const;
    const Tensor& saved_node_tensor(NodeId id) const;

    std::deque<Node> nodes_;
    // per-node auxiliary activations (layer_norm keeps 1/std for backward)
    std::vector<Tensor> saved_;
    bool ran_backward_ = false;
};

// Shared by the gradcheck unit suite and the `selftest grad` subcommand.
// Returns max relative error across all checked ops/seeds; appends one
// human-readable line per op family to `report` when non-null.
double run_gradcheck_suite(int seeds, std::vector<std::string>* report);

} // namespace iwm
