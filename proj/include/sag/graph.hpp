#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sag/tensor.hpp"

namespace sag {

enum class Op {
    kInput,
    kConst,
    kParam,    // trainable leaf bound to external storage
    kFrozen,   // non-trainable leaf bound to external storage
    kAdd,      // same shape, or one side a 1-element scalar
    kMul,
    kMatmul,
    kTranspose,
    kLayerNorm,  // inputs: x, gamma, beta; normalizes over the last axis
    kSoftmax,    // last axis
    kGelu,       // tanh approximation
    kConcatCols,
    kSliceCols,
    kSliceRows,
    kGatherRows,     // baked row indices
    kGatherRowsDyn,  // row indices read from a second input at eval time
    kRepeatRows,     // [1,c] -> [n,c]
    kSinusoid,       // baked indices -> sinusoidal embedding matrix
    kAbs,
    kSqrt,
    kMeanAll,  // -> [1]
    kSumAll,   // -> [1]
    kSteGate,  // [n,2] -> [n,1]; hard argmax forward, soft-probability backward
    kSoftGate  // [n,2] -> [n,1]; softmax prune-channel probability
};

struct GraphNode {
    Op op;
    std::vector<int> shape;
    std::vector<int> in;   // input node ids
    int a0 = 0, a1 = 0;    // generic integer attributes (slice start/len, repeats, dim)
    double eps = 0.0;      // layernorm epsilon
    std::vector<int> idx;  // baked indices (gather rows, sinusoid positions)
    std::string name;      // for named leaves
    bool needs_grad = false;
    Tensor* bound = nullptr;        // param binding (grad accumulated here too)
    const Tensor* frozen = nullptr; // read-only binding
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<int> dyn_idx;  // resolved indices for kGatherRowsDyn
};

/// Tape-style computation graph. Nodes are appended in topological order; a
/// forward pass binds named inputs and evaluates every node, retaining values;
/// a backward pass visits nodes exactly once in reverse order and accumulates
/// gradients into differentiable leaves (and into bound parameter storage).
class Graph {
   public:
    int input(const std::string& name, std::vector<int> shape, bool differentiable = false);
    int constant(Tensor t);
    int constant_scalar(double v);
    int param(const std::string& name, Tensor& storage);
    int frozen(const std::string& name, const Tensor& storage);

    int add(int a, int b);
    int sub(int a, int b);
    int mul(int a, int b);
    int scale(int a, double s);
    int matmul(int a, int b);
    int transpose(int a);
    int layer_norm(int x, int gamma, int beta, double eps = 1e-5);
    int softmax(int a);
    int gelu(int a);
    int concat_cols(const std::vector<int>& xs);
    int slice_cols(int a, int start, int len);
    int slice_rows(int a, int start, int len);
    int gather_rows(int a, std::vector<int> rows);
    int gather_rows_dyn(int a, int index_node);
    int repeat_rows(int a, int n);
    int sinusoid(std::vector<int> indices, int dim);
    int abs(int a);
    int sqrt(int a);
    int mean_all(int a);
    int sum_all(int a);
    int ste_gate(int logits);
    int soft_gate(int logits);

    void mark_output(const std::string& name, int id);

    /// Evaluate the whole graph. Every kInput must be bound by name; shapes
    /// must match the declared input shapes. Returns all marked outputs.
    std::map<std::string, Tensor> forward(const std::map<std::string, Tensor>& inputs);

    /// Reverse pass from a marked output. Seed shape must equal the output
    /// shape. Gradients of params are also accumulated into their bound
    /// tensors' grad slots. Returns gradients of all differentiable leaves.
    std::map<std::string, Tensor> backward(const std::string& output, const Tensor& seed);

    Tensor value_of(int id) const;
    Tensor value_of(const std::string& output) const;
    const std::vector<int>& shape_of(int id) const { return nodes_[id].shape; }
    int output_id(const std::string& name) const;
    size_t node_count() const { return nodes_.size(); }

   private:
    int push(GraphNode n);
    void check_rank2(int id, const char* where) const;
    void eval_node(int i);
    void backprop_node(int i);

    std::vector<GraphNode> nodes_;
    std::map<std::string, int> inputs_;
    std::map<std::string, int> outputs_;
    std::vector<int> leaf_ids_;
    bool forward_done_ = false;
};

/// Central-difference gradient oracle: (f(x+h e_i) - f(x-h e_i)) / (2h).
/// Independent of the graph backward machinery by construction.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double step);

}  // namespace sag
