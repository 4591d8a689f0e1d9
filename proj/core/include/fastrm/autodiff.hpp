#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "fastrm/tensor.hpp"

namespace fastrm {

class Graph;

// One value in the computation graph. Gradient is materialized lazily
// during backward; parents are owned by the graph.
struct Node {
    Tensor value;
    Tensor grad;
    bool grad_set = false;
    std::vector<Node*> parents;
    std::function<void()> backward_fn;

    Tensor& ensure_grad() {
        if (!grad_set) {
            grad = Tensor::zeros(value.shape());
            grad_set = true;
        }
        return grad;
    }
};

// Named persistent model weight. Lives outside any graph; bound into a
// graph per forward pass via Graph::param.
struct Parameter {
    std::string name;
    Tensor value;
    bool trainable = true;
};

// Optional boolean mask for softmax_rows; 1 = allowed.
using SoftmaxMask = std::vector<std::uint8_t>;

SoftmaxMask causal_mask(std::size_t n);

// Reverse-mode tape. Nodes are created in topological order; backward
// walks the tape in reverse. One graph is confined to one thread.
class Graph {
public:
    Node* input(Tensor value);
    Node* param(Parameter& p);

    Node* matmul(Node* a, Node* b);
    // a [m x k] times b-transposed where b is [n x k]
    Node* matmul_nt(Node* a, Node* b);
    Node* add(Node* a, Node* b);
    // adds a length-n row vector to every row of an [m x n] matrix
    Node* add_rowvec(Node* m, Node* v);
    Node* mul(Node* a, Node* b);
    Node* scale(Node* a, double c);
    Node* softmax_rows(Node* x, const SoftmaxMask* mask = nullptr);
    Node* layer_norm(Node* x, Node* gain, Node* bias);
    Node* gelu(Node* x);
    Node* sigmoid(Node* x);
    Node* embedding_lookup(Node* table, const std::vector<std::size_t>& ids);
    Node* concat_rows(Node* a, Node* b);
    Node* slice(Node* x, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1);
    Node* sum(Node* x);
    // mean elementwise BCE of probabilities against fixed 0/1 targets
    Node* binary_cross_entropy(Node* probs, const Tensor& targets);
    // mean softmax cross-entropy of logit rows against target ids
    Node* cross_entropy(Node* logits, const std::vector<std::size_t>& targets);

    void backward(Node* loss);

    const Tensor* grad_of(const Parameter& p) const;

    std::size_t node_count() const { return nodes_.size(); }

private:
    Node* make(Tensor value, std::vector<Node*> parents);

    std::vector<std::unique_ptr<Node>> nodes_;
    std::unordered_map<const Parameter*, Node*> bound_;
};

// Adam with bias correction; state keyed by parameter name.
class AdamOptimizer {
public:
    AdamOptimizer(double lr = 2e-5, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<Parameter*>& params, const Graph& g);

    double learning_rate() const { return lr_; }

private:
    struct Slot {
        Tensor m, v;
    };
    double lr_, beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
    std::unordered_map<std::string, Slot> slots_;
};

}  // namespace fastrm
