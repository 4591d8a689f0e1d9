#pragma once

#include <string>
#include <vector>

#include "fastrm/autodiff.hpp"
#include "fastrm/tensor.hpp"

namespace fastrm {

struct FastRMConfig {
    std::size_t d_model = 64;
    std::uint64_t seed = 0;
};

struct PatchRelevanceProbs {
    std::size_t token_index = 0;
    std::vector<double> probs;  // length P, each in (0, 1)
};

// The proxy: layer norm then a single-head bilinear score from the
// current token row to every patch row, squashed by sigmoid.
// probs = sigmoid( (H'Wq)(H'Wk)^T / sqrt(d) ) restricted to the last
// row and patch columns.
class FastRMHead {
public:
    explicit FastRMHead(const FastRMConfig& cfg);

    const FastRMConfig& config() const { return cfg_; }
    std::vector<Parameter*> parameters();
    Parameter* find_param(const std::string& name);

    // H holds rows [0, n_in + i); the scoring row is the last one.
    PatchRelevanceProbs forward(const Tensor& h, std::size_t token_index,
                                std::size_t n_patches) const;

    // Graph forward for training; returns a [1 x P] probability node.
    // Only the patch rows and the scoring row of H participate.
    Node* forward_graph(Graph& g, Node* h_norm_rows, std::size_t n_patches);

    // layer_norm of the (P+1) relevant rows of H: patch rows then the
    // scoring row. Shared between training batching and forward.
    Tensor select_rows(const Tensor& h, std::size_t n_patches) const;

    void save(const std::string& path) const;
    static FastRMHead load(const std::string& path);

private:
    FastRMConfig cfg_;
    std::vector<std::unique_ptr<Parameter>> params_;
};

}  // namespace fastrm
