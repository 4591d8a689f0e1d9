#pragma once

#include <vector>

#include "fastrm/toy_lvlm.hpp"

namespace fastrm {

struct DegenerateMapError : std::runtime_error {
    explicit DegenerateMapError(const std::string& msg) : std::runtime_error(msg) {}
};

// Pairwise relevancy scores for output token `token_index`; square,
// nonnegative, side n_in + token_index.
struct RelevancyMatrix {
    std::size_t token_index = 0;
    Tensor scores;  // [(n_in+i) x (n_in+i)]
};

struct VisionRelevancyVector {
    std::size_t token_index = 0;
    std::vector<double> scores;  // length P
};

struct GroundTruthVector {
    std::size_t token_index = 0;
    std::vector<std::uint8_t> bits;  // length P, 0/1
};

// Attention values and d(chosen logit)/d(attention) for one output token,
// indexed [layer][head]; matrices are (n_in+i) x (n_in+i).
struct AttentionGrads {
    std::size_t token_index = 0;
    std::vector<std::vector<Tensor>> attn;
    std::vector<std::vector<Tensor>> grads;
};

// Gradient-times-attention relevancy over one generation. Each call
// replays the forward pass for the requested token; nothing is retained
// between tokens, which is the memory behavior the bench module measures.
class RelevancyComputer {
public:
    RelevancyComputer(ToyLvlm& model, const SyntheticScene& scene,
                      const std::vector<std::size_t>& question, const GenerationTrace& trace,
                      const std::vector<std::size_t>* masked_patches = nullptr);

    AttentionGrads attention_grads(std::size_t token_index);
    RelevancyMatrix compute(std::size_t token_index);

    const GenerationTrace& trace() const { return trace_; }

private:
    ToyLvlm& model_;
    Tensor scene_embedding_;
    std::vector<std::size_t> question_;
    const GenerationTrace& trace_;
};

// R = I; per layer, R += mean_heads(max(dA * A, 0)) . R
RelevancyMatrix relevancy_from_grads(const AttentionGrads& grads);

// last row of R, patch columns [0, P)
VisionRelevancyVector extract_vision(const RelevancyMatrix& r, std::size_t n_patches);

// Eq-style max-fraction binarization; throws DegenerateMapError on an
// all-zero vector (callers drop the sample).
GroundTruthVector binarize(const VisionRelevancyVector& v, double labeling_threshold);

}  // namespace fastrm
