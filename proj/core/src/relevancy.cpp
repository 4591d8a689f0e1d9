#include "fastrm/relevancy.hpp"

#include <cmath>
#include <cstring>

namespace fastrm {

RelevancyComputer::RelevancyComputer(ToyLvlm& model, const SyntheticScene& scene,
                                     const std::vector<std::size_t>& question,
                                     const GenerationTrace& trace,
                                     const std::vector<std::size_t>* masked_patches)
    : model_(model), question_(question), trace_(trace) {
    scene_embedding_ = model.embed_scene(scene);
    if (masked_patches) scene_embedding_ = mask_patches(scene_embedding_, *masked_patches);
}

AttentionGrads RelevancyComputer::attention_grads(std::size_t token_index) {
    if (token_index >= trace_.n_out()) {
        throw std::out_of_range("token_index " + std::to_string(token_index) +
                                " >= n_out " + std::to_string(trace_.n_out()));
    }
    // replay the forward for step token_index: the prefix is the question
    // plus tokens generated before it
    std::vector<std::size_t> text = question_;
    text.insert(text.end(), trace_.output_tokens.begin(),
                trace_.output_tokens.begin() + static_cast<std::ptrdiff_t>(token_index));

    Graph g;
    ForwardGraphOut out = model_.forward_graph(g, scene_embedding_, text);
    std::size_t t = out.logits->value.rows();
    std::size_t chosen = trace_.output_tokens[token_index];
    Node* logit = g.slice(out.logits, t - 1, t, chosen, chosen + 1);
    g.backward(logit);

    AttentionGrads result;
    result.token_index = token_index;
    result.attn.resize(out.attn.size());
    result.grads.resize(out.attn.size());
    for (std::size_t l = 0; l < out.attn.size(); ++l) {
        for (Node* a : out.attn[l]) {
            result.attn[l].push_back(a->value);
            result.grads[l].push_back(a->grad_set ? a->grad : Tensor::zeros(a->value.shape()));
        }
    }
    return result;
}

RelevancyMatrix relevancy_from_grads(const AttentionGrads& grads) {
    if (grads.attn.empty() || grads.attn[0].empty()) {
        throw std::invalid_argument("attention grads are empty");
    }
    std::size_t n = grads.attn[0][0].rows();
    RelevancyMatrix rm;
    rm.token_index = grads.token_index;
    rm.scores = Tensor({n, n});
    Tensor& r = rm.scores;
    for (std::size_t i = 0; i < n; ++i) r.at(i, i) = 1.0;

    Tensor abar({n, n});
    Tensor update({n, n});
    for (std::size_t l = 0; l < grads.attn.size(); ++l) {
        std::size_t heads = grads.attn[l].size();
        abar.fill(0.0);
        for (std::size_t h = 0; h < heads; ++h) {
            const Tensor& a = grads.attn[l][h];
            const Tensor& da = grads.grads[l][h];
            for (std::size_t i = 0; i < n * n; ++i) {
                double v = da[i] * a[i];
                if (v > 0.0) abar[i] += v;
            }
        }
        double inv_h = 1.0 / static_cast<double>(heads);
        for (std::size_t i = 0; i < n * n; ++i) abar[i] *= inv_h;

        // R += Abar . R
        update.fill(0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < n; ++k) {
                double av = abar.at(i, k);
                if (av == 0.0) continue;
                const double* rk = r.data() + k * n;
                double* ui = update.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) ui[j] += av * rk[j];
            }
        }
        for (std::size_t i = 0; i < n * n; ++i) r[i] += update[i];
    }
    return rm;
}

RelevancyMatrix RelevancyComputer::compute(std::size_t token_index) {
    return relevancy_from_grads(attention_grads(token_index));
}

VisionRelevancyVector extract_vision(const RelevancyMatrix& r, std::size_t n_patches) {
    std::size_t n = r.scores.cols();
    if (n_patches > n) {
        throw std::out_of_range("patch count " + std::to_string(n_patches) +
                                " exceeds relevancy width " + std::to_string(n));
    }
    VisionRelevancyVector v;
    v.token_index = r.token_index;
    const double* last = r.scores.data() + (r.scores.rows() - 1) * n;
    v.scores.assign(last, last + n_patches);
    return v;
}

GroundTruthVector binarize(const VisionRelevancyVector& v, double labeling_threshold) {
    if (labeling_threshold <= 0.0 || labeling_threshold > 1.0) {
        throw std::invalid_argument("labeling threshold must be in (0, 1]");
    }
    double mx = 0.0;
    for (double s : v.scores) mx = std::max(mx, s);
    if (mx <= 0.0) {
        throw DegenerateMapError("all-zero relevancy vector for token " +
                                 std::to_string(v.token_index));
    }
    GroundTruthVector gt;
    gt.token_index = v.token_index;
    gt.bits.resize(v.scores.size());
    double cutoff = mx * labeling_threshold;
    for (std::size_t i = 0; i < v.scores.size(); ++i) {
        gt.bits[i] = v.scores[i] >= cutoff ? 1 : 0;
    }
    return gt;
}

}  // namespace fastrm
