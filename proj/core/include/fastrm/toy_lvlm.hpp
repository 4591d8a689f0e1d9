#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fastrm/autodiff.hpp"
#include "fastrm/rng.hpp"
#include "fastrm/tensor.hpp"

namespace fastrm {

struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CapacityError : std::runtime_error {
    explicit CapacityError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ModelConfig {
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t model_dim = 64;
    std::size_t grid = 6;  // P = grid * grid patches
    std::size_t vocab_size = 64;
    std::size_t max_seq_len = 160;
    std::uint64_t seed = 0;

    std::size_t n_patches() const { return grid * grid; }
    void validate() const;
};

// Fixed word-level vocabulary shared by all models.
namespace vocab {
inline constexpr std::size_t kPatch = 0;
inline constexpr std::size_t kEos = 1;
std::size_t size();
std::size_t id(const std::string& word);
const std::string& word(std::size_t id);
std::vector<std::size_t> tokenize(const std::string& text);
std::string detokenize(const std::vector<std::size_t>& ids);
}  // namespace vocab

enum class CellShape : std::uint8_t { Circle = 0, Square, Triangle, Empty };
enum class CellColor : std::uint8_t { Red = 0, Green, Blue, Yellow };

struct Cell {
    CellShape shape = CellShape::Empty;
    CellColor color = CellColor::Red;
};

// G x G grid of colored shapes; per-cell features are
// one-hot shape (4) + one-hot color (4) + normalized (row, col).
struct SyntheticScene {
    static constexpr std::size_t kFeatureDim = 10;

    std::size_t grid = 0;
    std::vector<Cell> cells;  // row-major, grid*grid entries

    std::size_t n_patches() const { return grid * grid; }
    void cell_features(std::size_t idx, double* out) const;
    Tensor feature_matrix() const;  // [P x kFeatureDim]
};

struct QASample {
    SyntheticScene scene;
    std::vector<std::size_t> question;  // token ids
    std::vector<std::size_t> answer;    // token ids, eos excluded
    std::size_t oracle_patch_index = 0;
};

// Seeded generator for the two synthetic task distributions.
// InDomain asks for attributes at a grid position; Shifted refers to a
// cell by a unique attribute ("shape of the red thing").
class TaskGenerator {
public:
    enum class Distribution { InDomain, Shifted, Mixed };

    TaskGenerator(std::size_t grid, Distribution dist, std::uint64_t seed)
        : grid_(grid), dist_(dist), rng_(seed) {}

    QASample next();

private:
    QASample next_in_domain();
    QASample next_shifted();
    SyntheticScene random_scene();

    std::size_t grid_;
    Distribution dist_;
    Rng rng_;
};

struct GenOptions {
    std::size_t max_new_tokens = 8;
    bool record_attention = true;
    std::size_t forced_tokens = 0;  // > 0: generate exactly this many, ignore eos
    const std::vector<std::size_t>* masked_patches = nullptr;
};

// Full record of one greedy generation.
struct GenerationTrace {
    std::size_t n_in = 0;       // patch + question positions
    std::size_t n_patches = 0;  // patch span is [0, n_patches)
    std::vector<std::size_t> tokens;         // length N, patch slots hold vocab::kPatch
    std::vector<std::size_t> output_tokens;  // generated tokens, may end with eos
    // attn_steps[t][l * n_heads + h]: (n_in+t) x (n_in+t) attention at step t
    std::vector<std::vector<Tensor>> attn_steps;
    Tensor last_hidden;                // [N x d] final-layer hidden states
    std::vector<Tensor> step_logits;   // per step, vocab-sized row

    std::size_t n_out() const { return output_tokens.size(); }
    // generated answer with any trailing eos stripped
    std::vector<std::size_t> answer_tokens() const;
};

struct PretrainConfig {
    std::size_t n_samples = 12000;
    std::size_t epochs = 3;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    // fraction of pretraining queries drawn from the shifted distribution
    double shifted_fraction = 0.25;
    std::size_t log_every = 2000;
    bool verbose = false;
};

struct PretrainResult {
    std::vector<double> epoch_mean_loss;
    std::size_t steps = 0;
};

// Outputs of one graph-mode forward pass.
struct ForwardGraphOut {
    Node* hidden = nullptr;  // [T x d] post final norm
    Node* logits = nullptr;  // [T x V]
    std::vector<std::vector<Node*>> attn;  // [layer][head] softmax nodes
};

class ToyLvlm {
public:
    explicit ToyLvlm(const ModelConfig& cfg);

    const ModelConfig& config() const { return cfg_; }
    std::vector<Parameter*> parameters();
    Parameter* find_param(const std::string& name);

    // [P x d] patch embedding of a scene (pre positional encoding)
    Tensor embed_scene(const SyntheticScene& scene) const;

    GenerationTrace generate(const SyntheticScene& scene,
                             const std::vector<std::size_t>& question,
                             const GenOptions& opts = {});

    // Graph forward over a fixed (already embedded, possibly masked) scene
    // plus text tokens. Gradients flow to attention and parameters but not
    // into the scene embedding.
    ForwardGraphOut forward_graph(Graph& g, const Tensor& scene_embedding,
                                  const std::vector<std::size_t>& text_tokens);

    // Graph forward from raw scene features; used by pretraining so the
    // patch projection receives gradients.
    ForwardGraphOut forward_graph_trainable(Graph& g, const SyntheticScene& scene,
                                            const std::vector<std::size_t>& text_tokens);

    PretrainResult pretrain(const PretrainConfig& cfg);

    void save(const std::string& path) const;
    static ToyLvlm load(const std::string& path);

private:
    ForwardGraphOut run_trunk(Graph& g, Node* x);
    Parameter* add_param(const std::string& name, std::vector<std::size_t> shape);
    void init_params();

    ModelConfig cfg_;
    std::vector<std::unique_ptr<Parameter>> params_;
};

// Zero-vector replacement of the listed patch embedding rows.
Tensor mask_patches(const Tensor& scene_embedding, const std::vector<std::size_t>& indices);

}  // namespace fastrm
