#include "fastrm/toy_lvlm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace fastrm {

namespace vocab {

namespace {
const std::vector<std::string>& table() {
    static const std::vector<std::string> words = {
        "<patch>", "<eos>",
        "color",   "shape", "describe", "at", "row", "col", "of", "the", "thing", "?",
        "red",     "green", "blue",     "yellow",
        "circle",  "square", "triangle", "empty",
        "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11",
    };
    return words;
}

const std::unordered_map<std::string, std::size_t>& index() {
    static const std::unordered_map<std::string, std::size_t> idx = [] {
        std::unordered_map<std::string, std::size_t> m;
        for (std::size_t i = 0; i < table().size(); ++i) m[table()[i]] = i;
        return m;
    }();
    return idx;
}
}  // namespace

std::size_t size() { return table().size(); }

std::size_t id(const std::string& word) {
    auto it = index().find(word);
    if (it == index().end()) throw std::invalid_argument("unknown word: " + word);
    return it->second;
}

const std::string& word(std::size_t id) {
    if (id >= table().size()) throw std::out_of_range("token id out of vocabulary");
    return table()[id];
}

std::vector<std::size_t> tokenize(const std::string& text) {
    std::vector<std::size_t> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(id(w));
    return out;
}

std::string detokenize(const std::vector<std::size_t>& ids) {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += " ";
        out += word(ids[i]);
    }
    return out;
}

}  // namespace vocab

namespace {

const char* kShapeWords[4] = {"circle", "square", "triangle", "empty"};
const char* kColorWords[4] = {"red", "green", "blue", "yellow"};

std::size_t argmax_row(const double* v, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j) {
        if (v[j] > v[best]) best = j;
    }
    return best;
}

}  // namespace

void ModelConfig::validate() const {
    if (model_dim == 0 || n_heads == 0 || model_dim % n_heads != 0) {
        throw std::invalid_argument("model_dim must be a positive multiple of n_heads");
    }
    if (n_patches() < 4) throw std::invalid_argument("need at least 4 patches");
    if (vocab_size < vocab::size()) {
        throw std::invalid_argument("vocab_size smaller than the fixed vocabulary");
    }
    if (max_seq_len < n_patches() + 12) {
        throw std::invalid_argument("max_seq_len too small for the patch span");
    }
}

void SyntheticScene::cell_features(std::size_t idx, double* out) const {
    const Cell& c = cells[idx];
    for (std::size_t i = 0; i < kFeatureDim; ++i) out[i] = 0.0;
    out[static_cast<std::size_t>(c.shape)] = 1.0;
    out[4 + static_cast<std::size_t>(c.color)] = 1.0;
    double denom = grid > 1 ? static_cast<double>(grid - 1) : 1.0;
    out[8] = static_cast<double>(idx / grid) / denom;
    out[9] = static_cast<double>(idx % grid) / denom;
}

Tensor SyntheticScene::feature_matrix() const {
    Tensor f({n_patches(), kFeatureDim});
    for (std::size_t i = 0; i < n_patches(); ++i) cell_features(i, f.data() + i * kFeatureDim);
    return f;
}

SyntheticScene TaskGenerator::random_scene() {
    SyntheticScene s;
    s.grid = grid_;
    s.cells.resize(grid_ * grid_);
    for (auto& c : s.cells) {
        c.shape = static_cast<CellShape>(rng_.uniform_int(4));
        c.color = static_cast<CellColor>(rng_.uniform_int(4));
    }
    // guarantee at least one queryable cell
    bool any = false;
    for (const auto& c : s.cells) any = any || c.shape != CellShape::Empty;
    if (!any) {
        s.cells[rng_.uniform_int(s.cells.size())].shape =
            static_cast<CellShape>(rng_.uniform_int(3));
    }
    return s;
}

QASample TaskGenerator::next() {
    switch (dist_) {
        case Distribution::InDomain: return next_in_domain();
        case Distribution::Shifted: return next_shifted();
        case Distribution::Mixed:
            return rng_.uniform() < 0.5 ? next_in_domain() : next_shifted();
    }
    throw std::logic_error("unreachable");
}

QASample TaskGenerator::next_in_domain() {
    QASample q;
    q.scene = random_scene();
    std::vector<std::size_t> nonempty;
    for (std::size_t i = 0; i < q.scene.cells.size(); ++i) {
        if (q.scene.cells[i].shape != CellShape::Empty) nonempty.push_back(i);
    }
    std::size_t target = nonempty[rng_.uniform_int(nonempty.size())];
    q.oracle_patch_index = target;
    std::size_t r = target / grid_, c = target % grid_;
    const Cell& cell = q.scene.cells[target];
    std::size_t qtype = rng_.uniform_int(3);
    const char* head = qtype == 0 ? "color" : (qtype == 1 ? "shape" : "describe");
    q.question = {vocab::id(head),          vocab::id("at"),
                  vocab::id("row"),         vocab::id(std::to_string(r)),
                  vocab::id("col"),         vocab::id(std::to_string(c)),
                  vocab::id("?")};
    if (qtype == 0) {
        q.answer = {vocab::id(kColorWords[static_cast<std::size_t>(cell.color)])};
    } else if (qtype == 1) {
        q.answer = {vocab::id(kShapeWords[static_cast<std::size_t>(cell.shape)])};
    } else {
        q.answer = {vocab::id(kColorWords[static_cast<std::size_t>(cell.color)]),
                    vocab::id(kShapeWords[static_cast<std::size_t>(cell.shape)])};
    }
    return q;
}

QASample TaskGenerator::next_shifted() {
    QASample q;
    q.scene = random_scene();
    std::size_t target = rng_.uniform_int(q.scene.cells.size());
    q.oracle_patch_index = target;
    Cell& cell = q.scene.cells[target];
    if (rng_.uniform_int(2) == 0) {
        // "shape of the <color> thing ?" -- make the color unique
        auto col = static_cast<CellColor>(rng_.uniform_int(4));
        cell.shape = static_cast<CellShape>(rng_.uniform_int(3));
        cell.color = col;
        for (std::size_t i = 0; i < q.scene.cells.size(); ++i) {
            if (i == target) continue;
            Cell& other = q.scene.cells[i];
            if (other.shape != CellShape::Empty && other.color == col) {
                other.color = static_cast<CellColor>(
                    (static_cast<std::size_t>(col) + 1 + rng_.uniform_int(3)) % 4);
            }
        }
        q.question = {vocab::id("shape"), vocab::id("of"),    vocab::id("the"),
                      vocab::id(kColorWords[static_cast<std::size_t>(col)]),
                      vocab::id("thing"), vocab::id("?")};
        q.answer = {vocab::id(kShapeWords[static_cast<std::size_t>(cell.shape)])};
    } else {
        // "color of the <shape> thing ?" -- make the shape unique
        auto sh = static_cast<CellShape>(rng_.uniform_int(3));
        cell.shape = sh;
        cell.color = static_cast<CellColor>(rng_.uniform_int(4));
        for (std::size_t i = 0; i < q.scene.cells.size(); ++i) {
            if (i == target) continue;
            Cell& other = q.scene.cells[i];
            if (other.shape == sh) {
                std::size_t pick = rng_.uniform_int(3);  // other shapes or empty
                std::size_t alt = (static_cast<std::size_t>(sh) + 1 + pick) % 4;
                other.shape = static_cast<CellShape>(alt);
            }
        }
        q.question = {vocab::id("color"), vocab::id("of"),    vocab::id("the"),
                      vocab::id(kShapeWords[static_cast<std::size_t>(sh)]),
                      vocab::id("thing"), vocab::id("?")};
        q.answer = {vocab::id(kColorWords[static_cast<std::size_t>(cell.color)])};
    }
    return q;
}

std::vector<std::size_t> GenerationTrace::answer_tokens() const {
    std::vector<std::size_t> out = output_tokens;
    if (!out.empty() && out.back() == vocab::kEos) out.pop_back();
    return out;
}

ToyLvlm::ToyLvlm(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    init_params();
}

Parameter* ToyLvlm::add_param(const std::string& name, std::vector<std::size_t> shape) {
    params_.push_back(std::make_unique<Parameter>());
    Parameter* p = params_.back().get();
    p->name = name;
    p->value = Tensor::zeros(std::move(shape));
    return p;
}

void ToyLvlm::init_params() {
    const std::size_t d = cfg_.model_dim;
    const std::size_t v = cfg_.vocab_size;
    Rng rng(cfg_.seed);

    auto xavier = [&](Parameter* p, std::size_t fan_in, std::size_t fan_out) {
        double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            p->value[i] = rng.uniform(-limit, limit);
        }
    };
    auto small_normal = [&](Parameter* p) {
        for (std::size_t i = 0; i < p->value.size(); ++i) p->value[i] = 0.02 * rng.normal();
    };

    small_normal(add_param("tok_embed", {v, d}));
    small_normal(add_param("pos_embed", {cfg_.max_seq_len, d}));
    xavier(add_param("patch_proj", {SyntheticScene::kFeatureDim, d}),
           SyntheticScene::kFeatureDim, d);
    add_param("patch_bias", {d});
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        std::string pre = "l" + std::to_string(l) + ".";
        xavier(add_param(pre + "attn.wq", {d, d}), d, d);
        xavier(add_param(pre + "attn.wk", {d, d}), d, d);
        xavier(add_param(pre + "attn.wv", {d, d}), d, d);
        xavier(add_param(pre + "attn.wo", {d, d}), d, d);
        add_param(pre + "ln1.g", {d})->value.fill(1.0);
        add_param(pre + "ln1.b", {d});
        add_param(pre + "ln2.g", {d})->value.fill(1.0);
        add_param(pre + "ln2.b", {d});
        xavier(add_param(pre + "mlp.w1", {d, 4 * d}), d, 4 * d);
        add_param(pre + "mlp.b1", {4 * d});
        xavier(add_param(pre + "mlp.w2", {4 * d, d}), 4 * d, d);
        add_param(pre + "mlp.b2", {d});
    }
    add_param("final_ln.g", {d})->value.fill(1.0);
    add_param("final_ln.b", {d});
    xavier(add_param("head.w", {d, v}), d, v);
    add_param("head.b", {v});
}

std::vector<Parameter*> ToyLvlm::parameters() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
}

Parameter* ToyLvlm::find_param(const std::string& name) {
    for (auto& p : params_) {
        if (p->name == name) return p.get();
    }
    throw std::invalid_argument("no such parameter: " + name);
}

Tensor ToyLvlm::embed_scene(const SyntheticScene& scene) const {
    if (scene.grid != cfg_.grid) {
        throw std::invalid_argument("scene grid does not match model config");
    }
    const std::size_t p = scene.n_patches(), d = cfg_.model_dim;
    const Tensor& proj = params_[2]->value;  // patch_proj
    const Tensor& bias = params_[3]->value;  // patch_bias
    Tensor out({p, d});
    double feats[SyntheticScene::kFeatureDim];
    for (std::size_t i = 0; i < p; ++i) {
        scene.cell_features(i, feats);
        double* row = out.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) row[j] = bias[j];
        for (std::size_t f = 0; f < SyntheticScene::kFeatureDim; ++f) {
            double fv = feats[f];
            if (fv == 0.0) continue;
            const double* pr = proj.data() + f * d;
            for (std::size_t j = 0; j < d; ++j) row[j] += fv * pr[j];
        }
    }
    return out;
}

Tensor mask_patches(const Tensor& scene_embedding, const std::vector<std::size_t>& indices) {
    Tensor out = scene_embedding;
    std::size_t p = out.rows(), d = out.cols();
    for (std::size_t idx : indices) {
        if (idx >= p) {
            throw std::out_of_range("mask index " + std::to_string(idx) +
                                    " out of range for " + std::to_string(p) + " patches");
        }
        std::memset(out.data() + idx * d, 0, d * sizeof(double));
    }
    return out;
}

ForwardGraphOut ToyLvlm::run_trunk(Graph& g, Node* x) {
    const std::size_t d = cfg_.model_dim, h = cfg_.n_heads, dh = d / h;
    const std::size_t t = x->value.rows();
    SoftmaxMask mask = causal_mask(t);
    ForwardGraphOut out;
    out.attn.resize(cfg_.n_layers);
    double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
        std::string pre = "l" + std::to_string(l) + ".";
        Node* xn = g.layer_norm(x, g.param(*find_param(pre + "ln1.g")),
                                g.param(*find_param(pre + "ln1.b")));
        Node* q = g.matmul(xn, g.param(*find_param(pre + "attn.wq")));
        Node* k = g.matmul(xn, g.param(*find_param(pre + "attn.wk")));
        Node* v = g.matmul(xn, g.param(*find_param(pre + "attn.wv")));
        Node* wo = g.param(*find_param(pre + "attn.wo"));
        Node* attn_sum = nullptr;
        for (std::size_t hi = 0; hi < h; ++hi) {
            Node* qh = g.slice(q, 0, t, hi * dh, (hi + 1) * dh);
            Node* kh = g.slice(k, 0, t, hi * dh, (hi + 1) * dh);
            Node* vh = g.slice(v, 0, t, hi * dh, (hi + 1) * dh);
            Node* scores = g.scale(g.matmul_nt(qh, kh), inv_sqrt_dh);
            Node* a = g.softmax_rows(scores, &mask);
            out.attn[l].push_back(a);
            Node* ctx = g.matmul(a, vh);
            Node* part = g.matmul(ctx, g.slice(wo, hi * dh, (hi + 1) * dh, 0, d));
            attn_sum = attn_sum ? g.add(attn_sum, part) : part;
        }
        x = g.add(x, attn_sum);
        Node* xn2 = g.layer_norm(x, g.param(*find_param(pre + "ln2.g")),
                                 g.param(*find_param(pre + "ln2.b")));
        Node* hid = g.gelu(g.add_rowvec(g.matmul(xn2, g.param(*find_param(pre + "mlp.w1"))),
                                        g.param(*find_param(pre + "mlp.b1"))));
        Node* mlp = g.add_rowvec(g.matmul(hid, g.param(*find_param(pre + "mlp.w2"))),
                                 g.param(*find_param(pre + "mlp.b2")));
        x = g.add(x, mlp);
    }
    out.hidden = g.layer_norm(x, g.param(*find_param("final_ln.g")),
                              g.param(*find_param("final_ln.b")));
    out.logits = g.add_rowvec(g.matmul(out.hidden, g.param(*find_param("head.w"))),
                              g.param(*find_param("head.b")));
    return out;
}

ForwardGraphOut ToyLvlm::forward_graph(Graph& g, const Tensor& scene_embedding,
                                       const std::vector<std::size_t>& text_tokens) {
    std::size_t p = scene_embedding.rows();
    std::size_t t = p + text_tokens.size();
    if (t > cfg_.max_seq_len) {
        throw CapacityError("sequence length " + std::to_string(t) + " exceeds max_seq_len " +
                            std::to_string(cfg_.max_seq_len));
    }
    Node* patch = g.input(scene_embedding);
    Node* text = g.embedding_lookup(g.param(*find_param("tok_embed")), text_tokens);
    Node* x = g.concat_rows(patch, text);
    Node* pos = g.slice(g.param(*find_param("pos_embed")), 0, t, 0, cfg_.model_dim);
    return run_trunk(g, g.add(x, pos));
}

ForwardGraphOut ToyLvlm::forward_graph_trainable(Graph& g, const SyntheticScene& scene,
                                                 const std::vector<std::size_t>& text_tokens) {
    std::size_t p = scene.n_patches();
    std::size_t t = p + text_tokens.size();
    if (t > cfg_.max_seq_len) {
        throw CapacityError("sequence length " + std::to_string(t) + " exceeds max_seq_len " +
                            std::to_string(cfg_.max_seq_len));
    }
    Node* feats = g.input(scene.feature_matrix());
    Node* patch = g.add_rowvec(g.matmul(feats, g.param(*find_param("patch_proj"))),
                               g.param(*find_param("patch_bias")));
    Node* text = g.embedding_lookup(g.param(*find_param("tok_embed")), text_tokens);
    Node* x = g.concat_rows(patch, text);
    Node* pos = g.slice(g.param(*find_param("pos_embed")), 0, t, 0, cfg_.model_dim);
    return run_trunk(g, g.add(x, pos));
}

GenerationTrace ToyLvlm::generate(const SyntheticScene& scene,
                                  const std::vector<std::size_t>& question,
                                  const GenOptions& opts) {
    GenerationTrace trace;
    trace.n_patches = scene.n_patches();
    trace.n_in = trace.n_patches + question.size();

    Tensor emb = embed_scene(scene);
    if (opts.masked_patches) emb = mask_patches(emb, *opts.masked_patches);

    std::size_t cap = opts.forced_tokens ? opts.forced_tokens : opts.max_new_tokens;
    std::vector<std::size_t> text = question;
    for (std::size_t step = 0; step < cap; ++step) {
        Graph g;
        ForwardGraphOut out = forward_graph(g, emb, text);
        std::size_t t = out.logits->value.rows();
        const double* row = out.logits->value.data() + (t - 1) * cfg_.vocab_size;
        std::size_t tok = argmax_row(row, cfg_.vocab_size);

        if (opts.record_attention) {
            std::vector<Tensor> step_attn;
            for (auto& layer : out.attn) {
                for (Node* a : layer) step_attn.push_back(a->value);
            }
            trace.attn_steps.push_back(std::move(step_attn));
        }
        trace.step_logits.emplace_back(
            Tensor({cfg_.vocab_size},
                   std::vector<double>(row, row + cfg_.vocab_size)));
        trace.output_tokens.push_back(tok);
        text.push_back(tok);
        if (!opts.forced_tokens && tok == vocab::kEos) break;
    }

    trace.tokens.assign(trace.n_patches, vocab::kPatch);
    trace.tokens.insert(trace.tokens.end(), text.begin(), text.end());

    // one full-length pass fills the hidden state for every position
    {
        Graph g;
        ForwardGraphOut out = forward_graph(g, emb, text);
        trace.last_hidden = out.hidden->value;
    }
    return trace;
}

PretrainResult ToyLvlm::pretrain(const PretrainConfig& cfg) {
    TaskGenerator gen_in(cfg_.grid, TaskGenerator::Distribution::InDomain, cfg.seed * 2 + 1);
    TaskGenerator gen_shift(cfg_.grid, TaskGenerator::Distribution::Shifted, cfg.seed * 2 + 2);
    Rng pick(cfg.seed * 2 + 3);

    std::vector<QASample> samples;
    samples.reserve(cfg.n_samples);
    for (std::size_t i = 0; i < cfg.n_samples; ++i) {
        bool shifted = pick.uniform() < cfg.shifted_fraction;
        samples.push_back(shifted ? gen_shift.next() : gen_in.next());
    }

    AdamOptimizer opt(cfg.learning_rate);
    std::vector<Parameter*> params = parameters();
    PretrainResult result;
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(cfg.seed + 7919 * (epoch + 1));
        for (std::size_t i = order.size(); i > 1; --i) {
            std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
        }
        double loss_sum = 0.0;
        for (std::size_t n = 0; n < order.size(); ++n) {
            const QASample& s = samples[order[n]];
            std::vector<std::size_t> text = s.question;
            text.insert(text.end(), s.answer.begin(), s.answer.end());
            text.push_back(vocab::kEos);
            std::vector<std::size_t> targets = s.answer;
            targets.push_back(vocab::kEos);
            std::size_t n_in = s.scene.n_patches() + s.question.size();
            std::size_t total = s.scene.n_patches() + text.size();

            Graph g;
            ForwardGraphOut out = forward_graph_trainable(g, s.scene, text);
            Node* rows = g.slice(out.logits, n_in - 1, total - 1, 0, cfg_.vocab_size);
            Node* loss = g.cross_entropy(rows, targets);
            double lv = loss->value[0];
            if (!std::isfinite(lv)) {
                throw TrainingError("loss diverged at step " + std::to_string(result.steps));
            }
            g.backward(loss);
            opt.step(params, g);
            loss_sum += lv;
            ++result.steps;
            if (cfg.verbose && cfg.log_every && result.steps % cfg.log_every == 0) {
                std::fprintf(stderr, "pretrain step %zu loss %.4f\n", result.steps,
                             loss_sum / static_cast<double>(n + 1));
            }
        }
        result.epoch_mean_loss.push_back(loss_sum / static_cast<double>(order.size()));
    }
    return result;
}

void ToyLvlm::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os.write("TLVM", 4);
    auto w32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
    auto w64 = [&](std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); };
    w32(1);  // version
    w32(static_cast<std::uint32_t>(cfg_.n_layers));
    w32(static_cast<std::uint32_t>(cfg_.n_heads));
    w32(static_cast<std::uint32_t>(cfg_.model_dim));
    w32(static_cast<std::uint32_t>(cfg_.grid));
    w32(static_cast<std::uint32_t>(cfg_.vocab_size));
    w32(static_cast<std::uint32_t>(cfg_.max_seq_len));
    w64(cfg_.seed);
    w32(static_cast<std::uint32_t>(params_.size()));
    for (const auto& p : params_) {
        w32(static_cast<std::uint32_t>(p->name.size()));
        os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
        p->value.serialize(os);
    }
    if (!os) throw std::runtime_error("failed writing checkpoint " + path);
}

ToyLvlm ToyLvlm::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "TLVM", 4) != 0) {
        throw std::runtime_error(path + ": bad toy model magic");
    }
    auto r32 = [&]() {
        std::uint32_t v = 0;
        is.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    auto r64 = [&]() {
        std::uint64_t v = 0;
        is.read(reinterpret_cast<char*>(&v), 8);
        return v;
    };
    std::uint32_t version = r32();
    if (version != 1) throw std::runtime_error("unsupported checkpoint version");
    ModelConfig cfg;
    cfg.n_layers = r32();
    cfg.n_heads = r32();
    cfg.model_dim = r32();
    cfg.grid = r32();
    cfg.vocab_size = r32();
    cfg.max_seq_len = r32();
    cfg.seed = r64();
    ToyLvlm model(cfg);
    std::uint32_t count = r32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t len = r32();
        std::string name(len, '\0');
        is.read(name.data(), len);
        Tensor t = Tensor::deserialize(is);
        Parameter* p = model.find_param(name);
        if (!p->value.same_shape(t)) {
            throw std::runtime_error("checkpoint shape mismatch for " + name);
        }
        p->value = std::move(t);
    }
    if (!is) throw std::runtime_error("truncated checkpoint " + path);
    return model;
}

}  // namespace fastrm
