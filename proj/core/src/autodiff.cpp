#include "fastrm/autodiff.hpp"

#include <cmath>
#include <cstring>

namespace fastrm {

namespace {

// c += or = a [m x k] * b [k x n]
void mm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
        std::size_t n, bool accumulate) {
    if (!accumulate) std::memset(c, 0, m * n * sizeof(double));
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t l = 0; l < k; ++l) {
            double av = ai[l];
            if (av == 0.0) continue;
            const double* bl = b + l * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
}

// c += or = a [m x k] * b^T where b is [n x k]
void mm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
           std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double s = 0.0;
            for (std::size_t l = 0; l < k; ++l) s += ai[l] * bj[l];
            ci[j] = accumulate ? ci[j] + s : s;
        }
    }
}

// c += a^T * b where a is [k x m], b is [k x n]
void mm_tn_acc(const double* a, const double* b, double* c, std::size_t k, std::size_t m,
               std::size_t n) {
    for (std::size_t l = 0; l < k; ++l) {
        const double* al = a + l * m;
        const double* bl = b + l * n;
        for (std::size_t i = 0; i < m; ++i) {
            double av = al[i];
            if (av == 0.0) continue;
            double* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
constexpr double kProbClamp = 1e-12;

}  // namespace

SoftmaxMask causal_mask(std::size_t n) {
    SoftmaxMask m(n * n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) m[i * n + j] = 1;
    }
    return m;
}

Node* Graph::make(Tensor value, std::vector<Node*> parents) {
    nodes_.push_back(std::make_unique<Node>());
    Node* n = nodes_.back().get();
    n->value = std::move(value);
    n->parents = std::move(parents);
    return n;
}

Node* Graph::input(Tensor value) { return make(std::move(value), {}); }

Node* Graph::param(Parameter& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    Node* n = input(p.value);
    bound_.emplace(&p, n);
    return n;
}

Node* Graph::matmul(Node* a, Node* b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
        throw ShapeError("matmul shape mismatch: " + av.shape_str() + " x " + bv.shape_str());
    }
    std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor out({m, n});
    mm(av.data(), bv.data(), out.data(), m, k, n, false);
    Node* c = make(std::move(out), {a, b});
    c->backward_fn = [a, b, c, m, k, n]() {
        const double* dc = c->grad.data();
        mm_nt(dc, b->value.data(), a->ensure_grad().data(), m, n, k, true);
        mm_tn_acc(a->value.data(), dc, b->ensure_grad().data(), m, k, n);
    };
    return c;
}

Node* Graph::matmul_nt(Node* a, Node* b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols()) {
        throw ShapeError("matmul_nt shape mismatch: " + av.shape_str() + " x " +
                         bv.shape_str() + "^T");
    }
    std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
    Tensor out({m, n});
    mm_nt(av.data(), bv.data(), out.data(), m, k, n, false);
    Node* c = make(std::move(out), {a, b});
    c->backward_fn = [a, b, c, m, k, n]() {
        const double* dc = c->grad.data();
        a->ensure_grad();
        b->ensure_grad();
        mm(dc, b->value.data(), a->grad.data(), m, n, k, true);
        mm_tn_acc(dc, a->value.data(), b->grad.data(), m, n, k);
    };
    return c;
}

Node* Graph::add(Node* a, Node* b) {
    if (!a->value.same_shape(b->value)) {
        throw ShapeError("add shape mismatch: " + a->value.shape_str() + " vs " +
                         b->value.shape_str());
    }
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b->value[i];
    Node* c = make(std::move(out), {a, b});
    c->backward_fn = [a, b, c]() {
        Tensor& da = a->ensure_grad();
        Tensor& db = b->ensure_grad();
        for (std::size_t i = 0; i < c->grad.size(); ++i) {
            da[i] += c->grad[i];
            db[i] += c->grad[i];
        }
    };
    return c;
}

Node* Graph::add_rowvec(Node* m, Node* v) {
    const Tensor& mv = m->value;
    std::size_t rows = mv.rows(), cols = mv.cols();
    if (v->value.size() != cols) {
        throw ShapeError("add_rowvec width mismatch: " + mv.shape_str() + " vs " +
                         v->value.shape_str());
    }
    Tensor out = mv;
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] += v->value[j];
    }
    Node* c = make(std::move(out), {m, v});
    c->backward_fn = [m, v, c, rows, cols]() {
        Tensor& dm = m->ensure_grad();
        Tensor& dv = v->ensure_grad();
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
                double g = c->grad[i * cols + j];
                dm[i * cols + j] += g;
                dv[j] += g;
            }
        }
    };
    return c;
}

Node* Graph::mul(Node* a, Node* b) {
    if (!a->value.same_shape(b->value)) {
        throw ShapeError("mul shape mismatch: " + a->value.shape_str() + " vs " +
                         b->value.shape_str());
    }
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b->value[i];
    Node* c = make(std::move(out), {a, b});
    c->backward_fn = [a, b, c]() {
        Tensor& da = a->ensure_grad();
        Tensor& db = b->ensure_grad();
        for (std::size_t i = 0; i < c->grad.size(); ++i) {
            da[i] += c->grad[i] * b->value[i];
            db[i] += c->grad[i] * a->value[i];
        }
    };
    return c;
}

Node* Graph::scale(Node* a, double k) {
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= k;
    Node* c = make(std::move(out), {a});
    c->backward_fn = [a, c, k]() {
        Tensor& da = a->ensure_grad();
        for (std::size_t i = 0; i < c->grad.size(); ++i) da[i] += k * c->grad[i];
    };
    return c;
}

Node* Graph::softmax_rows(Node* x, const SoftmaxMask* mask) {
    const Tensor& xv = x->value;
    std::size_t m = xv.rows(), n = xv.cols();
    if (mask && mask->size() != m * n) {
        throw ShapeError("softmax mask size mismatch");
    }
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* xi = xv.data() + i * n;
        double* oi = out.data() + i * n;
        double mx = -1e308;
        bool any = false;
        for (std::size_t j = 0; j < n; ++j) {
            if (mask && !(*mask)[i * n + j]) continue;
            any = true;
            if (xi[j] > mx) mx = xi[j];
        }
        if (!any) throw std::invalid_argument("softmax_rows: fully masked row " + std::to_string(i));
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (mask && !(*mask)[i * n + j]) {
                oi[j] = 0.0;
            } else {
                oi[j] = std::exp(xi[j] - mx);
                z += oi[j];
            }
        }
        for (std::size_t j = 0; j < n; ++j) oi[j] /= z;
    }
    Node* c = make(std::move(out), {x});
    c->backward_fn = [x, c, m, n]() {
        Tensor& dx = x->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            const double* yi = c->value.data() + i * n;
            const double* dyi = c->grad.data() + i * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += dyi[j] * yi[j];
            double* dxi = dx.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) dxi[j] += yi[j] * (dyi[j] - dot);
        }
    };
    return c;
}

Node* Graph::layer_norm(Node* x, Node* gain, Node* bias) {
    const Tensor& xv = x->value;
    std::size_t m = xv.rows(), n = xv.cols();
    if (gain->value.size() != n || bias->value.size() != n) {
        throw ShapeError("layer_norm affine size mismatch");
    }
    constexpr double eps = 1e-5;
    Tensor out({m, n});
    Tensor xhat({m, n});
    Tensor inv_sigma({m});
    for (std::size_t i = 0; i < m; ++i) {
        const double* xi = xv.data() + i * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += xi[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= static_cast<double>(n);
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (std::size_t j = 0; j < n; ++j) {
            double xh = (xi[j] - mu) * is;
            xhat[i * n + j] = xh;
            out[i * n + j] = gain->value[j] * xh + bias->value[j];
        }
    }
    Node* c = make(std::move(out), {x, gain, bias});
    auto xh = std::make_shared<Tensor>(std::move(xhat));
    auto is = std::make_shared<Tensor>(std::move(inv_sigma));
    c->backward_fn = [x, gain, bias, c, xh, is, m, n]() {
        Tensor& dx = x->ensure_grad();
        Tensor& dg = gain->ensure_grad();
        Tensor& db = bias->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            const double* dyi = c->grad.data() + i * n;
            const double* xhi = xh->data() + i * n;
            double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                double dxhat = dyi[j] * gain->value[j];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhi[j];
                dg[j] += dyi[j] * xhi[j];
                db[j] += dyi[j];
            }
            mean_dxhat /= static_cast<double>(n);
            mean_dxhat_xhat /= static_cast<double>(n);
            double isg = (*is)[i];
            double* dxi = dx.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                double dxhat = dyi[j] * gain->value[j];
                dxi[j] += isg * (dxhat - mean_dxhat - xhi[j] * mean_dxhat_xhat);
            }
        }
    };
    return c;
}

Node* Graph::gelu(Node* x) {
    Tensor out = x->value;
    for (std::size_t i = 0; i < out.size(); ++i) {
        double v = out[i];
        double u = kGeluC * (v + kGeluA * v * v * v);
        out[i] = 0.5 * v * (1.0 + std::tanh(u));
    }
    Node* c = make(std::move(out), {x});
    c->backward_fn = [x, c]() {
        Tensor& dx = x->ensure_grad();
        for (std::size_t i = 0; i < c->grad.size(); ++i) {
            double v = x->value[i];
            double u = kGeluC * (v + kGeluA * v * v * v);
            double t = std::tanh(u);
            double du = kGeluC * (1.0 + 3.0 * kGeluA * v * v);
            double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
            dx[i] += c->grad[i] * d;
        }
    };
    return c;
}

Node* Graph::sigmoid(Node* x) {
    Tensor out = x->value;
    for (std::size_t i = 0; i < out.size(); ++i) {
        double v = out[i];
        out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                          : std::exp(v) / (1.0 + std::exp(v));
    }
    Node* c = make(std::move(out), {x});
    c->backward_fn = [x, c]() {
        Tensor& dx = x->ensure_grad();
        for (std::size_t i = 0; i < c->grad.size(); ++i) {
            double y = c->value[i];
            dx[i] += c->grad[i] * y * (1.0 - y);
        }
    };
    return c;
}

Node* Graph::embedding_lookup(Node* table, const std::vector<std::size_t>& ids) {
    const Tensor& tv = table->value;
    std::size_t v = tv.rows(), d = tv.cols();
    Tensor out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= v) throw std::out_of_range("embedding id out of range");
        std::memcpy(out.data() + i * d, tv.data() + ids[i] * d, d * sizeof(double));
    }
    Node* c = make(std::move(out), {table});
    auto ids_copy = std::make_shared<std::vector<std::size_t>>(ids);
    c->backward_fn = [table, c, ids_copy, d]() {
        Tensor& dt = table->ensure_grad();
        for (std::size_t i = 0; i < ids_copy->size(); ++i) {
            const double* g = c->grad.data() + i * d;
            double* row = dt.data() + (*ids_copy)[i] * d;
            for (std::size_t j = 0; j < d; ++j) row[j] += g[j];
        }
    };
    return c;
}

Node* Graph::concat_rows(Node* a, Node* b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (av.cols() != bv.cols()) {
        throw ShapeError("concat_rows width mismatch: " + av.shape_str() + " vs " +
                         bv.shape_str());
    }
    std::size_t n = av.cols(), ra = av.rows(), rb = bv.rows();
    Tensor out({ra + rb, n});
    std::memcpy(out.data(), av.data(), ra * n * sizeof(double));
    std::memcpy(out.data() + ra * n, bv.data(), rb * n * sizeof(double));
    Node* c = make(std::move(out), {a, b});
    c->backward_fn = [a, b, c, ra, rb, n]() {
        Tensor& da = a->ensure_grad();
        Tensor& db = b->ensure_grad();
        for (std::size_t i = 0; i < ra * n; ++i) da[i] += c->grad[i];
        for (std::size_t i = 0; i < rb * n; ++i) db[i] += c->grad[ra * n + i];
    };
    return c;
}

Node* Graph::slice(Node* x, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
    const Tensor& xv = x->value;
    std::size_t rows = xv.rows(), cols = xv.cols();
    if (r1 > rows || c1 > cols || r0 >= r1 || c0 >= c1) {
        throw std::out_of_range("slice bounds [" + std::to_string(r0) + "," +
                                std::to_string(r1) + ")x[" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") invalid for " + xv.shape_str());
    }
    std::size_t m = r1 - r0, n = c1 - c0;
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        std::memcpy(out.data() + i * n, xv.data() + (r0 + i) * cols + c0, n * sizeof(double));
    }
    Node* c = make(std::move(out), {x});
    c->backward_fn = [x, c, r0, c0, m, n, cols]() {
        Tensor& dx = x->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                dx[(r0 + i) * cols + c0 + j] += c->grad[i * n + j];
            }
        }
    };
    return c;
}

Node* Graph::sum(Node* x) {
    double s = 0.0;
    for (std::size_t i = 0; i < x->value.size(); ++i) s += x->value[i];
    Node* c = make(Tensor::scalar(s), {x});
    c->backward_fn = [x, c]() {
        Tensor& dx = x->ensure_grad();
        double g = c->grad[0];
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g;
    };
    return c;
}

Node* Graph::binary_cross_entropy(Node* probs, const Tensor& targets) {
    if (!probs->value.same_shape(targets)) {
        throw ShapeError("bce shape mismatch: " + probs->value.shape_str() + " vs " +
                         shape_to_string(targets.shape()));
    }
    std::size_t n = probs->value.size();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double p = std::min(1.0 - kProbClamp, std::max(kProbClamp, probs->value[i]));
        double t = targets[i];
        loss -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    }
    loss /= static_cast<double>(n);
    Node* c = make(Tensor::scalar(loss), {probs});
    auto tcopy = std::make_shared<Tensor>(targets);
    c->backward_fn = [probs, c, tcopy, n]() {
        Tensor& dp = probs->ensure_grad();
        double g = c->grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            double p = std::min(1.0 - kProbClamp, std::max(kProbClamp, probs->value[i]));
            double t = (*tcopy)[i];
            dp[i] += g * (-t / p + (1.0 - t) / (1.0 - p));
        }
    };
    return c;
}

Node* Graph::cross_entropy(Node* logits, const std::vector<std::size_t>& targets) {
    const Tensor& lv = logits->value;
    std::size_t m = lv.rows(), v = lv.cols();
    if (targets.size() != m) throw ShapeError("cross_entropy target count mismatch");
    Tensor softmax({m, v});
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const double* li = lv.data() + i * v;
        double mx = li[0];
        for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, li[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) {
            softmax[i * v + j] = std::exp(li[j] - mx);
            z += softmax[i * v + j];
        }
        for (std::size_t j = 0; j < v; ++j) softmax[i * v + j] /= z;
        if (targets[i] >= v) throw std::out_of_range("cross_entropy target id out of range");
        loss -= std::log(std::max(1e-300, softmax[i * v + targets[i]]));
    }
    loss /= static_cast<double>(m);
    Node* c = make(Tensor::scalar(loss), {logits});
    auto sm = std::make_shared<Tensor>(std::move(softmax));
    auto tg = std::make_shared<std::vector<std::size_t>>(targets);
    c->backward_fn = [logits, c, sm, tg, m, v]() {
        Tensor& dl = logits->ensure_grad();
        double g = c->grad[0] / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < v; ++j) {
                double d = (*sm)[i * v + j] - (j == (*tg)[i] ? 1.0 : 0.0);
                dl[i * v + j] += g * d;
            }
        }
    };
    return c;
}

void Graph::backward(Node* loss) {
    if (loss->value.size() != 1) {
        throw std::invalid_argument("backward requires a scalar loss, got " +
                                    loss->value.shape_str());
    }
    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node* n = it->get();
        if (n->grad_set && n->backward_fn) n->backward_fn();
    }
}

const Tensor* Graph::grad_of(const Parameter& p) const {
    auto it = bound_.find(&p);
    if (it == bound_.end() || !it->second->grad_set) return nullptr;
    return &it->second->grad;
}

void AdamOptimizer::step(const std::vector<Parameter*>& params, const Graph& g) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (Parameter* p : params) {
        if (!p->trainable) continue;
        auto& slot = slots_[p->name];
        if (slot.m.size() == 0) {
            slot.m = Tensor::zeros(p->value.shape());
            slot.v = Tensor::zeros(p->value.shape());
        }
        const Tensor* grad = g.grad_of(*p);
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            double gi = grad ? (*grad)[i] : 0.0;
            slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * gi;
            slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * gi * gi;
            double mhat = slot.m[i] / bc1;
            double vhat = slot.v[i] / bc2;
            p->value[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

}  // namespace fastrm
