#include "blockdiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <unordered_set>

namespace blockdiff {

namespace {

thread_local bool g_grad_enabled = true;

size_t shape_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d < 1) {
            throw std::invalid_argument("tensor: non-positive dimension");
        }
        n *= static_cast<size_t>(d);
    }
    if (shape.empty()) {
        throw std::invalid_argument("tensor: rank-0 shapes are not supported");
    }
    return n;
}

void ensure_finite(const std::vector<float>& data, const char* op) {
    for (float v : data) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(std::string(op) + ": non-finite value produced");
        }
    }
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected a rank-2 tensor");
    }
}

// c[m x n] += a[m x k] * b[k x n]
void mm_acc(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<size_t>(i) * k;
        float* crow = c + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const float av = arow[p];
            const float* brow = b + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

// c[m x k] += a[m x n] * b[k x n]^T
void mm_nt_acc(const float* a, const float* b, float* c, int m, int n, int k) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<size_t>(i) * n;
        float* crow = c + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
            const float* brow = b + static_cast<size_t>(p) * n;
            float acc = 0.0f;
            for (int j = 0; j < n; ++j) {
                acc += arow[j] * brow[j];
            }
            crow[p] += acc;
        }
    }
}

// c[k x n] += a[m x k]^T * b[m x n]
void mm_tn_acc(const float* a, const float* b, float* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<size_t>(i) * k;
        const float* brow = b + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
            const float av = arow[p];
            float* crow = c + static_cast<size_t>(p) * n;
            for (int j = 0; j < n; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

}  // namespace

Tensor wrap_node(std::shared_ptr<TensorNode> n) { return Tensor(std::move(n)); }

static Tensor make_node(std::vector<int> shape, std::vector<float> data,
                        std::vector<std::shared_ptr<TensorNode>> parents,
                        std::function<void(const std::vector<float>&, GradStore&)> bwd,
                        const char* op) {
    ensure_finite(data, op);
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    bool needs_grad = false;
    if (g_grad_enabled) {
        for (const auto& p : parents) {
            if (p->requires_grad) {
                needs_grad = true;
                break;
            }
        }
    }
    n->requires_grad = needs_grad;
    if (needs_grad) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(bwd);
    }
    return wrap_node(std::move(n));
}

// ---- Tensor basics --------------------------------------------------------

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
    if (shape_numel(shape) != data.size()) {
        throw std::invalid_argument("tensor: data length does not match shape");
    }
    ensure_finite(data, "from_data");
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return wrap_node(std::move(n));
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
    size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<float>(n, value), requires_grad);
}

Tensor Tensor::scalar(float value) { return from_data({1}, {value}, false); }

Tensor Tensor::randn(std::vector<int> shape, Rng& rng, float stddev, bool requires_grad) {
    size_t n = shape_numel(shape);
    std::vector<float> data(n);
    for (size_t i = 0; i < n; ++i) {
        data[i] = static_cast<float>(rng.normal() * stddev);
    }
    return from_data(std::move(shape), std::move(data), requires_grad);
}

float Tensor::item() const {
    if (numel() != 1) {
        throw std::runtime_error("item: tensor is not a scalar");
    }
    return n_->data[0];
}

// ---- GradStore -------------------------------------------------------------

std::vector<float>& GradStore::slot(const TensorNode* n, size_t size) {
    auto it = grads_.find(n);
    if (it == grads_.end()) {
        it = grads_.emplace(n, std::vector<float>(size, 0.0f)).first;
    }
    return it->second;
}

const std::vector<float>* GradStore::find(const Tensor& t) const { return find(t.node()); }

const std::vector<float>* GradStore::find(const TensorNode* n) const {
    auto it = grads_.find(n);
    return it == grads_.end() ? nullptr : &it->second;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const int m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw std::invalid_argument("matmul: inner dimensions do not match");
    }
    std::vector<float> out(static_cast<size_t>(m) * n, 0.0f);
    mm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);

    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return make_node(
        {m, n}, std::move(out), {an, bn},
        [an, bn, m, k, n](const std::vector<float>& g, GradStore& gs) {
            if (an->requires_grad) {
                mm_nt_acc(g.data(), bn->data.data(), gs.slot(an.get(), an->numel()).data(), m, n, k);
            }
            if (bn->requires_grad) {
                mm_tn_acc(an->data.data(), g.data(), gs.slot(bn.get(), bn->numel()).data(), m, k, n);
            }
        },
        "matmul");
}

Tensor add(const Tensor& a, const Tensor& b) {
    const bool same = a.shape() == b.shape();
    const bool row_bcast = a.rank() == 2 &&
                           ((b.rank() == 1 && b.dim(0) == a.cols()) ||
                            (b.rank() == 2 && b.rows() == 1 && b.cols() == a.cols()));
    if (!same && !row_bcast) {
        throw std::invalid_argument("add: shapes are neither equal nor row-broadcastable");
    }
    std::vector<float> out(a.numel());
    if (same) {
        for (size_t i = 0; i < out.size(); ++i) {
            out[i] = a.data()[i] + b.data()[i];
        }
    } else {
        const int m = a.rows(), n = a.cols();
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < n; ++j) {
                out[static_cast<size_t>(i) * n + j] = a.data()[static_cast<size_t>(i) * n + j] + b.data()[j];
            }
        }
    }

    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return make_node(
        a.shape(), std::move(out), {an, bn},
        [an, bn, same](const std::vector<float>& g, GradStore& gs) {
            if (an->requires_grad) {
                auto& da = gs.slot(an.get(), an->numel());
                for (size_t i = 0; i < g.size(); ++i) {
                    da[i] += g[i];
                }
            }
            if (bn->requires_grad) {
                auto& db = gs.slot(bn.get(), bn->numel());
                if (same) {
                    for (size_t i = 0; i < g.size(); ++i) {
                        db[i] += g[i];
                    }
                } else {
                    const size_t n = bn->numel();
                    const size_t m = g.size() / n;
                    for (size_t i = 0; i < m; ++i) {
                        for (size_t j = 0; j < n; ++j) {
                            db[j] += g[i * n + j];
                        }
                    }
                }
            }
        },
        "add");
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("mul: shapes must match");
    }
    std::vector<float> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] * b.data()[i];
    }
    auto an = a.node_ptr();
    auto bn = b.node_ptr();
    return make_node(
        a.shape(), std::move(out), {an, bn},
        [an, bn](const std::vector<float>& g, GradStore& gs) {
            if (an->requires_grad) {
                auto& da = gs.slot(an.get(), an->numel());
                for (size_t i = 0; i < g.size(); ++i) {
                    da[i] += g[i] * bn->data[i];
                }
            }
            if (bn->requires_grad) {
                auto& db = gs.slot(bn.get(), bn->numel());
                for (size_t i = 0; i < g.size(); ++i) {
                    db[i] += g[i] * an->data[i];
                }
            }
        },
        "mul");
}

Tensor scale(const Tensor& a, float s) {
    if (!std::isfinite(s)) {
        throw std::invalid_argument("scale: non-finite factor");
    }
    std::vector<float> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = a.data()[i] * s;
    }
    auto an = a.node_ptr();
    return make_node(
        a.shape(), std::move(out), {an},
        [an, s](const std::vector<float>& g, GradStore& gs) {
            auto& da = gs.slot(an.get(), an->numel());
            for (size_t i = 0; i < g.size(); ++i) {
                da[i] += g[i] * s;
            }
        },
        "scale");
}

static const double kInvSqrt2 = 0.7071067811865475244;
static const double kInvSqrt2Pi = 0.3989422804014326779;

Tensor gelu(const Tensor& a) {
    std::vector<float> out(a.numel());
    for (size_t i = 0; i < out.size(); ++i) {
        const double x = a.data()[i];
        out[i] = static_cast<float>(0.5 * x * (1.0 + std::erf(x * kInvSqrt2)));
    }
    auto an = a.node_ptr();
    return make_node(
        a.shape(), std::move(out), {an},
        [an](const std::vector<float>& g, GradStore& gs) {
            auto& da = gs.slot(an.get(), an->numel());
            for (size_t i = 0; i < g.size(); ++i) {
                const double x = an->data[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
                da[i] += g[i] * static_cast<float>(cdf + x * pdf);
            }
        },
        "gelu");
}

static const float kRmsEps = 1e-6f;

Tensor rmsnorm(const Tensor& x, const Tensor& gain) {
    require_rank2(x, "rmsnorm");
    const int m = x.rows(), n = x.cols();
    if (gain.rank() != 1 || gain.dim(0) != n) {
        throw std::invalid_argument("rmsnorm: gain must be rank-1 of width cols(x)");
    }
    std::vector<float> out(x.numel());
    auto rinv = std::make_shared<std::vector<float>>(m);
    for (int i = 0; i < m; ++i) {
        const float* row = x.data().data() + static_cast<size_t>(i) * n;
        double ss = 0.0;
        for (int j = 0; j < n; ++j) {
            ss += static_cast<double>(row[j]) * row[j];
        }
        const float r = static_cast<float>(1.0 / std::sqrt(ss / n + kRmsEps));
        (*rinv)[i] = r;
        float* orow = out.data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            orow[j] = row[j] * gain.data()[j] * r;
        }
    }
    auto xn = x.node_ptr();
    auto gn = gain.node_ptr();
    return make_node(
        x.shape(), std::move(out), {xn, gn},
        [xn, gn, rinv, m, n](const std::vector<float>& g, GradStore& gs) {
            for (int i = 0; i < m; ++i) {
                const float* xrow = xn->data.data() + static_cast<size_t>(i) * n;
                const float* grow = g.data() + static_cast<size_t>(i) * n;
                const float r = (*rinv)[i];
                if (xn->requires_grad) {
                    auto& dx = gs.slot(xn.get(), xn->numel());
                    double s = 0.0;
                    for (int j = 0; j < n; ++j) {
                        s += static_cast<double>(grow[j]) * gn->data[j] * xrow[j];
                    }
                    const float coef = static_cast<float>(s) * r * r * r / n;
                    float* dxrow = dx.data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) {
                        dxrow[j] += r * gn->data[j] * grow[j] - coef * xrow[j];
                    }
                }
                if (gn->requires_grad) {
                    auto& dg = gs.slot(gn.get(), gn->numel());
                    for (int j = 0; j < n; ++j) {
                        dg[j] += grow[j] * xrow[j] * r;
                    }
                }
            }
        },
        "rmsnorm");
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    require_rank2(table, "embedding");
    const int v = table.rows(), d = table.cols();
    const int L = static_cast<int>(ids.size());
    if (L < 1) {
        throw std::invalid_argument("embedding: empty id list");
    }
    std::vector<float> out(static_cast<size_t>(L) * d);
    for (int i = 0; i < L; ++i) {
        if (ids[i] < 0 || ids[i] >= v) {
            throw std::out_of_range("embedding: id out of table range");
        }
        std::copy_n(table.data().data() + static_cast<size_t>(ids[i]) * d, d,
                    out.data() + static_cast<size_t>(i) * d);
    }
    auto tn = table.node_ptr();
    auto ids_copy = std::make_shared<std::vector<int>>(ids);
    return make_node(
        {L, d}, std::move(out), {tn},
        [tn, ids_copy, d](const std::vector<float>& g, GradStore& gs) {
            auto& dt = gs.slot(tn.get(), tn->numel());
            const int L = static_cast<int>(ids_copy->size());
            for (int i = 0; i < L; ++i) {
                float* drow = dt.data() + static_cast<size_t>((*ids_copy)[i]) * d;
                const float* grow = g.data() + static_cast<size_t>(i) * d;
                for (int j = 0; j < d; ++j) {
                    drow[j] += grow[j];
                }
            }
        },
        "embedding");
}

Tensor transpose(const Tensor& a) {
    require_rank2(a, "transpose");
    const int m = a.rows(), n = a.cols();
    std::vector<float> out(a.numel());
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            out[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
        }
    }
    auto an = a.node_ptr();
    return make_node(
        {n, m}, std::move(out), {an},
        [an, m, n](const std::vector<float>& g, GradStore& gs) {
            auto& da = gs.slot(an.get(), an->numel());
            for (int j = 0; j < n; ++j) {
                for (int i = 0; i < m; ++i) {
                    da[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
                }
            }
        },
        "transpose");
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
    require_rank2(a, "slice_rows");
    const int m = a.rows(), n = a.cols();
    if (r0 < 0 || r1 > m || r0 >= r1) {
        throw std::invalid_argument("slice_rows: bad row range");
    }
    std::vector<float> out(a.data().begin() + static_cast<size_t>(r0) * n,
                           a.data().begin() + static_cast<size_t>(r1) * n);
    auto an = a.node_ptr();
    return make_node(
        {r1 - r0, n}, std::move(out), {an},
        [an, r0, n](const std::vector<float>& g, GradStore& gs) {
            auto& da = gs.slot(an.get(), an->numel());
            for (size_t i = 0; i < g.size(); ++i) {
                da[static_cast<size_t>(r0) * n + i] += g[i];
            }
        },
        "slice_rows");
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
    require_rank2(a, "slice_cols");
    const int m = a.rows(), n = a.cols();
    if (c0 < 0 || c1 > n || c0 >= c1) {
        throw std::invalid_argument("slice_cols: bad column range");
    }
    const int w = c1 - c0;
    std::vector<float> out(static_cast<size_t>(m) * w);
    for (int i = 0; i < m; ++i) {
        std::copy_n(a.data().data() + static_cast<size_t>(i) * n + c0, w,
                    out.data() + static_cast<size_t>(i) * w);
    }
    auto an = a.node_ptr();
    return make_node(
        {m, w}, std::move(out), {an},
        [an, c0, w, n, m](const std::vector<float>& g, GradStore& gs) {
            auto& da = gs.slot(an.get(), an->numel());
            for (int i = 0; i < m; ++i) {
                for (int j = 0; j < w; ++j) {
                    da[static_cast<size_t>(i) * n + c0 + j] += g[static_cast<size_t>(i) * w + j];
                }
            }
        },
        "slice_cols");
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_rows: no parts");
    }
    const int n = parts[0].cols();
    int m = 0;
    for (const auto& p : parts) {
        require_rank2(p, "concat_rows");
        if (p.cols() != n) {
            throw std::invalid_argument("concat_rows: column widths differ");
        }
        m += p.rows();
    }
    std::vector<float> out;
    out.reserve(static_cast<size_t>(m) * n);
    std::vector<std::shared_ptr<TensorNode>> pn;
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        pn.push_back(p.node_ptr());
    }
    auto parents = pn;
    return make_node(
        {m, n}, std::move(out), std::move(parents),
        [pn](const std::vector<float>& g, GradStore& gs) {
            size_t off = 0;
            for (const auto& p : pn) {
                if (p->requires_grad) {
                    auto& dp = gs.slot(p.get(), p->numel());
                    for (size_t i = 0; i < p->numel(); ++i) {
                        dp[i] += g[off + i];
                    }
                }
                off += p->numel();
            }
        },
        "concat_rows");
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_cols: no parts");
    }
    const int m = parts[0].rows();
    int n = 0;
    for (const auto& p : parts) {
        require_rank2(p, "concat_cols");
        if (p.rows() != m) {
            throw std::invalid_argument("concat_cols: row counts differ");
        }
        n += p.cols();
    }
    std::vector<float> out(static_cast<size_t>(m) * n);
    std::vector<std::shared_ptr<TensorNode>> pn;
    int c0 = 0;
    for (const auto& p : parts) {
        const int w = p.cols();
        for (int i = 0; i < m; ++i) {
            std::copy_n(p.data().data() + static_cast<size_t>(i) * w, w,
                        out.data() + static_cast<size_t>(i) * n + c0);
        }
        c0 += w;
        pn.push_back(p.node_ptr());
    }
    auto parents = pn;
    return make_node(
        {m, n}, std::move(out), std::move(parents),
        [pn, m, n](const std::vector<float>& g, GradStore& gs) {
            int c0 = 0;
            for (const auto& p : pn) {
                const int w = p->shape[1];
                if (p->requires_grad) {
                    auto& dp = gs.slot(p.get(), p->numel());
                    for (int i = 0; i < m; ++i) {
                        for (int j = 0; j < w; ++j) {
                            dp[static_cast<size_t>(i) * w + j] += g[static_cast<size_t>(i) * n + c0 + j];
                        }
                    }
                }
                c0 += w;
            }
        },
        "concat_cols");
}

static const float kMaskPenalty = -1e9f;

Tensor masked_softmax(const Tensor& scores, const AttnMask& mask) {
    require_rank2(scores, "masked_softmax");
    const int m = scores.rows(), n = scores.cols();
    if (mask.n_query != m || mask.n_key != n) {
        throw std::invalid_argument("masked_softmax: mask shape mismatch");
    }
    std::vector<float> out(scores.numel(), 0.0f);
    for (int i = 0; i < m; ++i) {
        const float* srow = scores.data().data() + static_cast<size_t>(i) * n;
        float* orow = out.data() + static_cast<size_t>(i) * n;
        // additive -1e9 surrogate at disallowed keys; max over the penalized
        // row equals the max over allowed keys for any sane score range
        float mx = -std::numeric_limits<float>::infinity();
        bool any = false;
        for (int j = 0; j < n; ++j) {
            const float s = mask.at(i, j) ? srow[j] : srow[j] + kMaskPenalty;
            if (mask.at(i, j)) {
                any = true;
            }
            if (s > mx) {
                mx = s;
            }
        }
        if (!any) {
            throw std::runtime_error("masked_softmax: fully masked query row");
        }
        double z = 0.0;
        for (int j = 0; j < n; ++j) {
            if (mask.at(i, j)) {
                orow[j] = std::exp(srow[j] - mx);
                z += orow[j];
            }
        }
        const float inv = static_cast<float>(1.0 / z);
        for (int j = 0; j < n; ++j) {
            if (mask.at(i, j)) {
                orow[j] *= inv;
            }
            // disallowed entries stay exactly 0
        }
    }
    auto sn = scores.node_ptr();
    auto probs = std::make_shared<std::vector<float>>(out);
    return make_node(
        {m, n}, std::move(out), {sn},
        [sn, probs, m, n](const std::vector<float>& g, GradStore& gs) {
            auto& ds = gs.slot(sn.get(), sn->numel());
            for (int i = 0; i < m; ++i) {
                const float* p = probs->data() + static_cast<size_t>(i) * n;
                const float* grow = g.data() + static_cast<size_t>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) {
                    dot += static_cast<double>(grow[j]) * p[j];
                }
                float* drow = ds.data() + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) {
                    // p[j] == 0 at disallowed keys, so their score grad stays 0
                    drow[j] += p[j] * (grow[j] - static_cast<float>(dot));
                }
            }
        },
        "masked_softmax");
}

Tensor weighted_masked_ce(const Tensor& logits, const std::vector<int>& targets,
                          const std::vector<float>& weights, const std::vector<uint8_t>& active) {
    require_rank2(logits, "weighted_masked_ce");
    const int L = logits.rows(), V = logits.cols();
    if (static_cast<int>(targets.size()) != L || static_cast<int>(weights.size()) != L ||
        static_cast<int>(active.size()) != L) {
        throw std::invalid_argument("weighted_masked_ce: targets/weights/active must have one entry per row");
    }
    int n_active = 0;
    for (int i = 0; i < L; ++i) {
        if (!active[i]) {
            continue;
        }
        ++n_active;
        if (targets[i] < 0 || targets[i] >= V) {
            throw std::out_of_range("weighted_masked_ce: target id outside vocabulary");
        }
        if (weights[i] < 0.0f) {
            throw std::invalid_argument("weighted_masked_ce: negative weight");
        }
    }
    if (n_active == 0) {
        std::fprintf(stderr, "weighted_masked_ce: empty active set, degenerate batch contributes 0\n");
        // constant zero: no parents, no gradient
        return Tensor::scalar(0.0f);
    }

    // softmax probabilities saved for backward, active rows only
    auto probs = std::make_shared<std::vector<float>>(static_cast<size_t>(L) * V, 0.0f);
    double total = 0.0;
    for (int i = 0; i < L; ++i) {
        if (!active[i]) {
            continue;
        }
        const float* row = logits.data().data() + static_cast<size_t>(i) * V;
        float mx = row[0];
        for (int j = 1; j < V; ++j) {
            mx = std::max(mx, row[j]);
        }
        double z = 0.0;
        float* prow = probs->data() + static_cast<size_t>(i) * V;
        for (int j = 0; j < V; ++j) {
            prow[j] = std::exp(row[j] - mx);
            z += prow[j];
        }
        const float inv = static_cast<float>(1.0 / z);
        for (int j = 0; j < V; ++j) {
            prow[j] *= inv;
        }
        const double logp = static_cast<double>(row[targets[i]]) - mx - std::log(z);
        total += static_cast<double>(weights[i]) * (-logp);
    }
    const float denom = static_cast<float>(n_active);
    const float value = static_cast<float>(total / denom);

    auto ln = logits.node_ptr();
    auto t_copy = std::make_shared<std::vector<int>>(targets);
    auto w_copy = std::make_shared<std::vector<float>>(weights);
    auto a_copy = std::make_shared<std::vector<uint8_t>>(active);
    return make_node(
        {1}, {value}, {ln},
        [ln, probs, t_copy, w_copy, a_copy, L, V, denom](const std::vector<float>& g, GradStore& gs) {
            auto& dl = gs.slot(ln.get(), ln->numel());
            const float go = g[0];
            for (int i = 0; i < L; ++i) {
                if (!(*a_copy)[i]) {
                    continue;
                }
                const float coef = go * (*w_copy)[i] / denom;
                const float* prow = probs->data() + static_cast<size_t>(i) * V;
                float* drow = dl.data() + static_cast<size_t>(i) * V;
                for (int j = 0; j < V; ++j) {
                    drow[j] += coef * prow[j];
                }
                drow[(*t_copy)[i]] -= coef;
            }
        },
        "weighted_masked_ce");
}

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (float v : a.data()) {
        s += v;
    }
    auto an = a.node_ptr();
    return make_node(
        {1}, {static_cast<float>(s)}, {an},
        [an](const std::vector<float>& g, GradStore& gs) {
            auto& da = gs.slot(an.get(), an->numel());
            for (size_t i = 0; i < da.size(); ++i) {
                da[i] += g[0];
            }
        },
        "sum_all");
}

Tensor combine_scalars(const std::vector<Tensor>& xs, bool mean) {
    if (xs.empty()) {
        throw std::invalid_argument("combine_scalars: no inputs");
    }
    double s = 0.0;
    std::vector<std::shared_ptr<TensorNode>> pn;
    for (const auto& x : xs) {
        if (x.numel() != 1) {
            throw std::invalid_argument("combine_scalars: inputs must be scalars");
        }
        s += x.data()[0];
        pn.push_back(x.node_ptr());
    }
    const float coef = mean ? 1.0f / static_cast<float>(xs.size()) : 1.0f;
    if (mean) {
        s /= static_cast<double>(xs.size());
    }
    auto parents = pn;
    return make_node(
        {1}, {static_cast<float>(s)}, std::move(parents),
        [pn, coef](const std::vector<float>& g, GradStore& gs) {
            for (const auto& p : pn) {
                if (p->requires_grad) {
                    gs.slot(p.get(), 1)[0] += g[0] * coef;
                }
            }
        },
        "combine_scalars");
}

// ---- backward ----------------------------------------------------------------

GradStore backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw std::runtime_error("backward: loss must be a scalar");
    }
    TensorNode* root = loss.node();
    if (root->backward_used) {
        throw std::runtime_error("backward: called twice on the same graph without re-running forward");
    }
    root->backward_used = true;

    GradStore store;
    if (!root->requires_grad) {
        return store;  // loss does not depend on any requires_grad leaf
    }

    // iterative DFS post-order; parents visited in recorded order
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    store.slot(root, 1)[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* node = *it;
        if (node->backward_fn) {
            node->backward_fn(store.slot(node, node->numel()), store);
        }
    }
    return store;
}

GradCheckResult grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                           float eps, int coords_per_tensor) {
    if (eps < 1e-4f || eps > 1e-2f) {
        throw std::invalid_argument("grad_check: eps must lie in [1e-4, 1e-2]");
    }
    Tensor loss = f();
    if (!std::isfinite(loss.item())) {
        throw std::runtime_error("grad_check: non-finite loss");
    }
    GradStore analytic = backward(loss);

    GradCheckResult res;
    for (const auto& p : params) {
        Tensor param = p;  // handle copy; same node
        const std::vector<float>* g = analytic.find(param);
        const size_t n = param.numel();
        const int n_coords = std::min<int>(coords_per_tensor, static_cast<int>(n));

        // coordinate order: descending |analytic|, ties by index
        std::vector<size_t> order(n);
        for (size_t i = 0; i < n; ++i) {
            order[i] = i;
        }
        if (g) {
            std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
                return std::abs((*g)[a]) > std::abs((*g)[b]);
            });
        }
        for (int c = 0; c < n_coords; ++c) {
            const size_t idx = order[static_cast<size_t>(c)];
            const float saved = param.data_mut()[idx];
            param.data_mut()[idx] = saved + eps;
            const double fp = f().item();
            param.data_mut()[idx] = saved - eps;
            const double fm = f().item();
            param.data_mut()[idx] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw std::runtime_error("grad_check: non-finite loss at perturbed point");
            }
            const double numeric = (fp - fm) / (2.0 * static_cast<double>(eps));
            const double analytic_v = g ? static_cast<double>((*g)[idx]) : 0.0;
            const double denom = std::max({std::abs(analytic_v), std::abs(numeric), 1e-8});
            const float rel = static_cast<float>(std::abs(analytic_v - numeric) / denom);
            res.max_rel_err = std::max(res.max_rel_err, rel);
            ++res.coords_checked;
        }
    }
    return res;
}

}  // namespace blockdiff
