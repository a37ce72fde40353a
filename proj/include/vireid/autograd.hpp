#pragma once

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vireid/tensor.hpp"

namespace vireid {

// Reverse-mode autodiff over Tensor. Each op builds a Node holding the
// forward value and a closure that routes the node's gradient to its
// parents. backward(root) overwrites gradients (single-backward contract:
// one loss per graph, the optimizer consumes grads immediately after).

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;  // leaves: trainable parameter
    bool needs_grad = false;     // some ancestor leaf requires grad
    bool grad_alloc = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;
    std::string name;

    Tensor grad_or_zero() const { return grad_alloc ? grad : Tensor(value.shape()); }
};

inline Var make_leaf(Tensor value, bool requires_grad = false, std::string name = {}) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->needs_grad = requires_grad;
    n->name = std::move(name);
    return n;
}

inline Var constant(Tensor value) { return make_leaf(std::move(value), false); }

inline Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->parents = std::move(parents);
    for (const auto& p : n->parents) n->needs_grad = n->needs_grad || p->needs_grad;
    if (n->needs_grad) n->backward_fn = std::move(bw);
    return n;
}

inline Tensor& grad_buf(Node& n) {
    if (!n.grad_alloc) {
        n.grad = Tensor(n.value.shape());
        n.grad_alloc = true;
    }
    return n.grad;
}
inline Tensor& grad_buf(const Var& v) { return grad_buf(*v); }

inline void backward(const Var& root) {
    VIREID_CHECK(root->value.numel() == 1, "backward root must be a scalar");
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p->needs_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    for (Node* n : order) n->grad_alloc = false;
    grad_buf(*root)[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad_alloc) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// Eigen helpers (row-major maps over Tensor storage)

using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;

inline MapM as_mat(Tensor& t, int rows, int cols) { return MapM(t.data(), rows, cols); }
inline CMapM as_mat(const Tensor& t, int rows, int cols) { return CMapM(t.data(), rows, cols); }

// ---------------------------------------------------------------------------
// Elementwise ops

inline Var add(const Var& a, const Var& b) {
    VIREID_CHECK(same_shape(a->value.shape(), b->value.shape()), "add shape mismatch ",
                 shape_str(a->value.shape()), " vs ", shape_str(b->value.shape()));
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        for (int k = 0; k < 2; ++k) {
            Node& p = *n.parents[k];
            if (!p.needs_grad) continue;
            Tensor& g = grad_buf(p);
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    VIREID_CHECK(same_shape(a->value.shape(), b->value.shape()), "sub shape mismatch");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        if (n.parents[0]->needs_grad) {
            Tensor& g = grad_buf(n.parents[0]);
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (n.parents[1]->needs_grad) {
            Tensor& g = grad_buf(n.parents[1]);
            for (int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    VIREID_CHECK(same_shape(a->value.shape(), b->value.shape()), "mul shape mismatch");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    return make_node(std::move(out), {a, b}, [](Node& n) {
        const Tensor& av = n.parents[0]->value;
        const Tensor& bv = n.parents[1]->value;
        if (n.parents[0]->needs_grad) {
            Tensor& g = grad_buf(n.parents[0]);
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bv[i];
        }
        if (n.parents[1]->needs_grad) {
            Tensor& g = grad_buf(n.parents[1]);
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * av[i];
        }
    });
}

inline Var scale(const Var& a, real c) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
    return make_node(std::move(out), {a}, [c](Node& n) {
        Tensor& g = grad_buf(n.parents[0]);
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += c * n.grad[i];
    });
}

inline Var add_scalar(const Var& a, real c) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += c;
    return make_node(std::move(out), {a}, [](Node& n) {
        Tensor& g = grad_buf(n.parents[0]);
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    });
}

inline Var neg(const Var& a) { return scale(a, -1.0); }

inline Var relu(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    return make_node(std::move(out), {a}, [](Node& n) {
        Tensor& g = grad_buf(n.parents[0]);
        const Tensor& x = n.parents[0]->value;
        for (int64_t i = 0; i < g.numel(); ++i)
            if (x[i] > 0.0) g[i] += n.grad[i];
    });
}

inline Var sigmoid(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
    return make_node(std::move(out), {a}, [](Node& n) {
        Tensor& g = grad_buf(n.parents[0]);
        for (int64_t i = 0; i < g.numel(); ++i) {
            real y = n.value[i];
            g[i] += n.grad[i] * y * (1.0 - y);
        }
    });
}

inline Var tanh_(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
    return make_node(std::move(out), {a}, [](Node& n) {
        Tensor& g = grad_buf(n.parents[0]);
        for (int64_t i = 0; i < g.numel(); ++i) {
            real y = n.value[i];
            g[i] += n.grad[i] * (1.0 - y * y);
        }
    });
}

inline Var square(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= out[i];
    return make_node(std::move(out), {a}, [](Node& n) {
        Tensor& g = grad_buf(n.parents[0]);
        const Tensor& x = n.parents[0]->value;
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += 2.0 * x[i] * n.grad[i];
    });
}

// 1/sqrt(x + eps), used by the batch-norm composition.
inline Var rsqrt_eps(const Var& a, real eps) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / std::sqrt(out[i] + eps);
    return make_node(std::move(out), {a}, [](Node& n) {
        Tensor& g = grad_buf(n.parents[0]);
        for (int64_t i = 0; i < g.numel(); ++i) {
            real y = n.value[i];
            g[i] += n.grad[i] * (-0.5 * y * y * y);
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts

inline Var mean_all(const Var& a) {
    real m = a->value.sum() / static_cast<real>(a->value.numel());
    return make_node(Tensor::scalar(m), {a}, [](Node& n) {
        Tensor& g = grad_buf(n.parents[0]);
        real d = n.grad[0] / static_cast<real>(g.numel());
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += d;
    });
}

inline Var sum_all(const Var& a) {
    return make_node(Tensor::scalar(a->value.sum()), {a}, [](Node& n) {
        Tensor& g = grad_buf(n.parents[0]);
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[0];
    });
}

// Column means of [n, d] -> [d].
inline Var col_mean(const Var& a) {
    VIREID_CHECK(a->value.rank() == 2, "col_mean expects rank-2");
    int n = a->value.dim(0), d = a->value.dim(1);
    Tensor out({d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out[j] += a->value.at(i, j);
    for (int j = 0; j < d; ++j) out[j] /= n;
    return make_node(std::move(out), {a}, [n, d](Node& nd) {
        Tensor& g = grad_buf(nd.parents[0]);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) g.at(i, j) += nd.grad[j] / n;
    });
}

inline Var add_rowvec(const Var& a, const Var& v) {
    VIREID_CHECK(a->value.rank() == 2 && v->value.rank() == 1 && a->value.dim(1) == v->value.dim(0),
                 "add_rowvec shape mismatch");
    int n = a->value.dim(0), d = a->value.dim(1);
    Tensor out = a->value;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out.at(i, j) += v->value[j];
    return make_node(std::move(out), {a, v}, [n, d](Node& nd) {
        if (nd.parents[0]->needs_grad) {
            Tensor& g = grad_buf(nd.parents[0]);
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
        }
        if (nd.parents[1]->needs_grad) {
            Tensor& gv = grad_buf(nd.parents[1]);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) gv[j] += nd.grad.at(i, j);
        }
    });
}

inline Var mul_rowvec(const Var& a, const Var& v) {
    VIREID_CHECK(a->value.rank() == 2 && v->value.rank() == 1 && a->value.dim(1) == v->value.dim(0),
                 "mul_rowvec shape mismatch");
    int n = a->value.dim(0), d = a->value.dim(1);
    Tensor out = a->value;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out.at(i, j) *= v->value[j];
    return make_node(std::move(out), {a, v}, [n, d](Node& nd) {
        const Tensor& av = nd.parents[0]->value;
        const Tensor& vv = nd.parents[1]->value;
        if (nd.parents[0]->needs_grad) {
            Tensor& g = grad_buf(nd.parents[0]);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) g.at(i, j) += nd.grad.at(i, j) * vv[j];
        }
        if (nd.parents[1]->needs_grad) {
            Tensor& gv = grad_buf(nd.parents[1]);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < d; ++j) gv[j] += nd.grad.at(i, j) * av.at(i, j);
        }
    });
}

// Per-channel mean of [N, C, P] over (N, P) -> [C].
inline Var channel_mean(const Var& a) {
    VIREID_CHECK(a->value.rank() == 3, "channel_mean expects rank-3 [N,C,P]");
    int N = a->value.dim(0), C = a->value.dim(1), P = a->value.dim(2);
    Tensor out({C});
    const real* x = a->value.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            real s = 0.0;
            const real* row = x + (static_cast<int64_t>(n) * C + c) * P;
            for (int p = 0; p < P; ++p) s += row[p];
            out[c] += s;
        }
    for (int c = 0; c < C; ++c) out[c] /= static_cast<real>(N) * P;
    return make_node(std::move(out), {a}, [N, C, P](Node& nd) {
        Tensor& g = grad_buf(nd.parents[0]);
        real inv = 1.0 / (static_cast<real>(N) * P);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                real d = nd.grad[c] * inv;
                real* row = g.data() + (static_cast<int64_t>(n) * C + c) * P;
                for (int p = 0; p < P; ++p) row[p] += d;
            }
    });
}

inline Var add_channelvec(const Var& a, const Var& v) {
    VIREID_CHECK(a->value.rank() == 3 && v->value.dim(0) == a->value.dim(1),
                 "add_channelvec shape mismatch");
    int N = a->value.dim(0), C = a->value.dim(1), P = a->value.dim(2);
    Tensor out = a->value;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            real* row = out.data() + (static_cast<int64_t>(n) * C + c) * P;
            for (int p = 0; p < P; ++p) row[p] += v->value[c];
        }
    return make_node(std::move(out), {a, v}, [N, C, P](Node& nd) {
        if (nd.parents[0]->needs_grad) {
            Tensor& g = grad_buf(nd.parents[0]);
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += nd.grad[i];
        }
        if (nd.parents[1]->needs_grad) {
            Tensor& gv = grad_buf(nd.parents[1]);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const real* row = nd.grad.data() + (static_cast<int64_t>(n) * C + c) * P;
                    real s = 0.0;
                    for (int p = 0; p < P; ++p) s += row[p];
                    gv[c] += s;
                }
        }
    });
}

inline Var mul_channelvec(const Var& a, const Var& v) {
    VIREID_CHECK(a->value.rank() == 3 && v->value.dim(0) == a->value.dim(1),
                 "mul_channelvec shape mismatch");
    int N = a->value.dim(0), C = a->value.dim(1), P = a->value.dim(2);
    Tensor out = a->value;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            real* row = out.data() + (static_cast<int64_t>(n) * C + c) * P;
            for (int p = 0; p < P; ++p) row[p] *= v->value[c];
        }
    return make_node(std::move(out), {a, v}, [N, C, P](Node& nd) {
        const Tensor& av = nd.parents[0]->value;
        const Tensor& vv = nd.parents[1]->value;
        if (nd.parents[0]->needs_grad) {
            Tensor& g = grad_buf(nd.parents[0]);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    int64_t off = (static_cast<int64_t>(n) * C + c) * P;
                    for (int p = 0; p < P; ++p) g[off + p] += nd.grad[off + p] * vv[c];
                }
        }
        if (nd.parents[1]->needs_grad) {
            Tensor& gv = grad_buf(nd.parents[1]);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    int64_t off = (static_cast<int64_t>(n) * C + c) * P;
                    real s = 0.0;
                    for (int p = 0; p < P; ++p) s += nd.grad[off + p] * av[off + p];
                    gv[c] += s;
                }
        }
    });
}

// Mean over all trailing dims beyond the first two: [N, C, ...] -> [N, C].
inline Var spatial_mean(const Var& a) {
    VIREID_CHECK(a->value.rank() >= 3, "spatial_mean expects rank >= 3");
    int N = a->value.dim(0), C = a->value.dim(1);
    int64_t P = a->value.numel() / (static_cast<int64_t>(N) * C);
    Tensor out({N, C});
    const real* x = a->value.data();
    for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
        real s = 0.0;
        for (int64_t p = 0; p < P; ++p) s += x[nc * P + p];
        out[nc] = s / static_cast<real>(P);
    }
    return make_node(std::move(out), {a}, [N, C, P](Node& nd) {
        Tensor& g = grad_buf(nd.parents[0]);
        for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
            real d = nd.grad[nc] / static_cast<real>(P);
            for (int64_t p = 0; p < P; ++p) g[nc * P + p] += d;
        }
    });
}

// PCB-style horizontal strip pooling: [N, C, H, W] -> [N*K, C] where row
// n*K + k is the average of strip k (top-to-bottom). H must divide by K.
inline Var partition_mean(const Var& a, int K) {
    VIREID_CHECK(a->value.rank() == 4, "partition_mean expects [N,C,H,W]");
    int N = a->value.dim(0), C = a->value.dim(1), H = a->value.dim(2), W = a->value.dim(3);
    VIREID_CHECK(K >= 1 && H % K == 0, "feature map height ", H, " not divisible by K=", K);
    int strip = H / K;
    Tensor out({N * K, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const real* src = a->value.data() + (static_cast<int64_t>(n) * C + c) * H * W;
            for (int k = 0; k < K; ++k) {
                real s = 0.0;
                for (int y = k * strip; y < (k + 1) * strip; ++y)
                    for (int x = 0; x < W; ++x) s += src[static_cast<int64_t>(y) * W + x];
                out.at(n * K + k, c) = s / (static_cast<real>(strip) * W);
            }
        }
    return make_node(std::move(out), {a}, [N, C, H, W, K, strip](Node& nd) {
        Tensor& g = grad_buf(nd.parents[0]);
        real inv = 1.0 / (static_cast<real>(strip) * W);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                real* dst = g.data() + (static_cast<int64_t>(n) * C + c) * H * W;
                for (int k = 0; k < K; ++k) {
                    real d = nd.grad.at(n * K + k, c) * inv;
                    for (int y = k * strip; y < (k + 1) * strip; ++y)
                        for (int x = 0; x < W; ++x) dst[static_cast<int64_t>(y) * W + x] += d;
                }
            }
    });
}

// Mean over groups of T consecutive rows: [S*T, C] -> [S, C].
inline Var seq_mean(const Var& a, int T) {
    VIREID_CHECK(a->value.rank() == 2 && a->value.dim(0) % T == 0, "seq_mean: rows not divisible by T");
    int S = a->value.dim(0) / T, C = a->value.dim(1);
    Tensor out({S, C});
    for (int s = 0; s < S; ++s)
        for (int t = 0; t < T; ++t)
            for (int c = 0; c < C; ++c) out.at(s, c) += a->value.at(s * T + t, c);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] /= T;
    return make_node(std::move(out), {a}, [S, T, C](Node& nd) {
        Tensor& g = grad_buf(nd.parents[0]);
        for (int s = 0; s < S; ++s)
            for (int t = 0; t < T; ++t)
                for (int c = 0; c < C; ++c) g.at(s * T + t, c) += nd.grad.at(s, c) / T;
    });
}

// ---------------------------------------------------------------------------
// Structural ops

inline Var reshape(const Var& a, Shape s) {
    Tensor out = a->value.reshaped(std::move(s));
    return make_node(std::move(out), {a}, [](Node& n) {
        Tensor& g = grad_buf(n.parents[0]);
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    });
}

inline Var concat_cols(const Var& a, const Var& b) {
    VIREID_CHECK(a->value.rank() == 2 && b->value.rank() == 2 && a->value.dim(0) == b->value.dim(0),
                 "concat_cols row mismatch");
    int n = a->value.dim(0), da = a->value.dim(1), db = b->value.dim(1);
    Tensor out({n, da + db});
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < da; ++j) out.at(i, j) = a->value.at(i, j);
        for (int j = 0; j < db; ++j) out.at(i, da + j) = b->value.at(i, j);
    }
    return make_node(std::move(out), {a, b}, [n, da, db](Node& nd) {
        if (nd.parents[0]->needs_grad) {
            Tensor& g = grad_buf(nd.parents[0]);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < da; ++j) g.at(i, j) += nd.grad.at(i, j);
        }
        if (nd.parents[1]->needs_grad) {
            Tensor& g = grad_buf(nd.parents[1]);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < db; ++j) g.at(i, j) += nd.grad.at(i, da + j);
        }
    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    VIREID_CHECK(!parts.empty(), "concat_rows: empty input");
    int d = parts[0]->value.dim(1), total = 0;
    for (const auto& p : parts) {
        VIREID_CHECK(p->value.rank() == 2 && p->value.dim(1) == d, "concat_rows col mismatch");
        total += p->value.dim(0);
    }
    Tensor out({total, d});
    int row = 0;
    for (const auto& p : parts) {
        std::copy(p->value.data(), p->value.data() + p->value.numel(), out.data() + static_cast<int64_t>(row) * d);
        row += p->value.dim(0);
    }
    return make_node(std::move(out), parts, [d](Node& nd) {
        int row = 0;
        for (auto& p : nd.parents) {
            int rows = p->value.dim(0);
            if (p->needs_grad) {
                Tensor& g = grad_buf(p);
                const real* src = nd.grad.data() + static_cast<int64_t>(row) * d;
                for (int64_t i = 0; i < g.numel(); ++i) g[i] += src[i];
            }
            row += rows;
        }
    });
}

inline Var slice_cols(const Var& a, int lo, int hi) {
    VIREID_CHECK(a->value.rank() == 2 && 0 <= lo && lo < hi && hi <= a->value.dim(1), "slice_cols range");
    int n = a->value.dim(0), w = hi - lo;
    Tensor out({n, w});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j) out.at(i, j) = a->value.at(i, lo + j);
    return make_node(std::move(out), {a}, [n, w, lo](Node& nd) {
        Tensor& g = grad_buf(nd.parents[0]);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < w; ++j) g.at(i, lo + j) += nd.grad.at(i, j);
    });
}

inline Var gather_rows(const Var& a, std::vector<int> idx) {
    VIREID_CHECK(a->value.rank() == 2, "gather_rows expects rank-2");
    int d = a->value.dim(1), k = static_cast<int>(idx.size());
    for (int i : idx) VIREID_CHECK(0 <= i && i < a->value.dim(0), "gather_rows index out of range");
    Tensor out({k, d});
    for (int i = 0; i < k; ++i)
        std::copy(a->value.data() + static_cast<int64_t>(idx[i]) * d,
                  a->value.data() + static_cast<int64_t>(idx[i] + 1) * d,
                  out.data() + static_cast<int64_t>(i) * d);
    return make_node(std::move(out), {a}, [idx = std::move(idx), d](Node& nd) {
        Tensor& g = grad_buf(nd.parents[0]);
        for (size_t i = 0; i < idx.size(); ++i) {
            real* dst = g.data() + static_cast<int64_t>(idx[i]) * d;
            const real* src = nd.grad.data() + static_cast<int64_t>(i) * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
}

// out[i] = a[i, cols[i]], one entry per row.
inline Var take_per_row(const Var& a, std::vector<int> cols) {
    VIREID_CHECK(a->value.rank() == 2 && static_cast<int>(cols.size()) == a->value.dim(0),
                 "take_per_row needs one column index per row");
    int n = a->value.dim(0);
    for (int c : cols) VIREID_CHECK(0 <= c && c < a->value.dim(1), "take_per_row column out of range");
    Tensor out({n});
    for (int i = 0; i < n; ++i) out[i] = a->value.at(i, cols[i]);
    return make_node(std::move(out), {a}, [cols = std::move(cols)](Node& nd) {
        Tensor& g = grad_buf(nd.parents[0]);
        for (size_t i = 0; i < cols.size(); ++i) g.at(static_cast<int>(i), cols[i]) += nd.grad[static_cast<int64_t>(i)];
    });
}

// [S*K, D] -> [S, K*D]; row s gets the K group rows laid out side by side.
inline Var group_rows_to_cols(const Var& a, int K) {
    VIREID_CHECK(a->value.rank() == 2 && a->value.dim(0) % K == 0, "group_rows_to_cols: rows not divisible");
    int S = a->value.dim(0) / K, D = a->value.dim(1);
    Tensor out({S, K * D});
    for (int s = 0; s < S; ++s)
        for (int k = 0; k < K; ++k)
            for (int j = 0; j < D; ++j) out.at(s, k * D + j) = a->value.at(s * K + k, j);
    return make_node(std::move(out), {a}, [S, K, D](Node& nd) {
        Tensor& g = grad_buf(nd.parents[0]);
        for (int s = 0; s < S; ++s)
            for (int k = 0; k < K; ++k)
                for (int j = 0; j < D; ++j) g.at(s * K + k, j) += nd.grad.at(s, k * D + j);
    });
}

// ---------------------------------------------------------------------------
// GEMM-backed ops

// Y = X * W^T + b;  X: [n, d], W: [m, d], b: [m] (optional).
inline Var linear(const Var& x, const Var& w, const Var& b = nullptr) {
    VIREID_CHECK(x->value.rank() == 2 && w->value.rank() == 2 && x->value.dim(1) == w->value.dim(1),
                 "linear shape mismatch: x ", shape_str(x->value.shape()), " w ", shape_str(w->value.shape()));
    int n = x->value.dim(0), d = x->value.dim(1), m = w->value.dim(0);
    Tensor out({n, m});
    as_mat(out, n, m).noalias() = as_mat(x->value, n, d) * as_mat(w->value, m, d).transpose();
    if (b) {
        VIREID_CHECK(b->value.numel() == m, "linear bias size mismatch");
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) out.at(i, j) += b->value[j];
    }
    std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_node(std::move(out), std::move(parents), [n, d, m](Node& nd) {
        const Tensor& xv = nd.parents[0]->value;
        const Tensor& wv = nd.parents[1]->value;
        CMapM dy(nd.grad.data(), n, m);
        if (nd.parents[0]->needs_grad)
            as_mat(grad_buf(nd.parents[0]), n, d).noalias() += dy * as_mat(wv, m, d);
        if (nd.parents[1]->needs_grad)
            as_mat(grad_buf(nd.parents[1]), m, d).noalias() += dy.transpose() * as_mat(xv, n, d);
        if (nd.parents.size() > 2 && nd.parents[2]->needs_grad) {
            Tensor& gb = grad_buf(nd.parents[2]);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) gb[j] += nd.grad.at(i, j);
        }
    });
}

// Batched matmul over the leading dim: C_b = op(A_b) * op(B_b).
inline Var bmm(const Var& a, const Var& b, bool ta = false, bool tb = false) {
    VIREID_CHECK(a->value.rank() == 3 && b->value.rank() == 3 && a->value.dim(0) == b->value.dim(0),
                 "bmm expects [B,?,?] pair");
    int B = a->value.dim(0);
    int am = a->value.dim(1), an = a->value.dim(2);
    int bm = b->value.dim(1), bn = b->value.dim(2);
    int m = ta ? an : am, ka = ta ? am : an;
    int kb = tb ? bn : bm, n2 = tb ? bm : bn;
    VIREID_CHECK(ka == kb, "bmm inner dim mismatch");
    Tensor out({B, m, n2});
    for (int i = 0; i < B; ++i) {
        CMapM A(a->value.data() + static_cast<int64_t>(i) * am * an, am, an);
        CMapM Bm(b->value.data() + static_cast<int64_t>(i) * bm * bn, bm, bn);
        MapM C(out.data() + static_cast<int64_t>(i) * m * n2, m, n2);
        if (!ta && !tb) C.noalias() = A * Bm;
        else if (ta && !tb) C.noalias() = A.transpose() * Bm;
        else if (!ta && tb) C.noalias() = A * Bm.transpose();
        else C.noalias() = A.transpose() * Bm.transpose();
    }
    return make_node(std::move(out), {a, b}, [B, am, an, bm, bn, m, n2, ta, tb](Node& nd) {
        for (int i = 0; i < B; ++i) {
            CMapM A(nd.parents[0]->value.data() + static_cast<int64_t>(i) * am * an, am, an);
            CMapM Bm(nd.parents[1]->value.data() + static_cast<int64_t>(i) * bm * bn, bm, bn);
            CMapM dC(nd.grad.data() + static_cast<int64_t>(i) * m * n2, m, n2);
            if (nd.parents[0]->needs_grad) {
                MapM dA(grad_buf(nd.parents[0]).data() + static_cast<int64_t>(i) * am * an, am, an);
                if (!ta && !tb) dA.noalias() += dC * Bm.transpose();
                else if (ta && !tb) dA.noalias() += Bm * dC.transpose();
                else if (!ta && tb) dA.noalias() += dC * Bm;
                else dA.noalias() += Bm.transpose() * dC.transpose();
            }
            if (nd.parents[1]->needs_grad) {
                MapM dB(grad_buf(nd.parents[1]).data() + static_cast<int64_t>(i) * bm * bn, bm, bn);
                if (!ta && !tb) dB.noalias() += A.transpose() * dC;
                else if (ta && !tb) dB.noalias() += A * dC;
                else if (!ta && tb) dB.noalias() += dC.transpose() * A;
                else dB.noalias() += dC.transpose() * A.transpose();
            }
        }
    });
}

// Squared Euclidean distances between rows of X: D[i,j] = ||x_i - x_j||^2.
inline Var pairwise_sqdist(const Var& x) {
    VIREID_CHECK(x->value.rank() == 2, "pairwise_sqdist expects [n, d]");
    int n = x->value.dim(0), d = x->value.dim(1);
    RowMat G = as_mat(x->value, n, d) * as_mat(x->value, n, d).transpose();
    Tensor out({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) out.at(i, j) = std::max(0.0, G(i, i) + G(j, j) - 2.0 * G(i, j));
    return make_node(std::move(out), {x}, [n, d](Node& nd) {
        // dX_i += 2 * sum_j (dD_ij + dD_ji) (x_i - x_j)
        Tensor& g = grad_buf(nd.parents[0]);
        CMapM X(nd.parents[0]->value.data(), n, d);
        RowMat S(n, n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) S(i, j) = nd.grad.at(i, j) + nd.grad.at(j, i);
        Eigen::VectorXd rs = S.rowwise().sum();
        MapM dX(g.data(), n, d);
        dX.noalias() += 2.0 * (rs.asDiagonal() * X - S * X);
    });
}

// ---------------------------------------------------------------------------
// Softmax family

// Softmax over the last dim of [B, m, n].
inline Var softmax_lastdim(const Var& a) {
    VIREID_CHECK(a->value.rank() >= 2, "softmax_lastdim rank");
    int n = a->value.dim(a->value.rank() - 1);
    int64_t rows = a->value.numel() / n;
    Tensor out = a->value;
    for (int64_t r = 0; r < rows; ++r) {
        real* row = out.data() + r * n;
        real mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        real s = 0.0;
        for (int j = 0; j < n; ++j) {
            row[j] = std::exp(row[j] - mx);
            s += row[j];
        }
        for (int j = 0; j < n; ++j) row[j] /= s;
    }
    return make_node(std::move(out), {a}, [rows, n](Node& nd) {
        Tensor& g = grad_buf(nd.parents[0]);
        for (int64_t r = 0; r < rows; ++r) {
            const real* y = nd.value.data() + r * n;
            const real* dy = nd.grad.data() + r * n;
            real dot = 0.0;
            for (int j = 0; j < n; ++j) dot += y[j] * dy[j];
            real* dx = g.data() + r * n;
            for (int j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
        }
    });
}

// Row-wise log-softmax of [n, m].
inline Var log_softmax_rows(const Var& a) {
    VIREID_CHECK(a->value.rank() == 2, "log_softmax_rows expects [n, m]");
    int n = a->value.dim(0), m = a->value.dim(1);
    Tensor out = a->value;
    for (int i = 0; i < n; ++i) {
        real* row = out.data() + static_cast<int64_t>(i) * m;
        real mx = row[0];
        for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        real s = 0.0;
        for (int j = 0; j < m; ++j) s += std::exp(row[j] - mx);
        real lse = mx + std::log(s);
        for (int j = 0; j < m; ++j) row[j] -= lse;
    }
    return make_node(std::move(out), {a}, [n, m](Node& nd) {
        Tensor& g = grad_buf(nd.parents[0]);
        for (int i = 0; i < n; ++i) {
            const real* y = nd.value.data() + static_cast<int64_t>(i) * m;
            const real* dy = nd.grad.data() + static_cast<int64_t>(i) * m;
            real s = 0.0;
            for (int j = 0; j < m; ++j) s += dy[j];
            real* dx = g.data() + static_cast<int64_t>(i) * m;
            for (int j = 0; j < m; ++j) dx[j] += dy[j] - std::exp(y[j]) * s;
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

struct ConvSpec {
    int stride = 1;
    int pad = 0;
};

namespace detail {

inline void im2col(const Tensor& x, int kh, int kw, int stride, int pad, int ho, int wo, Tensor& col) {
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t ncols = static_cast<int64_t>(N) * ho * wo;
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                int64_t row = (static_cast<int64_t>(c) * kh + ki) * kw + kj;
                real* dst = col.data() + row * ncols;
                for (int n = 0; n < N; ++n) {
                    const real* src = x.data() + (static_cast<int64_t>(n) * C + c) * H * W;
                    for (int oh = 0; oh < ho; ++oh) {
                        int ih = oh * stride - pad + ki;
                        int64_t base = (static_cast<int64_t>(n) * ho + oh) * wo;
                        if (ih < 0 || ih >= H) {
                            for (int ow = 0; ow < wo; ++ow) dst[base + ow] = 0.0;
                            continue;
                        }
                        for (int ow = 0; ow < wo; ++ow) {
                            int iw = ow * stride - pad + kj;
                            dst[base + ow] = (iw >= 0 && iw < W) ? src[static_cast<int64_t>(ih) * W + iw] : 0.0;
                        }
                    }
                }
            }
}

inline void col2im(const Tensor& col, int kh, int kw, int stride, int pad, int ho, int wo, Tensor& x) {
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    int64_t ncols = static_cast<int64_t>(N) * ho * wo;
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                int64_t row = (static_cast<int64_t>(c) * kh + ki) * kw + kj;
                const real* src = col.data() + row * ncols;
                for (int n = 0; n < N; ++n) {
                    real* dst = x.data() + (static_cast<int64_t>(n) * C + c) * H * W;
                    for (int oh = 0; oh < ho; ++oh) {
                        int ih = oh * stride - pad + ki;
                        if (ih < 0 || ih >= H) continue;
                        int64_t base = (static_cast<int64_t>(n) * ho + oh) * wo;
                        for (int ow = 0; ow < wo; ++ow) {
                            int iw = ow * stride - pad + kj;
                            if (iw >= 0 && iw < W) dst[static_cast<int64_t>(ih) * W + iw] += src[base + ow];
                        }
                    }
                }
            }
}

}  // namespace detail

// X: [N, Cin, H, W], W: [Cout, Cin, kh, kw], b: [Cout] (optional).
inline Var conv2d(const Var& x, const Var& w, const Var& b, ConvSpec spec) {
    VIREID_CHECK(x->value.rank() == 4 && w->value.rank() == 4, "conv2d expects 4-d input and weight");
    VIREID_CHECK(x->value.dim(1) == w->value.dim(1), "conv2d channel mismatch: input ",
                 shape_str(x->value.shape()), " weight ", shape_str(w->value.shape()));
    int N = x->value.dim(0), H = x->value.dim(2), W_ = x->value.dim(3);
    int cout = w->value.dim(0), kh = w->value.dim(2), kw = w->value.dim(3);
    int ho = (H + 2 * spec.pad - kh) / spec.stride + 1;
    int wo = (W_ + 2 * spec.pad - kw) / spec.stride + 1;
    VIREID_CHECK(ho >= 1 && wo >= 1, "conv2d output would be empty");
    int64_t K = static_cast<int64_t>(w->value.dim(1)) * kh * kw;
    int64_t ncols = static_cast<int64_t>(N) * ho * wo;
    int64_t P = static_cast<int64_t>(ho) * wo;

    auto col = std::make_shared<Tensor>(Shape{static_cast<int>(K), static_cast<int>(ncols)});
    detail::im2col(x->value, kh, kw, spec.stride, spec.pad, ho, wo, *col);

    Tensor ymat({cout, static_cast<int>(ncols)});
    as_mat(ymat, cout, static_cast<int>(ncols)).noalias() =
        as_mat(w->value, cout, static_cast<int>(K)) * as_mat(*col, static_cast<int>(K), static_cast<int>(ncols));

    Tensor out({N, cout, ho, wo});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < cout; ++c) {
            const real* src = ymat.data() + static_cast<int64_t>(c) * ncols + static_cast<int64_t>(n) * P;
            real* dst = out.data() + (static_cast<int64_t>(n) * cout + c) * P;
            real bias = b ? b->value[c] : 0.0;
            for (int64_t p = 0; p < P; ++p) dst[p] = src[p] + bias;
        }

    std::vector<Var> parents = b ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
    return make_node(std::move(out), std::move(parents),
                     [col, spec, N, cout, kh, kw, ho, wo, K, ncols, P](Node& nd) {
        // regroup dOut [N, Cout, P] -> dYmat [Cout, N*P]
        Tensor dymat({cout, static_cast<int>(ncols)});
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < cout; ++c) {
                const real* src = nd.grad.data() + (static_cast<int64_t>(n) * cout + c) * P;
                real* dst = dymat.data() + static_cast<int64_t>(c) * ncols + static_cast<int64_t>(n) * P;
                std::copy(src, src + P, dst);
            }
        CMapM dY(dymat.data(), cout, static_cast<int>(ncols));
        if (nd.parents[1]->needs_grad)
            as_mat(grad_buf(nd.parents[1]), cout, static_cast<int>(K)).noalias() +=
                dY * as_mat(*col, static_cast<int>(K), static_cast<int>(ncols)).transpose();
        if (nd.parents.size() > 2 && nd.parents[2]->needs_grad) {
            Tensor& gb = grad_buf(nd.parents[2]);
            for (int c = 0; c < cout; ++c) {
                real s = 0.0;
                const real* row = dymat.data() + static_cast<int64_t>(c) * ncols;
                for (int64_t i = 0; i < ncols; ++i) s += row[i];
                gb[c] += s;
            }
        }
        if (nd.parents[0]->needs_grad) {
            Tensor dcol({static_cast<int>(K), static_cast<int>(ncols)});
            as_mat(dcol, static_cast<int>(K), static_cast<int>(ncols)).noalias() =
                as_mat(nd.parents[1]->value, cout, static_cast<int>(K)).transpose() * dY;
            detail::col2im(dcol, kh, kw, spec.stride, spec.pad, ho, wo, grad_buf(nd.parents[0]));
        }
    });
}

inline Var maxpool2d(const Var& x, int k, int stride, int pad = 0) {
    VIREID_CHECK(x->value.rank() == 4, "maxpool2d expects 4-d input");
    int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
    int ho = (H + 2 * pad - k) / stride + 1, wo = (W + 2 * pad - k) / stride + 1;
    VIREID_CHECK(ho >= 1 && wo >= 1, "maxpool2d output would be empty");
    Tensor out({N, C, ho, wo});
    auto argmax = std::make_shared<std::vector<int64_t>>(out.numel());
    int64_t o = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const real* src = x->value.data() + (static_cast<int64_t>(n) * C + c) * H * W;
            for (int oh = 0; oh < ho; ++oh)
                for (int ow = 0; ow < wo; ++ow, ++o) {
                    real best = -1e300;
                    int64_t bi = -1;
                    for (int i = 0; i < k; ++i)
                        for (int j = 0; j < k; ++j) {
                            int ih = oh * stride - pad + i, iw = ow * stride - pad + j;
                            if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                            int64_t off = static_cast<int64_t>(ih) * W + iw;
                            if (src[off] > best) {
                                best = src[off];
                                bi = (static_cast<int64_t>(n) * C + c) * H * W + off;
                            }
                        }
                    out[o] = best;
                    (*argmax)[static_cast<size_t>(o)] = bi;
                }
        }
    return make_node(std::move(out), {x}, [argmax](Node& nd) {
        Tensor& g = grad_buf(nd.parents[0]);
        for (int64_t i = 0; i < nd.grad.numel(); ++i) {
            int64_t src = (*argmax)[static_cast<size_t>(i)];
            if (src >= 0) g[src] += nd.grad[i];
        }
    });
}

}  // namespace vireid
