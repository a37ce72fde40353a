#pragma once

#include <string>
#include <vector>

#include "vireid/autograd.hpp"
#include "vireid/random.hpp"

namespace vireid {

struct ParamRef {
    std::string name;
    Var var;
};

struct BufferRef {
    std::string name;
    Tensor* tensor;
};

using ParamList = std::vector<ParamRef>;
using BufferList = std::vector<BufferRef>;

inline uint64_t params_hash(const ParamList& params) {
    uint64_t h = 1469598103934665603ull;
    for (const auto& p : params) {
        h = fnv1a(p.name, h);
        h = fnv1a(p.var->value.data(), static_cast<size_t>(p.var->value.numel()) * sizeof(real), h);
    }
    return h;
}

inline void zero_grads(const ParamList& params) {
    for (const auto& p : params) p.var->grad_alloc = false;
}

// Temporarily marks a parameter set as non-trainable; graphs built inside the
// guard route no gradient into them (Algorithm freeze semantics).
class FreezeGuard {
public:
    explicit FreezeGuard(const ParamList& params) : params_(params) {
        for (const auto& p : params_) {
            saved_.push_back(p.var->requires_grad);
            p.var->requires_grad = false;
            p.var->needs_grad = false;
        }
    }
    ~FreezeGuard() {
        for (size_t i = 0; i < params_.size(); ++i) {
            params_[i].var->requires_grad = saved_[i];
            params_[i].var->needs_grad = saved_[i];
        }
    }
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

private:
    ParamList params_;
    std::vector<bool> saved_;
};

// ---------------------------------------------------------------------------
// Initializers

inline Var make_param(Tensor t, const std::string& name) { return make_leaf(std::move(t), true, name); }

inline Tensor kaiming_normal(Shape shape, int fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    rng.fill_normal(t, 0.0, std::sqrt(2.0 / fan_in));
    return t;
}

inline Tensor uniform_init(Shape shape, real bound, Rng& rng) {
    Tensor t(std::move(shape));
    rng.fill_uniform(t, -bound, bound);
    return t;
}

// ---------------------------------------------------------------------------
// Layers

struct Linear {
    Var w, b;  // w: [out, in]; b optional

    Linear() = default;
    Linear(int in, int out, bool bias, Rng& rng) {
        w = make_param(uniform_init({out, in}, 1.0 / std::sqrt(static_cast<real>(in)), rng), "w");
        if (bias) b = make_param(uniform_init({out}, 1.0 / std::sqrt(static_cast<real>(in)), rng), "b");
    }

    Var forward(const Var& x) const { return linear(x, w, b); }

    void collect(const std::string& prefix, ParamList& out) const {
        out.push_back({prefix + ".w", w});
        if (b) out.push_back({prefix + ".b", b});
    }
};

// Identity classifier: a bias-free weight matrix [num_classes, dim].
struct Classifier {
    Var w;

    Classifier() = default;
    Classifier(int dim, int num_classes, Rng& rng) {
        Tensor t({num_classes, dim});
        rng.fill_normal(t, 0.0, 0.01);
        w = make_param(std::move(t), "w");
    }

    int num_classes() const { return w->value.dim(0); }
    Var logits(const Var& emb) const { return linear(emb, w); }

    void collect(const std::string& prefix, ParamList& out) const { out.push_back({prefix + ".w", w}); }
};

struct Conv2dLayer {
    Var w, b;  // w: [cout, cin, k, k]
    ConvSpec spec;

    Conv2dLayer() = default;
    Conv2dLayer(int cin, int cout, int k, int stride, int pad, bool bias, Rng& rng) {
        spec = {stride, pad};
        w = make_param(kaiming_normal({cout, cin, k, k}, cin * k * k, rng), "w");
        if (bias) b = make_param(Tensor({cout}), "b");
    }

    Var forward(const Var& x) const { return conv2d(x, w, b, spec); }

    void collect(const std::string& prefix, ParamList& out) const {
        out.push_back({prefix + ".w", w});
        if (b) out.push_back({prefix + ".b", b});
    }
};

namespace detail {

// Shared normalization body: x viewed as rows x cols with per-column stats
// handled by the caller through the channel/row vec ops.
inline real unbiased_scale(int64_t n) { return n > 1 ? static_cast<real>(n) / (n - 1) : 1.0; }

}  // namespace detail

// Batch normalization over the batch dim of [n, d] vectors.
struct BatchNorm1d {
    Var gamma, beta;
    Tensor running_mean, running_var;
    real eps = 1e-5, momentum = 0.1;

    BatchNorm1d() = default;
    explicit BatchNorm1d(int d) {
        gamma = make_param(Tensor({d}, 1.0), "gamma");
        beta = make_param(Tensor({d}), "beta");
        running_mean = Tensor({d});
        running_var = Tensor({d}, 1.0);
    }

    Var forward(const Var& x, bool training) {
        VIREID_CHECK(x->value.rank() == 2 && x->value.dim(1) == gamma->value.dim(0), "bn1d input shape");
        if (training) {
            int n = x->value.dim(0);
            Var mu = col_mean(x);
            Var xc = add_rowvec(x, neg(mu));
            Var var = col_mean(square(xc));
            Var xn = mul_rowvec(xc, rsqrt_eps(var, eps));
            real us = detail::unbiased_scale(n);
            for (int j = 0; j < running_mean.dim(0); ++j) {
                running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * mu->value[j];
                running_var[j] = (1.0 - momentum) * running_var[j] + momentum * var->value[j] * us;
            }
            return add_rowvec(mul_rowvec(xn, gamma), beta);
        }
        Tensor inv({running_var.dim(0)});
        for (int j = 0; j < inv.dim(0); ++j) inv[j] = 1.0 / std::sqrt(running_var[j] + eps);
        Var xc = add_rowvec(x, constant([&] {
                     Tensor t = running_mean;
                     for (int64_t j = 0; j < t.numel(); ++j) t[j] = -t[j];
                     return t;
                 }()));
        Var xn = mul_rowvec(xc, constant(std::move(inv)));
        return add_rowvec(mul_rowvec(xn, gamma), beta);
    }

    void collect(const std::string& prefix, ParamList& out) const {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }
    void collect_buffers(const std::string& prefix, BufferList& out) {
        out.push_back({prefix + ".running_mean", &running_mean});
        out.push_back({prefix + ".running_var", &running_var});
    }
};

// Batch normalization per channel of [N, C, H, W], stats over (N, H, W).
struct BatchNorm2d {
    Var gamma, beta;
    Tensor running_mean, running_var;
    real eps = 1e-5, momentum = 0.1;

    BatchNorm2d() = default;
    explicit BatchNorm2d(int c) {
        gamma = make_param(Tensor({c}, 1.0), "gamma");
        beta = make_param(Tensor({c}), "beta");
        running_mean = Tensor({c});
        running_var = Tensor({c}, 1.0);
    }

    Var forward(const Var& x, bool training) {
        VIREID_CHECK(x->value.rank() == 4 && x->value.dim(1) == gamma->value.dim(0), "bn2d input shape");
        int N = x->value.dim(0), C = x->value.dim(1), H = x->value.dim(2), W = x->value.dim(3);
        Var x3 = reshape(x, {N, C, H * W});
        Var y3;
        if (training) {
            Var mu = channel_mean(x3);
            Var xc = add_channelvec(x3, neg(mu));
            Var var = channel_mean(square(xc));
            Var xn = mul_channelvec(xc, rsqrt_eps(var, eps));
            real us = detail::unbiased_scale(static_cast<int64_t>(N) * H * W);
            for (int c = 0; c < C; ++c) {
                running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu->value[c];
                running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var->value[c] * us;
            }
            y3 = add_channelvec(mul_channelvec(xn, gamma), beta);
        } else {
            Tensor negmean = running_mean, inv({C});
            for (int c = 0; c < C; ++c) {
                negmean[c] = -negmean[c];
                inv[c] = 1.0 / std::sqrt(running_var[c] + eps);
            }
            Var xn = mul_channelvec(add_channelvec(x3, constant(std::move(negmean))), constant(std::move(inv)));
            y3 = add_channelvec(mul_channelvec(xn, gamma), beta);
        }
        return reshape(y3, {N, C, H, W});
    }

    void collect(const std::string& prefix, ParamList& out) const {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }
    void collect_buffers(const std::string& prefix, BufferList& out) {
        out.push_back({prefix + ".running_mean", &running_mean});
        out.push_back({prefix + ".running_var", &running_var});
    }
};

// Single-layer unidirectional LSTM; returns every hidden state.
// Gate layout in the stacked weight matrices: input, forget, cell, output.
struct Lstm {
    Var w_ih, w_hh, b_ih, b_hh;  // [4H, D], [4H, H], [4H], [4H]
    int hidden = 0;

    Lstm() = default;
    Lstm(int input, int hidden_, Rng& rng) : hidden(hidden_) {
        real bound = 1.0 / std::sqrt(static_cast<real>(hidden));
        w_ih = make_param(uniform_init({4 * hidden, input}, bound, rng), "w_ih");
        w_hh = make_param(uniform_init({4 * hidden, hidden}, bound, rng), "w_hh");
        b_ih = make_param(uniform_init({4 * hidden}, bound, rng), "b_ih");
        b_hh = make_param(uniform_init({4 * hidden}, bound, rng), "b_hh");
    }

    std::vector<Var> forward(const std::vector<Var>& steps) const {
        VIREID_CHECK(!steps.empty(), "lstm: empty input sequence");
        int B = steps[0]->value.dim(0);
        Var h = constant(Tensor({B, hidden}));
        Var c = constant(Tensor({B, hidden}));
        std::vector<Var> out;
        out.reserve(steps.size());
        for (const Var& x : steps) {
            VIREID_CHECK(x->value.dim(0) == B, "lstm: inconsistent batch size across steps");
            Var z = add(linear(x, w_ih, b_ih), linear(h, w_hh, b_hh));
            Var ig = sigmoid(slice_cols(z, 0, hidden));
            Var fg = sigmoid(slice_cols(z, hidden, 2 * hidden));
            Var gg = tanh_(slice_cols(z, 2 * hidden, 3 * hidden));
            Var og = sigmoid(slice_cols(z, 3 * hidden, 4 * hidden));
            c = add(mul(fg, c), mul(ig, gg));
            h = mul(og, tanh_(c));
            out.push_back(h);
        }
        return out;
    }

    void collect(const std::string& prefix, ParamList& out) const {
        out.push_back({prefix + ".w_ih", w_ih});
        out.push_back({prefix + ".w_hh", w_hh});
        out.push_back({prefix + ".b_ih", b_ih});
        out.push_back({prefix + ".b_hh", b_hh});
    }
};

}  // namespace vireid
