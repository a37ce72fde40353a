#include <catch2/catch_amalgamated.hpp>

#include "support/gradcheck.hpp"
#include "vireid/autograd.hpp"
#include "vireid/random.hpp"

using namespace vireid;

namespace {

Tensor random_tensor(Shape s, Rng& rng, real lo = -1.0, real hi = 1.0) {
    Tensor t(std::move(s));
    rng.fill_uniform(t, lo, hi);
    return t;
}

// Fixed random weights (built once, outside the loss closure) so the probe
// loss is a deterministic function of the parameters.
Var make_weights(Shape s, Rng& rng) {
    Tensor w(std::move(s));
    rng.fill_uniform(w, 0.5, 1.5);
    return constant(std::move(w));
}

Var weighted_sum(const Var& x, const Var& w) { return sum_all(mul(x, w)); }

}  // namespace

TEST_CASE("elementwise forward values") {
    Rng rng(1);
    Var a = make_leaf(random_tensor({3, 4}, rng), true, "a");
    Var b = make_leaf(random_tensor({3, 4}, rng), true, "b");
    Var s = add(a, b);
    for (int64_t i = 0; i < 12; ++i) REQUIRE(s->value[i] == Catch::Approx(a->value[i] + b->value[i]));
    Var m = mul(a, b);
    for (int64_t i = 0; i < 12; ++i) REQUIRE(m->value[i] == Catch::Approx(a->value[i] * b->value[i]));
    Var r = relu(a);
    for (int64_t i = 0; i < 12; ++i) REQUIRE(r->value[i] == std::max(0.0, a->value[i]));
    Var sc = scale(a, -2.5);
    for (int64_t i = 0; i < 12; ++i) REQUIRE(sc->value[i] == Catch::Approx(-2.5 * a->value[i]));
}

TEST_CASE("elementwise gradients match finite differences") {
    Rng rng(2), pick(3);
    Var a = make_leaf(random_tensor({3, 4}, rng, 0.3, 1.2), true, "a");  // positive: safe for relu/rsqrt
    Var b = make_leaf(random_tensor({3, 4}, rng, -1.0, -0.2), true, "b");
    ParamList params{{"a", a}, {"b", b}};
    auto run = [&](auto fn) {
        auto res = gradcheck::check(fn, params, 12, pick);
        INFO(res.worst);
        REQUIRE(res.max_rel_err < 1e-6);
    };
    run([&] { return mean_all(mul(add(a, b), sub(a, b))); });
    run([&] { return mean_all(relu(add_scalar(add(a, b), 2.0))); });
    run([&] { return mean_all(sigmoid(mul(a, b))); });
    run([&] { return mean_all(tanh_(a)); });
    run([&] { return mean_all(square(sub(a, b))); });
    run([&] { return mean_all(rsqrt_eps(square(a), 1e-5)); });
    run([&] { return mean_all(add_scalar(scale(a, 0.7), 0.1)); });
}

TEST_CASE("shared subgraph accumulates gradients") {
    Rng rng(4), pick(5);
    Var x = make_leaf(random_tensor({5}, rng), true, "x");
    ParamList params{{"x", x}};
    auto res = gradcheck::check([&] {
        Var y = square(x);
        return sum_all(add(mul(y, x), y));  // x^3 + x^2, x used by two consumers
    }, params, 5, pick);
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("constant inputs get no gradient buffer") {
    Rng rng(6);
    Var c = constant(random_tensor({4}, rng));
    Var x = make_leaf(random_tensor({4}, rng), true, "x");
    Var loss = sum_all(mul(c, x));
    backward(loss);
    REQUIRE_FALSE(c->grad_alloc);
    REQUIRE(x->grad_alloc);
    for (int i = 0; i < 4; ++i) REQUIRE(x->grad[i] == Catch::Approx(c->value[i]));
}

TEST_CASE("linear matches manual matmul and finite differences") {
    Rng rng(7), pick(8);
    Var x = make_leaf(random_tensor({4, 3}, rng), true, "x");
    Var w = make_leaf(random_tensor({5, 3}, rng), true, "w");
    Var b = make_leaf(random_tensor({5}, rng), true, "b");
    Var y = linear(x, w, b);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j) {
            real acc = b->value[j];
            for (int k = 0; k < 3; ++k) acc += x->value.at(i, k) * w->value.at(j, k);
            REQUIRE(y->value.at(i, j) == Catch::Approx(acc));
        }
    ParamList params{{"x", x}, {"w", w}, {"b", b}};
    Var wt = make_weights({4, 5}, pick);
    auto res = gradcheck::check([&] { return weighted_sum(linear(x, w, b), wt); }, params, 10, pick);
    INFO(res.worst);
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("conv2d matches a direct convolution oracle") {
    Rng rng(9);
    Var x = make_leaf(random_tensor({2, 3, 5, 4}, rng), true, "x");
    Var w = make_leaf(random_tensor({4, 3, 3, 3}, rng), true, "w");
    Var b = make_leaf(random_tensor({4}, rng), true, "b");
    ConvSpec spec{2, 1};
    Var y = conv2d(x, w, b, spec);
    int ho = (5 + 2 - 3) / 2 + 1, wo = (4 + 2 - 3) / 2 + 1;
    REQUIRE(y->value.shape() == Shape{2, 4, ho, wo});
    for (int n = 0; n < 2; ++n)
        for (int co = 0; co < 4; ++co)
            for (int oh = 0; oh < ho; ++oh)
                for (int ow = 0; ow < wo; ++ow) {
                    real acc = b->value[co];
                    for (int ci = 0; ci < 3; ++ci)
                        for (int ki = 0; ki < 3; ++ki)
                            for (int kj = 0; kj < 3; ++kj) {
                                int ih = oh * 2 - 1 + ki, iw = ow * 2 - 1 + kj;
                                if (ih < 0 || ih >= 5 || iw < 0 || iw >= 4) continue;
                                acc += x->value.at(n, ci, ih, iw) * w->value.at(co, ci, ki, kj);
                            }
                    REQUIRE(y->value.at(n, co, oh, ow) == Catch::Approx(acc).margin(1e-12));
                }
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(10), pick(11);
    Var x = make_leaf(random_tensor({2, 2, 4, 3}, rng), true, "x");
    Var w = make_leaf(random_tensor({3, 2, 3, 3}, rng), true, "w");
    Var b = make_leaf(random_tensor({3}, rng), true, "b");
    ParamList params{{"x", x}, {"w", w}, {"b", b}};
    Var wt = make_weights({2, 3, 4, 3}, pick);
    auto res = gradcheck::check(
        [&] { return weighted_sum(conv2d(x, w, b, ConvSpec{1, 1}), wt); }, params, 12, pick);
    INFO(res.worst);
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("maxpool2d forward and gradient") {
    Rng rng(12), pick(13);
    Var x = make_leaf(random_tensor({1, 2, 6, 6}, rng), true, "x");
    Var y = maxpool2d(x, 2, 2);
    REQUIRE(y->value.shape() == Shape{1, 2, 3, 3});
    REQUIRE(y->value.at(0, 0, 0, 0) ==
            std::max({x->value.at(0, 0, 0, 0), x->value.at(0, 0, 0, 1), x->value.at(0, 0, 1, 0),
                      x->value.at(0, 0, 1, 1)}));
    ParamList params{{"x", x}};
    Var wt = make_weights({1, 2, 3, 3}, pick);
    auto res = gradcheck::check([&] { return weighted_sum(maxpool2d(x, 2, 2), wt); }, params, 16, pick);
    REQUIRE(res.max_rel_err < 1e-6);

    Var yp = maxpool2d(x, 3, 2, 1);
    REQUIRE(yp->value.shape() == Shape{1, 2, 3, 3});
}

TEST_CASE("bmm matches manual products for all transpose flags") {
    Rng rng(14), pick(15);
    Var a = make_leaf(random_tensor({2, 3, 4}, rng), true, "a");
    Var b = make_leaf(random_tensor({2, 4, 5}, rng), true, "b");
    Var c = bmm(a, b);
    for (int n = 0; n < 2; ++n)
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 5; ++j) {
                real acc = 0;
                for (int k = 0; k < 4; ++k)
                    acc += a->value[(n * 3 + i) * 4 + k] * b->value[(n * 4 + k) * 5 + j];
                REQUIRE(c->value[(n * 3 + i) * 5 + j] == Catch::Approx(acc));
            }
    ParamList params{{"a", a}, {"b", b}};
    Var wt = make_weights({2, 3, 5}, pick);
    auto res = gradcheck::check([&] { return weighted_sum(bmm(a, b), wt); }, params, 10, pick);
    REQUIRE(res.max_rel_err < 1e-6);

    Var at = make_leaf(random_tensor({2, 4, 3}, rng), true, "at");
    ParamList p2{{"at", at}, {"b", b}};
    auto r2 = gradcheck::check([&] { return weighted_sum(bmm(at, b, true, false), wt); }, p2, 10, pick);
    REQUIRE(r2.max_rel_err < 1e-6);

    Var bt = make_leaf(random_tensor({2, 5, 4}, rng), true, "bt");
    ParamList p3{{"a", a}, {"bt", bt}};
    auto r3 = gradcheck::check([&] { return weighted_sum(bmm(a, bt, false, true), wt); }, p3, 10, pick);
    REQUIRE(r3.max_rel_err < 1e-6);
}

TEST_CASE("softmax_lastdim rows are distributions and gradient is exact") {
    Rng rng(16), pick(17);
    Var x = make_leaf(random_tensor({2, 3, 5}, rng, -2.0, 2.0), true, "x");
    Var y = softmax_lastdim(x);
    for (int r = 0; r < 6; ++r) {
        real s = 0;
        for (int j = 0; j < 5; ++j) s += y->value[r * 5 + j];
        REQUIRE(s == Catch::Approx(1.0));
    }
    ParamList params{{"x", x}};
    Var wt = make_weights({2, 3, 5}, pick);
    auto res = gradcheck::check([&] { return weighted_sum(softmax_lastdim(x), wt); }, params, 15, pick);
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("log_softmax_rows matches manual computation") {
    Rng rng(18), pick(19);
    Var x = make_leaf(random_tensor({3, 4}, rng, -3.0, 3.0), true, "x");
    Var y = log_softmax_rows(x);
    for (int i = 0; i < 3; ++i) {
        real lse = 0;
        for (int j = 0; j < 4; ++j) lse += std::exp(x->value.at(i, j));
        lse = std::log(lse);
        for (int j = 0; j < 4; ++j) REQUIRE(y->value.at(i, j) == Catch::Approx(x->value.at(i, j) - lse));
    }
    ParamList params{{"x", x}};
    Var wt = make_weights({3, 4}, pick);
    auto res = gradcheck::check([&] { return weighted_sum(log_softmax_rows(x), wt); }, params, 12, pick);
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("reduction and broadcast ops") {
    Rng rng(20), pick(21);
    Var x = make_leaf(random_tensor({4, 3}, rng), true, "x");
    Var v = make_leaf(random_tensor({3}, rng), true, "v");

    Var cm = col_mean(x);
    for (int j = 0; j < 3; ++j) {
        real s = 0;
        for (int i = 0; i < 4; ++i) s += x->value.at(i, j);
        REQUIRE(cm->value[j] == Catch::Approx(s / 4));
    }

    Var x3 = make_leaf(random_tensor({2, 3, 4}, rng), true, "x3");
    Var chm = channel_mean(x3);
    for (int c = 0; c < 3; ++c) {
        real s = 0;
        for (int n = 0; n < 2; ++n)
            for (int p = 0; p < 4; ++p) s += x3->value[(n * 3 + c) * 4 + p];
        REQUIRE(chm->value[c] == Catch::Approx(s / 8));
    }

    Var x4 = make_leaf(random_tensor({2, 3, 2, 2}, rng), true, "x4");
    Var sm = spatial_mean(x4);
    REQUIRE(sm->value.shape() == Shape{2, 3});
    real s00 = 0;
    for (int p = 0; p < 4; ++p) s00 += x4->value[p];
    REQUIRE(sm->value.at(0, 0) == Catch::Approx(s00 / 4));

    Var sq = seq_mean(x, 2);  // [4,3] -> [2,3]
    REQUIRE(sq->value.at(0, 1) == Catch::Approx((x->value.at(0, 1) + x->value.at(1, 1)) / 2));

    ParamList params{{"x", x}, {"v", v}, {"x3", x3}, {"x4", x4}};
    auto res = gradcheck::check([&] {
        Var a = add_rowvec(x, v);
        Var b = mul_rowvec(a, v);
        Var c = add_channelvec(x3, col_mean(b));
        Var d = mul_channelvec(c, col_mean(b));
        return add(add(mean_all(d), mean_all(spatial_mean(x4))),
                   add(mean_all(seq_mean(b, 2)), mean_all(channel_mean(x3))));
    }, params, 10, pick);
    INFO(res.worst);
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("structural ops roundtrip and gradients") {
    Rng rng(22), pick(23);
    Var x = make_leaf(random_tensor({6, 4}, rng), true, "x");
    Var y = make_leaf(random_tensor({6, 2}, rng), true, "y");

    Var cc = concat_cols(x, y);
    REQUIRE(cc->value.shape() == Shape{6, 6});
    REQUIRE(cc->value.at(2, 4) == y->value.at(2, 0));

    Var cr = concat_rows({x, x});
    REQUIRE(cr->value.shape() == Shape{12, 4});
    REQUIRE(cr->value.at(7, 1) == x->value.at(1, 1));

    Var sl = slice_cols(x, 1, 3);
    REQUIRE(sl->value.at(0, 0) == x->value.at(0, 1));

    Var g = gather_rows(x, {3, 0, 3});
    REQUIRE(g->value.at(0, 2) == x->value.at(3, 2));
    REQUIRE(g->value.at(2, 2) == x->value.at(3, 2));

    Var t = take_per_row(x, {1, 0, 3, 2, 1, 0});
    REQUIRE(t->value[2] == x->value.at(2, 3));

    Var gr = group_rows_to_cols(x, 3);  // [6,4] -> [2,12]
    REQUIRE(gr->value.shape() == Shape{2, 12});
    REQUIRE(gr->value.at(1, 5) == x->value.at(4, 1));

    ParamList params{{"x", x}, {"y", y}};
    auto res = gradcheck::check([&] {
        Var a = concat_cols(x, y);
        Var b = concat_rows({slice_cols(a, 0, 3), slice_cols(a, 3, 6)});
        Var c = gather_rows(b, {0, 5, 5, 2, 11});
        Var d = group_rows_to_cols(reshape(c, {5, 3}), 5);
        return add(sum_all(d), sum_all(take_per_row(x, {1, 0, 3, 2, 1, 0})));
    }, params, 12, pick);
    INFO(res.worst);
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("pairwise_sqdist matches manual distances") {
    Rng rng(24), pick(25);
    Var x = make_leaf(random_tensor({5, 3}, rng), true, "x");
    Var d = pairwise_sqdist(x);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
            real acc = 0;
            for (int k = 0; k < 3; ++k) {
                real diff = x->value.at(i, k) - x->value.at(j, k);
                acc += diff * diff;
            }
            REQUIRE(d->value.at(i, j) == Catch::Approx(acc).margin(1e-12));
        }
    ParamList params{{"x", x}};
    Var wt = make_weights({5, 5}, pick);
    auto res = gradcheck::check([&] { return weighted_sum(pairwise_sqdist(x), wt); }, params, 15, pick);
    INFO(res.worst);
    REQUIRE(res.max_rel_err < 1e-6);
}

TEST_CASE("backward rejects non-scalar roots") {
    Rng rng(26);
    Var x = make_leaf(random_tensor({2, 2}, rng), true, "x");
    REQUIRE_THROWS_AS(backward(add(x, x)), std::invalid_argument);
}

TEST_CASE("shape mismatches raise invalid_argument") {
    Rng rng(27);
    Var a = make_leaf(random_tensor({2, 3}, rng), true, "a");
    Var b = make_leaf(random_tensor({3, 2}, rng), true, "b");
    REQUIRE_THROWS_AS(add(a, b), std::invalid_argument);
    REQUIRE_THROWS_AS(linear(a, b), std::invalid_argument);  // w cols != x cols
    REQUIRE_THROWS_AS(gather_rows(a, {5}), std::invalid_argument);
    REQUIRE_THROWS_AS(slice_cols(a, 2, 2), std::invalid_argument);
}
