#include <catch2/catch_amalgamated.hpp>

#include "support/gradcheck.hpp"
#include "vireid/model.hpp"

using namespace vireid;

namespace {

Tensor random_tensor(Shape s, Rng& rng, real lo = -1.0, real hi = 1.0) {
    Tensor t(std::move(s));
    rng.fill_uniform(t, lo, hi);
    return t;
}

// Independent self-attention oracle over a single [1, C, H, W] map using the
// layer's own projection weights.
Tensor self_attention_oracle(const SpatialAttention& att, const Tensor& x) {
    int C = x.dim(1), H = x.dim(2), W = x.dim(3), P = H * W;
    int dk = att.qk_width;
    auto project = [&](const Conv2dLayer& proj, int outc) {
        Tensor y({outc, P});
        for (int o = 0; o < outc; ++o)
            for (int p = 0; p < P; ++p) {
                real acc = proj.b->value[o];
                for (int c = 0; c < C; ++c) acc += proj.w->value.at(o, c, 0, 0) * x[c * P + p];
                y.at(o, p) = acc;
            }
        return y;
    };
    Tensor q = project(att.proj_q, dk), k = project(att.proj_k, dk), v = project(att.proj_v, C);
    Tensor out = x;
    for (int j = 0; j < P; ++j) {  // query position
        std::vector<real> scores(static_cast<size_t>(P));
        real mx = -1e300;
        for (int i = 0; i < P; ++i) {
            real s = 0;
            for (int c = 0; c < dk; ++c) s += q.at(c, j) * k.at(c, i);
            scores[static_cast<size_t>(i)] = s / std::sqrt(static_cast<real>(dk));
            mx = std::max(mx, scores[static_cast<size_t>(i)]);
        }
        real z = 0;
        for (int i = 0; i < P; ++i) z += std::exp(scores[static_cast<size_t>(i)] - mx);
        for (int c = 0; c < C; ++c) {
            real ctx = 0;
            for (int i = 0; i < P; ++i)
                ctx += std::exp(scores[static_cast<size_t>(i)] - mx) / z * v.at(c, i);
            out[c * P + j] += ctx;
        }
    }
    return out;
}

real identity_ce_oracle(const Tensor& emb, const std::vector<int>& labels, const Tensor& w) {
    int n = emb.dim(0), m = w.dim(0), d = emb.dim(1);
    real total = 0;
    for (int i = 0; i < n; ++i) {
        std::vector<real> logits(static_cast<size_t>(m), 0.0);
        for (int j = 0; j < m; ++j)
            for (int k = 0; k < d; ++k) logits[static_cast<size_t>(j)] += w.at(j, k) * emb.at(i, k);
        real mx = *std::max_element(logits.begin(), logits.end());
        real z = 0;
        for (real l : logits) z += std::exp(l - mx);
        total -= logits[static_cast<size_t>(labels[static_cast<size_t>(i)])] - mx - std::log(z);
    }
    return total / n;
}

// Exhaustive mining oracle over all anchor/pos/neg pairs.
real triplet_oracle(const Tensor& emb, const std::vector<int>& labels, real margin) {
    int n = emb.dim(0), d = emb.dim(1);
    auto sqdist = [&](int i, int j) {
        real acc = 0;
        for (int k = 0; k < d; ++k) {
            real diff = emb.at(i, k) - emb.at(j, k);
            acc += diff * diff;
        }
        return acc;
    };
    real total = 0;
    for (int i = 0; i < n; ++i) {
        real dp = -1, dn = 1e300;
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            if (labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(i)]) dp = std::max(dp, sqdist(i, j));
            else dn = std::min(dn, sqdist(i, j));
        }
        total += std::max(0.0, dp - dn + margin);
    }
    return total / n;
}

}  // namespace

TEST_CASE("attention: zero input with zero biases maps to zero") {
    Rng rng(60);
    SpatialAttention att({8, 0}, rng);
    Var z = constant(Tensor({2, 8, 3, 2}));
    Var y = att.forward(z, z);
    REQUIRE(y->value.max_abs() == 0.0);
}

TEST_CASE("attention on a 1x1 grid reduces to value projection plus residual") {
    Rng rng(61);
    SpatialAttention att({4, 0}, rng);
    rng.fill_uniform(att.proj_v.b->value, -0.3, 0.3);
    Var x = make_leaf(random_tensor({1, 4, 1, 1}, rng), false);
    Var y = att.forward(x, x);
    for (int c = 0; c < 4; ++c) {
        real vp = att.proj_v.b->value[c];
        for (int ci = 0; ci < 4; ++ci) vp += att.proj_v.w->value.at(c, ci, 0, 0) * x->value[ci];
        REQUIRE(y->value[c] == Catch::Approx(x->value[c] + vp).margin(1e-12));
    }
}

TEST_CASE("attention preserves shape over a range of grids") {
    Rng rng(62);
    for (auto [c, h, w] : {std::tuple{16, 24, 12}, {16, 5, 7}, {8, 1, 9}, {4, 6, 1}}) {
        SpatialAttention att({c, 0}, rng);
        Var x = make_leaf(random_tensor({2, c, h, w}, rng), false);
        REQUIRE(att.forward(x, x)->value.shape() == x->value.shape());
    }
}

TEST_CASE("attention with zero value projection is the identity map") {
    Rng rng(63);
    SpatialAttention att({6, 0}, rng);
    att.proj_v.w->value.zero();
    att.proj_v.b->value.zero();
    Var x = make_leaf(random_tensor({2, 6, 4, 3}, rng), false);
    Var y = att.forward(x, x);
    REQUIRE(max_abs_diff(y->value, x->value) == 0.0);
}

TEST_CASE("self-referenced cross-attention equals an independent self-attention oracle") {
    Rng rng(64);
    SpatialAttention att({5, 0}, rng);
    rng.fill_uniform(att.proj_q.b->value, -0.2, 0.2);
    rng.fill_uniform(att.proj_k.b->value, -0.2, 0.2);
    rng.fill_uniform(att.proj_v.b->value, -0.2, 0.2);
    Var x = make_leaf(random_tensor({1, 5, 3, 4}, rng), false);
    Var y = att.forward(x, x);
    Tensor oracle = self_attention_oracle(att, x->value);
    REQUIRE(max_abs_diff(y->value, oracle) < 1e-10);
}

TEST_CASE("cross-attention with zero reference keeps the query (value stream is zero)") {
    Rng rng(65);
    SpatialAttention att({6, 0}, rng);  // biases stay zero-initialized
    Var q = make_leaf(random_tensor({2, 6, 3, 3}, rng), false);
    Var ref = constant(Tensor({2, 6, 3, 3}));
    Var y = att.forward(q, ref);
    REQUIRE(max_abs_diff(y->value, q->value) == 0.0);
}

TEST_CASE("cross-attention 1x1 grids: output = value_projection(reference) + query") {
    Rng rng(66);
    SpatialAttention att({3, 0}, rng);
    rng.fill_uniform(att.proj_v.b->value, -0.4, 0.4);
    Var q = make_leaf(random_tensor({1, 3, 1, 1}, rng), false);
    Var ref = make_leaf(random_tensor({1, 3, 1, 1}, rng), false);
    Var y = att.forward(q, ref);
    for (int c = 0; c < 3; ++c) {
        real vp = att.proj_v.b->value[c];
        for (int ci = 0; ci < 3; ++ci) vp += att.proj_v.w->value.at(c, ci, 0, 0) * ref->value[ci];
        REQUIRE(y->value[c] == Catch::Approx(q->value[c] + vp).margin(1e-12));
    }
}

TEST_CASE("attention rejects mismatched query/reference shapes") {
    Rng rng(67);
    SpatialAttention att({4, 0}, rng);
    Var a = constant(Tensor({1, 4, 2, 2}));
    Var b = constant(Tensor({1, 4, 2, 3}));
    REQUIRE_THROWS_AS(att.forward(a, b), std::invalid_argument);
}

TEST_CASE("confusion loss: uniform predictions give exactly ln M, the global minimum") {
    Rng rng(68);
    Classifier w_def(6, 10, rng);
    w_def.w->value.zero();  // all logits equal -> uniform prediction
    Var emb = make_leaf(random_tensor({8, 6}, rng), false);
    Var loss = loss_cov_id(emb, w_def);
    REQUIRE(loss->value[0] == Catch::Approx(std::log(10.0)).margin(1e-9));

    // any other prediction is strictly larger (Gibbs inequality)
    rng.fill_normal(w_def.w->value, 0.0, 0.5);
    Var loss2 = loss_cov_id(emb, w_def);
    REQUIRE(loss2->value[0] > std::log(10.0));
}

TEST_CASE("confusion loss diverges for confident predictions") {
    Rng rng(69);
    Classifier w_def(2, 2, rng);
    w_def.w->value = Tensor({2, 2}, {40.0, 0.0, 0.0, 40.0});
    Var emb = constant(Tensor({1, 2}, {1.0, 0.0}));  // logit gap 40
    Var loss = loss_cov_id(emb, w_def);
    REQUIRE(loss->value[0] > 15.0);  // ~ (1/M) * 40
}

TEST_CASE("confusion loss matches a scalar arithmetic oracle") {
    Rng rng(70);
    Classifier w_def(5, 4, rng);
    rng.fill_normal(w_def.w->value, 0.0, 0.7);
    Var emb = make_leaf(random_tensor({4, 5}, rng), false);
    Var loss = loss_cov_id(emb, w_def);

    // oracle: -(1/M) sum_m log p_m averaged over sequences
    real expect = 0;
    for (int i = 0; i < 4; ++i) {
        std::vector<real> logits(4, 0.0);
        for (int j = 0; j < 4; ++j)
            for (int k = 0; k < 5; ++k) logits[static_cast<size_t>(j)] += w_def.w->value.at(j, k) * emb->value.at(i, k);
        real mx = *std::max_element(logits.begin(), logits.end());
        real z = 0;
        for (real l : logits) z += std::exp(l - mx);
        for (real l : logits) expect -= (l - mx - std::log(z)) / 4.0;
    }
    expect /= 4.0;
    REQUIRE(loss->value[0] == Catch::Approx(expect).margin(1e-10));

    REQUIRE_THROWS_AS(loss_cov_id(emb, Classifier(5, 1, rng)), std::invalid_argument);
}

TEST_CASE("identity cross-entropy closed forms and oracle") {
    Rng rng(71);
    Classifier w(4, 10, rng);

    // near-one-hot correct prediction -> loss ~ 0
    w.w->value.zero();
    for (int j = 0; j < 10; ++j) w.w->value.at(j, 0) = j == 3 ? 50.0 : -50.0;
    Var emb = constant(Tensor({2, 4}, {1, 0, 0, 0, 1, 0, 0, 0}));
    Var l0 = loss_identity_ce(emb, {3, 3}, w);
    REQUIRE(l0->value[0] == Catch::Approx(0.0).margin(1e-9));

    // uniform prediction -> ln 10
    w.w->value.zero();
    Var lu = loss_identity_ce(emb, {5, 2}, w);
    REQUIRE(lu->value[0] == Catch::Approx(std::log(10.0)).margin(1e-12));

    // random batch vs oracle
    rng.fill_normal(w.w->value, 0.0, 0.6);
    Var rnd = make_leaf(random_tensor({6, 4}, rng), false);
    std::vector<int> labels{0, 3, 9, 1, 1, 7};
    Var lr = loss_identity_ce(rnd, labels, w);
    REQUIRE(lr->value[0] == Catch::Approx(identity_ce_oracle(rnd->value, labels, w.w->value)).margin(1e-10));

    REQUIRE_THROWS_AS(loss_identity_ce(rnd, {0, 3, 10, 1, 1, 7}, w), std::invalid_argument);
    REQUIRE_THROWS_AS(loss_identity_ce(rnd, {0, 1}, w), std::invalid_argument);
}

TEST_CASE("triplet loss closed forms") {
    // anchor == positive (distance 0), nearest negative at squared distance 1
    Tensor emb({4, 1}, {0.0, 0.0, 1.0, 1.0});
    std::vector<int> labels{0, 0, 1, 1};
    Var l = loss_batch_hard_triplet(make_leaf(emb, false), labels, {0.3});
    REQUIRE(l->value[0] == Catch::Approx(0.0).margin(1e-12));

    // tie: positive and negative both at squared distance 1 -> exactly margin
    Tensor tie({4, 2}, {0, 0, 1, 0, 0, 1, 1, 1});
    Var lt = loss_batch_hard_triplet(make_leaf(tie, false), labels, {0.3});
    REQUIRE(lt->value[0] == Catch::Approx(0.3).margin(1e-12));
}

TEST_CASE("triplet loss equals the exhaustive mining oracle on random batches") {
    Rng rng(72);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor emb = random_tensor({8, 5}, rng);
        std::vector<int> labels{0, 0, 1, 1, 2, 2, 3, 3};
        Var l = loss_batch_hard_triplet(make_leaf(emb, false), labels, {0.3});
        REQUIRE(l->value[0] == Catch::Approx(triplet_oracle(emb, labels, 0.3)).margin(1e-12));
    }
}

TEST_CASE("triplet loss is invariant under batch permutation") {
    Rng rng(73);
    Tensor emb = random_tensor({8, 4}, rng);
    std::vector<int> labels{0, 1, 2, 0, 1, 2, 0, 1};
    real base = loss_batch_hard_triplet(make_leaf(emb, false), labels, {0.3})->value[0];
    std::vector<int> perm{7, 2, 4, 0, 6, 1, 3, 5};
    Tensor emb_p({8, 4});
    std::vector<int> labels_p(8);
    for (int i = 0; i < 8; ++i) {
        labels_p[static_cast<size_t>(i)] = labels[static_cast<size_t>(perm[static_cast<size_t>(i)])];
        for (int j = 0; j < 4; ++j) emb_p.at(i, j) = emb.at(perm[static_cast<size_t>(i)], j);
    }
    real permuted = loss_batch_hard_triplet(make_leaf(emb_p, false), labels_p, {0.3})->value[0];
    REQUIRE(permuted == Catch::Approx(base).margin(1e-12));
}

TEST_CASE("triplet loss vanishes when classes are separated by the margin") {
    // intra-class diameter^2 = 0.01, inter-class min distance^2 = 4 > 0.01 + 0.3
    Tensor emb({4, 1}, {0.0, 0.1, 2.0, 2.1});
    std::vector<int> labels{0, 0, 1, 1};
    Var l = loss_batch_hard_triplet(make_leaf(emb, false), labels, {0.3});
    REQUIRE(l->value[0] == 0.0);
}

TEST_CASE("triplet loss requires positives and negatives") {
    Tensor emb({3, 2}, {0, 0, 1, 1, 2, 2});
    REQUIRE_THROWS_AS(loss_batch_hard_triplet(make_leaf(emb, false), {0, 1, 2}, {0.3}),
                      std::invalid_argument);  // no positives
    REQUIRE_THROWS_AS(loss_batch_hard_triplet(make_leaf(emb, false), {0, 0, 0}, {0.3}),
                      std::invalid_argument);  // no negatives
    REQUIRE_THROWS_AS(loss_batch_hard_triplet(make_leaf(emb, false), {0, 0, 1}, {-0.1}),
                      std::invalid_argument);
}

TEST_CASE("total loss is the exact weighted sum") {
    LossWeights w{1.0, 0.5, 0.5};
    REQUIRE(total_loss({1, 1, 1, 1, 1}, w) == Catch::Approx(3.5).margin(1e-15));
    REQUIRE(total_loss({0, 0, 0, 0, 0}, w) == 0.0);
    REQUIRE(total_loss({2.5, 7, 3, 4, 9}, {0, 0, 0}) == Catch::Approx(2.5));
    REQUIRE_THROWS_AS(total_loss({std::nan(""), 0, 0, 0, 0}, w), TrainingDivergence);
    REQUIRE_THROWS_AS(total_loss({0, 0, std::numeric_limits<real>::infinity(), 0, 0}, w),
                      TrainingDivergence);
}

TEST_CASE("attack embedding equals the stepwise manual composition") {
    ReidModel model({.backbone = BackboneConfig::tiny(), .num_identities = 4, .seed = 21});
    Rng rng(74);
    Var frames = make_leaf(random_tensor({4, 3, 48, 24}, rng, 0.0, 1.0), false);  // 2 seqs, T=2
    Var stems = model.stem_forward(frames, Modality::visible, false);
    Var emb = model.attack_embed(stems, 2, false);
    REQUIRE(emb->value.shape() == Shape{2, 128});
    REQUIRE(emb->value.all_finite());

    // manual: imsa -> att encoder -> pool -> bn
    Var manual = model.head_att.bn.forward(
        pool_frames(model.enc_att.forward(model.imsa.forward(stems, stems), false), 2), false);
    REQUIRE(max_abs_diff(manual->value, emb->value) == 0.0);

    // two different sequences give different embeddings
    real row_diff = 0;
    for (int j = 0; j < 128; ++j) row_diff += std::fabs(emb->value.at(0, j) - emb->value.at(1, j));
    REQUIRE(row_diff > 1e-6);
}

TEST_CASE("defense forward is symmetric for identical modal inputs") {
    ReidModel model({.backbone = BackboneConfig::tiny(), .num_identities = 4, .seed = 22});
    Rng rng(75);
    Var stems = make_leaf(random_tensor({2, 16, 24, 12}, rng), false);  // 1 seq, T=2
    DefenseOutputs out = model.defense_forward(stems, stems, 2, false);
    REQUIRE(out.embeddings->value.shape() == Shape{2, 128});
    for (int j = 0; j < 128; ++j)
        REQUIRE(out.embeddings->value.at(0, j) == Catch::Approx(out.embeddings->value.at(1, j)).margin(1e-12));
}

TEST_CASE("defense forward equals the stepwise fusion oracle") {
    ReidModel model({.backbone = BackboneConfig::tiny(), .num_identities = 4, .seed = 23});
    Rng rng(76);
    Var sv = make_leaf(random_tensor({2, 16, 24, 12}, rng), false);
    Var si = make_leaf(random_tensor({2, 16, 24, 12}, rng), false);
    DefenseOutputs out = model.defense_forward(sv, si, 2, false);

    Var f3v = model.enc_def.forward_stages13(sv, false);
    Var f3i = model.enc_def.forward_stages13(si, false);
    Var f4v = model.enc_def.forward_stage4(f3v, false);
    Var f4i = model.enc_def.forward_stage4(f3i, false);
    Var fused3v = model.enc_def.forward_stage4(model.cmca3.forward(f3v, f3i), false);
    Var fused3i = model.enc_def.forward_stage4(model.cmca3.forward(f3i, f3v), false);
    Var fused4v = model.cmca4.forward(f4v, f4i);
    Var fused4i = model.cmca4.forward(f4i, f4v);
    REQUIRE(fused3v->value.shape() == fused4v->value.shape());  // required for the averaging
    Var pooled_v = pool_frames(scale(add(fused3v, fused4v), 0.5), 2);
    Var pooled_i = pool_frames(scale(add(fused3i, fused4i), 0.5), 2);
    Var manual = model.head_def.bn.forward(concat_rows({pooled_v, pooled_i}), false);
    REQUIRE(max_abs_diff(manual->value, out.embeddings->value) == 0.0);

    REQUIRE_THROWS_AS(model.defense_forward(sv, make_leaf(random_tensor({4, 16, 24, 12}, rng), false), 2, false),
                      std::invalid_argument);
}

TEST_CASE("confusion loss routes no gradient into a frozen defense classifier") {
    Rng rng(77);
    Classifier w_def(6, 4, rng);
    Var emb = make_leaf(random_tensor({4, 6}, rng), true, "emb");
    ParamList wdef_params;
    w_def.collect("w_def", wdef_params);
    FreezeGuard guard(wdef_params);
    zero_grads(wdef_params);
    Var loss = loss_cov_id(emb, w_def);
    backward(loss);
    REQUIRE(w_def.w->grad_or_zero().max_abs() == 0.0);
    REQUIRE(emb->grad_or_zero().max_abs() > 0.0);
}

TEST_CASE("loss gradients match finite differences on a small composite") {
    Rng rng(78), pick(79);
    Classifier w_def(5, 4, rng), w_att(5, 4, rng);
    Var emb = make_leaf(random_tensor({6, 5}, rng), true, "emb");
    std::vector<int> labels{0, 1, 2, 0, 1, 2};
    ParamList params{{"emb", emb}, {"w_att", w_att.w}};
    auto res = gradcheck::check([&] {
        Var cov = loss_cov_id(emb, w_def);
        Var att = loss_identity_ce(emb, labels, w_att);
        Var tri = loss_batch_hard_triplet(emb, labels, {0.3});
        return total_loss_graph(cov, att, nullptr, tri, nullptr, {1.0, 0.5, 0.5});
    }, params, 10, pick);
    INFO(res.worst);
    REQUIRE(res.max_rel_err < 1e-5);
}
