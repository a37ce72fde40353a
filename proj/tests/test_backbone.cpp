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

}  // namespace

TEST_CASE("stem output shapes follow stride arithmetic") {
    Rng rng(50);
    Stem stem(BackboneConfig::tiny(), rng);
    Var frames = make_leaf(random_tensor({2, 3, 64, 32}, rng, 0.0, 1.0), false);
    Var y = stem.forward(frames, true);
    REQUIRE(y->value.shape() == Shape{2, 16, 32, 16});

    Var zero = make_leaf(Tensor({1, 3, 48, 24}), false);
    Var yz = stem.forward(zero, true);
    REQUIRE(yz->value.all_finite());
}

TEST_CASE("visible and infrared stems differ when parameters differ") {
    ReidModel model({.backbone = BackboneConfig::tiny(), .num_identities = 4, .seed = 7});
    Rng rng(51);
    Var frame = make_leaf(random_tensor({1, 3, 48, 24}, rng, 0.0, 1.0), false);
    Var yv = model.stem_forward(frame, Modality::visible, false);
    Var yi = model.stem_forward(frame, Modality::infrared, false);
    REQUIRE(yv->value.shape() == yi->value.shape());
    REQUIRE(max_abs_diff(yv->value, yi->value) > 1e-6);
}

TEST_CASE("staged encoder advances stages with configured channels") {
    Rng rng(52);
    BackboneConfig cfg = BackboneConfig::tiny();
    StagedEncoder enc(cfg, rng);
    Var stem_map = make_leaf(random_tensor({2, 16, 24, 12}, rng), false);

    Var s3 = enc.forward_stages13(stem_map, false);
    REQUIRE(s3->value.shape() == Shape{2, 64, 6, 3});
    Var s4 = enc.forward_stage4(s3, false);
    REQUIRE(s4->value.shape() == Shape{2, 128, 6, 3});

    Var full = enc.forward(stem_map, false);
    REQUIRE(max_abs_diff(full->value, s4->value) == 0.0);

    // stepwise block-by-block oracle
    Var y = stem_map;
    for (int s = 0; s < 4; ++s)
        for (auto& blk : enc.stages[s]) y = blk.forward(y, false);
    REQUIRE(max_abs_diff(y->value, full->value) == 0.0);

    // wrong entry stage
    REQUIRE_THROWS_AS(enc.forward_stage4(stem_map, false), std::invalid_argument);
    REQUIRE_THROWS_AS(enc.forward_stages13(s3, false), std::invalid_argument);
}

TEST_CASE("resnet50_shape preset keeps the architecture skeleton") {
    BackboneConfig cfg = BackboneConfig::resnet50_shape();
    REQUIRE(cfg.total_downsample() == 16);
    REQUIRE(cfg.stage_channels == std::array<int, 4>{256, 512, 1024, 2048});
    REQUIRE(cfg.stage_blocks == std::array<int, 4>{3, 4, 6, 3});
    REQUIRE(cfg.stem_maxpool);

    Rng rng(53);
    Stem stem(cfg, rng);
    Var frames = make_leaf(random_tensor({1, 3, 64, 32}, rng, 0.0, 1.0), false);
    Var y = stem.forward(frames, false);
    REQUIRE(y->value.shape() == Shape{1, 64, 16, 8});
}

TEST_CASE("attack and defense parameters are disjoint, stems shared") {
    ReidModel model({.backbone = BackboneConfig::tiny(), .num_identities = 4, .seed = 11});
    Rng rng(54);
    Var frame = make_leaf(random_tensor({2, 3, 48, 24}, rng, 0.0, 1.0), false);

    auto def_out = [&] {
        Var stems = model.stem_forward(frame, Modality::visible, false);
        return model.defense_forward_single(stems, 2, false).first->value;
    };
    auto att_out = [&] {
        Var stems = model.stem_forward(frame, Modality::visible, false);
        return model.attack_embed(stems, 2, false)->value;
    };

    Tensor def0 = def_out(), att0 = att_out();

    // mutate an attack-encoder parameter: defense output must not move
    model.enc_att.stages[0][0].conv1.w->value[0] += 0.5;
    REQUIRE(max_abs_diff(def_out(), def0) == 0.0);
    REQUIRE(max_abs_diff(att_out(), att0) > 0.0);

    Tensor att1 = att_out();
    model.enc_def.stages[0][0].conv1.w->value[0] += 0.5;
    REQUIRE(max_abs_diff(att_out(), att1) == 0.0);
    REQUIRE(max_abs_diff(def_out(), def0) > 0.0);

    // stems feed both paths
    Tensor def1 = def_out(), att2 = att_out();
    model.stem_v.conv.w->value[0] += 0.5;
    REQUIRE(max_abs_diff(def_out(), def1) > 0.0);
    REQUIRE(max_abs_diff(att_out(), att2) > 0.0);
}

TEST_CASE("pool_frames averages space then frames") {
    Var one = constant(Tensor({2, 3, 2, 2}, 1.5));  // 1 sequence, T=2, constant 1.5
    Var pooled = pool_frames(one, 2);
    REQUIRE(pooled->value.shape() == Shape{1, 3});
    for (int j = 0; j < 3; ++j) REQUIRE(pooled->value.at(0, j) == Catch::Approx(1.5));

    // two frames with values 0 and 2 -> mean 1
    Tensor two({2, 1, 2, 2});
    for (int i = 4; i < 8; ++i) two[i] = 2.0;
    Var pooled2 = pool_frames(constant(std::move(two)), 2);
    REQUIRE(pooled2->value.at(0, 0) == Catch::Approx(1.0));

    REQUIRE_THROWS_AS(pool_frames(one, 5), std::invalid_argument);
}

TEST_CASE("embedding head batch statistics match a direct oracle on pooled vectors") {
    Rng rng(55);
    EmbeddingHead head(4);
    Var maps = make_leaf(random_tensor({6, 4, 3, 2}, rng), false);  // 3 sequences, T=2
    Var pooled = pool_frames(maps, 2);
    Var emb = head.forward(maps, 2, true);
    for (int j = 0; j < 4; ++j) {
        real mu = 0;
        for (int i = 0; i < 3; ++i) mu += pooled->value.at(i, j);
        mu /= 3;
        real var = 0;
        for (int i = 0; i < 3; ++i) {
            real d = pooled->value.at(i, j) - mu;
            var += d * d;
        }
        var /= 3;
        for (int i = 0; i < 3; ++i)
            REQUIRE(emb->value.at(i, j) ==
                    Catch::Approx((pooled->value.at(i, j) - mu) / std::sqrt(var + head.bn.eps)).margin(1e-10));
    }
}

TEST_CASE("gradients flow from a scalar probe back to stem parameters") {
    Rng rng(56), pick(57);
    BackboneConfig cfg = BackboneConfig::tiny();
    Stem stem(cfg, rng);
    StagedEncoder enc(cfg, rng);
    Var frames = make_leaf(random_tensor({2, 3, 16, 8}, rng, 0.0, 1.0), false);

    ParamList params;
    stem.collect("stem", params);
    auto res = gradcheck::check(
        [&] { return mean_all(enc.forward(stem.forward(frames, true), true)); }, params, 6, pick);
    INFO(res.worst);
    REQUIRE(res.max_rel_err < 1e-4);
}

TEST_CASE("stem rejects wrong input shapes") {
    ReidModel model({.backbone = BackboneConfig::tiny(), .num_identities = 4, .seed = 3});
    Var bad = constant(Tensor({1, 4, 48, 24}));
    REQUIRE_THROWS_AS(model.stem_forward(bad, Modality::visible, false), std::invalid_argument);
}
