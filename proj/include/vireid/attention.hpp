#pragma once

#include "vireid/nn.hpp"

namespace vireid {

struct AttentionConfig {
    int channels = 0;
    int qk_width = 0;  // 0 -> channels
};

// Scaled dot-product attention over the flattened spatial grid with 1x1
// projections and a residual connection onto the query map. With
// query == reference this is intra-modality self-attention (IMSA); with the
// opposite modality as reference it is cross-modality cross-attention (CMCA).
struct SpatialAttention {
    Conv2dLayer proj_q, proj_k, proj_v;
    int qk_width = 0;

    SpatialAttention() = default;
    SpatialAttention(AttentionConfig cfg, Rng& rng) {
        int c = cfg.channels;
        qk_width = cfg.qk_width > 0 ? cfg.qk_width : c;
        VIREID_CHECK(c % qk_width == 0, "attention projection width must divide channel count");
        proj_q = Conv2dLayer(c, qk_width, 1, 1, 0, true, rng);
        proj_k = Conv2dLayer(c, qk_width, 1, 1, 0, true, rng);
        proj_v = Conv2dLayer(c, c, 1, 1, 0, true, rng);
    }

    Var forward(const Var& query_map, const Var& reference_map) const {
        VIREID_CHECK(same_shape(query_map->value.shape(), reference_map->value.shape()),
                     "attention: query/reference shape mismatch ", shape_str(query_map->value.shape()),
                     " vs ", shape_str(reference_map->value.shape()));
        int N = query_map->value.dim(0), C = query_map->value.dim(1);
        int H = query_map->value.dim(2), W = query_map->value.dim(3);
        int P = H * W;
        Var q = reshape(proj_q.forward(query_map), {N, qk_width, P});
        Var k = reshape(proj_k.forward(reference_map), {N, qk_width, P});
        Var v = reshape(proj_v.forward(reference_map), {N, C, P});
        Var scores = scale(bmm(q, k, /*ta=*/true), 1.0 / std::sqrt(static_cast<real>(qk_width)));
        Var probs = softmax_lastdim(scores);              // [N, P, P], rows = query positions
        Var ctx = bmm(v, probs, /*ta=*/false, /*tb=*/true);  // [N, C, P]
        return add(query_map, reshape(ctx, {N, C, H, W}));
    }

    void collect(const std::string& prefix, ParamList& out) const {
        proj_q.collect(prefix + ".q", out);
        proj_k.collect(prefix + ".k", out);
        proj_v.collect(prefix + ".v", out);
    }
};

}  // namespace vireid
