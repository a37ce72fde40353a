#pragma once

#include <vector>

#include "vireid/losses.hpp"
#include "vireid/nn.hpp"

namespace vireid {

enum class GateMode {
    full,          // LSTM_spa output drives the highlight gate
    zero_spatial,  // LSTM_spa removed: gate sees a zero vector of equal width
    bypass,        // gate removed entirely (temporal-embedding-only variant)
};

struct FrmConfig {
    int parts = 6;  // K horizontal patches
    int dim = 0;    // patch vector width D_p (stage-4 channels)
    GateMode gate = GateMode::full;
};

// Spatial-temporal relation mining over PCB patches: per-part motion
// recurrence, spatial recurrence across the last frame's parts, a sigmoid
// highlight gate, temporal embedding and part-wise aggregation.
struct FrmStig {
    FrmConfig cfg;
    Lstm lstm_mot, lstm_spa;
    Linear lm1, lm2;
    Classifier w_se;

    FrmStig() = default;
    FrmStig(FrmConfig cfg_, int num_identities, Rng& rng) : cfg(cfg_) {
        VIREID_CHECK(cfg.parts >= 1 && cfg.dim >= 1, "frm config needs parts and dim");
        lstm_mot = Lstm(cfg.dim, cfg.dim, rng);
        if (cfg.gate == GateMode::full) lstm_spa = Lstm(cfg.dim, cfg.dim, rng);
        if (cfg.gate != GateMode::bypass) {
            lm1 = Linear(2 * cfg.dim, cfg.dim, true, rng);
            lm2 = Linear(cfg.dim, cfg.dim, true, rng);
        }
        w_se = Classifier(cfg.parts * cfg.dim, num_identities, rng);
    }

    int descriptor_width() const { return cfg.parts * cfg.dim; }

    // Motion recurrence over one part track (temporal order preserved).
    std::vector<Var> motion_encode(const std::vector<Var>& track) const {
        VIREID_CHECK(!track.empty(), "motion_encode: empty track");
        return lstm_mot.forward(track);
    }

    // Spatial recurrence over the K part features of the last frame; the
    // final hidden state is the spatial relation representation.
    Var spatial_encode(const std::vector<Var>& last_frame_parts) const {
        VIREID_CHECK(cfg.gate == GateMode::full, "spatial_encode requires the full gate mode");
        VIREID_CHECK(static_cast<int>(last_frame_parts.size()) == cfg.parts,
                     "spatial_encode expects exactly K=", cfg.parts, " part features");
        return lstm_spa.forward(last_frame_parts).back();
    }

    // Gate A = Sigmoid(LM(ReLU(LM(concat(f, spatial))))), output = f .* A.
    Var highlight(const Var& f, const Var& spatial) const {
        VIREID_CHECK(cfg.gate != GateMode::bypass, "highlight disabled in bypass mode");
        VIREID_CHECK(f->value.dim(1) == cfg.dim && spatial->value.dim(1) == cfg.dim,
                     "highlight width mismatch: gate expects ", cfg.dim);
        Var a = sigmoid(lm2.forward(relu(lm1.forward(concat_cols(f, spatial)))));
        return mul(f, a);
    }

    // Full branch: stage-4 defense maps of S sequences ([S*T, C, H, W]) to the
    // aggregated part descriptor [S, K*D_p].
    Var descriptor(const Var& maps, int T, bool /*training*/ = true) const {
        VIREID_CHECK(maps->value.rank() == 4, "frm descriptor expects stacked frame maps");
        VIREID_CHECK(maps->value.dim(1) == cfg.dim, "frm expects ", cfg.dim, " channels, got ",
                     maps->value.dim(1));
        VIREID_CHECK(T >= 1 && maps->value.dim(0) % T == 0, "frame count not divisible by T");
        int S = maps->value.dim(0) / T;
        int K = cfg.parts;

        Var patches = partition_mean(maps, K);  // [(S*T*K), C], rows (s, t, k)

        auto frame_rows = [&](int t) {
            std::vector<int> idx(static_cast<size_t>(S) * K);
            for (int s = 0; s < S; ++s)
                for (int k = 0; k < K; ++k) idx[static_cast<size_t>(s) * K + k] = (s * T + t) * K + k;
            return idx;
        };

        std::vector<Var> steps;
        steps.reserve(static_cast<size_t>(T));
        for (int t = 0; t < T; ++t) steps.push_back(gather_rows(patches, frame_rows(t)));
        std::vector<Var> tilde = lstm_mot.forward(steps);  // per t: [S*K, D]

        Var gated;
        if (cfg.gate == GateMode::bypass) {
            gated = patches;
        } else {
            Var spatial_rows;
            if (cfg.gate == GateMode::full) {
                std::vector<Var> spa_steps;
                spa_steps.reserve(static_cast<size_t>(K));
                for (int k = 0; k < K; ++k) {
                    std::vector<int> idx(static_cast<size_t>(S));
                    for (int s = 0; s < S; ++s) idx[static_cast<size_t>(s)] = s * K + k;
                    spa_steps.push_back(gather_rows(tilde.back(), idx));
                }
                Var bar_f = lstm_spa.forward(spa_steps).back();  // [S, D]
                std::vector<int> broadcast(static_cast<size_t>(S) * T * K);
                for (int s = 0; s < S; ++s)
                    for (int t = 0; t < T; ++t)
                        for (int k = 0; k < K; ++k) broadcast[static_cast<size_t>((s * T + t) * K + k)] = s;
                spatial_rows = gather_rows(bar_f, broadcast);
            } else {
                spatial_rows = constant(Tensor({S * T * K, cfg.dim}));
            }
            Var a = sigmoid(lm2.forward(relu(lm1.forward(concat_cols(patches, spatial_rows)))));
            gated = mul(patches, a);
        }

        // motion embedding: permute the stacked per-t outputs to (s, t, k) rows
        Var tilde_cat = concat_rows(tilde);  // rows (t, s, k)
        std::vector<int> perm(static_cast<size_t>(S) * T * K);
        for (int s = 0; s < S; ++s)
            for (int t = 0; t < T; ++t)
                for (int k = 0; k < K; ++k)
                    perm[static_cast<size_t>((s * T + t) * K + k)] = (t * S + s) * K + k;
        Var fused = add(gated, gather_rows(tilde_cat, perm));

        Var acc;
        for (int t = 0; t < T; ++t) {
            Var part = gather_rows(fused, frame_rows(t));
            acc = acc ? add(acc, part) : part;
        }
        Var part_mean = scale(acc, 1.0 / T);      // [S*K, D]
        return group_rows_to_cols(part_mean, K);  // [S, K*D]
    }

    Var loss_p_id(const Var& descriptors, const std::vector<int>& labels) const {
        return loss_identity_ce(descriptors, labels, w_se);
    }

    void collect(const std::string& prefix, ParamList& out) const {
        lstm_mot.collect(prefix + ".lstm_mot", out);
        if (cfg.gate == GateMode::full) lstm_spa.collect(prefix + ".lstm_spa", out);
        if (cfg.gate != GateMode::bypass) {
            lm1.collect(prefix + ".lm1", out);
            lm2.collect(prefix + ".lm2", out);
        }
    }
    void collect_classifier(const std::string& prefix, ParamList& out) const {
        w_se.collect(prefix + ".w_se", out);
    }
};

}  // namespace vireid
