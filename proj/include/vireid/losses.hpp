#pragma once

#include <limits>
#include <vector>

#include "vireid/nn.hpp"

namespace vireid {

// Confusion loss of the self-attack branch: mean over sequences of the
// cross-entropy between the (frozen) defense classifier's prediction and the
// uniform distribution over the M identities. Lower bounded by ln M, with
// equality exactly at uniform predictions.
inline Var loss_cov_id(const Var& embeddings, const Classifier& w_def) {
    VIREID_CHECK(w_def.num_classes() >= 2, "confusion loss needs at least 2 identities");
    return neg(mean_all(log_softmax_rows(w_def.logits(embeddings))));
}

// One-hot identity cross-entropy, mean over the batch sequences. Shared by
// the attack, defense and patch-feature identity losses.
inline Var loss_identity_ce(const Var& embeddings, const std::vector<int>& labels, const Classifier& w) {
    VIREID_CHECK(static_cast<int>(labels.size()) == embeddings->value.dim(0),
                 "one label per embedding row");
    for (int y : labels)
        VIREID_CHECK(0 <= y && y < w.num_classes(), "label ", y, " out of range [0, ", w.num_classes(), ")");
    return neg(mean_all(take_per_row(log_softmax_rows(w.logits(embeddings)), labels)));
}

struct TripletConfig {
    real margin = 0.3;
};

// Batch-hard triplet with squared Euclidean distances. Every sequence is an
// anchor; hardest positive = farthest same-identity row, hardest negative =
// nearest other-identity row, mined over the modality-mixed batch.
inline Var loss_batch_hard_triplet(const Var& embeddings, const std::vector<int>& labels,
                                   TripletConfig cfg = {}) {
    VIREID_CHECK(cfg.margin > 0.0, "triplet margin must be positive");
    int n = embeddings->value.dim(0);
    VIREID_CHECK(static_cast<int>(labels.size()) == n, "one label per embedding row");
    Var dist = pairwise_sqdist(embeddings);
    if (!dist->value.all_finite())
        throw TrainingDivergence("non-finite embedding distances in triplet mining");
    std::vector<int> pos(static_cast<size_t>(n)), negi(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        real worst_pos = -1.0, best_neg = std::numeric_limits<real>::infinity();
        int bp = -1, bn = -1;
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            real d = dist->value.at(i, j);
            if (labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(i)]) {
                if (d > worst_pos) {
                    worst_pos = d;
                    bp = j;
                }
            } else if (d < best_neg) {
                best_neg = d;
                bn = j;
            }
        }
        VIREID_CHECK(bp >= 0, "anchor ", i, " has no positive in batch");
        VIREID_CHECK(bn >= 0, "anchor ", i, " has no negative in batch");
        pos[static_cast<size_t>(i)] = bp;
        negi[static_cast<size_t>(i)] = bn;
    }
    Var dpos = take_per_row(dist, std::move(pos));
    Var dneg = take_per_row(dist, std::move(negi));
    return mean_all(relu(add_scalar(sub(dpos, dneg), cfg.margin)));
}

// ---------------------------------------------------------------------------
// Total objective

struct LossWeights {
    real lambda1 = 1.0, lambda2 = 0.5, lambda3 = 0.5;
};

struct LossComponents {
    real cov_id = 0.0, att_id = 0.0, def_id = 0.0, def_tri = 0.0, p_id = 0.0;
};

inline real total_loss(const LossComponents& c, const LossWeights& w) {
    auto finite = [](real v) { return std::isfinite(v); };
    if (!finite(c.cov_id) || !finite(c.att_id) || !finite(c.def_id) || !finite(c.def_tri) || !finite(c.p_id))
        throw TrainingDivergence(detail::format_msg(
            "non-finite loss component: cov_id=", c.cov_id, " att_id=", c.att_id, " def_id=", c.def_id,
            " def_tri=", c.def_tri, " p_id=", c.p_id));
    return c.cov_id + w.lambda1 * c.att_id + w.lambda2 * (c.def_id + c.def_tri) + w.lambda3 * c.p_id;
}

// Graph-level composition of the same objective; null components are dropped.
inline Var total_loss_graph(const Var& cov, const Var& att, const Var& def_id, const Var& def_tri,
                            const Var& p_id, const LossWeights& w) {
    Var total = cov ? cov : constant(Tensor::scalar(0.0));
    if (att) total = add(total, scale(att, w.lambda1));
    if (def_id) total = add(total, scale(def_id, w.lambda2));
    if (def_tri) total = add(total, scale(def_tri, w.lambda2));
    if (p_id) total = add(total, scale(p_id, w.lambda3));
    return total;
}

// ---------------------------------------------------------------------------
// Plain diagnostics (no gradients)

inline real mean_prediction_entropy(const Tensor& logits) {
    VIREID_CHECK(logits.rank() == 2, "entropy expects [n, M] logits");
    int n = logits.dim(0), m = logits.dim(1);
    real total = 0.0;
    for (int i = 0; i < n; ++i) {
        real mx = logits.at(i, 0);
        for (int j = 1; j < m; ++j) mx = std::max(mx, logits.at(i, j));
        real z = 0.0;
        for (int j = 0; j < m; ++j) z += std::exp(logits.at(i, j) - mx);
        real h = 0.0;
        for (int j = 0; j < m; ++j) {
            real p = std::exp(logits.at(i, j) - mx) / z;
            if (p > 0.0) h -= p * std::log(p);
        }
        total += h;
    }
    return total / n;
}

inline real classification_accuracy(const Tensor& logits, const std::vector<int>& labels) {
    VIREID_CHECK(logits.rank() == 2 && static_cast<int>(labels.size()) == logits.dim(0),
                 "accuracy: one label per row");
    int n = logits.dim(0), m = logits.dim(1), hits = 0;
    for (int i = 0; i < n; ++i) {
        int arg = 0;
        for (int j = 1; j < m; ++j)
            if (logits.at(i, j) > logits.at(i, arg)) arg = j;
        if (arg == labels[static_cast<size_t>(i)]) ++hits;
    }
    return static_cast<real>(hits) / n;
}

}  // namespace vireid
