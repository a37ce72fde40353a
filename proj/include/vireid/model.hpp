#pragma once

#include <string>
#include <vector>

#include "vireid/attention.hpp"
#include "vireid/backbone.hpp"
#include "vireid/frm_stig.hpp"
#include "vireid/losses.hpp"
#include "vireid/synthetic.hpp"

namespace vireid {

enum class FrmMode { off, full, no_spa, fr_e_ti_only };

inline const char* frm_mode_name(FrmMode m) {
    switch (m) {
        case FrmMode::off: return "off";
        case FrmMode::full: return "full";
        case FrmMode::no_spa: return "no-spa";
        case FrmMode::fr_e_ti_only: return "fr-e-ti-only";
    }
    return "off";
}

struct ModelConfig {
    BackboneConfig backbone = BackboneConfig::tiny();
    int num_identities = 10;
    bool asam = true;
    bool adm = true;
    FrmMode frm = FrmMode::full;
    int parts = 6;
    int attention_qk = 0;  // 0 -> channel count
    uint64_t seed = 1;

    int embed_dim() const { return backbone.embed_dim(); }
    int frm_width() const { return parts * backbone.embed_dim(); }
    int descriptor_width() const {
        return embed_dim() + (frm == FrmMode::off ? 0 : frm_width());
    }
};

// Stacks the frames of a homogeneous sequence list into [S*T, 3, H, W].
inline Var stack_frames(const std::vector<const VideoSequence*>& seqs) {
    VIREID_CHECK(!seqs.empty(), "stack_frames: empty sequence list");
    const Shape& fs = seqs[0]->frames.shape();
    int T = fs[0];
    Tensor out({static_cast<int>(seqs.size()) * T, fs[1], fs[2], fs[3]});
    int64_t per_seq = seqs[0]->frames.numel();
    for (size_t s = 0; s < seqs.size(); ++s) {
        VIREID_CHECK(seqs[s]->frames.shape() == fs, "stack_frames: inconsistent frame shapes");
        std::copy(seqs[s]->frames.data(), seqs[s]->frames.data() + per_seq,
                  out.data() + static_cast<int64_t>(s) * per_seq);
    }
    return constant(std::move(out));
}

inline Var stack_frames(const std::vector<VideoSequence>& seqs) {
    std::vector<const VideoSequence*> ptrs;
    ptrs.reserve(seqs.size());
    for (const auto& s : seqs) ptrs.push_back(&s);
    return stack_frames(ptrs);
}

struct DefenseOutputs {
    Var embeddings;          // [n_b, D], visible block rows then infrared block rows
    Var stage4_v, stage4_i;  // pre-fusion stage-4 maps feeding the relation branch
};

// The full re-ID network: modality stems shared by both paths, the defense
// encoder with its two cross-attention fusions, the self-attack branch, and
// the spatial-temporal relation branch.
struct ReidModel {
    ModelConfig cfg;

    Stem stem_v, stem_i;
    StagedEncoder enc_def;
    SpatialAttention cmca3, cmca4;
    EmbeddingHead head_def;
    Classifier w_def;

    SpatialAttention imsa;
    StagedEncoder enc_att;
    EmbeddingHead head_att;
    Classifier w_att;

    FrmStig frm;

    explicit ReidModel(ModelConfig cfg_) : cfg(cfg_) {
        // Independent init streams per component, so ablation switches do not
        // shift the initialization of the remaining components.
        auto rng_for = [&](uint64_t tag) { return Rng(mix_seed(cfg.seed, tag)); };
        Rng r;
        r = rng_for(1);
        stem_v = Stem(cfg.backbone, r);
        r = rng_for(2);
        stem_i = Stem(cfg.backbone, r);
        r = rng_for(3);
        enc_def = StagedEncoder(cfg.backbone, r);
        head_def = EmbeddingHead(cfg.backbone.embed_dim());
        r = rng_for(4);
        w_def = Classifier(cfg.backbone.embed_dim(), cfg.num_identities, r);
        if (cfg.adm) {
            r = rng_for(5);
            cmca3 = SpatialAttention({cfg.backbone.stage3_channels(), cfg.attention_qk}, r);
            r = rng_for(6);
            cmca4 = SpatialAttention({cfg.backbone.embed_dim(), cfg.attention_qk}, r);
        }
        if (cfg.asam) {
            r = rng_for(7);
            imsa = SpatialAttention({cfg.backbone.stem_channels, cfg.attention_qk}, r);
            r = rng_for(8);
            enc_att = StagedEncoder(cfg.backbone, r);
            head_att = EmbeddingHead(cfg.backbone.embed_dim());
            r = rng_for(9);
            w_att = Classifier(cfg.backbone.embed_dim(), cfg.num_identities, r);
        }
        if (cfg.frm != FrmMode::off) {
            GateMode gate = cfg.frm == FrmMode::full ? GateMode::full
                            : cfg.frm == FrmMode::no_spa ? GateMode::zero_spatial
                                                         : GateMode::bypass;
            r = rng_for(10);
            frm = FrmStig({cfg.parts, cfg.backbone.embed_dim(), gate}, cfg.num_identities, r);
        }
    }

    // ---- forward pieces ----------------------------------------------------

    Var stem_forward(const Var& frames, Modality m, bool training) {
        VIREID_CHECK(frames->value.rank() == 4 && frames->value.dim(1) == cfg.backbone.in_channels,
                     "stem expects [N, ", cfg.backbone.in_channels, ", H, W] frames");
        return m == Modality::visible ? stem_v.forward(frames, training) : stem_i.forward(frames, training);
    }

    // Paired training forward of the defense path (Eqs 6-8): stage-3 fusion
    // passed through ConLa4, stage-4 fusion, dual-depth average, GAP+BN.
    DefenseOutputs defense_forward(const Var& stem_maps_v, const Var& stem_maps_i, int T, bool training) {
        VIREID_CHECK(stem_maps_v->value.dim(0) == stem_maps_i->value.dim(0),
                     "paired defense forward needs equally many frames per modality");
        DefenseOutputs out;
        Var f3v = enc_def.forward_stages13(stem_maps_v, training);
        Var f3i = enc_def.forward_stages13(stem_maps_i, training);
        out.stage4_v = enc_def.forward_stage4(f3v, training);
        out.stage4_i = enc_def.forward_stage4(f3i, training);
        Var pooled_v, pooled_i;
        if (cfg.adm) {
            Var fused3v = enc_def.forward_stage4(cmca3.forward(f3v, f3i), training);
            Var fused3i = enc_def.forward_stage4(cmca3.forward(f3i, f3v), training);
            Var fused4v = cmca4.forward(out.stage4_v, out.stage4_i);
            Var fused4i = cmca4.forward(out.stage4_i, out.stage4_v);
            pooled_v = pool_frames(scale(add(fused3v, fused4v), 0.5), T);
            pooled_i = pool_frames(scale(add(fused3i, fused4i), 0.5), T);
        } else {
            pooled_v = pool_frames(out.stage4_v, T);
            pooled_i = pool_frames(out.stage4_i, T);
        }
        out.embeddings = head_def.bn.forward(concat_rows({pooled_v, pooled_i}), training);
        return out;
    }

    // Inference-time defense path for one modality; CMCA self-references the
    // input since no paired opposite-modality sequence exists at query time.
    std::pair<Var, Var> defense_forward_single(const Var& stem_maps, int T, bool training) {
        Var f3 = enc_def.forward_stages13(stem_maps, training);
        Var f4 = enc_def.forward_stage4(f3, training);
        Var pooled;
        if (cfg.adm) {
            Var fused3 = enc_def.forward_stage4(cmca3.forward(f3, f3), training);
            Var fused4 = cmca4.forward(f4, f4);
            pooled = pool_frames(scale(add(fused3, fused4), 0.5), T);
        } else {
            pooled = pool_frames(f4, T);
        }
        return {head_def.bn.forward(pooled, training), f4};
    }

    // Self-attack branch embedding f_i: IMSA on stem features, attack
    // encoder, GAP+BN.
    Var attack_embed(const Var& stem_maps, int T, bool training) {
        VIREID_CHECK(cfg.asam, "attack_embed requires the self-attack branch");
        Var highlighted = imsa.forward(stem_maps, stem_maps);
        return head_att.bn.forward(pool_frames(enc_att.forward(highlighted, training), T), training);
    }

    // Batch conveniences (visible block then infrared block, matching
    // Batch::labels() order).

    std::pair<Var, Var> batch_stems(const Batch& batch, bool training) {
        int half = batch.half();
        std::vector<const VideoSequence*> vis, inf;
        for (int j = 0; j < half; ++j) vis.push_back(&batch.sequences[static_cast<size_t>(j)]);
        for (int j = half; j < batch.size(); ++j) inf.push_back(&batch.sequences[static_cast<size_t>(j)]);
        return {stem_forward(stack_frames(vis), Modality::visible, training),
                stem_forward(stack_frames(inf), Modality::infrared, training)};
    }

    DefenseOutputs defense_forward_batch(const Batch& batch, bool training) {
        auto [sv, si] = batch_stems(batch, training);
        return defense_forward(sv, si, batch.T, training);
    }

    Var attack_embed_batch(const Batch& batch, bool training) {
        auto [sv, si] = batch_stems(batch, training);
        return concat_rows({attack_embed(sv, batch.T, training), attack_embed(si, batch.T, training)});
    }

    Var frm_descriptor_batch(const DefenseOutputs& def, int T, bool training) {
        VIREID_CHECK(cfg.frm != FrmMode::off, "relation branch disabled");
        return concat_rows({frm.descriptor(def.stage4_v, T, training), frm.descriptor(def.stage4_i, T, training)});
    }

    // ---- inference descriptors ----------------------------------------------

    // Final retrieval descriptor: L2-normalized defense embedding, with the
    // L2-normalized relation descriptor appended when the branch is enabled.
    Tensor extract_descriptors(const std::vector<VideoSequence>& seqs) {
        VIREID_CHECK(!seqs.empty(), "extract_descriptors: empty input");
        int width = cfg.descriptor_width();
        Tensor out({static_cast<int>(seqs.size()), width});
        for (Modality m : {Modality::visible, Modality::infrared}) {
            std::vector<const VideoSequence*> group;
            std::vector<int> rows;
            for (size_t i = 0; i < seqs.size(); ++i)
                if (seqs[i].modality == m) {
                    group.push_back(&seqs[i]);
                    rows.push_back(static_cast<int>(i));
                }
            if (group.empty()) continue;
            int T = group[0]->frames.dim(0);
            Var stems = stem_forward(stack_frames(group), m, false);
            auto [emb, f4] = defense_forward_single(stems, T, false);
            Tensor desc = l2_normalize_rows(emb->value);
            Tensor frm_desc;
            if (cfg.frm != FrmMode::off)
                frm_desc = l2_normalize_rows(frm.descriptor(f4, T, false)->value);
            for (size_t g = 0; g < group.size(); ++g) {
                int row = rows[g];
                for (int j = 0; j < desc.dim(1); ++j) out.at(row, j) = desc.at(static_cast<int>(g), j);
                if (cfg.frm != FrmMode::off)
                    for (int j = 0; j < frm_desc.dim(1); ++j)
                        out.at(row, desc.dim(1) + j) = frm_desc.at(static_cast<int>(g), j);
            }
        }
        return out;
    }

    static Tensor l2_normalize_rows(const Tensor& x) {
        Tensor out = x;
        int n = x.dim(0), d = x.dim(1);
        for (int i = 0; i < n; ++i) {
            real norm = 0;
            for (int j = 0; j < d; ++j) norm += x.at(i, j) * x.at(i, j);
            norm = std::sqrt(std::max(norm, 1e-24));
            for (int j = 0; j < d; ++j) out.at(i, j) /= norm;
        }
        return out;
    }

    // ---- parameter groups (Algorithm step granularity) ----------------------

    ParamList group_stems() const {
        ParamList out;
        stem_v.collect("stem_v", out);
        stem_i.collect("stem_i", out);
        return out;
    }
    ParamList group_def() const {
        ParamList out;
        enc_def.collect("enc_def", out);
        if (cfg.adm) {
            cmca3.collect("cmca3", out);
            cmca4.collect("cmca4", out);
        }
        head_def.collect("head_def", out);
        return out;
    }
    ParamList group_wdef() const {
        ParamList out;
        w_def.collect("w_def", out);
        return out;
    }
    ParamList group_att() const {
        ParamList out;
        if (cfg.asam) {
            imsa.collect("imsa", out);
            enc_att.collect("enc_att", out);
            head_att.collect("head_att", out);
        }
        return out;
    }
    ParamList group_watt() const {
        ParamList out;
        if (cfg.asam) w_att.collect("w_att", out);
        return out;
    }
    ParamList group_frm() const {
        ParamList out;
        if (cfg.frm != FrmMode::off) frm.collect("frm", out);
        return out;
    }
    ParamList group_wse() const {
        ParamList out;
        if (cfg.frm != FrmMode::off) frm.collect_classifier("frm", out);
        return out;
    }

    ParamList all_params() const {
        ParamList out;
        for (const auto& g :
             {group_stems(), group_def(), group_wdef(), group_att(), group_watt(), group_frm(), group_wse()})
            out.insert(out.end(), g.begin(), g.end());
        return out;
    }

    BufferList all_buffers() {
        BufferList out;
        stem_v.collect_buffers("stem_v", out);
        stem_i.collect_buffers("stem_i", out);
        enc_def.collect_buffers("enc_def", out);
        head_def.collect_buffers("head_def", out);
        if (cfg.asam) {
            enc_att.collect_buffers("enc_att", out);
            head_att.collect_buffers("head_att", out);
        }
        return out;
    }
};

}  // namespace vireid
