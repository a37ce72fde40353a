#pragma once

#include <fstream>
#include <unordered_map>
#include <vector>

#include "vireid/config.hpp"
#include "vireid/losses.hpp"
#include "vireid/model.hpp"

namespace vireid {

// SGD with momentum and weight decay (buf = m*buf + g + wd*p; p -= lr*buf).
struct Sgd {
    real momentum = 0.9;
    real weight_decay = 5e-4;
    std::unordered_map<Node*, Tensor> moments;

    void step(const ParamList& group, real lr) {
        for (const auto& p : group) {
            if (!p.var->grad_alloc) continue;
            Tensor& theta = p.var->value;
            const Tensor& g = p.var->grad;
            Tensor& m = moments.try_emplace(p.var.get(), Tensor(theta.shape())).first->second;
            for (int64_t i = 0; i < theta.numel(); ++i) {
                real v = momentum * m[i] + (g[i] + weight_decay * theta[i]);
                m[i] = v;
                theta[i] -= lr * v;
            }
        }
    }

    Tensor moment_or_zero(const Var& p) const {
        auto it = moments.find(p.get());
        return it == moments.end() ? Tensor(p->value.shape()) : it->second;
    }
};

struct TrainState {
    int epochs_done = 0;  // completed epochs across both stages
    Rng data_rng;
    Sgd opt;
    std::vector<std::string> metric_log;  // one JSON line per completed epoch
};

// ---------------------------------------------------------------------------
// Algorithm steps. Each step zeroes the grads it consumes, forwards the
// sub-objective, backpropagates, and updates exactly the listed groups.

// Defense update (stage 1: stems + E_def + W_def; stage 2: E_def only with
// W_def fixed) followed by the relation-branch update when enabled.
inline LossComponents train_step_defense(ReidModel& model, const Batch& batch, Sgd& opt,
                                         const TrainConfig& tc, real lr, bool stage2) {
    LossComponents comps;
    std::vector<int> labels = batch.labels();
    LossWeights weights{tc.lambda1, tc.lambda2, tc.lambda3};

    {
        ParamList frozen;
        if (stage2) {
            frozen = model.group_wdef();
            ParamList stems = model.group_stems();
            frozen.insert(frozen.end(), stems.begin(), stems.end());
        }
        FreezeGuard guard(frozen);
        zero_grads(model.all_params());
        DefenseOutputs out = model.defense_forward_batch(batch, true);
        Var l_id = loss_identity_ce(out.embeddings, labels, model.w_def);
        Var l_tri = loss_batch_hard_triplet(out.embeddings, labels, {tc.triplet_margin});
        comps.def_id = l_id->value[0];
        comps.def_tri = l_tri->value[0];
        Var objective = scale(add(l_id, l_tri), weights.lambda2);
        backward(objective);
        if (stage2) {
            opt.step(model.group_def(), lr);
        } else {
            opt.step(model.group_stems(), lr);
            opt.step(model.group_def(), lr);
            opt.step(model.group_wdef(), lr);
        }
    }

    if (model.cfg.frm != FrmMode::off) {
        zero_grads(model.all_params());
        auto [sv, si] = model.batch_stems(batch, true);
        Var f4v = model.enc_def.forward(sv, true);
        Var f4i = model.enc_def.forward(si, true);
        Var desc = concat_rows({model.frm.descriptor(f4v, batch.T, true),
                                model.frm.descriptor(f4i, batch.T, true)});
        Var l_p = model.frm.loss_p_id(desc, labels);
        comps.p_id = l_p->value[0];
        backward(scale(l_p, weights.lambda3));
        opt.step(model.group_stems(), lr);
        opt.step(model.group_def(), lr);
        opt.step(model.group_frm(), lr);
        opt.step(model.group_wse(), lr);
    }
    return comps;
}

// Self-attack update: W_def fixed, stems + IMSA + E_att + W_att trained on
// the confusion objective plus the weighted attack identity term.
inline LossComponents train_step_attack(ReidModel& model, const Batch& batch, Sgd& opt,
                                        const TrainConfig& tc, real lr) {
    LossComponents comps;
    if (!model.cfg.asam) return comps;
    std::vector<int> labels = batch.labels();
    FreezeGuard guard(model.group_wdef());
    zero_grads(model.all_params());
    Var emb = model.attack_embed_batch(batch, true);
    Var cov = loss_cov_id(emb, model.w_def);
    Var att = loss_identity_ce(emb, labels, model.w_att);
    comps.cov_id = cov->value[0];
    comps.att_id = att->value[0];
    backward(add(cov, scale(att, tc.lambda1)));
    opt.step(model.group_stems(), lr);
    opt.step(model.group_att(), lr);
    opt.step(model.group_watt(), lr);
    return comps;
}

// Warm-up variant: the defense classifier alone learns on the current
// features (everything else fixed).
inline LossComponents train_step_wdef_only(ReidModel& model, const Batch& batch, Sgd& opt,
                                           const TrainConfig& tc, real lr) {
    LossComponents comps;
    std::vector<int> labels = batch.labels();
    ParamList frozen = model.all_params();
    frozen.erase(std::remove_if(frozen.begin(), frozen.end(),
                                [](const ParamRef& p) { return p.name.rfind("w_def", 0) == 0; }),
                 frozen.end());
    FreezeGuard guard(frozen);
    zero_grads(model.all_params());
    DefenseOutputs out = model.defense_forward_batch(batch, true);
    Var l_id = loss_identity_ce(out.embeddings, labels, model.w_def);
    comps.def_id = l_id->value[0];
    backward(scale(l_id, tc.lambda2));
    opt.step(model.group_wdef(), lr);
    return comps;
}

// Diagnostics for the adversarial dynamic: entropy of the (frozen) defense
// classifier's predictions on attack-path embeddings, and the attack
// classifier's training accuracy on the same embeddings.
struct AsamProbe {
    real wdef_entropy = 0.0;
    real watt_accuracy = 0.0;
};

inline AsamProbe asam_probe(ReidModel& model, const Batch& batch) {
    VIREID_CHECK(model.cfg.asam, "asam_probe requires the self-attack branch");
    Var emb = model.attack_embed_batch(batch, false);
    AsamProbe probe;
    probe.wdef_entropy = mean_prediction_entropy(model.w_def.logits(emb)->value);
    probe.watt_accuracy = classification_accuracy(model.w_att.logits(emb)->value, batch.labels());
    return probe;
}

// ---------------------------------------------------------------------------
// Checkpointing: named parameters, buffers, optimizer moments, data RNG and
// the metric history. Loading rejects a mismatched architecture hash.

namespace ckpt {

constexpr char kMagic[9] = "VIRDCKP1";

inline void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_string(std::istream& is) {
    uint32_t n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}
inline void write_tensor(std::ostream& os, const Tensor& t) {
    write_u32(os, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_u32(os, static_cast<uint32_t>(t.dim(i)));
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(real)));
}
inline Tensor read_tensor(std::istream& is) {
    uint32_t rank = read_u32(is);
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int>(read_u32(is));
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel() * sizeof(real)));
    return t;
}

}  // namespace ckpt

inline void save_checkpoint(const std::string& path, ReidModel& model, uint64_t arch_hash,
                            const TrainState* state = nullptr) {
    std::ofstream os(path, std::ios::binary);
    VIREID_REQUIRE(os.good(), "cannot write checkpoint ", path);
    os.write(ckpt::kMagic, 8);
    ckpt::write_u64(os, arch_hash);
    ParamList params = model.all_params();
    BufferList buffers = model.all_buffers();
    ckpt::write_u32(os, static_cast<uint32_t>(params.size()));
    for (const auto& p : params) {
        ckpt::write_string(os, p.name);
        ckpt::write_tensor(os, p.var->value);
    }
    ckpt::write_u32(os, static_cast<uint32_t>(buffers.size()));
    for (const auto& b : buffers) {
        ckpt::write_string(os, b.name);
        ckpt::write_tensor(os, *b.tensor);
    }
    ckpt::write_u32(os, state ? 1u : 0u);
    if (state) {
        ckpt::write_u32(os, static_cast<uint32_t>(state->epochs_done));
        ckpt::write_string(os, state->data_rng.serialize());
        ckpt::write_u32(os, static_cast<uint32_t>(params.size()));
        for (const auto& p : params) {
            ckpt::write_string(os, p.name);
            ckpt::write_tensor(os, state->opt.moment_or_zero(p.var));
        }
        ckpt::write_u32(os, static_cast<uint32_t>(state->metric_log.size()));
        for (const auto& line : state->metric_log) ckpt::write_string(os, line);
    }
    VIREID_REQUIRE(os.good(), "short write for checkpoint ", path);
}

// Returns true when the checkpoint carried a training state.
inline bool load_checkpoint(const std::string& path, ReidModel& model, uint64_t arch_hash,
                            TrainState* state = nullptr) {
    std::ifstream is(path, std::ios::binary);
    VIREID_REQUIRE(is.good(), "cannot open checkpoint ", path);
    char magic[8];
    is.read(magic, 8);
    VIREID_REQUIRE(std::string(magic, 8) == std::string(ckpt::kMagic, 8), "not a checkpoint file: ", path);
    uint64_t stored_hash = ckpt::read_u64(is);
    VIREID_CHECK(stored_hash == arch_hash, "checkpoint architecture hash mismatch (stored ", stored_hash,
                 ", expected ", arch_hash, ")");
    ParamList params = model.all_params();
    uint32_t n_params = ckpt::read_u32(is);
    VIREID_CHECK(n_params == params.size(), "checkpoint parameter count mismatch");
    for (auto& p : params) {
        std::string name = ckpt::read_string(is);
        VIREID_CHECK(name == p.name, "checkpoint parameter order mismatch at ", p.name, " vs ", name);
        Tensor t = ckpt::read_tensor(is);
        VIREID_CHECK(same_shape(t.shape(), p.var->value.shape()), "checkpoint shape mismatch at ", p.name);
        p.var->value = std::move(t);
    }
    BufferList buffers = model.all_buffers();
    uint32_t n_buffers = ckpt::read_u32(is);
    VIREID_CHECK(n_buffers == buffers.size(), "checkpoint buffer count mismatch");
    for (auto& b : buffers) {
        std::string name = ckpt::read_string(is);
        VIREID_CHECK(name == b.name, "checkpoint buffer order mismatch at ", b.name);
        *b.tensor = ckpt::read_tensor(is);
    }
    bool has_state = ckpt::read_u32(is) != 0;
    if (has_state && state) {
        state->epochs_done = static_cast<int>(ckpt::read_u32(is));
        state->data_rng.deserialize(ckpt::read_string(is));
        uint32_t n_moments = ckpt::read_u32(is);
        VIREID_CHECK(n_moments == params.size(), "checkpoint moment count mismatch");
        state->opt.moments.clear();
        for (auto& p : params) {
            std::string name = ckpt::read_string(is);
            VIREID_CHECK(name == p.name, "checkpoint moment order mismatch at ", p.name);
            state->opt.moments[p.var.get()] = ckpt::read_tensor(is);
        }
        uint32_t n_lines = ckpt::read_u32(is);
        state->metric_log.clear();
        for (uint32_t i = 0; i < n_lines; ++i) state->metric_log.push_back(ckpt::read_string(is));
    }
    VIREID_REQUIRE(is.good(), "truncated checkpoint ", path);
    return has_state;
}

}  // namespace vireid
