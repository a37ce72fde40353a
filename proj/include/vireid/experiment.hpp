#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <ostream>

#include "vireid/eval.hpp"
#include "vireid/train.hpp"

namespace vireid {

struct TrainOutcome {
    bool completed = false;
    bool diverged = false;
    std::string divergence_message;
    TrainState state;
    bool has_eval = false;
    DirectionPair final_eval;
};

namespace detail {

inline void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    VIREID_REQUIRE(out.good(), "cannot write ", path);
    out << content;
}

inline void write_metrics_file(const std::string& dir, const std::vector<std::string>& lines) {
    std::string content;
    for (const auto& l : lines) content += l + "\n";
    write_text_file(dir + "/metrics.jsonl", content);
}

inline void write_status(const std::string& dir, bool completed, bool diverged, const std::string& msg,
                         int epochs_done) {
    nlohmann::json j{{"completed", completed}, {"diverged", diverged}, {"message", msg},
                     {"epochs_done", epochs_done}};
    write_text_file(dir + "/status.json", j.dump(2) + "\n");
}

}  // namespace detail

// Two-stage schedule per the training algorithm: stage 1 interleaves the
// defense update, the relation-branch update and the self-attack update on
// each batch; stage 2 repeats them with W_def fixed and only E_def driven by
// the defense objective. Checkpoints (full train state) and one JSON metrics
// line are written per epoch; a non-finite loss aborts the epoch, keeping the
// last completed epoch's checkpoint as the last-good state.
inline TrainOutcome run_training(const ExperimentConfig& cfg, ReidModel& model, TrainState state,
                                 std::ostream* progress = nullptr) {
    cfg.validate();
    const std::string& dir = cfg.out_dir;
    const bool to_disk = !dir.empty();
    if (to_disk) {
        std::filesystem::create_directories(dir);
        detail::write_text_file(dir + "/resolved.cfg", cfg.serialize());
    }

    IdentityBank bank = generate_identity_bank(cfg.num_identities, cfg.data_seed, cfg.bands);
    RenderConfig rc = cfg.render_config();
    auto eval_vis = render_eval_set(bank, Modality::visible, cfg.eval_seqs_per_id, cfg.frames,
                                    cfg.eval_seed, rc);
    auto eval_inf = render_eval_set(bank, Modality::infrared, cfg.eval_seqs_per_id, cfg.frames,
                                    cfg.eval_seed, rc);

    state.opt.momentum = cfg.train.momentum;
    state.opt.weight_decay = cfg.train.weight_decay;
    LossWeights weights{cfg.train.lambda1, cfg.train.lambda2, cfg.train.lambda3};

    TrainOutcome outcome;
    int total_epochs = cfg.train.total_epochs();
    for (int epoch = state.epochs_done; epoch < total_epochs; ++epoch) {
        bool stage2 = epoch >= cfg.train.epochs_stage1;
        bool wdef_warm = !stage2 && epoch < cfg.train.wdef_warmup_epochs;
        real lr = lr_at_epoch(cfg.train, epoch);
        LossComponents sums;
        real total_sum = 0.0;
        int iters = cfg.train.iters_per_epoch;
        try {
            for (int it = 0; it < iters; ++it) {
                Batch batch = sample_batch(bank, cfg.train.batch_p, cfg.train.batch_k, cfg.frames,
                                           state.data_rng, rc);
                LossComponents cd, ca;
                if (wdef_warm) {
                    cd = train_step_wdef_only(model, batch, state.opt, cfg.train, lr);
                } else {
                    cd = train_step_defense(model, batch, state.opt, cfg.train, lr, stage2);
                    ca = train_step_attack(model, batch, state.opt, cfg.train, lr);
                }
                LossComponents merged{ca.cov_id, ca.att_id, cd.def_id, cd.def_tri, cd.p_id};
                total_sum += total_loss(merged, weights);  // throws on non-finite
                sums.cov_id += merged.cov_id;
                sums.att_id += merged.att_id;
                sums.def_id += merged.def_id;
                sums.def_tri += merged.def_tri;
                sums.p_id += merged.p_id;
            }
        } catch (const TrainingDivergence& e) {
            outcome.diverged = true;
            outcome.divergence_message = e.what();
            if (to_disk) detail::write_status(dir, false, true, e.what(), state.epochs_done);
            outcome.state = std::move(state);
            return outcome;
        }

        nlohmann::json j;
        j["epoch"] = epoch + 1;
        j["stage"] = stage2 ? 2 : 1;
        j["lr"] = lr;
        j["loss_cov_id"] = sums.cov_id / iters;
        j["loss_att_id"] = sums.att_id / iters;
        j["loss_def_id"] = sums.def_id / iters;
        j["loss_def_tri"] = sums.def_tri / iters;
        j["loss_p_id"] = sums.p_id / iters;
        j["loss_total"] = total_sum / iters;
        if (cfg.train.eval_every_epoch || epoch + 1 == total_epochs) {
            DirectionPair pair = evaluate_both_directions(model, eval_vis, eval_inf, cfg.eval_config());
            j["rank1_i2v"] = pair.infrared_to_visible.rank_at(1);
            j["map_i2v"] = pair.infrared_to_visible.mAP;
            j["rank1_v2i"] = pair.visible_to_infrared.rank_at(1);
            j["map_v2i"] = pair.visible_to_infrared.mAP;
            outcome.final_eval = pair;
            outcome.has_eval = true;
        }
        state.metric_log.push_back(j.dump());
        state.epochs_done = epoch + 1;
        if (progress) (*progress) << state.metric_log.back() << std::endl;

        if (to_disk) {
            detail::write_metrics_file(dir, state.metric_log);
            int local = stage2 ? epoch - cfg.train.epochs_stage1 + 1 : epoch + 1;
            save_checkpoint(dir + "/ckpt_stage" + (stage2 ? "2" : "1") + "_epoch" + std::to_string(local) +
                                ".bin",
                            model, cfg.arch_hash(), &state);
        }
    }

    outcome.completed = true;
    if (to_disk) {
        if (outcome.has_eval) {
            write_result_json(dir + "/results_infrared_to_visible.json", outcome.final_eval.infrared_to_visible);
            write_result_json(dir + "/results_visible_to_infrared.json", outcome.final_eval.visible_to_infrared);
            write_cmc_csv(dir + "/cmc_infrared_to_visible.csv", outcome.final_eval.infrared_to_visible);
            write_cmc_csv(dir + "/cmc_visible_to_infrared.csv", outcome.final_eval.visible_to_infrared);
        }
        detail::write_status(dir, true, false, "", state.epochs_done);
    }
    outcome.state = std::move(state);
    return outcome;
}

struct ExperimentResult {
    std::shared_ptr<ReidModel> model;
    TrainOutcome outcome;
};

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, std::ostream* progress = nullptr) {
    ExperimentResult res;
    res.model = std::make_shared<ReidModel>(cfg.model_config());
    TrainState state;
    state.data_rng = Rng(cfg.train.seed);
    res.outcome = run_training(cfg, *res.model, std::move(state), progress);
    return res;
}

inline ExperimentResult resume_experiment(const ExperimentConfig& cfg, const std::string& ckpt_path,
                                          std::ostream* progress = nullptr) {
    ExperimentResult res;
    res.model = std::make_shared<ReidModel>(cfg.model_config());
    TrainState state;
    bool had_state = load_checkpoint(ckpt_path, *res.model, cfg.arch_hash(), &state);
    VIREID_CHECK(had_state, "checkpoint ", ckpt_path, " holds no training state to resume from");
    res.outcome = run_training(cfg, *res.model, std::move(state), progress);
    return res;
}

// Evaluate a checkpoint without training; writes results when out_dir is set.
inline DirectionPair evaluate_checkpoint(const ExperimentConfig& cfg, const std::string& ckpt_path) {
    cfg.validate();
    ReidModel model(cfg.model_config());
    load_checkpoint(ckpt_path, model, cfg.arch_hash());
    IdentityBank bank = generate_identity_bank(cfg.num_identities, cfg.data_seed, cfg.bands);
    RenderConfig rc = cfg.render_config();
    auto vis = render_eval_set(bank, Modality::visible, cfg.eval_seqs_per_id, cfg.frames, cfg.eval_seed, rc);
    auto inf = render_eval_set(bank, Modality::infrared, cfg.eval_seqs_per_id, cfg.frames, cfg.eval_seed, rc);
    DirectionPair pair = evaluate_both_directions(model, vis, inf, cfg.eval_config());
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        write_result_json(cfg.out_dir + "/results_infrared_to_visible.json", pair.infrared_to_visible);
        write_result_json(cfg.out_dir + "/results_visible_to_infrared.json", pair.visible_to_infrared);
        write_cmc_csv(cfg.out_dir + "/cmc_infrared_to_visible.csv", pair.infrared_to_visible);
        write_cmc_csv(cfg.out_dir + "/cmc_visible_to_infrared.csv", pair.visible_to_infrared);
    }
    return pair;
}

// ---------------------------------------------------------------------------
// Run comparison report (ablation-table shaped)

struct RunReportRow {
    std::string dir;
    std::string ablation;
    bool complete = false;
    nlohmann::json i2v, v2i;
};

inline RunReportRow read_run_dir(const std::string& dir) {
    RunReportRow row;
    row.dir = dir;
    std::ifstream cfg_in(dir + "/resolved.cfg");
    if (cfg_in.good()) {
        ExperimentConfig cfg;
        try {
            cfg.apply_text(cfg_in, dir + "/resolved.cfg");
            row.ablation = ablation_name(cfg);
        } catch (const std::exception&) {
        }
    }
    std::ifstream i2v(dir + "/results_infrared_to_visible.json");
    std::ifstream v2i(dir + "/results_visible_to_infrared.json");
    if (i2v.good() && v2i.good()) {
        row.i2v = nlohmann::json::parse(i2v);
        row.v2i = nlohmann::json::parse(v2i);
        row.complete = true;
    }
    return row;
}

inline std::vector<RunReportRow> collect_report_rows(const std::vector<std::string>& dirs) {
    VIREID_CHECK(!dirs.empty(), "report needs at least one run directory");
    std::vector<RunReportRow> rows;
    for (const auto& d : dirs) rows.push_back(read_run_dir(d));
    std::stable_sort(rows.begin(), rows.end(), [](const RunReportRow& a, const RunReportRow& b) {
        return ablation_rank(a.ablation) < ablation_rank(b.ablation);
    });
    return rows;
}

// Human-readable table, percentages to two decimals.
inline std::string render_report_text(const std::vector<RunReportRow>& rows) {
    std::ostringstream os;
    os << std::left << std::setw(18) << "run" << std::setw(17) << "ablation";
    for (const char* dir : {"i2v", "v2i"})
        for (const char* m : {"r1", "r5", "r10", "r20", "mAP"})
            os << std::right << std::setw(8) << (std::string(dir) + ":" + m);
    os << "\n";
    for (const auto& row : rows) {
        std::string base = std::filesystem::path(row.dir).filename().string();
        if (base.empty()) base = row.dir;
        os << std::left << std::setw(18) << base.substr(0, 17)
           << std::setw(17) << (row.ablation.empty() ? "custom" : row.ablation);
        if (!row.complete) {
            os << "  (incomplete: missing metrics)";
        } else {
            for (const nlohmann::json* j : {&row.i2v, &row.v2i})
                for (const char* key : {"rank1", "rank5", "rank10", "rank20", "mAP"})
                    os << std::right << std::setw(8) << std::fixed << std::setprecision(2)
                       << j->at(key).get<real>() * 100.0;
        }
        os << "\n";
    }
    return os.str();
}

// Full-precision CSV: values serialize exactly as in the result JSON files.
inline std::string render_report_csv(const std::vector<RunReportRow>& rows) {
    std::string out =
        "run,ablation,i2v_rank1,i2v_rank5,i2v_rank10,i2v_rank20,i2v_mAP,"
        "v2i_rank1,v2i_rank5,v2i_rank10,v2i_rank20,v2i_mAP\n";
    for (const auto& row : rows) {
        out += row.dir + "," + (row.ablation.empty() ? "custom" : row.ablation);
        if (!row.complete) {
            out += ",incomplete\n";
            continue;
        }
        for (const nlohmann::json* j : {&row.i2v, &row.v2i})
            for (const char* key : {"rank1", "rank5", "rank10", "rank20", "mAP"})
                out += "," + j->at(key).dump();
        out += "\n";
    }
    return out;
}

}  // namespace vireid
