#pragma once

#include <array>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "vireid/eval.hpp"
#include "vireid/model.hpp"

namespace vireid {

struct TrainConfig {
    real lambda1 = 1.0, lambda2 = 0.5, lambda3 = 0.5;
    int epochs_stage1 = 15, epochs_stage2 = 5;
    int iters_per_epoch = 30;
    real lr = 0.01;  // tiny-preset default; 0.12 is the full-scale setting
    real momentum = 0.9;
    real weight_decay = 5e-4;
    int warmup_epochs = -1;       // -1: 10% of stage-1 epochs, rounded up
    int wdef_warmup_epochs = 0;   // optional defense-classifier-only warm start
    real triplet_margin = 0.3;
    int batch_p = 8, batch_k = 2;
    uint64_t seed = 0;
    bool eval_every_epoch = true;

    int resolved_warmup() const {
        return warmup_epochs >= 0 ? warmup_epochs : (epochs_stage1 + 9) / 10;
    }
    int total_epochs() const { return epochs_stage1 + epochs_stage2; }
};

inline real lr_at_epoch(const TrainConfig& t, int epoch) {
    int w = t.resolved_warmup();
    if (w > 0 && epoch < w) return t.lr * static_cast<real>(epoch + 1) / w;
    return t.lr;
}

// The fully resolved experiment description. Serializes to a layered
// key-value text file; the archived resolved config reproduces the run.
struct ExperimentConfig {
    // data.*
    int num_identities = 10;
    uint64_t data_seed = 42;
    int height = 48, width = 24;
    int frames = 6;  // T
    int bands = 6;
    int eval_seqs_per_id = 2;
    uint64_t eval_seed = 9000;
    // model.*
    std::string preset = "tiny";
    bool asam = true, adm = true;
    FrmMode frm = FrmMode::full;
    int parts = 6;
    uint64_t model_seed = 1;
    // train.*
    TrainConfig train;
    // eval.*
    bool filter_same_camera = false;
    int max_rank = 20;
    // output
    std::string out_dir = "";

    BackboneConfig backbone_config() const {
        VIREID_CHECK(preset == "tiny" || preset == "resnet50_shape", "unknown backbone preset '", preset,
                     "'");
        return preset == "tiny" ? BackboneConfig::tiny() : BackboneConfig::resnet50_shape();
    }

    ModelConfig model_config() const {
        ModelConfig m;
        m.backbone = backbone_config();
        m.num_identities = num_identities;
        m.asam = asam;
        m.adm = adm;
        m.frm = frm;
        m.parts = parts;
        m.seed = model_seed;
        return m;
    }

    RenderConfig render_config() const {
        RenderConfig r;
        r.height = height;
        r.width = width;
        return r;
    }

    EvalConfig eval_config() const {
        EvalConfig e;
        e.filter_same_camera = filter_same_camera;
        e.max_rank = max_rank;
        return e;
    }

    void validate() const {
        VIREID_CHECK(num_identities >= 2, "data.synthetic.num-ids must be >= 2");
        VIREID_CHECK(frames >= 1, "data.frames must be >= 1");
        VIREID_CHECK(height % bands == 0, "data.height must divide by data.bands");
        VIREID_CHECK(train.lambda1 >= 0 && train.lambda2 >= 0 && train.lambda3 >= 0,
                     "loss weights must be non-negative");
        VIREID_CHECK(train.epochs_stage1 >= 1 && train.epochs_stage2 >= 1, "stage epochs must be >= 1");
        VIREID_CHECK(train.batch_p >= 1 && train.batch_p <= num_identities,
                     "train.batch-p must lie in [1, num identities]");
        BackboneConfig bb = backbone_config();
        if (frm != FrmMode::off) {
            int final_h = height / bb.total_downsample();
            VIREID_CHECK(final_h >= parts && final_h % parts == 0, "final map height ", final_h,
                         " must divide by model.parts=", parts,
                         " (offending keys: data.height, model.parts)");
        }
    }

    uint64_t arch_hash() const {
        std::ostringstream os;
        os << preset << "|" << num_identities << "|" << asam << "|" << adm << "|"
           << frm_mode_name(frm) << "|" << parts << "|" << model_seed;
        return fnv1a(os.str());
    }

    // ---- key-value mapping --------------------------------------------------

    std::map<std::string, std::string> to_kv() const {
        auto fmt = [](real v) {
            std::ostringstream os;
            os << std::setprecision(17) << v;
            return os.str();
        };
        std::map<std::string, std::string> kv;
        kv["data.synthetic.num-ids"] = std::to_string(num_identities);
        kv["data.synthetic.seed"] = std::to_string(data_seed);
        kv["data.height"] = std::to_string(height);
        kv["data.width"] = std::to_string(width);
        kv["data.frames"] = std::to_string(frames);
        kv["data.bands"] = std::to_string(bands);
        kv["data.eval-seqs-per-id"] = std::to_string(eval_seqs_per_id);
        kv["data.eval-seed"] = std::to_string(eval_seed);
        kv["model.preset"] = preset;
        kv["model.asam"] = asam ? "true" : "false";
        kv["model.adm"] = adm ? "true" : "false";
        kv["model.frm-stig"] = frm_mode_name(frm);
        kv["model.parts"] = std::to_string(parts);
        kv["model.seed"] = std::to_string(model_seed);
        kv["train.lambda1"] = fmt(train.lambda1);
        kv["train.lambda2"] = fmt(train.lambda2);
        kv["train.lambda3"] = fmt(train.lambda3);
        kv["train.epochs-stage1"] = std::to_string(train.epochs_stage1);
        kv["train.epochs-stage2"] = std::to_string(train.epochs_stage2);
        kv["train.iters-per-epoch"] = std::to_string(train.iters_per_epoch);
        kv["train.lr"] = fmt(train.lr);
        kv["train.momentum"] = fmt(train.momentum);
        kv["train.weight-decay"] = fmt(train.weight_decay);
        kv["train.warmup-epochs"] = std::to_string(train.warmup_epochs);
        kv["train.wdef-warmup-epochs"] = std::to_string(train.wdef_warmup_epochs);
        kv["train.margin"] = fmt(train.triplet_margin);
        kv["train.batch-p"] = std::to_string(train.batch_p);
        kv["train.batch-k"] = std::to_string(train.batch_k);
        kv["train.seed"] = std::to_string(train.seed);
        kv["train.eval-every-epoch"] = train.eval_every_epoch ? "true" : "false";
        kv["eval.filter-same-camera"] = filter_same_camera ? "true" : "false";
        kv["eval.max-rank"] = std::to_string(max_rank);
        kv["out.dir"] = out_dir;
        return kv;
    }

    void set_key(const std::string& key, const std::string& value) {
        auto to_int = [&](const std::string& v) {
            size_t pos = 0;
            int r = 0;
            try {
                r = std::stoi(v, &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            VIREID_CHECK(pos == v.size() && !v.empty(), "config key ", key, ": '", v, "' is not an integer");
            return r;
        };
        auto to_u64 = [&](const std::string& v) {
            size_t pos = 0;
            uint64_t r = 0;
            try {
                r = std::stoull(v, &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            VIREID_CHECK(pos == v.size() && !v.empty(), "config key ", key, ": '", v, "' is not an integer");
            return r;
        };
        auto to_real = [&](const std::string& v) {
            size_t pos = 0;
            real r = 0;
            try {
                r = std::stod(v, &pos);
            } catch (const std::exception&) {
                pos = 0;
            }
            VIREID_CHECK(pos == v.size() && !v.empty(), "config key ", key, ": '", v, "' is not a number");
            return r;
        };
        auto to_bool = [&](const std::string& v) {
            if (v == "true" || v == "1") return true;
            if (v == "false" || v == "0") return false;
            VIREID_CHECK(false, "config key ", key, ": '", v, "' is not a boolean");
            return false;
        };
        if (key == "data.synthetic.num-ids") num_identities = to_int(value);
        else if (key == "data.synthetic.seed") data_seed = to_u64(value);
        else if (key == "data.height") height = to_int(value);
        else if (key == "data.width") width = to_int(value);
        else if (key == "data.frames") frames = to_int(value);
        else if (key == "data.bands") bands = to_int(value);
        else if (key == "data.eval-seqs-per-id") eval_seqs_per_id = to_int(value);
        else if (key == "data.eval-seed") eval_seed = to_u64(value);
        else if (key == "model.preset") preset = value;
        else if (key == "model.asam") asam = to_bool(value);
        else if (key == "model.adm") adm = to_bool(value);
        else if (key == "model.frm-stig") frm = parse_frm_mode(value);
        else if (key == "model.parts") parts = to_int(value);
        else if (key == "model.seed") model_seed = to_u64(value);
        else if (key == "train.lambda1") train.lambda1 = to_real(value);
        else if (key == "train.lambda2") train.lambda2 = to_real(value);
        else if (key == "train.lambda3") train.lambda3 = to_real(value);
        else if (key == "train.epochs-stage1") train.epochs_stage1 = to_int(value);
        else if (key == "train.epochs-stage2") train.epochs_stage2 = to_int(value);
        else if (key == "train.iters-per-epoch") train.iters_per_epoch = to_int(value);
        else if (key == "train.lr") train.lr = to_real(value);
        else if (key == "train.momentum") train.momentum = to_real(value);
        else if (key == "train.weight-decay") train.weight_decay = to_real(value);
        else if (key == "train.warmup-epochs") train.warmup_epochs = to_int(value);
        else if (key == "train.wdef-warmup-epochs") train.wdef_warmup_epochs = to_int(value);
        else if (key == "train.margin") train.triplet_margin = to_real(value);
        else if (key == "train.batch-p") train.batch_p = to_int(value);
        else if (key == "train.batch-k") train.batch_k = to_int(value);
        else if (key == "train.seed") train.seed = to_u64(value);
        else if (key == "train.eval-every-epoch") train.eval_every_epoch = to_bool(value);
        else if (key == "eval.filter-same-camera") filter_same_camera = to_bool(value);
        else if (key == "eval.max-rank") max_rank = to_int(value);
        else if (key == "out.dir") out_dir = value;
        else VIREID_CHECK(false, "unknown config key '", key, "'");
    }

    static FrmMode parse_frm_mode(const std::string& v) {
        if (v == "off") return FrmMode::off;
        if (v == "full") return FrmMode::full;
        if (v == "no-spa") return FrmMode::no_spa;
        if (v == "fr-e-ti-only") return FrmMode::fr_e_ti_only;
        VIREID_CHECK(false, "unknown frm-stig mode '", v, "' (offending key: model.frm-stig)");
        return FrmMode::off;
    }

    std::string serialize() const {
        std::ostringstream os;
        for (const auto& [k, v] : to_kv()) os << k << " = " << v << "\n";
        return os.str();
    }

    void apply_text(std::istream& in, const std::string& origin) {
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            auto trim = [](std::string s) {
                size_t a = s.find_first_not_of(" \t\r");
                size_t b = s.find_last_not_of(" \t\r");
                return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
            };
            line = trim(line);
            if (line.empty()) continue;
            size_t eq = line.find('=');
            VIREID_CHECK(eq != std::string::npos, origin, ":", lineno, ": expected 'key = value'");
            set_key(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        }
    }

    void apply_file(const std::string& path) {
        std::ifstream in(path);
        VIREID_CHECK(in.good(), "cannot open config file ", path);
        apply_text(in, path);
    }
};

// Table-1-ordered ablation presets; every row is reachable by flags alone.
struct AblationPreset {
    std::string name;
    bool asam, adm;
    FrmMode frm;
};

inline const std::vector<AblationPreset>& ablation_presets() {
    static const std::vector<AblationPreset> presets{
        {"baseline", false, false, FrmMode::off},
        {"asam", true, false, FrmMode::off},
        {"adm", false, true, FrmMode::off},
        {"frm-stig", false, false, FrmMode::full},
        {"asam-adm", true, true, FrmMode::off},
        {"fr-e-ti", true, true, FrmMode::fr_e_ti_only},
        {"frm-stig-no-spa", true, true, FrmMode::no_spa},
        {"full", true, true, FrmMode::full},
    };
    return presets;
}

inline void apply_ablation(ExperimentConfig& cfg, const std::string& name) {
    for (const auto& p : ablation_presets())
        if (p.name == name) {
            cfg.asam = p.asam;
            cfg.adm = p.adm;
            cfg.frm = p.frm;
            return;
        }
    std::string known;
    for (const auto& p : ablation_presets()) known += (known.empty() ? "" : ", ") + p.name;
    VIREID_CHECK(false, "unknown ablation '", name, "'; known: ", known);
}

// Reverse lookup for reporting; empty when the switch combination is custom.
inline std::string ablation_name(const ExperimentConfig& cfg) {
    for (const auto& p : ablation_presets())
        if (p.asam == cfg.asam && p.adm == cfg.adm && p.frm == cfg.frm) return p.name;
    return "";
}

inline int ablation_rank(const std::string& name) {
    const auto& presets = ablation_presets();
    for (size_t i = 0; i < presets.size(); ++i)
        if (presets[i].name == name) return static_cast<int>(i);
    return static_cast<int>(presets.size());
}

}  // namespace vireid
