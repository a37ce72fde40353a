#pragma once

#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "vireid/random.hpp"
#include "vireid/tensor.hpp"

namespace vireid {

enum class Modality { visible = 0, infrared = 1 };

inline const char* modality_name(Modality m) { return m == Modality::visible ? "visible" : "infrared"; }

struct RenderConfig {
    int height = 48, width = 24;
    real noise_std = 0.02;
    // infrared: channel collapse to luminance, gamma shift, intensity flip.
    // ir = 1 - ir_scale * luma^ir_gamma keeps band ordering while pushing the
    // infrared intensity range well away from the visible one.
    real ir_gamma = 0.5;
    real ir_scale = 0.55;
    int num_cameras = 4;
};

// One horizontal texture band of an identity's appearance.
struct BandSignature {
    real r, g, b;   // base color
    real freq;      // horizontal texture frequency (cycles across the width)
    real phase;
};

struct IdentitySignature {
    std::vector<BandSignature> bands;
    real velocity;  // horizontal pattern shift per frame, normalized units
    real jitter;    // per-frame motion noise
};

struct IdentityBank {
    int num_identities = 0;
    uint64_t seed = 0;
    int bands = 6;
    std::vector<IdentitySignature> signatures;

    std::string describe() const {
        std::ostringstream os;
        os << std::setprecision(17);
        os << "bank seed=" << seed << " ids=" << num_identities << "\n";
        for (int i = 0; i < num_identities; ++i) {
            const auto& s = signatures[static_cast<size_t>(i)];
            os << i << " v=" << s.velocity << " j=" << s.jitter;
            for (const auto& bd : s.bands)
                os << " [" << bd.r << "," << bd.g << "," << bd.b << "," << bd.freq << "," << bd.phase << "]";
            os << "\n";
        }
        return os.str();
    }
};

// Signatures are a pure function of (seed, identity index); regeneration with
// the same arguments is bit-identical.
inline IdentityBank generate_identity_bank(int num_identities, uint64_t seed, int bands = 6) {
    VIREID_CHECK(num_identities >= 2, "identity bank needs at least 2 identities, got ", num_identities);
    VIREID_CHECK(bands >= 1, "identity bank needs at least one band");
    IdentityBank bank;
    bank.num_identities = num_identities;
    bank.seed = seed;
    bank.bands = bands;
    bank.signatures.reserve(static_cast<size_t>(num_identities));
    for (int id = 0; id < num_identities; ++id) {
        Rng rng(mix_seed(seed, static_cast<uint64_t>(id) + 1));
        IdentitySignature sig;
        sig.bands.reserve(static_cast<size_t>(bands));
        for (int k = 0; k < bands; ++k) {
            BandSignature bd;
            bd.r = rng.uniform(0.15, 0.95);
            bd.g = rng.uniform(0.15, 0.95);
            bd.b = rng.uniform(0.15, 0.95);
            bd.freq = rng.uniform(0.5, 3.0);
            bd.phase = rng.uniform(0.0, 1.0);
            sig.bands.push_back(bd);
        }
        sig.velocity = rng.uniform(0.05, 0.25) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
        sig.jitter = rng.uniform(0.005, 0.02);
        bank.signatures.push_back(std::move(sig));
    }
    return bank;
}

struct VideoSequence {
    Tensor frames;  // [T, 3, H, W], pixel values in [0, 1]
    Modality modality = Modality::visible;
    int identity = -1;
    int camera_id = 0;
};

// Renders one sequence: the identity's band pattern translated horizontally
// per frame (identity velocity + jitter). Infrared applies a luminance
// collapse with gamma shift and intensity flip, so raw cross-modal distance
// between same-identity sequences exceeds same-modality cross-identity
// distance while band luminance ordering (the identity cue) is preserved.
inline VideoSequence render_sequence(const IdentityBank& bank, int identity, Modality modality, int T,
                                     uint64_t seq_seed, const RenderConfig& cfg = {}) {
    VIREID_CHECK(identity >= 0 && identity < bank.num_identities, "identity ", identity,
                 " out of range [0, ", bank.num_identities, ")");
    VIREID_CHECK(T >= 1, "sequence length must be >= 1");
    VIREID_CHECK(cfg.height % bank.bands == 0, "image height ", cfg.height,
                 " not divisible by band count ", bank.bands);

    Rng rng(mix_seed(bank.seed, seq_seed, static_cast<uint64_t>(identity),
                     static_cast<uint64_t>(modality) + 17));
    const IdentitySignature& sig = bank.signatures[static_cast<size_t>(identity)];

    VideoSequence seq;
    seq.modality = modality;
    seq.identity = identity;
    seq.camera_id = rng.uniform_int(cfg.num_cameras);
    seq.frames = Tensor({T, 3, cfg.height, cfg.width});

    int band_h = cfg.height / bank.bands;
    real start = rng.uniform();
    for (int t = 0; t < T; ++t) {
        real offset = start + sig.velocity * t + sig.jitter * rng.normal();
        for (int y = 0; y < cfg.height; ++y) {
            const BandSignature& bd = sig.bands[static_cast<size_t>(y / band_h)];
            for (int x = 0; x < cfg.width; ++x) {
                real u = static_cast<real>(x) / cfg.width;
                real pattern = 0.6 + 0.4 * std::sin(2.0 * M_PI * (bd.freq * (u + offset) + bd.phase));
                real r = bd.r * pattern, g = bd.g * pattern, b = bd.b * pattern;
                real px[3];
                if (modality == Modality::visible) {
                    px[0] = r;
                    px[1] = g;
                    px[2] = b;
                } else {
                    real luma = 0.299 * r + 0.587 * g + 0.114 * b;
                    real ir = 1.0 - cfg.ir_scale * std::pow(std::max(luma, 0.0), cfg.ir_gamma);
                    px[0] = px[1] = px[2] = ir;
                }
                real noise = cfg.noise_std * rng.normal();
                for (int c = 0; c < 3; ++c) {
                    real v = px[c] + (modality == Modality::visible ? cfg.noise_std * rng.normal() : noise);
                    seq.frames.at(t, c, y, x) = std::min(1.0, std::max(0.0, v));
                }
            }
        }
    }
    return seq;
}

// PK-sampled batch: first half visible, second half infrared, and the two
// halves are aligned so sequences at the same offset share an identity
// (the CMCA training-time pairing).
struct Batch {
    std::vector<VideoSequence> sequences;
    int P = 0, K_seq = 0, T = 0;

    int size() const { return static_cast<int>(sequences.size()); }
    int half() const { return size() / 2; }

    std::vector<int> labels() const {
        std::vector<int> out;
        out.reserve(sequences.size());
        for (const auto& s : sequences) out.push_back(s.identity);
        return out;
    }
    std::vector<Modality> modalities() const {
        std::vector<Modality> out;
        out.reserve(sequences.size());
        for (const auto& s : sequences) out.push_back(s.modality);
        return out;
    }
};

inline Batch sample_batch(const IdentityBank& bank, int P, int K_seq, int T, Rng& rng,
                          const RenderConfig& cfg = {}) {
    VIREID_CHECK(P >= 1 && P <= bank.num_identities, "P=", P, " exceeds identity count ",
                 bank.num_identities);
    VIREID_CHECK(K_seq >= 1, "K_seq must be >= 1");
    std::vector<int> ids(static_cast<size_t>(bank.num_identities));
    for (int i = 0; i < bank.num_identities; ++i) ids[static_cast<size_t>(i)] = i;
    rng.shuffle(ids);
    ids.resize(static_cast<size_t>(P));

    Batch batch;
    batch.P = P;
    batch.K_seq = K_seq;
    batch.T = T;
    batch.sequences.reserve(static_cast<size_t>(2 * P * K_seq));
    for (Modality m : {Modality::visible, Modality::infrared})
        for (int p = 0; p < P; ++p)
            for (int k = 0; k < K_seq; ++k)
                batch.sequences.push_back(render_sequence(bank, ids[static_cast<size_t>(p)], m, T, rng.raw(), cfg));
    return batch;
}

// Evaluation pool: per_id fresh sequences of each identity in one modality,
// rendered from seeds derived from eval_seed (disjoint from training draws).
inline std::vector<VideoSequence> render_eval_set(const IdentityBank& bank, Modality m, int per_id, int T,
                                                  uint64_t eval_seed, const RenderConfig& cfg = {}) {
    VIREID_CHECK(per_id >= 1, "eval set needs at least one sequence per identity");
    std::vector<VideoSequence> out;
    out.reserve(static_cast<size_t>(bank.num_identities) * per_id);
    for (int id = 0; id < bank.num_identities; ++id)
        for (int k = 0; k < per_id; ++k)
            out.push_back(render_sequence(
                bank, id, m, T, mix_seed(eval_seed, static_cast<uint64_t>(id), static_cast<uint64_t>(k), 101), cfg));
    return out;
}

}  // namespace vireid
