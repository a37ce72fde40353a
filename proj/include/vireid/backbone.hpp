#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "vireid/nn.hpp"

namespace vireid {

enum class StageTag { stem, stage3, stage4 };

// Stage layout mirrors a trimmed ResNet: one stem convolution, then four
// stages. Stages 1-3 form the def3 prefix of the defense encoder; stage 4 is
// its final convolution layer (ConLa4).
struct BackboneConfig {
    int in_channels = 3;
    int stem_channels = 16;
    int stem_kernel = 3, stem_stride = 2, stem_pad = 1;
    bool stem_maxpool = false;
    std::array<int, 4> stage_channels{16, 32, 64, 128};
    std::array<int, 4> stage_blocks{1, 1, 1, 1};
    std::array<int, 4> stage_strides{1, 2, 2, 1};
    bool bottleneck = false;

    static BackboneConfig tiny() { return BackboneConfig{}; }

    static BackboneConfig resnet50_shape() {
        BackboneConfig c;
        c.stem_channels = 64;
        c.stem_kernel = 7;
        c.stem_stride = 2;
        c.stem_pad = 3;
        c.stem_maxpool = true;
        c.stage_channels = {256, 512, 1024, 2048};
        c.stage_blocks = {3, 4, 6, 3};
        c.stage_strides = {1, 2, 2, 1};
        c.bottleneck = true;
        return c;
    }

    int embed_dim() const { return stage_channels[3]; }
    int stage3_channels() const { return stage_channels[2]; }

    int total_downsample() const {
        int d = stem_stride * (stem_maxpool ? 2 : 1);
        for (int s : stage_strides) d *= s;
        return d;
    }
};

inline int stage_channel_count(const BackboneConfig& cfg, StageTag tag) {
    switch (tag) {
        case StageTag::stem: return cfg.stem_channels;
        case StageTag::stage3: return cfg.stage_channels[2];
        case StageTag::stage4: return cfg.stage_channels[3];
    }
    return 0;
}

// Modality-specific shallow encoder (E^V / E^I): conv + BN + ReLU, plus the
// standard max-pool in the resnet50_shape preset.
struct Stem {
    Conv2dLayer conv;
    BatchNorm2d bn;
    bool maxpool = false;

    Stem() = default;
    Stem(const BackboneConfig& cfg, Rng& rng)
        : conv(cfg.in_channels, cfg.stem_channels, cfg.stem_kernel, cfg.stem_stride, cfg.stem_pad, false, rng),
          bn(cfg.stem_channels),
          maxpool(cfg.stem_maxpool) {}

    Var forward(const Var& frames, bool training) {
        Var y = relu(bn.forward(conv.forward(frames), training));
        if (maxpool) y = maxpool2d(y, 3, 2, 1);
        return y;
    }

    void collect(const std::string& prefix, ParamList& out) const {
        conv.collect(prefix + ".conv", out);
        bn.collect(prefix + ".bn", out);
    }
    void collect_buffers(const std::string& prefix, BufferList& out) {
        bn.collect_buffers(prefix + ".bn", out);
    }
};

struct ResidualBlock {
    bool bottleneck = false;
    Conv2dLayer conv1, conv2, conv3, proj;
    BatchNorm2d bn1, bn2, bn3, bn_proj;
    bool has_proj = false;

    ResidualBlock() = default;
    ResidualBlock(int cin, int cout, int stride, bool bottleneck_, Rng& rng) : bottleneck(bottleneck_) {
        if (bottleneck) {
            int mid = cout / 4;
            conv1 = Conv2dLayer(cin, mid, 1, 1, 0, false, rng);
            bn1 = BatchNorm2d(mid);
            conv2 = Conv2dLayer(mid, mid, 3, stride, 1, false, rng);
            bn2 = BatchNorm2d(mid);
            conv3 = Conv2dLayer(mid, cout, 1, 1, 0, false, rng);
            bn3 = BatchNorm2d(cout);
        } else {
            conv1 = Conv2dLayer(cin, cout, 3, stride, 1, false, rng);
            bn1 = BatchNorm2d(cout);
            conv2 = Conv2dLayer(cout, cout, 3, 1, 1, false, rng);
            bn2 = BatchNorm2d(cout);
        }
        if (stride != 1 || cin != cout) {
            has_proj = true;
            proj = Conv2dLayer(cin, cout, 1, stride, 0, false, rng);
            bn_proj = BatchNorm2d(cout);
        }
    }

    Var forward(const Var& x, bool training) {
        Var main;
        if (bottleneck) {
            main = relu(bn1.forward(conv1.forward(x), training));
            main = relu(bn2.forward(conv2.forward(main), training));
            main = bn3.forward(conv3.forward(main), training);
        } else {
            main = relu(bn1.forward(conv1.forward(x), training));
            main = bn2.forward(conv2.forward(main), training);
        }
        Var skip = has_proj ? bn_proj.forward(proj.forward(x), training) : x;
        return relu(add(main, skip));
    }

    void collect(const std::string& prefix, ParamList& out) const {
        conv1.collect(prefix + ".conv1", out);
        bn1.collect(prefix + ".bn1", out);
        conv2.collect(prefix + ".conv2", out);
        bn2.collect(prefix + ".bn2", out);
        if (bottleneck) {
            conv3.collect(prefix + ".conv3", out);
            bn3.collect(prefix + ".bn3", out);
        }
        if (has_proj) {
            proj.collect(prefix + ".proj", out);
            bn_proj.collect(prefix + ".bn_proj", out);
        }
    }
    void collect_buffers(const std::string& prefix, BufferList& out) {
        bn1.collect_buffers(prefix + ".bn1", out);
        bn2.collect_buffers(prefix + ".bn2", out);
        if (bottleneck) bn3.collect_buffers(prefix + ".bn3", out);
        if (has_proj) bn_proj.collect_buffers(prefix + ".bn_proj", out);
    }
};

// Four-stage residual encoder. Used twice with disjoint parameters: once as
// E_att and once as E_def, whose first three stages form E_def3 and whose
// stage 4 is ConLa4.
struct StagedEncoder {
    BackboneConfig cfg;
    std::vector<ResidualBlock> stages[4];

    StagedEncoder() = default;
    StagedEncoder(const BackboneConfig& cfg_, Rng& rng) : cfg(cfg_) {
        int cin = cfg.stem_channels;
        for (int s = 0; s < 4; ++s) {
            int cout = cfg.stage_channels[static_cast<size_t>(s)];
            for (int b = 0; b < cfg.stage_blocks[static_cast<size_t>(s)]; ++b) {
                int stride = b == 0 ? cfg.stage_strides[static_cast<size_t>(s)] : 1;
                stages[s].emplace_back(cin, cout, stride, cfg.bottleneck, rng);
                cin = cout;
            }
        }
    }

    Var forward_stages13(const Var& stem_map, bool training) {
        VIREID_CHECK(stem_map->value.dim(1) == cfg.stem_channels,
                     "encoder stages 1-3 expect a stem map with ", cfg.stem_channels, " channels, got ",
                     stem_map->value.dim(1));
        Var y = stem_map;
        for (int s = 0; s < 3; ++s)
            for (auto& blk : stages[s]) y = blk.forward(y, training);
        return y;
    }

    Var forward_stage4(const Var& stage3_map, bool training) {
        VIREID_CHECK(stage3_map->value.dim(1) == cfg.stage_channels[2],
                     "stage 4 expects a stage-3 map with ", cfg.stage_channels[2], " channels, got ",
                     stage3_map->value.dim(1));
        Var y = stage3_map;
        for (auto& blk : stages[3]) y = blk.forward(y, training);
        return y;
    }

    Var forward(const Var& stem_map, bool training) {
        return forward_stage4(forward_stages13(stem_map, training), training);
    }

    void collect(const std::string& prefix, ParamList& out) const {
        for (int s = 0; s < 4; ++s)
            for (size_t b = 0; b < stages[s].size(); ++b)
                stages[s][b].collect(prefix + ".s" + std::to_string(s + 1) + "b" + std::to_string(b), out);
    }
    void collect_buffers(const std::string& prefix, BufferList& out) {
        for (int s = 0; s < 4; ++s)
            for (size_t b = 0; b < stages[s].size(); ++b)
                stages[s][b].collect_buffers(prefix + ".s" + std::to_string(s + 1) + "b" + std::to_string(b), out);
    }
};

// GAP over space per frame, then over the T frames of each sequence.
// maps: [S*T, C, H, W] -> [S, C].
inline Var pool_frames(const Var& maps, int T) {
    VIREID_CHECK(maps->value.rank() == 4, "pool_frames expects stacked frame maps");
    VIREID_CHECK(T >= 1 && maps->value.dim(0) % T == 0, "pool_frames: frame count not divisible by T");
    return seq_mean(spatial_mean(maps), T);
}

// Pooled-and-normalized sequence embedding head (GAP + BN).
struct EmbeddingHead {
    BatchNorm1d bn;

    EmbeddingHead() = default;
    explicit EmbeddingHead(int dim) : bn(dim) {}

    Var forward(const Var& maps, int T, bool training) { return bn.forward(pool_frames(maps, T), training); }

    void collect(const std::string& prefix, ParamList& out) const { bn.collect(prefix + ".bn", out); }
    void collect_buffers(const std::string& prefix, BufferList& out) { bn.collect_buffers(prefix + ".bn", out); }
};

}  // namespace vireid
