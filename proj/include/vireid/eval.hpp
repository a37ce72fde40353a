#pragma once

#include <algorithm>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "vireid/model.hpp"

namespace vireid {

struct EvalConfig {
    bool filter_same_camera = false;  // drop same-camera same-identity gallery items per query
    int max_rank = 20;
};

struct RetrievalResult {
    std::string direction;
    Tensor distances;  // [num_query, num_gallery]
    std::vector<int> query_labels, gallery_labels, query_cams, gallery_cams;
    std::vector<real> cmc;  // hit rate at ranks 1..R
    real mAP = 0.0;
    int excluded_queries = 0;

    real rank_at(int r) const {
        VIREID_CHECK(r >= 1 && !cmc.empty(), "rank_at: empty curve");
        return cmc[static_cast<size_t>(std::min<int>(r, static_cast<int>(cmc.size())) - 1)];
    }
};

inline Tensor descriptor_distances(const Tensor& q, const Tensor& g) {
    VIREID_CHECK(q.rank() == 2 && g.rank() == 2 && q.dim(1) == g.dim(1),
                 "descriptor width mismatch between query and gallery");
    int nq = q.dim(0), ng = g.dim(0), d = q.dim(1);
    Tensor out({nq, ng});
    for (int i = 0; i < nq; ++i)
        for (int j = 0; j < ng; ++j) {
            real acc = 0;
            for (int k = 0; k < d; ++k) {
                real diff = q.at(i, k) - g.at(j, k);
                acc += diff * diff;
            }
            out.at(i, j) = std::sqrt(acc);
        }
    return out;
}

// Fills cmc/mAP/excluded_queries from the distance matrix and labels.
// Ranking is a stable sort by distance, so ties break by gallery index;
// queries with no valid gallery match are excluded and counted.
inline void compute_cmc_map(RetrievalResult& res, const EvalConfig& cfg = {}) {
    int nq = res.distances.dim(0), ng = res.distances.dim(1);
    VIREID_CHECK(static_cast<int>(res.query_labels.size()) == nq &&
                     static_cast<int>(res.gallery_labels.size()) == ng,
                 "label count mismatch with the distance matrix");
    int R = std::min(cfg.max_rank, ng);
    res.cmc.assign(static_cast<size_t>(R), 0.0);
    res.mAP = 0.0;
    res.excluded_queries = 0;

    std::vector<int> order(static_cast<size_t>(ng));
    int valid = 0;
    for (int qi = 0; qi < nq; ++qi) {
        std::iota(order.begin(), order.end(), 0);
        const real* row = res.distances.data() + static_cast<int64_t>(qi) * ng;
        std::stable_sort(order.begin(), order.end(), [row](int a, int b) { return row[a] < row[b]; });

        int kept = 0, hits = 0, first_hit = -1;
        real ap = 0.0;
        int relevant = 0;
        for (int gj : order) {
            if (cfg.filter_same_camera &&
                res.gallery_labels[static_cast<size_t>(gj)] == res.query_labels[static_cast<size_t>(qi)] &&
                !res.gallery_cams.empty() && !res.query_cams.empty() &&
                res.gallery_cams[static_cast<size_t>(gj)] == res.query_cams[static_cast<size_t>(qi)])
                continue;
            ++kept;
            if (res.gallery_labels[static_cast<size_t>(gj)] == res.query_labels[static_cast<size_t>(qi)]) {
                ++hits;
                ++relevant;
                if (first_hit < 0) first_hit = kept;
                ap += static_cast<real>(hits) / kept;
            }
        }
        if (relevant == 0) {
            ++res.excluded_queries;
            continue;
        }
        ++valid;
        res.mAP += ap / relevant;
        for (int r = first_hit; r <= R; ++r) res.cmc[static_cast<size_t>(r - 1)] += 1.0;
        // a hit beyond R still contributes nothing to the reported curve
    }
    VIREID_CHECK(valid > 0, "every query had zero valid gallery matches");
    for (auto& v : res.cmc) v /= valid;
    res.mAP /= valid;
}

inline RetrievalResult evaluate_retrieval(ReidModel& model, const std::vector<VideoSequence>& query,
                                          const std::vector<VideoSequence>& gallery,
                                          const std::string& direction, const EvalConfig& cfg = {}) {
    VIREID_CHECK(!query.empty() && !gallery.empty(), "evaluate: empty query or gallery split");
    RetrievalResult res;
    res.direction = direction;
    Tensor qd = model.extract_descriptors(query);
    Tensor gd = model.extract_descriptors(gallery);
    res.distances = descriptor_distances(qd, gd);
    for (const auto& s : query) {
        res.query_labels.push_back(s.identity);
        res.query_cams.push_back(s.camera_id);
    }
    for (const auto& s : gallery) {
        res.gallery_labels.push_back(s.identity);
        res.gallery_cams.push_back(s.camera_id);
    }
    compute_cmc_map(res, cfg);
    return res;
}

// Both retrieval directions on a shared checkpointed model state.
struct DirectionPair {
    RetrievalResult infrared_to_visible, visible_to_infrared;
};

inline DirectionPair evaluate_both_directions(ReidModel& model, const std::vector<VideoSequence>& visible,
                                              const std::vector<VideoSequence>& infrared,
                                              const EvalConfig& cfg = {}) {
    DirectionPair out;
    out.infrared_to_visible = evaluate_retrieval(model, infrared, visible, "infrared_to_visible", cfg);
    out.visible_to_infrared = evaluate_retrieval(model, visible, infrared, "visible_to_infrared", cfg);
    return out;
}

inline nlohmann::json result_to_json(const RetrievalResult& res) {
    return nlohmann::json{{"direction", res.direction},     {"rank1", res.rank_at(1)},
                          {"rank5", res.rank_at(5)},        {"rank10", res.rank_at(10)},
                          {"rank20", res.rank_at(20)},      {"mAP", res.mAP},
                          {"excluded_queries", res.excluded_queries}};
}

inline void write_result_json(const std::string& path, const RetrievalResult& res) {
    std::ofstream out(path);
    VIREID_REQUIRE(out.good(), "cannot write ", path);
    out << result_to_json(res).dump(2) << "\n";
}

inline void write_cmc_csv(const std::string& path, const RetrievalResult& res) {
    std::ofstream out(path);
    VIREID_REQUIRE(out.good(), "cannot write ", path);
    out << "rank,cmc\n";
    for (size_t r = 0; r < res.cmc.size(); ++r) out << (r + 1) << "," << res.cmc[r] << "\n";
}

}  // namespace vireid
