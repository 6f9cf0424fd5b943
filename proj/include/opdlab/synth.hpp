// Procedural scene synthesis: grid worlds, region proposal with an area
// filter, bounding-box overlay and 2x crop rendering, question templates with
// a fixed spatial-constraint suffix, consensus filtering, and JSONL datasets.
//
// Labels come from one of two answerers, recorded per record: the analytic
// template oracle (default, exact by construction) or majority vote over
// rollouts of a provided policy checkpoint.

#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "opdlab/policy.hpp"
#include "opdlab/rng.hpp"
#include "opdlab/vocab.hpp"

namespace opdlab {

// ---------------------------------------------------------------------------
// Scenes and regions.

struct Scene {
    int n = 12;
    uint64_t seed = 0;
    std::vector<std::pair<int, int>> cells;  // (color, glyph), row-major

    const std::pair<int, int>& cell(int r, int c) const { return cells[static_cast<size_t>(r) * n + c]; }
};

inline Scene generate_scene(uint64_t seed, int n = 12) {
    if (n < 1) throw std::invalid_argument("grid size must be positive");
    Scene s;
    s.n = n;
    s.seed = seed;
    s.cells.reserve(static_cast<size_t>(n) * n);
    Rng rng(derive_seed(seed, "scene"));
    for (int i = 0; i < n * n; ++i) {
        int color = static_cast<int>(rng.uniform_int(Vocabulary::kNumColors));
        int glyph = static_cast<int>(rng.uniform_int(Vocabulary::kNumGlyphs));
        s.cells.emplace_back(color, glyph);
    }
    return s;
}

struct Region {
    int row = 0;
    int col = 0;
    int k = 1;  // side length in cells

    bool operator==(const Region&) const = default;
};

inline double region_area_ratio(const Region& r, int n) {
    return static_cast<double>(r.k) * r.k / (static_cast<double>(n) * n);
}

inline bool region_fits(const Region& r, int n) {
    return r.k >= 1 && r.row >= 0 && r.col >= 0 && r.row + r.k <= n && r.col + r.k <= n;
}

inline bool region_passes_area_filter(const Region& r, int n, double tau) {
    return region_area_ratio(r, n) < tau;  // strict: ratios at or above tau are dropped
}

// Random k x k candidates (k in {1,2}), deduplicated, then area-filtered.
// May legitimately return nothing when tau excludes every candidate.
inline std::vector<Region> propose_regions(const Scene& scene, double tau, Rng& rng) {
    if (!(tau > 0.0) || tau > 1.0) throw std::invalid_argument("tau must be in (0, 1]");
    const int n_proposals = 16;
    std::vector<Region> out;
    for (int i = 0; i < n_proposals; ++i) {
        Region r;
        r.k = 1 + static_cast<int>(rng.uniform_int(2));
        if (r.k > scene.n) continue;
        r.row = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(scene.n - r.k + 1)));
        r.col = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(scene.n - r.k + 1)));
        if (std::find(out.begin(), out.end(), r) != out.end()) continue;
        if (!region_passes_area_filter(r, scene.n, tau)) continue;
        out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// View rendering.

// Region cells in region-row-major order as (color, glyph) pairs.
inline std::vector<std::pair<int, int>> region_cells(const Scene& scene, const Region& r) {
    std::vector<std::pair<int, int>> out;
    out.reserve(static_cast<size_t>(r.k) * r.k);
    for (int i = 0; i < r.k; ++i)
        for (int j = 0; j < r.k; ++j) out.push_back(scene.cell(r.row + i, r.col + j));
    return out;
}

// Global view: every cell serialized once in row-major order, except that the
// region's cells appear as one contiguous block delimited by BBOX markers,
// anchored where the region's top-left cell falls in the walk. Grouping keeps
// a k=2 region inside a single marked span. Crop view: the region duplicated
// 2x to a 2k x 2k cell grid, nothing else.
inline std::pair<VisualContext, VisualContext> render_views(const Scene& scene, const Region& r) {
    if (!region_fits(r, scene.n)) throw std::invalid_argument("region outside grid");

    VisualContext global;
    global.view_kind = ViewKind::global;
    global.tokens.reserve(2 * static_cast<size_t>(scene.n) * scene.n + 2);
    auto in_region = [&](int row, int col) {
        return row >= r.row && row < r.row + r.k && col >= r.col && col < r.col + r.k;
    };
    for (int row = 0; row < scene.n; ++row) {
        for (int col = 0; col < scene.n; ++col) {
            if (in_region(row, col)) {
                if (row != r.row || col != r.col) continue;  // emitted with the block
                int open = static_cast<int>(global.tokens.size());
                global.tokens.push_back(Vocabulary::BOX_OPEN);
                for (const auto& [color, glyph] : region_cells(scene, r)) {
                    global.tokens.push_back(Vocabulary::color_token(color));
                    global.tokens.push_back(Vocabulary::glyph_token(glyph));
                }
                global.tokens.push_back(Vocabulary::BOX_CLOSE);
                global.marker_spans = {{open, static_cast<int>(global.tokens.size()) - 1}};
            } else {
                const auto& [color, glyph] = scene.cell(row, col);
                global.tokens.push_back(Vocabulary::color_token(color));
                global.tokens.push_back(Vocabulary::glyph_token(glyph));
            }
        }
    }

    VisualContext crop;
    crop.view_kind = ViewKind::crop;
    const int side = 2 * r.k;
    crop.tokens.reserve(2 * static_cast<size_t>(side) * side);
    for (int i = 0; i < side; ++i) {
        for (int j = 0; j < side; ++j) {
            const auto& [color, glyph] = scene.cell(r.row + i / 2, r.col + j / 2);
            crop.tokens.push_back(Vocabulary::color_token(color));
            crop.tokens.push_back(Vocabulary::glyph_token(glyph));
        }
    }
    return {std::move(global), std::move(crop)};
}

// Inverse of the 2x duplication: the distinct region cells under a crop view.
inline std::vector<std::pair<int, int>> crop_distinct_cells(const VisualContext& crop, int* k_out = nullptr) {
    if (crop.view_kind != ViewKind::crop || crop.tokens.size() % 2 != 0) {
        throw std::invalid_argument("not a crop view");
    }
    const int n_cells = static_cast<int>(crop.tokens.size() / 2);
    int side = 0;
    while (side * side < n_cells) ++side;
    if (side * side != n_cells || side % 2 != 0) throw std::invalid_argument("crop is not a 2k x 2k grid");
    const int k = side / 2;
    std::vector<std::pair<int, int>> out;
    out.reserve(static_cast<size_t>(k) * k);
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            size_t at = 2 * (static_cast<size_t>(2 * i) * side + 2 * j);
            out.emplace_back(crop.tokens[at] - Vocabulary::COLOR0, crop.tokens[at + 1] - Vocabulary::GLYPH0);
        }
    }
    if (k_out) *k_out = k;
    return out;
}

// ---------------------------------------------------------------------------
// Question templates.

inline const std::vector<std::string>& all_template_ids() {
    static const std::vector<std::string> ids = {"color_of_glyph_in_box", "glyph_at_position_in_box",
                                                 "count_color_in_box"};
    return ids;
}

// Tokenized question for the region, or nullopt when the template does not
// apply (caller retries with another template or scene).
inline std::optional<std::vector<int>> make_question(const Region& r, const Scene& scene,
                                                     const std::string& template_id, Rng& rng) {
    const auto cells = region_cells(scene, r);
    std::vector<int> q;
    if (template_id == "color_of_glyph_in_box") {
        // glyphs occurring exactly once have an unambiguous color
        std::map<int, int> freq;
        for (const auto& [color, glyph] : cells) freq[glyph] += 1;
        std::vector<int> unique;
        for (const auto& [glyph, count] : freq) {
            if (count == 1) unique.push_back(glyph);
        }
        if (unique.empty()) return std::nullopt;
        int glyph = unique[rng.uniform_int(unique.size())];
        q = {Vocabulary::Q_COLOR, Vocabulary::OF, Vocabulary::glyph_token(glyph)};
    } else if (template_id == "glyph_at_position_in_box") {
        int row = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(r.k)));
        int col = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(r.k)));
        q = {Vocabulary::Q_GLYPH, Vocabulary::AT, Vocabulary::digit_token(row), Vocabulary::digit_token(col)};
    } else if (template_id == "count_color_in_box") {
        std::vector<int> present;
        for (const auto& [color, glyph] : cells) {
            if (std::find(present.begin(), present.end(), color) == present.end()) present.push_back(color);
        }
        int color = present[rng.uniform_int(present.size())];
        q = {Vocabulary::Q_COUNT, Vocabulary::color_token(color)};
    } else {
        throw std::invalid_argument("unknown question template: " + template_id);
    }
    const auto clause = Vocabulary::constraint_clause();
    q.insert(q.end(), clause.begin(), clause.end());
    return q;
}

// Analytic ground truth from the crop view alone; the question's first token
// identifies the template. Nullopt when the crop does not determine a unique
// answer (which accepted triplets never exhibit).
inline std::optional<std::vector<int>> oracle_answer(std::span<const int> question, const VisualContext& crop) {
    const auto cells = crop_distinct_cells(crop);
    if (question.empty()) return std::nullopt;
    switch (question[0]) {
        case Vocabulary::Q_COLOR: {
            if (question.size() < 3) return std::nullopt;
            const int glyph = question[2] - Vocabulary::GLYPH0;
            int found_color = -1;
            int hits = 0;
            for (const auto& [color, g] : cells) {
                if (g == glyph) {
                    ++hits;
                    found_color = color;
                }
            }
            if (hits != 1) return std::nullopt;
            return std::vector<int>{Vocabulary::color_token(found_color)};
        }
        case Vocabulary::Q_GLYPH: {
            if (question.size() < 4) return std::nullopt;
            const int row = question[2] - Vocabulary::DIGIT0;
            const int col = question[3] - Vocabulary::DIGIT0;
            int k = 0;
            while (k * k < static_cast<int>(cells.size())) ++k;
            if (row < 0 || col < 0 || row >= k || col >= k) return std::nullopt;
            return std::vector<int>{Vocabulary::glyph_token(cells[static_cast<size_t>(row) * k + col].second)};
        }
        case Vocabulary::Q_COUNT: {
            if (question.size() < 2) return std::nullopt;
            const int color = question[1] - Vocabulary::COLOR0;
            int count = 0;
            for (const auto& [c, g] : cells) {
                if (c == color) ++count;
            }
            return std::vector<int>{Vocabulary::digit_token(count)};
        }
        default:
            return std::nullopt;
    }
}

// ---------------------------------------------------------------------------
// Triplets and consensus.

struct Triplet {
    int id = 0;
    uint64_t scene_seed = 0;
    Region region;
    VisualContext global_view;
    VisualContext crop_view;
    std::vector<int> question;
    std::vector<int> gt_answer;
    std::string template_id;
    double consensus_frequency = 1.0;
    std::string label_provenance;  // "template_oracle" | "consensus_majority"
};

struct MajorityVote {
    std::vector<int> answer;
    double frequency = 0.0;
};

// Majority answer and its frequency; ties resolve to the lexicographically
// smallest answer so the vote is deterministic.
inline MajorityVote majority_vote(const std::vector<std::vector<int>>& answers) {
    if (answers.empty()) throw std::invalid_argument("majority_vote on empty answer list");
    std::map<std::vector<int>, int> counts;
    for (const auto& a : answers) counts[a] += 1;
    const auto best = std::max_element(counts.begin(), counts.end(),
                                       [](const auto& a, const auto& b) { return a.second < b.second; });
    // std::max_element returns the first maximum; map order makes that the
    // lexicographically smallest among tied answers.
    return {best->first, static_cast<double>(best->second) / static_cast<double>(answers.size())};
}

struct ConsensusResult {
    bool accepted = false;
    std::vector<int> answer;
    double frequency = 0.0;
};

// Samples M crop-conditioned answers and accepts only on strict majority
// consensus (frequency > threshold). An empty majority answer never passes.
inline ConsensusResult consensus_filter(const ParamSet& params, const ModelConfig& cfg, const Triplet& triplet,
                                        int m, double threshold, Rng& rng, int max_gen_len = 8) {
    if (m < 1) throw std::invalid_argument("consensus sample count must be >= 1");
    if (!(threshold > 0.5) || threshold > 1.0) throw std::invalid_argument("consensus threshold must be in (0.5, 1]");
    std::vector<std::vector<int>> answers;
    answers.reserve(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) {
        Rollout roll = sample_rollout(params, cfg, triplet.crop_view, triplet.question, max_gen_len, 1.0, rng);
        answers.push_back(extract_answer(roll.tokens));
    }
    MajorityVote vote = majority_vote(answers);
    ConsensusResult res;
    res.answer = vote.answer;
    res.frequency = vote.frequency;
    res.accepted = vote.frequency > threshold && !vote.answer.empty();
    return res;
}

// ---------------------------------------------------------------------------
// Dataset synthesis and JSONL I/O.

struct SynthConfig {
    int grid_n = 12;
    double tau = 0.05;
    int n_samples = 4000;
    int consensus_m = 8;
    double consensus_threshold = 0.75;
    std::vector<std::string> templates = all_template_ids();
    uint64_t seed = 0;
    int consensus_gen_len = 8;
    int id_base = 0;  // offset for triplet ids, so separate files stay id-disjoint

    void validate() const {
        if (id_base < 0) throw std::invalid_argument("id_base must be >= 0");
        if (grid_n < 1) throw std::invalid_argument("grid_n must be positive");
        if (!(tau > 0.0) || tau > 1.0) throw std::invalid_argument("tau must be in (0, 1]");
        if (n_samples < 1) throw std::invalid_argument("n_samples must be positive");
        if (consensus_m < 1) throw std::invalid_argument("consensus_m must be >= 1");
        if (!(consensus_threshold > 0.5) || consensus_threshold > 1.0) {
            throw std::invalid_argument("consensus_threshold must be in (0.5, 1]");
        }
        if (templates.empty()) throw std::invalid_argument("at least one question template required");
        for (const auto& t : templates) {
            const auto& known = all_template_ids();
            if (std::find(known.begin(), known.end(), t) == known.end()) {
                throw std::invalid_argument("unknown question template: " + t);
            }
        }
    }
};

// Optional policy used as the consensus answerer instead of the oracle.
struct ConsensusPolicy {
    ModelConfig config;
    ParamSet params;
};

struct DatasetStats {
    int accepted = 0;
    int attempts = 0;
    int rejected_no_region = 0;
    int rejected_no_template = 0;
    int rejected_consensus = 0;

    double acceptance_rate() const {
        return attempts == 0 ? 0.0 : static_cast<double>(accepted) / static_cast<double>(attempts);
    }
};

namespace detail {

inline nlohmann::ordered_json triplet_json(const Triplet& t) {
    nlohmann::ordered_json j;
    j["id"] = t.id;
    j["seed"] = t.scene_seed;
    j["region"] = {{"row", t.region.row}, {"col", t.region.col}, {"k", t.region.k}};
    j["global_tokens"] = t.global_view.tokens;
    j["crop_tokens"] = t.crop_view.tokens;
    j["question_tokens"] = t.question;
    j["gt_answer_tokens"] = t.gt_answer;
    j["template_id"] = t.template_id;
    j["consensus_frequency"] = t.consensus_frequency;
    j["label_provenance"] = t.label_provenance;
    return j;
}

inline Triplet triplet_from_json(const nlohmann::json& j, int grid_n) {
    Triplet t;
    t.id = j.at("id").get<int>();
    t.scene_seed = j.at("seed").get<uint64_t>();
    t.region.row = j.at("region").at("row").get<int>();
    t.region.col = j.at("region").at("col").get<int>();
    t.region.k = j.at("region").at("k").get<int>();
    t.global_view.view_kind = ViewKind::global;
    t.global_view.tokens = j.at("global_tokens").get<std::vector<int>>();
    auto open = std::find(t.global_view.tokens.begin(), t.global_view.tokens.end(), Vocabulary::BOX_OPEN);
    auto close = std::find(t.global_view.tokens.begin(), t.global_view.tokens.end(), Vocabulary::BOX_CLOSE);
    if (open == t.global_view.tokens.end() || close == t.global_view.tokens.end()) {
        throw std::runtime_error("dataset record lacks bounding-box markers");
    }
    t.global_view.marker_spans = {{static_cast<int>(open - t.global_view.tokens.begin()),
                                   static_cast<int>(close - t.global_view.tokens.begin())}};
    t.crop_view.view_kind = ViewKind::crop;
    t.crop_view.tokens = j.at("crop_tokens").get<std::vector<int>>();
    t.question = j.at("question_tokens").get<std::vector<int>>();
    t.gt_answer = j.at("gt_answer_tokens").get<std::vector<int>>();
    t.template_id = j.at("template_id").get<std::string>();
    t.consensus_frequency = j.at("consensus_frequency").get<double>();
    t.label_provenance = j.at("label_provenance").get<std::string>();
    (void)grid_n;
    return t;
}

}  // namespace detail

inline void save_dataset(const std::vector<Triplet>& triplets, const std::string& path,
                         const std::string& run_id = "") {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open dataset for writing: " + path);
        nlohmann::ordered_json header;
        header["vocabulary"] = Vocabulary::standard().tokens;
        if (!run_id.empty()) header["run_id"] = run_id;
        out << header.dump() << "\n";
        for (const auto& t : triplets) out << detail::triplet_json(t).dump() << "\n";
        if (!out) throw std::runtime_error("dataset write failed: " + path);
    }
    std::filesystem::rename(tmp, path);
}

inline std::vector<Triplet> load_dataset(const std::string& path, int grid_n = 12) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("missing dataset file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty dataset file: " + path);
    nlohmann::json header = nlohmann::json::parse(line);
    if (header.at("vocabulary").get<std::vector<std::string>>() != Vocabulary::standard().tokens) {
        throw std::runtime_error("dataset vocabulary does not match this build: " + path);
    }
    std::vector<Triplet> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        out.push_back(detail::triplet_from_json(nlohmann::json::parse(line), grid_n));
    }
    return out;
}

// Generates triplets until n_samples are accepted. Per-attempt RNG streams
// keep output independent of accept/reject history, so identical configs
// give byte-identical files.
inline std::pair<std::vector<Triplet>, DatasetStats> build_triplets(
    const SynthConfig& cfg, const std::optional<ConsensusPolicy>& consensus = std::nullopt) {
    cfg.validate();
    std::vector<Triplet> out;
    DatasetStats stats;
    const long max_attempts = std::max(1000L, 200L * cfg.n_samples);

    while (static_cast<int>(out.size()) < cfg.n_samples) {
        if (stats.attempts >= max_attempts ||
            (stats.attempts >= 1000 && stats.acceptance_rate() < 0.01)) {
            if (stats.rejected_no_region == stats.attempts) {
                throw std::runtime_error("dataset synthesis aborted: no qualifying regions under tau=" +
                                         std::to_string(cfg.tau));
            }
            throw std::runtime_error(
                "dataset synthesis aborted: acceptance rate " + std::to_string(stats.acceptance_rate()) +
                " after " + std::to_string(stats.attempts) + " attempts (no_region=" +
                std::to_string(stats.rejected_no_region) + ", no_template=" +
                std::to_string(stats.rejected_no_template) + ", consensus=" +
                std::to_string(stats.rejected_consensus) + ")");
        }
        const uint64_t attempt = static_cast<uint64_t>(stats.attempts);
        stats.attempts += 1;

        const uint64_t scene_seed = derive_seed(cfg.seed, "synth_scene", attempt);
        Scene scene = generate_scene(scene_seed, cfg.grid_n);
        Rng pick_rng(derive_seed(cfg.seed, "synth_pick", attempt));
        std::vector<Region> regions = propose_regions(scene, cfg.tau, pick_rng);
        if (regions.empty()) {
            stats.rejected_no_region += 1;
            continue;
        }
        const Region region = regions[pick_rng.uniform_int(regions.size())];

        // try templates in a shuffled order until one applies
        std::vector<std::string> order = cfg.templates;
        for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[pick_rng.uniform_int(i)]);
        std::optional<std::vector<int>> question;
        std::string template_id;
        for (const auto& cand : order) {
            question = make_question(region, scene, cand, pick_rng);
            if (question) {
                template_id = cand;
                break;
            }
        }
        if (!question) {
            stats.rejected_no_template += 1;
            continue;
        }

        Triplet t;
        t.scene_seed = scene_seed;
        t.region = region;
        auto views = render_views(scene, region);
        t.global_view = std::move(views.first);
        t.crop_view = std::move(views.second);
        t.question = *question;
        t.template_id = template_id;

        if (consensus) {
            Rng crng(derive_seed(cfg.seed, "synth_consensus", attempt));
            ConsensusResult res = consensus_filter(consensus->params, consensus->config, t, cfg.consensus_m,
                                                   cfg.consensus_threshold, crng, cfg.consensus_gen_len);
            if (!res.accepted) {
                stats.rejected_consensus += 1;
                continue;
            }
            t.gt_answer = res.answer;
            t.consensus_frequency = res.frequency;
            t.label_provenance = "consensus_majority";
        } else {
            auto gt = oracle_answer(t.question, t.crop_view);
            if (!gt) {
                stats.rejected_no_template += 1;
                continue;
            }
            t.gt_answer = *gt;
            t.consensus_frequency = 1.0;
            t.label_provenance = "template_oracle";
        }
        t.id = cfg.id_base + static_cast<int>(out.size());
        out.push_back(std::move(t));
        stats.accepted += 1;
    }
    return {std::move(out), stats};
}

inline DatasetStats build_dataset(const SynthConfig& cfg, const std::string& out_path,
                                  const std::optional<ConsensusPolicy>& consensus = std::nullopt) {
    auto [triplets, stats] = build_triplets(cfg, consensus);
    save_dataset(triplets, out_path);
    return stats;
}

}  // namespace opdlab
