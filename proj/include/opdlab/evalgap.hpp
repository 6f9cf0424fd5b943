// Regional-to-global gap measurement: temperature-0 exact-match accuracy per
// view, gap reports, and the holdout-template forgetting probe. Evaluation is
// read-only over parameters by construction.

#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "opdlab/policy.hpp"
#include "opdlab/synth.hpp"
#include "opdlab/vocab.hpp"

namespace opdlab {

// Answers occupy at most a few tokens plus EOS; eight generation steps leave
// headroom without inflating evaluation cost.
inline constexpr int kEvalGenLen = 8;

struct GapReport {
    double regional_acc = 0.0;
    double global_acc = 0.0;
    double gap = 0.0;  // always regional_acc - global_acc, never re-derived
    int n = 0;
    int step = 0;
};

inline const VisualContext& triplet_view(const Triplet& t, ViewKind kind) {
    return kind == ViewKind::global ? t.global_view : t.crop_view;
}

// Fraction of triplets whose temperature-0 generation on the requested view
// extracts exactly the ground-truth answer tokens.
inline double accuracy(const ParamSet& params, const ModelConfig& model, std::span<const Triplet> triplets,
                       ViewKind kind) {
    if (triplets.empty()) throw std::invalid_argument("accuracy over an empty triplet list");
    Rng rng(0);  // temperature-0 decoding draws nothing from it
    int correct = 0;
    for (const Triplet& t : triplets) {
        if (t.gt_answer.empty()) throw std::invalid_argument("triplet lacks a ground-truth answer");
        Rollout r = sample_rollout(params, model, triplet_view(t, kind), t.question, kEvalGenLen, 0.0, rng);
        if (extract_answer(r.tokens) == t.gt_answer) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(triplets.size());
}

inline GapReport gap_report(const ParamSet& params, const ModelConfig& model, std::span<const Triplet> split,
                            int step) {
    if (split.empty()) throw std::invalid_argument("gap_report over an empty split");
    GapReport g;
    g.regional_acc = accuracy(params, model, split, ViewKind::crop);
    g.global_acc = accuracy(params, model, split, ViewKind::global);
    g.gap = g.regional_acc - g.global_acc;
    g.n = static_cast<int>(split.size());
    g.step = step;
    return g;
}

// Held-out evaluation data: an in-distribution split plus a holdout split
// drawn from a question-template family the training set never contains.
struct EvalSplit {
    std::vector<Triplet> triplets;
    std::vector<Triplet> holdout_triplets;
    uint64_t split_seed = 0;
};

// Ids disjoint from training, holdout templates disjoint from training templates.
inline void check_eval_split(const EvalSplit& split, std::span<const Triplet> training) {
    std::set<int> train_ids;
    std::set<std::string> train_templates;
    for (const Triplet& t : training) {
        train_ids.insert(t.id);
        train_templates.insert(t.template_id);
    }
    for (const Triplet& t : split.triplets) {
        if (train_ids.count(t.id)) throw std::invalid_argument("eval split shares id with training set");
    }
    for (const Triplet& t : split.holdout_triplets) {
        if (train_ids.count(t.id)) throw std::invalid_argument("holdout split shares id with training set");
        if (train_templates.count(t.template_id)) {
            throw std::invalid_argument("holdout template family overlaps training templates: " + t.template_id);
        }
    }
}

struct ForgettingReport {
    double acc_before = 0.0;
    double acc_after = 0.0;
    double delta = 0.0;  // always acc_after - acc_before
};

inline ForgettingReport forgetting_report(const ParamSet& before, const ParamSet& after,
                                          const ModelConfig& model, std::span<const Triplet> holdout) {
    if (before.size() != after.size()) throw std::invalid_argument("checkpoint architecture mismatch");
    for (size_t i = 0; i < before.size(); ++i) {
        const auto& a = before.entries()[i];
        const auto& b = after.entries()[i];
        if (a.name != b.name || a.shape != b.shape) {
            throw std::invalid_argument("checkpoint architecture mismatch at " + a.name);
        }
    }
    ForgettingReport r;
    r.acc_before = accuracy(before, model, holdout, ViewKind::global);
    r.acc_after = accuracy(after, model, holdout, ViewKind::global);
    r.delta = r.acc_after - r.acc_before;
    return r;
}

}  // namespace opdlab
