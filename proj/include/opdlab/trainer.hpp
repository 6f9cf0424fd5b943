// Training objectives and loop: regional-to-global on-policy self-distillation
// plus the baselines it is compared against (self-teacher SFT, generic
// distillation, group-relative policy gradient, sampled-token policy gradient).
//
// Every step splits into (1) sampling and teacher evaluation through the value
// path and (2) loss assembly on a fresh tape with the sampled tokens and
// teacher distributions frozen as constants. Gradients therefore reach only
// the student, and the loss cores can be finite-difference checked against
// fixed rollouts.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "opdlab/dist.hpp"
#include "opdlab/evalgap.hpp"
#include "opdlab/optim.hpp"

namespace opdlab {

inline const std::vector<std::string>& objective_names() {
    static const std::vector<std::string> names = {"vision_opd", "sft_self_teacher", "opd_generic",
                                                   "grpo_lite", "sampled_token_pg"};
    return names;
}

struct TrainConfig {
    std::string objective = "vision_opd";
    DivergenceSpec divergence{};  // jsd, beta 0.5, full support
    std::string teacher = "ema";
    double teacher_alpha = 0.05;
    double teacher_epsilon = 0.1;
    int batch_size = 32;
    int steps = -1;  // negative: one pass over the dataset
    int max_gen_len = 16;
    double learning_rate = 3e-4;
    int group_size = 4;  // grpo_lite rollouts per prompt
    uint64_t seed = 0;
    int eval_every = 25;
    std::string external_teacher_path;  // opd_generic teacher checkpoint

    void validate() const {
        const auto& names = objective_names();
        if (std::find(names.begin(), names.end(), objective) == names.end()) {
            throw std::invalid_argument("unknown objective: " + objective);
        }
        divergence.validate();
        parse_teacher_strategy(teacher);
        if (teacher_alpha < 0.0 || teacher_alpha > 1.0) throw std::invalid_argument("teacher_alpha outside [0,1]");
        if (teacher_epsilon < 0.0) throw std::invalid_argument("teacher_epsilon must be >= 0");
        if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
        if (max_gen_len < 1) throw std::invalid_argument("max_gen_len must be >= 1");
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
            throw std::invalid_argument("learning_rate must be positive and finite");
        }
        if (group_size < 2) throw std::invalid_argument("group_size must be >= 2");
        if (eval_every < 1) throw std::invalid_argument("eval_every must be >= 1");
    }
};

struct StepRecord {
    int step = 0;  // optimizer steps completed after this record (1-based)
    std::string objective;
    double loss = 0.0;
    double mean_divergence = 0.0;  // divergence objectives only, else 0
    double mean_len = 0.0;
    double teacher_dist = 0.0;  // L2 between student and owned teacher, 0 when shared
    double wall_ms = 0.0;       // in-memory timing only, never emitted
    bool skipped = false;       // no parameter update happened
};

// Test seam: the exact sampling decisions a step consumed, batch order.
struct StepAudit {
    std::vector<Rollout> rollouts;  // grpo: group-major, batch-item outer
    std::vector<int> kept;          // sft: 1 if the teacher generation was kept
    std::vector<double> rewards;
    std::vector<double> advantages;
    std::vector<std::vector<double>> token_weights;  // sampled_token_pg log-ratios
};

// ---------------------------------------------------------------------------
// Frozen-input loss cores. Each assembles one tape per item and accumulates
// leaf gradients scaled by the item's weight; the returned value is the batch
// loss. Rollouts and teacher distributions are inputs, never re-sampled.

struct DistillItem {
    const VisualContext* student_view = nullptr;
    const std::vector<int>* question = nullptr;
    std::vector<int> tokens;                        // student rollout, length >= 1
    std::vector<TokenDistribution> teacher;         // teacher next-token dist per position
};

inline double distill_batch_loss(const ParamSet& params, const ModelConfig& model,
                                 std::span<const DistillItem> items, const DivergenceSpec& spec,
                                 GradAccum* grads) {
    if (items.empty()) throw std::invalid_argument("empty distillation batch");
    const double w = 1.0 / static_cast<double>(items.size());
    double total = 0.0;
    for (const DistillItem& it : items) {
        const int L = static_cast<int>(it.tokens.size());
        if (L < 1) throw std::invalid_argument("empty rollout");
        if (static_cast<int>(it.teacher.size()) != L) {
            throw std::invalid_argument("teacher distributions do not match rollout length");
        }
        std::vector<int> ctx =
            build_context(*it.student_view, *it.question, std::span<const int>(it.tokens.data(), L - 1));
        const int first_row = static_cast<int>(ctx.size()) - L;  // row of p(y_0 | conditioning prefix)
        Graph g;
        TapeRows rows = policy_rows_tape(g, params, model, ctx, first_row, L);
        Tensor probs = g.softmax_rows(rows.logits);
        std::vector<Tensor> terms;
        terms.reserve(L);
        for (int n = 0; n < L; ++n) {
            Tensor student = g.reshape(g.slice_rows(probs, n, 1), {model.vocab_size});
            Tensor teacher = g.constant({model.vocab_size}, it.teacher[n].probs);
            terms.push_back(divergence_node(g, teacher, student, spec));
        }
        Tensor loss = mean_of_scalars(g, terms);
        total += w * loss.item();
        if (grads) {
            g.backward(loss);
            for (size_t pi = 0; pi < rows.leaves.size(); ++pi) {
                if (g.has_grad(rows.leaves[pi])) grads->add(pi, g.grad(rows.leaves[pi]), w);
            }
        }
    }
    return total;
}

struct NllItem {
    const VisualContext* view = nullptr;
    const std::vector<int>* question = nullptr;
    std::vector<int> target;  // token ids to fit, length >= 1
};

inline double nll_batch_loss(const ParamSet& params, const ModelConfig& model, std::span<const NllItem> items,
                             GradAccum* grads) {
    if (items.empty()) throw std::invalid_argument("empty NLL batch");
    const double w = 1.0 / static_cast<double>(items.size());
    double total = 0.0;
    for (const NllItem& it : items) {
        const int L = static_cast<int>(it.target.size());
        if (L < 1) throw std::invalid_argument("empty target sequence");
        std::vector<int> ctx =
            build_context(*it.view, *it.question, std::span<const int>(it.target.data(), L - 1));
        const int first_row = static_cast<int>(ctx.size()) - L;
        Graph g;
        TapeRows rows = policy_rows_tape(g, params, model, ctx, first_row, L);
        Tensor picked = g.gather_rowwise(g.softmax_rows(rows.logits), it.target);
        Tensor lp = g.log(g.max_scalar(picked, kProbFloor));
        Tensor loss = g.mul_scalar(g.sum(lp), -1.0 / static_cast<double>(L));
        total += w * loss.item();
        if (grads) {
            g.backward(loss);
            for (size_t pi = 0; pi < rows.leaves.size(); ++pi) {
                if (g.has_grad(rows.leaves[pi])) grads->add(pi, g.grad(rows.leaves[pi]), w);
            }
        }
    }
    return total;
}

struct PgItem {
    const VisualContext* view = nullptr;
    const std::vector<int>* question = nullptr;
    std::vector<int> tokens;
    std::vector<double> weights;  // per-token coefficient, treated as constant
    double scale = 1.0;           // item weight in the batch total
};

// total = sum_i scale_i * ( -(1/L_i) * sum_n weights_in * log p(y_in | ...) )
inline double pg_batch_loss(const ParamSet& params, const ModelConfig& model, std::span<const PgItem> items,
                            GradAccum* grads) {
    if (items.empty()) throw std::invalid_argument("empty policy-gradient batch");
    double total = 0.0;
    for (const PgItem& it : items) {
        const int L = static_cast<int>(it.tokens.size());
        if (L < 1) throw std::invalid_argument("empty rollout");
        if (static_cast<int>(it.weights.size()) != L) throw std::invalid_argument("weight/rollout length mismatch");
        std::vector<int> ctx =
            build_context(*it.view, *it.question, std::span<const int>(it.tokens.data(), L - 1));
        const int first_row = static_cast<int>(ctx.size()) - L;
        Graph g;
        TapeRows rows = policy_rows_tape(g, params, model, ctx, first_row, L);
        Tensor picked = g.gather_rowwise(g.softmax_rows(rows.logits), it.tokens);
        Tensor lp = g.log(g.max_scalar(picked, kProbFloor));
        Tensor weighted = g.mul(lp, g.constant({L}, it.weights));
        Tensor loss = g.mul_scalar(g.sum(weighted), -1.0 / static_cast<double>(L));
        total += it.scale * loss.item();
        if (grads) {
            g.backward(loss);
            for (size_t pi = 0; pi < rows.leaves.size(); ++pi) {
                if (g.has_grad(rows.leaves[pi])) grads->add(pi, g.grad(rows.leaves[pi]), it.scale);
            }
        }
    }
    return total;
}

// Teacher next-token distribution at every rollout position, via the value
// path: the results enter training graphs as constants, so no gradient can
// flow back into the conditioning policy.
inline std::vector<TokenDistribution> positional_dists(const ParamSet& policy, const ModelConfig& model,
                                                       const VisualContext& view, std::span<const int> question,
                                                       std::span<const int> tokens) {
    if (tokens.empty()) throw std::invalid_argument("empty rollout");
    std::vector<int> ctx = build_context(view, question, {});
    check_context(model, ctx.size() + tokens.size());
    DecodeState ds(policy, model);
    const std::vector<double>* logits = &ds.push_all(ctx);
    std::vector<TokenDistribution> out;
    out.reserve(tokens.size());
    for (size_t n = 0; n < tokens.size(); ++n) {
        out.push_back(TokenDistribution::from_logits(*logits));
        if (n + 1 < tokens.size()) logits = &ds.push(tokens[n]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Step operations. Per-sample RNG streams are keyed by (seed, step, triplet
// id), so batch composition and ordering never change what a given triplet
// samples within a step.

namespace detail {

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

inline double teacher_distance(const TeacherHandle& teacher, const ParamSet& student) {
    const ParamSet* owned = teacher.owned();
    return owned ? param_l2_distance(student, *owned) : 0.0;
}

// EMA trails the student each step; trust_region probes the batch's crop
// contexts (first eight) before interpolating. Frozen strategies never move.
inline void apply_teacher_update(TeacherHandle& teacher, const ParamSet& student, const ModelConfig& model,
                                 std::span<const Triplet> batch) {
    switch (teacher.strategy()) {
        case TeacherStrategy::ema:
            teacher.ema_update(student);
            break;
        case TeacherStrategy::trust_region: {
            std::vector<ProbeItem> probe;
            for (const Triplet& t : batch) {
                probe.push_back(ProbeItem{t.crop_view, t.question, {}});
                if (probe.size() == 8) break;
            }
            teacher.trust_region_update(student, model, probe);
            break;
        }
        case TeacherStrategy::current_policy:
        case TeacherStrategy::initial_policy:
            break;
    }
}

}  // namespace detail

inline StepRecord vision_opd_step(ParamSet& params, TeacherHandle& teacher, std::span<const Triplet> batch,
                                  const TrainConfig& cfg, const ModelConfig& model, Optimizer& opt,
                                  int step_index, StepAudit* audit = nullptr) {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    auto t0 = std::chrono::steady_clock::now();
    const ParamSet& teff = teacher.effective(params);
    std::vector<DistillItem> items(batch.size());
    double len_sum = 0.0;
    for (size_t i = 0; i < batch.size(); ++i) {
        const Triplet& t = batch[i];
        Rng rng(derive_seed(cfg.seed, "rollout", static_cast<uint64_t>(step_index), static_cast<uint64_t>(t.id)));
        Rollout y = sample_rollout(params, model, t.global_view, t.question, cfg.max_gen_len, 1.0, rng);
        len_sum += static_cast<double>(y.tokens.size());
        items[i].student_view = &t.global_view;
        items[i].question = &t.question;
        items[i].tokens = y.tokens;
        items[i].teacher = positional_dists(teff, model, t.crop_view, t.question, y.tokens);
        if (audit) audit->rollouts.push_back(std::move(y));
    }
    GradAccum grads(params);
    double loss = distill_batch_loss(params, model, items, cfg.divergence, &grads);
    opt.step(params, grads);
    detail::apply_teacher_update(teacher, params, model, batch);

    StepRecord rec;
    rec.step = step_index + 1;
    rec.objective = "vision_opd";
    rec.loss = loss;
    rec.mean_divergence = loss;
    rec.mean_len = len_sum / static_cast<double>(batch.size());
    rec.teacher_dist = detail::teacher_distance(teacher, params);
    rec.wall_ms = detail::elapsed_ms(t0);
    return rec;
}

// Same objective with the teacher conditioned on the student's own (global)
// view, from an externally supplied checkpoint that never updates.
inline StepRecord opd_generic_step(ParamSet& params, const ParamSet& external_teacher,
                                   std::span<const Triplet> batch, const TrainConfig& cfg,
                                   const ModelConfig& model, Optimizer& opt, int step_index,
                                   StepAudit* audit = nullptr) {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    auto t0 = std::chrono::steady_clock::now();
    std::vector<DistillItem> items(batch.size());
    double len_sum = 0.0;
    for (size_t i = 0; i < batch.size(); ++i) {
        const Triplet& t = batch[i];
        Rng rng(derive_seed(cfg.seed, "rollout", static_cast<uint64_t>(step_index), static_cast<uint64_t>(t.id)));
        Rollout y = sample_rollout(params, model, t.global_view, t.question, cfg.max_gen_len, 1.0, rng);
        len_sum += static_cast<double>(y.tokens.size());
        items[i].student_view = &t.global_view;
        items[i].question = &t.question;
        items[i].tokens = y.tokens;
        items[i].teacher = positional_dists(external_teacher, model, t.global_view, t.question, y.tokens);
        if (audit) audit->rollouts.push_back(std::move(y));
    }
    GradAccum grads(params);
    double loss = distill_batch_loss(params, model, items, cfg.divergence, &grads);
    opt.step(params, grads);

    StepRecord rec;
    rec.step = step_index + 1;
    rec.objective = "opd_generic";
    rec.loss = loss;
    rec.mean_divergence = loss;
    rec.mean_len = len_sum / static_cast<double>(batch.size());
    rec.teacher_dist = param_l2_distance(params, external_teacher);
    rec.wall_ms = detail::elapsed_ms(t0);
    return rec;
}

// Off-policy baseline: the teacher generates on the privileged view, answers
// matching ground truth are kept, and the student fits them by NLL on the
// global view. A batch with nothing kept records a skipped step.
inline StepRecord sft_self_teacher_step(ParamSet& params, TeacherHandle& teacher,
                                        std::span<const Triplet> batch, const TrainConfig& cfg,
                                        const ModelConfig& model, Optimizer& opt, int step_index,
                                        StepAudit* audit = nullptr) {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    auto t0 = std::chrono::steady_clock::now();
    const ParamSet& teff = teacher.effective(params);
    std::vector<NllItem> kept;
    double len_sum = 0.0;
    for (const Triplet& t : batch) {
        Rng rng(derive_seed(cfg.seed, "teacher_gen", static_cast<uint64_t>(step_index),
                            static_cast<uint64_t>(t.id)));
        Rollout y = sample_rollout(teff, model, t.crop_view, t.question, cfg.max_gen_len, 1.0, rng);
        len_sum += static_cast<double>(y.tokens.size());
        const bool keep = extract_answer(y.tokens) == t.gt_answer;
        if (keep) kept.push_back(NllItem{&t.global_view, &t.question, y.tokens});
        if (audit) {
            audit->rollouts.push_back(std::move(y));
            audit->kept.push_back(keep ? 1 : 0);
        }
    }

    StepRecord rec;
    rec.step = step_index + 1;
    rec.objective = "sft_self_teacher";
    rec.mean_len = len_sum / static_cast<double>(batch.size());
    if (kept.empty()) {
        rec.skipped = true;
        rec.teacher_dist = detail::teacher_distance(teacher, params);
        rec.wall_ms = detail::elapsed_ms(t0);
        return rec;
    }
    GradAccum grads(params);
    rec.loss = nll_batch_loss(params, model, kept, &grads);
    opt.step(params, grads);
    detail::apply_teacher_update(teacher, params, model, batch);
    rec.teacher_dist = detail::teacher_distance(teacher, params);
    rec.wall_ms = detail::elapsed_ms(t0);
    return rec;
}

// Group-relative policy gradient on exact-match reward. Groups with uniform
// reward carry zero advantage everywhere; a batch of only such groups must
// not touch the parameters at all, so the optimizer step is skipped outright.
inline StepRecord grpo_lite_step(ParamSet& params, std::span<const Triplet> batch, const TrainConfig& cfg,
                                 const ModelConfig& model, Optimizer& opt, int step_index,
                                 StepAudit* audit = nullptr) {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    auto t0 = std::chrono::steady_clock::now();
    const int G = cfg.group_size;
    std::vector<PgItem> items;
    double len_sum = 0.0;
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (const Triplet& t : batch) {
        std::vector<Rollout> group;
        std::vector<double> rewards(G, 0.0);
        for (int gi = 0; gi < G; ++gi) {
            Rng rng(derive_seed(derive_seed(cfg.seed, "grpo", static_cast<uint64_t>(step_index),
                                            static_cast<uint64_t>(t.id)),
                                "member", static_cast<uint64_t>(gi)));
            Rollout y = sample_rollout(params, model, t.global_view, t.question, cfg.max_gen_len, 1.0, rng);
            len_sum += static_cast<double>(y.tokens.size());
            rewards[gi] = extract_answer(y.tokens) == t.gt_answer ? 1.0 : 0.0;
            group.push_back(std::move(y));
        }
        double mean = 0.0;
        for (double r : rewards) mean += r;
        mean /= static_cast<double>(G);
        double var = 0.0;
        for (double r : rewards) var += (r - mean) * (r - mean);
        const double denom = std::max(std::sqrt(var / static_cast<double>(G)), 1e-8);
        for (int gi = 0; gi < G; ++gi) {
            const double adv = (rewards[gi] - mean) / denom;
            if (adv != 0.0) {
                items.push_back(PgItem{&t.global_view, &t.question, group[gi].tokens,
                                       std::vector<double>(group[gi].tokens.size(), adv), scale});
            }
            if (audit) {
                audit->rollouts.push_back(std::move(group[gi]));
                audit->rewards.push_back(rewards[gi]);
                audit->advantages.push_back(adv);
            }
        }
    }

    StepRecord rec;
    rec.step = step_index + 1;
    rec.objective = "grpo_lite";
    rec.mean_len = len_sum / static_cast<double>(batch.size() * static_cast<size_t>(G));
    if (items.empty()) {
        rec.skipped = true;
        rec.wall_ms = detail::elapsed_ms(t0);
        return rec;
    }
    GradAccum grads(params);
    rec.loss = pg_batch_loss(params, model, items, &grads);
    opt.step(params, grads);
    rec.wall_ms = detail::elapsed_ms(t0);
    return rec;
}

// Policy gradient weighted by the stopgradded per-token log-ratio between the
// privileged-view teacher and the student. Both sides of the ratio use the
// same logprob arithmetic, so teacher == student on identical views gives
// exactly zero weights and exactly zero gradient.
inline StepRecord sampled_token_pg_step(ParamSet& params, TeacherHandle& teacher,
                                        std::span<const Triplet> batch, const TrainConfig& cfg,
                                        const ModelConfig& model, Optimizer& opt, int step_index,
                                        StepAudit* audit = nullptr) {
    if (batch.empty()) throw std::invalid_argument("empty batch");
    auto t0 = std::chrono::steady_clock::now();
    const ParamSet& teff = teacher.effective(params);
    std::vector<PgItem> items(batch.size());
    double len_sum = 0.0;
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (size_t i = 0; i < batch.size(); ++i) {
        const Triplet& t = batch[i];
        Rng rng(derive_seed(cfg.seed, "rollout", static_cast<uint64_t>(step_index), static_cast<uint64_t>(t.id)));
        Rollout y = sample_rollout(params, model, t.global_view, t.question, cfg.max_gen_len, 1.0, rng);
        len_sum += static_cast<double>(y.tokens.size());
        std::vector<double> teacher_lp = score_rollout(teff, model, t.crop_view, t.question, y.tokens, 1.0);
        std::vector<double> weights(y.tokens.size());
        for (size_t n = 0; n < weights.size(); ++n) weights[n] = teacher_lp[n] - y.student_logprobs[n];
        items[i] = PgItem{&t.global_view, &t.question, y.tokens, weights, scale};
        if (audit) {
            audit->rollouts.push_back(std::move(y));
            audit->token_weights.push_back(std::move(weights));
        }
    }
    GradAccum grads(params);
    double loss = pg_batch_loss(params, model, items, &grads);
    opt.step(params, grads);
    detail::apply_teacher_update(teacher, params, model, batch);

    StepRecord rec;
    rec.step = step_index + 1;
    rec.objective = "sampled_token_pg";
    rec.loss = loss;
    rec.mean_len = len_sum / static_cast<double>(batch.size());
    rec.teacher_dist = detail::teacher_distance(teacher, params);
    rec.wall_ms = detail::elapsed_ms(t0);
    return rec;
}

// ---------------------------------------------------------------------------
// Training loop.

struct TrainResult {
    ParamSet params;
    std::vector<StepRecord> records;
    std::vector<GapReport> gaps;
    bool nan_abort = false;
    std::string abort_reason;
};

inline TrainResult train(const TrainConfig& cfg, const ModelConfig& model, const ParamSet& init,
                         const std::vector<Triplet>& dataset, const std::vector<Triplet>& eval_split,
                         const std::optional<ParamSet>& external_teacher = std::nullopt) {
    cfg.validate();
    if (dataset.empty()) throw std::invalid_argument("empty dataset");
    if (cfg.objective == "opd_generic" && !external_teacher) {
        throw std::invalid_argument("opd_generic requires an external teacher checkpoint");
    }

    TrainResult out;
    out.params = init;
    const int n = static_cast<int>(dataset.size());
    const int B = std::min(cfg.batch_size, n);
    const int steps_per_epoch = (n + B - 1) / B;
    const int M = cfg.steps >= 0 ? cfg.steps : steps_per_epoch;

    TeacherHandle teacher = TeacherHandle::make(parse_teacher_strategy(cfg.teacher), out.params,
                                                cfg.teacher_alpha, cfg.teacher_epsilon);
    OptimConfig ocfg;
    ocfg.lr = cfg.learning_rate;
    Optimizer opt(ocfg);

    // Non-finite values anywhere in a step or an eval abort the run and roll
    // back to the last healthy parameters; anything else is a real error.
    auto is_numeric_blowup = [](const std::string& what) {
        return what.find("non-finite") != std::string::npos || what.find("NaN") != std::string::npos;
    };
    if (!eval_split.empty()) {
        try {
            out.gaps.push_back(gap_report(out.params, model, eval_split, 0));
        } catch (const std::exception& e) {
            if (!is_numeric_blowup(e.what())) throw;
            out.nan_abort = true;
            out.abort_reason = e.what();
            return out;
        }
    }

    std::vector<int> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    ParamSet last_good = out.params;
    for (int step = 0; step < M; ++step) {
        const int pos = step % steps_per_epoch;
        if (pos == 0) {
            Rng shuffle_rng(derive_seed(cfg.seed, "epoch", static_cast<uint64_t>(step / steps_per_epoch)));
            for (size_t i = order.size(); i > 1; --i) {
                size_t j = shuffle_rng.uniform_int(i);
                std::swap(order[i - 1], order[j]);
            }
        }
        std::vector<Triplet> batch;
        for (int i = pos * B; i < std::min(n, (pos + 1) * B); ++i) batch.push_back(dataset[order[i]]);

        last_good = out.params;
        StepRecord rec;
        try {
            if (cfg.objective == "vision_opd") {
                rec = vision_opd_step(out.params, teacher, batch, cfg, model, opt, step);
            } else if (cfg.objective == "sft_self_teacher") {
                rec = sft_self_teacher_step(out.params, teacher, batch, cfg, model, opt, step);
            } else if (cfg.objective == "opd_generic") {
                rec = opd_generic_step(out.params, *external_teacher, batch, cfg, model, opt, step);
            } else if (cfg.objective == "grpo_lite") {
                rec = grpo_lite_step(out.params, batch, cfg, model, opt, step);
            } else {
                rec = sampled_token_pg_step(out.params, teacher, batch, cfg, model, opt, step);
            }
            if (!std::isfinite(rec.loss)) throw std::runtime_error("non-finite loss");
            out.records.push_back(rec);
            if (!eval_split.empty() && ((step + 1) % cfg.eval_every == 0 || step + 1 == M)) {
                out.gaps.push_back(gap_report(out.params, model, eval_split, step + 1));
            }
        } catch (const std::exception& e) {
            if (!is_numeric_blowup(e.what())) throw;
            out.params = last_good;
            out.nan_abort = true;
            out.abort_reason = e.what();
            break;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Run artifacts. Timing never reaches disk, so same-seed runs are
// byte-identical.

inline std::string format_metric(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline constexpr const char* kMetricsHeader =
    "step,objective,loss,mean_divergence,mean_len,teacher_dist,regional_acc,global_acc,gap";

inline void write_metrics_csv(std::ostream& out, std::span<const StepRecord> records,
                              std::span<const GapReport> gaps) {
    std::map<int, const GapReport*> by_step;
    for (const GapReport& g : gaps) by_step[g.step] = &g;
    out << kMetricsHeader << "\n";
    auto gap_cols = [&](int step) -> std::string {
        auto it = by_step.find(step);
        if (it == by_step.end()) return ",,";
        const GapReport& g = *it->second;
        return format_metric(g.regional_acc) + "," + format_metric(g.global_acc) + "," + format_metric(g.gap);
    };
    if (by_step.count(0)) out << "0,init,,,,," << gap_cols(0) << "\n";
    for (const StepRecord& r : records) {
        out << r.step << "," << r.objective << "," << format_metric(r.loss) << ","
            << format_metric(r.mean_divergence) << "," << format_metric(r.mean_len) << ","
            << format_metric(r.teacher_dist) << "," << gap_cols(r.step) << "\n";
    }
}

inline void write_metrics_csv(const std::string& path, std::span<const StepRecord> records,
                              std::span<const GapReport> gaps) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write metrics: " + path);
    write_metrics_csv(out, records, gaps);
    if (!out) throw std::runtime_error("failed writing metrics: " + path);
}

struct RunSummary {
    std::string run_id;
    std::string config_hash;
    std::string dataset_hash;
    GapReport final_gap;
    std::optional<ForgettingReport> holdout;
    std::vector<GapReport> gap_series;
};

inline void write_summary_json(const std::string& path, const RunSummary& s) {
    nlohmann::ordered_json j;
    j["run_id"] = s.run_id;
    j["config_hash"] = s.config_hash;
    j["dataset_hash"] = s.dataset_hash;
    j["final"] = {{"regional_acc", s.final_gap.regional_acc},
                  {"global_acc", s.final_gap.global_acc},
                  {"gap", s.final_gap.gap}};
    if (s.holdout) {
        j["holdout"] = {{"before", s.holdout->acc_before},
                        {"after", s.holdout->acc_after},
                        {"delta", s.holdout->delta}};
    } else {
        j["holdout"] = nullptr;
    }
    j["gap_series"] = nlohmann::ordered_json::array();
    for (const GapReport& g : s.gap_series) j["gap_series"].push_back({g.step, g.gap});
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write summary: " + path);
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("failed writing summary: " + path);
}

inline void emit_reports(const std::string& csv_path, const std::string& json_path,
                         std::span<const StepRecord> records, std::span<const GapReport> gaps,
                         const RunSummary& summary) {
    write_metrics_csv(csv_path, records, gaps);
    write_summary_json(json_path, summary);
}

}  // namespace opdlab
