// Acceptance gate: ten go/no-go checks, one PASS/FAIL line each. The math
// criteria run against independent oracles written here; the training-dynamics
// criteria drive the real command pipeline end to end in a scratch directory.
// Every tolerance and runtime budget is pinned as a named constant below.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "opdlab/cli.hpp"
#include "support/fd_check.hpp"

using namespace opdlab;
namespace fs = std::filesystem;

namespace {

// ---- pinned tolerances ----
constexpr double kDivOracleTol = 1e-12;     // divergence vs direct summation
constexpr double kJsdBoundSlack = 1e-12;    // JSD_0.5 <= ln 2 + slack
constexpr double kTopkExactTol = 1e-12;     // K == vocab degenerates to full
constexpr double kTopkPeakedTol = 1e-10;    // peaked pairs, retained > 1 - 1e-13
constexpr double kPeakedRetained = 1.0 - 1e-13;
constexpr double kFdStepSize = 1e-6;        // central difference step
constexpr double kGradRelTol = 1e-4;        // analytic vs numeric, relative
constexpr double kEmaAlpha = 0.05;
constexpr double kEmaLawTol = 1e-9;         // |d_n - (1-a)^n d_0|
constexpr double kRegionalFloor = 0.85;     // pretrain regional accuracy
constexpr double kGapFloor = 0.15;          // pretrain regional-global gap
constexpr double kGapClosureRatio = 0.5;    // trained gap / pretrain gap
constexpr double kRegionalDropMax = 0.03;   // regional loss allowed in training

// ---- pinned runtime budgets (seconds) ----
constexpr double kDivBudget = 10.0;
constexpr double kTopkBudget = 10.0;
constexpr double kGradBudget = 120.0;
constexpr double kEmaBudget = 5.0;
constexpr double kPretrainBudget = 900.0;   // 15 min
constexpr double kTrainRunBudget = 1800.0;  // 30 min, per training run
constexpr double kStallBudget = 60.0;

const fs::path kScratch = fs::temp_directory_path() / "opdlab_acceptance";

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, ...) {
    char buf[512];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("missing file: " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

nlohmann::json parse_file(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

void write_json(const fs::path& p, const nlohmann::json& j) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("cannot write " + p.string());
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

// ---------------------------------------------------------------------------
// Independent oracles: direct summation over raw probabilities. The generated
// distributions stay far above kProbFloor, so no floor handling is needed.

double oracle_kl(const std::vector<double>& p, const std::vector<double>& q) {
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) acc += p[i] * (std::log(p[i]) - std::log(q[i]));
    return acc;
}

double oracle_jsd(const std::vector<double>& pt, const std::vector<double>& ps, double beta) {
    std::vector<double> m(pt.size());
    for (size_t i = 0; i < pt.size(); ++i) m[i] = beta * pt[i] + (1.0 - beta) * ps[i];
    return beta * oracle_kl(pt, m) + (1.0 - beta) * oracle_kl(ps, m);
}

std::vector<double> random_probs(Rng& rng, int k, double logit_lo, double logit_hi) {
    std::vector<double> z(k);
    for (double& v : z) v = rng.uniform(logit_lo, logit_hi);
    double mx = *std::max_element(z.begin(), z.end());
    double sum = 0.0;
    for (double& v : z) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (double& v : z) v /= sum;
    return z;
}

Outcome criterion_divergence_oracles() {
    auto t0 = std::chrono::steady_clock::now();
    Rng rng(derive_seed(2026, "acc_div"));
    const int pairs = 1200;
    double max_err = 0.0, max_sym = 0.0, max_over = -1.0;
    for (int i = 0; i < pairs; ++i) {
        const int k = 2 + static_cast<int>(rng.uniform_int(63));  // vocab in [2, 64]
        std::vector<double> p = random_probs(rng, k, -8.0, 8.0);
        std::vector<double> q = random_probs(rng, k, -8.0, 8.0);
        TokenDistribution dp = TokenDistribution::from_probs(p);
        TokenDistribution dq = TokenDistribution::from_probs(q);
        const double beta = rng.uniform(0.05, 0.95);
        max_err = std::max(max_err, std::abs(forward_kl(dp, dq) - oracle_kl(p, q)));
        max_err = std::max(max_err, std::abs(reverse_kl(dp, dq) - oracle_kl(q, p)));
        max_err = std::max(max_err, std::abs(jsd(dp, dq, beta) - oracle_jsd(p, q, beta)));
        const double j_pq = jsd(dp, dq, 0.5);
        max_sym = std::max(max_sym, std::abs(j_pq - jsd(dq, dp, 0.5)));
        max_over = std::max(max_over, j_pq - std::numbers::ln2);
    }
    const double secs = seconds_since(t0);
    Outcome r;
    r.pass = max_err < kDivOracleTol && max_sym < kDivOracleTol && max_over <= kJsdBoundSlack &&
             secs < kDivBudget;
    r.detail = fmt("max oracle err %.2e, jsd symmetry err %.2e, ln2 margin %.2e over %d pairs (%.1fs)",
                   max_err, max_sym, max_over, pairs, secs);
    return r;
}

Outcome criterion_topk_fidelity() {
    auto t0 = std::chrono::steady_clock::now();
    Rng rng(derive_seed(2026, "acc_topk"));
    const DivKind kinds[] = {DivKind::forward_kl, DivKind::reverse_kl, DivKind::jsd};

    double max_exact = 0.0;
    for (int i = 0; i < 400; ++i) {
        const int k = 2 + static_cast<int>(rng.uniform_int(63));
        TokenDistribution pt = TokenDistribution::from_probs(random_probs(rng, k, -8.0, 8.0));
        TokenDistribution ps = TokenDistribution::from_probs(random_probs(rng, k, -8.0, 8.0));
        for (DivKind kind : kinds) {
            DivergenceSpec full{kind, 0.5, std::nullopt};
            DivergenceSpec trunc{kind, 0.5, k};  // K == vocab
            max_exact = std::max(max_exact, std::abs(divergence(pt, ps, trunc) - divergence(pt, ps, full)));
        }
    }

    // Peaked pairs: both distributions concentrated on one 8-token support, the
    // rest 60 nats down, so the retained mass is > 1 - 1e-13 on both sides.
    double max_peaked = 0.0, min_retained = 1.0;
    for (int i = 0; i < 400; ++i) {
        const int k = 16 + static_cast<int>(rng.uniform_int(49));  // vocab in [16, 64]
        const int hot = 8;
        auto peaked = [&]() {
            std::vector<double> z(k, -60.0);
            for (int h = 0; h < hot; ++h) z[h] = rng.uniform(0.0, 3.0);
            std::vector<double> p(k);
            double sum = 0.0;
            for (int j = 0; j < k; ++j) sum += (p[j] = std::exp(z[j]));
            for (double& v : p) v /= sum;
            return p;
        };
        std::vector<double> p = peaked(), q = peaked();
        TokenDistribution pt = TokenDistribution::from_probs(p);
        TokenDistribution ps = TokenDistribution::from_probs(q);
        auto [sel, oth] = truncate_topk(ps, pt, hot);
        min_retained = std::min({min_retained, 1.0 - sel.tail_mass, 1.0 - oth.tail_mass});
        for (DivKind kind : kinds) {
            DivergenceSpec full{kind, 0.5, std::nullopt};
            DivergenceSpec trunc{kind, 0.5, hot};
            max_peaked = std::max(max_peaked, std::abs(divergence(pt, ps, trunc) - divergence(pt, ps, full)));
        }
    }
    const double secs = seconds_since(t0);
    Outcome r;
    r.pass = max_exact < kTopkExactTol && min_retained > kPeakedRetained && max_peaked < kTopkPeakedTol &&
             secs < kTopkBudget;
    r.detail = fmt("K==vocab err %.2e; peaked err %.2e at retained mass >= %.17g (%.1fs)", max_exact,
                   max_peaked, min_retained, secs);
    return r;
}

// ---------------------------------------------------------------------------
// Gradient suite over micro-instances of every objective's loss core.

ModelConfig micro_model() {
    ModelConfig m;
    m.vocab_size = 8;
    m.d_model = 4;
    m.n_layers = 1;
    m.d_ff = 8;
    m.max_ctx = 32;
    m.init_std = 0.4;
    return m;
}

std::vector<double> flatten(const ParamSet& p) {
    std::vector<double> x;
    for (const auto& e : p.entries()) x.insert(x.end(), e.value.begin(), e.value.end());
    return x;
}

void unflatten(ParamSet& p, const std::vector<double>& x) {
    size_t off = 0;
    for (auto& e : p.entries()) {
        std::copy(x.begin() + off, x.begin() + off + e.value.size(), e.value.begin());
        off += e.value.size();
    }
}

std::vector<double> flatten_grads(const GradAccum& g) {
    std::vector<double> x;
    for (const auto& b : g.bufs()) x.insert(x.end(), b.begin(), b.end());
    return x;
}

Triplet random_micro_triplet(Rng& rng, int id) {
    auto toks = [&](int len, int lo, int hi) {
        std::vector<int> v(len);
        for (int& t : v) t = lo + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(hi - lo + 1)));
        return v;
    };
    Triplet t;
    t.id = id;
    t.global_view = VisualContext{ViewKind::global, toks(4, 3, 7), {}};
    t.crop_view = VisualContext{ViewKind::crop, toks(2, 3, 7), {}};
    t.question = toks(2, 0, 7);
    t.template_id = "micro";
    return t;
}

// Analytic-vs-numeric comparison for one loss core at the current parameters.
template <typename LossFn>
double fd_rel_err(const ParamSet& params, LossFn&& loss_with_grads) {
    GradAccum grads(params);
    const double base = loss_with_grads(params, &grads);
    if (!std::isfinite(base)) return std::numeric_limits<double>::infinity();
    std::vector<double> x = flatten(params);
    auto loss_at = [&](const std::vector<double>& xv) {
        ParamSet p = params;
        unflatten(p, xv);
        return loss_with_grads(p, static_cast<GradAccum*>(nullptr));
    };
    return fdcheck::fd_compare(loss_at, x, flatten_grads(grads), kFdStepSize).rel_err;
}

// Algorithm-1 stopgrad contract on a live tape: teacher rows attached as graph
// leaves behind stop_gradient must receive exactly zero gradient while the
// student rows receive some.
bool teacher_grad_exactly_zero(const ModelConfig& model, const ParamSet& student,
                               const ParamSet& teacher_params, const Triplet& t,
                               const std::vector<int>& tokens) {
    const int L = static_cast<int>(tokens.size());
    std::vector<int> ctx =
        build_context(t.global_view, t.question, std::span<const int>(tokens.data(), L - 1));
    std::vector<int> tctx =
        build_context(t.crop_view, t.question, std::span<const int>(tokens.data(), L - 1));
    Graph g;
    TapeRows srows = policy_rows_tape(g, student, model, ctx, static_cast<int>(ctx.size()) - L, L);
    TapeRows trows = policy_rows_tape(g, teacher_params, model, tctx, static_cast<int>(tctx.size()) - L, L);
    Tensor sp = g.softmax_rows(srows.logits);
    Tensor tp = g.stop_gradient(g.softmax_rows(trows.logits));
    DivergenceSpec spec;
    std::vector<Tensor> terms;
    for (int n = 0; n < L; ++n) {
        Tensor srow = g.reshape(g.slice_rows(sp, n, 1), {model.vocab_size});
        Tensor trow = g.reshape(g.slice_rows(tp, n, 1), {model.vocab_size});
        terms.push_back(divergence_node(g, trow, srow, spec));
    }
    g.backward(mean_of_scalars(g, terms));
    bool any_student = false;
    for (const Tensor& leaf : srows.leaves) {
        if (!g.has_grad(leaf)) continue;
        Tensor grad = g.grad(leaf);
        for (double v : grad.data()) {
            if (v != 0.0) any_student = true;
        }
    }
    for (const Tensor& leaf : trows.leaves) {
        if (!g.has_grad(leaf)) continue;
        Tensor grad = g.grad(leaf);
        for (double v : grad.data()) {
            if (v != 0.0) return false;
        }
    }
    return any_student;
}

Outcome criterion_gradient_suite() {
    auto t0 = std::chrono::steady_clock::now();
    const ModelConfig model = micro_model();
    const DivergenceSpec specs[] = {{DivKind::jsd, 0.5, std::nullopt},
                                    {DivKind::forward_kl, 0.5, std::nullopt},
                                    {DivKind::reverse_kl, 0.5, std::nullopt},
                                    {DivKind::jsd, 0.5, 3}};
    int instances = 0, stopgrad_checks = 0;
    double max_rel = 0.0;
    bool stopgrad_ok = true;

    for (uint64_t seed = 1; seed <= 4; ++seed) {
        Rng rng(derive_seed(seed, "acc_fd"));
        ParamSet params = init_policy_params(model, seed);
        ParamSet teacher = init_policy_params(model, seed + 50);
        Triplet t = random_micro_triplet(rng, static_cast<int>(seed));
        Rng roll_rng(derive_seed(seed, "acc_fd_rollout"));
        Rollout y = sample_rollout(params, model, t.global_view, t.question, 3, 1.0, roll_rng);
        const DivergenceSpec& spec = specs[(seed - 1) % 4];

        // vision_opd: student on global view, teacher distributions from the crop.
        {
            DistillItem item;
            item.student_view = &t.global_view;
            item.question = &t.question;
            item.tokens = y.tokens;
            item.teacher = positional_dists(teacher, model, t.crop_view, t.question, y.tokens);
            std::vector<DistillItem> items = {item};
            max_rel = std::max(max_rel, fd_rel_err(params, [&](const ParamSet& p, GradAccum* g) {
                                   return distill_batch_loss(p, model, items, spec, g);
                               }));
            ++instances;
        }
        // opd_generic: external teacher conditioned on the same global view.
        {
            ParamSet external = init_policy_params(model, seed + 70);
            DistillItem item;
            item.student_view = &t.global_view;
            item.question = &t.question;
            item.tokens = y.tokens;
            item.teacher = positional_dists(external, model, t.global_view, t.question, y.tokens);
            std::vector<DistillItem> items = {item};
            max_rel = std::max(max_rel, fd_rel_err(params, [&](const ParamSet& p, GradAccum* g) {
                                   return distill_batch_loss(p, model, items, spec, g);
                               }));
            ++instances;
        }
        // sft_self_teacher: NLL of a kept generation on the global view.
        {
            std::vector<NllItem> items = {NllItem{&t.global_view, &t.question, y.tokens}};
            max_rel = std::max(max_rel, fd_rel_err(params, [&](const ParamSet& p, GradAccum* g) {
                                   return nll_batch_loss(p, model, items, g);
                               }));
            ++instances;
        }
        // grpo_lite: group-relative +1/-1 advantages as per-token weights.
        {
            Rng r2(derive_seed(seed, "acc_fd_roll2"));
            Rollout y2 = sample_rollout(params, model, t.global_view, t.question, 3, 1.0, r2);
            std::vector<PgItem> items = {
                PgItem{&t.global_view, &t.question, y.tokens, std::vector<double>(y.tokens.size(), 1.0), 1.0},
                PgItem{&t.global_view, &t.question, y2.tokens, std::vector<double>(y2.tokens.size(), -1.0),
                       1.0}};
            max_rel = std::max(max_rel, fd_rel_err(params, [&](const ParamSet& p, GradAccum* g) {
                                   return pg_batch_loss(p, model, items, g);
                               }));
            ++instances;
        }
        // sampled_token_pg: stopgradded log-ratio weights.
        {
            auto tlp = score_rollout(teacher, model, t.crop_view, t.question, y.tokens, 1.0);
            std::vector<double> w(y.tokens.size());
            for (size_t n = 0; n < w.size(); ++n) w[n] = tlp[n] - y.student_logprobs[n];
            std::vector<PgItem> items = {PgItem{&t.global_view, &t.question, y.tokens, w, 1.0}};
            max_rel = std::max(max_rel, fd_rel_err(params, [&](const ParamSet& p, GradAccum* g) {
                                   return pg_batch_loss(p, model, items, g);
                               }));
            ++instances;
        }

        stopgrad_ok = stopgrad_ok && teacher_grad_exactly_zero(model, params, teacher, t, y.tokens);
        ++stopgrad_checks;
    }
    const double secs = seconds_since(t0);
    Outcome r;
    r.pass = max_rel < kGradRelTol && stopgrad_ok && instances >= 20 && secs < kGradBudget;
    r.detail = fmt("max rel err %.2e over %d instances; teacher grads exactly zero in %d/%d (%.1fs)",
                   max_rel, instances, stopgrad_ok ? stopgrad_checks : -1, stopgrad_checks, secs);
    return r;
}

Outcome criterion_ema_law() {
    auto t0 = std::chrono::steady_clock::now();
    const ModelConfig model;  // full-size default
    ParamSet start = init_policy_params(model, 1001);
    ParamSet frozen_student = init_policy_params(model, 2002);
    TeacherHandle teacher = TeacherHandle::make(TeacherStrategy::ema, start, kEmaAlpha, 0.1);
    const double d0 = param_l2_distance(*teacher.owned(), frozen_student);
    double max_err = 0.0;
    const int steps = 30;
    for (int n = 1; n <= steps; ++n) {
        teacher.ema_update(frozen_student);
        const double dn = param_l2_distance(*teacher.owned(), frozen_student);
        max_err = std::max(max_err, std::abs(dn - std::pow(1.0 - kEmaAlpha, n) * d0));
    }
    const double secs = seconds_since(t0);
    Outcome r;
    r.pass = max_err < kEmaLawTol && secs < kEmaBudget;
    r.detail = fmt("max |d_n - 0.95^n d_0| = %.2e over %d steps, d_0 = %.2f (%.1fs)", max_err, steps, d0,
                   secs);
    return r;
}

Outcome criterion_grpo_stall() {
    auto t0 = std::chrono::steady_clock::now();
    const ModelConfig model = micro_model();
    Rng rng(derive_seed(3, "acc_stall"));
    Triplet t = random_micro_triplet(rng, 0);
    t.gt_answer = {5, 6, 7, 5, 6, 7};  // longer than any rollout: every reward is 0

    TrainConfig cfg;
    cfg.objective = "grpo_lite";
    cfg.seed = 3;
    cfg.group_size = 4;
    cfg.max_gen_len = 5;
    cfg.batch_size = 1;

    ParamSet params = init_policy_params(model, 9);
    const std::vector<double> before = flatten(params);
    Optimizer opt(OptimConfig{});
    StepAudit audit;
    StepRecord rec = grpo_lite_step(params, std::vector<Triplet>{t}, cfg, model, opt, 0, &audit);
    const bool rewards_uniform =
        !audit.rewards.empty() &&
        std::all_of(audit.rewards.begin(), audit.rewards.end(), [&](double v) { return v == audit.rewards[0]; });
    const bool noop = rec.skipped && flatten(params) == before && opt.steps_taken() == 0;

    TrainConfig vcfg = cfg;
    vcfg.objective = "vision_opd";
    ParamSet vparams = init_policy_params(model, 9);
    const std::vector<double> vbefore = flatten(vparams);
    TeacherHandle teacher = TeacherHandle::make(TeacherStrategy::ema, vparams, kEmaAlpha, 0.1);
    Optimizer vopt(OptimConfig{});
    vision_opd_step(vparams, teacher, std::vector<Triplet>{t}, vcfg, model, vopt, 0);
    const bool moved = flatten(vparams) != vbefore;

    const double secs = seconds_since(t0);
    Outcome r;
    r.pass = rewards_uniform && noop && moved && secs < kStallBudget;
    r.detail = fmt("uniform rewards -> bitwise no-op %s; vision_opd on same batch moved params %s (%.1fs)",
                   noop ? "yes" : "NO", moved ? "yes" : "NO", secs);
    return r;
}

// ---------------------------------------------------------------------------
// Pipeline criteria. One synthesis pass feeds the pretrain, training, and
// determinism checks; facts parsed from artifacts flow between criteria.

struct PipelineState {
    bool synth_ok = false;
    fs::path synth_dir, pre_dir;
    bool pre_ok = false;
    double pre_regional = 0.0, pre_global = 0.0, pre_gap = 0.0;
    struct TrainFacts {
        bool ok = false;
        double gap = 0.0, regional = 0.0, global = 0.0, holdout_delta = 0.0;
    };
    std::map<int, TrainFacts> opd;  // keyed by seed
};

PipelineState g_pipe;

int run_synth_default() {
    g_pipe.synth_dir = kScratch / "synth";
    write_json(kScratch / "synth.json", nlohmann::json::object());
    const int rc = cli::cmd_synth((kScratch / "synth.json").string(), {}, g_pipe.synth_dir.string());
    g_pipe.synth_ok = (rc == cli::kOk);
    return rc;
}

Outcome criterion_gap_induction() {
    if (!g_pipe.synth_ok) return {false, "dataset synthesis failed, see stderr"};
    auto t0 = std::chrono::steady_clock::now();
    g_pipe.pre_dir = kScratch / "pre";
    nlohmann::json cfg = {{"dataset", (g_pipe.synth_dir / "pretrain.jsonl").string()},
                          {"eval_dataset", (g_pipe.synth_dir / "eval.jsonl").string()}};
    write_json(kScratch / "pretrain.json", cfg);
    const int rc = cli::cmd_pretrain((kScratch / "pretrain.json").string(), {}, g_pipe.pre_dir.string());
    const double secs = seconds_since(t0);
    if (rc != cli::kOk && rc != cli::kTargetUnmet) return {false, fmt("cmd_pretrain exit code %d", rc)};

    const nlohmann::json gap = parse_file(g_pipe.pre_dir / "gap.json");
    g_pipe.pre_regional = gap.at("regional_acc").get<double>();
    g_pipe.pre_global = gap.at("global_acc").get<double>();
    g_pipe.pre_gap = gap.at("gap").get<double>();
    g_pipe.pre_ok = true;

    Outcome r;
    r.pass = rc == cli::kOk && gap.at("n").get<int>() == 512 && g_pipe.pre_regional >= kRegionalFloor &&
             g_pipe.pre_gap >= kGapFloor && secs <= kPretrainBudget;
    r.detail = fmt("regional_acc %.4f (floor %.2f), gap %.4f (floor %.2f) on %d held-out triplets (%.0fs)",
                   g_pipe.pre_regional, kRegionalFloor, g_pipe.pre_gap, kGapFloor, gap.at("n").get<int>(),
                   secs);
    return r;
}

// One training run; facts parsed from summary.json.
PipelineState::TrainFacts run_train_cell(const std::string& tag, int seed, const nlohmann::json& extra,
                                         double* out_secs) {
    PipelineState::TrainFacts f;
    nlohmann::json cfg = {{"checkpoint", (g_pipe.pre_dir / "checkpoint.ckpt").string()},
                          {"dataset", (g_pipe.synth_dir / "train.jsonl").string()},
                          {"eval_dataset", (g_pipe.synth_dir / "eval.jsonl").string()},
                          {"holdout_dataset", (g_pipe.synth_dir / "holdout.jsonl").string()},
                          {"seed", seed}};
    for (auto it = extra.begin(); it != extra.end(); ++it) cfg[it.key()] = it.value();
    const fs::path dir = kScratch / tag;
    write_json(kScratch / (tag + ".json"), cfg);
    auto t0 = std::chrono::steady_clock::now();
    const int rc = cli::cmd_train((kScratch / (tag + ".json")).string(), {}, dir.string());
    if (out_secs) *out_secs = seconds_since(t0);
    if (rc != cli::kOk) return f;
    const nlohmann::json s = parse_file(dir / "summary.json");
    f.gap = s.at("final").at("gap").get<double>();
    f.regional = s.at("final").at("regional_acc").get<double>();
    f.global = s.at("final").at("global_acc").get<double>();
    f.holdout_delta = s.at("holdout").at("delta").get<double>();
    f.ok = true;
    return f;
}

Outcome criterion_gap_closure() {
    if (!g_pipe.pre_ok) return {false, "no pretrain checkpoint, see criterion 5"};
    int passed = 0;
    double worst_secs = 0.0;
    std::string per_seed;
    for (int seed : {0, 1, 2}) {
        double secs = 0.0;
        auto f = run_train_cell("opd_s" + std::to_string(seed), seed, nlohmann::json::object(), &secs);
        g_pipe.opd[seed] = f;
        worst_secs = std::max(worst_secs, secs);
        const bool closed = f.ok && f.gap <= kGapClosureRatio * g_pipe.pre_gap &&
                            f.regional >= g_pipe.pre_regional - kRegionalDropMax && secs <= kTrainRunBudget;
        passed += closed ? 1 : 0;
        per_seed += fmt("%ss%d: gap %.4f/%.4f regional %.4f%s", seed ? ", " : "", seed, f.gap,
                        g_pipe.pre_gap, f.regional, closed ? "" : " [miss]");
    }
    Outcome r;
    r.pass = passed >= 2;
    r.detail = fmt("%d/3 seeds closed the gap to <= 50%% with regional drop <= %.2f (%s; max %.0fs)",
                   passed, kRegionalDropMax, per_seed.c_str(), worst_secs);
    return r;
}

Outcome criterion_collapse() {
    if (!g_pipe.pre_ok) return {false, "no pretrain checkpoint, see criterion 5"};
    if (!g_pipe.opd.count(0) || !g_pipe.opd[0].ok) return {false, "seed-0 ema run unavailable, see criterion 6"};
    double secs = 0.0;
    auto f = run_train_cell("collapse_s0", 0, {{"teacher", "current_policy"}}, &secs);
    if (!f.ok) return {false, "current_policy run failed"};
    const double ema_global = g_pipe.opd[0].global;
    Outcome r;
    r.pass = f.global < g_pipe.pre_global && ema_global > g_pipe.pre_global && secs <= kTrainRunBudget;
    r.detail = fmt("global acc: current_policy %.4f < pretrain %.4f < ema %.4f required (%.0fs)", f.global,
                   g_pipe.pre_global, ema_global, secs);
    return r;
}

Outcome criterion_forgetting() {
    if (!g_pipe.pre_ok) return {false, "no pretrain checkpoint, see criterion 5"};
    int passed = 0, compared = 0;
    std::string per_seed;
    for (int seed : {0, 1, 2}) {
        if (!g_pipe.opd.count(seed) || !g_pipe.opd[seed].ok) continue;
        double secs = 0.0;
        auto f = run_train_cell("sft_s" + std::to_string(seed), seed, {{"objective", "sft_self_teacher"}},
                                &secs);
        if (!f.ok || secs > kTrainRunBudget) continue;
        ++compared;
        const double opd_delta = g_pipe.opd[seed].holdout_delta;
        const bool ok = opd_delta >= f.holdout_delta;
        passed += ok ? 1 : 0;
        per_seed += fmt("%ss%d: opd %+.4f vs sft %+.4f%s", per_seed.empty() ? "" : ", ", seed, opd_delta,
                        f.holdout_delta, ok ? "" : " [miss]");
    }
    Outcome r;
    r.pass = compared == 3 && passed >= 2;
    r.detail = fmt("%d/%d seeds kept holdout delta >= sft baseline (%s)", passed, compared,
                   per_seed.c_str());
    return r;
}

// ---------------------------------------------------------------------------
// Determinism: identical seeds produce byte-identical artifacts. Timestamps
// live only in the manifest, which is compared with them struck out.

bool runs_identical(const fs::path& a, const fs::path& b, std::string& why) {
    std::vector<fs::path> rels;
    for (const auto& e : fs::recursive_directory_iterator(a)) {
        if (e.is_regular_file()) rels.push_back(fs::relative(e.path(), a));
    }
    std::sort(rels.begin(), rels.end());
    for (const fs::path& rel : rels) {
        if (!fs::exists(b / rel)) {
            why = rel.string() + " missing from second run";
            return false;
        }
        if (rel.filename() == "manifest.json") {
            nlohmann::json ja = parse_file(a / rel), jb = parse_file(b / rel);
            ja.erase("started_at");
            jb.erase("started_at");
            ja.erase("finished_at");
            jb.erase("finished_at");
            if (ja != jb) {
                why = rel.string() + " differs beyond timestamps";
                return false;
            }
        } else if (slurp(a / rel) != slurp(b / rel)) {
            why = rel.string() + " differs";
            return false;
        }
    }
    return true;
}

Outcome criterion_determinism() {
    auto t0 = std::chrono::steady_clock::now();
    const fs::path root = kScratch / "det";
    nlohmann::json synth_cfg = {{"n_train", 12}, {"n_eval", 24}, {"n_holdout", 16}, {"n_pretrain", 48}};
    write_json(root / "synth.json", synth_cfg);
    for (const char* d : {"synth_a", "synth_b"}) {
        if (cli::cmd_synth((root / "synth.json").string(), {}, (root / d).string()) != cli::kOk) {
            return {false, "small synth run failed"};
        }
    }
    std::string why;
    if (!runs_identical(root / "synth_a", root / "synth_b", why)) return {false, "synth: " + why};

    nlohmann::json pre_cfg = {{"dataset", (root / "synth_a" / "pretrain.jsonl").string()},
                              {"eval_dataset", (root / "synth_a" / "eval.jsonl").string()},
                              {"crop_epochs", 2},
                              {"global_epochs", 1},
                              {"batch_size", 8}};
    write_json(root / "pre.json", pre_cfg);
    int pre_rc = -1;
    for (const char* d : {"pre_a", "pre_b"}) {
        const int rc = cli::cmd_pretrain((root / "pre.json").string(), {}, (root / d).string());
        if (rc != cli::kOk && rc != cli::kTargetUnmet) return {false, "small pretrain run failed"};
        if (pre_rc >= 0 && rc != pre_rc) return {false, "small pretrain exit codes differ"};
        pre_rc = rc;
    }
    if (!runs_identical(root / "pre_a", root / "pre_b", why)) return {false, "pretrain: " + why};

    nlohmann::json train_cfg = {{"checkpoint", (root / "pre_a" / "checkpoint.ckpt").string()},
                                {"dataset", (root / "synth_a" / "train.jsonl").string()},
                                {"eval_dataset", (root / "synth_a" / "eval.jsonl").string()},
                                {"batch_size", 4},
                                {"steps", 2},
                                {"max_gen_len", 4},
                                {"eval_every", 1}};
    write_json(root / "train.json", train_cfg);
    for (const char* d : {"train_a", "train_b"}) {
        if (cli::cmd_train((root / "train.json").string(), {}, (root / d).string()) != cli::kOk) {
            return {false, "small train run failed"};
        }
    }
    if (!runs_identical(root / "train_a", root / "train_b", why)) return {false, "train: " + why};

    Outcome r;
    r.pass = true;
    r.detail = fmt("synth, pretrain, train byte-identical across seed-matched reruns (%.0fs, "
                   "manifest timestamps struck)",
                   seconds_since(t0));
    return r;
}

}  // namespace

int main() {
    std::error_code ec;
    fs::remove_all(kScratch, ec);
    fs::create_directories(kScratch);

    struct Entry {
        int id;
        const char* name;
        Outcome (*fn)();
    };
    const Entry entries[] = {
        {1, "divergence-oracles", criterion_divergence_oracles},
        {2, "topk-fidelity", criterion_topk_fidelity},
        {3, "gradient-suite", criterion_gradient_suite},
        {4, "ema-law", criterion_ema_law},
        {5, "gap-induction", criterion_gap_induction},
        {6, "gap-closure", criterion_gap_closure},
        {7, "collapse-reproduction", criterion_collapse},
        {8, "forgetting-contrast", criterion_forgetting},
        {9, "grpo-stall", criterion_grpo_stall},
        {10, "determinism", criterion_determinism},
    };

    const int synth_rc = run_synth_default();
    if (synth_rc != cli::kOk) {
        std::fprintf(stderr, "dataset synthesis failed with exit code %d\n", synth_rc);
    }

    int failures = 0;
    for (const Entry& e : entries) {
        Outcome out;
        try {
            out = e.fn();
        } catch (const std::exception& ex) {
            out.pass = false;
            out.detail = std::string("exception: ") + ex.what();
        }
        failures += out.pass ? 0 : 1;
        std::printf("%s %2d %-22s %s\n", out.pass ? "PASS" : "FAIL", e.id, e.name, out.detail.c_str());
        std::fflush(stdout);
    }
    std::printf("acceptance: %d/10 criteria passed\n", 10 - failures);
    return failures;
}
