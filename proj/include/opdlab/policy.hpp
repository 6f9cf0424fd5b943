// Conditional autoregressive policy p(y_n | view, question, y_<n>).
//
// One parameter set backs both roles: the student reads the full serialized
// grid, the teacher reads the privileged crop. Two forward implementations
// share every kernel's accumulation order, so the incremental decode path
// (used for rollouts and evaluation) reproduces the differentiable tape path
// bitwise; a test asserts that equivalence.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "opdlab/dist.hpp"
#include "opdlab/optim.hpp"
#include "opdlab/rng.hpp"
#include "opdlab/tensor.hpp"
#include "opdlab/vocab.hpp"

namespace opdlab {

enum class ViewKind { global, crop };

inline const char* view_kind_name(ViewKind k) { return k == ViewKind::global ? "global" : "crop"; }

inline ViewKind parse_view_kind(const std::string& s) {
    if (s == "global") return ViewKind::global;
    if (s == "crop") return ViewKind::crop;
    throw std::invalid_argument("unknown view kind: " + s);
}

// A serialized visual input: (color, glyph) cell pairs in row-major order,
// global views with exactly one marked span, crop views with none.
struct VisualContext {
    ViewKind view_kind = ViewKind::global;
    std::vector<int> tokens;
    std::vector<std::pair<int, int>> marker_spans;  // (open, close) positions within tokens
};

struct ModelConfig {
    int vocab_size = Vocabulary::kSize;
    int d_model = 64;
    int n_layers = 2;
    int d_ff = 256;
    int max_ctx = 512;
    double init_std = 0.08;
    double rms_eps = 1e-5;

    bool operator==(const ModelConfig&) const = default;
};

// Parameter declaration order; indices into ParamSet::entries().
struct PolicyLayout {
    static constexpr int tok_embed = 0;
    static constexpr int pos_embed = 1;
    static constexpr int per_layer = 8;
    static int layer_base(int l) { return 2 + per_layer * l; }
    // layer offsets: 0 attn_norm, 1 wq, 2 wk, 3 wv, 4 wo, 5 mlp_norm, 6 w1, 7 w2
    static int final_norm(const ModelConfig& c) { return 2 + per_layer * c.n_layers; }
    static int out_proj(const ModelConfig& c) { return 3 + per_layer * c.n_layers; }
    static int count(const ModelConfig& c) { return 4 + per_layer * c.n_layers; }
};

// Declares every tensor in canonical order with zero values.
inline ParamSet policy_param_shapes(const ModelConfig& cfg) {
    ParamSet p;
    p.declare("tok_embed", {cfg.vocab_size, cfg.d_model});
    p.declare("pos_embed", {cfg.max_ctx, cfg.d_model});
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "L" + std::to_string(l) + ".";
        p.declare(pre + "attn_norm", {cfg.d_model});
        p.declare(pre + "wq", {cfg.d_model, cfg.d_model});
        p.declare(pre + "wk", {cfg.d_model, cfg.d_model});
        p.declare(pre + "wv", {cfg.d_model, cfg.d_model});
        p.declare(pre + "wo", {cfg.d_model, cfg.d_model});
        p.declare(pre + "mlp_norm", {cfg.d_model});
        p.declare(pre + "w1", {cfg.d_model, cfg.d_ff});
        p.declare(pre + "w2", {cfg.d_ff, cfg.d_model});
    }
    p.declare("final_norm", {cfg.d_model});
    p.declare("out_proj", {cfg.d_model, cfg.vocab_size});
    return p;
}

// Gaussian init for weights and embeddings, unit gains for norms; each tensor
// draws from its own derived stream so the layout can grow without reshuffling.
inline ParamSet init_policy_params(const ModelConfig& cfg, uint64_t seed) {
    ParamSet p = policy_param_shapes(cfg);
    for (size_t i = 0; i < p.size(); ++i) {
        ParamEntry& e = p.entries()[i];
        if (e.name.ends_with("norm")) {
            std::fill(e.value.begin(), e.value.end(), 1.0);
        } else {
            Rng rng(derive_seed(seed, "policy_init", i));
            for (double& v : e.value) v = rng.normal() * cfg.init_std;
        }
    }
    return p;
}

// Full conditioning sequence: BOS, view cells, question, generated prefix.
inline std::vector<int> build_context(const VisualContext& view, std::span<const int> question,
                                      std::span<const int> prefix) {
    std::vector<int> ctx;
    ctx.reserve(1 + view.tokens.size() + question.size() + prefix.size());
    ctx.push_back(Vocabulary::BOS);
    ctx.insert(ctx.end(), view.tokens.begin(), view.tokens.end());
    ctx.insert(ctx.end(), question.begin(), question.end());
    ctx.insert(ctx.end(), prefix.begin(), prefix.end());
    return ctx;
}

inline void check_context(const ModelConfig& cfg, size_t ctx_len) {
    if (ctx_len == 0) throw std::invalid_argument("empty context");
    if (static_cast<int>(ctx_len) > cfg.max_ctx) {
        throw std::runtime_error("context overflow: " + std::to_string(ctx_len) + " tokens exceed max context " +
                                 std::to_string(cfg.max_ctx));
    }
}

// ---------------------------------------------------------------------------
// Differentiable tape forward.

struct TapeRows {
    std::vector<Tensor> leaves;  // aligned with ParamSet::entries()
    Tensor logits;               // [n_rows, vocab]: next-token logits for rows first_row..first_row+n_rows-1
};

// Next-token logits for a contiguous block of positions. Row t predicts the
// token at position t+1 of ctx (or the next generated token for t == |ctx|-1).
inline TapeRows policy_rows_tape(Graph& g, const ParamSet& params, const ModelConfig& cfg,
                                 std::span<const int> ctx, int first_row, int n_rows) {
    check_context(cfg, ctx.size());
    const int T = static_cast<int>(ctx.size());
    if (first_row < 0 || n_rows < 1 || first_row + n_rows > T) {
        throw std::invalid_argument("logit row range out of bounds");
    }
    for (int id : ctx) {
        if (id < 0 || id >= cfg.vocab_size) throw std::out_of_range("context token id out of range");
    }

    TapeRows out;
    out.leaves = params.attach_all(g);
    const auto& L = out.leaves;

    std::vector<int> ids(ctx.begin(), ctx.end());
    Tensor x = g.add(g.embed_rows(L[PolicyLayout::tok_embed], ids),
                     g.slice_rows(L[PolicyLayout::pos_embed], 0, T));

    // Additive causal mask; -1e30 drives masked attention weights to exactly 0.
    std::vector<double> maskv(static_cast<size_t>(T) * T, 0.0);
    for (int i = 0; i < T; ++i)
        for (int j = i + 1; j < T; ++j) maskv[static_cast<size_t>(i) * T + j] = -1e30;
    Tensor mask = g.constant({T, T}, std::move(maskv));
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));

    for (int l = 0; l < cfg.n_layers; ++l) {
        const int b = PolicyLayout::layer_base(l);
        Tensor h = g.rmsnorm_rows(x, L[b + 0], cfg.rms_eps);
        Tensor q = g.matmul(h, L[b + 1]);
        Tensor k = g.matmul(h, L[b + 2]);
        Tensor v = g.matmul(h, L[b + 3]);
        Tensor att = g.softmax_rows(g.add(g.mul_scalar(g.matmul(q, g.transpose(k)), scale), mask));
        x = g.add(x, g.matmul(g.matmul(att, v), L[b + 4]));
        Tensor h2 = g.rmsnorm_rows(x, L[b + 5], cfg.rms_eps);
        Tensor ff = g.max_scalar(g.matmul(h2, L[b + 6]), 0.0);
        x = g.add(x, g.matmul(ff, L[b + 7]));
    }
    Tensor xn = g.rmsnorm_rows(x, L[PolicyLayout::final_norm(cfg)], cfg.rms_eps);
    out.logits = g.matmul(g.slice_rows(xn, first_row, n_rows), L[PolicyLayout::out_proj(cfg)]);
    return out;
}

// Rank-1 next-token logits after (view, question, prefix), on the tape.
inline TapeRows forward_logits_tape(Graph& g, const ParamSet& params, const ModelConfig& cfg,
                                    const VisualContext& view, std::span<const int> question,
                                    std::span<const int> prefix) {
    std::vector<int> ctx = build_context(view, question, prefix);
    const int T = static_cast<int>(ctx.size());
    TapeRows rows = policy_rows_tape(g, params, cfg, ctx, T - 1, 1);
    rows.logits = g.reshape(rows.logits, {cfg.vocab_size});
    return rows;
}

// ---------------------------------------------------------------------------
// Incremental value-path forward.
//
// Holds per-layer key/value rows for the tokens seen so far, so generation
// costs O(T) per token instead of re-running the whole prefix. Every loop
// mirrors a tape kernel's accumulation order exactly (matmul_accum for all
// projections, the softmax_rows and rmsnorm_rows formulas verbatim), which
// makes the two paths bitwise-equal, not merely close.

class DecodeState {
public:
    DecodeState(const ParamSet& params, const ModelConfig& cfg) : cfg_(cfg) {
        if (static_cast<int>(params.size()) != PolicyLayout::count(cfg)) {
            throw std::invalid_argument("parameter set does not match architecture");
        }
        ptr_.reserve(params.size());
        for (const auto& e : params.entries()) ptr_.push_back(e.value.data());
        kcache_.resize(cfg.n_layers);
        vcache_.resize(cfg.n_layers);
        for (int l = 0; l < cfg.n_layers; ++l) {
            kcache_[l].reserve(static_cast<size_t>(cfg.max_ctx) * cfg.d_model);
            vcache_[l].reserve(static_cast<size_t>(cfg.max_ctx) * cfg.d_model);
        }
        x_.resize(cfg.d_model);
        h_.resize(cfg.d_model);
        q_.resize(cfg.d_model);
        ctx_.resize(cfg.d_model);
        proj_.resize(cfg.d_model);
        ff_.resize(cfg.d_ff);
        probs_.resize(cfg.max_ctx);
        logits_.resize(cfg.vocab_size);
    }

    int length() const { return t_; }

    void reset() {
        t_ = 0;
        for (auto& c : kcache_) c.clear();
        for (auto& c : vcache_) c.clear();
    }

    // Appends one token and returns the next-token logits. The reference
    // outlives the state and is overwritten by the next push.
    const std::vector<double>& push(int token) {
        if (t_ >= cfg_.max_ctx) {
            throw std::runtime_error("context overflow: " + std::to_string(t_ + 1) +
                                     " tokens exceed max context " + std::to_string(cfg_.max_ctx));
        }
        if (token < 0 || token >= cfg_.vocab_size) throw std::out_of_range("context token id out of range");
        const int d = cfg_.d_model;
        const double* te = ptr_[PolicyLayout::tok_embed] + static_cast<size_t>(token) * d;
        const double* pe = ptr_[PolicyLayout::pos_embed] + static_cast<size_t>(t_) * d;
        for (int j = 0; j < d; ++j) x_[j] = te[j] + pe[j];

        const double scale = 1.0 / std::sqrt(static_cast<double>(d));
        for (int l = 0; l < cfg_.n_layers; ++l) {
            const int b = PolicyLayout::layer_base(l);
            rmsnorm_row(x_.data(), ptr_[b + 0], h_.data(), d, cfg_.rms_eps);
            matvec(h_.data(), ptr_[b + 1], q_.data(), d, d);
            auto& kc = kcache_[l];
            auto& vc = vcache_[l];
            kc.resize(static_cast<size_t>(t_ + 1) * d);
            vc.resize(static_cast<size_t>(t_ + 1) * d);
            matvec(h_.data(), ptr_[b + 2], kc.data() + static_cast<size_t>(t_) * d, d, d);
            matvec(h_.data(), ptr_[b + 3], vc.data() + static_cast<size_t>(t_) * d, d, d);

            // Attention over positions 0..t_; identical to the masked softmax_rows row.
            for (int j = 0; j <= t_; ++j) {
                const double* krow = kc.data() + static_cast<size_t>(j) * d;
                double s = 0.0;
                for (int kk = 0; kk < d; ++kk) s += q_[kk] * krow[kk];
                probs_[j] = s * scale;
            }
            double mx = probs_[0];
            for (int j = 1; j <= t_; ++j) mx = std::max(mx, probs_[j]);
            double z = 0.0;
            for (int j = 0; j <= t_; ++j) {
                probs_[j] = std::exp(probs_[j] - mx);
                z += probs_[j];
            }
            for (int j = 0; j <= t_; ++j) probs_[j] /= z;
            matvec(probs_.data(), vc.data(), ctx_.data(), t_ + 1, d);
            matvec(ctx_.data(), ptr_[b + 4], proj_.data(), d, d);
            for (int j = 0; j < d; ++j) x_[j] = x_[j] + proj_[j];

            rmsnorm_row(x_.data(), ptr_[b + 5], h_.data(), d, cfg_.rms_eps);
            matvec(h_.data(), ptr_[b + 6], ff_.data(), d, cfg_.d_ff);
            for (int j = 0; j < cfg_.d_ff; ++j) ff_[j] = std::max(ff_[j], 0.0);
            matvec(ff_.data(), ptr_[b + 7], proj_.data(), cfg_.d_ff, d);
            for (int j = 0; j < d; ++j) x_[j] = x_[j] + proj_[j];
        }
        rmsnorm_row(x_.data(), ptr_[PolicyLayout::final_norm(cfg_)], h_.data(), d, cfg_.rms_eps);
        matvec(h_.data(), ptr_[PolicyLayout::out_proj(cfg_)], logits_.data(), d, cfg_.vocab_size);
        t_ += 1;
        return logits_;
    }

    const std::vector<double>& push_all(std::span<const int> tokens) {
        if (tokens.empty()) throw std::invalid_argument("empty context");
        for (int id : tokens) push(id);
        return logits_;
    }

private:
    static void rmsnorm_row(const double* in, const double* gain, double* out, int n, double eps) {
        double ms = 0.0;
        for (int j = 0; j < n; ++j) ms += in[j] * in[j];
        ms = ms / n + eps;
        double inv = 1.0 / std::sqrt(ms);
        for (int j = 0; j < n; ++j) out[j] = gain[j] * in[j] * inv;
    }
    static void matvec(const double* a, const double* B, double* out, int k, int n) {
        std::fill(out, out + n, 0.0);
        matmul_accum(a, B, out, 1, k, n);
    }

    ModelConfig cfg_;
    std::vector<const double*> ptr_;
    int t_ = 0;
    std::vector<std::vector<double>> kcache_, vcache_;
    std::vector<double> x_, h_, q_, ctx_, proj_, ff_, probs_, logits_;
};

// One-shot next-token logits through the value path.
inline std::vector<double> forward_logits(const ParamSet& params, const ModelConfig& cfg,
                                          const VisualContext& view, std::span<const int> question,
                                          std::span<const int> prefix) {
    std::vector<int> ctx = build_context(view, question, prefix);
    check_context(cfg, ctx.size());
    DecodeState ds(params, cfg);
    return ds.push_all(ctx);
}

// ---------------------------------------------------------------------------
// Sampling.

// Log-probability of `id` under softmax(logits / temperature). Temperature 0
// selects by argmax, so its recorded logprob uses the temperature-1
// distribution (the model's actual next-token distribution).
inline double log_prob_of(const std::vector<double>& logits, int id, double temperature) {
    const double t = temperature > 0.0 ? temperature : 1.0;
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : logits) z += std::exp((v - mx) / t);
    return (logits[static_cast<size_t>(id)] - mx) / t - std::log(z);
}

inline int argmax_ascending(const std::vector<double>& v) {
    int best = 0;
    for (int j = 1; j < static_cast<int>(v.size()); ++j) {
        if (v[j] > v[best]) best = j;
    }
    return best;
}

struct Rollout {
    std::vector<int> context_prefix;  // BOS + view + question conditioning
    std::vector<int> tokens;          // generated ids, EOS included when emitted
    std::vector<double> student_logprobs;
    std::string terminated_by;        // "eos" | "max_len"

    // Conditioning prefix y_<n> for generated position n: context plus the
    // first n generated tokens.
    std::vector<int> prefix_context(int n) const {
        if (n < 0 || n > static_cast<int>(tokens.size())) throw std::out_of_range("rollout position");
        std::vector<int> out = context_prefix;
        out.insert(out.end(), tokens.begin(), tokens.begin() + n);
        return out;
    }
};

inline Rollout sample_rollout(const ParamSet& params, const ModelConfig& cfg, const VisualContext& view,
                              std::span<const int> question, int max_len, double temperature, Rng& rng) {
    if (max_len < 1) throw std::invalid_argument("max_len must be >= 1");
    if (temperature < 0.0) throw std::invalid_argument("temperature must be >= 0");
    Rollout r;
    r.context_prefix = build_context(view, question, {});
    check_context(cfg, r.context_prefix.size() + static_cast<size_t>(max_len));

    DecodeState ds(params, cfg);
    const std::vector<double>* logits = &ds.push_all(r.context_prefix);
    r.terminated_by = "max_len";
    for (int n = 0; n < max_len; ++n) {
        int tok;
        if (temperature == 0.0) {
            tok = argmax_ascending(*logits);
        } else {
            std::vector<double> probs(logits->size());
            double mx = (*logits)[0];
            for (double v : *logits) mx = std::max(mx, v);
            double z = 0.0;
            for (size_t j = 0; j < probs.size(); ++j) {
                probs[j] = std::exp(((*logits)[j] - mx) / temperature);
                z += probs[j];
            }
            for (double& p : probs) p /= z;
            tok = static_cast<int>(rng.categorical(probs));
        }
        r.tokens.push_back(tok);
        r.student_logprobs.push_back(log_prob_of(*logits, tok, temperature));
        if (tok == Vocabulary::EOS) {
            r.terminated_by = "eos";
            break;
        }
        if (n + 1 < max_len) logits = &ds.push(tok);
    }
    return r;
}

// Re-scores an existing token sequence under the current parameters; mirrors
// sample_rollout's logprob arithmetic exactly.
inline std::vector<double> score_rollout(const ParamSet& params, const ModelConfig& cfg,
                                         const VisualContext& view, std::span<const int> question,
                                         std::span<const int> tokens, double temperature) {
    std::vector<int> ctx = build_context(view, question, {});
    check_context(cfg, ctx.size() + tokens.size());
    DecodeState ds(params, cfg);
    const std::vector<double>* logits = &ds.push_all(ctx);
    std::vector<double> out;
    out.reserve(tokens.size());
    for (size_t n = 0; n < tokens.size(); ++n) {
        out.push_back(log_prob_of(*logits, tokens[n], temperature));
        if (n + 1 < tokens.size()) logits = &ds.push(tokens[n]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Teacher strategies.

enum class TeacherStrategy { current_policy, initial_policy, trust_region, ema };

inline const char* teacher_strategy_name(TeacherStrategy s) {
    switch (s) {
        case TeacherStrategy::current_policy: return "current_policy";
        case TeacherStrategy::initial_policy: return "initial_policy";
        case TeacherStrategy::trust_region: return "trust_region";
        case TeacherStrategy::ema: return "ema";
    }
    throw std::logic_error("unreachable");
}

inline TeacherStrategy parse_teacher_strategy(const std::string& s) {
    if (s == "current_policy") return TeacherStrategy::current_policy;
    if (s == "initial_policy") return TeacherStrategy::initial_policy;
    if (s == "trust_region") return TeacherStrategy::trust_region;
    if (s == "ema") return TeacherStrategy::ema;
    throw std::invalid_argument("unknown teacher strategy: " + s);
}

struct ProbeItem {
    VisualContext view;
    std::vector<int> question;
    std::vector<int> prefix;
};

inline double param_l2_distance(const ParamSet& a, const ParamSet& b) {
    if (a.size() != b.size()) throw std::invalid_argument("parameter set size mismatch");
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const auto& ea = a.entries()[i];
        const auto& eb = b.entries()[i];
        if (ea.name != eb.name || ea.shape != eb.shape) {
            throw std::invalid_argument("parameter layout mismatch at " + ea.name);
        }
        for (size_t j = 0; j < ea.value.size(); ++j) {
            double d = ea.value[j] - eb.value[j];
            s += d * d;
        }
    }
    return std::sqrt(s);
}

class TeacherHandle {
public:
    static TeacherHandle make(TeacherStrategy strategy, const ParamSet& student, double alpha = 0.05,
                              double epsilon = 0.1) {
        TeacherHandle h;
        h.strategy_ = strategy;
        h.alpha_ = alpha;
        h.epsilon_ = epsilon;
        if (strategy != TeacherStrategy::current_policy) h.teacher_ = student;  // deep copy
        return h;
    }

    TeacherStrategy strategy() const { return strategy_; }
    double alpha() const { return alpha_; }
    double epsilon() const { return epsilon_; }

    // current_policy shares the student's parameter set; everything else owns a copy.
    const ParamSet& effective(const ParamSet& student) const {
        return strategy_ == TeacherStrategy::current_policy ? student : *teacher_;
    }

    const ParamSet* owned() const { return teacher_ ? &*teacher_ : nullptr; }

    void ema_update(const ParamSet& student) {
        if (strategy_ != TeacherStrategy::ema) throw std::logic_error("ema_update requires strategy ema");
        interpolate(student);
    }

    // Gate: mean next-token KL(teacher || student) over the probe batch must
    // not exceed epsilon for the interpolation to apply. Returns whether it did.
    bool trust_region_update(const ParamSet& student, const ModelConfig& cfg,
                             std::span<const ProbeItem> probe) {
        if (strategy_ != TeacherStrategy::trust_region) {
            throw std::logic_error("trust_region_update requires strategy trust_region");
        }
        if (probe.empty()) throw std::invalid_argument("empty probe batch");
        double total = 0.0;
        for (const ProbeItem& it : probe) {
            auto tl = forward_logits(*teacher_, cfg, it.view, it.question, it.prefix);
            auto sl = forward_logits(student, cfg, it.view, it.question, it.prefix);
            total += forward_kl(TokenDistribution::from_logits(tl), TokenDistribution::from_logits(sl));
        }
        const double mean_kl = total / static_cast<double>(probe.size());
        if (mean_kl <= epsilon_) {
            interpolate(student);
            return true;
        }
        return false;
    }

private:
    void interpolate(const ParamSet& student) {
        if (teacher_->size() != student.size()) throw std::invalid_argument("parameter set size mismatch");
        for (size_t i = 0; i < student.size(); ++i) {
            auto& te = teacher_->entries()[i];
            const auto& se = student.entries()[i];
            if (te.shape != se.shape) throw std::invalid_argument("parameter shape mismatch at " + te.name);
            for (size_t j = 0; j < te.value.size(); ++j) {
                te.value[j] = (1.0 - alpha_) * te.value[j] + alpha_ * se.value[j];
            }
        }
    }

    TeacherStrategy strategy_ = TeacherStrategy::current_policy;
    double alpha_ = 0.05;
    double epsilon_ = 0.1;
    std::optional<ParamSet> teacher_;
};

// Teacher's next-token distribution on the privileged view. Value-path only:
// the result carries no tape nodes, so it enters training graphs as a
// constant and no gradient can reach the teacher parameters.
inline TokenDistribution teacher_eval(const TeacherHandle& handle, const ParamSet& student_params,
                                      const ModelConfig& cfg, const VisualContext& crop_view,
                                      std::span<const int> question, std::span<const int> prefix) {
    const ParamSet& eff = handle.effective(student_params);
    return TokenDistribution::from_logits(forward_logits(eff, cfg, crop_view, question, prefix));
}

}  // namespace opdlab
