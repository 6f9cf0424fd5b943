// Token-level probability distributions and divergence objectives: forward KL,
// reverse KL, generalized JSD, and their top-K + tail-atom approximations.
//
// Two parallel implementations share the same formulas: plain-double functions
// for evaluation/probing, and Graph builders for training losses. The caller
// decides which side is differentiable by wrapping the other in stop_gradient.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "opdlab/tensor.hpp"

namespace opdlab {

// Floor applied to probabilities inside logs; keeps zero student mass at a
// teacher-supported token from producing infinities.
inline constexpr double kProbFloor = 1e-12;

struct TokenDistribution {
    int vocab_size = 0;
    std::vector<double> probs;
    std::vector<double> log_probs;  // ln(probs[i]) for positive entries, -inf sentinel at zeros

    static TokenDistribution from_probs(std::vector<double> p) {
        TokenDistribution d;
        d.vocab_size = static_cast<int>(p.size());
        d.log_probs.resize(p.size());
        for (size_t i = 0; i < p.size(); ++i) {
            d.log_probs[i] = p[i] > 0.0 ? std::log(p[i]) : -std::numeric_limits<double>::infinity();
        }
        d.probs = std::move(p);
        d.validate();
        return d;
    }

    static TokenDistribution from_logits(std::span<const double> logits) {
        if (logits.empty()) throw std::invalid_argument("empty logits");
        for (double v : logits)
            if (std::isnan(v)) throw std::invalid_argument("NaN logit");
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        std::vector<double> p(logits.size());
        double z = 0.0;
        for (size_t i = 0; i < logits.size(); ++i) {
            p[i] = std::exp(logits[i] - mx);
            z += p[i];
        }
        for (double& v : p) v /= z;
        return from_probs(std::move(p));
    }

    void validate() const {
        if (vocab_size <= 0 || probs.size() != static_cast<size_t>(vocab_size) ||
            log_probs.size() != probs.size()) {
            throw std::invalid_argument("malformed distribution");
        }
        double s = 0.0;
        for (double v : probs) {
            if (!(v >= 0.0)) throw std::invalid_argument("negative probability");
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("probabilities do not sum to 1");
    }
};

struct TopKDistribution {
    int K = 0;
    int vocab_size = 0;
    std::vector<int> indices;   // selector-probability descending, ties by ascending token id
    std::vector<double> probs;  // mass retained at indices
    double tail_mass = 0.0;     // remaining mass, lumped into one pseudo-atom
};

enum class DivKind { forward_kl, reverse_kl, jsd };

inline const char* div_kind_name(DivKind k) {
    switch (k) {
        case DivKind::forward_kl: return "forward_kl";
        case DivKind::reverse_kl: return "reverse_kl";
        case DivKind::jsd: return "jsd";
    }
    return "?";
}

inline DivKind parse_div_kind(const std::string& s) {
    if (s == "forward_kl") return DivKind::forward_kl;
    if (s == "reverse_kl") return DivKind::reverse_kl;
    if (s == "jsd") return DivKind::jsd;
    throw std::invalid_argument("unknown divergence kind: " + s);
}

struct DivergenceSpec {
    DivKind kind = DivKind::jsd;
    double beta = 0.5;         // jsd mixture weight
    std::optional<int> topk;   // unset -> full vocabulary

    void validate() const {
        if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("beta outside [0,1]");
        if (topk && *topk < 1) throw std::invalid_argument("topk must be >= 1");
    }
};

// ---- plain-double divergences ----

namespace detail {

// sum_i p[i] * (ln p[i] - ln q[i]) with the floor inside both logs.
inline double kl_atoms(std::span<const double> p, std::span<const double> q) {
    double acc = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        acc += p[i] * (std::log(std::max(p[i], kProbFloor)) - std::log(std::max(q[i], kProbFloor)));
    }
    return acc;
}

// True values are >= 0; tiny negatives are pure rounding.
inline double clamp0(double v) { return v < 0.0 ? 0.0 : v; }

inline double divergence_atoms(std::span<const double> pt, std::span<const double> ps, DivKind kind,
                               double beta) {
    switch (kind) {
        case DivKind::forward_kl: return clamp0(kl_atoms(pt, ps));
        case DivKind::reverse_kl: return clamp0(kl_atoms(ps, pt));
        case DivKind::jsd: {
            std::vector<double> m(pt.size());
            for (size_t i = 0; i < m.size(); ++i) m[i] = beta * pt[i] + (1.0 - beta) * ps[i];
            return clamp0(beta * kl_atoms(pt, m) + (1.0 - beta) * kl_atoms(ps, m));
        }
    }
    throw std::logic_error("bad divergence kind");
}

inline void require_same_vocab(const TokenDistribution& a, const TokenDistribution& b) {
    if (a.vocab_size != b.vocab_size) throw std::invalid_argument("vocab size mismatch");
}

}  // namespace detail

inline double forward_kl(const TokenDistribution& p_t, const TokenDistribution& p_s) {
    detail::require_same_vocab(p_t, p_s);
    return detail::divergence_atoms(p_t.probs, p_s.probs, DivKind::forward_kl, 0.0);
}

inline double reverse_kl(const TokenDistribution& p_t, const TokenDistribution& p_s) {
    detail::require_same_vocab(p_t, p_s);
    return detail::divergence_atoms(p_t.probs, p_s.probs, DivKind::reverse_kl, 0.0);
}

inline double jsd(const TokenDistribution& p_t, const TokenDistribution& p_s, double beta) {
    detail::require_same_vocab(p_t, p_s);
    if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("beta outside [0,1]");
    return detail::divergence_atoms(p_t.probs, p_s.probs, DivKind::jsd, beta);
}

// Token ids ordered by value descending, ties by ascending id; first K returned.
inline std::vector<int> topk_indices(std::span<const double> values, int K) {
    if (K < 1 || K > static_cast<int>(values.size())) throw std::invalid_argument("K out of range");
    std::vector<int> ids(values.size());
    std::iota(ids.begin(), ids.end(), 0);
    std::partial_sort(ids.begin(), ids.begin() + K, ids.end(), [&](int a, int b) {
        if (values[a] != values[b]) return values[a] > values[b];
        return a < b;
    });
    ids.resize(K);
    return ids;
}

// Both truncations use the selector's top-K ids (the student, per the training
// objective); returned in argument order (selector first).
inline std::pair<TopKDistribution, TopKDistribution> truncate_topk(const TokenDistribution& selector,
                                                                   const TokenDistribution& other, int K) {
    detail::require_same_vocab(selector, other);
    if (K > selector.vocab_size) throw std::invalid_argument("K exceeds vocab size");
    std::vector<int> ids = topk_indices(selector.probs, K);
    auto build = [&](const TokenDistribution& d) {
        TopKDistribution t;
        t.K = K;
        t.vocab_size = d.vocab_size;
        t.indices = ids;
        t.probs.reserve(K);
        double kept = 0.0;
        for (int id : ids) {
            t.probs.push_back(d.probs[id]);
            kept += d.probs[id];
        }
        t.tail_mass = std::max(0.0, 1.0 - kept);
        return t;
    };
    return {build(selector), build(other)};
}

// Divergence between two truncations as (K+1)-atom distributions: the K
// retained atoms plus the tail masses matched to each other.
inline double divergence_topk(const TopKDistribution& p_t, const TopKDistribution& p_s,
                              const DivergenceSpec& spec) {
    spec.validate();
    if (p_t.indices != p_s.indices) throw std::invalid_argument("top-K index lists differ");
    std::vector<double> at(p_t.probs);
    std::vector<double> as(p_s.probs);
    at.push_back(p_t.tail_mass);
    as.push_back(p_s.tail_mass);
    return detail::divergence_atoms(at, as, spec.kind, spec.beta);
}

// Full-vocabulary or truncated divergence as requested by the spec; K is
// clamped to the vocabulary, so the small-vocab default degenerates to exact.
inline double divergence(const TokenDistribution& p_t, const TokenDistribution& p_s,
                         const DivergenceSpec& spec) {
    spec.validate();
    detail::require_same_vocab(p_t, p_s);
    if (!spec.topk) return detail::divergence_atoms(p_t.probs, p_s.probs, spec.kind, spec.beta);
    int k = std::min(*spec.topk, p_s.vocab_size);
    auto [ts, tt] = truncate_topk(p_s, p_t, k);
    return divergence_topk(tt, ts, spec);
}

// Mean per-position divergence along a rollout.
inline double sequence_divergence(std::span<const TokenDistribution> teacher,
                                  std::span<const TokenDistribution> student,
                                  const DivergenceSpec& spec) {
    if (teacher.empty()) throw std::invalid_argument("empty sequence");
    if (teacher.size() != student.size()) throw std::invalid_argument("sequence length mismatch");
    double acc = 0.0;
    for (size_t n = 0; n < teacher.size(); ++n) acc += divergence(teacher[n], student[n], spec);
    return acc / static_cast<double>(teacher.size());
}

// ---- differentiable builders ----

namespace detail {

inline Tensor kl_node(Graph& g, const Tensor& p, const Tensor& q) {
    Tensor lp = g.log(g.max_scalar(p, kProbFloor));
    Tensor lq = g.log(g.max_scalar(q, kProbFloor));
    return g.sum(g.mul(p, g.sub(lp, lq)));
}

inline Tensor divergence_atoms_node(Graph& g, const Tensor& pt, const Tensor& ps, DivKind kind,
                                    double beta) {
    switch (kind) {
        case DivKind::forward_kl: return kl_node(g, pt, ps);
        case DivKind::reverse_kl: return kl_node(g, ps, pt);
        case DivKind::jsd: {
            Tensor m = g.add(g.mul_scalar(pt, beta), g.mul_scalar(ps, 1.0 - beta));
            return g.add(g.mul_scalar(kl_node(g, pt, m), beta),
                         g.mul_scalar(kl_node(g, ps, m), 1.0 - beta));
        }
    }
    throw std::logic_error("bad divergence kind");
}

}  // namespace detail

// Per-token divergence between rank-1 probability tensors. The teacher side is
// expected to sit behind stop_gradient; top-K indices, when requested, are
// selected from the student's current values. The tail atom is a function of
// the retained student mass and is differentiated through.
inline Tensor divergence_node(Graph& g, const Tensor& teacher_probs, const Tensor& student_probs,
                              const DivergenceSpec& spec) {
    spec.validate();
    if (teacher_probs.rank() != 1 || student_probs.rank() != 1 ||
        teacher_probs.shape() != student_probs.shape()) {
        throw std::invalid_argument("divergence_node requires matching rank-1 probability tensors");
    }
    int vocab = teacher_probs.shape()[0];
    if (!spec.topk) {
        return detail::divergence_atoms_node(g, teacher_probs, student_probs, spec.kind, spec.beta);
    }
    int k = std::min(*spec.topk, vocab);
    std::vector<int> ids = topk_indices(student_probs.data(), k);
    auto atoms = [&](const Tensor& p) {
        Tensor kept = g.gather1d(p, ids);
        Tensor tail = g.max_scalar(g.rsub_scalar(1.0, g.sum(kept)), 0.0);
        return g.concat1d(kept, g.reshape(tail, {1}));
    };
    Tensor at = atoms(teacher_probs);
    Tensor as = atoms(student_probs);
    return detail::divergence_atoms_node(g, at, as, spec.kind, spec.beta);
}

// Mean over positions of per-token divergences already built on the graph.
inline Tensor mean_of_scalars(Graph& g, const std::vector<Tensor>& terms) {
    if (terms.empty()) throw std::invalid_argument("empty term list");
    Tensor acc = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) acc = g.add(acc, terms[i]);
    return g.mul_scalar(acc, 1.0 / static_cast<double>(terms.size()));
}

}  // namespace opdlab
