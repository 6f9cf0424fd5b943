// Named parameter store and first-order optimizers.
//
// Parameters live outside any graph as mutable buffers in declaration order;
// each forward pass attaches them as leaves. Optimizer state is keyed by
// parameter name so it survives across rebuilt graphs.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "opdlab/tensor.hpp"

namespace opdlab {

struct ParamEntry {
    std::string name;
    Shape shape;
    std::vector<double> value;
};

class ParamSet {
public:
    // Declaration order is the canonical order for checkpoints and updates.
    ParamEntry& declare(const std::string& name, Shape shape) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        index_[name] = entries_.size();
        entries_.push_back(ParamEntry{name, shape, std::vector<double>(shape_numel(shape), 0.0)});
        return entries_.back();
    }

    ParamEntry& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
        return entries_[it->second];
    }

    const ParamEntry& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
        return entries_[it->second];
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<ParamEntry>& entries() { return entries_; }
    const std::vector<ParamEntry>& entries() const { return entries_; }
    size_t size() const { return entries_.size(); }

    size_t total_scalars() const {
        size_t n = 0;
        for (const auto& e : entries_) n += e.value.size();
        return n;
    }

    // Attach every parameter as a graph leaf; returned tensors share order with entries().
    std::vector<Tensor> attach_all(Graph& g) const {
        std::vector<Tensor> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(g.param(Tensor(e.shape, e.value)));
        return out;
    }

private:
    std::vector<ParamEntry> entries_;
    std::map<std::string, size_t> index_;
};

// Gradient accumulator aligned with a ParamSet's declaration order.
class GradAccum {
public:
    explicit GradAccum(const ParamSet& params) {
        bufs_.reserve(params.size());
        for (const auto& e : params.entries()) bufs_.emplace_back(e.value.size(), 0.0);
    }

    void add(size_t param_index, const Tensor& grad, double scale) {
        auto& buf = bufs_.at(param_index);
        auto g = grad.data();
        if (g.size() != buf.size()) throw std::invalid_argument("gradient size mismatch");
        for (size_t i = 0; i < buf.size(); ++i) buf[i] += scale * g[i];
    }

    const std::vector<double>& buf(size_t param_index) const { return bufs_.at(param_index); }
    std::vector<std::vector<double>>& bufs() { return bufs_; }
    const std::vector<std::vector<double>>& bufs() const { return bufs_; }

    double l2_norm() const {
        double s = 0.0;
        for (const auto& b : bufs_)
            for (double v : b) s += v * v;
        return std::sqrt(s);
    }

    bool all_zero() const {
        for (const auto& b : bufs_)
            for (double v : b)
                if (v != 0.0) return false;
        return true;
    }

private:
    std::vector<std::vector<double>> bufs_;
};

struct OptimConfig {
    std::string algo = "adam";  // "sgd" or "adam"
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// SGD or bias-corrected Adam. Moment buffers are keyed by parameter name, so
// the same optimizer instance follows a ParamSet across training phases.
class Optimizer {
public:
    explicit Optimizer(OptimConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.algo != "sgd" && cfg_.algo != "adam") {
            throw std::invalid_argument("unknown optimizer: " + cfg_.algo);
        }
    }

    const OptimConfig& config() const { return cfg_; }
    int64_t steps_taken() const { return step_; }

    // Scheduler hook; moment buffers are unaffected.
    void set_lr(double lr) { cfg_.lr = lr; }

    void step(ParamSet& params, const GradAccum& grads) {
        if (grads.bufs().size() != params.size()) throw std::invalid_argument("grad/param count mismatch");
        for (const auto& buf : grads.bufs())
            for (double v : buf)
                if (!std::isfinite(v)) throw std::runtime_error("non-finite gradient in optimizer step");
        step_ += 1;
        for (size_t pi = 0; pi < params.size(); ++pi) {
            ParamEntry& e = params.entries()[pi];
            const std::vector<double>& g = grads.buf(pi);
            if (cfg_.algo == "sgd") {
                for (size_t i = 0; i < e.value.size(); ++i) e.value[i] -= cfg_.lr * g[i];
                continue;
            }
            Moments& mom = moments_[e.name];
            if (mom.m.empty()) {
                mom.m.assign(e.value.size(), 0.0);
                mom.v.assign(e.value.size(), 0.0);
            }
            mom.t += 1;
            double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(mom.t));
            double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(mom.t));
            for (size_t i = 0; i < e.value.size(); ++i) {
                mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * g[i];
                mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                double mh = mom.m[i] / bc1;
                double vh = mom.v[i] / bc2;
                e.value[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
            }
        }
    }

private:
    struct Moments {
        std::vector<double> m, v;
        int64_t t = 0;
    };
    OptimConfig cfg_;
    std::map<std::string, Moments> moments_;
    int64_t step_ = 0;
};

}  // namespace opdlab
