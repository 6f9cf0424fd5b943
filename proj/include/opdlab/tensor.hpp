// Dense f64 arrays with a dynamic reverse-mode tape.
//
// A Graph is rebuilt for every forward pass; ops append nodes and backward
// walks them once in reverse creation order. Tensors are immutable views onto
// node outputs (or detached constants), so replaying the same op sequence on
// the same inputs is bitwise reproducible.
//
// Only scalar-with-tensor broadcasting is supported; same-shape elementwise
// ops require exact shape equality.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace opdlab {

// NaN/Inf guards after every public op. Default on; OPDLAB_DEBUG_CHECKS=0 disables.
inline bool& debug_checks_flag() {
    static bool flag = [] {
        const char* env = std::getenv("OPDLAB_DEBUG_CHECKS");
        if (env != nullptr && env[0] == '0' && env[1] == '\0') return false;
        return true;
    }();
    return flag;
}

inline bool debug_checks_enabled() { return debug_checks_flag(); }
inline void set_debug_checks(bool on) { debug_checks_flag() = on; }

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int e : s) {
        if (e < 0) throw std::invalid_argument("negative extent in shape");
        n *= static_cast<size_t>(e);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

class Graph;

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)),
          data_(std::make_shared<const std::vector<double>>(std::move(data))) {
        if (shape_numel(shape_) != data_->size()) {
            throw std::invalid_argument("tensor data length does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(double v) { return Tensor({}, {v}); }

    static Tensor zeros(Shape shape) {
        size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0));
    }

    static Tensor full(Shape shape, double v) {
        size_t n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v));
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    size_t numel() const { return data_ ? data_->size() : 0; }

    std::span<const double> data() const& {
        static const std::vector<double> empty;
        return data_ ? std::span<const double>(*data_) : std::span<const double>(empty);
    }
    // Spans must not outlive their tensor; calling data() on a temporary dangles.
    std::span<const double> data() const&& = delete;

    double item() const {
        if (numel() != 1) throw std::invalid_argument("item() requires a single-element tensor");
        return (*data_)[0];
    }

    double at(size_t i) const { return (*data_)[i]; }

    // Node handle in the owning graph; -1 for detached constants.
    int node() const { return node_; }
    const Graph* graph() const { return graph_; }

private:
    Shape shape_;
    std::shared_ptr<const std::vector<double>> data_;
    int node_ = -1;
    const Graph* graph_ = nullptr;
    friend class Graph;
};

inline void check_finite(const Tensor& t, const char* what) {
    if (!debug_checks_enabled()) return;
    for (double v : t.data()) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(std::string("non-finite value produced by ") + what);
        }
    }
}

// out[i,j] += sum_k a[i,k] * b[k,j]; accumulation over k is ascending so the
// incremental decode path can reproduce results bitwise.
inline void matmul_accum(const double* a, const double* b, double* out, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* orow = out + static_cast<size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            const double* brow = b + static_cast<size_t>(kk) * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
}

enum class Op : uint8_t {
    leaf,
    matmul,
    transpose,
    add,
    sub,
    mul,
    add_scalar,
    sub_scalar,   // a - s
    rsub_scalar,  // s - a
    mul_scalar,
    exp_op,
    log_op,
    max_scalar,
    sum_all,
    sum_axis,
    mean_all,
    mean_axis,
    max_all,
    max_axis,
    stop_gradient,
    softmax_rows,
    rmsnorm_rows,
    embed_rows,
    slice_rows,
    gather_rowwise,
    gather1d,
    concat1d,
    reshape,
};

class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    size_t num_nodes() const { return nodes_.size(); }

    // ---- leaves ----

    Tensor constant(Tensor t) { return attach(std::move(t)); }

    Tensor constant(Shape shape, std::vector<double> data) {
        return attach(Tensor(std::move(shape), std::move(data)));
    }

    // Same mechanics as constant; named so call sites show which leaves are trainable.
    Tensor param(Tensor t) { return attach(std::move(t)); }

    // ---- elementwise ----

    Tensor add(const Tensor& a, const Tensor& b) { return binary(Op::add, a, b, "add"); }
    Tensor sub(const Tensor& a, const Tensor& b) { return binary(Op::sub, a, b, "sub"); }
    Tensor mul(const Tensor& a, const Tensor& b) { return binary(Op::mul, a, b, "mul"); }

    Tensor add_scalar(const Tensor& a, double s) { return unary_scalar(Op::add_scalar, a, s, "add_scalar"); }
    Tensor sub_scalar(const Tensor& a, double s) { return unary_scalar(Op::sub_scalar, a, s, "sub_scalar"); }
    Tensor rsub_scalar(double s, const Tensor& a) { return unary_scalar(Op::rsub_scalar, a, s, "rsub_scalar"); }
    Tensor mul_scalar(const Tensor& a, double s) { return unary_scalar(Op::mul_scalar, a, s, "mul_scalar"); }

    Tensor exp(const Tensor& a) {
        const Tensor& ar = need(a);
        std::vector<double> out(ar.data().begin(), ar.data().end());
        for (double& v : out) v = std::exp(v);
        return emit(Op::exp_op, ar.node(), -1, Tensor(ar.shape(), std::move(out)), {}, "exp");
    }

    Tensor log(const Tensor& a) {
        const Tensor& ar = need(a);
        std::vector<double> out(ar.data().begin(), ar.data().end());
        for (double& v : out) {
            if (v <= 0.0) throw std::domain_error("log of non-positive value");
            v = std::log(v);
        }
        return emit(Op::log_op, ar.node(), -1, Tensor(ar.shape(), std::move(out)), {}, "log");
    }

    Tensor max_scalar(const Tensor& a, double s) {
        const Tensor& ar = need(a);
        std::vector<double> out(ar.data().begin(), ar.data().end());
        for (double& v : out) v = std::max(v, s);
        Aux aux;
        aux.scalar = s;
        return emit(Op::max_scalar, ar.node(), -1, Tensor(ar.shape(), std::move(out)), aux, "max_scalar");
    }

    // ---- linear algebra ----

    Tensor matmul(const Tensor& a, const Tensor& b) {
        const Tensor& ar = need(a);
        const Tensor& br = need(b);
        if (ar.rank() != 2 || br.rank() != 2) throw std::invalid_argument("matmul requires rank-2 tensors");
        int m = ar.shape()[0], k = ar.shape()[1], k2 = br.shape()[0], n = br.shape()[1];
        if (k != k2) {
            throw std::invalid_argument("matmul inner extents disagree: " + shape_str(ar.shape()) + " x " +
                                        shape_str(br.shape()));
        }
        std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
        matmul_accum(ar.data().data(), br.data().data(), out.data(), m, k, n);
        return emit(Op::matmul, ar.node(), br.node(), Tensor({m, n}, std::move(out)), {}, "matmul");
    }

    Tensor transpose(const Tensor& a) {
        const Tensor& ar = need(a);
        if (ar.rank() != 2) throw std::invalid_argument("transpose requires a rank-2 tensor");
        int m = ar.shape()[0], n = ar.shape()[1];
        std::vector<double> out(static_cast<size_t>(m) * n);
        auto src = ar.data();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out[static_cast<size_t>(j) * m + i] = src[static_cast<size_t>(i) * n + j];
        return emit(Op::transpose, ar.node(), -1, Tensor({n, m}, std::move(out)), {}, "transpose");
    }

    // ---- reductions ----

    Tensor sum(const Tensor& a) { return reduce_all(Op::sum_all, a); }
    Tensor mean(const Tensor& a) { return reduce_all(Op::mean_all, a); }
    Tensor max(const Tensor& a) { return reduce_all(Op::max_all, a); }

    Tensor sum(const Tensor& a, int axis) { return reduce_axis(Op::sum_axis, a, axis); }
    Tensor mean(const Tensor& a, int axis) { return reduce_axis(Op::mean_axis, a, axis); }
    Tensor max(const Tensor& a, int axis) { return reduce_axis(Op::max_axis, a, axis); }

    // ---- gradient control ----

    // Forward value is byte-identical to the input (shared storage); backward
    // treats the boundary as a constant.
    Tensor stop_gradient(const Tensor& a) {
        const Tensor& ar = need(a);
        return emit(Op::stop_gradient, ar.node(), -1, Tensor(ar), {}, "stop_gradient");
    }

    // ---- fused neural-net ops ----

    // Max-subtracted softmax over the last axis of a rank-1 or rank-2 tensor.
    Tensor softmax_rows(const Tensor& a) {
        const Tensor& ar = need(a);
        if (ar.rank() != 1 && ar.rank() != 2) throw std::invalid_argument("softmax_rows requires rank 1 or 2");
        int rows = ar.rank() == 2 ? ar.shape()[0] : 1;
        int cols = ar.rank() == 2 ? ar.shape()[1] : ar.shape()[0];
        if (cols == 0) throw std::invalid_argument("softmax_rows on empty row");
        std::vector<double> out(ar.data().begin(), ar.data().end());
        for (int i = 0; i < rows; ++i) {
            double* row = out.data() + static_cast<size_t>(i) * cols;
            double mx = row[0];
            for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (int j = 0; j < cols; ++j) {
                row[j] = std::exp(row[j] - mx);
                z += row[j];
            }
            for (int j = 0; j < cols; ++j) row[j] /= z;
        }
        return emit(Op::softmax_rows, ar.node(), -1, Tensor(ar.shape(), std::move(out)), {}, "softmax_rows");
    }

    // y[i,j] = gain[j] * x[i,j] / sqrt(mean_j(x[i,j]^2) + eps)
    Tensor rmsnorm_rows(const Tensor& x, const Tensor& gain, double eps = 1e-5) {
        const Tensor& xr = need(x);
        const Tensor& gr = need(gain);
        if (xr.rank() != 2 || gr.rank() != 1 || gr.shape()[0] != xr.shape()[1]) {
            throw std::invalid_argument("rmsnorm_rows shape mismatch");
        }
        int rows = xr.shape()[0], cols = xr.shape()[1];
        std::vector<double> out(static_cast<size_t>(rows) * cols);
        auto xd = xr.data();
        auto gd = gr.data();
        for (int i = 0; i < rows; ++i) {
            const double* in = xd.data() + static_cast<size_t>(i) * cols;
            double* o = out.data() + static_cast<size_t>(i) * cols;
            double ms = 0.0;
            for (int j = 0; j < cols; ++j) ms += in[j] * in[j];
            ms = ms / cols + eps;
            double inv = 1.0 / std::sqrt(ms);
            for (int j = 0; j < cols; ++j) o[j] = gd[j] * in[j] * inv;
        }
        Aux aux;
        aux.scalar = eps;
        return emit(Op::rmsnorm_rows, xr.node(), gr.node(), Tensor(xr.shape(), std::move(out)), aux,
                    "rmsnorm_rows");
    }

    // out[t,:] = table[ids[t],:]
    Tensor embed_rows(const Tensor& table, const std::vector<int>& ids) {
        const Tensor& tr = need(table);
        if (tr.rank() != 2) throw std::invalid_argument("embed_rows requires a rank-2 table");
        int v = tr.shape()[0], d = tr.shape()[1];
        std::vector<double> out(ids.size() * static_cast<size_t>(d));
        auto td = tr.data();
        for (size_t t = 0; t < ids.size(); ++t) {
            if (ids[t] < 0 || ids[t] >= v) throw std::out_of_range("embed_rows id out of range");
            std::copy_n(td.data() + static_cast<size_t>(ids[t]) * d, d, out.data() + t * d);
        }
        Aux aux;
        aux.ids = ids;
        return emit(Op::embed_rows, tr.node(), -1, Tensor({static_cast<int>(ids.size()), d}, std::move(out)), aux,
                    "embed_rows");
    }

    Tensor slice_rows(const Tensor& a, int start, int count) {
        const Tensor& ar = need(a);
        if (ar.rank() != 2) throw std::invalid_argument("slice_rows requires rank-2");
        int m = ar.shape()[0], n = ar.shape()[1];
        if (start < 0 || count < 0 || start + count > m) throw std::out_of_range("slice_rows range");
        std::vector<double> out(static_cast<size_t>(count) * n);
        std::copy_n(ar.data().data() + static_cast<size_t>(start) * n, out.size(), out.data());
        Aux aux;
        aux.i0 = start;
        aux.i1 = count;
        return emit(Op::slice_rows, ar.node(), -1, Tensor({count, n}, std::move(out)), aux, "slice_rows");
    }

    // out[i] = a[i, ids[i]]
    Tensor gather_rowwise(const Tensor& a, const std::vector<int>& ids) {
        const Tensor& ar = need(a);
        if (ar.rank() != 2) throw std::invalid_argument("gather_rowwise requires rank-2");
        int m = ar.shape()[0], n = ar.shape()[1];
        if (static_cast<int>(ids.size()) != m) throw std::invalid_argument("gather_rowwise id count mismatch");
        std::vector<double> out(ids.size());
        auto ad = ar.data();
        for (int i = 0; i < m; ++i) {
            if (ids[i] < 0 || ids[i] >= n) throw std::out_of_range("gather_rowwise id out of range");
            out[i] = ad[static_cast<size_t>(i) * n + ids[i]];
        }
        Aux aux;
        aux.ids = ids;
        return emit(Op::gather_rowwise, ar.node(), -1, Tensor({m}, std::move(out)), aux, "gather_rowwise");
    }

    // out[k] = a[ids[k]]; duplicate ids accumulate adjoints.
    Tensor gather1d(const Tensor& a, const std::vector<int>& ids) {
        const Tensor& ar = need(a);
        if (ar.rank() != 1) throw std::invalid_argument("gather1d requires rank-1");
        int n = ar.shape()[0];
        std::vector<double> out(ids.size());
        auto ad = ar.data();
        for (size_t k = 0; k < ids.size(); ++k) {
            if (ids[k] < 0 || ids[k] >= n) throw std::out_of_range("gather1d id out of range");
            out[k] = ad[ids[k]];
        }
        Aux aux;
        aux.ids = ids;
        return emit(Op::gather1d, ar.node(), -1, Tensor({static_cast<int>(ids.size())}, std::move(out)), aux,
                    "gather1d");
    }

    Tensor concat1d(const Tensor& a, const Tensor& b) {
        const Tensor& ar = need(a);
        const Tensor& br = need(b);
        if (ar.rank() != 1 || br.rank() != 1) throw std::invalid_argument("concat1d requires rank-1");
        std::vector<double> out;
        out.reserve(ar.numel() + br.numel());
        out.insert(out.end(), ar.data().begin(), ar.data().end());
        out.insert(out.end(), br.data().begin(), br.data().end());
        const int n = static_cast<int>(out.size());
        return emit(Op::concat1d, ar.node(), br.node(), Tensor({n}, std::move(out)), {}, "concat1d");
    }

    Tensor reshape(const Tensor& a, Shape shape) {
        const Tensor& ar = need(a);
        if (shape_numel(shape) != ar.numel()) throw std::invalid_argument("reshape element count mismatch");
        std::vector<double> out(ar.data().begin(), ar.data().end());
        return emit(Op::reshape, ar.node(), -1, Tensor(std::move(shape), std::move(out)), {}, "reshape");
    }

    // ---- backward ----

    // Populates the gradient map from a scalar loss. Visits each node exactly
    // once, in reverse creation order; parameters not reachable from the loss
    // simply keep no entry and read back as zeros.
    void backward(const Tensor& loss) {
        if (loss.graph_ != this || loss.node_ < 0) throw std::invalid_argument("loss is not part of this graph");
        if (loss.numel() != 1) throw std::invalid_argument("backward requires a scalar loss");
        grads_.assign(nodes_.size(), {});
        grads_[loss.node_] = {1.0};
        for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
            if (grads_[id].empty()) continue;
            backprop_node(id);
        }
    }

    bool has_grad(const Tensor& t) const {
        return t.node_ >= 0 && t.node_ < static_cast<int>(grads_.size()) && !grads_[t.node_].empty();
    }

    // Gradient for a node's output; zeros when the loss did not reach it.
    Tensor grad(const Tensor& t) const {
        if (t.graph_ != this || t.node_ < 0) throw std::invalid_argument("tensor is not part of this graph");
        if (!has_grad(t)) return Tensor::zeros(t.shape());
        return Tensor(t.shape(), grads_[t.node_]);
    }

private:
    struct Aux {
        double scalar = 0.0;
        int axis = -1;
        int i0 = 0, i1 = 0;
        std::vector<int> ids;
    };

    struct Node {
        Op op;
        int in0 = -1, in1 = -1;
        Tensor out;
        Aux aux;
    };

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;

    Tensor attach(Tensor t) {
        check_finite(t, "leaf");
        return emit(Op::leaf, -1, -1, std::move(t), {}, nullptr);
    }

    // Constants may arrive detached; attach them on first use.
    Tensor need(const Tensor& t) {
        if (t.node_ >= 0) {
            if (t.graph_ != this) throw std::invalid_argument("tensor belongs to a different graph");
            return t;
        }
        Tensor c = t;
        c.graph_ = nullptr;
        return attach(std::move(c));
    }

    Tensor emit(Op op, int in0, int in1, Tensor out, Aux aux, const char* what) {
        out.node_ = static_cast<int>(nodes_.size());
        out.graph_ = this;
        if (what != nullptr) check_finite(out, what);
        nodes_.push_back(Node{op, in0, in1, out, std::move(aux)});
        return out;
    }

    Tensor binary(Op op, const Tensor& a, const Tensor& b, const char* what) {
        const Tensor& ar = need(a);
        const Tensor& br = need(b);
        if (ar.shape() != br.shape()) {
            throw std::invalid_argument(std::string(what) + " shape mismatch: " + shape_str(ar.shape()) +
                                        " vs " + shape_str(br.shape()));
        }
        std::vector<double> out(ar.data().begin(), ar.data().end());
        auto bd = br.data();
        switch (op) {
            case Op::add:
                for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
                break;
            case Op::sub:
                for (size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
                break;
            case Op::mul:
                for (size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
                break;
            default:
                throw std::logic_error("bad binary op");
        }
        return emit(op, ar.node(), br.node(), Tensor(ar.shape(), std::move(out)), {}, what);
    }

    Tensor unary_scalar(Op op, const Tensor& a, double s, const char* what) {
        const Tensor& ar = need(a);
        std::vector<double> out(ar.data().begin(), ar.data().end());
        switch (op) {
            case Op::add_scalar:
                for (double& v : out) v += s;
                break;
            case Op::sub_scalar:
                for (double& v : out) v -= s;
                break;
            case Op::rsub_scalar:
                for (double& v : out) v = s - v;
                break;
            case Op::mul_scalar:
                for (double& v : out) v *= s;
                break;
            default:
                throw std::logic_error("bad scalar op");
        }
        Aux aux;
        aux.scalar = s;
        return emit(op, ar.node(), -1, Tensor(ar.shape(), std::move(out)), aux, what);
    }

    Tensor reduce_all(Op op, const Tensor& a) {
        const Tensor& ar = need(a);
        if (ar.numel() == 0 && op != Op::sum_all) throw std::invalid_argument("reduction over empty tensor");
        auto d = ar.data();
        double r;
        if (op == Op::max_all) {
            r = d[0];
            for (size_t i = 1; i < d.size(); ++i) r = std::max(r, d[i]);
        } else {
            r = 0.0;
            for (double v : d) r += v;
            if (op == Op::mean_all) r /= static_cast<double>(d.size());
        }
        return emit(op, ar.node(), -1, Tensor::scalar(r), {}, "reduce");
    }

    Tensor reduce_axis(Op op, const Tensor& a, int axis) {
        const Tensor& ar = need(a);
        if (axis < 0 || axis >= ar.rank()) throw std::invalid_argument("reduction axis out of range");
        int extent = ar.shape()[axis];
        if (extent == 0 && op != Op::sum_axis) throw std::invalid_argument("reduction over axis of extent 0");
        size_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(ar.shape()[i]);
        for (int i = axis + 1; i < ar.rank(); ++i) inner *= static_cast<size_t>(ar.shape()[i]);
        Shape oshape;
        for (int i = 0; i < ar.rank(); ++i)
            if (i != axis) oshape.push_back(ar.shape()[i]);
        std::vector<double> out(outer * inner, 0.0);
        auto d = ar.data();
        for (size_t o = 0; o < outer; ++o) {
            for (size_t in = 0; in < inner; ++in) {
                double r = (op == Op::max_axis) ? d[o * extent * inner + in] : 0.0;
                for (int e = (op == Op::max_axis) ? 1 : 0; e < extent; ++e) {
                    double v = d[(o * extent + e) * inner + in];
                    r = (op == Op::max_axis) ? std::max(r, v) : r + v;
                }
                if (op == Op::mean_axis) r /= extent;
                out[o * inner + in] = r;
            }
        }
        Aux aux;
        aux.axis = axis;
        return emit(op, ar.node(), -1, Tensor(std::move(oshape), std::move(out)), aux, "reduce");
    }

    std::vector<double>& grad_buf(int id) {
        if (grads_[id].empty()) grads_[id].assign(nodes_[id].out.numel(), 0.0);
        return grads_[id];
    }

    void backprop_node(int id) {
        const Node& node = nodes_[id];
        const std::vector<double>& g = grads_[id];
        auto in_val = [&](int which) -> std::span<const double> {
            return nodes_[which == 0 ? node.in0 : node.in1].out.data();
        };
        switch (node.op) {
            case Op::leaf:
            case Op::stop_gradient:
                return;
            case Op::add: {
                auto& ga = grad_buf(node.in0);
                auto& gb = grad_buf(node.in1);
                for (size_t i = 0; i < g.size(); ++i) {
                    ga[i] += g[i];
                    gb[i] += g[i];
                }
                return;
            }
            case Op::sub: {
                auto& ga = grad_buf(node.in0);
                auto& gb = grad_buf(node.in1);
                for (size_t i = 0; i < g.size(); ++i) {
                    ga[i] += g[i];
                    gb[i] -= g[i];
                }
                return;
            }
            case Op::mul: {
                auto a = in_val(0);
                auto b = in_val(1);
                auto& ga = grad_buf(node.in0);
                auto& gb = grad_buf(node.in1);
                for (size_t i = 0; i < g.size(); ++i) {
                    ga[i] += g[i] * b[i];
                    gb[i] += g[i] * a[i];
                }
                return;
            }
            case Op::add_scalar:
            case Op::reshape: {
                auto& ga = grad_buf(node.in0);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                return;
            }
            case Op::sub_scalar: {
                auto& ga = grad_buf(node.in0);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                return;
            }
            case Op::rsub_scalar: {
                auto& ga = grad_buf(node.in0);
                for (size_t i = 0; i < g.size(); ++i) ga[i] -= g[i];
                return;
            }
            case Op::mul_scalar: {
                auto& ga = grad_buf(node.in0);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * node.aux.scalar;
                return;
            }
            case Op::exp_op: {
                auto out = node.out.data();
                auto& ga = grad_buf(node.in0);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * out[i];
                return;
            }
            case Op::log_op: {
                auto a = in_val(0);
                auto& ga = grad_buf(node.in0);
                for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / a[i];
                return;
            }
            case Op::max_scalar: {
                auto a = in_val(0);
                auto& ga = grad_buf(node.in0);
                for (size_t i = 0; i < g.size(); ++i)
                    if (a[i] > node.aux.scalar) ga[i] += g[i];
                return;
            }
            case Op::matmul: {
                const Tensor& a = nodes_[node.in0].out;
                const Tensor& b = nodes_[node.in1].out;
                int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
                auto& ga = grad_buf(node.in0);
                auto& gb = grad_buf(node.in1);
                // dA += dC * B^T
                const double* bd = b.data().data();
                for (int i = 0; i < m; ++i) {
                    const double* gr = g.data() + static_cast<size_t>(i) * n;
                    double* gar = ga.data() + static_cast<size_t>(i) * k;
                    for (int kk = 0; kk < k; ++kk) {
                        const double* brow = bd + static_cast<size_t>(kk) * n;
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j) acc += gr[j] * brow[j];
                        gar[kk] += acc;
                    }
                }
                // dB += A^T * dC
                const double* ad = a.data().data();
                for (int i = 0; i < m; ++i) {
                    const double* arow = ad + static_cast<size_t>(i) * k;
                    const double* gr = g.data() + static_cast<size_t>(i) * n;
                    for (int kk = 0; kk < k; ++kk) {
                        double* gbr = gb.data() + static_cast<size_t>(kk) * n;
                        const double av = arow[kk];
                        for (int j = 0; j < n; ++j) gbr[j] += av * gr[j];
                    }
                }
                return;
            }
            case Op::transpose: {
                const Tensor& a = nodes_[node.in0].out;
                int m = a.shape()[0], n = a.shape()[1];
                auto& ga = grad_buf(node.in0);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        ga[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(j) * m + i];
                return;
            }
            case Op::sum_all: {
                auto& ga = grad_buf(node.in0);
                for (double& v : ga) v += g[0];
                return;
            }
            case Op::mean_all: {
                auto& ga = grad_buf(node.in0);
                double s = g[0] / static_cast<double>(ga.size());
                for (double& v : ga) v += s;
                return;
            }
            case Op::max_all: {
                auto a = in_val(0);
                auto& ga = grad_buf(node.in0);
                size_t arg = 0;
                for (size_t i = 1; i < a.size(); ++i)
                    if (a[i] > a[arg]) arg = i;
                ga[arg] += g[0];
                return;
            }
            case Op::sum_axis:
            case Op::mean_axis:
            case Op::max_axis: {
                const Tensor& a = nodes_[node.in0].out;
                int axis = node.aux.axis;
                int extent = a.shape()[axis];
                size_t outer = 1, inner = 1;
                for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(a.shape()[i]);
                for (int i = axis + 1; i < a.rank(); ++i) inner *= static_cast<size_t>(a.shape()[i]);
                auto& ga = grad_buf(node.in0);
                auto ad = a.data();
                for (size_t o = 0; o < outer; ++o) {
                    for (size_t in = 0; in < inner; ++in) {
                        double gv = g[o * inner + in];
                        if (node.op == Op::max_axis) {
                            size_t arg = 0;
                            double best = ad[o * extent * inner + in];
                            for (int e = 1; e < extent; ++e) {
                                double v = ad[(o * extent + e) * inner + in];
                                if (v > best) {
                                    best = v;
                                    arg = static_cast<size_t>(e);
                                }
                            }
                            ga[(o * extent + arg) * inner + in] += gv;
                        } else {
                            double s = node.op == Op::mean_axis ? gv / extent : gv;
                            for (int e = 0; e < extent; ++e) ga[(o * extent + e) * inner + in] += s;
                        }
                    }
                }
                return;
            }
            case Op::softmax_rows: {
                const Tensor& out = node.out;
                int rows = out.rank() == 2 ? out.shape()[0] : 1;
                int cols = out.rank() == 2 ? out.shape()[1] : out.shape()[0];
                auto& ga = grad_buf(node.in0);
                auto p = out.data();
                for (int i = 0; i < rows; ++i) {
                    const double* prow = p.data() + static_cast<size_t>(i) * cols;
                    const double* grow = g.data() + static_cast<size_t>(i) * cols;
                    double dot = 0.0;
                    for (int j = 0; j < cols; ++j) dot += grow[j] * prow[j];
                    double* garow = ga.data() + static_cast<size_t>(i) * cols;
                    for (int j = 0; j < cols; ++j) garow[j] += prow[j] * (grow[j] - dot);
                }
                return;
            }
            case Op::rmsnorm_rows: {
                const Tensor& x = nodes_[node.in0].out;
                const Tensor& gain = nodes_[node.in1].out;
                int rows = x.shape()[0], cols = x.shape()[1];
                double eps = node.aux.scalar;
                auto& gx = grad_buf(node.in0);
                auto& gg = grad_buf(node.in1);
                auto xd = x.data();
                auto gd = gain.data();
                for (int i = 0; i < rows; ++i) {
                    const double* xi = xd.data() + static_cast<size_t>(i) * cols;
                    const double* gi = g.data() + static_cast<size_t>(i) * cols;
                    double ms = 0.0;
                    for (int j = 0; j < cols; ++j) ms += xi[j] * xi[j];
                    ms = ms / cols + eps;
                    double inv = 1.0 / std::sqrt(ms);
                    double inv3 = inv * inv * inv;
                    double dot = 0.0;  // sum_j g_ij * gain_j * x_ij
                    for (int j = 0; j < cols; ++j) dot += gi[j] * gd[j] * xi[j];
                    double* gxi = gx.data() + static_cast<size_t>(i) * cols;
                    for (int j = 0; j < cols; ++j) {
                        gxi[j] += gd[j] * gi[j] * inv - xi[j] * inv3 * dot / cols;
                        gg[j] += gi[j] * xi[j] * inv;
                    }
                }
                return;
            }
            case Op::embed_rows: {
                const Tensor& table = nodes_[node.in0].out;
                int d = table.shape()[1];
                auto& gt = grad_buf(node.in0);
                for (size_t t = 0; t < node.aux.ids.size(); ++t) {
                    double* row = gt.data() + static_cast<size_t>(node.aux.ids[t]) * d;
                    const double* gr = g.data() + t * d;
                    for (int j = 0; j < d; ++j) row[j] += gr[j];
                }
                return;
            }
            case Op::slice_rows: {
                const Tensor& a = nodes_[node.in0].out;
                int n = a.shape()[1];
                auto& ga = grad_buf(node.in0);
                for (int i = 0; i < node.aux.i1; ++i) {
                    double* row = ga.data() + static_cast<size_t>(node.aux.i0 + i) * n;
                    const double* gr = g.data() + static_cast<size_t>(i) * n;
                    for (int j = 0; j < n; ++j) row[j] += gr[j];
                }
                return;
            }
            case Op::gather_rowwise: {
                const Tensor& a = nodes_[node.in0].out;
                int n = a.shape()[1];
                auto& ga = grad_buf(node.in0);
                for (size_t i = 0; i < node.aux.ids.size(); ++i)
                    ga[i * n + node.aux.ids[i]] += g[i];
                return;
            }
            case Op::gather1d: {
                auto& ga = grad_buf(node.in0);
                for (size_t k = 0; k < node.aux.ids.size(); ++k) ga[node.aux.ids[k]] += g[k];
                return;
            }
            case Op::concat1d: {
                auto& ga = grad_buf(node.in0);
                auto& gb = grad_buf(node.in1);
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
                for (size_t i = 0; i < gb.size(); ++i) gb[i] += g[ga.size() + i];
                return;
            }
        }
        throw std::logic_error("unhandled op in backward");
    }
};

}  // namespace opdlab
