#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "gdro/tensor.hpp"

namespace gdro {

/// A learnable tensor with a stable name and a gradient slot of matching shape.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(Tensor(value.shape())) {}

    void zero_grad() { std::fill(grad.raw().begin(), grad.raw().end(), 0.0); }
};

/// Named collection of parameters. Insertion order is the canonical order;
/// storage is a deque so references stay valid while the set grows.
class ParamSet {
public:
    Parameter& add(std::string name, Tensor init) {
        for (const auto& p : params_) {
            if (p.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
        }
        params_.emplace_back(std::move(name), std::move(init));
        return params_.back();
    }

    Parameter& at(const std::string& name) {
        for (auto& p : params_) {
            if (p.name == name) return p;
        }
        throw std::out_of_range("no parameter named " + name);
    }

    const Parameter& at(const std::string& name) const {
        for (const auto& p : params_) {
            if (p.name == name) return p;
        }
        throw std::out_of_range("no parameter named " + name);
    }

    std::deque<Parameter>& all() { return params_; }
    const std::deque<Parameter>& all() const { return params_; }
    std::size_t size() const { return params_.size(); }

    std::int64_t scalar_count() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.value.numel();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

private:
    std::deque<Parameter> params_;
};

enum class OpKind : std::uint8_t {
    constant,
    param,
    add,
    mul,
    affine,
    matmul,
    relu,
    log,
    pow_const,
    softmax,
    layer_norm,
    cross_entropy,
    pick,
    reshape,
    permute,
    mean_axis,
    reduce_sum,
    reduce_mean,
    segment_mean,
    add_row_vec,
    dropout_mask,
};

/// Handle to a node on a Tape.
struct Value {
    int id = -1;
};

/// Define-by-run record of primitive applications. Rebuilt for every forward
/// pass; node order is creation order, which is a topological order by
/// construction, so the backward sweep visits each node exactly once in
/// reverse.
class Tape {
public:
    Value constant(Tensor t) {
        Node n;
        n.kind = OpKind::constant;
        n.value = std::move(t);
        return push(std::move(n));
    }

    Value param(Parameter& p) {
        Node n;
        n.kind = OpKind::param;
        n.value = p.value;
        n.param = &p;
        return push(std::move(n));
    }

    Value add(Value a, Value b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        require(ta.same_shape(tb), "add: shape mismatch " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
        Node n = make(OpKind::add, {a.id, b.id}, Tensor(ta.shape()));
        for (std::int64_t i = 0; i < ta.numel(); ++i) n.value[i] = ta[i] + tb[i];
        return push(std::move(n));
    }

    Value mul(Value a, Value b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        require(ta.same_shape(tb), "mul: shape mismatch " + shape_str(ta.shape()) + " vs " + shape_str(tb.shape()));
        Node n = make(OpKind::mul, {a.id, b.id}, Tensor(ta.shape()));
        for (std::int64_t i = 0; i < ta.numel(); ++i) n.value[i] = ta[i] * tb[i];
        return push(std::move(n));
    }

    /// Elementwise scale*x + shift.
    Value affine(Value x, double scale, double shift) {
        const Tensor& tx = value(x);
        Node n = make(OpKind::affine, {x.id}, Tensor(tx.shape()));
        n.s0 = scale;
        n.s1 = shift;
        for (std::int64_t i = 0; i < tx.numel(); ++i) n.value[i] = scale * tx[i] + shift;
        return push(std::move(n));
    }

    /// Matrix product over the last two axes. Inputs must have equal rank and
    /// identical leading (batch) extents; rank 2 is the plain product.
    Value matmul(Value a, Value b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        const std::string report = "matmul: incompatible shapes " + shape_str(ta.shape()) + " x " + shape_str(tb.shape());
        require(ta.rank() >= 2 && tb.rank() == ta.rank(), report);
        const int r = ta.rank();
        for (int i = 0; i < r - 2; ++i) require(ta.extent(i) == tb.extent(i), report);
        const int m = ta.extent(r - 2);
        const int k = ta.extent(r - 1);
        const int n_cols = tb.extent(r - 1);
        require(tb.extent(r - 2) == k, report);

        Shape out_shape(ta.shape().begin(), ta.shape().end() - 1);
        out_shape.push_back(n_cols);
        Node n = make(OpKind::matmul, {a.id, b.id}, Tensor(out_shape));

        const std::int64_t batches = ta.numel() / (static_cast<std::int64_t>(m) * k);
        for (std::int64_t bi = 0; bi < batches; ++bi) {
            const double* pa = ta.data() + bi * m * k;
            const double* pb = tb.data() + bi * static_cast<std::int64_t>(k) * n_cols;
            double* pc = n.value.data() + bi * static_cast<std::int64_t>(m) * n_cols;
            for (int i = 0; i < m; ++i) {
                for (int kk = 0; kk < k; ++kk) {
                    const double av = pa[i * k + kk];
                    if (av == 0.0) continue;
                    const double* brow = pb + static_cast<std::int64_t>(kk) * n_cols;
                    double* crow = pc + static_cast<std::int64_t>(i) * n_cols;
                    for (int j = 0; j < n_cols; ++j) crow[j] += av * brow[j];
                }
            }
        }
        return push(std::move(n));
    }

    /// Elementwise max(0, x); the subgradient at exactly 0 is 0.
    Value relu(Value x) {
        const Tensor& tx = value(x);
        Node n = make(OpKind::relu, {x.id}, Tensor(tx.shape()));
        for (std::int64_t i = 0; i < tx.numel(); ++i) n.value[i] = tx[i] > 0.0 ? tx[i] : 0.0;
        return push(std::move(n));
    }

    Value log(Value x) {
        const Tensor& tx = value(x);
        Node n = make(OpKind::log, {x.id}, Tensor(tx.shape()));
        for (std::int64_t i = 0; i < tx.numel(); ++i) n.value[i] = std::log(tx[i]);
        return push(std::move(n));
    }

    /// Elementwise x^e with constant exponent.
    Value pow_const(Value x, double e) {
        const Tensor& tx = value(x);
        Node n = make(OpKind::pow_const, {x.id}, Tensor(tx.shape()));
        n.s0 = e;
        for (std::int64_t i = 0; i < tx.numel(); ++i) n.value[i] = std::pow(tx[i], e);
        return push(std::move(n));
    }

    /// Softmax over the last axis, computed with max subtraction.
    Value softmax(Value x) {
        const Tensor& tx = value(x);
        require(tx.rank() >= 1, "softmax: rank-0 input");
        Node n = make(OpKind::softmax, {x.id}, Tensor(tx.shape()));
        const int d = tx.extent(tx.rank() - 1);
        const std::int64_t rows = tx.numel() / d;
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* in = tx.data() + r * d;
            double* out = n.value.data() + r * d;
            double m = in[0];
            for (int j = 1; j < d; ++j) m = std::max(m, in[j]);
            double z = 0.0;
            for (int j = 0; j < d; ++j) {
                out[j] = std::exp(in[j] - m);
                z += out[j];
            }
            for (int j = 0; j < d; ++j) out[j] /= z;
        }
        return push(std::move(n));
    }

    /// Per-row normalisation over the last axis with population variance:
    /// (x - mean) / sqrt(var + eps) * gain + bias.
    Value layer_norm(Value x, Value gain, Value bias, double eps = 1e-5) {
        const Tensor& tx = value(x);
        const Tensor& tg = value(gain);
        const Tensor& tb = value(bias);
        require(eps > 0.0, "layer_norm: eps must be positive");
        require(tx.rank() >= 1, "layer_norm: rank-0 input");
        const int d = tx.extent(tx.rank() - 1);
        require(tg.rank() == 1 && tg.extent(0) == d && tb.rank() == 1 && tb.extent(0) == d,
                "layer_norm: gain/bias must be [" + std::to_string(d) + "], got " + shape_str(tg.shape()) + " and " +
                    shape_str(tb.shape()));
        Node n = make(OpKind::layer_norm, {x.id, gain.id, bias.id}, Tensor(tx.shape()));
        n.s0 = eps;
        const std::int64_t rows = tx.numel() / d;
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* in = tx.data() + r * d;
            double* out = n.value.data() + r * d;
            double mean = 0.0;
            for (int j = 0; j < d; ++j) mean += in[j];
            mean /= d;
            double var = 0.0;
            for (int j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
            var /= d;
            const double inv = 1.0 / std::sqrt(var + eps);
            for (int j = 0; j < d; ++j) out[j] = (in[j] - mean) * inv * tg[j] + tb[j];
        }
        return push(std::move(n));
    }

    /// Per-sample weighted negative log-likelihood of the true class:
    /// loss_i = -w[y_i] * log softmax(logits_i)[y_i]. Reduction is the
    /// caller's job. Empty weights mean unit weights.
    Value cross_entropy(Value logits, std::span<const int> labels, std::span<const double> class_weights = {}) {
        const Tensor& tl = value(logits);
        require(tl.rank() == 2, "cross_entropy: logits must be [batch, classes], got " + shape_str(tl.shape()));
        const int b = tl.extent(0);
        const int c = tl.extent(1);
        require(static_cast<int>(labels.size()) == b,
                "cross_entropy: " + std::to_string(labels.size()) + " labels for batch " + std::to_string(b));
        require(class_weights.empty() || static_cast<int>(class_weights.size()) == c,
                "cross_entropy: expected " + std::to_string(c) + " class weights");
        for (int i = 0; i < b; ++i) {
            require(labels[i] >= 0 && labels[i] < c,
                    "cross_entropy: label " + std::to_string(labels[i]) + " out of range [0," + std::to_string(c) + ")");
        }
        Node n = make(OpKind::cross_entropy, {logits.id}, Tensor(Shape{b}));
        n.ivec.assign(labels.begin(), labels.end());
        n.dvec.assign(class_weights.begin(), class_weights.end());
        n.aux = Tensor(Shape{b, c});  // softmax probabilities, reused in backward
        for (int i = 0; i < b; ++i) {
            const double* row = tl.data() + static_cast<std::int64_t>(i) * c;
            double m = row[0];
            for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
            double z = 0.0;
            for (int j = 0; j < c; ++j) z += std::exp(row[j] - m);
            const double lse = m + std::log(z);
            for (int j = 0; j < c; ++j) n.aux[static_cast<std::int64_t>(i) * c + j] = std::exp(row[j] - lse);
            const double w = class_weights.empty() ? 1.0 : class_weights[static_cast<std::size_t>(labels[i])];
            n.value[i] = w * (lse - row[labels[i]]);
        }
        return push(std::move(n));
    }

    /// Row-wise gather: out[i] = x[i, index[i]].
    Value pick(Value x, std::span<const int> index) {
        const Tensor& tx = value(x);
        require(tx.rank() == 2, "pick: input must be [batch, classes], got " + shape_str(tx.shape()));
        const int b = tx.extent(0);
        const int c = tx.extent(1);
        require(static_cast<int>(index.size()) == b, "pick: index length mismatch");
        for (int i = 0; i < b; ++i) {
            require(index[i] >= 0 && index[i] < c,
                    "pick: index " + std::to_string(index[i]) + " out of range [0," + std::to_string(c) + ")");
        }
        Node n = make(OpKind::pick, {x.id}, Tensor(Shape{b}));
        n.ivec.assign(index.begin(), index.end());
        for (int i = 0; i < b; ++i) n.value[i] = tx[static_cast<std::int64_t>(i) * c + index[i]];
        return push(std::move(n));
    }

    Value reshape(Value x, Shape shape) {
        const Tensor& tx = value(x);
        require(shape_numel(shape) == tx.numel(),
                "reshape: cannot view " + shape_str(tx.shape()) + " as " + shape_str(shape));
        Node n = make(OpKind::reshape, {x.id}, Tensor(shape, tx.raw()));
        return push(std::move(n));
    }

    Value permute(Value x, std::vector<int> perm) {
        const Tensor& tx = value(x);
        require(static_cast<int>(perm.size()) == tx.rank(), "permute: axis list must cover every axis");
        std::vector<bool> seen(perm.size(), false);
        for (int a : perm) {
            require(a >= 0 && a < tx.rank() && !seen[static_cast<std::size_t>(a)], "permute: invalid axis list");
            seen[static_cast<std::size_t>(a)] = true;
        }
        Shape out_shape(perm.size());
        for (std::size_t i = 0; i < perm.size(); ++i) out_shape[i] = tx.extent(perm[i]);
        Node n = make(OpKind::permute, {x.id}, Tensor(out_shape));
        n.ivec = perm;
        permute_copy(tx, perm, n.value);
        return push(std::move(n));
    }

    /// Arithmetic mean over one axis.
    Value mean_axis(Value x, int axis) {
        const Tensor& tx = value(x);
        require(axis >= 0 && axis < tx.rank(), "mean_axis: axis out of range");
        Shape out_shape;
        for (int i = 0; i < tx.rank(); ++i) {
            if (i != axis) out_shape.push_back(tx.extent(i));
        }
        Node n = make(OpKind::mean_axis, {x.id}, Tensor(out_shape));
        n.ivec = {axis};
        const auto [outer, extent, inner] = axis_split(tx.shape(), axis);
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t in = 0; in < inner; ++in) {
                double acc = 0.0;
                for (std::int64_t a = 0; a < extent; ++a) acc += tx[(o * extent + a) * inner + in];
                n.value[o * inner + in] = acc / static_cast<double>(extent);
            }
        }
        return push(std::move(n));
    }

    Value reduce_sum(Value x) {
        const Tensor& tx = value(x);
        Node n = make(OpKind::reduce_sum, {x.id}, Tensor(Shape{}));
        double acc = 0.0;
        for (std::int64_t i = 0; i < tx.numel(); ++i) acc += tx[i];
        n.value[0] = acc;
        return push(std::move(n));
    }

    Value reduce_mean(Value x) {
        const Tensor& tx = value(x);
        Node n = make(OpKind::reduce_mean, {x.id}, Tensor(Shape{}));
        double acc = 0.0;
        for (std::int64_t i = 0; i < tx.numel(); ++i) acc += tx[i];
        n.value[0] = acc / static_cast<double>(tx.numel());
        return push(std::move(n));
    }

    /// Mean of x over each segment: out[g] = mean of x[i] with segment[i]==g,
    /// 0 for empty segments. x must be a vector.
    Value segment_mean(Value x, std::span<const int> segments, int num_segments) {
        const Tensor& tx = value(x);
        require(tx.rank() == 1, "segment_mean: input must be a vector, got " + shape_str(tx.shape()));
        require(num_segments > 0, "segment_mean: need at least one segment");
        require(static_cast<int>(segments.size()) == tx.extent(0), "segment_mean: segment list length mismatch");
        for (int s : segments) {
            require(s >= 0 && s < num_segments,
                    "segment_mean: segment id " + std::to_string(s) + " out of range [0," + std::to_string(num_segments) + ")");
        }
        Node n = make(OpKind::segment_mean, {x.id}, Tensor(Shape{num_segments}));
        n.ivec.assign(segments.begin(), segments.end());
        std::vector<std::int64_t> counts(static_cast<std::size_t>(num_segments), 0);
        for (std::size_t i = 0; i < segments.size(); ++i) {
            n.value[segments[i]] += tx[static_cast<std::int64_t>(i)];
            ++counts[static_cast<std::size_t>(segments[i])];
        }
        for (int g = 0; g < num_segments; ++g) {
            if (counts[static_cast<std::size_t>(g)] > 0) n.value[g] /= static_cast<double>(counts[static_cast<std::size_t>(g)]);
        }
        return push(std::move(n));
    }

    /// Broadcast add of a vector over the last axis: x[..., d] + v[d].
    Value add_row_vec(Value x, Value v) {
        const Tensor& tx = value(x);
        const Tensor& tv = value(v);
        require(tx.rank() >= 1 && tv.rank() == 1 && tv.extent(0) == tx.extent(tx.rank() - 1),
                "add_row_vec: cannot broadcast " + shape_str(tv.shape()) + " over " + shape_str(tx.shape()));
        Node n = make(OpKind::add_row_vec, {x.id, v.id}, Tensor(tx.shape()));
        const int d = tv.extent(0);
        const std::int64_t rows = tx.numel() / d;
        for (std::int64_t r = 0; r < rows; ++r) {
            for (int j = 0; j < d; ++j) n.value[r * d + j] = tx[r * d + j] + tv[j];
        }
        return push(std::move(n));
    }

    /// Elementwise multiply by a constant mask (no gradient to the mask).
    /// The mask is the explicit dropout primitive; evaluation mode simply
    /// never creates this node.
    Value dropout_mask(Value x, Tensor mask) {
        const Tensor& tx = value(x);
        require(tx.same_shape(mask), "dropout_mask: mask shape " + shape_str(mask.shape()) + " does not match input " +
                                         shape_str(tx.shape()));
        Node n = make(OpKind::dropout_mask, {x.id}, Tensor(tx.shape()));
        n.aux = std::move(mask);
        for (std::int64_t i = 0; i < tx.numel(); ++i) n.value[i] = tx[i] * n.aux[i];
        return push(std::move(n));
    }

    const Tensor& value(Value v) const { return node(v).value; }

    /// Gradient of the last backward() root with respect to this node.
    const Tensor& grad(Value v) const {
        const Node& n = node(v);
        if (!n.grad_ready) throw std::logic_error("grad requested before backward()");
        return n.grad;
    }

    int size() const { return static_cast<int>(nodes_.size()); }
    OpKind kind(Value v) const { return node(v).kind; }
    const std::vector<int>& inputs(Value v) const { return node(v).inputs; }

    /// Reverse sweep from a scalar root, accumulating d root / d theta into
    /// every Parameter reached. Parameter gradients are accumulated, not
    /// overwritten; callers zero them between steps.
    void backward(Value root) {
        Node& r = node(root);
        if (r.value.numel() != 1) {
            throw std::invalid_argument("backward: root must be scalar, got shape " + shape_str(r.value.shape()));
        }
        for (auto& n : nodes_) {
            n.grad = Tensor(n.value.shape());
            n.grad_ready = true;
        }
        r.grad[0] = 1.0;
        for (int i = root.id; i >= 0; --i) {
            backward_node(nodes_[static_cast<std::size_t>(i)]);
        }
    }

private:
    struct Node {
        OpKind kind = OpKind::constant;
        std::vector<int> inputs;
        Tensor value;
        Tensor grad;
        bool grad_ready = false;
        Parameter* param = nullptr;
        double s0 = 0.0;  // affine scale / pow exponent / layer_norm eps
        double s1 = 0.0;  // affine shift
        std::vector<int> ivec;     // labels / permutation / axis / segments
        std::vector<double> dvec;  // class weights
        Tensor aux;                // cached softmax probs / dropout mask
    };

    static void require(bool ok, const std::string& msg) {
        if (!ok) throw std::invalid_argument(msg);
    }

    Node make(OpKind kind, std::vector<int> inputs, Tensor value) {
        Node n;
        n.kind = kind;
        n.inputs = std::move(inputs);
        n.value = std::move(value);
        return n;
    }

    Value push(Node n) {
        nodes_.push_back(std::move(n));
        return Value{static_cast<int>(nodes_.size()) - 1};
    }

    Node& node(Value v) {
        if (v.id < 0 || v.id >= size()) throw std::out_of_range("invalid tape value id");
        return nodes_[static_cast<std::size_t>(v.id)];
    }

    const Node& node(Value v) const {
        if (v.id < 0 || v.id >= size()) throw std::out_of_range("invalid tape value id");
        return nodes_[static_cast<std::size_t>(v.id)];
    }

    static std::tuple<std::int64_t, std::int64_t, std::int64_t> axis_split(const Shape& s, int axis) {
        std::int64_t outer = 1, inner = 1;
        for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
        for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) inner *= s[static_cast<std::size_t>(i)];
        return {outer, s[static_cast<std::size_t>(axis)], inner};
    }

    static void permute_copy(const Tensor& in, const std::vector<int>& perm, Tensor& out) {
        const int r = in.rank();
        std::vector<std::int64_t> in_strides(static_cast<std::size_t>(r), 1);
        for (int i = r - 2; i >= 0; --i) {
            in_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(i + 1)] * in.extent(i + 1);
        }
        std::vector<int> idx(static_cast<std::size_t>(r), 0);
        const std::int64_t n = in.numel();
        for (std::int64_t flat = 0; flat < n; ++flat) {
            std::int64_t src = 0;
            for (int i = 0; i < r; ++i) src += static_cast<std::int64_t>(idx[static_cast<std::size_t>(i)]) *
                                               in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
            out[flat] = in[src];
            for (int i = r - 1; i >= 0; --i) {
                if (++idx[static_cast<std::size_t>(i)] < out.extent(i)) break;
                idx[static_cast<std::size_t>(i)] = 0;
            }
        }
    }

    void backward_node(Node& n) {
        const Tensor& g = n.grad;
        switch (n.kind) {
            case OpKind::constant:
                break;
            case OpKind::param:
                for (std::int64_t i = 0; i < g.numel(); ++i) n.param->grad[i] += g[i];
                break;
            case OpKind::add: {
                Tensor& ga = grad_of(n.inputs[0]);
                Tensor& gb = grad_of(n.inputs[1]);
                for (std::int64_t i = 0; i < g.numel(); ++i) {
                    ga[i] += g[i];
                    gb[i] += g[i];
                }
                break;
            }
            case OpKind::mul: {
                const Tensor& a = val_of(n.inputs[0]);
                const Tensor& b = val_of(n.inputs[1]);
                Tensor& ga = grad_of(n.inputs[0]);
                Tensor& gb = grad_of(n.inputs[1]);
                for (std::int64_t i = 0; i < g.numel(); ++i) {
                    ga[i] += g[i] * b[i];
                    gb[i] += g[i] * a[i];
                }
                break;
            }
            case OpKind::affine: {
                Tensor& gx = grad_of(n.inputs[0]);
                for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * n.s0;
                break;
            }
            case OpKind::matmul: {
                const Tensor& a = val_of(n.inputs[0]);
                const Tensor& b = val_of(n.inputs[1]);
                Tensor& ga = grad_of(n.inputs[0]);
                Tensor& gb = grad_of(n.inputs[1]);
                const int r = a.rank();
                const int m = a.extent(r - 2);
                const int k = a.extent(r - 1);
                const int nc = b.extent(r - 1);
                const std::int64_t batches = a.numel() / (static_cast<std::int64_t>(m) * k);
                for (std::int64_t bi = 0; bi < batches; ++bi) {
                    const double* pa = a.data() + bi * m * k;
                    const double* pb = b.data() + bi * static_cast<std::int64_t>(k) * nc;
                    const double* pg = g.data() + bi * static_cast<std::int64_t>(m) * nc;
                    double* pga = ga.data() + bi * m * k;
                    double* pgb = gb.data() + bi * static_cast<std::int64_t>(k) * nc;
                    // dA = g * B^T
                    for (int i = 0; i < m; ++i) {
                        for (int kk = 0; kk < k; ++kk) {
                            double acc = 0.0;
                            const double* grow = pg + static_cast<std::int64_t>(i) * nc;
                            const double* brow = pb + static_cast<std::int64_t>(kk) * nc;
                            for (int j = 0; j < nc; ++j) acc += grow[j] * brow[j];
                            pga[i * k + kk] += acc;
                        }
                    }
                    // dB = A^T * g
                    for (int i = 0; i < m; ++i) {
                        const double* grow = pg + static_cast<std::int64_t>(i) * nc;
                        for (int kk = 0; kk < k; ++kk) {
                            const double av = pa[i * k + kk];
                            if (av == 0.0) continue;
                            double* brow = pgb + static_cast<std::int64_t>(kk) * nc;
                            for (int j = 0; j < nc; ++j) brow[j] += av * grow[j];
                        }
                    }
                }
                break;
            }
            case OpKind::relu: {
                const Tensor& x = val_of(n.inputs[0]);
                Tensor& gx = grad_of(n.inputs[0]);
                for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += x[i] > 0.0 ? g[i] : 0.0;
                break;
            }
            case OpKind::log: {
                const Tensor& x = val_of(n.inputs[0]);
                Tensor& gx = grad_of(n.inputs[0]);
                for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] / x[i];
                break;
            }
            case OpKind::pow_const: {
                if (n.s0 == 0.0) break;  // constant output
                const Tensor& x = val_of(n.inputs[0]);
                Tensor& gx = grad_of(n.inputs[0]);
                for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * n.s0 * std::pow(x[i], n.s0 - 1.0);
                break;
            }
            case OpKind::softmax: {
                const Tensor& y = n.value;
                Tensor& gx = grad_of(n.inputs[0]);
                const int d = y.extent(y.rank() - 1);
                const std::int64_t rows = y.numel() / d;
                for (std::int64_t r = 0; r < rows; ++r) {
                    const double* yr = y.data() + r * d;
                    const double* gr = g.data() + r * d;
                    double dot = 0.0;
                    for (int j = 0; j < d; ++j) dot += yr[j] * gr[j];
                    for (int j = 0; j < d; ++j) gx[r * d + j] += yr[j] * (gr[j] - dot);
                }
                break;
            }
            case OpKind::layer_norm: {
                const Tensor& x = val_of(n.inputs[0]);
                const Tensor& gain = val_of(n.inputs[1]);
                Tensor& gx = grad_of(n.inputs[0]);
                Tensor& gg = grad_of(n.inputs[1]);
                Tensor& gb = grad_of(n.inputs[2]);
                const int d = x.extent(x.rank() - 1);
                const std::int64_t rows = x.numel() / d;
                const double eps = n.s0;
                for (std::int64_t r = 0; r < rows; ++r) {
                    const double* xr = x.data() + r * d;
                    const double* gr = g.data() + r * d;
                    double mean = 0.0;
                    for (int j = 0; j < d; ++j) mean += xr[j];
                    mean /= d;
                    double var = 0.0;
                    for (int j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
                    var /= d;
                    const double inv = 1.0 / std::sqrt(var + eps);
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double xhat = (xr[j] - mean) * inv;
                        const double dxhat = gr[j] * gain[j];
                        gg[j] += gr[j] * xhat;
                        gb[j] += gr[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for (int j = 0; j < d; ++j) {
                        const double xhat = (xr[j] - mean) * inv;
                        const double dxhat = gr[j] * gain[j];
                        gx[r * d + j] += inv * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
                    }
                }
                break;
            }
            case OpKind::cross_entropy: {
                Tensor& gx = grad_of(n.inputs[0]);
                const int b = n.value.extent(0);
                const int c = n.aux.extent(1);
                for (int i = 0; i < b; ++i) {
                    const int y = n.ivec[static_cast<std::size_t>(i)];
                    const double w = n.dvec.empty() ? 1.0 : n.dvec[static_cast<std::size_t>(y)];
                    const double gi = g[i] * w;
                    for (int j = 0; j < c; ++j) {
                        const double p = n.aux[static_cast<std::int64_t>(i) * c + j];
                        gx[static_cast<std::int64_t>(i) * c + j] += gi * (p - (j == y ? 1.0 : 0.0));
                    }
                }
                break;
            }
            case OpKind::pick: {
                Tensor& gx = grad_of(n.inputs[0]);
                const int b = n.value.extent(0);
                const int c = val_of(n.inputs[0]).extent(1);
                for (int i = 0; i < b; ++i) {
                    gx[static_cast<std::int64_t>(i) * c + n.ivec[static_cast<std::size_t>(i)]] += g[i];
                }
                break;
            }
            case OpKind::reshape: {
                Tensor& gx = grad_of(n.inputs[0]);
                for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
                break;
            }
            case OpKind::permute: {
                Tensor& gx = grad_of(n.inputs[0]);
                // scatter: walk output indices, add into the permuted source slot
                const Tensor& x = val_of(n.inputs[0]);
                const int r = x.rank();
                std::vector<std::int64_t> in_strides(static_cast<std::size_t>(r), 1);
                for (int i = r - 2; i >= 0; --i) {
                    in_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(i + 1)] * x.extent(i + 1);
                }
                std::vector<int> idx(static_cast<std::size_t>(r), 0);
                for (std::int64_t flat = 0; flat < g.numel(); ++flat) {
                    std::int64_t src = 0;
                    for (int i = 0; i < r; ++i) {
                        src += static_cast<std::int64_t>(idx[static_cast<std::size_t>(i)]) *
                               in_strides[static_cast<std::size_t>(n.ivec[static_cast<std::size_t>(i)])];
                    }
                    gx[src] += g[flat];
                    for (int i = r - 1; i >= 0; --i) {
                        if (++idx[static_cast<std::size_t>(i)] < n.value.extent(i)) break;
                        idx[static_cast<std::size_t>(i)] = 0;
                    }
                }
                break;
            }
            case OpKind::mean_axis: {
                const Tensor& x = val_of(n.inputs[0]);
                Tensor& gx = grad_of(n.inputs[0]);
                const int axis = n.ivec[0];
                const auto [outer, extent, inner] = axis_split(x.shape(), axis);
                for (std::int64_t o = 0; o < outer; ++o) {
                    for (std::int64_t a = 0; a < extent; ++a) {
                        for (std::int64_t in = 0; in < inner; ++in) {
                            gx[(o * extent + a) * inner + in] += g[o * inner + in] / static_cast<double>(extent);
                        }
                    }
                }
                break;
            }
            case OpKind::reduce_sum: {
                Tensor& gx = grad_of(n.inputs[0]);
                for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += g[0];
                break;
            }
            case OpKind::reduce_mean: {
                Tensor& gx = grad_of(n.inputs[0]);
                const double scale = g[0] / static_cast<double>(gx.numel());
                for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += scale;
                break;
            }
            case OpKind::segment_mean: {
                Tensor& gx = grad_of(n.inputs[0]);
                std::vector<std::int64_t> counts(static_cast<std::size_t>(n.value.extent(0)), 0);
                for (int s : n.ivec) ++counts[static_cast<std::size_t>(s)];
                for (std::size_t i = 0; i < n.ivec.size(); ++i) {
                    const int s = n.ivec[i];
                    gx[static_cast<std::int64_t>(i)] += g[s] / static_cast<double>(counts[static_cast<std::size_t>(s)]);
                }
                break;
            }
            case OpKind::add_row_vec: {
                Tensor& gx = grad_of(n.inputs[0]);
                Tensor& gv = grad_of(n.inputs[1]);
                const int d = gv.extent(0);
                const std::int64_t rows = g.numel() / d;
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (int j = 0; j < d; ++j) {
                        gx[r * d + j] += g[r * d + j];
                        gv[j] += g[r * d + j];
                    }
                }
                break;
            }
            case OpKind::dropout_mask: {
                Tensor& gx = grad_of(n.inputs[0]);
                for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * n.aux[i];
                break;
            }
        }
    }

    const Tensor& val_of(int id) { return nodes_[static_cast<std::size_t>(id)].value; }
    Tensor& grad_of(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }

    std::deque<Node> nodes_;
};

/// Max relative error between backward() gradients and central finite
/// differences, probing every coordinate of every listed parameter.
///
/// loss_fn(with_grad) must rebuild the computation from the parameters'
/// current values and return the scalar loss; when with_grad is true it must
/// also run backward() so Parameter::grad holds the analytic gradient.
/// The error is measured relative to max(1, |analytic|, |numeric|).
inline double finite_diff_check(const std::function<double(bool)>& loss_fn, std::span<Parameter* const> params,
                                double step) {
    if (step <= 0.0) throw std::invalid_argument("finite_diff_check: step must be positive");
    for (Parameter* p : params) p->zero_grad();
    loss_fn(true);
    double max_rel = 0.0;
    for (Parameter* p : params) {
        for (std::int64_t i = 0; i < p->value.numel(); ++i) {
            const double saved = p->value[i];
            p->value[i] = saved + step;
            const double fp = loss_fn(false);
            p->value[i] = saved - step;
            const double fm = loss_fn(false);
            p->value[i] = saved;
            const double fd = (fp - fm) / (2.0 * step);
            const double an = p->grad[i];
            const double rel = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            max_rel = std::max(max_rel, rel);
        }
    }
    return max_rel;
}

}  // namespace gdro
