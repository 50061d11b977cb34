// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied. See the License for the specific language governing
// permissions and limitations under the License.

#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "metaref/errors.hpp"
#include "metaref/tensor.hpp"

namespace metaref {

// Reverse-mode automatic differentiation over tensors. A Record is a
// tape of operations in construction order; Var is a handle to one tape
// node. Backward passes come in two flavours: a raw pass that returns
// plain tensors (bitwise-reproducible on replay), and a graph pass that
// records the adjoint computation back onto the tape so the resulting
// gradients are themselves differentiable. Second-order quantities are
// obtained by running a raw pass over a graph pass.

enum class Op : uint8_t {
    Leaf,
    Constant,
    Use,
    Add,
    Sub,
    Mul,
    Div,
    SafeDiv0,
    Neg,
    MatMul,
    Transpose,
    Relu,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Abs,
    Minimum,
    Maximum,
    SumAll,
    MeanAll,
    ColwiseSum,
    RowwiseSum,
    RowwiseMax,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Constant: return "constant";
        case Op::Use: return "use";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::SafeDiv0: return "safe_div0";
        case Op::Neg: return "neg";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Relu: return "relu";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Sqrt: return "sqrt";
        case Op::Sin: return "sin";
        case Op::Cos: return "cos";
        case Op::Abs: return "abs";
        case Op::Minimum: return "minimum";
        case Op::Maximum: return "maximum";
        case Op::SumAll: return "sum_all";
        case Op::MeanAll: return "mean_all";
        case Op::ColwiseSum: return "colwise_sum";
        case Op::RowwiseSum: return "rowwise_sum";
        case Op::RowwiseMax: return "rowwise_max";
    }
    return "?";
}

class Record;

// Handle to one tape node. A Var belongs to exactly one Record; mixing
// records in an operation is a contract violation (import values across
// nested records with Record::use instead).
struct Var {
    Record* rec = nullptr;
    int32_t id = -1;

    bool valid() const { return rec != nullptr && id >= 0; }
    const Tensor& value() const;
    int rows() const { return value().rows(); }
    int cols() const { return value().cols(); }
    double item() const { return value().item(); }
};

struct Node {
    Op op = Op::Leaf;
    int32_t a = -1;
    int32_t b = -1;
    Tensor value;
    // Highest derivative order this node represents (0 for forward
    // values, k for values produced by the k-th nested backward pass).
    uint8_t grad_depth = 0;
    bool needs_grad = false;
    // For Op::Use: where the imported value came from.
    const Record* origin_rec = nullptr;
    int32_t origin_id = -1;
};

class Gradients;
class VarGrads;

class Record {
public:
    explicit Record(int max_grad_depth = 2) : max_grad_depth_(max_grad_depth) {
        if (max_grad_depth < 1) throw ContractError("Record: max_grad_depth must be >= 1");
    }

    // Child record one nesting level below `parent`; may consume the
    // parent chain's values through use().
    explicit Record(Record& parent)
        : parent_(&parent), level_(parent.level_ + 1), max_grad_depth_(parent.max_grad_depth_) {}

    Record(const Record&) = delete;
    Record& operator=(const Record&) = delete;

    int level() const { return level_; }
    int max_grad_depth() const { return max_grad_depth_; }
    size_t size() const { return nodes_.size(); }

    const Node& node(int32_t id) const { return nodes_[static_cast<size_t>(id)]; }

    // Differentiable input (a parameter).
    Var leaf(Tensor v) { return push(Op::Leaf, std::move(v), -1, -1, true); }

    // Non-differentiable input (data, detached values).
    Var constant(Tensor v) { return push(Op::Constant, std::move(v), -1, -1, false); }

    Var zeros_like(const Var& v) { return constant(Tensor(v.rows(), v.cols())); }

    // Import a value produced by this record's ancestor chain. The Use
    // node acts as a leaf here; its adjoint is the derivative w.r.t. the
    // imported value.
    Var use(Var ancestor) {
        if (!ancestor.valid()) throw ContractError("use: invalid source value");
        if (ancestor.rec == this) return ancestor;
        bool found = false;
        for (const Record* r = parent_; r != nullptr; r = r->parent_)
            if (r == ancestor.rec) { found = true; break; }
        if (!found)
            throw ContractError("use: source record is not an ancestor of this record");
        const Node& src = ancestor.rec->node(ancestor.id);
        Var v = push(Op::Use, src.value, -1, -1, src.needs_grad);
        nodes_[static_cast<size_t>(v.id)].origin_rec = ancestor.rec;
        nodes_[static_cast<size_t>(v.id)].origin_id = ancestor.id;
        return v;
    }

    Var emit(Op op, Var a, Var b = {});

    // Raw backward: adjoints as plain tensors, fixed accumulation order,
    // bitwise-identical on replay.
    Gradients backward_raw(Var root);

    // Graph backward: the adjoint computation is recorded onto this tape
    // so the returned gradients are differentiable further.
    VarGrads backward_graph(Var root);

    // First-order variant: gradients computed raw and re-entered as
    // constants, so later passes treat them as fixed.
    VarGrads backward_detached(Var root);

private:
    friend class Gradients;
    friend class VarGrads;

    Var push(Op op, Tensor value, int32_t a, int32_t b, bool needs_grad) {
        if (!value.all_finite()) {
            throw NumericError(std::string(op_name(op)) + " at node " +
                               std::to_string(nodes_.size()) + " produced a non-finite value");
        }
        Node n;
        n.op = op;
        n.a = a;
        n.b = b;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        uint8_t depth = pending_depth_;
        if (a >= 0) depth = std::max(depth, nodes_[static_cast<size_t>(a)].grad_depth);
        if (b >= 0) depth = std::max(depth, nodes_[static_cast<size_t>(b)].grad_depth);
        n.grad_depth = depth;
        nodes_.push_back(std::move(n));
        return Var{this, static_cast<int32_t>(nodes_.size() - 1)};
    }

    void check_backward_root(Var root, uint8_t& new_depth) const {
        if (root.rec != this) throw ContractError("backward: root was not produced by this record");
        const Node& n = node(root.id);
        if (!n.value.is_scalar())
            throw ContractError("backward: root must be a 1x1 scalar, got " + n.value.shape_str());
        new_depth = static_cast<uint8_t>(n.grad_depth + 1);
        if (new_depth > max_grad_depth_) {
            throw ContractError("backward: derivative order " + std::to_string(int(new_depth)) +
                                " exceeds max_grad_depth " + std::to_string(max_grad_depth_));
        }
    }

    template <class Alg>
    void run_backward(int32_t root, Alg alg, std::vector<typename Alg::V>& adj,
                      std::vector<char>& has);

    std::vector<Node> nodes_;
    Record* parent_ = nullptr;
    int level_ = 0;
    int max_grad_depth_ = 2;
    uint8_t pending_depth_ = 0;
};

inline const Tensor& Var::value() const {
    if (!valid()) throw ContractError("Var: accessing an invalid value handle");
    return rec->node(id).value;
}

inline Var binary(Op op, Var a, Var b) {
    if (!a.valid() || !b.valid()) throw ContractError("autodiff op on an invalid value");
    if (a.rec != b.rec)
        throw ContractError(std::string(op_name(op)) +
                            ": operands belong to different computation records");
    return a.rec->emit(op, a, b);
}

inline Var unary(Op op, Var a) {
    if (!a.valid()) throw ContractError("autodiff op on an invalid value");
    return a.rec->emit(op, a);
}

inline Var add(Var a, Var b) { return binary(Op::Add, a, b); }
inline Var sub(Var a, Var b) { return binary(Op::Sub, a, b); }
inline Var mul(Var a, Var b) { return binary(Op::Mul, a, b); }
inline Var divide(Var a, Var b) { return binary(Op::Div, a, b); }
inline Var safe_div0(Var a, Var b) { return binary(Op::SafeDiv0, a, b); }
inline Var minimum(Var a, Var b) { return binary(Op::Minimum, a, b); }
inline Var maximum(Var a, Var b) { return binary(Op::Maximum, a, b); }
inline Var matmul(Var a, Var b) { return binary(Op::MatMul, a, b); }
inline Var neg(Var a) { return unary(Op::Neg, a); }
inline Var transpose(Var a) { return unary(Op::Transpose, a); }
inline Var relu(Var a) { return unary(Op::Relu, a); }
inline Var exp(Var a) { return unary(Op::Exp, a); }
inline Var log(Var a) { return unary(Op::Log, a); }
inline Var sqrt(Var a) { return unary(Op::Sqrt, a); }
inline Var sin(Var a) { return unary(Op::Sin, a); }
inline Var cos(Var a) { return unary(Op::Cos, a); }
inline Var abs(Var a) { return unary(Op::Abs, a); }
inline Var sum_all(Var a) { return unary(Op::SumAll, a); }
inline Var mean_all(Var a) { return unary(Op::MeanAll, a); }
inline Var colwise_sum(Var a) { return unary(Op::ColwiseSum, a); }
inline Var rowwise_sum(Var a) { return unary(Op::RowwiseSum, a); }
inline Var rowwise_max(Var a) { return unary(Op::RowwiseMax, a); }

// Scalar constant in the same record as `like`; the Tensor overload
// keeps templated network code working on plain tensors.
inline Var scalar_const(const Var& like, double v) {
    return like.rec->constant(Tensor::scalar(v));
}
inline Tensor scalar_const(const Tensor&, double v) { return Tensor::scalar(v); }

inline Var Record::emit(Op op, Var a, Var b) {
    if (a.rec != this || (b.valid() && b.rec != this))
        throw ContractError(std::string(op_name(op)) +
                            ": operands belong to different computation records");
    const Tensor& va = node(a.id).value;
    const Tensor* vb = b.valid() ? &node(b.id).value : nullptr;
    Tensor out;
    switch (op) {
        case Op::Add: out = metaref::add(va, *vb); break;
        case Op::Sub: out = metaref::sub(va, *vb); break;
        case Op::Mul: out = metaref::mul(va, *vb); break;
        case Op::Div: out = metaref::divide(va, *vb); break;
        case Op::SafeDiv0: out = metaref::safe_div0(va, *vb); break;
        case Op::Minimum: out = metaref::minimum(va, *vb); break;
        case Op::Maximum: out = metaref::maximum(va, *vb); break;
        case Op::MatMul: out = metaref::matmul(va, *vb); break;
        case Op::Neg: out = metaref::neg(va); break;
        case Op::Transpose: out = metaref::transpose(va); break;
        case Op::Relu: out = metaref::relu(va); break;
        case Op::Exp: out = metaref::exp(va); break;
        case Op::Log: out = metaref::log(va); break;
        case Op::Sqrt: out = metaref::sqrt(va); break;
        case Op::Sin: out = metaref::sin(va); break;
        case Op::Cos: out = metaref::cos(va); break;
        case Op::Abs: out = metaref::abs(va); break;
        case Op::SumAll: out = metaref::sum_all(va); break;
        case Op::MeanAll: out = metaref::mean_all(va); break;
        case Op::ColwiseSum: out = metaref::colwise_sum(va); break;
        case Op::RowwiseSum: out = metaref::rowwise_sum(va); break;
        case Op::RowwiseMax: out = metaref::rowwise_max(va); break;
        default:
            throw ContractError(std::string("emit: ") + op_name(op) + " is not an expression op");
    }
    const bool ng = node(a.id).needs_grad || (b.valid() && node(b.id).needs_grad);
    return push(op, std::move(out), a.id, b.valid() ? b.id : -1, ng);
}

// Result of a raw backward pass.
class Gradients {
public:
    bool has(Var v) const {
        return v.rec == rec_ && v.id >= 0 && static_cast<size_t>(v.id) < has_.size() &&
               has_[static_cast<size_t>(v.id)];
    }

    // Zero for nodes the root does not depend on.
    Tensor grad(Var v) const {
        if (v.rec != rec_) throw ContractError("Gradients::grad: value from another record");
        if (has(v)) return adj_[static_cast<size_t>(v.id)];
        return Tensor(v.rows(), v.cols());
    }

private:
    friend class Record;
    const Record* rec_ = nullptr;
    std::vector<Tensor> adj_;
    std::vector<char> has_;
};

// Result of a graph backward pass; gradients are tape values.
class VarGrads {
public:
    bool has(Var v) const {
        return v.rec == rec_ && v.id >= 0 && static_cast<size_t>(v.id) < has_.size() &&
               has_[static_cast<size_t>(v.id)];
    }

    Var grad(Var v) const {
        if (v.rec != rec_) throw ContractError("VarGrads::grad: value from another record");
        if (has(v)) return adj_[static_cast<size_t>(v.id)];
        return rec_->constant(Tensor(v.rows(), v.cols()));
    }

private:
    friend class Record;
    Record* rec_ = nullptr;
    std::vector<Var> adj_;
    std::vector<char> has_;
};

namespace detail {

struct RawAlgebra {
    using V = Tensor;
    const Record* rec;
    V value(int32_t id) const { return rec->node(id).value; }
    V lift(Tensor t) const { return t; }
    V seed() const { return Tensor::scalar(1.0); }
    V add(const V& a, const V& b) const { return metaref::add(a, b); }
    V mul(const V& a, const V& b) const { return metaref::mul(a, b); }
    V divide(const V& a, const V& b) const { return metaref::divide(a, b); }
    V safe_div0(const V& a, const V& b) const { return metaref::safe_div0(a, b); }
    V neg(const V& a) const { return metaref::neg(a); }
    V matmul(const V& a, const V& b) const { return metaref::matmul(a, b); }
    V transpose(const V& a) const { return metaref::transpose(a); }
    V sin(const V& a) const { return metaref::sin(a); }
    V cos(const V& a) const { return metaref::cos(a); }
    V reduce(const V& g, int r, int c) const { return metaref::reduce_to(g, r, c); }
};

struct GraphAlgebra {
    using V = Var;
    Record* rec;
    V value(int32_t id) const { return Var{rec, id}; }
    V lift(Tensor t) const { return rec->constant(std::move(t)); }
    V seed() const { return rec->constant(Tensor::scalar(1.0)); }
    V add(V a, V b) const { return metaref::add(a, b); }
    V mul(V a, V b) const { return metaref::mul(a, b); }
    V divide(V a, V b) const { return metaref::divide(a, b); }
    V safe_div0(V a, V b) const { return metaref::safe_div0(a, b); }
    V neg(V a) const { return metaref::neg(a); }
    V matmul(V a, V b) const { return metaref::matmul(a, b); }
    V transpose(V a) const { return metaref::transpose(a); }
    V sin(V a) const { return metaref::sin(a); }
    V cos(V a) const { return metaref::cos(a); }
    V reduce(V g, int r, int c) const {
        if (g.rows() == r && g.cols() == c) return g;
        if (r == 1 && c == 1) return metaref::sum_all(g);
        if (r == 1 && c == g.cols()) return metaref::colwise_sum(g);
        if (c == 1 && r == g.rows()) return metaref::rowwise_sum(g);
        throw ContractError("backward: cannot reduce adjoint shape");
    }
};

inline Tensor relu_mask(const Tensor& a) {
    return map(a, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

// Sign with the convention sign(0) = +1 (the adopted subgradient of |x|
// at the origin).
inline Tensor sign_mask(const Tensor& a) {
    return map(a, [](double x) { return x < 0.0 ? -1.0 : 1.0; });
}

// Tie convention for minimum/maximum: the first operand takes the whole
// adjoint.
inline Tensor min_mask_a(const Tensor& a, const Tensor& b) {
    return zip(a, b, "min_mask", [](double x, double y) { return x <= y ? 1.0 : 0.0; });
}
inline Tensor max_mask_a(const Tensor& a, const Tensor& b) {
    return zip(a, b, "max_mask", [](double x, double y) { return x >= y ? 1.0 : 0.0; });
}

inline Tensor one_minus(const Tensor& m) {
    return map(m, [](double x) { return 1.0 - x; });
}

// One-hot rows marking the first argmax of each row.
inline Tensor rowwise_argmax_mask(const Tensor& a) {
    Tensor mask(a.rows(), a.cols());
    for (int i = 0; i < a.rows(); ++i) {
        int best = 0;
        for (int j = 1; j < a.cols(); ++j)
            if (a.at(i, j) > a.at(i, best)) best = j;
        mask.at(i, best) = 1.0;
    }
    return mask;
}

} // namespace detail

template <class Alg>
void Record::run_backward(int32_t root, Alg alg, std::vector<typename Alg::V>& adj,
                          std::vector<char>& has) {
    using V = typename Alg::V;
    adj.assign(static_cast<size_t>(root) + 1, V{});
    has.assign(static_cast<size_t>(root) + 1, 0);
    if (!nodes_[static_cast<size_t>(root)].needs_grad) return;
    adj[static_cast<size_t>(root)] = alg.seed();
    has[static_cast<size_t>(root)] = 1;

    auto accum = [&](int32_t target, V contrib) {
        if (target < 0 || !nodes_[static_cast<size_t>(target)].needs_grad) return;
        auto t = static_cast<size_t>(target);
        if (has[t]) {
            adj[t] = alg.add(adj[t], std::move(contrib));
        } else {
            adj[t] = std::move(contrib);
            has[t] = 1;
        }
    };

    for (int32_t id = root; id >= 0; --id) {
        if (!has[static_cast<size_t>(id)]) continue;
        // Copy the fields we need: graph-mode ops append nodes and may
        // reallocate the tape under us.
        const Op op = nodes_[static_cast<size_t>(id)].op;
        const int32_t a = nodes_[static_cast<size_t>(id)].a;
        const int32_t b = nodes_[static_cast<size_t>(id)].b;
        if (a < 0) continue; // leaf, constant, use
        const int ra = nodes_[static_cast<size_t>(a)].value.rows();
        const int ca = nodes_[static_cast<size_t>(a)].value.cols();
        const int rb = b >= 0 ? nodes_[static_cast<size_t>(b)].value.rows() : 0;
        const int cb = b >= 0 ? nodes_[static_cast<size_t>(b)].value.cols() : 0;
        const V g = adj[static_cast<size_t>(id)];

        switch (op) {
            case Op::Add:
                accum(a, alg.reduce(g, ra, ca));
                accum(b, alg.reduce(g, rb, cb));
                break;
            case Op::Sub:
                accum(a, alg.reduce(g, ra, ca));
                accum(b, alg.reduce(alg.neg(g), rb, cb));
                break;
            case Op::Mul:
                accum(a, alg.reduce(alg.mul(g, alg.value(b)), ra, ca));
                accum(b, alg.reduce(alg.mul(g, alg.value(a)), rb, cb));
                break;
            case Op::Div: {
                accum(a, alg.reduce(alg.divide(g, alg.value(b)), ra, ca));
                auto vb = alg.value(b);
                accum(b, alg.reduce(
                             alg.neg(alg.divide(alg.mul(g, alg.value(a)), alg.mul(vb, vb))),
                             rb, cb));
                break;
            }
            case Op::SafeDiv0: {
                accum(a, alg.reduce(alg.safe_div0(g, alg.value(b)), ra, ca));
                auto vb = alg.value(b);
                accum(b, alg.reduce(
                             alg.neg(alg.mul(g, alg.safe_div0(alg.value(a), alg.mul(vb, vb)))),
                             rb, cb));
                break;
            }
            case Op::Neg:
                accum(a, alg.neg(g));
                break;
            case Op::MatMul:
                accum(a, alg.matmul(g, alg.transpose(alg.value(b))));
                accum(b, alg.matmul(alg.transpose(alg.value(a)), g));
                break;
            case Op::Transpose:
                accum(a, alg.transpose(g));
                break;
            case Op::Relu:
                accum(a, alg.mul(g, alg.lift(detail::relu_mask(nodes_[size_t(a)].value))));
                break;
            case Op::Exp:
                accum(a, alg.mul(g, alg.value(id)));
                break;
            case Op::Log:
                accum(a, alg.divide(g, alg.value(a)));
                break;
            case Op::Sqrt:
                // g / (2*sqrt(a)), defined as 0 where sqrt(a) == 0 so a
                // perfectly met target contributes no gradient.
                accum(a, alg.safe_div0(g, alg.mul(alg.lift(Tensor::scalar(2.0)), alg.value(id))));
                break;
            case Op::Sin:
                accum(a, alg.mul(g, alg.cos(alg.value(a))));
                break;
            case Op::Cos:
                accum(a, alg.neg(alg.mul(g, alg.sin(alg.value(a)))));
                break;
            case Op::Abs:
                accum(a, alg.mul(g, alg.lift(detail::sign_mask(nodes_[size_t(a)].value))));
                break;
            case Op::Minimum: {
                Tensor ma = detail::min_mask_a(nodes_[size_t(a)].value, nodes_[size_t(b)].value);
                accum(a, alg.reduce(alg.mul(g, alg.lift(ma)), ra, ca));
                accum(b, alg.reduce(alg.mul(g, alg.lift(detail::one_minus(ma))), rb, cb));
                break;
            }
            case Op::Maximum: {
                Tensor ma = detail::max_mask_a(nodes_[size_t(a)].value, nodes_[size_t(b)].value);
                accum(a, alg.reduce(alg.mul(g, alg.lift(ma)), ra, ca));
                accum(b, alg.reduce(alg.mul(g, alg.lift(detail::one_minus(ma))), rb, cb));
                break;
            }
            case Op::SumAll:
                accum(a, alg.mul(alg.lift(Tensor(ra, ca, 1.0)), g));
                break;
            case Op::MeanAll:
                accum(a, alg.mul(alg.lift(Tensor(ra, ca, 1.0 / (double(ra) * ca))), g));
                break;
            case Op::ColwiseSum:
            case Op::RowwiseSum:
                accum(a, alg.mul(alg.lift(Tensor(ra, ca, 1.0)), g));
                break;
            case Op::RowwiseMax:
                accum(a, alg.mul(alg.lift(detail::rowwise_argmax_mask(nodes_[size_t(a)].value)), g));
                break;
            case Op::Leaf:
            case Op::Constant:
            case Op::Use:
                break;
        }
    }
}

inline Gradients Record::backward_raw(Var root) {
    uint8_t new_depth = 0;
    check_backward_root(root, new_depth);
    Gradients out;
    out.rec_ = this;
    run_backward(root.id, detail::RawAlgebra{this}, out.adj_, out.has_);
    return out;
}

inline VarGrads Record::backward_graph(Var root) {
    uint8_t new_depth = 0;
    check_backward_root(root, new_depth);
    const uint8_t prev = pending_depth_;
    pending_depth_ = std::max(prev, new_depth);
    VarGrads out;
    out.rec_ = this;
    try {
        run_backward(root.id, detail::GraphAlgebra{this}, out.adj_, out.has_);
    } catch (...) {
        pending_depth_ = prev;
        throw;
    }
    pending_depth_ = prev;
    return out;
}

inline VarGrads Record::backward_detached(Var root) {
    Gradients raw = backward_raw(root);
    VarGrads out;
    out.rec_ = this;
    out.adj_.assign(raw.adj_.size(), Var{});
    out.has_ = raw.has_;
    for (size_t i = 0; i < raw.adj_.size(); ++i)
        if (raw.has_[i]) out.adj_[i] = constant(raw.adj_[i]);
    return out;
}

// One MAML-style episode: differentiate an outer loss evaluated at
// parameters updated by one inner gradient step.
struct SecondOrderOptions {
    double inner_rate = 0.1;     // step size of the inner update
    bool first_order = false;    // treat the inner gradient as a constant
    int max_grad_depth = 2;
};

struct SecondOrderResult {
    std::vector<Tensor> grads;    // d outer / d params, per parameter
    std::vector<Tensor> updated;  // parameter values after the inner step
    double inner_loss = 0.0;
    double outer_loss = 0.0;
};

// inner_fn/outer_fn: (Record&, const std::vector<Var>& params) -> Var
// scalar loss; outer_fn receives the updated parameters.
template <class InnerFn, class OuterFn>
SecondOrderResult grad_of_grad(const std::vector<Tensor>& params, InnerFn&& inner_fn,
                               OuterFn&& outer_fn, const SecondOrderOptions& opt = {}) {
    Record rec(opt.max_grad_depth);
    std::vector<Var> p;
    p.reserve(params.size());
    for (const Tensor& t : params) p.push_back(rec.leaf(t));

    Var inner_loss = inner_fn(rec, p);
    VarGrads gs = opt.first_order ? rec.backward_detached(inner_loss)
                                  : rec.backward_graph(inner_loss);
    Var rate = rec.constant(Tensor::scalar(opt.inner_rate));
    std::vector<Var> updated;
    updated.reserve(p.size());
    for (const Var& v : p) updated.push_back(sub(v, mul(rate, gs.grad(v))));

    Var outer_loss = outer_fn(rec, updated);
    Gradients g2 = rec.backward_raw(outer_loss);

    SecondOrderResult res;
    res.inner_loss = inner_loss.item();
    res.outer_loss = outer_loss.item();
    for (size_t i = 0; i < p.size(); ++i) {
        res.grads.push_back(g2.grad(p[i]));
        res.updated.push_back(updated[i].value());
    }
    return res;
}

} // namespace metaref
