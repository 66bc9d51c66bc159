#pragma once

#include "evseg/autodiff/array.hpp"
#include "evseg/autodiff/kernels.hpp"
#include "evseg/autodiff/special.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace evseg::ad {

enum class Op : std::uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    MatMul,
    Conv2d,
    MaxPool2,
    Upsample2,
    Relu,
    Softplus,
    Exp,
    Log,
    LogGamma,
    Digamma,
    Sum,
    Mean,
    Clamp,
    SumAxis0,
    Broadcast0,
    Select0,
};

inline std::string_view op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Add: return "add";
        case Op::Sub: return "subtract";
        case Op::Mul: return "multiply";
        case Op::Div: return "divide";
        case Op::Scale: return "scale";
        case Op::AddScalar: return "add-scalar";
        case Op::MatMul: return "matmul";
        case Op::Conv2d: return "conv2d";
        case Op::MaxPool2: return "maxpool2";
        case Op::Upsample2: return "upsample2";
        case Op::Relu: return "relu";
        case Op::Softplus: return "softplus";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::LogGamma: return "lgamma";
        case Op::Digamma: return "digamma";
        case Op::Sum: return "sum";
        case Op::Mean: return "mean";
        case Op::Clamp: return "clamp";
        case Op::SumAxis0: return "sum-axis0";
        case Op::Broadcast0: return "broadcast-axis0";
        case Op::Select0: return "select-axis0";
    }
    return "?";
}

namespace fault {
// Negates the backward rule of one op kind. Only the self-test sensitivity fixture sets this.
inline std::optional<Op> sign_flip;
}  // namespace fault

struct OpParams {
    double scalar = 0.0;
    double lo = 0.0;
    double hi = 0.0;
    std::size_t count = 0;
};

class Tape;

// Handle to a value recorded on a tape.
class Var {
public:
    Var() = default;
    Var(const Tape* tape, int id) : tape_(tape), id_(id) {}

    int id() const noexcept { return id_; }
    const Tape* tape() const noexcept { return tape_; }
    bool valid() const noexcept { return tape_ != nullptr && id_ >= 0; }
    inline const Array& value() const;
    const Shape& shape() const { return value().shape; }
    inline bool requires_grad() const;

private:
    const Tape* tape_ = nullptr;
    int id_ = -1;
};

class Gradients {
public:
    explicit Gradients(std::vector<Array> grads) : grads_(std::move(grads)) {}

    bool has(const Var& v) const {
        return v.id() >= 0 && static_cast<std::size_t>(v.id()) < grads_.size() && !grads_[v.id()].empty();
    }
    // Inputs the loss does not depend on get an all-zero array of the right shape.
    Array operator[](const Var& v) const {
        if (has(v)) return grads_[v.id()];
        return Array(v.shape(), 0.0);
    }

private:
    std::vector<Array> grads_;
};

class Tape {
public:
    struct Node {
        Op op = Op::Leaf;
        std::array<int, 3> inputs{-1, -1, -1};
        Array value;
        bool requires_grad = false;
        OpParams params;
        std::vector<std::uint32_t> argmax;  // max-pool winners
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Array value) { return push(Node{Op::Leaf, {-1, -1, -1}, std::move(value), false, {}, {}}); }
    Var variable(Array value) { return push(Node{Op::Leaf, {-1, -1, -1}, std::move(value), true, {}, {}}); }

    // Appends one operation and returns its forward value.
    Var record(Op op, std::initializer_list<Var> inputs, OpParams params = {});

    Gradients backward(const Var& loss) const;

    const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
    std::size_t size() const noexcept { return nodes_.size(); }

private:
    Var push(Node node) {
        nodes_.push_back(std::move(node));
        return Var(this, static_cast<int>(nodes_.size() - 1));
    }

    std::vector<Node> nodes_;
};

inline const Array& Var::value() const {
    if (!valid()) throw std::logic_error("value() on an unbound Var");
    return tape_->node(id_).value;
}

inline bool Var::requires_grad() const { return tape_->node(id_).requires_grad; }

namespace detail {

[[noreturn]] inline void shape_error(Op op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op_name(op)) + ": shape mismatch " + to_string(a) + " vs " +
                                to_string(b));
}

inline void require_positive(Op op, const Array& x) {
    for (double v : x.data) {
        if (v <= 0.0) {  // NaN passes through so the training loop can report it
            throw std::domain_error(std::string(op_name(op)) + ": argument " + std::to_string(v) +
                                    " <= 0 (missing clamp upstream)");
        }
    }
}

template <class F>
Array map(const Array& x, F f) {
    Array out(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = f(x.data[i]);
    return out;
}

template <class F>
Array zip(const Array& a, const Array& b, F f) {
    Array out(a.shape);
    for (std::size_t i = 0; i < a.size(); ++i) out.data[i] = f(a.data[i], b.data[i]);
    return out;
}

inline void accumulate(std::vector<Array>& grads, int id, Array g) {
    auto& slot = grads[static_cast<std::size_t>(id)];
    if (slot.data.empty()) {
        slot = std::move(g);
        return;
    }
    for (std::size_t i = 0; i < slot.size(); ++i) slot.data[i] += g.data[i];
}

inline std::size_t trailing_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t i = 1; i < s.size(); ++i) n *= s[i];
    return n;
}

inline Shape drop_leading(const Shape& s) { return Shape(s.begin() + 1, s.end()); }

}  // namespace detail

inline Var Tape::record(Op op, std::initializer_list<Var> inputs, OpParams params) {
    std::array<int, 3> ids{-1, -1, -1};
    std::array<const Array*, 3> in{nullptr, nullptr, nullptr};
    bool needs_grad = false;
    std::size_t k = 0;
    for (const Var& v : inputs) {
        if (v.tape() != this) throw std::invalid_argument(std::string(op_name(op)) + ": input from another tape");
        ids[k] = v.id();
        in[k] = &nodes_[static_cast<std::size_t>(v.id())].value;
        needs_grad = needs_grad || nodes_[static_cast<std::size_t>(v.id())].requires_grad;
        ++k;
    }

    const std::size_t arity = op == Op::Conv2d ? 3
                              : (op == Op::Add || op == Op::Sub || op == Op::Mul || op == Op::Div || op == Op::MatMul) ? 2
                                                                                                                         : 1;
    if (op != Op::Leaf && k != arity) {
        throw std::invalid_argument(std::string(op_name(op)) + ": expected " + std::to_string(arity) + " inputs, got " +
                                    std::to_string(k));
    }

    Node node;
    node.op = op;
    node.inputs = ids;
    node.params = params;
    node.requires_grad = needs_grad;

    switch (op) {
        case Op::Leaf:
            throw std::invalid_argument("record: leaf values are created with constant()/variable()");
        case Op::Add:
        case Op::Sub:
        case Op::Mul:
        case Op::Div: {
            const Array& a = *in[0];
            const Array& b = *in[1];
            if (a.shape != b.shape) detail::shape_error(op, a.shape, b.shape);
            if (op == Op::Add) node.value = detail::zip(a, b, [](double x, double y) { return x + y; });
            if (op == Op::Sub) node.value = detail::zip(a, b, [](double x, double y) { return x - y; });
            if (op == Op::Mul) node.value = detail::zip(a, b, [](double x, double y) { return x * y; });
            if (op == Op::Div) node.value = detail::zip(a, b, [](double x, double y) { return x / y; });
            break;
        }
        case Op::Scale: node.value = detail::map(*in[0], [s = params.scalar](double x) { return s * x; }); break;
        case Op::AddScalar:
            node.value = detail::map(*in[0], [s = params.scalar](double x) { return x + s; });
            break;
        case Op::MatMul: {
            const Array& a = *in[0];
            const Array& b = *in[1];
            if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0]) detail::shape_error(op, a.shape, b.shape);
            node.value = Array(Shape{a.shape[0], b.shape[1]});
            kernels::ConstMatrixMap ma(a.data.data(), a.shape[0], a.shape[1]);
            kernels::ConstMatrixMap mb(b.data.data(), b.shape[0], b.shape[1]);
            kernels::MatrixMap mc(node.value.data.data(), a.shape[0], b.shape[1]);
            mc.noalias() = ma * mb;
            break;
        }
        case Op::Conv2d: {
            const Array& x = *in[0];
            const Array& w = *in[1];
            const Array& b = *in[2];
            if (x.rank() != 3 || w.rank() != 4 || w.shape[1] != x.shape[0] || w.shape[2] != w.shape[3] ||
                w.shape[2] % 2 == 0) {
                detail::shape_error(op, x.shape, w.shape);
            }
            if (b.shape != Shape{w.shape[0]}) detail::shape_error(op, w.shape, b.shape);
            const kernels::ConvGeometry g{x.shape[0], w.shape[0], x.shape[1], x.shape[2], w.shape[2]};
            node.value = Array(Shape{g.out_channels, g.height, g.width});
            kernels::conv2d_forward(g, x.data.data(), w.data.data(), b.data.data(), node.value.data.data());
            break;
        }
        case Op::MaxPool2: {
            const Array& x = *in[0];
            if (x.rank() != 3 || x.shape[1] % 2 != 0 || x.shape[2] % 2 != 0) {
                detail::shape_error(op, x.shape, Shape{0, 2, 2});
            }
            const std::size_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
            node.value = Array(Shape{c, h / 2, w / 2});
            node.argmax.resize(node.value.size());
            std::size_t o = 0;
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t r = 0; r < h; r += 2) {
                    for (std::size_t col = 0; col < w; col += 2, ++o) {
                        std::size_t best = (ch * h + r) * w + col;
                        for (std::size_t idx : {best + 1, best + w, best + w + 1}) {
                            if (x.data[idx] > x.data[best]) best = idx;
                        }
                        node.value.data[o] = x.data[best];
                        node.argmax[o] = static_cast<std::uint32_t>(best);
                    }
                }
            }
            break;
        }
        case Op::Upsample2: {
            const Array& x = *in[0];
            if (x.rank() != 3) detail::shape_error(op, x.shape, Shape{0, 0, 0});
            const std::size_t c = x.shape[0], h = x.shape[1], w = x.shape[2];
            node.value = Array(Shape{c, 2 * h, 2 * w});
            for (std::size_t ch = 0; ch < c; ++ch) {
                for (std::size_t r = 0; r < 2 * h; ++r) {
                    for (std::size_t col = 0; col < 2 * w; ++col) {
                        node.value.at(ch, r, col) = x.at(ch, r / 2, col / 2);
                    }
                }
            }
            break;
        }
        case Op::Relu: node.value = detail::map(*in[0], [](double x) { return x < 0.0 ? 0.0 : x; }); break;
        case Op::Softplus:
            node.value = detail::map(*in[0], [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); });
            break;
        case Op::Exp: node.value = detail::map(*in[0], [](double x) { return std::exp(x); }); break;
        case Op::Log:
            detail::require_positive(op, *in[0]);
            node.value = detail::map(*in[0], [](double x) { return std::log(x); });
            break;
        case Op::LogGamma:
            detail::require_positive(op, *in[0]);
            node.value = detail::map(*in[0], special::log_gamma);
            break;
        case Op::Digamma:
            detail::require_positive(op, *in[0]);
            node.value = detail::map(*in[0], special::digamma);
            break;
        case Op::Sum:
        case Op::Mean: {
            double s = 0.0;
            for (double v : in[0]->data) s += v;
            if (op == Op::Mean) s /= static_cast<double>(in[0]->size());
            node.value = Array::scalar(s);
            break;
        }
        case Op::Clamp:
            if (!(params.lo <= params.hi)) throw std::invalid_argument("clamp: empty interval");
            node.value = detail::map(*in[0], [&](double x) { return std::clamp(x, params.lo, params.hi); });
            break;
        case Op::SumAxis0: {
            const Array& x = *in[0];
            if (x.rank() < 1) detail::shape_error(op, x.shape, Shape{1});
            const std::size_t inner = detail::trailing_size(x.shape);
            node.value = Array(detail::drop_leading(x.shape));
            for (std::size_t n = 0; n < x.shape[0]; ++n) {
                for (std::size_t i = 0; i < inner; ++i) node.value.data[i] += x.data[n * inner + i];
            }
            break;
        }
        case Op::Broadcast0: {
            const Array& x = *in[0];
            Shape s{params.count};
            s.insert(s.end(), x.shape.begin(), x.shape.end());
            node.value = Array(s);
            for (std::size_t n = 0; n < params.count; ++n) {
                std::copy(x.data.begin(), x.data.end(), node.value.data.begin() + static_cast<long>(n * x.size()));
            }
            break;
        }
        case Op::Select0: {
            const Array& x = *in[0];
            if (x.rank() < 1 || params.count >= x.shape[0]) detail::shape_error(op, x.shape, Shape{params.count});
            const std::size_t inner = detail::trailing_size(x.shape);
            node.value = Array(detail::drop_leading(x.shape));
            std::copy_n(x.data.begin() + static_cast<long>(params.count * inner), inner, node.value.data.begin());
            break;
        }
    }
    return push(std::move(node));
}

inline Gradients Tape::backward(const Var& loss) const {
    if (loss.tape() != this) throw std::invalid_argument("backward: loss recorded on another tape");
    if (!loss.value().shape.empty()) {
        throw std::invalid_argument("backward: loss must be a scalar, got shape " + to_string(loss.value().shape));
    }
    std::vector<Array> grads(nodes_.size());
    grads[static_cast<std::size_t>(loss.id())] = Array::scalar(1.0);

    for (int id = loss.id(); id >= 0; --id) {
        const Node& node = nodes_[static_cast<std::size_t>(id)];
        if (node.op == Op::Leaf || !node.requires_grad || grads[static_cast<std::size_t>(id)].data.empty()) continue;
        Array flipped;
        const Array* gp = &grads[static_cast<std::size_t>(id)];
        if (fault::sign_flip && *fault::sign_flip == node.op) {
            flipped = detail::map(*gp, [](double v) { return -v; });
            gp = &flipped;
        }
        const Array& g = *gp;

        auto wants = [&](int slot) {
            const int in = node.inputs[static_cast<std::size_t>(slot)];
            return in >= 0 && nodes_[static_cast<std::size_t>(in)].requires_grad;
        };
        auto input = [&](int slot) -> const Array& {
            return nodes_[static_cast<std::size_t>(node.inputs[static_cast<std::size_t>(slot)])].value;
        };
        auto send = [&](int slot, Array value) { detail::accumulate(grads, node.inputs[static_cast<std::size_t>(slot)], std::move(value)); };

        switch (node.op) {
            case Op::Leaf: break;
            case Op::Add:
                if (wants(0)) send(0, g);
                if (wants(1)) send(1, g);
                break;
            case Op::Sub:
                if (wants(0)) send(0, g);
                if (wants(1)) send(1, detail::map(g, [](double v) { return -v; }));
                break;
            case Op::Mul:
                if (wants(0)) send(0, detail::zip(g, input(1), [](double a, double b) { return a * b; }));
                if (wants(1)) send(1, detail::zip(g, input(0), [](double a, double b) { return a * b; }));
                break;
            case Op::Div: {
                const Array& b = input(1);
                if (wants(0)) send(0, detail::zip(g, b, [](double a, double d) { return a / d; }));
                if (wants(1)) {
                    Array gb(b.shape);
                    const Array& a = input(0);
                    for (std::size_t i = 0; i < gb.size(); ++i) gb.data[i] = -g.data[i] * a.data[i] / (b.data[i] * b.data[i]);
                    send(1, std::move(gb));
                }
                break;
            }
            case Op::Scale: send(0, detail::map(g, [s = node.params.scalar](double v) { return s * v; })); break;
            case Op::AddScalar: send(0, g); break;
            case Op::MatMul: {
                const Array& a = input(0);
                const Array& b = input(1);
                kernels::ConstMatrixMap mg(g.data.data(), a.shape[0], b.shape[1]);
                if (wants(0)) {
                    Array ga(a.shape);
                    kernels::MatrixMap m(ga.data.data(), a.shape[0], a.shape[1]);
                    m.noalias() = mg * kernels::ConstMatrixMap(b.data.data(), b.shape[0], b.shape[1]).transpose();
                    send(0, std::move(ga));
                }
                if (wants(1)) {
                    Array gb(b.shape);
                    kernels::MatrixMap m(gb.data.data(), b.shape[0], b.shape[1]);
                    m.noalias() = kernels::ConstMatrixMap(a.data.data(), a.shape[0], a.shape[1]).transpose() * mg;
                    send(1, std::move(gb));
                }
                break;
            }
            case Op::Conv2d: {
                const Array& x = input(0);
                const Array& w = input(1);
                const kernels::ConvGeometry geo{x.shape[0], w.shape[0], x.shape[1], x.shape[2], w.shape[2]};
                Array gx, gw, gbias;
                if (wants(0)) gx = Array(x.shape);
                if (wants(1)) gw = Array(w.shape);
                if (wants(2)) gbias = Array(input(2).shape);
                kernels::conv2d_backward(geo, x.data.data(), w.data.data(), g.data.data(),
                                         wants(0) ? gx.data.data() : nullptr, wants(1) ? gw.data.data() : nullptr,
                                         wants(2) ? gbias.data.data() : nullptr);
                if (wants(0)) send(0, std::move(gx));
                if (wants(1)) send(1, std::move(gw));
                if (wants(2)) send(2, std::move(gbias));
                break;
            }
            case Op::MaxPool2: {
                Array gx(input(0).shape);
                for (std::size_t o = 0; o < g.size(); ++o) gx.data[node.argmax[o]] += g.data[o];
                send(0, std::move(gx));
                break;
            }
            case Op::Upsample2: {
                const Array& x = input(0);
                Array gx(x.shape);
                for (std::size_t ch = 0; ch < g.shape[0]; ++ch) {
                    for (std::size_t r = 0; r < g.shape[1]; ++r) {
                        for (std::size_t col = 0; col < g.shape[2]; ++col) gx.at(ch, r / 2, col / 2) += g.at(ch, r, col);
                    }
                }
                send(0, std::move(gx));
                break;
            }
            case Op::Relu:
                send(0, detail::zip(g, input(0), [](double d, double x) { return x > 0.0 ? d : 0.0; }));
                break;
            case Op::Softplus:
                send(0, detail::zip(g, input(0), [](double d, double x) { return d / (1.0 + std::exp(-x)); }));
                break;
            case Op::Exp:
                send(0, detail::zip(g, node.value, [](double d, double y) { return d * y; }));
                break;
            case Op::Log:
                send(0, detail::zip(g, input(0), [](double d, double x) { return d / x; }));
                break;
            case Op::LogGamma:
                send(0, detail::zip(g, input(0), [](double d, double x) { return d * special::digamma(x); }));
                break;
            case Op::Digamma:
                send(0, detail::zip(g, input(0), [](double d, double x) { return d * special::trigamma(x); }));
                break;
            case Op::Sum:
            case Op::Mean: {
                const Array& x = input(0);
                const double scale = node.op == Op::Mean ? 1.0 / static_cast<double>(x.size()) : 1.0;
                send(0, Array(x.shape, g.data[0] * scale));
                break;
            }
            case Op::Clamp: {
                const double lo = node.params.lo, hi = node.params.hi;
                send(0, detail::zip(g, input(0), [=](double d, double x) { return (x >= lo && x <= hi) ? d : 0.0; }));
                break;
            }
            case Op::SumAxis0: {
                const Array& x = input(0);
                Array gx(x.shape);
                const std::size_t inner = g.size();
                for (std::size_t n = 0; n < x.shape[0]; ++n) {
                    std::copy(g.data.begin(), g.data.end(), gx.data.begin() + static_cast<long>(n * inner));
                }
                send(0, std::move(gx));
                break;
            }
            case Op::Broadcast0: {
                const Array& x = input(0);
                Array gx(x.shape);
                for (std::size_t n = 0; n < node.params.count; ++n) {
                    for (std::size_t i = 0; i < x.size(); ++i) gx.data[i] += g.data[n * x.size() + i];
                }
                send(0, std::move(gx));
                break;
            }
            case Op::Select0: {
                const Array& x = input(0);
                Array gx(x.shape);
                std::copy(g.data.begin(), g.data.end(), gx.data.begin() + static_cast<long>(node.params.count * g.size()));
                send(0, std::move(gx));
                break;
            }
        }
    }
    return Gradients(std::move(grads));
}

// Named wrappers over Tape::record.

inline Tape& tape_of(const Var& v) { return const_cast<Tape&>(*v.tape()); }

inline Var add(const Var& a, const Var& b) { return tape_of(a).record(Op::Add, {a, b}); }
inline Var sub(const Var& a, const Var& b) { return tape_of(a).record(Op::Sub, {a, b}); }
inline Var mul(const Var& a, const Var& b) { return tape_of(a).record(Op::Mul, {a, b}); }
inline Var div(const Var& a, const Var& b) { return tape_of(a).record(Op::Div, {a, b}); }
inline Var scale(const Var& a, double s) { return tape_of(a).record(Op::Scale, {a}, {.scalar = s}); }
inline Var add_scalar(const Var& a, double s) { return tape_of(a).record(Op::AddScalar, {a}, {.scalar = s}); }
inline Var matmul(const Var& a, const Var& b) { return tape_of(a).record(Op::MatMul, {a, b}); }
inline Var conv2d(const Var& x, const Var& w, const Var& b) { return tape_of(x).record(Op::Conv2d, {x, w, b}); }
inline Var maxpool2(const Var& x) { return tape_of(x).record(Op::MaxPool2, {x}); }
inline Var upsample2(const Var& x) { return tape_of(x).record(Op::Upsample2, {x}); }
inline Var relu(const Var& x) { return tape_of(x).record(Op::Relu, {x}); }
inline Var softplus(const Var& x) { return tape_of(x).record(Op::Softplus, {x}); }
inline Var exp(const Var& x) { return tape_of(x).record(Op::Exp, {x}); }
inline Var log(const Var& x) { return tape_of(x).record(Op::Log, {x}); }
inline Var lgamma(const Var& x) { return tape_of(x).record(Op::LogGamma, {x}); }
inline Var digamma(const Var& x) { return tape_of(x).record(Op::Digamma, {x}); }
inline Var sum(const Var& x) { return tape_of(x).record(Op::Sum, {x}); }
inline Var mean(const Var& x) { return tape_of(x).record(Op::Mean, {x}); }
inline Var clamp(const Var& x, double lo, double hi) { return tape_of(x).record(Op::Clamp, {x}, {.lo = lo, .hi = hi}); }
inline Var sum_axis0(const Var& x) { return tape_of(x).record(Op::SumAxis0, {x}); }
inline Var broadcast_axis0(const Var& x, std::size_t n) { return tape_of(x).record(Op::Broadcast0, {x}, {.count = n}); }
inline Var select_axis0(const Var& x, std::size_t i) { return tape_of(x).record(Op::Select0, {x}, {.count = i}); }

// 1 - x, elementwise.
inline Var one_minus(const Var& x) { return add_scalar(scale(x, -1.0), 1.0); }

inline Var constant_like(const Var& v, Array value) { return tape_of(v).constant(std::move(value)); }

}  // namespace evseg::ad
