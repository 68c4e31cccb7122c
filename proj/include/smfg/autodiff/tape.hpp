#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace smfg::ad {

class Tape;
class Mlp;

// A value that is either a plain constant (id < 0) or a node on a tape.
struct Var {
    Tape* tape = nullptr;
    std::int32_t id = -1;
    double v = 0.0;

    Var() = default;
    Var(double c) : v(c) {}  // NOLINT: constants convert implicitly
    Var(Tape* t, std::int32_t i, double val) : tape(t), id(i), v(val) {}

    double value() const { return v; }
    bool is_constant() const { return id < 0; }
};

inline double value_of(double x) { return x; }
inline double value_of(const Var& x) { return x.v; }

class Tape {
public:
    static constexpr std::int32_t kLeaf = -1;
    static constexpr std::int32_t kBlockOutput = -2;

    struct Node {
        std::int32_t a = kLeaf, b = kLeaf;
        double da = 0.0, db = 0.0;
    };

    Tape() { nodes_.reserve(1 << 16); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }
    std::size_t n_params() const { return theta_.size(); }
    std::span<const double> theta() const { return theta_; }

    // Registers theta as contiguous parameter leaves. Call once, before anything else.
    void set_parameters(std::span<const double> theta) {
        if (!theta_.empty() || !nodes_.empty())
            throw std::logic_error("tape: parameters must be registered first on an empty tape");
        theta_.assign(theta.begin(), theta.end());
        nodes_.resize(theta_.size());
    }
    Var param(std::size_t k) {
        if (k >= theta_.size()) throw std::out_of_range("tape: parameter index");
        return Var(this, static_cast<std::int32_t>(k), theta_[k]);
    }

    Var leaf(double value) {
        nodes_.push_back(Node{});
        return Var(this, last(), value);
    }

    Var unary(double value, const Var& x, double dx) {
        if (x.is_constant()) return Var(value);
        check(x);
        nodes_.push_back(Node{x.id, kLeaf, dx, 0.0});
        return Var(this, last(), value);
    }

    Var binary(double value, const Var& x, double dx, const Var& y, double dy) {
        if (x.is_constant()) return unary(value, y, dy);
        if (y.is_constant()) return unary(value, x, dx);
        check(x);
        check(y);
        nodes_.push_back(Node{x.id, y.id, dx, dy});
        return Var(this, last(), value);
    }

    // Evaluates net on input (records one block node per output).
    // theta_offset locates the net's weights among the registered parameters.
    std::vector<Var> call(const Mlp& net, std::span<const Var> input, std::size_t theta_offset);

    // d(out)/d(theta); out must live on this tape (or be a constant, giving zeros).
    std::vector<double> gradient(const Var& out) const {
        std::vector<double> adj = adjoints(out);
        adj.resize(theta_.size());
        return adj;
    }

    // Full adjoint vector indexed by node id.
    std::vector<double> adjoints(const Var& out) const;

private:
    struct Block {
        const Mlp* net;
        std::int32_t first_output;
        std::int32_t n_out;
        std::size_t theta_offset;
        std::size_t cache_offset;
        std::vector<std::int32_t> input_ids;  // -1 for constant inputs
    };

    std::int32_t last() const { return static_cast<std::int32_t>(nodes_.size()) - 1; }
    void check(const Var& x) const {
        if (x.tape != this || x.id >= static_cast<std::int32_t>(nodes_.size()))
            throw std::invalid_argument("tape: variable belongs to another tape");
    }

    std::vector<Node> nodes_;
    std::vector<double> theta_;
    std::vector<Block> blocks_;
    std::vector<double> cache_;
};

// ---- arithmetic ----

namespace detail {
inline Tape* tape_of(const Var& a, const Var& b) { return a.tape ? a.tape : b.tape; }
}  // namespace detail

inline Var operator+(const Var& a, const Var& b) {
    Tape* t = detail::tape_of(a, b);
    if (!t) return Var(a.v + b.v);
    return t->binary(a.v + b.v, a, 1.0, b, 1.0);
}
inline Var operator-(const Var& a, const Var& b) {
    Tape* t = detail::tape_of(a, b);
    if (!t) return Var(a.v - b.v);
    return t->binary(a.v - b.v, a, 1.0, b, -1.0);
}
inline Var operator*(const Var& a, const Var& b) {
    Tape* t = detail::tape_of(a, b);
    if (!t) return Var(a.v * b.v);
    return t->binary(a.v * b.v, a, b.v, b, a.v);
}
inline Var operator/(const Var& a, const Var& b) {
    Tape* t = detail::tape_of(a, b);
    const double q = a.v / b.v;
    if (!t) return Var(q);
    return t->binary(q, a, 1.0 / b.v, b, -q / b.v);
}
inline Var operator-(const Var& a) {
    if (!a.tape) return Var(-a.v);
    return a.tape->unary(-a.v, a, -1.0);
}
inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }

inline Var exp(const Var& x) {
    const double e = std::exp(x.v);
    return x.tape ? x.tape->unary(e, x, e) : Var(e);
}
inline Var log(const Var& x) {
    const double l = std::log(x.v);
    return x.tape ? x.tape->unary(l, x, 1.0 / x.v) : Var(l);
}
inline Var sqrt(const Var& x) {
    const double s = std::sqrt(x.v);
    return x.tape ? x.tape->unary(s, x, 0.5 / s) : Var(s);
}
inline Var tanh(const Var& x) {
    const double h = std::tanh(x.v);
    return x.tape ? x.tape->unary(h, x, 1.0 - h * h) : Var(h);
}
inline Var sigmoid(const Var& x) {
    const double s = 1.0 / (1.0 + std::exp(-x.v));
    return x.tape ? x.tape->unary(s, x, s * (1.0 - s)) : Var(s);
}
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

template <class T>
T square(const T& x) { return x * x; }

// Projection onto [lo, hi]; the derivative is zero on the clamped side.
inline double clamp_to(double x, double lo, double hi) { return x < lo ? lo : (x > hi ? hi : x); }
inline Var clamp_to(const Var& x, double lo, double hi) {
    if (x.v < lo) return Var(lo);
    if (x.v > hi) return Var(hi);
    return x;
}

}  // namespace smfg::ad

#include "smfg/autodiff/mlp.hpp"

namespace smfg::ad {

inline std::vector<Var> Tape::call(const Mlp& net, std::span<const Var> input, std::size_t theta_offset) {
    if (input.size() != net.n_in()) throw std::invalid_argument("net_forward: input dimension mismatch");
    if (theta_offset + net.n_params() > theta_.size())
        throw std::invalid_argument("net_forward: parameters not registered on tape");

    Block blk{&net, 0, static_cast<std::int32_t>(net.n_out()), theta_offset, cache_.size(), {}};
    blk.input_ids.resize(input.size());
    bool any_var = false;
    for (std::size_t i = 0; i < input.size(); ++i) {
        if (!input[i].is_constant()) {
            check(input[i]);
            any_var = true;
        }
        blk.input_ids[i] = input[i].id;
    }
    if (!any_var) blk.input_ids.clear();

    cache_.resize(cache_.size() + net.cache_size());
    double* c = cache_.data() + blk.cache_offset;
    for (std::size_t i = 0; i < input.size(); ++i) c[i] = input[i].v;
    std::vector<double> out(net.n_out());
    net.forward_cached(theta_.data() + theta_offset, c, out.data());

    const auto idx = static_cast<std::int32_t>(blocks_.size());
    blk.first_output = static_cast<std::int32_t>(nodes_.size());
    std::vector<Var> res(out.size());
    for (std::size_t k = 0; k < out.size(); ++k) {
        nodes_.push_back(Node{kBlockOutput, idx, 0.0, 0.0});
        res[k] = Var(this, last(), out[k]);
    }
    blocks_.push_back(std::move(blk));
    return res;
}

inline std::vector<double> Tape::adjoints(const Var& out) const {
    std::vector<double> adj(nodes_.size(), 0.0);
    if (out.is_constant()) return adj;
    check(out);
    adj[out.id] = 1.0;
    std::vector<double> din, dout;
    for (std::int32_t i = out.id; i >= 0; --i) {
        const Node& n = nodes_[i];
        if (n.a == kBlockOutput) {
            const Block& blk = blocks_[n.b];
            if (i != blk.first_output) continue;
            dout.assign(adj.begin() + blk.first_output, adj.begin() + blk.first_output + blk.n_out);
            din.assign(blk.net->n_in(), 0.0);
            // parameter leaves are nodes [0, n_params), so theta_offset indexes adj directly
            blk.net->backward_cached(theta_.data() + blk.theta_offset, cache_.data() + blk.cache_offset,
                                     dout.data(), adj.data() + blk.theta_offset,
                                     blk.input_ids.empty() ? nullptr : din.data());
            for (std::size_t k = 0; k < blk.input_ids.size(); ++k)
                if (blk.input_ids[k] >= 0) adj[blk.input_ids[k]] += din[k];
            continue;
        }
        const double g = adj[i];
        if (g == 0.0) continue;
        if (n.a >= 0) adj[n.a] += g * n.da;
        if (n.b >= 0) adj[n.b] += g * n.db;
    }
    return adj;
}

}  // namespace smfg::ad
