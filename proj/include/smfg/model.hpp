#pragma once

#include <array>
#include <cmath>
#include <string>
#include <string_view>
#include <stdexcept>
#include <vector>

#include "smfg/autodiff/tape.hpp"

namespace smfg {

inline constexpr int kMaxStates = 5;

template <class T>
using Vec = std::array<T, kMaxStates>;
using StateVec = Vec<double>;
using RateMatrix = std::array<StateVec, kMaxStates>;

using ad::clamp_to;
using ad::value_of;

enum class ModelKind { sir, seird };

struct ModelParams {
    double beta = 0, gamma = 0, eta = 0, epsilon = 0, delta = 0;
    double c_lambda = 0, c_I = 0, c_D = 0, c_inf = 0, c_d = 0;
    // indexed by policy state (S,I,R or S,E,I,R); empty means all zero
    std::vector<double> beta_bar, lambda_bar;
    double kappa = 0;
};

struct Edge {
    int from, to;
    bool infection;  // rate beta * a * w(I); otherwise a constant
    double rate;     // used when !infection
};

struct ExtendedMeanField {
    StateVec p{}, w{};
};

// Recommended contact levels per state; D (if present) carries 0.
struct PolicyVector {
    StateVec lambda{};
};

struct ModelSpec {
    ModelKind kind = ModelKind::sir;
    std::vector<std::string> states;
    std::vector<Edge> graph;
    ModelParams params;
    double horizon = 0;
    StateVec p0{};

    int S = 0, E = -1, I = 1, R = 2, D = -1;
    int infect_to = 1;
    std::vector<int> policy_states;

    int m() const { return static_cast<int>(states.size()); }

    int index(std::string_view label) const {
        for (int e = 0; e < m(); ++e)
            if (states[e] == label) return e;
        throw std::invalid_argument("unknown state label '" + std::string(label) + "'");
    }

    // Out-edges of e ordered by destination index.
    std::vector<const Edge*> out_edges(int e) const {
        std::vector<const Edge*> r;
        for (const auto& ed : graph)
            if (ed.from == e) r.push_back(&ed);
        return r;
    }

    double beta_bar(int policy_slot) const {
        return params.beta_bar.empty() ? 0.0 : params.beta_bar[policy_slot];
    }
    double lambda_bar(int policy_slot) const {
        return params.lambda_bar.empty() ? 0.0 : params.lambda_bar[policy_slot];
    }

    // Upper bound on any row's total exit rate (actions and w(I) are at most 1).
    double max_exit_rate() const {
        double best = 0;
        for (int e = 0; e < m(); ++e) {
            double s = 0;
            for (const auto& ed : graph)
                if (ed.from == e) s += ed.infection ? params.beta : ed.rate;
            best = std::max(best, s);
        }
        return best;
    }

    void rebuild() {
        const auto& q = params;
        graph.clear();
        if (kind == ModelKind::sir) {
            states = {"S", "I", "R"};
            S = 0, E = -1, I = 1, R = 2, D = -1;
            infect_to = I;
            graph = {{S, I, true, 0}, {I, R, false, q.gamma}, {R, S, false, q.eta}};
            policy_states = {S, I, R};
        } else {
            states = {"S", "E", "I", "R", "D"};
            S = 0, E = 1, I = 2, R = 3, D = 4;
            infect_to = E;
            graph = {{S, E, true, 0},
                     {E, I, false, q.epsilon},
                     {I, R, false, q.gamma},
                     {I, D, false, q.delta},
                     {R, S, false, q.eta}};
            policy_states = {S, E, I, R};
        }
    }

    void validate() const {
        const auto& q = params;
        for (double x : {q.beta, q.gamma, q.eta, q.epsilon, q.delta, q.c_lambda, q.c_I, q.c_D, q.c_inf, q.c_d})
            if (!(x >= 0)) throw std::invalid_argument("model params: rates and weights must be >= 0");
        if (!(q.c_lambda > 0)) throw std::invalid_argument("model params: c_lambda must be > 0");
        const std::size_t np = policy_states.size();
        if (!q.beta_bar.empty() && q.beta_bar.size() != np)
            throw std::invalid_argument("model params: beta_bar needs one entry per policy state");
        if (!q.lambda_bar.empty() && q.lambda_bar.size() != np)
            throw std::invalid_argument("model params: lambda_bar needs one entry per policy state");
        for (double x : q.beta_bar)
            if (!(x >= 0)) throw std::invalid_argument("model params: beta_bar must be >= 0");
        for (double x : q.lambda_bar)
            if (!(x >= 0)) throw std::invalid_argument("model params: lambda_bar must be >= 0");
        if (!(horizon > 0) || !std::isfinite(horizon)) throw std::invalid_argument("model: horizon must be > 0");
        double s = 0;
        for (int e = 0; e < m(); ++e) {
            if (!(p0[e] >= 0)) throw std::invalid_argument("model: p0 entries must be >= 0");
            s += p0[e];
        }
        if (std::abs(s - 1.0) > 1e-12) throw std::invalid_argument("model: p0 must sum to 1");
        for (const auto& ed : graph)
            if (ed.from == ed.to) throw std::invalid_argument("model: graph has a self-loop");
    }

    static ModelSpec make(ModelKind kind, ModelParams params, double horizon, std::vector<double> p0) {
        ModelSpec s;
        s.kind = kind;
        s.params = std::move(params);
        s.horizon = horizon;
        s.rebuild();
        if (static_cast<int>(p0.size()) != s.m()) throw std::invalid_argument("model: p0 has wrong length");
        for (int e = 0; e < s.m(); ++e) s.p0[e] = p0[e];
        s.validate();
        return s;
    }
};

// ---- generic formulas (double or ad::Var) ----

template <class T>
T edge_rate(const ModelSpec& spec, const Edge& ed, const T& a, const T& w_infected) {
    if (ed.infection) return spec.params.beta * a * w_infected;
    return T(ed.rate);
}

template <class T>
T running_cost(const ModelSpec& spec, int x, const T& a, const Vec<T>& lam) {
    const auto& q = spec.params;
    if (x == spec.S) return 0.5 * q.c_lambda * ad::square(lam[x] - a);
    if (x == spec.I) return 0.5 * ad::square(lam[x] - a) + q.c_I;
    if (x == spec.D) return T(q.c_D);
    if (x == spec.E || x == spec.R) return 0.5 * ad::square(lam[x] - a);
    throw std::invalid_argument("running_cost: unknown state");
}

// Projected minimizer of the reduced Hamiltonian.
template <class T>
T best_response(const ModelSpec& spec, int x, const T* z, const Vec<T>& p, const Vec<T>& lam) {
    if (x == spec.D) return T(0.0);
    if (x != spec.S) return clamp_to(lam[x], 0.0, 1.0);
    const auto& q = spec.params;
    const T a_inf = clamp_to(lam[spec.I], 0.0, 1.0);
    const T un = lam[spec.S] + (q.beta / q.c_lambda) * a_inf * p[spec.I] * (z[spec.S] - z[spec.infect_to]);
    return clamp_to(un, 0.0, 1.0);
}

template <class T>
T regulator_running(const ModelSpec& spec, const Vec<T>& p, const Vec<T>& lam) {
    T c = spec.params.c_inf * p[spec.I] * p[spec.I];
    for (std::size_t k = 0; k < spec.policy_states.size(); ++k) {
        const double bb = spec.beta_bar(static_cast<int>(k));
        if (bb == 0.0) continue;
        c += 0.5 * bb * ad::square(lam[spec.policy_states[k]] - spec.lambda_bar(static_cast<int>(k)));
    }
    return c;
}

template <class T>
T regulator_terminal(const ModelSpec& spec, const Vec<T>& p) {
    if (spec.D < 0) return T(0.0);
    return spec.params.c_d * p[spec.D];
}

// ---- public double API ----

namespace detail {
inline void check_state(const ModelSpec& spec, int x) {
    if (x < 0 || x >= spec.m()) throw std::invalid_argument("unknown state index");
}
inline void check_action(double a) {
    if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("action outside [0,1]");
}
inline void check_simplex(const ModelSpec& spec, const StateVec& p, double tol = 1e-12) {
    double s = 0;
    for (int e = 0; e < spec.m(); ++e) {
        if (!(p[e] >= 0.0)) throw std::invalid_argument("distribution has a negative entry");
        s += p[e];
    }
    if (std::abs(s - 1.0) > tol) throw std::invalid_argument("distribution does not sum to 1");
}
inline void check_mean_field(const ModelSpec& spec, const ExtendedMeanField& mf) {
    check_simplex(spec, mf.p);
    for (int e = 0; e < spec.m(); ++e)
        if (!(mf.w[e] >= 0.0) || mf.w[e] > mf.p[e] + 1e-12)
            throw std::invalid_argument("mean field: need 0 <= w <= p");
}
}  // namespace detail

// Row S uses the action a; the other rows do not depend on the action.
inline RateMatrix q_matrix(const ModelSpec& spec, double /*t*/, double a, const ExtendedMeanField& mf) {
    detail::check_action(a);
    detail::check_mean_field(spec, mf);
    RateMatrix q{};
    for (const auto& ed : spec.graph) {
        const double r = edge_rate(spec, ed, a, mf.w[spec.I]);
        q[ed.from][ed.to] += r;
        q[ed.from][ed.from] -= r;
    }
    return q;
}

inline double agent_running_cost(const ModelSpec& spec, double /*t*/, int x, double a,
                                 const ExtendedMeanField& /*mf*/, const PolicyVector& lam) {
    detail::check_state(spec, x);
    detail::check_action(a);
    return running_cost(spec, x, a, lam.lambda);
}

inline double equilibrium_control(const ModelSpec& spec, double /*t*/, int x, const StateVec& z,
                                  const StateVec& p, const PolicyVector& lam) {
    detail::check_state(spec, x);
    detail::check_simplex(spec, p, 1e-9);
    return best_response(spec, x, z.data(), p, lam.lambda);
}

inline double regulator_running_cost(const ModelSpec& spec, double /*t*/, const StateVec& p,
                                     const PolicyVector& lam) {
    return regulator_running(spec, p, lam.lambda);
}

inline double regulator_terminal_cost(const ModelSpec& spec, const StateVec& p_T) {
    return regulator_terminal(spec, p_T);
}

// Per-state actions a_e under (z, p, lam); w(e) = p(e) a_e.
inline ExtendedMeanField extended_mean_field(const ModelSpec& spec, const StateVec& p, const StateVec& actions) {
    ExtendedMeanField mf;
    mf.p = p;
    for (int e = 0; e < spec.m(); ++e) mf.w[e] = p[e] * actions[e];
    return mf;
}

}  // namespace smfg
