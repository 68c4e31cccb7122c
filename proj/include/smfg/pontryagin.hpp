#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "smfg/csv.hpp"
#include "smfg/model.hpp"
#include "smfg/ode_bench.hpp"
#include "smfg/philox.hpp"

namespace smfg {

// Reduced principal problem for the SIR game with exactly enforced recommendations
// lambda and susceptible action alpha (states S=0, I=1, R=2).

struct PontryaginSolution {
    std::vector<double> grid;
    std::vector<StateVec> pi, y;
    std::vector<double> alpha_hat;
    std::vector<PolicyVector> lambda_hat;
    std::vector<double> residual;  // first-order residual per grid point
    std::vector<double> gaps;
    double optimal_cost = 0;
    int iterations = 0;
    double final_gap = 0;
    bool converged = false;

    double dt() const { return grid[1] - grid[0]; }
    double max_residual() const { return residual.empty() ? 0.0 : *std::max_element(residual.begin(), residual.end()); }
};

namespace detail {
inline void require_sir(const ModelSpec& spec) {
    if (spec.kind != ModelKind::sir) throw std::invalid_argument("pontryagin: only the SIR model is supported");
}
}  // namespace detail

inline double hamiltonian_tilde(const ModelSpec& spec, double /*t*/, const StateVec& pi, const StateVec& y,
                                double alpha, const PolicyVector& lam) {
    detail::require_sir(spec);
    const auto& q = spec.params;
    const auto& l = lam.lambda;
    const double g = y[1] - y[0];
    return g * q.beta * l[1] * alpha * pi[1] * pi[0] + (y[2] - y[1]) * q.gamma * pi[1] +
           (y[0] - y[2]) * q.eta * pi[2] + regulator_running(spec, pi, l) +
           0.5 * q.c_lambda * (l[0] - alpha) * (l[0] - alpha) * pi[0] + q.c_I * pi[1];
}

// grad_y H (the forward field) and grad_pi H (minus the adjoint field).
inline StateVec hamiltonian_dy(const ModelSpec& spec, const StateVec& pi, double alpha, const PolicyVector& lam) {
    const auto& q = spec.params;
    const double inf = q.beta * lam.lambda[1] * alpha * pi[1] * pi[0];
    StateVec d{};
    d[0] = -inf + q.eta * pi[2];
    d[1] = inf - q.gamma * pi[1];
    d[2] = q.gamma * pi[1] - q.eta * pi[2];
    return d;
}

inline StateVec hamiltonian_dpi(const ModelSpec& spec, const StateVec& pi, const StateVec& y, double alpha,
                                const PolicyVector& lam) {
    const auto& q = spec.params;
    const auto& l = lam.lambda;
    const double g = y[1] - y[0];
    StateVec d{};
    d[0] = g * q.beta * l[1] * alpha * pi[1] + 0.5 * q.c_lambda * (l[0] - alpha) * (l[0] - alpha);
    d[1] = g * q.beta * l[1] * alpha * pi[0] + (y[2] - y[1]) * q.gamma + 2.0 * q.c_inf * pi[1] + q.c_I;
    d[2] = (y[0] - y[2]) * q.eta;
    return d;
}

// (dH/d alpha, dH/d lambda_S, dH/d lambda_I)
inline Eigen::Vector3d first_order_residual(const ModelSpec& spec, const StateVec& pi, const StateVec& y,
                                            double alpha, const PolicyVector& lam) {
    const auto& q = spec.params;
    const auto& l = lam.lambda;
    const double g = y[1] - y[0];
    Eigen::Vector3d r;
    r(0) = g * q.beta * l[1] * pi[1] * pi[0] - q.c_lambda * (l[0] - alpha) * pi[0];
    r(1) = spec.beta_bar(0) * (l[0] - spec.lambda_bar(0)) + q.c_lambda * (l[0] - alpha) * pi[0];
    r(2) = g * q.beta * alpha * pi[1] * pi[0] + spec.beta_bar(1) * (l[1] - spec.lambda_bar(1));
    return r;
}

struct FirstOrderResult {
    double alpha = 0;
    PolicyVector lambda;
    double residual = 0;
    int iterations = 0;
};

struct NewtonFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline PolicyVector recommended(const ModelSpec& spec) {
    PolicyVector l;
    for (int k = 0; k < 3; ++k) l.lambda[k] = spec.lambda_bar(k);
    return l;
}

// Newton on the stationarity system in (alpha, lambda_S, lambda_I); lambda_R = lambda_bar_R.
inline FirstOrderResult first_order_solve(const ModelSpec& spec, double t, const StateVec& pi, const StateVec& y,
                                          std::optional<FirstOrderResult> guess = std::nullopt, double tol = 1e-10) {
    detail::require_sir(spec);
    detail::check_simplex(spec, pi, 1e-8);
    const auto& q = spec.params;
    const PolicyVector rec = recommended(spec);

    auto attempt = [&](FirstOrderResult x) -> std::optional<FirstOrderResult> {
        x.lambda.lambda[2] = rec.lambda[2];
        for (int it = 0; it <= 100; ++it) {
            const Eigen::Vector3d r = first_order_residual(spec, pi, y, x.alpha, x.lambda);
            x.residual = r.cwiseAbs().maxCoeff();
            x.iterations = it;
            if (!std::isfinite(x.residual)) return std::nullopt;
            if (x.residual < tol) return x;
            const double g = y[1] - y[0];
            Eigen::Matrix3d J;
            J << q.c_lambda * pi[0], -q.c_lambda * pi[0], g * q.beta * pi[1] * pi[0],
                -q.c_lambda * pi[0], spec.beta_bar(0) + q.c_lambda * pi[0], 0.0,
                g * q.beta * pi[1] * pi[0], 0.0, spec.beta_bar(1);
            const Eigen::Vector3d step = J.completeOrthogonalDecomposition().solve(r);
            if (!step.allFinite()) return std::nullopt;
            x.alpha -= step(0);
            x.lambda.lambda[0] -= step(1);
            x.lambda.lambda[1] -= step(2);
        }
        return std::nullopt;
    };

    FirstOrderResult cold;
    cold.lambda = rec;
    cold.alpha = rec.lambda[0];
    if (guess) {
        if (auto r = attempt(*guess)) return *r;
    }
    if (auto r = attempt(cold)) return *r;
    std::ostringstream os;
    os << "first_order_solve: Newton did not converge at t=" << t << " pi=(" << pi[0] << "," << pi[1] << ","
       << pi[2] << ") y=(" << y[0] << "," << y[1] << "," << y[2] << ")";
    throw NewtonFailure(os.str());
}

// Running cost of the reduced problem: c0 + f0 + (c_lambda/2)(lambda_S - alpha)^2 pi(S) + c_I pi(I).
inline double reduced_running_cost(const ModelSpec& spec, const StateVec& pi, double alpha, const PolicyVector& lam) {
    const auto& q = spec.params;
    const double d = lam.lambda[0] - alpha;
    return regulator_running(spec, pi, lam.lambda) + 0.5 * q.c_lambda * d * d * pi[0] + q.c_I * pi[1];
}

inline PontryaginSolution solve_fbode(const ModelSpec& spec, double dt = 0.01, double tol = 1e-10,
                                      int max_iters = 1000, double damping = 0.5) {
    detail::require_sir(spec);
    if (!(damping > 0 && damping <= 1)) throw std::invalid_argument("solve_fbode: damping must lie in (0,1]");
    const int K = detail::grid_steps(spec.horizon, dt);
    const double h = spec.horizon / K;

    PontryaginSolution sol;
    sol.grid = detail::make_grid(spec.horizon, K);
    sol.pi.assign(K + 1, spec.p0);
    sol.y.assign(K + 1, StateVec{});
    std::vector<FirstOrderResult> ctl(K + 1);
    for (auto& c : ctl) {
        c.lambda = recommended(spec);
        c.alpha = c.lambda.lambda[0];
    }

    std::vector<StateVec> pi_new(K + 1), y_new(K + 1);
    for (int it = 1; it <= max_iters; ++it) {
        pi_new[0] = spec.p0;
        for (int k = 0; k < K; ++k) {
            ctl[k] = first_order_solve(spec, sol.grid[k], pi_new[k], sol.y[k], k > 0 ? ctl[k - 1] : ctl[k]);
            const StateVec d = hamiltonian_dy(spec, pi_new[k], ctl[k].alpha, ctl[k].lambda);
            for (int e = 0; e < 3; ++e) pi_new[k + 1][e] = pi_new[k][e] + h * d[e];
        }
        double gap = 0;
        for (int k = 0; k <= K; ++k)
            for (int e = 0; e < 3; ++e) {
                const double v = damping * pi_new[k][e] + (1 - damping) * sol.pi[k][e];
                gap = std::max(gap, std::abs(v - sol.pi[k][e]));
                sol.pi[k][e] = v;
            }
        y_new[K] = StateVec{};
        for (int k = K; k > 0; --k) {
            ctl[k] = first_order_solve(spec, sol.grid[k], sol.pi[k], y_new[k], k < K ? ctl[k + 1] : ctl[k]);
            const StateVec d = hamiltonian_dpi(spec, sol.pi[k], y_new[k], ctl[k].alpha, ctl[k].lambda);
            for (int e = 0; e < 3; ++e) y_new[k - 1][e] = y_new[k][e] + h * d[e];
        }
        for (int k = 0; k <= K; ++k)
            for (int e = 0; e < 3; ++e) {
                const double v = damping * y_new[k][e] + (1 - damping) * sol.y[k][e];
                gap = std::max(gap, std::abs(v - sol.y[k][e]));
                sol.y[k][e] = v;
            }
        sol.gaps.push_back(gap);
        sol.iterations = it;
        sol.final_gap = gap;
        if (gap < tol) {
            sol.converged = true;
            break;
        }
    }

    sol.alpha_hat.resize(K + 1);
    sol.lambda_hat.resize(K + 1);
    sol.residual.resize(K + 1);
    double W = 0;
    for (int k = 0; k <= K; ++k) {
        ctl[k] = first_order_solve(spec, sol.grid[k], sol.pi[k], sol.y[k], k > 0 ? ctl[k - 1] : ctl[k], 1e-12);
        sol.alpha_hat[k] = ctl[k].alpha;
        sol.lambda_hat[k] = ctl[k].lambda;
        sol.residual[k] = ctl[k].residual;
        if (k < K) W += h * reduced_running_cost(spec, sol.pi[k], ctl[k].alpha, ctl[k].lambda);
    }
    sol.optimal_cost = W - spec.params.kappa;
    return sol;
}

// Z for an agent in state x: (c_lambda (alpha - lambda_S) / (beta lambda_I pi(I)), 0, 0) in S, else 0.
inline StateVec reconstruct_z_hat(const ModelSpec& spec, double /*t*/, int x, const StateVec& pi, double alpha,
                                  const PolicyVector& lam) {
    detail::require_sir(spec);
    StateVec z{};
    const auto& q = spec.params;
    if (x == spec.S && lam.lambda[1] > 0 && pi[1] > 0)
        z[0] = q.c_lambda * (alpha - lam.lambda[0]) / (q.beta * lam.lambda[1] * pi[1]);
    return z;
}

// A single agent's path: initial state and (time, new state) jumps.
struct SamplePath {
    int initial_state = 0;
    std::vector<std::pair<double, int>> jumps;
    double horizon = 0;
};

namespace detail {

// Piecewise-constant optimal rates on [t_k, t_{k+1}) and the matching per-state quantities.
struct GridPoint {
    double rate_S;   // S -> I
    StateVec zS;     // Z for an S agent
    double f[3];     // agent running cost per state
};

inline GridPoint grid_point(const ModelSpec& spec, const PontryaginSolution& sol, std::size_t k) {
    const auto& q = spec.params;
    const auto& lam = sol.lambda_hat[k];
    const double a = sol.alpha_hat[k];
    GridPoint g{};
    g.rate_S = q.beta * a * clamp_to(lam.lambda[1], 0.0, 1.0) * sol.pi[k][1];
    g.zS = reconstruct_z_hat(spec, sol.grid[k], spec.S, sol.pi[k], a, lam);
    g.f[0] = running_cost(spec, 0, a, lam.lambda);
    g.f[1] = running_cost(spec, 1, clamp_to(lam.lambda[1], 0.0, 1.0), lam.lambda);
    g.f[2] = running_cost(spec, 2, clamp_to(lam.lambda[2], 0.0, 1.0), lam.lambda);
    return g;
}

inline std::size_t cell_of(const PontryaginSolution& sol, double t) {
    const std::size_t K = sol.grid.size() - 1;
    const auto k = static_cast<std::size_t>(std::floor(t / sol.dt()));
    return std::min(k, K - 1);
}

}  // namespace detail

// xi = -X0.y0 + int (f + X^T Q Z) dt - sum_jumps Z^T (X_t - X_{t-}), controls piecewise constant on the grid.
inline double reconstruct_xi(const ModelSpec& spec, const SamplePath& path, const PontryaginSolution& sol,
                             const StateVec& y0) {
    detail::require_sir(spec);
    if (std::abs(path.horizon - sol.grid.back()) > 1e-12 || std::abs(spec.horizon - sol.grid.back()) > 1e-12)
        throw std::invalid_argument("reconstruct_xi: path and solution horizons differ");
    const std::size_t K = sol.grid.size() - 1;

    double xi = -y0[path.initial_state];
    int x = path.initial_state;
    std::size_t next = 0;
    double t = 0;
    for (std::size_t k = 0; k < K; ++k) {
        const auto g = detail::grid_point(spec, sol, k);
        const double t_end = sol.grid[k + 1];
        while (true) {
            const bool jump_here = next < path.jumps.size() && path.jumps[next].first < t_end;
            const double seg_end = jump_here ? path.jumps[next].first : t_end;
            if (seg_end < t - 1e-12) throw std::invalid_argument("reconstruct_xi: jump times not increasing");
            const double len = seg_end - t;
            double qz = 0;
            if (x == spec.S) qz = -g.rate_S * g.zS[0];  // S row: -rate z(S) + rate z(I), z(I) = 0
            xi += (g.f[x] + qz) * len;
            t = seg_end;
            if (!jump_here) break;
            const int to = path.jumps[next].second;
            bool ok = false;
            for (const auto& ed : spec.graph) ok |= ed.from == x && ed.to == to;
            if (!ok) throw std::invalid_argument("reconstruct_xi: path jumps along a non-edge");
            const StateVec z = x == spec.S ? g.zS : StateVec{};
            xi -= z[to] - z[x];
            x = to;
            ++next;
        }
    }
    if (next != path.jumps.size()) throw std::invalid_argument("reconstruct_xi: jump after the horizon");
    return xi;
}

// Exact simulation of one agent under the optimal piecewise-constant rates.
inline SamplePath sample_optimal_path(const ModelSpec& spec, const PontryaginSolution& sol, std::uint64_t seed,
                                      std::uint32_t index) {
    detail::require_sir(spec);
    SamplePath path;
    path.horizon = spec.horizon;
    {
        const double u = uniforms2(seed, Stream::paths, index, 0, 0xFFFFFFFFu)[0];
        double c = 0;
        path.initial_state = 2;
        for (int e = 0; e < 3; ++e) {
            c += spec.p0[e];
            if (u < c) {
                path.initial_state = e;
                break;
            }
        }
    }
    const auto& q = spec.params;
    int x = path.initial_state;
    std::uint32_t draws = 0;
    double budget = exp1(uniforms2(seed, Stream::paths, index, 0, draws++)[0]);
    const std::size_t K = sol.grid.size() - 1;
    for (std::size_t k = 0; k < K; ++k) {
        double t = sol.grid[k];
        const double t_end = sol.grid[k + 1];
        while (t < t_end) {
            double rate = 0;
            int to = x;
            if (x == 0) rate = detail::grid_point(spec, sol, k).rate_S, to = 1;
            else if (x == 1) rate = q.gamma, to = 2;
            else rate = q.eta, to = 0;
            if (rate <= 0) break;
            const double need = budget / rate;
            if (t + need >= t_end) {
                budget -= rate * (t_end - t);
                break;
            }
            t += need;
            path.jumps.emplace_back(t, to);
            x = to;
            budget = exp1(uniforms2(seed, Stream::paths, index, 0, draws++)[0]);
        }
    }
    return path;
}

// (t, p_*, u_* as the adjoint y, alpha_S, lambda_*, z_S)
inline void write_pontryagin_csv(std::ostream& os, const ModelSpec& spec, const PontryaginSolution& sol) {
    CsvWriter w(os);
    w.header({"t", "p_S", "p_I", "p_R", "y_S", "y_I", "y_R", "alpha_S", "lambda_S", "lambda_I", "lambda_R", "z_S"});
    for (std::size_t k = 0; k < sol.grid.size(); ++k) {
        w << sol.grid[k];
        for (int e = 0; e < 3; ++e) w << sol.pi[k][e];
        for (int e = 0; e < 3; ++e) w << sol.y[k][e];
        w << sol.alpha_hat[k];
        for (int e = 0; e < 3; ++e) w << sol.lambda_hat[k].lambda[e];
        w << reconstruct_z_hat(spec, sol.grid[k], spec.S, sol.pi[k], sol.alpha_hat[k], sol.lambda_hat[k])[0];
        w.end_row();
    }
}

}  // namespace smfg
