#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "smfg/autodiff/adam.hpp"
#include "smfg/autodiff/tape.hpp"
#include "smfg/csv.hpp"
#include "smfg/ctmc.hpp"
#include "smfg/model.hpp"
#include "smfg/policy.hpp"
#include "smfg/scenarios.hpp"

namespace smfg {

// How the simulated loss is differentiated through the particle path.
//  pathwise:   Exp(1) clocks frozen; holding times clock/Q(theta) carry gradient,
//              jump selections are constants of the path.
//  detach:     interval lengths and martingale increments are constants; only the
//              explicit theta-dependence of the costs is differentiated.
//  martingale: interval lengths and martingale increments are constants, and the
//              empirical distribution is propagated as p + p Q(theta) dt + dM, so the
//              gradient sees how controls move the population.
enum class GradientMode { pathwise, detach, martingale };

inline const char* to_string(GradientMode g) {
    switch (g) {
        case GradientMode::pathwise: return "pathwise";
        case GradientMode::detach: return "detach";
        case GradientMode::martingale: return "martingale";
    }
    return "?";
}
inline GradientMode parse_gradient_mode(const std::string& s) {
    if (s == "pathwise" || s == "pathwise-frozen-noise") return GradientMode::pathwise;
    if (s == "detach" || s == "detach-dynamics") return GradientMode::detach;
    if (s == "martingale" || s == "martingale-frozen") return GradientMode::martingale;
    throw std::invalid_argument("unknown gradient mode '" + s + "'");
}

using ad::Tape;
using ad::Var;

struct LossTerms {
    Var running_c0, running_f0, terminal_c0, terminal_y, total;
    Var mean_y_terminal;
};

inline std::uint64_t policy_tag(const StepPolicy& pol) {
    Fnv1a h;
    h.add(pol.before);
    h.add(pol.after);
    h.add(pol.switch_time);
    return h.h | 1u;
}

namespace detail {

template <class T>
T regulator_f0(const ModelSpec& spec, const Vec<T>& lam) {
    T c(0.0);
    for (std::size_t k = 0; k < spec.policy_states.size(); ++k) {
        const double bb = spec.beta_bar(static_cast<int>(k));
        if (bb == 0.0) continue;
        c += 0.5 * bb * ad::square(lam[spec.policy_states[k]] - spec.lambda_bar(static_cast<int>(k)));
    }
    return c;
}

// Rebuilds the simulated population's loss ingredients on the tape.
inline LossTerms replay(Tape& tape, const ParticleBatch& b, const ModelSpec& spec, const PolicyBundle& bundle,
                        GradientMode mode, const StepPolicy* exo, std::vector<Var>* y_particles = nullptr) {
    if (tape.n_params() != bundle.size()) throw std::invalid_argument("replay: register bundle.theta on the tape first");
    if (b.m != spec.m() || bundle.m() != spec.m()) throw std::invalid_argument("replay: state count mismatch");

    const int m = spec.m();
    const double T = spec.horizon;
    const double inv_n = 1.0 / b.n_particles;
    const std::size_t n_edges = spec.graph.size();
    const bool pathwise = mode == GradientMode::pathwise;
    const bool mart = mode == GradientMode::martingale;

    std::vector<bool> can_leave(m, false);
    for (const auto& ed : spec.graph) can_leave[ed.from] = true;

    // y0 with the constraint shift applied on the tape
    Vec<Var> y0{};
    for (int e = 0; e < m; ++e) y0[e] = bundle.y0_scale * tape.param(bundle.y0_offset() + e);
    if (bundle.y0_constrained) {
        Var s(0.0);
        for (int e = 0; e < m; ++e) s += spec.p0[e] * y0[e];
        for (int e = 0; e < m; ++e) y0[e] = y0[e] + (spec.params.kappa - s);
    }

    Vec<Var> p{};
    for (int e = 0; e < m; ++e) p[e] = Var(b.count(0, e) * inv_n);
    Var mean_y(0.0);
    for (int e = 0; e < m; ++e)
        if (b.count(0, e) > 0) mean_y += p[e].value() * y0[e];

    // per-particle Y_T from per-state cumulative increments, O(N + jumps) tape nodes
    std::vector<Var> cum(m, Var(0.0)), entry, y_i;
    std::vector<int> where;
    if (y_particles) {
        where.assign(b.initial_states.begin(), b.initial_states.end());
        entry.assign(b.n_particles, Var(0.0));
        y_i.resize(b.n_particles);
        for (int i = 0; i < b.n_particles; ++i) y_i[i] = y0[where[i]];
    }

    Var run_c0(0.0), run_f0(0.0);
    Var t(0.0);
    std::vector<Vec<Var>> z(m);
    std::vector<Var> rate(n_edges);
    Var in_buf[1 + kMaxStates];

    for (std::size_t n = 0; n < b.n_epochs(); ++n) {
        const EpochRecord& rec = b.epochs[n];
        const bool final = rec.particle < 0;
        const double t_val = b.jump_times[n];
        const Var tin = pathwise ? t * (1.0 / T) : Var(t_val / T);

        Vec<Var> lam{};
        if (exo) {
            const PolicyVector pv = (*exo)(t_val);
            for (int e = 0; e < m; ++e) lam[e] = Var(pv.lambda[e]);
        } else {
            const Var lin[1] = {tin};
            auto raw = tape.call(bundle.lambda_net, lin, bundle.lambda_offset());
            for (std::size_t k = 0; k < raw.size(); ++k)
                lam[bundle.policy_states()[k]] = bundle.lambda_max * ad::sigmoid(raw[k]);
        }

        if (!mart)
            for (int e = 0; e < m; ++e) p[e] = Var(b.count(n, e) * inv_n);

        Vec<Var> a{};
        for (int e = 0; e < m; ++e) {
            const bool need = can_leave[e] && (mart || b.count(n, e) > 0);
            for (int j = 0; j < m; ++j) z[e][j] = Var(0.0);
            if (need) {
                in_buf[0] = tin;
                for (int j = 0; j < m; ++j) in_buf[1 + j] = Var(j == e ? 1.0 : 0.0);
                auto out = tape.call(bundle.z_net, std::span<const Var>(in_buf, 1 + m), bundle.z_offset());
                for (int j = 0; j < m; ++j) z[e][j] = out[j];
            }
            a[e] = best_response(spec, e, z[e].data(), p, lam);
        }
        const Var w_inf = p[spec.I] * a[spec.I];
        for (std::size_t k = 0; k < n_edges; ++k) {
            const Edge& ed = spec.graph[k];
            rate[k] = edge_rate(spec, ed, a[ed.from], w_inf);
        }

        Var dt;
        if (pathwise) {
            if (final) {
                dt = T - t;
            } else {
                std::size_t kw = n_edges;
                for (std::size_t k = 0; k < n_edges; ++k)
                    if (spec.graph[k].from == rec.from && spec.graph[k].to == rec.to) kw = k;
                if (kw == n_edges) throw std::invalid_argument("replay: jump along a non-edge");
                dt = rec.clock / rate[kw];
            }
        } else {
            dt = Var(b.dt(n));
        }

        run_c0 += spec.params.c_inf * p[spec.I] * p[spec.I] * dt;
        run_f0 += regulator_f0(spec, lam) * dt;

        for (int e = 0; e < m; ++e) {
            const bool occupied = b.count(n, e) > 0;
            if (!occupied && !mart) continue;
            const Var f = running_cost(spec, e, a[e], lam);
            if (pathwise) {
                Var qz(0.0);
                for (std::size_t k = 0; k < n_edges; ++k) {
                    const Edge& ed = spec.graph[k];
                    if (ed.from == e) qz += rate[k] * (z[e][ed.to] - z[e][e]);
                }
                const Var g = (f + qz) * dt;
                mean_y -= p[e] * g;
                if (y_particles && occupied) cum[e] += g;
            } else {
                mean_y -= p[e] * f * dt;
                if (!occupied) continue;
                // frozen compensator: rates, p and dt enter as values only
                const double w = p[e].value() * dt.value();
                Var qz(0.0);
                for (std::size_t k = 0; k < n_edges; ++k) {
                    const Edge& ed = spec.graph[k];
                    if (ed.from == e && rate[k].value() != 0.0)
                        qz += rate[k].value() * (z[e][ed.to] - z[e][e]);
                }
                mean_y -= w * qz;
                if (y_particles) cum[e] += f * dt + dt.value() * qz;
            }
        }
        if (!final) mean_y += (z[rec.from][rec.to] - z[rec.from][rec.from]) * inv_n;
        if (y_particles && !final) {
            const int i = rec.particle;
            y_i[i] += z[rec.from][rec.to] - z[rec.from][rec.from] - (cum[rec.from] - entry[i]);
            where[i] = rec.to;
            entry[i] = cum[rec.to];
        }

        if (mart) {
            Vec<Var> drift{};
            for (int e = 0; e < m; ++e) drift[e] = Var(0.0);
            for (std::size_t k = 0; k < n_edges; ++k) {
                const Edge& ed = spec.graph[k];
                const Var flow = p[ed.from] * rate[k];
                drift[ed.to] += flow;
                drift[ed.from] -= flow;
            }
            for (int e = 0; e < m; ++e) {
                const Var pred = p[e] + drift[e] * dt;
                const double target = b.count(n + 1, e) * inv_n;
                p[e] = pred + (target - pred.value());
            }
        }
        if (pathwise) t = t + dt;
    }

    if (y_particles) {
        for (int i = 0; i < b.n_particles; ++i) y_i[i] -= cum[where[i]] - entry[i];
        *y_particles = std::move(y_i);
    }

    Vec<Var> p_T{};
    for (int e = 0; e < m; ++e) p_T[e] = mart ? p[e] : Var(b.count(b.n_epochs(), e) * inv_n);

    LossTerms L;
    L.running_c0 = run_c0;
    L.running_f0 = run_f0;
    L.terminal_c0 = regulator_terminal(spec, p_T);
    L.mean_y_terminal = mean_y;
    L.terminal_y = -mean_y;
    L.total = L.running_c0 + L.running_f0 + L.terminal_c0 + L.terminal_y;
    return L;
}

}  // namespace detail

// Simulated principal loss of one population:
// sum (c0 + f0) dt + C0(p_T) - mean_i Y_T^i.
inline LossTerms principal_loss(Tape& tape, const ParticleBatch& batch, const ModelSpec& spec,
                                const PolicyBundle& bundle, GradientMode mode = GradientMode::pathwise) {
    if (batch.fingerprint != batch_fingerprint(spec, bundle.fingerprint(), batch.n_particles, batch.seed))
        throw std::invalid_argument("principal_loss: batch was not simulated under this bundle/spec");
    return detail::replay(tape, batch, spec, bundle, mode, nullptr);
}

// population:   (xi - mean_i Y_T^i)^2. One scalar constraint, so it does not pin down z.
// per_particle: mean_i (xi - Y_T^i)^2, which is zero only on the agents' value function.
enum class FixedPolicyLoss { population, per_particle };

inline const char* to_string(FixedPolicyLoss l) {
    return l == FixedPolicyLoss::population ? "population" : "per-particle";
}
inline FixedPolicyLoss parse_fixed_policy_loss(const std::string& s) {
    if (s == "population") return FixedPolicyLoss::population;
    if (s == "per-particle" || s == "per_particle") return FixedPolicyLoss::per_particle;
    throw std::invalid_argument("unknown fixed-policy loss '" + s + "'");
}

// Agent-side loss under an exogenous lambda.
inline LossTerms fixed_policy_loss(Tape& tape, const ParticleBatch& batch, const ModelSpec& spec,
                                   const PolicyBundle& bundle, const StepPolicy& lam, double xi,
                                   GradientMode mode = GradientMode::pathwise,
                                   FixedPolicyLoss kind = FixedPolicyLoss::population) {
    const FixedPolicyControls<StepPolicy> ctl{bundle, lam, policy_tag(lam)};
    if (batch.fingerprint != batch_fingerprint(spec, ctl.fingerprint(), batch.n_particles, batch.seed))
        throw std::invalid_argument("fixed_policy_loss: batch was not simulated under this bundle/spec");
    std::vector<Var> y;
    LossTerms L = detail::replay(tape, batch, spec, bundle, mode, &lam,
                                 kind == FixedPolicyLoss::per_particle ? &y : nullptr);
    L.running_c0 = L.running_f0 = L.terminal_c0 = Var(0.0);
    if (kind == FixedPolicyLoss::population) {
        const Var gap = xi - L.mean_y_terminal;
        L.terminal_y = gap * gap;
    } else {
        Var s(0.0);
        for (const Var& yi : y) s += ad::square(xi - yi);
        L.terminal_y = s * (1.0 / batch.n_particles);
    }
    L.total = L.terminal_y;
    return L;
}

// ---- training loop ----

struct TrainConfig {
    int iterations = 2000;
    int particles = 1000;
    int samples = 1;
    double lr = 1e-3;
    double lr_decay = 1.0;  // lr_k = lr * lr_decay^k
    std::uint64_t seed = 0;
    // pathwise stalls far from the optimum on the SIR benchmark; see README
    GradientMode mode = GradientMode::martingale;
    FixedPolicyLoss fixed_loss = FixedPolicyLoss::population;  // train_fixed_policy only
    std::string loss_history_path;
    int checkpoint_every = 0;
    std::string checkpoint_dir;

    void validate() const {
        if (iterations < 0) throw std::invalid_argument("train: iterations must be >= 0");
        if (particles < 1 || samples < 1) throw std::invalid_argument("train: particles and samples must be >= 1");
        if (!(lr > 0) || !(lr_decay > 0)) throw std::invalid_argument("train: learning rates must be > 0");
    }
};

struct LossRecord {
    int iteration = 0;
    double loss = 0, running_c0 = 0, running_f0 = 0, terminal_c0 = 0, terminal_y = 0;
    double seconds = 0;
};

struct TrainResult {
    PolicyBundle bundle;
    std::vector<LossRecord> history;
};

struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::uint64_t sample_seed(std::uint64_t seed, int iteration, int sample) {
    return bits64(seed, Stream::sample_seeds, static_cast<std::uint32_t>(iteration),
                  static_cast<std::uint32_t>(sample), 0);
}

inline double trailing_mean(const std::vector<LossRecord>& h, std::size_t window = 100) {
    if (h.empty()) return NAN;
    const std::size_t k = std::min(window, h.size());
    double s = 0;
    for (std::size_t i = h.size() - k; i < h.size(); ++i) s += h[i].loss;
    return s / k;
}

inline void write_loss_history_csv(std::ostream& os, const std::vector<LossRecord>& h) {
    CsvWriter w(os);
    w.header({"iteration", "loss", "running_c0", "running_f0", "terminal_C0", "terminal_y", "seconds"});
    for (const auto& r : h) {
        w << r.iteration << r.loss << r.running_c0 << r.running_f0 << r.terminal_c0 << r.terminal_y << r.seconds;
        w.end_row();
    }
}

namespace detail {

struct SampleOut {
    std::vector<double> grad;
    LossRecord rec;
};

// Generic SGD driver; `evaluate(seed)` simulates one population and returns its loss terms and gradient.
template <class Evaluate>
std::vector<LossRecord> run_sgd(PolicyBundle& bundle, const TrainConfig& cfg, Evaluate&& evaluate) {
    cfg.validate();
    std::vector<LossRecord> history;
    ad::AdamState adam(bundle.size());
    std::ofstream hist;
    if (!cfg.loss_history_path.empty()) {
        hist.open(cfg.loss_history_path);
        if (!hist) throw std::runtime_error("train: cannot open loss history '" + cfg.loss_history_path + "'");
        CsvWriter(hist).header(
            {"iteration", "loss", "running_c0", "running_f0", "terminal_C0", "terminal_y", "seconds"});
    }
    const auto t0 = std::chrono::steady_clock::now();
    double lr = cfg.lr;
    for (int k = 0; k < cfg.iterations; ++k) {
        std::vector<SampleOut> outs(cfg.samples);
        if (cfg.samples == 1) {
            outs[0] = evaluate(sample_seed(cfg.seed, k, 0));
        } else {
            std::vector<std::future<SampleOut>> fut;
            for (int s = 0; s < cfg.samples; ++s)
                fut.push_back(std::async(std::launch::async, [&, s] { return evaluate(sample_seed(cfg.seed, k, s)); }));
            for (int s = 0; s < cfg.samples; ++s) outs[s] = fut[s].get();
        }
        // ordered reduction
        std::vector<double> g(bundle.size(), 0.0);
        LossRecord rec;
        rec.iteration = k;
        for (const auto& o : outs) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] / cfg.samples;
            rec.loss += o.rec.loss / cfg.samples;
            rec.running_c0 += o.rec.running_c0 / cfg.samples;
            rec.running_f0 += o.rec.running_f0 / cfg.samples;
            rec.terminal_c0 += o.rec.terminal_c0 / cfg.samples;
            rec.terminal_y += o.rec.terminal_y / cfg.samples;
        }
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!std::isfinite(rec.loss)) {
            std::ostringstream os;
            os << "train: non-finite loss at iteration " << k << " (seed " << cfg.seed << "): c0=" << rec.running_c0
               << " f0=" << rec.running_f0 << " C0=" << rec.terminal_c0 << " y=" << rec.terminal_y;
            throw TrainingError(os.str());
        }
        try {
            ad::adam_step(adam, bundle.theta, g, lr);
        } catch (const ad::NonFiniteGradient& e) {
            std::ostringstream os;
            os << "train: iteration " << k << " (seed " << cfg.seed << "): " << e.what();
            throw TrainingError(os.str());
        }
        bundle.reshift();
        lr *= cfg.lr_decay;
        history.push_back(rec);
        if (hist) {
            CsvWriter w(hist);
            w << rec.iteration << rec.loss << rec.running_c0 << rec.running_f0 << rec.terminal_c0 << rec.terminal_y
              << rec.seconds;
            w.end_row();
        }
        if (cfg.checkpoint_every > 0 && (k + 1) % cfg.checkpoint_every == 0 && !cfg.checkpoint_dir.empty())
            bundle.save((std::filesystem::path(cfg.checkpoint_dir) / ("checkpoint_" + std::to_string(k + 1) + ".bin"))
                            .string());
    }
    return history;
}

inline LossRecord record_of(const LossTerms& L) {
    LossRecord r;
    r.loss = L.total.value();
    r.running_c0 = L.running_c0.value();
    r.running_f0 = L.running_f0.value();
    r.terminal_c0 = L.terminal_c0.value();
    r.terminal_y = L.terminal_y.value();
    return r;
}

}  // namespace detail

// Agent-only training: y0 is free and has to travel to the expected cost-to-go, which
// for the shipped scenarios is O(10); the scale keeps that within reach of lr 1e-3.
inline constexpr double kFixedPolicyY0Scale = 10.0;

inline PolicyBundle initial_bundle(const ModelSpec& spec, std::uint64_t seed, bool y0_constrained = true) {
    PolicyBundle b(spec);
    b.y0_constrained = y0_constrained;
    if (!y0_constrained) b.y0_scale = kFixedPolicyY0Scale;
    b.initialize(seed);
    return b;
}

// One simulated population's loss and gradient under the current bundle.
inline detail::SampleOut stackelberg_sample(const ModelSpec& spec, const PolicyBundle& bundle, int particles,
                                            std::uint64_t seed, GradientMode mode) {
    const auto batch = simulate_batch(spec, bundle, particles, seed);
    Tape tape;
    tape.set_parameters(bundle.theta);
    const auto L = principal_loss(tape, batch, spec, bundle, mode);
    return {tape.gradient(L.total), detail::record_of(L)};
}

inline detail::SampleOut fixed_policy_sample(const ModelSpec& spec, const PolicyBundle& bundle,
                                             const StepPolicy& lam, double xi, int particles, std::uint64_t seed,
                                             GradientMode mode,
                                             FixedPolicyLoss kind = FixedPolicyLoss::population) {
    const FixedPolicyControls<StepPolicy> ctl{bundle, lam, policy_tag(lam)};
    const auto batch = simulate_batch(spec, ctl, particles, seed);
    Tape tape;
    tape.set_parameters(bundle.theta);
    const auto L = fixed_policy_loss(tape, batch, spec, bundle, lam, xi, mode, kind);
    return {tape.gradient(L.total), detail::record_of(L)};
}

inline TrainResult train_stackelberg(const ModelSpec& spec, const TrainConfig& cfg,
                                     std::optional<PolicyBundle> init = std::nullopt) {
    PolicyBundle bundle = init ? *init : initial_bundle(spec, cfg.seed);
    auto hist = detail::run_sgd(bundle, cfg, [&](std::uint64_t s) {
        return stackelberg_sample(spec, bundle, cfg.particles, s, cfg.mode);
    });
    return {bundle, hist};
}

inline TrainResult train_fixed_policy(const ModelSpec& spec, const StepPolicy& lam, double xi,
                                      const TrainConfig& cfg, std::optional<PolicyBundle> init = std::nullopt) {
    PolicyBundle bundle = init ? *init : initial_bundle(spec, cfg.seed, false);
    bundle.y0_constrained = false;
    bundle.y0_scale = kFixedPolicyY0Scale;
    auto hist = detail::run_sgd(bundle, cfg, [&](std::uint64_t s) {
        return fixed_policy_sample(spec, bundle, lam, xi, cfg.particles, s, cfg.mode, cfg.fixed_loss);
    });
    return {bundle, hist};
}

// Control curves on a uniform grid of `points` times, with p from an evaluation population.
inline void write_controls_csv(std::ostream& os, const ModelSpec& spec, const PolicyBundle& bundle,
                               const ParticleBatch& eval, const StepPolicy* exo, int points = 1000) {
    CsvWriter w(os);
    std::vector<std::string> cols{"t"};
    for (int e : spec.policy_states) cols.push_back("lambda_" + spec.states[e]);
    for (const auto& s : spec.states) cols.push_back("alpha_" + s);
    for (const auto& s : spec.states) cols.push_back("z_" + s);
    for (const auto& s : spec.states) cols.push_back("p_" + s);
    w.header(cols);
    const int m = spec.m();
    for (int k = 0; k < points; ++k) {
        const double t = spec.horizon * k / (points - 1);
        const PolicyVector lam = exo ? (*exo)(t) : bundle.eval_lambda(t);
        const StateVec p = p_at(eval, t);
        w << t;
        for (int e : spec.policy_states) w << lam.lambda[e];
        StateVec zd{};
        for (int e = 0; e < m; ++e) {
            double z[kMaxStates];
            bundle.eval_z(t, e, z);
            zd[e] = z[e];
            w << best_response(spec, e, z, p, lam.lambda);
        }
        for (int e = 0; e < m; ++e) w << zd[e];
        for (int e = 0; e < m; ++e) w << p[e];
        w.end_row();
    }
}

}  // namespace smfg
