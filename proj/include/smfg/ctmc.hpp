#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "smfg/csv.hpp"
#include "smfg/model.hpp"
#include "smfg/philox.hpp"

namespace smfg {

// Controls handed to the simulator: z(t, e) -> m values, lambda(t), y0(e).
// Anything with the same member signatures works (see PolicyBundle in policy.hpp).
struct FunctionControls {
    std::function<void(double, int, double*)> z;
    std::function<PolicyVector(double)> lambda;
    std::function<double(int)> y0;
    std::uint64_t tag = 0;  // caller-chosen identity for fingerprints

    void eval_z(double t, int e, double* out) const { z(t, e, out); }
    PolicyVector eval_lambda(double t) const { return lambda(t); }
    double eval_y0(int e) const { return y0(e); }
    std::uint64_t fingerprint() const { return tag; }
};

struct EpochRecord {
    std::int32_t particle = -1;  // jumper at the end of the interval; -1 on the final interval
    std::uint8_t from = 0, to = 0;
    std::uint8_t slot = 0;  // index of the winning out-edge of `from`
    double clock = 0;       // the winning Exp(1) variate
};

struct ParticleJump {
    std::int32_t epoch;  // state changes at jump_times[epoch + 1]
    std::uint8_t to;
    double y_jump;       // z(from)[to] - z(from)[from]
};

class ParticleBatch {
public:
    int m = 0;
    int n_particles = 0;
    std::uint64_t seed = 0;
    std::uint64_t fingerprint = 0;
    double horizon = 0;

    std::vector<std::uint8_t> initial_states;
    std::vector<double> jump_times;   // t_0 = 0 < ... < t_ntot = T
    std::vector<EpochRecord> epochs;  // one per interval [t_n, t_{n+1})
    std::vector<std::int32_t> counts; // (n_epochs+1) x m
    std::vector<double> lambda;       // n_epochs x m
    std::vector<double> actions;      // n_epochs x m, the common action of every particle in state e
    std::vector<double> z;            // n_epochs x m x m, z(t_n, e)
    std::vector<double> edge_rates;   // n_epochs x n_edges, in graph order
    std::vector<double> cum_drift;    // (n_epochs+1) x m, running sum of -f dt - (Qz)(e) dt
    std::vector<double> y0;           // per state
    std::vector<std::vector<ParticleJump>> particle_jumps;

    std::size_t n_epochs() const { return epochs.size(); }
    double dt(std::size_t n) const { return jump_times[n + 1] - jump_times[n]; }
    int count(std::size_t n, int e) const { return counts[n * m + e]; }

    StateVec p(std::size_t n) const {
        StateVec v{};
        for (int e = 0; e < m; ++e) v[e] = static_cast<double>(count(n, e)) / n_particles;
        return v;
    }
    // empirical extended mean field at epoch n (for the terminal epoch the last actions are reused)
    ExtendedMeanField mean_field(std::size_t n) const {
        ExtendedMeanField mf;
        mf.p = p(n);
        const std::size_t k = std::min(n, n_epochs() - 1);
        for (int e = 0; e < m; ++e) mf.w[e] = mf.p[e] * actions[k * m + e];
        return mf;
    }

    int state(int i, std::size_t n) const {
        int x = initial_states[i];
        for (const auto& j : particle_jumps[i]) {
            if (static_cast<std::size_t>(j.epoch) >= n) break;
            x = j.to;
        }
        return x;
    }
    double action(int i, std::size_t n) const {
        return actions[std::min(n, n_epochs() - 1) * m + state(i, n)];
    }
    const double* z_of(int i, std::size_t n) const {
        return &z[(std::min(n, n_epochs() - 1) * m + state(i, n)) * m];
    }

    // Y^i at epoch n, rebuilt from per-state drift sums and the particle's own jumps.
    double y(int i, std::size_t n) const {
        int x = initial_states[i];
        double val = y0[x];
        std::size_t start = 0;
        for (const auto& j : particle_jumps[i]) {
            const std::size_t k = j.epoch;
            if (k >= n) break;
            val += cum_drift[(k + 1) * m + x] - cum_drift[start * m + x] + j.y_jump;
            start = k + 1;
            x = j.to;
        }
        val += cum_drift[n * m + x] - cum_drift[start * m + x];
        return val;
    }
    double y_terminal(int i) const { return y(i, n_epochs()); }
    double mean_y_terminal() const {
        double s = 0;
        for (int i = 0; i < n_particles; ++i) s += y_terminal(i);
        return s / n_particles;
    }

    // Delta M for particle i over interval n: (X_{n+1} - X_n) - X_n^T Q_n dt.
    StateVec delta_m(const ModelSpec& spec, int i, std::size_t n) const {
        StateVec d{};
        const int x = state(i, n);
        const int xn = state(i, n + 1);
        d[xn] += 1.0;
        d[x] -= 1.0;
        const double h = dt(n);
        for (std::size_t k = 0; k < spec.graph.size(); ++k) {
            const Edge& ed = spec.graph[k];
            if (ed.from != x) continue;
            const double r = edge_rates[n * spec.graph.size() + k];
            d[ed.to] -= r * h;
            d[x] += r * h;
        }
        return d;
    }
};

inline ExtendedMeanField empirical_mean_field(const ModelSpec& spec, const std::vector<int>& states,
                                              const std::vector<double>& actions) {
    if (states.empty()) throw std::invalid_argument("empirical_mean_field: empty input");
    if (states.size() != actions.size()) throw std::invalid_argument("empirical_mean_field: length mismatch");
    ExtendedMeanField mf;
    const double inv = 1.0 / static_cast<double>(states.size());
    for (std::size_t i = 0; i < states.size(); ++i) {
        const int x = states[i];
        if (x < 0 || x >= spec.m()) throw std::invalid_argument("empirical_mean_field: bad state");
        mf.p[x] += inv;
        mf.w[x] += actions[i] * inv;
    }
    return mf;
}

inline int sample_initial_state(const ModelSpec& spec, std::uint64_t seed, int particle) {
    const double u = uniforms2(seed, Stream::initial, static_cast<std::uint32_t>(particle), 0, 0)[0];
    double c = 0;
    for (int e = 0; e < spec.m(); ++e) {
        c += spec.p0[e];
        if (u < c) return e;
    }
    for (int e = spec.m() - 1; e >= 0; --e)
        if (spec.p0[e] > 0) return e;
    return 0;
}

inline std::uint64_t spec_fingerprint(const ModelSpec& spec) {
    Fnv1a h;
    h.add(static_cast<int>(spec.kind));
    h.add(spec.horizon);
    h.add(spec.p0);
    const auto& q = spec.params;
    for (double x : {q.beta, q.gamma, q.eta, q.epsilon, q.delta, q.c_lambda, q.c_I, q.c_D, q.c_inf, q.c_d, q.kappa})
        h.add(x);
    for (double x : q.beta_bar) h.add(x);
    for (double x : q.lambda_bar) h.add(x);
    return h.h;
}

inline std::uint64_t batch_fingerprint(const ModelSpec& spec, std::uint64_t controls, int n, std::uint64_t seed) {
    Fnv1a h;
    h.add(spec_fingerprint(spec));
    h.add(controls);
    h.add(n);
    h.add(seed);
    return h.h;
}

// Exact event-driven simulation of one interacting population.
// Every epoch draws a fresh Exp(1) per (particle, out-edge); the smallest
// holding time wins. Ties go to the lower particle, then the lower destination.
template <class Controls>
ParticleBatch simulate_batch(const ModelSpec& spec, const Controls& ctl, int n_particles, std::uint64_t seed) {
    if (n_particles < 1) throw std::invalid_argument("simulate_batch: n_particles must be >= 1");
    const int m = spec.m();
    const double T = spec.horizon;
    const std::size_t n_edges = spec.graph.size();

    ParticleBatch b;
    b.m = m;
    b.n_particles = n_particles;
    b.seed = seed;
    b.horizon = T;
    b.fingerprint = batch_fingerprint(spec, ctl.fingerprint(), n_particles, seed);
    b.y0.assign(m, 0.0);
    for (int e = 0; e < m; ++e) b.y0[e] = ctl.eval_y0(e);
    b.particle_jumps.resize(n_particles);

    std::vector<std::uint8_t> x(n_particles);
    Vec<int> cnt{};
    for (int i = 0; i < n_particles; ++i) {
        x[i] = static_cast<std::uint8_t>(sample_initial_state(spec, seed, i));
        ++cnt[x[i]];
    }
    b.initial_states = x;

    // out-edges per state as indices into spec.graph, ordered by destination
    std::vector<std::vector<int>> out(m);
    for (std::size_t k = 0; k < n_edges; ++k) out[spec.graph[k].from].push_back(static_cast<int>(k));
    for (auto& o : out)
        std::sort(o.begin(), o.end(), [&](int a, int c) { return spec.graph[a].to < spec.graph[c].to; });
    for (const auto& o : out)
        if (o.size() > 2) throw std::logic_error("simulate_batch: more than two out-edges per state");

    const double bound = n_particles * T * spec.max_exit_rate() + 1.0;
    const double inv_n = 1.0 / n_particles;

    double t = 0.0;
    b.jump_times.push_back(0.0);
    b.cum_drift.assign(m, 0.0);
    for (int e = 0; e < m; ++e) b.counts.push_back(cnt[e]);

    std::vector<double> rate(n_edges);
    for (std::uint32_t n = 0;; ++n) {
        if (n > 10.0 * bound) throw std::runtime_error("simulate_batch: epoch count exceeds 10x its expected bound");

        const PolicyVector lam = ctl.eval_lambda(t);
        StateVec p{};
        for (int e = 0; e < m; ++e) p[e] = cnt[e] * inv_n;
        const std::size_t zoff = b.z.size();
        b.z.resize(zoff + static_cast<std::size_t>(m) * m, 0.0);
        double* zn = &b.z[zoff];
        StateVec a{};
        for (int e = 0; e < m; ++e) {
            // z only matters for occupied states that can leave
            if (cnt[e] > 0 && !out[e].empty()) ctl.eval_z(t, e, zn + e * m);
            a[e] = best_response(spec, e, zn + e * m, p, lam.lambda);
        }
        const double w_inf = p[spec.I] * a[spec.I];
        for (std::size_t k = 0; k < n_edges; ++k) {
            const Edge& ed = spec.graph[k];
            rate[k] = edge_rate(spec, ed, a[ed.from], w_inf);
            if (!(rate[k] >= 0.0) || !std::isfinite(rate[k])) {
                std::ostringstream os;
                os << "simulate_batch: invalid rate " << rate[k] << " on edge " << spec.states[ed.from] << "->"
                   << spec.states[ed.to] << " at t=" << t;
                throw std::runtime_error(os.str());
            }
        }

        // Race of exponential clocks. Particles sharing (state, edge) share the rate, so
        // within that group the smallest holding time belongs to the largest uniform;
        // only the group winners need a logarithm.
        Vec<std::array<double, 2>> top_u{};
        Vec<std::array<int, 2>> top_i;
        for (auto& ti : top_i) ti = {-1, -1};
        Vec<std::array<bool, 2>> live{};
        bool any = false;
        for (int e = 0; e < m; ++e)
            for (std::size_t s = 0; s < out[e].size(); ++s) {
                live[e][s] = rate[out[e][s]] > 0.0;
                any |= live[e][s];
            }
        if (any) {
            for (int i = 0; i < n_particles; ++i) {
                const int e = x[i];
                if (!live[e][0] && !live[e][1]) continue;
                const auto u = uniforms2(seed, Stream::holding, static_cast<std::uint32_t>(i), 0, n);
                for (int s = 0; s < 2; ++s)
                    if (live[e][s] && u[s] > top_u[e][s]) {
                        top_u[e][s] = u[s];
                        top_i[e][s] = i;
                    }
            }
        }
        double best = std::numeric_limits<double>::infinity();
        EpochRecord rec;
        for (int e = 0; e < m; ++e)
            for (std::size_t s = 0; s < out[e].size(); ++s) {
                const int i = top_i[e][s];
                if (i < 0) continue;
                const double clock = exp1(top_u[e][s]);
                const double tau = clock / rate[out[e][s]];
                const int to = spec.graph[out[e][s]].to;
                // ties: lower particle, then lower destination
                const bool better = tau < best || (tau == best && (i < rec.particle || (i == rec.particle && to < rec.to)));
                if (better) {
                    best = tau;
                    rec.particle = i;
                    rec.from = static_cast<std::uint8_t>(e);
                    rec.to = static_cast<std::uint8_t>(to);
                    rec.slot = static_cast<std::uint8_t>(s);
                    rec.clock = clock;
                }
            }

        const bool final = !(t + best < T);
        const double h = final ? T - t : best;
        if (final) rec = EpochRecord{};

        b.lambda.insert(b.lambda.end(), lam.lambda.begin(), lam.lambda.begin() + m);
        b.actions.insert(b.actions.end(), a.begin(), a.begin() + m);
        b.edge_rates.insert(b.edge_rates.end(), rate.begin(), rate.end());
        const std::size_t coff = b.cum_drift.size() - m;
        for (int e = 0; e < m; ++e) {
            const double* ze = zn + e * m;
            double qz = 0;
            for (int k : out[e]) qz += rate[k] * (ze[spec.graph[k].to] - ze[e]);
            const double f = running_cost(spec, e, a[e], lam.lambda);
            b.cum_drift.push_back(b.cum_drift[coff + e] - (f + qz) * h);
        }
        b.epochs.push_back(rec);
        t = final ? T : t + h;
        b.jump_times.push_back(t);

        if (!final) {
            const double* zf = zn + rec.from * m;
            b.particle_jumps[rec.particle].push_back(
                ParticleJump{static_cast<std::int32_t>(n), rec.to, zf[rec.to] - zf[rec.from]});
            --cnt[rec.from];
            ++cnt[rec.to];
            x[rec.particle] = rec.to;
        }
        for (int e = 0; e < m; ++e) b.counts.push_back(cnt[e]);
        if (final) break;
    }
    return b;
}

// (epoch, t, particle, state, action, y) for the first k particles at every epoch.
inline void write_trajectories_csv(std::ostream& os, const ModelSpec& spec, const ParticleBatch& b, int k) {
    CsvWriter w(os);
    w.header({"epoch", "t", "particle", "state", "action", "y"});
    k = std::min(k, b.n_particles);
    for (int i = 0; i < k; ++i) {
        int x = b.initial_states[i];
        double y = b.y0[x];
        std::size_t next = 0;
        const auto& js = b.particle_jumps[i];
        for (std::size_t n = 0; n <= b.n_epochs(); ++n) {
            w << n << b.jump_times[n] << i << spec.states[x] << b.actions[std::min(n, b.n_epochs() - 1) * b.m + x]
              << y;
            w.end_row();
            if (n == b.n_epochs()) break;
            y += b.cum_drift[(n + 1) * b.m + x] - b.cum_drift[n * b.m + x];
            if (next < js.size() && static_cast<std::size_t>(js[next].epoch) == n) {
                y += js[next].y_jump;
                x = js[next].to;
                ++next;
            }
        }
    }
}

// (t, p_state..., w_state...) per epoch
inline void write_mean_field_csv(std::ostream& os, const ModelSpec& spec, const ParticleBatch& b) {
    CsvWriter w(os);
    std::vector<std::string> cols{"t"};
    for (const auto& s : spec.states) cols.push_back("p_" + s);
    for (const auto& s : spec.states) cols.push_back("w_" + s);
    w.header(cols);
    for (std::size_t n = 0; n <= b.n_epochs(); ++n) {
        const auto mf = b.mean_field(n);
        w << b.jump_times[n];
        for (int e = 0; e < b.m; ++e) w << mf.p[e];
        for (int e = 0; e < b.m; ++e) w << mf.w[e];
        w.end_row();
    }
}

// Piecewise-constant p at time t (right-continuous).
inline StateVec p_at(const ParticleBatch& b, double t) {
    auto it = std::upper_bound(b.jump_times.begin(), b.jump_times.end() - 1, t);
    const std::size_t n = static_cast<std::size_t>(it - b.jump_times.begin()) - 1;
    return b.p(n);
}

}  // namespace smfg
