#pragma once

#include <algorithm>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "smfg/csv.hpp"
#include "smfg/ctmc.hpp"
#include "smfg/ode_bench.hpp"

namespace smfg {

// A population flow sampled on a time grid, from either solver family.
struct TrajectorySummary {
    std::string name;
    int m = 0;
    int infected = 1;
    double exit_rate_I = 0;  // gamma (+ delta)
    std::vector<double> t;
    std::vector<StateVec> p;
};

inline TrajectorySummary summarize(const std::string& name, const ModelSpec& spec, const OdeSolution& sol) {
    return TrajectorySummary{name, spec.m(), spec.I,
                             spec.params.gamma + (spec.D >= 0 ? spec.params.delta : 0.0), sol.grid, sol.p};
}

// Resamples the piecewise-constant empirical flow on a uniform grid with K intervals.
inline TrajectorySummary summarize(const std::string& name, const ModelSpec& spec, const ParticleBatch& b, int K) {
    TrajectorySummary s{name, spec.m(), spec.I, spec.params.gamma + (spec.D >= 0 ? spec.params.delta : 0.0), {}, {}};
    s.t = detail::make_grid(spec.horizon, K);
    for (double t : s.t) s.p.push_back(p_at(b, t));
    return s;
}

struct ScenarioMetrics {
    std::string name;
    double peak_infected = 0, time_of_peak = 0, cumulative_infections = 0;
    StateVec terminal_p{};
};

struct ComparisonReport {
    std::vector<ScenarioMetrics> rows;
    std::vector<std::vector<double>> distance;  // pairwise sup-norm over grid and states
};

inline double sup_distance(const TrajectorySummary& a, const TrajectorySummary& b) {
    if (a.m != b.m || a.t.size() != b.t.size()) throw std::invalid_argument("sup_distance: incompatible grids");
    double d = 0;
    for (std::size_t k = 0; k < a.t.size(); ++k)
        for (int e = 0; e < a.m; ++e) d = std::max(d, std::abs(a.p[k][e] - b.p[k][e]));
    return d;
}

inline ScenarioMetrics metrics_of(const TrajectorySummary& s) {
    ScenarioMetrics r;
    r.name = s.name;
    for (std::size_t k = 0; k < s.t.size(); ++k) {
        const double pi = s.p[k][s.infected];
        if (pi > r.peak_infected) {
            r.peak_infected = pi;
            r.time_of_peak = s.t[k];
        }
        if (k + 1 < s.t.size()) r.cumulative_infections += s.exit_rate_I * pi * (s.t[k + 1] - s.t[k]);
    }
    r.terminal_p = s.p.back();
    return r;
}

inline ComparisonReport compare_scenarios(const std::vector<TrajectorySummary>& results) {
    if (results.size() < 2) throw std::invalid_argument("compare_scenarios: need at least two results");
    for (const auto& r : results) {
        if (r.m != results[0].m || r.t.size() != results[0].t.size())
            throw std::invalid_argument("compare_scenarios: incompatible grids");
        for (std::size_t k = 0; k < r.t.size(); ++k)
            if (std::abs(r.t[k] - results[0].t[k]) > 1e-9)
                throw std::invalid_argument("compare_scenarios: incompatible grids");
    }
    ComparisonReport rep;
    for (const auto& r : results) rep.rows.push_back(metrics_of(r));
    const std::size_t n = results.size();
    rep.distance.assign(n, std::vector<double>(n, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) rep.distance[i][j] = rep.distance[j][i] = sup_distance(results[i], results[j]);
    return rep;
}

inline void write_comparison_csv(std::ostream& os, const ComparisonReport& rep, const std::vector<std::string>& states) {
    CsvWriter w(os);
    std::vector<std::string> cols{"scenario", "peak_infected", "time_of_peak", "cumulative_infections"};
    for (const auto& s : states) cols.push_back("terminal_p_" + s);
    for (const auto& r : rep.rows) cols.push_back("dist_" + r.name);
    w.header(cols);
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
        const auto& r = rep.rows[i];
        w << r.name << r.peak_infected << r.time_of_peak << r.cumulative_infections;
        for (std::size_t e = 0; e < states.size(); ++e) w << r.terminal_p[e];
        for (double d : rep.distance[i]) w << d;
        w.end_row();
    }
}

}  // namespace smfg
