// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// usage: acceptance <path to mfg>

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "smfg/compare.hpp"
#include "smfg/pontryagin.hpp"
#include "smfg/scenarios.hpp"
#include "smfg/trainer.hpp"

using namespace smfg;
namespace fs = std::filesystem;

namespace {

// Controls are judged on a large evaluation population so that finite-N noise
// (about 0.05 in sup-norm at N = 1000, even for the exact ODE controls) does not mask them.
constexpr int kEvalParticles = 10000;

struct Outcome {
    bool pass;
    std::string detail;
};

int failures = 0;

void run(int id, const char* title, double budget_s, const std::function<Outcome()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char timing[64];
    std::snprintf(timing, sizeof timing, "%.1fs of %.0fs", secs, budget_s);
    const bool pass = o.pass && secs < budget_s;
    if (!pass) ++failures;
    std::printf("%s criterion %d (%s): %s [%s]\n", pass ? "PASS" : "FAIL", id, title, o.detail.c_str(), timing);
    std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

Outcome criterion1() {
    std::mt19937_64 rng(2024);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    double worst_row = 0, worst_off = 0;
    for (ModelKind kind : {ModelKind::sir, ModelKind::seird}) {
        const int m = kind == ModelKind::sir ? 3 : 5;
        for (int draw = 0; draw < 10000; ++draw) {
            ModelParams q;
            q.beta = 3 * U(rng), q.gamma = 3 * U(rng), q.eta = 3 * U(rng), q.epsilon = 3 * U(rng),
            q.delta = 3 * U(rng), q.c_lambda = 0.1 + 3 * U(rng);
            const auto spec = ModelSpec::make(kind, q, 10.0, std::vector<double>(m, 1.0 / m));
            ExtendedMeanField mf;
            double s = 0;
            for (int e = 0; e < m; ++e) s += mf.p[e] = U(rng);
            for (int e = 0; e < m; ++e) {
                mf.p[e] /= s;
                mf.w[e] = mf.p[e] * U(rng);
            }
            const auto Q = q_matrix(spec, 0.0, U(rng), mf);
            for (int i = 0; i < m; ++i) {
                double row = 0;
                for (int j = 0; j < m; ++j) {
                    row += Q[i][j];
                    if (i != j) worst_off = std::min(worst_off, Q[i][j]);
                }
                worst_row = std::max(worst_row, std::abs(row));
            }
        }
    }
    double worst_mass = 0;
    for (const char* n : {"table1-free-spread", "table3-seird-stackelberg"}) {
        const auto spec = make_preset(n).spec;
        for (const auto& p : solve_free_spread(spec, 0.01).p) {
            double s = 0;
            for (int e = 0; e < spec.m(); ++e) s += p[e];
            worst_mass = std::max(worst_mass, std::abs(s - 1));
        }
    }
    const auto sc = make_preset("table1-no-lockdown");
    for (const auto& p : solve_mfg_picard(sc.spec, sc.policy, 0.01).p)
        worst_mass = std::max(worst_mass, std::abs(p[0] + p[1] + p[2] - 1));
    return {worst_row < 1e-12 && worst_off >= 0 && worst_mass < 1e-8,
            fmt("max |row sum| %.2e, min off-diagonal %.2e, max |sum p - 1| %.2e", worst_row, worst_off, worst_mass)};
}

Outcome criterion2() {
    const auto sc = make_preset("table1-free-spread");
    const auto ode = summarize("ode", sc.spec, solve_free_spread(sc.spec, 0.01));
    FunctionControls zero;
    zero.z = [](double, int, double* z) { std::fill(z, z + 3, 0.0); };
    zero.lambda = [](double) { return PolicyVector{{1, 1, 1}}; };
    zero.y0 = [](int) { return 0.0; };
    double mean = 0;
    for (int s = 1; s <= 10; ++s)
        mean += sup_distance(summarize("mc", sc.spec, simulate_batch(sc.spec, zero, 10000, s), 5000), ode) / 10;
    return {mean < 0.02, fmt("mean sup-norm over 10 seeds at N=10^4: %.4f", mean)};
}

Outcome criterion3() {
    const auto sc = make_preset("table1-no-lockdown");
    const auto sol = solve_mfg_picard(sc.spec, sc.policy, 0.01, 1e-6, 500);
    const double peak = peak_infected(sc.spec, sol);
    const auto fs = make_preset("table1-free-spread");
    const double peak_fs = peak_infected(fs.spec, solve_free_spread(fs.spec, 0.01));
    return {sol.converged && sol.final_gap < 1e-6 && sol.iterations_used <= 500 && peak < peak_fs,
            fmt("gap %.2e after %.0f iterations, peak %.6f vs free spread %.6f", sol.final_gap, sol.iterations_used, peak,
                peak_fs)};
}

Outcome criterion4() {
    double cum[4];
    int k = 0;
    for (const char* n : {"table1-early-lockdown", "table1-late-lockdown", "table1-no-lockdown"}) {
        const auto sc = make_preset(n);
        cum[k++] = cumulative_infections(sc.spec, solve_mfg_picard(sc.spec, sc.policy, 0.01));
    }
    const auto fs = make_preset("table1-free-spread");
    cum[3] = cumulative_infections(fs.spec, solve_free_spread(fs.spec, 0.01));
    return {cum[0] < cum[1] && cum[1] < cum[2] && cum[2] < cum[3],
            fmt("early %.4f < late %.4f < none %.4f < free %.4f", cum[0], cum[1], cum[2], cum[3])};
}

Outcome criterion5() {
    const auto spec = make_preset("table2-sir-stackelberg").spec;
    const auto bundle = initial_bundle(spec, 5);
    const auto batch = simulate_batch(spec, bundle, 50, 5);
    Tape tape;
    tape.set_parameters(bundle.theta);
    const auto g = tape.gradient(principal_loss(tape, batch, spec, bundle, GradientMode::pathwise).total);
    auto value = [&](const std::vector<double>& th) {
        Tape t;
        t.set_parameters(th);
        return principal_loss(t, batch, spec, bundle, GradientMode::pathwise).total.value();
    };
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<std::size_t> pick(0, bundle.size() - 1);
    const double h = 1e-5;
    double worst = 0;
    for (int r = 0; r < 20; ++r) {
        const std::size_t k = pick(rng);
        auto th = bundle.theta;
        th[k] += h;
        const double up = value(th);
        th[k] -= 2 * h;
        const double fd = (up - value(th)) / (2 * h);
        const double scale = std::max(std::abs(fd), std::abs(g[k]));
        if (scale > 1e-10) worst = std::max(worst, std::abs(g[k] - fd) / scale);
    }
    return {worst < 1e-4, fmt("max relative error over 20 parameters %.2e", worst)};
}

Outcome criterion6() {
    const auto sc = make_preset("table1-no-lockdown");
    const auto ode = solve_mfg_picard(sc.spec, sc.policy, 0.01);
    TrainConfig cfg;
    cfg.iterations = 2000;
    cfg.particles = 1000;
    cfg.seed = 1;
    const auto r = train_fixed_policy(sc.spec, sc.policy, sc.xi, cfg);
    const FixedPolicyControls<StepPolicy> ctl{r.bundle, sc.policy, policy_tag(sc.policy)};
    const auto ref = summarize("ode", sc.spec, ode);
    const double d = sup_distance(summarize("nn", sc.spec, simulate_batch(sc.spec, ctl, kEvalParticles, 999), 5000), ref);
    const double d1000 = sup_distance(summarize("nn", sc.spec, simulate_batch(sc.spec, ctl, 1000, 999), 5000), ref);
    return {d < 0.05, fmt("sup-norm %.4f at N=10^4 evaluation (%.4f at N=1000), trailing loss %.4f", d, d1000,
                          trailing_mean(r.history))};
}

Outcome criterion7() {
    const auto spec = make_preset("table2-sir-stackelberg").spec;
    const auto sol = solve_fbode(spec);
    TrainConfig cfg;
    cfg.iterations = 2000;
    cfg.particles = 1000;
    cfg.seed = 1;
    const auto r = train_stackelberg(spec, cfg);
    const double trail = trailing_mean(r.history);
    const double gap = std::abs(trail - sol.optimal_cost) / std::abs(sol.optimal_cost);
    const TrajectorySummary ref{"pontryagin", 3, 1, spec.params.gamma, sol.grid, sol.pi};
    const int K = static_cast<int>(sol.grid.size()) - 1;
    const double d = sup_distance(summarize("nn", spec, simulate_batch(spec, r.bundle, kEvalParticles, 999), K), ref);
    return {sol.converged && gap < 0.05 && d < 0.05,
            fmt("trailing loss %.4f vs W* %.4f (gap %.2f%%), sup-norm %.4f", trail, sol.optimal_cost, 100 * gap, d)};
}

Outcome criterion8() {
    const auto spec = make_preset("table2-sir-stackelberg").spec;
    const auto sol = solve_fbode(spec);
    double round_trip = 0;
    for (std::size_t k = 0; k < sol.grid.size(); ++k) {
        const auto z = reconstruct_z_hat(spec, sol.grid[k], 0, sol.pi[k], sol.alpha_hat[k], sol.lambda_hat[k]);
        round_trip = std::max(round_trip, std::abs(equilibrium_control(spec, sol.grid[k], 0, z, sol.pi[k],
                                                                       sol.lambda_hat[k]) -
                                                   sol.alpha_hat[k]));
    }
    // agent cost along each path, from the cell-wise optimal controls
    auto f = [&](std::size_t k, int x) {
        const auto& l = sol.lambda_hat[k].lambda;
        const double a = x == 0 ? sol.alpha_hat[k] : std::min(1.0, l[x]);
        const double d = l[x] - a;
        return (x == 0 ? 0.5 * spec.params.c_lambda : 0.5) * d * d + (x == 1 ? spec.params.c_I : 0.0);
    };
    const int n = 10000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
        const auto path = sample_optimal_path(spec, sol, 8, static_cast<std::uint32_t>(i));
        double cost = 0;
        int x = path.initial_state;
        std::size_t next = 0;
        for (std::size_t k = 0; k + 1 < sol.grid.size(); ++k) {
            double t = sol.grid[k];
            while (next < path.jumps.size() && path.jumps[next].first < sol.grid[k + 1]) {
                cost += (path.jumps[next].first - t) * f(k, x);
                t = path.jumps[next].first;
                x = path.jumps[next].second;
                ++next;
            }
            cost += (sol.grid[k + 1] - t) * f(k, x);
        }
        const double v = cost - reconstruct_xi(spec, path, sol, StateVec{});
        s += v;
        s2 += v * v;
    }
    const double mean = s / n, se = std::sqrt((s2 / n - mean * mean) / n);
    const double dev = std::abs(mean - spec.params.kappa);
    return {sol.max_residual() < 1e-8 && round_trip < 1e-8 && dev < 2 * se,
            fmt("max residual %.2e, round trip %.2e, |mean cost - kappa| %.4f vs 2 SE %.4f", sol.max_residual(),
                round_trip, dev, 2 * se)};
}

Outcome criterion9() {
    const auto spec = make_preset("table3-seird-stackelberg").spec;
    TrainConfig cfg;
    cfg.iterations = 2000;
    cfg.particles = 1000;
    cfg.seed = 1;
    const auto r = train_stackelberg(spec, cfg);
    const auto eval = simulate_batch(spec, r.bundle, kEvalParticles, 999);
    const double peak = metrics_of(summarize("nn", spec, eval, 5000)).peak_infected;
    const double pD = eval.p(eval.n_epochs())[spec.D];
    const auto fs = solve_free_spread(spec, 0.01);
    const double peak_fs = peak_infected(spec, fs), pD_fs = fs.p.back()[spec.D];
    return {peak < peak_fs && pD < pD_fs,
            fmt("peak I %.4f vs free spread %.4f, terminal D %.4f vs %.4f", peak, peak_fs, pD, pD_fs)};
}

// ---- determinism through the CLI ----

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// loss_history.csv carries wall-clock seconds in its last column; compare the rest.
std::string without_last_column(const std::string& text) {
    std::istringstream in(text);
    std::string out, line;
    while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + '\n';
    return out;
}

int sh(const std::string& cmd) {
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

Outcome criterion10(const std::string& mfg) {
    const fs::path root = fs::temp_directory_path() / "smfg_acceptance";
    fs::remove_all(root);
    fs::create_directories(root);
    const std::vector<std::pair<std::string, std::string>> runs{
        {"simulate", "simulate table1-late-lockdown --particles 2000"},
        {"simulate-pontryagin", "simulate table2-sir-stackelberg --particles 1000"},
        {"solve-ode", "solve-ode table1-early-lockdown"},
        {"simulate-seird", "simulate table3-seird-stackelberg --particles 500"},
        {"solve-pontryagin", "solve-pontryagin table2-sir-stackelberg"},
        {"train", "train table2-sir-stackelberg --iters 30 --particles 200 --samples 2"},
        {"train-fixed", "train-fixed table1-no-lockdown --iters 30 --particles 200"},
        {"compare", "compare 'table1-*'"},
    };
    int files = 0;
    for (const auto& [name, args] : runs) {
        const fs::path a = root / (name + "_a"), b = root / (name + "_b");
        if (sh("MFG_LOG=error " + mfg + " --seed 3 --out " + a.string() + " " + args + " > /dev/null") != 0)
            return {false, name + ": first run failed"};
        if (sh("MFG_LOG=error " + mfg + " --from-manifest " + (a / "manifest.json").string() + " --out " + b.string() +
               " > /dev/null") != 0)
            return {false, name + ": manifest re-run failed"};
        for (const auto& ent : fs::directory_iterator(a)) {
            if (ent.path().extension() != ".csv") continue;
            const auto other = b / ent.path().filename();
            if (!fs::exists(other)) return {false, name + ": re-run lacks " + ent.path().filename().string()};
            std::string x = slurp(ent.path()), y = slurp(other);
            if (ent.path().filename() == "loss_history.csv") x = without_last_column(x), y = without_last_column(y);
            if (x != y) return {false, name + ": " + ent.path().filename().string() + " differs"};
            ++files;
        }
    }
    fs::remove_all(root);
    return {files > 0, std::to_string(runs.size()) + " runs, " + std::to_string(files) + " CSV files identical"};
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::fprintf(stderr, "usage: acceptance <path to mfg>\n");
        return 1;
    }
    const std::string mfg = argv[1];
    run(1, "structural invariants", 10, criterion1);
    run(2, "mean-field convergence", 60, criterion2);
    run(3, "Nash benchmark", 30, criterion3);
    run(4, "lockdown ordering", 60, criterion4);
    run(5, "gradient correctness", 120, criterion5);
    run(6, "NN vs ODE equilibrium", 1800, criterion6);
    run(7, "Stackelberg optimality gap", 3600, criterion7);
    run(8, "Pontryagin consistency", 600, criterion8);
    run(9, "SEIRD reproduction", 3600, criterion9);
    run(10, "determinism", 1800, [&] { return criterion10(mfg); });
    std::printf("%d of 10 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
