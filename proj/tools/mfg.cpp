// mfg: command-line front end for the solvers in include/smfg.
//
//   mfg [--seed N] [--out DIR] [--force] [--dt H] [--tol E] [--config FILE] <subcommand> [SCENARIO] [options]
//   mfg --from-manifest RUN/manifest.json --out DIR
//
// Exit codes: 0 success, 1 usage or configuration error, 2 solver did not converge.

#include <fnmatch.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "smfg/compare.hpp"
#include "smfg/ctmc.hpp"
#include "smfg/ode_bench.hpp"
#include "smfg/pontryagin.hpp"
#include "smfg/scenarios.hpp"
#include "smfg/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace smfg;

namespace {

constexpr const char* kVersion = "0.3.0";
constexpr int kCsvSchema = 1;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct NotConverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Everything a run depends on besides the scenario itself.
struct RunOptions {
    std::string solver;
    std::uint64_t seed = 0;
    double dt = 0.01;
    std::optional<double> tol;
    int max_iters = 0;  // 0: solver default
    int iters = 2000;
    int particles = 1000;
    int samples = 1;
    double lr = 1e-3;
    double lr_decay = 1.0;
    std::string estimator = "martingale";
    std::string fixed_loss = "population";
    int checkpoint_every = 0;
    std::string init;
    int dump_particles = 10;
};

json to_json(const RunOptions& o) {
    json j{{"solver", o.solver},       {"seed", o.seed},
           {"dt", o.dt},               {"max_iters", o.max_iters},
           {"iters", o.iters},         {"particles", o.particles},
           {"samples", o.samples},     {"lr", o.lr},
           {"lr_decay", o.lr_decay},   {"estimator", o.estimator},
           {"fixed_loss", o.fixed_loss},
           {"checkpoint_every", o.checkpoint_every}, {"init", o.init},
           {"dump_particles", o.dump_particles}};
    j["tol"] = o.tol ? json(*o.tol) : json(nullptr);
    return j;
}

RunOptions options_from_json(const json& j) {
    RunOptions o;
    o.solver = j.at("solver").get<std::string>();
    o.seed = j.at("seed").get<std::uint64_t>();
    o.dt = j.at("dt").get<double>();
    if (!j.at("tol").is_null()) o.tol = j.at("tol").get<double>();
    o.max_iters = j.at("max_iters").get<int>();
    o.iters = j.at("iters").get<int>();
    o.particles = j.at("particles").get<int>();
    o.samples = j.at("samples").get<int>();
    o.lr = j.at("lr").get<double>();
    o.lr_decay = j.at("lr_decay").get<double>();
    o.estimator = j.at("estimator").get<std::string>();
    o.fixed_loss = j.at("fixed_loss").get<std::string>();
    o.checkpoint_every = j.at("checkpoint_every").get<int>();
    o.init = j.at("init").get<std::string>();
    o.dump_particles = j.at("dump_particles").get<int>();
    return o;
}

std::string now_iso() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

std::ofstream open_out(const fs::path& p) {
    std::ofstream os(p);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    return os;
}

void write_json(const fs::path& p, const json& j) { open_out(p) << j.dump(2) << '\n'; }

json vec_json(const ModelSpec& spec, const StateVec& v) {
    json j = json::object();
    for (int e = 0; e < spec.m(); ++e) j[spec.states[e]] = v[e];
    return j;
}

// ---- scenario resolution ----

std::vector<Scenario> resolve_scenarios(const std::vector<std::string>& refs) {
    std::vector<Scenario> out;
    for (const auto& r : refs) {
        if (r.ends_with(".json")) {
            out.push_back(load_scenario_file(r));
            continue;
        }
        bool hit = false;
        for (const auto& n : preset_names())
            if (fnmatch(r.c_str(), n.c_str(), 0) == 0) {
                out.push_back(make_preset(n));
                hit = true;
            }
        if (!hit) throw UsageError("unknown scenario '" + r + "'");
    }
    return out;
}

// ---- controls for simulate ----

FunctionControls constant_controls(const Scenario& sc, std::uint64_t tag) {
    FunctionControls c;
    const int m = sc.spec.m();
    c.z = [m](double, int, double* out) { std::fill(out, out + m, 0.0); };
    c.lambda = [pol = sc.policy](double t) { return pol(t); };
    c.y0 = [](int) { return 0.0; };
    c.tag = tag;
    return c;
}

// ---- subcommands ----

int run_simulate(const Scenario& sc, const RunOptions& o, const fs::path& out) {
    const auto& spec = sc.spec;
    FunctionControls ctl;
    std::string source;
    std::optional<PolicyBundle> bundle;
    std::optional<OdeSolution> ode;
    std::optional<PontryaginSolution> pont;

    if (sc.kind == ScenarioKind::stackelberg && !o.init.empty()) {
        bundle.emplace(spec);
        bundle->load(o.init);
        source = "checkpoint";
    } else if (sc.kind == ScenarioKind::fixed_policy) {
        ode = solve_mfg_picard(spec, sc.policy, o.dt, o.tol.value_or(1e-6), o.max_iters ? o.max_iters : 500);
        if (!ode->converged) spdlog::warn("Picard iteration stopped at gap {:.3e}", ode->final_gap);
        ctl = constant_controls(sc, 2);
        ctl.z = [&sol = *ode](double t, int, double* z) {
            const StateVec u = interpolate(sol, sol.u, t);
            std::copy(u.begin(), u.begin() + sol.m, z);
        };
        source = "ode";
    } else if (sc.kind == ScenarioKind::stackelberg && spec.kind == ModelKind::sir) {
        pont = solve_fbode(spec, o.dt, o.tol.value_or(1e-10), o.max_iters ? o.max_iters : 1000);
        ctl = constant_controls(sc, 3);
        ctl.lambda = [&sol = *pont](double t) { return sol.lambda_hat[detail::cell_of(sol, t)]; };
        ctl.z = [&sol = *pont, &spec](double t, int e, double* z) {
            const std::size_t k = detail::cell_of(sol, t);
            const StateVec zh = reconstruct_z_hat(spec, t, e, sol.pi[k], sol.alpha_hat[k], sol.lambda_hat[k]);
            std::copy(zh.begin(), zh.begin() + 3, z);
        };
        source = "pontryagin";
    } else {
        ctl = constant_controls(sc, 1);
        source = sc.kind == ScenarioKind::free_spread ? "free-spread" : "recommendation";
    }

    spdlog::info("simulating {} particles of {} ({} controls)", o.particles, sc.name, source);
    ParticleBatch b = bundle ? simulate_batch(spec, *bundle, o.particles, o.seed)
                             : simulate_batch(spec, ctl, o.particles, o.seed);
    {
        auto os = open_out(out / "trajectories.csv");
        write_trajectories_csv(os, spec, b, o.dump_particles);
    }
    {
        auto os = open_out(out / "meanfield.csv");
        write_mean_field_csv(os, spec, b);
    }
    const auto s = metrics_of(summarize(sc.name, spec, b, static_cast<int>(std::lround(spec.horizon / o.dt))));
    write_json(out / "summary.json", {{"scenario", sc.name},
                                      {"controls", source},
                                      {"particles", o.particles},
                                      {"epochs", b.n_epochs()},
                                      {"peak_infected", s.peak_infected},
                                      {"time_of_peak", s.time_of_peak},
                                      {"cumulative_infections", s.cumulative_infections},
                                      {"terminal_p", vec_json(spec, b.p(b.n_epochs()))}});
    return 0;
}

int run_solve_ode(const Scenario& sc, const RunOptions& o, const fs::path& out) {
    const auto& spec = sc.spec;
    OdeSolution sol;
    if (sc.kind == ScenarioKind::free_spread) {
        sol = solve_free_spread(spec, o.dt);
    } else if (sc.kind == ScenarioKind::fixed_policy) {
        sol = solve_mfg_picard(spec, sc.policy, o.dt, o.tol.value_or(1e-6), o.max_iters ? o.max_iters : 500);
    } else {
        throw UsageError("solve-ode needs a free-spread or fixed-policy scenario; use solve-pontryagin or train");
    }
    {
        auto os = open_out(out / "trajectories.csv");
        write_ode_csv(os, spec, sol);
    }
    {
        auto os = open_out(out / "convergence.csv");
        write_convergence_csv(os, sol.gaps);
    }
    write_json(out / "summary.json", {{"scenario", sc.name},
                                      {"converged", sol.converged},
                                      {"iterations", sol.iterations_used},
                                      {"final_gap", sol.final_gap},
                                      {"peak_infected", peak_infected(spec, sol)},
                                      {"cumulative_infections", cumulative_infections(spec, sol)},
                                      {"terminal_p", vec_json(spec, sol.p.back())}});
    spdlog::info("{}: peak p(I) {:.6f}, cumulative infections {:.6f}", sc.name, peak_infected(spec, sol),
                 cumulative_infections(spec, sol));
    if (!sol.converged) throw NotConverged("Picard iteration did not reach tol; final gap " + std::to_string(sol.final_gap));
    return 0;
}

int run_solve_pontryagin(const Scenario& sc, const RunOptions& o, const fs::path& out) {
    if (sc.kind != ScenarioKind::stackelberg || sc.spec.kind != ModelKind::sir)
        throw UsageError("solve-pontryagin needs an SIR Stackelberg scenario");
    const auto sol = solve_fbode(sc.spec, o.dt, o.tol.value_or(1e-10), o.max_iters ? o.max_iters : 1000);
    {
        auto os = open_out(out / "trajectories.csv");
        write_pontryagin_csv(os, sc.spec, sol);
    }
    {
        auto os = open_out(out / "convergence.csv");
        write_convergence_csv(os, sol.gaps);
    }
    write_json(out / "summary.json", {{"scenario", sc.name},
                                      {"W", sol.optimal_cost},
                                      {"iterations", sol.iterations},
                                      {"residual", sol.max_residual()},
                                      {"converged", sol.converged}});
    spdlog::info("{}: W = {:.8f} after {} iterations (residual {:.2e})", sc.name, sol.optimal_cost, sol.iterations,
                 sol.max_residual());
    if (!sol.converged) throw NotConverged("forward-backward iteration did not reach tol");
    return 0;
}

int run_train(const Scenario& sc, const RunOptions& o, const fs::path& out, bool fixed) {
    const auto& spec = sc.spec;
    if (fixed && sc.kind == ScenarioKind::stackelberg)
        throw UsageError("train-fixed needs a scenario with an exogenous policy");
    if (!fixed && sc.kind != ScenarioKind::stackelberg) throw UsageError("train needs a Stackelberg scenario");

    TrainConfig cfg;
    cfg.iterations = o.iters;
    cfg.particles = o.particles;
    cfg.samples = o.samples;
    cfg.lr = o.lr;
    cfg.lr_decay = o.lr_decay;
    cfg.seed = o.seed;
    cfg.mode = parse_gradient_mode(o.estimator);
    cfg.fixed_loss = parse_fixed_policy_loss(o.fixed_loss);
    cfg.loss_history_path = (out / "loss_history.csv").string();
    cfg.checkpoint_every = o.checkpoint_every;
    if (o.checkpoint_every > 0) {
        cfg.checkpoint_dir = (out / "checkpoints").string();
        fs::create_directories(cfg.checkpoint_dir);
    }
    std::optional<PolicyBundle> init;
    if (!o.init.empty()) {
        init.emplace(spec);
        init->load(o.init);
    }

    spdlog::info("training {} for {} iterations (N={}, M={}, {} gradients)", sc.name, o.iters, o.particles,
                 o.samples, o.estimator);
    TrainResult r;
    try {
        r = fixed ? train_fixed_policy(spec, sc.policy, sc.xi, cfg, init) : train_stackelberg(spec, cfg, init);
    } catch (const TrainingError& e) {
        throw NotConverged(e.what());
    }
    r.bundle.save((out / "bundle.bin").string());

    const std::uint64_t eval_seed = bits64(o.seed, Stream::sample_seeds, 0xFFFFFFFFu, 0, 0);
    const StepPolicy* exo = fixed ? &sc.policy : nullptr;
    const ParticleBatch eval = fixed ? simulate_batch(spec, FixedPolicyControls<StepPolicy>{r.bundle, sc.policy,
                                                                                           policy_tag(sc.policy)},
                                                      o.particles, eval_seed)
                                     : simulate_batch(spec, r.bundle, o.particles, eval_seed);
    {
        auto os = open_out(out / "controls.csv");
        write_controls_csv(os, spec, r.bundle, eval, exo, 1000);
    }
    {
        auto os = open_out(out / "meanfield.csv");
        write_mean_field_csv(os, spec, eval);
    }
    const auto s = metrics_of(summarize(sc.name, spec, eval, static_cast<int>(std::lround(spec.horizon / o.dt))));
    json summary{{"scenario", sc.name},
                 {"iterations", o.iters},
                 {"estimator", o.estimator},
                 {"fixed_loss", fixed ? json(o.fixed_loss) : json(nullptr)},
                 {"peak_infected", s.peak_infected},
                 {"cumulative_infections", s.cumulative_infections},
                 {"terminal_p", vec_json(spec, eval.p(eval.n_epochs()))}};
    if (!r.history.empty()) {
        summary["final_loss"] = r.history.back().loss;
        summary["trailing_mean_loss"] = trailing_mean(r.history);
        spdlog::info("trailing mean loss {:.6f}", trailing_mean(r.history));
    } else {
        // no updates: report the loss of the initial parameters on one population
        const auto s0 = fixed ? fixed_policy_sample(spec, r.bundle, sc.policy, sc.xi, o.particles,
                                                    sample_seed(o.seed, 0, 0), cfg.mode, cfg.fixed_loss)
                              : stackelberg_sample(spec, r.bundle, o.particles, sample_seed(o.seed, 0, 0), cfg.mode);
        summary["initial_loss"] = s0.rec.loss;
    }
    write_json(out / "summary.json", summary);
    return 0;
}

int run_compare(const std::vector<Scenario>& scs, const RunOptions& o, const fs::path& out) {
    if (scs.size() < 2) throw UsageError("compare needs at least two scenarios");
    std::vector<std::future<TrajectorySummary>> jobs;
    for (const auto& sc : scs)
        jobs.push_back(std::async(std::launch::async, [&sc, &o] {
            if (sc.kind == ScenarioKind::free_spread) return summarize(sc.name, sc.spec, solve_free_spread(sc.spec, o.dt));
            if (sc.kind == ScenarioKind::fixed_policy) {
                const auto sol = solve_mfg_picard(sc.spec, sc.policy, o.dt, o.tol.value_or(1e-6),
                                                  o.max_iters ? o.max_iters : 500);
                if (!sol.converged) throw NotConverged(sc.name + ": Picard iteration did not converge");
                return summarize(sc.name, sc.spec, sol);
            }
            if (sc.spec.kind != ModelKind::sir)
                throw UsageError(sc.name + ": compare solves Stackelberg scenarios only for SIR");
            const auto p = solve_fbode(sc.spec, o.dt, o.tol.value_or(1e-10), o.max_iters ? o.max_iters : 1000);
            if (!p.converged) throw NotConverged(sc.name + ": forward-backward iteration did not converge");
            return TrajectorySummary{sc.name, 3, 1, sc.spec.params.gamma, p.grid, p.pi};
        }));
    std::vector<TrajectorySummary> res;
    for (auto& j : jobs) res.push_back(j.get());
    const auto rep = compare_scenarios(res);
    {
        auto os = open_out(out / "comparison.csv");
        write_comparison_csv(os, rep, scs.front().spec.states);
    }
    json rows = json::array();
    for (const auto& r : rep.rows) {
        rows.push_back({{"scenario", r.name},
                        {"peak_infected", r.peak_infected},
                        {"time_of_peak", r.time_of_peak},
                        {"cumulative_infections", r.cumulative_infections}});
        std::cout << r.name << "  peak " << num17(r.peak_infected) << "  cumulative " << num17(r.cumulative_infections)
                  << '\n';
    }
    write_json(out / "summary.json", {{"scenarios", rows}, {"sup_distance", rep.distance}});
    return 0;
}

void prepare_out(const fs::path& out, bool force) {
    if (fs::exists(out)) {
        if (!fs::is_directory(out)) throw UsageError(out.string() + " exists and is not a directory");
        if (!fs::is_empty(out) && !force) throw UsageError("output directory " + out.string() + " is not empty (use --force)");
    }
    fs::create_directories(out);
}

int execute(const RunOptions& o, const std::vector<Scenario>& scs, const fs::path& out, bool force,
            const std::string& config_path, const std::string& reproduced_from) {
    prepare_out(out, force);
    json manifest{{"tool_version", kVersion},
                  {"csv_schema", kCsvSchema},
                  {"solver", o.solver},
                  {"config_path", config_path},
                  {"seed", o.seed},
                  {"output_dir", out.string()},
                  {"wall_clock", now_iso()},
                  {"options", to_json(o)},
                  {"scenarios", json::array()}};
    for (const auto& sc : scs) manifest["scenarios"].push_back(scenario_to_json(sc));
    if (!reproduced_from.empty()) manifest["reproduced_from"] = reproduced_from;
    write_json(out / "manifest.json", manifest);

    if (o.solver == "compare") return run_compare(scs, o, out);
    if (scs.size() != 1) throw UsageError(o.solver + " takes exactly one scenario");
    const Scenario& sc = scs.front();
    if (o.solver == "simulate") return run_simulate(sc, o, out);
    if (o.solver == "solve-ode") return run_solve_ode(sc, o, out);
    if (o.solver == "solve-pontryagin") return run_solve_pontryagin(sc, o, out);
    if (o.solver == "train") return run_train(sc, o, out, false);
    if (o.solver == "train-fixed") return run_train(sc, o, out, true);
    throw UsageError("unknown solver '" + o.solver + "'");
}

void setup_logging() {
    auto logger = spdlog::stderr_color_mt("mfg");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
    spdlog::set_level(spdlog::level::info);
    if (const char* lvl = std::getenv("MFG_LOG")) spdlog::set_level(spdlog::level::from_str(lvl));
}

}  // namespace

int main(int argc, char** argv) {
    setup_logging();

    CLI::App app{"Stackelberg mean-field epidemic games: simulation, ODE benchmarks, Pontryagin and training"};
    app.require_subcommand(0, 1);

    RunOptions o;
    std::string config, out = "mfg-out", from_manifest;
    bool force = false;
    double tol = 0;
    app.add_option("--config", config, "scenario JSON file");
    app.add_option("--seed", o.seed, "RNG seed");
    app.add_option("--out", out, "output directory");
    app.add_flag("--force", force, "write into a non-empty output directory");
    app.add_option("--dt", o.dt, "ODE grid step / reporting resolution")->check(CLI::PositiveNumber);
    auto* tol_opt = app.add_option("--tol", tol, "solver tolerance")->check(CLI::PositiveNumber);
    app.add_option("--max-iters", o.max_iters, "fixed-point iteration cap")->check(CLI::NonNegativeNumber);
    app.add_option("--from-manifest", from_manifest, "re-run exactly what a manifest.json recorded");

    std::string scenario;
    std::vector<std::string> patterns, positional_patterns;
    std::vector<CLI::App*> subs;
    auto add_sub = [&](const char* name, const char* help) {
        auto* s = app.add_subcommand(name, help);
        s->fallthrough();
        subs.push_back(s);
        return s;
    };
    auto* sim = add_sub("simulate", "particle simulation under the scenario's equilibrium controls");
    auto* ode = add_sub("solve-ode", "free-spread Euler solve or damped Picard Nash solve");
    auto* pon = add_sub("solve-pontryagin", "forward-backward ODE for the SIR Stackelberg optimum");
    auto* tr = add_sub("train", "Stackelberg training of the regulator and agent networks");
    auto* trf = add_sub("train-fixed", "agent-side training under the scenario's fixed policy");
    auto* cmp = add_sub("compare", "ODE-level comparison of several scenarios");

    for (auto* s : {sim, ode, pon, tr, trf}) s->add_option("scenario", scenario, "preset name or config .json");
    for (auto* s : {sim, tr, trf}) {
        s->add_option("--particles", o.particles, "population size N")->check(CLI::PositiveNumber);
        s->add_option("--init", o.init, "checkpoint to start from");
    }
    sim->add_option("--dump-particles", o.dump_particles, "particles written to trajectories.csv")
        ->check(CLI::NonNegativeNumber);
    for (auto* s : {tr, trf}) {
        s->add_option("--iters", o.iters, "SGD iterations")->check(CLI::NonNegativeNumber);
        s->add_option("--samples", o.samples, "populations per iteration")->check(CLI::PositiveNumber);
        s->add_option("--lr", o.lr, "Adam learning rate")->check(CLI::PositiveNumber);
        s->add_option("--lr-decay", o.lr_decay, "per-iteration geometric decay")->check(CLI::PositiveNumber);
        s->add_option("--estimator", o.estimator, "gradient mode: martingale, pathwise or detach")
            ->check(CLI::IsMember({"martingale", "pathwise", "detach"}));
        s->add_option("--checkpoint-every", o.checkpoint_every, "write checkpoints every K iterations")
            ->check(CLI::NonNegativeNumber);
    }
    trf->add_option("--fixed-loss", o.fixed_loss, "population: (xi - mean Y_T)^2, per-particle: mean (xi - Y_T)^2")
        ->check(CLI::IsMember({"population", "per-particle"}));
    cmp->add_option("--scenarios", patterns, "preset globs or config files")->expected(1, -1);
    cmp->add_option("patterns", positional_patterns, "preset globs or config files");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }
    if (tol_opt->count()) o.tol = tol;

    try {
        std::vector<Scenario> scs;
        std::string reproduced_from;
        if (!from_manifest.empty()) {
            std::ifstream in(from_manifest);
            if (!in) throw UsageError("cannot open manifest " + from_manifest);
            json m;
            try {
                in >> m;
                o = options_from_json(m.at("options"));
                for (const auto& s : m.at("scenarios")) scs.push_back(scenario_from_json(s));
                config = m.at("config_path").get<std::string>();
            } catch (const json::exception& e) {
                throw UsageError(std::string("malformed manifest: ") + e.what());
            }
            reproduced_from = from_manifest;
        } else {
            const auto* chosen = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front();
            if (!chosen) throw UsageError("a subcommand is required (see --help)");
            o.solver = chosen->get_name();
            if (o.solver == "compare") {
                patterns.insert(patterns.end(), positional_patterns.begin(), positional_patterns.end());
                if (patterns.empty()) throw UsageError("compare: no scenarios given");
                scs = resolve_scenarios(patterns);
            } else if (!scenario.empty()) {
                if (!config.empty()) throw UsageError("give either a scenario or --config, not both");
                scs = resolve_scenarios({scenario});
            } else if (!config.empty()) {
                scs.push_back(load_scenario_file(config));
            } else {
                throw UsageError("no scenario given");
            }
        }
        parse_gradient_mode(o.estimator);
        parse_fixed_policy_loss(o.fixed_loss);
        return execute(o, scs, out, force, config, reproduced_from);
    } catch (const NotConverged& e) {
        spdlog::error("{}", e.what());
        return 2;
    } catch (const NewtonFailure& e) {
        spdlog::error("{}", e.what());
        return 2;
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
}
