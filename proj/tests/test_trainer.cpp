#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "smfg/scenarios.hpp"
#include "smfg/trainer.hpp"

using namespace smfg;

namespace {

double replay_value(const ParticleBatch& b, const ModelSpec& spec, const PolicyBundle& bundle,
                    const std::vector<double>& theta, GradientMode mode, const StepPolicy* exo) {
    Tape t;
    t.set_parameters(theta);
    return detail::replay(t, b, spec, bundle, mode, exo).total.value();
}

// Reverse-mode vs central differences on a frozen path, for 20 random parameters.
void check_frozen_gradient(GradientMode mode, std::uint64_t seed) {
    const auto spec = make_preset("table2-sir-stackelberg").spec;
    const auto bundle = initial_bundle(spec, seed);
    const auto batch = simulate_batch(spec, bundle, 50, seed);
    Tape tape;
    tape.set_parameters(bundle.theta);
    const auto g = tape.gradient(principal_loss(tape, batch, spec, bundle, mode).total);

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> idx(bundle.size());
    for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(20);
    idx.push_back(bundle.y0_offset());  // always include a y0 entry
    const double h = 1e-5;
    for (std::size_t k : idx) {
        auto th = bundle.theta;
        th[k] += h;
        const double up = replay_value(batch, spec, bundle, th, mode, nullptr);
        th[k] -= 2 * h;
        const double dn = replay_value(batch, spec, bundle, th, mode, nullptr);
        const double fd = (up - dn) / (2 * h);
        EXPECT_LE(std::abs(g[k] - fd), 1e-4 * std::abs(fd) + 1e-8)
            << to_string(mode) << " parameter " << k << " ad " << g[k] << " fd " << fd;
    }
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

}  // namespace

TEST(GradientMode, Parse) {
    EXPECT_EQ(parse_gradient_mode("pathwise"), GradientMode::pathwise);
    EXPECT_EQ(parse_gradient_mode("pathwise-frozen-noise"), GradientMode::pathwise);
    EXPECT_EQ(parse_gradient_mode("detach-dynamics"), GradientMode::detach);
    EXPECT_EQ(parse_gradient_mode("martingale"), GradientMode::martingale);
    EXPECT_THROW(parse_gradient_mode("reinforce"), std::invalid_argument);
    EXPECT_EQ(TrainConfig{}.mode, GradientMode::martingale);
}

TEST(PrincipalLoss, FrozenNoiseGradientPathwise) { check_frozen_gradient(GradientMode::pathwise, 1); }

// detach and martingale hold the compensator rates (and, for martingale, the noise
// correction of p) at their simulated values, so they are not derivatives of the replayed
// value. Pathwise carries the finite-difference check above.
TEST(PrincipalLoss, SurrogateGradientsAreFiniteAndDistinct) {
    const auto spec = make_preset("table2-sir-stackelberg").spec;
    const auto bundle = initial_bundle(spec, 2);
    const auto batch = simulate_batch(spec, bundle, 100, 2);
    std::vector<std::vector<double>> g;
    for (auto mode : {GradientMode::pathwise, GradientMode::detach, GradientMode::martingale}) {
        Tape t;
        t.set_parameters(bundle.theta);
        g.push_back(t.gradient(principal_loss(t, batch, spec, bundle, mode).total));
        for (double v : g.back()) ASSERT_TRUE(std::isfinite(v)) << to_string(mode);
    }
    // y0 enters every mode the same way: through the empirical initial law
    for (std::size_t k = bundle.y0_offset(); k < bundle.size(); ++k) {
        EXPECT_NEAR(g[1][k], g[0][k], 1e-12);
        EXPECT_NEAR(g[2][k], g[0][k], 1e-12);
    }
    EXPECT_NE(g[1], g[0]);
    EXPECT_NE(g[2], g[1]);
}

// All estimators replay the same simulated values; they differ only in what carries gradient.
TEST(PrincipalLoss, ReplayValuesMatchTheSimulation) {
    const auto spec = make_preset("table2-sir-stackelberg").spec;
    const auto bundle = initial_bundle(spec, 4);
    const auto batch = simulate_batch(spec, bundle, 200, 4);
    double c0 = 0;
    for (std::size_t n = 0; n < batch.n_epochs(); ++n) {
        const double pI = batch.p(n)[spec.I];
        c0 += spec.params.c_inf * pI * pI * batch.dt(n);
    }
    for (auto mode : {GradientMode::pathwise, GradientMode::detach, GradientMode::martingale}) {
        Tape t;
        t.set_parameters(bundle.theta);
        const auto L = principal_loss(t, batch, spec, bundle, mode);
        EXPECT_NEAR(L.mean_y_terminal.value(), batch.mean_y_terminal(), 1e-9) << to_string(mode);
        EXPECT_NEAR(L.running_c0.value(), c0, 1e-10) << to_string(mode);
        EXPECT_NEAR(L.total.value(),
                    L.running_c0.value() + L.running_f0.value() + L.terminal_c0.value() - batch.mean_y_terminal(),
                    1e-9);
    }
}

TEST(PrincipalLoss, RejectsForeignBatch) {
    const auto spec = make_preset("table2-sir-stackelberg").spec;
    const auto a = initial_bundle(spec, 1), b = initial_bundle(spec, 2);
    const auto batch = simulate_batch(spec, a, 20, 1);
    Tape t;
    t.set_parameters(b.theta);
    EXPECT_THROW(principal_loss(t, batch, spec, b), std::invalid_argument);
}

TEST(PrincipalLoss, SeirdTerminalDeathCost) {
    const auto spec = make_preset("table3-seird-stackelberg").spec;
    const auto bundle = initial_bundle(spec, 5);
    const auto batch = simulate_batch(spec, bundle, 300, 5);
    Tape t;
    t.set_parameters(bundle.theta);
    const auto L = principal_loss(t, batch, spec, bundle, GradientMode::detach);
    EXPECT_NEAR(L.terminal_c0.value(), spec.params.c_d * batch.p(batch.n_epochs())[spec.D], 1e-12);
}

// With f = 0, xi = 0, y0 = 0 and z = 0 the loss vanishes identically.
TEST(FixedPolicyLoss, ZeroCostZeroControlsGiveZeroLoss) {
    auto sc = make_preset("table1-no-lockdown");
    sc.spec.params.c_I = 0;
    auto bundle = initial_bundle(sc.spec, 1, false);
    std::fill(bundle.theta.begin(), bundle.theta.begin() + bundle.lambda_offset(), 0.0);
    std::fill(bundle.theta.begin() + bundle.y0_offset(), bundle.theta.end(), 0.0);
    for (auto mode : {GradientMode::pathwise, GradientMode::martingale}) {
        const auto s = fixed_policy_sample(sc.spec, bundle, sc.policy, 0.0, 100, 7, mode);
        EXPECT_EQ(s.rec.loss, 0.0);
    }
}

TEST(FixedPolicyLoss, MeanInsideTheSquare) {
    const auto sc = make_preset("table1-late-lockdown");
    const auto bundle = initial_bundle(sc.spec, 2, false);
    const FixedPolicyControls<StepPolicy> ctl{bundle, sc.policy, policy_tag(sc.policy)};
    const auto batch = simulate_batch(sc.spec, ctl, 100, 3);
    Tape t;
    t.set_parameters(bundle.theta);
    const auto L = fixed_policy_loss(t, batch, sc.spec, bundle, sc.policy, 0.5, GradientMode::detach);
    const double gap = 0.5 - batch.mean_y_terminal();
    EXPECT_NEAR(L.total.value(), gap * gap, 1e-9);
}

TEST(Train, ZeroIterationsLeavesBundleUnchanged) {
    const auto spec = make_preset("table2-sir-stackelberg").spec;
    TrainConfig cfg;
    cfg.iterations = 0;
    cfg.seed = 3;
    const auto r = train_stackelberg(spec, cfg);
    EXPECT_TRUE(r.history.empty());
    EXPECT_EQ(r.bundle.theta, initial_bundle(spec, 3).theta);
}

TEST(Train, ReproducibleHistories) {
    const auto spec = make_preset("table2-sir-stackelberg").spec;
    TrainConfig cfg;
    cfg.iterations = 5;
    cfg.particles = 100;
    cfg.samples = 3;
    cfg.seed = 11;
    const auto a = train_stackelberg(spec, cfg);
    const auto b = train_stackelberg(spec, cfg);
    ASSERT_EQ(a.history.size(), 5u);
    for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(a.history[k].loss, b.history[k].loss);
    EXPECT_EQ(a.bundle.theta, b.bundle.theta);
    EXPECT_NE(a.bundle.theta, initial_bundle(spec, 11).theta);
}

TEST(Train, HistoryAndCheckpointFiles) {
    const auto spec = make_preset("table2-sir-stackelberg").spec;
    const std::string dir = ::testing::TempDir() + "/smfg_train_files";
    std::filesystem::create_directories(dir);
    TrainConfig cfg;
    cfg.iterations = 4;
    cfg.particles = 50;
    cfg.loss_history_path = dir + "/loss_history.csv";
    cfg.checkpoint_every = 2;
    cfg.checkpoint_dir = dir;
    const auto r = train_stackelberg(spec, cfg);
    std::ifstream in(cfg.loss_history_path);
    std::string header;
    std::getline(in, header);
    EXPECT_EQ(header, "iteration,loss,running_c0,running_f0,terminal_C0,terminal_y,seconds");
    int rows = 0;
    for (std::string line; std::getline(in, line);) ++rows;
    EXPECT_EQ(rows, 4);
    PolicyBundle back(spec);
    back.load(dir + "/checkpoint_4.bin");
    EXPECT_EQ(back.theta, r.bundle.theta);
    EXPECT_TRUE(std::filesystem::exists(dir + "/checkpoint_2.bin"));
}

TEST(Train, ConfigValidation) {
    const auto spec = make_preset("table2-sir-stackelberg").spec;
    TrainConfig cfg;
    cfg.particles = 0;
    EXPECT_THROW(train_stackelberg(spec, cfg), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.lr = -1;
    EXPECT_THROW(train_stackelberg(spec, cfg), std::invalid_argument);
}

TEST(Train, LossDecreasesOnStackelbergBenchmark) {
    const auto spec = make_preset("table2-sir-stackelberg").spec;
    TrainConfig cfg;
    cfg.iterations = 200;
    cfg.particles = 300;
    cfg.seed = 2;
    const auto r = train_stackelberg(spec, cfg);
    std::vector<double> early, late;
    for (const auto& h : r.history) (h.iteration < 20 ? early : late).push_back(h.loss);
    late.erase(late.begin(), late.begin() + 80);  // keep [K/2, K]
    EXPECT_LT(median(late), median(early));
}

TEST(Train, FixedPolicyLossDecreases) {
    const auto sc = make_preset("table1-no-lockdown");
    TrainConfig cfg;
    cfg.iterations = 200;
    cfg.particles = 300;
    cfg.seed = 2;
    const auto r = train_fixed_policy(sc.spec, sc.policy, sc.xi, cfg);
    std::vector<double> early, late;
    for (const auto& h : r.history) (h.iteration < 20 ? early : late).push_back(h.loss);
    late.erase(late.begin(), late.begin() + 80);
    EXPECT_LT(median(late), median(early));
    EXPECT_FALSE(r.bundle.y0_constrained);
}

TEST(Controls, CsvHasThousandRows) {
    const auto spec = make_preset("table2-sir-stackelberg").spec;
    const auto bundle = initial_bundle(spec, 1);
    const auto batch = simulate_batch(spec, bundle, 100, 1);
    std::ostringstream os;
    write_controls_csv(os, spec, bundle, batch, nullptr, 1000);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "t,lambda_S,lambda_I,lambda_R,alpha_S,alpha_I,alpha_R,z_S,z_I,z_R,p_S,p_I,p_R");
    int rows = 0;
    std::string last;
    while (std::getline(is, line)) ++rows, last = line;
    EXPECT_EQ(rows, 1000);
    EXPECT_EQ(last.substr(0, 3), "30,");
}

TEST(FixedPolicyLoss, PerParticleReplayMatchesSimulatedY) {
    const auto sc = make_preset("table1-no-lockdown");
    const auto bundle = initial_bundle(sc.spec, 2, false);
    const FixedPolicyControls<StepPolicy> ctl{bundle, sc.policy, policy_tag(sc.policy)};
    const auto batch = simulate_batch(sc.spec, ctl, 200, 3);
    for (auto mode : {GradientMode::pathwise, GradientMode::detach, GradientMode::martingale}) {
        Tape t;
        t.set_parameters(bundle.theta);
        std::vector<Var> y;
        detail::replay(t, batch, sc.spec, bundle, mode, &sc.policy, &y);
        ASSERT_EQ(y.size(), 200u);
        for (int i = 0; i < 200; ++i) EXPECT_NEAR(y[i].value(), batch.y_terminal(i), 1e-10) << to_string(mode);
    }
    Tape t;
    t.set_parameters(bundle.theta);
    const auto L = fixed_policy_loss(t, batch, sc.spec, bundle, sc.policy, 0.5, GradientMode::detach,
                                     FixedPolicyLoss::per_particle);
    double s = 0;
    for (int i = 0; i < 200; ++i) s += (0.5 - batch.y_terminal(i)) * (0.5 - batch.y_terminal(i));
    EXPECT_NEAR(L.total.value(), s / 200, 1e-9);
}

TEST(FixedPolicyLoss, PerParticleFrozenNoiseGradient) {
    const auto sc = make_preset("table1-late-lockdown");
    const auto bundle = initial_bundle(sc.spec, 5, false);
    const FixedPolicyControls<StepPolicy> ctl{bundle, sc.policy, policy_tag(sc.policy)};
    const auto batch = simulate_batch(sc.spec, ctl, 50, 5);
    auto value = [&](const std::vector<double>& th) {
        Tape t;
        t.set_parameters(th);
        return fixed_policy_loss(t, batch, sc.spec, bundle, sc.policy, 0.0, GradientMode::pathwise,
                                 FixedPolicyLoss::per_particle)
            .total.value();
    };
    Tape tape;
    tape.set_parameters(bundle.theta);
    const auto g = tape.gradient(fixed_policy_loss(tape, batch, sc.spec, bundle, sc.policy, 0.0,
                                                   GradientMode::pathwise, FixedPolicyLoss::per_particle)
                                     .total);
    const double h = 1e-5;
    for (std::size_t k = 0; k < bundle.size(); k += 37) {
        auto th = bundle.theta;
        th[k] += h;
        const double up = value(th);
        th[k] -= 2 * h;
        const double fd = (up - value(th)) / (2 * h);
        EXPECT_LE(std::abs(g[k] - fd), 1e-4 * std::abs(fd) + 1e-8) << "parameter " << k;
    }
}

TEST(FixedPolicyLoss, ParseNames) {
    EXPECT_EQ(parse_fixed_policy_loss("population"), FixedPolicyLoss::population);
    EXPECT_EQ(parse_fixed_policy_loss("per-particle"), FixedPolicyLoss::per_particle);
    EXPECT_THROW(parse_fixed_policy_loss("mean"), std::invalid_argument);
    EXPECT_EQ(TrainConfig{}.fixed_loss, FixedPolicyLoss::population);
}
