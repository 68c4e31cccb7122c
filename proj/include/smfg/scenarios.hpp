#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "smfg/model.hpp"

namespace smfg {

// lambda(t) = before for t <= switch_time, after for t > switch_time.
// A constant policy has switch_time = +inf.
struct StepPolicy {
    StateVec before{}, after{};
    double switch_time = INFINITY;

    PolicyVector operator()(double t) const { return PolicyVector{t > switch_time ? after : before}; }
    static StepPolicy constant(const StateVec& v) { return StepPolicy{v, v, INFINITY}; }
};

enum class ScenarioKind { free_spread, fixed_policy, stackelberg };

struct Scenario {
    std::string name;
    ScenarioKind kind = ScenarioKind::fixed_policy;
    ModelSpec spec;
    StepPolicy policy;  // exogenous lambda (free-spread / fixed-policy); lambda_bar for stackelberg
    double xi = 0.0;
};

inline const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names = {
        "table1-free-spread",    "table1-no-lockdown",     "table1-late-lockdown",
        "table1-early-lockdown", "table2-sir-stackelberg", "table3-seird-stackelberg"};
    return names;
}

namespace detail {

inline Scenario table1(const std::string& name, ScenarioKind kind, StepPolicy pol) {
    ModelParams q;
    q.beta = 0.25;
    q.gamma = 0.1;
    q.eta = 0.0;
    q.c_lambda = 10;
    q.c_I = 1;
    return Scenario{name, kind, ModelSpec::make(ModelKind::sir, q, 50.0, {0.9, 0.1, 0.0}), pol, 0.0};
}

inline StateVec policy_vec(const ModelSpec& spec, const std::vector<double>& per_policy_state) {
    StateVec v{};
    for (std::size_t k = 0; k < spec.policy_states.size(); ++k) v[spec.policy_states[k]] = per_policy_state[k];
    return v;
}

}  // namespace detail

inline Scenario make_preset(const std::string& name) {
    using detail::table1;
    if (name == "table1-free-spread") return table1(name, ScenarioKind::free_spread, StepPolicy::constant({1, 1, 1}));
    if (name == "table1-no-lockdown") return table1(name, ScenarioKind::fixed_policy, StepPolicy::constant({1, 1, 1}));
    if (name == "table1-late-lockdown")
        return table1(name, ScenarioKind::fixed_policy, StepPolicy{{1, 0.9, 1}, {0.7, 0.6, 1}, 40.0});
    if (name == "table1-early-lockdown")
        return table1(name, ScenarioKind::fixed_policy, StepPolicy{{0.7, 0.6, 1}, {1, 0.9, 1}, 10.0});
    if (name == "table2-sir-stackelberg") {
        ModelParams q;
        q.beta = 0.25;
        q.gamma = 0.1;
        q.eta = 0.0;
        q.c_lambda = 10;
        q.c_I = 0.5;
        q.c_inf = 1;
        q.beta_bar = {0.2, 1.0, 0.0};
        q.lambda_bar = {1.0, 0.7, 1.0};
        q.kappa = 0.0;
        auto spec = ModelSpec::make(ModelKind::sir, q, 30.0, {0.9, 0.1, 0.0});
        return Scenario{name, ScenarioKind::stackelberg, spec,
                        StepPolicy::constant(detail::policy_vec(spec, q.lambda_bar)), 0.0};
    }
    if (name == "table3-seird-stackelberg") {
        ModelParams q;
        q.beta = 0.25;
        q.gamma = 0.1;
        q.eta = 0.01;
        q.epsilon = 2.0;
        q.delta = 0.01;
        q.c_lambda = 10;
        q.c_I = 1;
        q.c_D = 20;
        q.c_inf = 1;
        q.c_d = 20;
        q.beta_bar = {0.2, 0.2, 1.0, 0.0};
        q.lambda_bar = {1.0, 1.0, 0.7, 1.0};
        q.kappa = 0.0;
        auto spec = ModelSpec::make(ModelKind::seird, q, 30.0, {0.9, 0.0, 0.1, 0.0, 0.0});
        return Scenario{name, ScenarioKind::stackelberg, spec,
                        StepPolicy::constant(detail::policy_vec(spec, q.lambda_bar)), 0.0};
    }
    throw std::invalid_argument("unknown scenario '" + name + "'");
}

// The constant-control free-spread counterpart (alpha = lambda = 1) of any scenario.
inline Scenario free_spread_of(const Scenario& sc) {
    Scenario fs = sc;
    fs.name = sc.name + "/free-spread";
    fs.kind = ScenarioKind::free_spread;
    StateVec ones{};
    for (int e = 0; e < sc.spec.m(); ++e) ones[e] = e == sc.spec.D ? 0.0 : 1.0;
    fs.policy = StepPolicy::constant(ones);
    return fs;
}

// ---- JSON config ----
//
// {
//   "preset": "table1-no-lockdown",         optional starting point
//   "name": "...", "kind": "free_spread|fixed_policy|stackelberg", "model": "sir|seird",
//   "horizon": 50, "p0": [...], "xi": 0,
//   "params": { ModelParams field names },
//   "policy": { "before": [...], "after": [...], "switch_time": 40 }   or   { "constant": [...] }
// }
// Policy vectors list one entry per policy state (S,I,R or S,E,I,R).

namespace detail {

inline ModelKind parse_kind(const std::string& s) {
    if (s == "sir") return ModelKind::sir;
    if (s == "seird") return ModelKind::seird;
    throw std::invalid_argument("config: model must be 'sir' or 'seird'");
}

inline ScenarioKind parse_scenario_kind(const std::string& s) {
    if (s == "free_spread") return ScenarioKind::free_spread;
    if (s == "fixed_policy") return ScenarioKind::fixed_policy;
    if (s == "stackelberg") return ScenarioKind::stackelberg;
    throw std::invalid_argument("config: unknown kind '" + s + "'");
}

inline void apply_params(ModelParams& q, const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("config: 'params' must be an object");
    for (const auto& [key, val] : j.items()) {
        auto num = [&]() {
            if (!val.is_number()) throw std::invalid_argument("config: params." + key + " must be a number");
            return val.get<double>();
        };
        auto vec = [&]() {
            if (!val.is_array()) throw std::invalid_argument("config: params." + key + " must be an array");
            return val.get<std::vector<double>>();
        };
        if (key == "beta") q.beta = num();
        else if (key == "gamma") q.gamma = num();
        else if (key == "eta") q.eta = num();
        else if (key == "epsilon") q.epsilon = num();
        else if (key == "delta") q.delta = num();
        else if (key == "c_lambda") q.c_lambda = num();
        else if (key == "c_I") q.c_I = num();
        else if (key == "c_D") q.c_D = num();
        else if (key == "c_inf") q.c_inf = num();
        else if (key == "c_d") q.c_d = num();
        else if (key == "kappa") q.kappa = num();
        else if (key == "beta_bar") q.beta_bar = vec();
        else if (key == "lambda_bar") q.lambda_bar = vec();
        else throw std::invalid_argument("config: unknown params key '" + key + "'");
    }
}

}  // namespace detail

inline Scenario scenario_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
    static const std::vector<std::string> known = {"preset", "name",   "kind", "model", "horizon",
                                                   "p0",     "params", "policy", "xi"};
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw std::invalid_argument("config: unknown key '" + key + "'");

    Scenario sc;
    if (j.contains("preset")) {
        sc = make_preset(j.at("preset").get<std::string>());
    } else {
        sc.name = "custom";
        sc.spec.kind = ModelKind::sir;
        sc.spec.horizon = 1.0;
        sc.spec.params.c_lambda = 1.0;
    }
    if (j.contains("name")) sc.name = j.at("name").get<std::string>();
    if (j.contains("kind")) sc.kind = detail::parse_scenario_kind(j.at("kind").get<std::string>());

    ModelKind kind = sc.spec.kind;
    if (j.contains("model")) kind = detail::parse_kind(j.at("model").get<std::string>());
    ModelParams q = sc.spec.params;
    if (j.contains("params")) detail::apply_params(q, j.at("params"));
    double horizon = j.value("horizon", sc.spec.horizon);
    std::vector<double> p0(sc.spec.p0.begin(), sc.spec.p0.begin() + sc.spec.m());
    if (j.contains("p0")) p0 = j.at("p0").get<std::vector<double>>();
    if (kind != sc.spec.kind && !j.contains("p0"))
        throw std::invalid_argument("config: changing the model requires p0");
    sc.spec = ModelSpec::make(kind, q, horizon, p0);

    const std::size_t np = sc.spec.policy_states.size();
    auto pvec = [&](const nlohmann::json& a) {
        auto v = a.get<std::vector<double>>();
        if (v.size() != np) throw std::invalid_argument("config: policy vectors need one entry per policy state");
        for (double x : v)
            if (!(x >= 0)) throw std::invalid_argument("config: policy entries must be >= 0");
        return detail::policy_vec(sc.spec, v);
    };
    if (j.contains("policy")) {
        const auto& pj = j.at("policy");
        if (pj.contains("constant")) {
            sc.policy = StepPolicy::constant(pvec(pj.at("constant")));
        } else {
            sc.policy.before = pvec(pj.at("before"));
            sc.policy.after = pvec(pj.at("after"));
            sc.policy.switch_time = pj.at("switch_time").get<double>();
        }
    } else if (!j.contains("preset") || j.contains("model")) {
        std::vector<double> v = q.lambda_bar;
        if (v.empty()) v.assign(np, 1.0);
        sc.policy = StepPolicy::constant(pvec(nlohmann::json(v)));
    }
    if (j.contains("xi")) sc.xi = j.at("xi").get<double>();
    return sc;
}

// Fully resolved form (no preset reference); scenario_from_json reads it back exactly.
inline nlohmann::json scenario_to_json(const Scenario& sc) {
    const auto& s = sc.spec;
    const auto& q = s.params;
    auto per_policy_state = [&](const StateVec& v) {
        std::vector<double> r;
        for (int e : s.policy_states) r.push_back(v[e]);
        return r;
    };
    nlohmann::json j;
    j["name"] = sc.name;
    j["kind"] = sc.kind == ScenarioKind::free_spread    ? "free_spread"
                : sc.kind == ScenarioKind::fixed_policy ? "fixed_policy"
                                                        : "stackelberg";
    j["model"] = s.kind == ModelKind::sir ? "sir" : "seird";
    j["horizon"] = s.horizon;
    j["p0"] = std::vector<double>(s.p0.begin(), s.p0.begin() + s.m());
    j["params"] = {{"beta", q.beta},       {"gamma", q.gamma},           {"eta", q.eta},
                   {"epsilon", q.epsilon}, {"delta", q.delta},           {"c_lambda", q.c_lambda},
                   {"c_I", q.c_I},         {"c_D", q.c_D},               {"c_inf", q.c_inf},
                   {"c_d", q.c_d},         {"kappa", q.kappa},           {"beta_bar", q.beta_bar},
                   {"lambda_bar", q.lambda_bar}};
    if (std::isinf(sc.policy.switch_time))
        j["policy"] = {{"constant", per_policy_state(sc.policy.before)}};
    else
        j["policy"] = {{"before", per_policy_state(sc.policy.before)},
                       {"after", per_policy_state(sc.policy.after)},
                       {"switch_time", sc.policy.switch_time}};
    j["xi"] = sc.xi;
    return j;
}

inline Scenario load_scenario_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config: cannot open '" + path + "'");
    try {
        nlohmann::json j;
        in >> j;
        return scenario_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("config: malformed JSON: ") + e.what());
    }
}

}  // namespace smfg
