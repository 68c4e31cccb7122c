#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace smfg::ad {

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<double> m, v;
    std::int64_t step_count = 0;
    AdamHyper hyper;

    AdamState() = default;
    explicit AdamState(std::size_t n, AdamHyper h = {}) : m(n, 0.0), v(n, 0.0), hyper(h) {}
};

struct NonFiniteGradient : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One bias-corrected Adam step. Leaves theta and state untouched if grad has a non-finite entry.
inline void adam_step(AdamState& s, std::span<double> theta, std::span<const double> grad, double lr) {
    if (theta.size() != grad.size() || s.m.size() != theta.size() || s.v.size() != theta.size())
        throw std::invalid_argument("adam_step: length mismatch");
    for (std::size_t i = 0; i < grad.size(); ++i) {
        if (!std::isfinite(grad[i])) {
            std::ostringstream os;
            os << "adam_step: non-finite gradient entry " << i << " = " << grad[i] << " at step "
               << s.step_count;
            throw NonFiniteGradient(os.str());
        }
    }
    const auto& h = s.hyper;
    ++s.step_count;
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(s.step_count));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(s.step_count));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        s.m[i] = h.beta1 * s.m[i] + (1.0 - h.beta1) * grad[i];
        s.v[i] = h.beta2 * s.v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
        const double mh = s.m[i] / c1;
        const double vh = s.v[i] / c2;
        theta[i] -= lr * mh / (std::sqrt(vh) + h.eps);
    }
}

}  // namespace smfg::ad
