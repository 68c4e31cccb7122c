#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "smfg/autodiff/mlp.hpp"
#include "smfg/model.hpp"
#include "smfg/philox.hpp"

namespace smfg {

// z-net: (t/T, one-hot state) -> m reals; lambda-net: t/T -> lambda_max * sigmoid(.)
// per policy state; y0: m raw reals. theta = [z-net | lambda-net | y0].
class PolicyBundle {
public:
    ad::Mlp z_net, lambda_net;
    double lambda_max = 2.0;
    std::vector<double> theta;
    // Stackelberg participation constraint p0 . y0 = kappa; agent-only training leaves y0 free.
    bool y0_constrained = true;
    // y0 = y0_scale * raw parameters; a larger scale lets Adam move y0 further per step
    double y0_scale = 1.0;

    PolicyBundle() = default;

    PolicyBundle(const ModelSpec& spec, std::size_t hidden = 32, std::size_t depth = 2) {
        m_ = spec.m();
        horizon_ = spec.horizon;
        kappa_ = spec.params.kappa;
        p0_ = spec.p0;
        policy_states_ = spec.policy_states;
        std::vector<std::size_t> zs{static_cast<std::size_t>(1 + m_)}, ls{1};
        for (std::size_t d = 0; d < depth; ++d) {
            zs.push_back(hidden);
            ls.push_back(hidden);
        }
        zs.push_back(static_cast<std::size_t>(m_));
        ls.push_back(policy_states_.size());
        z_net = ad::Mlp(zs);
        lambda_net = ad::Mlp(ls);
        theta.assign(y0_offset() + m_, 0.0);
    }

    int m() const { return m_; }
    double horizon() const { return horizon_; }
    const std::vector<int>& policy_states() const { return policy_states_; }
    std::size_t z_offset() const { return 0; }
    std::size_t lambda_offset() const { return z_net.n_params(); }
    std::size_t y0_offset() const { return z_net.n_params() + lambda_net.n_params(); }
    std::size_t size() const { return theta.size(); }

    // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; y0 = kappa.
    void initialize(std::uint64_t seed) {
        std::uint32_t counter = 0;
        auto fill = [&](const ad::Mlp& net, std::size_t off) {
            const auto& s = net.sizes();
            for (std::size_t l = 0; l + 1 < s.size(); ++l) {
                const double bound = 1.0 / std::sqrt(static_cast<double>(s[l]));
                const std::size_t n = s[l + 1] * (s[l] + 1);
                for (std::size_t k = 0; k < n; ++k) {
                    const double u = uniforms2(seed, Stream::init_weights, counter++, 0, 0)[0];
                    theta[off + k] = bound * (2.0 * u - 1.0);
                }
                off += n;
            }
        };
        fill(z_net, z_offset());
        fill(lambda_net, lambda_offset());
        for (int e = 0; e < m_; ++e) theta[y0_offset() + e] = kappa_ / y0_scale;
        reshift();
    }

    // Enforces p0 . y0 = kappa in the stored parameters.
    void reshift() {
        if (!y0_constrained) return;
        double s = 0;
        for (int e = 0; e < m_; ++e) s += p0_[e] * y0_scale * theta[y0_offset() + e];
        for (int e = 0; e < m_; ++e) theta[y0_offset() + e] += (kappa_ - s) / y0_scale;
    }

    // ---- double evaluation (simulation side) ----

    void eval_z(double t, int e, double* out) const {
        double in[1 + kMaxStates] = {};
        in[0] = t / horizon_;
        in[1 + e] = 1.0;
        z_net.forward(theta.data() + z_offset(), in, out);
    }
    PolicyVector eval_lambda(double t) const {
        double in[1] = {t / horizon_};
        double raw[kMaxStates] = {};
        lambda_net.forward(theta.data() + lambda_offset(), in, raw);
        PolicyVector lam;
        for (std::size_t k = 0; k < policy_states_.size(); ++k)
            lam.lambda[policy_states_[k]] = lambda_max * ad::sigmoid(raw[k]);
        return lam;
    }
    // Affine shift applied on the fly so the reported y0 always satisfies the constraint.
    double eval_y0(int e) const {
        const double raw = y0_scale * theta[y0_offset() + e];
        if (!y0_constrained) return raw;
        double s = 0;
        for (int j = 0; j < m_; ++j) s += p0_[j] * y0_scale * theta[y0_offset() + j];
        return raw + kappa_ - s;
    }
    std::uint64_t fingerprint() const {
        Fnv1a h;
        h.bytes(theta.data(), theta.size() * sizeof(double));
        return h.h;
    }

    // ---- checkpoints ----
    // "SMFGCKPT", u32 version, u32 n_nets, per net: u32 n_sizes + u32 sizes...,
    // u32 m (y0 length), u64 n_params, then n_params little-endian f64.

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("checkpoint: cannot write '" + path + "'");
        os.write("SMFGCKPT", 8);
        put32(os, kVersion);
        put32(os, 2);
        for (const ad::Mlp* net : {&z_net, &lambda_net}) {
            put32(os, static_cast<std::uint32_t>(net->sizes().size()));
            for (auto s : net->sizes()) put32(os, static_cast<std::uint32_t>(s));
        }
        put32(os, static_cast<std::uint32_t>(m_));
        put64(os, theta.size());
        for (double x : theta) {
            std::uint64_t bits;
            std::memcpy(&bits, &x, 8);
            put64(os, bits);
        }
    }

    // Loads parameters into a bundle built for the same model; shapes must match.
    void load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw std::runtime_error("checkpoint: cannot read '" + path + "'");
        char magic[8];
        is.read(magic, 8);
        if (!is || std::memcmp(magic, "SMFGCKPT", 8) != 0) throw std::runtime_error("checkpoint: bad magic");
        if (get32(is) != kVersion) throw std::runtime_error("checkpoint: unsupported version");
        if (get32(is) != 2) throw std::runtime_error("checkpoint: expected two networks");
        for (const ad::Mlp* net : {&z_net, &lambda_net}) {
            const std::uint32_t n = get32(is);
            if (n != net->sizes().size()) throw std::runtime_error("checkpoint: layer shape mismatch");
            for (auto s : net->sizes())
                if (get32(is) != s) throw std::runtime_error("checkpoint: layer shape mismatch");
        }
        if (get32(is) != static_cast<std::uint32_t>(m_)) throw std::runtime_error("checkpoint: state count mismatch");
        if (get64(is) != theta.size()) throw std::runtime_error("checkpoint: parameter count mismatch");
        for (double& x : theta) {
            const std::uint64_t bits = get64(is);
            std::memcpy(&x, &bits, 8);
        }
        if (!is) throw std::runtime_error("checkpoint: truncated file");
    }

private:
    static constexpr std::uint32_t kVersion = 1;

    static void put32(std::ostream& os, std::uint32_t v) {
        unsigned char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        os.write(reinterpret_cast<const char*>(b), 4);
    }
    static void put64(std::ostream& os, std::uint64_t v) {
        unsigned char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
        os.write(reinterpret_cast<const char*>(b), 8);
    }
    static std::uint32_t get32(std::istream& is) {
        unsigned char b[4] = {};
        is.read(reinterpret_cast<char*>(b), 4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t{b[i]} << (8 * i);
        return v;
    }
    static std::uint64_t get64(std::istream& is) {
        unsigned char b[8] = {};
        is.read(reinterpret_cast<char*>(b), 8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t{b[i]} << (8 * i);
        return v;
    }

    int m_ = 0;
    double horizon_ = 1.0;
    double kappa_ = 0.0;
    StateVec p0_{};
    std::vector<int> policy_states_;
};

// Bundle z and y0 with an exogenous lambda(t) (fixed-policy training).
template <class LambdaFn>
struct FixedPolicyControls {
    const PolicyBundle& bundle;
    LambdaFn lam;
    std::uint64_t lam_tag = 0;

    void eval_z(double t, int e, double* out) const { bundle.eval_z(t, e, out); }
    PolicyVector eval_lambda(double t) const { return lam(t); }
    double eval_y0(int e) const { return bundle.eval_y0(e); }
    std::uint64_t fingerprint() const { return bundle.fingerprint() ^ (lam_tag * 0x9E3779B97F4A7C15ull); }
};

}  // namespace smfg
