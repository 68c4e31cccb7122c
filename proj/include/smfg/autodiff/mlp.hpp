#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace smfg::ad {

// Fully connected net: tanh on hidden layers, linear output.
// Weights live outside the object (in a flat theta); per layer the layout is
// W (out x in, row-major) followed by b (out).
class Mlp {
public:
    Mlp() = default;
    explicit Mlp(std::vector<std::size_t> sizes) : sizes_(std::move(sizes)) {
        if (sizes_.size() < 2) throw std::invalid_argument("mlp: need at least input and output sizes");
        for (std::size_t s : sizes_)
            if (s == 0) throw std::invalid_argument("mlp: zero-width layer");
    }

    const std::vector<std::size_t>& sizes() const { return sizes_; }
    std::size_t n_layers() const { return sizes_.size() - 1; }
    std::size_t n_in() const { return sizes_.front(); }
    std::size_t n_out() const { return sizes_.back(); }
    std::size_t n_params() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) n += sizes_[l + 1] * (sizes_[l] + 1);
        return n;
    }
    // input followed by every hidden activation
    std::size_t cache_size() const {
        std::size_t n = sizes_.front();
        for (std::size_t l = 1; l + 1 < sizes_.size(); ++l) n += sizes_[l];
        return n;
    }

    void forward(const double* w, const double* in, double* out) const {
        std::vector<double> cache(cache_size());
        for (std::size_t i = 0; i < n_in(); ++i) cache[i] = in[i];
        forward_cached(w, cache.data(), out);
    }

    // cache[0..n_in) must hold the input; hidden activations are written after it.
    void forward_cached(const double* w, double* cache, double* out) const {
        const double* x = cache;
        double* h = cache + n_in();
        for (std::size_t l = 0; l < n_layers(); ++l) {
            const std::size_t ni = sizes_[l], no = sizes_[l + 1];
            const double* W = w;
            const double* b = w + no * ni;
            const bool last = l + 1 == n_layers();
            double* y = last ? out : h;
            for (std::size_t o = 0; o < no; ++o) {
                double s = b[o];
                const double* row = W + o * ni;
                for (std::size_t i = 0; i < ni; ++i) s += row[i] * x[i];
                y[o] = last ? s : std::tanh(s);
            }
            w += no * (ni + 1);
            if (!last) {
                x = h;
                h += no;
            }
        }
    }

    // Accumulates d(out.dout)/dw into dw; writes input gradient into din when non-null.
    void backward_cached(const double* w, const double* cache, const double* dout, double* dw,
                         double* din) const {
        std::vector<const double*> act(n_layers());
        std::vector<std::size_t> woff(n_layers());
        {
            const double* a = cache;
            std::size_t off = 0;
            for (std::size_t l = 0; l < n_layers(); ++l) {
                act[l] = a;
                woff[l] = off;
                a += sizes_[l];
                off += sizes_[l + 1] * (sizes_[l] + 1);
            }
        }
        std::vector<double> g(dout, dout + n_out()), gin;
        for (std::size_t l = n_layers(); l-- > 0;) {
            const std::size_t ni = sizes_[l], no = sizes_[l + 1];
            const double* W = w + woff[l];
            double* dW = dw + woff[l];
            double* db = dW + no * ni;
            const double* x = act[l];
            for (std::size_t o = 0; o < no; ++o) {
                const double go = g[o];
                if (go == 0.0) continue;
                double* drow = dW + o * ni;
                for (std::size_t i = 0; i < ni; ++i) drow[i] += go * x[i];
                db[o] += go;
            }
            if (l == 0 && !din) break;
            gin.assign(ni, 0.0);
            for (std::size_t o = 0; o < no; ++o) {
                const double go = g[o];
                if (go == 0.0) continue;
                const double* row = W + o * ni;
                for (std::size_t i = 0; i < ni; ++i) gin[i] += row[i] * go;
            }
            if (l == 0) {
                for (std::size_t i = 0; i < ni; ++i) din[i] = gin[i];
                break;
            }
            // x is the tanh output of the previous layer
            for (std::size_t i = 0; i < ni; ++i) gin[i] *= 1.0 - x[i] * x[i];
            g.swap(gin);
        }
    }

private:
    std::vector<std::size_t> sizes_;
};

}  // namespace smfg::ad
