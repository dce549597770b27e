#pragma once

#include <cmath>
#include <vector>

#include "memtrace/errors.hpp"
#include "memtrace/tensor.hpp"

namespace memtrace::paradigms {

template <typename T>
struct LossResult {
    double loss = 0.0;
    TensorT<T> grad;  // dL/d(input rows)
};

// Mean over the batch of -log softmax(logits / tau)[label].
// Accumulation in 64-bit regardless of T.
template <typename T>
LossResult<T> supervised_loss(const TensorT<T>& logits, const std::vector<int>& labels,
                              double tau) {
    if (tau <= 0) throw ConfigError("softmax temperature must be positive");
    if (logits.shape.size() != 2) throw InputError("supervised_loss: logits must be 2-D");
    const int b = logits.shape[0], k = logits.shape[1];
    if (static_cast<int>(labels.size()) != b)
        throw InputError("supervised_loss: labels/batch size mismatch");
    LossResult<T> res;
    res.grad = TensorT<T>(logits.shape);
    double total = 0;
    std::vector<double> z(k), p(k);
    for (int i = 0; i < b; ++i) {
        const int y = labels[i];
        if (y < 0 || y >= k) throw InputError("supervised_loss: label out of range");
        const T* row = logits.ptr() + static_cast<size_t>(i) * k;
        double mx = -1e300;
        for (int j = 0; j < k; ++j) {
            z[j] = static_cast<double>(row[j]) / tau;
            mx = std::max(mx, z[j]);
        }
        double denom = 0;
        for (int j = 0; j < k; ++j) {
            p[j] = std::exp(z[j] - mx);
            denom += p[j];
        }
        total += std::log(denom) + mx - z[y];
        T* g = res.grad.ptr() + static_cast<size_t>(i) * k;
        for (int j = 0; j < k; ++j)
            g[j] = static_cast<T>((p[j] / denom - (j == y ? 1.0 : 0.0)) / (b * tau));
    }
    res.loss = total / b;
    return res;
}

// NT-Xent: rows are L2-normalized, each anchor k faces all 2B-1 other rows
// as a (2B-1)-way classification with pairing[k] the correct class; mean
// over all 2B anchors. Exactly zero when 2B-1 == 1.
template <typename T>
LossResult<T> nt_xent_loss(const TensorT<T>& proj, const std::vector<int>& pairing,
                           double tau) {
    if (tau <= 0) throw ConfigError("softmax temperature must be positive");
    if (proj.shape.size() != 2) throw InputError("nt_xent_loss: projections must be 2-D");
    const int n = proj.shape[0], d = proj.shape[1];
    if (static_cast<int>(pairing.size()) != n || n < 2 || n % 2 != 0)
        throw InputError("nt_xent_loss: bad pairing / view count");
    for (int k2 = 0; k2 < n; ++k2) {
        const int p = pairing[k2];
        if (p < 0 || p >= n || p == k2 || pairing[p] != k2)
            throw InputError("nt_xent_loss: pairing is not a fixed-point-free involution");
    }
    // normalize in double
    std::vector<double> u(static_cast<size_t>(n) * d), norms(n);
    for (int i = 0; i < n; ++i) {
        double s = 0;
        const T* row = proj.ptr() + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) s += static_cast<double>(row[j]) * row[j];
        double nv = std::sqrt(s);
        if (!(nv > 0)) throw NumericError("nt_xent_loss: zero-norm projection row");
        norms[i] = nv;
        for (int j = 0; j < d; ++j) u[static_cast<size_t>(i) * d + j] = row[j] / nv;
    }
    // similarity matrix S = U U^T / tau, diagonal excluded
    std::vector<double> sim(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            double s = 0;
            for (int c = 0; c < d; ++c)
                s += u[static_cast<size_t>(i) * d + c] * u[static_cast<size_t>(j) * d + c];
            sim[static_cast<size_t>(i) * n + j] = s / tau;
        }
    double total = 0;
    std::vector<double> g(static_cast<size_t>(n) * n, 0.0);  // dL/dS
    for (int k2 = 0; k2 < n; ++k2) {
        double mx = -1e300;
        for (int j = 0; j < n; ++j)
            if (j != k2) mx = std::max(mx, sim[static_cast<size_t>(k2) * n + j]);
        double denom = 0;
        for (int j = 0; j < n; ++j)
            if (j != k2) denom += std::exp(sim[static_cast<size_t>(k2) * n + j] - mx);
        total += std::log(denom) + mx - sim[static_cast<size_t>(k2) * n + pairing[k2]];
        for (int j = 0; j < n; ++j) {
            if (j == k2) continue;
            double pj = std::exp(sim[static_cast<size_t>(k2) * n + j] - mx) / denom;
            g[static_cast<size_t>(k2) * n + j] =
                (pj - (j == pairing[k2] ? 1.0 : 0.0)) / n;
        }
    }
    LossResult<T> res;
    res.loss = total / n;
    res.grad = TensorT<T>(proj.shape);
    std::vector<double> du(d);
    for (int a = 0; a < n; ++a) {
        std::fill(du.begin(), du.end(), 0.0);
        for (int j = 0; j < n; ++j) {
            double w = (g[static_cast<size_t>(a) * n + j] +
                        g[static_cast<size_t>(j) * n + a]) /
                       tau;
            if (w == 0.0) continue;
            for (int c = 0; c < d; ++c) du[c] += w * u[static_cast<size_t>(j) * d + c];
        }
        // back through normalization: dz = (du - u (u . du)) / ||z||
        double dot = 0;
        for (int c = 0; c < d; ++c) dot += du[c] * u[static_cast<size_t>(a) * d + c];
        T* gz = res.grad.ptr() + static_cast<size_t>(a) * d;
        for (int c = 0; c < d; ++c)
            gz[c] = static_cast<T>((du[c] - dot * u[static_cast<size_t>(a) * d + c]) /
                                   norms[a]);
    }
    return res;
}

}  // namespace memtrace::paradigms
