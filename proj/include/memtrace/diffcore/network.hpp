#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "memtrace/diffcore/spec.hpp"
#include "memtrace/errors.hpp"
#include "memtrace/rng.hpp"
#include "memtrace/tensor.hpp"

namespace memtrace::diffcore {

enum class Mode { train, eval };

template <typename T>
using GradMap = std::map<std::string, TensorT<T>>;

template <typename T>
struct ModelStateT {
    std::map<std::string, TensorT<T>> params;

    // trainable parameter count (running batch-norm statistics excluded)
    size_t param_count() const {
        size_t n = 0;
        for (const auto& [name, p] : params)
            if (name.find("running_") == std::string::npos) n += p.numel();
        return n;
    }
};

using ModelState = ModelStateT<float>;

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline bool is_trainable(const std::string& name) {
    return name.find("running_") == std::string::npos;
}

// Sequential network compiled from a NetworkSpec. Templated on the scalar
// type so gradient checks can run the whole engine in 64-bit.
template <typename T>
class NetworkT {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
    using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using MapRM = Eigen::Map<RowMat>;
    using CMapRM = Eigen::Map<const RowMat>;

    enum class NodeKind { Conv, Affine, Relu, BatchNorm, MaxPool, Gap };

    struct Node {
        NodeKind kind;
        std::vector<int> in_shape;   // per-sample dims: {C,H,W} or {D}
        std::vector<int> out_shape;
        int cout = 0, k = 0, stride = 1, pad = 0;  // conv
        int din = 0, dout = 0;                     // affine
        int pool = 0;                              // maxpool
        std::string prefix;
    };

    struct NodeCache {
        TensorT<T> input;
        std::vector<int> argmax;      // maxpool
        std::vector<T> mu, invstd;    // batchnorm batch stats
    };

public:
    explicit NetworkT(const NetworkSpec& spec) : spec_(spec) { compile(); }

    const NetworkSpec& spec() const { return spec_; }
    int node_count() const { return static_cast<int>(nodes_.size()); }
    int encoder_node_count() const { return encoder_nodes_; }
    int output_dim() const { return out_dim_; }

    // Deterministic initialization: weights ~ N(0, 2/fan_in), biases zero,
    // batch-norm scale 1 / shift 0, running stats (0, 1). Each parameter
    // array is drawn from its own stream keyed by (seed, name), so the
    // result is independent of traversal order.
    ModelStateT<T> init(uint64_t seed) const {
        ModelStateT<T> st;
        for (const Node& nd : nodes_) {
            switch (nd.kind) {
                case NodeKind::Conv: {
                    int cin = nd.in_shape[0];
                    TensorT<T> w({nd.cout, cin, nd.k, nd.k});
                    fill_normal(w, seed, nd.prefix + "conv.weight",
                                std::sqrt(2.0 / (cin * nd.k * nd.k)));
                    st.params[nd.prefix + "conv.weight"] = std::move(w);
                    st.params[nd.prefix + "conv.bias"] = TensorT<T>({nd.cout});
                    break;
                }
                case NodeKind::Affine: {
                    TensorT<T> w({nd.dout, nd.din});
                    fill_normal(w, seed, nd.prefix + "affine.weight",
                                std::sqrt(2.0 / nd.din));
                    st.params[nd.prefix + "affine.weight"] = std::move(w);
                    st.params[nd.prefix + "affine.bias"] = TensorT<T>({nd.dout});
                    break;
                }
                case NodeKind::BatchNorm: {
                    int c = channels_of(nd.in_shape);
                    TensorT<T> scale({c}), shift({c}), rm({c}), rv({c});
                    std::fill(scale.data.begin(), scale.data.end(), T(1));
                    std::fill(rv.data.begin(), rv.data.end(), T(1));
                    st.params[nd.prefix + "bn.scale"] = std::move(scale);
                    st.params[nd.prefix + "bn.shift"] = std::move(shift);
                    st.params[nd.prefix + "bn.running_mean"] = std::move(rm);
                    st.params[nd.prefix + "bn.running_var"] = std::move(rv);
                    break;
                }
                default:
                    break;
            }
        }
        return st;
    }

    TensorT<T> forward(ModelStateT<T>& state, const TensorT<T>& input, Mode mode,
                       bool record = false) {
        return forward_prefix(state, input, mode, record, node_count());
    }

    // Forward through the first n_nodes nodes only (encoder truncation,
    // activation targets). Train mode always records.
    TensorT<T> forward_prefix(ModelStateT<T>& state, const TensorT<T>& input,
                              Mode mode, bool record, int n_nodes) {
        if (n_nodes < 0 || n_nodes > node_count())
            throw UsageError("forward_prefix: node index out of range");
        check_input(input);
        record = record || mode == Mode::train;
        cache_.clear();
        recorded_nodes_ = 0;
        TensorT<T> act = input;
        for (int i = 0; i < n_nodes; ++i) {
            NodeCache nc;
            TensorT<T> next = apply(nodes_[i], state, act, mode, record ? &nc : nullptr);
            if (record) {
                nc.input = std::move(act);
                cache_.push_back(std::move(nc));
                ++recorded_nodes_;
            }
            act = std::move(next);
        }
        for (T v : act.data)
            if (!std::isfinite(static_cast<double>(v)))
                throw NumericError("non-finite activation in forward pass");
        return act;
    }

    // Reverse pass from dL/d(output of last recorded node). Returns one
    // gradient array per trainable parameter; running stats get none.
    GradMap<T> backward(ModelStateT<T>& state, const TensorT<T>& dout,
                        TensorT<T>* dinput = nullptr) {
        if (recorded_nodes_ == 0)
            throw UsageError("backward: no recorded forward pass");
        GradMap<T> grads;
        for (const auto& [name, p] : state.params)
            if (is_trainable(name)) grads[name] = TensorT<T>(p.shape);
        TensorT<T> d = dout;
        for (int i = recorded_nodes_ - 1; i >= 0; --i)
            d = apply_backward(nodes_[i], state, cache_[i], d, grads);
        if (dinput) *dinput = std::move(d);
        return grads;
    }

private:
    NetworkSpec spec_;
    std::vector<Node> nodes_;
    int encoder_nodes_ = 0;
    int out_dim_ = 0;
    std::vector<NodeCache> cache_;
    int recorded_nodes_ = 0;

    static int channels_of(const std::vector<int>& shape) {
        return shape[0];  // {C,H,W} or {D}
    }

    static void fill_normal(TensorT<T>& t, uint64_t seed, const std::string& name,
                            double stddev) {
        Rng rng(stable_hash({seed, fnv1a64(name)}));
        for (T& v : t.data) v = static_cast<T>(rng.normal() * stddev);
    }

    void check_input(const TensorT<T>& input) const {
        const auto& in = nodes_.empty() ? std::vector<int>{} : nodes_.front().in_shape;
        if (input.shape.size() != in.size() + 1)
            throw InputError("forward: input rank mismatch");
        for (size_t i = 0; i < in.size(); ++i)
            if (input.shape[i + 1] != in[i])
                throw InputError("forward: input shape mismatch");
    }

    void add_node(Node nd, std::vector<int>& cur) {
        nd.in_shape = cur;
        switch (nd.kind) {
            case NodeKind::Conv: {
                if (cur.size() != 3) throw ConfigError("conv needs C,H,W input");
                int ho = (cur[1] + 2 * nd.pad - nd.k) / nd.stride + 1;
                int wo = (cur[2] + 2 * nd.pad - nd.k) / nd.stride + 1;
                if (ho <= 0 || wo <= 0) throw ConfigError("conv output collapsed");
                nd.out_shape = {nd.cout, ho, wo};
                break;
            }
            case NodeKind::Affine: {
                int din = 1;
                for (int d : cur) din *= d;
                nd.din = din;
                nd.out_shape = {nd.dout};
                break;
            }
            case NodeKind::MaxPool: {
                if (cur.size() != 3) throw ConfigError("maxpool needs C,H,W input");
                if (cur[1] % nd.pool || cur[2] % nd.pool)
                    throw ConfigError("maxpool input not divisible by window");
                nd.out_shape = {cur[0], cur[1] / nd.pool, cur[2] / nd.pool};
                break;
            }
            case NodeKind::Gap: {
                if (cur.size() != 3) throw ConfigError("global avg pool needs C,H,W input");
                nd.out_shape = {cur[0]};
                break;
            }
            default:
                nd.out_shape = cur;
        }
        nd.prefix = "l" + std::to_string(nodes_.size()) + ".";
        cur = nd.out_shape;
        nodes_.push_back(std::move(nd));
    }

    void compile() {
        std::vector<int> cur = {spec_.in_channels, spec_.in_h, spec_.in_w};
        for (const LayerDesc& ld : spec_.layers) {
            Node nd;
            if (auto* c = std::get_if<ConvLayer>(&ld)) {
                nd.kind = NodeKind::Conv;
                nd.cout = c->out_channels;
                nd.k = c->kernel;
                nd.stride = c->stride;
                nd.pad = c->pad;
            } else if (auto* a = std::get_if<AffineLayer>(&ld)) {
                nd.kind = NodeKind::Affine;
                nd.dout = a->out_dim;
            } else if (std::get_if<ReluLayer>(&ld)) {
                nd.kind = NodeKind::Relu;
            } else if (std::get_if<BatchNormLayer>(&ld)) {
                nd.kind = NodeKind::BatchNorm;
            } else if (auto* m = std::get_if<MaxPoolLayer>(&ld)) {
                nd.kind = NodeKind::MaxPool;
                nd.pool = m->size;
            } else {
                nd.kind = NodeKind::Gap;
            }
            add_node(std::move(nd), cur);
        }
        encoder_nodes_ = static_cast<int>(nodes_.size());
        if (spec_.encoder_output_dim > 0) {
            int d = 1;
            for (int v : cur) d *= v;
            if (d != spec_.encoder_output_dim)
                throw ConfigError("encoder output dim mismatch");
        }
        if (auto* ch = std::get_if<ClassifierHead>(&spec_.head)) {
            Node nd;
            nd.kind = NodeKind::Affine;
            nd.dout = ch->num_classes;
            add_node(std::move(nd), cur);
        } else if (auto* ph = std::get_if<ProjectionHead>(&spec_.head)) {
            Node h1;
            h1.kind = NodeKind::Affine;
            h1.dout = ph->hidden_dim;
            add_node(std::move(h1), cur);
            Node r;
            r.kind = NodeKind::Relu;
            add_node(std::move(r), cur);
            Node h2;
            h2.kind = NodeKind::Affine;
            h2.dout = ph->out_dim;
            add_node(std::move(h2), cur);
        }
        out_dim_ = 1;
        for (int v : cur) out_dim_ *= v;
    }

    // --- per-node forward ---

    TensorT<T> apply(const Node& nd, ModelStateT<T>& state, const TensorT<T>& x,
                     Mode mode, NodeCache* nc) {
        switch (nd.kind) {
            case NodeKind::Conv:
                return conv_fwd(nd, state, x);
            case NodeKind::Affine:
                return affine_fwd(nd, state, x);
            case NodeKind::Relu:
                return relu_fwd(x);
            case NodeKind::BatchNorm:
                return bn_fwd(nd, state, x, mode, nc);
            case NodeKind::MaxPool:
                return maxpool_fwd(nd, x, nc);
            case NodeKind::Gap:
                return gap_fwd(nd, x);
        }
        throw UsageError("unreachable");
    }

    TensorT<T> apply_backward(const Node& nd, ModelStateT<T>& state,
                              const NodeCache& nc, const TensorT<T>& dy,
                              GradMap<T>& grads) {
        switch (nd.kind) {
            case NodeKind::Conv:
                return conv_bwd(nd, state, nc, dy, grads);
            case NodeKind::Affine:
                return affine_bwd(nd, state, nc, dy, grads);
            case NodeKind::Relu:
                return relu_bwd(nc, dy);
            case NodeKind::BatchNorm:
                return bn_bwd(nd, state, nc, dy, grads);
            case NodeKind::MaxPool:
                return maxpool_bwd(nd, nc, dy);
            case NodeKind::Gap:
                return gap_bwd(nd, nc, dy);
        }
        throw UsageError("unreachable");
    }

    // --- conv ---

    static void im2col(const T* img, int cin, int h, int w, int k, int stride,
                       int pad, int ho, int wo, T* col) {
        const int hw = ho * wo;
        for (int ci = 0; ci < cin; ++ci) {
            for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                    T* dst = col + ((ci * k + ky) * k + kx) * hw;
                    for (int y = 0; y < ho; ++y) {
                        int iy = y * stride - pad + ky;
                        if (iy < 0 || iy >= h) {
                            std::fill(dst + y * wo, dst + (y + 1) * wo, T(0));
                            continue;
                        }
                        const T* src = img + (ci * h + iy) * w;
                        for (int x = 0; x < wo; ++x) {
                            int ix = x * stride - pad + kx;
                            dst[y * wo + x] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                        }
                    }
                }
            }
        }
    }

    static void col2im(const T* col, int cin, int h, int w, int k, int stride,
                       int pad, int ho, int wo, T* img) {
        const int hw = ho * wo;
        for (int ci = 0; ci < cin; ++ci) {
            for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                    const T* src = col + ((ci * k + ky) * k + kx) * hw;
                    for (int y = 0; y < ho; ++y) {
                        int iy = y * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        T* dst = img + (ci * h + iy) * w;
                        for (int x = 0; x < wo; ++x) {
                            int ix = x * stride - pad + kx;
                            if (ix >= 0 && ix < w) dst[ix] += src[y * wo + x];
                        }
                    }
                }
            }
        }
    }

    TensorT<T> conv_fwd(const Node& nd, ModelStateT<T>& state, const TensorT<T>& x) {
        const int b = x.shape[0];
        const int cin = nd.in_shape[0], h = nd.in_shape[1], w = nd.in_shape[2];
        const int ho = nd.out_shape[1], wo = nd.out_shape[2];
        const int ckk = cin * nd.k * nd.k, hw = ho * wo;
        const auto& wt = state.params.at(nd.prefix + "conv.weight");
        const auto& bias = state.params.at(nd.prefix + "conv.bias");
        TensorT<T> y({b, nd.cout, ho, wo});
        std::vector<T> col(static_cast<size_t>(ckk) * hw);
        CMapRM wm(wt.ptr(), nd.cout, ckk);
        for (int i = 0; i < b; ++i) {
            im2col(x.ptr() + static_cast<size_t>(i) * cin * h * w, cin, h, w, nd.k,
                   nd.stride, nd.pad, ho, wo, col.data());
            CMapRM cm(col.data(), ckk, hw);
            MapRM ym(y.ptr() + static_cast<size_t>(i) * nd.cout * hw, nd.cout, hw);
            ym.noalias() = wm * cm;
            for (int c = 0; c < nd.cout; ++c) ym.row(c).array() += bias.data[c];
        }
        return y;
    }

    TensorT<T> conv_bwd(const Node& nd, ModelStateT<T>& state, const NodeCache& nc,
                        const TensorT<T>& dy, GradMap<T>& grads) {
        const TensorT<T>& x = nc.input;
        const int b = x.shape[0];
        const int cin = nd.in_shape[0], h = nd.in_shape[1], w = nd.in_shape[2];
        const int ho = nd.out_shape[1], wo = nd.out_shape[2];
        const int ckk = cin * nd.k * nd.k, hw = ho * wo;
        const auto& wt = state.params.at(nd.prefix + "conv.weight");
        auto& dwt = grads.at(nd.prefix + "conv.weight");
        auto& dbias = grads.at(nd.prefix + "conv.bias");
        TensorT<T> dx(x.shape);
        std::vector<T> col(static_cast<size_t>(ckk) * hw);
        std::vector<T> dcol(static_cast<size_t>(ckk) * hw);
        CMapRM wm(wt.ptr(), nd.cout, ckk);
        MapRM dwm(dwt.ptr(), nd.cout, ckk);
        for (int i = 0; i < b; ++i) {
            im2col(x.ptr() + static_cast<size_t>(i) * cin * h * w, cin, h, w, nd.k,
                   nd.stride, nd.pad, ho, wo, col.data());
            CMapRM cm(col.data(), ckk, hw);
            CMapRM dym(dy.ptr() + static_cast<size_t>(i) * nd.cout * hw, nd.cout, hw);
            dwm.noalias() += dym * cm.transpose();
            for (int c = 0; c < nd.cout; ++c) {
                // fixed-order scalar sum: Eigen's vectorized reduction order
                // depends on buffer alignment, which breaks bit determinism
                T s = 0;
                const T* row = dy.ptr() + (static_cast<size_t>(i) * nd.cout + c) * hw;
                for (int o = 0; o < hw; ++o) s += row[o];
                dbias.data[c] += s;
            }
            MapRM dcm(dcol.data(), ckk, hw);
            dcm.noalias() = wm.transpose() * dym;
            col2im(dcol.data(), cin, h, w, nd.k, nd.stride, nd.pad, ho, wo,
                   dx.ptr() + static_cast<size_t>(i) * cin * h * w);
        }
        return dx;
    }

    // --- affine ---

    TensorT<T> affine_fwd(const Node& nd, ModelStateT<T>& state, const TensorT<T>& x) {
        const int b = x.shape[0];
        const auto& wt = state.params.at(nd.prefix + "affine.weight");
        const auto& bias = state.params.at(nd.prefix + "affine.bias");
        TensorT<T> y({b, nd.dout});
        CMapRM xm(x.ptr(), b, nd.din);
        CMapRM wm(wt.ptr(), nd.dout, nd.din);
        MapRM ym(y.ptr(), b, nd.dout);
        ym.noalias() = xm * wm.transpose();
        for (int j = 0; j < nd.dout; ++j) ym.col(j).array() += bias.data[j];
        return y;
    }

    TensorT<T> affine_bwd(const Node& nd, ModelStateT<T>& state, const NodeCache& nc,
                          const TensorT<T>& dy, GradMap<T>& grads) {
        const TensorT<T>& x = nc.input;
        const int b = x.shape[0];
        auto& dwt = grads.at(nd.prefix + "affine.weight");
        auto& dbias = grads.at(nd.prefix + "affine.bias");
        const auto& wt = state.params.at(nd.prefix + "affine.weight");
        TensorT<T> dx(x.shape);
        CMapRM xm(x.ptr(), b, nd.din);
        CMapRM dym(dy.ptr(), b, nd.dout);
        CMapRM wm(wt.ptr(), nd.dout, nd.din);
        MapRM dwm(dwt.ptr(), nd.dout, nd.din);
        MapRM dxm(dx.ptr(), b, nd.din);
        dwm.noalias() += dym.transpose() * xm;
        for (int j = 0; j < nd.dout; ++j) {
            T s = 0;
            for (int i = 0; i < b; ++i) s += dy.data[static_cast<size_t>(i) * nd.dout + j];
            dbias.data[j] += s;
        }
        dxm.noalias() = dym * wm;
        return dx;
    }

    // --- relu ---

    static TensorT<T> relu_fwd(const TensorT<T>& x) {
        TensorT<T> y(x.shape);
        for (size_t i = 0; i < x.numel(); ++i) y.data[i] = x.data[i] > T(0) ? x.data[i] : T(0);
        return y;
    }

    static TensorT<T> relu_bwd(const NodeCache& nc, const TensorT<T>& dy) {
        TensorT<T> dx(dy.shape);
        for (size_t i = 0; i < dy.numel(); ++i)
            dx.data[i] = nc.input.data[i] > T(0) ? dy.data[i] : T(0);
        return dx;
    }

    // --- batch norm (channel-wise; flat inputs treated as C with S=1) ---

    static constexpr double kBnEps = 1e-5;
    static constexpr double kBnMomentum = 0.1;

    TensorT<T> bn_fwd(const Node& nd, ModelStateT<T>& state, const TensorT<T>& x,
                      Mode mode, NodeCache* nc) {
        const int b = x.shape[0];
        const int c = channels_of(nd.in_shape);
        const int s = static_cast<int>(x.numel() / (static_cast<size_t>(b) * c));
        const auto& scale = state.params.at(nd.prefix + "bn.scale");
        const auto& shift = state.params.at(nd.prefix + "bn.shift");
        auto& rmean = state.params.at(nd.prefix + "bn.running_mean");
        auto& rvar = state.params.at(nd.prefix + "bn.running_var");
        std::vector<T> mu(c), invstd(c);
        if (mode == Mode::train) {
            const double n = static_cast<double>(b) * s;
            for (int ci = 0; ci < c; ++ci) {
                double sum = 0, sq = 0;
                for (int bi = 0; bi < b; ++bi) {
                    const T* p = x.ptr() + (static_cast<size_t>(bi) * c + ci) * s;
                    for (int si = 0; si < s; ++si) {
                        sum += p[si];
                        sq += static_cast<double>(p[si]) * p[si];
                    }
                }
                double m = sum / n;
                double var = sq / n - m * m;
                if (var < 0) var = 0;
                mu[ci] = static_cast<T>(m);
                invstd[ci] = static_cast<T>(1.0 / std::sqrt(var + kBnEps));
                rmean.data[ci] = static_cast<T>((1 - kBnMomentum) * rmean.data[ci] +
                                                kBnMomentum * m);
                rvar.data[ci] = static_cast<T>((1 - kBnMomentum) * rvar.data[ci] +
                                               kBnMomentum * var);
            }
        } else {
            for (int ci = 0; ci < c; ++ci) {
                mu[ci] = rmean.data[ci];
                invstd[ci] = static_cast<T>(
                    1.0 / std::sqrt(static_cast<double>(rvar.data[ci]) + kBnEps));
            }
        }
        TensorT<T> y(x.shape);
        for (int bi = 0; bi < b; ++bi) {
            for (int ci = 0; ci < c; ++ci) {
                const T* p = x.ptr() + (static_cast<size_t>(bi) * c + ci) * s;
                T* q = y.ptr() + (static_cast<size_t>(bi) * c + ci) * s;
                const T a = scale.data[ci] * invstd[ci];
                const T off = shift.data[ci] - a * mu[ci];
                for (int si = 0; si < s; ++si) q[si] = a * p[si] + off;
            }
        }
        if (nc) {
            nc->mu = std::move(mu);
            nc->invstd = std::move(invstd);
        }
        return y;
    }

    TensorT<T> bn_bwd(const Node& nd, ModelStateT<T>& state, const NodeCache& nc,
                      const TensorT<T>& dy, GradMap<T>& grads) {
        const TensorT<T>& x = nc.input;
        const int b = x.shape[0];
        const int c = channels_of(nd.in_shape);
        const int s = static_cast<int>(x.numel() / (static_cast<size_t>(b) * c));
        const double n = static_cast<double>(b) * s;
        const auto& scale = state.params.at(nd.prefix + "bn.scale");
        auto& dscale = grads.at(nd.prefix + "bn.scale");
        auto& dshift = grads.at(nd.prefix + "bn.shift");
        TensorT<T> dx(x.shape);
        for (int ci = 0; ci < c; ++ci) {
            const T m = nc.mu[ci], is = nc.invstd[ci];
            double sum_dy = 0, sum_dy_xhat = 0;
            for (int bi = 0; bi < b; ++bi) {
                const T* px = x.ptr() + (static_cast<size_t>(bi) * c + ci) * s;
                const T* pd = dy.ptr() + (static_cast<size_t>(bi) * c + ci) * s;
                for (int si = 0; si < s; ++si) {
                    sum_dy += pd[si];
                    sum_dy_xhat += static_cast<double>(pd[si]) * ((px[si] - m) * is);
                }
            }
            dscale.data[ci] += static_cast<T>(sum_dy_xhat);
            dshift.data[ci] += static_cast<T>(sum_dy);
            const double mean_dy = sum_dy / n;
            const double mean_dy_xhat = sum_dy_xhat / n;
            const double g = static_cast<double>(scale.data[ci]) * is;
            for (int bi = 0; bi < b; ++bi) {
                const T* px = x.ptr() + (static_cast<size_t>(bi) * c + ci) * s;
                const T* pd = dy.ptr() + (static_cast<size_t>(bi) * c + ci) * s;
                T* pdx = dx.ptr() + (static_cast<size_t>(bi) * c + ci) * s;
                for (int si = 0; si < s; ++si) {
                    double xhat = (px[si] - m) * is;
                    pdx[si] = static_cast<T>(g * (pd[si] - mean_dy - xhat * mean_dy_xhat));
                }
            }
        }
        return dx;
    }

    // --- max pool (window == stride, ties to lowest index) ---

    TensorT<T> maxpool_fwd(const Node& nd, const TensorT<T>& x, NodeCache* nc) {
        const int b = x.shape[0];
        const int c = nd.in_shape[0], h = nd.in_shape[1], w = nd.in_shape[2];
        const int p = nd.pool, ho = h / p, wo = w / p;
        TensorT<T> y({b, c, ho, wo});
        std::vector<int> argmax(y.numel());
        size_t o = 0;
        for (int bi = 0; bi < b; ++bi) {
            for (int ci = 0; ci < c; ++ci) {
                const T* img = x.ptr() + (static_cast<size_t>(bi) * c + ci) * h * w;
                for (int y0 = 0; y0 < ho; ++y0) {
                    for (int x0 = 0; x0 < wo; ++x0, ++o) {
                        int best = (y0 * p) * w + x0 * p;
                        T bv = img[best];
                        for (int dy2 = 0; dy2 < p; ++dy2)
                            for (int dx2 = 0; dx2 < p; ++dx2) {
                                int idx = (y0 * p + dy2) * w + x0 * p + dx2;
                                if (img[idx] > bv) {
                                    bv = img[idx];
                                    best = idx;
                                }
                            }
                        y.data[o] = bv;
                        argmax[o] = best;
                    }
                }
            }
        }
        if (nc) nc->argmax = std::move(argmax);
        return y;
    }

    TensorT<T> maxpool_bwd(const Node& nd, const NodeCache& nc, const TensorT<T>& dy) {
        const int b = dy.shape[0];
        const int c = nd.in_shape[0], h = nd.in_shape[1], w = nd.in_shape[2];
        const int ho = nd.out_shape[1], wo = nd.out_shape[2];
        TensorT<T> dx({b, c, h, w});
        size_t o = 0;
        for (int bi = 0; bi < b; ++bi)
            for (int ci = 0; ci < c; ++ci) {
                T* img = dx.ptr() + (static_cast<size_t>(bi) * c + ci) * h * w;
                for (int i = 0; i < ho * wo; ++i, ++o) img[nc.argmax[o]] += dy.data[o];
            }
        return dx;
    }

    // --- global average pool ---

    TensorT<T> gap_fwd(const Node& nd, const TensorT<T>& x) {
        const int b = x.shape[0];
        const int c = nd.in_shape[0], hw = nd.in_shape[1] * nd.in_shape[2];
        TensorT<T> y({b, c});
        for (int bi = 0; bi < b; ++bi)
            for (int ci = 0; ci < c; ++ci) {
                const T* p = x.ptr() + (static_cast<size_t>(bi) * c + ci) * hw;
                double sum = 0;
                for (int i = 0; i < hw; ++i) sum += p[i];
                y.data[static_cast<size_t>(bi) * c + ci] = static_cast<T>(sum / hw);
            }
        return y;
    }

    TensorT<T> gap_bwd(const Node& nd, const NodeCache& nc, const TensorT<T>& dy) {
        const int b = dy.shape[0];
        const int c = nd.in_shape[0], hw = nd.in_shape[1] * nd.in_shape[2];
        TensorT<T> dx(nc.input.shape);
        for (int bi = 0; bi < b; ++bi)
            for (int ci = 0; ci < c; ++ci) {
                T g = dy.data[static_cast<size_t>(bi) * c + ci] / static_cast<T>(hw);
                T* p = dx.ptr() + (static_cast<size_t>(bi) * c + ci) * hw;
                for (int i = 0; i < hw; ++i) p[i] = g;
            }
        return dx;
    }
};

using Network = NetworkT<float>;

}  // namespace memtrace::diffcore
