#pragma once
// Minimal neural-net layer kit with explicit forward/backward passes.
//
// Layers hold parameters only; per-sample activations live in Cache objects
// so the same layer can be reused across samples. Gradients accumulate into
// a mirror instance of the layer (same shapes, zero-initialized), which keeps
// the optimizer and checkpoint code uniform: both walk collect()ed params.
// GEMMs go through Eigen; everything else is straightforward loops.

#include <Eigen/Dense>
#include <cmath>
#include <string>
#include <vector>

#include "phasegen/common.hpp"
#include "phasegen/tensor.hpp"

namespace phasegen::nn {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatCM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

/// Named view of one parameter vector; collect() walks a model in a fixed
/// order so two structurally equal models align index-by-index.
template <typename S>
struct ParamView {
    std::string name;
    std::vector<S>* data;
};

template <typename S>
using ParamList = std::vector<ParamView<S>>;

template <typename S>
size_t param_count(const ParamList<S>& params) {
    size_t n = 0;
    for (const auto& p : params) n += p.data->size();
    return n;
}

template <typename S>
void zero_params(ParamList<S>& params) {
    for (auto& p : params) std::fill(p.data->begin(), p.data->end(), S(0));
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename S>
inline S sigmoid(S x) {
    return S(1) / (S(1) + std::exp(-x));
}

template <typename S>
inline S silu(S x) {
    return x * sigmoid(x);
}

/// d/dx silu(x) = sig(x) * (1 + x * (1 - sig(x)))
template <typename S>
inline S silu_grad(S x) {
    S s = sigmoid(x);
    return s * (S(1) + x * (S(1) - s));
}

template <typename S>
Tensor<S> silu_forward(const Tensor<S>& x) {
    Tensor<S> y(x.channels, x.height, x.width);
    for (size_t i = 0; i < x.size(); ++i) y.v[i] = silu(x.v[i]);
    return y;
}

template <typename S>
Tensor<S> silu_backward(const Tensor<S>& gy, const Tensor<S>& x) {
    Tensor<S> gx(x.channels, x.height, x.width);
    for (size_t i = 0; i < x.size(); ++i) gx.v[i] = gy.v[i] * silu_grad(x.v[i]);
    return gx;
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

template <typename S>
struct Dense {
    int in_dim = 0, out_dim = 0;
    std::vector<S> w;  // out_dim x in_dim, row-major
    std::vector<S> b;  // out_dim

    struct Cache {
        std::vector<S> x;
    };

    void configure(int in, int out) {
        in_dim = in;
        out_dim = out;
        w.assign(static_cast<size_t>(in) * out, S(0));
        b.assign(out, S(0));
    }

    void init(Rng& rng) {
        double std = std::sqrt(1.0 / in_dim);
        for (auto& v : w) v = static_cast<S>(rng.normal() * std);
        std::fill(b.begin(), b.end(), S(0));
    }

    std::vector<S> forward(const std::vector<S>& x, Cache& cc) const {
        require(static_cast<int>(x.size()) == in_dim, "dense input size mismatch");
        cc.x = x;
        std::vector<S> y(out_dim);
        Eigen::Map<const MatRM<S>> W(w.data(), out_dim, in_dim);
        Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> X(x.data(), in_dim);
        Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> Y(y.data(), out_dim);
        Y.noalias() = W * X;
        for (int i = 0; i < out_dim; ++i) y[i] += b[i];
        return y;
    }

    std::vector<S> backward(const std::vector<S>& gy, const Cache& cc, Dense& g) const {
        Eigen::Map<const MatRM<S>> W(w.data(), out_dim, in_dim);
        Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> Gy(gy.data(), out_dim);
        Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> X(cc.x.data(), in_dim);
        Eigen::Map<MatRM<S>> Gw(g.w.data(), out_dim, in_dim);
        Gw.noalias() += Gy * X.transpose();
        for (int i = 0; i < out_dim; ++i) g.b[i] += gy[i];
        std::vector<S> gx(in_dim);
        Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> Gx(gx.data(), in_dim);
        Gx.noalias() = W.transpose() * Gy;
        return gx;
    }

    void collect(const std::string& prefix, ParamList<S>& out) {
        out.push_back({prefix + ".w", &w});
        out.push_back({prefix + ".b", &b});
    }
};

// ---------------------------------------------------------------------------
// Conv2d (odd kernel, same or stride-2 padding)
// ---------------------------------------------------------------------------

template <typename S>
struct Conv2d {
    int in_ch = 0, out_ch = 0, kernel = 3, stride = 1;
    std::vector<S> w;  // out_ch x (in_ch*k*k), row-major
    std::vector<S> b;  // out_ch

    struct Cache {
        Tensor<S> x;
    };

    void configure(int in, int out, int k = 3, int s = 1) {
        in_ch = in;
        out_ch = out;
        kernel = k;
        stride = s;
        w.assign(static_cast<size_t>(out) * in * k * k, S(0));
        b.assign(out, S(0));
    }

    void init(Rng& rng, double gain = 2.0) {
        double std = std::sqrt(gain / (in_ch * kernel * kernel));
        for (auto& v : w) v = static_cast<S>(rng.normal() * std);
        std::fill(b.begin(), b.end(), S(0));
    }

    int out_h(int h) const { return (h + 2 * (kernel / 2) - kernel) / stride + 1; }
    int out_w(int w_) const { return (w_ + 2 * (kernel / 2) - kernel) / stride + 1; }

    // column j of the patch matrix holds the receptive field of output pixel j
    void im2col(const Tensor<S>& x, MatCM<S>& cols) const {
        const int pad = kernel / 2;
        const int oh = out_h(x.height), ow = out_w(x.width);
        cols.resize(static_cast<Eigen::Index>(in_ch) * kernel * kernel,
                    static_cast<Eigen::Index>(oh) * ow);
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const Eigen::Index col = static_cast<Eigen::Index>(oy) * ow + ox;
                S* dst = cols.data() + col * cols.rows();
                int r = 0;
                for (int c = 0; c < in_ch; ++c) {
                    const S* plane = x.plane(c);
                    for (int ky = 0; ky < kernel; ++ky) {
                        int y = oy * stride - pad + ky;
                        for (int kx = 0; kx < kernel; ++kx, ++r) {
                            int xx = ox * stride - pad + kx;
                            dst[r] = (y >= 0 && y < x.height && xx >= 0 && xx < x.width)
                                         ? plane[y * x.width + xx]
                                         : S(0);
                        }
                    }
                }
            }
        }
    }

    Tensor<S> forward(const Tensor<S>& x, Cache& cc) const {
        require(x.channels == in_ch, "conv input channel mismatch");
        cc.x = x;
        const int oh = out_h(x.height), ow = out_w(x.width);
        Tensor<S> y(out_ch, oh, ow);
        MatCM<S> cols;
        im2col(x, cols);
        Eigen::Map<const MatRM<S>> W(w.data(), out_ch, in_ch * kernel * kernel);
        Eigen::Map<MatRM<S>> Y(y.v.data(), out_ch, static_cast<Eigen::Index>(oh) * ow);
        Y.noalias() = W * cols;
        for (int c = 0; c < out_ch; ++c) {
            S* plane = y.plane(c);
            for (int i = 0; i < oh * ow; ++i) plane[i] += b[c];
        }
        return y;
    }

    Tensor<S> backward(const Tensor<S>& gy, const Cache& cc, Conv2d& g) const {
        const Tensor<S>& x = cc.x;
        const int oh = gy.height, ow = gy.width;
        const int pad = kernel / 2;
        MatCM<S> cols;
        im2col(x, cols);

        Eigen::Map<const MatRM<S>> Gy(gy.v.data(), out_ch, static_cast<Eigen::Index>(oh) * ow);
        Eigen::Map<MatRM<S>> Gw(g.w.data(), out_ch, in_ch * kernel * kernel);
        Gw.noalias() += Gy * cols.transpose();
        for (int c = 0; c < out_ch; ++c) {
            const S* plane = gy.plane(c);
            S acc = 0;
            for (int i = 0; i < oh * ow; ++i) acc += plane[i];
            g.b[c] += acc;
        }

        // dX = col2im(W^T * Gy)
        Eigen::Map<const MatRM<S>> W(w.data(), out_ch, in_ch * kernel * kernel);
        MatCM<S> gcols = W.transpose() * Gy;
        Tensor<S> gx(x.channels, x.height, x.width, S(0));
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const Eigen::Index col = static_cast<Eigen::Index>(oy) * ow + ox;
                const S* src = gcols.data() + col * gcols.rows();
                int r = 0;
                for (int c = 0; c < in_ch; ++c) {
                    S* plane = gx.plane(c);
                    for (int ky = 0; ky < kernel; ++ky) {
                        int y = oy * stride - pad + ky;
                        for (int kx = 0; kx < kernel; ++kx, ++r) {
                            int xx = ox * stride - pad + kx;
                            if (y >= 0 && y < x.height && xx >= 0 && xx < x.width)
                                plane[y * x.width + xx] += src[r];
                        }
                    }
                }
            }
        }
        return gx;
    }

    void collect(const std::string& prefix, ParamList<S>& out) {
        out.push_back({prefix + ".w", &w});
        out.push_back({prefix + ".b", &b});
    }
};

// ---------------------------------------------------------------------------
// GroupNorm
// ---------------------------------------------------------------------------

template <typename S>
struct GroupNorm {
    int channels = 0;
    int groups = 1;
    S eps = S(1e-5);
    std::vector<S> gamma, beta;

    struct Cache {
        Tensor<S> xhat;
        std::vector<S> inv_std;  // per group
    };

    /// Smallest group count dividing C with at most 32 channels per group.
    static int pick_groups(int c) {
        int g = (c + 31) / 32;
        while (c % g != 0) ++g;
        return g;
    }

    void configure(int c) {
        channels = c;
        groups = pick_groups(c);
        gamma.assign(c, S(1));
        beta.assign(c, S(0));
    }

    Tensor<S> forward(const Tensor<S>& x, Cache& cc) const {
        require(x.channels == channels, "groupnorm channel mismatch");
        const int cpg = channels / groups;
        const int hw = x.plane_size();
        cc.xhat = Tensor<S>(x.channels, x.height, x.width);
        cc.inv_std.assign(groups, S(0));
        Tensor<S> y(x.channels, x.height, x.width);
        for (int g = 0; g < groups; ++g) {
            const size_t base = static_cast<size_t>(g) * cpg * hw;
            const size_t n = static_cast<size_t>(cpg) * hw;
            double mean = 0;
            for (size_t i = 0; i < n; ++i) mean += x.v[base + i];
            mean /= static_cast<double>(n);
            double var = 0;
            for (size_t i = 0; i < n; ++i) {
                double d = x.v[base + i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(n);
            S inv_std = static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            cc.inv_std[g] = inv_std;
            for (int c = 0; c < cpg; ++c) {
                const int ch = g * cpg + c;
                for (int i = 0; i < hw; ++i) {
                    S xh = (x.v[base + static_cast<size_t>(c) * hw + i] - static_cast<S>(mean)) *
                           inv_std;
                    cc.xhat.v[base + static_cast<size_t>(c) * hw + i] = xh;
                    y.v[base + static_cast<size_t>(c) * hw + i] = gamma[ch] * xh + beta[ch];
                }
            }
        }
        return y;
    }

    Tensor<S> backward(const Tensor<S>& gy, const Cache& cc, GroupNorm& g) const {
        const int cpg = channels / groups;
        const int hw = gy.plane_size();
        Tensor<S> gx(gy.channels, gy.height, gy.width);
        for (int grp = 0; grp < groups; ++grp) {
            const size_t base = static_cast<size_t>(grp) * cpg * hw;
            const size_t n = static_cast<size_t>(cpg) * hw;
            // param grads and the two reductions the input grad needs
            double sum_gxhat = 0, sum_gxhat_xhat = 0;
            for (int c = 0; c < cpg; ++c) {
                const int ch = grp * cpg + c;
                double dgamma = 0, dbeta = 0;
                for (int i = 0; i < hw; ++i) {
                    const size_t idx = base + static_cast<size_t>(c) * hw + i;
                    const double gyv = gy.v[idx];
                    const double xh = cc.xhat.v[idx];
                    dgamma += gyv * xh;
                    dbeta += gyv;
                    const double gxh = gyv * gamma[ch];
                    sum_gxhat += gxh;
                    sum_gxhat_xhat += gxh * xh;
                }
                g.gamma[ch] += static_cast<S>(dgamma);
                g.beta[ch] += static_cast<S>(dbeta);
            }
            const double inv_n = 1.0 / static_cast<double>(n);
            const double is = cc.inv_std[grp];
            for (int c = 0; c < cpg; ++c) {
                const int ch = grp * cpg + c;
                for (int i = 0; i < hw; ++i) {
                    const size_t idx = base + static_cast<size_t>(c) * hw + i;
                    const double gxh = static_cast<double>(gy.v[idx]) * gamma[ch];
                    const double xh = cc.xhat.v[idx];
                    gx.v[idx] = static_cast<S>(is * (gxh - inv_n * sum_gxhat - xh * inv_n * sum_gxhat_xhat));
                }
            }
        }
        return gx;
    }

    void collect(const std::string& prefix, ParamList<S>& out) {
        out.push_back({prefix + ".gamma", &gamma});
        out.push_back({prefix + ".beta", &beta});
    }
};

// ---------------------------------------------------------------------------
// Nearest-neighbor 2x upsample (parameter-free)
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> upsample2x(const Tensor<S>& x) {
    Tensor<S> y(x.channels, x.height * 2, x.width * 2);
    for (int c = 0; c < x.channels; ++c)
        for (int yy = 0; yy < y.height; ++yy)
            for (int xx = 0; xx < y.width; ++xx)
                y.at(c, yy, xx) = x.at(c, yy / 2, xx / 2);
    return y;
}

template <typename S>
Tensor<S> upsample2x_backward(const Tensor<S>& gy) {
    Tensor<S> gx(gy.channels, gy.height / 2, gy.width / 2, S(0));
    for (int c = 0; c < gy.channels; ++c)
        for (int yy = 0; yy < gy.height; ++yy)
            for (int xx = 0; xx < gy.width; ++xx)
                gx.at(c, yy / 2, xx / 2) += gy.at(c, yy, xx);
    return gx;
}

// ---------------------------------------------------------------------------
// Multi-head attention over spatial tokens
//
// Queries come from the (group-normed) feature map; keys/values either from
// the same tokens (self) or from an externally supplied token matrix
// (kv_dim x n_kv), e.g. a single condition-embedding token.
// ---------------------------------------------------------------------------

template <typename S>
struct Attention {
    int channels = 0, heads = 1, kv_dim = 0;
    bool self_attend = true;
    GroupNorm<S> norm;
    std::vector<S> wq, wk, wv, wo;  // (C x C), (C x kv_dim), (C x kv_dim), (C x C)
    std::vector<S> bq, bk, bv, bo;

    struct Cache {
        typename GroupNorm<S>::Cache norm_cache;
        Tensor<S> x;
        MatCM<S> xn;      // normalized tokens, C x N
        MatCM<S> kv_in;   // kv source tokens, kv_dim x n_kv
        MatCM<S> q, k, vv;
        std::vector<MatCM<S>> p;  // per-head attention weights, n_kv x N (column per query)
    };

    void configure(int c, int n_heads, int kv, bool self_mode) {
        require(c % n_heads == 0, "attention channels must divide heads");
        channels = c;
        heads = n_heads;
        kv_dim = kv;
        self_attend = self_mode;
        norm.configure(c);
        wq.assign(static_cast<size_t>(c) * c, S(0));
        wo.assign(static_cast<size_t>(c) * c, S(0));
        wk.assign(static_cast<size_t>(c) * kv, S(0));
        wv.assign(static_cast<size_t>(c) * kv, S(0));
        bq.assign(c, S(0));
        bk.assign(c, S(0));
        bv.assign(c, S(0));
        bo.assign(c, S(0));
    }

    void init(Rng& rng) {
        auto fill = [&rng](std::vector<S>& w, int fan_in) {
            double std = std::sqrt(1.0 / fan_in);
            for (auto& v : w) v = static_cast<S>(rng.normal() * std);
        };
        fill(wq, channels);
        fill(wk, kv_dim);
        fill(wv, kv_dim);
        fill(wo, channels);
    }

    /// kv_tokens ignored in self mode. Output = x + proj(attention(norm(x))).
    Tensor<S> forward(const Tensor<S>& x, const MatCM<S>& kv_tokens, Cache& cc) const {
        require(x.channels == channels, "attention channel mismatch");
        const int n = x.plane_size();
        cc.x = x;
        Tensor<S> xn_t = norm.forward(x, cc.norm_cache);
        cc.xn = MatCM<S>(channels, n);
        for (int c = 0; c < channels; ++c)
            for (int i = 0; i < n; ++i) cc.xn(c, i) = xn_t.v[static_cast<size_t>(c) * n + i];

        cc.kv_in = self_attend ? cc.xn : kv_tokens;
        require(cc.kv_in.rows() == kv_dim, "attention kv dimension mismatch");
        const int n_kv = static_cast<int>(cc.kv_in.cols());

        Eigen::Map<const MatRM<S>> Wq(wq.data(), channels, channels);
        Eigen::Map<const MatRM<S>> Wk(wk.data(), channels, kv_dim);
        Eigen::Map<const MatRM<S>> Wv(wv.data(), channels, kv_dim);
        Eigen::Map<const MatRM<S>> Wo(wo.data(), channels, channels);

        cc.q = Wq * cc.xn;
        cc.k = Wk * cc.kv_in;
        cc.vv = Wv * cc.kv_in;
        for (int i = 0; i < n; ++i) cc.q.col(i) += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(bq.data(), channels);
        for (int i = 0; i < n_kv; ++i) {
            cc.k.col(i) += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(bk.data(), channels);
            cc.vv.col(i) += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(bv.data(), channels);
        }

        const int hd = channels / heads;
        const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
        MatCM<S> attended(channels, n);
        cc.p.assign(heads, MatCM<S>());
        for (int h = 0; h < heads; ++h) {
            auto Qh = cc.q.middleRows(h * hd, hd);
            auto Kh = cc.k.middleRows(h * hd, hd);
            auto Vh = cc.vv.middleRows(h * hd, hd);
            MatCM<S> scores = (Kh.transpose() * Qh) * scale;  // n_kv x N
            // softmax over keys, per query column
            for (int i = 0; i < n; ++i) {
                S mx = scores.col(i).maxCoeff();
                S denom = S(0);
                for (int j = 0; j < n_kv; ++j) {
                    scores(j, i) = std::exp(scores(j, i) - mx);
                    denom += scores(j, i);
                }
                scores.col(i) /= denom;
            }
            cc.p[h] = scores;
            attended.middleRows(h * hd, hd).noalias() = Vh * scores;
        }

        Tensor<S> y = x;  // residual
        MatCM<S> out = Wo * attended;
        for (int c = 0; c < channels; ++c)
            for (int i = 0; i < n; ++i)
                y.v[static_cast<size_t>(c) * n + i] += out(c, i) + bo[c];
        return y;
    }

    Tensor<S> backward(const Tensor<S>& gy, const Cache& cc, Attention& g) const {
        const int n = gy.plane_size();
        const int n_kv = static_cast<int>(cc.kv_in.cols());
        const int hd = channels / heads;
        const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));

        Eigen::Map<const MatRM<S>> Wq(wq.data(), channels, channels);
        Eigen::Map<const MatRM<S>> Wk(wk.data(), channels, kv_dim);
        Eigen::Map<const MatRM<S>> Wv(wv.data(), channels, kv_dim);
        Eigen::Map<const MatRM<S>> Wo(wo.data(), channels, channels);
        Eigen::Map<MatRM<S>> Gwq(g.wq.data(), channels, channels);
        Eigen::Map<MatRM<S>> Gwk(g.wk.data(), channels, kv_dim);
        Eigen::Map<MatRM<S>> Gwv(g.wv.data(), channels, kv_dim);
        Eigen::Map<MatRM<S>> Gwo(g.wo.data(), channels, channels);

        // grad arriving at the attention output (before residual add)
        MatCM<S> gout(channels, n);
        for (int c = 0; c < channels; ++c)
            for (int i = 0; i < n; ++i) gout(c, i) = gy.v[static_cast<size_t>(c) * n + i];

        // rebuild attended = [Vh * Ph]_h for the Wo grad
        MatCM<S> attended(channels, n);
        for (int h = 0; h < heads; ++h)
            attended.middleRows(h * hd, hd).noalias() =
                cc.vv.middleRows(h * hd, hd) * cc.p[h];

        Gwo.noalias() += gout * attended.transpose();
        for (int c = 0; c < channels; ++c) {
            S acc = 0;
            for (int i = 0; i < n; ++i) acc += gout(c, i);
            g.bo[c] += acc;
        }

        MatCM<S> gattended = Wo.transpose() * gout;
        MatCM<S> gq = MatCM<S>::Zero(channels, n);
        MatCM<S> gk = MatCM<S>::Zero(channels, n_kv);
        MatCM<S> gv = MatCM<S>::Zero(channels, n_kv);
        for (int h = 0; h < heads; ++h) {
            auto Qh = cc.q.middleRows(h * hd, hd);
            auto Kh = cc.k.middleRows(h * hd, hd);
            auto Vh = cc.vv.middleRows(h * hd, hd);
            const MatCM<S>& P = cc.p[h];
            auto Gah = gattended.middleRows(h * hd, hd);

            gv.middleRows(h * hd, hd).noalias() += Gah * P.transpose();
            MatCM<S> gp = Vh.transpose() * Gah;  // n_kv x N
            // softmax backward per query column
            MatCM<S> gscores(n_kv, n);
            for (int i = 0; i < n; ++i) {
                S dot = S(0);
                for (int j = 0; j < n_kv; ++j) dot += gp(j, i) * P(j, i);
                for (int j = 0; j < n_kv; ++j) gscores(j, i) = P(j, i) * (gp(j, i) - dot);
            }
            gq.middleRows(h * hd, hd).noalias() += (Kh * gscores) * scale;
            gk.middleRows(h * hd, hd).noalias() += (Qh * gscores.transpose()) * scale;
        }

        Gwq.noalias() += gq * cc.xn.transpose();
        Gwk.noalias() += gk * cc.kv_in.transpose();
        Gwv.noalias() += gv * cc.kv_in.transpose();
        for (int c = 0; c < channels; ++c) {
            S aq = 0, ak = 0, av = 0;
            for (int i = 0; i < n; ++i) aq += gq(c, i);
            for (int i = 0; i < n_kv; ++i) {
                ak += gk(c, i);
                av += gv(c, i);
            }
            g.bq[c] += aq;
            g.bk[c] += ak;
            g.bv[c] += av;
        }

        MatCM<S> gxn = Wq.transpose() * gq;
        MatCM<S> gkv = Wk.transpose() * gk + Wv.transpose() * gv;
        if (self_attend) gxn += gkv;

        Tensor<S> gxn_t(channels, gy.height, gy.width);
        for (int c = 0; c < channels; ++c)
            for (int i = 0; i < n; ++i) gxn_t.v[static_cast<size_t>(c) * n + i] = gxn(c, i);
        Tensor<S> gx = norm.backward(gxn_t, cc.norm_cache, g.norm);
        gx += gy;  // residual path
        return gx;
    }

    /// Gradient w.r.t. external kv tokens (cross mode only).
    MatCM<S> kv_grad(const Tensor<S>& gy, const Cache& cc, const Attention& g_unused) const {
        (void)g_unused;
        require(!self_attend, "kv_grad only applies in cross mode");
        // recompute the lightweight pieces of backward that touch kv
        const int n = gy.plane_size();
        const int n_kv = static_cast<int>(cc.kv_in.cols());
        const int hd = channels / heads;
        const S scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(hd)));
        Eigen::Map<const MatRM<S>> Wk(wk.data(), channels, kv_dim);
        Eigen::Map<const MatRM<S>> Wv(wv.data(), channels, kv_dim);
        Eigen::Map<const MatRM<S>> Wo(wo.data(), channels, channels);

        MatCM<S> gout(channels, n);
        for (int c = 0; c < channels; ++c)
            for (int i = 0; i < n; ++i) gout(c, i) = gy.v[static_cast<size_t>(c) * n + i];
        MatCM<S> gattended = Wo.transpose() * gout;
        MatCM<S> gk = MatCM<S>::Zero(channels, n_kv);
        MatCM<S> gv = MatCM<S>::Zero(channels, n_kv);
        for (int h = 0; h < heads; ++h) {
            auto Qh = cc.q.middleRows(h * hd, hd);
            auto Vh = cc.vv.middleRows(h * hd, hd);
            const MatCM<S>& P = cc.p[h];
            auto Gah = gattended.middleRows(h * hd, hd);
            gv.middleRows(h * hd, hd).noalias() += Gah * P.transpose();
            MatCM<S> gp = Vh.transpose() * Gah;
            MatCM<S> gscores(n_kv, n);
            for (int i = 0; i < n; ++i) {
                S dot = S(0);
                for (int j = 0; j < n_kv; ++j) dot += gp(j, i) * P(j, i);
                for (int j = 0; j < n_kv; ++j) gscores(j, i) = P(j, i) * (gp(j, i) - dot);
            }
            gk.middleRows(h * hd, hd).noalias() += (Qh * gscores.transpose()) * scale;
        }
        return Wk.transpose() * gk + Wv.transpose() * gv;
    }

    void collect(const std::string& prefix, ParamList<S>& out) {
        norm.collect(prefix + ".norm", out);
        out.push_back({prefix + ".wq", &wq});
        out.push_back({prefix + ".bq", &bq});
        out.push_back({prefix + ".wk", &wk});
        out.push_back({prefix + ".bk", &bk});
        out.push_back({prefix + ".wv", &wv});
        out.push_back({prefix + ".bv", &bv});
        out.push_back({prefix + ".wo", &wo});
        out.push_back({prefix + ".bo", &bo});
    }
};

// ---------------------------------------------------------------------------
// Residual block with embedding injection
// ---------------------------------------------------------------------------

template <typename S>
struct ResBlock {
    int in_ch = 0, out_ch = 0;
    GroupNorm<S> gn1, gn2;
    Conv2d<S> conv1, conv2;
    Dense<S> emb_proj;  // embed_dim -> out_ch, added per channel
    Conv2d<S> skip;     // 1x1, only when in_ch != out_ch
    bool has_skip_conv = false;

    struct Cache {
        typename GroupNorm<S>::Cache gn1c, gn2c;
        typename Conv2d<S>::Cache c1, c2, skipc;
        typename Dense<S>::Cache embc;
        Tensor<S> pre1, pre2;  // silu inputs
        std::vector<S> emb_silu_in;
    };

    void configure(int in, int out, int embed_dim) {
        in_ch = in;
        out_ch = out;
        gn1.configure(in);
        conv1.configure(in, out, 3, 1);
        emb_proj.configure(embed_dim, out);
        gn2.configure(out);
        conv2.configure(out, out, 3, 1);
        has_skip_conv = (in != out);
        if (has_skip_conv) skip.configure(in, out, 1, 1);
    }

    void init(Rng& rng) {
        conv1.init(rng);
        emb_proj.init(rng);
        // conv2 starts at zero so each block begins as identity
        std::fill(conv2.w.begin(), conv2.w.end(), S(0));
        std::fill(conv2.b.begin(), conv2.b.end(), S(0));
        if (has_skip_conv) skip.init(rng, 1.0);
    }

    Tensor<S> forward(const Tensor<S>& x, const std::vector<S>& emb, Cache& cc) const {
        cc.pre1 = gn1.forward(x, cc.gn1c);
        Tensor<S> h = conv1.forward(silu_forward(cc.pre1), cc.c1);

        cc.emb_silu_in = emb;
        std::vector<S> emb_act(emb.size());
        for (size_t i = 0; i < emb.size(); ++i) emb_act[i] = silu(emb[i]);
        std::vector<S> shift = emb_proj.forward(emb_act, cc.embc);
        const int hw = h.plane_size();
        for (int c = 0; c < out_ch; ++c) {
            S* plane = h.plane(c);
            for (int i = 0; i < hw; ++i) plane[i] += shift[c];
        }

        cc.pre2 = gn2.forward(h, cc.gn2c);
        Tensor<S> h2 = conv2.forward(silu_forward(cc.pre2), cc.c2);

        Tensor<S> sk = has_skip_conv ? skip.forward(x, cc.skipc) : x;
        h2 += sk;
        return h2;
    }

    /// Returns gx; the embedding gradient accumulates into g_emb.
    Tensor<S> backward(const Tensor<S>& gy, const Cache& cc, ResBlock& g,
                       std::vector<S>& g_emb) const {
        // main branch
        Tensor<S> gh2 = conv2.backward(gy, cc.c2, g.conv2);
        gh2 = silu_backward(gh2, cc.pre2);
        Tensor<S> gh = gn2.backward(gh2, cc.gn2c, g.gn2);

        // embedding shift: per-channel sum
        std::vector<S> gshift(out_ch, S(0));
        const int hw = gh.plane_size();
        for (int c = 0; c < out_ch; ++c) {
            const S* plane = gh.plane(c);
            S acc = 0;
            for (int i = 0; i < hw; ++i) acc += plane[i];
            gshift[c] = acc;
        }
        std::vector<S> gemb_act = emb_proj.backward(gshift, cc.embc, g.emb_proj);
        for (size_t i = 0; i < gemb_act.size(); ++i)
            g_emb[i] += gemb_act[i] * silu_grad(cc.emb_silu_in[i]);

        Tensor<S> gc1 = conv1.backward(gh, cc.c1, g.conv1);
        gc1 = silu_backward(gc1, cc.pre1);
        Tensor<S> gx = gn1.backward(gc1, cc.gn1c, g.gn1);

        // skip branch
        if (has_skip_conv) {
            Tensor<S> gsk = skip.backward(gy, cc.skipc, g.skip);
            gx += gsk;
        } else {
            gx += gy;
        }
        return gx;
    }

    void collect(const std::string& prefix, ParamList<S>& out) {
        gn1.collect(prefix + ".gn1", out);
        conv1.collect(prefix + ".conv1", out);
        emb_proj.collect(prefix + ".emb", out);
        gn2.collect(prefix + ".gn2", out);
        conv2.collect(prefix + ".conv2", out);
        if (has_skip_conv) skip.collect(prefix + ".skip", out);
    }
};

// ---------------------------------------------------------------------------
// AdamW with cosine learning-rate decay
// ---------------------------------------------------------------------------

struct OptimizerConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    bool cosine_lr = true;
    int total_steps = 1;  // for the cosine decay horizon
};

template <typename S>
class AdamW {
public:
    AdamW(const ParamList<S>& params, OptimizerConfig cfg) : cfg_(cfg) {
        for (const auto& p : params) {
            m_.emplace_back(p.data->size(), 0.0);
            v_.emplace_back(p.data->size(), 0.0);
        }
    }

    double lr_at(int step) const {
        if (!cfg_.cosine_lr) return cfg_.lr;
        double frac = static_cast<double>(step) / std::max(1, cfg_.total_steps);
        frac = clamp(frac, 0.0, 1.0);
        return cfg_.lr * 0.5 * (1.0 + std::cos(kPi * frac));
    }

    /// One update; `grads` must align with the params passed at construction.
    void step(ParamList<S>& params, const ParamList<S>& grads) {
        ++t_;
        const double lr = lr_at(t_ - 1);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (size_t p = 0; p < params.size(); ++p) {
            auto& w = *params[p].data;
            const auto& gvec = *grads[p].data;
            auto& m = m_[p];
            auto& v = v_[p];
            for (size_t i = 0; i < w.size(); ++i) {
                const double gi = gvec[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                double upd = mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i];
                w[i] = static_cast<S>(w[i] - lr * upd);
            }
        }
    }

    int steps_taken() const { return t_; }

private:
    OptimizerConfig cfg_;
    int t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace phasegen::nn
