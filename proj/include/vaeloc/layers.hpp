// Convolution building blocks with explicit forward/backward passes. The
// backward paths produce gradients with respect to parameters (training) and
// with respect to the layer input (input-gradient predictors, projection).
// Convolutions are lowered to GEMM via im2col, one GEMM per image: per-image
// calls keep every sample's arithmetic independent of its batch position, so
// duplicated inputs produce bitwise-identical outputs.
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <vector>

#include "vaeloc/rng.hpp"
#include "vaeloc/tensor.hpp"

namespace vaeloc {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;

namespace detail {

/// Unpacks conv patches of one (C,H,W) image into a (C*k*k, Ho*Wo) row-major
/// block; `ld` is the block's column stride (Ho*Wo when compact).
template <typename T>
void im2col(const T* src, int C, int H, int W, int k, int stride, int pad,
            int Ho, int Wo, T* col, std::size_t ld) {
    for (int ci = 0; ci < C; ++ci) {
        const T* chan = src + static_cast<std::size_t>(ci) * H * W;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                T* row = col + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) * ld;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    T* out = row + static_cast<std::size_t>(oy) * Wo;
                    if (iy < 0 || iy >= H) {
                        std::fill(out, out + Wo, T(0));
                        continue;
                    }
                    const T* in = chan + static_cast<std::size_t>(iy) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        out[ox] = (ix >= 0 && ix < W) ? in[ix] : T(0);
                    }
                }
            }
        }
    }
}

/// Inverse of im2col: scatter-adds a (C*k*k, Ho*Wo) block back onto a (C,H,W)
/// image. Overlapping patch entries accumulate.
template <typename T>
void col2im_add(const T* col, std::size_t ld, int C, int H, int W, int k,
                int stride, int pad, int Ho, int Wo, T* dst) {
    for (int ci = 0; ci < C; ++ci) {
        T* chan = dst + static_cast<std::size_t>(ci) * H * W;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const T* row = col + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) * ld;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    T* out = chan + static_cast<std::size_t>(iy) * W;
                    const T* in = row + static_cast<std::size_t>(oy) * Wo;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < W) out[ix] += in[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// Strided 2-D convolution. Weights are (out_ch, in_ch*k*k) row-major.
template <typename T>
struct Conv2d {
    int in_ch = 0, out_ch = 0, k = 1, stride = 1, pad = 0;
    std::vector<T> w, b;

    Conv2d() = default;
    Conv2d(int in, int out, int k_, int stride_, int pad_)
        : in_ch(in), out_ch(out), k(k_), stride(stride_), pad(pad_),
          w(static_cast<std::size_t>(out) * in * k_ * k_, T(0)), b(out, T(0)) {}

    int out_size(int in) const { return (in + 2 * pad - k) / stride + 1; }

    void init(Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch) * k * k);
        for (T& x : w) x = static_cast<T>(rng.uniform(-bound, bound));
        for (T& x : b) x = static_cast<T>(rng.uniform(-bound, bound));
    }

    void forward(const Tensor<T>& x, Tensor<T>& y) const {
        const int Ho = out_size(x.h), Wo = out_size(x.w);
        y = Tensor<T>(x.n, out_ch, Ho, Wo);
        const Eigen::Index cols = static_cast<Eigen::Index>(Ho) * Wo;
        CMapRM<T> wm(w.data(), out_ch, in_ch * k * k);
        MatRM<T> col(in_ch * k * k, cols);
        for (int bi = 0; bi < x.n; ++bi) {
            detail::im2col(x.image(bi), x.c, x.h, x.w, k, stride, pad, Ho, Wo, col.data(),
                           static_cast<std::size_t>(cols));
            // image bi of y is a contiguous (out_ch, Ho*Wo) row-major block
            MapRM<T> ym(y.image(bi), out_ch, cols);
            ym.noalias() = wm * col;
            for (int co = 0; co < out_ch; ++co)
                ym.row(co).array() += b[static_cast<std::size_t>(co)];
        }
    }

    /// gy: gradient at the output. Any of gx/gw/gb may be null.
    void backward(const Tensor<T>& x, const Tensor<T>& gy, Tensor<T>* gx,
                  std::vector<T>* gw, std::vector<T>* gb) const {
        const int Ho = gy.h, Wo = gy.w;
        const Eigen::Index cols = static_cast<Eigen::Index>(Ho) * Wo;
        CMapRM<T> wm(w.data(), out_ch, in_ch * k * k);
        if (gx) *gx = Tensor<T>(x.n, x.c, x.h, x.w);
        MatRM<T> colg(in_ch * k * k, cols), col(in_ch * k * k, cols);
        for (int bi = 0; bi < x.n; ++bi) {
            CMapRM<T> gym(gy.image(bi), out_ch, cols);
            if (gx) {
                colg.noalias() = wm.transpose() * gym;
                detail::col2im_add(colg.data(), static_cast<std::size_t>(cols), x.c, x.h, x.w,
                                   k, stride, pad, Ho, Wo, gx->image(bi));
            }
            if (gw) {
                detail::im2col(x.image(bi), x.c, x.h, x.w, k, stride, pad, Ho, Wo, col.data(),
                               static_cast<std::size_t>(cols));
                MapRM<T> gwm(gw->data(), out_ch, in_ch * k * k);
                gwm.noalias() += gym * col.transpose();
            }
            if (gb)
                for (int co = 0; co < out_ch; ++co)
                    (*gb)[static_cast<std::size_t>(co)] += gym.row(co).sum();
        }
    }
};

/// Strided 2-D transposed convolution. Weights are (in_ch, out_ch*k*k)
/// row-major; output spatial size is (in-1)*stride - 2*pad + k.
template <typename T>
struct ConvTranspose2d {
    int in_ch = 0, out_ch = 0, k = 1, stride = 1, pad = 0;
    std::vector<T> w, b;

    ConvTranspose2d() = default;
    ConvTranspose2d(int in, int out, int k_, int stride_, int pad_)
        : in_ch(in), out_ch(out), k(k_), stride(stride_), pad(pad_),
          w(static_cast<std::size_t>(in) * out * k_ * k_, T(0)), b(out, T(0)) {}

    int out_size(int in) const { return (in - 1) * stride - 2 * pad + k; }

    void init(Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch) * k * k);
        for (T& x : w) x = static_cast<T>(rng.uniform(-bound, bound));
        for (T& x : b) x = static_cast<T>(rng.uniform(-bound, bound));
    }

    void forward(const Tensor<T>& x, Tensor<T>& y) const {
        const int Ho = out_size(x.h), Wo = out_size(x.w);
        y = Tensor<T>(x.n, out_ch, Ho, Wo);
        const Eigen::Index cols = static_cast<Eigen::Index>(x.h) * x.w;
        CMapRM<T> wm(w.data(), in_ch, out_ch * k * k);
        MatRM<T> col(out_ch * k * k, cols);
        for (int bi = 0; bi < x.n; ++bi) {
            for (int co = 0; co < out_ch; ++co)
                std::fill_n(y.image(bi) + static_cast<std::size_t>(co) * y.plane(), y.plane(),
                            b[static_cast<std::size_t>(co)]);
            CMapRM<T> xm(x.image(bi), in_ch, cols);
            col.noalias() = wm.transpose() * xm;
            detail::col2im_add(col.data(), static_cast<std::size_t>(cols), out_ch, Ho, Wo,
                               k, stride, pad, x.h, x.w, y.image(bi));
        }
    }

    void backward(const Tensor<T>& x, const Tensor<T>& gy, Tensor<T>* gx,
                  std::vector<T>* gw, std::vector<T>* gb) const {
        const Eigen::Index cols = static_cast<Eigen::Index>(x.h) * x.w;
        CMapRM<T> wm(w.data(), in_ch, out_ch * k * k);
        if (gx) *gx = Tensor<T>(x.n, x.c, x.h, x.w);
        MatRM<T> col(out_ch * k * k, cols);
        for (int bi = 0; bi < x.n; ++bi) {
            detail::im2col(gy.image(bi), gy.c, gy.h, gy.w, k, stride, pad, x.h, x.w,
                           col.data(), static_cast<std::size_t>(cols));
            if (gx) {
                MapRM<T> gxm(gx->image(bi), in_ch, cols);
                gxm.noalias() = wm * col;
            }
            if (gw) {
                CMapRM<T> xm(x.image(bi), in_ch, cols);
                MapRM<T> gwm(gw->data(), in_ch, out_ch * k * k);
                gwm.noalias() += xm * col.transpose();
            }
            if (gb)
                for (int co = 0; co < out_ch; ++co) {
                    const T* p = gy.image(bi) + static_cast<std::size_t>(co) * gy.plane();
                    T s(0);
                    for (std::size_t i = 0; i < gy.plane(); ++i) s += p[i];
                    (*gb)[static_cast<std::size_t>(co)] += s;
                }
        }
    }
};

template <typename T>
void leaky_relu_forward(const Tensor<T>& pre, T slope, Tensor<T>& out) {
    out = Tensor<T>(pre.n, pre.c, pre.h, pre.w);
    for (std::size_t i = 0; i < pre.size(); ++i) {
        const T x = pre.v[i];
        out.v[i] = x > T(0) ? x : slope * x;
    }
}

/// In-place: g *= lrelu'(pre). The derivative at exactly zero is `slope`.
template <typename T>
void leaky_relu_backward(Tensor<T>& g, const Tensor<T>& pre, T slope) {
    for (std::size_t i = 0; i < g.size(); ++i)
        if (!(pre.v[i] > T(0))) g.v[i] *= slope;
}

/// Adam with bias correction over an arbitrary flat parameter list.
template <typename T>
struct Adam {
    double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long t = 0;
    std::vector<std::vector<T>> m, v;

    void step(const std::vector<T*>& params, const std::vector<std::size_t>& sizes,
              const std::vector<const T*>& grads) {
        if (m.empty()) {
            m.resize(params.size());
            v.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                m[i].assign(sizes[i], T(0));
                v[i].assign(sizes[i], T(0));
            }
        }
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            T* p = params[i];
            const T* g = grads[i];
            for (std::size_t j = 0; j < sizes[i]; ++j) {
                m[i][j] = static_cast<T>(beta1 * m[i][j] + (1.0 - beta1) * g[j]);
                v[i][j] = static_cast<T>(beta2 * v[i][j] + (1.0 - beta2) * g[j] * g[j]);
                const double mh = m[i][j] / bc1;
                const double vh = v[i][j] / bc2;
                p[j] -= static_cast<T>(lr * mh / (std::sqrt(vh) + eps));
            }
        }
    }
};

}  // namespace vaeloc
