#pragma once

#include "vlmir/core/tensor.hpp"

namespace vlmir {

// im2col for NCHW input: output is (C*kh*kw, out_h*out_w) per image.
template <typename T>
inline void im2col(const T* img, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int out_h, int out_w, T* col) {
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                T* dst = col + ((c * kh + ky) * kw + kx) * int64_t(out_h) * out_w;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        dst[oy * out_w + ox] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                                   ? img[(c * H + iy) * W + ix]
                                                   : T(0);
                    }
                }
            }
}

template <typename T>
inline void col2im_add(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                       int out_h, int out_w, T* img) {
    for (int c = 0; c < C; ++c)
        for (int ky = 0; ky < kh; ++ky)
            for (int kx = 0; kx < kw; ++kx) {
                const T* src = col + ((c * kh + ky) * kw + kx) * int64_t(out_h) * out_w;
                for (int oy = 0; oy < out_h; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < out_w; ++ox) {
                        const int ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < W) img[(c * H + iy) * W + ix] += src[oy * out_w + ox];
                    }
                }
            }
}

// 2-D convolution, NCHW. weight is (out_c, in_c, kh, kw), bias (out_c).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int pad) {
    if (x.shape().size() != 4 || weight.shape().size() != 4)
        throw std::invalid_argument("conv2d: need NCHW input and OIHW weight");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int OC = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
    if (weight.dim(1) != C) throw std::invalid_argument("conv2d: channel mismatch");
    const int out_h = (H + 2 * pad - kh) / stride + 1;
    const int out_w = (W + 2 * pad - kw) / stride + 1;
    if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("conv2d: input smaller than kernel");
    const int K = C * kh * kw;
    const int64_t P = int64_t(out_h) * out_w;

    auto out = Tensor<T>::make(
        {N, OC, out_h, out_w}, {x.node(), weight.node(), bias.node()},
        [=](auto& nd) {
            auto& px = *nd.parents[0];
            auto& pw = *nd.parents[1];
            auto& pb = *nd.parents[2];
            std::vector<T> col(size_t(K) * size_t(P));
            std::vector<T> dcol(size_t(K) * size_t(P));
            ECMap<T> Wm(pw.data.data(), OC, K);
            for (int n = 0; n < N; ++n) {
                const T* xi = px.data.data() + int64_t(n) * C * H * W;
                const T* go = nd.grad.data() + int64_t(n) * OC * P;
                im2col(xi, C, H, W, kh, kw, stride, pad, out_h, out_w, col.data());
                ECMap<T> G(go, OC, int(P));
                ECMap<T> Col(col.data(), K, int(P));
                EMap<T>(pw.grad.data(), OC, K).noalias() += G * Col.transpose();
                EMap<T>(dcol.data(), K, int(P)).noalias() = Wm.transpose() * G;
                col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, out_h, out_w,
                           px.grad.data() + int64_t(n) * C * H * W);
                for (int oc = 0; oc < OC; ++oc) {
                    T acc = T(0);
                    for (int64_t p = 0; p < P; ++p) acc += go[oc * P + p];
                    pb.grad[size_t(oc)] += acc;
                }
            }
        });

    std::vector<T> col(size_t(K) * size_t(P));
    ECMap<T> Wm(weight.data().data(), OC, K);
    for (int n = 0; n < N; ++n) {
        const T* xi = x.data().data() + int64_t(n) * C * H * W;
        T* yo = out.data().data() + int64_t(n) * OC * P;
        im2col(xi, C, H, W, kh, kw, stride, pad, out_h, out_w, col.data());
        ECMap<T> Col(col.data(), K, int(P));
        EMap<T>(yo, OC, int(P)).noalias() = Wm * Col;
        for (int oc = 0; oc < OC; ++oc)
            for (int64_t p = 0; p < P; ++p) yo[oc * P + p] += bias.data()[size_t(oc)];
    }
    return out;
}

// GroupNorm over NCHW with learnable per-channel gain/bias.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int groups, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (C % groups != 0) throw std::invalid_argument("group_norm: C not divisible by groups");
    const int cpg = C / groups;
    const int64_t gsz = int64_t(cpg) * H * W;
    auto out = Tensor<T>::make(
        x.shape(), {x.node(), gain.node(), bias.node()}, [=](auto& nd) {
            auto& px = *nd.parents[0];
            auto& pg = *nd.parents[1];
            auto& pb = *nd.parents[2];
            for (int n = 0; n < N; ++n)
                for (int g = 0; g < groups; ++g) {
                    const int64_t base = (int64_t(n) * C + int64_t(g) * cpg) * H * W;
                    const T* xd = px.data.data() + base;
                    const T* gd = nd.grad.data() + base;
                    T mean = T(0), var = T(0);
                    for (int64_t i = 0; i < gsz; ++i) mean += xd[i];
                    mean /= T(gsz);
                    for (int64_t i = 0; i < gsz; ++i) var += (xd[i] - mean) * (xd[i] - mean);
                    var /= T(gsz);
                    const T inv = T(1) / std::sqrt(var + eps);
                    T s1 = T(0), s2 = T(0);
                    for (int64_t i = 0; i < gsz; ++i) {
                        const int c = g * cpg + int(i / (int64_t(H) * W));
                        const T xhat = (xd[i] - mean) * inv;
                        const T dxh = gd[i] * pg.data[size_t(c)];
                        s1 += dxh;
                        s2 += dxh * xhat;
                        pg.grad[size_t(c)] += gd[i] * xhat;
                        pb.grad[size_t(c)] += gd[i];
                    }
                    T* pxg = px.grad.data() + base;
                    for (int64_t i = 0; i < gsz; ++i) {
                        const int c = g * cpg + int(i / (int64_t(H) * W));
                        const T xhat = (xd[i] - mean) * inv;
                        const T dxh = gd[i] * pg.data[size_t(c)];
                        pxg[i] += inv / T(gsz) * (T(gsz) * dxh - s1 - xhat * s2);
                    }
                }
        });
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            const int64_t base = (int64_t(n) * C + int64_t(g) * cpg) * H * W;
            const T* xd = x.data().data() + base;
            T* yd = out.data().data() + base;
            T mean = T(0), var = T(0);
            for (int64_t i = 0; i < gsz; ++i) mean += xd[i];
            mean /= T(gsz);
            for (int64_t i = 0; i < gsz; ++i) var += (xd[i] - mean) * (xd[i] - mean);
            var /= T(gsz);
            const T inv = T(1) / std::sqrt(var + eps);
            for (int64_t i = 0; i < gsz; ++i) {
                const int c = g * cpg + int(i / (int64_t(H) * W));
                yd[i] = (xd[i] - mean) * inv * gain.data()[size_t(c)] + bias.data()[size_t(c)];
            }
        }
    return out;
}

template <typename T>
Tensor<T> nearest_upsample2x(const Tensor<T>& x) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    auto out = Tensor<T>::make({N, C, H * 2, W * 2}, {x.node()}, [=](auto& nd) {
        auto& px = *nd.parents[0];
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < 2 * H; ++y)
                    for (int xx = 0; xx < 2 * W; ++xx)
                        px.grad[((int64_t(n) * C + c) * H + y / 2) * W + xx / 2] +=
                            nd.grad[((int64_t(n) * C + c) * 2 * H + y) * 2 * W + xx];
    });
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < 2 * H; ++y)
                for (int xx = 0; xx < 2 * W; ++xx)
                    out.data()[((int64_t(n) * C + c) * 2 * H + y) * 2 * W + xx] =
                        x.data()[((int64_t(n) * C + c) * H + y / 2) * W + xx / 2];
    return out;
}

// Concatenate along the channel axis (NCHW).
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    const int N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    if (b.dim(0) != N || b.dim(2) != H || b.dim(3) != W)
        throw std::invalid_argument("concat_channels: spatial/batch mismatch");
    const int64_t plane = int64_t(H) * W;
    auto out = Tensor<T>::make({N, Ca + Cb, H, W}, {a.node(), b.node()}, [=](auto& nd) {
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        for (int n = 0; n < N; ++n) {
            const T* g = nd.grad.data() + int64_t(n) * (Ca + Cb) * plane;
            for (int64_t i = 0; i < Ca * plane; ++i) pa.grad[int64_t(n) * Ca * plane + i] += g[i];
            for (int64_t i = 0; i < Cb * plane; ++i)
                pb.grad[int64_t(n) * Cb * plane + i] += g[Ca * plane + i];
        }
    });
    for (int n = 0; n < N; ++n) {
        T* y = out.data().data() + int64_t(n) * (Ca + Cb) * plane;
        std::copy(a.data().begin() + int64_t(n) * Ca * plane,
                  a.data().begin() + int64_t(n + 1) * Ca * plane, y);
        std::copy(b.data().begin() + int64_t(n) * Cb * plane,
                  b.data().begin() + int64_t(n + 1) * Cb * plane, y + Ca * plane);
    }
    return out;
}

// Feature-wise affine: out = (1 + gamma) * x + beta, gamma/beta are (N, C).
template <typename T>
Tensor<T> film_modulate(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (numel(gamma.shape()) != int64_t(N) * C || numel(beta.shape()) != int64_t(N) * C)
        throw std::invalid_argument("film_modulate: gamma/beta must be (N, C)");
    const int64_t plane = int64_t(H) * W;
    auto out = Tensor<T>::make(
        x.shape(), {x.node(), gamma.node(), beta.node()}, [=](auto& nd) {
            auto& px = *nd.parents[0];
            auto& pg = *nd.parents[1];
            auto& pb = *nd.parents[2];
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const int64_t base = (int64_t(n) * C + c) * plane;
                    const T g1 = T(1) + pg.data[size_t(n * C + c)];
                    T dg = T(0), db = T(0);
                    for (int64_t i = 0; i < plane; ++i) {
                        const T go = nd.grad[base + i];
                        px.grad[base + i] += go * g1;
                        dg += go * px.data[base + i];
                        db += go;
                    }
                    pg.grad[size_t(n * C + c)] += dg;
                    pb.grad[size_t(n * C + c)] += db;
                }
        });
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const int64_t base = (int64_t(n) * C + c) * plane;
            const T g1 = T(1) + gamma.data()[size_t(n * C + c)];
            const T b = beta.data()[size_t(n * C + c)];
            for (int64_t i = 0; i < plane; ++i) out.data()[base + i] = g1 * x.data()[base + i] + b;
        }
    return out;
}

}  // namespace vlmir
