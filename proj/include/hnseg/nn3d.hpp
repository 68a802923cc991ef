#pragma once

#include "hnseg/tensor.hpp"

namespace hnseg {

namespace detail {

// zero-padded copy of x [C,X,Y,Z] -> [C,X+2p,Y+2p,Z+2p]
template <typename T>
std::vector<T> pad3d(const T* x, int64_t C, int64_t X, int64_t Y, int64_t Z, int64_t p) {
    const int64_t Xp = X + 2 * p, Yp = Y + 2 * p, Zp = Z + 2 * p;
    std::vector<T> out(size_t(C * Xp * Yp * Zp), T(0));
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t i = 0; i < X; ++i) {
            for (int64_t j = 0; j < Y; ++j) {
                const T* src = x + ((c * X + i) * Y + j) * Z;
                T* dst = out.data() + ((c * Xp + i + p) * Yp + j + p) * Zp + p;
                std::copy(src, src + Z, dst);
            }
        }
    }
    return out;
}

}  // namespace detail

// Cross-correlation (no kernel flip). x: [Ci,X,Y,Z], w: [Co,Ci,K,K,K], bias: [Co].
// stride in {1,2}; output dims (X+2p-K)/stride + 1.
template <typename T>
Tensor<T> conv3d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 int64_t stride, int64_t pad) {
    detail::check(x.rank() == 4 && w.rank() == 5, "conv3d: rank");
    const int64_t Ci = x.dim(0), X = x.dim(1), Y = x.dim(2), Z = x.dim(3);
    const int64_t Co = w.dim(0), K = w.dim(2);
    detail::check(w.dim(1) == Ci && w.dim(3) == K && w.dim(4) == K, "conv3d: kernel shape");
    detail::check(bias.rank() == 1 && bias.dim(0) == Co, "conv3d: bias shape");
    detail::check(stride == 1 || stride == 2, "conv3d: stride must be 1 or 2");
    const int64_t OX = (X + 2 * pad - K) / stride + 1;
    const int64_t OY = (Y + 2 * pad - K) / stride + 1;
    const int64_t OZ = (Z + 2 * pad - K) / stride + 1;
    detail::check(OX >= 1 && OY >= 1 && OZ >= 1, "conv3d: kernel larger than padded input");

    const int64_t Xp = X + 2 * pad, Yp = Y + 2 * pad, Zp = Z + 2 * pad;
    auto xp = detail::pad3d(x.data(), Ci, X, Y, Z, pad);

    Tensor<T> out = Tensor<T>::zeros({Co, OX, OY, OZ});
    const T* wv = w.data();
#pragma omp parallel for schedule(static)
    for (int64_t co = 0; co < Co; ++co) {
        T* o = out.data() + co * OX * OY * OZ;
        const T b = bias.data()[co];
        for (int64_t ox = 0; ox < OX; ++ox) {
            for (int64_t oy = 0; oy < OY; ++oy) {
                for (int64_t oz = 0; oz < OZ; ++oz) {
                    T acc = b;
                    for (int64_t ci = 0; ci < Ci; ++ci) {
                        const T* wc = wv + ((co * Ci + ci) * K) * K * K;
                        const T* xc = xp.data() + ci * Xp * Yp * Zp;
                        for (int64_t kx = 0; kx < K; ++kx) {
                            for (int64_t ky = 0; ky < K; ++ky) {
                                const T* xrow = xc + ((ox * stride + kx) * Yp +
                                                      (oy * stride + ky)) * Zp + oz * stride;
                                const T* wrow = wc + (kx * K + ky) * K;
                                for (int64_t kz = 0; kz < K; ++kz) {
                                    acc += xrow[kz] * wrow[kz];
                                }
                            }
                        }
                    }
                    o[(ox * OY + oy) * OZ + oz] = acc;
                }
            }
        }
    }

    if (detail::track(tape, {&x, &w, &bias})) {
        out.set_requires_grad(true);
        auto xp_saved = std::make_shared<std::vector<T>>(std::move(xp));
        tape.record([x, w, bias, out, xp_saved, Ci, X, Y, Z, Co, K, OX, OY, OZ, stride,
                     pad]() mutable {
            if (!out.grad_allocated()) return;
            const T* gy = out.grad_data();
            const int64_t Xp = X + 2 * pad, Yp = Y + 2 * pad, Zp = Z + 2 * pad;
            if (bias.requires_grad()) {
                T* gb = bias.grad_data();
                for (int64_t co = 0; co < Co; ++co) {
                    double acc = 0.0;
                    const T* g = gy + co * OX * OY * OZ;
                    for (int64_t i = 0; i < OX * OY * OZ; ++i) acc += double(g[i]);
                    gb[co] += T(acc);
                }
            }
            if (w.requires_grad()) {
                T* gw = w.grad_data();
                const std::vector<T>& xpv = *xp_saved;
#pragma omp parallel for schedule(static)
                for (int64_t co = 0; co < Co; ++co) {
                    const T* g = gy + co * OX * OY * OZ;
                    for (int64_t ci = 0; ci < Ci; ++ci) {
                        const T* xc = xpv.data() + ci * Xp * Yp * Zp;
                        for (int64_t kx = 0; kx < K; ++kx) {
                            for (int64_t ky = 0; ky < K; ++ky) {
                                for (int64_t kz = 0; kz < K; ++kz) {
                                    T acc = T(0);
                                    for (int64_t ox = 0; ox < OX; ++ox) {
                                        for (int64_t oy = 0; oy < OY; ++oy) {
                                            const T* xrow = xc + ((ox * stride + kx) * Yp +
                                                                  (oy * stride + ky)) * Zp + kz;
                                            const T* grow = g + (ox * OY + oy) * OZ;
                                            for (int64_t oz = 0; oz < OZ; ++oz) {
                                                acc += grow[oz] * xrow[oz * stride];
                                            }
                                        }
                                    }
                                    gw[(((co * Ci + ci) * K + kx) * K + ky) * K + kz] += acc;
                                }
                            }
                        }
                    }
                }
            }
            if (x.requires_grad()) {
                std::vector<T> gxp(size_t(Ci * Xp * Yp * Zp), T(0));
                const T* wv = w.data();
#pragma omp parallel for schedule(static)
                for (int64_t ci = 0; ci < Ci; ++ci) {
                    T* gc = gxp.data() + ci * Xp * Yp * Zp;
                    for (int64_t co = 0; co < Co; ++co) {
                        const T* g = gy + co * OX * OY * OZ;
                        const T* wc = wv + ((co * Ci + ci) * K) * K * K;
                        for (int64_t ox = 0; ox < OX; ++ox) {
                            for (int64_t oy = 0; oy < OY; ++oy) {
                                for (int64_t oz = 0; oz < OZ; ++oz) {
                                    const T gval = g[(ox * OY + oy) * OZ + oz];
                                    if (gval == T(0)) continue;
                                    for (int64_t kx = 0; kx < K; ++kx) {
                                        for (int64_t ky = 0; ky < K; ++ky) {
                                            T* grow = gc + ((ox * stride + kx) * Yp +
                                                            (oy * stride + ky)) * Zp + oz * stride;
                                            const T* wrow = wc + (kx * K + ky) * K;
                                            for (int64_t kz = 0; kz < K; ++kz) {
                                                grow[kz] += gval * wrow[kz];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                // strip padding back off
                T* gx = x.grad_data();
                for (int64_t ci = 0; ci < Ci; ++ci) {
                    for (int64_t i = 0; i < X; ++i) {
                        for (int64_t j = 0; j < Y; ++j) {
                            const T* src = gxp.data() +
                                           ((ci * Xp + i + pad) * Yp + j + pad) * Zp + pad;
                            T* dst = gx + ((ci * X + i) * Y + j) * Z;
                            for (int64_t kz = 0; kz < Z; ++kz) dst[kz] += src[kz];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Stride-2 kernel-2 transpose convolution: doubles each spatial dim.
// x: [Ci,X,Y,Z], w: [Ci,Co,2,2,2], bias: [Co] -> [Co,2X,2Y,2Z].
template <typename T>
Tensor<T> conv_transpose3d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w,
                           const Tensor<T>& bias) {
    detail::check(x.rank() == 4 && w.rank() == 5, "conv_transpose3d: rank");
    const int64_t Ci = x.dim(0), X = x.dim(1), Y = x.dim(2), Z = x.dim(3);
    detail::check(w.dim(0) == Ci && w.dim(2) == 2 && w.dim(3) == 2 && w.dim(4) == 2,
                  "conv_transpose3d: kernel shape");
    const int64_t Co = w.dim(1);
    detail::check(bias.rank() == 1 && bias.dim(0) == Co, "conv_transpose3d: bias shape");
    const int64_t OX = 2 * X, OY = 2 * Y, OZ = 2 * Z;

    Tensor<T> out = Tensor<T>::zeros({Co, OX, OY, OZ});
    const T* wv = w.data();
#pragma omp parallel for schedule(static)
    for (int64_t co = 0; co < Co; ++co) {
        T* o = out.data() + co * OX * OY * OZ;
        const T b = bias.data()[co];
        for (int64_t i = 0; i < OX * OY * OZ; ++i) o[i] = b;
        for (int64_t ci = 0; ci < Ci; ++ci) {
            const T* xc = x.data() + ci * X * Y * Z;
            const T* wc = wv + (ci * Co + co) * 8;
            for (int64_t ix = 0; ix < X; ++ix) {
                for (int64_t iy = 0; iy < Y; ++iy) {
                    for (int64_t iz = 0; iz < Z; ++iz) {
                        const T v = xc[(ix * Y + iy) * Z + iz];
                        if (v == T(0)) continue;
                        for (int64_t a = 0; a < 2; ++a) {
                            for (int64_t bb = 0; bb < 2; ++bb) {
                                T* orow = o + ((2 * ix + a) * OY + 2 * iy + bb) * OZ + 2 * iz;
                                const T* wrow = wc + (a * 2 + bb) * 2;
                                orow[0] += v * wrow[0];
                                orow[1] += v * wrow[1];
                            }
                        }
                    }
                }
            }
        }
    }

    if (detail::track(tape, {&x, &w, &bias})) {
        out.set_requires_grad(true);
        tape.record([x, w, bias, out, Ci, X, Y, Z, Co, OX, OY, OZ]() mutable {
            if (!out.grad_allocated()) return;
            const T* gy = out.grad_data();
            if (bias.requires_grad()) {
                T* gb = bias.grad_data();
                for (int64_t co = 0; co < Co; ++co) {
                    double acc = 0.0;
                    const T* g = gy + co * OX * OY * OZ;
                    for (int64_t i = 0; i < OX * OY * OZ; ++i) acc += double(g[i]);
                    gb[co] += T(acc);
                }
            }
            if (x.requires_grad()) {
                T* gx = x.grad_data();
                const T* wv = w.data();
#pragma omp parallel for schedule(static)
                for (int64_t ci = 0; ci < Ci; ++ci) {
                    T* gc = gx + ci * X * Y * Z;
                    for (int64_t co = 0; co < Co; ++co) {
                        const T* g = gy + co * OX * OY * OZ;
                        const T* wc = wv + (ci * Co + co) * 8;
                        for (int64_t ix = 0; ix < X; ++ix) {
                            for (int64_t iy = 0; iy < Y; ++iy) {
                                for (int64_t iz = 0; iz < Z; ++iz) {
                                    T acc = T(0);
                                    for (int64_t a = 0; a < 2; ++a) {
                                        for (int64_t bb = 0; bb < 2; ++bb) {
                                            const T* grow = g + ((2 * ix + a) * OY + 2 * iy + bb) *
                                                                    OZ + 2 * iz;
                                            const T* wrow = wc + (a * 2 + bb) * 2;
                                            acc += grow[0] * wrow[0] + grow[1] * wrow[1];
                                        }
                                    }
                                    gc[(ix * Y + iy) * Z + iz] += acc;
                                }
                            }
                        }
                    }
                }
            }
            if (w.requires_grad()) {
                T* gw = w.grad_data();
#pragma omp parallel for schedule(static)
                for (int64_t ci = 0; ci < Ci; ++ci) {
                    const T* xc = x.data() + ci * X * Y * Z;
                    for (int64_t co = 0; co < Co; ++co) {
                        const T* g = gy + co * OX * OY * OZ;
                        T* wc = gw + (ci * Co + co) * 8;
                        for (int64_t a = 0; a < 2; ++a) {
                            for (int64_t bb = 0; bb < 2; ++bb) {
                                for (int64_t cc = 0; cc < 2; ++cc) {
                                    T acc = T(0);
                                    for (int64_t ix = 0; ix < X; ++ix) {
                                        for (int64_t iy = 0; iy < Y; ++iy) {
                                            const T* xrow = xc + (ix * Y + iy) * Z;
                                            const T* grow = g + ((2 * ix + a) * OY + 2 * iy + bb) *
                                                                    OZ + cc;
                                            for (int64_t iz = 0; iz < Z; ++iz) {
                                                acc += xrow[iz] * grow[2 * iz];
                                            }
                                        }
                                    }
                                    wc[(a * 2 + bb) * 2 + cc] += acc;
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// Per-channel spatial normalization. x: [C,X,Y,Z], gain/bias: [C].
template <typename T>
Tensor<T> instance_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain,
                        const Tensor<T>& bias, T eps = T(1e-5)) {
    detail::check(x.rank() == 4, "instance_norm: rank");
    const int64_t C = x.dim(0);
    const int64_t N = x.dim(1) * x.dim(2) * x.dim(3);
    detail::check(gain.rank() == 1 && gain.dim(0) == C && bias.rank() == 1 && bias.dim(0) == C,
                  "instance_norm: gain/bias shape");

    Tensor<T> out = Tensor<T>::zeros(x.shape());
    Tensor<T> xhat = Tensor<T>::zeros(x.shape());
    std::vector<T> inv_std(size_t(C), T(0));
    for (int64_t c = 0; c < C; ++c) {
        const T* xc = x.data() + c * N;
        double mu = 0.0;
        for (int64_t i = 0; i < N; ++i) mu += double(xc[i]);
        mu /= double(N);
        double var = 0.0;
        for (int64_t i = 0; i < N; ++i) {
            double d = double(xc[i]) - mu;
            var += d * d;
        }
        var /= double(N);
        T istd = T(1.0 / std::sqrt(var + double(eps)));
        inv_std[size_t(c)] = istd;
        T* hc = xhat.data() + c * N;
        T* oc = out.data() + c * N;
        const T g = gain.data()[c], b = bias.data()[c];
        for (int64_t i = 0; i < N; ++i) {
            hc[i] = (xc[i] - T(mu)) * istd;
            oc[i] = hc[i] * g + b;
        }
    }
    if (detail::track(tape, {&x, &gain, &bias})) {
        out.set_requires_grad(true);
        tape.record([x, gain, bias, out, xhat, inv_std, C, N]() mutable {
            if (!out.grad_allocated()) return;
            const T* gy = out.grad_data();
            for (int64_t c = 0; c < C; ++c) {
                const T* gyc = gy + c * N;
                const T* hc = xhat.data() + c * N;
                if (gain.requires_grad()) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < N; ++i) acc += double(gyc[i]) * double(hc[i]);
                    gain.grad_data()[c] += T(acc);
                }
                if (bias.requires_grad()) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < N; ++i) acc += double(gyc[i]);
                    bias.grad_data()[c] += T(acc);
                }
                if (x.requires_grad()) {
                    const double g = double(gain.data()[c]);
                    double sum_g = 0.0, sum_gh = 0.0;
                    for (int64_t i = 0; i < N; ++i) {
                        sum_g += double(gyc[i]);
                        sum_gh += double(gyc[i]) * double(hc[i]);
                    }
                    sum_g /= double(N);
                    sum_gh /= double(N);
                    T* gxc = x.grad_data() + c * N;
                    const double istd = double(inv_std[size_t(c)]);
                    for (int64_t i = 0; i < N; ++i) {
                        gxc[i] += T(g * istd *
                                    (double(gyc[i]) - sum_g - double(hc[i]) * sum_gh));
                    }
                }
            }
        });
    }
    return out;
}

// x: [C,X,Y,Z] -> [Nt, C*p^3]; token order has the patch x index fastest,
// patch interior flattened [c][dx][dy][dz].
template <typename T>
Tensor<T> extract_patches(Tape<T>& tape, const Tensor<T>& x, int64_t p) {
    detail::check(x.rank() == 4, "extract_patches: rank");
    const int64_t C = x.dim(0), X = x.dim(1), Y = x.dim(2), Z = x.dim(3);
    detail::check(X % p == 0 && Y % p == 0 && Z % p == 0,
                  "extract_patches: dims not divisible by patch size");
    const int64_t Px = X / p, Py = Y / p, Pz = Z / p;
    const int64_t Nt = Px * Py * Pz;
    const int64_t D = C * p * p * p;

    Tensor<T> out = Tensor<T>::zeros({Nt, D});
#pragma omp parallel for schedule(static)
    for (int64_t t = 0; t < Nt; ++t) {
        const int64_t px = t % Px;
        const int64_t py = (t / Px) % Py;
        const int64_t pz = t / (Px * Py);
        T* row = out.data() + t * D;
        for (int64_t c = 0; c < C; ++c) {
            for (int64_t dx = 0; dx < p; ++dx) {
                for (int64_t dy = 0; dy < p; ++dy) {
                    const T* src = x.data() +
                                   ((c * X + px * p + dx) * Y + py * p + dy) * Z + pz * p;
                    T* dst = row + ((c * p + dx) * p + dy) * p;
                    for (int64_t dz = 0; dz < p; ++dz) dst[dz] = src[dz];
                }
            }
        }
    }
    if (detail::track(tape, {&x})) {
        out.set_requires_grad(true);
        tape.record([x, out, C, X, Y, Z, p, Px, Py, Pz, Nt, D]() mutable {
            if (!out.grad_allocated() || !x.requires_grad()) return;
            const T* gy = out.grad_data();
            T* gx = x.grad_data();
            // every input element lives in exactly one patch
#pragma omp parallel for schedule(static)
            for (int64_t t = 0; t < Nt; ++t) {
                const int64_t px = t % Px;
                const int64_t py = (t / Px) % Py;
                const int64_t pz = t / (Px * Py);
                const T* row = gy + t * D;
                for (int64_t c = 0; c < C; ++c) {
                    for (int64_t dx = 0; dx < p; ++dx) {
                        for (int64_t dy = 0; dy < p; ++dy) {
                            T* dst = gx + ((c * X + px * p + dx) * Y + py * p + dy) * Z + pz * p;
                            const T* src = row + ((c * p + dx) * p + dy) * p;
                            for (int64_t dz = 0; dz < p; ++dz) dst[dz] += src[dz];
                        }
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace hnseg
