#pragma once

#include <cstring>
#include <optional>
#include <vector>

#include "prfnet/ops.hpp"
#include "prfnet/winograd.hpp"

namespace prfnet {

namespace detail {

// col is K x (N*OH*OW) row-major, K = Cin*kh*kw, columns ordered image-major.
template <typename T>
void im2col(const T* x, int64_t n, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw,
            int64_t stride, int64_t pad, int64_t oh, int64_t ow, T* col) {
    const int64_t ohw = oh * ow;
    const int64_t ncols = n * ohw;
    for (int64_t c = 0; c < cin; ++c) {
        for (int64_t ki = 0; ki < kh; ++ki) {
            for (int64_t kj = 0; kj < kw; ++kj) {
                const int64_t k = (c * kh + ki) * kw + kj;
                T* dst_row = col + k * ncols;
                for (int64_t in = 0; in < n; ++in) {
                    const T* src = x + (in * cin + c) * h * w;
                    T* dst = dst_row + in * ohw;
                    for (int64_t i = 0; i < oh; ++i) {
                        const int64_t ih = i * stride - pad + ki;
                        if (ih < 0 || ih >= h) {
                            for (int64_t j = 0; j < ow; ++j) dst[i * ow + j] = T(0);
                            continue;
                        }
                        const T* row = src + ih * w;
                        if (stride == 1 && kj >= pad && kj - pad + ow <= w) {
                            std::copy_n(row + kj - pad, ow, dst + i * ow);
                        } else {
                            for (int64_t j = 0; j < ow; ++j) {
                                const int64_t iw = j * stride - pad + kj;
                                dst[i * ow + j] = (iw < 0 || iw >= w) ? T(0) : row[iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

// Scatter-add of the col-shaped gradient back onto the input gradient.
template <typename T>
void col2im_add(const T* col, int64_t n, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t oh, int64_t ow, T* gx) {
    const int64_t ohw = oh * ow;
    const int64_t ncols = n * ohw;
    for (int64_t c = 0; c < cin; ++c) {
        for (int64_t ki = 0; ki < kh; ++ki) {
            for (int64_t kj = 0; kj < kw; ++kj) {
                const int64_t k = (c * kh + ki) * kw + kj;
                const T* src_row = col + k * ncols;
                for (int64_t in = 0; in < n; ++in) {
                    T* dst = gx + (in * cin + c) * h * w;
                    const T* src = src_row + in * ohw;
                    for (int64_t i = 0; i < oh; ++i) {
                        const int64_t ih = i * stride - pad + ki;
                        if (ih < 0 || ih >= h) continue;
                        T* row = dst + ih * w;
                        if (stride == 1 && kj >= pad && kj - pad + ow <= w) {
                            const T* s = src + i * ow;
                            T* d = row + kj - pad;
                            for (int64_t j = 0; j < ow; ++j) d[j] += s[j];
                        } else {
                            for (int64_t j = 0; j < ow; ++j) {
                                const int64_t iw = j * stride - pad + kj;
                                if (iw >= 0 && iw < w) row[iw] += src[i * ow + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

// out[n,co,p] <- mat[co, n*ohw + p]
template <typename T>
void scatter_from_mat(const T* mat, int64_t n, int64_t cout, int64_t ohw, T* out) {
    for (int64_t in = 0; in < n; ++in)
        for (int64_t co = 0; co < cout; ++co)
            std::copy_n(mat + co * n * ohw + in * ohw, ohw, out + (in * cout + co) * ohw);
}

// mat[co, n*ohw + p] <- g[n,co,p]
template <typename T>
void gather_to_mat(const T* g, int64_t n, int64_t cout, int64_t ohw, T* mat) {
    for (int64_t in = 0; in < n; ++in)
        for (int64_t co = 0; co < cout; ++co)
            std::copy_n(g + (in * cout + co) * ohw, ohw, mat + co * n * ohw + in * ohw);
}

// ---------------------------------------------------------------------------
// Direct kernels for 3x3/pad-1 convolutions over few channels (the Res2Net
// group convs). im2col traffic dwarfs the arithmetic there; these stream the
// input once with vectorizable inner loops.
// ---------------------------------------------------------------------------

template <typename T>
void direct3x3_fwd(const T* x, const T* w, int64_t n, int64_t cin, int64_t h, int64_t wd,
                   int64_t cout, int64_t stride, int64_t oh, int64_t ow, T* out) {
    for (int64_t in = 0; in < n; ++in) {
        for (int64_t co = 0; co < cout; ++co) {
            T* o = out + (in * cout + co) * oh * ow;
            std::memset(o, 0, static_cast<size_t>(oh * ow) * sizeof(T));
            for (int64_t ci = 0; ci < cin; ++ci) {
                const T* xc = x + (in * cin + ci) * h * wd;
                const T* wk = w + (co * cin + ci) * 9;
                for (int64_t i = 0; i < oh; ++i) {
                    T* orow = o + i * ow;
                    for (int64_t ki = 0; ki < 3; ++ki) {
                        const int64_t ih = i * stride + ki - 1;
                        if (ih < 0 || ih >= h) continue;
                        const T* xr = xc + ih * wd;
                        const T w0 = wk[ki * 3], w1 = wk[ki * 3 + 1], w2 = wk[ki * 3 + 2];
                        if (stride == 1) {
                            orow[0] += w1 * xr[0] + (ow > 1 ? w2 * xr[1] : T(0));
                            for (int64_t j = 1; j < ow - 1; ++j)
                                orow[j] += w0 * xr[j - 1] + w1 * xr[j] + w2 * xr[j + 1];
                            if (ow > 1) orow[ow - 1] += w0 * xr[ow - 2] + w1 * xr[ow - 1];
                        } else {
                            for (int64_t j = 0; j < ow; ++j) {
                                const int64_t base = j * stride;
                                T acc = w1 * xr[base];
                                if (base - 1 >= 0) acc += w0 * xr[base - 1];
                                if (base + 1 < wd) acc += w2 * xr[base + 1];
                                orow[j] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void direct3x3_bwd_data(const T* g, const T* w, int64_t n, int64_t cin, int64_t h, int64_t wd,
                        int64_t cout, int64_t stride, int64_t oh, int64_t ow, T* gx) {
    for (int64_t in = 0; in < n; ++in) {
        for (int64_t ci = 0; ci < cin; ++ci) {
            T* gxc = gx + (in * cin + ci) * h * wd;
            for (int64_t co = 0; co < cout; ++co) {
                const T* wk = w + (co * cin + ci) * 9;
                const T* gc = g + (in * cout + co) * oh * ow;
                for (int64_t i = 0; i < oh; ++i) {
                    const T* grow = gc + i * ow;
                    for (int64_t ki = 0; ki < 3; ++ki) {
                        const int64_t ih = i * stride + ki - 1;
                        if (ih < 0 || ih >= h) continue;
                        T* gxr = gxc + ih * wd;
                        const T w0 = wk[ki * 3], w1 = wk[ki * 3 + 1], w2 = wk[ki * 3 + 2];
                        if (stride == 1) {
                            gxr[0] += w1 * grow[0] + (ow > 1 ? w0 * grow[1] : T(0));
                            for (int64_t j = 1; j < ow - 1; ++j)
                                gxr[j] += w2 * grow[j - 1] + w1 * grow[j] + w0 * grow[j + 1];
                            if (ow > 1) gxr[ow - 1] += w2 * grow[ow - 2] + w1 * grow[ow - 1];
                        } else {
                            for (int64_t j = 0; j < ow; ++j) {
                                const int64_t base = j * stride;
                                gxr[base] += w1 * grow[j];
                                if (base - 1 >= 0) gxr[base - 1] += w0 * grow[j];
                                if (base + 1 < wd) gxr[base + 1] += w2 * grow[j];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void direct3x3_bwd_weights(const T* g, const T* x, int64_t n, int64_t cin, int64_t h, int64_t wd,
                           int64_t cout, int64_t stride, int64_t oh, int64_t ow, T* gw) {
    for (int64_t co = 0; co < cout; ++co) {
        for (int64_t ci = 0; ci < cin; ++ci) {
            T* gwk = gw + (co * cin + ci) * 9;
            for (int64_t ki = 0; ki < 3; ++ki) {
                for (int64_t kj = 0; kj < 3; ++kj) {
                    T acc = T(0);
                    for (int64_t in = 0; in < n; ++in) {
                        const T* gc = g + (in * cout + co) * oh * ow;
                        const T* xc = x + (in * cin + ci) * h * wd;
                        for (int64_t i = 0; i < oh; ++i) {
                            const int64_t ih = i * stride + ki - 1;
                            if (ih < 0 || ih >= h) continue;
                            const T* grow = gc + i * ow;
                            const T* xr = xc + ih * wd;
                            int64_t j0 = 0, j1 = ow;
                            if (stride == 1) {
                                if (kj == 0) j0 = 1;
                                if (kj == 2) j1 = ow - 1;
                                const T* xs = xr + kj - 1;
                                for (int64_t j = j0; j < j1; ++j) acc += grow[j] * xs[j];
                            } else {
                                for (int64_t j = 0; j < ow; ++j) {
                                    const int64_t iw = j * stride + kj - 1;
                                    if (iw >= 0 && iw < wd) acc += grow[j] * xr[iw];
                                }
                            }
                        }
                    }
                    gwk[ki * 3 + kj] += acc;
                }
            }
        }
    }
}

}  // namespace detail

// 2-d cross-correlation with zero padding, NCHW layout.
// x: N,Cin,H,W   w: Cout,Cin,kh,kw   b: optional Cout.
//
// Three execution paths, all bit-deterministic:
//   - 1x1 kernels: per-image GEMM straight on the activation layout.
//   - 3x3/pad-1 over few channels: direct streaming kernel.
//   - general: whole-batch im2col + one GEMM; the col matrix is kept for the
//     backward weight pass.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const std::optional<Tensor<T>>& b,
                 int64_t stride, int64_t pad) {
    using Scratch = typename Tensor<T>::Buffer;
    check<ShapeError>(x.shape().rank() == 4 && w.shape().rank() == 4,
                      "conv2d expects x:N,Cin,H,W w:Cout,Cin,kh,kw");
    check<ValueError>(stride >= 1, "conv2d needs stride >= 1, got ", stride);
    check<ValueError>(pad >= 0, "conv2d needs pad >= 0, got ", pad);
    const int64_t n = x.shape().dim(0), cin = x.shape().dim(1), h = x.shape().dim(2),
                  wd = x.shape().dim(3);
    const int64_t cout = w.shape().dim(0), kh = w.shape().dim(2), kw = w.shape().dim(3);
    check<ShapeError>(w.shape().dim(1) == cin, "conv2d channel mismatch: input Cin=", cin,
                      " kernel Cin=", w.shape().dim(1));
    check<ShapeError>(kh <= h + 2 * pad && kw <= wd + 2 * pad, "conv2d kernel ", kh, "x", kw,
                      " larger than padded input");
    if (b) {
        check<ShapeError>(b->shape().rank() == 1 && b->shape().dim(0) == cout,
                          "conv2d bias must be [Cout]=", cout);
    }
    const int64_t oh = detail::conv_extent(h, kh, stride, pad);
    const int64_t ow = detail::conv_extent(wd, kw, stride, pad);
    const int64_t ohw = oh * ow;
    const int64_t k = cin * kh * kw;

    const bool path_1x1 = (kh == 1 && kw == 1 && pad == 0 && stride == 1);
    const bool path_direct = (!path_1x1 && kh == 3 && kw == 3 && pad == 1 && cout <= 16 &&
                              cin <= 32 && (stride == 1 || stride == 2));
    const bool path_wino = (!path_1x1 && !path_direct && kh == 3 && kw == 3 && pad == 1 &&
                            stride == 1 && cin >= 32 && cout >= 32 && h % 2 == 0 && wd % 2 == 0);
    const int64_t tiles = path_wino ? (h / 2) * (wd / 2) : 0;
    const int64_t nt = n * tiles;

    Tensor<T> out = Tensor<T>::empty({n, cout, oh, ow});
    // col (general path) / v (Winograd) are moved into the closure so the
    // backward weight pass does not redo the input transform.
    std::shared_ptr<Scratch> col;
    std::shared_ptr<Scratch> vbuf;
    {
        PRFNET_PROF_SCOPE("conv.fwd");
        if (path_1x1) {
            for (int64_t in = 0; in < n; ++in)
                detail::gemm(false, false, static_cast<int>(cout), static_cast<int>(ohw),
                             static_cast<int>(cin), T(1), w.data(), static_cast<int>(cin),
                             x.data() + in * cin * ohw, static_cast<int>(ohw), T(0),
                             out.data() + in * cout * ohw, static_cast<int>(ohw));
        } else if (path_direct) {
            detail::direct3x3_fwd(x.data(), w.data(), n, cin, h, wd, cout, stride, oh, ow,
                                  out.data());
        } else if (path_wino) {
            vbuf = std::make_shared<Scratch>(static_cast<size_t>(16 * cin * nt));
            detail::wino_input_transform(x.data(), n, cin, h, wd, vbuf->data());
            Scratch u(static_cast<size_t>(16 * cout * cin));
            detail::wino_weight_transform(w.data(), cout, cin, u.data());
            Scratch m(static_cast<size_t>(16 * cout * nt));
            for (int64_t kk = 0; kk < 16; ++kk)
                detail::gemm(false, false, static_cast<int>(cout), static_cast<int>(nt),
                             static_cast<int>(cin), T(1), u.data() + kk * cout * cin,
                             static_cast<int>(cin), vbuf->data() + kk * cin * nt,
                             static_cast<int>(nt), T(0), m.data() + kk * cout * nt,
                             static_cast<int>(nt));
            detail::wino_output_transform(m.data(), n, cout, h, wd, out.data());
        } else {
            col = std::make_shared<Scratch>(static_cast<size_t>(k * n * ohw));
            detail::im2col(x.data(), n, cin, h, wd, kh, kw, stride, pad, oh, ow, col->data());
            Scratch tmp(static_cast<size_t>(cout * n * ohw));
            detail::gemm(false, false, static_cast<int>(cout), static_cast<int>(n * ohw),
                         static_cast<int>(k), T(1), w.data(), static_cast<int>(k), col->data(),
                         static_cast<int>(n * ohw), T(0), tmp.data(), static_cast<int>(n * ohw));
            detail::scatter_from_mat(tmp.data(), n, cout, ohw, out.data());
        }
        if (b) {
            T* po = out.data();
            const T* pb = b->data();
            for (int64_t in = 0; in < n; ++in)
                for (int64_t co = 0; co < cout; ++co) {
                    T* dst = po + (in * cout + co) * ohw;
                    const T bv = pb[co];
                    for (int64_t p = 0; p < ohw; ++p) dst[p] += bv;
                }
        }
    }

    const bool rec = Tape<T>::active() && (x.requires_grad() || w.requires_grad() ||
                                           (b && b->requires_grad()));
    if (rec) {
        Tensor<T> xi = x, wi = w;
        std::optional<Tensor<T>> bi = b;
        out.set_requires_grad(true);
        out.ensure_grad();
        if (xi.requires_grad()) xi.ensure_grad();
        if (wi.requires_grad()) wi.ensure_grad();
        if (bi && bi->requires_grad()) bi->ensure_grad();
        if (!wi.requires_grad()) {
            col.reset();
            vbuf.reset();
        }
        Tape<T>::active()->record([xi, wi, bi, out, col, vbuf, n, cin, h, wd, cout, kh, kw, stride,
                                   pad, oh, ow, ohw, k, nt, path_1x1, path_direct,
                                   path_wino]() mutable {
            PRFNET_PROF_SCOPE("conv.bwd");
            const T* g = out.grad();
            if (bi && bi->requires_grad()) {
                T* gb = bi->grad();
                for (int64_t in = 0; in < n; ++in)
                    for (int64_t co = 0; co < cout; ++co) {
                        const T* src = g + (in * cout + co) * ohw;
                        T acc = T(0);
                        for (int64_t p = 0; p < ohw; ++p) acc += src[p];
                        gb[co] += acc;
                    }
            }
            if (path_1x1) {
                for (int64_t in = 0; in < n; ++in) {
                    const T* g_n = g + in * cout * ohw;
                    if (wi.requires_grad())
                        detail::gemm(false, true, static_cast<int>(cout), static_cast<int>(cin),
                                     static_cast<int>(ohw), T(1), g_n, static_cast<int>(ohw),
                                     xi.data() + in * cin * ohw, static_cast<int>(ohw), T(1),
                                     wi.grad(), static_cast<int>(cin));
                    if (xi.requires_grad())
                        detail::gemm(true, false, static_cast<int>(cin), static_cast<int>(ohw),
                                     static_cast<int>(cout), T(1), wi.data(),
                                     static_cast<int>(cin), g_n, static_cast<int>(ohw), T(1),
                                     xi.grad() + in * cin * ohw, static_cast<int>(ohw));
                }
            } else if (path_direct) {
                if (wi.requires_grad())
                    detail::direct3x3_bwd_weights(g, xi.data(), n, cin, h, wd, cout, stride, oh,
                                                  ow, wi.grad());
                if (xi.requires_grad())
                    detail::direct3x3_bwd_data(g, wi.data(), n, cin, h, wd, cout, stride, oh, ow,
                                               xi.grad());
            } else if (path_wino) {
                using Scratch2 = typename Tensor<T>::Buffer;
                Scratch2 dm(static_cast<size_t>(16 * cout * nt));
                detail::wino_output_transform_adjoint(g, n, cout, h, wd, dm.data());
                if (wi.requires_grad()) {
                    if (!vbuf) {
                        vbuf = std::make_shared<Scratch2>(static_cast<size_t>(16 * cin * nt));
                        detail::wino_input_transform(xi.data(), n, cin, h, wd, vbuf->data());
                    }
                    Scratch2 du(static_cast<size_t>(16 * cout * cin));
                    for (int64_t kk = 0; kk < 16; ++kk)
                        detail::gemm(false, true, static_cast<int>(cout), static_cast<int>(cin),
                                     static_cast<int>(nt), T(1), dm.data() + kk * cout * nt,
                                     static_cast<int>(nt), vbuf->data() + kk * cin * nt,
                                     static_cast<int>(nt), T(0), du.data() + kk * cout * cin,
                                     static_cast<int>(cin));
                    detail::wino_weight_transform_adjoint(du.data(), cout, cin, wi.grad());
                }
                if (xi.requires_grad()) {
                    Scratch2 u(static_cast<size_t>(16 * cout * cin));
                    detail::wino_weight_transform(wi.data(), cout, cin, u.data());
                    Scratch2 dv(static_cast<size_t>(16 * cin * nt));
                    for (int64_t kk = 0; kk < 16; ++kk)
                        detail::gemm(true, false, static_cast<int>(cin), static_cast<int>(nt),
                                     static_cast<int>(cout), T(1), u.data() + kk * cout * cin,
                                     static_cast<int>(cin), dm.data() + kk * cout * nt,
                                     static_cast<int>(nt), T(0), dv.data() + kk * cin * nt,
                                     static_cast<int>(nt));
                    detail::wino_input_transform_adjoint(dv.data(), n, cin, h, wd, xi.grad());
                }
            } else {
                using Scratch2 = typename Tensor<T>::Buffer;
                Scratch2 gmat(static_cast<size_t>(cout * n * ohw));
                detail::gather_to_mat(g, n, cout, ohw, gmat.data());
                if (wi.requires_grad()) {
                    if (!col) {
                        col = std::make_shared<Scratch2>(static_cast<size_t>(k * n * ohw));
                        detail::im2col(xi.data(), n, cin, h, wd, kh, kw, stride, pad, oh, ow,
                                       col->data());
                    }
                    detail::gemm(false, true, static_cast<int>(cout), static_cast<int>(k),
                                 static_cast<int>(n * ohw), T(1), gmat.data(),
                                 static_cast<int>(n * ohw), col->data(),
                                 static_cast<int>(n * ohw), T(1), wi.grad(), static_cast<int>(k));
                }
                if (xi.requires_grad()) {
                    Scratch2 gcol(static_cast<size_t>(k * n * ohw));
                    detail::gemm(true, false, static_cast<int>(k), static_cast<int>(n * ohw),
                                 static_cast<int>(cout), T(1), wi.data(), static_cast<int>(k),
                                 gmat.data(), static_cast<int>(n * ohw), T(0), gcol.data(),
                                 static_cast<int>(n * ohw));
                    detail::col2im_add(gcol.data(), n, cin, h, wd, kh, kw, stride, pad, oh, ow,
                                       xi.grad());
                }
            }
        });
    }
    check_finite(out, "conv2d");
    return out;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int64_t stride, int64_t pad) {
    return conv2d(x, w, std::optional<Tensor<T>>{}, stride, pad);
}

}  // namespace prfnet
