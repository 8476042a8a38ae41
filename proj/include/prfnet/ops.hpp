#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "prfnet/blas.hpp"
#include "prfnet/prof.hpp"
#include "prfnet/tape.hpp"
#include "prfnet/tensor.hpp"

namespace prfnet {

namespace detail {

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
    if (!Tape<T>::active()) return false;
    for (const Tensor<T>* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

// Marks the output differentiable and pre-allocates grad buffers on the
// tensors that will receive gradient.
template <typename T>
void mark(Tensor<T>& out, std::initializer_list<Tensor<T>*> inputs) {
    out.set_requires_grad(true);
    out.ensure_grad();
    for (Tensor<T>* t : inputs)
        if (t->requires_grad()) t->ensure_grad();
}

inline int64_t conv_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pointwise and broadcast ops.
//
// Binary ops accept equal shapes, or rank-4 operands that agree on N,H,W
// where exactly one side has C == 1 (channel broadcast). That is the only
// broadcast the architecture needs (attention weight maps against feature
// maps); anything richer is rejected.
// ---------------------------------------------------------------------------

namespace detail {

enum class Bcast { None, LeftC1, RightC1 };

template <typename T>
Bcast binary_mode(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() == b.shape()) return Bcast::None;
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    bool rank4 = sa.rank() == 4 && sb.rank() == 4;
    if (rank4 && sa.dim(0) == sb.dim(0) && sa.dim(2) == sb.dim(2) && sa.dim(3) == sb.dim(3)) {
        if (sb.dim(1) == 1 && sa.dim(1) > 1) return Bcast::RightC1;
        if (sa.dim(1) == 1 && sb.dim(1) > 1) return Bcast::LeftC1;
    }
    throw ShapeError(cat("incompatible shapes ", sa.str(), " vs ", sb.str(),
                         " (equal shapes or C=1 channel broadcast only)"));
}

// Applies fn(a_val, b_val, flat_index_full, flat_index_reduced) over the
// broadcast pair; `reduced` walks the C==1 operand.
template <typename T, typename Fn>
void broadcast_walk(const Shape& full, Fn&& fn) {
    const int64_t n = full.dim(0), c = full.dim(1), h = full.dim(2), w = full.dim(3);
    const int64_t hw = h * w;
    int64_t fi = 0;
    for (int64_t in = 0; in < n; ++in) {
        for (int64_t ic = 0; ic < c; ++ic) {
            int64_t ri = in * hw;
            for (int64_t p = 0; p < hw; ++p, ++fi, ++ri) fn(fi, ri);
        }
    }
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    PRFNET_PROF_SCOPE("op.add");
    auto mode = detail::binary_mode(a, b);
    const Tensor<T>& full = (mode == detail::Bcast::LeftC1) ? b : a;
    Tensor<T> out = Tensor<T>::empty(full.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    if (mode == detail::Bcast::None) {
        for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
    } else if (mode == detail::Bcast::RightC1) {
        detail::broadcast_walk<T>(full.shape(), [&](int64_t fi, int64_t ri) { po[fi] = pa[fi] + pb[ri]; });
    } else {
        detail::broadcast_walk<T>(full.shape(), [&](int64_t fi, int64_t ri) { po[fi] = pa[ri] + pb[fi]; });
    }
    if (detail::recording<T>({&a, &b})) {
        Tensor<T> ai = a, bi = b;
        detail::mark(out, {&ai, &bi});
        Tape<T>::active()->record([ai, bi, out, mode]() mutable {
            const T* g = out.grad();
            if (ai.requires_grad()) {
                T* ga = ai.grad();
                if (mode == detail::Bcast::LeftC1)
                    detail::broadcast_walk<T>(out.shape(), [&](int64_t fi, int64_t ri) { ga[ri] += g[fi]; });
                else
                    for (int64_t i = 0; i < out.numel(); ++i) ga[i] += g[i];
            }
            if (bi.requires_grad()) {
                T* gb = bi.grad();
                if (mode == detail::Bcast::RightC1)
                    detail::broadcast_walk<T>(out.shape(), [&](int64_t fi, int64_t ri) { gb[ri] += g[fi]; });
                else
                    for (int64_t i = 0; i < out.numel(); ++i) gb[i] += g[i];
            }
        });
    }
    check_finite(out, "add");
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    PRFNET_PROF_SCOPE("op.sub");
    auto mode = detail::binary_mode(a, b);
    const Tensor<T>& full = (mode == detail::Bcast::LeftC1) ? b : a;
    Tensor<T> out = Tensor<T>::empty(full.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    if (mode == detail::Bcast::None) {
        for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
    } else if (mode == detail::Bcast::RightC1) {
        detail::broadcast_walk<T>(full.shape(), [&](int64_t fi, int64_t ri) { po[fi] = pa[fi] - pb[ri]; });
    } else {
        detail::broadcast_walk<T>(full.shape(), [&](int64_t fi, int64_t ri) { po[fi] = pa[ri] - pb[fi]; });
    }
    if (detail::recording<T>({&a, &b})) {
        Tensor<T> ai = a, bi = b;
        detail::mark(out, {&ai, &bi});
        Tape<T>::active()->record([ai, bi, out, mode]() mutable {
            const T* g = out.grad();
            if (ai.requires_grad()) {
                T* ga = ai.grad();
                if (mode == detail::Bcast::LeftC1)
                    detail::broadcast_walk<T>(out.shape(), [&](int64_t fi, int64_t ri) { ga[ri] += g[fi]; });
                else
                    for (int64_t i = 0; i < out.numel(); ++i) ga[i] += g[i];
            }
            if (bi.requires_grad()) {
                T* gb = bi.grad();
                if (mode == detail::Bcast::RightC1)
                    detail::broadcast_walk<T>(out.shape(), [&](int64_t fi, int64_t ri) { gb[ri] -= g[fi]; });
                else
                    for (int64_t i = 0; i < out.numel(); ++i) gb[i] -= g[i];
            }
        });
    }
    check_finite(out, "sub");
    return out;
}

template <typename T>
Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
    PRFNET_PROF_SCOPE("op.hadamard");
    auto mode = detail::binary_mode(a, b);
    const Tensor<T>& full = (mode == detail::Bcast::LeftC1) ? b : a;
    Tensor<T> out = Tensor<T>::empty(full.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    if (mode == detail::Bcast::None) {
        for (int64_t i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
    } else if (mode == detail::Bcast::RightC1) {
        detail::broadcast_walk<T>(full.shape(), [&](int64_t fi, int64_t ri) { po[fi] = pa[fi] * pb[ri]; });
    } else {
        detail::broadcast_walk<T>(full.shape(), [&](int64_t fi, int64_t ri) { po[fi] = pa[ri] * pb[fi]; });
    }
    if (detail::recording<T>({&a, &b})) {
        Tensor<T> ai = a, bi = b;
        detail::mark(out, {&ai, &bi});
        Tape<T>::active()->record([ai, bi, out, mode]() mutable {
            const T* g = out.grad();
            const T* pa2 = ai.data();
            const T* pb2 = bi.data();
            if (ai.requires_grad()) {
                T* ga = ai.grad();
                if (mode == detail::Bcast::None)
                    for (int64_t i = 0; i < out.numel(); ++i) ga[i] += g[i] * pb2[i];
                else if (mode == detail::Bcast::RightC1)
                    detail::broadcast_walk<T>(out.shape(),
                                              [&](int64_t fi, int64_t ri) { ga[fi] += g[fi] * pb2[ri]; });
                else
                    detail::broadcast_walk<T>(out.shape(),
                                              [&](int64_t fi, int64_t ri) { ga[ri] += g[fi] * pb2[fi]; });
            }
            if (bi.requires_grad()) {
                T* gb = bi.grad();
                if (mode == detail::Bcast::None)
                    for (int64_t i = 0; i < out.numel(); ++i) gb[i] += g[i] * pa2[i];
                else if (mode == detail::Bcast::RightC1)
                    detail::broadcast_walk<T>(out.shape(),
                                              [&](int64_t fi, int64_t ri) { gb[ri] += g[fi] * pa2[fi]; });
                else
                    detail::broadcast_walk<T>(out.shape(),
                                              [&](int64_t fi, int64_t ri) { gb[fi] += g[fi] * pa2[ri]; });
            }
        });
    }
    check_finite(out, "hadamard");
    return out;
}

// Subgradient at 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    PRFNET_PROF_SCOPE("op.relu");
    Tensor<T> out = Tensor<T>::empty(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (int64_t i = 0; i < x.numel(); ++i) po[i] = px[i] > T(0) ? px[i] : T(0);
    if (detail::recording<T>({&x})) {
        Tensor<T> xi = x;
        detail::mark(out, {&xi});
        Tape<T>::active()->record([xi, out]() mutable {
            const T* g = out.grad();
            const T* px2 = xi.data();
            T* gx = xi.grad();
            for (int64_t i = 0; i < out.numel(); ++i)
                if (px2[i] > T(0)) gx[i] += g[i];
        });
    }
    check_finite(out, "relu");
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    PRFNET_PROF_SCOPE("op.sigmoid");
    Tensor<T> out = Tensor<T>::empty(x.shape());
    const T* px = x.data();
    T* po = out.data();
    for (int64_t i = 0; i < x.numel(); ++i) {
        T v = px[i];
        if (v >= T(0)) {
            po[i] = T(1) / (T(1) + std::exp(-v));
        } else {
            T e = std::exp(v);
            po[i] = e / (T(1) + e);
        }
    }
    if (detail::recording<T>({&x})) {
        Tensor<T> xi = x;
        detail::mark(out, {&xi});
        Tape<T>::active()->record([xi, out]() mutable {
            const T* g = out.grad();
            const T* y = out.data();
            T* gx = xi.grad();
            for (int64_t i = 0; i < out.numel(); ++i) gx[i] += g[i] * y[i] * (T(1) - y[i]);
        });
    }
    check_finite(out, "sigmoid");
    return out;
}

// ---------------------------------------------------------------------------
// Pooling / resampling.
// ---------------------------------------------------------------------------

// N,C,H,W -> N,1,H,W per-pixel mean over channels.
template <typename T>
Tensor<T> channel_mean(const Tensor<T>& x) {
    PRFNET_PROF_SCOPE("op.channel_mean");
    check<ShapeError>(x.shape().rank() == 4, "channel_mean expects N,C,H,W, got ", x.shape().str());
    const int64_t n = x.shape().dim(0), c = x.shape().dim(1), hw = x.shape().dim(2) * x.shape().dim(3);
    Tensor<T> out = Tensor<T>::empty({n, 1, x.shape().dim(2), x.shape().dim(3)});
    const T* px = x.data();
    T* po = out.data();
    for (int64_t in = 0; in < n; ++in) {
        T* dst = po + in * hw;
        std::copy_n(px + in * c * hw, hw, dst);
        for (int64_t ic = 1; ic < c; ++ic) {
            const T* src = px + (in * c + ic) * hw;
            for (int64_t p = 0; p < hw; ++p) dst[p] += src[p];
        }
    }
    const T inv = T(1) / static_cast<T>(c);
    for (int64_t i = 0; i < out.numel(); ++i) po[i] *= inv;
    if (detail::recording<T>({&x})) {
        Tensor<T> xi = x;
        detail::mark(out, {&xi});
        Tape<T>::active()->record([xi, out, n, c, hw, inv]() mutable {
            const T* g = out.grad();
            T* gx = xi.grad();
            for (int64_t in = 0; in < n; ++in)
                for (int64_t ic = 0; ic < c; ++ic) {
                    T* dst = gx + (in * c + ic) * hw;
                    const T* src = g + in * hw;
                    for (int64_t p = 0; p < hw; ++p) dst[p] += src[p] * inv;
                }
        });
    }
    check_finite(out, "channel_mean");
    return out;
}

// N,C,H,W -> N,C spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    PRFNET_PROF_SCOPE("op.gap");
    check<ShapeError>(x.shape().rank() == 4, "global_avg_pool expects N,C,H,W, got ",
                      x.shape().str());
    const int64_t n = x.shape().dim(0), c = x.shape().dim(1), hw = x.shape().dim(2) * x.shape().dim(3);
    Tensor<T> out = Tensor<T>::empty({n, c});
    const T* px = x.data();
    T* po = out.data();
    const T inv = T(1) / static_cast<T>(hw);
    for (int64_t i = 0; i < n * c; ++i) {
        T acc = T(0);
        const T* src = px + i * hw;
        for (int64_t p = 0; p < hw; ++p) acc += src[p];
        po[i] = acc * inv;
    }
    if (detail::recording<T>({&x})) {
        Tensor<T> xi = x;
        detail::mark(out, {&xi});
        Tape<T>::active()->record([xi, out, n, c, hw, inv]() mutable {
            const T* g = out.grad();
            T* gx = xi.grad();
            for (int64_t i = 0; i < n * c; ++i) {
                T gv = g[i] * inv;
                T* dst = gx + i * hw;
                for (int64_t p = 0; p < hw; ++p) dst[p] += gv;
            }
        });
    }
    check_finite(out, "global_avg_pool");
    return out;
}

// 2x2 mean pooling, stride 2. Used by the downsampling Res2Net first group.
template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& x) {
    PRFNET_PROF_SCOPE("op.avgpool");
    check<ShapeError>(x.shape().rank() == 4, "avg_pool2x2 expects N,C,H,W");
    const int64_t n = x.shape().dim(0), c = x.shape().dim(1), h = x.shape().dim(2), w = x.shape().dim(3);
    check<ShapeError>(h % 2 == 0 && w % 2 == 0, "avg_pool2x2 needs even extents, got ",
                      x.shape().str());
    const int64_t oh = h / 2, ow = w / 2;
    Tensor<T> out = Tensor<T>::empty({n, c, oh, ow});
    const T* px = x.data();
    T* po = out.data();
    for (int64_t nc = 0; nc < n * c; ++nc) {
        const T* src = px + nc * h * w;
        T* dst = po + nc * oh * ow;
        for (int64_t i = 0; i < oh; ++i)
            for (int64_t j = 0; j < ow; ++j)
                dst[i * ow + j] = (src[(2 * i) * w + 2 * j] + src[(2 * i) * w + 2 * j + 1] +
                                   src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1]) /
                                  T(4);
    }
    if (detail::recording<T>({&x})) {
        Tensor<T> xi = x;
        detail::mark(out, {&xi});
        Tape<T>::active()->record([xi, out, n, c, h, w, oh, ow]() mutable {
            const T* g = out.grad();
            T* gx = xi.grad();
            for (int64_t nc = 0; nc < n * c; ++nc) {
                const T* src = g + nc * oh * ow;
                T* dst = gx + nc * h * w;
                for (int64_t i = 0; i < oh; ++i)
                    for (int64_t j = 0; j < ow; ++j) {
                        T gv = src[i * ow + j] / T(4);
                        dst[(2 * i) * w + 2 * j] += gv;
                        dst[(2 * i) * w + 2 * j + 1] += gv;
                        dst[(2 * i + 1) * w + 2 * j] += gv;
                        dst[(2 * i + 1) * w + 2 * j + 1] += gv;
                    }
            }
        });
    }
    check_finite(out, "avg_pool2x2");
    return out;
}

// Each pixel replicated into a 2x2 block; backward sums the block gradients.
template <typename T>
Tensor<T> upsample2x_nearest(const Tensor<T>& x) {
    PRFNET_PROF_SCOPE("op.upsample");
    check<ShapeError>(x.shape().rank() == 4, "upsample2x_nearest expects N,C,H,W");
    const int64_t n = x.shape().dim(0), c = x.shape().dim(1), h = x.shape().dim(2), w = x.shape().dim(3);
    Tensor<T> out = Tensor<T>::empty({n, c, 2 * h, 2 * w});
    const T* px = x.data();
    T* po = out.data();
    for (int64_t nc = 0; nc < n * c; ++nc) {
        const T* src = px + nc * h * w;
        T* dst = po + nc * 4 * h * w;
        for (int64_t i = 0; i < h; ++i)
            for (int64_t j = 0; j < w; ++j) {
                T v = src[i * w + j];
                dst[(2 * i) * 2 * w + 2 * j] = v;
                dst[(2 * i) * 2 * w + 2 * j + 1] = v;
                dst[(2 * i + 1) * 2 * w + 2 * j] = v;
                dst[(2 * i + 1) * 2 * w + 2 * j + 1] = v;
            }
    }
    if (detail::recording<T>({&x})) {
        Tensor<T> xi = x;
        detail::mark(out, {&xi});
        Tape<T>::active()->record([xi, out, n, c, h, w]() mutable {
            const T* g = out.grad();
            T* gx = xi.grad();
            for (int64_t nc = 0; nc < n * c; ++nc) {
                const T* src = g + nc * 4 * h * w;
                T* dst = gx + nc * h * w;
                for (int64_t i = 0; i < h; ++i)
                    for (int64_t j = 0; j < w; ++j)
                        dst[i * w + j] += src[(2 * i) * 2 * w + 2 * j] +
                                          src[(2 * i) * 2 * w + 2 * j + 1] +
                                          src[(2 * i + 1) * 2 * w + 2 * j] +
                                          src[(2 * i + 1) * 2 * w + 2 * j + 1];
            }
        });
    }
    check_finite(out, "upsample2x_nearest");
    return out;
}

// ---------------------------------------------------------------------------
// Concatenation / slicing.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    PRFNET_PROF_SCOPE("op.concat_ch");
    check<ShapeError>(a.shape().rank() == 4 && b.shape().rank() == 4,
                      "concat_channels expects N,C,H,W");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    check<ShapeError>(sa.dim(0) == sb.dim(0) && sa.dim(2) == sb.dim(2) && sa.dim(3) == sb.dim(3),
                      "concat_channels batch/spatial mismatch: ", sa.str(), " vs ", sb.str());
    const int64_t n = sa.dim(0), ca = sa.dim(1), cb = sb.dim(1), hw = sa.dim(2) * sa.dim(3);
    Tensor<T> out = Tensor<T>::empty({n, ca + cb, sa.dim(2), sa.dim(3)});
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t in = 0; in < n; ++in) {
        std::copy_n(pa + in * ca * hw, ca * hw, po + in * (ca + cb) * hw);
        std::copy_n(pb + in * cb * hw, cb * hw, po + in * (ca + cb) * hw + ca * hw);
    }
    if (detail::recording<T>({&a, &b})) {
        Tensor<T> ai = a, bi = b;
        detail::mark(out, {&ai, &bi});
        Tape<T>::active()->record([ai, bi, out, n, ca, cb, hw]() mutable {
            const T* g = out.grad();
            for (int64_t in = 0; in < n; ++in) {
                if (ai.requires_grad()) {
                    T* ga = ai.grad() + in * ca * hw;
                    const T* src = g + in * (ca + cb) * hw;
                    for (int64_t i = 0; i < ca * hw; ++i) ga[i] += src[i];
                }
                if (bi.requires_grad()) {
                    T* gb = bi.grad() + in * cb * hw;
                    const T* src = g + in * (ca + cb) * hw + ca * hw;
                    for (int64_t i = 0; i < cb * hw; ++i) gb[i] += src[i];
                }
            }
        });
    }
    check_finite(out, "concat_channels");
    return out;
}

template <typename T>
Tensor<T> concat_batch(const std::vector<Tensor<T>>& parts) {
    PRFNET_PROF_SCOPE("op.concat_b");
    check<ShapeError>(!parts.empty(), "concat_batch on empty list");
    const Shape& s0 = parts[0].shape();
    check<ShapeError>(s0.rank() == 4, "concat_batch expects N,C,H,W");
    int64_t total_n = 0;
    for (const auto& p : parts) {
        check<ShapeError>(p.shape().rank() == 4 && p.shape().dim(1) == s0.dim(1) &&
                              p.shape().dim(2) == s0.dim(2) && p.shape().dim(3) == s0.dim(3),
                          "concat_batch shape mismatch: ", p.shape().str(), " vs ", s0.str());
        total_n += p.shape().dim(0);
    }
    const int64_t per = s0.dim(1) * s0.dim(2) * s0.dim(3);
    Tensor<T> out = Tensor<T>::empty({total_n, s0.dim(1), s0.dim(2), s0.dim(3)});
    T* po = out.data();
    int64_t off = 0;
    for (const auto& p : parts) {
        std::copy_n(p.data(), p.numel(), po + off);
        off += p.numel();
    }
    bool any_grad = false;
    for (const auto& p : parts) any_grad = any_grad || p.requires_grad();
    if (Tape<T>::active() && any_grad) {
        std::vector<Tensor<T>> held = parts;
        out.set_requires_grad(true);
        out.ensure_grad();
        for (auto& p : held)
            if (p.requires_grad()) p.ensure_grad();
        Tape<T>::active()->record([held, out, per]() mutable {
            const T* g = out.grad();
            int64_t off2 = 0;
            for (auto& p : held) {
                if (p.requires_grad()) {
                    T* gp = p.grad();
                    for (int64_t i = 0; i < p.numel(); ++i) gp[i] += g[off2 + i];
                }
                off2 += p.numel();
            }
            (void)per;
        });
    }
    check_finite(out, "concat_batch");
    return out;
}

// Contiguous channel range, the Res2Net group split.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int64_t start, int64_t count) {
    PRFNET_PROF_SCOPE("op.slice_ch");
    check<ShapeError>(x.shape().rank() == 4, "slice_channels expects N,C,H,W");
    const int64_t n = x.shape().dim(0), c = x.shape().dim(1), hw = x.shape().dim(2) * x.shape().dim(3);
    check<ShapeError>(start >= 0 && count >= 1 && start + count <= c, "slice_channels range [",
                      start, ",", start + count, ") out of C=", c);
    Tensor<T> out = Tensor<T>::empty({n, count, x.shape().dim(2), x.shape().dim(3)});
    const T* px = x.data();
    T* po = out.data();
    for (int64_t in = 0; in < n; ++in)
        std::copy_n(px + (in * c + start) * hw, count * hw, po + in * count * hw);
    if (detail::recording<T>({&x})) {
        Tensor<T> xi = x;
        detail::mark(out, {&xi});
        Tape<T>::active()->record([xi, out, n, c, hw, start, count]() mutable {
            const T* g = out.grad();
            T* gx = xi.grad();
            for (int64_t in = 0; in < n; ++in) {
                T* dst = gx + (in * c + start) * hw;
                const T* src = g + in * count * hw;
                for (int64_t i = 0; i < count * hw; ++i) dst[i] += src[i];
            }
        });
    }
    return out;
}

// x[n,c,h,w] * s[n,c]: per-channel gate, the SE excitation apply.
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
    PRFNET_PROF_SCOPE("op.scale_ch");
    check<ShapeError>(x.shape().rank() == 4 && s.shape().rank() == 2 &&
                          s.shape().dim(0) == x.shape().dim(0) && s.shape().dim(1) == x.shape().dim(1),
                      "scale_channels expects x:N,C,H,W s:N,C, got ", x.shape().str(), " and ",
                      s.shape().str());
    const int64_t n = x.shape().dim(0), c = x.shape().dim(1), hw = x.shape().dim(2) * x.shape().dim(3);
    Tensor<T> out = Tensor<T>::empty(x.shape());
    const T* px = x.data();
    const T* ps = s.data();
    T* po = out.data();
    for (int64_t nc = 0; nc < n * c; ++nc) {
        const T sv = ps[nc];
        const T* src = px + nc * hw;
        T* dst = po + nc * hw;
        for (int64_t p = 0; p < hw; ++p) dst[p] = src[p] * sv;
    }
    if (detail::recording<T>({&x, &s})) {
        Tensor<T> xi = x, si = s;
        detail::mark(out, {&xi, &si});
        Tape<T>::active()->record([xi, si, out, n, c, hw]() mutable {
            const T* g = out.grad();
            if (xi.requires_grad()) {
                T* gx = xi.grad();
                const T* ps2 = si.data();
                for (int64_t nc = 0; nc < n * c; ++nc) {
                    const T sv = ps2[nc];
                    const T* src = g + nc * hw;
                    T* dst = gx + nc * hw;
                    for (int64_t p = 0; p < hw; ++p) dst[p] += src[p] * sv;
                }
            }
            if (si.requires_grad()) {
                T* gs = si.grad();
                const T* px2 = xi.data();
                for (int64_t nc = 0; nc < n * c; ++nc) {
                    const T* gg = g + nc * hw;
                    const T* src = px2 + nc * hw;
                    T acc = T(0);
                    for (int64_t p = 0; p < hw; ++p) acc += gg[p] * src[p];
                    gs[nc] += acc;
                }
            }
        });
    }
    check_finite(out, "scale_channels");
    return out;
}

template <typename T>
Tensor<T> slice_batch(const Tensor<T>& x, int64_t start, int64_t count) {
    PRFNET_PROF_SCOPE("op.slice_b");
    check<ShapeError>(x.shape().rank() == 4, "slice_batch expects N,C,H,W");
    check<ShapeError>(start >= 0 && count >= 1 && start + count <= x.shape().dim(0),
                      "slice_batch range [", start, ",", start + count, ") out of batch ",
                      x.shape().dim(0));
    const int64_t per = x.shape().dim(1) * x.shape().dim(2) * x.shape().dim(3);
    Tensor<T> out = Tensor<T>::empty({count, x.shape().dim(1), x.shape().dim(2), x.shape().dim(3)});
    std::copy_n(x.data() + start * per, count * per, out.data());
    if (detail::recording<T>({&x})) {
        Tensor<T> xi = x;
        detail::mark(out, {&xi});
        Tape<T>::active()->record([xi, out, start, per, count]() mutable {
            const T* g = out.grad();
            T* gx = xi.grad() + start * per;
            for (int64_t i = 0; i < count * per; ++i) gx[i] += g[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Affine map: y = x * w^T + b with x: N,D  w: Dout,D  b: Dout.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    PRFNET_PROF_SCOPE("op.linear");
    check<ShapeError>(x.shape().rank() == 2 && w.shape().rank() == 2 && b.shape().rank() == 1,
                      "linear expects x:N,D w:Dout,D b:Dout");
    const int64_t n = x.shape().dim(0), d = x.shape().dim(1), dout = w.shape().dim(0);
    check<ShapeError>(w.shape().dim(1) == d, "linear inner dims disagree: x ", x.shape().str(),
                      " w ", w.shape().str());
    check<ShapeError>(b.shape().dim(0) == dout, "linear bias extent ", b.shape().dim(0),
                      " != ", dout);
    Tensor<T> out = Tensor<T>::empty({n, dout});
    detail::gemm(false, true, static_cast<int>(n), static_cast<int>(dout), static_cast<int>(d),
                 T(1), x.data(), static_cast<int>(d), w.data(), static_cast<int>(d), T(0),
                 out.data(), static_cast<int>(dout));
    T* po = out.data();
    const T* pb = b.data();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < dout; ++j) po[i * dout + j] += pb[j];
    if (detail::recording<T>({&x, &w, &b})) {
        Tensor<T> xi = x, wi = w, bi = b;
        detail::mark(out, {&xi, &wi, &bi});
        Tape<T>::active()->record([xi, wi, bi, out, n, d, dout]() mutable {
            const T* g = out.grad();
            if (xi.requires_grad())
                detail::gemm(false, false, static_cast<int>(n), static_cast<int>(d),
                             static_cast<int>(dout), T(1), g, static_cast<int>(dout), wi.data(),
                             static_cast<int>(d), T(1), xi.grad(), static_cast<int>(d));
            if (wi.requires_grad())
                detail::gemm(true, false, static_cast<int>(dout), static_cast<int>(d),
                             static_cast<int>(n), T(1), g, static_cast<int>(dout), xi.data(),
                             static_cast<int>(d), T(1), wi.grad(), static_cast<int>(d));
            if (bi.requires_grad()) {
                T* gb = bi.grad();
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < dout; ++j) gb[j] += g[i * dout + j];
            }
        });
    }
    check_finite(out, "linear");
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization over N,H,W per channel.
// ---------------------------------------------------------------------------

enum class BnMode { Train, Eval };

// Running statistics live in plain tensors so they serialize as checkpoint
// buffers; count > 0 marks them initialized.
template <typename T>
struct BnStats {
    Tensor<T> mean;   // [C]
    Tensor<T> var;    // [C], biased
    Tensor<T> count;  // [1], number of batches folded in

    static BnStats make(int64_t channels) {
        return {Tensor<T>::zeros({channels}), Tensor<T>::zeros({channels}),
                Tensor<T>::zeros({static_cast<int64_t>(1)})};
    }
    bool initialized() const { return count.at(static_cast<int64_t>(0)) > T(0); }
};

namespace detail {

// Vectorizable strided reduction helpers.
template <typename T>
void sum_and_sumsq(const T* p, int64_t n, T& out_sum, T& out_sumsq) {
    T s[8] = {}, q[8] = {};
    int64_t i = 0;
    for (; i + 8 <= n; i += 8)
        for (int j = 0; j < 8; ++j) {
            const T v = p[i + j];
            s[j] += v;
            q[j] += v * v;
        }
    T ts = T(0), tq = T(0);
    for (int j = 0; j < 8; ++j) {
        ts += s[j];
        tq += q[j];
    }
    for (; i < n; ++i) {
        ts += p[i];
        tq += p[i] * p[i];
    }
    out_sum = ts;
    out_sumsq = tq;
}

template <typename T, bool FuseRelu>
Tensor<T> batchnorm2d_impl(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           BnStats<T>& stats, BnMode mode, T momentum, T eps) {
    PRFNET_PROF_SCOPE("op.batchnorm");
    check<ShapeError>(x.shape().rank() == 4, "batchnorm2d expects N,C,H,W");
    check<ValueError>(eps > T(0), "batchnorm2d needs eps > 0");
    const int64_t n = x.shape().dim(0), c = x.shape().dim(1), hw = x.shape().dim(2) * x.shape().dim(3);
    check<ShapeError>(gamma.shape().rank() == 1 && gamma.shape().dim(0) == c &&
                          beta.shape().rank() == 1 && beta.shape().dim(0) == c,
                      "batchnorm2d gamma/beta must be [C]=", c);
    const int64_t m = n * hw;

    std::vector<T> mu(static_cast<size_t>(c)), invstd(static_cast<size_t>(c));
    if (mode == BnMode::Train) {
        for (int64_t ic = 0; ic < c; ++ic) {
            T sum = T(0), sumsq = T(0);
            for (int64_t in = 0; in < n; ++in) {
                T s, q;
                sum_and_sumsq(x.data() + (in * c + ic) * hw, hw, s, q);
                sum += s;
                sumsq += q;
            }
            const T mean = sum / static_cast<T>(m);
            T var = sumsq / static_cast<T>(m) - mean * mean;
            if (var < T(0)) var = T(0);  // round-off guard
            mu[static_cast<size_t>(ic)] = mean;
            invstd[static_cast<size_t>(ic)] = T(1) / std::sqrt(var + eps);
            stats.mean.at(ic) = (T(1) - momentum) * stats.mean.at(ic) + momentum * mean;
            stats.var.at(ic) = (T(1) - momentum) * stats.var.at(ic) + momentum * var;
        }
        stats.count.at(static_cast<int64_t>(0)) += T(1);
    } else {
        check(stats.initialized(), "batchnorm2d eval with uninitialized running stats");
        for (int64_t ic = 0; ic < c; ++ic) {
            mu[static_cast<size_t>(ic)] = stats.mean.at(ic);
            invstd[static_cast<size_t>(ic)] = T(1) / std::sqrt(stats.var.at(ic) + eps);
        }
    }

    Tensor<T> out = Tensor<T>::empty(x.shape());
    for (int64_t in = 0; in < n; ++in)
        for (int64_t ic = 0; ic < c; ++ic) {
            const T* src = x.data() + (in * c + ic) * hw;
            T* dst = out.data() + (in * c + ic) * hw;
            const T scale = invstd[static_cast<size_t>(ic)] * gamma.at(ic);
            const T shift = beta.at(ic) - mu[static_cast<size_t>(ic)] * scale;
            if constexpr (FuseRelu) {
                for (int64_t p = 0; p < hw; ++p) {
                    const T v = src[p] * scale + shift;
                    dst[p] = v > T(0) ? v : T(0);
                }
            } else {
                for (int64_t p = 0; p < hw; ++p) dst[p] = src[p] * scale + shift;
            }
        }

    if (detail::recording<T>({&x, &gamma, &beta})) {
        Tensor<T> xi = x, gi = gamma, bi = beta;
        detail::mark(out, {&xi, &gi, &bi});
        const bool train_stats = (mode == BnMode::Train);
        Tape<T>::active()->record([xi, gi, bi, out, mu, invstd, n, c, hw, m, train_stats]() mutable {
            PRFNET_PROF_SCOPE("op.batchnorm_bwd");
            const T* g = out.grad();
            const T* y = out.data();
            for (int64_t ic = 0; ic < c; ++ic) {
                const T mean = mu[static_cast<size_t>(ic)], is = invstd[static_cast<size_t>(ic)];
                // Per-channel reductions of dy and dy*xhat, with dy gated by
                // the fused ReLU when present (y > 0 iff pre-ReLU > 0).
                T sum_dy = T(0), sum_dy_xhat = T(0);
                for (int64_t in = 0; in < n; ++in) {
                    const int64_t off = (in * c + ic) * hw;
                    const T* src = xi.data() + off;
                    const T* gg = g + off;
                    const T* yy = y + off;
                    T s0 = T(0), s1 = T(0);
                    for (int64_t p = 0; p < hw; ++p) {
                        const T gv = FuseRelu ? (yy[p] > T(0) ? gg[p] : T(0)) : gg[p];
                        s0 += gv;
                        s1 += gv * (src[p] - mean);
                    }
                    sum_dy += s0;
                    sum_dy_xhat += s1 * is;
                }
                if (gi.requires_grad()) gi.grad()[ic] += sum_dy_xhat;
                if (bi.requires_grad()) bi.grad()[ic] += sum_dy;
                if (xi.requires_grad()) {
                    const T gscale = gi.at(ic) * is;
                    const T c1 = sum_dy / static_cast<T>(m);
                    const T c2 = sum_dy_xhat / static_cast<T>(m);
                    for (int64_t in = 0; in < n; ++in) {
                        const int64_t off = (in * c + ic) * hw;
                        const T* src = xi.data() + off;
                        const T* gg = g + off;
                        const T* yy = y + off;
                        T* gx = xi.grad() + off;
                        if (train_stats) {
                            for (int64_t p = 0; p < hw; ++p) {
                                const T gv = FuseRelu ? (yy[p] > T(0) ? gg[p] : T(0)) : gg[p];
                                const T xhat = (src[p] - mean) * is;
                                gx[p] += gscale * (gv - c1 - xhat * c2);
                            }
                        } else {
                            for (int64_t p = 0; p < hw; ++p) {
                                const T gv = FuseRelu ? (yy[p] > T(0) ? gg[p] : T(0)) : gg[p];
                                gx[p] += gscale * gv;
                            }
                        }
                    }
                }
            }
        });
    }
    check_finite(out, FuseRelu ? "batchnorm2d_relu" : "batchnorm2d");
    return out;
}

}  // namespace detail

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      BnStats<T>& stats, BnMode mode, T momentum = T(0.1), T eps = T(1e-5)) {
    return detail::batchnorm2d_impl<T, false>(x, gamma, beta, stats, mode, momentum, eps);
}

// relu(batchnorm2d(x, ...)) computed in one pass; value-identical to the
// separate ops.
template <typename T>
Tensor<T> batchnorm2d_relu(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           BnStats<T>& stats, BnMode mode, T momentum = T(0.1), T eps = T(1e-5)) {
    return detail::batchnorm2d_impl<T, true>(x, gamma, beta, stats, mode, momentum, eps);
}

// relu(a + b) in one pass; value-identical to the separate ops. The residual
// skip join of every block.
template <typename T>
Tensor<T> add_relu(const Tensor<T>& a, const Tensor<T>& b) {
    PRFNET_PROF_SCOPE("op.add_relu");
    check<ShapeError>(a.shape() == b.shape(), "add_relu expects equal shapes, got ",
                      a.shape().str(), " vs ", b.shape().str());
    Tensor<T> out = Tensor<T>::empty(a.shape());
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) {
        const T v = pa[i] + pb[i];
        po[i] = v > T(0) ? v : T(0);
    }
    if (detail::recording<T>({&a, &b})) {
        Tensor<T> ai = a, bi = b;
        detail::mark(out, {&ai, &bi});
        Tape<T>::active()->record([ai, bi, out]() mutable {
            const T* g = out.grad();
            const T* y = out.data();
            T* ga = ai.requires_grad() ? ai.grad() : nullptr;
            T* gb = bi.requires_grad() ? bi.grad() : nullptr;
            for (int64_t i = 0; i < out.numel(); ++i) {
                if (y[i] > T(0)) {
                    if (ga) ga[i] += g[i];
                    if (gb) gb[i] += g[i];
                }
            }
        });
    }
    check_finite(out, "add_relu");
    return out;
}

// relu(x .* s_broadcast + skip) in one pass: the SE-gated residual join.
// Value-identical to scale_channels -> add -> relu.
template <typename T>
Tensor<T> scale_channels_add_relu(const Tensor<T>& x, const Tensor<T>& s, const Tensor<T>& skip) {
    PRFNET_PROF_SCOPE("op.se_join");
    check<ShapeError>(x.shape().rank() == 4 && s.shape().rank() == 2 &&
                          s.shape().dim(0) == x.shape().dim(0) &&
                          s.shape().dim(1) == x.shape().dim(1) && skip.shape() == x.shape(),
                      "scale_channels_add_relu shape mismatch");
    const int64_t n = x.shape().dim(0), c = x.shape().dim(1), hw = x.shape().dim(2) * x.shape().dim(3);
    Tensor<T> out = Tensor<T>::empty(x.shape());
    {
        const T* px = x.data();
        const T* ps = s.data();
        const T* pk = skip.data();
        T* po = out.data();
        for (int64_t nc = 0; nc < n * c; ++nc) {
            const T sv = ps[nc];
            const T* sx = px + nc * hw;
            const T* sk = pk + nc * hw;
            T* dst = po + nc * hw;
            for (int64_t p = 0; p < hw; ++p) {
                const T v = sx[p] * sv + sk[p];
                dst[p] = v > T(0) ? v : T(0);
            }
        }
    }
    if (detail::recording<T>({&x, &s, &skip})) {
        Tensor<T> xi = x, si = s, ki = skip;
        detail::mark(out, {&xi, &si, &ki});
        Tape<T>::active()->record([xi, si, ki, out, n, c, hw]() mutable {
            const T* g = out.grad();
            const T* y = out.data();
            const T* px = xi.data();
            const T* ps = si.data();
            T* gx = xi.requires_grad() ? xi.grad() : nullptr;
            T* gs = si.requires_grad() ? si.grad() : nullptr;
            T* gk = ki.requires_grad() ? ki.grad() : nullptr;
            for (int64_t nc = 0; nc < n * c; ++nc) {
                const T sv = ps[nc];
                const int64_t off = nc * hw;
                T acc = T(0);
                for (int64_t p = 0; p < hw; ++p) {
                    if (y[off + p] > T(0)) {
                        const T gv = g[off + p];
                        if (gx) gx[off + p] += gv * sv;
                        acc += gv * px[off + p];
                        if (gk) gk[off + p] += gv;
                    }
                }
                if (gs) gs[nc] += acc;
            }
        });
    }
    check_finite(out, "scale_channels_add_relu");
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses. Targets are treated as constants.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::empty({static_cast<int64_t>(1)});
    T acc = T(0);
    const T* px = x.data();
    for (int64_t i = 0; i < x.numel(); ++i) acc += px[i];
    out.at(static_cast<int64_t>(0)) = acc;
    if (detail::recording<T>({&x})) {
        Tensor<T> xi = x;
        detail::mark(out, {&xi});
        Tape<T>::active()->record([xi, out]() mutable {
            const T g = out.grad()[0];
            T* gx = xi.grad();
            for (int64_t i = 0; i < xi.numel(); ++i) gx[i] += g;
        });
    }
    check_finite(out, "sum_all");
    return out;
}

// sum(x .* coeffs) with constant coeffs; the standard scalarizer for
// gradient checking (a plain sum lets error cancellation hide bugs).
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, const Tensor<T>& coeffs) {
    check<ShapeError>(x.shape() == coeffs.shape(), "weighted_sum shape mismatch ",
                      x.shape().str(), " vs ", coeffs.shape().str());
    Tensor<T> out = Tensor<T>::empty({static_cast<int64_t>(1)});
    T acc = T(0);
    const T* px = x.data();
    const T* pc = coeffs.data();
    for (int64_t i = 0; i < x.numel(); ++i) acc += px[i] * pc[i];
    out.at(static_cast<int64_t>(0)) = acc;
    if (detail::recording<T>({&x})) {
        Tensor<T> xi = x;
        Tensor<T> ci = coeffs;
        detail::mark(out, {&xi});
        Tape<T>::active()->record([xi, ci, out]() mutable {
            const T g = out.grad()[0];
            T* gx = xi.grad();
            const T* pc2 = ci.data();
            for (int64_t i = 0; i < xi.numel(); ++i) gx[i] += g * pc2[i];
        });
    }
    check_finite(out, "weighted_sum");
    return out;
}

// Mean binary cross-entropy from logits, log-sum-exp stable form.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const Tensor<T>& targets) {
    check<ShapeError>(logits.shape() == targets.shape(), "bce_with_logits shape mismatch");
    const int64_t n = logits.numel();
    check<ValueError>(n >= 1, "bce_with_logits on empty batch");
    Tensor<T> out = Tensor<T>::empty({static_cast<int64_t>(1)});
    const T* z = logits.data();
    const T* y = targets.data();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i)
        acc += std::max(z[i], T(0)) - z[i] * y[i] + std::log1p(std::exp(-std::abs(z[i])));
    out.at(static_cast<int64_t>(0)) = acc / static_cast<T>(n);
    if (detail::recording<T>({&logits})) {
        Tensor<T> zi = logits, yi = targets;
        detail::mark(out, {&zi});
        Tape<T>::active()->record([zi, yi, out, n]() mutable {
            const T g = out.grad()[0];
            const T* z2 = zi.data();
            const T* y2 = yi.data();
            T* gz = zi.grad();
            for (int64_t i = 0; i < n; ++i) {
                T p = z2[i] >= T(0) ? T(1) / (T(1) + std::exp(-z2[i]))
                                    : std::exp(z2[i]) / (T(1) + std::exp(z2[i]));
                gz[i] += g * (p - y2[i]) / static_cast<T>(n);
            }
        });
    }
    check_finite(out, "bce_with_logits");
    return out;
}

// Mean BCE from probabilities, clamped away from {0,1} by 1e-7.
template <typename T>
Tensor<T> bce_from_probs(const Tensor<T>& probs, const Tensor<T>& targets) {
    check<ShapeError>(probs.shape() == targets.shape(), "bce_from_probs shape mismatch");
    const int64_t n = probs.numel();
    check<ValueError>(n >= 1, "bce_from_probs on empty batch");
    const T lo = T(1e-7), hi = T(1) - T(1e-7);
    Tensor<T> out = Tensor<T>::empty({static_cast<int64_t>(1)});
    const T* p = probs.data();
    const T* y = targets.data();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) {
        T pc = std::clamp(p[i], lo, hi);
        acc -= y[i] * std::log(pc) + (T(1) - y[i]) * std::log(T(1) - pc);
    }
    out.at(static_cast<int64_t>(0)) = acc / static_cast<T>(n);
    if (detail::recording<T>({&probs})) {
        Tensor<T> pi = probs, yi = targets;
        detail::mark(out, {&pi});
        Tape<T>::active()->record([pi, yi, out, n, lo, hi]() mutable {
            const T g = out.grad()[0];
            const T* p2 = pi.data();
            const T* y2 = yi.data();
            T* gp = pi.grad();
            for (int64_t i = 0; i < n; ++i) {
                T pc = std::clamp(p2[i], lo, hi);
                gp[i] += g * (pc - y2[i]) / (pc * (T(1) - pc)) / static_cast<T>(n);
            }
        });
    }
    check_finite(out, "bce_from_probs");
    return out;
}

// Mean squared error against constant targets.
template <typename T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& targets) {
    check<ShapeError>(pred.shape() == targets.shape(), "mse_loss shape mismatch");
    const int64_t n = pred.numel();
    check<ValueError>(n >= 1, "mse_loss on empty batch");
    Tensor<T> out = Tensor<T>::empty({static_cast<int64_t>(1)});
    const T* q = pred.data();
    const T* t = targets.data();
    T acc = T(0);
    for (int64_t i = 0; i < n; ++i) {
        T d = q[i] - t[i];
        acc += d * d;
    }
    out.at(static_cast<int64_t>(0)) = acc / static_cast<T>(n);
    if (detail::recording<T>({&pred})) {
        Tensor<T> qi = pred, ti = targets;
        detail::mark(out, {&qi});
        Tape<T>::active()->record([qi, ti, out, n]() mutable {
            const T g = out.grad()[0];
            const T* q2 = qi.data();
            const T* t2 = ti.data();
            T* gq = qi.grad();
            for (int64_t i = 0; i < n; ++i) gq[i] += g * T(2) * (q2[i] - t2[i]) / static_cast<T>(n);
        });
    }
    check_finite(out, "mse_loss");
    return out;
}

}  // namespace prfnet
