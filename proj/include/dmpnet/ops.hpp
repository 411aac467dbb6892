#pragma once

// Differentiable operation set: elementwise arithmetic and activations,
// 2-D convolution, pooling, bilinear resizing, bilinear grid sampling,
// channel concat/slice and reductions. Every op validates shapes, computes
// the forward value, and (when a tape is active and an input requires grad)
// records its vector-Jacobian step. All loops are sequential with a fixed
// order, so outputs and gradients are bit-deterministic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <optional>
#include <vector>

#include "dmpnet/tensor.hpp"

namespace dmpnet {

namespace detail {

template <class S>
Tape<S>* taping_for(std::initializer_list<const Tensor<S>*> inputs) {
    Tape<S>* tape = Tape<S>::active();
    if (!tape) return nullptr;
    for (const auto* t : inputs)
        if (t->requires_grad()) return tape;
    return nullptr;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    require(a.shape() == b.shape(), "add: shape mismatch " + a.shape().str() +
                                        " vs " + b.shape().str());
    Tensor<S> out(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];

    if (auto* tape = detail::taping_for<S>({&a, &b})) {
        out.set_requires_grad(true);
        tape->watch(a);
        tape->watch(b);
        tape->watch(out);
        auto ag = a.grad_ptr(), bg = b.grad_ptr(), og = out.grad_ptr();
        tape->record([ag, bg, og, n] {
            for (std::int64_t i = 0; i < n; ++i) {
                if (ag) (*ag)[i] += (*og)[i];
                if (bg) (*bg)[i] += (*og)[i];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
    require(a.shape() == b.shape(), "sub: shape mismatch " + a.shape().str() +
                                        " vs " + b.shape().str());
    Tensor<S> out(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];

    if (auto* tape = detail::taping_for<S>({&a, &b})) {
        out.set_requires_grad(true);
        tape->watch(a);
        tape->watch(b);
        tape->watch(out);
        auto ag = a.grad_ptr(), bg = b.grad_ptr(), og = out.grad_ptr();
        tape->record([ag, bg, og, n] {
            for (std::int64_t i = 0; i < n; ++i) {
                if (ag) (*ag)[i] += (*og)[i];
                if (bg) (*bg)[i] -= (*og)[i];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
    require(a.shape() == b.shape(), "mul: shape mismatch " + a.shape().str() +
                                        " vs " + b.shape().str());
    Tensor<S> out(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];

    if (auto* tape = detail::taping_for<S>({&a, &b})) {
        out.set_requires_grad(true);
        tape->watch(a);
        tape->watch(b);
        tape->watch(out);
        auto av = a.values_ptr(), bv = b.values_ptr();
        auto ag = a.grad_ptr(), bg = b.grad_ptr(), og = out.grad_ptr();
        tape->record([av, bv, ag, bg, og, n] {
            for (std::int64_t i = 0; i < n; ++i) {
                if (ag) (*ag)[i] += (*bv)[i] * (*og)[i];
                if (bg) (*bg)[i] += (*av)[i] * (*og)[i];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> add_scalar(const Tensor<S>& x, S value) {
    Tensor<S> out(x.shape());
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] + value;

    if (auto* tape = detail::taping_for<S>({&x})) {
        out.set_requires_grad(true);
        tape->watch(x);
        tape->watch(out);
        auto xg = x.grad_ptr(), og = out.grad_ptr();
        tape->record([xg, og, n] {
            for (std::int64_t i = 0; i < n; ++i) (*xg)[i] += (*og)[i];
        });
    }
    return out;
}

template <class S>
Tensor<S> mul_scalar(const Tensor<S>& x, S value) {
    Tensor<S> out(x.shape());
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] * value;

    if (auto* tape = detail::taping_for<S>({&x})) {
        out.set_requires_grad(true);
        tape->watch(x);
        tape->watch(out);
        auto xg = x.grad_ptr(), og = out.grad_ptr();
        tape->record([xg, og, n, value] {
            for (std::int64_t i = 0; i < n; ++i) (*xg)[i] += value * (*og)[i];
        });
    }
    return out;
}

// out = alpha[0] * x, with alpha a learnable 1x1x1x1 tensor.
template <class S>
Tensor<S> scale_by(const Tensor<S>& x, const Tensor<S>& alpha) {
    require(alpha.numel() == 1, "scale_by: alpha must be a scalar tensor, got " +
                                    alpha.shape().str());
    const S a = alpha.data()[0];
    Tensor<S> out(x.shape());
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a * x.data()[i];

    if (auto* tape = detail::taping_for<S>({&x, &alpha})) {
        out.set_requires_grad(true);
        tape->watch(x);
        tape->watch(alpha);
        tape->watch(out);
        auto xv = x.values_ptr();
        auto xg = x.grad_ptr(), sg = alpha.grad_ptr(), og = out.grad_ptr();
        tape->record([xv, xg, sg, og, a, n] {
            if (xg)
                for (std::int64_t i = 0; i < n; ++i) (*xg)[i] += a * (*og)[i];
            if (sg) {
                S acc = S(0);
                for (std::int64_t i = 0; i < n; ++i) acc += (*xv)[i] * (*og)[i];
                (*sg)[0] += acc;
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
    Tensor<S> out(x.shape());
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i)
        out.data()[i] = x.data()[i] > S(0) ? x.data()[i] : S(0);

    if (auto* tape = detail::taping_for<S>({&x})) {
        out.set_requires_grad(true);
        tape->watch(x);
        tape->watch(out);
        auto xv = x.values_ptr();
        auto xg = x.grad_ptr(), og = out.grad_ptr();
        tape->record([xv, xg, og, n] {
            for (std::int64_t i = 0; i < n; ++i)
                if ((*xv)[i] > S(0)) (*xg)[i] += (*og)[i];
        });
    }
    return out;
}

template <class S>
Tensor<S> sigmoid(const Tensor<S>& x) {
    Tensor<S> out(x.shape());
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const S v = x.data()[i];
        if (v >= S(0)) {
            out.data()[i] = S(1) / (S(1) + std::exp(-v));
        } else {
            const S e = std::exp(v);
            out.data()[i] = e / (S(1) + e);
        }
    }

    if (auto* tape = detail::taping_for<S>({&x})) {
        out.set_requires_grad(true);
        tape->watch(x);
        tape->watch(out);
        auto ov = out.values_ptr();
        auto xg = x.grad_ptr(), og = out.grad_ptr();
        tape->record([ov, xg, og, n] {
            for (std::int64_t i = 0; i < n; ++i) {
                const S s = (*ov)[i];
                (*xg)[i] += s * (S(1) - s) * (*og)[i];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> log(const Tensor<S>& x) {
    Tensor<S> out(x.shape());
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = std::log(x.data()[i]);

    if (auto* tape = detail::taping_for<S>({&x})) {
        out.set_requires_grad(true);
        tape->watch(x);
        tape->watch(out);
        auto xv = x.values_ptr();
        auto xg = x.grad_ptr(), og = out.grad_ptr();
        tape->record([xv, xg, og, n] {
            for (std::int64_t i = 0; i < n; ++i) (*xg)[i] += (*og)[i] / (*xv)[i];
        });
    }
    return out;
}

// Gradient passes through strictly inside [lo, hi] and is zero where clamped.
template <class S>
Tensor<S> clamp(const Tensor<S>& x, S lo, S hi) {
    Tensor<S> out(x.shape());
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i)
        out.data()[i] = std::min(hi, std::max(lo, x.data()[i]));

    if (auto* tape = detail::taping_for<S>({&x})) {
        out.set_requires_grad(true);
        tape->watch(x);
        tape->watch(out);
        auto xv = x.values_ptr();
        auto xg = x.grad_ptr(), og = out.grad_ptr();
        tape->record([xv, xg, og, lo, hi, n] {
            for (std::int64_t i = 0; i < n; ++i) {
                const S v = (*xv)[i];
                if (v > lo && v < hi) (*xg)[i] += (*og)[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// convolution

struct Conv2dOpts {
    int stride = 1;
    int padding = 0;
    int dilation = 1;
};

namespace detail {

inline int conv_out_extent(int in, int k, int stride, int padding, int dilation) {
    return (in + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
}

// Inner kernel shared by forward and the two backward passes. For a fixed
// (kernel row, kernel col) the valid output columns form one contiguous run.
struct ConvRun {
    int ox_lo, ox_hi;  // inclusive range of valid output columns, empty if lo > hi
    int ix0;           // input column at ox = 0
};

inline ConvRun conv_run(int kx, int w, int ow, int stride, int padding, int dilation) {
    ConvRun r;
    r.ix0 = kx * dilation - padding;
    r.ox_lo = r.ix0 >= 0 ? 0 : (-r.ix0 + stride - 1) / stride;
    const int last = w - 1 - r.ix0;
    r.ox_hi = last < 0 ? -1 : std::min(ow - 1, last / stride);
    return r;
}

}  // namespace detail

namespace detail {

// Cross-correlation with zero padding. weight is [out_c, in_c, kh, kw];
// bias, when present, is one value per output channel ([1, out_c, 1, 1]).
template <class S>
Tensor<S> conv2d_impl(const Tensor<S>& x, const Tensor<S>& weight,
                      const Tensor<S>* bias, const Conv2dOpts& opt) {
    const Shape xs = x.shape(), ws = weight.shape();
    require(opt.stride >= 1 && opt.dilation >= 1 && opt.padding >= 0,
            "conv2d: invalid stride/padding/dilation");
    require(ws.c == xs.c, "conv2d: input has " + std::to_string(xs.c) +
                              " channels but kernel expects " + std::to_string(ws.c));
    const int oh = detail::conv_out_extent(xs.h, ws.h, opt.stride, opt.padding, opt.dilation);
    const int ow = detail::conv_out_extent(xs.w, ws.w, opt.stride, opt.padding, opt.dilation);
    require(oh >= 1, "conv2d: output height < 1 for input height " +
                         std::to_string(xs.h) + ", kernel " + std::to_string(ws.h));
    require(ow >= 1, "conv2d: output width < 1 for input width " +
                         std::to_string(xs.w) + ", kernel " + std::to_string(ws.w));
    if (bias)
        require(bias->numel() == ws.n, "conv2d: bias has " +
                                           std::to_string(bias->numel()) +
                                           " values for " + std::to_string(ws.n) +
                                           " output channels");

    Tensor<S> out(Shape{xs.n, ws.n, oh, ow});
    const int stride = opt.stride, padding = opt.padding, dilation = opt.dilation;
    const std::int64_t x_plane = static_cast<std::int64_t>(xs.h) * xs.w;
    const std::int64_t o_plane = static_cast<std::int64_t>(oh) * static_cast<std::int64_t>(ow);

    for (int n = 0; n < xs.n; ++n) {
        for (int oc = 0; oc < ws.n; ++oc) {
            S* outp = out.data() + (static_cast<std::int64_t>(n) * ws.n + oc) * o_plane;
            const S bv = bias ? bias->data()[oc] : S(0);
            for (std::int64_t i = 0; i < o_plane; ++i) outp[i] = bv;
            for (int ic = 0; ic < xs.c; ++ic) {
                const S* xp = x.data() + (static_cast<std::int64_t>(n) * xs.c + ic) * x_plane;
                for (int ky = 0; ky < ws.h; ++ky) {
                    for (int kx = 0; kx < ws.w; ++kx) {
                        const S wv = weight.at(oc, ic, ky, kx);
                        if (wv == S(0)) continue;
                        const auto run = detail::conv_run(kx, xs.w, ow, stride, padding, dilation);
                        if (run.ox_lo > run.ox_hi) continue;
                        for (int oy = 0; oy < oh; ++oy) {
                            const int iy = oy * stride - padding + ky * dilation;
                            if (iy < 0 || iy >= xs.h) continue;
                            const S* xrow = xp + static_cast<std::int64_t>(iy) * xs.w;
                            S* orow = outp + static_cast<std::int64_t>(oy) * ow;
                            for (int ox = run.ox_lo; ox <= run.ox_hi; ++ox)
                                orow[ox] += wv * xrow[run.ix0 + ox * stride];
                        }
                    }
                }
            }
        }
    }

    auto* tape = bias ? detail::taping_for<S>({&x, &weight, bias})
                      : detail::taping_for<S>({&x, &weight});
    if (tape) {
        out.set_requires_grad(true);
        tape->watch(x);
        tape->watch(weight);
        if (bias) tape->watch(*bias);
        tape->watch(out);
        auto xv = x.values_ptr(), wv_ptr = weight.values_ptr();
        auto xg = x.grad_ptr(), wg = weight.grad_ptr();
        auto bg = bias ? bias->grad_ptr() : nullptr;
        auto og = out.grad_ptr();
        const Shape os = out.shape();
        tape->record([=] {
            const std::int64_t xpl = static_cast<std::int64_t>(xs.h) * xs.w;
            const std::int64_t opl = static_cast<std::int64_t>(os.h) * os.w;
            for (int n = 0; n < xs.n; ++n) {
                for (int oc = 0; oc < ws.n; ++oc) {
                    const S* gout = og->data() + (static_cast<std::int64_t>(n) * ws.n + oc) * opl;
                    if (bg) {
                        S acc = S(0);
                        for (std::int64_t i = 0; i < opl; ++i) acc += gout[i];
                        (*bg)[oc] += acc;
                    }
                    for (int ic = 0; ic < xs.c; ++ic) {
                        const std::int64_t xoff = (static_cast<std::int64_t>(n) * xs.c + ic) * xpl;
                        const S* xp = xv->data() + xoff;
                        S* gx = xg ? xg->data() + xoff : nullptr;
                        for (int ky = 0; ky < ws.h; ++ky) {
                            for (int kx = 0; kx < ws.w; ++kx) {
                                const std::int64_t widx =
                                    ((static_cast<std::int64_t>(oc) * ws.c + ic) * ws.h + ky) * ws.w + kx;
                                const auto run = detail::conv_run(kx, xs.w, os.w, stride, padding, dilation);
                                if (run.ox_lo > run.ox_hi) continue;
                                const S wval = (*wv_ptr)[widx];
                                S wacc = S(0);
                                for (int oy = 0; oy < os.h; ++oy) {
                                    const int iy = oy * stride - padding + ky * dilation;
                                    if (iy < 0 || iy >= xs.h) continue;
                                    const S* xrow = xp + static_cast<std::int64_t>(iy) * xs.w;
                                    const S* grow = gout + static_cast<std::int64_t>(oy) * os.w;
                                    S* gxrow = gx ? gx + static_cast<std::int64_t>(iy) * xs.w : nullptr;
                                    for (int ox = run.ox_lo; ox <= run.ox_hi; ++ox) {
                                        const int ix = run.ix0 + ox * stride;
                                        if (wg) wacc += xrow[ix] * grow[ox];
                                        if (gxrow) gxrow[ix] += wval * grow[ox];
                                    }
                                }
                                if (wg) (*wg)[widx] += wacc;
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace detail

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Conv2dOpts& opt = {}) {
    return detail::conv2d_impl<S>(x, weight, nullptr, opt);
}

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const Tensor<S>& weight, const Tensor<S>& bias,
                 const Conv2dOpts& opt = {}) {
    return detail::conv2d_impl(x, weight, &bias, opt);
}

// ---------------------------------------------------------------------------
// sampling and resizing

// Samples x at continuous (row, col) locations given in coords [N, 2, Ho, Wo]
// (channel 0 = row, channel 1 = col, in input-pixel units). Out-of-range
// corner contributions are zero. Differentiable w.r.t. both x and coords.
template <class S>
Tensor<S> grid_sample(const Tensor<S>& x, const Tensor<S>& coords) {
    const Shape xs = x.shape(), cs = coords.shape();
    require(cs.c == 2, "grid_sample: coords must have 2 channels, got " +
                           std::to_string(cs.c));
    require(cs.n == xs.n, "grid_sample: batch mismatch " + std::to_string(xs.n) +
                              " vs " + std::to_string(cs.n));
    for (std::int64_t i = 0; i < coords.numel(); ++i)
        require(std::isfinite(static_cast<double>(coords.data()[i])),
                "grid_sample: non-finite coordinate");

    const int oh = cs.h, ow = cs.w;
    Tensor<S> out(Shape{xs.n, xs.c, oh, ow});
    const std::int64_t x_plane = static_cast<std::int64_t>(xs.h) * xs.w;
    const std::int64_t o_plane = static_cast<std::int64_t>(oh) * ow;
    const std::int64_t c_plane = o_plane;

    auto in_range = [&](int r, int c) { return r >= 0 && r < xs.h && c >= 0 && c < xs.w; };

    for (int n = 0; n < xs.n; ++n) {
        const S* rp = coords.data() + static_cast<std::int64_t>(n) * 2 * c_plane;
        const S* cp = rp + c_plane;
        for (std::int64_t o = 0; o < o_plane; ++o) {
            const S r = rp[o], c = cp[o];
            const int r0 = static_cast<int>(std::floor(r));
            const int c0 = static_cast<int>(std::floor(c));
            const S wr = r - static_cast<S>(r0);
            const S wc = c - static_cast<S>(c0);
            const S w00 = (S(1) - wr) * (S(1) - wc), w01 = (S(1) - wr) * wc;
            const S w10 = wr * (S(1) - wc), w11 = wr * wc;
            const bool i00 = in_range(r0, c0), i01 = in_range(r0, c0 + 1);
            const bool i10 = in_range(r0 + 1, c0), i11 = in_range(r0 + 1, c0 + 1);
            for (int ch = 0; ch < xs.c; ++ch) {
                const S* xp = x.data() + (static_cast<std::int64_t>(n) * xs.c + ch) * x_plane;
                S v = S(0);
                if (i00) v += w00 * xp[static_cast<std::int64_t>(r0) * xs.w + c0];
                if (i01) v += w01 * xp[static_cast<std::int64_t>(r0) * xs.w + c0 + 1];
                if (i10) v += w10 * xp[static_cast<std::int64_t>(r0 + 1) * xs.w + c0];
                if (i11) v += w11 * xp[static_cast<std::int64_t>(r0 + 1) * xs.w + c0 + 1];
                out.data()[(static_cast<std::int64_t>(n) * xs.c + ch) * o_plane + o] = v;
            }
        }
    }

    if (auto* tape = detail::taping_for<S>({&x, &coords})) {
        out.set_requires_grad(true);
        tape->watch(x);
        tape->watch(coords);
        tape->watch(out);
        auto xv = x.values_ptr(), cv = coords.values_ptr();
        auto xg = x.grad_ptr(), cg = coords.grad_ptr(), og = out.grad_ptr();
        tape->record([=] {
            auto inr = [&](int r, int c) { return r >= 0 && r < xs.h && c >= 0 && c < xs.w; };
            for (int n = 0; n < xs.n; ++n) {
                const S* rp = cv->data() + static_cast<std::int64_t>(n) * 2 * c_plane;
                const S* cp = rp + c_plane;
                for (std::int64_t o = 0; o < o_plane; ++o) {
                    const S r = rp[o], c = cp[o];
                    const int r0 = static_cast<int>(std::floor(r));
                    const int c0 = static_cast<int>(std::floor(c));
                    const S wr = r - static_cast<S>(r0);
                    const S wc = c - static_cast<S>(c0);
                    const bool i00 = inr(r0, c0), i01 = inr(r0, c0 + 1);
                    const bool i10 = inr(r0 + 1, c0), i11 = inr(r0 + 1, c0 + 1);
                    S dr = S(0), dc = S(0);
                    for (int ch = 0; ch < xs.c; ++ch) {
                        const std::int64_t xoff = (static_cast<std::int64_t>(n) * xs.c + ch) * x_plane;
                        const S go = (*og)[(static_cast<std::int64_t>(n) * xs.c + ch) * o_plane + o];
                        const S v00 = i00 ? (*xv)[xoff + static_cast<std::int64_t>(r0) * xs.w + c0] : S(0);
                        const S v01 = i01 ? (*xv)[xoff + static_cast<std::int64_t>(r0) * xs.w + c0 + 1] : S(0);
                        const S v10 = i10 ? (*xv)[xoff + static_cast<std::int64_t>(r0 + 1) * xs.w + c0] : S(0);
                        const S v11 = i11 ? (*xv)[xoff + static_cast<std::int64_t>(r0 + 1) * xs.w + c0 + 1] : S(0);
                        if (xg) {
                            S* gx = xg->data() + xoff;
                            if (i00) gx[static_cast<std::int64_t>(r0) * xs.w + c0] += (S(1) - wr) * (S(1) - wc) * go;
                            if (i01) gx[static_cast<std::int64_t>(r0) * xs.w + c0 + 1] += (S(1) - wr) * wc * go;
                            if (i10) gx[static_cast<std::int64_t>(r0 + 1) * xs.w + c0] += wr * (S(1) - wc) * go;
                            if (i11) gx[static_cast<std::int64_t>(r0 + 1) * xs.w + c0 + 1] += wr * wc * go;
                        }
                        dr += go * (-(S(1) - wc) * v00 - wc * v01 + (S(1) - wc) * v10 + wc * v11);
                        dc += go * (-(S(1) - wr) * v00 + (S(1) - wr) * v01 - wr * v10 + wr * v11);
                    }
                    if (cg) {
                        (*cg)[static_cast<std::int64_t>(n) * 2 * c_plane + o] += dr;
                        (*cg)[static_cast<std::int64_t>(n) * 2 * c_plane + c_plane + o] += dc;
                    }
                }
            }
        });
    }
    return out;
}

// Max pooling with implicit -inf padding; gradient goes to the first maximum
// in row-major window order.
template <class S>
Tensor<S> maxpool2d(const Tensor<S>& x, int k, int stride, int padding = 0) {
    const Shape xs = x.shape();
    require(k >= 1 && stride >= 1 && padding >= 0 && padding < k,
            "maxpool2d: invalid kernel/stride/padding");
    const int oh = (xs.h + 2 * padding - k) / stride + 1;
    const int ow = (xs.w + 2 * padding - k) / stride + 1;
    require(oh >= 1 && ow >= 1, "maxpool2d: output extent < 1 for input " + xs.str());

    Tensor<S> out(Shape{xs.n, xs.c, oh, ow});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(out.numel());
    const std::int64_t x_plane = static_cast<std::int64_t>(xs.h) * xs.w;

    std::int64_t o = 0;
    for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < xs.c; ++c) {
            const S* xp = x.data() + (static_cast<std::int64_t>(n) * xs.c + c) * x_plane;
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox, ++o) {
                    S best = S(0);
                    std::int64_t best_idx = -1;
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride - padding + ky;
                        if (iy < 0 || iy >= xs.h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * stride - padding + kx;
                            if (ix < 0 || ix >= xs.w) continue;
                            const S v = xp[static_cast<std::int64_t>(iy) * xs.w + ix];
                            if (best_idx < 0 || v > best) {
                                best = v;
                                best_idx = static_cast<std::int64_t>(iy) * xs.w + ix;
                            }
                        }
                    }
                    out.data()[o] = best;
                    (*argmax)[o] = best_idx;
                }
            }
        }
    }

    if (auto* tape = detail::taping_for<S>({&x})) {
        out.set_requires_grad(true);
        tape->watch(x);
        tape->watch(out);
        auto xg = x.grad_ptr(), og = out.grad_ptr();
        const std::int64_t o_plane = static_cast<std::int64_t>(oh) * ow;
        const int nc = xs.n * xs.c;
        tape->record([xg, og, argmax, o_plane, x_plane, nc] {
            std::int64_t o = 0;
            for (int p = 0; p < nc; ++p) {
                S* gx = xg->data() + p * x_plane;
                for (std::int64_t i = 0; i < o_plane; ++i, ++o)
                    gx[(*argmax)[o]] += (*og)[o];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> avgpool2d(const Tensor<S>& x, int k, int stride) {
    const Shape xs = x.shape();
    require(k >= 1 && stride >= 1, "avgpool2d: invalid kernel/stride");
    require(xs.h >= k && xs.w >= k, "avgpool2d: window larger than input " + xs.str());
    const int oh = (xs.h - k) / stride + 1;
    const int ow = (xs.w - k) / stride + 1;

    Tensor<S> out(Shape{xs.n, xs.c, oh, ow});
    const S inv = S(1) / static_cast<S>(k * k);
    const std::int64_t x_plane = static_cast<std::int64_t>(xs.h) * xs.w;

    std::int64_t o = 0;
    for (int p = 0; p < xs.n * xs.c; ++p) {
        const S* xp = x.data() + p * x_plane;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox, ++o) {
                S acc = S(0);
                for (int ky = 0; ky < k; ++ky) {
                    const S* row = xp + static_cast<std::int64_t>(oy * stride + ky) * xs.w + ox * stride;
                    for (int kx = 0; kx < k; ++kx) acc += row[kx];
                }
                out.data()[o] = acc * inv;
            }
        }
    }

    if (auto* tape = detail::taping_for<S>({&x})) {
        out.set_requires_grad(true);
        tape->watch(x);
        tape->watch(out);
        auto xg = x.grad_ptr(), og = out.grad_ptr();
        const int h = xs.h, w = xs.w, nc = xs.n * xs.c;
        tape->record([xg, og, x_plane, h, w, oh, ow, k, stride, inv, nc] {
            std::int64_t o = 0;
            for (int p = 0; p < nc; ++p) {
                S* gx = xg->data() + p * x_plane;
                for (int oy = 0; oy < oh; ++oy) {
                    for (int ox = 0; ox < ow; ++ox, ++o) {
                        const S g = (*og)[o] * inv;
                        for (int ky = 0; ky < k; ++ky) {
                            S* row = gx + static_cast<std::int64_t>(oy * stride + ky) * w + ox * stride;
                            for (int kx = 0; kx < k; ++kx) row[kx] += g;
                        }
                    }
                }
            }
        });
    }
    return out;
}

namespace detail {

// align-corners-false source mapping with edge clamping
struct ResizeTap {
    int lo, hi;
    float frac;  // weight of hi
};

inline ResizeTap resize_tap(int dst, int out_extent, int in_extent) {
    ResizeTap t;
    double src = (dst + 0.5) * (static_cast<double>(in_extent) / out_extent) - 0.5;
    if (src < 0) src = 0;
    t.lo = std::min(static_cast<int>(src), in_extent - 1);
    t.hi = std::min(t.lo + 1, in_extent - 1);
    t.frac = static_cast<float>(src - t.lo);
    if (t.frac > 1.f) t.frac = 1.f;
    return t;
}

}  // namespace detail

template <class S>
Tensor<S> resize_bilinear(const Tensor<S>& x, int out_h, int out_w) {
    const Shape xs = x.shape();
    require(out_h >= 1 && out_w >= 1, "resize_bilinear: target extents must be >= 1");
    if (out_h == xs.h && out_w == xs.w) {
        // same-size resize is the identity; still route through add_scalar so
        // the gradient path stays recorded
        return add_scalar(x, S(0));
    }

    std::vector<detail::ResizeTap> ys(out_h), txs(out_w);
    for (int i = 0; i < out_h; ++i) ys[i] = detail::resize_tap(i, out_h, xs.h);
    for (int i = 0; i < out_w; ++i) txs[i] = detail::resize_tap(i, out_w, xs.w);

    Tensor<S> out(Shape{xs.n, xs.c, out_h, out_w});
    const std::int64_t x_plane = static_cast<std::int64_t>(xs.h) * xs.w;
    std::int64_t o = 0;
    for (int p = 0; p < xs.n * xs.c; ++p) {
        const S* xp = x.data() + p * x_plane;
        for (int oy = 0; oy < out_h; ++oy) {
            const auto& ty = ys[oy];
            const S* r0 = xp + static_cast<std::int64_t>(ty.lo) * xs.w;
            const S* r1 = xp + static_cast<std::int64_t>(ty.hi) * xs.w;
            const S fy = static_cast<S>(ty.frac);
            for (int ox = 0; ox < out_w; ++ox, ++o) {
                const auto& tx = txs[ox];
                const S fx = static_cast<S>(tx.frac);
                const S top = r0[tx.lo] + fx * (r0[tx.hi] - r0[tx.lo]);
                const S bot = r1[tx.lo] + fx * (r1[tx.hi] - r1[tx.lo]);
                out.data()[o] = top + fy * (bot - top);
            }
        }
    }

    if (auto* tape = detail::taping_for<S>({&x})) {
        out.set_requires_grad(true);
        tape->watch(x);
        tape->watch(out);
        auto xg = x.grad_ptr(), og = out.grad_ptr();
        const int nc = xs.n * xs.c, w = xs.w;
        auto ys_p = std::make_shared<std::vector<detail::ResizeTap>>(std::move(ys));
        auto xs_p = std::make_shared<std::vector<detail::ResizeTap>>(std::move(txs));
        tape->record([xg, og, ys_p, xs_p, x_plane, nc, w, out_h, out_w] {
            std::int64_t o = 0;
            for (int p = 0; p < nc; ++p) {
                S* gx = xg->data() + p * x_plane;
                for (int oy = 0; oy < out_h; ++oy) {
                    const auto& ty = (*ys_p)[oy];
                    const S fy = static_cast<S>(ty.frac);
                    for (int ox = 0; ox < out_w; ++ox, ++o) {
                        const auto& tx = (*xs_p)[ox];
                        const S fx = static_cast<S>(tx.frac);
                        const S g = (*og)[o];
                        gx[static_cast<std::int64_t>(ty.lo) * w + tx.lo] += (S(1) - fy) * (S(1) - fx) * g;
                        gx[static_cast<std::int64_t>(ty.lo) * w + tx.hi] += (S(1) - fy) * fx * g;
                        gx[static_cast<std::int64_t>(ty.hi) * w + tx.lo] += fy * (S(1) - fx) * g;
                        gx[static_cast<std::int64_t>(ty.hi) * w + tx.hi] += fy * fx * g;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// layout

template <class S>
Tensor<S> concat_channels(const std::vector<Tensor<S>>& xs) {
    require(!xs.empty(), "concat_channels: no inputs");
    const Shape first = xs.front().shape();
    int total_c = 0;
    for (const auto& t : xs) {
        const Shape s = t.shape();
        require(s.n == first.n && s.h == first.h && s.w == first.w,
                "concat_channels: mismatched extents " + s.str() + " vs " + first.str());
        total_c += s.c;
    }

    Tensor<S> out(Shape{first.n, total_c, first.h, first.w});
    const std::int64_t plane = static_cast<std::int64_t>(first.h) * first.w;
    for (int n = 0; n < first.n; ++n) {
        std::int64_t off = static_cast<std::int64_t>(n) * total_c * plane;
        for (const auto& t : xs) {
            const std::int64_t block = static_cast<std::int64_t>(t.shape().c) * plane;
            std::copy_n(t.data() + static_cast<std::int64_t>(n) * block, block,
                        out.data() + off);
            off += block;
        }
    }

    bool any_grad = false;
    for (const auto& t : xs) any_grad = any_grad || t.requires_grad();
    Tape<S>* tape = Tape<S>::active();
    if (tape && any_grad) {
        out.set_requires_grad(true);
        for (const auto& t : xs) tape->watch(t);
        tape->watch(out);
        std::vector<std::shared_ptr<typename Tensor<S>::Storage>> grads;
        std::vector<int> chans;
        for (const auto& t : xs) {
            grads.push_back(t.grad_ptr());
            chans.push_back(t.shape().c);
        }
        auto og = out.grad_ptr();
        const int batch = first.n;
        tape->record([grads, chans, og, plane, total_c, batch] {
            for (int n = 0; n < batch; ++n) {
                std::int64_t off = static_cast<std::int64_t>(n) * total_c * plane;
                for (std::size_t i = 0; i < grads.size(); ++i) {
                    const std::int64_t block = static_cast<std::int64_t>(chans[i]) * plane;
                    if (grads[i]) {
                        S* g = grads[i]->data() + static_cast<std::int64_t>(n) * block;
                        const S* src = og->data() + off;
                        for (std::int64_t j = 0; j < block; ++j) g[j] += src[j];
                    }
                    off += block;
                }
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> slice_channels(const Tensor<S>& x, int first, int count) {
    const Shape xs = x.shape();
    require(first >= 0 && count >= 1 && first + count <= xs.c,
            "slice_channels: range [" + std::to_string(first) + ", " +
                std::to_string(first + count) + ") outside " + std::to_string(xs.c) +
                " channels");

    Tensor<S> out(Shape{xs.n, count, xs.h, xs.w});
    const std::int64_t plane = static_cast<std::int64_t>(xs.h) * xs.w;
    for (int n = 0; n < xs.n; ++n)
        std::copy_n(x.data() + (static_cast<std::int64_t>(n) * xs.c + first) * plane,
                    static_cast<std::int64_t>(count) * plane,
                    out.data() + static_cast<std::int64_t>(n) * count * plane);

    if (auto* tape = detail::taping_for<S>({&x})) {
        out.set_requires_grad(true);
        tape->watch(x);
        tape->watch(out);
        auto xg = x.grad_ptr(), og = out.grad_ptr();
        const int batch = xs.n, xc = xs.c;
        tape->record([xg, og, plane, batch, xc, first, count] {
            for (int n = 0; n < batch; ++n) {
                S* g = xg->data() + (static_cast<std::int64_t>(n) * xc + first) * plane;
                const S* src = og->data() + static_cast<std::int64_t>(n) * count * plane;
                for (std::int64_t j = 0; j < static_cast<std::int64_t>(count) * plane; ++j)
                    g[j] += src[j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
    Tensor<S> out(Shape{1, 1, 1, 1});
    S acc = S(0);
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) acc += x.data()[i];
    out.data()[0] = acc;

    if (auto* tape = detail::taping_for<S>({&x})) {
        out.set_requires_grad(true);
        tape->watch(x);
        tape->watch(out);
        auto xg = x.grad_ptr(), og = out.grad_ptr();
        tape->record([xg, og, n] {
            const S g = (*og)[0];
            for (std::int64_t i = 0; i < n; ++i) (*xg)[i] += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// data-side helpers (never recorded; used by loaders and augmentation)

template <class S>
Tensor<S> flip_horizontal(const Tensor<S>& x) {
    const Shape s = x.shape();
    Tensor<S> out(s);
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < s.h; ++y)
                for (int x2 = 0; x2 < s.w; ++x2)
                    out.at(n, c, y, x2) = x.at(n, c, y, s.w - 1 - x2);
    return out;
}

template <class S>
Tensor<S> crop(const Tensor<S>& x, int y0, int x0, int h, int w) {
    const Shape s = x.shape();
    require(y0 >= 0 && x0 >= 0 && h >= 1 && w >= 1 && y0 + h <= s.h && x0 + w <= s.w,
            "crop: window outside input " + s.str());
    Tensor<S> out(Shape{s.n, s.c, h, w});
    for (int n = 0; n < s.n; ++n)
        for (int c = 0; c < s.c; ++c)
            for (int y = 0; y < h; ++y)
                std::copy_n(x.data() + x.index(n, c, y0 + y, x0), w,
                            out.data() + out.index(n, c, y, 0));
    return out;
}

template <class S>
Tensor<S> resize_nearest(const Tensor<S>& x, int out_h, int out_w) {
    const Shape s = x.shape();
    Tensor<S> out(Shape{s.n, s.c, out_h, out_w});
    for (int oy = 0; oy < out_h; ++oy) {
        const int iy = std::min(s.h - 1, static_cast<int>((oy + 0.5) * s.h / out_h));
        for (int ox = 0; ox < out_w; ++ox) {
            const int ix = std::min(s.w - 1, static_cast<int>((ox + 0.5) * s.w / out_w));
            for (int n = 0; n < s.n; ++n)
                for (int c = 0; c < s.c; ++c) out.at(n, c, oy, ox) = x.at(n, c, iy, ix);
        }
    }
    return out;
}

}  // namespace dmpnet
