#pragma once

// Differentiable operations recorded on a Tape.
//
// Image tensors are [B,C,H,W]. Every op computes its forward value eagerly
// and registers a backward rule that accumulates (+=) into input gradients.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cpslab/tensor.hpp"

namespace cpslab {

namespace detail {

using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
    if (t.rank() != rank)
        throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                             ", got " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()) + " differ");
}

inline void require_same_tape(const Var& a, const Var& b, const char* op) {
    if (&a.tape() != &b.tape()) throw ArgumentError(std::string(op) + ": operands live on different tapes");
}

struct ConvGeom {
    std::size_t cin, h, w, k, stride, pad, ho, wo;
};

// Unfold one sample [Cin,H,W] into columns [Cin*k*k, Ho*Wo].
inline void im2col(const real* x, const ConvGeom& g, real* cols) {
    const std::size_t plane = g.ho * g.wo;
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                real* row = cols + ((c * g.k + ky) * g.k + kx) * plane;
                const real* xc = x + c * g.h * g.w;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    real* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                        std::fill(dst, dst + g.wo, real(0));
                        continue;
                    }
                    const real* src = xc + static_cast<std::size_t>(iy) * g.w;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w))
                                      ? real(0)
                                      : src[static_cast<std::size_t>(ix)];
                    }
                }
            }
}

// Adjoint of im2col: scatter-add columns back into [Cin,H,W].
inline void col2im(const real* cols, const ConvGeom& g, real* dx) {
    const std::size_t plane = g.ho * g.wo;
    for (std::size_t c = 0; c < g.cin; ++c)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const real* row = cols + ((c * g.k + ky) * g.k + kx) * plane;
                real* xc = dx + c * g.h * g.w;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                                              static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    const real* src = row + oy * g.wo;
                    real* dst = xc + static_cast<std::size_t>(iy) * g.w;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                                                  static_cast<std::ptrdiff_t>(g.pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
                    }
                }
            }
}

// Source taps for align-corners-false bilinear resampling along one axis.
struct Taps {
    std::vector<std::size_t> i0, i1;
    std::vector<real> w0, w1;
};

inline Taps upsample_taps(std::size_t in, std::size_t factor) {
    const std::size_t out = in * factor;
    Taps t;
    t.i0.resize(out);
    t.i1.resize(out);
    t.w0.resize(out);
    t.w1.resize(out);
    for (std::size_t o = 0; o < out; ++o) {
        real src = (static_cast<real>(o) + real(0.5)) / static_cast<real>(factor) - real(0.5);
        if (src < 0) src = 0;
        std::size_t i0 = std::min(static_cast<std::size_t>(src), in - 1);
        std::size_t i1 = std::min(i0 + 1, in - 1);
        real frac = src - static_cast<real>(i0);
        t.i0[o] = i0;
        t.i1[o] = i1;
        t.w0[o] = 1 - frac;
        t.w1[o] = frac;
    }
    return t;
}

} // namespace detail

// Cross-correlation with bias. weight is [Cout,Cin,k,k], bias is [Cout].
// Output extent is floor((H + 2*padding - k) / stride) + 1.
inline Var conv2d(Var input, Var weight, Var bias, std::size_t stride, std::size_t padding) {
    detail::require_same_tape(input, weight, "conv2d");
    detail::require_same_tape(input, bias, "conv2d");
    const Tensor& x = input.value();
    const Tensor& wt = weight.value();
    const Tensor& bs = bias.value();
    detail::require_rank(x, 4, "conv2d", "input");
    detail::require_rank(wt, 4, "conv2d", "weight");
    detail::require_rank(bs, 1, "conv2d", "bias");
    if (stride == 0) throw ArgumentError("conv2d: stride must be positive");
    const std::size_t B = x.dim(0), cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t cout = wt.dim(0), k = wt.dim(2);
    if (wt.dim(1) != cin)
        throw DimensionError("conv2d: input channel axis (" + std::to_string(cin) +
                             ") does not match weight axis 1 (" + std::to_string(wt.dim(1)) + ")");
    if (wt.dim(3) != k) throw DimensionError("conv2d: weight axes 2 and 3 must be equal (square kernel)");
    if (k % 2 == 0) throw DimensionError("conv2d: kernel size must be odd, got " + std::to_string(k));
    if (bs.dim(0) != cout)
        throw DimensionError("conv2d: bias axis 0 (" + std::to_string(bs.dim(0)) +
                             ") does not match weight axis 0 (" + std::to_string(cout) + ")");
    if (H + 2 * padding < k || W + 2 * padding < k)
        throw DimensionError("conv2d: spatial axes " + std::to_string(H) + "x" + std::to_string(W) +
                             " incompatible with kernel " + std::to_string(k) + ", stride " +
                             std::to_string(stride) + ", padding " + std::to_string(padding));

    const detail::ConvGeom g{cin, H, W, k, stride, padding, (H + 2 * padding - k) / stride + 1,
                             (W + 2 * padding - k) / stride + 1};
    const std::size_t plane = g.ho * g.wo, patch = cin * k * k;

    Tensor out(Shape{B, cout, g.ho, g.wo});
    std::vector<real> cols(patch * plane);
    detail::ConstMapMat wmat(wt.data().data(), cout, patch);
    for (std::size_t b = 0; b < B; ++b) {
        detail::im2col(&x[b * cin * H * W], g, cols.data());
        detail::MapMat ob(&out[b * cout * plane], cout, plane);
        ob.noalias() = wmat * detail::ConstMapMat(cols.data(), patch, plane);
        for (std::size_t c = 0; c < cout; ++c) ob.row(c).array() += bs[c];
    }

    const Tensor* xp = &x;
    const Tensor* wp = &wt;
    return input.tape().record(
        std::move(out), {input.id(), weight.id(), bias.id()},
        [xp, wp, g, B, cout, plane, patch](const Tensor& gy, std::span<Tensor* const> grads) {
            Tensor* gx = grads[0];
            Tensor* gw = grads[1];
            Tensor* gb = grads[2];
            std::vector<real> cols(patch * plane);
            detail::ConstMapMat wmat(wp->data().data(), cout, patch);
            for (std::size_t b = 0; b < B; ++b) {
                detail::ConstMapMat gyb(&gy[b * cout * plane], cout, plane);
                if (gb)
                    for (std::size_t c = 0; c < cout; ++c) (*gb)[c] += gyb.row(c).sum();
                if (gw) {
                    detail::im2col(&(*xp)[b * g.cin * g.h * g.w], g, cols.data());
                    detail::MapMat gwm(gw->data().data(), cout, patch);
                    gwm.noalias() += gyb * detail::ConstMapMat(cols.data(), patch, plane).transpose();
                }
                if (gx) {
                    detail::MapMat gc(cols.data(), patch, plane);
                    gc.noalias() = wmat.transpose() * gyb;
                    detail::col2im(cols.data(), g, &(*gx)[b * g.cin * g.h * g.w]);
                }
            }
        });
}

// Elementwise max(0, x). The subgradient at 0 is 0.
inline Var relu(Var input) {
    const Tensor& x = input.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0 ? x[i] : real(0);
    const Tensor* xp = &x;
    return input.tape().record(std::move(out), {input.id()},
                               [xp](const Tensor& gy, std::span<Tensor* const> grads) {
                                   Tensor& gx = *grads[0];
                                   for (std::size_t i = 0; i < gy.size(); ++i)
                                       if ((*xp)[i] > 0) gx[i] += gy[i];
                               });
}

// Per-sample, per-channel normalization over the HxW plane followed by a
// learned affine map. Batch-independent stand-in for batch normalization.
inline Var channel_norm(Var input, Var gain, Var shift, real eps) {
    detail::require_same_tape(input, gain, "channel_norm");
    detail::require_same_tape(input, shift, "channel_norm");
    if (!(eps > 0)) throw ArgumentError("channel_norm: eps must be positive");
    const Tensor& x = input.value();
    detail::require_rank(x, 4, "channel_norm", "input");
    const std::size_t B = x.dim(0), C = x.dim(1), n = x.dim(2) * x.dim(3);
    if (gain.value().shape() != Shape{C} || shift.value().shape() != Shape{C})
        throw DimensionError("channel_norm: gain/shift must be [" + std::to_string(C) + "]");
    const Tensor& gv = gain.value();
    const Tensor& sv = shift.value();

    auto xhat = std::make_shared<std::vector<real>>(x.size());
    auto inv_std = std::make_shared<std::vector<real>>(B * C);
    Tensor out(x.shape());
    for (std::size_t p = 0; p < B * C; ++p) {
        const std::size_t c = p % C;
        const real* xs = &x[p * n];
        real mean = 0;
        for (std::size_t i = 0; i < n; ++i) mean += xs[i];
        mean /= static_cast<real>(n);
        real var = 0;
        for (std::size_t i = 0; i < n; ++i) var += (xs[i] - mean) * (xs[i] - mean);
        var /= static_cast<real>(n);
        const real is = 1 / std::sqrt(var + eps);
        (*inv_std)[p] = is;
        for (std::size_t i = 0; i < n; ++i) {
            const real xh = (xs[i] - mean) * is;
            (*xhat)[p * n + i] = xh;
            out[p * n + i] = gv[c] * xh + sv[c];
        }
    }

    const Tensor* gp = &gv;
    return input.tape().record(
        std::move(out), {input.id(), gain.id(), shift.id()},
        [xhat, inv_std, gp, B, C, n](const Tensor& gy, std::span<Tensor* const> grads) {
            Tensor* gx = grads[0];
            Tensor* gg = grads[1];
            Tensor* gs = grads[2];
            for (std::size_t p = 0; p < B * C; ++p) {
                const std::size_t c = p % C;
                const real* dy = &gy[p * n];
                const real* xh = &(*xhat)[p * n];
                real sum_dy = 0, sum_dy_xh = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    sum_dy += dy[i];
                    sum_dy_xh += dy[i] * xh[i];
                }
                if (gg) (*gg)[c] += sum_dy_xh;
                if (gs) (*gs)[c] += sum_dy;
                if (gx) {
                    const real g = (*gp)[c];
                    const real scale = g * (*inv_std)[p];
                    const real mean_dy = sum_dy / static_cast<real>(n);
                    const real mean_dy_xh = sum_dy_xh / static_cast<real>(n);
                    real* dx = &(*gx)[p * n];
                    for (std::size_t i = 0; i < n; ++i) dx[i] += scale * (dy[i] - mean_dy - xh[i] * mean_dy_xh);
                }
            }
        });
}

// Bilinear upsampling by an integer factor, align-corners-false convention.
inline Var bilinear_upsample(Var input, std::size_t factor) {
    if (factor < 1) throw ArgumentError("bilinear_upsample: factor must be >= 1");
    const Tensor& x = input.value();
    detail::require_rank(x, 4, "bilinear_upsample", "input");
    const std::size_t B = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t H = h * factor, W = w * factor;
    auto ty = std::make_shared<detail::Taps>(detail::upsample_taps(h, factor));
    auto tx = std::make_shared<detail::Taps>(detail::upsample_taps(w, factor));

    Tensor out(Shape{B, C, H, W});
    for (std::size_t p = 0; p < B * C; ++p) {
        const real* src = &x[p * h * w];
        real* dst = &out[p * H * W];
        for (std::size_t oy = 0; oy < H; ++oy) {
            const real* r0 = src + ty->i0[oy] * w;
            const real* r1 = src + ty->i1[oy] * w;
            const real a0 = ty->w0[oy], a1 = ty->w1[oy];
            for (std::size_t ox = 0; ox < W; ++ox) {
                const std::size_t c0 = tx->i0[ox], c1 = tx->i1[ox];
                dst[oy * W + ox] = a0 * (tx->w0[ox] * r0[c0] + tx->w1[ox] * r0[c1]) +
                                   a1 * (tx->w0[ox] * r1[c0] + tx->w1[ox] * r1[c1]);
            }
        }
    }
    return input.tape().record(
        std::move(out), {input.id()},
        [ty, tx, B, C, h, w, H, W](const Tensor& gy, std::span<Tensor* const> grads) {
            Tensor& gx = *grads[0];
            for (std::size_t p = 0; p < B * C; ++p) {
                const real* g = &gy[p * H * W];
                real* dst = &gx[p * h * w];
                for (std::size_t oy = 0; oy < H; ++oy) {
                    real* r0 = dst + ty->i0[oy] * w;
                    real* r1 = dst + ty->i1[oy] * w;
                    const real a0 = ty->w0[oy], a1 = ty->w1[oy];
                    for (std::size_t ox = 0; ox < W; ++ox) {
                        const real v = g[oy * W + ox];
                        const std::size_t c0 = tx->i0[ox], c1 = tx->i1[ox];
                        r0[c0] += a0 * tx->w0[ox] * v;
                        r0[c1] += a0 * tx->w1[ox] * v;
                        r1[c0] += a1 * tx->w0[ox] * v;
                        r1[c1] += a1 * tx->w1[ox] * v;
                    }
                }
            }
        });
}

// Per-pixel log-softmax over the channel axis (max-subtracted).
inline Var log_softmax_channels(Var logits) {
    const Tensor& x = logits.value();
    detail::require_rank(x, 4, "log_softmax_channels", "logits");
    const std::size_t B = x.dim(0), K = x.dim(1), n = x.dim(2) * x.dim(3);
    if (K < 2) throw DimensionError("log_softmax_channels: need at least 2 classes");
    Tensor out(x.shape());
    for (std::size_t b = 0; b < B; ++b) {
        const real* xb = &x[b * K * n];
        real* ob = &out[b * K * n];
        for (std::size_t i = 0; i < n; ++i) {
            real m = xb[i];
            for (std::size_t k = 1; k < K; ++k) m = std::max(m, xb[k * n + i]);
            real s = 0;
            for (std::size_t k = 0; k < K; ++k) s += std::exp(xb[k * n + i] - m);
            const real lse = m + std::log(s);
            for (std::size_t k = 0; k < K; ++k) ob[k * n + i] = xb[k * n + i] - lse;
        }
    }
    const Tensor* xp = &x;
    return logits.tape().record(
        std::move(out), {logits.id()}, [xp, B, K, n](const Tensor& gy, std::span<Tensor* const> grads) {
            Tensor& gx = *grads[0];
            std::vector<real> prob(K);
            for (std::size_t b = 0; b < B; ++b) {
                const real* xb = &(*xp)[b * K * n];
                const real* gb = &gy[b * K * n];
                real* dx = &gx[b * K * n];
                for (std::size_t i = 0; i < n; ++i) {
                    real m = xb[i];
                    for (std::size_t k = 1; k < K; ++k) m = std::max(m, xb[k * n + i]);
                    real s = 0, gsum = 0;
                    for (std::size_t k = 0; k < K; ++k) {
                        prob[k] = std::exp(xb[k * n + i] - m);
                        s += prob[k];
                        gsum += gb[k * n + i];
                    }
                    for (std::size_t k = 0; k < K; ++k) dx[k * n + i] += gb[k * n + i] - prob[k] / s * gsum;
                }
            }
        });
}

inline Var add(Var a, Var b) {
    detail::require_same_tape(a, b, "add");
    detail::require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return a.tape().record(std::move(out), {a.id(), b.id()},
                           [](const Tensor& gy, std::span<Tensor* const> grads) {
                               for (Tensor* g : grads)
                                   if (g)
                                       for (std::size_t i = 0; i < gy.size(); ++i) (*g)[i] += gy[i];
                           });
}

inline Var sub(Var a, Var b) {
    detail::require_same_tape(a, b, "sub");
    detail::require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return a.tape().record(std::move(out), {a.id(), b.id()},
                           [](const Tensor& gy, std::span<Tensor* const> grads) {
                               if (grads[0])
                                   for (std::size_t i = 0; i < gy.size(); ++i) (*grads[0])[i] += gy[i];
                               if (grads[1])
                                   for (std::size_t i = 0; i < gy.size(); ++i) (*grads[1])[i] -= gy[i];
                           });
}

inline Var scale(Var a, real c) {
    Tensor out = a.value();
    for (real& v : out.data()) v *= c;
    return a.tape().record(std::move(out), {a.id()}, [c](const Tensor& gy, std::span<Tensor* const> grads) {
        for (std::size_t i = 0; i < gy.size(); ++i) (*grads[0])[i] += c * gy[i];
    });
}

inline Var exp(Var a) {
    Tensor out = a.value();
    for (real& v : out.data()) v = std::exp(v);
    auto saved = std::make_shared<Tensor>(out);
    return a.tape().record(std::move(out), {a.id()},
                           [saved](const Tensor& gy, std::span<Tensor* const> grads) {
                               for (std::size_t i = 0; i < gy.size(); ++i) (*grads[0])[i] += (*saved)[i] * gy[i];
                           });
}

inline Var square(Var a) {
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * x[i];
    const Tensor* xp = &x;
    return a.tape().record(std::move(out), {a.id()}, [xp](const Tensor& gy, std::span<Tensor* const> grads) {
        for (std::size_t i = 0; i < gy.size(); ++i) (*grads[0])[i] += 2 * (*xp)[i] * gy[i];
    });
}

// Sum of all entries, as a scalar.
inline Var sum(Var a) {
    real s = 0;
    for (real v : a.value().values()) s += v;
    return a.tape().record(Tensor::scalar(s), {a.id()}, [](const Tensor& gy, std::span<Tensor* const> grads) {
        for (real& g : grads[0]->data()) g += gy[0];
    });
}

inline Var mean(Var a) { return scale(sum(a), real(1) / static_cast<real>(a.value().size())); }

// Weighted negative log-likelihood over a [B,K,H,W] log-probability map:
//   sum_{b,i} weight[b,i] * -logp[b, target[b,i], i].
// Pixels with weight 0 are skipped entirely (their target is never read).
inline Var weighted_nll(Var logp, std::span<const int> target, std::span<const real> weight) {
    const Tensor& lp = logp.value();
    detail::require_rank(lp, 4, "weighted_nll", "log-probabilities");
    const std::size_t B = lp.dim(0), K = lp.dim(1), n = lp.dim(2) * lp.dim(3);
    if (target.size() != B * n || weight.size() != B * n)
        throw DimensionError("weighted_nll: target/weight size does not match " + shape_str(lp.shape()));
    auto tgt = std::make_shared<std::vector<int>>(target.begin(), target.end());
    auto wts = std::make_shared<std::vector<real>>(weight.begin(), weight.end());
    real s = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < n; ++i) {
            const real w = (*wts)[b * n + i];
            if (w == 0) continue;
            const int t = (*tgt)[b * n + i];
            if (t < 0 || static_cast<std::size_t>(t) >= K)
                throw DataError("weighted_nll: target " + std::to_string(t) + " outside [0," +
                                std::to_string(K) + ")");
            s -= w * lp[(b * K + static_cast<std::size_t>(t)) * n + i];
        }
    return logp.tape().record(Tensor::scalar(s), {logp.id()},
                              [tgt, wts, B, K, n](const Tensor& gy, std::span<Tensor* const> grads) {
                                  Tensor& g = *grads[0];
                                  for (std::size_t b = 0; b < B; ++b)
                                      for (std::size_t i = 0; i < n; ++i) {
                                          const real w = (*wts)[b * n + i];
                                          if (w == 0) continue;
                                          const auto t = static_cast<std::size_t>((*tgt)[b * n + i]);
                                          g[(b * K + t) * n + i] -= w * gy[0];
                                      }
                              });
}

} // namespace cpslab
