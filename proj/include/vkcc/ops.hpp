#pragma once

#include <atomic>
#include <cmath>
#include <limits>
#include <memory>
#include <vector>

#include "vkcc/tensor.hpp"

namespace vkcc {

/// Convolution evaluation strategy. Both satisfy the same contract; im2col is
/// the fast path (one GEMM per image), direct is the loop reference the tests
/// cross-check against.
enum class ConvImpl { im2col, direct };

namespace detail {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
void require_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
    if (a.shape() != b.shape()) throw InvalidInput(std::string(op) + ": shape mismatch");
}

template <typename S>
void require_rank(const TensorT<S>& t, int rank, const char* op) {
    if (t.rank() != rank) throw InvalidInput(std::string(op) + ": wrong rank");
}

}  // namespace detail

// ---- elementwise arithmetic ----

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape(a, b, "add");
    auto pa = a.ptr(), pb = b.ptr();
    return detail::make_op<S>(
        a.shape(), (pa->value + pb->value).eval(), {pa, pb},
        [pa, pb](auto& self) {
            TensorT<S>::accumulate(*pa, self.grad);
            TensorT<S>::accumulate(*pb, self.grad);
        },
        "add");
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape(a, b, "sub");
    auto pa = a.ptr(), pb = b.ptr();
    return detail::make_op<S>(
        a.shape(), (pa->value - pb->value).eval(), {pa, pb},
        [pa, pb](auto& self) {
            TensorT<S>::accumulate(*pa, self.grad);
            TensorT<S>::accumulate(*pb, -self.grad);
        },
        "sub");
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape(a, b, "mul");
    auto pa = a.ptr(), pb = b.ptr();
    return detail::make_op<S>(
        a.shape(), (pa->value * pb->value).eval(), {pa, pb},
        [pa, pb](auto& self) {
            TensorT<S>::accumulate(*pa, self.grad * pb->value);
            TensorT<S>::accumulate(*pb, self.grad * pa->value);
        },
        "mul");
}

template <typename S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_same_shape(a, b, "div");
    if ((b.value().abs() < S(1e-12)).any()) throw NumericFault("div: denominator under 1e-12");
    auto pa = a.ptr(), pb = b.ptr();
    return detail::make_op<S>(
        a.shape(), (pa->value / pb->value).eval(), {pa, pb},
        [pa, pb](auto& self) {
            TensorT<S>::accumulate(*pa, self.grad / pb->value);
            TensorT<S>::accumulate(*pb, -self.grad * self.value / pb->value);
        },
        "div");
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S k) {
    auto pa = a.ptr();
    return detail::make_op<S>(
        a.shape(), (pa->value * k).eval(), {pa},
        [pa, k](auto& self) { TensorT<S>::accumulate(*pa, self.grad * k); }, "scale");
}

template <typename S>
TensorT<S> add_scalar(const TensorT<S>& a, S k) {
    auto pa = a.ptr();
    return detail::make_op<S>(
        a.shape(), (pa->value + k).eval(), {pa},
        [pa](auto& self) { TensorT<S>::accumulate(*pa, self.grad); }, "add_scalar");
}

// ---- activations ----

template <typename S>
TensorT<S> relu(const TensorT<S>& a) {
    auto pa = a.ptr();
    return detail::make_op<S>(
        a.shape(), pa->value.max(S(0)).eval(), {pa},
        [pa](auto& self) {
            TensorT<S>::accumulate(*pa, self.grad * (pa->value > S(0)).template cast<S>());
        },
        "relu");
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& a) {
    auto pa = a.ptr();
    auto value = pa->value.unaryExpr([](S x) {
        return x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
    }).eval();
    return detail::make_op<S>(
        a.shape(), std::move(value), {pa},
        [pa](auto& self) {
            TensorT<S>::accumulate(*pa, self.grad * self.value * (S(1) - self.value));
        },
        "sigmoid");
}

template <typename S>
TensorT<S> softplus(const TensorT<S>& a) {
    auto pa = a.ptr();
    auto value = pa->value.unaryExpr([](S x) {
        if (x > S(30)) return x;  // log1p(exp(x)) = x to double precision
        return std::log1p(std::exp(x));
    }).eval();
    return detail::make_op<S>(
        a.shape(), std::move(value), {pa},
        [pa](auto& self) {
            auto sig = pa->value.unaryExpr([](S x) {
                return x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
            });
            TensorT<S>::accumulate(*pa, self.grad * sig);
        },
        "softplus");
}

/// acos with the argument clamped into [-1+delta, 1-delta]; the gradient is
/// zero where the clamp engaged, finite everywhere else.
template <typename S>
TensorT<S> acos_clamped(const TensorT<S>& a, S delta = S(1e-7)) {
    if (!(delta > S(0)) || !(delta < S(1))) throw InvalidInput("acos_clamped: bad delta");
    auto pa = a.ptr();
    auto value = pa->value.unaryExpr([delta](S x) {
        return std::acos(std::min(S(1) - delta, std::max(S(-1) + delta, x)));
    }).eval();
    return detail::make_op<S>(
        a.shape(), std::move(value), {pa},
        [pa, delta](auto& self) {
            auto dx = pa->value.unaryExpr([delta](S x) {
                if (x <= S(-1) + delta || x >= S(1) - delta) return S(0);
                return S(-1) / std::sqrt(S(1) - x * x);
            });
            TensorT<S>::accumulate(*pa, self.grad * dx);
        },
        "acos_clamped");
}

// ---- shape plumbing ----

template <typename S>
TensorT<S> reshape(const TensorT<S>& a, typename TensorT<S>::Shape shape) {
    if (TensorT<S>::shape_size(shape) != a.size()) throw InvalidInput("reshape: size mismatch");
    auto pa = a.ptr();
    return detail::make_op<S>(
        std::move(shape), pa->value, {pa},
        [pa](auto& self) { TensorT<S>::accumulate(*pa, self.grad); }, "reshape");
}

/// Channel slice [c0, c1) of an NCHW tensor.
template <typename S>
TensorT<S> slice_channels(const TensorT<S>& x, Eigen::Index c0, Eigen::Index c1) {
    detail::require_rank(x, 4, "slice_channels");
    const Eigen::Index N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);
    if (c0 < 0 || c1 > C || c0 >= c1) throw InvalidInput("slice_channels: bad channel range");
    const Eigen::Index Cs = c1 - c0;
    typename TensorT<S>::Array value(N * Cs * HW);
    auto px = x.ptr();
    for (Eigen::Index n = 0; n < N; ++n)
        value.segment(n * Cs * HW, Cs * HW) = px->value.segment((n * C + c0) * HW, Cs * HW);
    return detail::make_op<S>(
        {N, Cs, x.extent(2), x.extent(3)}, std::move(value), {px},
        [px, N, C, HW, c0, Cs](auto& self) {
            if (!px->requires_grad) return;
            TensorT<S>::ensure_grad(*px);
            for (Eigen::Index n = 0; n < N; ++n)
                px->grad.segment((n * C + c0) * HW, Cs * HW) += self.grad.segment(n * Cs * HW, Cs * HW);
        },
        "slice_channels");
}

/// Concatenation of two NCHW tensors along the channel axis.
template <typename S>
TensorT<S> concat_channels(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_rank(a, 4, "concat_channels");
    detail::require_rank(b, 4, "concat_channels");
    const Eigen::Index N = a.extent(0), Ca = a.extent(1), Cb = b.extent(1);
    const Eigen::Index HW = a.extent(2) * a.extent(3);
    if (b.extent(0) != N || b.extent(2) != a.extent(2) || b.extent(3) != a.extent(3))
        throw InvalidInput("concat_channels: incompatible shapes");
    auto pa = a.ptr(), pb = b.ptr();
    typename TensorT<S>::Array value(N * (Ca + Cb) * HW);
    for (Eigen::Index n = 0; n < N; ++n) {
        value.segment(n * (Ca + Cb) * HW, Ca * HW) = pa->value.segment(n * Ca * HW, Ca * HW);
        value.segment(n * (Ca + Cb) * HW + Ca * HW, Cb * HW) = pb->value.segment(n * Cb * HW, Cb * HW);
    }
    return detail::make_op<S>(
        {N, Ca + Cb, a.extent(2), a.extent(3)}, std::move(value), {pa, pb},
        [pa, pb, N, Ca, Cb, HW](auto& self) {
            for (Eigen::Index n = 0; n < N; ++n) {
                if (pa->requires_grad) {
                    TensorT<S>::ensure_grad(*pa);
                    pa->grad.segment(n * Ca * HW, Ca * HW) +=
                        self.grad.segment(n * (Ca + Cb) * HW, Ca * HW);
                }
                if (pb->requires_grad) {
                    TensorT<S>::ensure_grad(*pb);
                    pb->grad.segment(n * Cb * HW, Cb * HW) +=
                        self.grad.segment(n * (Ca + Cb) * HW + Ca * HW, Cb * HW);
                }
            }
        },
        "concat_channels");
}

// ---- dense algebra ----

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const Eigen::Index M = a.extent(0), K = a.extent(1), N = b.extent(1);
    if (b.extent(0) != K) throw InvalidInput("matmul: inner dimension mismatch");
    auto pa = a.ptr(), pb = b.ptr();
    using Map = Eigen::Map<detail::RowMat<S>>;
    using CMap = Eigen::Map<const detail::RowMat<S>>;
    typename TensorT<S>::Array value(M * N);
    Map(value.data(), M, N).noalias() = CMap(pa->value.data(), M, K) * CMap(pb->value.data(), K, N);
    return detail::make_op<S>(
        {M, N}, std::move(value), {pa, pb},
        [pa, pb, M, K, N](auto& self) {
            CMap g(self.grad.data(), M, N);
            CMap av(pa->value.data(), M, K);
            CMap bv(pb->value.data(), K, N);
            if (pa->requires_grad) {
                TensorT<S>::ensure_grad(*pa);
                Map(pa->grad.data(), M, K).noalias() += g * bv.transpose();
            }
            if (pb->requires_grad) {
                TensorT<S>::ensure_grad(*pb);
                Map(pb->grad.data(), K, N).noalias() += av.transpose() * g;
            }
        },
        "matmul");
}

/// x[N,F] * w[F,G] + b[G] broadcast over rows.
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
    detail::require_rank(x, 2, "linear");
    detail::require_rank(w, 2, "linear");
    detail::require_rank(b, 1, "linear");
    const Eigen::Index N = x.extent(0), F = x.extent(1), G = w.extent(1);
    if (w.extent(0) != F || b.extent(0) != G) throw InvalidInput("linear: shape mismatch");
    auto px = x.ptr(), pw = w.ptr(), pb = b.ptr();
    using Map = Eigen::Map<detail::RowMat<S>>;
    using CMap = Eigen::Map<const detail::RowMat<S>>;
    typename TensorT<S>::Array value(N * G);
    Map out(value.data(), N, G);
    out.noalias() = CMap(px->value.data(), N, F) * CMap(pw->value.data(), F, G);
    out.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(pb->value.data(), G);
    return detail::make_op<S>(
        {N, G}, std::move(value), {px, pw, pb},
        [px, pw, pb, N, F, G](auto& self) {
            CMap g(self.grad.data(), N, G);
            if (px->requires_grad) {
                TensorT<S>::ensure_grad(*px);
                Map(px->grad.data(), N, F).noalias() += g * CMap(pw->value.data(), F, G).transpose();
            }
            if (pw->requires_grad) {
                TensorT<S>::ensure_grad(*pw);
                Map(pw->grad.data(), F, G).noalias() +=
                    CMap(px->value.data(), N, F).transpose() * g;
            }
            if (pb->requires_grad) {
                TensorT<S>::ensure_grad(*pb);
                Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(pb->grad.data(), G) +=
                    g.colwise().sum();
            }
        },
        "linear");
}

/// Batched matmul over dim 0 with optional transposes of the 2-D slices.
template <typename S>
TensorT<S> bmm(const TensorT<S>& a, const TensorT<S>& b, bool trans_a = false, bool trans_b = false) {
    detail::require_rank(a, 3, "bmm");
    detail::require_rank(b, 3, "bmm");
    const Eigen::Index B = a.extent(0);
    if (b.extent(0) != B) throw InvalidInput("bmm: batch mismatch");
    const Eigen::Index am = a.extent(1), an = a.extent(2);
    const Eigen::Index bm = b.extent(1), bn = b.extent(2);
    const Eigen::Index M = trans_a ? an : am, K = trans_a ? am : an;
    const Eigen::Index Kb = trans_b ? bn : bm, N = trans_b ? bm : bn;
    if (K != Kb) throw InvalidInput("bmm: inner dimension mismatch");
    auto pa = a.ptr(), pb = b.ptr();
    using Map = Eigen::Map<detail::RowMat<S>>;
    using CMap = Eigen::Map<const detail::RowMat<S>>;
    typename TensorT<S>::Array value(B * M * N);
    for (Eigen::Index i = 0; i < B; ++i) {
        CMap av(pa->value.data() + i * am * an, am, an);
        CMap bv(pb->value.data() + i * bm * bn, bm, bn);
        Map out(value.data() + i * M * N, M, N);
        if (!trans_a && !trans_b) out.noalias() = av * bv;
        else if (trans_a && !trans_b) out.noalias() = av.transpose() * bv;
        else if (!trans_a && trans_b) out.noalias() = av * bv.transpose();
        else out.noalias() = av.transpose() * bv.transpose();
    }
    return detail::make_op<S>(
        {B, M, N}, std::move(value), {pa, pb},
        [pa, pb, B, am, an, bm, bn, M, N, trans_a, trans_b](auto& self) {
            if (pa->requires_grad) TensorT<S>::ensure_grad(*pa);
            if (pb->requires_grad) TensorT<S>::ensure_grad(*pb);
            for (Eigen::Index i = 0; i < B; ++i) {
                CMap g(self.grad.data() + i * M * N, M, N);
                CMap av(pa->value.data() + i * am * an, am, an);
                CMap bv(pb->value.data() + i * bm * bn, bm, bn);
                if (pa->requires_grad) {
                    Map ga(pa->grad.data() + i * am * an, am, an);
                    if (!trans_a && !trans_b) ga.noalias() += g * bv.transpose();
                    else if (trans_a && !trans_b) ga.noalias() += bv * g.transpose();
                    else if (!trans_a && trans_b) ga.noalias() += g * bv;
                    else ga.noalias() += bv.transpose() * g.transpose();
                }
                if (pb->requires_grad) {
                    Map gb(pb->grad.data() + i * bm * bn, bm, bn);
                    if (!trans_a && !trans_b) gb.noalias() += av.transpose() * g;
                    else if (trans_a && !trans_b) gb.noalias() += av * g;
                    else if (!trans_a && trans_b) gb.noalias() += g.transpose() * av;
                    else gb.noalias() += g.transpose() * av.transpose();
                }
            }
        },
        "bmm");
}

/// Softmax over the last axis; rows sum to 1 and the result is shift-invariant.
template <typename S>
TensorT<S> softmax(const TensorT<S>& a, int axis = -1) {
    const int last = a.rank() - 1;
    if (axis == -1) axis = last;
    if (axis != last) throw InvalidInput("softmax: only the last axis is supported");
    const Eigen::Index L = a.extent(last);
    const Eigen::Index R = a.size() / L;
    auto pa = a.ptr();
    typename TensorT<S>::Array value(a.size());
    for (Eigen::Index r = 0; r < R; ++r) {
        auto row = pa->value.segment(r * L, L);
        const S m = row.maxCoeff();
        auto e = (row - m).exp();
        value.segment(r * L, L) = e / e.sum();
    }
    return detail::make_op<S>(
        a.shape(), std::move(value), {pa},
        [pa, R, L](auto& self) {
            if (!pa->requires_grad) return;
            TensorT<S>::ensure_grad(*pa);
            for (Eigen::Index r = 0; r < R; ++r) {
                auto s = self.value.segment(r * L, L);
                auto g = self.grad.segment(r * L, L);
                const S dot = (g * s).sum();
                pa->grad.segment(r * L, L) += s * (g - dot);
            }
        },
        "softmax");
}

/// Row-wise L2 normalization of a rank-2 tensor (guard 1e-12 under the root).
template <typename S>
TensorT<S> l2_normalize(const TensorT<S>& a, int axis = 1) {
    detail::require_rank(a, 2, "l2_normalize");
    if (axis != 1) throw InvalidInput("l2_normalize: only axis 1 is supported");
    const Eigen::Index N = a.extent(0), F = a.extent(1);
    auto pa = a.ptr();
    typename TensorT<S>::Array value(a.size());
    typename TensorT<S>::Array norms(N);
    for (Eigen::Index r = 0; r < N; ++r) {
        auto row = pa->value.segment(r * F, F);
        norms(r) = std::sqrt(row.square().sum() + S(1e-12));
        value.segment(r * F, F) = row / norms(r);
    }
    auto norms_ptr = std::make_shared<typename TensorT<S>::Array>(std::move(norms));
    return detail::make_op<S>(
        a.shape(), std::move(value), {pa},
        [pa, norms_ptr, N, F](auto& self) {
            if (!pa->requires_grad) return;
            TensorT<S>::ensure_grad(*pa);
            for (Eigen::Index r = 0; r < N; ++r) {
                auto x = pa->value.segment(r * F, F);
                auto g = self.grad.segment(r * F, F);
                const S n = (*norms_ptr)(r);
                const S gx = (g * x).sum();
                pa->grad.segment(r * F, F) += g / n - x * (gx / (n * n * n));
            }
        },
        "l2_normalize");
}

// ---- convolution and pooling ----

namespace detail {

struct ConvDims {
    Eigen::Index N, C, H, W, K, kh, kw, Ho, Wo;
};

template <typename S>
ConvDims conv_dims(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b, int stride,
                   int padding) {
    require_rank(x, 4, "conv2d");
    require_rank(w, 4, "conv2d");
    require_rank(b, 1, "conv2d");
    if (stride < 1 || padding < 0) throw InvalidInput("conv2d: bad stride/padding");
    ConvDims d;
    d.N = x.extent(0);
    d.C = x.extent(1);
    d.H = x.extent(2);
    d.W = x.extent(3);
    d.K = w.extent(0);
    d.kh = w.extent(2);
    d.kw = w.extent(3);
    if (w.extent(1) != d.C) throw InvalidInput("conv2d: kernel channel mismatch");
    if (b.extent(0) != d.K) throw InvalidInput("conv2d: bias length mismatch");
    if (d.kh > d.H + 2 * padding || d.kw > d.W + 2 * padding)
        throw InvalidInput("conv2d: window larger than padded input");
    d.Ho = (d.H + 2 * padding - d.kh) / stride + 1;
    d.Wo = (d.W + 2 * padding - d.kw) / stride + 1;
    return d;
}

// patch matrix of one image: rows = C*kh*kw patch entries, cols = output pixels
template <typename S>
void im2col(const S* x, const ConvDims& d, int stride, int padding, RowMat<S>& col) {
    col.resize(d.C * d.kh * d.kw, d.Ho * d.Wo);
    for (Eigen::Index c = 0; c < d.C; ++c)
        for (Eigen::Index ky = 0; ky < d.kh; ++ky)
            for (Eigen::Index kx = 0; kx < d.kw; ++kx) {
                S* dst = col.row((c * d.kh + ky) * d.kw + kx).data();
                for (Eigen::Index oy = 0; oy < d.Ho; ++oy) {
                    const Eigen::Index iy = oy * stride - padding + ky;
                    for (Eigen::Index ox = 0; ox < d.Wo; ++ox) {
                        const Eigen::Index ix = ox * stride - padding + kx;
                        const bool inside = iy >= 0 && iy < d.H && ix >= 0 && ix < d.W;
                        dst[oy * d.Wo + ox] = inside ? x[(c * d.H + iy) * d.W + ix] : S(0);
                    }
                }
            }
}

template <typename S>
void col2im_add(const RowMat<S>& col, const ConvDims& d, int stride, int padding, S* dx) {
    for (Eigen::Index c = 0; c < d.C; ++c)
        for (Eigen::Index ky = 0; ky < d.kh; ++ky)
            for (Eigen::Index kx = 0; kx < d.kw; ++kx) {
                const S* src = col.row((c * d.kh + ky) * d.kw + kx).data();
                for (Eigen::Index oy = 0; oy < d.Ho; ++oy) {
                    const Eigen::Index iy = oy * stride - padding + ky;
                    if (iy < 0 || iy >= d.H) continue;
                    for (Eigen::Index ox = 0; ox < d.Wo; ++ox) {
                        const Eigen::Index ix = ox * stride - padding + kx;
                        if (ix < 0 || ix >= d.W) continue;
                        dx[(c * d.H + iy) * d.W + ix] += src[oy * d.Wo + ox];
                    }
                }
            }
}

}  // namespace detail

/// 2-D cross-correlation, NCHW x [K,C,kh,kw] -> [N,K,Ho,Wo] with
/// Ho = floor((H + 2*padding - kh)/stride) + 1 (the usual floor convention).
template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b, int stride = 1,
                  int padding = 0, ConvImpl impl = ConvImpl::im2col) {
    const detail::ConvDims d = detail::conv_dims(x, w, b, stride, padding);
    auto px = x.ptr(), pw = w.ptr(), pb = b.ptr();
    using Map = Eigen::Map<detail::RowMat<S>>;
    using CMap = Eigen::Map<const detail::RowMat<S>>;
    typename TensorT<S>::Array value(d.N * d.K * d.Ho * d.Wo);

    if (impl == ConvImpl::im2col) {
        const bool rg = px->requires_grad || pw->requires_grad || pb->requires_grad;
        auto cols = std::make_shared<std::vector<detail::RowMat<S>>>(
            static_cast<std::size_t>(rg ? d.N : 0));
        detail::RowMat<S> scratch;
        CMap wmat(pw->value.data(), d.K, d.C * d.kh * d.kw);
        for (Eigen::Index n = 0; n < d.N; ++n) {
            detail::RowMat<S>& col = rg ? (*cols)[static_cast<std::size_t>(n)] : scratch;
            detail::im2col(px->value.data() + n * d.C * d.H * d.W, d, stride, padding, col);
            Map out(value.data() + n * d.K * d.Ho * d.Wo, d.K, d.Ho * d.Wo);
            out.noalias() = wmat * col;
            out.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(pb->value.data(), d.K);
        }
        return detail::make_op<S>(
            {d.N, d.K, d.Ho, d.Wo}, std::move(value), {px, pw, pb},
            [px, pw, pb, d, stride, padding, cols](auto& self) {
                if (px->requires_grad) TensorT<S>::ensure_grad(*px);
                if (pw->requires_grad) TensorT<S>::ensure_grad(*pw);
                if (pb->requires_grad) TensorT<S>::ensure_grad(*pb);
                CMap wmat(pw->value.data(), d.K, d.C * d.kh * d.kw);
                for (Eigen::Index n = 0; n < d.N; ++n) {
                    CMap g(self.grad.data() + n * d.K * d.Ho * d.Wo, d.K, d.Ho * d.Wo);
                    const detail::RowMat<S>& col = (*cols)[static_cast<std::size_t>(n)];
                    if (pw->requires_grad)
                        Map(pw->grad.data(), d.K, d.C * d.kh * d.kw).noalias() += g * col.transpose();
                    if (pb->requires_grad)
                        Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(pb->grad.data(), d.K) +=
                            g.rowwise().sum();
                    if (px->requires_grad) {
                        detail::RowMat<S> dcol = wmat.transpose() * g;
                        detail::col2im_add(dcol, d, stride, padding,
                                           px->grad.data() + n * d.C * d.H * d.W);
                    }
                }
            },
            "conv2d");
    }

    // direct loop reference path
    for (Eigen::Index n = 0; n < d.N; ++n)
        for (Eigen::Index k = 0; k < d.K; ++k)
            for (Eigen::Index oy = 0; oy < d.Ho; ++oy)
                for (Eigen::Index ox = 0; ox < d.Wo; ++ox) {
                    S acc = pb->value(k);
                    for (Eigen::Index c = 0; c < d.C; ++c)
                        for (Eigen::Index ky = 0; ky < d.kh; ++ky) {
                            const Eigen::Index iy = oy * stride - padding + ky;
                            if (iy < 0 || iy >= d.H) continue;
                            for (Eigen::Index kx = 0; kx < d.kw; ++kx) {
                                const Eigen::Index ix = ox * stride - padding + kx;
                                if (ix < 0 || ix >= d.W) continue;
                                acc += px->value(((n * d.C + c) * d.H + iy) * d.W + ix) *
                                       pw->value(((k * d.C + c) * d.kh + ky) * d.kw + kx);
                            }
                        }
                    value(((n * d.K + k) * d.Ho + oy) * d.Wo + ox) = acc;
                }
    return detail::make_op<S>(
        {d.N, d.K, d.Ho, d.Wo}, std::move(value), {px, pw, pb},
        [px, pw, pb, d, stride, padding](auto& self) {
            if (px->requires_grad) TensorT<S>::ensure_grad(*px);
            if (pw->requires_grad) TensorT<S>::ensure_grad(*pw);
            if (pb->requires_grad) TensorT<S>::ensure_grad(*pb);
            for (Eigen::Index n = 0; n < d.N; ++n)
                for (Eigen::Index k = 0; k < d.K; ++k)
                    for (Eigen::Index oy = 0; oy < d.Ho; ++oy)
                        for (Eigen::Index ox = 0; ox < d.Wo; ++ox) {
                            const S g = self.grad(((n * d.K + k) * d.Ho + oy) * d.Wo + ox);
                            if (pb->requires_grad) pb->grad(k) += g;
                            for (Eigen::Index c = 0; c < d.C; ++c)
                                for (Eigen::Index ky = 0; ky < d.kh; ++ky) {
                                    const Eigen::Index iy = oy * stride - padding + ky;
                                    if (iy < 0 || iy >= d.H) continue;
                                    for (Eigen::Index kx = 0; kx < d.kw; ++kx) {
                                        const Eigen::Index ix = ox * stride - padding + kx;
                                        if (ix < 0 || ix >= d.W) continue;
                                        const Eigen::Index xi = ((n * d.C + c) * d.H + iy) * d.W + ix;
                                        const Eigen::Index wi = ((k * d.C + c) * d.kh + ky) * d.kw + kx;
                                        if (px->requires_grad) px->grad(xi) += g * pw->value(wi);
                                        if (pw->requires_grad) pw->grad(wi) += g * px->value(xi);
                                    }
                                }
                        }
        },
        "conv2d");
}

/// Windowed max pool; gradient routes to the first (row-major) argmax of each
/// window. Output extents floor((H-k)/stride)+1.
template <typename S>
TensorT<S> maxpool2d(const TensorT<S>& x, int k, int stride) {
    detail::require_rank(x, 4, "maxpool2d");
    if (k < 1 || stride < 1) throw InvalidInput("maxpool2d: bad window/stride");
    const Eigen::Index N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    if (k > H || k > W) throw InvalidInput("maxpool2d: window larger than input");
    const Eigen::Index Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
    auto px = x.ptr();
    typename TensorT<S>::Array value(N * C * Ho * Wo);
    auto argmax = std::make_shared<std::vector<Eigen::Index>>(static_cast<std::size_t>(value.size()));
    Eigen::Index o = 0;
    for (Eigen::Index n = 0; n < N; ++n)
        for (Eigen::Index c = 0; c < C; ++c)
            for (Eigen::Index oy = 0; oy < Ho; ++oy)
                for (Eigen::Index ox = 0; ox < Wo; ++ox, ++o) {
                    S best = -std::numeric_limits<S>::infinity();
                    Eigen::Index best_i = -1;
                    for (Eigen::Index ky = 0; ky < k; ++ky)
                        for (Eigen::Index kx = 0; kx < k; ++kx) {
                            const Eigen::Index i =
                                ((n * C + c) * H + oy * stride + ky) * W + ox * stride + kx;
                            if (px->value(i) > best) {
                                best = px->value(i);
                                best_i = i;
                            }
                        }
                    value(o) = best;
                    (*argmax)[static_cast<std::size_t>(o)] = best_i;
                }
    return detail::make_op<S>(
        {N, C, Ho, Wo}, std::move(value), {px},
        [px, argmax](auto& self) {
            if (!px->requires_grad) return;
            TensorT<S>::ensure_grad(*px);
            for (Eigen::Index i = 0; i < self.grad.size(); ++i)
                px->grad((*argmax)[static_cast<std::size_t>(i)]) += self.grad(i);
        },
        "maxpool2d");
}

/// Windowed average pool with the same floor output convention as maxpool2d.
template <typename S>
TensorT<S> avgpool2d(const TensorT<S>& x, int k, int stride) {
    detail::require_rank(x, 4, "avgpool2d");
    if (k < 1 || stride < 1) throw InvalidInput("avgpool2d: bad window/stride");
    const Eigen::Index N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
    if (k > H || k > W) throw InvalidInput("avgpool2d: window larger than input");
    const Eigen::Index Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
    auto px = x.ptr();
    const S inv = S(1) / S(k * k);
    typename TensorT<S>::Array value(N * C * Ho * Wo);
    Eigen::Index o = 0;
    for (Eigen::Index n = 0; n < N; ++n)
        for (Eigen::Index c = 0; c < C; ++c)
            for (Eigen::Index oy = 0; oy < Ho; ++oy)
                for (Eigen::Index ox = 0; ox < Wo; ++ox, ++o) {
                    S acc = S(0);
                    for (Eigen::Index ky = 0; ky < k; ++ky)
                        for (Eigen::Index kx = 0; kx < k; ++kx)
                            acc += px->value(((n * C + c) * H + oy * stride + ky) * W + ox * stride + kx);
                    value(o) = acc * inv;
                }
    return detail::make_op<S>(
        {N, C, Ho, Wo}, std::move(value), {px},
        [px, N, C, H, W, Ho, Wo, k, stride, inv](auto& self) {
            if (!px->requires_grad) return;
            TensorT<S>::ensure_grad(*px);
            Eigen::Index o = 0;
            for (Eigen::Index n = 0; n < N; ++n)
                for (Eigen::Index c = 0; c < C; ++c)
                    for (Eigen::Index oy = 0; oy < Ho; ++oy)
                        for (Eigen::Index ox = 0; ox < Wo; ++ox, ++o) {
                            const S g = self.grad(o) * inv;
                            for (Eigen::Index ky = 0; ky < k; ++ky)
                                for (Eigen::Index kx = 0; kx < k; ++kx)
                                    px->grad(((n * C + c) * H + oy * stride + ky) * W + ox * stride +
                                             kx) += g;
                        }
        },
        "avgpool2d");
}

/// Global max over H,W -> [N,C,1,1]; ties go to the first row-major position.
template <typename S>
TensorT<S> global_maxpool(const TensorT<S>& x) {
    detail::require_rank(x, 4, "global_maxpool");
    const Eigen::Index N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);
    auto px = x.ptr();
    typename TensorT<S>::Array value(N * C);
    auto argmax = std::make_shared<std::vector<Eigen::Index>>(static_cast<std::size_t>(N * C));
    for (Eigen::Index nc = 0; nc < N * C; ++nc) {
        Eigen::Index where = 0;
        value(nc) = px->value.segment(nc * HW, HW).maxCoeff(&where);
        (*argmax)[static_cast<std::size_t>(nc)] = nc * HW + where;
    }
    return detail::make_op<S>(
        {N, C, 1, 1}, std::move(value), {px},
        [px, argmax](auto& self) {
            if (!px->requires_grad) return;
            TensorT<S>::ensure_grad(*px);
            for (Eigen::Index i = 0; i < self.grad.size(); ++i)
                px->grad((*argmax)[static_cast<std::size_t>(i)]) += self.grad(i);
        },
        "global_maxpool");
}

/// Global mean over H,W -> [N,C,1,1].
template <typename S>
TensorT<S> global_avgpool(const TensorT<S>& x) {
    detail::require_rank(x, 4, "global_avgpool");
    const Eigen::Index N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);
    auto px = x.ptr();
    typename TensorT<S>::Array value(N * C);
    for (Eigen::Index nc = 0; nc < N * C; ++nc) value(nc) = px->value.segment(nc * HW, HW).mean();
    return detail::make_op<S>(
        {N, C, 1, 1}, std::move(value), {px},
        [px, HW](auto& self) {
            if (!px->requires_grad) return;
            TensorT<S>::ensure_grad(*px);
            for (Eigen::Index nc = 0; nc < self.grad.size(); ++nc)
                px->grad.segment(nc * HW, HW) += self.grad(nc) / S(HW);
        },
        "global_avgpool");
}

// ---- broadcasting and reductions ----

/// x[N,C,H,W] * gate[N,C], gate broadcast over the spatial extent.
template <typename S>
TensorT<S> mul_channel(const TensorT<S>& x, const TensorT<S>& gate) {
    detail::require_rank(x, 4, "mul_channel");
    detail::require_rank(gate, 2, "mul_channel");
    const Eigen::Index N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);
    if (gate.extent(0) != N || gate.extent(1) != C) throw InvalidInput("mul_channel: gate shape");
    auto px = x.ptr(), pg = gate.ptr();
    typename TensorT<S>::Array value(x.size());
    for (Eigen::Index nc = 0; nc < N * C; ++nc)
        value.segment(nc * HW, HW) = px->value.segment(nc * HW, HW) * pg->value(nc);
    return detail::make_op<S>(
        x.shape(), std::move(value), {px, pg},
        [px, pg, N, C, HW](auto& self) {
            for (Eigen::Index nc = 0; nc < N * C; ++nc) {
                auto g = self.grad.segment(nc * HW, HW);
                if (px->requires_grad) {
                    TensorT<S>::ensure_grad(*px);
                    px->grad.segment(nc * HW, HW) += g * pg->value(nc);
                }
                if (pg->requires_grad) {
                    TensorT<S>::ensure_grad(*pg);
                    pg->grad(nc) += (g * px->value.segment(nc * HW, HW)).sum();
                }
            }
        },
        "mul_channel");
}

/// x[N,C,H,W] / gains[N,C]; differentiable in both arguments.
template <typename S>
TensorT<S> div_channel(const TensorT<S>& x, const TensorT<S>& gains) {
    detail::require_rank(x, 4, "div_channel");
    detail::require_rank(gains, 2, "div_channel");
    const Eigen::Index N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);
    if (gains.extent(0) != N || gains.extent(1) != C) throw InvalidInput("div_channel: gains shape");
    if ((gains.value().abs() < S(1e-12)).any()) throw NumericFault("div_channel: gain under 1e-12");
    auto px = x.ptr(), pg = gains.ptr();
    typename TensorT<S>::Array value(x.size());
    for (Eigen::Index nc = 0; nc < N * C; ++nc)
        value.segment(nc * HW, HW) = px->value.segment(nc * HW, HW) / pg->value(nc);
    return detail::make_op<S>(
        x.shape(), std::move(value), {px, pg},
        [px, pg, N, C, HW](auto& self) {
            for (Eigen::Index nc = 0; nc < N * C; ++nc) {
                auto g = self.grad.segment(nc * HW, HW);
                const S gain = pg->value(nc);
                if (px->requires_grad) {
                    TensorT<S>::ensure_grad(*px);
                    px->grad.segment(nc * HW, HW) += g / gain;
                }
                if (pg->requires_grad) {
                    TensorT<S>::ensure_grad(*pg);
                    pg->grad(nc) += -(g * self.value.segment(nc * HW, HW)).sum() / gain;
                }
            }
        },
        "div_channel");
}

/// x[N,C,H,W] * map[N,1,H,W], map broadcast over channels.
template <typename S>
TensorT<S> mul_spatial(const TensorT<S>& x, const TensorT<S>& map) {
    detail::require_rank(x, 4, "mul_spatial");
    detail::require_rank(map, 4, "mul_spatial");
    const Eigen::Index N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);
    if (map.extent(0) != N || map.extent(1) != 1 || map.extent(2) != x.extent(2) ||
        map.extent(3) != x.extent(3))
        throw InvalidInput("mul_spatial: map shape");
    auto px = x.ptr(), pm = map.ptr();
    typename TensorT<S>::Array value(x.size());
    for (Eigen::Index n = 0; n < N; ++n)
        for (Eigen::Index c = 0; c < C; ++c)
            value.segment((n * C + c) * HW, HW) =
                px->value.segment((n * C + c) * HW, HW) * pm->value.segment(n * HW, HW);
    return detail::make_op<S>(
        x.shape(), std::move(value), {px, pm},
        [px, pm, N, C, HW](auto& self) {
            for (Eigen::Index n = 0; n < N; ++n)
                for (Eigen::Index c = 0; c < C; ++c) {
                    auto g = self.grad.segment((n * C + c) * HW, HW);
                    if (px->requires_grad) {
                        TensorT<S>::ensure_grad(*px);
                        px->grad.segment((n * C + c) * HW, HW) += g * pm->value.segment(n * HW, HW);
                    }
                    if (pm->requires_grad) {
                        TensorT<S>::ensure_grad(*pm);
                        pm->grad.segment(n * HW, HW) += g * px->value.segment((n * C + c) * HW, HW);
                    }
                }
        },
        "mul_spatial");
}

/// Channel-wise max map -> [N,1,H,W] (ties to the lowest channel).
template <typename S>
TensorT<S> channel_max(const TensorT<S>& x) {
    detail::require_rank(x, 4, "channel_max");
    const Eigen::Index N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);
    auto px = x.ptr();
    typename TensorT<S>::Array value(N * HW);
    auto argmax = std::make_shared<std::vector<Eigen::Index>>(static_cast<std::size_t>(N * HW));
    for (Eigen::Index n = 0; n < N; ++n)
        for (Eigen::Index p = 0; p < HW; ++p) {
            S best = px->value(n * C * HW + p);
            Eigen::Index best_c = 0;
            for (Eigen::Index c = 1; c < C; ++c) {
                const S v = px->value((n * C + c) * HW + p);
                if (v > best) {
                    best = v;
                    best_c = c;
                }
            }
            value(n * HW + p) = best;
            (*argmax)[static_cast<std::size_t>(n * HW + p)] = (n * C + best_c) * HW + p;
        }
    return detail::make_op<S>(
        {N, 1, x.extent(2), x.extent(3)}, std::move(value), {px},
        [px, argmax](auto& self) {
            if (!px->requires_grad) return;
            TensorT<S>::ensure_grad(*px);
            for (Eigen::Index i = 0; i < self.grad.size(); ++i)
                px->grad((*argmax)[static_cast<std::size_t>(i)]) += self.grad(i);
        },
        "channel_max");
}

/// Channel-wise mean map -> [N,1,H,W].
template <typename S>
TensorT<S> channel_mean(const TensorT<S>& x) {
    detail::require_rank(x, 4, "channel_mean");
    const Eigen::Index N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);
    auto px = x.ptr();
    typename TensorT<S>::Array value = TensorT<S>::Array::Zero(N * HW);
    for (Eigen::Index n = 0; n < N; ++n)
        for (Eigen::Index c = 0; c < C; ++c)
            value.segment(n * HW, HW) += px->value.segment((n * C + c) * HW, HW);
    value /= S(C);
    return detail::make_op<S>(
        {N, 1, x.extent(2), x.extent(3)}, std::move(value), {px},
        [px, N, C, HW](auto& self) {
            if (!px->requires_grad) return;
            TensorT<S>::ensure_grad(*px);
            for (Eigen::Index n = 0; n < N; ++n)
                for (Eigen::Index c = 0; c < C; ++c)
                    px->grad.segment((n * C + c) * HW, HW) += self.grad.segment(n * HW, HW) / S(C);
        },
        "channel_mean");
}

/// Sum over H,W -> [N,C].
template <typename S>
TensorT<S> spatial_sum(const TensorT<S>& x) {
    detail::require_rank(x, 4, "spatial_sum");
    const Eigen::Index N = x.extent(0), C = x.extent(1), HW = x.extent(2) * x.extent(3);
    auto px = x.ptr();
    typename TensorT<S>::Array value(N * C);
    for (Eigen::Index nc = 0; nc < N * C; ++nc) value(nc) = px->value.segment(nc * HW, HW).sum();
    return detail::make_op<S>(
        {N, C}, std::move(value), {px},
        [px, HW](auto& self) {
            if (!px->requires_grad) return;
            TensorT<S>::ensure_grad(*px);
            for (Eigen::Index nc = 0; nc < self.grad.size(); ++nc)
                px->grad.segment(nc * HW, HW) += self.grad(nc);
        },
        "spatial_sum");
}

/// Row sums of a rank-2 tensor -> [N].
template <typename S>
TensorT<S> row_sum(const TensorT<S>& a) {
    detail::require_rank(a, 2, "row_sum");
    const Eigen::Index N = a.extent(0), F = a.extent(1);
    auto pa = a.ptr();
    typename TensorT<S>::Array value(N);
    for (Eigen::Index r = 0; r < N; ++r) value(r) = pa->value.segment(r * F, F).sum();
    return detail::make_op<S>(
        {N}, std::move(value), {pa},
        [pa, F](auto& self) {
            if (!pa->requires_grad) return;
            TensorT<S>::ensure_grad(*pa);
            for (Eigen::Index r = 0; r < self.grad.size(); ++r)
                pa->grad.segment(r * F, F) += self.grad(r);
        },
        "row_sum");
}

template <typename S>
TensorT<S> sum_all(const TensorT<S>& a) {
    auto pa = a.ptr();
    typename TensorT<S>::Array value(1);
    value(0) = pa->value.sum();
    return detail::make_op<S>(
        {1}, std::move(value), {pa},
        [pa](auto& self) { TensorT<S>::accumulate(*pa, self.grad(0)); }, "sum_all");
}

template <typename S>
TensorT<S> mean_all(const TensorT<S>& a) {
    auto pa = a.ptr();
    typename TensorT<S>::Array value(1);
    value(0) = pa->value.mean();
    const S inv = S(1) / S(a.size());
    return detail::make_op<S>(
        {1}, std::move(value), {pa},
        [pa, inv](auto& self) { TensorT<S>::accumulate(*pa, self.grad(0) * inv); }, "mean_all");
}

/// Confidence-weighted spatial pooling: out[n,c] = sum_p conf[n,p]*ill[n,c,p]
/// / (sum_p conf[n,p] + eps). A sample whose confidence sums to zero falls
/// back to the unweighted spatial mean and bumps *fallbacks.
template <typename S>
TensorT<S> confidence_pool(const TensorT<S>& ill, const TensorT<S>& conf, S eps = S(1e-9),
                           std::atomic<long>* fallbacks = nullptr) {
    detail::require_rank(ill, 4, "confidence_pool");
    detail::require_rank(conf, 4, "confidence_pool");
    const Eigen::Index N = ill.extent(0), C = ill.extent(1), HW = ill.extent(2) * ill.extent(3);
    if (conf.extent(0) != N || conf.extent(1) != 1 || conf.extent(2) != ill.extent(2) ||
        conf.extent(3) != ill.extent(3))
        throw InvalidInput("confidence_pool: confidence shape");
    if ((conf.value() < S(0)).any()) throw InvalidInput("confidence_pool: negative confidence");
    auto pi = ill.ptr(), pc = conf.ptr();
    typename TensorT<S>::Array value(N * C);
    auto fellback = std::make_shared<std::vector<bool>>(static_cast<std::size_t>(N), false);
    for (Eigen::Index n = 0; n < N; ++n) {
        const S denom = pc->value.segment(n * HW, HW).sum();
        if (denom <= S(0)) {
            (*fellback)[static_cast<std::size_t>(n)] = true;
            if (fallbacks) ++(*fallbacks);
            for (Eigen::Index c = 0; c < C; ++c)
                value(n * C + c) = pi->value.segment((n * C + c) * HW, HW).mean();
        } else {
            for (Eigen::Index c = 0; c < C; ++c)
                value(n * C + c) =
                    (pi->value.segment((n * C + c) * HW, HW) * pc->value.segment(n * HW, HW)).sum() /
                    (denom + eps);
        }
    }
    return detail::make_op<S>(
        {N, C}, std::move(value), {pi, pc},
        [pi, pc, N, C, HW, eps, fellback](auto& self) {
            for (Eigen::Index n = 0; n < N; ++n) {
                if ((*fellback)[static_cast<std::size_t>(n)]) {
                    // weights were replaced by the constant 1, so only the
                    // estimates receive gradient
                    if (pi->requires_grad) {
                        TensorT<S>::ensure_grad(*pi);
                        for (Eigen::Index c = 0; c < C; ++c)
                            pi->grad.segment((n * C + c) * HW, HW) += self.grad(n * C + c) / S(HW);
                    }
                    continue;
                }
                const S denom = pc->value.segment(n * HW, HW).sum() + eps;
                for (Eigen::Index c = 0; c < C; ++c) {
                    const S g = self.grad(n * C + c);
                    if (pi->requires_grad) {
                        TensorT<S>::ensure_grad(*pi);
                        pi->grad.segment((n * C + c) * HW, HW) +=
                            g * pc->value.segment(n * HW, HW) / denom;
                    }
                    if (pc->requires_grad) {
                        TensorT<S>::ensure_grad(*pc);
                        pc->grad.segment(n * HW, HW) +=
                            g * (pi->value.segment((n * C + c) * HW, HW) - self.value(n * C + c)) /
                            denom;
                    }
                }
            }
        },
        "confidence_pool");
}

}  // namespace vkcc
