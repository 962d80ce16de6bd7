#pragma once

#include <cmath>

#include "repq/counter.hpp"
#include "repq/kernels.hpp"
#include "repq/tensor.hpp"

// Differentiable tensor operations. Every op validates shapes, computes the
// forward value eagerly and records a backward closure on the result node.

namespace repq {

template <typename T>
using ImplRef = typename Tensor<T>::Impl;

namespace detail {

template <typename T>
inline void add_into(typename Tensor<T>::Impl& p, const std::vector<T>& g) {
    accumulate_grad<T>(p, g);
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
    require(a == b, std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

// number of channels = last dim; rows = everything before it
inline int64_t channel_rows(const Shape& s, const char* op) {
    require(!s.empty(), std::string(op) + ": rank-0 input");
    int64_t rows = 1;
    for (size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
    return rows;
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "add");
    std::vector<T> out(a.data());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] += b.data()[i];
    auto pa = a.impl(), pb = b.impl();
    return Tensor<T>::make_node(a.shape(), std::move(out), "add", {a, b},
                                [pa, pb](ImplRef<T>& self) {
                                    detail::add_into<T>(*pa, self.grad);
                                    detail::add_into<T>(*pb, self.grad);
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "sub");
    std::vector<T> out(a.data());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] -= b.data()[i];
    auto pa = a.impl(), pb = b.impl();
    return Tensor<T>::make_node(a.shape(), std::move(out), "sub", {a, b},
                                [pa, pb](ImplRef<T>& self) {
                                    detail::add_into<T>(*pa, self.grad);
                                    if (!pb->requires_grad) return;
                                    std::vector<T> g(self.grad);
                                    for (auto& v : g) v = -v;
                                    detail::add_into<T>(*pb, g);
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "mul");
    mul_count_add(a.numel());
    std::vector<T> out(a.data());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] *= b.data()[i];
    auto pa = a.impl(), pb = b.impl();
    return Tensor<T>::make_node(a.shape(), std::move(out), "mul", {a, b},
                                [pa, pb](ImplRef<T>& self) {
                                    if (pa->requires_grad) {
                                        std::vector<T> g(self.grad);
                                        for (size_t i = 0; i < g.size(); ++i) g[i] *= pb->data[i];
                                        detail::add_into<T>(*pa, g);
                                    }
                                    if (pb->requires_grad) {
                                        std::vector<T> g(self.grad);
                                        for (size_t i = 0; i < g.size(); ++i) g[i] *= pa->data[i];
                                        detail::add_into<T>(*pb, g);
                                    }
                                });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a.shape(), b.shape(), "div");
    for (T v : b.data())
        if (v == T(0)) throw std::invalid_argument("div: zero denominator");
    mul_count_add(a.numel());
    std::vector<T> out(a.data());
    for (int64_t i = 0; i < a.numel(); ++i) out[i] /= b.data()[i];
    auto pa = a.impl(), pb = b.impl();
    return Tensor<T>::make_node(
        a.shape(), std::move(out), "div", {a, b}, [pa, pb](ImplRef<T>& self) {
            if (pa->requires_grad) {
                std::vector<T> g(self.grad);
                for (size_t i = 0; i < g.size(); ++i) g[i] /= pb->data[i];
                detail::add_into<T>(*pa, g);
            }
            if (pb->requires_grad) {
                std::vector<T> g(self.grad);
                for (size_t i = 0; i < g.size(); ++i)
                    g[i] *= -pa->data[i] / (pb->data[i] * pb->data[i]);
                detail::add_into<T>(*pb, g);
            }
        });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> out(a.data());
    for (auto& v : out) v += c;
    auto pa = a.impl();
    return Tensor<T>::make_node(a.shape(), std::move(out), "add_scalar", {a},
                                [pa](ImplRef<T>& self) { detail::add_into<T>(*pa, self.grad); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
    mul_count_add(a.numel());
    std::vector<T> out(a.data());
    for (auto& v : out) v *= c;
    auto pa = a.impl();
    return Tensor<T>::make_node(a.shape(), std::move(out), "mul_scalar", {a},
                                [pa, c](ImplRef<T>& self) {
                                    std::vector<T> g(self.grad);
                                    for (auto& v : g) v *= c;
                                    detail::add_into<T>(*pa, g);
                                });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
    return mul_scalar(a, T(-1));
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    mul_count_add(a.numel());
    std::vector<T> out(a.data());
    for (auto& v : out) v *= v;
    auto pa = a.impl();
    return Tensor<T>::make_node(a.shape(), std::move(out), "square", {a},
                                [pa](ImplRef<T>& self) {
                                    std::vector<T> g(self.grad);
                                    for (size_t i = 0; i < g.size(); ++i)
                                        g[i] *= T(2) * pa->data[i];
                                    detail::add_into<T>(*pa, g);
                                });
}

template <typename T>
Tensor<T> sqrt_op(const Tensor<T>& a) {
    for (T v : a.data())
        if (v < T(0)) throw std::invalid_argument("sqrt: negative input");
    mul_count_add(a.numel());
    std::vector<T> out(a.data());
    for (auto& v : out) v = std::sqrt(v);
    auto pa = a.impl();
    return Tensor<T>::make_node(a.shape(), out, "sqrt", {a},
                                [pa, out](ImplRef<T>& self) {
                                    std::vector<T> g(self.grad);
                                    for (size_t i = 0; i < g.size(); ++i)
                                        g[i] *= T(0.5) / out[i];
                                    detail::add_into<T>(*pa, g);
                                });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.data());
    for (auto& v : out) v = v > T(0) ? v : T(0);
    auto pa = a.impl();
    return Tensor<T>::make_node(a.shape(), std::move(out), "relu", {a},
                                [pa](ImplRef<T>& self) {
                                    std::vector<T> g(self.grad);
                                    for (size_t i = 0; i < g.size(); ++i)
                                        if (pa->data[i] <= T(0)) g[i] = T(0);
                                    detail::add_into<T>(*pa, g);
                                });
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T acc = T(0);
    for (T v : a.data()) acc += v;
    auto pa = a.impl();
    return Tensor<T>::make_node({1}, {acc}, "sum", {a}, [pa](ImplRef<T>& self) {
        std::vector<T> g(pa->data.size(), self.grad[0]);
        detail::add_into<T>(*pa, g);
    });
}

// Row-major collapse of all leading dims: [B,H,D,C] -> [B*H*D, C].
template <typename T>
Tensor<T> flatten_bhd(const Tensor<T>& a) {
    require(a.rank() == 4, "flatten_bhd: input must be rank-4, got " + shape_str(a.shape()));
    int64_t rows = a.dim(0) * a.dim(1) * a.dim(2);
    auto pa = a.impl();
    return Tensor<T>::make_node({rows, a.dim(3)}, a.data(), "flatten_bhd", {a},
                                [pa](ImplRef<T>& self) { detail::add_into<T>(*pa, self.grad); });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    require(numel_of(shape) == a.numel(),
            "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    auto pa = a.impl();
    return Tensor<T>::make_node(std::move(shape), a.data(), "reshape", {a},
                                [pa](ImplRef<T>& self) { detail::add_into<T>(*pa, self.grad); });
}

// Per-channel sample mean over all leading dims: [...,C] -> [C].
template <typename T>
Tensor<T> mean_bhd(const Tensor<T>& a) {
    require(a.rank() == 4 || a.rank() == 2,
            "mean_bhd: input must be rank-4 or rank-2, got " + shape_str(a.shape()));
    check_finite(a, "mean_bhd");
    const int64_t C = a.shape().back();
    const int64_t N = detail::channel_rows(a.shape(), "mean_bhd");
    std::vector<T> out(C, T(0));
    const auto& x = a.data();
    for (int64_t r = 0; r < N; ++r)
        for (int64_t c = 0; c < C; ++c) out[c] += x[r * C + c];
    mul_count_add(C);
    for (auto& v : out) v /= T(N);
    auto pa = a.impl();
    return Tensor<T>::make_node({C}, std::move(out), "mean_bhd", {a},
                                [pa, N, C](ImplRef<T>& self) {
                                    std::vector<T> g(pa->data.size());
                                    for (int64_t r = 0; r < N; ++r)
                                        for (int64_t c = 0; c < C; ++c)
                                            g[r * C + c] = self.grad[c] / T(N);
                                    detail::add_into<T>(*pa, g);
                                });
}

// Per-channel population variance (1/N) over all leading dims: [...,C] -> [C].
template <typename T>
Tensor<T> var_bhd(const Tensor<T>& a) {
    require(a.rank() == 4 || a.rank() == 2,
            "var_bhd: input must be rank-4 or rank-2, got " + shape_str(a.shape()));
    check_finite(a, "var_bhd");
    const int64_t C = a.shape().back();
    const int64_t N = detail::channel_rows(a.shape(), "var_bhd");
    const auto& x = a.data();
    std::vector<T> mean(C, T(0));
    for (int64_t r = 0; r < N; ++r)
        for (int64_t c = 0; c < C; ++c) mean[c] += x[r * C + c];
    for (auto& v : mean) v /= T(N);
    std::vector<T> out(C, T(0));
    for (int64_t r = 0; r < N; ++r)
        for (int64_t c = 0; c < C; ++c) {
            T dlt = x[r * C + c] - mean[c];
            out[c] += dlt * dlt;
        }
    mul_count_add(uint64_t(a.numel()) + uint64_t(2 * C));
    for (auto& v : out) v /= T(N);
    auto pa = a.impl();
    return Tensor<T>::make_node({C}, std::move(out), "var_bhd", {a},
                                [pa, mean, N, C](ImplRef<T>& self) {
                                    std::vector<T> g(pa->data.size());
                                    for (int64_t r = 0; r < N; ++r)
                                        for (int64_t c = 0; c < C; ++c)
                                            g[r * C + c] = self.grad[c] * T(2) *
                                                           (pa->data[r * C + c] - mean[c]) / T(N);
                                    detail::add_into<T>(*pa, g);
                                });
}

// Sums a [Kh,Kw,IN,OUT] weight over its spatial cells -> [IN,OUT].
template <typename T>
Tensor<T> sum_spatial(const Tensor<T>& w) {
    require(w.rank() == 4, "sum_spatial: weight must be rank-4, got " + shape_str(w.shape()));
    const int64_t cells = w.dim(0) * w.dim(1);
    const int64_t inner = w.dim(2) * w.dim(3);
    std::vector<T> out(inner, T(0));
    for (int64_t k = 0; k < cells; ++k)
        for (int64_t i = 0; i < inner; ++i) out[i] += w.data()[k * inner + i];
    auto pw = w.impl();
    return Tensor<T>::make_node({w.dim(2), w.dim(3)}, std::move(out), "sum_spatial", {w},
                                [pw, cells, inner](ImplRef<T>& self) {
                                    std::vector<T> g(pw->data.size());
                                    for (int64_t k = 0; k < cells; ++k)
                                        for (int64_t i = 0; i < inner; ++i)
                                            g[k * inner + i] = self.grad[i];
                                    detail::add_into<T>(*pw, g);
                                });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul: both inputs must be rank-2");
    require(a.dim(1) == b.dim(0), "matmul: inner dims disagree, " + shape_str(a.shape()) +
                                      " x " + shape_str(b.shape()));
    check_finite(a, "matmul");
    check_finite(b, "matmul");
    const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    std::vector<T> out(M * N);
    kernels::matmul(a.data().data(), b.data().data(), out.data(), M, K, N);
    auto pa = a.impl(), pb = b.impl();
    return Tensor<T>::make_node(
        {M, N}, std::move(out), "matmul", {a, b}, [pa, pb, M, K, N](ImplRef<T>& self) {
            if (pa->requires_grad) {
                // ga = g . b^T
                std::vector<T> g(M * K, T(0));
                mul_count_add(uint64_t(M * K * N));
                for (int64_t m = 0; m < M; ++m)
                    for (int64_t n = 0; n < N; ++n) {
                        T gv = self.grad[m * N + n];
                        for (int64_t k = 0; k < K; ++k) g[m * K + k] += gv * pb->data[k * N + n];
                    }
                detail::add_into<T>(*pa, g);
            }
            if (pb->requires_grad) {
                // gb = a^T . g
                std::vector<T> g(K * N, T(0));
                mul_count_add(uint64_t(M * K * N));
                for (int64_t m = 0; m < M; ++m)
                    for (int64_t k = 0; k < K; ++k) {
                        T av = pa->data[m * K + k];
                        for (int64_t n = 0; n < N; ++n) g[k * N + n] += av * self.grad[m * N + n];
                    }
                detail::add_into<T>(*pb, g);
            }
        });
}

// [K] x [K,N] -> [N]
template <typename T>
Tensor<T> vecmat(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.rank() == 1 && b.rank() == 2 && a.dim(0) == b.dim(0),
            "vecmat: want [K] x [K,N], got " + shape_str(a.shape()) + " x " +
                shape_str(b.shape()));
    auto a2 = reshape(a, {1, a.dim(0)});
    auto r = matmul(a2, b);
    return reshape(r, {b.dim(1)});
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const ConvSpec& spec) {
    check_finite(x, "conv2d");
    check_finite(w, "conv2d");
    auto d = kernels::conv_dims(x.shape(), w.shape(), spec);
    std::vector<T> out(d.B * d.OH * d.OW * d.OUT);
    kernels::conv2d_forward(x.data().data(), w.data().data(), out.data(), d);
    auto px = x.impl(), pw = w.impl();
    return Tensor<T>::make_node(
        {d.B, d.OH, d.OW, d.OUT}, std::move(out), "conv2d", {x, w}, [px, pw, d](ImplRef<T>& self) {
            if (px->requires_grad) {
                std::vector<T> g(px->data.size());
                kernels::conv2d_backward_input(self.grad.data(), pw->data.data(), g.data(), d);
                detail::add_into<T>(*px, g);
            }
            if (pw->requires_grad) {
                std::vector<T> g(pw->data.size());
                kernels::conv2d_backward_weight(px->data.data(), self.grad.data(), g.data(), d);
                detail::add_into<T>(*pw, g);
            }
        });
}

// x[..., c] + b[c]
template <typename T>
Tensor<T> add_channel(const Tensor<T>& x, const Tensor<T>& b) {
    require(b.rank() == 1 && b.dim(0) == x.shape().back(),
            "add_channel: bias " + shape_str(b.shape()) + " does not match channels of " +
                shape_str(x.shape()));
    const int64_t C = b.dim(0);
    const int64_t rows = detail::channel_rows(x.shape(), "add_channel");
    std::vector<T> out(x.data());
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < C; ++c) out[r * C + c] += b.data()[c];
    auto px = x.impl(), pb = b.impl();
    return Tensor<T>::make_node(x.shape(), std::move(out), "add_channel", {x, b},
                                [px, pb, rows, C](ImplRef<T>& self) {
                                    detail::add_into<T>(*px, self.grad);
                                    if (!pb->requires_grad) return;
                                    std::vector<T> g(C, T(0));
                                    for (int64_t r = 0; r < rows; ++r)
                                        for (int64_t c = 0; c < C; ++c)
                                            g[c] += self.grad[r * C + c];
                                    detail::add_into<T>(*pb, g);
                                });
}

// x[..., c] * s[c]; used both for per-channel activation scaling and for
// folding per-output-channel factors into [Kh,Kw,IN,OUT] weights.
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& s) {
    require(s.rank() == 1 && s.dim(0) == x.shape().back(),
            "scale_channels: scale " + shape_str(s.shape()) + " does not match channels of " +
                shape_str(x.shape()));
    const int64_t C = s.dim(0);
    const int64_t rows = detail::channel_rows(x.shape(), "scale_channels");
    mul_count_add(x.numel());
    std::vector<T> out(x.data());
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < C; ++c) out[r * C + c] *= s.data()[c];
    auto px = x.impl(), ps = s.impl();
    return Tensor<T>::make_node(
        x.shape(), std::move(out), "scale_channels", {x, s}, [px, ps, rows, C](ImplRef<T>& self) {
            if (px->requires_grad) {
                std::vector<T> g(self.grad);
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < C; ++c) g[r * C + c] *= ps->data[c];
                detail::add_into<T>(*px, g);
            }
            if (ps->requires_grad) {
                std::vector<T> g(C, T(0));
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < C; ++c)
                        g[c] += self.grad[r * C + c] * px->data[r * C + c];
                detail::add_into<T>(*ps, g);
            }
        });
}

// Embeds s[C] as the diagonal of a 1x1 kernel [1,1,C,C].
template <typename T>
Tensor<T> diag_kernel(const Tensor<T>& s) {
    require(s.rank() == 1, "diag_kernel: input must be rank-1");
    const int64_t C = s.dim(0);
    std::vector<T> out(C * C, T(0));
    for (int64_t c = 0; c < C; ++c) out[c * C + c] = s.data()[c];
    auto ps = s.impl();
    return Tensor<T>::make_node({1, 1, C, C}, std::move(out), "diag_kernel", {s},
                                [ps, C](ImplRef<T>& self) {
                                    std::vector<T> g(C);
                                    for (int64_t c = 0; c < C; ++c) g[c] = self.grad[c * C + c];
                                    detail::add_into<T>(*ps, g);
                                });
}

// Zero-pads a [kh,kw,IN,OUT] kernel into the centre of [tKh,tKw,IN,OUT].
// Odd sizes only, so the centre is well defined.
template <typename T>
Tensor<T> pad_kernel_to(const Tensor<T>& w, int64_t tKh, int64_t tKw) {
    require(w.rank() == 4, "pad_kernel_to: weight must be rank-4");
    const int64_t kh = w.dim(0), kw = w.dim(1);
    require(kh % 2 == 1 && kw % 2 == 1 && tKh % 2 == 1 && tKw % 2 == 1,
            "pad_kernel_to: kernel and target dims must be odd for centre alignment");
    require(kh <= tKh && kw <= tKw, "pad_kernel_to: kernel larger than target");
    if (kh == tKh && kw == tKw) return w;
    const int64_t oh = (tKh - kh) / 2, ow = (tKw - kw) / 2;
    const int64_t inner = w.dim(2) * w.dim(3);
    std::vector<T> out(tKh * tKw * inner, T(0));
    for (int64_t i = 0; i < kh; ++i)
        for (int64_t j = 0; j < kw; ++j)
            for (int64_t t = 0; t < inner; ++t)
                out[((i + oh) * tKw + (j + ow)) * inner + t] = w.data()[(i * kw + j) * inner + t];
    auto pw = w.impl();
    return Tensor<T>::make_node({tKh, tKw, w.dim(2), w.dim(3)}, std::move(out), "pad_kernel", {w},
                                [pw, kh, kw, tKw, oh, ow, inner](ImplRef<T>& self) {
                                    std::vector<T> g(pw->data.size());
                                    for (int64_t i = 0; i < kh; ++i)
                                        for (int64_t j = 0; j < kw; ++j)
                                            for (int64_t t = 0; t < inner; ++t)
                                                g[(i * kw + j) * inner + t] =
                                                    self.grad[((i + oh) * tKw + (j + ow)) * inner +
                                                              t];
                                    detail::add_into<T>(*pw, g);
                                });
}

// Global average pool: [B,H,D,C] -> [B,C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    require(x.rank() == 4, "global_avg_pool: input must be rank-4");
    const int64_t B = x.dim(0), S = x.dim(1) * x.dim(2), C = x.dim(3);
    std::vector<T> out(B * C, T(0));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t s = 0; s < S; ++s)
            for (int64_t c = 0; c < C; ++c) out[b * C + c] += x.data()[(b * S + s) * C + c];
    mul_count_add(B * C);
    for (auto& v : out) v /= T(S);
    auto px = x.impl();
    return Tensor<T>::make_node({B, C}, std::move(out), "gap", {x},
                                [px, B, S, C](ImplRef<T>& self) {
                                    std::vector<T> g(px->data.size());
                                    for (int64_t b = 0; b < B; ++b)
                                        for (int64_t s = 0; s < S; ++s)
                                            for (int64_t c = 0; c < C; ++c)
                                                g[(b * S + s) * C + c] = self.grad[b * C + c] / T(S);
                                    detail::add_into<T>(*px, g);
                                });
}

// Non-overlapping 2x2 average pooling; spatial dims must be even.
template <typename T>
Tensor<T> avg_pool_2x2(const Tensor<T>& x) {
    require(x.rank() == 4, "avg_pool_2x2: input must be rank-4");
    require(x.dim(1) % 2 == 0 && x.dim(2) % 2 == 0,
            "avg_pool_2x2: spatial dims must be even, got " + shape_str(x.shape()));
    const int64_t B = x.dim(0), H = x.dim(1), D = x.dim(2), C = x.dim(3);
    const int64_t OH = H / 2, OW = D / 2;
    std::vector<T> out(B * OH * OW * C, T(0));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t oh = 0; oh < OH; ++oh)
            for (int64_t ow = 0; ow < OW; ++ow)
                for (int64_t c = 0; c < C; ++c) {
                    T acc = T(0);
                    for (int64_t i = 0; i < 2; ++i)
                        for (int64_t j = 0; j < 2; ++j)
                            acc += x.data()[((b * H + 2 * oh + i) * D + 2 * ow + j) * C + c];
                    out[((b * OH + oh) * OW + ow) * C + c] = acc * T(0.25);
                }
    mul_count_add(out.size());
    auto px = x.impl();
    return Tensor<T>::make_node(
        {B, OH, OW, C}, std::move(out), "avg_pool_2x2", {x}, [px, B, H, D, C, OH, OW](ImplRef<T>& self) {
            std::vector<T> g(px->data.size());
            for (int64_t b = 0; b < B; ++b)
                for (int64_t oh = 0; oh < OH; ++oh)
                    for (int64_t ow = 0; ow < OW; ++ow)
                        for (int64_t c = 0; c < C; ++c) {
                            T gv = self.grad[((b * OH + oh) * OW + ow) * C + c] * T(0.25);
                            for (int64_t i = 0; i < 2; ++i)
                                for (int64_t j = 0; j < 2; ++j)
                                    g[((b * H + 2 * oh + i) * D + 2 * ow + j) * C + c] = gv;
                        }
            detail::add_into<T>(*px, g);
        });
}

// Mean softmax cross-entropy over the batch; labels are class indices.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    require(logits.rank() == 2, "softmax_cross_entropy: logits must be [B,K]");
    const int64_t B = logits.dim(0), K = logits.dim(1);
    require(static_cast<int64_t>(labels.size()) == B,
            "softmax_cross_entropy: batch size mismatch with labels");
    check_finite(logits, "softmax_cross_entropy");
    std::vector<T> probs(B * K);
    T loss = T(0);
    for (int64_t b = 0; b < B; ++b) {
        require(labels[b] >= 0 && labels[b] < K, "softmax_cross_entropy: label out of range");
        const T* row = logits.data().data() + b * K;
        T mx = row[0];
        for (int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        T z = T(0);
        for (int64_t k = 0; k < K; ++k) z += std::exp(row[k] - mx);
        for (int64_t k = 0; k < K; ++k) probs[b * K + k] = std::exp(row[k] - mx) / z;
        loss -= std::log(probs[b * K + labels[b]]);
    }
    mul_count_add(uint64_t(B * K * 3));
    loss /= T(B);
    auto pl = logits.impl();
    return Tensor<T>::make_node({1}, {loss}, "softmax_ce", {logits},
                                [pl, probs, labels, B, K](ImplRef<T>& self) {
                                    std::vector<T> g(B * K);
                                    T gs = self.grad[0] / T(B);
                                    for (int64_t b = 0; b < B; ++b)
                                        for (int64_t k = 0; k < K; ++k) {
                                            T p = probs[b * K + k];
                                            g[b * K + k] = gs * (p - (labels[b] == k ? T(1) : T(0)));
                                        }
                                    detail::add_into<T>(*pl, g);
                                });
}

}  // namespace repq
