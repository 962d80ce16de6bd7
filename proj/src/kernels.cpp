#include "repq/kernels.hpp"

#include <atomic>

#include "repq/counter.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace repq::kernels {

namespace {
std::atomic<bool> g_parallel{true};
}

bool parallel_enabled() {
#ifdef _OPENMP
    return g_parallel.load(std::memory_order_relaxed);
#else
    return false;
#endif
}

void set_parallel(bool on) { g_parallel.store(on, std::memory_order_relaxed); }

ConvDims conv_dims(const Shape& x, const Shape& w, const ConvSpec& spec) {
    require(x.size() == 4, "conv2d: input must be rank-4 [B,H,D,IN], got " + shape_str(x));
    require(w.size() == 4, "conv2d: weight must be rank-4 [Kh,Kw,IN,OUT], got " + shape_str(w));
    require(spec.stride == 1, "conv2d: only stride 1 is supported");
    ConvDims d{};
    d.B = x[0];
    d.H = x[1];
    d.D = x[2];
    d.IN = x[3];
    d.Kh = w[0];
    d.Kw = w[1];
    d.OUT = w[3];
    require(w[2] == d.IN, "conv2d: weight input channels " + std::to_string(w[2]) +
                              " do not match input channels " + std::to_string(d.IN));
    require(spec.kernel_h == d.Kh && spec.kernel_w == d.Kw,
            "conv2d: spec kernel size does not match weight shape " + shape_str(w));
    require(spec.in_channels == d.IN && spec.out_channels == d.OUT,
            "conv2d: spec channel counts do not match tensors");
    if (spec.padding == Padding::Valid) {
        d.OH = d.H - d.Kh + 1;
        d.OW = d.D - d.Kw + 1;
        require(d.OH >= 1 && d.OW >= 1,
                "conv2d: kernel " + std::to_string(d.Kh) + "x" + std::to_string(d.Kw) +
                    " does not fit input " + shape_str(x) + " with valid padding");
        d.pad_top = 0;
        d.pad_left = 0;
    } else {
        d.OH = d.H;
        d.OW = d.D;
        d.pad_top = (d.Kh - 1) / 2;
        d.pad_left = (d.Kw - 1) / 2;
    }
    return d;
}

// One output row y[b,oh,:,:]; identical inner order in serial and parallel paths.
template <typename T>
static inline void conv_forward_row(const T* x, const T* w, T* y, const ConvDims& d,
                                    int64_t b, int64_t oh) {
    T* yrow = y + ((b * d.OH + oh) * d.OW) * d.OUT;
    for (int64_t i = 0; i < d.OW * d.OUT; ++i) yrow[i] = T(0);
    for (int64_t kh = 0; kh < d.Kh; ++kh) {
        int64_t ih = oh + kh - d.pad_top;
        if (ih < 0 || ih >= d.H) continue;
        for (int64_t kw = 0; kw < d.Kw; ++kw) {
            for (int64_t ow = 0; ow < d.OW; ++ow) {
                int64_t iw = ow + kw - d.pad_left;
                if (iw < 0 || iw >= d.D) continue;
                const T* xp = x + ((b * d.H + ih) * d.D + iw) * d.IN;
                T* yp = yrow + ow * d.OUT;
                for (int64_t ic = 0; ic < d.IN; ++ic) {
                    const T xv = xp[ic];
                    const T* wp = w + ((kh * d.Kw + kw) * d.IN + ic) * d.OUT;
                    for (int64_t oc = 0; oc < d.OUT; ++oc) yp[oc] += xv * wp[oc];
                }
            }
        }
    }
}

template <typename T>
void conv2d_forward_serial(const T* x, const T* w, T* y, const ConvDims& d) {
    mul_count_add(uint64_t(d.B * d.OH * d.OW * d.Kh * d.Kw * d.IN * d.OUT));
    for (int64_t b = 0; b < d.B; ++b)
        for (int64_t oh = 0; oh < d.OH; ++oh) conv_forward_row(x, w, y, d, b, oh);
}

template <typename T>
void conv2d_forward(const T* x, const T* w, T* y, const ConvDims& d) {
    if (!parallel_enabled()) return conv2d_forward_serial(x, w, y, d);
    mul_count_add(uint64_t(d.B * d.OH * d.OW * d.Kh * d.Kw * d.IN * d.OUT));
    const int64_t rows = d.B * d.OH;
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) conv_forward_row(x, w, y, d, r / d.OH, r % d.OH);
}

// gx[b,ih,iw,ic] = sum_{kh,kw,oc} gy[b,ih-kh+pt, iw-kw+pl, oc] * w[kh,kw,ic,oc]
template <typename T>
static inline void conv_backward_input_row(const T* gy, const T* w, T* gx, const ConvDims& d,
                                           int64_t b, int64_t ih) {
    T* gxrow = gx + ((b * d.H + ih) * d.D) * d.IN;
    for (int64_t i = 0; i < d.D * d.IN; ++i) gxrow[i] = T(0);
    for (int64_t kh = 0; kh < d.Kh; ++kh) {
        int64_t oh = ih - kh + d.pad_top;
        if (oh < 0 || oh >= d.OH) continue;
        for (int64_t kw = 0; kw < d.Kw; ++kw) {
            for (int64_t iw = 0; iw < d.D; ++iw) {
                int64_t ow = iw - kw + d.pad_left;
                if (ow < 0 || ow >= d.OW) continue;
                const T* gyp = gy + ((b * d.OH + oh) * d.OW + ow) * d.OUT;
                T* gxp = gxrow + iw * d.IN;
                for (int64_t ic = 0; ic < d.IN; ++ic) {
                    const T* wp = w + ((kh * d.Kw + kw) * d.IN + ic) * d.OUT;
                    T acc = T(0);
                    for (int64_t oc = 0; oc < d.OUT; ++oc) acc += gyp[oc] * wp[oc];
                    gxp[ic] += acc;
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward_input_serial(const T* gy, const T* w, T* gx, const ConvDims& d) {
    mul_count_add(uint64_t(d.B * d.OH * d.OW * d.Kh * d.Kw * d.IN * d.OUT));
    for (int64_t b = 0; b < d.B; ++b)
        for (int64_t ih = 0; ih < d.H; ++ih) conv_backward_input_row(gy, w, gx, d, b, ih);
}

template <typename T>
void conv2d_backward_input(const T* gy, const T* w, T* gx, const ConvDims& d) {
    if (!parallel_enabled()) return conv2d_backward_input_serial(gy, w, gx, d);
    mul_count_add(uint64_t(d.B * d.OH * d.OW * d.Kh * d.Kw * d.IN * d.OUT));
    const int64_t rows = d.B * d.H;
#pragma omp parallel for schedule(static)
    for (int64_t r = 0; r < rows; ++r) conv_backward_input_row(gy, w, gx, d, r / d.H, r % d.H);
}

// gw[kh,kw,ic,oc] = sum_{b,oh,ow} x[b,oh+kh-pt, ow+kw-pl, ic] * gy[b,oh,ow,oc]
template <typename T>
static inline void conv_backward_weight_cell(const T* x, const T* gy, T* gw, const ConvDims& d,
                                             int64_t kh, int64_t kw) {
    T* gwp = gw + (kh * d.Kw + kw) * d.IN * d.OUT;
    for (int64_t i = 0; i < d.IN * d.OUT; ++i) gwp[i] = T(0);
    for (int64_t b = 0; b < d.B; ++b) {
        for (int64_t oh = 0; oh < d.OH; ++oh) {
            int64_t ih = oh + kh - d.pad_top;
            if (ih < 0 || ih >= d.H) continue;
            for (int64_t ow = 0; ow < d.OW; ++ow) {
                int64_t iw = ow + kw - d.pad_left;
                if (iw < 0 || iw >= d.D) continue;
                const T* xp = x + ((b * d.H + ih) * d.D + iw) * d.IN;
                const T* gyp = gy + ((b * d.OH + oh) * d.OW + ow) * d.OUT;
                for (int64_t ic = 0; ic < d.IN; ++ic) {
                    const T xv = xp[ic];
                    T* row = gwp + ic * d.OUT;
                    for (int64_t oc = 0; oc < d.OUT; ++oc) row[oc] += xv * gyp[oc];
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward_weight_serial(const T* x, const T* gy, T* gw, const ConvDims& d) {
    mul_count_add(uint64_t(d.B * d.OH * d.OW * d.Kh * d.Kw * d.IN * d.OUT));
    for (int64_t kh = 0; kh < d.Kh; ++kh)
        for (int64_t kw = 0; kw < d.Kw; ++kw) conv_backward_weight_cell(x, gy, gw, d, kh, kw);
}

template <typename T>
void conv2d_backward_weight(const T* x, const T* gy, T* gw, const ConvDims& d) {
    if (!parallel_enabled()) return conv2d_backward_weight_serial(x, gy, gw, d);
    mul_count_add(uint64_t(d.B * d.OH * d.OW * d.Kh * d.Kw * d.IN * d.OUT));
    const int64_t cells = d.Kh * d.Kw;
#pragma omp parallel for schedule(static)
    for (int64_t c = 0; c < cells; ++c)
        conv_backward_weight_cell(x, gy, gw, d, c / d.Kw, c % d.Kw);
}

template <typename T>
static inline void matmul_row(const T* a, const T* b, T* c, int64_t m, int64_t K, int64_t N) {
    T* crow = c + m * N;
    for (int64_t n = 0; n < N; ++n) crow[n] = T(0);
    const T* arow = a + m * K;
    for (int64_t k = 0; k < K; ++k) {
        const T av = arow[k];
        const T* brow = b + k * N;
        for (int64_t n = 0; n < N; ++n) crow[n] += av * brow[n];
    }
}

template <typename T>
void matmul_serial(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N) {
    mul_count_add(uint64_t(M * K * N));
    for (int64_t m = 0; m < M; ++m) matmul_row(a, b, c, m, K, N);
}

template <typename T>
void matmul(const T* a, const T* b, T* c, int64_t M, int64_t K, int64_t N) {
    if (!parallel_enabled()) return matmul_serial(a, b, c, M, K, N);
    mul_count_add(uint64_t(M * K * N));
#pragma omp parallel for schedule(static)
    for (int64_t m = 0; m < M; ++m) matmul_row(a, b, c, m, K, N);
}

#define REPQ_INSTANTIATE(T)                                                              \
    template void conv2d_forward_serial<T>(const T*, const T*, T*, const ConvDims&);     \
    template void conv2d_forward<T>(const T*, const T*, T*, const ConvDims&);            \
    template void conv2d_backward_input_serial<T>(const T*, const T*, T*,                \
                                                  const ConvDims&);                      \
    template void conv2d_backward_input<T>(const T*, const T*, T*, const ConvDims&);     \
    template void conv2d_backward_weight_serial<T>(const T*, const T*, T*,               \
                                                   const ConvDims&);                     \
    template void conv2d_backward_weight<T>(const T*, const T*, T*, const ConvDims&);    \
    template void matmul_serial<T>(const T*, const T*, T*, int64_t, int64_t, int64_t);   \
    template void matmul<T>(const T*, const T*, T*, int64_t, int64_t, int64_t);

REPQ_INSTANTIATE(float)
REPQ_INSTANTIATE(double)

#undef REPQ_INSTANTIATE

}  // namespace repq::kernels
