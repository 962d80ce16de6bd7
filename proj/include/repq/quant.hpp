#pragma once

#include <cmath>

#include "repq/ops.hpp"

namespace repq {

// Minimal bit-width that represents every product of an a-bit and a b-bit
// integer (both unsigned or both signed two's complement).
inline int product_bits(int bits_a, int bits_b, bool is_signed) {
    require(bits_a >= 1 && bits_b >= 1, "product_bits: bit widths must be >= 1");
    auto fits = [&](long long lo, long long hi, int n) {
        if (is_signed) return lo >= -(1LL << (n - 1)) && hi <= (1LL << (n - 1)) - 1;
        return lo >= 0 && hi <= (1LL << n) - 1;
    };
    long long lo_a = is_signed ? -(1LL << (bits_a - 1)) : 0;
    long long hi_a = is_signed ? (1LL << (bits_a - 1)) - 1 : (1LL << bits_a) - 1;
    long long lo_b = is_signed ? -(1LL << (bits_b - 1)) : 0;
    long long hi_b = is_signed ? (1LL << (bits_b - 1)) - 1 : (1LL << bits_b) - 1;
    long long pmin = lo_a * lo_b, pmax = lo_a * lo_b;
    for (long long va : {lo_a, hi_a})
        for (long long vb : {lo_b, hi_b}) {
            pmin = std::min(pmin, va * vb);
            pmax = std::max(pmax, va * vb);
        }
    int n = 1;
    while (!fits(pmin, pmax, n)) ++n;
    return n;
}

// Learned-step pseudo-quantizer state. Weights use one step per output
// channel (last tensor dim); activations use a single scalar step.
template <typename T>
struct QuantizerState {
    int bits = 8;
    bool signed_range = true;
    bool per_channel = false;
    Tensor<T> steps;  // [C] or [1], trainable after init
    bool initialized = false;
    T grad_scale = T(1);
    std::vector<int64_t> zero_channels;  // channels that were all-zero at init

    int64_t qmin() const { return signed_range ? -(int64_t(1) << (bits - 1)) : 0; }
    int64_t qmax() const {
        return signed_range ? (int64_t(1) << (bits - 1)) - 1 : (int64_t(1) << bits) - 1;
    }

    static QuantizerState weights(int bits) {
        QuantizerState q;
        q.bits = bits;
        q.signed_range = true;
        q.per_channel = true;
        return q;
    }
    static QuantizerState activations(int bits, bool signed_range) {
        QuantizerState q;
        q.bits = bits;
        q.signed_range = signed_range;
        q.per_channel = false;
        return q;
    }
};

// MinError step initialization: per channel, picks the step from a 128-point
// geometric grid over [max|v|/(qmax*16), 2*max|v|/qmax] that minimizes the
// squared reconstruction error. The grid is snapped so the anchor
// max|v|/qmax is itself a candidate; an all-zero channel falls back to a
// floor step of 1e-8 and is flagged.
template <typename T>
void min_error_init(const Tensor<T>& v, QuantizerState<T>& q) {
    check_finite(v, "min_error_init");
    const int64_t C = q.per_channel ? v.shape().back() : 1;
    const int64_t n = v.numel();
    require(n > 0, "min_error_init: empty tensor");
    const int64_t per = n / C;
    const double qmin = double(q.qmin()), qmax = double(q.qmax());
    require(qmax > 0, "min_error_init: degenerate integer range");
    std::vector<T> steps(C);
    q.zero_channels.clear();
    std::vector<double> chan(per);
    for (int64_t c = 0; c < C; ++c) {
        for (int64_t i = 0; i < per; ++i)
            chan[i] = double(v.data()[q.per_channel ? i * C + c : i]);
        double maxabs = 0;
        for (double x : chan) maxabs = std::max(maxabs, std::abs(x));
        if (maxabs == 0) {
            steps[c] = T(1e-8);
            q.zero_channels.push_back(c);
            continue;
        }
        const double anchor = maxabs / qmax;
        const double lo = std::log(maxabs / (qmax * 16.0));
        const double hi = std::log(2.0 * maxabs / qmax);
        constexpr int kGrid = 128;
        std::vector<double> cand(kGrid);
        int nearest = 0;
        double nearest_d = 1e300;
        for (int k = 0; k < kGrid; ++k) {
            double e = lo + (hi - lo) * double(k) / double(kGrid - 1);
            cand[k] = std::exp(e);
            double d = std::abs(e - std::log(anchor));
            if (d < nearest_d) {
                nearest_d = d;
                nearest = k;
            }
        }
        cand[nearest] = anchor;
        double best_err = 1e300, best_s = anchor;
        for (double s : cand) {
            double err = 0;
            for (double x : chan) {
                double r = round_half_even(x / s);
                r = std::min(std::max(r, qmin), qmax);
                double dlt = r * s - x;
                err += dlt * dlt;
            }
            if (err < best_err) {
                best_err = err;
                best_s = s;
            }
        }
        steps[c] = T(best_s);
    }
    q.steps = Tensor<T>({C}, std::move(steps));
    q.steps.set_requires_grad(true);
    q.grad_scale = T(1) / std::sqrt(T(per) * T(qmax));
    q.initialized = true;
}

// Q(v) = clamp(round(v/s), qmin, qmax) * s with round-half-to-even ties.
// Backward: straight-through in v (1 inside the clamp range, 0 outside) and
// the learned-step rule in s ((round(r)-r) in range, qmin/qmax at
// saturation), scaled by 1/sqrt(N*qmax).
template <typename T>
Tensor<T> quantize(const Tensor<T>& v, const QuantizerState<T>& q) {
    if (!q.initialized)
        throw std::runtime_error("quantize: quantizer has not been initialized");
    check_finite(v, "quantize");
    const int64_t C = q.steps.dim(0);
    if (q.per_channel)
        require(v.shape().back() == C,
                "quantize: per-channel steps length " + std::to_string(C) +
                    " does not match channels of " + shape_str(v.shape()));
    for (T s : q.steps.data())
        if (!(s > T(0))) throw std::runtime_error("quantize: step must be positive");
    const int64_t n = v.numel();
    const T qmin = T(q.qmin()), qmax = T(q.qmax());
    const bool pc = q.per_channel;
    mul_count_add(uint64_t(2 * n));
    std::vector<T> out(n);
    for (int64_t i = 0; i < n; ++i) {
        const T s = q.steps.data()[pc ? i % C : 0];
        T r = round_half_even(v.data()[i] / s);
        r = std::min(std::max(r, qmin), qmax);
        out[i] = r * s;
    }
    auto pv = v.impl();
    auto ps = q.steps.impl();
    const T gscale = q.grad_scale;
    return Tensor<T>::make_node(
        v.shape(), std::move(out), "quantize", {v, q.steps},
        [pv, ps, C, pc, qmin, qmax, gscale](typename Tensor<T>::Impl& self) {
            const int64_t n = int64_t(self.data.size());
            std::vector<T> gv(pv->requires_grad ? n : 0);
            std::vector<T> gs(ps->requires_grad ? C : 0, T(0));
            for (int64_t i = 0; i < n; ++i) {
                const int64_t c = pc ? i % C : 0;
                const T s = ps->data[c];
                const T r = pv->data[i] / s;
                const T g = self.grad[i];
                if (pv->requires_grad) gv[i] = (r >= qmin && r <= qmax) ? g : T(0);
                if (ps->requires_grad) {
                    T d;
                    if (r < qmin)
                        d = qmin;
                    else if (r > qmax)
                        d = qmax;
                    else
                        d = round_half_even(r) - r;
                    gs[c] += g * d * gscale;
                }
            }
            if (pv->requires_grad) detail::add_into<T>(*pv, gv);
            if (ps->requires_grad) detail::add_into<T>(*ps, gs);
        });
}

}  // namespace repq
