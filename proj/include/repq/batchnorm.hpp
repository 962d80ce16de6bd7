#pragma once

#include <memory>

#include "repq/ops.hpp"

namespace repq {

enum class Mode { Train, Eval };

// How a folded block obtains its batch statistics during training:
// Exact computes the pre-BN activation and takes its sample moments;
// Estimate derives them from input moments and kernel sums without
// materialising the convolution output.
enum class BnMode { Exact, Estimate };

template <typename T>
struct BNState {
    Tensor<T> gamma;  // [C] trainable
    Tensor<T> beta;   // [C] trainable
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T momentum;
    T epsilon;

    static BNState make(int64_t channels, T momentum = T(0.1), T epsilon = T(1e-5)) {
        require(channels >= 1, "BNState: channels must be >= 1");
        require(momentum > T(0) && momentum <= T(1), "BNState: momentum must be in (0,1]");
        require(epsilon > T(0), "BNState: epsilon must be > 0");
        BNState st;
        st.gamma = Tensor<T>::full({channels}, T(1));
        st.gamma.set_requires_grad(true);
        st.beta = Tensor<T>::zeros({channels});
        st.beta.set_requires_grad(true);
        st.running_mean.assign(channels, T(0));
        st.running_var.assign(channels, T(1));
        st.momentum = momentum;
        st.epsilon = epsilon;
        return st;
    }

    int64_t channels() const { return gamma.dim(0); }
};

// Cumulative moving update:  m^ <- (1-m) m^ + m mu,  V^ <- (1-m) V^ + m V.
template <typename T>
void update_running(BNState<T>& st, const std::vector<T>& mu, const std::vector<T>& var) {
    require(static_cast<int64_t>(mu.size()) == st.channels() &&
                static_cast<int64_t>(var.size()) == st.channels(),
            "update_running: statistic length mismatch");
    const T m = st.momentum;
    for (size_t c = 0; c < mu.size(); ++c) {
        st.running_mean[c] = (T(1) - m) * st.running_mean[c] + m * mu[c];
        st.running_var[c] = (T(1) - m) * st.running_var[c] + m * var[c];
    }
}

template <typename T>
struct FoldResult {
    Tensor<T> weight;  // merged kernel M
    Tensor<T> bias;    // merged bias b, [OUT]
};

// Folds normalization with statistics (mu, var) into a conv kernel:
//   M = W / sqrt(var + eps) * gamma   (per output channel)
//   b = -mu / sqrt(var + eps) * gamma + beta
// Differentiable through w, gamma, beta and through mu/var when those are
// graph-computed batch statistics.
template <typename T>
FoldResult<T> bn_fold(const Tensor<T>& w, const Tensor<T>& mu, const Tensor<T>& var,
                      const BNState<T>& st) {
    require(w.rank() == 4, "bn_fold: weight must be rank-4, got " + shape_str(w.shape()));
    const int64_t C = st.channels();
    require(w.dim(3) == C, "bn_fold: weight output channels do not match BN channels");
    require(mu.rank() == 1 && mu.dim(0) == C && var.rank() == 1 && var.dim(0) == C,
            "bn_fold: statistics must be [C]");
    for (T v : var.data())
        if (v + st.epsilon <= T(0))
            throw std::invalid_argument("bn_fold: var + epsilon must be positive");
    auto rstd = div(st.gamma, sqrt_op(add_scalar(var, st.epsilon)));  // gamma / sqrt(var+eps)
    auto merged = scale_channels(w, rstd);
    auto bias = add(neg(mul(mu, rstd)), st.beta);
    return {merged, bias};
}

// Standard batch normalization over the channel dim of [B,H,D,C]. Train mode
// normalizes with batch moments and advances the running statistics; eval
// mode normalizes with the running statistics.
template <typename T>
Tensor<T> bn_forward(const Tensor<T>& y, BNState<T>& st, Mode mode) {
    require(y.rank() == 4, "bn_forward: input must be rank-4, got " + shape_str(y.shape()));
    require(y.dim(3) == st.channels(), "bn_forward: channel mismatch, input has " +
                                           std::to_string(y.dim(3)) + " channels, BN has " +
                                           std::to_string(st.channels()));
    check_finite(y, "bn_forward");
    Tensor<T> mu, var;
    if (mode == Mode::Train) {
        mu = mean_bhd(y);
        var = var_bhd(y);
        update_running(st, mu.data(), var.data());
    } else {
        mu = Tensor<T>({st.channels()}, st.running_mean);
        var = Tensor<T>({st.channels()}, st.running_var);
    }
    auto rstd = div(st.gamma, sqrt_op(add_scalar(var, st.epsilon)));
    auto centered = add_channel(y, neg(mu));
    return add_channel(scale_channels(centered, rstd), st.beta);
}

// Mean estimate  E~[X*W] = E[X] . sum_{h,d} W[h,d]   (shape [OUT]).
// Never materializes the convolution output; cost is O(B H D IN + Kh Kw IN OUT).
template <typename T>
Tensor<T> bn_est_mean(const Tensor<T>& x, const Tensor<T>& w) {
    require(x.rank() == 4 && w.rank() == 4, "bn_est_mean: want rank-4 input and weight");
    require(x.dim(3) == w.dim(2), "bn_est_mean: channel mismatch between input " +
                                      shape_str(x.shape()) + " and weight " + shape_str(w.shape()));
    return vecmat(mean_bhd(x), sum_spatial(w));
}

// Variance estimate  V~[X*W] = V[X] . sum_{h,d} W[h,d]^2  (diagonal-covariance
// approximation; nonnegative by construction).
template <typename T>
Tensor<T> bn_est_var(const Tensor<T>& x, const Tensor<T>& w) {
    require(x.rank() == 4 && w.rank() == 4, "bn_est_var: want rank-4 input and weight");
    require(x.dim(3) == w.dim(2), "bn_est_var: channel mismatch between input " +
                                      shape_str(x.shape()) + " and weight " + shape_str(w.shape()));
    return vecmat(var_bhd(x), sum_spatial(square(w)));
}

// Fold driven by estimated statistics: the pre-BN activation is never
// computed. Train mode folds with (E~, V~) from this batch and advances the
// running statistics with the same estimates; eval mode folds with the
// running statistics exactly like the exact-BN path.
template <typename T>
FoldResult<T> bn_est_forward(const Tensor<T>& x, const Tensor<T>& w, BNState<T>& st, Mode mode) {
    if (mode == Mode::Eval) {
        Tensor<T> mu({st.channels()}, st.running_mean);
        Tensor<T> var({st.channels()}, st.running_var);
        return bn_fold(w, mu, var, st);
    }
    auto mu = bn_est_mean(x, w);
    auto var = bn_est_var(x, w);
    update_running(st, mu.data(), var.data());
    return bn_fold(w, mu, var, st);
}

}  // namespace repq
