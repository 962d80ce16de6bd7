#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "repq/batchnorm.hpp"
#include "repq/ops.hpp"
#include "repq/rng.hpp"

namespace repq {

// Dirac kernel: conv(x, K) == x under same padding. [tKh,tKw,C,C] with ones
// at the spatial centre on the channel diagonal.
template <typename T>
Tensor<T> identity_kernel(int64_t channels, int64_t tKh = 1, int64_t tKw = 1) {
    require(channels >= 1, "identity_kernel: channels must be >= 1");
    require(tKh % 2 == 1 && tKw % 2 == 1, "identity_kernel: target dims must be odd");
    Tensor<T> k({tKh, tKw, channels, channels});
    const int64_t ch = tKh / 2, cw = tKw / 2;
    for (int64_t c = 0; c < channels; ++c) k.at({ch, cw, c, c}) = T(1);
    return k;
}

// Centre-pads each kernel to the target size and sums: the additive part of
// branch merging. Differentiable; linear in every input kernel.
template <typename T>
Tensor<T> merge_parallel(const std::vector<Tensor<T>>& kernels, int64_t tKh, int64_t tKw) {
    require(!kernels.empty(), "merge_parallel: need at least one kernel");
    Tensor<T> acc;
    for (const auto& k : kernels) {
        require(k.rank() == 4, "merge_parallel: kernels must be rank-4");
        require(k.dim(0) % 2 == 1 && k.dim(1) % 2 == 1,
                "merge_parallel: even-sized kernel " + shape_str(k.shape()) +
                    " has no centre");
        auto padded = pad_kernel_to(k, tKh, tKw);
        acc = acc.defined() ? add(acc, padded) : padded;
    }
    return acc;
}

// Collapses two chained convolutions into one kernel. Exactly one of the two
// may be larger than 1x1; the composite then matches conv(conv(x,a),b) on
// same-padded inputs.
template <typename T>
Tensor<T> merge_sequential(const Tensor<T>& w_first, const Tensor<T>& w_second) {
    require(w_first.rank() == 4 && w_second.rank() == 4,
            "merge_sequential: kernels must be rank-4");
    require(w_first.dim(3) == w_second.dim(2),
            "merge_sequential: inner channels disagree, " + shape_str(w_first.shape()) +
                " then " + shape_str(w_second.shape()));
    const bool second_1x1 = w_second.dim(0) == 1 && w_second.dim(1) == 1;
    const bool first_1x1 = w_first.dim(0) == 1 && w_first.dim(1) == 1;
    if (second_1x1) {
        // out[i,j,c,o] = sum_m a[i,j,c,m] b[0,0,m,o]  ==  [khkwC,M] x [M,O]
        const int64_t rows = w_first.dim(0) * w_first.dim(1) * w_first.dim(2);
        auto prod = matmul(reshape(w_first, {rows, w_first.dim(3)}),
                           reshape(w_second, {w_second.dim(2), w_second.dim(3)}));
        return reshape(prod, {w_first.dim(0), w_first.dim(1), w_first.dim(2), w_second.dim(3)});
    }
    if (!first_1x1)
        throw std::invalid_argument(
            "merge_sequential: unsupported composition, one kernel must be 1x1 (got " +
            shape_str(w_first.shape()) + " then " + shape_str(w_second.shape()) + ")");
    // out[i,j,c,o] = sum_m a[0,0,c,m] b[i,j,m,o]
    const int64_t C = w_first.dim(2), M = w_first.dim(3);
    const int64_t Kh = w_second.dim(0), Kw = w_second.dim(1), O = w_second.dim(3);
    const int64_t cells = Kh * Kw;
    std::vector<T> out(cells * C * O, T(0));
    mul_count_add(uint64_t(cells * C * M * O));
    const auto& a = w_first.data();
    const auto& b = w_second.data();
    for (int64_t s = 0; s < cells; ++s)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t m = 0; m < M; ++m) {
                const T av = a[c * M + m];
                for (int64_t o = 0; o < O; ++o)
                    out[(s * C + c) * O + o] += av * b[(s * M + m) * O + o];
            }
    auto pa = w_first.impl(), pb = w_second.impl();
    return Tensor<T>::make_node(
        {Kh, Kw, C, O}, std::move(out), "merge_seq_first1x1", {w_first, w_second},
        [pa, pb, cells, C, M, O](typename Tensor<T>::Impl& self) {
            if (pa->requires_grad) {
                std::vector<T> g(C * M, T(0));
                for (int64_t s = 0; s < cells; ++s)
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t m = 0; m < M; ++m) {
                            T acc = T(0);
                            for (int64_t o = 0; o < O; ++o)
                                acc += self.grad[(s * C + c) * O + o] * pb->data[(s * M + m) * O + o];
                            g[c * M + m] += acc;
                        }
                detail::add_into<T>(*pa, g);
            }
            if (pb->requires_grad) {
                std::vector<T> g(cells * M * O, T(0));
                for (int64_t s = 0; s < cells; ++s)
                    for (int64_t c = 0; c < C; ++c)
                        for (int64_t m = 0; m < M; ++m) {
                            const T av = pa->data[c * M + m];
                            for (int64_t o = 0; o < O; ++o)
                                g[(s * M + m) * O + o] += av * self.grad[(s * C + c) * O + o];
                        }
                detail::add_into<T>(*pb, g);
            }
        });
}

enum class LayerKind { Conv, BatchNorm, Scale, Identity };

// One primitive inside a branch. Conv layers carry no bias; affine shifts
// only enter through BatchNorm folding.
template <typename T>
struct BranchLayer {
    LayerKind kind = LayerKind::Identity;
    Tensor<T> weight;                    // Conv: [kh,kw,in,out]
    std::shared_ptr<BNState<T>> bn;      // BatchNorm
    Tensor<T> scale;                     // Scale: [C]

    static BranchLayer conv(Tensor<T> w) {
        BranchLayer l;
        l.kind = LayerKind::Conv;
        l.weight = std::move(w);
        return l;
    }
    static BranchLayer batchnorm(std::shared_ptr<BNState<T>> st) {
        BranchLayer l;
        l.kind = LayerKind::BatchNorm;
        l.bn = std::move(st);
        return l;
    }
    static BranchLayer scaling(Tensor<T> s) {
        BranchLayer l;
        l.kind = LayerKind::Scale;
        l.scale = std::move(s);
        return l;
    }
    static BranchLayer identity() { return BranchLayer{}; }
};

template <typename T>
struct Branch {
    std::vector<BranchLayer<T>> layers;
};

template <typename T>
struct BranchFold {
    Tensor<T> kernel;      // composed kernel of the branch so far
    Tensor<T> bias;        // defined only when has_bias
    bool has_bias = false;
    Tensor<T> value;       // literal activation when requested
};

// A re-parametrization block: a set of parallel branches replacing one
// same-padded convolution. merged_weight() computes the equivalent single
// kernel M and bias b as a differentiable function of every branch
// parameter (and of the input batch when BN statistics depend on it).
template <typename T>
class ReparamBlock {
public:
    std::vector<Branch<T>> branches;
    int64_t target_kh = 3, target_kw = 3;
    int64_t in_channels = 0, out_channels = 0;

    void validate() const {
        require(!branches.empty(), "ReparamBlock: needs at least one branch");
        require(target_kh % 2 == 1 && target_kw % 2 == 1,
                "ReparamBlock: target kernel dims must be odd");
        for (const auto& br : branches) {
            int64_t ch = in_channels;
            int64_t eff_kh = 1, eff_kw = 1;
            int non1x1 = 0;
            for (const auto& l : br.layers) {
                switch (l.kind) {
                    case LayerKind::Conv: {
                        require(l.weight.rank() == 4, "ReparamBlock: conv weight must be rank-4");
                        require(l.weight.dim(2) == ch,
                                "ReparamBlock: branch channel chain broken, expected " +
                                    std::to_string(ch) + " input channels, kernel has " +
                                    std::to_string(l.weight.dim(2)));
                        if (l.weight.dim(0) > 1 || l.weight.dim(1) > 1) ++non1x1;
                        eff_kh += l.weight.dim(0) - 1;
                        eff_kw += l.weight.dim(1) - 1;
                        ch = l.weight.dim(3);
                        break;
                    }
                    case LayerKind::BatchNorm:
                        require(l.bn && l.bn->channels() == ch,
                                "ReparamBlock: BN channels do not match branch");
                        break;
                    case LayerKind::Scale:
                        require(l.scale.rank() == 1 && l.scale.dim(0) == ch,
                                "ReparamBlock: scale length does not match branch channels");
                        break;
                    case LayerKind::Identity:
                        break;
                }
            }
            require(ch == out_channels, "ReparamBlock: branch output channels " +
                                            std::to_string(ch) + " != block out_channels " +
                                            std::to_string(out_channels));
            require(non1x1 <= 1,
                    "ReparamBlock: at most one non-1x1 conv per branch is supported");
            require(eff_kh <= target_kh && eff_kw <= target_kw,
                    "ReparamBlock: branch effective kernel exceeds target");
            require(eff_kh % 2 == 1 && eff_kw % 2 == 1,
                    "ReparamBlock: branch effective kernel must be odd-sized");
            bool passthrough = true;
            for (const auto& l : br.layers) passthrough = passthrough && l.kind != LayerKind::Conv;
            if (passthrough)
                require(in_channels == out_channels,
                        "ReparamBlock: identity/scale branch requires in == out channels");
        }
    }

    bool has_bn() const {
        for (const auto& br : branches)
            for (const auto& l : br.layers)
                if (l.kind == LayerKind::BatchNorm) return true;
        return false;
    }

    // (M, b): the single-conv equivalent of this block.
    FoldResult<T> merged_weight(const Tensor<T>& x, Mode mode, BnMode bn_mode) {
        return combine(walk_all(x, mode, bn_mode, /*want_value=*/false));
    }

    // Literal branch-by-branch evaluation; reference semantics for the
    // merged-equivalence checks.
    Tensor<T> forward_expanded(const Tensor<T>& x, Mode mode, BnMode bn_mode) {
        require(x.defined(), "forward_expanded: input required");
        auto folds = walk_all(x, mode, bn_mode, /*want_value=*/true);
        Tensor<T> out;
        for (auto& f : folds) out = out.defined() ? add(out, f.value) : f.value;
        return out;
    }

    std::vector<Tensor<T>> parameters() {
        std::vector<Tensor<T>> ps;
        for (auto& br : branches)
            for (auto& l : br.layers) {
                if (l.kind == LayerKind::Conv) ps.push_back(l.weight);
                if (l.kind == LayerKind::Scale) ps.push_back(l.scale);
                if (l.kind == LayerKind::BatchNorm) {
                    ps.push_back(l.bn->gamma);
                    ps.push_back(l.bn->beta);
                }
            }
        return ps;
    }

private:
    static ConvSpec same_spec(const Tensor<T>& w) {
        return ConvSpec{w.dim(0), w.dim(1), w.dim(2), w.dim(3), Padding::Same, 1};
    }

    static Tensor<T> normalize_with(const Tensor<T>& v, const BNState<T>& st,
                                    const Tensor<T>& mu_y, const Tensor<T>& var) {
        auto rstd = div(st.gamma, sqrt_op(add_scalar(var, st.epsilon)));
        return add_channel(scale_channels(add_channel(v, neg(mu_y)), rstd), st.beta);
    }

    std::vector<BranchFold<T>> walk_all(const Tensor<T>& x, Mode mode, BnMode bn_mode,
                                        bool want_value) {
        validate();
        if (mode == Mode::Train && has_bn())
            require(x.defined(), "merged_weight: train-mode BN statistics need the input batch");
        if (want_value) require(x.defined(), "forward_expanded: input required");
        std::vector<BranchFold<T>> out;
        out.reserve(branches.size());
        for (auto& br : branches) out.push_back(walk_branch(br, x, mode, bn_mode, want_value));
        return out;
    }

    FoldResult<T> combine(std::vector<BranchFold<T>> folds) {
        std::vector<Tensor<T>> kernels;
        Tensor<T> bias;
        for (auto& f : folds) {
            kernels.push_back(f.kernel);
            if (f.has_bias) bias = bias.defined() ? add(bias, f.bias) : f.bias;
        }
        auto merged = merge_parallel(kernels, target_kh, target_kw);
        if (!bias.defined()) bias = Tensor<T>::zeros({out_channels});
        return {merged, bias};
    }

    BranchFold<T> walk_branch(Branch<T>& br, const Tensor<T>& x, Mode mode, BnMode bn_mode,
                              bool want_value) {
        BranchFold<T> st;
        if (want_value) st.value = x;
        for (auto& l : br.layers) {
            switch (l.kind) {
                case LayerKind::Identity:
                    break;
                case LayerKind::Conv:
                    if (!st.kernel.defined()) {
                        st.kernel = l.weight;
                    } else {
                        st.kernel = merge_sequential(st.kernel, l.weight);
                        // a per-channel shift rides through the next conv as
                        // its product with the kernel's spatial column sums
                        if (st.has_bias) st.bias = vecmat(st.bias, sum_spatial(l.weight));
                    }
                    if (want_value) st.value = conv2d(st.value, l.weight, same_spec(l.weight));
                    break;
                case LayerKind::Scale:
                    st.kernel = st.kernel.defined() ? scale_channels(st.kernel, l.scale)
                                                    : diag_kernel(l.scale);
                    if (st.has_bias) st.bias = mul(st.bias, l.scale);
                    if (want_value) st.value = scale_channels(st.value, l.scale);
                    break;
                case LayerKind::BatchNorm:
                    apply_bn(st, *l.bn, x, mode, bn_mode, want_value);
                    break;
            }
        }
        if (!st.kernel.defined()) st.kernel = identity_kernel<T>(in_channels);
        return st;
    }

    // Folds one BN layer into the branch state. The fold consumes the mean of
    // the convolutional part only; an existing branch shift cancels exactly:
    //   BN(conv + b_cur) = conv * s - mu_conv * s + beta,  s = gamma/sqrt(V+eps).
    void apply_bn(BranchFold<T>& st, BNState<T>& bn, const Tensor<T>& x, Mode mode,
                  BnMode bn_mode, bool want_value) {
        Tensor<T> k_eff = st.kernel.defined() ? st.kernel : identity_kernel<T>(in_channels);
        Tensor<T> mu_conv, var, mu_y;
        if (mode == Mode::Eval) {
            Tensor<T> rm({bn.channels()}, bn.running_mean);
            Tensor<T> rv({bn.channels()}, bn.running_var);
            mu_y = rm;
            var = rv;
            mu_conv = st.has_bias ? sub(rm, st.bias) : rm;
        } else if (bn_mode == BnMode::Exact) {
            Tensor<T> y_stat;
            if (want_value) {
                y_stat = st.value;
            } else if (st.kernel.defined()) {
                y_stat = conv2d(x, st.kernel, same_spec(st.kernel));
                if (st.has_bias) y_stat = add_channel(y_stat, st.bias);
            } else {
                y_stat = x;  // identity branch: pre-BN activation is the input itself
            }
            mu_y = mean_bhd(y_stat);
            var = var_bhd(y_stat);
            update_running(bn, mu_y.data(), var.data());
            mu_conv = st.has_bias ? sub(mu_y, st.bias) : mu_y;
        } else {
            mu_conv = bn_est_mean(x, k_eff);
            var = bn_est_var(x, k_eff);
            mu_y = st.has_bias ? add(mu_conv, st.bias) : mu_conv;
            update_running(bn, mu_y.data(), var.data());
        }
        if (want_value) st.value = normalize_with(st.value, bn, mu_y, var);
        auto folded = bn_fold(k_eff, mu_conv, var, bn);
        st.kernel = folded.weight;
        st.bias = folded.bias;
        st.has_bias = true;
    }
};

enum class BlockTopology { PlainConv, ConvIdentity, ACNet, RepVgg, TwoConvChain };

inline const char* topology_name(BlockTopology t) {
    switch (t) {
        case BlockTopology::PlainConv: return "plain_conv";
        case BlockTopology::ConvIdentity: return "conv_identity";
        case BlockTopology::ACNet: return "acnet";
        case BlockTopology::RepVgg: return "repvgg";
        case BlockTopology::TwoConvChain: return "two_conv_chain";
    }
    return "?";
}

inline std::optional<BlockTopology> topology_from_name(const std::string& s) {
    if (s == "plain_conv") return BlockTopology::PlainConv;
    if (s == "conv_identity") return BlockTopology::ConvIdentity;
    if (s == "acnet") return BlockTopology::ACNet;
    if (s == "repvgg") return BlockTopology::RepVgg;
    if (s == "two_conv_chain") return BlockTopology::TwoConvChain;
    return std::nullopt;
}

template <typename T>
Tensor<T> random_kernel(int64_t kh, int64_t kw, int64_t cin, int64_t cout, Rng& rng) {
    Tensor<T> w({kh, kw, cin, cout});
    const double std = std::sqrt(2.0 / double(kh * kw * cin));
    for (auto& v : w.data()) v = T(rng.normal() * std);
    w.set_requires_grad(true);
    return w;
}

// Catalogue factory. All blocks target a 3x3 same-padded convolution.
template <typename T>
ReparamBlock<T> make_block(BlockTopology topo, int64_t cin, int64_t cout, Rng& rng,
                           T bn_momentum = T(0.1), T bn_eps = T(1e-5)) {
    ReparamBlock<T> blk;
    blk.in_channels = cin;
    blk.out_channels = cout;
    blk.target_kh = blk.target_kw = 3;
    // branches sum at the block output; starting each BN at gamma =
    // 1/sqrt(#branches) keeps the initial output scale of the block equal to
    // a single normalized conv
    const T gamma0 = topo == BlockTopology::ACNet || topo == BlockTopology::RepVgg
                         ? T(1) / std::sqrt(T(3))
                         : T(1);
    auto bn = [&] {
        auto st = std::make_shared<BNState<T>>(BNState<T>::make(cout, bn_momentum, bn_eps));
        for (auto& g : st->gamma.data()) g = gamma0;
        return st;
    };
    switch (topo) {
        case BlockTopology::PlainConv:
            blk.branches.push_back({{BranchLayer<T>::conv(random_kernel<T>(3, 3, cin, cout, rng))}});
            break;
        case BlockTopology::ConvIdentity:
            require(cin == cout, "conv_identity block needs cin == cout");
            blk.branches.push_back({{BranchLayer<T>::conv(random_kernel<T>(3, 3, cin, cout, rng))}});
            blk.branches.push_back({{BranchLayer<T>::identity()}});
            break;
        case BlockTopology::ACNet:
            blk.branches.push_back({{BranchLayer<T>::conv(random_kernel<T>(3, 3, cin, cout, rng)),
                                     BranchLayer<T>::batchnorm(bn())}});
            blk.branches.push_back({{BranchLayer<T>::conv(random_kernel<T>(1, 3, cin, cout, rng)),
                                     BranchLayer<T>::batchnorm(bn())}});
            blk.branches.push_back({{BranchLayer<T>::conv(random_kernel<T>(3, 1, cin, cout, rng)),
                                     BranchLayer<T>::batchnorm(bn())}});
            break;
        case BlockTopology::RepVgg:
            require(cin == cout, "repvgg block needs cin == cout");
            blk.branches.push_back({{BranchLayer<T>::conv(random_kernel<T>(3, 3, cin, cout, rng)),
                                     BranchLayer<T>::batchnorm(bn())}});
            blk.branches.push_back({{BranchLayer<T>::conv(random_kernel<T>(1, 1, cin, cout, rng)),
                                     BranchLayer<T>::batchnorm(bn())}});
            blk.branches.push_back(
                {{BranchLayer<T>::identity(), BranchLayer<T>::batchnorm(bn())}});
            break;
        case BlockTopology::TwoConvChain: {
            // the 1x1 starts near the identity so the composed kernel keeps
            // the scale of the 3x3 at init
            Tensor<T> w2({1, 1, cout, cout});
            const double nstd = 0.1 / std::sqrt(double(cout));
            for (int64_t c = 0; c < cout; ++c)
                for (int64_t o = 0; o < cout; ++o)
                    w2.at({0, 0, c, o}) = T((c == o ? 1.0 : 0.0) + rng.normal() * nstd);
            w2.set_requires_grad(true);
            blk.branches.push_back({{BranchLayer<T>::conv(random_kernel<T>(3, 3, cin, cout, rng)),
                                     BranchLayer<T>::conv(std::move(w2))}});
            break;
        }
    }
    blk.validate();
    return blk;
}

}  // namespace repq
