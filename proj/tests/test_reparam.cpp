#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "repq/reparam.hpp"
#include "testing_util.hpp"

using namespace repq;
using namespace repq::testing;

namespace {
template <typename T>
ConvSpec spec_of(const Tensor<T>& w, Padding p) {
    return ConvSpec{w.dim(0), w.dim(1), w.dim(2), w.dim(3), p, 1};
}

template <typename T>
Tensor<T> merged_apply(const Tensor<T>& x, const FoldResult<T>& f) {
    ConvSpec spec{f.weight.dim(0), f.weight.dim(1), f.weight.dim(2), f.weight.dim(3),
                  Padding::Same, 1};
    return add_channel(conv2d(x, f.weight, spec), f.bias);
}

std::vector<BlockTopology> all_topologies() {
    return {BlockTopology::PlainConv, BlockTopology::ConvIdentity, BlockTopology::ACNet,
            BlockTopology::RepVgg, BlockTopology::TwoConvChain};
}
}  // namespace

TEST_CASE("identity_kernel") {
    SUBCASE("channels=1, 1x1 is [[1]]") {
        auto k = identity_kernel<double>(1);
        CHECK(k.shape() == Shape{1, 1, 1, 1});
        CHECK(k.data()[0] == 1.0);
    }
    SUBCASE("channels=2, 3x3 has the identity at the centre") {
        auto k = identity_kernel<double>(2, 3, 3);
        int ones = 0, zeros = 0;
        for (double v : k.data()) (v == 1.0 ? ones : zeros)++;
        CHECK(ones == 2);
        CHECK(zeros == 34);
        CHECK(k.at({1, 1, 0, 0}) == 1.0);
        CHECK(k.at({1, 1, 1, 1}) == 1.0);
        CHECK(k.at({1, 1, 0, 1}) == 0.0);
    }
    SUBCASE("Dirac property: conv(x, K) == x under same padding") {
        Rng rng(3);
        auto x = rand_tensor<double>({2, 5, 5, 3}, rng);
        auto k = identity_kernel<double>(3, 3, 3);
        auto y = conv2d(x, k, spec_of(k, Padding::Same));
        CHECK(max_abs_diff(x, y) <= 1e-15);
    }
    SUBCASE("bad arguments") {
        CHECK_THROWS_AS(identity_kernel<double>(0), std::invalid_argument);
        CHECK_THROWS_AS(identity_kernel<double>(2, 2, 2), std::invalid_argument);
    }
}

TEST_CASE("merge_parallel") {
    Rng rng(5);
    SUBCASE("adding zeros is padding") {
        auto w = rand_tensor<double>({1, 3, 2, 2}, rng);
        auto z = TensorD::zeros({3, 3, 2, 2});
        auto m = merge_parallel<double>({w, z}, 3, 3);
        auto padded = pad_kernel_to(w, 3, 3);
        CHECK(max_abs_diff(m, padded) == 0.0);
    }
    SUBCASE("single kernel maps through unchanged") {
        auto w = rand_tensor<double>({3, 3, 2, 2}, rng);
        auto m = merge_parallel<double>({w}, 3, 3);
        CHECK(max_abs_diff(m, w) == 0.0);
    }
    SUBCASE("ACNet-style 3x3 + 1x3 + 3x1") {
        auto w1 = rand_tensor<double>({3, 3, 2, 3}, rng);
        auto w2 = rand_tensor<double>({1, 3, 2, 3}, rng);
        auto w3 = rand_tensor<double>({3, 1, 2, 3}, rng);
        auto m = merge_parallel<double>({w1, w2, w3}, 3, 3);
        auto x = rand_tensor<double>({2, 6, 6, 2}, rng);
        auto lhs = conv2d(x, m, spec_of(m, Padding::Same));
        auto rhs = add(add(conv2d(x, w1, spec_of(w1, Padding::Same)),
                           conv2d(x, w2, spec_of(w2, Padding::Same))),
                       conv2d(x, w3, spec_of(w3, Padding::Same)));
        CHECK(max_abs_diff(lhs, rhs) <= 1e-12);
    }
    SUBCASE("even kernels have no centre") {
        auto w = rand_tensor<double>({2, 2, 1, 1}, rng);
        CHECK_THROWS_AS(merge_parallel<double>({w}, 3, 3), std::invalid_argument);
    }
    SUBCASE("linearity") {
        auto w1 = rand_tensor<double>({1, 1, 2, 2}, rng);
        auto w2 = rand_tensor<double>({3, 3, 2, 2}, rng);
        double alpha = 0.7, beta = -1.3;
        auto lhs = merge_parallel<double>(
            {add(mul_scalar(pad_kernel_to(w1, 3, 3), alpha), mul_scalar(w2, beta))}, 3, 3);
        auto rhs = add(mul_scalar(merge_parallel<double>({w1}, 3, 3), alpha),
                       mul_scalar(merge_parallel<double>({w2}, 3, 3), beta));
        CHECK(max_abs_diff(lhs, rhs) <= 1e-12);
    }
}

TEST_CASE("merge_sequential") {
    Rng rng(7);
    SUBCASE("1x1 identity second kernel is a no-op") {
        auto w = rand_tensor<double>({3, 3, 2, 4}, rng);
        auto id = identity_kernel<double>(4);
        auto m = merge_sequential(w, id);
        CHECK(max_abs_diff(m, w) <= 1e-15);
    }
    SUBCASE("two 1x1 kernels compose as a channel-matrix product") {
        auto a = rand_tensor<double>({1, 1, 2, 3}, rng);
        auto b = rand_tensor<double>({1, 1, 3, 4}, rng);
        auto m = merge_sequential(a, b);
        auto ref = matmul(reshape(a, {2, 3}), reshape(b, {3, 4}));
        CHECK(max_abs_diff(reshape(m, {2, 4}), ref) == 0.0);
    }
    SUBCASE("3x3 then 1x1 reproduces the chained convolution") {
        auto a = rand_tensor<double>({3, 3, 2, 3}, rng);
        auto b = rand_tensor<double>({1, 1, 3, 4}, rng);
        auto m = merge_sequential(a, b);
        auto x = rand_tensor<double>({1, 5, 5, 2}, rng);
        auto chained = conv2d(conv2d(x, a, spec_of(a, Padding::Same)), b, spec_of(b, Padding::Same));
        auto merged = conv2d(x, m, spec_of(m, Padding::Same));
        CHECK(max_abs_diff(chained, merged) <= 1e-12);
    }
    SUBCASE("1x1 then 3x3 reproduces the chained convolution") {
        auto a = rand_tensor<double>({1, 1, 2, 3}, rng);
        auto b = rand_tensor<double>({3, 3, 3, 4}, rng);
        auto m = merge_sequential(a, b);
        auto x = rand_tensor<double>({1, 5, 5, 2}, rng);
        auto chained = conv2d(conv2d(x, a, spec_of(a, Padding::Same)), b, spec_of(b, Padding::Same));
        auto merged = conv2d(x, m, spec_of(m, Padding::Same));
        CHECK(max_abs_diff(chained, merged) <= 1e-12);
    }
    SUBCASE("float path stays within 1e-5 relative") {
        auto a = rand_tensor<float>({3, 3, 2, 3}, rng);
        auto b = rand_tensor<float>({1, 1, 3, 4}, rng);
        auto m = merge_sequential(a, b);
        auto x = rand_tensor<float>({1, 5, 5, 2}, rng);
        auto chained = conv2d(conv2d(x, a, spec_of(a, Padding::Same)), b, spec_of(b, Padding::Same));
        auto merged = conv2d(x, m, spec_of(m, Padding::Same));
        double scale = 0;
        for (float v : chained.data()) scale = std::max(scale, std::abs(double(v)));
        CHECK(max_abs_diff(chained, merged) <= 1e-5 * scale);
    }
    SUBCASE("two large kernels are unsupported") {
        auto a = rand_tensor<double>({3, 3, 2, 2}, rng);
        auto b = rand_tensor<double>({3, 3, 2, 2}, rng);
        CHECK_THROWS_AS(merge_sequential(a, b), std::invalid_argument);
    }
    SUBCASE("inner channel mismatch is rejected") {
        auto a = rand_tensor<double>({3, 3, 2, 3}, rng);
        auto b = rand_tensor<double>({1, 1, 4, 2}, rng);
        CHECK_THROWS_AS(merge_sequential(a, b), std::invalid_argument);
    }
}

TEST_CASE("merged_weight examples") {
    Rng rng(11);
    SUBCASE("single conv block folds to (W, 0)") {
        auto blk = make_block<double>(BlockTopology::PlainConv, 2, 3, rng);
        auto f = blk.merged_weight(TensorD(), Mode::Eval, BnMode::Exact);
        CHECK(max_abs_diff(f.weight, blk.branches[0].layers[0].weight) == 0.0);
        for (double b : f.bias.data()) CHECK(b == 0.0);
    }
    SUBCASE("conv + identity adds the Dirac kernel") {
        auto blk = make_block<double>(BlockTopology::ConvIdentity, 3, 3, rng);
        auto f = blk.merged_weight(TensorD(), Mode::Eval, BnMode::Exact);
        auto expect = add(blk.branches[0].layers[0].weight, identity_kernel<double>(3, 3, 3));
        CHECK(max_abs_diff(f.weight, expect) == 0.0);
    }
    SUBCASE("RepVGG-style block in float train mode") {
        Rng frng(13);
        auto blk = make_block<float>(BlockTopology::RepVgg, 4, 4, frng);
        auto x = rand_tensor<float>({2, 6, 6, 4}, frng);
        auto expanded = blk.forward_expanded(x, Mode::Train, BnMode::Exact);
        auto f = blk.merged_weight(x, Mode::Train, BnMode::Exact);
        auto merged = merged_apply(x, f);
        CHECK(max_abs_diff(expanded, merged) <= 1e-4);
    }
    SUBCASE("zero-weight block keeps only the BN shift") {
        auto blk = make_block<double>(BlockTopology::ACNet, 2, 2, rng);
        for (auto& br : blk.branches) std::fill(br.layers[0].weight.data().begin(),
                                                br.layers[0].weight.data().end(), 0.0);
        auto x = rand_tensor<double>({1, 4, 4, 2}, rng);
        auto f = blk.merged_weight(x, Mode::Train, BnMode::Exact);
        for (double v : f.weight.data()) CHECK(v == 0.0);
        double beta_sum = 0;  // all betas start at 0, gammas at 1: bias = sum of betas = 0
        for (double b : f.bias.data()) CHECK(b == doctest::Approx(beta_sum));
        auto out = merged_apply(x, f);
        auto ref = blk.forward_expanded(x, Mode::Train, BnMode::Exact);
        CHECK(max_abs_diff(out, ref) <= 1e-9);
    }
    SUBCASE("train-mode BN without a batch is an error") {
        auto blk = make_block<double>(BlockTopology::RepVgg, 2, 2, rng);
        CHECK_THROWS_AS(blk.merged_weight(TensorD(), Mode::Train, BnMode::Exact),
                        std::invalid_argument);
    }
}

TEST_CASE("merged equivalence across the whole catalogue") {
    for (auto topo : all_topologies()) {
        for (auto bn_mode : {BnMode::Exact, BnMode::Estimate}) {
            Rng rng(31 + int(topo) * 7 + int(bn_mode));
            auto blk = make_block<double>(topo, 3, 3, rng);
            // randomize BN affine parameters away from the identity
            for (auto& br : blk.branches)
                for (auto& l : br.layers)
                    if (l.kind == LayerKind::BatchNorm) {
                        for (auto& g : l.bn->gamma.data()) g = rng.uniform(0.6, 1.4);
                        for (auto& b : l.bn->beta.data()) b = rng.uniform(-0.4, 0.4);
                    }
            auto x = rand_tensor<double>({2, 6, 6, 3}, rng);
            CAPTURE(topology_name(topo));
            auto expanded = blk.forward_expanded(x, Mode::Train, bn_mode);
            auto merged = merged_apply(x, blk.merged_weight(x, Mode::Train, bn_mode));
            CHECK(max_abs_diff(expanded, merged) <= 1e-9);
            // eval mode after the running statistics moved off their defaults
            auto expanded_e = blk.forward_expanded(x, Mode::Eval, bn_mode);
            auto merged_e = merged_apply(x, blk.merged_weight(TensorD(), Mode::Eval, bn_mode));
            CHECK(max_abs_diff(expanded_e, merged_e) <= 1e-9);
        }
    }
}

TEST_CASE("expanded forward of a single identity branch is the input") {
    ReparamBlock<double> blk;
    blk.in_channels = blk.out_channels = 2;
    blk.target_kh = blk.target_kw = 1;
    blk.branches.push_back({{BranchLayer<double>::identity()}});
    Rng rng(41);
    auto x = rand_tensor<double>({1, 3, 3, 2}, rng);
    auto y = blk.forward_expanded(x, Mode::Eval, BnMode::Exact);
    CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("gradient equivalence between expanded and merged paths") {
    for (auto topo : all_topologies()) {
        Rng rng(51 + int(topo));
        auto blk = make_block<double>(topo, 3, 3, rng);
        auto x = rand_tensor<double>({2, 5, 5, 3}, rng);
        auto params = blk.parameters();
        CAPTURE(topology_name(topo));

        for (auto& p : params) p.zero_grad();
        auto loss_exp = sum_all(square(blk.forward_expanded(x, Mode::Train, BnMode::Exact)));
        loss_exp.backward();
        std::vector<std::vector<double>> g_exp;
        for (auto& p : params) g_exp.push_back(p.grad());

        for (auto& p : params) p.zero_grad();
        auto loss_mrg =
            sum_all(square(merged_apply(x, blk.merged_weight(x, Mode::Train, BnMode::Exact))));
        loss_mrg.backward();
        for (size_t i = 0; i < params.size(); ++i)
            CHECK(max_rel_diff(g_exp[i], params[i].grad(), 1e-4) <= 1e-3);
    }
}

TEST_CASE("scale layers fold like diagonal kernels") {
    Rng rng(61);
    ReparamBlock<double> blk;
    blk.in_channels = blk.out_channels = 3;
    blk.target_kh = blk.target_kw = 3;
    auto w = random_kernel<double>(3, 3, 3, 3, rng);
    auto s1 = rand_tensor<double>({3}, rng, 0.5, 1.5);
    auto s2 = rand_tensor<double>({3}, rng, 0.5, 1.5);
    s1.set_requires_grad(true);
    s2.set_requires_grad(true);
    blk.branches.push_back({{BranchLayer<double>::conv(w), BranchLayer<double>::scaling(s1)}});
    blk.branches.push_back({{BranchLayer<double>::scaling(s2)}});
    auto x = rand_tensor<double>({1, 5, 5, 3}, rng);
    auto expanded = blk.forward_expanded(x, Mode::Train, BnMode::Exact);
    auto merged = merged_apply(x, blk.merged_weight(x, Mode::Train, BnMode::Exact));
    CHECK(max_abs_diff(expanded, merged) <= 1e-12);
}

TEST_CASE("degenerate input: zero-variance channel through a RepVGG block") {
    Rng rng(71);
    auto blk = make_block<double>(BlockTopology::RepVgg, 2, 2, rng);
    auto x = rand_tensor<double>({2, 4, 4, 2}, rng);
    for (int64_t i = 1; i < x.numel(); i += 2) x.data()[i] = 0.25;  // channel 1 constant
    auto expanded = blk.forward_expanded(x, Mode::Train, BnMode::Exact);
    auto merged = merged_apply(x, blk.merged_weight(x, Mode::Train, BnMode::Exact));
    CHECK(max_abs_diff(expanded, merged) <= 1e-9);
    for (double v : expanded.data()) CHECK(std::isfinite(v));
}

TEST_CASE("block validation errors") {
    Rng rng(81);
    SUBCASE("broken channel chain") {
        ReparamBlock<double> blk;
        blk.in_channels = 2;
        blk.out_channels = 3;
        blk.target_kh = blk.target_kw = 3;
        blk.branches.push_back({{BranchLayer<double>::conv(random_kernel<double>(3, 3, 4, 3, rng))}});
        CHECK_THROWS_AS(blk.validate(), std::invalid_argument);
    }
    SUBCASE("two non-1x1 convs in one branch") {
        ReparamBlock<double> blk;
        blk.in_channels = blk.out_channels = 2;
        blk.target_kh = blk.target_kw = 5;
        blk.branches.push_back({{BranchLayer<double>::conv(random_kernel<double>(3, 3, 2, 2, rng)),
                                 BranchLayer<double>::conv(random_kernel<double>(3, 3, 2, 2, rng))}});
        CHECK_THROWS_AS(blk.validate(), std::invalid_argument);
    }
    SUBCASE("branch kernel larger than target") {
        ReparamBlock<double> blk;
        blk.in_channels = blk.out_channels = 2;
        blk.target_kh = blk.target_kw = 1;
        blk.branches.push_back({{BranchLayer<double>::conv(random_kernel<double>(3, 3, 2, 2, rng))}});
        CHECK_THROWS_AS(blk.validate(), std::invalid_argument);
    }
}
