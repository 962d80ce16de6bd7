#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>

#include "repq/batchnorm.hpp"
#include "repq/ops.hpp"
#include "repq/quant.hpp"
#include "repq/reparam.hpp"
#include "testing_util.hpp"

using namespace repq;
using namespace repq::testing;

namespace {

// Autodiff grads vs central finite differences for every listed parameter.
void check_grads(const std::function<TensorD()>& build, std::vector<TensorD> params,
                 double tol = 1e-6, double h = 1e-5) {
    auto loss = build();
    for (auto& p : params) p.zero_grad();
    loss.backward();
    for (auto& p : params) {
        REQUIRE(p.has_grad());
        auto fd = finite_diff([&] { return build().item(); }, p.data(), h);
        for (size_t i = 0; i < fd.size(); ++i) {
            double ad = p.grad()[i];
            double denom = std::max({std::abs(fd[i]), std::abs(ad), 1e-6});
            CHECK(std::abs(fd[i] - ad) / denom <= tol);
        }
    }
}

// loss = sum(out * R) with a fixed random probe so every output element
// contributes a distinct weight
TensorD probe_loss(const TensorD& out, const TensorD& probe) {
    return sum_all(mul(out, probe));
}

}  // namespace

TEST_CASE("sum: gradient is all ones") {
    Rng rng(2);
    auto x = rand_tensor<double>({2, 3}, rng);
    x.set_requires_grad(true);
    auto loss = sum_all(x);
    loss.backward();
    for (double g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward requires a scalar") {
    TensorD x({2}, {1, 2});
    x.set_requires_grad(true);
    CHECK_THROWS_AS(x.backward(), std::invalid_argument);
}

TEST_CASE("backward is deterministic") {
    auto run = [] {
        Rng rng(77);
        auto x = rand_tensor<double>({2, 4, 4, 3}, rng);
        auto w = rand_tensor<double>({3, 3, 3, 2}, rng);
        x.set_requires_grad(true);
        w.set_requires_grad(true);
        ConvSpec spec{3, 3, 3, 2, Padding::Same, 1};
        auto loss = sum_all(square(conv2d(x, w, spec)));
        loss.backward();
        auto g = w.grad();
        g.insert(g.end(), x.grad().begin(), x.grad().end());
        return g;
    };
    CHECK(run() == run());
}

TEST_CASE("shared subexpression accumulates both contributions") {
    TensorD x({1}, {3.0});
    x.set_requires_grad(true);
    auto loss = add(mul(x, x), x);  // x^2 + x, d/dx = 2x+1 = 7
    loss.backward();
    CHECK(x.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("finite-difference checks for the op suite") {
    Rng rng(101);
    auto x = rand_tensor<double>({2, 4, 4, 3}, rng, 0.2, 1.5);  // positive: sqrt/div-safe
    auto y = rand_tensor<double>({2, 4, 4, 3}, rng, 0.5, 2.0);
    x.set_requires_grad(true);
    y.set_requires_grad(true);
    auto probe = rand_tensor<double>({2, 4, 4, 3}, rng);

    SUBCASE("add") {
        check_grads([&] { return probe_loss(add(x, y), probe); }, {x, y});
    }
    SUBCASE("sub") {
        check_grads([&] { return probe_loss(sub(x, y), probe); }, {x, y});
    }
    SUBCASE("mul") {
        check_grads([&] { return probe_loss(mul(x, y), probe); }, {x, y});
    }
    SUBCASE("div") {
        check_grads([&] { return probe_loss(div(x, y), probe); }, {x, y});
    }
    SUBCASE("square") {
        check_grads([&] { return probe_loss(square(x), probe); }, {x});
    }
    SUBCASE("sqrt") {
        check_grads([&] { return probe_loss(sqrt_op(x), probe); }, {x});
    }
    SUBCASE("relu away from the kink") {
        auto z = rand_tensor<double>({3, 5}, rng);
        for (auto& v : z.data())
            if (std::abs(v) < 0.05) v = 0.1;  // keep FD away from 0
        z.set_requires_grad(true);
        auto pr = rand_tensor<double>({3, 5}, rng);
        check_grads([&] { return probe_loss(relu(z), pr); }, {z});
    }
    SUBCASE("mean_bhd / var_bhd") {
        auto pr = rand_tensor<double>({3}, rng);
        check_grads([&] { return probe_loss(mean_bhd(x), pr); }, {x});
        check_grads([&] { return probe_loss(var_bhd(x), pr); }, {x});
    }
    SUBCASE("scale_channels / add_channel") {
        auto s = rand_tensor<double>({3}, rng, 0.5, 1.5);
        s.set_requires_grad(true);
        check_grads([&] { return probe_loss(scale_channels(x, s), probe); }, {x, s});
        check_grads([&] { return probe_loss(add_channel(x, s), probe); }, {x, s});
    }
    SUBCASE("diag_kernel / sum_spatial / pad_kernel_to") {
        auto s = rand_tensor<double>({4}, rng);
        s.set_requires_grad(true);
        auto pr1 = rand_tensor<double>({1, 1, 4, 4}, rng);
        check_grads([&] { return probe_loss(diag_kernel(s), pr1); }, {s});
        auto w = rand_tensor<double>({3, 3, 2, 4}, rng);
        w.set_requires_grad(true);
        auto pr2 = rand_tensor<double>({2, 4}, rng);
        check_grads([&] { return probe_loss(sum_spatial(w), pr2); }, {w});
        auto w1 = rand_tensor<double>({1, 3, 2, 4}, rng);
        w1.set_requires_grad(true);
        auto pr3 = rand_tensor<double>({3, 3, 2, 4}, rng);
        check_grads([&] { return probe_loss(pad_kernel_to(w1, 3, 3), pr3); }, {w1});
    }
    SUBCASE("matmul / vecmat") {
        auto a = rand_tensor<double>({3, 4}, rng);
        auto b = rand_tensor<double>({4, 5}, rng);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        auto pr = rand_tensor<double>({3, 5}, rng);
        check_grads([&] { return probe_loss(matmul(a, b), pr); }, {a, b});
        auto v = rand_tensor<double>({4}, rng);
        v.set_requires_grad(true);
        auto pr2 = rand_tensor<double>({5}, rng);
        check_grads([&] { return probe_loss(vecmat(v, b), pr2); }, {v, b});
    }
    SUBCASE("global_avg_pool / avg_pool_2x2") {
        auto pr = rand_tensor<double>({2, 3}, rng);
        check_grads([&] { return probe_loss(global_avg_pool(x), pr); }, {x});
        auto pr2 = rand_tensor<double>({2, 2, 2, 3}, rng);
        check_grads([&] { return probe_loss(avg_pool_2x2(x), pr2); }, {x});
    }
    SUBCASE("softmax cross-entropy") {
        auto logits = rand_tensor<double>({4, 5}, rng);
        logits.set_requires_grad(true);
        std::vector<int> labels{0, 3, 2, 4};
        check_grads([&] { return softmax_cross_entropy(logits, labels); }, {logits});
    }
    SUBCASE("merge_sequential, both orientations") {
        auto a = rand_tensor<double>({3, 3, 2, 3}, rng);
        auto b = rand_tensor<double>({1, 1, 3, 4}, rng);
        a.set_requires_grad(true);
        b.set_requires_grad(true);
        auto pr = rand_tensor<double>({3, 3, 2, 4}, rng);
        check_grads([&] { return probe_loss(merge_sequential(a, b), pr); }, {a, b});
        auto a1 = rand_tensor<double>({1, 1, 2, 3}, rng);
        auto b1 = rand_tensor<double>({3, 3, 3, 4}, rng);
        a1.set_requires_grad(true);
        b1.set_requires_grad(true);
        check_grads([&] { return probe_loss(merge_sequential(a1, b1), pr); }, {a1, b1});
    }
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(55);
    auto x = rand_tensor<double>({1, 4, 4, 2}, rng);
    auto w = rand_tensor<double>({2, 2, 2, 3}, rng);
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    for (Padding p : {Padding::Valid, Padding::Same}) {
        ConvSpec spec{2, 2, 2, 3, p, 1};
        check_grads([&] { return sum_all(conv2d(x, w, spec)); }, {x, w});
    }
}

namespace {

// Freezes the rounding residual of each element at the base point so the
// recomputed path is smooth; matches the declared straight-through /
// learned-step gradients away from saturation boundaries.
struct SurrogateQuant {
    double qmin, qmax;
    std::vector<double> residual;
    std::vector<int> mode;  // 0 in-range, 1 clamp-lo, 2 clamp-hi

    void capture(const std::vector<double>& v, double s, double lo, double hi) {
        qmin = lo;
        qmax = hi;
        residual.resize(v.size());
        mode.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) {
            double r = v[i] / s;
            residual[i] = round_half_even(r) - r;
            mode[i] = r < qmin ? 1 : (r > qmax ? 2 : 0);
        }
    }
    bool near_saturation(const std::vector<double>& v, double s, double margin) const {
        for (double x : v) {
            double r = x / s;
            if (std::abs(r - qmin) < margin || std::abs(r - qmax) < margin) return true;
        }
        return false;
    }
    double apply(double v, double s, size_t i) const {
        if (mode[i] == 1) return qmin * s;
        if (mode[i] == 2) return qmax * s;
        return v + residual[i] * s;
    }
};

}  // namespace

TEST_CASE("composed conv -> BN -> quantize -> loss passes finite differences") {
    Rng rng(202);
    auto x = rand_tensor<double>({1, 4, 4, 2}, rng);
    auto w = rand_tensor<double>({3, 3, 2, 3}, rng);
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    auto st = BNState<double>::make(3);
    ConvSpec spec{3, 3, 2, 3, Padding::Same, 1};
    auto probe = rand_tensor<double>({1, 4, 4, 3}, rng);

    // set up the activation quantizer on the base BN output
    auto base_bn = bn_forward(conv2d(x, w, spec), st, Mode::Train);
    auto q = QuantizerState<double>::activations(4, true);
    min_error_init(base_bn, q);
    const double s0 = q.steps.data()[0];
    q.steps.set_requires_grad(false);

    SurrogateQuant sq;
    sq.capture(base_bn.data(), s0, double(q.qmin()), double(q.qmax()));
    REQUIRE(!sq.near_saturation(base_bn.data(), s0, 1e-2));  // discontinuity exclusion

    // autodiff gradients through the real quantizer
    auto loss = probe_loss(quantize(bn_forward(conv2d(x, w, spec), st, Mode::Train), q), probe);
    x.zero_grad();
    w.zero_grad();
    loss.backward();

    // finite differences of the frozen-residual path
    auto eval = [&] {
        auto z = bn_forward(conv2d(x, w, spec), st, Mode::Train);
        double acc = 0;
        for (int64_t i = 0; i < z.numel(); ++i)
            acc += sq.apply(z.data()[i], s0, size_t(i)) * probe.data()[i];
        return acc;
    };
    for (auto* p : {&x, &w}) {
        auto fd = finite_diff(eval, p->data(), 1e-5);
        for (size_t i = 0; i < fd.size(); ++i) {
            double ad = p->grad()[i];
            double denom = std::max({std::abs(fd[i]), std::abs(ad), 1e-6});
            CHECK(std::abs(fd[i] - ad) / denom <= 1e-4);
        }
    }
}
