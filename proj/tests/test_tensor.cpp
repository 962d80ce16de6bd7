#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "repq/ops.hpp"
#include "testing_util.hpp"

using namespace repq;
using namespace repq::testing;

TEST_CASE("tensor shape/data invariant") {
    CHECK_NOTHROW(TensorD({2, 3}, std::vector<double>(6, 0.0)));
    CHECK_THROWS_AS(TensorD({2, 3}, std::vector<double>(5, 0.0)), std::invalid_argument);
    TensorD t({2, 2});
    CHECK(t.numel() == 4);
    t.at({1, 1}) = 7.0;
    CHECK(t.data()[3] == 7.0);
}

TEST_CASE("flatten_bhd examples") {
    SUBCASE("[1,1,1,C] keeps data") {
        TensorD x({1, 1, 1, 3}, {1, 2, 3});
        auto f = flatten_bhd(x);
        CHECK(f.shape() == Shape{1, 3});
        CHECK(f.data() == x.data());
    }
    SUBCASE("[2,2,2,1] enumerates 1..8") {
        TensorD x({2, 2, 2, 1}, {1, 2, 3, 4, 5, 6, 7, 8});
        auto f = flatten_bhd(x);
        CHECK(f.shape() == Shape{8, 1});
        for (int i = 0; i < 8; ++i) CHECK(f.data()[i] == i + 1);
    }
    SUBCASE("wrong rank rejected") {
        TensorD x({2, 2}, {1, 2, 3, 4});
        CHECK_THROWS_AS(flatten_bhd(x), std::invalid_argument);
    }
    SUBCASE("per-channel mean invariance is exact") {
        Rng rng(11);
        auto x = rand_tensor<double>({3, 4, 5, 6}, rng);
        auto m1 = mean_bhd(x);
        auto m2 = mean_bhd(flatten_bhd(x));
        for (int64_t c = 0; c < 6; ++c) CHECK(m1.data()[c] == m2.data()[c]);
    }
}

TEST_CASE("reduction examples") {
    SUBCASE("mean_bhd of {2,4} is 3") {
        TensorD x({1, 1, 2, 1}, {2, 4});
        CHECK(mean_bhd(x).data()[0] == doctest::Approx(3.0));
    }
    SUBCASE("var_bhd of {2,4} with 1/N normalization is 1") {
        TensorD x({1, 1, 2, 1}, {2, 4});
        CHECK(var_bhd(x).data()[0] == doctest::Approx(1.0));
    }
    SUBCASE("var_bhd of a constant tensor is zero") {
        auto x = TensorD::full({2, 3, 3, 4}, 2.5);
        auto v = var_bhd(x);
        for (auto val : v.data()) CHECK(val == 0.0);
    }
    SUBCASE("sum_spatial collapses kernel cells") {
        TensorD w({2, 2, 1, 1}, {1, 2, 3, 4});
        auto s = sum_spatial(w);
        CHECK(s.shape() == Shape{1, 1});
        CHECK(s.data()[0] == 10.0);
    }
}

TEST_CASE("non-finite values rejected at op boundaries") {
    TensorD x({1, 2, 2, 1}, {1, 2, 3, std::nan("")});
    TensorD w({1, 1, 1, 1}, {1.0});
    ConvSpec spec{1, 1, 1, 1, Padding::Valid, 1};
    CHECK_THROWS_WITH_AS(conv2d(x, w, spec), "conv2d: non-finite value in input tensor",
                         std::invalid_argument);
    CHECK_THROWS_AS(mean_bhd(x), std::invalid_argument);
}

TEST_CASE("elementwise shape mismatch errors") {
    TensorD a({2}, {1, 2});
    TensorD b({3}, {1, 2, 3});
    CHECK_THROWS_AS(add(a, b), std::invalid_argument);
    CHECK_THROWS_AS(mul(a, b), std::invalid_argument);
}
