#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mscc/mfa.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

using namespace mscc;
using testutil::random_tensor;

namespace {

Conv2dLayer identity_1x1_as_3x3(i64 channels) {
    // 3x3 kernel whose only nonzero tap is the center of the matching channel
    Conv2dLayer conv;
    conv.weight = Tensor::zeros({channels, channels, 3, 3});
    for (i64 c = 0; c < channels; ++c)
        conv.weight.data_mut()[static_cast<std::size_t>(((c * channels + c) * 3 + 1) * 3 + 1)] = 1.0;
    conv.bias = Tensor::zeros({channels});
    conv.stride = 1;
    conv.pad = 1;
    return conv;
}

}  // namespace

TEST_CASE("align with identity conv and matching grid is the identity") {
    Rng rng(1);
    Tensor x = random_tensor({4, 6, 6}, rng);
    Tensor y = mfa_align(x, identity_1x1_as_3x3(4), 6, 6);
    for (i64 i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-14));
}

TEST_CASE("align maps constant inputs to constant outputs") {
    Rng rng(2);
    Conv2dLayer conv = Conv2dLayer::init(3, 5, 3, 1, rng);
    // zero-pad rims break constancy, so test with the parameter-free pooling part
    // plus a conv whose padding sees the same constant: use a 1x1 conv instead.
    Conv2dLayer one = Conv2dLayer::init(3, 5, 1, 1, rng);
    Tensor x = Tensor::full({3, 8, 8}, 1.7);
    Tensor y = mfa_align(x, one, 4, 4);
    for (i64 c = 0; c < 5; ++c) {
        const double v = y.at({c, 0, 0});
        for (i64 i = 0; i < 4; ++i)
            for (i64 j = 0; j < 4; ++j) CHECK(y.at({c, i, j}) == doctest::Approx(v).epsilon(1e-12));
    }
    (void)conv;
}

TEST_CASE("align matches conv-then-2x2-mean oracle") {
    Rng rng(3);
    Conv2dLayer conv = Conv2dLayer::init(3, 4, 3, 1, rng);
    Tensor x = random_tensor({3, 8, 10}, rng);
    Tensor y = mfa_align(x, conv, 4, 5);

    std::vector<double> xv(x.data().begin(), x.data().end());
    std::vector<double> wv(conv.weight.data().begin(), conv.weight.data().end());
    auto convd = oracle::conv2d(xv, wv, 3, 8, 10, 4, 3, 3, 1, 1);
    for (i64 c = 0; c < 4; ++c)
        for (std::size_t i = 0; i < 80; ++i)
            convd[static_cast<std::size_t>(c) * 80 + i] += conv.bias.data()[static_cast<std::size_t>(c)];
    auto pooled = oracle::avgpool(convd, 4, 8, 10, 2);
    std::vector<double> yv(y.data().begin(), y.data().end());
    CHECK(oracle::max_abs_diff(yv, pooled) < 1e-10);
}

TEST_CASE("align rejects non-integer ratios") {
    Rng rng(4);
    Conv2dLayer conv = Conv2dLayer::init(2, 2, 3, 1, rng);
    Tensor x = random_tensor({2, 6, 6}, rng);
    CHECK_THROWS_AS(mfa_align(x, conv, 4, 4), ConfigError);
}

TEST_CASE("aggregate identities and oracle") {
    Rng rng(5);
    const i64 c = 4, h = 3, w = 5;

    // zero inputs, zero bias -> zero output
    Conv2dLayer fuse = Conv2dLayer::init(3 * c, c, 1, 1, rng);
    Tensor zero = mfa_aggregate(Tensor::zeros({c, h, w}), Tensor::zeros({c, h, w}),
                                Tensor::zeros({c, h, w}), fuse);
    for (i64 i = 0; i < zero.numel(); ++i) CHECK(zero.data()[i] == 0.0);

    // select-first-block fusion returns the first aligned map
    Conv2dLayer proj;
    proj.weight = Tensor::zeros({c, 3 * c, 1, 1});
    for (i64 i = 0; i < c; ++i)
        proj.weight.data_mut()[static_cast<std::size_t>(i * 3 * c + i)] = 1.0;
    proj.bias = Tensor::zeros({c});
    proj.stride = 1;
    proj.pad = 0;
    Tensor f1 = random_tensor({c, h, w}, rng);
    Tensor f2 = random_tensor({c, h, w}, rng);
    Tensor f3 = random_tensor({c, h, w}, rng);
    Tensor sel = mfa_aggregate(f1, f2, f3, proj);
    for (i64 i = 0; i < f1.numel(); ++i) CHECK(sel.data()[i] == doctest::Approx(f1.data()[i]).epsilon(1e-14));

    // random case against a concat + 1x1 loop oracle
    Tensor y = mfa_aggregate(f1, f2, f3, fuse);
    double worst = 0.0;
    for (i64 co = 0; co < c; ++co)
        for (i64 i = 0; i < h; ++i)
            for (i64 j = 0; j < w; ++j) {
                double acc = fuse.bias.data()[static_cast<std::size_t>(co)];
                for (i64 ci = 0; ci < 3 * c; ++ci) {
                    const Tensor& src = ci < c ? f1 : (ci < 2 * c ? f2 : f3);
                    acc += fuse.weight.data()[static_cast<std::size_t>(co * 3 * c + ci)] *
                           src.at({ci % c, i, j});
                }
                worst = std::max(worst, std::abs(y.at({co, i, j}) - acc));
            }
    CHECK(worst < 1e-10);

    CHECK_THROWS_AS(mfa_aggregate(f1, f2, random_tensor({c, h, w + 1}, rng), fuse),
                    ContractViolation);
}

TEST_CASE("module forward keeps the target shape and routes gradient to all levels") {
    Rng rng(6);
    MfaModule mfa = MfaModule::init(2, 3, 4, 8, rng);
    for (int seed = 0; seed < 3; ++seed) {
        Rng r2(100 + static_cast<std::uint64_t>(seed));
        Tensor f1 = random_tensor({2, 16, 16}, r2).set_requires_grad();
        Tensor f2 = random_tensor({3, 8, 8}, r2).set_requires_grad();
        Tensor f3 = random_tensor({4, 4, 4}, r2).set_requires_grad();
        Tensor fa = mfa.forward(f1, f2, f3);
        CHECK(fa.shape() == Shape{8, 4, 4});
        Tensor loss = sum(mul(fa, random_tensor({8, 4, 4}, r2)));
        loss.backward();
        auto nonzero = [](const Tensor& t) {
            for (double g : t.grad())
                if (g != 0.0) return true;
            return false;
        };
        CHECK(nonzero(f1));
        CHECK(nonzero(f2));
        CHECK(nonzero(f3));
    }
}
