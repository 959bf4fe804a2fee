#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "attnkit/nn.hpp"
#include "test_support.hpp"

using namespace attnkit;
using attnkit::testing::fd_max_rel_err;

TEST_CASE("conv2d: 1x1 identity kernel reproduces the input") {
    Conv2dState s;
    s.weight = Tensor4::from_values({1, 1, 1, 1}, {1.0});
    Tensor4 x = Tensor4::uniform({1, 1, 3, 3}, -1.0, 1.0, 2);
    Tensor4 y = conv2d(x, s);
    auto xv = x.values();
    auto yv = y.values();
    for (std::size_t i = 0; i < xv.size(); ++i) CHECK(yv[i] == xv[i]);
}

TEST_CASE("conv2d: all-ones 3x3 kernel on constant input, direct sum oracle") {
    Conv2dState s;
    s.weight = Tensor4::constant({1, 1, 3, 3}, 1.0);
    s.padding = 1;
    Tensor4 x = Tensor4::constant({1, 1, 4, 4}, 5.0);
    Tensor4 y = conv2d(x, s);
    CHECK(y.shape() == Shape4{1, 1, 4, 4});
    CHECK(y.at(0, 0, 1, 1) == 45.0);
    CHECK(y.at(0, 0, 1, 2) == 45.0);
    CHECK(y.at(0, 0, 0, 0) == 20.0);
    CHECK(y.at(0, 0, 3, 3) == 20.0);
    CHECK(y.at(0, 0, 0, 1) == 30.0);
}

TEST_CASE("conv2d: zero weight and bias give zero output") {
    Rng rng(1);
    Conv2dState s = Conv2dState::make(2, 3, 3, 1, 1, true, rng);
    std::fill(s.weight.mutable_values().begin(), s.weight.mutable_values().end(), 0.0);
    std::fill(s.bias.mutable_values().begin(), s.bias.mutable_values().end(), 0.0);
    Tensor4 y = conv2d(Tensor4::uniform({2, 3, 4, 4}, -1.0, 1.0, 5), s);
    for (Scalar v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("conv2d: channel mismatch raises a dimension error") {
    Rng rng(1);
    Conv2dState s = Conv2dState::make(2, 3, 3, 1, 1, false, rng);
    CHECK_THROWS_AS(conv2d(Tensor4::zeros({1, 4, 5, 5}), s), DimensionError);
}

TEST_CASE("conv2d: shape-preserving configuration keeps spatial dims") {
    Rng rng(9);
    for (int k : {1, 3, 5, 7}) {
        Conv2dState s = Conv2dState::shape_preserving(2, 3, k, rng);
        Tensor4 y = conv2d(Tensor4::zeros({1, 3, 9, 11}), s);
        CHECK(y.shape() == Shape4{1, 2, 9, 11});
    }
    CHECK_THROWS_AS(Conv2dState::shape_preserving(2, 3, 4, rng), ConfigError);
}

TEST_CASE("conv2d gradients agree with central differences") {
    Rng rng(17);
    Conv2dState s = Conv2dState::make(3, 2, 3, 2, 1, true, rng);
    Tensor4 x = Tensor4::uniform({2, 2, 5, 5}, -1.0, 1.0, 21, true);
    Tensor4 cot = Tensor4::uniform({2, 3, 3, 3}, -1.0, 1.0, 22);
    auto loss = [&] { return sum(mul(conv2d(x, s), cot)); };
    CHECK(fd_max_rel_err(x, loss) < 1e-6);
    CHECK(fd_max_rel_err(s.weight, loss) < 1e-6);
    CHECK(fd_max_rel_err(s.bias, loss) < 1e-6);
}

TEST_CASE("batchnorm2d train: standardized input passes through") {
    BatchNorm2dState s = BatchNorm2dState::make(2);
    // Per-channel batch mean 0, biased variance exactly 1.
    Tensor4 x = Tensor4::from_values({2, 2, 1, 2}, {-1, 1, -1, 1, 1, -1, 1, -1});
    Tensor4 y = batchnorm2d(x, s);
    auto xv = x.values();
    auto yv = y.values();
    for (std::size_t i = 0; i < xv.size(); ++i)
        CHECK(yv[i] == doctest::Approx(xv[i]).epsilon(1e-4));
}

TEST_CASE("batchnorm2d train: output is standardized per channel") {
    BatchNorm2dState s = BatchNorm2dState::make(3);
    Tensor4 x = Tensor4::uniform({2, 3, 4, 4}, -10.0, 10.0, 31);
    Tensor4 y = batchnorm2d(x, s);
    const long long plane = 16;
    for (int c = 0; c < 3; ++c) {
        Scalar mean = 0.0, var = 0.0;
        for (int n = 0; n < 2; ++n)
            for (long long i = 0; i < plane; ++i)
                mean += y.values()[static_cast<std::size_t>((n * 3 + c) * plane + i)];
        mean /= 32.0;
        for (int n = 0; n < 2; ++n)
            for (long long i = 0; i < plane; ++i) {
                Scalar d = y.values()[static_cast<std::size_t>((n * 3 + c) * plane + i)] - mean;
                var += d * d;
            }
        var /= 32.0;
        CHECK(std::abs(mean) < 1e-10);
        CHECK(std::abs(var - 1.0) < 1e-6);
    }
}

TEST_CASE("batchnorm2d eval: deterministic affine map") {
    BatchNorm2dState s = BatchNorm2dState::make(1);
    s.mode = Mode::eval;
    s.gamma.mutable_values()[0] = 2.0;
    s.beta.mutable_values()[0] = 1.0;
    Tensor4 y = batchnorm2d(Tensor4::constant({1, 1, 1, 2}, 3.0), s);
    const Scalar expected = 1.0 + 2.0 * 3.0 / std::sqrt(1.0 + 1e-5);
    for (Scalar v : y.values()) CHECK(v == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("batchnorm2d: gamma = 0 collapses output to beta") {
    BatchNorm2dState s = BatchNorm2dState::make(2);
    std::fill(s.gamma.mutable_values().begin(), s.gamma.mutable_values().end(), 0.0);
    s.beta.mutable_values()[0] = 0.25;
    s.beta.mutable_values()[1] = -0.5;
    Tensor4 y = batchnorm2d(Tensor4::uniform({1, 2, 2, 2}, -1.0, 1.0, 3), s);
    for (int h = 0; h < 2; ++h)
        for (int w = 0; w < 2; ++w) {
            CHECK(y.at(0, 0, h, w) == 0.25);
            CHECK(y.at(0, 1, h, w) == -0.5);
        }
}

TEST_CASE("batchnorm2d: degenerate train batch is rejected") {
    BatchNorm2dState s = BatchNorm2dState::make(2);
    CHECK_THROWS_AS(batchnorm2d(Tensor4::zeros({1, 2, 1, 1}), s), DimensionError);
    s.mode = Mode::eval;
    CHECK_NOTHROW(batchnorm2d(Tensor4::zeros({1, 2, 1, 1}), s));
}

TEST_CASE("batchnorm2d train gradients agree with central differences") {
    BatchNorm2dState s = BatchNorm2dState::make(2);
    Tensor4 x = Tensor4::uniform({2, 2, 3, 3}, -2.0, 2.0, 41, true);
    Tensor4 cot = Tensor4::uniform({2, 2, 3, 3}, -1.0, 1.0, 42);
    auto loss = [&] { return sum(mul(batchnorm2d(x, s), cot)); };
    // Freeze running stats so repeated forwards are identical.
    auto frozen = s;
    auto loss_frozen = [&] {
        BatchNorm2dState tmp = frozen;
        tmp.running_mean = Tensor4::zeros({1, 2, 1, 1});
        tmp.running_var = Tensor4::constant({1, 2, 1, 1}, 1.0);
        return sum(mul(batchnorm2d(x, tmp), cot));
    };
    CHECK(fd_max_rel_err(x, loss_frozen) < 1e-5);
    CHECK(fd_max_rel_err(s.gamma, loss_frozen) < 1e-5);
    (void)loss;
}

TEST_CASE("gap: constant input, exact mean, idempotence") {
    CHECK(gap(Tensor4::constant({2, 3, 4, 4}, 2.5)).at(1, 2, 0, 0) == 2.5);
    Tensor4 x = Tensor4::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor4 m = gap(x);
    CHECK(m.shape() == Shape4{1, 1, 1, 1});
    CHECK(m.scalar_value() == 2.5);
    CHECK(gap(m).scalar_value() == m.scalar_value());
}

TEST_CASE("gmp: max per channel; gmp >= gap on anything") {
    Tensor4 x = Tensor4::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(gmp(x).scalar_value() == 4.0);
    CHECK(gmp(Tensor4::constant({1, 3, 2, 2}, -1.5)).at(0, 1, 0, 0) == -1.5);

    Tensor4 r = Tensor4::uniform({2, 4, 3, 3}, -5.0, 5.0, 77);
    Tensor4 mx = gmp(r);
    Tensor4 mean = gap(r);
    for (std::size_t i = 0; i < mx.values().size(); ++i)
        CHECK(mx.values()[i] >= mean.values()[i]);
}

TEST_CASE("gmp backward routes to the first argmax in row-major order") {
    Tensor4 x = Tensor4::from_values({1, 1, 2, 2}, {4, 1, 4, 2}, true);
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum(gmp(x)));
    }
    std::vector<Scalar> g(x.grad().begin(), x.grad().end());
    CHECK(g == std::vector<Scalar>{1, 0, 0, 0});
}

TEST_CASE("zpool: direct max/mean over the channel axis") {
    Tensor4 x = Tensor4::from_values({1, 4, 1, 1}, {1, 2, 3, 4});
    Tensor4 z = zpool(x);
    CHECK(z.shape() == Shape4{1, 2, 1, 1});
    CHECK(z.at(0, 0, 0, 0) == 4.0);
    CHECK(z.at(0, 1, 0, 0) == 2.5);
}

TEST_CASE("zpool: shape contract and constant input") {
    CHECK(zpool(Tensor4::zeros({1, 64, 32, 32})).shape() == Shape4{1, 2, 32, 32});
    Tensor4 z = zpool(Tensor4::constant({2, 5, 3, 3}, 0.75));
    for (Scalar v : z.values()) CHECK(v == 0.75);
}

TEST_CASE("zpool is invariant under channel shuffles") {
    Tensor4 x = Tensor4::uniform({1, 6, 4, 4}, -2.0, 2.0, 55);
    // Rotate channels by two.
    Shape4 s = x.shape();
    std::vector<Scalar> shuffled(static_cast<std::size_t>(s.numel()));
    const long long plane = static_cast<long long>(s.h) * s.w;
    for (int c = 0; c < s.c; ++c) {
        const int src = (c + 2) % s.c;
        for (long long i = 0; i < plane; ++i)
            shuffled[static_cast<std::size_t>(c * plane + i)] =
                x.values()[static_cast<std::size_t>(src * plane + i)];
    }
    Tensor4 y = Tensor4::from_values(s, shuffled);
    Tensor4 zx = zpool(x);
    Tensor4 zy = zpool(y);
    const long long half = zx.numel() / 2;
    for (long long i = 0; i < half; ++i) {
        // Max is exactly order-independent; the mean reassociates the sum,
        // so it matches to rounding only.
        CHECK(zx.values()[static_cast<std::size_t>(i)] ==
              zy.values()[static_cast<std::size_t>(i)]);
        CHECK(zx.values()[static_cast<std::size_t>(half + i)] ==
              doctest::Approx(zy.values()[static_cast<std::size_t>(half + i)]).epsilon(1e-13));
    }
}

TEST_CASE("sigmoid and relu basics") {
    Tensor4 x = Tensor4::from_values({1, 1, 1, 3}, {-3.0, 0.0, 3.0});
    Tensor4 sig = sigmoid(x);
    CHECK(sig.at(0, 0, 0, 1) == 0.5);
    Tensor4 r = relu(x);
    CHECK(r.at(0, 0, 0, 0) == 0.0);
    CHECK(r.at(0, 0, 0, 2) == 3.0);

    Tensor4 big = Tensor4::from_values({1, 1, 1, 2}, {-30.0, 30.0});
    Tensor4 sat = sigmoid(big);
    for (Scalar v : sat.values()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("sigmoid gradient at zero is exactly 0.25") {
    Tensor4 x = Tensor4::zeros({1, 2, 2, 2}, true);
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum(sigmoid(x)));
    }
    for (Scalar g : x.grad()) CHECK(g == 0.25);
}

TEST_CASE("mlp2: zero weights give zero output; identity case") {
    Rng rng(5);
    Mlp2State s = Mlp2State::make(4, 2, rng);
    std::fill(s.w0.mutable_values().begin(), s.w0.mutable_values().end(), 0.0);
    Tensor4 y = mlp2(Tensor4::uniform({2, 4, 1, 1}, -1.0, 1.0, 1), s);
    for (Scalar v : y.values()) CHECK(v == 0.0);

    // C=2, r=1, W0 = W1 = I: v = (1,-1) -> relu -> (1,0)
    Mlp2State id = Mlp2State::make(2, 1, rng);
    id.w0 = Tensor4::from_values({2, 2, 1, 1}, {1, 0, 0, 1}, true);
    id.w1 = Tensor4::from_values({2, 2, 1, 1}, {1, 0, 0, 1}, true);
    Tensor4 out = mlp2(Tensor4::from_values({1, 2, 1, 1}, {1.0, -1.0}), id);
    CHECK(out.shape() == Shape4{1, 2, 1, 1});
    CHECK(out.at(0, 0, 0, 0) == 1.0);
    CHECK(out.at(0, 1, 0, 0) == 0.0);
}

TEST_CASE("mlp2 configuration errors") {
    Rng rng(5);
    CHECK_THROWS_AS(Mlp2State::make(6, 4, rng), ConfigError);
    Mlp2State s = Mlp2State::make(4, 2, rng);
    CHECK_THROWS_AS(mlp2(Tensor4::zeros({1, 4, 2, 2}), s), DimensionError);
    CHECK_THROWS_AS(mlp2(Tensor4::zeros({1, 8, 1, 1}), s), DimensionError);
}

TEST_CASE("maxpool2d: 2x2 stride 2 and gradient routing") {
    Tensor4 x = Tensor4::from_values({1, 1, 2, 4}, {1, 2, 5, 3, 4, 0, 5, 1}, true);
    Tape tape;
    Tensor4 y;
    {
        TapeScope scope(tape);
        y = maxpool2d(x, 2, 2, 0);
        tape.backward(sum(y));
    }
    CHECK(y.shape() == Shape4{1, 1, 1, 2});
    CHECK(y.at(0, 0, 0, 0) == 4.0);
    CHECK(y.at(0, 0, 0, 1) == 5.0);
    // Tie at value 5: first occurrence in row-major order wins.
    std::vector<Scalar> g(x.grad().begin(), x.grad().end());
    CHECK(g == std::vector<Scalar>{0, 0, 1, 0, 1, 0, 0, 0});
}

TEST_CASE("cross_entropy_mean: uniform logits and gradient") {
    Tensor4 logits = Tensor4::zeros({1, 2, 1, 1}, true);
    Tape tape;
    Scalar loss = 0;
    {
        TapeScope scope(tape);
        Tensor4 l = cross_entropy_mean(logits, {0});
        loss = l.scalar_value();
        tape.backward(l);
    }
    CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(logits.grad()[0] == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(logits.grad()[1] == doctest::Approx(0.5).epsilon(1e-12));

    CHECK_THROWS_AS(cross_entropy_mean(logits, {2}), ContractError);
    CHECK_THROWS_AS(cross_entropy_mean(logits, {0, 1}), DimensionError);
}
