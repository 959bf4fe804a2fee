#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "attnkit/tensor.hpp"

using namespace attnkit;

namespace {

std::vector<Scalar> to_vec(std::span<const Scalar> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("fills: zeros, constant, explicit values") {
    Tensor4 z = Tensor4::zeros({1, 2, 2, 2});
    CHECK(z.numel() == 8);
    for (Scalar v : z.values()) CHECK(v == 0.0);

    Tensor4 c = Tensor4::constant({1, 1, 1, 1}, 3.0);
    CHECK(c.scalar_value() == 3.0);

    Tensor4 e = Tensor4::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(e.at(0, 0, 1, 0) == 3.0);
}

TEST_CASE("fill errors: bad shapes and value-length mismatch") {
    CHECK_THROWS_AS(Tensor4::zeros({0, 1, 1, 1}), DimensionError);
    CHECK_THROWS_AS(Tensor4::from_values({1, 1, 2, 2}, {1, 2, 3}), DimensionError);
}

TEST_CASE("seeded uniform fill is bitwise reproducible") {
    Tensor4 a = Tensor4::uniform({1, 2, 1, 1}, 0.0, 1.0, 42);
    Tensor4 b = Tensor4::uniform({1, 2, 1, 1}, 0.0, 1.0, 42);
    CHECK(to_vec(a.values()) == to_vec(b.values()));
    for (Scalar v : a.values()) {
        CHECK(v >= 0.0);
        CHECK(v < 1.0);
    }
    Tensor4 other = Tensor4::uniform({1, 2, 1, 1}, 0.0, 1.0, 43);
    CHECK(to_vec(a.values()) != to_vec(other.values()));
}

TEST_CASE("backward of sum gives all-ones gradient") {
    Tensor4 x = Tensor4::uniform({1, 2, 2, 2}, -1.0, 1.0, 7, true);
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor4 root = sum(x);
        tape.backward(root);
    }
    for (Scalar g : x.grad()) CHECK(g == 1.0);
}

TEST_CASE("backward of sum(x*x) is 2x") {
    Tensor4 x = Tensor4::constant({1, 2, 2, 2}, 3.0, true);
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum(mul(x, x)));
    }
    for (Scalar g : x.grad()) CHECK(g == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("backward contract errors") {
    Tensor4 x = Tensor4::zeros({1, 2, 2, 2}, true);
    Tape tape;
    TapeScope scope(tape);
    Tensor4 y = add(x, x);
    CHECK_THROWS_AS(tape.backward(y), ContractError);  // not scalar

    Tensor4 stray = Tensor4::constant({1, 1, 1, 1}, 1.0);
    CHECK_THROWS_AS(tape.backward(stray), ContractError);  // not on tape
}

TEST_CASE("gradient of unused parameter stays exactly zero") {
    Tensor4 used = Tensor4::constant({1, 1, 1, 1}, 2.0, true);
    Tensor4 unused = Tensor4::constant({1, 1, 1, 1}, 5.0, true);
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum(mul(used, used)));
    }
    CHECK(used.grad()[0] == 4.0);
    CHECK(unused.grad()[0] == 0.0);
}

TEST_CASE("permute: shape bookkeeping for a C<->W swap") {
    Tensor4 x = Tensor4::zeros({1, 2, 3, 4});
    Tensor4 y = permute(x, {3, 2, 1});
    CHECK(y.shape() == Shape4{1, 4, 3, 2});
}

TEST_CASE("permute composed with its inverse is the identity") {
    Tensor4 x = Tensor4::uniform({2, 3, 4, 5}, -2.0, 2.0, 11);
    const AxesPerm perm{2, 3, 1};
    Tensor4 back = permute(permute(x, perm), inverse_perm(perm));
    CHECK(back.shape() == x.shape());
    CHECK(to_vec(back.values()) == to_vec(x.values()));
}

TEST_CASE("permute against an index-loop oracle") {
    // x[0,c,h,w] = 100c + 10h + w; after C<->W swap, out[0,w,h,c] holds it.
    Shape4 s{1, 2, 3, 4};
    std::vector<Scalar> vals(static_cast<std::size_t>(s.numel()));
    for (int c = 0; c < s.c; ++c)
        for (int h = 0; h < s.h; ++h)
            for (int w = 0; w < s.w; ++w)
                vals[static_cast<std::size_t>(s.index(0, c, h, w))] = 100.0 * c + 10.0 * h + w;
    Tensor4 x = Tensor4::from_values(s, vals);
    Tensor4 y = permute(x, {3, 2, 1});
    for (int c = 0; c < s.c; ++c)
        for (int h = 0; h < s.h; ++h)
            for (int w = 0; w < s.w; ++w)
                CHECK(y.at(0, w, h, c) == 100.0 * c + 10.0 * h + w);
}

TEST_CASE("permute rejects invalid axis sets") {
    Tensor4 x = Tensor4::zeros({1, 2, 3, 4});
    CHECK_THROWS_AS(permute(x, {1, 1, 2}), ContractError);
    CHECK_THROWS_AS(permute(x, {0, 1, 2}), ContractError);
}

TEST_CASE("gradients flow losslessly through permute") {
    Tensor4 x = Tensor4::uniform({1, 2, 3, 4}, -1.0, 1.0, 3, true);
    Tensor4 w = Tensor4::uniform({1, 4, 3, 2}, -1.0, 1.0, 4);
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum(mul(permute(x, {3, 2, 1}), w)));
    }
    // d sum(P(x) .* w) / dx = P^{-1}(w)
    Tensor4 expect = permute(w, inverse_perm({3, 2, 1}));
    auto gx = x.grad();
    auto ev = expect.values();
    for (std::size_t i = 0; i < gx.size(); ++i) CHECK(gx[i] == ev[i]);
}

TEST_CASE("flip reverses one axis and is self-inverse") {
    Tensor4 x = Tensor4::from_values({1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor4 f = flip(x, 3);
    CHECK(to_vec(f.values()) == std::vector<Scalar>{3, 2, 1, 6, 5, 4});
    Tensor4 ff = flip(f, 3);
    CHECK(to_vec(ff.values()) == to_vec(x.values()));
    CHECK_THROWS_AS(flip(x, 0), ContractError);
}

TEST_CASE("elementwise: ones times scalar 0.5") {
    Tensor4 x = Tensor4::constant({1, 2, 2, 2}, 1.0);
    Tensor4 y = scale(x, 0.5);
    for (Scalar v : y.values()) CHECK(v == 0.5);
}

TEST_CASE("a + zeros == a") {
    Tensor4 a = Tensor4::uniform({1, 3, 2, 2}, -5.0, 5.0, 99);
    Tensor4 y = add(a, Tensor4::zeros(a.shape()));
    CHECK(to_vec(y.values()) == to_vec(a.values()));
}

TEST_CASE("broadcast_mul scales each channel by a shared spatial map") {
    Tensor4 x = Tensor4::uniform({1, 4, 2, 2}, -1.0, 1.0, 5);
    Tensor4 gate = Tensor4::uniform({1, 1, 2, 2}, 0.0, 1.0, 6);
    Tensor4 y = broadcast_mul(x, gate);
    CHECK(y.shape() == x.shape());
    // Explicit loop oracle.
    for (int c = 0; c < 4; ++c)
        for (int h = 0; h < 2; ++h)
            for (int w = 0; w < 2; ++w)
                CHECK(y.at(0, c, h, w) == x.at(0, c, h, w) * gate.at(0, 0, h, w));
}

TEST_CASE("broadcast backward sums over stretched axes") {
    Tensor4 x = Tensor4::constant({1, 4, 2, 2}, 2.0);
    Tensor4 gate = Tensor4::constant({1, 1, 2, 2}, 0.5, true);
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(sum(broadcast_mul(x, gate)));
    }
    // d/d gate[h,w] = sum_c x[c,h,w] = 4 * 2 = 8
    for (Scalar g : gate.grad()) CHECK(g == 8.0);
}

TEST_CASE("non-broadcastable shapes raise a dimension error") {
    Tensor4 a = Tensor4::zeros({1, 4, 2, 2});
    Tensor4 b = Tensor4::zeros({1, 3, 2, 2});
    CHECK_THROWS_AS(add(a, b), DimensionError);
    CHECK_THROWS_AS(broadcast_mul(a, b), DimensionError);
    CHECK_THROWS_AS(mul(a, Tensor4::zeros({1, 1, 2, 2})), DimensionError);
}

TEST_CASE("pick extracts a scalar and routes its gradient") {
    Tensor4 x = Tensor4::from_values({1, 1, 2, 2}, {1, 2, 3, 4}, true);
    Tape tape;
    Scalar v = 0;
    {
        TapeScope scope(tape);
        Tensor4 p = pick(x, 0, 0, 1, 0);
        v = p.scalar_value();
        tape.backward(p);
    }
    CHECK(v == 3.0);
    CHECK(to_vec(x.grad()) == std::vector<Scalar>{0, 0, 1, 0});
    CHECK_THROWS_AS(pick(x, 0, 0, 2, 0), ContractError);
}

TEST_CASE("identical seeds give bitwise-identical outputs and gradients") {
    auto run = [](std::uint64_t seed) {
        Tensor4 x = Tensor4::uniform({2, 3, 4, 4}, -1.0, 1.0, seed, true);
        Tensor4 w = Tensor4::uniform({2, 3, 4, 4}, -1.0, 1.0, seed + 1);
        Tape tape;
        TapeScope scope(tape);
        Tensor4 loss = sum(mul(x, add(x, w)));
        tape.backward(loss);
        return std::make_pair(loss.scalar_value(), to_vec(x.grad()));
    };
    auto [l1, g1] = run(123);
    auto [l2, g2] = run(123);
    CHECK(l1 == l2);
    CHECK(g1 == g2);
}

TEST_CASE("shared parameter used twice accumulates both contributions") {
    Tensor4 w = Tensor4::constant({1, 1, 1, 1}, 3.0, true);
    Tensor4 a = Tensor4::constant({1, 1, 1, 1}, 2.0);
    Tape tape;
    {
        TapeScope scope(tape);
        // loss = w*a + w*w = 6 + 9; dloss/dw = a + 2w = 8
        tape.backward(sum(add(mul(w, a), mul(w, w))));
    }
    CHECK(w.grad()[0] == 8.0);
}
