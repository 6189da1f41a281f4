#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "agrikd/tensor.hpp"
#include "gradcheck.hpp"

using namespace agrikd;

TEST_CASE("tensor construction enforces shape/data agreement") {
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
    CHECK_THROWS_AS(Tensor::from_data({2, 0}, {}), DimensionError);
    Tensor t = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.at({1, 2}) == 6.0);
}

TEST_CASE("matmul identity and hand product") {
    Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
    Tensor b = Tensor::from_data({2, 2}, {3, 4, 5, 6});
    Tensor prod = matmul(eye, b);
    for (std::size_t i = 0; i < 4; ++i) CHECK(prod.data()[i] == b.data()[i]);

    Tensor row = Tensor::from_data({1, 2}, {1, 2});
    Tensor col = Tensor::from_data({2, 1}, {3, 4});
    CHECK(matmul(row, col).value() == doctest::Approx(11.0).epsilon(1e-14));

    CHECK_THROWS_AS(matmul(row, row), DimensionError);
    try {
        matmul(row, row);
    } catch (const DimensionError& e) {
        // diagnostic carries both shapes
        CHECK(std::string(e.what()).find("[1x2]") != std::string::npos);
    }
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(7);
    Tensor a = Tensor::rand_uniform({3, 3}, -1, 1, rng, true);
    Tensor b = Tensor::rand_uniform({3, 3}, -1, 1, rng, true);
    auto loss = [&] { return sum(mul(matmul(a, b), matmul(a, b))); };
    auto report = gradcheck::check(loss, {a, b});
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("batched matmul shapes and gradients") {
    Rng rng(3);
    Tensor a = Tensor::rand_uniform({2, 3, 4}, -1, 1, rng, true);
    Tensor b = Tensor::rand_uniform({2, 4, 5}, -1, 1, rng, true);
    Tensor c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 3, 5});

    Tensor w = Tensor::rand_uniform({4, 5}, -1, 1, rng, true);
    Tensor d = matmul(a, w);
    CHECK(d.shape() == Shape{2, 3, 5});

    auto loss = [&] { return sum(pow(matmul(a, w), 2.0)); };
    auto report = gradcheck::check(loss, {a, w});
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("softmax rows: symmetry, closed form, normalization") {
    Tensor z = Tensor::from_data({1, 3}, {0, 0, 0});
    Tensor s = softmax_rows(z);
    for (double v : s.data()) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-14));

    Tensor two = softmax_rows(Tensor::from_data({1, 2}, {1, 0}));
    CHECK(two.data()[0] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
    CHECK(two.data()[1] == doctest::Approx(0.2689414213699951).epsilon(1e-12));

    Rng rng(11);
    Tensor x = Tensor::rand_uniform({5, 7}, -30, 30, rng);
    Tensor y = softmax_rows(x);
    for (std::size_t r = 0; r < 5; ++r) {
        double total = 0;
        for (std::size_t c = 0; c < 7; ++c) {
            const double v = y.at({r, c});
            CHECK(v > 0.0);
            CHECK(v < 1.0);
            total += v;
        }
        CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("softmax and log-softmax gradients") {
    Rng rng(5);
    Tensor x = Tensor::rand_uniform({3, 4}, -2, 2, rng, true);
    Tensor weights = Tensor::rand_uniform({3, 4}, 0.1, 1.0, rng);
    auto loss1 = [&] { return sum(mul(softmax_rows(x), weights)); };
    CHECK(gradcheck::check(loss1, {x}).max_rel_err < 1e-6);
    auto loss2 = [&] { return sum(mul(log_softmax_rows(x), weights)); };
    CHECK(gradcheck::check(loss2, {x}).max_rel_err < 1e-6);
}

TEST_CASE("backward on sum yields all-ones; elementwise square yields 2x") {
    Tensor x = Tensor::from_data({2, 3}, {1, -2, 3, 0.5, -0.25, 4}, true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);

    Tensor y = Tensor::from_data({2}, {2, -3}, true);
    backward(sum(mul(y, y)));
    CHECK(y.grad()[0] == doctest::Approx(4.0));
    CHECK(y.grad()[1] == doctest::Approx(-6.0));
}

TEST_CASE("backward rejects non-scalar loss and accumulates across calls") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor two_d = mul(x, 2.0);
    CHECK_THROWS_AS(backward(two_d), ContractError);

    // accumulate-and-explicit-zero policy
    backward(sum(mul(x, x)));
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(4.0));
    x.zero_grad();
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("broadcasting add/mul with gradient reduction") {
    Rng rng(13);
    Tensor m = Tensor::rand_uniform({4, 3}, -1, 1, rng, true);
    Tensor bias = Tensor::rand_uniform({3}, -1, 1, rng, true);
    Tensor out = add(m, bias);
    CHECK(out.shape() == Shape{4, 3});
    CHECK(out.at({2, 1}) == doctest::Approx(m.at({2, 1}) + bias.at({1})));

    auto loss = [&] { return sum(pow(add(m, bias), 2.0)); };
    CHECK(gradcheck::check(loss, {m, bias}).max_rel_err < 1e-6);

    Tensor colv = Tensor::rand_uniform({4, 1}, 0.5, 1.5, rng, true);
    auto loss2 = [&] { return sum(div(m, colv)); };
    CHECK(gradcheck::check(loss2, {m, colv}).max_rel_err < 1e-6);

    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2, 2})), DimensionError);
}

TEST_CASE("unary op gradients") {
    Rng rng(17);
    Tensor x = Tensor::rand_uniform({4, 4}, 0.2, 2.0, rng, true);
    auto loss = [&] {
        return sum(add(mul(exp(x), 0.1), add(log(x), add(pow(x, 1.7), sqrt(x)))));
    };
    CHECK(gradcheck::check(loss, {x}).max_rel_err < 1e-6);

    // relu checked away from the kink
    Tensor y = Tensor::from_data({4}, {-1.0, -0.3, 0.4, 2.0}, true);
    auto loss2 = [&] { return sum(relu(y)); };
    CHECK(gradcheck::check(loss2, {y}).max_rel_err < 1e-6);
}

TEST_CASE("reshape is a zero-copy view") {
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tensor y = reshape(x, {3, 2});
    CHECK(&y.data() == &x.data());  // same buffer
    CHECK_THROWS_AS(reshape(x, {4, 2}), DimensionError);
    auto loss = [&] { return sum(pow(reshape(x, {6}), 2.0)); };
    CHECK(gradcheck::check(loss, {x}).max_rel_err < 1e-6);
}

TEST_CASE("permute, slice, concat round trips and gradients") {
    Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    Tensor t = transpose(x);
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.at({0, 1}) == 4.0);
    CHECK(t.at({2, 0}) == 3.0);

    Tensor left = slice(x, 1, 0, 2);
    Tensor right = slice(x, 1, 2, 1);
    Tensor joined = concat({left, right}, 1);
    for (std::size_t i = 0; i < 6; ++i) CHECK(joined.data()[i] == x.data()[i]);
    CHECK_THROWS_AS(slice(x, 1, 2, 2), DimensionError);

    Rng rng(23);
    Tensor a = Tensor::rand_uniform({2, 2, 3}, -1, 1, rng, true);
    Tensor b = Tensor::rand_uniform({2, 1, 3}, -1, 1, rng, true);
    auto loss = [&] {
        Tensor cat = concat({a, b}, 1);
        return sum(pow(transpose(cat), 2.0));
    };
    CHECK(gradcheck::check(loss, {a, b}).max_rel_err < 1e-6);
}

TEST_CASE("reductions: sum/mean/max over axes") {
    Tensor x = Tensor::from_data({2, 3}, {1, 5, 3, 4, 2, 6}, true);
    Tensor s0 = sum_axis(x, 0);
    CHECK(s0.shape() == Shape{3});
    CHECK(s0.data() == std::vector<double>{5, 7, 9});
    Tensor m1 = mean_axis(x, 1, true);
    CHECK(m1.shape() == Shape{2, 1});
    CHECK(m1.data()[0] == doctest::Approx(3.0));
    Tensor mx = max_axis(x, 1);
    CHECK(mx.data() == std::vector<double>{5, 6});

    Rng rng(29);
    Tensor y = Tensor::rand_uniform({3, 4, 2}, -1, 1, rng, true);
    auto loss = [&] {
        return sum(pow(mean_axis(y, 1), 2.0)) + sum(max_axis(y, 2)) + mean(y);
    };
    CHECK(gradcheck::check(loss, {y}).max_rel_err < 1e-6);
}

TEST_CASE("conv2d known value and gradients") {
    // 3x3 all-ones kernel over a 4x4 ramp, stride 1, pad 1
    Tensor x = Tensor::from_data({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}, true);
    Tensor w = Tensor::ones({1, 1, 3, 3}, true);
    Tensor y = conv2d(x, w, Tensor(), 1, 1);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    CHECK(y.at({0, 0, 1, 1}) == doctest::Approx(45.0));  // full window
    CHECK(y.at({0, 0, 0, 0}) == doctest::Approx(1 + 2 + 4 + 5));

    Rng rng(31);
    Tensor xi = Tensor::rand_uniform({2, 4, 5, 5}, -1, 1, rng, true);
    Tensor wi = Tensor::rand_uniform({6, 4, 3, 3}, -0.5, 0.5, rng, true);
    Tensor bi = Tensor::rand_uniform({6}, -0.5, 0.5, rng, true);
    auto loss = [&] { return sum(pow(conv2d(xi, wi, bi, 2, 1), 2.0)); };
    CHECK(gradcheck::check(loss, {xi, wi, bi}).max_rel_err < 1e-6);
}

TEST_CASE("depthwise conv2d (groups == channels) gradients") {
    Rng rng(37);
    Tensor x = Tensor::rand_uniform({2, 4, 4, 4}, -1, 1, rng, true);
    Tensor w = Tensor::rand_uniform({4, 1, 3, 3}, -0.5, 0.5, rng, true);
    Tensor b = Tensor::rand_uniform({4}, -0.2, 0.2, rng, true);
    Tensor y = conv2d(x, w, b, 1, 1, 4);
    CHECK(y.shape() == Shape{2, 4, 4, 4});
    auto loss = [&] { return sum(pow(conv2d(x, w, b, 1, 1, 4), 2.0)); };
    CHECK(gradcheck::check(loss, {x, w, b}).max_rel_err < 1e-6);

    CHECK_THROWS_AS(conv2d(x, Tensor::ones({4, 2, 3, 3}), Tensor(), 1, 1, 4), DimensionError);
}

TEST_CASE("analytic gradients match finite differences across random seeds") {
    // composite expression touching most differentiable primitives
    for (unsigned seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        Tensor a = Tensor::rand_uniform({2, 6}, -2, 2, rng, true);
        Tensor b = Tensor::rand_uniform({6, 3}, -1, 1, rng, true);
        Tensor c = Tensor::rand_uniform({2, 3}, 0.5, 1.5, rng, true);
        auto loss = [&] {
            Tensor h = matmul(a, b);
            Tensor p = softmax_rows(h);
            Tensor q = div(mul(p, c), add(sum_axis(mul(c, c), 1, true), 0.3));
            return add(mean(pow(q, 2.0)), mul(sum(exp(mul(h, 0.1))), 0.01));
        };
        auto report = gradcheck::check(loss, {a, b, c});
        CAPTURE(seed);
        CHECK(report.max_rel_err < 1e-4);
    }
}

TEST_CASE("forward determinism given identical inputs and seed") {
    auto run = [] {
        Rng rng(99);
        Tensor a = Tensor::rand_uniform({3, 3}, -1, 1, rng);
        Tensor b = Tensor::rand_uniform({3, 3}, -1, 1, rng);
        return matmul(softmax_rows(a), b);
    };
    Tensor r1 = run();
    Tensor r2 = run();
    for (std::size_t i = 0; i < r1.numel(); ++i) CHECK(r1.data()[i] == r2.data()[i]);
}

TEST_CASE("no-grad guard suppresses graph recording") {
    Tensor x = Tensor::from_data({2}, {1, 2}, true);
    Tensor y;
    {
        NoGradGuard guard;
        y = sum(mul(x, x));
    }
    CHECK_FALSE(y.requires_grad());
    CHECK_THROWS_AS(backward(y), ContractError);
}

TEST_CASE("detach cuts history but shares data") {
    Tensor x = Tensor::from_data({2}, {3, 4}, true);
    Tensor d = mul(x, 2.0).detach();
    CHECK_FALSE(d.requires_grad());
    Tensor combined = sum(mul(x, d));
    backward(combined);
    CHECK(x.grad()[0] == doctest::Approx(6.0));
    CHECK(x.grad()[1] == doctest::Approx(8.0));
}

TEST_CASE("tensor text dump round trip") {
    Tensor t = Tensor::from_data({2, 2}, {1.5, -2.25, 3.125, 1.0 / 3.0});
    std::string text = dump_tensor(t);
    CHECK(text.rfind("shape: 2 2", 0) == 0);
    Tensor back = parse_tensor(text);
    CHECK(back.shape() == t.shape());
    for (std::size_t i = 0; i < 4; ++i) CHECK(back.data()[i] == t.data()[i]);

    std::istringstream bad("shape: 2 2\n1 2 3");
    CHECK_THROWS_AS(parse_tensor(bad), DataError);
}
