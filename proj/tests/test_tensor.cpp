#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "coview/gradcheck.hpp"
#include "coview/rng.hpp"
#include "coview/tensor.hpp"
#include "test_util.hpp"

using namespace coview;
using namespace coview::testutil;

namespace {

Tensor identity_kernel_1x1(int c) {
    std::vector<double> k(static_cast<size_t>(c) * c, 0.0);
    for (int i = 0; i < c; ++i) k[static_cast<size_t>(i) * c + i] = 1.0;
    return tensor_of({1, 1, c, c}, k);
}

} // namespace

TEST_CASE("conv2d 1x1 identity kernel reproduces the input") {
    Rng rng(11);
    Tensor x = rand_tensor({6, 5, 3}, rng);
    Graph g;
    Tensor y = g.conv2d(g.input(x), g.input(identity_kernel_1x1(3)), 1, Padding::Same);
    CHECK(y.shape == Shape{6, 5, 3});
    CHECK(max_abs_diff(y.data(), x.data()) == 0.0);
}

TEST_CASE("conv2d impulse against all-ones 3x3 kernel paints a centered block") {
    std::vector<double> img(7 * 7, 0.0);
    img[3 * 7 + 3] = 1.0;
    Graph g;
    Tensor y = g.conv2d(g.input(tensor_of({7, 7, 1}, img)), g.input(full({3, 3, 1, 1}, 1.0)), 1,
                        Padding::Same);
    for (int r = 0; r < 7; ++r)
        for (int c = 0; c < 7; ++c) {
            double expect = (std::abs(r - 3) <= 1 && std::abs(c - 3) <= 1) ? 1.0 : 0.0;
            CHECK(y.at({r, c, 0}) == expect);
        }
}

TEST_CASE("conv2d gradient matches finite differences on a random 8x8x2 input") {
    Rng rng(21);
    Tensor x = rand_tensor({8, 8, 2}, rng);
    Tensor k = rand_tensor({3, 3, 2, 4}, rng);
    auto f_input = [&](Graph& g, const Tensor& probe) {
        Tensor y = g.conv2d(probe, g.input(k), 1, Padding::Same);
        return g.mean(g.mul(y, y));
    };
    CHECK(finite_difference_check(f_input, x, 1e-5).max_rel_err <= 1e-6);

    auto f_kernel = [&](Graph& g, const Tensor& probe) {
        Tensor y = g.conv2d(g.input(x), probe, 1, Padding::Same);
        return g.mean(g.mul(y, y));
    };
    CHECK(finite_difference_check(f_kernel, k, 1e-5).max_rel_err <= 1e-6);
}

TEST_CASE("conv2d stride-2 same-padding output size is ceil(H/stride)") {
    Rng rng(3);
    Graph g;
    Tensor y = g.conv2d(g.input(rand_tensor({9, 8, 2}, rng)), g.input(rand_tensor({3, 3, 2, 5}, rng)),
                        2, Padding::Same);
    CHECK(y.shape == Shape{5, 4, 5});
}

TEST_CASE("conv2d rejects mismatched channels and bad stride/extent combinations") {
    Rng rng(4);
    Graph g;
    Tensor x = g.input(rand_tensor({8, 8, 3}, rng));
    CHECK_THROWS_AS(g.conv2d(x, g.input(rand_tensor({3, 3, 2, 4}, rng)), 1, Padding::Same),
                    DimensionError);
    CHECK_THROWS_AS(g.conv2d(x, g.input(rand_tensor({2, 2, 3, 4}, rng)), 1, Padding::Same),
                    DimensionError);
    // (8-3) % 2 != 0: stride does not cover the valid extent evenly
    CHECK_THROWS_AS(g.conv2d(x, g.input(rand_tensor({3, 3, 3, 4}, rng)), 2, Padding::Valid),
                    DimensionError);
}

TEST_CASE("linear with identity weight and zero bias is the identity") {
    Rng rng(5);
    Tensor x = rand_tensor({7}, rng);
    std::vector<double> wv(7 * 7, 0.0);
    for (int i = 0; i < 7; ++i) wv[i * 7 + i] = 1.0;
    Graph g;
    Tensor b = g.input(zeros({7}));
    Tensor y = g.linear(g.input(x), g.input(tensor_of({7, 7}, wv)), &b);
    CHECK(max_abs_diff(y.data(), x.data()) == 0.0);
}

TEST_CASE("linear with zero weight returns the bias") {
    Rng rng(6);
    Tensor bias = rand_tensor({4}, rng);
    Graph g;
    Tensor b = g.input(bias);
    Tensor y = g.linear(g.input(rand_tensor({9}, rng)), g.input(zeros({9, 4})), &b);
    CHECK(max_abs_diff(y.data(), bias.data()) == 0.0);
}

TEST_CASE("linear 16->8 gradient check") {
    Rng rng(7);
    Tensor x = rand_tensor({16}, rng);
    Tensor w = rand_tensor({16, 8}, rng);
    Tensor bias = rand_tensor({8}, rng);
    auto f_w = [&](Graph& g, const Tensor& probe) {
        Tensor b = g.input(bias);
        Tensor y = g.linear(g.input(x), probe, &b);
        return g.mean(g.mul(y, y));
    };
    CHECK(finite_difference_check(f_w, w, 1e-5).max_rel_err <= 1e-6);
    auto f_x = [&](Graph& g, const Tensor& probe) {
        Tensor b = g.input(bias);
        Tensor y = g.linear(probe, g.input(w), &b);
        return g.mean(g.mul(y, y));
    };
    CHECK(finite_difference_check(f_x, x, 1e-5).max_rel_err <= 1e-6);
}

TEST_CASE("batched linear matches per-row application") {
    Rng rng(8);
    Tensor xb = rand_tensor({5, 6}, rng);
    Tensor w = rand_tensor({6, 3}, rng);
    Tensor bias = rand_tensor({3}, rng);
    Graph g;
    Tensor b = g.input(bias);
    Tensor yb = g.linear(g.input(xb), g.input(w), &b);
    for (int r = 0; r < 5; ++r) {
        Graph g2;
        Tensor b2 = g2.input(bias);
        std::vector<double> row(xb.data().begin() + r * 6, xb.data().begin() + (r + 1) * 6);
        Tensor y = g2.linear(g2.input(tensor_of({6}, row)), g2.input(w), &b2);
        for (int c = 0; c < 3; ++c) CHECK(yb.at({r, c}) == doctest::Approx(y.at({c})).epsilon(1e-14));
    }
}

TEST_CASE("softplus analytic values") {
    Graph g;
    Tensor y = g.softplus(g.input(tensor_of({3}, {0.0, 30.0, -30.0})));
    CHECK(y.at({0}) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    CHECK(std::fabs(y.at({1}) - 30.0) <= 1e-12);           // linear asymptote
    CHECK(y.at({2}) == doctest::Approx(std::exp(-30.0)));  // decays to zero
}

TEST_CASE("softplus derivative at zero is one half") {
    Graph g;
    Tensor x = g.param(tensor_of({1}, {0.0}));
    g.backward(g.softplus(x));
    CHECK(g.grad(x)[0] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("activation gradients pass tight finite-difference checks") {
    Rng rng(9);
    for (Activation kind : {Activation::Relu, Activation::Sigmoid, Activation::Softplus}) {
        Tensor x = rand_tensor_away_from_zero({40}, rng);
        auto f = [&](Graph& g, const Tensor& probe) { return g.mean(g.activation(probe, kind)); };
        CHECK(finite_difference_check(f, x, 1e-6).max_rel_err <= 1e-6);
    }
}

TEST_CASE("bilinear_warp identity transform is exact") {
    Rng rng(10);
    Tensor x = rand_tensor({12, 12, 3}, rng);
    Graph g;
    Tensor y = g.bilinear_warp(g.input(x), SE2{});
    CHECK(max_abs_diff(y.data(), x.data()) == 0.0);
}

TEST_CASE("bilinear_warp pure translation shifts content and zero-fills the border") {
    Rng rng(12);
    Tensor x = rand_tensor({6, 8, 1}, rng);
    Graph g;
    Tensor y = g.bilinear_warp(g.input(x), SE2{2.0, 0.0, 0.0});
    for (int r = 0; r < 6; ++r) {
        CHECK(y.at({r, 0, 0}) == 0.0);
        CHECK(y.at({r, 1, 0}) == 0.0);
        for (int c = 2; c < 8; ++c) CHECK(y.at({r, c, 0}) == x.at({r, c - 2, 0}));
    }
}

namespace {
// repeated separable Gaussian blur; sigma grows as sqrt(passes)
Tensor smooth_field(int h, int w, Rng& rng, int passes) {
    std::vector<double> v(static_cast<size_t>(h) * w);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    std::vector<double> tmp(v.size(), 0.0);
    const double kern[7] = {0.004, 0.054, 0.242, 0.399, 0.242, 0.054, 0.004};
    for (int pass = 0; pass < passes; ++pass) {
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) {
                double s = 0.0;
                for (int t = -3; t <= 3; ++t) s += kern[t + 3] * v[r * w + std::clamp(c + t, 0, w - 1)];
                tmp[r * w + c] = s;
            }
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) {
                double s = 0.0;
                for (int t = -3; t <= 3; ++t) s += kern[t + 3] * tmp[std::clamp(r + t, 0, h - 1) * w + c];
                v[r * w + c] = s;
            }
    }
    return tensor_of({h, w, 1}, v);
}
} // namespace

TEST_CASE("bilinear_warp round trip on a smooth field stays within 1e-2 of the range") {
    Rng rng(13);
    Tensor x = smooth_field(40, 40, rng, 36);
    SE2 tau = SE2::make(1.3, -0.7, 0.3);
    Graph g;
    Tensor fwd = g.bilinear_warp(g.input(x), tau);
    Tensor back = g.bilinear_warp(fwd, tau.inverse());
    double lo = x.data()[0], hi = x.data()[0];
    for (double v : x.data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    // compare on the interior; border voxels legitimately read zeros
    double worst = 0.0;
    for (int r = 10; r < 30; ++r)
        for (int c = 10; c < 30; ++c)
            worst = std::max(worst, std::fabs(back.at({r, c, 0}) - x.at({r, c, 0})));
    CHECK(worst <= 1e-2 * (hi - lo));
}

TEST_CASE("bilinear_warp is linear in its feature argument") {
    Rng rng(14);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor f = rand_tensor({9, 9, 2}, rng);
        Tensor h = rand_tensor({9, 9, 2}, rng);
        double a = rng.uniform(-2.0, 2.0), b = rng.uniform(-2.0, 2.0);
        SE2 tau = SE2::make(rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-1.5, 1.5));
        Graph g;
        std::vector<double> mix(f.numel());
        for (int64_t i = 0; i < f.numel(); ++i) mix[i] = a * f.data()[i] + b * h.data()[i];
        Tensor lhs = g.bilinear_warp(g.input(tensor_of(f.shape, mix)), tau);
        Tensor wf = g.bilinear_warp(g.input(f), tau);
        Tensor wh = g.bilinear_warp(g.input(h), tau);
        Tensor rhs = g.add(g.scale(wf, a), g.scale(wh, b));
        CHECK(max_abs_diff(lhs.data(), rhs.data()) <= 1e-12);
    }
}

TEST_CASE("bilinear_warp gradient check") {
    Rng rng(15);
    Tensor x = rand_tensor({7, 7, 2}, rng);
    SE2 tau = SE2::make(0.8, -1.1, 0.4);
    auto f = [&](Graph& g, const Tensor& probe) {
        Tensor y = g.bilinear_warp(probe, tau);
        return g.mean(g.mul(y, y));
    };
    CHECK(finite_difference_check(f, x, 1e-5).max_rel_err <= 1e-6);
}

TEST_CASE("backward of sum yields all-ones gradient") {
    Rng rng(16);
    Tensor x = rand_tensor({4, 5}, rng);
    Graph g;
    Tensor xb = g.param(x);
    g.backward(g.sum(xb));
    for (double v : g.grad(xb)) CHECK(v == 1.0);
}

TEST_CASE("backward of sigmoid(w*x) matches the closed form") {
    Graph g;
    double wv = 0.7, xv = -1.3;
    Tensor w = g.param(tensor_of({1}, {wv}));
    Tensor x = g.input(tensor_of({1}, {xv}));
    Tensor y = g.sigmoid(g.mul(w, x));
    g.backward(y);
    double s = sigmoid_value(wv * xv);
    CHECK(g.grad(w)[0] == doctest::Approx(s * (1.0 - s) * xv).epsilon(1e-14));
}

TEST_CASE("parameter unused by the loss receives exactly zero gradient") {
    Rng rng(17);
    Graph g;
    Tensor used = g.param(rand_tensor({3}, rng));
    Tensor unused = g.param(rand_tensor({5}, rng));
    g.backward(g.sum(used));
    for (double v : g.grad(unused)) CHECK(v == 0.0);
}

TEST_CASE("backward rejects non-scalar losses and double invocation") {
    Rng rng(18);
    Graph g;
    Tensor x = g.param(rand_tensor({3}, rng));
    CHECK_THROWS_AS(g.backward(x), ContractError);
    Graph g2;
    Tensor x2 = g2.param(rand_tensor({3}, rng));
    Tensor loss = g2.sum(x2);
    g2.backward(loss);
    CHECK_THROWS_AS(g2.backward(loss), ContractError);
}

TEST_CASE("tensors from another graph are rejected") {
    Graph a, b;
    Tensor ta = a.param(full({2}, 1.0));
    Tensor tb = b.param(full({2}, 1.0));
    CHECK_THROWS_AS(a.add(ta, tb), ContractError);
}

TEST_CASE("finite_difference_check on f(x)=x^2 at x=3") {
    auto f = [](Graph& g, const Tensor& x) { return g.sum(g.mul(x, x)); };
    GradCheckResult r = finite_difference_check(f, tensor_of({1}, {3.0}), 1e-5);
    CHECK(r.max_rel_err <= 1e-8);
}

TEST_CASE("softmax_channels produces a simplex per voxel and passes gradcheck") {
    Rng rng(19);
    Tensor x = rand_tensor({3, 4, 5}, rng, -3.0, 3.0);
    Graph g;
    Tensor y = g.softmax_channels(g.input(x));
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) {
            double s = 0.0;
            for (int ch = 0; ch < 5; ++ch) {
                double v = y.at({r, c, ch});
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
                s += v;
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
    Tensor coef = rand_tensor({3, 4, 5}, rng);
    auto f = [&](Graph& gg, const Tensor& probe) {
        return gg.mean(gg.mul(gg.softmax_channels(probe), gg.input(coef)));
    };
    CHECK(finite_difference_check(f, x, 1e-5).max_rel_err <= 1e-6);
}

TEST_CASE("channel plumbing ops pass finite-difference checks") {
    Rng rng(20);
    Tensor a = rand_tensor({4, 4, 3}, rng);
    Tensor b = rand_tensor({4, 4, 2}, rng);
    Tensor coef = rand_tensor({4, 4, 5}, rng);
    auto f_concat = [&](Graph& g, const Tensor& probe) {
        Tensor y = g.concat_channels({probe, g.input(b)});
        return g.mean(g.mul(y, g.input(coef)));
    };
    CHECK(finite_difference_check(f_concat, a, 1e-5).max_rel_err <= 1e-6);

    auto f_slice = [&](Graph& g, const Tensor& probe) {
        Tensor y = g.slice_channels(probe, 1, 3);
        return g.mean(g.mul(y, y));
    };
    CHECK(finite_difference_check(f_slice, a, 1e-5).max_rel_err <= 1e-6);

    Tensor wmap = rand_tensor({4, 4, 1}, rng);
    auto f_mulc = [&](Graph& g, const Tensor& probe) {
        Tensor y = g.mul_channel(probe, g.input(wmap));
        return g.mean(g.mul(y, y));
    };
    CHECK(finite_difference_check(f_mulc, a, 1e-5).max_rel_err <= 1e-6);
    auto f_mulw = [&](Graph& g, const Tensor& probe) {
        Tensor y = g.mul_channel(g.input(a), probe);
        return g.mean(g.mul(y, y));
    };
    CHECK(finite_difference_check(f_mulw, wmap, 1e-5).max_rel_err <= 1e-6);

    Tensor vec = rand_tensor({6}, rng);
    auto f_rows = [&](Graph& g, const Tensor& probe) {
        Tensor y = g.rows_with_vector(g.input(a), probe);
        return g.mean(g.mul(y, y));
    };
    CHECK(finite_difference_check(f_rows, vec, 1e-5).max_rel_err <= 1e-6);

    auto f_pool = [&](Graph& g, const Tensor& probe) {
        Tensor y = g.avgpool(probe, 2, 2);
        return g.mean(g.mul(y, y));
    };
    CHECK(finite_difference_check(f_pool, a, 1e-5).max_rel_err <= 1e-6);

    auto f_up = [&](Graph& g, const Tensor& probe) {
        Tensor y = g.upsample_nearest(probe, 2, 2);
        return g.mean(g.mul(y, y));
    };
    CHECK(finite_difference_check(f_up, a, 1e-5).max_rel_err <= 1e-6);
}

TEST_CASE("channel_bias adds per-channel and routes gradients to the bias") {
    Rng rng(22);
    Tensor x = rand_tensor({3, 3, 4}, rng);
    Tensor bias = rand_tensor({4}, rng);
    auto f = [&](Graph& g, const Tensor& probe) {
        Tensor y = g.channel_bias(g.input(x), probe);
        return g.mean(g.mul(y, y));
    };
    CHECK(finite_difference_check(f, bias, 1e-5).max_rel_err <= 1e-6);
}

TEST_CASE("identical inputs produce bitwise-identical outputs") {
    Rng rng(23);
    Tensor x = rand_tensor({8, 8, 4}, rng);
    Tensor k = rand_tensor({3, 3, 4, 8}, rng);
    auto run = [&]() {
        Graph g;
        Tensor y = g.conv2d(g.input(x), g.input(k), 2, Padding::Same);
        y = g.relu(y);
        y = g.bilinear_warp(y, SE2::make(0.5, -0.25, 0.1));
        return y.data();
    };
    std::vector<double> a = run(), b = run();
    CHECK(a == b);
}

TEST_CASE("gradients accumulate over all paths to the loss") {
    Graph g;
    Tensor x = g.param(tensor_of({1}, {2.0}));
    Tensor y = g.add(g.mul(x, x), x);  // d/dx (x^2 + x) = 2x + 1 = 5
    g.backward(y);
    CHECK(g.grad(x)[0] == doctest::Approx(5.0).epsilon(1e-14));
}
