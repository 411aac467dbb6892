#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "dmpnet/adam.hpp"
#include "dmpnet/gradcheck.hpp"
#include "dmpnet/ops.hpp"
#include "dmpnet/rng.hpp"

using namespace dmpnet;

namespace {

TensorD leaf(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    TensorD t(s);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
    t.set_requires_grad(true);
    return t;
}

// values bounded away from zero so relu kinks stay out of finite-difference reach
TensorD leaf_off_zero(Shape s, Rng& rng) {
    TensorD t(s);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        const double mag = 0.1 + 0.9 * rng.uniform();
        t.data()[i] = rng.coin(0.5) ? mag : -mag;
    }
    t.set_requires_grad(true);
    return t;
}

// strictly distinct values so pooling argmaxes cannot flip under perturbation
TensorD leaf_distinct(Shape s, Rng& rng) {
    TensorD t(s);
    std::vector<std::int64_t> order(t.numel());
    for (std::int64_t i = 0; i < t.numel(); ++i) order[i] = i;
    for (std::int64_t i = t.numel() - 1; i > 0; --i)
        std::swap(order[i], order[rng.uniform_int(0, static_cast<int>(i))]);
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t.data()[order[i]] = 0.05 * static_cast<double>(i) + 0.001 * rng.uniform();
    t.set_requires_grad(true);
    return t;
}

// random fixed projection so the scalar loss weights every output element differently
TensorD projection(Shape s, Rng& rng) {
    TensorD t(s);
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-1.0, 1.0);
    return t;
}

TensorD project_sum(const TensorD& x, const TensorD& proj) {
    return sum_all(mul(x, proj));
}

constexpr double kTol = 1e-4;

}  // namespace

TEST_CASE("backward basics") {
    SUBCASE("gradient of a plain sum is all ones") {
        TensorF x = TensorF::full(Shape{2, 3, 4, 5}, 0.7f);
        x.set_requires_grad(true);
        Tape<float> tape;
        TapeScope<float> scope(tape);
        tape.backward(sum_all(x));
        for (float g : x.grad()) CHECK(g == 1.f);
    }
    SUBCASE("relu blocks gradient on the negative side") {
        TensorF x = TensorF::full(Shape{1, 1, 3, 3}, -2.f);
        x.set_requires_grad(true);
        Tape<float> tape;
        TapeScope<float> scope(tape);
        tape.backward(sum_all(relu(x)));
        for (float g : x.grad()) CHECK(g == 0.f);
    }
    SUBCASE("leaves off the path keep zero gradient") {
        TensorF x = TensorF::full(Shape{1, 1, 2, 2}, 1.f);
        TensorF y = TensorF::full(Shape{1, 1, 2, 2}, 1.f);
        x.set_requires_grad(true);
        y.set_requires_grad(true);
        Tape<float> tape;
        TapeScope<float> scope(tape);
        tape.backward(sum_all(x));
        for (float g : y.grad()) CHECK(g == 0.f);
    }
    SUBCASE("a tensor used twice accumulates both contributions") {
        TensorF x = TensorF::full(Shape{1, 1, 2, 2}, 0.3f);
        x.set_requires_grad(true);
        Tape<float> tape;
        TapeScope<float> scope(tape);
        tape.backward(sum_all(add(x, x)));
        for (float g : x.grad()) CHECK(g == 2.f);
    }
    SUBCASE("maxpool ties route gradient to the first window element") {
        TensorF x = TensorF::full(Shape{1, 1, 2, 2}, 5.f);
        x.set_requires_grad(true);
        Tape<float> tape;
        TapeScope<float> scope(tape);
        tape.backward(sum_all(maxpool2d(x, 2, 2)));
        CHECK(x.grad()[0] == 1.f);
        CHECK(x.grad()[1] == 0.f);
        CHECK(x.grad()[2] == 0.f);
        CHECK(x.grad()[3] == 0.f);
    }
    SUBCASE("non-scalar loss is rejected") {
        TensorF x = TensorF::zeros(Shape{1, 1, 2, 2});
        Tape<float> tape;
        CHECK_THROWS(tape.backward(x));
    }
}

TEST_CASE("finite differences validate every differentiable op") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        Rng rng(seed);
        const Shape grid{1, 4, 6, 6};
        CAPTURE(seed);

        {  // elementwise arithmetic
            TensorD a = leaf(grid, rng), b = leaf(grid, rng);
            TensorD proj = projection(grid, rng);
            auto res = check_gradients(
                [&] {
                    return project_sum(add(mul(a, b), sub(a, b)), proj);
                },
                {a, b});
            INFO(res.worst);
            CHECK(res.max_rel_err <= kTol);
        }
        {  // scalar forms and learned scale
            TensorD x = leaf(grid, rng);
            TensorD alpha = leaf(Shape{1, 1, 1, 1}, rng);
            TensorD proj = projection(grid, rng);
            auto res = check_gradients(
                [&] {
                    return project_sum(scale_by(add_scalar(mul_scalar(x, 1.7), -0.3), alpha), proj);
                },
                {x, alpha});
            INFO(res.worst);
            CHECK(res.max_rel_err <= kTol);
        }
        {  // relu away from its kink
            TensorD x = leaf_off_zero(grid, rng);
            TensorD proj = projection(grid, rng);
            auto res = check_gradients([&] { return project_sum(relu(x), proj); }, {x});
            INFO(res.worst);
            CHECK(res.max_rel_err <= kTol);
        }
        {  // sigmoid and log
            TensorD x = leaf(grid, rng, 0.5, 2.0);
            TensorD proj = projection(grid, rng);
            auto res = check_gradients(
                [&] { return project_sum(log(sigmoid(x)), proj); }, {x});
            INFO(res.worst);
            CHECK(res.max_rel_err <= kTol);
        }
        {  // clamp strictly inside and strictly outside the band
            TensorD x = leaf_off_zero(grid, rng);  // |x| in [0.1, 1]
            TensorD proj = projection(grid, rng);
            auto res = check_gradients(
                [&] { return project_sum(clamp(x, -0.9, 0.9), proj); }, {x});
            INFO(res.worst);
            CHECK(res.max_rel_err <= kTol);
        }
        {  // convolution with stride, padding, dilation and bias
            TensorD x = leaf(grid, rng);
            TensorD w = leaf(Shape{3, 4, 3, 3}, rng);
            TensorD b = leaf(Shape{1, 3, 1, 1}, rng);
            TensorD proj = projection(Shape{1, 3, 3, 3}, rng);
            auto res = check_gradients(
                [&] {
                    return project_sum(
                        conv2d(x, w, b, {.stride = 2, .padding = 1, .dilation = 1}), proj);
                },
                {x, w, b});
            INFO(res.worst);
            CHECK(res.max_rel_err <= kTol);
        }
        {  // dilated convolution
            TensorD x = leaf(grid, rng);
            TensorD w = leaf(Shape{2, 4, 3, 3}, rng);
            TensorD proj = projection(Shape{1, 2, 2, 2}, rng);
            auto res = check_gradients(
                [&] {
                    return project_sum(
                        conv2d(x, w, {.stride = 1, .padding = 0, .dilation = 2}),
                        proj);
                },
                {x, w});
            INFO(res.worst);
            CHECK(res.max_rel_err <= kTol);
        }
        {  // bilinear sampling w.r.t. both map and coordinates
            TensorD x = leaf(grid, rng);
            TensorD coords(Shape{1, 2, 3, 4});
            for (int i = 0; i < 12; ++i) {
                // keep a 0.25 margin from integer rows/cols and the border so the
                // interpolation cell cannot change under the 1e-4 probe step
                coords.data()[i] = rng.uniform_int(0, 4) + rng.uniform(0.25, 0.75);
                coords.data()[12 + i] = rng.uniform_int(0, 4) + rng.uniform(0.25, 0.75);
            }
            coords.set_requires_grad(true);
            TensorD proj = projection(Shape{1, 4, 3, 4}, rng);
            auto res = check_gradients(
                [&] { return project_sum(grid_sample(x, coords), proj); }, {x, coords});
            INFO(res.worst);
            CHECK(res.max_rel_err <= kTol);
        }
        {  // pooling
            TensorD x = leaf_distinct(grid, rng);
            TensorD proj = projection(Shape{1, 4, 3, 3}, rng);
            TensorD proj2 = projection(Shape{1, 4, 6, 6}, rng);
            auto res = check_gradients(
                [&] { return project_sum(maxpool2d(x, 2, 2), proj); }, {x});
            INFO(res.worst);
            CHECK(res.max_rel_err <= kTol);
            auto res2 = check_gradients(
                [&] { return project_sum(maxpool2d(x, 3, 1, 1), proj2); }, {x});
            INFO(res2.worst);
            CHECK(res2.max_rel_err <= kTol);
            auto res3 = check_gradients(
                [&] { return project_sum(avgpool2d(x, 2, 2), proj); }, {x});
            INFO(res3.worst);
            CHECK(res3.max_rel_err <= kTol);
        }
        {  // resizing both directions
            TensorD x = leaf(grid, rng);
            TensorD up = projection(Shape{1, 4, 9, 11}, rng);
            TensorD down = projection(Shape{1, 4, 3, 4}, rng);
            auto res = check_gradients(
                [&] { return project_sum(resize_bilinear(x, 9, 11), up); }, {x});
            INFO(res.worst);
            CHECK(res.max_rel_err <= kTol);
            auto res2 = check_gradients(
                [&] { return project_sum(resize_bilinear(x, 3, 4), down); }, {x});
            INFO(res2.worst);
            CHECK(res2.max_rel_err <= kTol);
        }
        {  // concat and slice
            TensorD a = leaf(Shape{1, 2, 6, 6}, rng), b = leaf(Shape{1, 3, 6, 6}, rng);
            TensorD proj = projection(Shape{1, 2, 6, 6}, rng);
            auto res = check_gradients(
                [&] {
                    return project_sum(
                        slice_channels(concat_channels<double>({a, b}), 1, 2), proj);
                },
                {a, b});
            INFO(res.worst);
            CHECK(res.max_rel_err <= kTol);
        }
        {  // composite chain through several ops at once
            TensorD x = leaf_off_zero(grid, rng);
            TensorD w = leaf(Shape{4, 4, 3, 3}, rng);
            TensorD proj = projection(Shape{1, 4, 6, 6}, rng);
            auto res = check_gradients(
                [&] {
                    TensorD h = conv2d(x, w, {.padding = 1});
                    h = sigmoid(h);
                    h = resize_bilinear(maxpool2d(h, 2, 2), 6, 6);
                    return project_sum(h, proj);
                },
                {x, w});
            INFO(res.worst);
            CHECK(res.max_rel_err <= kTol);
        }
    }
}

TEST_CASE("gradients are bit-deterministic") {
    auto run = [](std::vector<float>& gx, std::vector<float>& gw) {
        Rng rng(77);
        TensorF x(Shape{2, 3, 8, 8});
        for (std::int64_t i = 0; i < x.numel(); ++i) x.data()[i] = rng.uniform(-1.f, 1.f);
        TensorF w(Shape{4, 3, 3, 3});
        for (std::int64_t i = 0; i < w.numel(); ++i) w.data()[i] = rng.uniform(-1.f, 1.f);
        x.set_requires_grad(true);
        w.set_requires_grad(true);
        Tape<float> tape;
        TapeScope<float> scope(tape);
        TensorF y = sigmoid(conv2d(x, w, {.padding = 1}));
        tape.backward(sum_all(mul(y, y)));
        gx = x.grad();
        gw = w.grad();
    };
    std::vector<float> ax, aw, bx, bw;
    run(ax, aw);
    run(bx, bw);
    CHECK(std::memcmp(ax.data(), bx.data(), ax.size() * sizeof(float)) == 0);
    CHECK(std::memcmp(aw.data(), bw.data(), aw.size() * sizeof(float)) == 0);
}

TEST_CASE("adam") {
    auto make_param = [](float v) {
        TensorF p = TensorF::full(Shape{1, 1, 1, 1}, v);
        p.set_requires_grad(true);
        return p;
    };

    SUBCASE("zero gradients and zero decay leave parameters unchanged") {
        TensorF p = make_param(0.42f);
        Adam opt({.lr = 1e-2f, .weight_decay = 0.f});
        opt.step({{"p", p}});
        CHECK(p.data()[0] == 0.42f);
    }
    SUBCASE("zero learning rate freezes parameters") {
        TensorF p = make_param(0.42f);
        p.grad()[0] = 1.3f;
        Adam opt({.lr = 0.f, .weight_decay = 5e-4f});
        opt.step({{"p", p}});
        CHECK(p.data()[0] == 0.42f);
    }
    SUBCASE("two steps match the recurrence evaluated by hand") {
        const double lr = 1e-2, wd = 5e-4, b1 = 0.9, b2 = 0.999, eps = 1e-8;
        TensorF p = make_param(0.5f);
        Adam opt({.lr = static_cast<float>(lr), .weight_decay = static_cast<float>(wd)});

        double w = 0.5, m = 0.0, v = 0.0;
        const double raw[2] = {0.3, -0.2};
        for (int t = 1; t <= 2; ++t) {
            p.grad()[0] = static_cast<float>(raw[t - 1]);
            opt.step({{"p", p}});

            const double g = raw[t - 1] + wd * w;
            m = b1 * m + (1 - b1) * g;
            v = b2 * v + (1 - b2) * g * g;
            const double mhat = m / (1 - std::pow(b1, t));
            const double vhat = v / (1 - std::pow(b2, t));
            w -= lr * mhat / (std::sqrt(vhat) + eps);
            CHECK(std::fabs(p.data()[0] - w) <= 1e-7);
        }
    }
    SUBCASE("non-finite gradients name the parameter") {
        TensorF p = make_param(0.1f);
        p.grad()[0] = std::numeric_limits<float>::infinity();
        Adam opt;
        try {
            opt.step({{"conv1.weight", p}});
            FAIL("expected failure");
        } catch (const std::exception& e) {
            CHECK(std::string(e.what()).find("conv1.weight") != std::string::npos);
        }
    }
    SUBCASE("identical runs update identically") {
        auto run = [&] {
            TensorF p = make_param(0.25f);
            Adam opt({.lr = 3e-3f});
            for (int t = 0; t < 5; ++t) {
                p.grad()[0] = 0.1f * static_cast<float>(t - 2);
                opt.step({{"p", p}});
            }
            return p.data()[0];
        };
        const float a = run(), b = run();
        CHECK(std::memcmp(&a, &b, sizeof(float)) == 0);
    }
}
