#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ppcd/optim.hpp"

using namespace ppcd;

TEST_CASE("learning rate drops by the factor at each listed epoch") {
    std::vector<int> drops = {30, 60, 90};
    CHECK(lr_at_epoch(0.1, drops, 10.0, 0, 100) == 0.1);
    CHECK(lr_at_epoch(0.1, drops, 10.0, 29, 100) == 0.1);
    CHECK(lr_at_epoch(0.1, drops, 10.0, 30, 100) == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(lr_at_epoch(0.1, drops, 10.0, 59, 100) == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(lr_at_epoch(0.1, drops, 10.0, 60, 100) == doctest::Approx(0.001).epsilon(1e-12));
    CHECK(lr_at_epoch(0.1, drops, 10.0, 95, 100) == doctest::Approx(0.0001).epsilon(1e-12));
    CHECK(lr_at_epoch(2e-4, std::vector<int>{}, 10.0, 5, 10) == 2e-4);
    CHECK_THROWS_AS(lr_at_epoch(0.1, drops, 10.0, -1, 100), std::runtime_error);
    CHECK_THROWS_AS(lr_at_epoch(0.1, drops, 10.0, 100, 100), std::runtime_error);
    CHECK_THROWS_AS(lr_at_epoch(0.1, std::vector<int>{60, 30}, 10.0, 0, 100),
                    std::runtime_error);
}

TEST_CASE("zero gradients leave parameters alone but advance the counters") {
    TensorD w({3}, {1.0, -2.0, 0.5});
    ParamListT<double> params = {{"w", &w}};
    AdamT<double> opt;
    opt.step(params, {TensorD({3})}, 0.1);
    CHECK(w.vec() == std::vector<double>{1.0, -2.0, 0.5});
    CHECK(opt.step_count == 1);
    CHECK(opt.slots.at("w").t == 1);
}

TEST_CASE("first step moves by ~lr in the gradient's direction") {
    TensorD w({4}, {0.0, 0.0, 0.0, 0.0});
    ParamListT<double> params = {{"w", &w}};
    TensorD g({4}, {0.3, -0.7, 12.0, -1e-3});
    AdamT<double> opt;
    opt.step(params, {g}, 0.01);
    for (int i = 0; i < 4; ++i) {
        double expect = -0.01 * (g[i] > 0 ? 1.0 : -1.0);
        CHECK(w[i] == doctest::Approx(expect).epsilon(1e-4));
    }
}

TEST_CASE("identical states step identically") {
    auto run = [](int steps) {
        TensorD w({2}, {0.5, -0.25});
        ParamListT<double> params = {{"w", &w}};
        AdamT<double> opt;
        Rng rng(3);
        for (int s = 0; s < steps; ++s) {
            TensorD g({2});
            rng.fill_normal(g, 0.0, 1.0);
            opt.step(params, {g}, 0.003);
        }
        return w;
    };
    CHECK(run(25).vec() == run(25).vec());
}

TEST_CASE("adam minimizes a convex bowl") {
    TensorD w({2}, {3.0, -4.0});
    ParamListT<double> params = {{"w", &w}};
    AdamT<double> opt;
    for (int s = 0; s < 2000; ++s) {
        TensorD g({2}, {2.0 * w[0], 2.0 * w[1]});
        opt.step(params, {g}, 0.01);
    }
    CHECK(std::abs(w[0]) < 1e-3);
    CHECK(std::abs(w[1]) < 1e-3);
}

TEST_CASE("bad gradients are rejected by name") {
    TensorD w({2});
    TensorD u({2});
    ParamListT<double> params = {{"gen.block0.conv1.weight", &w}, {"gen.head", &u}};
    AdamT<double> opt;
    TensorD bad({2}, {0.0, std::nan("")});
    try {
        opt.step(params, {TensorD({2}), bad}, 0.1);
        FAIL("expected an error");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("gen.head") != std::string::npos);
    }
    CHECK_THROWS_AS(opt.step(params, {TensorD({2})}, 0.1), std::runtime_error);
    CHECK_THROWS_AS(opt.step(params, {TensorD({2}), TensorD({3})}, 0.1), std::runtime_error);
}

TEST_CASE("state follows the parameter name when the set shrinks") {
    TensorD a({1}, {1.0});
    TensorD b({1}, {1.0});
    AdamT<double> opt;
    ParamListT<double> both = {{"a", &a}, {"b", &b}};
    opt.step(both, {TensorD({1}, {1.0}), TensorD({1}, {1.0})}, 0.1);
    double b_after_one = b[0];
    ParamListT<double> only_a = {{"a", &a}};
    opt.step(only_a, {TensorD({1}, {1.0})}, 0.1);
    CHECK(b[0] == b_after_one);          // untouched param stays put
    CHECK(opt.slots.at("a").t == 2);
    CHECK(opt.slots.at("b").t == 1);     // its state is preserved, not reset
}
