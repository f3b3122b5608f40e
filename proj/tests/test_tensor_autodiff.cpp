#include "doctest.h"
#include "gradcheck.hpp"

#include "comepress/autodiff.hpp"
#include "comepress/rng.hpp"

#include <cmath>

using namespace comepress;
using comepress::testing::gradcheck;
using comepress::testing::GradCheckOptions;
using comepress::testing::random_tensor;
using comepress::testing::weighted_sum;

namespace {

constexpr int kInstances = 20;
constexpr double kOpTolerance = 1e-6;

Tensor<double> mat(std::size_t r, std::size_t c, std::vector<double> v) {
    return Tensor<double>(Shape{r, c}, std::move(v));
}

// Checks op(inputs) against central differences on kInstances random draws.
template <typename MakeInputs, typename Op>
double worst_over_instances(MakeInputs make_inputs, Op op, std::uint64_t seed,
                            GradCheckOptions opt = {}) {
    double worst = 0.0;
    for (int i = 0; i < kInstances; ++i) {
        CounterRng rng(seed * 1000 + static_cast<std::uint64_t>(i));
        auto inputs = make_inputs(rng);
        worst = std::max(worst, gradcheck(inputs, [&](const auto& v) { return op(v, rng); }, opt));
    }
    return worst;
}

}  // namespace

TEST_SUITE("tensor_autodiff") {

TEST_CASE("matmul worked examples and shape errors") {
    auto id = mat(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    auto b = mat(3, 2, {1, 2, 3, 4, 5, 6});
    CHECK(matmul(id, b) == b);
    CHECK(matmul(mat(1, 2, {1, 2}), mat(2, 1, {3, 4})) == mat(1, 1, {11}));
    CHECK_THROWS_AS(matmul(mat(1, 2, {1, 2}), mat(3, 1, {1, 2, 3})), ShapeError);
    CHECK_THROWS_AS(matmul(parameter(mat(2, 2, {1, 2, 3, 4})), parameter(mat(3, 1, {1, 2, 3}))),
                    ShapeError);
}

TEST_CASE("matmul gradients match central differences") {
    const double worst = worst_over_instances(
        [](CounterRng& rng) {
            return std::vector{random_tensor(rng, {5, 7}), random_tensor(rng, {7, 3})};
        },
        [](const auto& v, CounterRng&) {
            Tensor<double> w(Shape{5, 3});
            CounterRng wr(99);
            for (auto& x : w.values()) x = wr.normal();
            return weighted_sum(matmul(v[0], v[1]), w);
        },
        1);
    CHECK(worst < kOpTolerance);
}

TEST_CASE("softmax worked examples") {
    auto y = softmax(constant(Tensor<double>(Shape{3}, 0.0)), 0).value();
    for (double p : y.values()) CHECK(p == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
    auto z = softmax(constant(Tensor<double>(Shape{2}, std::vector<double>{1e4, -1e4})), 0).value();
    CHECK(std::isfinite(z[0]));
    CHECK(z[0] == doctest::Approx(1.0));
    CHECK(z[1] == doctest::Approx(0.0));
}

TEST_CASE("softmax slices are distributions") {
    CounterRng rng(5);
    for (std::size_t axis = 0; axis < 3; ++axis) {
        auto x = random_tensor(rng, {3, 4, 5}, 4.0);
        auto y = softmax(constant(x), axis).value();
        const std::size_t extent = x.dim(axis);
        const std::size_t inner = axis == 2 ? 1 : (axis == 1 ? 5 : 20);
        const std::size_t outer = 60 / (extent * inner);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                double s = 0.0;
                for (std::size_t k = 0; k < extent; ++k) {
                    const double p = y[(o * extent + k) * inner + in];
                    CHECK(p >= 0.0);
                    s += p;
                }
                CHECK(std::abs(s - 1.0) < 1e-6);
            }
    }
}

TEST_CASE("rms_norm worked examples") {
    auto zero = rms_norm(constant(Tensor<double>(Shape{2, 4})), constant(Tensor<double>(Shape{4}, 1.0)),
                         1e-6)
                    .value();
    for (double v : zero.values()) CHECK(v == 0.0);
    auto x = mat(1, 4, {1, -1, 1, -1});
    auto y = rms_norm(constant(x), constant(Tensor<double>(Shape{4}, 1.0)), 1e-12).value();
    for (std::size_t i = 0; i < 4; ++i) CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-9));
}

TEST_CASE("backward basic contracts") {
    auto w = parameter(mat(2, 2, {1, -2, 3, 0.5}));
    auto s = sum(w);
    backward(s);
    for (double g : w.grad().values()) CHECK(g == 1.0);

    auto w2 = parameter(mat(2, 2, {1, -2, 3, 0.5}));
    auto q = scale(sum(mul(w2, w2)), 0.5);
    backward(q);
    CHECK(w2.grad() == w2.value());

    CHECK_THROWS_AS(backward(q), ContractError);
    zero_grad(q);
    backward(q);
    CHECK(w2.grad() == w2.value());

    auto nonscalar = mul(w2, w2);
    CHECK_THROWS_AS(backward(nonscalar), ContractError);
}

TEST_CASE("backward sums adjoints over shared subexpressions") {
    CounterRng rng(11);
    auto xv = random_tensor(rng, {6});
    auto x = parameter(xv);
    auto u = mul(x, x);
    auto s = silu(x);
    auto loss = sum(add(mul(u, s), u));
    backward(loss);
    for (std::size_t i = 0; i < 6; ++i) {
        const double xi = xv[i];
        const double sig = 1.0 / (1.0 + std::exp(-xi));
        const double silu_v = xi * sig;
        const double dsilu = sig * (1.0 + xi * (1.0 - sig));
        const double expect = 2.0 * xi * silu_v + xi * xi * dsilu + 2.0 * xi;
        CHECK(x.grad()[i] == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("concat then complementary slices is bit-exact") {
    CounterRng rng(3);
    for (std::size_t axis = 0; axis < 3; ++axis) {
        Shape sa{2, 3, 4}, sb{2, 3, 4};
        sb[axis] = 5;
        auto a = random_tensor(rng, sa), b = random_tensor(rng, sb);
        std::vector<Var<double>> parts{constant(a), constant(b)};
        auto c = concat<double>(parts, axis);
        CHECK(slice(c, axis, 0, sa[axis]).value() == a);
        CHECK(slice(c, axis, sa[axis], sa[axis] + 5).value() == b);
    }
}

TEST_CASE("no-grad mode records nothing") {
    auto w = parameter(mat(1, 2, {1, 2}));
    NoGradGuard guard;
    auto y = mul(w, w);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->parents.empty());
}

TEST_CASE("embedding and cross_entropy reject out-of-range ids") {
    auto table = constant(mat(3, 2, {1, 2, 3, 4, 5, 6}));
    std::vector<std::int32_t> bad{0, 3};
    CHECK_THROWS_AS(embedding(table, bad), InputError);
    std::vector<std::int32_t> tgt{5};
    CHECK_THROWS_AS(cross_entropy(constant(mat(1, 3, {0, 0, 0})), tgt), InputError);
}

TEST_CASE("every differentiable op passes finite differences") {
    CounterRng wrng(1234);
    auto weights_like = [&](const Shape& s) { return random_tensor(wrng, s); };

    SUBCASE("add sub mul scale") {
        auto make = [](CounterRng& r) {
            return std::vector{random_tensor(r, {3, 4}), random_tensor(r, {3, 4})};
        };
        auto w = weights_like({3, 4});
        CHECK(worst_over_instances(make, [&](const auto& v, auto&) { return weighted_sum(add(v[0], v[1]), w); }, 2) < kOpTolerance);
        CHECK(worst_over_instances(make, [&](const auto& v, auto&) { return weighted_sum(sub(v[0], v[1]), w); }, 3) < kOpTolerance);
        CHECK(worst_over_instances(make, [&](const auto& v, auto&) { return weighted_sum(mul(v[0], v[1]), w); }, 4) < kOpTolerance);
        CHECK(worst_over_instances(make, [&](const auto& v, auto&) { return weighted_sum(scale(v[0], -2.5), w); }, 5) < kOpTolerance);
    }
    SUBCASE("silu") {
        auto w = weights_like({4, 5});
        CHECK(worst_over_instances([](CounterRng& r) { return std::vector{random_tensor(r, {4, 5}, 2.0)}; },
                                   [&](const auto& v, auto&) { return weighted_sum(silu(v[0]), w); }, 6) < kOpTolerance);
    }
    SUBCASE("linear and transpose") {
        auto w = weights_like({6, 4});
        CHECK(worst_over_instances(
                  [](CounterRng& r) { return std::vector{random_tensor(r, {6, 5}), random_tensor(r, {4, 5})}; },
                  [&](const auto& v, auto&) { return weighted_sum(linear(v[0], v[1]), w); }, 7) < kOpTolerance);
        auto wt = weights_like({5, 6});
        CHECK(worst_over_instances([](CounterRng& r) { return std::vector{random_tensor(r, {6, 5})}; },
                                   [&](const auto& v, auto&) { return weighted_sum(transpose(v[0]), wt); }, 8) < kOpTolerance);
    }
    SUBCASE("reshape slice concat") {
        auto w = weights_like({4, 6});
        CHECK(worst_over_instances([](CounterRng& r) { return std::vector{random_tensor(r, {2, 12})}; },
                                   [&](const auto& v, auto&) { return weighted_sum(reshape(v[0], {4, 6}), w); }, 9) < kOpTolerance);
        auto ws = weights_like({3, 2, 4});
        CHECK(worst_over_instances([](CounterRng& r) { return std::vector{random_tensor(r, {3, 5, 4})}; },
                                   [&](const auto& v, auto&) { return weighted_sum(slice(v[0], 1, 1, 3), ws); }, 10) < kOpTolerance);
        auto wc = weights_like({3, 7});
        CHECK(worst_over_instances(
                  [](CounterRng& r) { return std::vector{random_tensor(r, {3, 3}), random_tensor(r, {3, 4})}; },
                  [&](const auto& v, auto&) { return weighted_sum(concat<double>(v, 1), wc); }, 11) < kOpTolerance);
    }
    SUBCASE("reductions and norms") {
        auto make = [](CounterRng& r) { return std::vector{random_tensor(r, {4, 3})}; };
        CHECK(worst_over_instances(make, [](const auto& v, auto&) { return sum(v[0]); }, 12) < kOpTolerance);
        CHECK(worst_over_instances(make, [](const auto& v, auto&) { return mean(v[0]); }, 13) < kOpTolerance);
        CHECK(worst_over_instances(make, [](const auto& v, auto&) { return l1_norm(v[0]); }, 14) < kOpTolerance);
        CHECK(worst_over_instances(make, [](const auto& v, auto&) { return l2_norm(v[0]); }, 15) < kOpTolerance);
    }
    SUBCASE("rms_norm") {
        auto w = weights_like({5, 8});
        CHECK(worst_over_instances(
                  [](CounterRng& r) { return std::vector{random_tensor(r, {5, 8}), random_tensor(r, {8})}; },
                  [&](const auto& v, auto&) { return weighted_sum(rms_norm(v[0], v[1], 1e-5), w); }, 16) < kOpTolerance);
    }
    SUBCASE("softmax log_softmax kl") {
        auto w = weights_like({3, 6});
        for (std::size_t axis = 0; axis < 2; ++axis) {
            CHECK(worst_over_instances([](CounterRng& r) { return std::vector{random_tensor(r, {3, 6}, 2.0)}; },
                                       [&](const auto& v, auto&) { return weighted_sum(softmax(v[0], axis), w); },
                                       17 + axis) < kOpTolerance);
        }
        CHECK(worst_over_instances([](CounterRng& r) { return std::vector{random_tensor(r, {3, 6}, 2.0)}; },
                                   [&](const auto& v, auto&) { return weighted_sum(log_softmax(v[0]), w); }, 19) < kOpTolerance);
        CHECK(worst_over_instances(
                  [](CounterRng& r) { return std::vector{random_tensor(r, {3, 6}, 2.0), random_tensor(r, {3, 6}, 2.0)}; },
                  [](const auto& v, auto&) { return kl_divergence(log_softmax(v[0]), log_softmax(v[1])); }, 20) < kOpTolerance);
    }
    SUBCASE("cross_entropy and embedding") {
        std::vector<std::int32_t> tgt{0, 4, 2, 2};
        CHECK(worst_over_instances([](CounterRng& r) { return std::vector{random_tensor(r, {4, 5}, 2.0)}; },
                                   [&](const auto& v, auto&) { return cross_entropy(v[0], tgt); }, 21) < kOpTolerance);
        std::vector<std::int32_t> ids{1, 0, 1, 3};
        auto w = weights_like({4, 3});
        CHECK(worst_over_instances([](CounterRng& r) { return std::vector{random_tensor(r, {4, 3})}; },
                                   [&](const auto& v, auto&) { return weighted_sum(embedding(v[0], ids), w); }, 22) < kOpTolerance);
    }
    SUBCASE("rope and causal attention") {
        auto w = weights_like({6, 8});
        CHECK(worst_over_instances([](CounterRng& r) { return std::vector{random_tensor(r, {6, 8})}; },
                                   [&](const auto& v, auto&) { return weighted_sum(rope(v[0], 3, 2, 4, 100.0), w); }, 23) < kOpTolerance);
        CHECK(worst_over_instances(
                  [](CounterRng& r) {
                      return std::vector{random_tensor(r, {6, 8}), random_tensor(r, {6, 8}), random_tensor(r, {6, 8})};
                  },
                  [&](const auto& v, auto&) { return weighted_sum(causal_attention(v[0], v[1], v[2], 3, 2, 4), w); },
                  24) < kOpTolerance);
    }
}

TEST_CASE("causal attention ignores future positions") {
    CounterRng rng(8);
    auto q = random_tensor(rng, {4, 4}), k = random_tensor(rng, {4, 4}), v = random_tensor(rng, {4, 4});
    auto base = causal_attention(constant(q), constant(k), constant(v), 4, 2, 2).value();
    for (std::size_t j = 0; j < 4; ++j) {
        k[3 * 4 + j] += 10.0;
        v[3 * 4 + j] -= 7.0;
    }
    auto moved = causal_attention(constant(q), constant(k), constant(v), 4, 2, 2).value();
    for (std::size_t i = 0; i < 12; ++i) CHECK(moved[i] == base[i]);
}

}  // TEST_SUITE
