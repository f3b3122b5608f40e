#include "doctest.h"
#include "fixtures.hpp"
#include "gradcheck.hpp"

#include "comepress/scoring.hpp"
#include "comepress/training.hpp"

#include <cmath>
#include <numbers>

using namespace comepress;
using namespace comepress::testing;

namespace {

const std::string& sample_text() {
    static const std::string text = [] {
        std::string s;
        const char* lines[] = {"the quick brown fox jumps over the lazy dog. ",
                               "a stitch in time saves nine. ", "all that glitters is not gold. "};
        CounterRng rng(5);
        while (s.size() < 20000) s += lines[rng.below(3)];
        return s;
    }();
    return text;
}

DistillConfig small_distill(LayerMapping mapping, DistillMode mode = DistillMode::sp) {
    DistillConfig c;
    c.mode = mode;
    c.mapping = std::move(mapping);
    c.lr = 1e-3;
    c.steps = 3;
    c.batch = 2;
    c.seq = 12;
    c.seed = 9;
    if (mode == DistillMode::mp) c.pair_lrs.assign(c.mapping.pairs.size(), 1e-3);
    return c;
}

/// Teacher of four layers and a student with layers 1 and 2 merged by averaging.
std::pair<ToyModel, ToyModel> teacher_student(std::uint64_t seed) {
    ToyModel teacher = tiny_model(seed, 4);
    ToyModel student = weight_sum_merge(teacher, 1, 2, WeightSumMode::alpha_blend, 0.5);
    return {teacher, student};
}

}  // namespace

TEST_SUITE("training") {

TEST_CASE("adamw first step matches the closed form") {
    Tensor<double> w({3}, {1.0, -2.0, 0.5});
    const Tensor<double> g({3}, {0.5, 0.0, -4.0});
    OptimizerState<double> state;
    Tensor<double>* params[] = {&w};
    const Tensor<double> grads[] = {g};
    const double lr = 0.1, wd = 1e-2, eps = 1e-8;
    adamw_step<double>(params, grads, state, lr);
    // After one step the bias-corrected moments are g and g^2.
    const double w0[] = {1.0, -2.0, 0.5};
    for (std::size_t i = 0; i < 3; ++i) {
        const double want = w0[i] * (1 - lr * wd) - lr * g[i] / (std::abs(g[i]) + eps);
        CHECK(w[i] == doctest::Approx(want).epsilon(1e-14));
    }
    CHECK(state.step == 1);
}

TEST_CASE("adamw second step follows the moment recurrences") {
    Tensor<double> w({1}, {2.0});
    OptimizerState<double> state;
    state.config.weight_decay = 0.0;
    Tensor<double>* params[] = {&w};
    const Tensor<double> g1[] = {Tensor<double>({1}, {1.0})};
    const Tensor<double> g2[] = {Tensor<double>({1}, {-3.0})};
    adamw_step<double>(params, g1, state, 0.01);
    const double after1 = w[0];
    adamw_step<double>(params, g2, state, 0.01);
    const double m = 0.9 * 0.1 * 1.0 + 0.1 * -3.0;
    const double v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0;
    const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
    CHECK(w[0] == doctest::Approx(after1 - 0.01 * mhat / (std::sqrt(vhat) + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adamw decreases a quadratic monotonically") {
    Tensor<double> w({4}, {3.0, -1.0, 2.0, 0.5});
    OptimizerState<double> state;
    Tensor<double>* params[] = {&w};
    auto loss = [&] {
        double s = 0.0;
        for (double x : w.values()) s += 0.5 * x * x;
        return s;
    };
    double prev = loss();
    for (int step = 0; step < 100; ++step) {
        const Tensor<double> grads[] = {w};
        adamw_step<double>(params, grads, state, 1e-2);
        const double now = loss();
        CHECK(now < prev);
        prev = now;
    }
}

TEST_CASE("adamw with zero gradient only decays") {
    Tensor<float> w({2}, {1.0f, -4.0f});
    OptimizerState<float> state;
    Tensor<float>* params[] = {&w};
    const Tensor<float> grads[] = {Tensor<float>({2})};
    adamw_step<float>(params, grads, state, 0.5);
    CHECK(w[0] == doctest::Approx(1.0 * (1 - 0.5 * 1e-2)));
    CHECK(w[1] == doctest::Approx(-4.0 * (1 - 0.5 * 1e-2)));
    const Tensor<float> wrong[] = {Tensor<float>({3})};
    CHECK_THROWS_AS(adamw_step<float>(params, wrong, state, 0.5), ShapeError);
}

TEST_CASE("cosine schedule") {
    CHECK(cosine_lr(0, 100, 2.0) == 2.0);
    CHECK(cosine_lr(50, 100, 2.0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(cosine_lr(25, 100, 2.0) == doctest::Approx(1.0 + std::cos(std::numbers::pi / 4)));
    CHECK(cosine_lr(100, 100, 2.0) == 0.0);
    CHECK_THROWS_AS(cosine_lr(101, 100, 2.0), ContractError);
    for (std::size_t s = 1; s <= 100; ++s) CHECK(cosine_lr(s, 100, 1.0) <= cosine_lr(s - 1, 100, 1.0));
}

TEST_CASE("gradient clipping") {
    std::vector<Tensor<double>> g = {Tensor<double>({1}, {3.0}), Tensor<double>({1}, {4.0})};
    CHECK(clip_grad_norm<double>(g, 1.0) == 5.0);
    CHECK(g[0][0] == doctest::Approx(0.6));
    CHECK(g[1][0] == doctest::Approx(0.8));
    std::vector<Tensor<double>> small = {Tensor<double>({2}, {0.1, 0.2})};
    clip_grad_norm<double>(small, 1.0);
    CHECK(small[0] == Tensor<double>({2}, {0.1, 0.2}));
    std::vector<Tensor<double>> bad = {Tensor<double>({1}, {NAN})};
    CHECK_THROWS_AS(clip_grad_norm<double>(bad, 1.0), NumericError);
}

TEST_CASE("pretraining") {
    const ToyModel m = init_model(tiny_config(2), 3);
    PretrainConfig cfg;
    cfg.steps = 4;
    cfg.batch = 2;
    cfg.seq = 16;
    cfg.warmup_steps = 2;
    SUBCASE("initial loss is near uniform") {
        cfg.lr = 0.0;
        const auto result = pretrain(m, sample_text(), cfg);
        CHECK(std::abs(result.curve[0].loss - std::log(258.0)) < 0.3);
        CHECK(result.model == m);
    }
    SUBCASE("warmup then decay") {
        const auto result = pretrain(m, sample_text(), cfg);
        REQUIRE(result.curve.size() == 4);
        CHECK(result.curve[0].lr == doctest::Approx(cfg.lr / 2));
        CHECK(result.curve[1].lr == doctest::Approx(cfg.lr));
        CHECK(result.curve[3].lr == doctest::Approx(cfg.lr / 2));
        CHECK_FALSE(result.model == m);
    }
    SUBCASE("loss goes down") {
        cfg.steps = 60;
        cfg.warmup_steps = 5;
        cfg.lr = 1e-2;
        const auto result = pretrain(m, sample_text(), cfg);
        double first = 0, last = 0;
        for (std::size_t i = 0; i < 10; ++i) {
            first += result.curve[i].loss;
            last += result.curve[50 + i].loss;
        }
        CHECK(last < 0.8 * first);
    }
    SUBCASE("sequence longer than the model supports") {
        cfg.seq = 17;
        CHECK_THROWS_AS(pretrain(m, sample_text(), cfg), ContractError);
    }
}

TEST_CASE("feature KL closed form and sign") {
    const Tensor<double> t({1, 2}, {10.0, 0.0});
    const Tensor<double> s({1, 2}, {0.0, 0.0});
    const double p0 = 1.0 / (1.0 + std::exp(-10.0)), p1 = 1.0 - p0;
    const double want = p0 * std::log(p0 / 0.5) + p1 * std::log(p1 / 0.5);
    CHECK(feature_kl(constant(t), constant(s), KlDirection::forward).value().item() ==
          doctest::Approx(want).epsilon(1e-12));
    const double reverse = 0.5 * std::log(0.5 / p0) + 0.5 * std::log(0.5 / p1);
    CHECK(feature_kl(constant(t), constant(s), KlDirection::symmetric).value().item() ==
          doctest::Approx(0.5 * (want + reverse)).epsilon(1e-12));
    CHECK(feature_kl(constant(t), constant(t), KlDirection::forward).value().item() == 0.0);

    CounterRng rng(17);
    for (int i = 0; i < 50; ++i) {
        const auto a = random_tensor(rng, {5, 8}, 2.0);
        const auto b = random_tensor(rng, {5, 8}, 2.0);
        CHECK(feature_kl(constant(a), constant(b), KlDirection::forward).value().item() >= 0.0);
        CHECK(feature_kl(constant(a), constant(b), KlDirection::symmetric).value().item() >= 0.0);
    }
    CHECK_THROWS_AS(feature_kl(constant(Tensor<double>({2, 3})), constant(Tensor<double>({3, 2})),
                               KlDirection::forward),
                    ShapeError);
}

TEST_CASE("distillation loss gradients match finite differences") {
    ModelConfig c = tiny_config(3);
    c.d_model = 8;
    c.d_head = 4;
    c.d_ff = 12;
    const BasicToyModel<double> teacher = init_model(c, 21).cast<double>();
    BasicToyModel<double> student = init_model(c, 22).cast<double>();
    remove_layer(student, 2);
    const TokenBatch batch = random_tokens(23, 2, 5);
    const LayerMapping mapping{{{0, 0}, {2, 1}}};

    for (KlDirection dir : {KlDirection::forward, KlDirection::symmetric}) {
        std::vector<Tensor<double>> inputs;
        for (std::size_t l = 0; l < 2; ++l) student.layers[l].for_each([&](std::string_view, const Tensor<double>& t) {
            inputs.push_back(t);
        });
        const auto fn = [&](const std::vector<Var<double>>& p) {
            auto vars = bind_parameters<double>(student, [](const std::string&) { return false; });
            for (std::size_t l = 0; l < 2; ++l)
                for (std::size_t k = 0; k < 9; ++k) vars.layers[l].tensors[k] = p[l * 9 + k];
            return distillation_loss(teacher, vars, student.config, batch, mapping, dir).total;
        };
        GradCheckOptions opt;
        opt.max_coords_per_input = 6;
        CHECK(gradcheck(inputs, fn, opt) < 1e-4);
    }
}

TEST_CASE("joint loss is the mean of the per-pair losses") {
    const auto [tf, sf] = teacher_student(31);
    const auto teacher = tf.cast<double>();
    const auto student = sf.cast<double>();
    const auto vars = bind_parameters<double>(student, [](const std::string&) { return false; });
    const TokenBatch batch = random_tokens(32, 2, 8);
    const LayerMapping mapping{{{0, 0}, {2, 1}, {3, 2}}};
    const auto loss = distillation_loss(teacher, vars, student.config, batch, mapping, KlDirection::forward);
    double mean = 0.0;
    for (const auto& v : loss.per_pair) mean += v.value().item();
    mean /= 3.0;
    CHECK(std::abs(loss.total.value().item() - mean) < 1e-9);

    // A single-pair mapping gives the same term as that pair inside a larger mapping.
    for (std::size_t k = 0; k < 3; ++k) {
        const auto single = distillation_loss(teacher, vars, student.config, batch, LayerMapping{{mapping.pairs[k]}},
                                              KlDirection::forward);
        CHECK(std::abs(single.total.value().item() - loss.per_pair[k].value().item()) < 1e-12);
    }
}

TEST_CASE("distillation mapping errors") {
    const auto [teacher, student] = teacher_student(33);
    CHECK_THROWS_AS(distill_sp(teacher, student, sample_text(), small_distill(LayerMapping{{{4, 1}}})),
                    ContractError);
    CHECK_THROWS_AS(distill_sp(teacher, student, sample_text(), small_distill(LayerMapping{})), ContractError);
    auto mp = small_distill(LayerMapping{{{2, 1}}}, DistillMode::mp);
    mp.pair_lrs.clear();
    CHECK_THROWS_AS(distill_mp(teacher, student, sample_text(), mp), ContractError);
}

TEST_CASE("sp distillation trains exactly the mapped layers") {
    const auto [teacher, student] = teacher_student(34);
    const auto cfg = small_distill(LayerMapping{{{0, 0}, {2, 1}}});
    const auto result = distill_sp(teacher, student, sample_text(), cfg);
    CHECK(result.curve.size() == 3);
    result.model.for_each_parameter([&](const std::string& name, const Tensor<float>& t) {
        bool found = false;
        student.for_each_parameter([&](const std::string& n2, const Tensor<float>& t2) {
            if (n2 != name) return;
            found = true;
            const bool mapped = name.rfind("layers.0.", 0) == 0 || name.rfind("layers.1.", 0) == 0;
            CHECK_MESSAGE((t == t2) != mapped, name);
        });
        CHECK(found);
    });
    for (std::size_t l : {0u, 1u})
        for (std::size_t k = 0; k < 9; ++k) {
            std::size_t i = 0;
            const Tensor<float>* before = nullptr;
            const Tensor<float>* after = nullptr;
            student.layers[l].for_each([&](std::string_view, const Tensor<float>& t) { if (i++ == k) before = &t; });
            i = 0;
            result.model.layers[l].for_each([&](std::string_view, const Tensor<float>& t) { if (i++ == k) after = &t; });
            CHECK(!(*before == *after));
        }
}

TEST_CASE("distillation is deterministic") {
    const auto [teacher, student] = teacher_student(35);
    const auto cfg = small_distill(LayerMapping{{{2, 1}}});
    const auto a = distill_sp(teacher, student, sample_text(), cfg);
    const auto b = distill_sp(teacher, student, sample_text(), cfg);
    CHECK(a.model == b.model);
    for (std::size_t i = 0; i < a.curve.size(); ++i) CHECK(a.curve[i].loss == b.curve[i].loss);
}

TEST_CASE("an exactly equivalent student has near-zero loss") {
    ToyModel teacher = tiny_model(36, 4);
    make_pass_through(teacher, 2);
    ToyModel student = teacher;
    remove_layer(student, 2);
    auto cfg = small_distill(LayerMapping{{{2, 1}}});
    cfg.lr = 1e-5;
    cfg.steps = 5;
    const auto result = distill_sp(teacher, student, sample_text(), cfg);
    CHECK(result.curve.front().loss == 0.0);
    for (const auto& p : result.curve) CHECK(p.loss < 1e-6);
}

TEST_CASE("mp distillation") {
    const auto [teacher, student] = teacher_student(37);
    auto cfg = small_distill(LayerMapping{{{0, 0}, {2, 1}}}, DistillMode::mp);
    SUBCASE("zero steps leaves the student unchanged") {
        cfg.steps = 0;
        CHECK(distill_mp(teacher, student, sample_text(), cfg).model == student);
    }
    SUBCASE("pairs are trained in order, one layer each") {
        const auto result = distill_mp(teacher, student, sample_text(), cfg);
        REQUIRE(result.curve.size() == 6);
        for (std::size_t i = 0; i < 6; ++i) CHECK(result.curve[i].pair == i / 3);
        CHECK_FALSE(result.model.layers[0] == student.layers[0]);
        CHECK_FALSE(result.model.layers[1] == student.layers[1]);
        CHECK(result.model.layers[2] == student.layers[2]);
        CHECK(result.model.embed == student.embed);
        CHECK(result.model.unembed == student.unembed);
    }
    SUBCASE("dispatch") {
        CHECK(distill(teacher, student, sample_text(), cfg).model ==
              distill_mp(teacher, student, sample_text(), cfg).model);
    }
}

TEST_CASE("mp learning-rate ladder") {
    CHECK(mp_lr_ladder(0).empty());
    CHECK(mp_lr_ladder(1) == std::vector<double>{5e-4});
    CHECK(mp_lr_ladder(2) == std::vector<double>{5e-4, 1e-5});
    CHECK(mp_lr_ladder(7) == std::vector<double>{5e-4, 2.5e-4, 1e-4, 7.5e-5, 5e-5, 2.5e-5, 1e-5});
    for (std::size_t n = 2; n < 12; ++n) {
        const auto l = mp_lr_ladder(n);
        CHECK(l.size() == n);
        for (std::size_t i = 1; i < n; ++i) CHECK(l[i] <= l[i - 1]);
    }
}

TEST_CASE("loss curves serialise as rows") {
    const std::vector<LossPoint> curve = {{0, 1.5, 1e-3, std::nullopt}, {1, 1.25, 5e-4, 2}};
    const auto j = curve_to_json(curve);
    REQUIRE(j.size() == 2);
    CHECK(j[0]["step"] == 0);
    CHECK(j[0]["loss"] == 1.5);
    CHECK_FALSE(j[0].contains("pair"));
    CHECK(j[1]["pair"] == 2);
}

}  // TEST_SUITE
