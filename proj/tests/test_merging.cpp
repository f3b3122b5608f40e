#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"

#include "comepress/merging.hpp"

#include <cmath>
#include <numeric>

using namespace comepress;
using namespace comepress::testing;

namespace {

ChannelScores hand_scores(std::size_t layer, std::vector<double> ffn, std::vector<double> head) {
    ChannelScores cs;
    cs.layer = layer;
    cs.ffn_channel = std::move(ffn);
    cs.head = std::move(head);
    return cs;
}

bool logits_identical(const ToyModel& a, const ToyModel& b, const TokenBatch& batch) {
    return forward(a, batch).first == forward(b, batch).first;
}

}  // namespace

TEST_SUITE("merging") {

TEST_CASE("retention ratio worked examples") {
    const double equal[] = {0.3, 0.3};
    CHECK(retention_ratios(equal, 2.0, 0.0) == std::vector<double>{0.5, 0.5});

    // 0.1, 0.3 and 0.97 have no exact binary form, so these agree to rounding.
    auto near = [](const std::vector<double>& got, std::vector<double> want) {
        for (std::size_t i = 0; i < want.size(); ++i)
            if (std::abs(got[i] - want[i]) > 4e-16) return false;
        return got.size() == want.size();
    };
    const double skew[] = {0.1, 0.3};
    CHECK(near(retention_ratios(skew, 1.0, 0.0), {0.25, 0.75}));
    const double tie[] = {0.5, 0.5};
    CHECK(near(retention_ratios(tie, 1.0, 0.97), {0.97, 0.03}));
    CHECK(retention_ratios(tie, 1.0, 0.97)[0] == 0.97);

    // Dyadic inputs of the same shape are reproduced bit for bit.
    const double dyadic[] = {0.125, 0.375};
    CHECK(retention_ratios(dyadic, 1.0, 0.0) == std::vector<double>{0.25, 0.75});
    CHECK(retention_ratios(tie, 1.0, 0.96875) == std::vector<double>{0.96875, 0.03125});
}

TEST_CASE("retention ratios over random instances") {
    CounterRng rng(71);
    std::size_t adjusted = 0;
    for (int i = 0; i < 1000; ++i) {
        const std::size_t g = 2 + rng.below(4);
        std::vector<double> bi(g);
        for (auto& b : bi) b = rng.uniform() * 2.0;
        const double p = 0.25 + rng.uniform() * 3.0;
        const double rho = rng.uniform() < 0.5 ? 0.0 : rng.uniform();
        const auto r = retention_ratios(bi, p, rho);

        // Oracle: Eq.-style proportional allocation, then the floor rule.
        std::vector<double> want(g);
        double z = 0.0;
        for (std::size_t t = 0; t < g; ++t) z += std::pow(bi[t], p);
        for (std::size_t t = 0; t < g; ++t) want[t] = std::pow(bi[t], p) / z;
        const auto top = static_cast<std::size_t>(std::max_element(want.begin(), want.end()) - want.begin());
        const bool triggers = want[top] < rho;
        if (triggers) {
            ++adjusted;
            CHECK(r[top] == rho);
            CHECK(*std::max_element(r.begin(), r.end()) == rho);
        }
        CHECK(std::abs(std::accumulate(r.begin(), r.end(), 0.0) - 1.0) <= 1e-9);
        if (!triggers)
            for (std::size_t t = 0; t < g; ++t) CHECK(std::abs(r[t] - want[t]) < 1e-12);
    }
    CHECK(adjusted > 50);
}

TEST_CASE("retention ratio contract errors") {
    const double one[] = {0.5};
    const double pair[] = {0.5, 0.2};
    const double neg[] = {0.5, -0.2};
    CHECK_THROWS_AS(retention_ratios(one, 1.0, 0.0), ContractError);
    CHECK_THROWS_AS(retention_ratios(pair, 0.0, 0.0), ContractError);
    CHECK_THROWS_AS(retention_ratios(pair, 1.0, 1.5), ContractError);
    CHECK_THROWS_AS(retention_ratios(neg, 1.0, 0.0), ContractError);
    const double zeros[] = {0.0, 0.0, 0.0};
    const auto r = retention_ratios(zeros, 1.0, 0.0);
    for (double v : r) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("count allocation") {
    const double a[] = {0.75, 0.25};
    CHECK(allocate_counts(a, 4) == std::vector<std::size_t>{3, 1});
    const double b[] = {0.5, 0.5};
    CHECK(allocate_counts(b, 5) == std::vector<std::size_t>{3, 2});
    const double c[] = {1.0, 0.0};
    CHECK(allocate_counts(c, 7) == std::vector<std::size_t>{7, 0});

    CounterRng rng(72);
    for (int i = 0; i < 1000; ++i) {
        const std::size_t g = 2 + rng.below(4);
        std::vector<double> r(g);
        for (auto& v : r) v = rng.uniform();
        const double z = std::accumulate(r.begin(), r.end(), 0.0);
        for (auto& v : r) v /= z;
        const std::size_t total = rng.below(300);
        const auto counts = allocate_counts(r, total);
        CHECK(std::accumulate(counts.begin(), counts.end(), std::size_t{0}) == total);
        for (std::size_t t = 0; t < g; ++t) CHECK(std::abs(static_cast<double>(counts[t]) - r[t] * total) < 1.0);
    }
}

TEST_CASE("top index selection") {
    const double s[] = {0.1, 0.9, 0.5, 0.9, 0.0};
    CHECK(top_indices(s, 2) == std::vector<std::size_t>{1, 3});
    CHECK(top_indices(s, 3) == std::vector<std::size_t>{1, 2, 3});
    const double flat[] = {1, 1, 1, 1};
    CHECK(top_indices(flat, 2) == std::vector<std::size_t>{0, 1});
    CHECK(top_indices(flat, 0).empty());
}

TEST_CASE("merge plan selection") {
    const ChannelScores scores[] = {hand_scores(0, {9, 1, 2, 8}, {1, 2}),
                                    hand_scores(1, {1, 7, 6, 2}, {3, 0})};
    const double half[] = {0.5, 0.5};
    const auto plan = build_merge_plan(scores, 0, half, NormMode::average);
    CHECK(plan.ffn_selected == std::vector<std::vector<std::size_t>>{{0, 3}, {1, 2}});
    CHECK(plan.heads_selected == std::vector<std::vector<std::size_t>>{{1}, {0}});

    const ChannelScores flat[] = {hand_scores(0, {1, 1, 1, 1}, {1, 1}), hand_scores(1, {1, 1, 1, 1}, {1, 1})};
    const double skew[] = {0.75, 0.25};
    const auto tied = build_merge_plan(flat, 0, skew, NormMode::average);
    CHECK(tied.ffn_selected == std::vector<std::vector<std::size_t>>{{0, 1, 2}, {0}});

    const double endpoint[] = {1.0, 0.0};
    const auto all_first = build_merge_plan(scores, 0, endpoint, NormMode::follow_base);
    CHECK(all_first.ffn_selected == std::vector<std::vector<std::size_t>>{{0, 1, 2, 3}, {}});
    CHECK(all_first.heads_selected == std::vector<std::vector<std::size_t>>{{0, 1}, {}});
}

TEST_CASE("endpoint merge equals removing the deeper layer") {
    const ToyModel m = tiny_model(81, 4);
    const auto windows = random_windows(82, 4, 10);
    const auto batch = random_tokens(83, 2, 12);
    for (std::size_t first = 0; first + 1 < 4; ++first) {
        const double r[] = {1.0, 0.0};
        const auto plan = build_merge_plan(m, windows, first, first + 1, r, NormMode::follow_base);
        const ToyModel merged = apply_concat_merge(m, plan);
        CHECK(merged.layers[first] == m.layers[first]);
        ToyModel removed = m;
        remove_layer(removed, first + 1);
        CHECK(logits_identical(merged, removed, batch));
    }
}

TEST_CASE("merged layer keeps full width and gathers without rescaling") {
    const ToyModel m = tiny_model(84, 4);
    const auto windows = random_windows(85, 4, 10);
    const double r[] = {0.5, 0.5};
    const auto plan = build_merge_plan(m, windows, 1, 2, r, NormMode::average);
    const ToyModel merged = apply_concat_merge(m, plan);
    merged.validate();
    CHECK(merged.layers.size() == 3);
    const auto& out = merged.layers[1];
    // Row j of gate comes from member t's row plan.ffn_selected[t][k], in group order.
    std::size_t j = 0;
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t src : plan.ffn_selected[t]) {
            for (std::size_t c = 0; c < m.config.d_model; ++c) {
                CHECK(out.gate.at(j, c) == m.layers[1 + t].gate.at(src, c));
                CHECK(out.down.at(c, j) == m.layers[1 + t].down.at(c, src));
            }
            ++j;
        }
    CHECK(j == m.config.d_ff);
    std::size_t h = 0;
    const std::size_t dh = m.config.d_head;
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t src : plan.heads_selected[t]) {
            for (std::size_t rr = 0; rr < dh; ++rr)
                for (std::size_t c = 0; c < m.config.d_model; ++c) {
                    CHECK(out.q.at(h * dh + rr, c) == m.layers[1 + t].q.at(src * dh + rr, c));
                    CHECK(out.o.at(c, h * dh + rr) == m.layers[1 + t].o.at(c, src * dh + rr));
                }
            ++h;
        }
    CHECK(h == m.config.n_heads);
}

TEST_CASE("merging identical layers") {
    ToyModel m = tiny_model(86, 4);
    m.layers[2] = m.layers[1];
    const auto windows = random_windows(87, 4, 10);
    const auto batch = random_tokens(88, 2, 10);
    ToyModel single = m;
    remove_layer(single, 2);
    const auto want = forward(single, batch).first;
    // Either endpoint rebuilds the shared layer exactly, norms averaged or not.
    for (double r0 : {0.0, 1.0}) {
        const double r[] = {r0, 1.0 - r0};
        const auto merged = apply_concat_merge(m, build_merge_plan(m, windows, 1, 2, r, NormMode::average));
        CHECK(merged.layers[1] == m.layers[1]);
        CHECK(forward(merged, batch).first == want);
    }
    // Interior ratios draw every row from the shared layer.
    const double r[] = {0.5, 0.5};
    const auto merged = apply_concat_merge(m, build_merge_plan(m, windows, 1, 2, r, NormMode::average));
    CHECK(merged.layers[1].attn_norm_gamma == m.layers[1].attn_norm_gamma);
    const std::size_t d = m.config.d_model;
    for (std::size_t j = 0; j < m.config.d_ff; ++j) {
        bool found = false;
        for (std::size_t src = 0; src < m.config.d_ff && !found; ++src)
            found = std::equal(merged.layers[1].gate.data() + j * d, merged.layers[1].gate.data() + (j + 1) * d,
                               m.layers[1].gate.data() + src * d);
        CHECK(found);
    }
}

TEST_CASE("permuting merged channels and heads leaves perplexity unchanged") {
    const ToyModel m = tiny_model(89, 4);
    const auto windows = random_windows(90, 6, 12);
    const double r[] = {0.6, 0.4};
    const ToyModel merged = apply_concat_merge(m, build_merge_plan(m, windows, 0, 1, r, NormMode::average));
    const double base = perplexity(merged, windows).ppl;
    CounterRng rng(91);
    for (int trial = 0; trial < 5; ++trial) {
        ToyModel p = merged;
        p.layers[0] = permute_layer(merged.layers[0], shuffled(m.config.d_ff, rng),
                                    shuffled(m.config.n_heads, rng), m.config.d_head);
        CHECK(std::abs(perplexity(p, windows).ppl - base) < 1e-6);
    }
}

TEST_CASE("norm averaging") {
    ToyModel m = tiny_model(92, 3);
    m.layers[0].attn_norm_gamma.fill(1.0f);
    m.layers[1].attn_norm_gamma.fill(3.0f);
    m.layers[0].ffn_norm_gamma.fill(2.0f);
    m.layers[1].ffn_norm_gamma.fill(4.0f);
    const ChannelScores scores[] = {
        hand_scores(0, std::vector<double>(32, 1.0), {1, 1}), hand_scores(1, std::vector<double>(32, 1.0), {1, 1})};
    const double r[] = {0.5, 0.5};
    const auto merged = apply_concat_merge(m, build_merge_plan(scores, 0, r, NormMode::average));
    for (float g : merged.layers[0].attn_norm_gamma.values()) CHECK(g == 2.0f);
    for (float g : merged.layers[0].ffn_norm_gamma.values()) CHECK(g == 3.0f);
    const double skew[] = {0.3, 0.7};
    const auto follow = apply_concat_merge(m, build_merge_plan(scores, 0, skew, NormMode::follow_base));
    for (float g : follow.layers[0].attn_norm_gamma.values()) CHECK(g == 3.0f);
}

TEST_CASE("weight-sum merges") {
    const ToyModel m = tiny_model(93, 4);
    CHECK(weight_sum_merge(m, 1, 2, WeightSumMode::alpha_blend, 1.0).layers[1] == m.layers[1]);
    CHECK(weight_sum_merge(m, 1, 2, WeightSumMode::alpha_blend, 0.0).layers[1] == m.layers[2]);
    CHECK(weight_sum_merge(m, 1, 2, WeightSumMode::laco).layers[1] == m.layers[2]);
    CHECK_THROWS_AS(weight_sum_merge(m, 1, 2, WeightSumMode::alpha_blend, 1.5), ContractError);
    CHECK_THROWS_AS(weight_sum_merge(m, 0, 3, WeightSumMode::alpha_blend, 0.5), ContractError);

    ToyModel small = tiny_model(94, 2);
    small.layers[0].q = Tensor<float>({2, 2}, {1, 2, 3, 4});
    small.layers[1].q = Tensor<float>({2, 2}, {3, 2, 1, 0});
    small.config.d_model = 2;  // only the q tensor is inspected
    const auto half = weight_sum_merge(small, 0, 2, WeightSumMode::alpha_blend, 0.5);
    CHECK(half.layers[0].q == Tensor<float>({2, 2}, {2, 2, 2, 2}));

    const auto three = weight_sum_merge(m, 0, 3, WeightSumMode::laco);
    for (std::size_t i = 0; i < m.layers[0].up.size(); ++i) {
        const double want = static_cast<double>(m.layers[1].up[i]) + m.layers[2].up[i] - m.layers[0].up[i];
        CHECK(three.layers[0].up[i] == doctest::Approx(want).epsilon(1e-6));
    }
}

TEST_CASE("ledger mapping follows the deepest absorbed layer") {
    MergeLedger ledger(8);
    ledger.merge(4, 2);  // originals 4,5 -> current 4
    CHECK(ledger.mapping() == LayerMapping{{{5, 4}}});
    ledger.merge(1, 2);  // originals 1,2 -> current 1; merged layer now at 3
    CHECK(ledger.mapping() == LayerMapping{{{2, 1}, {5, 3}}});
    ledger.merge(3, 2);  // merged layer absorbs original 6
    CHECK(ledger.mapping() == LayerMapping{{{2, 1}, {6, 3}}});
    ledger.remove(0);
    CHECK(ledger.mapping() == LayerMapping{{{2, 0}, {6, 2}}});
    CHECK(ledger.original_of(2) == 4);
}

TEST_CASE("mapping validation") {
    CHECK_NOTHROW(LayerMapping{{{1, 1}, {5, 3}}}.validate(8, 6));
    CHECK_THROWS_AS((LayerMapping{{{5, 1}, {1, 3}}}.validate(8, 6)), ContractError);
    CHECK_THROWS_AS((LayerMapping{{{1, 3}, {5, 3}}}.validate(8, 6)), ContractError);
    CHECK_THROWS_AS((LayerMapping{{{8, 1}}}.validate(8, 6)), ContractError);
    CHECK_THROWS_AS((LayerMapping{{{1, 6}}}.validate(8, 6)), ContractError);
}

TEST_CASE("progressive pruning") {
    const auto windows = random_windows(101, 8, 12);
    SUBCASE("8 to 6") {
        const ToyModel m = tiny_model(100, 8);
        const auto [pruned, report] = progressive_prune(m, {windows, windows}, {.target_layers = 6});
        CHECK(pruned.layers.size() == 6);
        CHECK(pruned.config.n_layers == 6);
        CHECK(report.iterations.size() == 2);
        CHECK(report.final_layers == 6);
        CHECK_NOTHROW(report.mapping.validate(8, 6));
        CHECK(!report.mapping.pairs.empty());
        REQUIRE(report.eval_after.has_value());
        CHECK(std::isfinite(report.eval_after->ppl));
        for (const auto& it : report.iterations) {
            CHECK(std::accumulate(it.ffn_counts.begin(), it.ffn_counts.end(), std::size_t{0}) == 32);
            CHECK(std::accumulate(it.head_counts.begin(), it.head_counts.end(), std::size_t{0}) == 2);
        }
    }
    SUBCASE("pass-through layer joins the first group") {
        ToyModel m = tiny_model(102, 6);
        make_pass_through(m, 3);
        const auto [pruned, report] = progressive_prune(m, {windows, {}}, {.target_layers = 5});
        const auto first = report.iterations[0].first_layer;
        CHECK((first == 2 || first == 3));
    }
    SUBCASE("larger groups") {
        const ToyModel m = tiny_model(103, 8);
        const auto [pruned, report] = progressive_prune(m, {windows, {}}, {.target_layers = 5, .m = 2});
        CHECK(pruned.layers.size() == 5);
        CHECK(report.iterations.size() == 2);
        CHECK(report.iterations[0].group_size == 3);
        CHECK(report.iterations[1].group_size == 2);  // m' = min(m, layers - target)
    }
    SUBCASE("bad targets") {
        const ToyModel m = tiny_model(104, 4);
        CHECK_THROWS_AS(progressive_prune(m, {windows, {}}, {.target_layers = 0}), ContractError);
        CHECK_THROWS_AS(progressive_prune(m, {windows, {}}, {.target_layers = 5}), ContractError);
    }
}

TEST_CASE("posterior pruning picks the best candidate") {
    const ToyModel m = tiny_model(110, 4);
    const auto windows = random_windows(111, 6, 12);
    const auto [pruned, report] = posterior_prune(m, {windows, {}}, {.target_layers = 3, .n = 4});
    REQUIRE(report.iterations.size() == 1);
    const auto& it = report.iterations[0];
    CHECK(it.candidate_ratios == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
    REQUIRE(it.chosen_ppl.has_value());
    CHECK(*it.chosen_ppl <= it.candidate_ppl.front());
    CHECK(*it.chosen_ppl <= it.candidate_ppl.back());

    // Independent re-evaluation of every candidate on a freshly built model.
    double best = INFINITY;
    for (std::size_t i = 0; i < it.candidate_ratios.size(); ++i) {
        const double r[] = {it.candidate_ratios[i], 1.0 - it.candidate_ratios[i]};
        const auto model = apply_concat_merge(m, build_merge_plan(m, windows, it.first_layer, it.first_layer + 1, r,
                                                                  NormMode::average));
        const double ppl = std::exp(direct_nll_per_token(model, windows));
        CHECK(ppl == doctest::Approx(it.candidate_ppl[i]).epsilon(1e-9));
        best = std::min(best, ppl);
    }
    CHECK(*it.chosen_ppl == doctest::Approx(best).epsilon(1e-9));
    CHECK(std::exp(direct_nll_per_token(pruned, windows)) == doctest::Approx(*it.chosen_ppl).epsilon(1e-9));
}

TEST_CASE("direct layer pruning") {
    const ToyModel m = tiny_model(120, 4);
    const auto scores = LayerScoreSet::from_scores("test", {3, 1, 2, 4});
    const auto [pruned, report] = dlp_prune(m, scores, 2);
    CHECK(pruned.layers.size() == 2);
    CHECK(pruned.layers[0] == m.layers[0]);
    CHECK(pruned.layers[1] == m.layers[3]);
    CHECK(report.method == "dlp-test");
    CHECK(report.mapping.pairs.empty());

    const auto [same, r2] = dlp_prune(m, scores, 4);
    CHECK(same == m);

    ToyModel pt = m;
    make_pass_through(pt, 2);
    const auto by_hand = LayerScoreSet::from_scores("x", {5, 5, 0, 5});
    const auto batch = random_tokens(121, 2, 8);
    CHECK(logits_identical(dlp_prune(pt, by_hand, 3).first, pt, batch));

    const ToyModel eight = tiny_model(122, 8);
    const auto flat = LayerScoreSet::from_scores("x", {0, 0, 0, 0, 1, 1, 0, 0});
    const auto [protected_model, pr] = dlp_prune(eight, flat, 6, true);
    CHECK(protected_model.layers[4] == eight.layers[6]);
    CHECK_THROWS_AS(dlp_prune(eight, flat, 5, true), ContractError);
}

TEST_CASE("greedy posterior and laco baselines reach the target") {
    const ToyModel m = tiny_model(130, 5);
    const auto windows = random_windows(131, 4, 10);
    const auto [sleb, sr] = sleb_prune(m, {windows, {}}, 3);
    CHECK(sleb.layers.size() == 3);
    CHECK(sr.iterations.size() == 2);
    const auto [laco, lr] = laco_prune(m, {windows, {}}, 3);
    CHECK(laco.layers.size() == 3);
    CHECK_NOTHROW(lr.mapping.validate(5, 3));
}

}  // TEST_SUITE
