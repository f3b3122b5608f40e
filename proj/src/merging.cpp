#include "comepress/merging.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace comepress {

namespace {

void check_sorted_unique(const std::vector<std::size_t>& idx, std::size_t bound, const char* what) {
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= bound) throw ContractError(std::string(what) + " index out of range");
        if (i > 0 && idx[i] <= idx[i - 1])
            throw ContractError(std::string(what) + " indices must be strictly ascending");
    }
}

std::size_t argmax_ratio(std::span<const double> ratios) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < ratios.size(); ++i)
        if (ratios[i] > ratios[best]) best = i;
    return best;
}

}  // namespace

void MergePlan::validate(const ModelConfig& config) const {
    const std::size_t g = ratios.size();
    if (g == 0) throw ContractError("merge plan has an empty group");
    if (ffn_selected.size() != g || heads_selected.size() != g)
        throw ContractError("merge plan selections do not match the group size");
    double total = 0.0;
    for (double r : ratios) {
        if (!(r >= 0.0 && r <= 1.0)) throw ContractError("merge plan ratio outside [0, 1]");
        total += r;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ContractError("merge plan ratios do not sum to 1");
    std::size_t ffn = 0, heads = 0;
    for (std::size_t t = 0; t < g; ++t) {
        check_sorted_unique(ffn_selected[t], config.d_ff, "ffn channel");
        check_sorted_unique(heads_selected[t], config.n_heads, "head");
        ffn += ffn_selected[t].size();
        heads += heads_selected[t].size();
    }
    if (ffn != config.d_ff) throw ContractError("merge plan selects " + std::to_string(ffn) +
                                                " FFN channels, expected " + std::to_string(config.d_ff));
    if (heads != config.n_heads) throw ContractError("merge plan selects " + std::to_string(heads) +
                                                     " heads, expected " + std::to_string(config.n_heads));
}

void LayerMapping::validate(std::size_t teacher_layers, std::size_t student_layers) const {
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const auto& p = pairs[i];
        if (p.teacher >= teacher_layers || p.student >= student_layers) {
            throw ContractError("layer pair {" + std::to_string(p.teacher) + ", " +
                                std::to_string(p.student) + "} out of range for " +
                                std::to_string(teacher_layers) + "/" + std::to_string(student_layers) +
                                " layers");
        }
        if (i > 0 && (p.teacher <= pairs[i - 1].teacher || p.student <= pairs[i - 1].student))
            throw ContractError("layer mapping indices must be strictly increasing");
    }
}

void to_json(nlohmann::json& j, const LayerMapping& m) {
    j = nlohmann::json::array();
    for (const auto& p : m.pairs) j.push_back({{"teacher", p.teacher}, {"student", p.student}});
}

void from_json(const nlohmann::json& j, LayerMapping& m) {
    m.pairs.clear();
    for (const auto& e : j) m.pairs.push_back({e.at("teacher").get<std::size_t>(), e.at("student").get<std::size_t>()});
}

std::vector<double> retention_ratios(std::span<const double> bi_values, double p, double rho) {
    if (bi_values.size() < 2) throw ContractError("retention_ratios: group needs at least two layers");
    if (!(p > 0.0)) throw ContractError("retention_ratios: p must be positive");
    if (!(rho >= 0.0 && rho <= 1.0)) throw ContractError("retention_ratios: rho must lie in [0, 1]");
    const std::size_t n = bi_values.size();
    std::vector<double> r(n);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!(bi_values[i] >= 0.0)) throw ContractError("retention_ratios: BI values must be >= 0");
        r[i] = std::pow(bi_values[i], p);
        total += r[i];
    }
    if (total == 0.0) {
        std::cerr << "warning: all BI scores are zero; using uniform retention ratios\n";
        std::fill(r.begin(), r.end(), 1.0 / static_cast<double>(n));
    } else {
        for (auto& x : r) x /= total;
    }
    const std::size_t top = argmax_ratio(r);
    if (r[top] < rho) {
        const double rest = 1.0 - r[top];
        for (std::size_t i = 0; i < n; ++i)
            if (i != top) r[i] = rest > 0.0 ? r[i] * (1.0 - rho) / rest : 0.0;
        r[top] = rho;
    }
    return r;
}

std::vector<std::size_t> allocate_counts(std::span<const double> ratios, std::size_t total) {
    const std::size_t n = ratios.size();
    if (n == 0) throw ContractError("allocate_counts: no ratios");
    std::vector<std::size_t> counts(n);
    std::vector<double> remainder(n);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double exact = ratios[i] * static_cast<double>(total);
        counts[i] = static_cast<std::size_t>(std::floor(exact));
        remainder[i] = exact - static_cast<double>(counts[i]);
        assigned += counts[i];
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (remainder[a] != remainder[b]) return remainder[a] > remainder[b];
        return ratios[a] > ratios[b];
    });
    for (std::size_t k = 0; assigned < total; k = (k + 1) % n) {
        ++counts[order[k]];
        ++assigned;
    }
    // Ratios summing slightly above 1 can overshoot; take back from the smallest remainders.
    for (std::size_t k = n; assigned > total;) {
        k = (k == 0 ? n : k) - 1;
        if (counts[order[k]] > 0) {
            --counts[order[k]];
            --assigned;
        }
    }
    return counts;
}

std::vector<std::size_t> top_indices(std::span<const double> scores, std::size_t count) {
    if (count > scores.size()) throw ContractError("top_indices: count exceeds candidates");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    order.resize(count);
    std::sort(order.begin(), order.end());
    return order;
}

MergePlan build_merge_plan(std::span<const ChannelScores> scores, std::size_t first_layer,
                           std::span<const double> ratios, NormMode norm_mode) {
    if (scores.size() != ratios.size()) throw ContractError("build_merge_plan: one ratio per layer");
    for (std::size_t t = 0; t < scores.size(); ++t) {
        if (scores[t].layer != first_layer + t)
            throw ContractError("build_merge_plan: group is not contiguous");
        if (scores[t].ffn_channel.size() != scores[0].ffn_channel.size() ||
            scores[t].head.size() != scores[0].head.size())
            throw ContractError("build_merge_plan: score widths differ across the group");
    }
    MergePlan plan;
    plan.first_layer = first_layer;
    plan.ratios.assign(ratios.begin(), ratios.end());
    plan.norm_mode = norm_mode;
    const auto ffn_counts = allocate_counts(ratios, scores[0].ffn_channel.size());
    const auto head_counts = allocate_counts(ratios, scores[0].head.size());
    for (std::size_t t = 0; t < scores.size(); ++t) {
        plan.ffn_selected.push_back(top_indices(scores[t].ffn_channel, ffn_counts[t]));
        plan.heads_selected.push_back(top_indices(scores[t].head, head_counts[t]));
    }
    return plan;
}

namespace {

std::vector<ChannelScores> group_channel_scores(const ToyModel& model, std::span<const Window> calibration,
                                                std::size_t first_layer, std::size_t last_layer) {
    if (last_layer < first_layer || last_layer >= model.layers.size())
        throw ContractError("merge group [" + std::to_string(first_layer) + ", " +
                            std::to_string(last_layer) + "] is not a valid layer range");
    CaptureSpec spec;
    spec.ffn_intermediate = true;
    spec.attn_context = true;
    spec.logits = false;
    spec.stop_after_layer = last_layer;
    for (std::size_t l = first_layer; l <= last_layer; ++l) spec.layers.push_back(l);
    const auto trace = capture_trace(model, calibration, spec);
    std::vector<ChannelScores> scores;
    for (std::size_t l = first_layer; l <= last_layer; ++l)
        scores.push_back(score_layer_channels(model, trace, l));
    return scores;
}

}  // namespace

MergePlan build_merge_plan(const ToyModel& model, std::span<const Window> calibration,
                           std::size_t first_layer, std::size_t last_layer,
                           std::span<const double> ratios, NormMode norm_mode) {
    const auto scores = group_channel_scores(model, calibration, first_layer, last_layer);
    return build_merge_plan(scores, first_layer, ratios, norm_mode);
}

DecoderLayerWeights<float> concat_merge_layers(std::span<const DecoderLayerWeights<float>> group,
                                               const MergePlan& plan) {
    if (group.size() != plan.group_size()) throw ContractError("concat merge: group/plan size mismatch");
    const std::size_t d = group[0].q.dim(1);
    const std::size_t dff = group[0].gate.dim(0);
    std::size_t heads = 0;
    for (const auto& h : plan.heads_selected) heads += h.size();
    if (heads == 0 || d % heads != 0) throw ContractError("concat merge: head count does not divide d_model");
    const std::size_t dh = d / heads;

    DecoderLayerWeights<float> out;
    out.q = Tensor<float>({d, d});
    out.k = Tensor<float>({d, d});
    out.v = Tensor<float>({d, d});
    out.o = Tensor<float>({d, d});
    out.gate = Tensor<float>({dff, d});
    out.up = Tensor<float>({dff, d});
    out.down = Tensor<float>({d, dff});

    std::size_t head_slot = 0, ffn_slot = 0;
    for (std::size_t t = 0; t < group.size(); ++t) {
        const auto& src = group[t];
        for (std::size_t h : plan.heads_selected[t]) {
            for (std::size_t r = 0; r < dh; ++r) {
                const std::size_t from = (h * dh + r) * d, to = (head_slot * dh + r) * d;
                std::copy_n(src.q.data() + from, d, out.q.data() + to);
                std::copy_n(src.k.data() + from, d, out.k.data() + to);
                std::copy_n(src.v.data() + from, d, out.v.data() + to);
            }
            for (std::size_t row = 0; row < d; ++row)
                std::copy_n(src.o.data() + row * d + h * dh, dh, out.o.data() + row * d + head_slot * dh);
            ++head_slot;
        }
        for (std::size_t c : plan.ffn_selected[t]) {
            std::copy_n(src.gate.data() + c * d, d, out.gate.data() + ffn_slot * d);
            std::copy_n(src.up.data() + c * d, d, out.up.data() + ffn_slot * d);
            for (std::size_t row = 0; row < d; ++row) out.down.at(row, ffn_slot) = src.down.at(row, c);
            ++ffn_slot;
        }
    }
    if (ffn_slot != dff) throw ContractError("concat merge: plan does not fill every FFN channel");

    if (plan.norm_mode == NormMode::follow_base) {
        const auto& base = group[argmax_ratio(plan.ratios)];
        out.attn_norm_gamma = base.attn_norm_gamma;
        out.ffn_norm_gamma = base.ffn_norm_gamma;
    } else {
        for (auto member : {&DecoderLayerWeights<float>::attn_norm_gamma,
                            &DecoderLayerWeights<float>::ffn_norm_gamma}) {
            Tensor<float> avg((group[0].*member).shape());
            for (std::size_t j = 0; j < avg.size(); ++j) {
                double s = 0.0;
                for (const auto& layer : group) s += (layer.*member)[j];
                avg[j] = static_cast<float>(s / static_cast<double>(group.size()));
            }
            out.*member = std::move(avg);
        }
    }
    return out;
}

ToyModel apply_concat_merge(const ToyModel& model, const MergePlan& plan) {
    plan.validate(model.config);
    const std::size_t g = plan.group_size();
    if (plan.first_layer + g > model.layers.size())
        throw ContractError("merge plan group extends past the last layer");
    ToyModel out = model;
    const std::span<const DecoderLayerWeights<float>> group(model.layers.data() + plan.first_layer, g);
    out.layers[plan.first_layer] = concat_merge_layers(group, plan);
    out.layers.erase(out.layers.begin() + static_cast<std::ptrdiff_t>(plan.first_layer + 1),
                     out.layers.begin() + static_cast<std::ptrdiff_t>(plan.first_layer + g));
    out.config.n_layers = out.layers.size();
    return out;
}

ToyModel weight_sum_merge(const ToyModel& model, std::size_t first_layer, std::size_t group_size,
                          WeightSumMode mode, double alpha) {
    if (group_size < 2) throw ContractError("weight_sum_merge: group needs at least two layers");
    if (first_layer + group_size > model.layers.size())
        throw ContractError("weight_sum_merge: group extends past the last layer");
    if (mode == WeightSumMode::alpha_blend) {
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ContractError("weight_sum_merge: alpha outside [0, 1]");
        if (group_size != 2) throw ContractError("alpha blending merges exactly two layers");
    }
    ToyModel out = model;
    auto& merged = out.layers[first_layer];
    std::size_t k = 0;
    merged.for_each([&](std::string_view, Tensor<float>& dst) {
        std::vector<const Tensor<float>*> src;
        for (std::size_t i = 0; i < group_size; ++i) {
            std::size_t j = 0;
            model.layers[first_layer + i].for_each([&](std::string_view, const Tensor<float>& t) {
                if (j++ == k) src.push_back(&t);
            });
        }
        for (std::size_t e = 0; e < dst.size(); ++e) {
            const double base = (*src[0])[e];
            double v;
            if (mode == WeightSumMode::alpha_blend) {
                v = alpha * base + (1.0 - alpha) * (*src[1])[e];
            } else {
                v = base;
                for (std::size_t i = 1; i < src.size(); ++i) v += (*src[i])[e] - base;
            }
            dst[e] = static_cast<float>(v);
        }
        ++k;
    });
    out.layers.erase(out.layers.begin() + static_cast<std::ptrdiff_t>(first_layer + 1),
                     out.layers.begin() + static_cast<std::ptrdiff_t>(first_layer + group_size));
    out.config.n_layers = out.layers.size();
    return out;
}

MergeLedger::MergeLedger(std::size_t n_layers)
    : shallowest_(n_layers), deepest_(n_layers), merged_(n_layers, false) {
    std::iota(shallowest_.begin(), shallowest_.end(), 0);
    std::iota(deepest_.begin(), deepest_.end(), 0);
}

void MergeLedger::merge(std::size_t first, std::size_t count) {
    if (count == 0 || first + count > size()) throw ContractError("ledger merge out of range");
    const auto b = static_cast<std::ptrdiff_t>(first);
    const auto e = static_cast<std::ptrdiff_t>(first + count);
    deepest_[first] = deepest_[first + count - 1];
    merged_[first] = true;
    shallowest_.erase(shallowest_.begin() + b + 1, shallowest_.begin() + e);
    deepest_.erase(deepest_.begin() + b + 1, deepest_.begin() + e);
    merged_.erase(merged_.begin() + b + 1, merged_.begin() + e);
}

void MergeLedger::remove(std::size_t index) {
    if (index >= size()) throw ContractError("ledger removal out of range");
    const auto i = static_cast<std::ptrdiff_t>(index);
    shallowest_.erase(shallowest_.begin() + i);
    deepest_.erase(deepest_.begin() + i);
    merged_.erase(merged_.begin() + i);
}

LayerMapping MergeLedger::mapping() const {
    LayerMapping m;
    for (std::size_t i = 0; i < size(); ++i)
        if (merged_[i]) m.pairs.push_back({deepest_[i], i});
    return m;
}

namespace {

struct GroupChoice {
    std::size_t first = 0;
    double sbi = 0.0;
    std::vector<double> bi;
};

/// Lowest-SBI contiguous group of `m + 1` layers (lowest start on ties).
GroupChoice choose_group(const ToyModel& model, std::span<const Window> calibration, std::size_t m) {
    CaptureSpec spec;
    spec.logits = false;
    const auto trace = capture_trace(model, calibration, spec);
    GroupChoice best;
    best.bi = bi_scores(trace);
    bool found = false;
    for (std::size_t l = 0; l + m < model.layers.size(); ++l) {
        const double s = sbi_score(trace, l, m);
        if (!found || s < best.sbi) {
            best.first = l;
            best.sbi = s;
            found = true;
        }
    }
    if (!found) throw ContractError("no mergeable layer group");
    return best;
}

void check_target(const ToyModel& model, std::size_t target) {
    if (target < 1) throw ContractError("target layer count must be at least 1");
    if (target > model.layers.size())
        throw ContractError("target layer count " + std::to_string(target) + " exceeds the model's " +
                            std::to_string(model.layers.size()) + " layers");
}

void evaluate_into(PruneReport& report, const ToyModel& before, const ToyModel& after,
                   const PruneData* data) {
    if (data == nullptr || data->evaluation.empty()) return;
    report.eval_before = perplexity(before, data->evaluation);
    report.eval_after = perplexity(after, data->evaluation);
}

const char* norm_name(NormMode m) { return m == NormMode::average ? "average" : "follow_base"; }

}  // namespace

std::pair<ToyModel, PruneReport> progressive_prune(const ToyModel& model, const PruneData& data,
                                                   const ProgressiveOptions& options) {
    check_target(model, options.target_layers);
    if (options.m < 1) throw ContractError("progressive_prune: m must be at least 1");
    if (data.calibration.empty()) throw ContractError("progressive_prune: empty calibration set");
    PruneReport report;
    report.method = "come";
    report.initial_layers = model.layers.size();
    report.hyperparameters = {{"target_layers", options.target_layers},
                              {"m", options.m},
                              {"p", options.p},
                              {"rho", options.rho},
                              {"norm_mode", norm_name(options.norm_mode)},
                              {"calibration_windows", data.calibration.size()}};
    ToyModel current = model;
    MergeLedger ledger(model.layers.size());
    while (current.layers.size() > options.target_layers) {
        const std::size_t m = std::min(options.m, current.layers.size() - options.target_layers);
        const auto choice = choose_group(current, data.calibration, m);
        const std::span<const double> group_bi(choice.bi.data() + choice.first, m + 1);
        PruneIteration it;
        it.first_layer = choice.first;
        it.group_size = m + 1;
        it.sbi = choice.sbi;
        it.bi = choice.bi;
        it.ratios = retention_ratios(group_bi, options.p, options.rho);
        const MergePlan plan = build_merge_plan(current, data.calibration, choice.first,
                                                choice.first + m, it.ratios, options.norm_mode);
        for (std::size_t t = 0; t <= m; ++t) {
            it.ffn_counts.push_back(plan.ffn_selected[t].size());
            it.head_counts.push_back(plan.heads_selected[t].size());
        }
        current = apply_concat_merge(current, plan);
        ledger.merge(choice.first, m + 1);
        report.iterations.push_back(std::move(it));
    }
    report.final_layers = current.layers.size();
    report.mapping = ledger.mapping();
    evaluate_into(report, model, current, &data);
    return {std::move(current), std::move(report)};
}

std::pair<ToyModel, PruneReport> posterior_prune(const ToyModel& model, const PruneData& data,
                                                 const PosteriorOptions& options) {
    check_target(model, options.target_layers);
    if (options.n < 1) throw ContractError("posterior_prune: n must be at least 1");
    if (data.calibration.empty()) throw ContractError("posterior_prune: empty calibration set");
    PruneReport report;
    report.method = "come-p";
    report.initial_layers = model.layers.size();
    report.hyperparameters = {{"target_layers", options.target_layers},
                              {"n", options.n},
                              {"norm_mode", norm_name(options.norm_mode)},
                              {"calibration_windows", data.calibration.size()}};
    ToyModel current = model;
    MergeLedger ledger(model.layers.size());
    while (current.layers.size() > options.target_layers) {
        const auto choice = choose_group(current, data.calibration, 1);
        const auto scores = group_channel_scores(current, data.calibration, choice.first, choice.first + 1);
        PruneIteration it;
        it.first_layer = choice.first;
        it.group_size = 2;
        it.sbi = choice.sbi;
        it.bi = choice.bi;
        for (std::size_t i = 0; i <= options.n; ++i)
            it.candidate_ratios.push_back(static_cast<double>(i) / static_cast<double>(options.n));
        it.candidate_ppl.assign(it.candidate_ratios.size(), 0.0);
        parallel_for(it.candidate_ratios.size(), [&](std::size_t i) {
            const double r = it.candidate_ratios[i];
            const double ratios[] = {r, 1.0 - r};
            const auto plan = build_merge_plan(scores, choice.first, ratios, options.norm_mode);
            it.candidate_ppl[i] = perplexity(apply_concat_merge(current, plan), data.calibration).ppl;
        });
        std::size_t best = 0;
        for (std::size_t i = 1; i < it.candidate_ppl.size(); ++i)
            if (it.candidate_ppl[i] < it.candidate_ppl[best]) best = i;
        const double r = it.candidate_ratios[best];
        it.chosen_ratio = r;
        it.chosen_ppl = it.candidate_ppl[best];
        it.ratios = {r, 1.0 - r};
        const auto plan = build_merge_plan(scores, choice.first, it.ratios, options.norm_mode);
        for (std::size_t t = 0; t < 2; ++t) {
            it.ffn_counts.push_back(plan.ffn_selected[t].size());
            it.head_counts.push_back(plan.heads_selected[t].size());
        }
        current = apply_concat_merge(current, plan);
        ledger.merge(choice.first, 2);
        report.iterations.push_back(std::move(it));
    }
    report.final_layers = current.layers.size();
    report.mapping = ledger.mapping();
    evaluate_into(report, model, current, &data);
    return {std::move(current), std::move(report)};
}

namespace {

bool protected_layer(std::size_t original, std::size_t n_layers, bool protect_ends) {
    return protect_ends && (original < 4 || original + 2 >= n_layers);
}

}  // namespace

std::pair<ToyModel, PruneReport> dlp_prune(const ToyModel& model, const LayerScoreSet& scores,
                                           std::size_t target_layers, bool protect_ends,
                                           const PruneData* data) {
    check_target(model, target_layers);
    const std::size_t n = model.layers.size();
    if (scores.scores.size() != n) throw ContractError("dlp_prune: scores do not cover every layer");
    std::vector<std::size_t> candidates;
    for (std::size_t l = 0; l < n; ++l)
        if (!protected_layer(l, n, protect_ends)) candidates.push_back(l);
    const std::size_t remove = n - target_layers;
    if (remove > candidates.size())
        throw ContractError("dlp_prune: only " + std::to_string(candidates.size()) +
                            " layers are eligible for removal");
    std::stable_sort(candidates.begin(), candidates.end(),
                     [&](std::size_t a, std::size_t b) { return scores.scores[a] < scores.scores[b]; });
    std::vector<std::size_t> removed(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(remove));
    std::sort(removed.begin(), removed.end());

    PruneReport report;
    report.method = "dlp-" + scores.method;
    report.initial_layers = n;
    report.hyperparameters = {{"target_layers", target_layers}, {"protect_ends", protect_ends}};
    ToyModel out = model;
    MergeLedger ledger(n);
    for (auto it = removed.rbegin(); it != removed.rend(); ++it) {
        remove_layer(out, *it);
        ledger.remove(*it);
    }
    if (!removed.empty()) {
        PruneIteration it;
        it.bi = scores.scores;
        it.removed_original = removed;
        report.iterations.push_back(std::move(it));
    }
    report.final_layers = out.layers.size();
    report.mapping = ledger.mapping();
    evaluate_into(report, model, out, data);
    return {std::move(out), std::move(report)};
}

std::pair<ToyModel, PruneReport> sleb_prune(const ToyModel& model, const PruneData& data,
                                            std::size_t target_layers, bool protect_ends) {
    check_target(model, target_layers);
    if (data.calibration.empty()) throw ContractError("sleb_prune: empty calibration set");
    const std::size_t n = model.layers.size();
    PruneReport report;
    report.method = "dlp-sleb";
    report.initial_layers = n;
    report.hyperparameters = {{"target_layers", target_layers},
                              {"protect_ends", protect_ends},
                              {"calibration_windows", data.calibration.size()}};
    ToyModel current = model;
    MergeLedger ledger(n);
    while (current.layers.size() > target_layers) {
        const auto scores = posterior_ppl_importance(current, data.calibration);
        std::optional<std::size_t> best;
        for (std::size_t l = 0; l < current.layers.size(); ++l) {
            if (protected_layer(ledger.original_of(l), n, protect_ends)) continue;
            if (!best || scores.scores[l] < scores.scores[*best]) best = l;
        }
        if (!best) throw ContractError("sleb_prune: no layer is eligible for removal");
        PruneIteration it;
        it.first_layer = *best;
        it.group_size = 1;
        it.bi = scores.scores;
        it.removed_original = {ledger.original_of(*best)};
        remove_layer(current, *best);
        ledger.remove(*best);
        report.iterations.push_back(std::move(it));
    }
    report.final_layers = current.layers.size();
    report.mapping = ledger.mapping();
    evaluate_into(report, model, current, &data);
    return {std::move(current), std::move(report)};
}

std::pair<ToyModel, PruneReport> laco_prune(const ToyModel& model, const PruneData& data,
                                            std::size_t target_layers, std::size_t m) {
    check_target(model, target_layers);
    if (m < 1) throw ContractError("laco_prune: m must be at least 1");
    if (data.calibration.empty()) throw ContractError("laco_prune: empty calibration set");
    PruneReport report;
    report.method = "wslp-laco";
    report.initial_layers = model.layers.size();
    report.hyperparameters = {{"target_layers", target_layers},
                              {"m", m},
                              {"calibration_windows", data.calibration.size()}};
    ToyModel current = model;
    MergeLedger ledger(model.layers.size());
    while (current.layers.size() > target_layers) {
        const std::size_t mm = std::min(m, current.layers.size() - target_layers);
        const auto choice = choose_group(current, data.calibration, mm);
        PruneIteration it;
        it.first_layer = choice.first;
        it.group_size = mm + 1;
        it.sbi = choice.sbi;
        it.bi = choice.bi;
        current = weight_sum_merge(current, choice.first, mm + 1, WeightSumMode::laco);
        ledger.merge(choice.first, mm + 1);
        report.iterations.push_back(std::move(it));
    }
    report.final_layers = current.layers.size();
    report.mapping = ledger.mapping();
    evaluate_into(report, model, current, &data);
    return {std::move(current), std::move(report)};
}

}  // namespace comepress
