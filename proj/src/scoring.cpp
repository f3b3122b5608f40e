#include "comepress/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

namespace comepress {

LayerScoreSet LayerScoreSet::from_scores(std::string method, std::vector<double> scores) {
    LayerScoreSet set;
    set.method = std::move(method);
    set.normalized.assign(scores.size(), 0.0);
    if (!scores.empty()) {
        const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
        const double min = *lo, max = *hi;
        if (max > min) {
            for (std::size_t i = 0; i < scores.size(); ++i)
                set.normalized[i] = (scores[i] - min) / (max - min);
        }
    }
    set.scores = std::move(scores);
    return set;
}

template <typename T>
std::vector<double> channel_sensitivity(const Tensor<T>& weight, const Tensor<T>& inputs) {
    if (weight.rank() != 2) throw ShapeError("channel_sensitivity: weight must be rank 2");
    const std::size_t v = weight.dim(0), u = weight.dim(1);
    if (inputs.empty() || inputs.cols() != u) {
        if (inputs.empty()) throw ContractError("channel_sensitivity: empty calibration set");
        throw ShapeError("channel_sensitivity: inputs have " + std::to_string(inputs.cols()) +
                         " channels, weight has " + std::to_string(u) + " columns");
    }
    const std::size_t tokens = inputs.rows();
    if (tokens == 0) throw ContractError("channel_sensitivity: empty calibration set");

    std::vector<double> col_l1(u, 0.0);
    for (std::size_t r = 0; r < v; ++r)
        for (std::size_t i = 0; i < u; ++i) col_l1[i] += std::abs(static_cast<double>(weight[r * u + i]));

    std::vector<double> mean_abs(u, 0.0);
    for (std::size_t t = 0; t < tokens; ++t)
        for (std::size_t i = 0; i < u; ++i) mean_abs[i] += std::abs(static_cast<double>(inputs[t * u + i]));

    std::vector<double> s(u);
    for (std::size_t i = 0; i < u; ++i) s[i] = mean_abs[i] / static_cast<double>(tokens) * col_l1[i];
    return s;
}

ChannelScores score_layer_channels(const ToyModel& model, const ActivationTrace& trace,
                                   std::size_t layer) {
    if (layer >= model.layers.size()) throw ContractError("score_layer_channels: layer out of range");
    if (layer >= trace.ffn_intermediate.size() || trace.ffn_intermediate[layer].empty() ||
        layer >= trace.attn_context.size() || trace.attn_context[layer].empty()) {
        throw ContractError("score_layer_channels: trace lacks FFN/attention captures for layer " +
                            std::to_string(layer));
    }
    const auto& w = model.layers[layer];
    const auto& cfg = model.config;
    ChannelScores cs;
    cs.layer = layer;
    cs.ffn_channel = channel_sensitivity(w.down, trace.ffn_intermediate[layer]);
    cs.attn_channel = channel_sensitivity(w.o, trace.attn_context[layer]);
    cs.head.assign(cfg.n_heads, 0.0);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        double total = 0.0;
        for (std::size_t j = 0; j < cfg.d_head; ++j) total += cs.attn_channel[h * cfg.d_head + j];
        cs.head[h] = total / static_cast<double>(cfg.d_head);
    }
    return cs;
}

ActivationTrace capture_trace(const ToyModel& model, std::span<const Window> windows,
                              const CaptureSpec& capture, std::size_t batch_size) {
    if (windows.empty()) throw ContractError("capture_trace: no calibration windows");
    CaptureSpec spec = capture;
    spec.logits = false;
    std::vector<ActivationTrace> parts;
    for (std::size_t i = 0; i < windows.size(); i += batch_size) {
        const auto group = windows.subspan(i, std::min(batch_size, windows.size() - i));
        parts.push_back(forward(model, to_batch(group), spec).second);
    }
    if (parts.size() == 1) return std::move(parts[0]);
    return concat_traces<float>(parts);
}

namespace {

double skip_influence(const ActivationTrace& trace, std::size_t from, std::size_t to,
                      CosineDiagnostics* diag) {
    const Tensor<float>& a = trace.hidden.at(from);
    const Tensor<float>& b = trace.hidden.at(to);
    if (a.shape() != b.shape()) throw ShapeError("hidden states differ in shape");
    const std::size_t d = a.cols();
    const std::size_t tokens = a.rows();
    double total = 0.0;
    std::size_t counted = 0, skipped = 0;
    for (std::size_t t = 0; t < tokens; ++t) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double x = a[t * d + j], y = b[t * d + j];
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        if (na == 0.0 || nb == 0.0) {
            ++skipped;
            continue;
        }
        total += dot / std::sqrt(na * nb);
        ++counted;
    }
    if (diag) diag->skipped_tokens += skipped;
    if (counted == 0) {
        if (diag) ++diag->empty_layers;
        std::cerr << "warning: every token had a zero-norm hidden vector; influence set to 0\n";
        return 0.0;
    }
    return 1.0 - total / static_cast<double>(counted);
}

}  // namespace

std::vector<double> bi_scores(const ActivationTrace& trace, CosineDiagnostics* diag) {
    if (trace.hidden.size() < 2) throw ContractError("bi_scores: trace has no decoder layers");
    std::vector<double> bi(trace.hidden.size() - 1);
    for (std::size_t l = 0; l < bi.size(); ++l) bi[l] = sbi_score(trace, l, 0, diag);
    return bi;
}

double sbi_score(const ActivationTrace& trace, std::size_t first_layer, std::size_t m,
                 CosineDiagnostics* diag) {
    const std::size_t to = first_layer + m + 1;
    if (to >= trace.hidden.size()) {
        throw ContractError("sbi_score: group [" + std::to_string(first_layer) + ", " +
                            std::to_string(first_layer + m) + "] exceeds " +
                            std::to_string(trace.hidden.size() - 1) + " layers");
    }
    return skip_influence(trace, first_layer, to, diag);
}

template <typename T>
LayerScoreSet magnitude_importance(const BasicToyModel<T>& model) {
    std::vector<double> scores;
    for (const auto& layer : model.layers) {
        double total = 0.0;
        layer.for_each([&](std::string_view, const Tensor<T>& t) {
            for (T v : t.values()) total += std::abs(static_cast<double>(v));
        });
        scores.push_back(total);
    }
    return LayerScoreSet::from_scores("magnitude", std::move(scores));
}

template <typename T>
Var<T> lm_loss(const ModelVars<T>& vars, const ModelConfig& config, std::span<const Window> windows) {
    const TokenBatch batch = to_batch(windows);
    const auto targets = batch_targets(windows);
    auto graph = forward_graph(vars, config, batch, CaptureSpec{});
    return cross_entropy(graph.logits, std::span<const std::int32_t>(targets));
}

template <typename T>
LayerScoreSet taylor_importance(const BasicToyModel<T>& model, std::span<const Window> calibration) {
    if (calibration.empty()) throw ContractError("taylor_importance: no calibration windows");
    std::size_t total_tokens = 0;
    for (const auto& w : calibration) total_tokens += w.target.size();

    // Accumulate dL/dw over chunks so the mean loss covers the whole set.
    std::vector<std::vector<Tensor<T>>> grads(model.layers.size());
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        model.layers[l].for_each(
            [&](std::string_view, const Tensor<T>& t) { grads[l].emplace_back(t.shape()); });
    }
    constexpr std::size_t kChunk = 16;
    for (std::size_t i = 0; i < calibration.size(); i += kChunk) {
        const auto chunk = calibration.subspan(i, std::min(kChunk, calibration.size() - i));
        std::size_t chunk_tokens = 0;
        for (const auto& w : chunk) chunk_tokens += w.target.size();
        const auto vars = bind_parameters<T>(
            model, [](const std::string& name) { return name.rfind("layers.", 0) == 0; });
        Var<T> loss = lm_loss(vars, model.config, chunk);
        backward(loss);
        const T weight = static_cast<T>(chunk_tokens) / static_cast<T>(total_tokens);
        for (std::size_t l = 0; l < vars.layers.size(); ++l) {
            for (std::size_t k = 0; k < 9; ++k) {
                const auto& v = vars.layers[l].tensors[k];
                if (!v.has_grad()) continue;
                auto& g = grads[l][k];
                for (std::size_t j = 0; j < g.size(); ++j) g[j] += weight * v.grad()[j];
            }
        }
    }
    std::vector<double> scores;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        double total = 0.0;
        std::size_t k = 0;
        model.layers[l].for_each([&](std::string_view, const Tensor<T>& t) {
            const auto& g = grads[l][k++];
            for (std::size_t j = 0; j < t.size(); ++j)
                total += std::abs(static_cast<double>(g[j]) * static_cast<double>(t[j]));
        });
        scores.push_back(total);
    }
    return LayerScoreSet::from_scores("taylor", std::move(scores));
}

LayerScoreSet posterior_ppl_importance(const ToyModel& model, std::span<const Window> windows) {
    if (model.layers.size() < 2) throw ContractError("posterior_ppl_importance needs >= 2 layers");
    std::vector<double> scores(model.layers.size());
    parallel_for(model.layers.size(), [&](std::size_t l) {
        ToyModel reduced = model;
        remove_layer(reduced, l);
        scores[l] = perplexity(reduced, windows).nll_per_token;
    });
    return LayerScoreSet::from_scores("posterior_ppl", std::move(scores));
}

#define COMEPRESS_INSTANTIATE(T)                                                                  \
    template std::vector<double> channel_sensitivity<T>(const Tensor<T>&, const Tensor<T>&);      \
    template LayerScoreSet magnitude_importance<T>(const BasicToyModel<T>&);                      \
    template LayerScoreSet taylor_importance<T>(const BasicToyModel<T>&, std::span<const Window>); \
    template Var<T> lm_loss<T>(const ModelVars<T>&, const ModelConfig&, std::span<const Window>);

COMEPRESS_INSTANTIATE(float)
COMEPRESS_INSTANTIATE(double)
#undef COMEPRESS_INSTANTIATE

}  // namespace comepress
