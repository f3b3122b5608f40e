#include "comepress/sweep.hpp"

namespace comepress {

std::string to_string(SweepStructure s) {
    switch (s) {
        case SweepStructure::mha: return "mha";
        case SweepStructure::ffn: return "ffn";
        case SweepStructure::layer: return "layer";
    }
    return "?";
}

std::string to_string(SweepMethod m) { return m == SweepMethod::alpha_blend ? "alpha" : "concat"; }

SweepStructure parse_structure(std::string_view s) {
    if (s == "mha") return SweepStructure::mha;
    if (s == "ffn") return SweepStructure::ffn;
    if (s == "layer") return SweepStructure::layer;
    throw ContractError("unknown sweep structure '" + std::string(s) + "'");
}

SweepMethod parse_sweep_method(std::string_view s) {
    if (s == "alpha") return SweepMethod::alpha_blend;
    if (s == "concat") return SweepMethod::concat;
    throw ContractError("unknown sweep method '" + std::string(s) + "'");
}

namespace {

void blend(Tensor<float>& dst, const Tensor<float>& shallow, const Tensor<float>& deep, double alpha) {
    for (std::size_t i = 0; i < dst.size(); ++i)
        dst[i] = static_cast<float>(alpha * shallow[i] + (1.0 - alpha) * deep[i]);
}

}  // namespace

ToyModel merge_structure(const ToyModel& model, std::size_t first_layer, SweepStructure structure,
                         SweepMethod method, double ratio, std::span<const ChannelScores> scores) {
    if (first_layer + 1 >= model.layers.size()) throw ContractError("sweep pair must be two adjacent layers");
    if (!(ratio >= 0.0 && ratio <= 1.0)) throw ContractError("sweep ratio outside [0, 1]");
    const auto& shallow = model.layers[first_layer];
    const auto& deep = model.layers[first_layer + 1];
    DecoderLayerWeights<float> merged = deep;
    const bool mha = structure != SweepStructure::ffn;
    const bool ffn = structure != SweepStructure::mha;
    if (method == SweepMethod::alpha_blend) {
        if (mha) {
            blend(merged.q, shallow.q, deep.q, ratio);
            blend(merged.k, shallow.k, deep.k, ratio);
            blend(merged.v, shallow.v, deep.v, ratio);
            blend(merged.o, shallow.o, deep.o, ratio);
        }
        if (ffn) {
            blend(merged.gate, shallow.gate, deep.gate, ratio);
            blend(merged.up, shallow.up, deep.up, ratio);
            blend(merged.down, shallow.down, deep.down, ratio);
        }
    } else {
        const double ratios[] = {ratio, 1.0 - ratio};
        const auto plan = build_merge_plan(scores, first_layer, ratios, NormMode::follow_base);
        const DecoderLayerWeights<float> group[] = {shallow, deep};
        const auto concat = concat_merge_layers(group, plan);
        if (mha) {
            merged.q = concat.q;
            merged.k = concat.k;
            merged.v = concat.v;
            merged.o = concat.o;
        }
        if (ffn) {
            merged.gate = concat.gate;
            merged.up = concat.up;
            merged.down = concat.down;
        }
    }
    ToyModel out = model;
    out.layers[first_layer + 1] = std::move(merged);
    remove_layer(out, first_layer);
    return out;
}

SweepResult ratio_sweep(const ToyModel& model, std::size_t first_layer,
                        std::span<const SweepStructure> structures, std::span<const SweepMethod> methods,
                        std::size_t grid_n, std::span<const Window> calibration,
                        std::span<const Window> evaluation) {
    if (grid_n < 2) throw ContractError("sweep grid_n must be at least 2");
    if (first_layer + 1 >= model.layers.size()) throw ContractError("sweep pair must be two adjacent layers");
    SweepResult result;
    result.first_layer = first_layer;
    result.grid_n = grid_n;
    {
        ToyModel m = model;
        remove_layer(m, first_layer);
        result.deeper_retained_ppl = perplexity(m, evaluation).ppl;
        m = model;
        remove_layer(m, first_layer + 1);
        result.shallower_retained_ppl = perplexity(m, evaluation).ppl;
    }
    std::vector<ChannelScores> scores;
    for (auto method : methods) {
        if (method != SweepMethod::concat) continue;
        CaptureSpec spec;
        spec.ffn_intermediate = true;
        spec.attn_context = true;
        spec.logits = false;
        spec.layers = {first_layer, first_layer + 1};
        spec.stop_after_layer = first_layer + 1;
        const auto trace = capture_trace(model, calibration, spec);
        scores = {score_layer_channels(model, trace, first_layer),
                  score_layer_channels(model, trace, first_layer + 1)};
        break;
    }
    for (auto structure : structures) {
        for (auto method : methods) {
            const std::size_t base = result.records.size();
            result.records.resize(base + grid_n + 1);
            parallel_for(grid_n + 1, [&](std::size_t i) {
                const double ratio = static_cast<double>(i) / static_cast<double>(grid_n);
                const auto merged = merge_structure(model, first_layer, structure, method, ratio, scores);
                result.records[base + i] = {structure, method, ratio, perplexity(merged, evaluation).ppl};
            });
        }
    }
    return result;
}

}  // namespace comepress
