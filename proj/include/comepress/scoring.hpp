#pragma once

#include "comepress/evaluation.hpp"
#include "comepress/model.hpp"

#include <span>
#include <string>
#include <vector>

namespace comepress {

/// Sensitivity of the FFN intermediate channels (down-projection inputs) and of
/// the attention heads (o-projection input slices) of one layer.
struct ChannelScores {
    std::size_t layer = 0;
    std::vector<double> ffn_channel;   // [d_ff]
    std::vector<double> attn_channel;  // [d_model], o-projection input channels
    std::vector<double> head;          // [n_heads], mean of the head's attn_channel slice
};

struct LayerScoreSet {
    std::string method;  // "bi", "magnitude", "taylor", "posterior_ppl"
    std::vector<double> scores;
    std::vector<double> normalized;

    /// Fills `normalized` by min-max scaling (all zeros when scores are constant).
    static LayerScoreSet from_scores(std::string method, std::vector<double> scores);
};

/// s_i = mean over calibration tokens of |x_i| * ||W[:, i]||_1 for W of shape
/// [v, u] and inputs of shape [..., u]. Throws ContractError on an empty set.
template <typename T>
std::vector<double> channel_sensitivity(const Tensor<T>& weight, const Tensor<T>& inputs);

/// Requires trace.ffn_intermediate[layer] and trace.attn_context[layer].
ChannelScores score_layer_channels(const ToyModel& model, const ActivationTrace& trace,
                                   std::size_t layer);

/// Hidden-state capture over a window set, processed in batches.
ActivationTrace capture_trace(const ToyModel& model, std::span<const Window> windows,
                              const CaptureSpec& capture, std::size_t batch_size = 16);

struct CosineDiagnostics {
    std::size_t skipped_tokens = 0;  // tokens with a zero-norm hidden vector
    std::size_t empty_layers = 0;    // scores where every token was skipped
};

/// BI per decoder layer l (0-based): 1 - mean per-token cosine(hidden[l], hidden[l+1]).
std::vector<double> bi_scores(const ActivationTrace& trace, CosineDiagnostics* diag = nullptr);

/// Skip influence of layers [first_layer, first_layer + m]: compares
/// hidden[first_layer] with hidden[first_layer + m + 1]. m = 0 equals BI.
double sbi_score(const ActivationTrace& trace, std::size_t first_layer, std::size_t m,
                 CosineDiagnostics* diag = nullptr);

/// Sum of |w| over all nine tensors of each layer (norm gammas included).
template <typename T>
LayerScoreSet magnitude_importance(const BasicToyModel<T>& model);

/// Sum over layer tensors of |dL/dw * w| with L the mean LM cross-entropy.
template <typename T>
LayerScoreSet taylor_importance(const BasicToyModel<T>& model, std::span<const Window> calibration);

/// Mean NLL per token with each layer removed in turn (lower = more redundant).
LayerScoreSet posterior_ppl_importance(const ToyModel& model, std::span<const Window> windows);

/// Mean cross-entropy of a model over windows as a differentiable scalar.
template <typename T>
Var<T> lm_loss(const ModelVars<T>& vars, const ModelConfig& config, std::span<const Window> windows);

}  // namespace comepress
