#pragma once

#include "comepress/evaluation.hpp"
#include "comepress/model.hpp"
#include "comepress/scoring.hpp"

#include <json.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace comepress {

enum class NormMode { average, follow_base };

/// Channel and head budget for merging a contiguous group of layers into one.
struct MergePlan {
    std::size_t first_layer = 0;       // group is [first_layer, first_layer + ratios.size())
    std::vector<double> ratios;        // r_t per group member
    std::vector<std::vector<std::size_t>> ffn_selected;    // ascending indices per member
    std::vector<std::vector<std::size_t>> heads_selected;  // ascending indices per member
    NormMode norm_mode = NormMode::average;

    std::size_t group_size() const { return ratios.size(); }
    /// Throws ContractError if the plan is inconsistent with the model config.
    void validate(const ModelConfig& config) const;
};

/// Teacher layer `teacher` (0-based, original model) is aligned with student
/// layer `student` (0-based, pruned model): their output hidden states are
/// hidden[teacher + 1] and hidden[student + 1].
struct LayerPair {
    std::size_t teacher = 0;
    std::size_t student = 0;
    bool operator==(const LayerPair&) const = default;
};

struct LayerMapping {
    std::vector<LayerPair> pairs;
    /// Both index sequences must be strictly increasing and in range.
    void validate(std::size_t teacher_layers, std::size_t student_layers) const;
    bool operator==(const LayerMapping&) const = default;
};

void to_json(nlohmann::json& j, const LayerMapping& m);
void from_json(const nlohmann::json& j, LayerMapping& m);

/// Eq. (5)-style allocation r_t = BI_t^p / sum BI^p, floored at rho for the
/// strongest layer. All-zero scores give uniform ratios.
std::vector<double> retention_ratios(std::span<const double> bi_values, double p, double rho);

/// Largest-remainder rounding of ratios * total; exact total preserved.
std::vector<std::size_t> allocate_counts(std::span<const double> ratios, std::size_t total);

/// Indices of the `count` largest scores (ties toward lower index), ascending.
std::vector<std::size_t> top_indices(std::span<const double> scores, std::size_t count);

/// Selects channels and heads for a group from per-layer sensitivity scores.
MergePlan build_merge_plan(std::span<const ChannelScores> scores, std::size_t first_layer,
                           std::span<const double> ratios, NormMode norm_mode);

/// Captures the group's activations on `calibration`, scores channels, and
/// builds the plan.
MergePlan build_merge_plan(const ToyModel& model, std::span<const Window> calibration,
                           std::size_t first_layer, std::size_t last_layer,
                           std::span<const double> ratios, NormMode norm_mode);

/// Gathers the selected rows/columns of every group member into one layer.
DecoderLayerWeights<float> concat_merge_layers(std::span<const DecoderLayerWeights<float>> group,
                                               const MergePlan& plan);

/// Replaces the plan's group with the merged layer.
ToyModel apply_concat_merge(const ToyModel& model, const MergePlan& plan);

enum class WeightSumMode { alpha_blend, laco };

/// Elementwise combination of a contiguous group. alpha_blend requires two
/// layers: W = alpha*W_l + (1-alpha)*W_{l+1}. laco: W = W_l + sum_i (W_{l+i} - W_l).
ToyModel weight_sum_merge(const ToyModel& model, std::size_t first_layer, std::size_t group_size,
                          WeightSumMode mode, double alpha = 0.5);

struct PruneIteration {
    std::size_t first_layer = 0;   // in the current model
    std::size_t group_size = 0;
    double sbi = 0.0;
    std::vector<double> bi;
    std::vector<double> ratios;
    std::vector<std::size_t> ffn_counts;
    std::vector<std::size_t> head_counts;
    std::vector<std::size_t> removed_original;  // dlp methods: original index removed
    // Posterior search only: candidate ratio for the shallower layer and its PPL.
    std::vector<double> candidate_ratios;
    std::vector<double> candidate_ppl;
    std::optional<double> chosen_ratio;
    std::optional<double> chosen_ppl;
};

struct PruneReport {
    std::string method;
    std::size_t initial_layers = 0;
    std::size_t final_layers = 0;
    std::vector<PruneIteration> iterations;
    LayerMapping mapping;
    std::optional<EvalResult> eval_before;
    std::optional<EvalResult> eval_after;
    nlohmann::ordered_json hyperparameters = nlohmann::ordered_json::object();
};

struct PruneData {
    std::span<const Window> calibration;
    std::span<const Window> evaluation;  // empty: skip before/after evaluation
};

struct ProgressiveOptions {
    std::size_t target_layers = 0;
    std::size_t m = 1;
    double p = 1.0;
    double rho = 0.0;
    NormMode norm_mode = NormMode::average;
};

/// Iterative concatenation merging down to target_layers (min-SBI group each step).
std::pair<ToyModel, PruneReport> progressive_prune(const ToyModel& model, const PruneData& data,
                                                   const ProgressiveOptions& options);

struct PosteriorOptions {
    std::size_t target_layers = 0;
    std::size_t n = 20;
    NormMode norm_mode = NormMode::average;
};

/// Two-layer merges whose shallow-layer ratio is the calibration-PPL minimiser over {i/n}.
std::pair<ToyModel, PruneReport> posterior_prune(const ToyModel& model, const PruneData& data,
                                                 const PosteriorOptions& options);

/// Removes the n_layers - target lowest-scoring layers (ties: lower index first).
/// protect_ends keeps the first four and last two layers out of the candidate set.
std::pair<ToyModel, PruneReport> dlp_prune(const ToyModel& model, const LayerScoreSet& scores,
                                           std::size_t target_layers, bool protect_ends = false,
                                           const PruneData* data = nullptr);

/// Greedy posterior-PPL removal: each step deletes the layer whose removal
/// yields the lowest calibration NLL.
std::pair<ToyModel, PruneReport> sleb_prune(const ToyModel& model, const PruneData& data,
                                            std::size_t target_layers, bool protect_ends = false);

/// LaCo-formula merging of min-SBI groups down to target_layers.
std::pair<ToyModel, PruneReport> laco_prune(const ToyModel& model, const PruneData& data,
                                            std::size_t target_layers, std::size_t m = 1);

/// Tracks which original layers each current layer absorbed, and produces the
/// teacher/student mapping for merged layers.
class MergeLedger {
public:
    explicit MergeLedger(std::size_t n_layers);
    /// Records that current layers [first, first+count) became one layer.
    void merge(std::size_t first, std::size_t count);
    /// Records that current layer `index` was deleted.
    void remove(std::size_t index);
    std::size_t size() const { return deepest_.size(); }
    std::size_t deepest_original(std::size_t current) const { return deepest_.at(current); }
    std::size_t original_of(std::size_t current) const { return shallowest_.at(current); }
    LayerMapping mapping() const;

private:
    std::vector<std::size_t> shallowest_;
    std::vector<std::size_t> deepest_;
    std::vector<bool> merged_;
};

}  // namespace comepress
