#pragma once

#include "comepress/evaluation.hpp"
#include "comepress/merging.hpp"
#include "comepress/scoring.hpp"

#include <span>
#include <string>
#include <vector>

namespace comepress {

enum class SweepStructure { mha, ffn, layer };
enum class SweepMethod { alpha_blend, concat };

std::string to_string(SweepStructure s);
std::string to_string(SweepMethod m);
SweepStructure parse_structure(std::string_view s);
SweepMethod parse_sweep_method(std::string_view s);

/// `ratio` is the share given to the shallower layer of the pair; ratio 0
/// keeps the deeper layer unchanged.
struct SweepRecord {
    SweepStructure structure = SweepStructure::layer;
    SweepMethod method = SweepMethod::concat;
    double ratio = 0.0;
    double ppl = 0.0;
};

struct SweepResult {
    std::size_t first_layer = 0;
    std::size_t grid_n = 0;
    double deeper_retained_ppl = 0.0;     // shallower layer deleted
    double shallower_retained_ppl = 0.0;  // deeper layer deleted
    std::vector<SweepRecord> records;
};

/// Replaces layers (first, first+1) by one layer that merges only `structure`
/// at `ratio`; every other tensor, norms included, comes from the deeper layer.
/// `scores` (two entries) are required for the concat method.
ToyModel merge_structure(const ToyModel& model, std::size_t first_layer, SweepStructure structure,
                         SweepMethod method, double ratio, std::span<const ChannelScores> scores);

/// Evaluates `evaluation` PPL over ratios {i / grid_n} for every requested
/// structure and method. Channel scores come from `calibration`.
SweepResult ratio_sweep(const ToyModel& model, std::size_t first_layer,
                        std::span<const SweepStructure> structures, std::span<const SweepMethod> methods,
                        std::size_t grid_n, std::span<const Window> calibration,
                        std::span<const Window> evaluation);

}  // namespace comepress
