#pragma once

#include "comepress/evaluation.hpp"
#include "comepress/merging.hpp"
#include "comepress/model.hpp"

#include <json.hpp>

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace comepress {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-2;
};

template <typename T>
struct OptimizerState {
    AdamWConfig config;
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    std::size_t step = 0;
};

/// One AdamW update with bias correction. Weight decay is decoupled and
/// applied before the moment step: w -= lr * wd * w.
template <typename T>
void adamw_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads,
                OptimizerState<T>& state, double lr);

/// lr0 * 0.5 * (1 + cos(pi * step / total_steps)).
double cosine_lr(std::size_t step, std::size_t total_steps, double lr0);

/// Scales grads in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<Tensor<T>> grads, double max_norm);

enum class LrSchedule { cosine, constant };

struct LossPoint {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::optional<std::size_t> pair;  // mp distillation only
};

struct PretrainConfig {
    std::size_t steps = 3000;
    std::size_t batch = 16;
    std::size_t seq = 128;
    double lr = 3e-3;
    std::size_t warmup_steps = 100;
    double clip = 1.0;
    AdamWConfig adamw;
    std::uint64_t seed = 0;
};

struct TrainResult {
    ToyModel model;
    std::vector<LossPoint> curve;
};

using StepCallback = std::function<void(const LossPoint&)>;

/// Next-token training on random windows of `train_text`. Linear warmup
/// followed by cosine decay to zero.
TrainResult pretrain(const ToyModel& model, std::string_view train_text, const PretrainConfig& config,
                     const StepCallback& on_step = {});

enum class KlDirection { forward, symmetric };

/// Softmax over the hidden axis per token; mean over tokens of
/// KL(softmax(teacher) || softmax(student)), or the mean of both directions.
template <typename T>
Var<T> feature_kl(const Var<T>& teacher_h, const Var<T>& student_h, KlDirection direction);

template <typename T>
struct DistillLoss {
    Var<T> total;                  // mean of the per-pair terms
    std::vector<Var<T>> per_pair;  // same order as the mapping
};

/// Distillation objective for one batch: teacher hidden[a+1] against student
/// hidden[b+1] for every pair, averaged over pairs. The teacher is run without
/// gradients.
template <typename T>
DistillLoss<T> distillation_loss(const BasicToyModel<T>& teacher, const ModelVars<T>& student,
                                 const ModelConfig& student_config, const TokenBatch& batch,
                                 const LayerMapping& mapping, KlDirection direction);

enum class DistillMode { mp, sp };

struct DistillConfig {
    DistillMode mode = DistillMode::sp;
    LayerMapping mapping;
    double lr = 1e-5;                 // sp
    std::vector<double> pair_lrs;     // mp, one per mapping pair
    std::size_t steps = 1000;         // per pair for mp
    std::size_t batch = 16;
    std::size_t seq = 128;
    KlDirection kl = KlDirection::forward;
    LrSchedule schedule = LrSchedule::cosine;
    double clip = 1.0;
    AdamWConfig adamw;
    std::uint64_t seed = 0;

    /// Throws ContractError when the mapping and learning rates disagree.
    void validate(std::size_t teacher_layers, std::size_t student_layers) const;
};

/// Per-pair learning rates for mp, decreasing from shallow to deep.
std::vector<double> mp_lr_ladder(std::size_t pairs);

/// Trains each mapped student layer in turn (shallow to deep) with its own
/// optimizer, learning rate and data stream.
TrainResult distill_mp(const ToyModel& teacher, const ToyModel& student, std::string_view train_text,
                       const DistillConfig& config, const StepCallback& on_step = {});

/// Trains all mapped student layers jointly on the pair-averaged loss.
TrainResult distill_sp(const ToyModel& teacher, const ToyModel& student, std::string_view train_text,
                       const DistillConfig& config, const StepCallback& on_step = {});

TrainResult distill(const ToyModel& teacher, const ToyModel& student, std::string_view train_text,
                    const DistillConfig& config, const StepCallback& on_step = {});

nlohmann::ordered_json curve_to_json(std::span<const LossPoint> curve);

}  // namespace comepress
