#include "comepress/training.hpp"

#include "comepress/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace comepress {

template <typename T>
void adamw_step(std::span<Tensor<T>* const> params, std::span<const Tensor<T>> grads,
                OptimizerState<T>& state, double lr) {
    if (params.size() != grads.size()) throw ContractError("adamw_step: params/grads count mismatch");
    if (state.m.empty()) {
        for (const auto* p : params) {
            state.m.emplace_back(p->shape());
            state.v.emplace_back(p->shape());
        }
    }
    if (state.m.size() != params.size()) throw ContractError("adamw_step: optimizer state size mismatch");
    ++state.step;
    const auto& c = state.config;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
    const double decay = 1.0 - lr * c.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& w = *params[i];
        const Tensor<T>& g = grads[i];
        if (g.shape() != w.shape() || state.m[i].shape() != w.shape())
            throw ShapeError("adamw_step: shape mismatch for parameter " + std::to_string(i));
        T* m = state.m[i].data();
        T* v = state.v[i].data();
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = g[j];
            m[j] = static_cast<T>(c.beta1 * m[j] + (1.0 - c.beta1) * gj);
            v[j] = static_cast<T>(c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj);
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            w[j] = static_cast<T>(w[j] * decay - lr * mhat / (std::sqrt(vhat) + c.eps));
        }
    }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
    if (step > total_steps) throw ContractError("cosine_lr: step beyond schedule");
    if (total_steps == 0) return lr0;
    if (step == total_steps) return 0.0;
    const double t = static_cast<double>(step) / static_cast<double>(total_steps);
    return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

template <typename T>
double clip_grad_norm(std::span<Tensor<T>> grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads)
        for (T x : g.values()) sq += static_cast<double>(x) * x;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
    if (norm > max_norm && norm > 0.0) {
        const T factor = static_cast<T>(max_norm / norm);
        for (auto& g : grads)
            for (auto& x : g.values()) x *= factor;
    }
    return norm;
}

namespace {

/// Trainable tensors of a model with their graph handles for one step.
struct StepParams {
    std::vector<Tensor<float>*> tensors;
    std::vector<Tensor<float>> grads;
};

StepParams collect(ToyModel& model, const ModelVars<float>& vars,
                   const std::function<bool(const std::string&)>& trainable) {
    StepParams p;
    std::vector<const Var<float>*> handles;
    vars.for_each([&](const std::string& name, const Var<float>& v) {
        if (trainable(name)) handles.push_back(&v);
    });
    model.for_each_parameter([&](const std::string& name, Tensor<float>& t) {
        if (trainable(name)) p.tensors.push_back(&t);
    });
    for (std::size_t i = 0; i < handles.size(); ++i) {
        if (handles[i]->has_grad())
            p.grads.push_back(handles[i]->grad());
        else
            p.grads.emplace_back(p.tensors[i]->shape());
    }
    return p;
}

void check_finite(double loss, std::string_view stage, std::size_t step) {
    if (!std::isfinite(loss))
        throw NumericError(std::string(stage) + ": non-finite loss at step " + std::to_string(step));
}

}  // namespace

TrainResult pretrain(const ToyModel& model, std::string_view train_text, const PretrainConfig& config,
                     const StepCallback& on_step) {
    if (config.seq > model.config.max_seq) throw ContractError("pretrain: seq exceeds max_seq");
    TrainResult result{model, {}};
    OptimizerState<float> state;
    state.config = config.adamw;
    CounterRng rng = CounterRng(config.seed).fork(0x70726574);
    const auto all = [](const std::string&) { return true; };
    for (std::size_t step = 0; step < config.steps; ++step) {
        double lr;
        if (step < config.warmup_steps)
            lr = config.lr * static_cast<double>(step + 1) / static_cast<double>(config.warmup_steps);
        else
            lr = cosine_lr(step - config.warmup_steps, config.steps - config.warmup_steps, config.lr);
        const auto windows = sample_windows(train_text, config.seq, config.batch, rng);
        const auto vars = bind_parameters<float>(result.model, all);
        const Var<float> loss = lm_loss(vars, result.model.config, std::span<const Window>(windows));
        const double value = loss.value().item();
        check_finite(value, "pretrain", step);
        backward(loss);
        auto params = collect(result.model, vars, all);
        clip_grad_norm(std::span<Tensor<float>>(params.grads), config.clip);
        adamw_step(std::span<Tensor<float>* const>(params.tensors),
                   std::span<const Tensor<float>>(params.grads), state, lr);
        LossPoint point{step, value, lr, std::nullopt};
        result.curve.push_back(point);
        if (on_step) on_step(point);
    }
    return result;
}

template <typename T>
Var<T> feature_kl(const Var<T>& teacher_h, const Var<T>& student_h, KlDirection direction) {
    if (teacher_h.shape() != student_h.shape()) throw ShapeError("feature_kl: shape mismatch");
    const Var<T> lt = log_softmax(teacher_h);
    const Var<T> ls = log_softmax(student_h);
    const Var<T> fwd = kl_divergence(lt, ls);
    if (direction == KlDirection::forward) return fwd;
    return scale(add(fwd, kl_divergence(ls, lt)), static_cast<T>(0.5));
}

template <typename T>
DistillLoss<T> distillation_loss(const BasicToyModel<T>& teacher, const ModelVars<T>& student,
                                 const ModelConfig& student_config, const TokenBatch& batch,
                                 const LayerMapping& mapping, KlDirection direction) {
    if (mapping.pairs.empty()) throw ContractError("distillation needs at least one layer pair");
    mapping.validate(teacher.layers.size(), student.layers.size());
    CaptureSpec tcap;
    tcap.logits = false;
    tcap.stop_after_layer = mapping.pairs.back().teacher;
    const auto [unused, ttrace] = forward(teacher, batch, tcap);
    CaptureSpec scap;
    scap.logits = false;
    scap.stop_after_layer = mapping.pairs.back().student;
    const auto sgraph = forward_graph(student, student_config, batch, scap);

    DistillLoss<T> out;
    const std::size_t rows = batch.batch * batch.seq;
    for (const auto& pair : mapping.pairs) {
        const Tensor<T>& th = ttrace.hidden.at(pair.teacher + 1);
        const Var<T> t = constant(th.reshaped({rows, th.dim(2)}));
        out.per_pair.push_back(feature_kl(t, sgraph.hidden.at(pair.student + 1), direction));
    }
    Var<T> total = out.per_pair[0];
    for (std::size_t i = 1; i < out.per_pair.size(); ++i) total = add(total, out.per_pair[i]);
    out.total = scale(total, static_cast<T>(1.0 / static_cast<double>(out.per_pair.size())));
    return out;
}

void DistillConfig::validate(std::size_t teacher_layers, std::size_t student_layers) const {
    if (mapping.pairs.empty()) throw ContractError("distillation mapping is empty");
    mapping.validate(teacher_layers, student_layers);
    if (mode == DistillMode::mp && pair_lrs.size() != mapping.pairs.size()) {
        throw ContractError("mp distillation needs " + std::to_string(mapping.pairs.size()) +
                            " learning rates, got " + std::to_string(pair_lrs.size()));
    }
    if (batch == 0 || seq == 0) throw ContractError("distillation batch and seq must be positive");
}

std::vector<double> mp_lr_ladder(std::size_t pairs) {
    static constexpr double kLadder[] = {5e-4, 2.5e-4, 1e-4, 7.5e-5, 5e-5, 2.5e-5, 1e-5};
    constexpr std::size_t n = std::size(kLadder);
    std::vector<double> lrs;
    if (pairs == 0) return lrs;
    if (pairs == 1) return {kLadder[0]};
    // Spread the ladder over the pairs, keeping both ends.
    for (std::size_t i = 0; i < pairs; ++i) {
        const std::size_t idx = (i * (n - 1) + (pairs - 1) / 2) / (pairs - 1);
        lrs.push_back(kLadder[std::min(idx, n - 1)]);
    }
    return lrs;
}

namespace {

double scheduled_lr(LrSchedule schedule, std::size_t step, std::size_t steps, double lr0) {
    return schedule == LrSchedule::cosine ? cosine_lr(step, steps, lr0) : lr0;
}

/// Trains the student layers named by `layers` on the loss over `pairs`.
void distill_loop(const ToyModel& teacher, ToyModel& student, std::string_view train_text,
                  const DistillConfig& config, const LayerMapping& pairs,
                  const std::set<std::size_t>& layers, double lr0, CounterRng rng,
                  std::optional<std::size_t> pair_index, std::vector<LossPoint>& curve,
                  const StepCallback& on_step) {
    const auto trainable = [&](const std::string& name) {
        if (name.rfind("layers.", 0) != 0) return false;
        const std::size_t layer = std::stoul(name.substr(7));
        return layers.contains(layer);
    };
    OptimizerState<float> state;
    state.config = config.adamw;
    for (std::size_t step = 0; step < config.steps; ++step) {
        const double lr = scheduled_lr(config.schedule, step, config.steps, lr0);
        const auto windows = sample_windows(train_text, config.seq, config.batch, rng);
        const TokenBatch batch = to_batch(windows);
        const auto vars = bind_parameters<float>(student, trainable);
        const auto loss = distillation_loss(teacher, vars, student.config, batch, pairs, config.kl);
        const double value = loss.total.value().item();
        check_finite(value, "distill", step);
        backward(loss.total);
        auto params = collect(student, vars, trainable);
        clip_grad_norm(std::span<Tensor<float>>(params.grads), config.clip);
        adamw_step(std::span<Tensor<float>* const>(params.tensors),
                   std::span<const Tensor<float>>(params.grads), state, lr);
        LossPoint point{step, value, lr, pair_index};
        curve.push_back(point);
        if (on_step) on_step(point);
    }
}

}  // namespace

TrainResult distill_mp(const ToyModel& teacher, const ToyModel& student, std::string_view train_text,
                       const DistillConfig& config, const StepCallback& on_step) {
    config.validate(teacher.layers.size(), student.layers.size());
    TrainResult result{student, {}};
    const CounterRng base(config.seed);
    for (std::size_t k = 0; k < config.mapping.pairs.size(); ++k) {
        const LayerPair pair = config.mapping.pairs[k];
        distill_loop(teacher, result.model, train_text, config, LayerMapping{{pair}}, {pair.student},
                     config.pair_lrs[k], base.fork(0x6d70 + k), k, result.curve, on_step);
    }
    return result;
}

TrainResult distill_sp(const ToyModel& teacher, const ToyModel& student, std::string_view train_text,
                       const DistillConfig& config, const StepCallback& on_step) {
    config.validate(teacher.layers.size(), student.layers.size());
    TrainResult result{student, {}};
    std::set<std::size_t> layers;
    for (const auto& p : config.mapping.pairs) layers.insert(p.student);
    distill_loop(teacher, result.model, train_text, config, config.mapping, layers, config.lr,
                 CounterRng(config.seed).fork(0x7370), std::nullopt, result.curve, on_step);
    return result;
}

TrainResult distill(const ToyModel& teacher, const ToyModel& student, std::string_view train_text,
                    const DistillConfig& config, const StepCallback& on_step) {
    return config.mode == DistillMode::mp ? distill_mp(teacher, student, train_text, config, on_step)
                                          : distill_sp(teacher, student, train_text, config, on_step);
}

nlohmann::ordered_json curve_to_json(std::span<const LossPoint> curve) {
    auto rows = nlohmann::ordered_json::array();
    for (const auto& p : curve) {
        nlohmann::ordered_json row;
        if (p.pair) row["pair"] = *p.pair;
        row["step"] = p.step;
        row["loss"] = p.loss;
        row["lr"] = p.lr;
        rows.push_back(std::move(row));
    }
    return rows;
}

#define COMEPRESS_INSTANTIATE(T)                                                                   \
    template void adamw_step<T>(std::span<Tensor<T>* const>, std::span<const Tensor<T>>,           \
                                OptimizerState<T>&, double);                                       \
    template double clip_grad_norm<T>(std::span<Tensor<T>>, double);                               \
    template Var<T> feature_kl<T>(const Var<T>&, const Var<T>&, KlDirection);                      \
    template DistillLoss<T> distillation_loss<T>(const BasicToyModel<T>&, const ModelVars<T>&,     \
                                                 const ModelConfig&, const TokenBatch&,            \
                                                 const LayerMapping&, KlDirection);

COMEPRESS_INSTANTIATE(float)
COMEPRESS_INSTANTIATE(double)
#undef COMEPRESS_INSTANTIATE

}  // namespace comepress
