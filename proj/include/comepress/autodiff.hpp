#pragma once

#include "comepress/tensor.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

namespace comepress {

/// One value in a reverse-mode graph. Nodes that require gradients keep their
/// parents alive; nodes built with gradients disabled are plain values.
template <typename T>
struct TapeNode {
    Tensor<T> value;
    Tensor<T> grad;  // empty until an adjoint reaches the node
    bool requires_grad = false;
    bool backward_consumed = false;
    std::string_view op = "leaf";
    std::vector<std::shared_ptr<TapeNode>> parents;
    std::function<void(TapeNode&)> backward_rule;

    /// Gradient buffer, zero-initialised on first use.
    Tensor<T>& grad_buffer() {
        if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
        if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

/// Handle to a graph node. Cheap to copy.
template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<TapeNode<T>> node) : node_(std::move(node)) {}

    const Tensor<T>& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool has_grad() const { return node_ && !node_->grad.empty(); }
    const Tensor<T>& grad() const;
    TapeNode<T>* node() const { return node_.get(); }
    const std::shared_ptr<TapeNode<T>>& shared() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<TapeNode<T>> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

template <typename T>
Var<T> parameter(Tensor<T> value);
template <typename T>
Var<T> constant(Tensor<T> value);

/// Runs reverse accumulation from a scalar root and returns the reached leaves
/// that require gradients. Calling it twice on the same root without
/// zero_grad() in between throws ContractError.
template <typename T>
std::vector<Var<T>> backward(const Var<T>& root);

/// Clears gradients on every node reachable from root and re-arms backward().
template <typename T>
void zero_grad(const Var<T>& root);

// Elementwise (identical shapes only).
template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> scale(const Var<T>& a, T factor);
template <typename T>
Var<T> silu(const Var<T>& a);

// Linear algebra.
template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);
/// x[..., in] times weight[out, in] transposed: y[..., out] = x W^T.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight);
template <typename T>
Var<T> transpose(const Var<T>& a);

// Shape manipulation.
template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape);
template <typename T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis);

// Reductions to a scalar.
template <typename T>
Var<T> sum(const Var<T>& a);
template <typename T>
Var<T> mean(const Var<T>& a);
template <typename T>
Var<T> l1_norm(const Var<T>& a);
template <typename T>
Var<T> l2_norm(const Var<T>& a);

// Normalisation and distributions.
template <typename T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& gamma, T eps);
template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis);
/// Log-softmax along the last axis.
template <typename T>
Var<T> log_softmax(const Var<T>& x);
/// Mean over rows of sum_i exp(log_p_i) (log_p_i - log_q_i); inputs are
/// log-distributions along the last axis.
template <typename T>
Var<T> kl_divergence(const Var<T>& log_p, const Var<T>& log_q);
/// Mean next-token cross-entropy of logits[N, V] against targets[N].
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> targets);

// Transformer building blocks.
template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids);

/// Rotary position embedding on x[batch*seq, n_heads*d_head] (rotate-half
/// pairing within each head). position_offset shifts every position.
template <typename T>
Var<T> rope(const Var<T>& x, std::size_t seq, std::size_t n_heads, std::size_t d_head, T base,
            std::size_t position_offset = 0);

/// Causal scaled dot-product attention over [batch*seq, n_heads*d_head]
/// inputs. Returns the per-head context vectors, laid out like the inputs.
template <typename T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t seq,
                        std::size_t n_heads, std::size_t d_head);

}  // namespace comepress
