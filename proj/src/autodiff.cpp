#include "comepress/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace comepress {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
Var<T> make_result(std::string_view op, Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(TapeNode<T>&)> rule) {
    auto node = std::make_shared<TapeNode<T>>();
    node->value = std::move(value);
    node->op = op;
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        node->parents.reserve(inputs.size());
        for (const auto& in : inputs) node->parents.push_back(in.shared());
        node->backward_rule = std::move(rule);
    }
    return Var<T>(std::move(node));
}

template <typename T>
bool wants(const TapeNode<T>& self, std::size_t i) {
    return self.parents[i]->requires_grad;
}

template <typename T>
Tensor<T>& parent_grad(TapeNode<T>& self, std::size_t i) {
    return self.parents[i]->grad_buffer();
}

void require_same_shape(const Shape& a, const Shape& b, std::string_view op) {
    if (a != b) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a) + " vs " +
                         shape_to_string(b));
    }
}

struct AxisSplit {
    std::size_t outer;
    std::size_t extent;
    std::size_t inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
    if (axis >= shape.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_to_string(shape));
    }
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

template <typename T>
T sigmoid(T x) {
    return T{1} / (T{1} + std::exp(-x));
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

template <typename T>
const Tensor<T>& Var<T>::grad() const {
    if (!has_grad()) throw ContractError("variable has no accumulated gradient");
    return node_->grad;
}

template <typename T>
Var<T> parameter(Tensor<T> value) {
    auto node = std::make_shared<TapeNode<T>>();
    node->value = std::move(value);
    node->requires_grad = true;
    node->op = "parameter";
    return Var<T>(std::move(node));
}

template <typename T>
Var<T> constant(Tensor<T> value) {
    auto node = std::make_shared<TapeNode<T>>();
    node->value = std::move(value);
    node->op = "constant";
    return Var<T>(std::move(node));
}

namespace {

template <typename T>
std::vector<TapeNode<T>*> topological_order(TapeNode<T>* root) {
    std::vector<TapeNode<T>*> order;
    std::unordered_set<TapeNode<T>*> seen;
    std::vector<std::pair<TapeNode<T>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TapeNode<T>* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;  // parents before children
}

}  // namespace

template <typename T>
std::vector<Var<T>> backward(const Var<T>& root) {
    if (!root) throw ContractError("backward on an empty variable");
    if (root.value().size() != 1) {
        throw ContractError("backward requires a scalar root, got shape " +
                            shape_to_string(root.shape()));
    }
    TapeNode<T>* r = root.node();
    if (r->backward_consumed) {
        throw ContractError("backward already ran on this root; call zero_grad() first");
    }
    r->backward_consumed = true;
    if (!r->requires_grad) return {};

    auto order = topological_order(r);
    r->grad_buffer().fill(T{1});
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TapeNode<T>* node = *it;
        if (node->backward_rule && !node->grad.empty()) node->backward_rule(*node);
    }
    // Leaves are nodes without parents; collect them via the shared handles.
    std::vector<Var<T>> leaves;
    std::unordered_set<TapeNode<T>*> emitted;
    for (TapeNode<T>* node : order) {
        for (const auto& p : node->parents) {
            if (p->requires_grad && p->parents.empty() && emitted.insert(p.get()).second) {
                leaves.emplace_back(p);
            }
        }
    }
    if (r->parents.empty()) leaves.push_back(root);
    return leaves;
}

template <typename T>
void zero_grad(const Var<T>& root) {
    if (!root) return;
    TapeNode<T>* r = root.node();
    r->backward_consumed = false;
    r->grad = Tensor<T>();
    if (!r->requires_grad) return;
    for (TapeNode<T>* node : topological_order(r)) node->grad = Tensor<T>();
}

// ---- elementwise -------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return make_result<T>("add", std::move(out), {a, b}, [](TapeNode<T>& self) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (!wants(self, p)) continue;
            auto& g = parent_grad(self, p);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "sub");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
    return make_result<T>("sub", std::move(out), {a, b}, [](TapeNode<T>& self) {
        if (wants(self, 0)) {
            auto& g = parent_grad(self, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (wants(self, 1)) {
            auto& g = parent_grad(self, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "mul");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_result<T>("mul", std::move(out), {a, b}, [](TapeNode<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (wants(self, 0)) {
            auto& g = parent_grad(self, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (wants(self, 1)) {
            auto& g = parent_grad(self, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v *= factor;
    return make_result<T>("scale", std::move(out), {a}, [factor](TapeNode<T>& self) {
        auto& g = parent_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    Tensor<T> out = a.value();
    for (auto& v : out.values()) v = v * sigmoid(v);
    return make_result<T>("silu", std::move(out), {a}, [](TapeNode<T>& self) {
        const auto& x = self.parents[0]->value;
        auto& g = parent_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T s = sigmoid(x[i]);
            g[i] += self.grad[i] * s * (T{1} + x[i] * (T{1} - s));
        }
    });
}

// ---- linear algebra ----------------------------------------------------------

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    Tensor<T> out = comepress::matmul(a.value(), b.value());
    return make_result<T>("matmul", std::move(out), {a, b}, [](TapeNode<T>& self) {
        const auto& av = self.parents[0]->value;
        const auto& bv = self.parents[1]->value;
        if (wants(self, 0)) gemm(self.grad, false, bv, true, parent_grad(self, 0), true);
        if (wants(self, 1)) gemm(av, true, self.grad, false, parent_grad(self, 1), true);
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight) {
    if (weight.value().rank() != 2 || x.value().rank() < 1 ||
        x.value().cols() != weight.value().dim(1)) {
        throw ShapeError("linear: input " + shape_to_string(x.shape()) +
                         " incompatible with weight " + shape_to_string(weight.shape()));
    }
    Shape out_shape = x.shape();
    out_shape.back() = weight.value().dim(0);
    Tensor<T> out(out_shape);
    gemm(x.value(), false, weight.value(), true, out, false);
    return make_result<T>("linear", std::move(out), {x, weight}, [](TapeNode<T>& self) {
        const auto& xv = self.parents[0]->value;
        const auto& wv = self.parents[1]->value;
        if (wants(self, 0)) gemm(self.grad, false, wv, false, parent_grad(self, 0), true);
        if (wants(self, 1)) gemm(self.grad, true, xv, false, parent_grad(self, 1), true);
    });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    Tensor<T> out = transpose2d(a.value());
    return make_result<T>("transpose", std::move(out), {a}, [](TapeNode<T>& self) {
        auto gt = transpose2d(self.grad);
        auto& g = parent_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += gt[i];
    });
}

// ---- shape manipulation ------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    Tensor<T> out = a.value().reshaped(std::move(shape));
    return make_result<T>("reshape", std::move(out), {a}, [](TapeNode<T>& self) {
        auto& g = parent_grad(self, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

template <typename T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
    const AxisSplit s = split_axis(a.shape(), axis);
    if (begin > end || end > s.extent) {
        throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for axis of extent " + std::to_string(s.extent));
    }
    Shape out_shape = a.shape();
    out_shape[axis] = end - begin;
    Tensor<T> out(out_shape);
    const std::size_t width = (end - begin) * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
        const T* src = a.value().data() + (o * s.extent + begin) * s.inner;
        std::copy(src, src + width, out.data() + o * width);
    }
    return make_result<T>("slice", std::move(out), {a}, [s, begin, width](TapeNode<T>& self) {
        auto& g = parent_grad(self, 0);
        for (std::size_t o = 0; o < s.outer; ++o) {
            T* dst = g.data() + (o * s.extent + begin) * s.inner;
            const T* src = self.grad.data() + o * width;
            for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
        }
    });
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const Shape& ref = parts[0].shape();
    std::vector<std::size_t> extents;
    std::size_t total = 0;
    for (const auto& p : parts) {
        const Shape& sh = p.shape();
        if (sh.size() != ref.size() || axis >= sh.size()) {
            throw ShapeError("concat: rank mismatch or axis out of range");
        }
        for (std::size_t i = 0; i < sh.size(); ++i) {
            if (i != axis && sh[i] != ref[i]) {
                throw ShapeError("concat: shapes " + shape_to_string(ref) + " and " +
                                 shape_to_string(sh) + " differ off-axis");
            }
        }
        extents.push_back(sh[axis]);
        total += sh[axis];
    }
    Shape out_shape = ref;
    out_shape[axis] = total;
    const AxisSplit s = split_axis(out_shape, axis);
    Tensor<T> out(out_shape);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const std::size_t width = extents[k] * s.inner;
        for (std::size_t o = 0; o < s.outer; ++o) {
            const T* src = parts[k].value().data() + o * width;
            std::copy(src, src + width, out.data() + (o * s.extent + offset) * s.inner);
        }
        offset += extents[k];
    }
    std::vector<Var<T>> inputs(parts.begin(), parts.end());
    return make_result<T>("concat", std::move(out), std::move(inputs),
                          [s, extents](TapeNode<T>& self) {
                              std::size_t offset = 0;
                              for (std::size_t k = 0; k < extents.size(); ++k) {
                                  const std::size_t width = extents[k] * s.inner;
                                  if (wants(self, k)) {
                                      auto& g = parent_grad(self, k);
                                      for (std::size_t o = 0; o < s.outer; ++o) {
                                          const T* src = self.grad.data() +
                                                         (o * s.extent + offset) * s.inner;
                                          T* dst = g.data() + o * width;
                                          for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
                                      }
                                  }
                                  offset += extents[k];
                              }
                          });
}

// ---- reductions --------------------------------------------------------------

template <typename T>
Var<T> sum(const Var<T>& a) {
    T total{0};
    for (T v : a.value().values()) total += v;
    return make_result<T>("sum", Tensor<T>::scalar(total), {a}, [](TapeNode<T>& self) {
        auto& g = parent_grad(self, 0);
        const T up = self.grad[0];
        for (auto& v : g.values()) v += up;
    });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    if (a.value().empty()) throw ContractError("mean of an empty tensor");
    const T n = static_cast<T>(a.value().size());
    return scale(sum(a), T{1} / n);
}

template <typename T>
Var<T> l1_norm(const Var<T>& a) {
    T total{0};
    for (T v : a.value().values()) total += std::abs(v);
    return make_result<T>("l1_norm", Tensor<T>::scalar(total), {a}, [](TapeNode<T>& self) {
        const auto& x = self.parents[0]->value;
        auto& g = parent_grad(self, 0);
        const T up = self.grad[0];
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += up * static_cast<T>((x[i] > T{0}) - (x[i] < T{0}));
        }
    });
}

template <typename T>
Var<T> l2_norm(const Var<T>& a) {
    T sq{0};
    for (T v : a.value().values()) sq += v * v;
    const T norm = std::sqrt(sq);
    return make_result<T>("l2_norm", Tensor<T>::scalar(norm), {a}, [norm](TapeNode<T>& self) {
        if (norm == T{0}) return;
        const auto& x = self.parents[0]->value;
        auto& g = parent_grad(self, 0);
        const T up = self.grad[0] / norm;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * x[i];
    });
}

// ---- normalisation and distributions -----------------------------------------

template <typename T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& gamma, T eps) {
    if (!(eps > T{0})) throw ContractError("rms_norm requires eps > 0");
    const std::size_t d = x.value().cols();
    if (gamma.value().rank() != 1 || gamma.value().size() != d) {
        throw ShapeError("rms_norm: gamma " + shape_to_string(gamma.shape()) +
                         " does not match last axis of " + shape_to_string(x.shape()));
    }
    const std::size_t rows = x.value().rows();
    Tensor<T> out(x.shape());
    std::vector<T> inv(rows);
    const T* xv = x.value().data();
    const T* gv = gamma.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        T ms{0};
        for (std::size_t j = 0; j < d; ++j) ms += xv[r * d + j] * xv[r * d + j];
        inv[r] = T{1} / std::sqrt(ms / static_cast<T>(d) + eps);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] * inv[r] * gv[j];
    }
    return make_result<T>(
        "rms_norm", std::move(out), {x, gamma}, [inv = std::move(inv), rows, d](TapeNode<T>& self) {
            const auto& xv = self.parents[0]->value;
            const auto& gv = self.parents[1]->value;
            const auto& up = self.grad;
            if (wants(self, 1)) {
                auto& gg = parent_grad(self, 1);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j)
                        gg[j] += up[r * d + j] * xv[r * d + j] * inv[r];
            }
            if (wants(self, 0)) {
                auto& gx = parent_grad(self, 0);
                for (std::size_t r = 0; r < rows; ++r) {
                    T dot{0};
                    for (std::size_t j = 0; j < d; ++j)
                        dot += up[r * d + j] * gv[j] * xv[r * d + j];
                    const T c = inv[r] * inv[r] * inv[r] * dot / static_cast<T>(d);
                    for (std::size_t j = 0; j < d; ++j)
                        gx[r * d + j] += inv[r] * up[r * d + j] * gv[j] - c * xv[r * d + j];
                }
            }
        });
}

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
    const AxisSplit s = split_axis(x.shape(), axis);
    Tensor<T> out(x.shape());
    const T* xv = x.value().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.extent * s.inner + in;
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t k = 0; k < s.extent; ++k) mx = std::max(mx, xv[base + k * s.inner]);
            T z{0};
            for (std::size_t k = 0; k < s.extent; ++k) {
                const T e = std::exp(xv[base + k * s.inner] - mx);
                out[base + k * s.inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < s.extent; ++k) out[base + k * s.inner] /= z;
        }
    }
    return make_result<T>("softmax", std::move(out), {x}, [s](TapeNode<T>& self) {
        const auto& y = self.value;
        const auto& up = self.grad;
        auto& g = parent_grad(self, 0);
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t in = 0; in < s.inner; ++in) {
                const std::size_t base = o * s.extent * s.inner + in;
                T dot{0};
                for (std::size_t k = 0; k < s.extent; ++k)
                    dot += up[base + k * s.inner] * y[base + k * s.inner];
                for (std::size_t k = 0; k < s.extent; ++k) {
                    const std::size_t i = base + k * s.inner;
                    g[i] += y[i] * (up[i] - dot);
                }
            }
        }
    });
}

template <typename T>
Var<T> log_softmax(const Var<T>& x) {
    const std::size_t d = x.value().cols();
    const std::size_t rows = x.value().rows();
    Tensor<T> out(x.shape());
    const T* xv = x.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv + r * d;
        const T mx = *std::max_element(row, row + d);
        T z{0};
        for (std::size_t j = 0; j < d; ++j) z += std::exp(row[j] - mx);
        const T lse = mx + std::log(z);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = row[j] - lse;
    }
    return make_result<T>("log_softmax", std::move(out), {x}, [rows, d](TapeNode<T>& self) {
        const auto& y = self.value;
        const auto& up = self.grad;
        auto& g = parent_grad(self, 0);
        for (std::size_t r = 0; r < rows; ++r) {
            T total{0};
            for (std::size_t j = 0; j < d; ++j) total += up[r * d + j];
            for (std::size_t j = 0; j < d; ++j)
                g[r * d + j] += up[r * d + j] - std::exp(y[r * d + j]) * total;
        }
    });
}

template <typename T>
Var<T> kl_divergence(const Var<T>& log_p, const Var<T>& log_q) {
    require_same_shape(log_p.shape(), log_q.shape(), "kl_divergence");
    const std::size_t d = log_p.value().cols();
    const std::size_t rows = log_p.value().rows();
    if (rows == 0) throw ContractError("kl_divergence of empty inputs");
    const T* lp = log_p.value().data();
    const T* lq = log_q.value().data();
    T total{0};
    for (std::size_t r = 0; r < rows; ++r) {
        T row{0};
        for (std::size_t j = 0; j < d; ++j) {
            const std::size_t i = r * d + j;
            row += std::exp(lp[i]) * (lp[i] - lq[i]);
        }
        total += row;
    }
    const T inv_rows = T{1} / static_cast<T>(rows);
    return make_result<T>(
        "kl_divergence", Tensor<T>::scalar(total * inv_rows), {log_p, log_q},
        [inv_rows](TapeNode<T>& self) {
            const auto& lpv = self.parents[0]->value;
            const auto& lqv = self.parents[1]->value;
            const T up = self.grad[0] * inv_rows;
            if (wants(self, 0)) {
                auto& g = parent_grad(self, 0);
                for (std::size_t i = 0; i < g.size(); ++i)
                    g[i] += up * std::exp(lpv[i]) * (lpv[i] - lqv[i] + T{1});
            }
            if (wants(self, 1)) {
                auto& g = parent_grad(self, 1);
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= up * std::exp(lpv[i]);
            }
        });
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits, std::span<const std::int32_t> targets) {
    const std::size_t v = logits.value().cols();
    const std::size_t rows = logits.value().rows();
    if (targets.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
    }
    if (rows == 0) throw ContractError("cross_entropy on an empty batch");
    std::vector<std::int32_t> tgt(targets.begin(), targets.end());
    for (auto t : tgt) {
        if (t < 0 || static_cast<std::size_t>(t) >= v) {
            throw InputError("cross_entropy: target " + std::to_string(t) + " outside vocabulary");
        }
    }
    Tensor<T> probs(logits.shape());
    const T* lv = logits.value().data();
    T total{0};
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = lv + r * v;
        const T mx = *std::max_element(row, row + v);
        T z{0};
        for (std::size_t j = 0; j < v; ++j) {
            const T e = std::exp(row[j] - mx);
            probs[r * v + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= z;
        total += mx + std::log(z) - row[tgt[r]];
    }
    const T inv_rows = T{1} / static_cast<T>(rows);
    return make_result<T>("cross_entropy", Tensor<T>::scalar(total * inv_rows), {logits},
                          [probs = std::move(probs), tgt = std::move(tgt), inv_rows, v](
                              TapeNode<T>& self) {
                              auto& g = parent_grad(self, 0);
                              const T up = self.grad[0] * inv_rows;
                              for (std::size_t i = 0; i < g.size(); ++i) g[i] += up * probs[i];
                              for (std::size_t r = 0; r < tgt.size(); ++r)
                                  g[r * v + static_cast<std::size_t>(tgt[r])] -= up;
                          });
}

// ---- transformer blocks ------------------------------------------------------

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::int32_t> ids) {
    if (table.value().rank() != 2) throw ShapeError("embedding table must be rank 2");
    const std::size_t vocab = table.value().dim(0);
    const std::size_t d = table.value().dim(1);
    std::vector<std::int32_t> idx(ids.begin(), ids.end());
    Tensor<T> out(Shape{idx.size(), d});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= vocab) {
            throw InputError("token id " + std::to_string(idx[r]) + " outside vocabulary of " +
                             std::to_string(vocab));
        }
        const T* src = table.value().data() + static_cast<std::size_t>(idx[r]) * d;
        std::copy(src, src + d, out.data() + r * d);
    }
    return make_result<T>("embedding", std::move(out), {table},
                          [idx = std::move(idx), d](TapeNode<T>& self) {
                              auto& g = parent_grad(self, 0);
                              for (std::size_t r = 0; r < idx.size(); ++r) {
                                  T* dst = g.data() + static_cast<std::size_t>(idx[r]) * d;
                                  const T* src = self.grad.data() + r * d;
                                  for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                              }
                          });
}

template <typename T>
Var<T> rope(const Var<T>& x, std::size_t seq, std::size_t n_heads, std::size_t d_head, T base,
            std::size_t position_offset) {
    const std::size_t width = n_heads * d_head;
    if (x.value().cols() != width || seq == 0 || x.value().rows() % seq != 0) {
        throw ShapeError("rope: input " + shape_to_string(x.shape()) + " incompatible with seq " +
                         std::to_string(seq) + " and " + std::to_string(n_heads) + "x" +
                         std::to_string(d_head) + " heads");
    }
    if (d_head % 2 != 0) throw ShapeError("rope requires an even head dimension");
    const std::size_t half = d_head / 2;
    std::vector<T> cos_table(seq * half), sin_table(seq * half);
    for (std::size_t s = 0; s < seq; ++s) {
        const double pos = static_cast<double>(s + position_offset);
        for (std::size_t i = 0; i < half; ++i) {
            const double freq = std::pow(static_cast<double>(base),
                                         -2.0 * static_cast<double>(i) / static_cast<double>(d_head));
            cos_table[s * half + i] = static_cast<T>(std::cos(pos * freq));
            sin_table[s * half + i] = static_cast<T>(std::sin(pos * freq));
        }
    }
    const std::size_t rows = x.value().rows();
    Tensor<T> out(x.shape());
    const T* xv = x.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t s = r % seq;
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t o = r * width + h * d_head;
            for (std::size_t i = 0; i < half; ++i) {
                const T c = cos_table[s * half + i], sn = sin_table[s * half + i];
                const T x1 = xv[o + i], x2 = xv[o + i + half];
                out[o + i] = x1 * c - x2 * sn;
                out[o + i + half] = x1 * sn + x2 * c;
            }
        }
    }
    return make_result<T>(
        "rope", std::move(out), {x},
        [cos_table = std::move(cos_table), sin_table = std::move(sin_table), rows, seq, n_heads,
         d_head, half, width](TapeNode<T>& self) {
            auto& g = parent_grad(self, 0);
            const auto& up = self.grad;
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t s = r % seq;
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const std::size_t o = r * width + h * d_head;
                    for (std::size_t i = 0; i < half; ++i) {
                        const T c = cos_table[s * half + i], sn = sin_table[s * half + i];
                        const T g1 = up[o + i], g2 = up[o + i + half];
                        g[o + i] += g1 * c + g2 * sn;
                        g[o + i + half] += -g1 * sn + g2 * c;
                    }
                }
            }
        });
}

template <typename T>
Var<T> causal_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t seq,
                        std::size_t n_heads, std::size_t d_head) {
    const std::size_t width = n_heads * d_head;
    require_same_shape(q.shape(), k.shape(), "causal_attention");
    require_same_shape(q.shape(), v.shape(), "causal_attention");
    if (q.value().cols() != width || seq == 0 || q.value().rows() % seq != 0) {
        throw ShapeError("causal_attention: input " + shape_to_string(q.shape()) +
                         " incompatible with seq " + std::to_string(seq));
    }
    const std::size_t batch = q.value().rows() / seq;
    const T scale_factor = T{1} / std::sqrt(static_cast<T>(d_head));
    Tensor<T> probs(Shape{batch, n_heads, seq, seq});
    Tensor<T> out(q.shape());
    auto view_const = [&](const Tensor<T>& t, std::size_t b, std::size_t h) {
        return MatrixView<const T>{t.data() + b * seq * width + h * d_head, seq, d_head, width};
    };
    auto view_mut = [&](Tensor<T>& t, std::size_t b, std::size_t h) {
        return MatrixView<T>{t.data() + b * seq * width + h * d_head, seq, d_head, width};
    };
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            T* p = probs.data() + (b * n_heads + h) * seq * seq;
            MatrixView<T> pv{p, seq, seq, seq};
            gemm_view<T>(view_const(q.value(), b, h), false, view_const(k.value(), b, h), true, pv,
                         scale_factor, false);
            for (std::size_t i = 0; i < seq; ++i) {
                T* row = p + i * seq;
                const T mx = *std::max_element(row, row + i + 1);
                T z{0};
                for (std::size_t j = 0; j <= i; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    z += row[j];
                }
                for (std::size_t j = 0; j <= i; ++j) row[j] /= z;
                for (std::size_t j = i + 1; j < seq; ++j) row[j] = T{0};
            }
            gemm_view<T>(MatrixView<const T>{p, seq, seq, seq}, false, view_const(v.value(), b, h),
                         false, view_mut(out, b, h), T{1}, false);
        }
    }
    return make_result<T>(
        "causal_attention", std::move(out), {q, k, v},
        [probs = std::move(probs), batch, seq, n_heads, d_head, width,
         scale_factor](TapeNode<T>& self) {
            const auto& qv = self.parents[0]->value;
            const auto& kv = self.parents[1]->value;
            const auto& vv = self.parents[2]->value;
            const bool need_q = wants(self, 0), need_k = wants(self, 1), need_v = wants(self, 2);
            Tensor<T>* gq = need_q ? &parent_grad(self, 0) : nullptr;
            Tensor<T>* gk = need_k ? &parent_grad(self, 1) : nullptr;
            Tensor<T>* gv = need_v ? &parent_grad(self, 2) : nullptr;
            std::vector<T> dp(seq * seq);
            auto cview = [&](const Tensor<T>& t, std::size_t b, std::size_t h) {
                return MatrixView<const T>{t.data() + b * seq * width + h * d_head, seq, d_head,
                                           width};
            };
            auto mview = [&](Tensor<T>& t, std::size_t b, std::size_t h) {
                return MatrixView<T>{t.data() + b * seq * width + h * d_head, seq, d_head, width};
            };
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t h = 0; h < n_heads; ++h) {
                    const T* p = probs.data() + (b * n_heads + h) * seq * seq;
                    MatrixView<const T> pv{p, seq, seq, seq};
                    auto up = cview(self.grad, b, h);
                    if (need_v) gemm_view<T>(pv, true, up, false, mview(*gv, b, h), T{1}, true);
                    if (!need_q && !need_k) continue;
                    MatrixView<T> dpv{dp.data(), seq, seq, seq};
                    gemm_view<T>(up, false, cview(vv, b, h), true, dpv, T{1}, false);
                    for (std::size_t i = 0; i < seq; ++i) {
                        T dot{0};
                        for (std::size_t j = 0; j <= i; ++j) dot += dp[i * seq + j] * p[i * seq + j];
                        for (std::size_t j = 0; j <= i; ++j)
                            dp[i * seq + j] = p[i * seq + j] * (dp[i * seq + j] - dot);
                        for (std::size_t j = i + 1; j < seq; ++j) dp[i * seq + j] = T{0};
                    }
                    MatrixView<const T> ds{dp.data(), seq, seq, seq};
                    if (need_q)
                        gemm_view<T>(ds, false, cview(kv, b, h), false, mview(*gq, b, h),
                                     scale_factor, true);
                    if (need_k)
                        gemm_view<T>(ds, true, cview(qv, b, h), false, mview(*gk, b, h),
                                     scale_factor, true);
                }
            }
        });
}

#define COMEPRESS_INSTANTIATE(T)                                                                  \
    template class Var<T>;                                                                        \
    template Var<T> parameter<T>(Tensor<T>);                                                      \
    template Var<T> constant<T>(Tensor<T>);                                                       \
    template std::vector<Var<T>> backward<T>(const Var<T>&);                                      \
    template void zero_grad<T>(const Var<T>&);                                                    \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                         \
    template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                         \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                         \
    template Var<T> scale<T>(const Var<T>&, T);                                                   \
    template Var<T> silu<T>(const Var<T>&);                                                       \
    template Var<T> matmul<T>(const Var<T>&, const Var<T>&);                                      \
    template Var<T> linear<T>(const Var<T>&, const Var<T>&);                                      \
    template Var<T> transpose<T>(const Var<T>&);                                                  \
    template Var<T> reshape<T>(const Var<T>&, Shape);                                             \
    template Var<T> slice<T>(const Var<T>&, std::size_t, std::size_t, std::size_t);               \
    template Var<T> concat<T>(std::span<const Var<T>>, std::size_t);                              \
    template Var<T> sum<T>(const Var<T>&);                                                        \
    template Var<T> mean<T>(const Var<T>&);                                                       \
    template Var<T> l1_norm<T>(const Var<T>&);                                                    \
    template Var<T> l2_norm<T>(const Var<T>&);                                                    \
    template Var<T> rms_norm<T>(const Var<T>&, const Var<T>&, T);                                 \
    template Var<T> softmax<T>(const Var<T>&, std::size_t);                                       \
    template Var<T> log_softmax<T>(const Var<T>&);                                                \
    template Var<T> kl_divergence<T>(const Var<T>&, const Var<T>&);                               \
    template Var<T> cross_entropy<T>(const Var<T>&, std::span<const std::int32_t>);               \
    template Var<T> embedding<T>(const Var<T>&, std::span<const std::int32_t>);                   \
    template Var<T> rope<T>(const Var<T>&, std::size_t, std::size_t, std::size_t, T, std::size_t); \
    template Var<T> causal_attention<T>(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t,  \
                                        std::size_t, std::size_t);

COMEPRESS_INSTANTIATE(float)
COMEPRESS_INSTANTIATE(double)
#undef COMEPRESS_INSTANTIATE

}  // namespace comepress
