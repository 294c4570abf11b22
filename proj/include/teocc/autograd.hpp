#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "teocc/grid.hpp"
#include "teocc/tensor.hpp"

namespace teocc {
namespace ag {

/// Node of the reverse-mode tape. Ops allocate nodes on the heap and wire
/// parents + a pull-style backward closure; holding the loss node keeps the
/// whole graph alive.
template <typename T>
struct Var {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool is_param = false;
    bool grad_ready = false;  // engine bookkeeping: grad allocated+zeroed this pass
    std::vector<std::shared_ptr<Var<T>>> parents;
    std::function<void(Var<T>&)> backward_op;
};

template <typename T>
using VarPtr = std::shared_ptr<Var<T>>;

template <typename T>
VarPtr<T> make_var(Tensor<T> value, bool requires_grad = false) {
    auto v = std::make_shared<Var<T>>();
    v->value = std::move(value);
    v->requires_grad = requires_grad;
    return v;
}

template <typename T>
VarPtr<T> make_param(Tensor<T> value) {
    auto v = make_var(std::move(value), true);
    v->is_param = true;
    return v;
}

template <typename T>
bool any_requires_grad(const std::vector<VarPtr<T>>& vs) {
    for (const auto& v : vs)
        if (v && v->requires_grad) return true;
    return false;
}

/// Tape recording switch. Inference paths disable it so no graph is retained.
inline bool& grad_enabled_ref() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled_ref()) { grad_enabled_ref() = false; }
    ~NoGradGuard() { grad_enabled_ref() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

/// Wires an op node: output requires grad iff any parent does; the backward
/// closure is only attached in that case, so inference graphs carry no tape.
template <typename T>
VarPtr<T> make_op(Tensor<T> value, std::vector<VarPtr<T>> parents,
                  std::function<void(Var<T>&)> backward_op) {
    auto v = make_var(std::move(value), grad_enabled_ref() && any_requires_grad(parents));
    if (v->requires_grad) {
        v->parents = std::move(parents);
        v->backward_op = std::move(backward_op);
    }
    return v;
}

template <typename T>
void ensure_grad(Var<T>& v) {
    if (!v.grad.same_shape(v.value)) {
        v.grad = Tensor<T>(v.value.shape());
    } else if (!v.grad_ready) {
        v.grad.fill(T(0));
    }
    v.grad_ready = true;
}

/// Accumulate `g` into the grad of `v` if it participates in the tape.
template <typename T>
T* grad_sink(const VarPtr<T>& v) {
    if (!v->requires_grad) return nullptr;
    ensure_grad(*v);
    return v->grad.data();
}

namespace detail {

template <typename T>
void topo_sort(Var<T>* root, std::vector<Var<T>*>& order) {
    // Iterative post-order DFS over parents.
    std::unordered_set<Var<T>*> visited;
    std::vector<std::pair<Var<T>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Var<T>* p = node->parents[next].get();
            ++next;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace detail

/// Reverse pass from a scalar root. Param grads accumulate across calls;
/// intermediate grads are reset per call so shared subgraphs can be walked
/// once per branch loss.
template <typename T>
void backward(const VarPtr<T>& root) {
    if (root->value.numel() != 1)
        throw std::invalid_argument("backward: root must be a scalar");
    if (!root->requires_grad) return;
    std::vector<Var<T>*> order;
    detail::topo_sort(root.get(), order);
    for (Var<T>* v : order)
        if (!v->is_param) v->grad_ready = false;
    ensure_grad(*root);
    root->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Var<T>* v = *it;
        if (v->backward_op && v->grad_ready) v->backward_op(*v);
    }
}

// ---------------------------------------------------------------------------
// Elementwise / structural ops
// ---------------------------------------------------------------------------

template <typename T>
VarPtr<T> add(const VarPtr<T>& a, const VarPtr<T>& b) {
    if (!a->value.same_shape(b->value))
        throw std::invalid_argument("add: shape mismatch " + shape_str(a->value.shape()) + " vs " +
                                    shape_str(b->value.shape()));
    Tensor<T> out(a->value.shape());
    const std::int64_t n = out.numel();
    for (std::int64_t i = 0; i < n; ++i) out[i] = a->value[i] + b->value[i];
    return make_op<T>(std::move(out), {a, b}, [a, b](Var<T>& self) {
        const std::int64_t n = self.grad.numel();
        if (T* ga = grad_sink(a))
            for (std::int64_t i = 0; i < n; ++i) ga[i] += self.grad[i];
        if (T* gb = grad_sink(b))
            for (std::int64_t i = 0; i < n; ++i) gb[i] += self.grad[i];
    });
}

template <typename T>
VarPtr<T> add_n(const std::vector<VarPtr<T>>& xs) {
    if (xs.empty()) throw std::invalid_argument("add_n: empty input list");
    Tensor<T> out(xs[0]->value.shape());
    for (const auto& x : xs) {
        if (!x->value.same_shape(out))
            throw std::invalid_argument("add_n: shape mismatch");
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += x->value[i];
    }
    return make_op<T>(std::move(out), xs, [xs](Var<T>& self) {
        const std::int64_t n = self.grad.numel();
        for (const auto& x : xs)
            if (T* gx = grad_sink(x))
                for (std::int64_t i = 0; i < n; ++i) gx[i] += self.grad[i];
    });
}

template <typename T>
VarPtr<T> scale(const VarPtr<T>& x, double s) {
    Tensor<T> out(x->value.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = static_cast<T>(s) * x->value[i];
    return make_op<T>(std::move(out), {x}, [x, s](Var<T>& self) {
        if (T* gx = grad_sink(x))
            for (std::int64_t i = 0; i < self.grad.numel(); ++i)
                gx[i] += static_cast<T>(s) * self.grad[i];
    });
}

template <typename T>
VarPtr<T> relu(const VarPtr<T>& x) {
    Tensor<T> out(x->value.shape());
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = x->value[i] > T(0) ? x->value[i] : T(0);
    return make_op<T>(std::move(out), {x}, [x](Var<T>& self) {
        if (T* gx = grad_sink(x))
            for (std::int64_t i = 0; i < self.grad.numel(); ++i)
                if (x->value[i] > T(0)) gx[i] += self.grad[i];
    });
}

/// Concatenate (C_i, X, Y, Z) tensors along the channel axis.
template <typename T>
VarPtr<T> concat_channels(const std::vector<VarPtr<T>>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels: empty input list");
    const auto& s0 = xs[0]->value.shape();
    if (s0.size() < 2) throw std::invalid_argument("concat_channels: rank must be >= 2");
    std::int64_t spatial = 1;
    for (std::size_t i = 1; i < s0.size(); ++i) spatial *= s0[i];
    int channels = 0;
    for (const auto& x : xs) {
        const auto& s = x->value.shape();
        if (s.size() != s0.size())
            throw std::invalid_argument("concat_channels: rank mismatch");
        for (std::size_t i = 1; i < s.size(); ++i)
            if (s[i] != s0[i])
                throw std::invalid_argument("concat_channels: spatial shape mismatch");
        channels += s[0];
    }
    std::vector<int> out_shape = s0;
    out_shape[0] = channels;
    Tensor<T> out(out_shape);
    std::int64_t off = 0;
    for (const auto& x : xs) {
        const std::int64_t n = x->value.numel();
        std::memcpy(out.data() + off, x->value.data(), sizeof(T) * static_cast<std::size_t>(n));
        off += n;
    }
    return make_op<T>(std::move(out), xs, [xs](Var<T>& self) {
        std::int64_t off = 0;
        for (const auto& x : xs) {
            const std::int64_t n = x->value.numel();
            if (T* gx = grad_sink(x))
                for (std::int64_t i = 0; i < n; ++i) gx[i] += self.grad[off + i];
            off += n;
        }
    });
}

/// Reverse a (C, nx, ny, nz) tensor along a horizontal spatial axis.
template <typename T>
VarPtr<T> flip(const VarPtr<T>& x, FlipAxis axis) {
    if (x->value.rank() != 4) throw std::invalid_argument("flip: expected (C,X,Y,Z)");
    Tensor<T> out = teocc::detail::flip_spatial(x->value, 1, axis);
    return make_op<T>(std::move(out), {x}, [x, axis](Var<T>& self) {
        if (!x->requires_grad) return;
        Tensor<T> g = teocc::detail::flip_spatial(self.grad, 1, axis);
        T* gx = grad_sink(x);
        for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
    });
}

}  // namespace ag
}  // namespace teocc
