#pragma once

#include <algorithm>
#include <atomic>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "dsa/core/tensor.hpp"

namespace dsa {

template <typename T>
class Var;

template <typename T>
struct Node;

/// Per-input flags telling a backward function which input gradients are actually consumed.
using NeedsGrad = std::vector<char>;

template <typename T>
using BackwardFn = std::function<std::vector<Var<T>>(const Var<T>& self, const Var<T>& grad, const NeedsGrad& needs)>;

namespace detail {

inline std::atomic<std::uint64_t>& node_counter()
{
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

inline bool& grad_mode_flag()
{
    thread_local bool enabled = true;
    return enabled;
}

} // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Scoped switch for graph recording. `GradMode guard(false)` evaluates without building nodes.
class GradMode {
public:
    explicit GradMode(bool enabled)
      : previous_(detail::grad_mode_flag())
    {
        detail::grad_mode_flag() = enabled;
    }
    ~GradMode() { detail::grad_mode_flag() = previous_; }
    GradMode(const GradMode&) = delete;
    GradMode& operator=(const GradMode&) = delete;

private:
    bool previous_;
};

struct NoGrad : GradMode {
    NoGrad() : GradMode(false) { }
};

template <typename T>
struct Node : std::enable_shared_from_this<Node<T>> {
    Tensor<T> value;
    bool requires_grad = false;
    std::vector<Var<T>> inputs;
    BackwardFn<T> backward;
    std::string op = "leaf";
    bool second_order = true;
    // Creation order; inputs always have a smaller sequence number than their consumers.
    std::uint64_t seq = detail::node_counter().fetch_add(1, std::memory_order_relaxed);
};

/// Handle to a value in a computation graph. Copies share the node.
template <typename T>
class Var {
public:
    Var() = default;

    explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>())
    {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    explicit Var(std::shared_ptr<Node<T>> node)
      : node_(std::move(node))
    { }

    static Var constant(Tensor<T> value) { return Var(std::move(value), false); }
    static Var leaf(Tensor<T> value) { return Var(std::move(value), true); }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    explicit operator bool() const noexcept { return defined(); }

    const Tensor<T>& value() const { return node_->value; }
    /// Mutable access for optimizer updates on leaves; never mutate an interior node.
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool is_leaf() const { return !node_->backward; }
    const std::string& op() const { return node_->op; }
    T item() const { return node_->value.item(); }

    /// Same value, cut from the graph.
    Var detach() const { return constant(node_->value); }

    Node<T>* node() const noexcept { return node_.get(); }
    const std::shared_ptr<Node<T>>& node_ptr() const noexcept { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Creates an operator node. Recording happens only when grad mode is on and some input
/// requires grad; otherwise the result is a plain constant.
template <typename T>
Var<T> make_op(std::string op, Tensor<T> value, std::vector<Var<T>> inputs, BackwardFn<T> backward,
               bool second_order = true)
{
    Var<T> out(std::move(value), false);
    if (!grad_enabled()) return out;
    const bool any = std::any_of(inputs.begin(), inputs.end(), [](const Var<T>& v) { return v.requires_grad(); });
    if (!any) return out;
    Node<T>* n = out.node();
    n->requires_grad = true;
    n->inputs = std::move(inputs);
    n->backward = std::move(backward);
    n->op = std::move(op);
    n->second_order = second_order;
    return out;
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
struct Gradients {
    std::vector<Var<T>> values;
    /// Indices of requested leaves that the root does not depend on (their gradient is zero).
    std::vector<std::size_t> unreached;

    const Var<T>& operator[](std::size_t i) const { return values[i]; }
    std::size_t size() const { return values.size(); }
};

/// Reverse-mode gradient of a scalar `root` with respect to `wrt`.
/// With `create_graph` the returned gradients are themselves differentiable, enabling
/// gradients of functionals of gradients.
template <typename T>
Gradients<T> gradient(const Var<T>& root, const std::vector<Var<T>>& wrt, bool create_graph = false)
{
    if (!root.defined()) throw Error("gradient: undefined root");
    if (root.value().size() != 1)
        throw ShapeError("gradient: root must be scalar, got shape " + to_string(root.shape()) + " from '" + root.op()
                         + "'");

    std::unordered_set<const Node<T>*> targets;
    for (const auto& w : wrt)
        if (w.requires_grad()) targets.insert(w.node());

    // Collect the subgraph of grad-requiring nodes reachable from the root.
    std::vector<Node<T>*> nodes;
    if (root.requires_grad()) {
        std::unordered_set<Node<T>*> seen;
        std::vector<Node<T>*> stack{root.node()};
        seen.insert(root.node());
        while (!stack.empty()) {
            Node<T>* n = stack.back();
            stack.pop_back();
            nodes.push_back(n);
            for (const auto& in : n->inputs)
                if (in.requires_grad() && seen.insert(in.node()).second) stack.push_back(in.node());
        }
    }
    std::sort(nodes.begin(), nodes.end(), [](const Node<T>* a, const Node<T>* b) { return a->seq < b->seq; });

    // A node is useful iff some requested leaf lies beneath it.
    std::unordered_set<const Node<T>*> useful;
    for (Node<T>* n : nodes) {
        bool u = targets.count(n) > 0;
        for (const auto& in : n->inputs) u = u || useful.count(in.node()) > 0;
        if (u) useful.insert(n);
    }

    std::unordered_map<const Node<T>*, Var<T>> grads;
    {
        GradMode mode(false);
        grads[root.node()] = Var<T>::constant(Tensor<T>(root.shape(), T(1)));
    }

    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        Node<T>* n = *it;
        if (!useful.count(n) || !n->backward) continue;
        auto git = grads.find(n);
        if (git == grads.end()) continue;
        NeedsGrad needs(n->inputs.size(), 0);
        bool any = false;
        for (std::size_t i = 0; i < n->inputs.size(); ++i) {
            const auto& in = n->inputs[i];
            needs[i] = in.requires_grad() && useful.count(in.node()) ? 1 : 0;
            any = any || needs[i];
        }
        if (!any) continue;
        if (create_graph && !n->second_order) throw SecondOrderError(n->op);

        Var<T> g = git->second;
        if (!targets.count(n)) grads.erase(git);
        std::vector<Var<T>> in_grads;
        {
            GradMode mode(create_graph);
            in_grads = n->backward(Var<T>(n->shared_from_this()), g, needs);
        }
        for (std::size_t i = 0; i < n->inputs.size(); ++i) {
            if (!needs[i] || !in_grads[i].defined()) continue;
            const Node<T>* key = n->inputs[i].node();
            auto slot = grads.find(key);
            if (slot == grads.end()) {
                grads.emplace(key, in_grads[i]);
            } else {
                GradMode mode(create_graph);
                slot->second = add(slot->second, in_grads[i]);
            }
        }
    }

    Gradients<T> out;
    out.values.reserve(wrt.size());
    for (std::size_t i = 0; i < wrt.size(); ++i) {
        auto it = wrt[i].defined() ? grads.find(wrt[i].node()) : grads.end();
        if (it == grads.end()) {
            out.values.push_back(Var<T>::constant(Tensor<T>::zeros(wrt[i].shape())));
            out.unreached.push_back(i);
        } else {
            out.values.push_back(it->second);
        }
    }
    return out;
}

} // namespace dsa
