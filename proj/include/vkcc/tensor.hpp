#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vkcc/common.hpp"

namespace vkcc {

/// Dense tensor handle with reverse-mode automatic differentiation. Values are
/// stored flat in row-major order (NCHW for images); shapes are explicit
/// extent lists. Handles share their node, so a copied parameter tensor sees
/// in-place optimizer updates. Every op result is checked for NaN/Inf and
/// throws NumericFault when one appears.
///
/// backward() walks the graph once in reverse topological order. Gradients of
/// interior nodes are rebuilt per call while leaf gradients (parameters and
/// inputs) accumulate additively until zero_grad().
template <typename Scalar>
class TensorT {
public:
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
    using Shape = std::vector<Eigen::Index>;

    struct Node {
        Shape shape;
        Array value;
        Array grad;  // empty until first needed
        bool requires_grad = false;
        std::string name;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward;  // accumulates into parents
    };

    TensorT() = default;

    static Eigen::Index shape_size(const Shape& shape) {
        Eigen::Index n = 1;
        for (const Eigen::Index e : shape) {
            if (e <= 0) throw InvalidInput("tensor: non-positive extent");
            n *= e;
        }
        return n;
    }

    static TensorT zeros(Shape shape, bool requires_grad = false, std::string name = {}) {
        TensorT t;
        t.node_ = std::make_shared<Node>();
        t.node_->value = Array::Zero(shape_size(shape));
        t.node_->shape = std::move(shape);
        t.node_->requires_grad = requires_grad;
        t.node_->name = std::move(name);
        return t;
    }

    static TensorT constant(Shape shape, Scalar v) {
        TensorT t = zeros(std::move(shape));
        t.node_->value.setConstant(v);
        return t;
    }

    static TensorT from(Shape shape, std::vector<Scalar> values, bool requires_grad = false) {
        TensorT t = zeros(std::move(shape), requires_grad);
        if (static_cast<Eigen::Index>(values.size()) != t.size())
            throw InvalidInput("tensor: value count does not match shape");
        for (Eigen::Index i = 0; i < t.size(); ++i) t.node_->value(i) = values[static_cast<std::size_t>(i)];
        return t;
    }

    /// Wraps a freshly built node (op constructors only).
    static TensorT adopt(std::shared_ptr<Node> node) {
        TensorT t;
        t.node_ = std::move(node);
        return t;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    Eigen::Index extent(int axis) const { return node_->shape[static_cast<std::size_t>(axis)]; }
    Eigen::Index size() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }
    const std::string& name() const { return node_->name; }
    void set_name(std::string name) { node_->name = std::move(name); }

    Array& value() { return node_->value; }
    const Array& value() const { return node_->value; }

    /// Gradient buffer, allocated (zeroed) on first access.
    Array& grad() {
        ensure_grad(*node_);
        return node_->grad;
    }

    Scalar item() const {
        if (size() != 1) throw InvalidInput("tensor: item() on non-scalar");
        return node_->value(0);
    }

    void zero_grad() {
        if (node_->grad.size() != 0) node_->grad.setZero();
    }

    const std::shared_ptr<Node>& ptr() const { return node_; }

    static void ensure_grad(Node& n) {
        if (n.grad.size() == 0) n.grad = Array::Zero(n.value.size());
    }

    /// Adds g to n's gradient if n participates in training.
    template <typename Expr>
    static void accumulate(Node& n, const Expr& g) {
        if (!n.requires_grad) return;
        ensure_grad(n);
        n.grad += g;
    }

    void backward() {
        if (size() != 1) throw InvalidInput("backward: loss must be a scalar tensor");
        if (!node_->requires_grad)
            throw InvalidInput("backward: graph is detached from every trainable tensor");

        // iterative post-order DFS over the parent links
        std::vector<Node*> topo;
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                Node* parent = n->parents[idx++].get();
                if (parent->requires_grad && seen.insert(parent).second)
                    stack.emplace_back(parent, 0);
            } else {
                topo.push_back(n);
                stack.pop_back();
            }
        }

        // interior gradients are per-call scratch; leaf gradients accumulate
        for (Node* n : topo) {
            if (!n->parents.empty()) {
                ensure_grad(*n);
                n->grad.setZero();
            }
        }
        ensure_grad(*node_);
        node_->grad(0) += Scalar(1);

        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            Node* n = *it;
            if (n->backward) {
                n->backward(*n);
                if (!n->grad.allFinite())
                    throw NumericFault("backward: non-finite gradient at " +
                                       (n->name.empty() ? std::string("<unnamed>") : n->name));
            }
        }
    }

private:
    std::shared_ptr<Node> node_;
};

using Tensor = TensorT<double>;

namespace detail {

/// Builds an op-result node: value checked finite, gradient flow wired to the
/// parents, backward installed only when some parent trains.
template <typename Scalar>
TensorT<Scalar> make_op(typename TensorT<Scalar>::Shape shape,
                        typename TensorT<Scalar>::Array value,
                        std::vector<std::shared_ptr<typename TensorT<Scalar>::Node>> parents,
                        std::function<void(typename TensorT<Scalar>::Node&)> backward,
                        const char* opname) {
    using T = TensorT<Scalar>;
    if (T::shape_size(shape) != value.size())
        throw InvalidInput(std::string(opname) + ": shape/value size mismatch");
    if (!value.allFinite()) throw NumericFault(std::string(opname) + ": non-finite result");
    auto node = std::make_shared<typename T::Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool rg = false;
    for (const auto& p : parents) rg = rg || p->requires_grad;
    node->requires_grad = rg;
    if (rg) {
        node->parents = std::move(parents);
        node->backward = std::move(backward);
    }
    return T::adopt(std::move(node));
}

}  // namespace detail

}  // namespace vkcc
