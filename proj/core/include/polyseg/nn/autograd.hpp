#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "polyseg/tensor.hpp"

namespace polyseg::nn {

/// One vertex of the dynamically recorded computation graph.
struct Node {
    Tensor value;
    Tensor grad; // allocated lazily, same shape as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(Node&)> backward;
};

/// Value handle into the graph. Ops on Vars record backward closures unless
/// gradient recording is disabled (NoGradGuard) or no input requires grad.
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Var leaf(Tensor value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(n_); }
    const Tensor& value() const { return n_->value; }
    /// Gradient of the last backward() pass; zeros if none reached this node.
    const Tensor& grad() const;
    bool requires_grad() const { return n_ && n_->requires_grad; }
    const std::shared_ptr<Node>& node() const { return n_; }

private:
    std::shared_ptr<Node> n_;
};

bool grad_enabled();

/// Scoped switch that disables graph recording (forward-only evaluation).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Reverse-mode sweep from a scalar root. Accumulates into leaf grads.
void backward(const Var& root);

/// Zero-filled grad buffer for a node, allocating on first touch.
Tensor& ensure_grad(Node& n);

} // namespace polyseg::nn
