#include "polyseg/nn/autograd.hpp"

#include <unordered_set>

#include "polyseg/errors.hpp"

namespace polyseg::nn {

namespace {
thread_local bool g_grad_enabled = true;
} // namespace

bool grad_enabled() {
    return g_grad_enabled;
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) {
    g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() {
    g_grad_enabled = prev_;
}

Var Var::leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad && g_grad_enabled;
    return Var(std::move(n));
}

Tensor& ensure_grad(Node& n) {
    if (n.grad.empty() && n.value.numel() > 0) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
}

const Tensor& Var::grad() const {
    return ensure_grad(*n_);
}

void backward(const Var& root) {
    if (!root.defined() || !root.requires_grad())
        throw Error("backward: root was recorded without gradients");
    if (root.value().numel() != 1)
        throw ShapeError("backward: root must be scalar, got " + root.value().shape_str());

    // Iterative post-order DFS; parents of grad-free nodes are never recorded,
    // so the traversal naturally stops at leaves.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    struct Frame {
        Node* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({root.node().get(), 0});
    visited.insert(root.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            Node* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    ensure_grad(*root.node()).fill(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward) n->backward(*n);
    }
}

} // namespace polyseg::nn
