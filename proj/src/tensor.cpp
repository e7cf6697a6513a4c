#include "mps/tensor.hpp"

#include <algorithm>
#include <stdexcept>
#include <unordered_set>

namespace mps {

std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    s += "]";
    return s;
}

static std::size_t checked_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw std::invalid_argument("tensor extent must be positive, got shape " + shape_str(shape));
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    std::size_t n = checked_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data, bool requires_grad) {
    std::size_t n = checked_numel(shape);
    if (n != data.size()) {
        throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({}, {value}, requires_grad);
}

int Tensor::rows() const {
    if (rank() != 2) throw std::invalid_argument("rows(): tensor is not rank-2, shape " + shape_str(shape()));
    return impl_->shape[0];
}

int Tensor::cols() const {
    if (rank() != 2) throw std::invalid_argument("cols(): tensor is not rank-2, shape " + shape_str(shape()));
    return impl_->shape[1];
}

double Tensor::value() const {
    if (numel() != 1) throw std::invalid_argument("value(): tensor is not scalar, shape " + shape_str(shape()));
    return impl_->data[0];
}

double& Tensor::at(int r, int c) {
    return impl_->data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols()) + static_cast<std::size_t>(c)];
}

double Tensor::at(int r, int c) const {
    return impl_->data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols()) + static_cast<std::size_t>(c)];
}

std::vector<double>& Tensor::grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
}

void Tensor::zero_grad() const {
    if (!impl_) return;
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

void backward(const Tensor& loss, bool accumulate) {
    if (!loss.defined() || loss.numel() != 1) {
        throw std::invalid_argument("backward(): loss must be a scalar, got shape " +
                                    (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.requires_grad()) return;  // all-constant graph, nothing to do

    // Post-order DFS over storage identity; reverse gives a valid topo order.
    std::vector<Tensor> order;
    std::unordered_set<const void*> seen;
    struct Frame {
        Tensor t;
        std::size_t next = 0;
    };
    std::vector<Frame> stack;
    stack.push_back({loss, 0});
    seen.insert(loss.id());
    while (!stack.empty()) {
        Frame& f = stack.back();
        const auto& node = f.t.node();
        if (node && f.next < node->parents.size()) {
            Tensor p = node->parents[f.next++];
            if (p.requires_grad() && !seen.count(p.id())) {
                seen.insert(p.id());
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.t);
            stack.pop_back();
        }
    }

    // Intermediates are always reset; leaf grads survive only in accumulate mode.
    for (auto& t : order) {
        if (!accumulate || t.node()) t.zero_grad();
    }
    {
        Tensor l = loss;
        l.grad()[0] += 1.0;
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        const auto& node = it->node();
        if (node && node->backward) node->backward(*it);
    }
}

}  // namespace mps
