#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mps {

class Tensor;

// One node of the reverse-mode graph: the tensors this value was computed
// from plus a closure that routes the output gradient into them.
struct Node {
    std::vector<Tensor> parents;
    std::function<void(const Tensor& out)> backward;
};

std::string shape_str(const std::vector<int>& shape);

// Dense row-major tensor of doubles. Copies are shallow and share storage.
// The graph is rebuilt on every forward pass (define-by-run); no caching.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                            bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(impl_); }
    const std::vector<int>& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    std::size_t numel() const { return impl_->data.size(); }
    int rows() const;  // rank-2 only
    int cols() const;

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }
    double value() const;  // numel()==1
    double& at(int r, int c);
    double at(int r, int c) const;

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    // Lazily allocated, zero-initialized gradient buffer (same length as data).
    // Const because copies share storage; the graph engine mutates grads
    // through the parent lists it holds.
    std::vector<double>& grad() const;
    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    void zero_grad() const;

    const std::shared_ptr<Node>& node() const { return impl_->node; }
    void set_node(std::shared_ptr<Node> n) { impl_->node = std::move(n); }

    // Stable identity of the underlying storage, for graph traversal.
    const void* id() const { return impl_.get(); }

  private:
    struct Impl {
        std::vector<int> shape;
        std::vector<double> data;
        std::vector<double> grad;
        bool requires_grad = false;
        std::shared_ptr<Node> node;
    };
    std::shared_ptr<Impl> impl_;
};

// Reverse-mode accumulation from a scalar loss into every requires_grad
// tensor of the reachable graph. Grads found in that graph are reset first
// unless accumulate is true. Throws if loss is not a scalar.
void backward(const Tensor& loss, bool accumulate = false);

}  // namespace mps
