#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "voxpeft/errors.hpp"

namespace voxpeft {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;

// Storage and autograd bookkeeping behind a Tensor handle.
struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad; // empty until the first backward touches it
    std::shared_ptr<Node> grad_fn;
};

class Backprop;
using BackwardFn = std::function<void(Backprop&)>;

// One recorded primitive. Inputs are held strongly so the graph outlives the
// temporaries that produced it.
struct Node {
    std::string name;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    BackwardFn backward;
};

// View handed to a node's backward function while the tape is replayed.
class Backprop {
public:
    Backprop(const Node& node, const TensorImpl& out);

    std::span<const double> grad_out() const { return grad_out_; }
    const TensorImpl& out() const { return out_; }
    const TensorImpl& in(std::size_t i) const { return *node_.inputs[i]; }
    bool needs(std::size_t i) const { return node_.inputs[i]->requires_grad; }
    // Accumulation buffer for input i; empty span when the input needs no grad.
    std::span<double> grad_in(std::size_t i);

private:
    const Node& node_;
    const TensorImpl& out_;
    std::span<const double> grad_out_;
};

// Reference-counted n-dimensional array of doubles with optional participation
// in reverse-mode differentiation. Copies share storage; use clone() for a
// deep copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(const Shape& shape);
    static Tensor ones(const Shape& shape);
    static Tensor full(const Shape& shape, double value);
    static Tensor from(const Shape& shape, std::vector<double> values);
    static Tensor scalar(double value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim() const { return shape().size(); }
    std::size_t size(std::size_t axis) const;
    std::size_t numel() const;

    std::span<const double> data() const;
    // Mutable access is for leaves only; mutating a recorded tensor would
    // corrupt the tape.
    std::span<double> mutable_data();
    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool flag);
    bool is_leaf() const;
    bool has_grad() const;
    std::span<const double> grad() const;
    Tensor grad_tensor() const;
    void zero_grad();

    Tensor detach() const;
    Tensor clone() const;

    // Reverse traversal from this scalar; gradients accumulate into every
    // requires_grad tensor reachable through recorded operations.
    void backward() const;

    TensorImpl* impl() const { return impl_.get(); }
    const std::shared_ptr<TensorImpl>& impl_ptr() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Records an operation result. When gradient recording is disabled or no
// input requires a gradient, the result is a plain leaf without a node.
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::string name, BackwardFn backward);

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

} // namespace voxpeft
