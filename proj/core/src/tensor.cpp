#include "voxpeft/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace voxpeft {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

Backprop::Backprop(const Node& node, const TensorImpl& out)
    : node_(node), out_(out), grad_out_(out.grad) {}

std::span<double> Backprop::grad_in(std::size_t i) {
    TensorImpl& input = *node_.inputs[i];
    if (!input.requires_grad) {
        return {};
    }
    if (input.grad.empty()) {
        input.grad.assign(input.data.size(), 0.0);
    }
    return input.grad;
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }

Tensor Tensor::ones(const Shape& shape) { return full(shape, 1.0); }

Tensor Tensor::full(const Shape& shape, double value) {
    return from(shape, std::vector<double>(shape_numel(shape), value));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values) {
    for (std::size_t d : shape) {
        if (d == 0) {
            throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
        }
    }
    if (values.size() != shape_numel(shape)) {
        throw DimensionError("tensor of shape " + shape_str(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = shape;
    impl->data = std::move(values);
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::size(std::size_t axis) const {
    if (axis >= dim()) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                             shape_str(shape()));
    }
    return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const double> Tensor::data() const { return impl_->data; }

std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != dim()) {
        throw DimensionError("index rank does not match shape " + shape_str(shape()));
    }
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
        if (i >= impl_->shape[axis]) {
            throw DimensionError("index out of range for shape " + shape_str(shape()));
        }
        flat = flat * impl_->shape[axis] + i;
        ++axis;
    }
    return impl_->data[flat];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
    if (!is_leaf()) {
        throw ContractError("requires_grad can only be changed on leaf tensors");
    }
    impl_->requires_grad = flag;
    return *this;
}

bool Tensor::is_leaf() const { return impl_->grad_fn == nullptr; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const { return impl_->grad; }

Tensor Tensor::grad_tensor() const {
    if (!has_grad()) {
        return Tensor();
    }
    return from(shape(), impl_->grad);
}

void Tensor::zero_grad() { impl_->grad.clear(); }

Tensor Tensor::detach() const { return from(shape(), impl_->data); }

Tensor Tensor::clone() const {
    Tensor copy = from(shape(), impl_->data);
    copy.impl_->requires_grad = is_leaf() && impl_->requires_grad;
    return copy;
}

void Tensor::backward() const {
    if (numel() != 1) {
        throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
    }
    if (!impl_->requires_grad) {
        throw ContractError("backward() on a tensor that does not require grad");
    }

    // Post-order DFS gives a topological order; replaying it reversed visits
    // every node once, after all of its consumers.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        const auto& fn = node->grad_fn;
        if (fn && next < fn->inputs.size()) {
            TensorImpl* child = fn->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    if (impl_->grad.empty()) {
        impl_->grad.assign(1, 0.0);
    }
    impl_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (!node->grad_fn || node->grad.empty()) {
            continue;
        }
        Backprop bp(*node->grad_fn, *node);
        node->grad_fn->backward(bp);
    }
}

Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                   std::string name, BackwardFn backward) {
    Tensor out = Tensor::from(shape, std::move(data));
    if (!g_grad_enabled) {
        return out;
    }
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
    if (!any) {
        return out;
    }
    auto node = std::make_shared<Node>();
    node->name = std::move(name);
    node->inputs.reserve(inputs.size());
    for (const Tensor& t : inputs) {
        node->inputs.push_back(t.impl_ptr());
    }
    node->backward = std::move(backward);
    out.impl()->requires_grad = true;
    out.impl()->grad_fn = std::move(node);
    return out;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

} // namespace voxpeft
