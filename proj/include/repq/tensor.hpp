#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>

#include "repq/common.hpp"

namespace repq {

// Dense n-dimensional tensor with reverse-mode autodiff.
//
// A Tensor is a cheap shared handle onto a graph node. Operations on tensors
// record the node's inputs and a backward closure; backward() on a scalar
// walks the recorded graph in reverse topological order exactly once.
// Activations use [B, H, D, C] layout, convolution weights [Kh, Kw, IN, OUT].
template <typename T>
class Tensor {
public:
    struct Impl {
        Shape shape;
        std::vector<T> data;
        std::vector<T> grad;  // empty until needed; same length as data afterwards
        bool requires_grad = false;
        const char* op = "leaf";
        std::vector<std::shared_ptr<Impl>> parents;
        // Receives the finished node (its grad fully accumulated) and pushes
        // gradient contributions into the parents.
        std::function<void(Impl&)> backward_fn;
    };

    Tensor() : impl_(nullptr) {}
    explicit Tensor(Shape shape)
        : impl_(std::make_shared<Impl>()) {
        impl_->shape = std::move(shape);
        impl_->data.assign(numel_of(impl_->shape), T(0));
    }
    Tensor(Shape shape, std::vector<T> data)
        : impl_(std::make_shared<Impl>()) {
        require(numel_of(shape) == static_cast<int64_t>(data.size()),
                "tensor: data length " + std::to_string(data.size()) +
                    " does not match shape " + shape_str(shape));
        impl_->shape = std::move(shape);
        impl_->data = std::move(data);
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data().begin(), t.data().end(), value);
        return t;
    }
    static Tensor scalar(T value) { return Tensor({1}, {value}); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    size_t rank() const { return impl_->shape.size(); }
    int64_t dim(size_t i) const { return impl_->shape[i]; }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

    std::vector<T>& data() { return impl_->data; }
    const std::vector<T>& data() const { return impl_->data; }

    std::vector<T>& grad() {
        ensure_grad();
        return impl_->grad;
    }
    const std::vector<T>& grad() const { return impl_->grad; }
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
    }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v = true) {
        impl_->requires_grad = v;
        return *this;
    }

    const char* op() const { return impl_->op; }

    T& at(std::initializer_list<int64_t> idx) { return impl_->data[flat_index(idx)]; }
    T at(std::initializer_list<int64_t> idx) const { return impl_->data[flat_index(idx)]; }

    T item() const {
        require(numel() == 1, "item: tensor is not scalar");
        return impl_->data[0];
    }

    bool same_node(const Tensor& other) const { return impl_ == other.impl_; }

    // Builds a node from inputs: value, op tag, parents, backward closure.
    static Tensor make_node(Shape shape, std::vector<T> data, const char* op,
                            std::vector<Tensor> parents,
                            std::function<void(Impl&)> backward_fn) {
        Tensor t(std::move(shape), std::move(data));
        t.impl_->op = op;
        bool rg = false;
        for (auto& p : parents) {
            rg = rg || p.impl_->requires_grad;
            t.impl_->parents.push_back(p.impl_);
        }
        t.impl_->requires_grad = rg;
        if (rg) t.impl_->backward_fn = std::move(backward_fn);
        return t;
    }

    std::shared_ptr<Impl> impl() const { return impl_; }

    // Reverse-mode sweep from a scalar. Visits each reachable node once in
    // reverse topological order; grads accumulate (+=) into leaves.
    void backward() {
        require(defined() && numel() == 1, "backward: loss must be a defined scalar tensor");
        std::vector<Impl*> topo;
        std::unordered_set<Impl*> seen;
        // iterative post-order DFS, parent order fixed by construction
        std::vector<std::pair<Impl*, size_t>> stack;
        stack.emplace_back(impl_.get(), 0);
        seen.insert(impl_.get());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Impl* p = node->parents[next++].get();
                if (seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                topo.push_back(node);
                stack.pop_back();
            }
        }
        ensure_grad();
        impl_->grad[0] += T(1);
        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            Impl* node = *it;
            if (node->requires_grad && node->backward_fn) {
                if (node->grad.empty()) node->grad.assign(node->data.size(), T(0));
                node->backward_fn(*node);
            }
        }
    }

    void ensure_grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T(0));
    }

private:
    std::shared_ptr<Impl> impl_;

    int64_t flat_index(std::initializer_list<int64_t> idx) const {
        require(idx.size() == impl_->shape.size(), "at: index rank mismatch");
        int64_t flat = 0;
        size_t i = 0;
        for (int64_t v : idx) {
            flat = flat * impl_->shape[i] + v;
            ++i;
        }
        return flat;
    }
};

// Accumulates grad into a parent impl, allocating on first touch.
template <typename T>
inline void accumulate_grad(typename Tensor<T>::Impl& parent, const std::vector<T>& contribution) {
    if (!parent.requires_grad) return;
    if (parent.grad.empty()) parent.grad.assign(parent.data.size(), T(0));
    for (size_t i = 0; i < contribution.size(); ++i) parent.grad[i] += contribution[i];
}

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* op) {
    for (T v : t.data()) {
        if (!std::isfinite(static_cast<double>(v)))
            throw std::invalid_argument(std::string(op) + ": non-finite value in input tensor");
    }
}

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace repq
