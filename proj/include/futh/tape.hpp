#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "futh/tensor.hpp"

namespace futh {

/// Named trainable tensor with its gradient accumulator.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Parameter() = default;
    Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { grad.fill(T{0}); }
};

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
class Var {
  public:
    Var() = default;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Tensor<T>& value() const { return tape_->value(*this); }
    const Shape& shape() const { return value().shape(); }
    std::size_t dim(std::size_t i) const { return value().dim(i); }
    bool requires_grad() const { return tape_->requires_grad(*this); }
    Tape<T>* tape() const noexcept { return tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

  private:
    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Ordered record of executed ops. backward() walks the record in exact
/// reverse execution order; gradients of shared inputs accumulate additively.
template <typename T>
class Tape {
  public:
    using BackwardFn = std::function<void(const Tensor<T>& grad_out, Tape& tape)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void set_grad_enabled(bool on) noexcept { grad_enabled_ = on; }
    bool grad_enabled() const noexcept { return grad_enabled_; }

    Var<T> constant(Tensor<T> v) { return push(std::move(v), false, nullptr, nullptr); }

    Var<T> leaf(Tensor<T> v, bool requires_grad = true) {
        return push(std::move(v), requires_grad && grad_enabled_, nullptr, nullptr);
    }

    /// Leaf bound to a parameter; backward() adds its gradient into p.grad.
    Var<T> param(Parameter<T>& p) { return push(p.value, grad_enabled_, nullptr, &p); }

    /// Record an op output. The closure is kept only if some input needs a gradient.
    Var<T> record(Tensor<T> v, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
        return record(std::move(v), std::vector<Var<T>>(inputs), std::move(fn));
    }

    Var<T> record(Tensor<T> v, const std::vector<Var<T>>& inputs, BackwardFn fn) {
        bool needs = false;
        for (const auto& in : inputs) {
            check_owner(in);
            needs = needs || nodes_[in.id()].requires_grad;
        }
        needs = needs && grad_enabled_;
        return push(std::move(v), needs, needs ? std::move(fn) : BackwardFn{}, nullptr);
    }

    const Tensor<T>& value(const Var<T>& v) const {
        check_owner(v);
        return nodes_[v.id()].value;
    }

    bool requires_grad(const Var<T>& v) const {
        check_owner(v);
        return nodes_[v.id()].requires_grad;
    }

    /// Gradient buffer of v, zero-initialized on first use.
    Tensor<T>& grad_buffer(const Var<T>& v) {
        check_owner(v);
        auto& node = nodes_[v.id()];
        if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape());
        return node.grad;
    }

    void accumulate(const Var<T>& v, const Tensor<T>& g) {
        if (!requires_grad(v)) return;
        grad_buffer(v) += g;
    }

    /// Gradient computed by the last backward(); zeros if v was not reached.
    Tensor<T> grad(const Var<T>& v) const {
        check_owner(v);
        const auto& node = nodes_[v.id()];
        return node.grad.empty() ? Tensor<T>(node.value.shape()) : node.grad;
    }

    void backward(const Var<T>& loss) {
        check_owner(loss);
        if (value(loss).size() != 1) {
            throw ContractError("backward() needs a scalar loss, got shape " + to_string(value(loss).shape()));
        }
        visit_order_.clear();
        if (!nodes_[loss.id()].requires_grad) return;
        grad_buffer(loss).fill(T{1});
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            auto& node = nodes_[i];
            if (!node.requires_grad || node.grad.empty()) continue;
            visit_order_.push_back(i);
            if (node.backward) {
                // Copy out: the closure may touch other nodes' buffers, never its own.
                const Tensor<T>& g = node.grad;
                node.backward(g, *this);
            }
            if (node.param != nullptr) node.param->grad += node.grad;
        }
    }

    /// Node ids visited by the most recent backward(), in visit order.
    const std::vector<std::size_t>& visit_order() const noexcept { return visit_order_; }

    std::size_t size() const noexcept { return nodes_.size(); }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        BackwardFn backward;
        Parameter<T>* param = nullptr;
    };

    Var<T> push(Tensor<T> v, bool requires_grad, BackwardFn fn, Parameter<T>* p) {
        nodes_.push_back(Node{std::move(v), Tensor<T>{}, requires_grad, std::move(fn), p});
        return Var<T>(this, nodes_.size() - 1);
    }

    void check_owner(const Var<T>& v) const {
        if (v.tape() != this || v.id() >= nodes_.size()) throw ContractError("variable does not belong to this tape");
    }

    std::vector<Node> nodes_;
    std::vector<std::size_t> visit_order_;
    bool grad_enabled_ = true;
};

}  // namespace futh
