#pragma once

#include <deque>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mw/tensor.hpp"

namespace mw {

template <class T>
class Tape;

// Trainable tensor with its accumulated gradient.
template <class T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    Param() = default;
    Param(std::string n, Tensor<T> v)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
    void zero_grad() { grad = Tensor<T>(value.shape()); }
};

// Handle to a value recorded on a tape.
template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
};

// Ordered record of executed ops. backward() walks it in exact reverse
// order; gradients of shared inputs accumulate. A tape constructed with
// recording=false keeps values only (inference).
template <class T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, int self)>;

    explicit Tape(bool recording = true) : recording_(recording) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }
    std::size_t size() const { return nodes_.size(); }

    Var<T> constant(Tensor<T> v) { return add_node(std::move(v), false, nullptr); }

    // Leaf whose gradient is readable via grad() after backward().
    Var<T> input(Tensor<T> v) { return add_node(std::move(v), recording_, nullptr); }

    // Leaf bound to a parameter; backward() adds into p.grad (the only write
    // to the parameter, so non-recording tapes may share parameters across
    // threads). Repeated calls with the same parameter return the same leaf.
    Var<T> param(const Param<T>& p) {
        auto* mp = const_cast<Param<T>*>(&p);
        if (auto it = param_ids_.find(mp); it != param_ids_.end()) return {this, it->second};
        Var<T> v = add_node(Tensor<T>(), recording_, mp);
        nodes_[v.id].ref = &p.value;
        param_ids_[mp] = v.id;
        return v;
    }

    // Records an op result. fn is kept only when recording and at least one
    // input requires grad.
    Var<T> push(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn,
                std::string_view op_name) {
        return push_n(std::move(value), std::vector<Var<T>>(inputs), std::move(fn), op_name);
    }

    Var<T> push_n(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn fn,
                  std::string_view op_name) {
        value.check_finite(op_name);
        bool rg = false;
        if (recording_) {
            for (const auto& in : inputs) {
                if (in.tape != this) throw std::invalid_argument("op mixes vars from different tapes");
                rg = rg || nodes_[in.id].requires_grad;
            }
        }
        Var<T> out = add_node(std::move(value), rg, nullptr);
        if (rg) nodes_[out.id].backward = std::move(fn);
        return out;
    }

    bool requires_grad(Var<T> v) const { return nodes_[v.id].requires_grad; }
    const Tensor<T>& value(Var<T> v) const { return nodes_[v.id].val(); }
    const Tensor<T>& value(int id) const { return nodes_[id].val(); }

    // Gradient buffer of a node (empty until something accumulates into it).
    const Tensor<T>& grad(Var<T> v) const { return nodes_[v.id].grad; }
    const Tensor<T>& grad(int id) const { return nodes_[id].grad; }

    // Zero-initialised accumulation target for an input's gradient, or null
    // when that input does not require grad.
    Tensor<T>* accum(Var<T> v) { return accum(v.id); }
    Tensor<T>* accum(int id) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return nullptr;
        if (n.grad.shape() != n.val().shape()) n.grad = Tensor<T>(n.val().shape());
        return &n.grad;
    }

    void backward(Var<T> loss) {
        if (!recording_) throw std::logic_error("backward on a non-recording tape");
        if (loss.tape != this) throw std::invalid_argument("loss belongs to a different tape");
        Node& ln = nodes_[loss.id];
        if (ln.val().size() != 1) throw ShapeError("backward requires a scalar loss");
        if (!ln.requires_grad) throw std::logic_error("loss is detached from every parameter");
        ln.grad = Tensor<T>(ln.val().shape(), T(1));
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.backward || n.grad.empty()) continue;
            n.backward(*this, id);
        }
        for (auto& [p, id] : param_ids_) {
            const Node& n = nodes_[id];
            if (n.grad.empty()) continue;
            if (p->grad.shape() != p->value.shape()) p->grad = Tensor<T>(p->value.shape());
            for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
        }
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        BackwardFn backward;
        bool requires_grad = false;
        Param<T>* param = nullptr;
        const Tensor<T>* ref = nullptr;

        const Tensor<T>& val() const { return ref ? *ref : value; }
    };

    Var<T> add_node(Tensor<T> v, bool rg, Param<T>* p) {
        nodes_.push_back(Node{std::move(v), {}, {}, rg, p, nullptr});
        return {this, static_cast<int>(nodes_.size()) - 1};
    }

    bool recording_;
    std::deque<Node> nodes_;
    std::unordered_map<Param<T>*, int> param_ids_;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
    return tape->value(*this);
}

}  // namespace mw
