#pragma once

// Dense tensors and a reverse-mode differentiation tape.
//
// A Tensor is a plain value: a shape plus a flat row-major array. The Tape
// owns every value produced during a forward pass together with the rule
// that maps an output gradient back onto its inputs. Var is a lightweight
// handle into a Tape.
//
// Nodes are appended in execution order, so ids are a topological order and
// backward() only has to walk them in reverse.

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cpslab/errors.hpp"

namespace cpslab {

using real = double;
using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, real fill = 0)
        : shape_(std::move(shape)), values_(shape_size(shape_), fill) {
        check_shape();
    }

    Tensor(Shape shape, std::vector<real> values)
        : shape_(std::move(shape)), values_(std::move(values)) {
        check_shape();
        if (values_.size() != shape_size(shape_))
            throw DimensionError("tensor of shape " + shape_str(shape_) + " given " +
                                 std::to_string(values_.size()) + " values");
    }

    static Tensor scalar(real v) { return Tensor(Shape{1}, std::vector<real>{v}); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

    std::span<real> values() { return values_; }
    std::span<const real> values() const { return values_; }
    std::vector<real>& data() { return values_; }
    const std::vector<real>& data() const { return values_; }

    real& operator[](std::size_t i) { return values_[i]; }
    const real& operator[](std::size_t i) const { return values_[i]; }

    // 4-D indexing for [B,C,H,W] tensors.
    real& at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
        return values_[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    real at(std::size_t b, std::size_t c, std::size_t h, std::size_t w) const {
        return values_[((b * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    real item() const {
        if (values_.size() != 1) throw ArgumentError("item() on non-scalar tensor " + shape_str(shape_));
        return values_[0];
    }

    void fill(real v) { std::fill(values_.begin(), values_.end(), v); }

    bool all_finite() const {
        for (real v : values_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    void check_shape() const {
        for (std::size_t d : shape_)
            if (d == 0) throw DimensionError("tensor shape " + shape_str(shape_) + " has a zero extent");
    }

    Shape shape_;
    std::vector<real> values_;
};

class Tape;

// Handle to a node on a Tape.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    const Tensor& grad() const;

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

// Backward rule: receives the gradient of the node's output and one slot per
// input. A slot is nullptr when that input does not need a gradient.
using BackwardFn = std::function<void(const Tensor& grad_out, std::span<Tensor* const> input_grads)>;

class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // A differentiable leaf (parameters, inputs under gradient check).
    Var leaf(Tensor value) { return push(std::move(value), {}, nullptr, true); }

    // A leaf that never receives a gradient (images, frozen targets).
    Var constant(Tensor value) { return push(std::move(value), {}, nullptr, false); }

    // Record an operation output. The node needs a gradient iff any input does.
    Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
        bool needs = false;
        for (std::size_t i : inputs) needs = needs || nodes_.at(i).requires_grad;
        if (!needs) fn = nullptr;
        return push(std::move(value), std::move(inputs), std::move(fn), needs);
    }

    std::size_t size() const { return nodes_.size(); }
    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

    // Gradient of the last backward() loss w.r.t. node id. Nodes the loss does
    // not depend on report zeros.
    const Tensor& grad(std::size_t id) {
        Node& n = nodes_.at(id);
        if (n.grad.empty()) n.grad = Tensor(n.value.shape());
        return n.grad;
    }

    // Reverse accumulation from a scalar loss. Each node is visited once.
    void backward(Var loss) {
        if (&loss.tape() != this) throw ArgumentError("backward: loss belongs to another tape");
        if (value(loss.id()).size() != 1)
            throw ArgumentError("backward: loss must be scalar, got shape " +
                                shape_str(value(loss.id()).shape()));
        for (Node& n : nodes_) n.grad = Tensor();
        Node& root = nodes_[loss.id()];
        root.grad = Tensor(root.value.shape(), 1.0);

        std::vector<Tensor*> slots;
        for (std::size_t id = loss.id() + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.backward || n.grad.empty()) continue;
            slots.assign(n.inputs.size(), nullptr);
            for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                Node& in = nodes_[n.inputs[k]];
                if (!in.requires_grad) continue;
                if (in.grad.empty()) in.grad = Tensor(in.value.shape());
                slots[k] = &in.grad;
            }
            n.backward(n.grad, slots);
            ++visits_;
        }
    }

    // Number of backward rules executed over the tape's lifetime.
    std::size_t backward_visits() const { return visits_; }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
        bool requires_grad = false;
    };

    Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn, bool requires_grad) {
        nodes_.push_back(Node{std::move(value), Tensor(), std::move(inputs), std::move(fn), requires_grad});
        return Var(this, nodes_.size() - 1);
    }

    // deque: node addresses stay valid while the tape grows, so backward rules
    // may hold pointers to their input values.
    std::deque<Node> nodes_;
    std::size_t visits_ = 0;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }
inline const Tensor& Var::grad() const { return tape_->grad(id_); }

} // namespace cpslab
