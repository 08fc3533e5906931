#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <string>

#include "pinet/tensor.h"

namespace pinet {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
  public:
    Var() = default;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const;
    bool valid() const noexcept { return tape_ != nullptr; }
    Tape& tape() const { return *tape_; }
    std::size_t index() const noexcept { return index_; }

  private:
    friend class Tape;
    Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

    Tape* tape_ = nullptr;
    std::size_t index_ = 0;
};

/// Records differentiable operations in execution order and runs the reverse sweep.
///
/// Nodes live in a deque so references to recorded values stay valid while more
/// operations are appended. Recording order is a topological order, so the reverse
/// sweep simply walks the nodes backwards. A tape is single-writer.
class Tape {
  public:
    /// Receives the gradient of the node's output together with the recorded output
    /// value and routes the gradient to the inputs.
    using Backward = std::function<void(const Tensor& grad_out, const Tensor& out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    Var variable(Tensor value);

    /// Appends an operation result. The backward closure is kept only when some
    /// input requires a gradient. Non-finite outputs raise NumericError.
    Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, Backward backward);
    Var record(const char* op, Tensor value, const std::vector<Var>& inputs, Backward backward);

    /// Adds `grad` into the gradient of `target`; ignored when target needs no gradient.
    void accumulate(const Var& target, const Tensor& grad);
    /// Zero-initialised gradient storage of `target` for scatter-style accumulation.
    Tensor& grad_buffer(const Var& target);

    /// Reverse sweep from a scalar (single-element) output.
    void backward(const Var& output);

    /// Gradient of the last backward() with respect to `v` (zeros if unreached).
    const Tensor& grad(const Var& v);

    std::size_t size() const noexcept { return nodes_.size(); }

  private:
    friend class Var;
    struct Node {
        Tensor value;
        Tensor grad;
        Backward backward;
        bool requires_grad = false;
    };

    Node& node(const Var& v);
    const Node& node(const Var& v) const;

    std::deque<Node> nodes_;
};

struct GradCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;
    Tensor analytic;
    Tensor numeric;
};

/// Compares the reverse-mode gradient of `fn` at `point` with central differences
/// (f(x+h) - f(x-h)) / 2h. The per-coordinate relative error is
/// |a - n| / max(|a|, |n|, 1e-3 * max_j max(|a_j|, |n_j|), 1e-12).
/// `fn` must return a single-element Var; anything else is a ShapeError.
GradCheckResult grad_check(const std::function<Var(Tape&, const Var&)>& fn, const Tensor& point,
                           double step = 1e-5);

}  // namespace pinet
