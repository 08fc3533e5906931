#include "pinet/autodiff.h"

#include <algorithm>
#include <cmath>

namespace pinet {

const Tensor& Var::value() const { return tape_->node(*this).value; }

bool Var::requires_grad() const { return tape_->node(*this).requires_grad; }

Tape::Node& Tape::node(const Var& v) {
    if (v.tape_ != this || v.index_ >= nodes_.size()) {
        throw std::logic_error("Var does not belong to this tape");
    }
    return nodes_[v.index_];
}

const Tape::Node& Tape::node(const Var& v) const {
    if (v.tape_ != this || v.index_ >= nodes_.size()) {
        throw std::logic_error("Var does not belong to this tape");
    }
    return nodes_[v.index_];
}

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, false});
    return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, true});
    return Var(this, nodes_.size() - 1);
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> inputs,
                 Backward backward) {
    return record(op, std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Tape::record(const char* op, Tensor value, const std::vector<Var>& inputs,
                 Backward backward) {
    if (!value.all_finite()) {
        throw NumericError(std::string(op) + " produced a non-finite value (output shape " +
                           to_string(value.shape()) + ")");
    }
    const bool needs_grad = std::any_of(inputs.begin(), inputs.end(), [this](const Var& in) {
        return node(in).requires_grad;
    });
    nodes_.push_back(Node{std::move(value), {}, needs_grad ? std::move(backward) : Backward{},
                          needs_grad});
    return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(const Var& target, const Tensor& grad) {
    Node& n = node(target);
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
        require_same_shape(n.value, grad, "gradient accumulation");
        n.grad = grad;
    } else {
        n.grad += grad;
    }
}

Tensor& Tape::grad_buffer(const Var& target) {
    Node& n = node(target);
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
    return n.grad;
}

void Tape::backward(const Var& output) {
    Node& out = node(output);
    if (out.value.size() != 1) {
        throw ShapeError("backward needs a scalar output, got shape " + to_string(out.value.shape()));
    }
    for (Node& n : nodes_) n.grad = Tensor();
    out.grad = Tensor(out.value.shape(), 1.0);
    for (std::size_t i = output.index() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.backward && !n.grad.empty()) n.backward(n.grad, n.value);
    }
}

const Tensor& Tape::grad(const Var& v) { return grad_buffer(v); }

GradCheckResult grad_check(const std::function<Var(Tape&, const Var&)>& fn, const Tensor& point,
                           double step) {
    GradCheckResult result;
    {
        Tape tape;
        Var x = tape.variable(point);
        Var y = fn(tape, x);
        if (y.value().size() != 1) {
            throw ShapeError("grad_check needs a scalar function, got shape " +
                             to_string(y.value().shape()));
        }
        tape.backward(y);
        result.analytic = tape.grad(x);
    }

    auto evaluate = [&](const Tensor& at) {
        Tape tape;
        Var x = tape.constant(at);
        return fn(tape, x).value()[0];
    };

    result.numeric = Tensor(point.shape());
    Tensor probe = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double original = probe[i];
        probe[i] = original + step;
        const double plus = evaluate(probe);
        probe[i] = original - step;
        const double minus = evaluate(probe);
        probe[i] = original;
        result.numeric[i] = (plus - minus) / (2.0 * step);
    }

    const double scale = std::max(max_abs(result.analytic), max_abs(result.numeric));
    const double floor = std::max(1e-3 * scale, 1e-12);
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double a = result.analytic[i];
        const double n = result.numeric[i];
        const double denom = std::max({std::abs(a), std::abs(n), floor});
        const double err = std::abs(a - n) / denom;
        if (err > result.max_relative_error) {
            result.max_relative_error = err;
            result.worst_index = i;
        }
    }
    return result;
}

}  // namespace pinet
