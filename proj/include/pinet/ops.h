#pragma once

#include <cstddef>
#include <vector>

#include "pinet/autodiff.h"

// Differentiable primitives. Every function records onto the tape of its inputs;
// all inputs of one call must share a tape. There is no implicit broadcasting.

namespace pinet {

enum class Padding { same, valid };

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
Var add_constant(const Var& x, double offset);

/// x * s for a single-element `s`.
Var scale_by(const Var& x, const Var& s);
/// a * x + b for single-element `a` and `b`.
Var affine(const Var& x, const Var& a, const Var& b);
/// Single-element view of entry `flat_index` of `t`.
Var element(const Var& t, std::size_t flat_index);

Var sum(const Var& x);
Var mean(const Var& x);
Var dot(const Var& a, const Var& b);

Var relu(const Var& x);
Var sigmoid(const Var& x);
/// Max-subtracted softmax along `axis`.
Var softmax(const Var& x, std::size_t axis);
/// (x - mean) / sqrt(max(var, floor)) over all elements.
Var zscore(const Var& x, double variance_floor = 1e-8);

Var reshape(const Var& x, Shape shape);
/// Concatenation along axis 0.
Var concat(const Var& a, const Var& b);
/// Block [begin, begin + count) along axis 0.
Var slice(const Var& x, std::size_t begin, std::size_t count);
/// Stacks equally shaped values along a new axis 0.
Var stack(const std::vector<Var>& parts);

/// (A, B, ...) -> (B, A, ...).
Var swap_leading_axes(const Var& x);

/// Cross-correlation of (C_in,H,W) with (C_out,C_in,kh,kw) plus per-channel bias.
Var conv2d(const Var& input, const Var& kernel, const Var& bias, Padding padding);
/// Same-padded cross-correlation of every slice of (N,H,W) with one (kh,kw) kernel.
Var conv2d_shared(const Var& input, const Var& kernel);
/// 2x2 stride-2 max pooling of (C,H,W); ties route the gradient to the first maximum.
Var maxpool2d(const Var& input);
/// Stride-2 transposed convolution of (C_in,H,W) with (C_in,C_out,2,2) -> (C_out,2H,2W).
/// `bias` may be a default-constructed Var for no bias.
Var transposed_conv2d(const Var& input, const Var& kernel, const Var& bias = Var());

}  // namespace pinet
