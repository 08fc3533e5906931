#pragma once

#include <cstddef>

#include "pinet/autodiff.h"
#include "pinet/tensor.h"

namespace pinet {

enum class BinKind { one_hot, probability };

/// Per-class bin maps, channel-first (c, b, H, W).
struct BinnedMap {
    Tensor data;
    BinKind kind = BinKind::probability;
    Tensor y_max;  // (c); per-sample maxima of a discretized target, empty for predictions

    std::size_t classes() const { return data.dim(0); }
    std::size_t bins() const { return data.dim(1); }
};

/// Throws ShapeError / NumericError when the map violates its kind's invariants
/// (one-hot: a single 1 per pixel and class; probability: nonnegative, sums to 1 within 1e-9).
void validate(const BinnedMap& map);

/// Scales each class of a nonnegative (c, H, W) target by its maximum and assigns
/// bin min(floor(scaled * b), b - 1). An all-zero class maps entirely to bin 0.
BinnedMap discretize_target(const Tensor& target, std::size_t bins);

/// Bin index per (class, pixel) of a one-hot map, shape (c, H, W).
Tensor bin_indices(const BinnedMap& map);

/// (j + 0.5) / b for j < b.
Tensor bin_centers(std::size_t bins);
/// Bin centers replicated per class: (c, b).
Tensor initial_bin_weights(std::size_t classes, std::size_t bins);

/// out(k, y, x) = sum_j pred(k, j, y, x) * w(k, j). Requires a probability map.
Tensor collapse_bins(const BinnedMap& pred, const Tensor& weights);
Var collapse_bins(const Var& probabilities, const Var& weights);

}  // namespace pinet
