#include "pinet/binning.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace pinet {

namespace {

void check_weights(const Shape& map, const Shape& weights, const char* what) {
    if (map.size() != 4) throw ShapeError(std::string(what) + ": expected (c,b,H,W), got " + to_string(map));
    if (weights.size() != 2 || weights[0] != map[0] || weights[1] != map[1]) {
        throw ShapeError(std::string(what) + ": weights " + to_string(weights) + " do not match map " +
                         to_string(map));
    }
}

Tensor collapse_values(const Tensor& probs, const Tensor& weights) {
    const std::size_t c = probs.dim(0), b = probs.dim(1), plane = probs.dim(2) * probs.dim(3);
    Tensor out({c, probs.dim(2), probs.dim(3)});
    for (std::size_t k = 0; k < c; ++k) {
        double* dst = out.data() + k * plane;
        for (std::size_t j = 0; j < b; ++j) {
            const double w = weights.at(k, j);
            const double* src = probs.data() + (k * b + j) * plane;
            for (std::size_t i = 0; i < plane; ++i) dst[i] += w * src[i];
        }
    }
    return out;
}

}  // namespace

void validate(const BinnedMap& map) {
    require_rank(map.data, 4, "BinnedMap");
    const std::size_t c = map.classes(), b = map.bins(), plane = map.data.dim(2) * map.data.dim(3);
    for (std::size_t k = 0; k < c; ++k) {
        for (std::size_t i = 0; i < plane; ++i) {
            double total = 0.0;
            std::size_t ones = 0;
            for (std::size_t j = 0; j < b; ++j) {
                const double p = map.data[(k * b + j) * plane + i];
                if (map.kind == BinKind::one_hot) {
                    if (p == 1.0) {
                        ++ones;
                    } else if (p != 0.0) {
                        throw NumericError("one-hot BinnedMap holds non-binary entry " + std::to_string(p));
                    }
                } else if (!(p >= 0.0)) {
                    throw NumericError("probability BinnedMap holds negative entry " + std::to_string(p));
                }
                total += p;
            }
            if (map.kind == BinKind::one_hot && ones != 1) {
                throw NumericError("one-hot BinnedMap: pixel " + std::to_string(i) + " of class " +
                                   std::to_string(k) + " has " + std::to_string(ones) + " active bins");
            }
            if (std::abs(total - 1.0) > 1e-9) {
                throw NumericError("BinnedMap: bins sum to " + std::to_string(total));
            }
        }
    }
}

BinnedMap discretize_target(const Tensor& target, std::size_t bins) {
    require_rank(target, 3, "discretize_target");
    if (bins < 2) throw std::invalid_argument("discretize_target: need at least 2 bins");
    const std::size_t c = target.dim(0), plane = target.dim(1) * target.dim(2);
    BinnedMap map{Tensor({c, bins, target.dim(1), target.dim(2)}), BinKind::one_hot, Tensor({c})};
    for (std::size_t k = 0; k < c; ++k) {
        double top = 0.0;
        for (std::size_t i = 0; i < plane; ++i) {
            const double y = target[k * plane + i];
            if (y < 0.0) throw std::invalid_argument("discretize_target: negative target value");
            top = std::max(top, y);
        }
        map.y_max[k] = top;
        for (std::size_t i = 0; i < plane; ++i) {
            std::size_t j = 0;
            if (top > 0.0) {
                const double scaled = target[k * plane + i] / top;
                j = std::min(static_cast<std::size_t>(std::floor(scaled * static_cast<double>(bins))), bins - 1);
            }
            map.data[(k * bins + j) * plane + i] = 1.0;
        }
    }
    return map;
}

Tensor bin_indices(const BinnedMap& map) {
    if (map.kind != BinKind::one_hot) throw std::invalid_argument("bin_indices: expected a one-hot map");
    const std::size_t c = map.classes(), b = map.bins(), plane = map.data.dim(2) * map.data.dim(3);
    Tensor out({c, map.data.dim(2), map.data.dim(3)});
    for (std::size_t k = 0; k < c; ++k)
        for (std::size_t j = 0; j < b; ++j)
            for (std::size_t i = 0; i < plane; ++i)
                if (map.data[(k * b + j) * plane + i] == 1.0) out[k * plane + i] = static_cast<double>(j);
    return out;
}

Tensor bin_centers(std::size_t bins) {
    Tensor centers({bins});
    for (std::size_t j = 0; j < bins; ++j) centers[j] = (static_cast<double>(j) + 0.5) / static_cast<double>(bins);
    return centers;
}

Tensor initial_bin_weights(std::size_t classes, std::size_t bins) {
    Tensor w({classes, bins});
    const Tensor centers = bin_centers(bins);
    for (std::size_t k = 0; k < classes; ++k)
        for (std::size_t j = 0; j < bins; ++j) w.at(k, j) = centers[j];
    return w;
}

Tensor collapse_bins(const BinnedMap& pred, const Tensor& weights) {
    if (pred.kind != BinKind::probability) throw std::invalid_argument("collapse_bins: expected a probability map");
    check_weights(pred.data.shape(), weights.shape(), "collapse_bins");
    return collapse_values(pred.data, weights);
}

Var collapse_bins(const Var& probabilities, const Var& weights) {
    check_weights(probabilities.shape(), weights.shape(), "collapse_bins");
    if (&probabilities.tape() != &weights.tape()) throw std::logic_error("operands recorded on different tapes");
    return probabilities.tape().record(
        "collapse_bins", collapse_values(probabilities.value(), weights.value()), {probabilities, weights},
        [probabilities, weights](const Tensor& g, const Tensor&) {
            const Tensor& p = probabilities.value();
            const Tensor& w = weights.value();
            const std::size_t c = p.dim(0), b = p.dim(1), plane = p.dim(2) * p.dim(3);
            Tape& tape = probabilities.tape();
            if (probabilities.requires_grad()) {
                Tensor gp(p.shape());
                for (std::size_t k = 0; k < c; ++k)
                    for (std::size_t j = 0; j < b; ++j)
                        for (std::size_t i = 0; i < plane; ++i)
                            gp[(k * b + j) * plane + i] = g[k * plane + i] * w.at(k, j);
                tape.accumulate(probabilities, gp);
            }
            if (weights.requires_grad()) {
                Tensor gw(w.shape());
                for (std::size_t k = 0; k < c; ++k)
                    for (std::size_t j = 0; j < b; ++j) {
                        double acc = 0.0;
                        for (std::size_t i = 0; i < plane; ++i) acc += g[k * plane + i] * p[(k * b + j) * plane + i];
                        gw.at(k, j) = acc;
                    }
                tape.accumulate(weights, gw);
            }
        });
}

}  // namespace pinet
