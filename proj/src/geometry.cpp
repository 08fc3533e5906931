#include "pinet/geometry.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <utility>
#include <numbers>
#include <stdexcept>
#include <string>

namespace pinet {

double AngleSet::spacing() const {
    if (extent == 0 || sampling_factor <= 0.0) {
        if (degrees.size() >= 2) return degrees[1] - degrees[0];
        return 180.0;
    }
    return 180.0 * sampling_factor / (static_cast<double>(extent) * std::numbers::pi);
}

AngleSet angle_set(std::size_t extent, double sampling_factor) {
    if (extent < 2) throw std::invalid_argument("angle_set: extent must be at least 2");
    if (!(sampling_factor > 0.0) || !std::isfinite(sampling_factor))
        throw std::invalid_argument("angle_set: sampling factor must be positive");
    const double span = static_cast<double>(extent) * std::numbers::pi / sampling_factor;
    const auto count = static_cast<std::size_t>(std::floor(span));
    if (count == 0) {
        throw std::invalid_argument("angle_set: extent " + std::to_string(extent) +
                                    " with sampling factor " + std::to_string(sampling_factor) +
                                    " yields no angles");
    }
    AngleSet set;
    set.sampling_factor = sampling_factor;
    set.extent = extent;
    const double step = 180.0 * sampling_factor / (static_cast<double>(extent) * std::numbers::pi);
    set.degrees.reserve(count);
    for (std::size_t k = 0; k < count; ++k) set.degrees.push_back(static_cast<double>(k) * step - 90.0);
    return set;
}

AngleSet angle_list(std::vector<double> degrees) {
    AngleSet set;
    set.degrees = std::move(degrees);
    return set;
}

double sampling_factor_for_count(std::size_t extent, std::size_t count) {
    if (count == 0) throw std::invalid_argument("sampling_factor_for_count: count must be positive");
    return static_cast<double>(extent) * std::numbers::pi / (static_cast<double>(count) + 0.5);
}

Orientation orientation_from_index(int index) {
    if (index < 1 || index > 3) {
        throw std::invalid_argument("orientation index must be 1, 2 or 3, got " + std::to_string(index));
    }
    return static_cast<Orientation>(index);
}

namespace {

// Oriented extents of a (d1,d2,d3) block.
std::array<std::size_t, 3> rotated_extents(std::size_t d1, std::size_t d2, std::size_t d3, Orientation o) {
    switch (o) {
        case Orientation::identity:
            return {d1, d2, d3};
        case Orientation::about_first_axis:
            return {d1, d3, d2};
        case Orientation::about_second_axis:
            return {d3, d2, d1};
    }
    throw std::logic_error("unknown orientation");
}

// Extents of the original block whose oriented extents are (o1,o2,o3).
std::array<std::size_t, 3> original_extents(std::size_t o1, std::size_t o2, std::size_t o3, Orientation o) {
    switch (o) {
        case Orientation::identity:
            return {o1, o2, o3};
        case Orientation::about_first_axis:
            return {o1, o3, o2};
        case Orientation::about_second_axis:
            return {o3, o2, o1};
    }
    throw std::logic_error("unknown orientation");
}

// Moves voxels between an original block (d1,d2,d3) and its oriented counterpart.
// Q2: out[i,j,k] = in[i, d2-1-k, j];  Q3: out[i,j,k] = in[d1-1-k, j, i].
void permute_block(const double* src, double* dst, std::size_t d1, std::size_t d2, std::size_t d3,
                   Orientation o, bool inverse) {
    const auto ext = rotated_extents(d1, d2, d3, o);
    for (std::size_t a = 0; a < d1; ++a) {
        for (std::size_t b = 0; b < d2; ++b) {
            for (std::size_t c = 0; c < d3; ++c) {
                std::size_t i = a, j = b, k = c;
                if (o == Orientation::about_first_axis) {
                    i = a;
                    j = c;
                    k = d2 - 1 - b;
                } else if (o == Orientation::about_second_axis) {
                    i = c;
                    j = b;
                    k = d1 - 1 - a;
                }
                const std::size_t original = (a * d2 + b) * d3 + c;
                const std::size_t oriented = (i * ext[1] + j) * ext[2] + k;
                if (inverse) {
                    dst[original] = src[oriented];
                } else {
                    dst[oriented] = src[original];
                }
            }
        }
    }
}

Tensor permute(const Tensor& volume, Orientation o, bool inverse) {
    if (volume.rank() != 3 && volume.rank() != 4) {
        throw ShapeError("orient: expected (d1,d2,d3) or (c,d1,d2,d3), got " + to_string(volume.shape()));
    }
    if (o == Orientation::identity) return volume;
    const std::size_t lead = volume.rank() == 4 ? 1 : 0;
    const std::size_t channels = lead ? volume.dim(0) : 1;
    const Shape& s = volume.shape();
    std::array<std::size_t, 3> original{};
    std::array<std::size_t, 3> oriented{};
    if (inverse) {
        oriented = {s[lead], s[lead + 1], s[lead + 2]};
        original = original_extents(oriented[0], oriented[1], oriented[2], o);
    } else {
        original = {s[lead], s[lead + 1], s[lead + 2]};
        oriented = rotated_extents(original[0], original[1], original[2], o);
    }
    const auto& out_ext = inverse ? original : oriented;
    Shape out_shape;
    if (lead) out_shape.push_back(channels);
    out_shape.insert(out_shape.end(), out_ext.begin(), out_ext.end());
    Tensor out(out_shape);
    const std::size_t block = original[0] * original[1] * original[2];
    for (std::size_t ch = 0; ch < channels; ++ch) {
        permute_block(volume.data() + ch * block, out.data() + ch * block, original[0], original[1],
                      original[2], o, inverse);
    }
    return out;
}

}  // namespace

Shape oriented_shape(const Shape& shape, Orientation orientation) {
    if (shape.size() != 3 && shape.size() != 4) {
        throw ShapeError("oriented_shape: expected rank 3 or 4, got " + to_string(shape));
    }
    const std::size_t lead = shape.size() == 4 ? 1 : 0;
    const auto ext = rotated_extents(shape[lead], shape[lead + 1], shape[lead + 2], orientation);
    Shape out;
    if (lead) out.push_back(shape[0]);
    out.insert(out.end(), ext.begin(), ext.end());
    return out;
}

Tensor orient(const Tensor& volume, Orientation orientation) { return permute(volume, orientation, false); }

Tensor orient_inverse(const Tensor& volume, Orientation orientation) {
    return permute(volume, orientation, true);
}

Var orient(const Var& volume, Orientation orientation) {
    return volume.tape().record("orient", orient(volume.value(), orientation), {volume},
                                [volume, orientation](const Tensor& g, const Tensor&) {
                                    volume.tape().accumulate(volume, orient_inverse(g, orientation));
                                });
}

Var orient_inverse(const Var& volume, Orientation orientation) {
    return volume.tape().record("orient_inverse", orient_inverse(volume.value(), orientation), {volume},
                                [volume, orientation](const Tensor& g, const Tensor&) {
                                    volume.tape().accumulate(volume, orient(g, orientation));
                                });
}

namespace {

// Source pixel of an exact quarter-turn rotation: new[i,j] = old[j, n-1-i] per turn.
std::pair<long, long> quarter_turn_source(long i, long j, long n, long turns) {
    switch (turns) {
        case 1: return {j, n - 1 - i};
        case 2: return {n - 1 - i, n - 1 - j};
        case 3: return {n - 1 - j, i};
        default: return {i, j};
    }
}

// Cubic convolution (Keys, a = -1/2) at a fractional position: four integer neighbours
// whose weights sum to one.
constexpr int kTaps = 4;
struct LinearTaps {
    long index[kTaps];
    double weight[kTaps];
};

LinearTaps linear_taps(double position) {
    const double base = std::floor(position);
    const double f = position - base;
    const auto k = static_cast<long>(base);
    if (f == 0.0) return {{k, k + 1, k - 1, k + 2}, {1.0, 0.0, 0.0, 0.0}};
    const double a = -0.5;
    auto near = [a](double x) { return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0; };
    auto far = [a](double x) { return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a; };
    return {{k - 1, k, k + 1, k + 2}, {far(1.0 + f), near(f), near(1.0 - f), far(2.0 - f)}};
}

}  // namespace

InplaneRotation::InplaneRotation(std::size_t n, double degrees) : n_(n) {
    if (n == 0) throw ShapeError("InplaneRotation: empty grid");
    offsets_.reserve(n * n + 1);
    offsets_.push_back(0);
    const double quarters = degrees / 90.0;
    const double nearest = std::round(quarters);
    exact_ = std::abs(quarters - nearest) < 1e-12;
    const long turns = ((static_cast<long>(nearest) % 4) + 4) % 4;
    const auto limit = static_cast<long>(n);

    if (exact_) {
        for (long i = 0; i < limit; ++i) {
            for (long j = 0; j < limit; ++j) {
                const auto [si, sj] = quarter_turn_source(i, j, limit, turns);
                taps_.push_back(Tap{static_cast<std::uint32_t>(si * limit + sj), 1.0});
                offsets_.push_back(static_cast<std::uint32_t>(taps_.size()));
            }
        }
        return;
    }

    // Quarter turns are exact; the residual angle in [-45, 45] is applied as three shears
    // (rows, columns, rows), each a linear-interpolation shift along one axis. Every shift is
    // a convolution with weights summing to one, so constants and interior mass are preserved.
    const double residual = (degrees - nearest * 90.0) * std::numbers::pi / 180.0;
    const double t = std::tan(residual / 2.0);
    const double s = std::sin(residual);
    const double center = (static_cast<double>(n) - 1.0) / 2.0;

    std::map<std::uint32_t, double> row;
    for (long i = 0; i < limit; ++i) {
        for (long j = 0; j < limit; ++j) {
            row.clear();
            const LinearTaps third = linear_taps(static_cast<double>(i) + t * (static_cast<double>(j) - center));
            for (int a = 0; a < kTaps; ++a) {
                const long i2 = third.index[a];
                const LinearTaps second =
                    linear_taps(static_cast<double>(j) - s * (static_cast<double>(i2) - center));
                for (int b = 0; b < kTaps; ++b) {
                    const long j1 = second.index[b];
                    const LinearTaps first =
                        linear_taps(static_cast<double>(i2) + t * (static_cast<double>(j1) - center));
                    for (int c = 0; c < kTaps; ++c) {
                        const double w = third.weight[a] * second.weight[b] * first.weight[c];
                        const long i1 = first.index[c];
                        if (w == 0.0 || i1 < 0 || i1 >= limit || j1 < 0 || j1 >= limit) continue;
                        const auto [si, sj] = quarter_turn_source(i1, j1, limit, turns);
                        row[static_cast<std::uint32_t>(si * limit + sj)] += w;
                    }
                }
            }
            for (const auto& [source, weight] : row) taps_.push_back(Tap{source, weight});
            offsets_.push_back(static_cast<std::uint32_t>(taps_.size()));
        }
    }
}

void InplaneRotation::apply(const double* in, double* out, std::size_t depth) const {
    const std::size_t pixels = n_ * n_;
    for (std::size_t p = 0; p < pixels; ++p) {
        double* dst = out + p * depth;
        std::fill(dst, dst + depth, 0.0);
        for (std::uint32_t t = offsets_[p]; t < offsets_[p + 1]; ++t) {
            const double* src = in + taps_[t].source * depth;
            const double w = taps_[t].weight;
            for (std::size_t z = 0; z < depth; ++z) dst[z] += w * src[z];
        }
    }
}

void InplaneRotation::apply_adjoint_add(const double* out_grad, double* in_adj, std::size_t depth) const {
    const std::size_t pixels = n_ * n_;
    for (std::size_t p = 0; p < pixels; ++p) {
        const double* g = out_grad + p * depth;
        for (std::uint32_t t = offsets_[p]; t < offsets_[p + 1]; ++t) {
            double* dst = in_adj + taps_[t].source * depth;
            const double w = taps_[t].weight;
            for (std::size_t z = 0; z < depth; ++z) dst[z] += w * g[z];
        }
    }
}

void InplaneRotation::project_add(const double* in, double* proj, std::size_t depth, int summed_axis) const {
    for (std::size_t i = 0; i < n_; ++i) {
        for (std::size_t j = 0; j < n_; ++j) {
            const std::size_t p = i * n_ + j;
            double* dst = proj + (summed_axis == 0 ? j : i) * depth;
            for (std::uint32_t t = offsets_[p]; t < offsets_[p + 1]; ++t) {
                const double* src = in + taps_[t].source * depth;
                const double w = taps_[t].weight;
                for (std::size_t z = 0; z < depth; ++z) dst[z] += w * src[z];
            }
        }
    }
}

void InplaneRotation::project_adjoint_add(const double* proj, double* in_adj, std::size_t depth,
                                          int summed_axis) const {
    for (std::size_t i = 0; i < n_; ++i) {
        for (std::size_t j = 0; j < n_; ++j) {
            const std::size_t p = i * n_ + j;
            const double* g = proj + (summed_axis == 0 ? j : i) * depth;
            for (std::uint32_t t = offsets_[p]; t < offsets_[p + 1]; ++t) {
                double* dst = in_adj + taps_[t].source * depth;
                const double w = taps_[t].weight;
                for (std::size_t z = 0; z < depth; ++z) dst[z] += w * g[z];
            }
        }
    }
}

void require_square_inplane(const Shape& shape, const char* what) {
    if (shape.size() != 3) {
        throw ShapeError(std::string(what) + ": expected a (d1,d2,d3) volume, got " + to_string(shape));
    }
    if (shape[0] != shape[1]) {
        throw ShapeError(std::string(what) + ": in-plane extents must be square (d1 == d2), got " +
                         to_string(shape));
    }
}

Tensor rotate_inplane(const Tensor& volume, double degrees) {
    require_square_inplane(volume.shape(), "rotate_inplane");
    const InplaneRotation rotation(volume.dim(0), degrees);
    Tensor out(volume.shape());
    rotation.apply(volume.data(), out.data(), volume.dim(2));
    return out;
}

Var rotate_inplane(const Var& volume, double degrees) {
    require_square_inplane(volume.shape(), "rotate_inplane");
    const InplaneRotation rotation(volume.value().dim(0), degrees);
    Tensor out(volume.shape());
    const std::size_t depth = volume.value().dim(2);
    rotation.apply(volume.value().data(), out.data(), depth);
    return volume.tape().record("rotate_inplane", std::move(out), {volume},
                                [volume, degrees, depth](const Tensor& g, const Tensor&) {
                                    if (!volume.requires_grad()) return;
                                    const InplaneRotation r(volume.value().dim(0), degrees);
                                    r.apply_adjoint_add(g.data(), volume.tape().grad_buffer(volume).data(),
                                                        depth);
                                });
}

}  // namespace pinet
