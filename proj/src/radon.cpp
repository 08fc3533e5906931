#include "pinet/radon.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "pinet/ops.h"

namespace pinet {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

Tensor project(const Tensor& volume, double degrees, int summed_axis, const char* what) {
    require_square_inplane(volume.shape(), what);
    const std::size_t n = volume.dim(0);
    const std::size_t depth = volume.dim(2);
    const InplaneRotation rotation(n, degrees);
    Tensor out({n, depth});
    rotation.project_add(volume.data(), out.data(), depth, summed_axis);
    return out;
}

Var project(const Var& volume, double degrees, int summed_axis, const char* what) {
    Tensor out = project(volume.value(), degrees, summed_axis, what);
    return volume.tape().record(what, std::move(out), {volume},
                                [volume, degrees, summed_axis](const Tensor& g, const Tensor&) {
                                    if (!volume.requires_grad()) return;
                                    const Tensor& v = volume.value();
                                    const InplaneRotation r(v.dim(0), degrees);
                                    r.project_adjoint_add(g.data(), volume.tape().grad_buffer(volume).data(),
                                                          v.dim(2), summed_axis);
                                });
}

void check_stack(const Tensor& data, const AngleSet& angles, const char* what) {
    require_rank(data, 3, what);
    if (angles.size() == 0) throw std::invalid_argument(std::string(what) + ": empty angle set");
    if (data.dim(0) != angles.size()) {
        throw ShapeError(std::string(what) + ": stack " + to_string(data.shape()) + " has " +
                         std::to_string(data.dim(0)) + " images but the angle set has " +
                         std::to_string(angles.size()));
    }
}

void check_mask(const Tensor& mask, std::size_t depth_extent, std::size_t axial_extent) {
    if (mask.rank() != 2 || mask.dim(0) != depth_extent || mask.dim(1) != axial_extent) {
        throw ShapeError("radon_weighted: mask must be (" + std::to_string(depth_extent) + "," +
                         std::to_string(axial_extent) + "), got " + to_string(mask.shape()));
    }
    for (double q : mask.values()) {
        if (!(q >= 0.0 && q <= 1.0)) {
            throw std::invalid_argument("radon_weighted: mask entries must lie in [0,1], found " +
                                        std::to_string(q));
        }
    }
}

// F applied to every (n, depth) image of a (p, n, depth) stack.
Tensor filter_stack(const Tensor& filter, const Tensor& data) {
    const std::size_t p = data.dim(0), n = data.dim(1), depth = data.dim(2);
    Tensor out(data.shape());
    ConstMatrixMap f(filter.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t a = 0; a < p; ++a) {
        ConstMatrixMap in(data.data() + a * n * depth, static_cast<Eigen::Index>(n),
                          static_cast<Eigen::Index>(depth));
        MatrixMap(out.data() + a * n * depth, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(depth))
            .noalias() = f * in;
    }
    return out;
}

Tensor backproject_data(const Tensor& data, const AngleSet& angles) {
    const std::size_t p = data.dim(0), n = data.dim(1), depth = data.dim(2);
    Tensor volume({n, n, depth});
    for (std::size_t a = 0; a < p; ++a) {
        const InplaneRotation rotation(n, angles.degrees[a]);
        rotation.project_adjoint_add(data.data() + a * n * depth, volume.data(), depth, 0);
    }
    return volume;
}

}  // namespace

Tensor radon_plain(const Tensor& volume, double degrees) { return project(volume, degrees, 0, "radon_plain"); }

ProjectionStack radon_plain(const Tensor& volume, const AngleSet& angles) {
    require_square_inplane(volume.shape(), "radon_plain");
    if (angles.size() == 0) throw std::invalid_argument("radon_plain: empty angle set");
    const std::size_t n = volume.dim(0), depth = volume.dim(2);
    ProjectionStack stack{Tensor({angles.size(), n, depth}), angles};
    for (std::size_t a = 0; a < angles.size(); ++a) {
        const InplaneRotation rotation(n, angles.degrees[a]);
        rotation.project_add(volume.data(), stack.data.data() + a * n * depth, depth, 0);
    }
    return stack;
}

Var radon_plain(const Var& volume, double degrees) { return project(volume, degrees, 0, "radon_plain"); }

Tensor radon_orthogonal(const Tensor& volume, double degrees) {
    return project(volume, degrees, 1, "radon_orthogonal");
}

Var radon_orthogonal(const Var& volume, double degrees) {
    return project(volume, degrees, 1, "radon_orthogonal");
}

Tensor radon_weighted(const Tensor& volume, double degrees, const Tensor& mask, double floor) {
    Tape tape;
    return radon_weighted(tape.constant(volume), degrees, tape.constant(mask), floor).value();
}

Var radon_weighted(const Var& volume, double degrees, const Var& mask, double floor) {
    if (&volume.tape() != &mask.tape()) throw std::logic_error("radon_weighted: operands on different tapes");
    require_square_inplane(volume.shape(), "radon_weighted");
    const Tensor& x = volume.value();
    const std::size_t n = x.dim(0), depth = x.dim(2);
    check_mask(mask.value(), n, depth);
    if (!(floor >= 0.0 && floor < 1.0)) throw std::invalid_argument("radon_weighted: floor must lie in [0,1)");

    Tensor weights(mask.shape());
    for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = floor + (1.0 - floor) * mask.value()[i];

    const InplaneRotation rotation(n, degrees);
    Tensor rotated(x.shape());
    rotation.apply(x.data(), rotated.data(), depth);

    Tensor out({n, depth});
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t s = 0; s < n; ++s) {
            const double* r = rotated.data() + (t * n + s) * depth;
            const double* w = weights.data() + t * depth;
            double* o = out.data() + s * depth;
            for (std::size_t z = 0; z < depth; ++z) o[z] += r[z] * w[z];
        }
    }

    const bool keep_rotated = mask.requires_grad();
    return volume.tape().record(
        "radon_weighted", std::move(out), {volume, mask},
        [volume, mask, degrees, floor, n, depth, weights = std::move(weights),
         rotated = keep_rotated ? std::move(rotated) : Tensor()](const Tensor& g, const Tensor&) {
            Tape& tape = volume.tape();
            if (volume.requires_grad()) {
                Tensor grad_rot({n, n, depth});
                for (std::size_t t = 0; t < n; ++t) {
                    for (std::size_t s = 0; s < n; ++s) {
                        double* dst = grad_rot.data() + (t * n + s) * depth;
                        const double* w = weights.data() + t * depth;
                        const double* gs = g.data() + s * depth;
                        for (std::size_t z = 0; z < depth; ++z) dst[z] = w[z] * gs[z];
                    }
                }
                const InplaneRotation r(n, degrees);
                r.apply_adjoint_add(grad_rot.data(), tape.grad_buffer(volume).data(), depth);
            }
            if (mask.requires_grad()) {
                Tensor& gq = tape.grad_buffer(mask);
                for (std::size_t t = 0; t < n; ++t) {
                    for (std::size_t s = 0; s < n; ++s) {
                        const double* r = rotated.data() + (t * n + s) * depth;
                        const double* gs = g.data() + s * depth;
                        double* dst = gq.data() + t * depth;
                        for (std::size_t z = 0; z < depth; ++z) dst[z] += (1.0 - floor) * r[z] * gs[z];
                    }
                }
            }
        });
}

Tensor backproject(const ProjectionStack& stack) {
    check_stack(stack.data, stack.angles, "backproject");
    return backproject_data(stack.data, stack.angles);
}

namespace {

// Band-limited ramp sampled in space: its DTFT is |nu| on [-1/2, 1/2].
double ram_lak_tap(long k) {
    if (k == 0) return 0.25;
    if (k % 2 == 0) return 0.0;
    const double kk = static_cast<double>(k);
    return -1.0 / (std::numbers::pi * std::numbers::pi * kk * kk);
}

// Real even sequence of length `period`: forward and inverse DFT are the same cosine sum.
std::vector<double> cosine_transform(const std::vector<double>& x) {
    const std::size_t period = x.size();
    std::vector<double> out(period);
    for (std::size_t m = 0; m < period; ++m) {
        double acc = 0.0;
        for (std::size_t k = 0; k < period; ++k) {
            const std::size_t phase = (m * k) % period;
            acc += x[k] * std::cos(2.0 * std::numbers::pi * static_cast<double>(phase) / static_cast<double>(period));
        }
        out[m] = acc;
    }
    return out;
}

// Zero every voxel whose in-plane center lies outside the inscribed disc.
void clear_outside_disc(Tensor& volume) {
    const std::size_t n = volume.dim(0), m = volume.dim(1), depth = volume.dim(2);
    const double center = (static_cast<double>(n) - 1.0) / 2.0;
    const double radius = static_cast<double>(n) / 2.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            if (std::hypot(static_cast<double>(i) - center, static_cast<double>(j) - center) <= radius) continue;
            std::fill_n(volume.data() + (i * m + j) * depth, depth, 0.0);
        }
    }
}

}  // namespace

Tensor ramp_filter_matrix(std::size_t n, const RampFilterOptions& options) {
    if (n == 0) throw ShapeError("ramp_filter_matrix: empty profile");
    std::vector<double> impulse;
    std::size_t period = n;
    if (options.padding == RampPadding::zero_padded) {
        period = 1;
        while (period < 2 * n) period *= 2;
        impulse.resize(period);
        for (std::size_t k = 0; k < period; ++k) {
            const long lag = k <= period / 2 ? static_cast<long>(k) : static_cast<long>(k) - static_cast<long>(period);
            impulse[k] = ram_lak_tap(lag);
        }
    } else {
        // Circular: sample |nu| directly so the DC term is exactly zero.
        std::vector<double> response(period);
        for (std::size_t m = 0; m < period; ++m)
            response[m] = static_cast<double>(std::min(m, period - m)) / static_cast<double>(period);
        impulse = cosine_transform(response);
        for (double& v : impulse) v /= static_cast<double>(period);
    }
    if (options.hann) {
        std::vector<double> response = cosine_transform(impulse);
        for (std::size_t m = 0; m < period; ++m) {
            const double nu = static_cast<double>(std::min(m, period - m)) / static_cast<double>(period);
            response[m] *= 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * nu));
        }
        impulse = cosine_transform(response);
        for (double& v : impulse) v /= static_cast<double>(period);
    }
    Tensor filter({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const std::size_t lag = (i + period - j) % period;
            filter.at(i, j) = impulse[lag];
        }
    }
    return filter;
}

ProjectionStack ramp_filter(const ProjectionStack& stack, const RampFilterOptions& options) {
    require_rank(stack.data, 3, "ramp_filter");
    return ProjectionStack{filter_stack(ramp_filter_matrix(stack.data.dim(1), options), stack.data), stack.angles};
}

Tensor fbp(const ProjectionStack& stack, const RampFilterOptions& options) {
    check_stack(stack.data, stack.angles, "fbp");
    Tensor volume = backproject_data(filter_stack(ramp_filter_matrix(stack.data.dim(1), options), stack.data),
                                     stack.angles);
    volume *= std::numbers::pi / static_cast<double>(stack.angles.size());
    clear_outside_disc(volume);
    return volume;
}

Var fbp(const Var& stack, const AngleSet& angles, const RampFilterOptions& options) {
    check_stack(stack.value(), angles, "fbp");
    const Tensor filter = ramp_filter_matrix(stack.value().dim(1), options);
    const double norm = std::numbers::pi / static_cast<double>(angles.size());
    Tensor volume = backproject_data(filter_stack(filter, stack.value()), angles);
    volume *= norm;
    clear_outside_disc(volume);
    return stack.tape().record("fbp", std::move(volume), {stack},
                               [stack, angles, filter, norm](const Tensor& grad_out, const Tensor&) {
                                   Tensor g = grad_out;
                                   clear_outside_disc(g);
                                   const std::size_t p = angles.size();
                                   const std::size_t n = g.dim(0), depth = g.dim(2);
                                   Tensor projections({p, n, depth});
                                   for (std::size_t a = 0; a < p; ++a) {
                                       const InplaneRotation r(n, angles.degrees[a]);
                                       r.project_add(g.data(), projections.data() + a * n * depth, depth, 0);
                                   }
                                   Tensor grad = filter_stack(filter, projections);
                                   grad *= norm;
                                   stack.tape().accumulate(stack, grad);
                               });
}

LiftParams LiftParams::initial(std::size_t classes, std::size_t kernel_size) {
    if (kernel_size % 2 == 0) throw ShapeError("lift kernel size must be odd");
    LiftParams params{Tensor({classes, kernel_size, kernel_size}), Tensor({classes}, 10.0),
                      Tensor({classes}, -5.0)};
    for (std::size_t c = 0; c < classes; ++c) params.kernel.at(c, kernel_size / 2, kernel_size / 2) = 1.0;
    return params;
}

Var lift(const Var& collapsed, const Var& kernel, const Var& scale, const Var& bias, const AngleSet& angles,
         const RampFilterOptions& options) {
    const Tensor& in = collapsed.value();
    require_rank(in, 4, "lift input");
    const std::size_t classes = in.dim(0), p = in.dim(1), n = in.dim(2), depth = in.dim(3);
    const Tensor& k = kernel.value();
    require_rank(k, 3, "lift kernel");
    if (k.dim(0) != classes || scale.value().size() != classes || bias.value().size() != classes) {
        throw ShapeError("lift: parameters " + to_string(k.shape()) + ", " + to_string(scale.shape()) + ", " +
                         to_string(bias.shape()) + " do not match " + std::to_string(classes) + " classes");
    }
    if (p != angles.size()) {
        throw ShapeError("lift: input has " + std::to_string(p) + " angles, angle set has " +
                         std::to_string(angles.size()));
    }
    std::vector<Var> per_class;
    per_class.reserve(classes);
    for (std::size_t c = 0; c < classes; ++c) {
        Var images = reshape(slice(collapsed, c, 1), {p, n, depth});
        Var kc = reshape(slice(kernel, c, 1), {k.dim(1), k.dim(2)});
        Var recon = fbp(conv2d_shared(images, kc), angles, options);
        per_class.push_back(sigmoid(affine(recon, element(scale, c), element(bias, c))));
    }
    return stack(per_class);
}

Tensor lift(const Tensor& collapsed, const LiftParams& params, const AngleSet& angles,
            const RampFilterOptions& options) {
    Tape tape;
    return lift(tape.constant(collapsed), tape.constant(params.kernel), tape.constant(params.scale),
                tape.constant(params.bias), angles, options)
        .value();
}

Tensor lift_response(const Tensor& collapsed, const Tensor& kernel, const AngleSet& angles,
                     const RampFilterOptions& options) {
    require_rank(collapsed, 4, "lift_response input");
    const std::size_t classes = collapsed.dim(0), p = collapsed.dim(1), n = collapsed.dim(2),
                      depth = collapsed.dim(3);
    Tape tape;
    Var in = tape.constant(collapsed);
    Var k = tape.constant(kernel);
    std::vector<Var> per_class;
    for (std::size_t c = 0; c < classes; ++c) {
        Var images = reshape(slice(in, c, 1), {p, n, depth});
        Var kc = reshape(slice(k, c, 1), {kernel.dim(1), kernel.dim(2)});
        per_class.push_back(fbp(conv2d_shared(images, kc), angles, options));
    }
    return stack(per_class).value();
}

}  // namespace pinet
