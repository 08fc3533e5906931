#pragma once

#include <cstddef>

#include "pinet/autodiff.h"
#include "pinet/geometry.h"
#include "pinet/tensor.h"

namespace pinet {

/// Per-angle projection images (p, d2, d3): transverse coordinate s by axial z.
struct ProjectionStack {
    Tensor data;
    AngleSet angles;
};

enum class RampPadding {
    zero_padded,  // next power of two >= 2 * length
    circular,     // period equal to the profile length
};

struct RampFilterOptions {
    RampPadding padding = RampPadding::zero_padded;
    bool hann = false;
};

// Plain projection: rotate by the angle, then sum over the first axis.
Tensor radon_plain(const Tensor& volume, double degrees);
ProjectionStack radon_plain(const Tensor& volume, const AngleSet& angles);
Var radon_plain(const Var& volume, double degrees);

/// Projection from direction `degrees + 90`, indexed by (depth t along `degrees`, axial z).
Tensor radon_orthogonal(const Tensor& volume, double degrees);
Var radon_orthogonal(const Var& volume, double degrees);

/// out(s,z) = sum_t rot(volume)(t,s,z) * w(t,z) with w = floor + (1 - floor) * mask.
/// The mask has shape (d1, d3) and entries in [0, 1].
Tensor radon_weighted(const Tensor& volume, double degrees, const Tensor& mask, double floor = 0.0);
Var radon_weighted(const Var& volume, double degrees, const Var& mask, double floor = 0.0);

/// Exact adjoint of radon_plain over the stack's angles.
Tensor backproject(const ProjectionStack& stack);

/// Symmetric Toeplitz matrix (n x n) applying the discrete ramp filter to a profile.
/// Zero padded: the band-limited Ram-Lak kernel (1/4, 0 at even lags, -1/(pi k)^2 at odd
/// lags), whose response is |nu|. Circular: |nu| sampled on the period-n grid.
Tensor ramp_filter_matrix(std::size_t n, const RampFilterOptions& options = {});
ProjectionStack ramp_filter(const ProjectionStack& stack, const RampFilterOptions& options = {});

/// (pi / p) * backproject(ramp_filter(stack)), restricted to the inscribed cylinder
/// (voxels outside it see only part of the angles and are set to zero).
Tensor fbp(const ProjectionStack& stack, const RampFilterOptions& options = {});
Var fbp(const Var& stack, const AngleSet& angles, const RampFilterOptions& options = {});

/// Learnable lift parameters, channel-first over c classes.
struct LiftParams {
    Tensor kernel;  // (c, k, k), odd k
    Tensor scale;   // (c)
    Tensor bias;    // (c)

    /// Delta kernel, scale 10 and bias -5: a soft threshold at 0.5.
    static LiftParams initial(std::size_t classes, std::size_t kernel_size = 5);
};

/// Per class: smooth every angle image with the class kernel, reconstruct with fbp,
/// then sigmoid(scale * r + bias). Input (c, p, d2, d3), output (c, d1, d2, d3).
Var lift(const Var& collapsed, const Var& kernel, const Var& scale, const Var& bias,
         const AngleSet& angles, const RampFilterOptions& options = {});
Tensor lift(const Tensor& collapsed, const LiftParams& params, const AngleSet& angles,
            const RampFilterOptions& options = {});
/// Pre-sigmoid reconstruction r for every class; used to calibrate scale and bias.
Tensor lift_response(const Tensor& collapsed, const Tensor& kernel, const AngleSet& angles,
                     const RampFilterOptions& options = {});

}  // namespace pinet
