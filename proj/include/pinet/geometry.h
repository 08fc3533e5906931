#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "pinet/autodiff.h"
#include "pinet/tensor.h"

namespace pinet {

/// Equidistant projection directions in degrees covering [-90, 90).
///
/// For an in-plane extent d1 and sampling factor M there are floor(d1*pi/M) angles
/// with spacing 180*M/(d1*pi). M = 2 is the Nyquist setting.
struct AngleSet {
    std::vector<double> degrees;
    double sampling_factor = 0.0;
    std::size_t extent = 0;

    std::size_t size() const noexcept { return degrees.size(); }
    double spacing() const;
};

AngleSet angle_set(std::size_t extent, double sampling_factor);
/// Explicit angle list; sampling_factor and extent are left at zero.
AngleSet angle_list(std::vector<double> degrees);
/// Sampling factor M that yields exactly `count` angles for `extent`.
double sampling_factor_for_count(std::size_t extent, std::size_t count);

/// Proper 90-degree volume rotations used to present a volume in other orientations.
enum class Orientation : int {
    identity = 1,
    about_first_axis = 2,   // (d1,d2,d3) -> (d1,d3,d2)
    about_second_axis = 3,  // (d1,d2,d3) -> (d3,d2,d1)
};

Orientation orientation_from_index(int index);
Shape oriented_shape(const Shape& shape, Orientation orientation);

/// Exact voxel permutation. Accepts (d1,d2,d3) or channel-first (c,d1,d2,d3).
Tensor orient(const Tensor& volume, Orientation orientation);
Tensor orient_inverse(const Tensor& volume, Orientation orientation);
Var orient(const Var& volume, Orientation orientation);
Var orient_inverse(const Var& volume, Orientation orientation);

/// Precomputed rotation of an n x n grid about its center ((n-1)/2, (n-1)/2),
/// counterclockwise in the (axis1, axis2) plane with axis1 pointing down. Quarter turns are
/// exact permutations; the remaining angle in [-45, 45] degrees is applied as three shears,
/// each a linear-interpolation shift along one axis. Samples outside the grid read zero.
/// Constants and the mass of interior content are preserved.
///
/// Data layout is (n, n, depth) row-major, so every in-plane pixel owns a contiguous
/// run of `depth` values along the third axis.
class InplaneRotation {
  public:
    InplaneRotation(std::size_t n, double degrees);

    std::size_t extent() const noexcept { return n_; }
    bool exact() const noexcept { return exact_; }

    /// out = R in
    void apply(const double* in, double* out, std::size_t depth) const;
    /// in_adj += R^T out_grad
    void apply_adjoint_add(const double* out_grad, double* in_adj, std::size_t depth) const;
    /// proj(row, z) += sum over the other in-plane axis of (R in); axis 0 gives the
    /// transverse profile (sum over rows), axis 1 the depth profile (sum over columns).
    void project_add(const double* in, double* proj, std::size_t depth, int summed_axis) const;
    /// in_adj += R^T replicate(proj) along the summed axis.
    void project_adjoint_add(const double* proj, double* in_adj, std::size_t depth, int summed_axis) const;

  private:
    struct Tap {
        std::uint32_t source;
        double weight;
    };
    std::size_t n_;
    bool exact_ = false;
    std::vector<std::uint32_t> offsets_;  // n*n + 1 entries into taps_
    std::vector<Tap> taps_;
};

/// Rotates every axial slice of (d1,d2,d3) by `degrees`; requires d1 == d2.
Tensor rotate_inplane(const Tensor& volume, double degrees);
Var rotate_inplane(const Var& volume, double degrees);

/// Square-extent check shared by all in-plane operators.
void require_square_inplane(const Shape& shape, const char* what);

}  // namespace pinet
