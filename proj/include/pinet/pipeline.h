#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "json.hpp"
#include "pinet/autodiff.h"
#include "pinet/geometry.h"
#include "pinet/networks.h"
#include "pinet/radon.h"

namespace pinet {

struct PiNetConfig {
    std::size_t orientations = 1;  // v
    double sampling_factor = 2.0;  // M
    std::size_t bins = 5;          // b
    std::size_t classes = 1;       // c
    double threshold = 0.5;        // tau
    bool weighted = true;
    double mask_floor = 0.0;       // w_min of the weighted projection
    std::size_t lift_kernel = 5;
    RampFilterOptions ramp;
    UNetConfig psi;  // in_channels 1, sigmoid head over c classes
    UNetConfig phi;  // in_channels c, softmax head over c classes and b bins

    /// Fills the derived network fields (channels, heads, classes, bins).
    void finalize();
    void validate() const;
    AngleSet angles(std::size_t extent) const;
};

nlohmann::json to_json(const PiNetConfig& config);
PiNetConfig pinet_config_from_json(const nlohmann::json& j);

/// Fresh parameters: "psi.*", "phi.*", "lift.kernel" (c,k,k) delta, "lift.scale" (c) 10,
/// "lift.bias" (c) -5, "bins.weights" (c,b) bin centers, "fusion.weights" (v,c) ones.
ParameterStore init_parameters(const PiNetConfig& config, std::uint64_t seed);

/// Zero-pads the first two axes to a common extent; v > 1 pads to a cube.
/// Accepts (d1,d2,d3) or channel-first (c,d1,d2,d3).
Tensor pad_to_square(const Tensor& volume, bool cube);

/// Throws before any heavy compute when the volume cannot be processed.
void check_input(const PiNetConfig& config, const Shape& volume_shape);

/// Input of the projection network for one oriented volume and angle: the z-scored
/// weighted projection per class (c, d2, d3). Unweighted mode repeats the plain projection.
Tensor phi_input(const PiNetConfig& config, const ParameterStore& params, const Tensor& oriented, double degrees);

/// Bin probabilities of every angle for one orientation, laid out (c, b, p*d2, d3) so a
/// single collapse yields (c, p*d2, d3).
Tensor projection_probabilities(const PiNetConfig& config, const ParameterStore& params, const Tensor& oriented,
                                const AngleSet& angles);

/// Collapse, then lift of one orientation: (c, b, p*d2, d3) -> (c, d1, d2, d3).
Var lift_orientation(const PiNetConfig& config, const BoundParameters& params, const Var& probabilities,
                     const AngleSet& angles);

/// (1/v) sum_l orient_inverse(y_l) * W[l, k].
Var fuse(const std::vector<Var>& oriented_outputs, const Var& weights);
Tensor fuse(const std::vector<Tensor>& oriented_outputs, const Tensor& weights);

/// 1 where soft >= tau.
Tensor threshold(const Tensor& soft, double tau = 0.5);

/// Cached network outputs of one volume; valid while the networks stay fixed.
struct ForwardCache {
    std::vector<Tensor> probabilities;  // per orientation
};
ForwardCache forward_cache(const PiNetConfig& config, const ParameterStore& params, const Tensor& volume);

/// Soft segmentation (c, d1, d2, d3) from cached network outputs; differentiable in the
/// lift, bin and fusion parameters.
Var forward_from_cache(const PiNetConfig& config, const BoundParameters& params, const ForwardCache& cache,
                       const AngleSet& angles);

/// Fully differentiable forward including both networks.
Var forward(const PiNetConfig& config, const BoundParameters& params, const Tensor& volume);
/// Inference on the (padded) volume; result is cropped back to the input extents.
Tensor forward(const PiNetConfig& config, const ParameterStore& params, const Tensor& volume);

}  // namespace pinet
