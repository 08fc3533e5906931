#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "pinet/autodiff.h"
#include "pinet/random.h"
#include "pinet/tensor.h"

namespace pinet {

enum class HeadKind {
    softmax_bins,  // classes * bins channels, softmax over the bins of each class
    sigmoid,       // classes channels, elementwise sigmoid
};

struct UNetConfig {
    std::size_t depth = 3;  // number of 2x2 poolings
    std::size_t base_filters = 16;
    std::size_t in_channels = 1;
    HeadKind head = HeadKind::sigmoid;
    std::size_t classes = 1;
    std::size_t bins = 1;  // used by the softmax head only

    std::size_t out_channels() const;
    /// Channel count at level l (l == depth is the bottleneck).
    std::size_t filters(std::size_t level) const;
    /// Throws std::invalid_argument naming the required multiple when H or W is not
    /// divisible by 2^depth.
    void require_divisible(std::size_t height, std::size_t width) const;
    void validate() const;
};

nlohmann::json to_json(const UNetConfig& config);
UNetConfig unet_config_from_json(const nlohmann::json& j);

/// Sum of kh*kw*c_in*c_out + c_out over every convolution of the network.
std::size_t unet_parameter_count(const UNetConfig& config);

/// Named tensors in name order. Names are unique.
class ParameterStore {
  public:
    void add(const std::string& name, Tensor value);
    void set(const std::string& name, Tensor value);
    bool contains(const std::string& name) const;
    const Tensor& get(const std::string& name) const;
    Tensor& get(const std::string& name);

    std::vector<std::string> names() const;
    /// Total element count, optionally restricted to names starting with `prefix`.
    std::size_t parameter_count(const std::string& prefix = "") const;
    const std::map<std::string, Tensor>& entries() const { return entries_; }

    /// Bitwise equality of names, shapes and payloads.
    bool identical(const ParameterStore& other) const;

  private:
    std::map<std::string, Tensor> entries_;
};

/// Adds "<prefix>.enc{l}.conv{1,2}", "<prefix>.mid.conv{1,2}", "<prefix>.up{l}",
/// "<prefix>.dec{l}.conv{1,2}" and "<prefix>.head" kernels and biases. Kernels are
/// He-uniform (bound sqrt(6 / fan_in)), biases zero.
void init_unet(ParameterStore& store, const std::string& prefix, const UNetConfig& config, Rng& rng);

/// Parameters of a store placed on a tape. Names selected by `trainable` become
/// gradient-carrying variables, the others constants.
class BoundParameters {
  public:
    BoundParameters(Tape& tape, const ParameterStore& store,
                    const std::function<bool(const std::string&)>& trainable);

    const Var& operator[](const std::string& name) const;
    /// Trainable entries in name order.
    const std::vector<std::pair<std::string, Var>>& trainable() const { return trainable_; }

  private:
    std::map<std::string, Var> vars_;
    std::vector<std::pair<std::string, Var>> trainable_;
};

/// U-net on a (in_channels, H, W) image: two same-padded 3x3 conv + ReLU per level,
/// 2x2 max pooling down, 2x2 transposed convolution up with skip concatenation, and a
/// 1x1 head. The softmax head returns (classes*bins, H, W) normalised over the bins of
/// each class; the sigmoid head returns (classes, H, W).
Var unet_forward(const UNetConfig& config, const BoundParameters& params, const std::string& prefix,
                 const Var& image);
Tensor unet_forward(const UNetConfig& config, const ParameterStore& store, const std::string& prefix,
                    const Tensor& image);

/// z-scores the orthogonal projection (d1, d3) and runs the sigmoid network:
/// one mask per class, shape (c, d1, d3), entries in [0, 1].
Tensor psi_mask(const UNetConfig& config, const ParameterStore& store, const Tensor& orthogonal_projection);
Var psi_mask(const UNetConfig& config, const BoundParameters& params, const Var& orthogonal_projection);

/// Indicator of radon_orthogonal(mask, degrees) > 0.5 per class: the line crosses at least half a
/// voxel of the target. Accepts a binary mask (d1, d2, d3) or (c, d1, d2, d3); returns (c, d1, d3).
Tensor psi_target(const Tensor& mask_volume, double degrees);

/// Binary checkpoint: "PINETCKP", u32 format version, u64 header length, a JSON header
/// {"config": ..., "parameters": [{"name", "shape"}...]}, then every tensor as raw
/// little-endian 64-bit floats in header order.
void save_checkpoint(const std::string& path, const ParameterStore& store, const nlohmann::json& config);
struct Checkpoint {
    ParameterStore store;
    nlohmann::json config;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace pinet
