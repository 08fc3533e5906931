#include "pinet/pipeline.h"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "pinet/binning.h"
#include "pinet/ops.h"

namespace pinet {

namespace {

Tensor zscore_values(Tensor x, double floor = 1e-8) {
    const double n = static_cast<double>(x.size());
    const double mean = sum(x) / n;
    double var = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) var += (x[i] - mean) * (x[i] - mean);
    const double inv = 1.0 / std::sqrt(std::max(var / n, floor));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = (x[i] - mean) * inv;
    return x;
}

Tensor class_slice(const Tensor& t, std::size_t k) {
    Shape rest(t.shape().begin() + 1, t.shape().end());
    return t.slice(k, 1).reshaped(rest);
}

Var class_slice(const Var& t, std::size_t k) {
    Shape rest(t.shape().begin() + 1, t.shape().end());
    return reshape(slice(t, k, 1), rest);
}

// Per-angle (c*b, H, W) outputs -> (c, b, p*H, W).
Var regroup(const std::vector<Var>& per_angle, std::size_t classes, std::size_t bins) {
    const Shape& s = per_angle.front().shape();
    const std::size_t p = per_angle.size(), h = s[1], w = s[2];
    const Var stacked = reshape(stack(per_angle), {p, classes * bins, h * w});
    return reshape(swap_leading_axes(stacked), {classes, bins, p * h, w});
}

Tensor regroup(const std::vector<Tensor>& per_angle, std::size_t classes, std::size_t bins) {
    const Shape& s = per_angle.front().shape();
    const std::size_t p = per_angle.size(), cb = classes * bins, plane = s[1] * s[2];
    Tensor out({classes, bins, p * s[1], s[2]});
    for (std::size_t a = 0; a < p; ++a)
        for (std::size_t j = 0; j < cb; ++j)
            std::copy_n(per_angle[a].data() + j * plane, plane, out.data() + (j * p + a) * plane);
    return out;
}

Tensor crop(const Tensor& padded, const Shape& original) {
    // Both are channel-first (c, ...); the original sits centred in the padded grid.
    Tensor out(original);
    const std::size_t c = original[0];
    const std::size_t o1 = (padded.dim(1) - original[1]) / 2, o2 = (padded.dim(2) - original[2]) / 2,
                      o3 = (padded.dim(3) - original[3]) / 2;
    for (std::size_t k = 0; k < c; ++k)
        for (std::size_t i = 0; i < original[1]; ++i)
            for (std::size_t j = 0; j < original[2]; ++j)
                for (std::size_t z = 0; z < original[3]; ++z)
                    out.at(k, i, j, z) = padded.at(k, i + o1, j + o2, z + o3);
    return out;
}

}  // namespace

void PiNetConfig::finalize() {
    psi.in_channels = 1;
    psi.head = HeadKind::sigmoid;
    psi.classes = classes;
    psi.bins = 1;
    phi.in_channels = classes;
    phi.head = HeadKind::softmax_bins;
    phi.classes = classes;
    phi.bins = bins;
}

void PiNetConfig::validate() const {
    if (orientations < 1 || orientations > 3) throw std::invalid_argument("orientations v must be 1, 2 or 3");
    if (bins < 2) throw std::invalid_argument("bin count b must be at least 2");
    if (classes < 1) throw std::invalid_argument("class count c must be positive");
    if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("threshold tau must lie in (0, 1)");
    if (!(sampling_factor > 0.0)) throw std::invalid_argument("sampling factor M must be positive");
    if (mask_floor < 0.0 || mask_floor > 1.0) throw std::invalid_argument("mask floor must lie in [0, 1]");
    if (lift_kernel % 2 == 0) throw std::invalid_argument("lift kernel size must be odd");
    psi.validate();
    phi.validate();
}

AngleSet PiNetConfig::angles(std::size_t extent) const { return angle_set(extent, sampling_factor); }

nlohmann::json to_json(const PiNetConfig& c) {
    return {{"v", c.orientations},
            {"M", c.sampling_factor},
            {"b", c.bins},
            {"c", c.classes},
            {"tau", c.threshold},
            {"weighted", c.weighted},
            {"mask_floor", c.mask_floor},
            {"lift_kernel", c.lift_kernel},
            {"ramp_hann", c.ramp.hann},
            {"ramp_padding", c.ramp.padding == RampPadding::circular ? "circular" : "zero_padded"},
            {"psi", to_json(c.psi)},
            {"phi", to_json(c.phi)}};
}

PiNetConfig pinet_config_from_json(const nlohmann::json& j) {
    PiNetConfig c;
    c.orientations = j.value("v", c.orientations);
    c.sampling_factor = j.value("M", c.sampling_factor);
    c.bins = j.value("b", c.bins);
    c.classes = j.value("c", c.classes);
    c.threshold = j.value("tau", c.threshold);
    c.weighted = j.value("weighted", c.weighted);
    c.mask_floor = j.value("mask_floor", c.mask_floor);
    c.lift_kernel = j.value("lift_kernel", c.lift_kernel);
    c.ramp.hann = j.value("ramp_hann", false);
    const std::string padding = j.value("ramp_padding", std::string("zero_padded"));
    if (padding == "circular") {
        c.ramp.padding = RampPadding::circular;
    } else if (padding == "zero_padded") {
        c.ramp.padding = RampPadding::zero_padded;
    } else {
        throw std::invalid_argument("unknown ramp padding '" + padding + "'");
    }
    if (j.contains("psi")) c.psi = unet_config_from_json(j.at("psi"));
    if (j.contains("phi")) c.phi = unet_config_from_json(j.at("phi"));
    c.finalize();
    c.validate();
    return c;
}

ParameterStore init_parameters(const PiNetConfig& config, std::uint64_t seed) {
    config.validate();
    ParameterStore store;
    Rng rng(seed);
    init_unet(store, "psi", config.psi, rng);
    init_unet(store, "phi", config.phi, rng);
    const LiftParams lift = LiftParams::initial(config.classes, config.lift_kernel);
    store.add("lift.kernel", lift.kernel);
    store.add("lift.scale", lift.scale);
    store.add("lift.bias", lift.bias);
    store.add("bins.weights", initial_bin_weights(config.classes, config.bins));
    store.add("fusion.weights", Tensor({config.orientations, config.classes}, 1.0));
    return store;
}

Tensor pad_to_square(const Tensor& volume, bool cube) {
    const bool channels = volume.rank() == 4;
    if (!channels) require_rank(volume, 3, "pad_to_square");
    const Tensor v = channels ? volume : volume.reshaped({1, volume.dim(0), volume.dim(1), volume.dim(2)});
    const std::size_t d1 = v.dim(1), d2 = v.dim(2), d3 = v.dim(3);
    std::size_t n = std::max(d1, d2);
    if (cube) n = std::max(n, d3);
    const std::size_t e3 = cube ? n : d3;
    if (n == d1 && n == d2 && e3 == d3) return volume;
    Tensor out({v.dim(0), n, n, e3});
    const std::size_t o1 = (n - d1) / 2, o2 = (n - d2) / 2, o3 = (e3 - d3) / 2;
    for (std::size_t k = 0; k < v.dim(0); ++k)
        for (std::size_t i = 0; i < d1; ++i)
            for (std::size_t j = 0; j < d2; ++j)
                for (std::size_t z = 0; z < d3; ++z) out.at(k, i + o1, j + o2, z + o3) = v.at(k, i, j, z);
    return channels ? out : out.reshaped({n, n, e3});
}

void check_input(const PiNetConfig& config, const Shape& s) {
    if (s.size() != 3) throw ShapeError("PiNet input must be a (d1,d2,d3) volume, got " + to_string(s));
    if (s[0] != s[1]) throw ShapeError("PiNet input must be square in-plane, got " + to_string(s));
    if (config.orientations > 1 && s[2] != s[0]) {
        throw ShapeError("v > 1 needs a cubic volume, got " + to_string(s));
    }
    config.psi.require_divisible(s[0], s[2]);
    config.phi.require_divisible(s[1], s[2]);
    if (config.angles(s[0]).size() == 0) throw std::invalid_argument("angle set is empty for extent " + std::to_string(s[0]));
}

Tensor phi_input(const PiNetConfig& config, const ParameterStore& params, const Tensor& oriented, double degrees) {
    std::vector<Tensor> channels;
    if (config.weighted) {
        const Tensor q = psi_mask(config.psi, params, radon_orthogonal(oriented, degrees));
        for (std::size_t k = 0; k < config.classes; ++k) {
            channels.push_back(zscore_values(radon_weighted(oriented, degrees, class_slice(q, k), config.mask_floor)));
        }
    } else {
        const Tensor plain = zscore_values(radon_plain(oriented, degrees));
        channels.assign(config.classes, plain);
    }
    return stack(channels);
}

Tensor projection_probabilities(const PiNetConfig& config, const ParameterStore& params, const Tensor& oriented,
                                const AngleSet& angles) {
    std::vector<Tensor> per_angle;
    per_angle.reserve(angles.size());
    for (double deg : angles.degrees) {
        per_angle.push_back(unet_forward(config.phi, params, "phi", phi_input(config, params, oriented, deg)));
    }
    return regroup(per_angle, config.classes, config.bins);
}

Var lift_orientation(const PiNetConfig& config, const BoundParameters& params, const Var& probabilities,
                     const AngleSet& angles) {
    const Shape& s = probabilities.shape();
    const std::size_t p = angles.size();
    const Var collapsed = collapse_bins(probabilities, params["bins.weights"]);
    const Var stack_in = reshape(collapsed, {s[0], p, s[2] / p, s[3]});
    return lift(stack_in, params["lift.kernel"], params["lift.scale"], params["lift.bias"], angles, config.ramp);
}

Var fuse(const std::vector<Var>& oriented_outputs, const Var& weights) {
    const std::size_t v = oriented_outputs.size();
    if (v == 0) throw ShapeError("fuse of zero orientations");
    require_rank(weights.value(), 2, "fusion weights");
    if (weights.shape()[0] != v) {
        throw ShapeError("fusion weights " + to_string(weights.shape()) + " do not match " + std::to_string(v) +
                         " orientations");
    }
    Var total;
    for (std::size_t l = 0; l < v; ++l) {
        const Var y = orient_inverse(oriented_outputs[l], orientation_from_index(static_cast<int>(l) + 1));
        const std::size_t c = y.shape()[0];
        if (weights.shape()[1] != c) {
            throw ShapeError("fusion weights " + to_string(weights.shape()) + " do not match " + std::to_string(c) +
                             " classes");
        }
        if (total.valid() && y.shape() != total.shape()) {
            throw ShapeError("fuse: orientation " + std::to_string(l + 1) + " un-rotates to " + to_string(y.shape()) +
                             ", expected " + to_string(total.shape()));
        }
        Var weighted;
        for (std::size_t k = 0; k < c; ++k) {
            const Var part = scale_by(slice(y, k, 1), element(weights, l * c + k));
            weighted = weighted.valid() ? concat(weighted, part) : part;
        }
        total = total.valid() ? add(total, weighted) : weighted;
    }
    return v == 1 ? total : scale(total, 1.0 / static_cast<double>(v));
}

Tensor fuse(const std::vector<Tensor>& oriented_outputs, const Tensor& weights) {
    Tape tape;
    std::vector<Var> ys;
    for (const Tensor& y : oriented_outputs) ys.push_back(tape.constant(y));
    return fuse(ys, tape.constant(weights)).value();
}

Tensor threshold(const Tensor& soft, double tau) {
    Tensor out(soft.shape());
    for (std::size_t i = 0; i < soft.size(); ++i) out[i] = soft[i] >= tau ? 1.0 : 0.0;
    return out;
}

ForwardCache forward_cache(const PiNetConfig& config, const ParameterStore& params, const Tensor& volume) {
    check_input(config, volume.shape());
    ForwardCache cache;
    for (std::size_t l = 0; l < config.orientations; ++l) {
        const Tensor oriented = orient(volume, orientation_from_index(static_cast<int>(l) + 1));
        cache.probabilities.push_back(
            projection_probabilities(config, params, oriented, config.angles(oriented.dim(0))));
    }
    return cache;
}

Var forward_from_cache(const PiNetConfig& config, const BoundParameters& params, const ForwardCache& cache,
                       const AngleSet& angles) {
    std::vector<Var> outputs;
    for (const Tensor& probs : cache.probabilities) {
        outputs.push_back(lift_orientation(config, params, params["fusion.weights"].tape().constant(probs), angles));
    }
    return fuse(outputs, params["fusion.weights"]);
}

Var forward(const PiNetConfig& config, const BoundParameters& params, const Tensor& volume) {
    check_input(config, volume.shape());
    Tape& tape = params["fusion.weights"].tape();
    std::vector<Var> outputs;
    for (std::size_t l = 0; l < config.orientations; ++l) {
        const Tensor oriented = orient(volume, orientation_from_index(static_cast<int>(l) + 1));
        const AngleSet angles = config.angles(oriented.dim(0));
        const Var x = tape.constant(oriented);
        std::vector<Var> per_angle;
        for (double deg : angles.degrees) {
            std::vector<Var> channels;
            if (config.weighted) {
                const Var q = psi_mask(config.psi, params, radon_orthogonal(x, deg));
                for (std::size_t k = 0; k < config.classes; ++k) {
                    channels.push_back(zscore(radon_weighted(x, deg, class_slice(q, k), config.mask_floor)));
                }
            } else {
                channels.assign(config.classes, zscore(radon_plain(x, deg)));
            }
            per_angle.push_back(unet_forward(config.phi, params, "phi", stack(channels)));
        }
        outputs.push_back(lift_orientation(config, params, regroup(per_angle, config.classes, config.bins), angles));
    }
    return fuse(outputs, params["fusion.weights"]);
}

Tensor forward(const PiNetConfig& config, const ParameterStore& params, const Tensor& volume) {
    require_rank(volume, 3, "forward");
    const Tensor padded = pad_to_square(volume, config.orientations > 1);
    const ForwardCache cache = forward_cache(config, params, padded);
    Tape tape;
    const BoundParameters bound(tape, params, nullptr);
    const Tensor soft = forward_from_cache(config, bound, cache, config.angles(padded.dim(0))).value();
    if (padded.shape() == volume.shape()) return soft;
    return crop(soft, {config.classes, volume.dim(0), volume.dim(1), volume.dim(2)});
}

}  // namespace pinet
