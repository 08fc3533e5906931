#include "pinet/networks.h"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "pinet/ops.h"
#include "pinet/radon.h"

namespace pinet {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

namespace {

constexpr char kMagic[8] = {'P', 'I', 'N', 'E', 'T', 'C', 'K', 'P'};
constexpr std::uint32_t kFormatVersion = 1;

std::size_t conv_count(std::size_t k, std::size_t cin, std::size_t cout) { return k * k * cin * cout + cout; }

void add_conv(ParameterStore& store, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
              Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>((cin + cout) * k * k));
    Tensor kernel({cout, cin, k, k});
    for (std::size_t i = 0; i < kernel.size(); ++i) kernel[i] = rng.uniform(-bound, bound);
    store.add(name + ".kernel", std::move(kernel));
    store.add(name + ".bias", Tensor({cout}));
}

Var conv_relu(const BoundParameters& p, const std::string& name, const Var& x) {
    return relu(conv2d(x, p[name + ".kernel"], p[name + ".bias"], Padding::same));
}

Var double_conv(const BoundParameters& p, const std::string& block, const Var& x) {
    return conv_relu(p, block + ".conv2", conv_relu(p, block + ".conv1", x));
}

}  // namespace

std::size_t UNetConfig::out_channels() const {
    return head == HeadKind::softmax_bins ? classes * bins : classes;
}

std::size_t UNetConfig::filters(std::size_t level) const { return base_filters << level; }

void UNetConfig::require_divisible(std::size_t height, std::size_t width) const {
    const std::size_t multiple = std::size_t{1} << depth;
    if (height % multiple != 0 || width % multiple != 0) {
        throw std::invalid_argument("U-net of depth " + std::to_string(depth) + " needs extents divisible by " +
                                    std::to_string(multiple) + ", got " + std::to_string(height) + "x" +
                                    std::to_string(width));
    }
}

void UNetConfig::validate() const {
    if (base_filters == 0 || in_channels == 0 || classes == 0) {
        throw std::invalid_argument("U-net filters, input channels and classes must be positive");
    }
    if (head == HeadKind::softmax_bins && bins < 2) throw std::invalid_argument("softmax head needs at least 2 bins");
    if (depth > 8) throw std::invalid_argument("U-net depth above 8 is not supported");
}

nlohmann::json to_json(const UNetConfig& config) {
    return {{"depth", config.depth},
            {"base_filters", config.base_filters},
            {"in_channels", config.in_channels},
            {"head", config.head == HeadKind::softmax_bins ? "softmax_bins" : "sigmoid"},
            {"classes", config.classes},
            {"bins", config.bins}};
}

UNetConfig unet_config_from_json(const nlohmann::json& j) {
    UNetConfig c;
    c.depth = j.value("depth", c.depth);
    c.base_filters = j.value("base_filters", c.base_filters);
    c.in_channels = j.value("in_channels", c.in_channels);
    const std::string head = j.value("head", std::string("sigmoid"));
    if (head == "softmax_bins") {
        c.head = HeadKind::softmax_bins;
    } else if (head == "sigmoid") {
        c.head = HeadKind::sigmoid;
    } else {
        throw std::invalid_argument("unknown U-net head '" + head + "'");
    }
    c.classes = j.value("classes", c.classes);
    c.bins = j.value("bins", c.bins);
    c.validate();
    return c;
}

std::size_t unet_parameter_count(const UNetConfig& config) {
    std::size_t total = 0;
    std::size_t cin = config.in_channels;
    for (std::size_t l = 0; l < config.depth; ++l) {
        const std::size_t f = config.filters(l);
        total += conv_count(3, cin, f) + conv_count(3, f, f);
        cin = f;
    }
    const std::size_t mid = config.filters(config.depth);
    total += conv_count(3, cin, mid) + conv_count(3, mid, mid);
    for (std::size_t l = config.depth; l-- > 0;) {
        const std::size_t f = config.filters(l);
        total += conv_count(2, config.filters(l + 1), f);
        total += conv_count(3, 2 * f, f) + conv_count(3, f, f);
    }
    total += conv_count(1, config.filters(0), config.out_channels());
    return total;
}

void ParameterStore::add(const std::string& name, Tensor value) {
    if (!entries_.emplace(name, std::move(value)).second) {
        throw std::invalid_argument("duplicate parameter name '" + name + "'");
    }
}

void ParameterStore::set(const std::string& name, Tensor value) {
    Tensor& slot = get(name);
    if (slot.shape() != value.shape()) {
        throw ShapeError("parameter '" + name + "' has shape " + to_string(slot.shape()) + ", got " +
                         to_string(value.shape()));
    }
    slot = std::move(value);
}

bool ParameterStore::contains(const std::string& name) const { return entries_.count(name) != 0; }

const Tensor& ParameterStore::get(const std::string& name) const {
    const auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
}

Tensor& ParameterStore::get(const std::string& name) {
    const auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
}

std::vector<std::string> ParameterStore::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, value] : entries_) out.push_back(name);
    return out;
}

std::size_t ParameterStore::parameter_count(const std::string& prefix) const {
    std::size_t total = 0;
    for (const auto& [name, value] : entries_)
        if (name.compare(0, prefix.size(), prefix) == 0) total += value.size();
    return total;
}

bool ParameterStore::identical(const ParameterStore& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    auto a = entries_.begin();
    auto b = other.entries_.begin();
    for (; a != entries_.end(); ++a, ++b) {
        if (a->first != b->first || !a->second.identical(b->second)) return false;
    }
    return true;
}

void init_unet(ParameterStore& store, const std::string& prefix, const UNetConfig& config, Rng& rng) {
    config.validate();
    std::size_t cin = config.in_channels;
    for (std::size_t l = 0; l < config.depth; ++l) {
        const std::size_t f = config.filters(l);
        const std::string block = prefix + ".enc" + std::to_string(l);
        add_conv(store, block + ".conv1", cin, f, 3, rng);
        add_conv(store, block + ".conv2", f, f, 3, rng);
        cin = f;
    }
    const std::size_t mid = config.filters(config.depth);
    add_conv(store, prefix + ".mid.conv1", cin, mid, 3, rng);
    add_conv(store, prefix + ".mid.conv2", mid, mid, 3, rng);
    for (std::size_t l = config.depth; l-- > 0;) {
        const std::size_t f = config.filters(l), coarse = config.filters(l + 1);
        const double bound = std::sqrt(6.0 / static_cast<double>(4 * (coarse + f)));
        Tensor up({coarse, f, 2, 2});
        for (std::size_t i = 0; i < up.size(); ++i) up[i] = rng.uniform(-bound, bound);
        store.add(prefix + ".up" + std::to_string(l) + ".kernel", std::move(up));
        store.add(prefix + ".up" + std::to_string(l) + ".bias", Tensor({f}));
        const std::string block = prefix + ".dec" + std::to_string(l);
        add_conv(store, block + ".conv1", 2 * f, f, 3, rng);
        add_conv(store, block + ".conv2", f, f, 3, rng);
    }
    add_conv(store, prefix + ".head", config.filters(0), config.out_channels(), 1, rng);
}

BoundParameters::BoundParameters(Tape& tape, const ParameterStore& store,
                                 const std::function<bool(const std::string&)>& trainable) {
    for (const auto& [name, value] : store.entries()) {
        if (trainable && trainable(name)) {
            const Var v = tape.variable(value);
            vars_.emplace(name, v);
            trainable_.emplace_back(name, v);
        } else {
            vars_.emplace(name, tape.constant(value));
        }
    }
}

const Var& BoundParameters::operator[](const std::string& name) const {
    const auto it = vars_.find(name);
    if (it == vars_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
}

Var unet_forward(const UNetConfig& config, const BoundParameters& params, const std::string& prefix,
                 const Var& image) {
    require_rank(image.value(), 3, "unet_forward");
    if (image.shape()[0] != config.in_channels) {
        throw ShapeError("unet_forward: expected " + std::to_string(config.in_channels) + " input channels, got " +
                         to_string(image.shape()));
    }
    const std::size_t h = image.shape()[1], w = image.shape()[2];
    config.require_divisible(h, w);

    std::vector<Var> skips;
    Var x = image;
    for (std::size_t l = 0; l < config.depth; ++l) {
        x = double_conv(params, prefix + ".enc" + std::to_string(l), x);
        skips.push_back(x);
        x = maxpool2d(x);
    }
    x = double_conv(params, prefix + ".mid", x);
    for (std::size_t l = config.depth; l-- > 0;) {
        const std::string up = prefix + ".up" + std::to_string(l);
        x = transposed_conv2d(x, params[up + ".kernel"], params[up + ".bias"]);
        x = double_conv(params, prefix + ".dec" + std::to_string(l), concat(skips[l], x));
    }
    x = conv2d(x, params[prefix + ".head.kernel"], params[prefix + ".head.bias"], Padding::same);
    if (config.head == HeadKind::sigmoid) return sigmoid(x);
    const Var grouped = softmax(reshape(x, {config.classes, config.bins, h, w}), 1);
    return reshape(grouped, {config.out_channels(), h, w});
}

Tensor unet_forward(const UNetConfig& config, const ParameterStore& store, const std::string& prefix,
                    const Tensor& image) {
    Tape tape;
    const BoundParameters params(tape, store, nullptr);
    return unet_forward(config, params, prefix, tape.constant(image)).value();
}

Var psi_mask(const UNetConfig& config, const BoundParameters& params, const Var& orthogonal_projection) {
    require_rank(orthogonal_projection.value(), 2, "psi_mask");
    const Shape& s = orthogonal_projection.shape();
    const Var normalized = zscore(orthogonal_projection);
    return unet_forward(config, params, "psi", reshape(normalized, {1, s[0], s[1]}));
}

Tensor psi_mask(const UNetConfig& config, const ParameterStore& store, const Tensor& orthogonal_projection) {
    Tape tape;
    const BoundParameters params(tape, store, nullptr);
    return psi_mask(config, params, tape.constant(orthogonal_projection)).value();
}

// A line contains the target when it crosses at least half a voxel of it; interpolated
// projections leave small positive residue next to the object that must not count.
constexpr double kLineTolerance = 0.5;

Tensor psi_target(const Tensor& mask_volume, double degrees) {
    Tensor masks = mask_volume;
    if (masks.rank() == 3) masks = masks.reshaped({1, masks.dim(0), masks.dim(1), masks.dim(2)});
    require_rank(masks, 4, "psi_target");
    for (std::size_t i = 0; i < masks.size(); ++i) {
        if (masks[i] != 0.0 && masks[i] != 1.0) throw std::invalid_argument("psi_target: mask is not binary");
    }
    const std::size_t c = masks.dim(0);
    std::vector<Tensor> parts;
    for (std::size_t k = 0; k < c; ++k) {
        Tensor t = radon_orthogonal(masks.slice(k, 1).reshaped({masks.dim(1), masks.dim(2), masks.dim(3)}), degrees);
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = t[i] > kLineTolerance ? 1.0 : 0.0;
        parts.push_back(std::move(t));
    }
    return stack(parts);
}

void save_checkpoint(const std::string& path, const ParameterStore& store, const nlohmann::json& config) {
    nlohmann::json table = nlohmann::json::array();
    for (const auto& [name, value] : store.entries()) table.push_back({{"name", name}, {"shape", value.shape()}});
    const std::string header = nlohmann::json{{"config", config}, {"parameters", table}}.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open checkpoint '" + path + "' for writing");
    const std::uint64_t header_size = header.size();
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&kFormatVersion), sizeof kFormatVersion);
    out.write(reinterpret_cast<const char*>(&header_size), sizeof header_size);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& [name, value] : store.entries()) {
        out.write(reinterpret_cast<const char*>(value.data()), static_cast<std::streamsize>(value.size() * sizeof(double)));
    }
    if (!out) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t header_size = 0;
    in.read(magic, sizeof magic);
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&header_size), sizeof header_size);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
        throw std::runtime_error("'" + path + "' is not a PiNet checkpoint");
    }
    if (version != kFormatVersion) {
        throw std::runtime_error("checkpoint format version " + std::to_string(version) + " is not supported");
    }
    std::string header(header_size, '\0');
    in.read(header.data(), static_cast<std::streamsize>(header_size));
    if (!in) throw std::runtime_error("checkpoint '" + path + "' has a truncated header");
    const nlohmann::json parsed = nlohmann::json::parse(header);

    Checkpoint ckpt;
    ckpt.config = parsed.at("config");
    for (const auto& entry : parsed.at("parameters")) {
        Tensor value(entry.at("shape").get<Shape>());
        in.read(reinterpret_cast<char*>(value.data()), static_cast<std::streamsize>(value.size() * sizeof(double)));
        if (!in) throw std::runtime_error("checkpoint '" + path + "' has a truncated payload");
        ckpt.store.add(entry.at("name").get<std::string>(), std::move(value));
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw std::runtime_error("checkpoint '" + path + "' has trailing bytes");
    }
    return ckpt;
}

}  // namespace pinet
