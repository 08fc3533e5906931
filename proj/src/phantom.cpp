#include "pinet/phantom.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

#include "pinet/random.h"

namespace pinet {

namespace fs = std::filesystem;

namespace {

constexpr int kMaxRejections = 100;

double sample(Rng& rng, const Range& r) { return rng.uniform(r.lo, r.hi); }

double first_axis_half_extent(const Ellipsoid& e) {
    const double a = e.semi_axes[0] * std::cos(e.angle), b = e.semi_axes[1] * std::sin(e.angle);
    return std::sqrt(a * a + b * b);
}

// Every point of the ellipsoid lies inside the cylinder of radius `radius` around the
// grid axis and strictly inside the axial range.
bool fits(const Ellipsoid& e, double center, double radius, std::size_t n) {
    const double planar = std::hypot(e.center[0] - center, e.center[1] - center);
    if (planar + std::max(e.semi_axes[0], e.semi_axes[1]) > radius - 1.0) return false;
    return e.center[2] - e.semi_axes[2] >= 0.5 && e.center[2] + e.semi_axes[2] <= static_cast<double>(n) - 1.5;
}

Range fraction_of(const Range& r, double n) { return {r.lo * n, r.hi * n}; }

nlohmann::json range_json(const Range& r) { return nlohmann::json::array({r.lo, r.hi}); }

Range range_from(const nlohmann::json& j, const char* key, const Range& fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    if (!v.is_array() || v.size() != 2) throw std::invalid_argument(std::string("phantom field '") + key + "' must be [lo, hi]");
    return {v[0].get<double>(), v[1].get<double>()};
}

const char* type_name(VolumeType type) { return type == VolumeType::f64 ? "f64" : "u8"; }

fs::path sidecar(const fs::path& payload) { return fs::path(payload.string() + ".json"); }

struct Header {
    Shape dims;
    VolumeType type = VolumeType::f64;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::string id;
};

Header read_header(const fs::path& payload) {
    std::ifstream in(sidecar(payload));
    if (!in) throw std::runtime_error("missing header '" + sidecar(payload).string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed header '" + sidecar(payload).string() + "': " + e.what());
    }
    Header h;
    h.dims = j.at("dims").get<Shape>();
    if (h.dims.size() != 3) throw std::runtime_error("header '" + sidecar(payload).string() + "' needs three dims");
    const std::string dtype = j.at("dtype").get<std::string>();
    if (dtype == "f64") {
        h.type = VolumeType::f64;
    } else if (dtype == "u8") {
        h.type = VolumeType::u8;
    } else {
        throw std::runtime_error("unsupported dtype '" + dtype + "' in '" + sidecar(payload).string() + "'");
    }
    if (j.contains("spacing")) h.spacing = j.at("spacing").get<std::array<double, 3>>();
    h.id = j.value("id", std::string());
    return h;
}

std::uintmax_t expected_bytes(const Header& h) {
    return element_count(h.dims) * (h.type == VolumeType::f64 ? sizeof(double) : 1);
}

void check_payload_size(const fs::path& payload, const Header& h) {
    const std::uintmax_t actual = fs::file_size(payload);
    if (actual != expected_bytes(h)) {
        throw std::runtime_error("payload '" + payload.string() + "' holds " + std::to_string(actual) +
                                 " bytes but header dims " + to_string(h.dims) + " require " +
                                 std::to_string(expected_bytes(h)));
    }
}

}  // namespace

bool Ellipsoid::contains(double i, double j, double k) const {
    const double di = i - center[0], dj = j - center[1], dk = k - center[2];
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = c * di + s * dj, v = -s * di + c * dj;
    const double a = u / semi_axes[0], b = v / semi_axes[1], z = dk / semi_axes[2];
    return a * a + b * b + z * z <= 1.0;
}

void PhantomSpec::validate() const {
    if (size < 8) throw std::invalid_argument("phantom size must be at least 8");
    auto check = [](const Range& r, const char* what) {
        if (!(r.lo > 0.0) || r.hi < r.lo) throw std::invalid_argument(std::string("invalid phantom range ") + what);
    };
    check(semi_axis, "semi_axis");
    check(intensity, "intensity");
    check(confounder_semi_axis, "confounder_semi_axis");
    if (center_offset.hi < center_offset.lo) throw std::invalid_argument("invalid phantom range center_offset");
    if (confounder_ratio <= 1.0) throw std::invalid_argument("confounder_ratio must exceed 1");
    if (noise < 0.0) throw std::invalid_argument("noise amplitude must be nonnegative");
    if (separation < 0.0) throw std::invalid_argument("separation must be nonnegative");
}

nlohmann::json to_json(const PhantomSpec& spec) {
    return {{"size", spec.size},
            {"semi_axis", range_json(spec.semi_axis)},
            {"center_offset", range_json(spec.center_offset)},
            {"intensity", range_json(spec.intensity)},
            {"confounder", spec.confounder},
            {"confounder_semi_axis", range_json(spec.confounder_semi_axis)},
            {"confounder_ratio", spec.confounder_ratio},
            {"separation", spec.separation},
            {"noise", spec.noise},
            {"seed", spec.seed}};
}

PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
    PhantomSpec s;
    s.size = j.value("size", s.size);
    s.semi_axis = range_from(j, "semi_axis", s.semi_axis);
    s.center_offset = range_from(j, "center_offset", s.center_offset);
    s.intensity = range_from(j, "intensity", s.intensity);
    s.confounder = j.value("confounder", s.confounder);
    s.confounder_semi_axis = range_from(j, "confounder_semi_axis", s.confounder_semi_axis);
    s.confounder_ratio = j.value("confounder_ratio", s.confounder_ratio);
    s.separation = j.value("separation", s.separation);
    s.noise = j.value("noise", s.noise);
    s.seed = j.value("seed", s.seed);
    s.validate();
    return s;
}

std::string phantom_id(std::size_t index) {
    std::ostringstream out;
    out << "phantom_";
    out.width(4);
    out.fill('0');
    out << index;
    return out.str();
}

Phantom generate_phantom(const PhantomSpec& spec, std::size_t index) {
    spec.validate();
    const std::size_t n = spec.size;
    const double nd = static_cast<double>(n);
    const double center = (nd - 1.0) / 2.0, radius = nd / 2.0;
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    std::mt19937_64 engine(seq);
    Rng rng(engine());

    Phantom ph;
    bool placed = false;
    for (int attempt = 0; attempt < kMaxRejections && !placed; ++attempt) {
        Ellipsoid t;
        const Range axes = fraction_of(spec.semi_axis, nd);
        const Range offset = fraction_of(spec.center_offset, nd);
        for (double& a : t.semi_axes) a = sample(rng, axes);
        for (double& c : t.center) c = center + sample(rng, offset);
        t.angle = rng.uniform(0.0, std::numbers::pi);
        if (!spec.confounder) {
            if (!fits(t, center, radius, n)) continue;
            ph.target = t;
            placed = true;
            break;
        }
        // The pair is laid out along the first axis, separated by at least the margin and
        // centred on the grid up to a small jitter; a random side decides which comes first.
        Ellipsoid c;
        const Range caxes = fraction_of(spec.confounder_semi_axis, nd);
        for (double& a : c.semi_axes) a = sample(rng, caxes);
        c.angle = rng.uniform(0.0, std::numbers::pi);
        const double et = first_axis_half_extent(t), ec = first_axis_half_extent(c);
        const double gap = spec.separation * nd + rng.uniform(0.0, 0.05) * nd;
        const double span = 2.0 * et + gap + 2.0 * ec;
        const double side = rng.uniform() < 0.5 ? 1.0 : -1.0;
        t.center[0] = center - side * (span / 2.0 - et) + rng.uniform(-0.03, 0.03) * nd;
        c.center = {t.center[0] + side * (et + gap + ec), t.center[1] + rng.uniform(-0.05, 0.05) * nd,
                    t.center[2] + rng.uniform(-0.05, 0.05) * nd};
        if (!fits(t, center, radius, n) || !fits(c, center, radius, n)) continue;
        ph.target = t;
        ph.confounder = c;
        ph.has_confounder = true;
        placed = true;
    }
    if (!placed) {
        throw std::runtime_error("phantom " + std::to_string(index) + ": no valid placement after " +
                                 std::to_string(kMaxRejections) + " draws");
    }

    const double target_intensity = sample(rng, spec.intensity);
    // At least `ratio` times brighter than any target voxel, and at least `ratio` times the
    // target's integrated intensity so it dominates the lines through it.
    double confounder_intensity = spec.confounder_ratio * (target_intensity + spec.noise);
    if (ph.has_confounder) {
        const auto volume_of = [](const Ellipsoid& e) { return e.semi_axes[0] * e.semi_axes[1] * e.semi_axes[2]; };
        confounder_intensity *= std::max(1.0, volume_of(ph.target) / volume_of(ph.confounder));
    }
    Tensor volume({n, n, n});
    Tensor mask({n, n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const bool inside = std::hypot(static_cast<double>(i) - center, static_cast<double>(j) - center) <= radius;
            for (std::size_t k = 0; k < n; ++k) {
                const double x = static_cast<double>(i), y = static_cast<double>(j), z = static_cast<double>(k);
                // Noise is drawn for every voxel so the stream does not depend on the shapes.
                const double noise = spec.noise > 0.0 ? rng.uniform(0.0, spec.noise) : 0.0;
                double value = inside ? noise : 0.0;
                if (ph.target.contains(x, y, z)) {
                    value += target_intensity;
                    mask.at(i, j, k) = 1.0;
                }
                if (ph.has_confounder && ph.confounder.contains(x, y, z)) value += confounder_intensity;
                volume.at(i, j, k) = value;
            }
        }
    }
    const double top = max_value(volume);
    if (top > 0.0) volume *= 1.0 / top;

    const std::string id = phantom_id(index);
    ph.volume = Volume{std::move(volume), {1.0, 1.0, 1.0}, id};
    ph.mask = Volume{std::move(mask), {1.0, 1.0, 1.0}, id};
    return ph;
}

void write_volume(const Volume& volume, const fs::path& payload, VolumeType type) {
    require_rank(volume.data, 3, "write_volume");
    std::ofstream out(payload, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + payload.string() + "'");
    if (type == VolumeType::f64) {
        static_assert(std::endian::native == std::endian::little, "payloads assume a little-endian host");
        out.write(reinterpret_cast<const char*>(volume.data.data()),
                  static_cast<std::streamsize>(volume.data.size() * sizeof(double)));
    } else {
        std::vector<std::uint8_t> bytes(volume.data.size());
        for (std::size_t i = 0; i < bytes.size(); ++i) {
            const double v = volume.data[i];
            if (v != 0.0 && v != 1.0) throw std::invalid_argument("write_volume: u8 payload must be binary");
            bytes[i] = static_cast<std::uint8_t>(v);
        }
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    if (!out) throw std::runtime_error("failed writing '" + payload.string() + "'");
    const nlohmann::json header{{"dims", volume.data.shape()},
                                {"dtype", type_name(type)},
                                {"spacing", volume.spacing},
                                {"id", volume.id}};
    std::ofstream side(sidecar(payload), std::ios::trunc);
    side << header.dump(2) << '\n';
    if (!side) throw std::runtime_error("failed writing '" + sidecar(payload).string() + "'");
}

Volume read_volume(const fs::path& payload) {
    const Header h = read_header(payload);
    if (!fs::exists(payload)) throw std::runtime_error("missing payload '" + payload.string() + "'");
    check_payload_size(payload, h);
    std::ifstream in(payload, std::ios::binary);
    Volume v{Tensor(h.dims), h.spacing, h.id};
    if (h.type == VolumeType::f64) {
        in.read(reinterpret_cast<char*>(v.data.data()), static_cast<std::streamsize>(v.data.size() * sizeof(double)));
    } else {
        std::vector<std::uint8_t> bytes(v.data.size());
        in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        for (std::size_t i = 0; i < bytes.size(); ++i) {
            if (bytes[i] > 1) throw std::runtime_error("mask '" + payload.string() + "' is not binary");
            v.data[i] = bytes[i];
        }
    }
    if (!in) throw std::runtime_error("failed reading '" + payload.string() + "'");
    if (h.type == VolumeType::f64 && !v.data.all_finite()) {
        throw std::runtime_error("volume '" + payload.string() + "' holds non-finite values");
    }
    return v;
}

DatasetManifest build_manifest(const fs::path& directory) {
    if (!fs::is_directory(directory)) throw std::runtime_error("'" + directory.string() + "' is not a directory");
    std::map<std::string, fs::path> volumes, masks;
    for (const auto& entry : fs::directory_iterator(directory)) {
        if (!entry.is_regular_file()) continue;
        const fs::path& p = entry.path();
        if (p.extension() == ".vol") volumes[p.stem().string()] = p;
        if (p.extension() == ".mask") masks[p.stem().string()] = p;
    }
    std::vector<std::string> orphans;
    for (const auto& [id, p] : volumes)
        if (!masks.count(id)) orphans.push_back(p.filename().string());
    for (const auto& [id, p] : masks)
        if (!volumes.count(id)) orphans.push_back(p.filename().string());
    if (!orphans.empty()) {
        std::string list;
        for (const auto& o : orphans) list += (list.empty() ? "" : ", ") + o;
        throw std::runtime_error("unpaired files in '" + directory.string() + "': " + list);
    }
    DatasetManifest manifest;
    for (const auto& [id, vol] : volumes) {
        const fs::path& mask = masks.at(id);
        const Header hv = read_header(vol), hm = read_header(mask);
        check_payload_size(vol, hv);
        check_payload_size(mask, hm);
        if (hv.dims != hm.dims) {
            throw std::runtime_error("'" + id + "': volume dims " + to_string(hv.dims) + " differ from mask dims " +
                                     to_string(hm.dims));
        }
        manifest.entries.push_back({id, vol, mask});
    }
    return manifest;
}

void write_manifest(const DatasetManifest& manifest, const fs::path& directory) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : manifest.entries) {
        entries.push_back({{"id", e.id}, {"volume", e.volume.filename().string()}, {"mask", e.mask.filename().string()}});
    }
    nlohmann::json j = manifest.info;
    j["entries"] = entries;
    std::ofstream out(directory / "manifest.json", std::ios::trunc);
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("failed writing manifest in '" + directory.string() + "'");
}

DatasetManifest load_manifest(const fs::path& directory) {
    const fs::path file = directory / "manifest.json";
    if (!fs::exists(file)) return build_manifest(directory);
    std::ifstream in(file);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("malformed manifest '" + file.string() + "': " + e.what());
    }
    DatasetManifest manifest;
    for (const auto& e : j.at("entries")) {
        ManifestEntry entry{e.at("id").get<std::string>(), directory / e.at("volume").get<std::string>(),
                            directory / e.at("mask").get<std::string>()};
        for (const fs::path& p : {entry.volume, entry.mask}) {
            if (!fs::exists(p)) throw std::runtime_error("manifest references missing file '" + p.string() + "'");
            check_payload_size(p, read_header(p));
        }
        manifest.entries.push_back(std::move(entry));
    }
    j.erase("entries");
    manifest.info = j;
    return manifest;
}

Sample to_sample(const Phantom& phantom) {
    const Tensor& m = phantom.mask.data;
    return {phantom.volume.id, phantom.volume.data, m.reshaped({1, m.dim(0), m.dim(1), m.dim(2)})};
}

std::vector<Sample> load_samples(const DatasetManifest& manifest) {
    std::vector<Sample> out;
    for (const auto& e : manifest.entries) {
        Volume v = read_volume(e.volume);
        Volume m = read_volume(e.mask);
        if (v.data.shape() != m.data.shape()) {
            throw ShapeError("'" + e.id + "': volume " + to_string(v.data.shape()) + " and mask " +
                             to_string(m.data.shape()) + " differ");
        }
        const Shape s = m.data.shape();
        out.push_back({e.id, std::move(v.data), m.data.reshaped({1, s[0], s[1], s[2]})});
    }
    return out;
}

}  // namespace pinet
