#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "pinet/tensor.h"

namespace pinet {

struct Volume {
    Tensor data;  // (d1, d2, d3)
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::string id;
};

struct Range {
    double lo = 0.0;
    double hi = 0.0;
};

/// Random ellipsoid phantoms on a cubic grid: a target ellipsoid, optional brighter
/// confounder separated from it along the first axis, and uniform background noise
/// inside the inscribed cylinder.
struct PhantomSpec {
    std::size_t size = 48;
    Range semi_axis{0.12, 0.2};        // fraction of size
    Range center_offset{-0.15, 0.15};  // in-plane offset of the target, fraction of size
    Range intensity{0.5, 0.8};
    bool confounder = false;
    Range confounder_semi_axis{0.1, 0.16};
    double confounder_ratio = 1.5;   // minimum confounder intensity / (target max + noise), also
                                     // the minimum ratio of integrated intensities
    double separation = 0.2;         // minimum first-axis gap between the two, fraction of size
    double noise = 0.05;             // uniform noise amplitude
    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::json to_json(const PhantomSpec& spec);
PhantomSpec phantom_spec_from_json(const nlohmann::json& j);

struct Ellipsoid {
    std::array<double, 3> center{};
    std::array<double, 3> semi_axes{};
    double angle = 0.0;  // rotation in the (axis 1, axis 2) plane, radians

    bool contains(double i, double j, double k) const;
};

struct Phantom {
    Volume volume;
    Volume mask;
    Ellipsoid target;
    bool has_confounder = false;
    Ellipsoid confounder;
};

/// Pure function of (spec, index). Rejection-samples placements and throws
/// std::runtime_error after 100 rejected draws.
Phantom generate_phantom(const PhantomSpec& spec, std::size_t index);
std::string phantom_id(std::size_t index);

enum class VolumeType { f64, u8 };

/// Raw little-endian payload plus a sidecar "<payload>.json" header
/// {dims, dtype, spacing, id}. u8 payloads must be binary.
void write_volume(const Volume& volume, const std::filesystem::path& payload, VolumeType type);
Volume read_volume(const std::filesystem::path& payload);

struct ManifestEntry {
    std::string id;
    std::filesystem::path volume;
    std::filesystem::path mask;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    nlohmann::json info = nlohmann::json::object();  // generation seed, tags
};

/// Pairs "<id>.vol" with "<id>.mask" in `directory`, sorted by id. Headers are checked
/// against payload sizes. Unpaired files raise an error that lists them.
DatasetManifest build_manifest(const std::filesystem::path& directory);
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& directory);
/// Reads "<directory>/manifest.json" when present, otherwise scans the directory.
DatasetManifest load_manifest(const std::filesystem::path& directory);

struct Sample {
    std::string id;
    Tensor volume;  // (d1, d2, d3)
    Tensor mask;    // (1, d1, d2, d3) binary
};

std::vector<Sample> load_samples(const DatasetManifest& manifest);
Sample to_sample(const Phantom& phantom);

}  // namespace pinet
