// pinet: phantom generation, training, evaluation, cross-validation and data-efficiency sweeps.

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pinet/binning.h"
#include "pinet/geometry.h"
#include "pinet/phantom.h"
#include "pinet/pipeline.h"
#include "pinet/random.h"
#include "pinet/training.h"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pinet;

namespace {

constexpr int kRunConfigVersion = 1;

class ConflictError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

enum ExitCode { kOk = 0, kInternal = 1, kUsage = 2, kConfig = 3, kShape = 4, kNumeric = 5, kIo = 6, kConflict = 7 };

int report_error(const char* category, int code, const std::string& message) {
    std::cerr << json{{"error", {{"category", category}, {"code", code}, {"message", message}}}}.dump() << "\n";
    return code;
}

// ---- files ----

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("malformed JSON in '" + path.string() + "': " + e.what());
    }
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    out << j.dump(2) << "\n";
    if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

/// Exclusive claim on an output directory for the lifetime of one command.
class OutputLock {
  public:
    OutputLock(const fs::path& dir, bool force) : path_(dir / ".pinet.lock") {
        if (fs::exists(dir) && !fs::is_directory(dir)) {
            throw ConflictError("output '" + dir.string() + "' exists and is not a directory");
        }
        if (fs::exists(path_)) throw ConflictError("output '" + dir.string() + "' is locked by another run");
        if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
            throw ConflictError("output '" + dir.string() + "' is not empty (use --force to overwrite)");
        }
        fs::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) throw ConflictError("output '" + dir.string() + "' is locked by another run");
    }
    ~OutputLock() {
        ::close(fd_);
        std::error_code ec;
        fs::remove(path_, ec);
    }
    OutputLock(const OutputLock&) = delete;
    OutputLock& operator=(const OutputLock&) = delete;

  private:
    fs::path path_;
    int fd_ = -1;
};

std::vector<Sample> load_dataset(const std::string& dir) {
    if (dir.empty()) throw ConfigError("--data is required");
    std::vector<Sample> samples = load_samples(load_manifest(dir));
    if (samples.empty()) throw ConfigError("dataset '" + dir + "' holds no samples");
    return samples;
}

void write_pgm(const fs::path& path, const Tensor& image) {
    const std::size_t h = image.dim(0), w = image.dim(1);
    double lo = image[0], hi = image[0];
    for (double x : image.values()) {
        lo = std::min(lo, x);
        hi = std::max(hi, x);
    }
    const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
    std::ofstream out(path, std::ios::binary);
    out << "P5\n" << w << " " << h << "\n255\n";
    for (double x : image.values()) out.put(static_cast<char>(static_cast<unsigned char>(std::lround((x - lo) * scale))));
    if (!out) throw std::runtime_error("failed writing '" + path.string() + "'");
}

double peak_memory_mb() {
    std::ifstream status("/proc/self/status");
    std::string line;
    while (std::getline(status, line)) {
        if (line.rfind("VmHWM:", 0) == 0) return std::stod(line.substr(6)) / 1024.0;
    }
    return -1.0;
}

// ---- run configuration ----

std::size_t padded_extent(const std::vector<Sample>& samples, bool cube) {
    std::size_t n = 0;
    for (const Sample& s : samples) n = std::max(n, pad_to_square(s.volume, cube).dim(0));
    return n;
}


/// Model and training options shared by train, eval, xval and sweep. Flags override the
/// --config file, which overrides the defaults.
struct ModelOptions {
    std::string config_file;
    std::optional<double> M;
    std::optional<std::size_t> angles;
    std::optional<std::size_t> b, v, depth, filters, lift_kernel;
    std::optional<double> tau, mask_floor;
    std::optional<bool> weighted;
    std::optional<std::string> stages;
    std::optional<std::size_t> epochs, minibatch;
    std::optional<double> lr, rho, eps;
    std::optional<std::uint64_t> seed;
    bool unfreeze = false;
    bool deterministic = false;

    void add_model(CLI::App& app) {
        app.add_option("--config", config_file, "Run configuration JSON (flags take precedence)");
        app.add_option("--M", M, "Angular sampling factor");
        app.add_option("--angles", angles, "Number of projection angles (sets M from the volume extent)");
        app.add_option("--b", b, "Number of bins");
        app.add_option("--v", v, "Number of orientations (1-3)");
        app.add_option("--depth", depth, "U-net depth of both networks");
        app.add_option("--filters", filters, "U-net base filter count of both networks");
        app.add_option("--lift-kernel", lift_kernel, "Lift kernel size (odd)");
        app.add_option("--tau", tau, "Segmentation threshold");
        app.add_option("--mask-floor", mask_floor, "Floor of the weighted projection mask");
        app.add_flag("--weighted,!--unweighted", weighted, "Weighted (default) or plain Radon projections");
    }
    void add_training(CLI::App& app) {
        app.add_option("--stages", stages, "Comma-separated subset of psi,phi,finetune");
        app.add_option("--epochs", epochs, "Epochs per stage");
        app.add_option("--minibatch", minibatch, "Projections per optimiser step");
        app.add_option("--lr", lr, "Adadelta learning rate");
        app.add_option("--rho", rho, "Adadelta decay");
        app.add_option("--eps", eps, "Adadelta epsilon");
        app.add_flag("--unfreeze", unfreeze, "Fine-tune the networks together with the small operators");
        app.add_option("--seed", seed, "Master seed");
    }
    void add_determinism(CLI::App& app) {
        app.add_flag("--deterministic", deterministic, "Bit-reproducible outputs (timings omitted)");
    }

    /// Explicit model settings from the config file and flags, as a partial "pinet" object.
    json model_overrides() const {
        json j = json::object();
        if (!config_file.empty()) {
            const json file = read_json(config_file);
            if (file.value("format_version", kRunConfigVersion) > kRunConfigVersion) {
                throw ConfigError("run config '" + config_file + "' has an unsupported format version");
            }
            if (file.contains("pinet")) j = file.at("pinet");
        }
        if (M) j["M"] = *M;
        if (b) j["b"] = *b;
        if (v) j["v"] = *v;
        if (tau) j["tau"] = *tau;
        if (mask_floor) j["mask_floor"] = *mask_floor;
        if (weighted) j["weighted"] = *weighted;
        if (lift_kernel) j["lift_kernel"] = *lift_kernel;
        for (const char* net : {"psi", "phi"}) {
            if (depth) j[net]["depth"] = *depth;
            if (filters) j[net]["base_filters"] = *filters;
        }
        return j;
    }

    json training_overrides() const {
        json j = json::object();
        if (!config_file.empty()) {
            const json file = read_json(config_file);
            if (file.contains("train")) j = file.at("train");
        }
        if (stages) {
            json list = json::array();
            std::stringstream ss(*stages);
            for (std::string s; std::getline(ss, s, ',');) list.push_back(stage_name(stage_from_name(s)));
            j["stages"] = list;
        }
        if (epochs) j["epochs"] = *epochs;
        if (minibatch) j["minibatch"] = *minibatch;
        if (lr) j["lr"] = *lr;
        if (rho) j["rho"] = *rho;
        if (eps) j["eps"] = *eps;
        if (unfreeze) j["unfreeze_networks"] = true;
        if (seed) j["seed"] = *seed;
        return j;
    }

    /// Defaults merged with overrides; --angles resolves M from the padded extent of `samples`.
    PiNetConfig model(const std::vector<Sample>& samples) const {
        json j = to_json(PiNetConfig{});
        j.merge_patch(model_overrides());
        PiNetConfig config = pinet_config_from_json(j);
        if (angles) {
            if (M) throw ConfigError("--M and --angles are mutually exclusive");
            config.sampling_factor = sampling_factor_for_count(padded_extent(samples, config.orientations > 1), *angles);
        }
        return config;
    }

    TrainConfig training() const {
        json j = to_json(TrainConfig{});
        j.merge_patch(training_overrides());
        TrainConfig t = train_config_from_json(j);
        t.validate();
        return t;
    }
};

/// Shape and divisibility failures surface here, before any training.
void check_dataset(const PiNetConfig& config, const std::vector<Sample>& samples, const std::string& name) {
    for (const Sample& s : samples) {
        try {
            check_input(config, pad_to_square(s.volume, config.orientations > 1).shape());
        } catch (const ShapeError& e) {
            throw ShapeError(name + " sample '" + s.id + "': " + e.what());
        } catch (const std::invalid_argument& e) {
            throw ShapeError(name + " sample '" + s.id + "': " + e.what());
        }
    }
}

json run_config(const std::string& command, const PiNetConfig* model, const TrainConfig* train, bool deterministic,
                json extra) {
    json j = {{"format_version", kRunConfigVersion}, {"command", command}, {"deterministic", deterministic}};
    if (model) j["pinet"] = to_json(*model);
    if (train) j["train"] = to_json(*train);
    j.update(extra);
    return j;
}

json checkpoint_config(const PiNetConfig& model, const TrainConfig& train) {
    return {{"format_version", kRunConfigVersion}, {"pinet", to_json(model)}, {"train", to_json(train)}};
}

/// Fields of `requested` (flattened) that differ from `actual`.
std::vector<std::string> differing_fields(const json& requested, const json& actual) {
    std::vector<std::string> out;
    if (requested.empty()) return out;
    const json want = requested.flatten(), have = actual.flatten();
    for (const auto& [key, value] : want.items()) {
        if (value.is_object() && value.empty()) continue;
        if (!have.contains(key)) {
            out.push_back(key.substr(1) + " (checkpoint: absent, requested: " + value.dump() + ")");
        } else if (have.at(key) != value) {
            out.push_back(key.substr(1) + " (checkpoint: " + have.at(key).dump() + ", requested: " + value.dump() + ")");
        }
    }
    return out;
}

void require_matching(const json& requested, const json& checkpoint_model, const std::string& what) {
    const std::vector<std::string> diff = differing_fields(requested, checkpoint_model);
    if (diff.empty()) return;
    std::string msg = what + " does not match the requested configuration:";
    for (const std::string& d : diff) msg += " " + d + ";";
    msg.pop_back();
    throw ConfigError(msg);
}

EpochCallback progress(const std::string& tag, bool deterministic, std::vector<EpochLog>* log) {
    return [tag, deterministic, log](const EpochLog& e) {
        EpochLog entry = e;
        if (deterministic) entry.seconds = 0.0;
        if (log) log->push_back(entry);
        std::fprintf(stderr, "[%s] %s epoch %zu loss %.5f (%.1fs)\n", tag.c_str(), e.stage.c_str(), e.epoch, e.loss,
                     e.seconds);
    };
}

json epoch_log_json(const std::vector<EpochLog>& log) {
    json j = json::array();
    for (const EpochLog& e : log) j.push_back({{"stage", e.stage}, {"epoch", e.epoch}, {"loss", e.loss}, {"seconds", e.seconds}});
    return j;
}

json report_json(EvalReport report, bool deterministic) {
    if (deterministic) {
        for (SampleResult& s : report.samples) s.seconds = 0.0;
    }
    json j = to_json(report);
    if (!deterministic) j["peak_memory_mb"] = {{"value", peak_memory_mb()}, {"note", "best effort, VmHWM"}};
    return j;
}

void print_summary(const std::string& label, const EvalReport& report) {
    const Summary d = report.dice(), h = report.hausdorff();
    std::printf("%s: n=%zu dice %s median %.4f [min %.4f q1 %.4f q3 %.4f max %.4f] hausdorff median %.3f%s\n",
                label.c_str(), report.samples.size(), format_mean_std(d).c_str(), d.median, d.min, d.q1, d.q3, d.max,
                h.median, h.excluded ? (" (" + std::to_string(h.excluded) + " infinite)").c_str() : "");
}

/// Parameters to start from: a checkpoint (checked against the model) or a fresh draw.
ParameterStore initial_parameters(const std::string& init, const PiNetConfig& model, const TrainConfig& train) {
    if (init.empty()) {
        const bool has_psi = std::find(train.stages.begin(), train.stages.end(), Stage::psi) != train.stages.end();
        const bool needs_psi = std::find(train.stages.begin(), train.stages.end(), Stage::phi) != train.stages.end() ||
                               std::find(train.stages.begin(), train.stages.end(), Stage::finetune) != train.stages.end();
        if (model.weighted && needs_psi && !has_psi) {
            throw ConfigError("weighted mode needs a trained psi network: add the psi stage or pass --init");
        }
        return init_parameters(model, train.seed);
    }
    Checkpoint ck = load_checkpoint(init);
    require_matching(to_json(model), ck.config.value("pinet", json::object()), "initial checkpoint '" + init + "'");
    return std::move(ck.store);
}

// ---- commands ----

struct PhantomArgs {
    std::size_t n = 30;
    std::size_t size = 48;
    bool confounder = false;
    double noise = 0.05;
    std::uint64_t seed = 0;
    std::size_t first = 0;
    std::string out;
    bool force = false;
};

int cmd_phantom(const PhantomArgs& a) {
    PhantomSpec spec;
    spec.size = a.size;
    spec.confounder = a.confounder;
    spec.noise = a.noise;
    spec.seed = a.seed;
    spec.validate();
    if (a.n == 0) throw ConfigError("--n must be positive");
    OutputLock lock(a.out, a.force);
    DatasetManifest manifest;
    for (std::size_t i = a.first; i < a.first + a.n; ++i) {
        Phantom ph = generate_phantom(spec, i);
        const std::string id = phantom_id(i);
        write_volume(ph.volume, fs::path(a.out) / (id + ".vol"), VolumeType::f64);
        write_volume(ph.mask, fs::path(a.out) / (id + ".mask"), VolumeType::u8);
        manifest.entries.push_back({id, id + ".vol", id + ".mask"});
    }
    manifest.info = {{"generator", "pinet phantom"},
                     {"confounder", a.confounder},
                     {"seed", a.seed},
                     {"first_index", a.first},
                     {"spec", to_json(spec)}};
    write_manifest(manifest, a.out);
    write_json(fs::path(a.out) / "run_config.json",
               run_config("phantom", nullptr, nullptr, true,
                          {{"phantom", to_json(spec)}, {"n", a.n}, {"first_index", a.first}, {"paths", {{"out", a.out}}}}));
    std::printf("wrote %zu phantoms to %s\n", a.n, a.out.c_str());
    return kOk;
}

struct TrainArgs {
    ModelOptions options;
    std::string data, test_data, init, out;
    bool force = false;
};

int cmd_train(const TrainArgs& a) {
    const std::vector<Sample> samples = load_dataset(a.data);
    const std::vector<Sample> test = a.test_data.empty() ? std::vector<Sample>{} : load_dataset(a.test_data);
    const PiNetConfig model = a.options.model(samples);
    const TrainConfig train = a.options.training();
    check_dataset(model, samples, "training");
    check_dataset(model, test, "test");
    ParameterStore params = initial_parameters(a.init, model, train);

    OutputLock lock(a.out, a.force);
    const fs::path out(a.out);
    write_json(out / "run_config.json",
               run_config("train", &model, &train, a.options.deterministic,
                          {{"paths", {{"data", a.data}, {"test_data", a.test_data}, {"init", a.init}, {"out", a.out}}}}));
    std::vector<EpochLog> log;
    pinet::train(model, params, samples, train, progress("train", a.options.deterministic, &log));
    save_checkpoint((out / "checkpoint.bin").string(), params, checkpoint_config(model, train));
    write_json(out / "train_log.json", epoch_log_json(log));
    if (!test.empty()) {
        EvalReport report = evaluate(model, params, test);
        report.config = {{"train_size", samples.size()}, {"test_size", test.size()}};
        report.seed = train.seed;
        write_json(out / "report.json", report_json(report, a.options.deterministic));
        print_summary("test", report);
    }
    std::printf("checkpoint %s\n", (out / "checkpoint.bin").c_str());
    return kOk;
}

struct EvalArgs {
    ModelOptions options;
    std::string data, checkpoint, out;
    bool oracle = false;
    bool dump_projections = false;
    bool force = false;
};

void dump_projections(const PiNetConfig& model, const ParameterStore& params, const std::vector<Sample>& samples,
                      const fs::path& dir) {
    for (const Sample& s : samples) {
        const Tensor padded = pad_to_square(s.volume, model.orientations > 1);
        for (std::size_t l = 0; l < model.orientations; ++l) {
            const Tensor oriented = orient(padded, orientation_from_index(static_cast<int>(l) + 1));
            const std::size_t h = oriented.dim(1), w = oriented.dim(2);
            const AngleSet angles = model.angles(oriented.dim(0));
            const Tensor collapsed =
                collapse_bins(BinnedMap{projection_probabilities(model, params, oriented, angles), BinKind::probability, Tensor{}}, params.get("bins.weights"));
            const fs::path sub = dir / s.id;
            fs::create_directories(sub);
            for (std::size_t a = 0; a < angles.size(); ++a) {
                // Left: network input (class 0); right: predicted line integrals (class 0).
                const Tensor input = phi_input(model, params, oriented, angles.degrees[a]);
                Tensor image({h, 2 * w});
                auto panel = [&](const double* src, std::size_t offset) {
                    double lo = src[0], hi = src[0];
                    for (std::size_t i = 0; i < h * w; ++i) {
                        lo = std::min(lo, src[i]);
                        hi = std::max(hi, src[i]);
                    }
                    for (std::size_t i = 0; i < h; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                            image.at(i, offset + j) = hi > lo ? (src[i * w + j] - lo) / (hi - lo) : 0.0;
                };
                panel(input.data(), 0);
                panel(collapsed.data() + a * h * w, w);
                char name[64];
                std::snprintf(name, sizeof name, "o%zu_a%03zu.pgm", l + 1, a);
                write_pgm(sub / name, image);
            }
        }
    }
}

int cmd_eval(const EvalArgs& a) {
    const std::vector<Sample> samples = load_dataset(a.data);
    const fs::path out(a.out);
    if (a.oracle) {
        if (a.dump_projections) throw ConfigError("--dump-projections needs a checkpoint, not --oracle");
        OutputLock lock(a.out, a.force);
        EvalReport report;
        for (const Sample& s : samples) {
            report.samples.push_back({s.id, dice_score(s.mask, s.mask), hausdorff(s.mask.reshaped({s.mask.dim(1), s.mask.dim(2), s.mask.dim(3)}),
                                                                              s.mask.reshaped({s.mask.dim(1), s.mask.dim(2), s.mask.dim(3)})),
                                      0.0});
        }
        report.config = {{"oracle", true}};
        write_json(out / "run_config.json",
                   run_config("eval", nullptr, nullptr, a.options.deterministic,
                              {{"oracle", true}, {"paths", {{"data", a.data}, {"out", a.out}}}}));
        write_json(out / "report.json", report_json(report, true));
        print_summary("oracle", report);
        return kOk;
    }
    if (a.checkpoint.empty()) throw ConfigError("--checkpoint is required (or --oracle)");
    const Checkpoint ck = load_checkpoint(a.checkpoint);
    const json stored = ck.config.value("pinet", json::object());
    require_matching(a.options.model_overrides(), stored, "checkpoint '" + a.checkpoint + "'");
    PiNetConfig model = pinet_config_from_json(stored);
    if (a.options.angles) {
        const double m = sampling_factor_for_count(padded_extent(samples, model.orientations > 1), *a.options.angles);
        if (m != model.sampling_factor) {
            throw ConfigError("checkpoint '" + a.checkpoint + "' does not match the requested configuration: M (checkpoint: " +
                              json(model.sampling_factor).dump() + ", requested: " + json(m).dump() + ")");
        }
    }
    check_dataset(model, samples, "evaluation");

    OutputLock lock(a.out, a.force);
    write_json(out / "run_config.json",
               run_config("eval", &model, nullptr, a.options.deterministic,
                          {{"paths", {{"data", a.data}, {"checkpoint", a.checkpoint}, {"out", a.out}}},
                           {"dump_projections", a.dump_projections}}));
    EvalReport report = evaluate(model, ck.store, samples);
    report.config = {{"checkpoint", a.checkpoint}};
    write_json(out / "report.json", report_json(report, a.options.deterministic));
    if (a.dump_projections) dump_projections(model, ck.store, samples, out / "projections");
    print_summary("eval", report);
    return kOk;
}

struct XvalArgs {
    ModelOptions options;
    std::string data, out;
    std::size_t folds = 3;
    bool force = false;
};

int cmd_xval(const XvalArgs& a) {
    const std::vector<Sample> samples = load_dataset(a.data);
    const PiNetConfig model = a.options.model(samples);
    const TrainConfig train = a.options.training();
    check_dataset(model, samples, "training");
    if (model.weighted && std::find(train.stages.begin(), train.stages.end(), Stage::psi) == train.stages.end()) {
        throw ConfigError("weighted cross-validation needs the psi stage");
    }
    fold_assignment(samples.size(), a.folds, train.seed);  // validates the fold count up front

    OutputLock lock(a.out, a.force);
    const fs::path out(a.out);
    write_json(out / "run_config.json", run_config("xval", &model, &train, a.options.deterministic,
                                                   {{"folds", a.folds}, {"paths", {{"data", a.data}, {"out", a.out}}}}));
    const CrossValidation cv = cross_validate(model, samples, a.folds, train, progress("xval", a.options.deterministic, nullptr));
    json summary = {{"folds", json::array()}};
    for (std::size_t f = 0; f < cv.folds.size(); ++f) {
        const fs::path dir = out / ("fold_" + std::to_string(f));
        fs::create_directories(dir);
        write_json(dir / "report.json", report_json(cv.folds[f], a.options.deterministic));
        print_summary("fold " + std::to_string(f), cv.folds[f]);
        summary["folds"].push_back({{"fold", f},
                                    {"seed", cv.folds[f].seed},
                                    {"dice", to_json(cv.folds[f].dice())},
                                    {"dice_mean_std", format_mean_std(cv.folds[f].dice())}});
    }
    json aggregate = report_json(cv.aggregate, a.options.deterministic);
    aggregate["folds"] = summary["folds"];
    write_json(out / "aggregate.json", aggregate);
    print_summary("aggregate", cv.aggregate);
    return kOk;
}

struct SweepArgs {
    ModelOptions options;
    std::string data, test_data, out;
    std::vector<std::size_t> sizes{6, 15, 24};
    std::size_t test_size = 10;
    bool force = false;
};

int cmd_sweep(const SweepArgs& a) {
    std::vector<Sample> pool = load_dataset(a.data);
    std::vector<Sample> test;
    if (!a.test_data.empty()) {
        test = load_dataset(a.test_data);
    } else {
        if (pool.size() <= a.test_size) {
            throw ConfigError("dataset of " + std::to_string(pool.size()) + " samples cannot hold out " +
                              std::to_string(a.test_size));
        }
        test.assign(pool.end() - static_cast<std::ptrdiff_t>(a.test_size), pool.end());
        pool.resize(pool.size() - a.test_size);
    }
    if (a.sizes.empty()) throw ConfigError("--sizes is empty");
    std::vector<std::size_t> sizes = a.sizes;
    std::sort(sizes.begin(), sizes.end());
    if (sizes.front() == 0) throw ConfigError("training sizes must be positive");
    if (sizes.back() > pool.size()) {
        throw ConfigError("largest training size " + std::to_string(sizes.back()) + " exceeds the " +
                          std::to_string(pool.size()) + " available training samples");
    }
    std::vector<Sample> all = pool;
    all.insert(all.end(), test.begin(), test.end());
    const PiNetConfig model = a.options.model(all);
    const TrainConfig train = a.options.training();
    check_dataset(model, all, "sweep");
    if (model.weighted && std::find(train.stages.begin(), train.stages.end(), Stage::psi) == train.stages.end()) {
        throw ConfigError("weighted sweep needs the psi stage");
    }

    // Nested subsets: prefixes of one seeded permutation of the pool.
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(train.seed, 200));
    std::shuffle(order.begin(), order.end(), rng.engine());

    OutputLock lock(a.out, a.force);
    const fs::path out(a.out);
    json test_ids = json::array();
    for (const Sample& s : test) test_ids.push_back(s.id);
    write_json(out / "run_config.json",
               run_config("sweep", &model, &train, a.options.deterministic,
                          {{"sizes", sizes},
                           {"test_size", test.size()},
                           {"paths", {{"data", a.data}, {"test_data", a.test_data}, {"out", a.out}}}}));
    json result = {{"sizes", sizes}, {"test_ids", test_ids}, {"train_ids", json::object()}, {"aggregates", json::object()}};
    for (std::size_t n : sizes) {
        std::vector<Sample> subset;
        json ids = json::array();
        for (std::size_t i = 0; i < n; ++i) {
            subset.push_back(pool[order[i]]);
            ids.push_back(pool[order[i]].id);
        }
        ParameterStore params = init_parameters(model, train.seed);
        pinet::train(model, params, subset, train, progress("sweep " + std::to_string(n), a.options.deterministic, nullptr));
        EvalReport report = evaluate(model, params, test);
        report.config = {{"train_size", n}};
        report.seed = train.seed;
        const json r = report_json(report, a.options.deterministic);
        const fs::path dir = out / ("size_" + std::to_string(n));
        fs::create_directories(dir);
        write_json(dir / "report.json", r);
        result["train_ids"][std::to_string(n)] = ids;
        result["aggregates"][std::to_string(n)] = r.at("aggregates");
        print_summary("size " + std::to_string(n), report);
    }
    write_json(out / "sweep.json", result);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PiNet volumetric segmentation from learned projections"};
    app.require_subcommand(1);

    PhantomArgs phantom;
    CLI::App* ph = app.add_subcommand("phantom", "Generate an ellipsoid phantom dataset");
    ph->add_option("--n", phantom.n, "Number of volume/mask pairs");
    ph->add_option("--size", phantom.size, "Cube edge length");
    ph->add_flag("--confounder", phantom.confounder, "Add a brighter confounder ellipsoid");
    ph->add_option("--noise", phantom.noise, "Uniform noise amplitude");
    ph->add_option("--seed", phantom.seed, "Generator seed");
    ph->add_option("--first", phantom.first, "Index of the first phantom");
    ph->add_option("--out", phantom.out, "Output directory")->required();
    ph->add_flag("--force", phantom.force, "Write into a non-empty directory");

    TrainArgs train;
    CLI::App* tr = app.add_subcommand("train", "Train PiNet on a dataset");
    train.options.add_model(*tr);
    train.options.add_training(*tr);
    train.options.add_determinism(*tr);
    tr->add_option("--data", train.data, "Training dataset directory")->required();
    tr->add_option("--test-data", train.test_data, "Evaluate on this dataset after training");
    tr->add_option("--init", train.init, "Start from this checkpoint");
    tr->add_option("--out", train.out, "Output directory")->required();
    tr->add_flag("--force", train.force, "Write into a non-empty directory");

    EvalArgs eval;
    CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    eval.options.add_model(*ev);
    eval.options.add_determinism(*ev);
    ev->add_option("--data", eval.data, "Dataset directory")->required();
    ev->add_option("--checkpoint", eval.checkpoint, "Trained checkpoint");
    ev->add_flag("--oracle", eval.oracle, "Score the ground-truth masks against themselves");
    ev->add_flag("--dump-projections", eval.dump_projections, "Write per-angle PGM images");
    ev->add_option("--out", eval.out, "Output directory")->required();
    ev->add_flag("--force", eval.force, "Write into a non-empty directory");

    XvalArgs xval;
    CLI::App* xv = app.add_subcommand("xval", "k-fold cross-validation");
    xval.options.add_model(*xv);
    xval.options.add_training(*xv);
    xval.options.add_determinism(*xv);
    xv->add_option("--data", xval.data, "Dataset directory")->required();
    xv->add_option("--folds", xval.folds, "Number of folds");
    xv->add_option("--out", xval.out, "Output directory")->required();
    xv->add_flag("--force", xval.force, "Write into a non-empty directory");

    SweepArgs sweep;
    CLI::App* sw = app.add_subcommand("sweep", "Training-set size sweep on a fixed test set");
    sweep.options.add_model(*sw);
    sweep.options.add_training(*sw);
    sweep.options.add_determinism(*sw);
    sw->add_option("--data", sweep.data, "Training pool directory")->required();
    sw->add_option("--test-data", sweep.test_data, "Held-out dataset (default: the last --test-size of --data)");
    sw->add_option("--test-size", sweep.test_size, "Held-out count when --test-data is absent");
    sw->add_option("--sizes", sweep.sizes, "Training set sizes")->delimiter(',');
    sw->add_option("--out", sweep.out, "Output directory")->required();
    sw->add_flag("--force", sweep.force, "Write into a non-empty directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return report_error("usage", kUsage, e.what());
    }

    try {
        if (ph->parsed()) return cmd_phantom(phantom);
        if (tr->parsed()) return cmd_train(train);
        if (ev->parsed()) return cmd_eval(eval);
        if (xv->parsed()) return cmd_xval(xval);
        if (sw->parsed()) return cmd_sweep(sweep);
    } catch (const ConflictError& e) {
        return report_error("conflict", kConflict, e.what());
    } catch (const ShapeError& e) {
        return report_error("shape", kShape, e.what());
    } catch (const NumericError& e) {
        return report_error("numeric", kNumeric, e.what());
    } catch (const std::invalid_argument& e) {
        return report_error("config", kConfig, e.what());
    } catch (const fs::filesystem_error& e) {
        return report_error("io", kIo, e.what());
    } catch (const std::runtime_error& e) {
        return report_error("io", kIo, e.what());
    } catch (const std::exception& e) {
        return report_error("internal", kInternal, e.what());
    }
    return kInternal;
}
