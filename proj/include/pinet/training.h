#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "pinet/autodiff.h"
#include "pinet/binning.h"
#include "pinet/networks.h"
#include "pinet/phantom.h"
#include "pinet/pipeline.h"

namespace pinet {

// ---- losses and metrics ----

/// 1 - (2 sum(p g) + eps) / (sum p + sum g + eps).
Var dice_loss(const Var& pred, const Var& target, double eps = 1.0);
double dice_loss(const Tensor& pred, const Tensor& target, double eps = 1.0);
/// Mean of dice_loss over every (class, bin) channel of (c, b, H, W) maps.
Var binned_dice_loss(const Var& probabilities, const Var& one_hot, double eps = 1.0);

/// 2|A n B| / (|A| + |B|); two empty masks score 1. Inputs must be binary.
double dice_score(const Tensor& a, const Tensor& b);

/// Symmetric Hausdorff distance between the nonzero voxels of two equally shaped masks
/// (rank 1 to 3), Euclidean in voxel units. Both empty gives 0, exactly one empty +inf.
double hausdorff(const Tensor& a, const Tensor& b);
/// Squared Euclidean distance from every voxel to the nearest nonzero voxel of `mask`
/// (+inf everywhere when the mask is empty). Exact separable transform.
Tensor squared_distance_transform(const Tensor& mask);

// ---- optimiser ----

struct AdadeltaOptions {
    double lr = 0.2;
    double rho = 0.95;
    double eps = 1e-6;
};

/// Running averages E[g^2] and E[dx^2] per parameter name.
struct AdadeltaState {
    std::map<std::string, Tensor> mean_square_grad;
    std::map<std::string, Tensor> mean_square_delta;
};

/// E[g2] <- rho E[g2] + (1-rho) g^2; dx = -lr RMS(E[dx2]) / RMS(E[g2]) g;
/// E[dx2] <- rho E[dx2] + (1-rho) dx^2; x += dx, with RMS(t) = sqrt(t + eps).
/// Non-finite gradients raise NumericError naming the parameter.
void adadelta_step(ParameterStore& params, const std::map<std::string, Tensor>& grads, AdadeltaState& state,
                   const AdadeltaOptions& options);

// ---- staged training ----

enum class Stage { psi, phi, finetune };

struct TrainConfig {
    std::vector<Stage> stages{Stage::psi, Stage::phi, Stage::finetune};
    std::size_t epochs = 30;  // per stage
    std::size_t minibatch = 10;
    AdadeltaOptions optimizer;
    double dice_eps = 1.0;
    bool calibrate_lift = true;
    bool unfreeze_networks = false;  // fine-tune Phi and Psi as well
    std::uint64_t seed = 0;

    void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);
std::string stage_name(Stage stage);
Stage stage_from_name(const std::string& name);

struct EpochLog {
    std::string stage;
    std::size_t epoch = 0;
    double loss = 0.0;
    double seconds = 0.0;
};
using EpochCallback = std::function<void(const EpochLog&)>;

/// Orthogonal-projection pairs (radon_orthogonal(x_l), psi_target(y_l)) over all
/// orientations and angles.
struct ProjectionPair {
    Tensor input;
    Tensor target;
};
std::vector<ProjectionPair> psi_dataset(const PiNetConfig& config, const std::vector<Sample>& samples);
/// (phi_input, discretize_target(radon_plain(y_l))) pairs with the current Psi.
std::vector<ProjectionPair> phi_dataset(const PiNetConfig& config, const ParameterStore& params,
                                        const std::vector<Sample>& samples);

/// Pads every sample as the pipeline will (square, cubic for v > 1).
std::vector<Sample> prepare_samples(const PiNetConfig& config, const std::vector<Sample>& samples);

std::vector<EpochLog> train_psi(const PiNetConfig& config, ParameterStore& params, const std::vector<Sample>& samples,
                                const TrainConfig& train, const EpochCallback& on_epoch = nullptr);
std::vector<EpochLog> train_phi(const PiNetConfig& config, ParameterStore& params, const std::vector<Sample>& samples,
                                const TrainConfig& train, const EpochCallback& on_epoch = nullptr);

/// Grid search of the reconstruction level that best separates target voxels (mean
/// Dice over the samples); sets lift.scale = 5 / t and lift.bias = -5 so the sigmoid
/// crosses 0.5 there. Returns t.
double calibrate_lift(const PiNetConfig& config, ParameterStore& params, const std::vector<Sample>& samples);

/// Volumetric Dice fine-tuning of the lift, bin and fusion parameters (and the networks
/// when unfrozen), one optimiser step per volume.
std::vector<EpochLog> finetune(const PiNetConfig& config, ParameterStore& params, const std::vector<Sample>& samples,
                               const TrainConfig& train, const EpochCallback& on_epoch = nullptr);

/// Runs the configured stages in order. Unweighted configurations skip the psi stage.
std::vector<EpochLog> train(const PiNetConfig& config, ParameterStore& params, const std::vector<Sample>& samples,
                            const TrainConfig& train, const EpochCallback& on_epoch = nullptr);

// ---- evaluation ----

struct SampleResult {
    std::string id;
    double dice = 0.0;
    double hausdorff = 0.0;
    double seconds = 0.0;
};

struct Summary {
    double mean = 0.0;
    double std = 0.0;  // population
    double min = 0.0;
    double q1 = 0.0;
    double median = 0.0;
    double q3 = 0.0;
    double max = 0.0;
    std::size_t count = 0;
    std::size_t excluded = 0;  // non-finite entries left out
};

/// Quartiles use linear interpolation between order statistics.
Summary summarize(const std::vector<double>& values);
/// "0.894±0.037"
std::string format_mean_std(const Summary& s, int digits = 3);

struct EvalReport {
    std::vector<SampleResult> samples;
    nlohmann::json config = nlohmann::json::object();
    std::uint64_t seed = 0;

    Summary dice() const;
    Summary hausdorff() const;
    Summary seconds() const;
};

nlohmann::json to_json(const Summary& s);
nlohmann::json to_json(const EvalReport& report);

/// Thresholded prediction of every sample scored against its mask. Dice is averaged
/// and Hausdorff maximised over classes.
EvalReport evaluate(const PiNetConfig& config, const ParameterStore& params, const std::vector<Sample>& samples);

/// Deterministic seed derived from a master seed and a tag.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag);

/// Fold of every sample: a seeded permutation dealt round-robin.
std::vector<std::size_t> fold_assignment(std::size_t count, std::size_t folds, std::uint64_t seed);

struct CrossValidation {
    std::vector<EvalReport> folds;
    EvalReport aggregate;  // all held-out samples
};

CrossValidation cross_validate(const PiNetConfig& config, const std::vector<Sample>& samples, std::size_t folds,
                               const TrainConfig& train, const EpochCallback& on_epoch = nullptr);

}  // namespace pinet
