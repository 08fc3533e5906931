#include "pinet/training.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <stdexcept>

#include "pinet/ops.h"
#include "pinet/random.h"

namespace pinet {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

Tape& shared_tape(const Var& a, const Var& b) {
    if (&a.tape() != &b.tape()) throw std::logic_error("operands recorded on different tapes");
    return a.tape();
}

struct DiceTerms {
    double intersection = 0.0;
    double pred = 0.0;
    double target = 0.0;
};

DiceTerms dice_terms(const double* p, const double* g, std::size_t n) {
    DiceTerms t;
    for (std::size_t i = 0; i < n; ++i) {
        t.intersection += p[i] * g[i];
        t.pred += p[i];
        t.target += g[i];
    }
    return t;
}

double dice_value(const DiceTerms& t, double eps) {
    return 1.0 - (2.0 * t.intersection + eps) / (t.pred + t.target + eps);
}

// d/dp_i and d/dg_i of dice_value, scaled by `weight`, added into gp / gg.
void dice_backward(const DiceTerms& t, double eps, double weight, const double* p, const double* g, std::size_t n,
                   double* gp, double* gg) {
    const double num = 2.0 * t.intersection + eps, den = t.pred + t.target + eps;
    const double inv = weight / (den * den);
    for (std::size_t i = 0; i < n; ++i) {
        if (gp) gp[i] -= (2.0 * g[i] * den - num) * inv;
        if (gg) gg[i] -= (2.0 * p[i] * den - num) * inv;
    }
}

void require_binary(const Tensor& t, const char* what) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] != 0.0 && t[i] != 1.0) throw std::invalid_argument(std::string(what) + ": mask is not binary");
    }
}

// One-dimensional squared distance transform of sampled function f (Felzenszwalb and
// Huttenlocher), with +inf entries treated as absent sites.
void distance_1d(const double* f, double* d, std::size_t n, std::vector<std::size_t>& v, std::vector<double>& z) {
    v.resize(n);
    z.resize(n + 1);
    std::size_t k = 0;
    bool any = false;
    for (std::size_t q = 0; q < n; ++q) {
        if (f[q] == kInf) continue;
        if (!any) {
            v[0] = q;
            z[0] = -kInf;
            z[1] = kInf;
            any = true;
            continue;
        }
        const double fq = f[q] + static_cast<double>(q * q);
        auto meet = [&](std::size_t r) {
            return (fq - (f[r] + static_cast<double>(r * r))) / (2.0 * (static_cast<double>(q) - static_cast<double>(r)));
        };
        double s = meet(v[k]);
        while (s <= z[k]) s = meet(v[--k]);  // z[0] = -inf stops the descent
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    if (!any) {
        std::fill(d, d + n, kInf);
        return;
    }
    k = 0;
    for (std::size_t q = 0; q < n; ++q) {
        while (z[k + 1] < static_cast<double>(q)) ++k;
        const double diff = static_cast<double>(q) - static_cast<double>(v[k]);
        d[q] = diff * diff + f[v[k]];
    }
}

Shape as_3d(const Shape& s) {
    if (s.empty() || s.size() > 3) throw ShapeError("distance transform needs rank 1 to 3, got " + to_string(s));
    Shape out(3 - s.size(), 1);
    out.insert(out.end(), s.begin(), s.end());
    return out;
}

// Largest distance from a voxel of `from` to the set whose squared transform is `dt`.
double directed(const Tensor& from, const Tensor& dt) {
    double worst = 0.0;
    for (std::size_t i = 0; i < from.size(); ++i)
        if (from[i] != 0.0) worst = std::max(worst, dt[i]);
    return std::sqrt(worst);
}

double quantile_sorted(const std::vector<double>& v, double q) {
    const double pos = q * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return v[lo] + (v[hi] - v[lo]) * frac;
}

Tensor class_of(const Tensor& t, std::size_t k) {
    Shape rest(t.shape().begin() + 1, t.shape().end());
    return t.slice(k, 1).reshaped(rest);
}

bool has_prefix(const std::string& name, const char* prefix) { return name.rfind(prefix, 0) == 0; }

struct StepRunner {
    const TrainConfig& train;
    ParameterStore& params;
    AdadeltaState state;

    // Runs a backward sweep from `loss` and applies one optimiser step to the trainables.
    void step(Tape& tape, const BoundParameters& bound, const Var& loss) {
        tape.backward(loss);
        std::map<std::string, Tensor> grads;
        for (const auto& [name, var] : bound.trainable()) grads.emplace(name, tape.grad(var));
        adadelta_step(params, grads, state, train.optimizer);
    }
};

using PairLoss = std::function<Var(const BoundParameters&, Tape&, const ProjectionPair&)>;

std::vector<EpochLog> run_projection_stage(const char* name, const std::vector<ProjectionPair>& pairs,
                                           ParameterStore& params, const TrainConfig& train, const char* prefix,
                                           std::uint64_t tag, const PairLoss& item_loss,
                                           const EpochCallback& on_epoch) {
    if (pairs.empty()) throw std::invalid_argument(std::string(name) + ": empty training set");
    StepRunner runner{train, params, {}};
    Rng rng(derive_seed(train.seed, tag));
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<EpochLog> logs;
    const auto trainable = [prefix](const std::string& n) { return has_prefix(n, prefix); };
    for (std::size_t epoch = 1; epoch <= train.epochs; ++epoch) {
        const auto start = Clock::now();
        std::shuffle(order.begin(), order.end(), rng.engine());
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += train.minibatch) {
            const std::size_t end = std::min(order.size(), begin + train.minibatch);
            Tape tape;
            const BoundParameters bound(tape, params, trainable);
            Var loss;
            for (std::size_t i = begin; i < end; ++i) {
                const Var item = item_loss(bound, tape, pairs[order[i]]);
                loss = loss.valid() ? add(loss, item) : item;
            }
            loss = scale(loss, 1.0 / static_cast<double>(end - begin));
            total += loss.value()[0];
            ++batches;
            runner.step(tape, bound, loss);
        }
        EpochLog log{name, epoch, total / static_cast<double>(batches), seconds_since(start)};
        logs.push_back(log);
        if (on_epoch) on_epoch(log);
    }
    return logs;
}

}  // namespace

// ---- losses and metrics ----

Var dice_loss(const Var& pred, const Var& target, double eps) {
    Tape& tape = shared_tape(pred, target);
    require_same_shape(pred.value(), target.value(), "dice_loss");
    const std::size_t n = pred.value().size();
    const DiceTerms t = dice_terms(pred.value().data(), target.value().data(), n);
    return tape.record("dice_loss", Tensor::scalar(dice_value(t, eps)), {pred, target},
                       [pred, target, t, eps, n](const Tensor& g, const Tensor&) {
                           Tape& tp = pred.tape();
                           double* gp = pred.requires_grad() ? tp.grad_buffer(pred).data() : nullptr;
                           double* gg = target.requires_grad() ? tp.grad_buffer(target).data() : nullptr;
                           dice_backward(t, eps, g[0], pred.value().data(), target.value().data(), n, gp, gg);
                       });
}

double dice_loss(const Tensor& pred, const Tensor& target, double eps) {
    require_same_shape(pred, target, "dice_loss");
    return dice_value(dice_terms(pred.data(), target.data(), pred.size()), eps);
}

Var binned_dice_loss(const Var& probabilities, const Var& one_hot, double eps) {
    Tape& tape = shared_tape(probabilities, one_hot);
    require_same_shape(probabilities.value(), one_hot.value(), "binned_dice_loss");
    require_rank(probabilities.value(), 4, "binned_dice_loss");
    const Shape& s = probabilities.shape();
    const std::size_t channels = s[0] * s[1], plane = s[2] * s[3];
    std::vector<DiceTerms> terms(channels);
    double total = 0.0;
    for (std::size_t ch = 0; ch < channels; ++ch) {
        terms[ch] = dice_terms(probabilities.value().data() + ch * plane, one_hot.value().data() + ch * plane, plane);
        total += dice_value(terms[ch], eps);
    }
    return tape.record("binned_dice_loss", Tensor::scalar(total / static_cast<double>(channels)),
                       {probabilities, one_hot},
                       [probabilities, one_hot, terms, eps, channels, plane](const Tensor& g, const Tensor&) {
                           Tape& tp = probabilities.tape();
                           double* gp = probabilities.requires_grad() ? tp.grad_buffer(probabilities).data() : nullptr;
                           double* gg = one_hot.requires_grad() ? tp.grad_buffer(one_hot).data() : nullptr;
                           const double w = g[0] / static_cast<double>(channels);
                           for (std::size_t ch = 0; ch < channels; ++ch) {
                               const std::size_t off = ch * plane;
                               dice_backward(terms[ch], eps, w, probabilities.value().data() + off,
                                             one_hot.value().data() + off, plane, gp ? gp + off : nullptr,
                                             gg ? gg + off : nullptr);
                           }
                       });
}

double dice_score(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "dice_score");
    require_binary(a, "dice_score");
    require_binary(b, "dice_score");
    const DiceTerms t = dice_terms(a.data(), b.data(), a.size());
    if (t.pred + t.target == 0.0) return 1.0;
    return 2.0 * t.intersection / (t.pred + t.target);
}

Tensor squared_distance_transform(const Tensor& mask) {
    const Shape s3 = as_3d(mask.shape());
    Tensor dt(mask.shape());
    for (std::size_t i = 0; i < mask.size(); ++i) dt[i] = mask[i] != 0.0 ? 0.0 : kInf;
    std::vector<double> line, out;
    std::vector<std::size_t> v;
    std::vector<double> z;
    const std::size_t strides[3] = {s3[1] * s3[2], s3[2], 1};
    for (std::size_t axis = 0; axis < 3; ++axis) {
        const std::size_t n = s3[axis];
        if (n == 1) continue;
        line.resize(n);
        out.resize(n);
        const std::size_t count = mask.size() / n;
        for (std::size_t lin = 0; lin < count; ++lin) {
            // Decompose the line index over the remaining two axes.
            std::size_t rem = lin, base = 0;
            for (std::size_t other = 3; other-- > 0;) {
                if (other == axis) continue;
                base += (rem % s3[other]) * strides[other];
                rem /= s3[other];
            }
            for (std::size_t q = 0; q < n; ++q) line[q] = dt[base + q * strides[axis]];
            distance_1d(line.data(), out.data(), n, v, z);
            for (std::size_t q = 0; q < n; ++q) dt[base + q * strides[axis]] = out[q];
        }
    }
    return dt;
}

double hausdorff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "hausdorff");
    const bool a_empty = max_abs(a) == 0.0, b_empty = max_abs(b) == 0.0;
    if (a_empty && b_empty) return 0.0;
    if (a_empty || b_empty) return kInf;
    return std::max(directed(a, squared_distance_transform(b)), directed(b, squared_distance_transform(a)));
}

// ---- optimiser ----

void adadelta_step(ParameterStore& params, const std::map<std::string, Tensor>& grads, AdadeltaState& state,
                   const AdadeltaOptions& o) {
    for (const auto& [name, g] : grads) {
        if (!g.all_finite()) throw NumericError("adadelta: non-finite gradient for parameter '" + name + "'");
        require_same_shape(params.get(name), g, "adadelta gradient");
    }
    for (const auto& [name, g] : grads) {
        Tensor& x = params.get(name);
        auto [it_g, new_g] = state.mean_square_grad.try_emplace(name, x.shape());
        auto [it_d, new_d] = state.mean_square_delta.try_emplace(name, x.shape());
        Tensor& eg = it_g->second;
        Tensor& ed = it_d->second;
        for (std::size_t i = 0; i < x.size(); ++i) {
            eg[i] = o.rho * eg[i] + (1.0 - o.rho) * g[i] * g[i];
            const double delta = -o.lr * std::sqrt(ed[i] + o.eps) / std::sqrt(eg[i] + o.eps) * g[i];
            ed[i] = o.rho * ed[i] + (1.0 - o.rho) * delta * delta;
            x[i] += delta;
        }
    }
}

// ---- configuration ----

void TrainConfig::validate() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
    if (minibatch < 1) throw std::invalid_argument("minibatch must be at least 1");
    if (!(optimizer.lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (!(optimizer.rho >= 0.0 && optimizer.rho < 1.0)) throw std::invalid_argument("rho must lie in [0, 1)");
    if (!(optimizer.eps > 0.0)) throw std::invalid_argument("Adadelta eps must be positive");
    if (dice_eps < 0.0) throw std::invalid_argument("Dice smoothing must be nonnegative");
}

std::string stage_name(Stage stage) {
    switch (stage) {
        case Stage::psi: return "psi";
        case Stage::phi: return "phi";
        case Stage::finetune: return "finetune";
    }
    return "?";
}

Stage stage_from_name(const std::string& name) {
    if (name == "psi") return Stage::psi;
    if (name == "phi") return Stage::phi;
    if (name == "finetune") return Stage::finetune;
    throw std::invalid_argument("unknown stage '" + name + "' (expected psi, phi or finetune)");
}

nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json stages = nlohmann::json::array();
    for (Stage s : c.stages) stages.push_back(stage_name(s));
    return {{"stages", stages},
            {"epochs", c.epochs},
            {"minibatch", c.minibatch},
            {"lr", c.optimizer.lr},
            {"rho", c.optimizer.rho},
            {"eps", c.optimizer.eps},
            {"dice_eps", c.dice_eps},
            {"calibrate_lift", c.calibrate_lift},
            {"unfreeze_networks", c.unfreeze_networks},
            {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("stages")) {
        c.stages.clear();
        for (const auto& s : j.at("stages")) c.stages.push_back(stage_from_name(s.get<std::string>()));
    }
    c.epochs = j.value("epochs", c.epochs);
    c.minibatch = j.value("minibatch", c.minibatch);
    c.optimizer.lr = j.value("lr", c.optimizer.lr);
    c.optimizer.rho = j.value("rho", c.optimizer.rho);
    c.optimizer.eps = j.value("eps", c.optimizer.eps);
    c.dice_eps = j.value("dice_eps", c.dice_eps);
    c.calibrate_lift = j.value("calibrate_lift", c.calibrate_lift);
    c.unfreeze_networks = j.value("unfreeze_networks", c.unfreeze_networks);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

// ---- datasets ----

std::vector<Sample> prepare_samples(const PiNetConfig& config, const std::vector<Sample>& samples) {
    std::vector<Sample> out;
    out.reserve(samples.size());
    const bool cube = config.orientations > 1;
    for (const Sample& s : samples) {
        Sample p{s.id, pad_to_square(s.volume, cube), pad_to_square(s.mask, cube)};
        if (p.mask.dim(0) != config.classes) {
            throw ShapeError("sample '" + s.id + "' has " + std::to_string(p.mask.dim(0)) + " mask channels, config has " +
                             std::to_string(config.classes) + " classes");
        }
        check_input(config, p.volume.shape());
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<ProjectionPair> psi_dataset(const PiNetConfig& config, const std::vector<Sample>& samples) {
    std::vector<ProjectionPair> pairs;
    for (const Sample& s : samples) {
        for (std::size_t l = 0; l < config.orientations; ++l) {
            const Orientation o = orientation_from_index(static_cast<int>(l) + 1);
            const Tensor x = orient(s.volume, o), y = orient(s.mask, o);
            for (double deg : config.angles(x.dim(0)).degrees) {
                pairs.push_back({radon_orthogonal(x, deg), psi_target(y, deg)});
            }
        }
    }
    return pairs;
}

std::vector<ProjectionPair> phi_dataset(const PiNetConfig& config, const ParameterStore& params,
                                        const std::vector<Sample>& samples) {
    std::vector<ProjectionPair> pairs;
    for (const Sample& s : samples) {
        for (std::size_t l = 0; l < config.orientations; ++l) {
            const Orientation o = orientation_from_index(static_cast<int>(l) + 1);
            const Tensor x = orient(s.volume, o), y = orient(s.mask, o);
            for (double deg : config.angles(x.dim(0)).degrees) {
                std::vector<Tensor> targets;
                for (std::size_t k = 0; k < config.classes; ++k) {
                    // Interpolation ringing leaves small negative line sums next to the object.
                    Tensor t = radon_plain(class_of(y, k), deg);
                    for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::max(t[i], 0.0);
                    targets.push_back(std::move(t));
                }
                pairs.push_back({phi_input(config, params, x, deg), discretize_target(stack(targets), config.bins).data});
            }
        }
    }
    return pairs;
}

// ---- stages ----

std::vector<EpochLog> train_psi(const PiNetConfig& config, ParameterStore& params, const std::vector<Sample>& samples,
                                const TrainConfig& train, const EpochCallback& on_epoch) {
    train.validate();
    if (samples.empty()) throw std::invalid_argument("train_psi: empty dataset");
    const std::vector<ProjectionPair> pairs = psi_dataset(config, prepare_samples(config, samples));
    const double eps = train.dice_eps;
    return run_projection_stage(
        "psi", pairs, params, train, "psi.", 1,
        [&config, eps](const BoundParameters& bound, Tape& tape, const ProjectionPair& pair) {
            const Var mask = psi_mask(config.psi, bound, tape.constant(pair.input));
            return dice_loss(mask, tape.constant(pair.target), eps);
        },
        on_epoch);
}

std::vector<EpochLog> train_phi(const PiNetConfig& config, ParameterStore& params, const std::vector<Sample>& samples,
                                const TrainConfig& train, const EpochCallback& on_epoch) {
    train.validate();
    if (samples.empty()) throw std::invalid_argument("train_phi: empty dataset");
    const std::vector<ProjectionPair> pairs = phi_dataset(config, params, prepare_samples(config, samples));
    const double eps = train.dice_eps;
    return run_projection_stage(
        "phi", pairs, params, train, "phi.", 2,
        [&config, eps](const BoundParameters& bound, Tape& tape, const ProjectionPair& pair) {
            const Var probs = unet_forward(config.phi, bound, "phi", tape.constant(pair.input));
            return binned_dice_loss(reshape(probs, pair.target.shape()), tape.constant(pair.target), eps);
        },
        on_epoch);
}

double calibrate_lift(const PiNetConfig& config, ParameterStore& params, const std::vector<Sample>& raw) {
    const std::vector<Sample> samples = prepare_samples(config, raw);
    if (samples.empty()) throw std::invalid_argument("calibrate_lift: empty dataset");
    const std::size_t c = config.classes;
    // (response, label) pairs per class, pooled over samples and orientations.
    std::vector<std::vector<std::pair<double, bool>>> pooled(c);
    for (const Sample& s : samples) {
        const ForwardCache cache = forward_cache(config, params, s.volume);
        const AngleSet angles = config.angles(s.volume.dim(0));
        for (std::size_t l = 0; l < cache.probabilities.size(); ++l) {
            const Tensor& probs = cache.probabilities[l];
            BinnedMap map{probs, BinKind::probability, Tensor()};
            const Tensor collapsed = collapse_bins(map, params.get("bins.weights"));
            const Tensor stack_in =
                collapsed.reshaped({c, angles.size(), probs.dim(2) / angles.size(), probs.dim(3)});
            const Tensor r = orient_inverse(lift_response(stack_in, params.get("lift.kernel"), angles, config.ramp),
                                            orientation_from_index(static_cast<int>(l) + 1));
            const std::size_t per_class = r.size() / c;
            for (std::size_t k = 0; k < c; ++k)
                for (std::size_t i = 0; i < per_class; ++i)
                    pooled[k].emplace_back(r[k * per_class + i], s.mask[k * per_class + i] != 0.0);
        }
    }
    double last = 0.0;
    Tensor& scale = params.get("lift.scale");
    Tensor& bias = params.get("lift.bias");
    for (std::size_t k = 0; k < c; ++k) {
        auto& v = pooled[k];
        std::sort(v.begin(), v.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
        double positives = 0.0;
        for (const auto& e : v) positives += e.second ? 1.0 : 0.0;
        if (positives == 0.0) continue;
        // Sweep the cut from the top: predicted = everything at or above v[i].
        double tp = 0.0, best = -1.0, best_t = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) {
            tp += v[i].second ? 1.0 : 0.0;
            if (i + 1 < v.size() && v[i + 1].first == v[i].first) continue;
            const double dice = 2.0 * tp / (static_cast<double>(i + 1) + positives);
            if (dice > best) {
                best = dice;
                // Midway to the next lower response keeps the cut off the sampled values.
                best_t = i + 1 < v.size() ? 0.5 * (v[i].first + v[i + 1].first) : v[i].first;
            }
        }
        if (best_t > 0.0) {
            scale[k] = 5.0 / best_t;
            bias[k] = -5.0;
        }
        last = best_t;
    }
    return last;
}

std::vector<EpochLog> finetune(const PiNetConfig& config, ParameterStore& params, const std::vector<Sample>& raw,
                               const TrainConfig& train, const EpochCallback& on_epoch) {
    train.validate();
    const std::vector<Sample> samples = prepare_samples(config, raw);
    if (samples.empty()) throw std::invalid_argument("finetune: empty dataset");
    const bool networks = train.unfreeze_networks;
    std::vector<ForwardCache> caches;
    if (!networks) {
        for (const Sample& s : samples) caches.push_back(forward_cache(config, params, s.volume));
    }
    const auto trainable = [networks](const std::string& n) {
        return has_prefix(n, "lift.") || has_prefix(n, "bins.") || has_prefix(n, "fusion.") ||
               (networks && (has_prefix(n, "phi.") || has_prefix(n, "psi.")));
    };
    StepRunner runner{train, params, {}};
    Rng rng(derive_seed(train.seed, 3));
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<EpochLog> logs;
    for (std::size_t epoch = 1; epoch <= train.epochs; ++epoch) {
        const auto start = Clock::now();
        std::shuffle(order.begin(), order.end(), rng.engine());
        double total = 0.0;
        for (std::size_t idx : order) {
            const Sample& s = samples[idx];
            Tape tape;
            const BoundParameters bound(tape, params, trainable);
            const Var soft = networks ? forward(config, bound, s.volume)
                                      : forward_from_cache(config, bound, caches[idx], config.angles(s.volume.dim(0)));
            const Var loss = dice_loss(soft, tape.constant(s.mask), train.dice_eps);
            total += loss.value()[0];
            runner.step(tape, bound, loss);
        }
        EpochLog log{"finetune", epoch, total / static_cast<double>(samples.size()), seconds_since(start)};
        logs.push_back(log);
        if (on_epoch) on_epoch(log);
    }
    return logs;
}

std::vector<EpochLog> train(const PiNetConfig& config, ParameterStore& params, const std::vector<Sample>& samples,
                            const TrainConfig& train_config, const EpochCallback& on_epoch) {
    train_config.validate();
    if (samples.empty()) throw std::invalid_argument("train: empty dataset");
    // Shape problems surface before any epoch runs.
    prepare_samples(config, {samples.front()});
    std::vector<EpochLog> logs;
    auto append = [&logs](std::vector<EpochLog> more) { logs.insert(logs.end(), more.begin(), more.end()); };
    for (Stage stage : train_config.stages) {
        switch (stage) {
            case Stage::psi:
                if (config.weighted) append(train_psi(config, params, samples, train_config, on_epoch));
                break;
            case Stage::phi:
                append(train_phi(config, params, samples, train_config, on_epoch));
                break;
            case Stage::finetune:
                if (train_config.calibrate_lift) calibrate_lift(config, params, samples);
                append(finetune(config, params, samples, train_config, on_epoch));
                break;
        }
    }
    return logs;
}

// ---- evaluation ----

Summary summarize(const std::vector<double>& values) {
    Summary s;
    std::vector<double> v;
    for (double x : values) {
        if (std::isfinite(x)) {
            v.push_back(x);
        } else {
            ++s.excluded;
        }
    }
    s.count = v.size();
    if (v.empty()) return s;
    std::sort(v.begin(), v.end());
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(var / static_cast<double>(v.size()));
    s.min = v.front();
    s.max = v.back();
    s.q1 = quantile_sorted(v, 0.25);
    s.median = quantile_sorted(v, 0.5);
    s.q3 = quantile_sorted(v, 0.75);
    return s;
}

std::string format_mean_std(const Summary& s, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f±%.*f", digits, s.mean, digits, s.std);
    return buf;
}

Summary EvalReport::dice() const {
    std::vector<double> v;
    for (const auto& s : samples) v.push_back(s.dice);
    return summarize(v);
}

Summary EvalReport::hausdorff() const {
    std::vector<double> v;
    for (const auto& s : samples) v.push_back(s.hausdorff);
    return summarize(v);
}

Summary EvalReport::seconds() const {
    std::vector<double> v;
    for (const auto& s : samples) v.push_back(s.seconds);
    return summarize(v);
}

nlohmann::json to_json(const Summary& s) {
    return {{"mean", s.mean}, {"std", s.std},       {"min", s.min}, {"q1", s.q1},
            {"median", s.median}, {"q3", s.q3}, {"max", s.max}, {"count", s.count},
            {"excluded", s.excluded}, {"mean_std", format_mean_std(s)}};
}

nlohmann::json to_json(const EvalReport& report) {
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& s : report.samples) {
        samples.push_back({{"id", s.id},
                           {"dice", s.dice},
                           {"hausdorff", std::isfinite(s.hausdorff) ? nlohmann::json(s.hausdorff) : nlohmann::json("inf")},
                           {"seconds", s.seconds}});
    }
    return {{"samples", samples},
            {"aggregates",
             {{"dice", to_json(report.dice())},
              {"hausdorff", to_json(report.hausdorff())},
              {"seconds", to_json(report.seconds())}}},
            {"config", report.config},
            {"seed", report.seed}};
}

EvalReport evaluate(const PiNetConfig& config, const ParameterStore& params, const std::vector<Sample>& samples) {
    EvalReport report;
    for (const Sample& s : samples) {
        const auto start = Clock::now();
        const Tensor soft = forward(config, params, s.volume);
        const Tensor mask = threshold(soft, config.threshold);
        const double seconds = seconds_since(start);
        require_same_shape(mask, s.mask, "evaluate");
        double dice = 0.0, haus = 0.0;
        for (std::size_t k = 0; k < config.classes; ++k) {
            const Tensor a = class_of(mask, k), b = class_of(s.mask, k);
            dice += dice_score(a, b);
            haus = std::max(haus, hausdorff(a, b));
        }
        report.samples.push_back({s.id, dice / static_cast<double>(config.classes), haus, seconds});
    }
    return report;
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t tag) {
    std::seed_seq seq{static_cast<std::uint32_t>(master), static_cast<std::uint32_t>(master >> 32),
                      static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32)};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

std::vector<std::size_t> fold_assignment(std::size_t count, std::size_t folds, std::uint64_t seed) {
    if (folds < 2) throw std::invalid_argument("need at least 2 folds");
    if (count < folds) {
        throw std::invalid_argument("dataset of " + std::to_string(count) + " samples is smaller than " +
                                    std::to_string(folds) + " folds");
    }
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(seed);
    std::shuffle(order.begin(), order.end(), rng.engine());
    std::vector<std::size_t> fold(count);
    for (std::size_t i = 0; i < count; ++i) fold[order[i]] = i % folds;
    return fold;
}

CrossValidation cross_validate(const PiNetConfig& config, const std::vector<Sample>& samples, std::size_t folds,
                               const TrainConfig& train_config, const EpochCallback& on_epoch) {
    const std::vector<std::size_t> assignment = fold_assignment(samples.size(), folds, train_config.seed);
    CrossValidation cv;
    cv.aggregate.seed = train_config.seed;
    for (std::size_t f = 0; f < folds; ++f) {
        std::vector<Sample> train_set, test_set;
        for (std::size_t i = 0; i < samples.size(); ++i) (assignment[i] == f ? test_set : train_set).push_back(samples[i]);
        TrainConfig fold_train = train_config;
        fold_train.seed = derive_seed(train_config.seed, 100 + f);
        ParameterStore params = init_parameters(config, fold_train.seed);
        train(config, params, train_set, fold_train, on_epoch);
        EvalReport report = evaluate(config, params, test_set);
        report.seed = fold_train.seed;
        report.config = {{"fold", f}, {"train_size", train_set.size()}, {"test_size", test_set.size()}};
        cv.aggregate.samples.insert(cv.aggregate.samples.end(), report.samples.begin(), report.samples.end());
        cv.folds.push_back(std::move(report));
    }
    return cv;
}

}  // namespace pinet
