#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "pinet/ops.h"
#include "pinet/training.h"
#include "test_util.h"

using namespace pinet;
using pinet::testing::random_tensor;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Tensor random_mask(const Shape& shape, std::uint64_t seed, double density) {
    Rng rng(seed);
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform() < density ? 1.0 : 0.0;
    return t;
}

// Brute-force symmetric Hausdorff over all point pairs of two (d1,d2,d3) masks.
double brute_hausdorff(const Tensor& a, const Tensor& b) {
    std::vector<std::array<double, 3>> pa, pb;
    const Shape& s = a.shape();
    for (std::size_t i = 0; i < s[0]; ++i)
        for (std::size_t j = 0; j < s[1]; ++j)
            for (std::size_t k = 0; k < s[2]; ++k) {
                if (a.at(i, j, k) != 0.0) pa.push_back({double(i), double(j), double(k)});
                if (b.at(i, j, k) != 0.0) pb.push_back({double(i), double(j), double(k)});
            }
    if (pa.empty() && pb.empty()) return 0.0;
    if (pa.empty() || pb.empty()) return kInf;
    auto directed = [](const auto& from, const auto& to) {
        double worst = 0.0;
        for (const auto& p : from) {
            double best = kInf;
            for (const auto& q : to)
                best = std::min(best, std::hypot(p[0] - q[0], p[1] - q[1], p[2] - q[2]));
            worst = std::max(worst, best);
        }
        return worst;
    };
    return std::max(directed(pa, pb), directed(pb, pa));
}

PiNetConfig tiny_config(std::size_t orientations = 1) {
    PiNetConfig c;
    c.orientations = orientations;
    c.sampling_factor = sampling_factor_for_count(16, 5);
    c.bins = 3;
    c.psi.depth = 1;
    c.psi.base_filters = 2;
    c.phi = c.psi;
    c.finalize();
    return c;
}

std::vector<Sample> tiny_samples(std::size_t count, std::size_t first = 0) {
    PhantomSpec spec;
    spec.size = 16;
    spec.semi_axis = {0.2, 0.3};
    spec.center_offset = {-0.05, 0.05};
    spec.seed = 4;
    std::vector<Sample> out;
    for (std::size_t i = first; i < first + count; ++i) out.push_back(to_sample(generate_phantom(spec, i)));
    return out;
}

TrainConfig tiny_train(std::size_t epochs) {
    TrainConfig t;
    t.epochs = epochs;
    t.minibatch = 2;
    t.seed = 21;
    return t;
}

}  // namespace

TEST(DiceLoss, Examples) {
    EXPECT_DOUBLE_EQ(dice_loss(Tensor({4}, 1.0), Tensor({4}, 1.0), 1.0), 0.0);
    EXPECT_DOUBLE_EQ(dice_loss(Tensor({4}), Tensor({4}), 1.0), 0.0);
    EXPECT_DOUBLE_EQ(dice_loss(Tensor::from({2}, {1, 0}), Tensor::from({2}, {0, 1}), 0.0), 1.0);
    EXPECT_THROW(dice_loss(Tensor({3}), Tensor({4}), 1.0), ShapeError);
}

TEST(DiceLoss, RangeAndRelationToScore) {
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor p = random_tensor({30}, trial, 0.0, 1.0);
        const Tensor g = random_mask({30}, 100 + trial, 0.4);
        for (double eps : {0.0, 0.5, 1.0}) {
            const double l = dice_loss(p, g, eps);
            EXPECT_GE(l, 0.0);
            EXPECT_LE(l, 1.0);
        }
        const Tensor a = random_mask({30}, 200 + trial, 0.5);
        if (sum(a) + sum(g) > 0) EXPECT_DOUBLE_EQ(dice_score(a, g), 1.0 - dice_loss(a, g, 0.0));
    }
}

TEST(DiceLoss, GradCheck) {
    const Tensor g = random_tensor({8}, 1, 0.0, 1.0);
    const auto r = grad_check([&](Tape& t, const Var& p) { return dice_loss(p, t.constant(g), 1.0); },
                              random_tensor({8}, 2, 0.0, 1.0));
    EXPECT_LE(r.max_relative_error, 1e-4);
}

TEST(DiceLoss, BinnedIsMeanOverChannels) {
    const Tensor p = random_tensor({2, 3, 4, 4}, 3, 0.0, 1.0);
    const Tensor g = random_mask({2, 3, 4, 4}, 4, 0.3);
    Tape tape;
    const double binned = binned_dice_loss(tape.constant(p), tape.constant(g), 1.0).value()[0];
    double expected = 0.0;
    for (std::size_t ch = 0; ch < 6; ++ch) expected += dice_loss(p.reshaped({6, 16}).slice(ch, 1), g.reshaped({6, 16}).slice(ch, 1), 1.0);
    EXPECT_NEAR(binned, expected / 6.0, 1e-14);
    EXPECT_LE(grad_check([&](Tape& t, const Var& v) { return binned_dice_loss(v, t.constant(g), 1.0); }, p)
                  .max_relative_error,
              1e-4);
}

TEST(DiceScore, Examples) {
    const Tensor a = random_mask({5, 5, 5}, 5, 0.3);
    EXPECT_EQ(dice_score(a, a), 1.0);
    EXPECT_EQ(dice_score(Tensor::from({6}, {1, 1, 1, 1, 0, 0}), Tensor::from({6}, {0, 0, 1, 1, 1, 1})), 0.5);
    EXPECT_EQ(dice_score(Tensor({4}), Tensor({4})), 1.0);
    EXPECT_EQ(dice_score(Tensor({4}), Tensor({4}, 1.0)), 0.0);
    EXPECT_THROW(dice_score(Tensor({4}, 0.5), Tensor({4})), std::invalid_argument);
}

TEST(Hausdorff, Examples) {
    Tensor a({6, 6, 2}), b({6, 6, 2});
    a.at(0, 0, 0) = 1.0;
    b.at(3, 4, 0) = 1.0;
    EXPECT_EQ(hausdorff(a, b), 5.0);
    EXPECT_EQ(hausdorff(a, a), 0.0);
    EXPECT_EQ(hausdorff(Tensor({3, 3, 3}), Tensor({3, 3, 3})), 0.0);
    EXPECT_EQ(hausdorff(a, Tensor({6, 6, 2})), kInf);
    EXPECT_EQ(hausdorff(Tensor({6, 6, 2}), b), kInf);
}

TEST(Hausdorff, MatchesBruteForceAndIsSymmetric) {
    for (int trial = 0; trial < 15; ++trial) {
        const Shape shape{4 + trial % 3, 5, 3 + trial % 4};
        const Tensor a = random_mask(shape, 300 + trial, 0.08), b = random_mask(shape, 400 + trial, 0.08);
        const double h = hausdorff(a, b);
        EXPECT_EQ(h, hausdorff(b, a));
        const double brute = brute_hausdorff(a, b);
        if (std::isinf(brute)) {
            EXPECT_TRUE(std::isinf(h));
        } else {
            EXPECT_NEAR(h, brute, 1e-12);
        }
    }
}

TEST(Hausdorff, DistanceTransformMatchesBruteForce) {
    const Tensor m = random_mask({6, 7, 5}, 9, 0.05);
    const Tensor d = squared_distance_transform(m);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 7; ++j)
            for (std::size_t k = 0; k < 5; ++k) {
                double best = kInf;
                for (std::size_t a = 0; a < 6; ++a)
                    for (std::size_t b = 0; b < 7; ++b)
                        for (std::size_t c = 0; c < 5; ++c)
                            if (m.at(a, b, c) != 0.0) {
                                const double di = double(i) - a, dj = double(j) - b, dk = double(k) - c;
                                best = std::min(best, di * di + dj * dj + dk * dk);
                            }
                EXPECT_EQ(d.at(i, j, k), best);
            }
    const Tensor one_d = squared_distance_transform(Tensor::from({5}, {0, 1, 0, 0, 0}));
    EXPECT_TRUE(one_d.identical(Tensor::from({5}, {1, 0, 1, 4, 9})));
    EXPECT_TRUE(std::isinf(squared_distance_transform(Tensor({3, 3}))[4]));
}

TEST(Adadelta, FirstStepByHand) {
    ParameterStore p;
    p.add("x", Tensor::scalar(0.0));
    AdadeltaState state;
    const AdadeltaOptions opt{0.2, 0.9, 1e-6};
    adadelta_step(p, {{"x", Tensor::scalar(1.0)}}, state, opt);
    // E[g2] = 0.1; dx = -0.2 sqrt(1e-6) / sqrt(0.1 + 1e-6).
    EXPECT_NEAR(p.get("x")[0], -0.2 * 1e-3 / std::sqrt(0.100001), 1e-15);
    EXPECT_NEAR(p.get("x")[0], -6.3245e-4, 1e-8);
    EXPECT_NEAR(state.mean_square_grad.at("x")[0], 0.1, 1e-15);
}

TEST(Adadelta, SecondStepFollowsRecurrence) {
    ParameterStore p;
    p.add("x", Tensor::scalar(0.0));
    AdadeltaState state;
    const AdadeltaOptions opt{0.2, 0.9, 1e-6};
    double eg = 0.0, ed = 0.0, x = 0.0;
    std::vector<double> steps;
    for (int k = 0; k < 2; ++k) {
        adadelta_step(p, {{"x", Tensor::scalar(1.0)}}, state, opt);
        eg = 0.9 * eg + 0.1;
        const double dx = -0.2 * std::sqrt(ed + 1e-6) / std::sqrt(eg + 1e-6);
        ed = 0.9 * ed + 0.1 * dx * dx;
        x += dx;
        steps.push_back(dx);
        EXPECT_NEAR(p.get("x")[0], x, 1e-15);
    }
    // E[g2] grows from 0.1 to 0.19 while E[dx2] stays near eps, so the second step is smaller.
    EXPECT_LT(std::abs(steps[1]), std::abs(steps[0]));
}

TEST(Adadelta, ZeroGradientAndZeroRate) {
    ParameterStore p;
    p.add("x", Tensor::from({2}, {1.0, -2.0}));
    AdadeltaState state;
    adadelta_step(p, {{"x", Tensor::from({2}, {0.5, 0.5})}}, state, {});
    const double eg = state.mean_square_grad.at("x")[0];
    const Tensor before = p.get("x");
    adadelta_step(p, {{"x", Tensor({2})}}, state, {});
    EXPECT_TRUE(p.get("x").identical(before));
    EXPECT_NEAR(state.mean_square_grad.at("x")[0], 0.95 * eg, 1e-18);
    adadelta_step(p, {{"x", Tensor::from({2}, {3.0, -1.0})}}, state, {0.0, 0.95, 1e-6});
    EXPECT_TRUE(p.get("x").identical(before));
}

TEST(Adadelta, NonFiniteGradientAbortsNamingParameter) {
    ParameterStore p;
    p.add("phi.head.kernel", Tensor({2}));
    AdadeltaState state;
    try {
        adadelta_step(p, {{"phi.head.kernel", Tensor::from({2}, {0.0, std::nan("")})}}, state, {});
        FAIL() << "expected an error";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("phi.head.kernel"), std::string::npos);
    }
    EXPECT_EQ(max_abs(p.get("phi.head.kernel")), 0.0);
}

TEST(TrainConfigJson, RoundTripAndValidation) {
    TrainConfig t;
    t.stages = {Stage::phi, Stage::finetune};
    t.epochs = 7;
    t.optimizer.lr = 0.3;
    t.seed = 99;
    const TrainConfig u = train_config_from_json(to_json(t));
    EXPECT_EQ(to_json(u), to_json(t));
    EXPECT_EQ(stage_from_name("psi"), Stage::psi);
    EXPECT_EQ(stage_name(Stage::finetune), "finetune");
    EXPECT_THROW(stage_from_name("nope"), std::invalid_argument);
    t.epochs = 0;
    EXPECT_THROW(t.validate(), std::invalid_argument);
    t.epochs = 1;
    t.optimizer.lr = 0.0;
    EXPECT_THROW(t.validate(), std::invalid_argument);
    t.optimizer.lr = 0.2;
    t.optimizer.rho = 1.0;
    EXPECT_THROW(t.validate(), std::invalid_argument);
}

TEST(Summary, StatisticsAndFormatting) {
    const Summary s = summarize({4.0, 1.0, 3.0, 2.0, kInf});
    EXPECT_EQ(s.count, 4u);
    EXPECT_EQ(s.excluded, 1u);
    EXPECT_DOUBLE_EQ(s.mean, 2.5);
    EXPECT_DOUBLE_EQ(s.std, std::sqrt(1.25));
    EXPECT_DOUBLE_EQ(s.min, 1.0);
    EXPECT_DOUBLE_EQ(s.q1, 1.75);
    EXPECT_DOUBLE_EQ(s.median, 2.5);
    EXPECT_DOUBLE_EQ(s.q3, 3.25);
    EXPECT_DOUBLE_EQ(s.max, 4.0);
    Summary t;
    t.mean = 0.8941;
    t.std = 0.0374;
    EXPECT_EQ(format_mean_std(t), "0.894±0.037");
}

TEST(Folds, PartitionAndSizes) {
    for (std::uint64_t seed : {0ull, 1ull, 12345ull}) {
        const auto f = fold_assignment(9, 3, seed);
        std::vector<std::size_t> sizes(3, 0);
        for (std::size_t x : f) {
            ASSERT_LT(x, 3u);
            ++sizes[x];
        }
        EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 3, 3}));
    }
    EXPECT_NE(fold_assignment(30, 3, 1), fold_assignment(30, 3, 2));
    EXPECT_EQ(fold_assignment(30, 3, 1), fold_assignment(30, 3, 1));
    EXPECT_THROW(fold_assignment(2, 3, 0), std::invalid_argument);
    EXPECT_THROW(fold_assignment(5, 1, 0), std::invalid_argument);
    std::set<std::uint64_t> seeds;
    for (std::uint64_t f = 0; f < 5; ++f) seeds.insert(derive_seed(7, 100 + f));
    EXPECT_EQ(seeds.size(), 5u);
    EXPECT_EQ(derive_seed(7, 100), derive_seed(7, 100));
}

TEST(Report, AggregateIsSizeWeightedMeanOfFolds) {
    std::vector<EvalReport> folds(3);
    EvalReport all;
    Rng rng(3);
    for (std::size_t f = 0; f < 3; ++f)
        for (std::size_t i = 0; i < 2 + f; ++i) {
            const SampleResult r{"s", rng.uniform(), rng.uniform(0, 10), 0.0};
            folds[f].samples.push_back(r);
            all.samples.push_back(r);
        }
    double weighted = 0.0;
    for (const auto& f : folds) weighted += f.dice().mean * f.samples.size();
    EXPECT_NEAR(all.dice().mean, weighted / all.samples.size(), 1e-14);
    all.samples[0].hausdorff = kInf;
    const nlohmann::json j = to_json(all);
    EXPECT_EQ(j["samples"][0]["hausdorff"], "inf");
    EXPECT_EQ(j["aggregates"]["hausdorff"]["excluded"], 1);
    for (const char* key : {"min", "q1", "median", "q3", "max", "mean", "std"})
        EXPECT_TRUE(j["aggregates"]["dice"].contains(key)) << key;
}

TEST(Datasets, ProjectionCounts) {
    const std::vector<Sample> samples = tiny_samples(2);
    const PiNetConfig one = tiny_config(1);
    const std::size_t p = one.angles(16).size();
    EXPECT_EQ(p, 5u);
    EXPECT_EQ(psi_dataset(one, samples).size(), 2 * p);
    const PiNetConfig three = tiny_config(3);
    EXPECT_EQ(psi_dataset(three, samples).size(), 3 * 2 * p);
    const ParameterStore params = init_parameters(one, 1);
    const auto phi = phi_dataset(one, params, samples);
    ASSERT_EQ(phi.size(), 2 * p);
    EXPECT_EQ(phi[0].target.shape(), (Shape{1, 3, 16, 16}));
    // One-hot over the bins at every pixel.
    for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) {
            double total = 0.0;
            for (std::size_t b = 0; b < 3; ++b) total += phi[0].target.at(0, b, y, x);
            EXPECT_EQ(total, 1.0);
        }
    EXPECT_THROW(train_psi(one, const_cast<ParameterStore&>(params), {}, tiny_train(1)), std::invalid_argument);
}

TEST(Training, PsiLossOnFrozenBatchDecreases) {
    const PiNetConfig c = tiny_config();
    ParameterStore params = init_parameters(c, 2);
    const auto pairs = psi_dataset(c, tiny_samples(2));
    AdadeltaState state;
    std::vector<double> losses;
    for (int step = 0; step < 6; ++step) {
        Tape tape;
        BoundParameters bound(tape, params, [](const std::string& n) { return n.rfind("psi.", 0) == 0; });
        Var loss;
        for (std::size_t i = 0; i < 4; ++i) {
            const Var item = dice_loss(psi_mask(c.psi, bound, tape.constant(pairs[i].input)),
                                       tape.constant(pairs[i].target));
            loss = loss.valid() ? add(loss, item) : item;
        }
        tape.backward(loss);
        losses.push_back(loss.value()[0]);
        std::map<std::string, Tensor> grads;
        for (const auto& [name, var] : bound.trainable()) grads.emplace(name, tape.grad(var));
        adadelta_step(params, grads, state, {});
    }
    for (std::size_t i = 1; i < losses.size(); ++i) EXPECT_LE(losses[i], losses[i - 1]) << i;
}

TEST(Training, PhiImprovesWithinThreeEpochs) {
    const PiNetConfig c = tiny_config();
    ParameterStore params = init_parameters(c, 3);
    TrainConfig t = tiny_train(3);
    t.minibatch = 1;
    train_psi(c, params, tiny_samples(3), t);
    const auto logs = train_phi(c, params, tiny_samples(3), t);
    ASSERT_EQ(logs.size(), 3u);
    EXPECT_LT(logs.back().loss, logs.front().loss);
}

TEST(Training, FinetuneKeepsFusionShapeAndMovesIt) {
    const PiNetConfig c = tiny_config();
    ParameterStore params = init_parameters(c, 4);
    const std::vector<Sample> samples = tiny_samples(3);
    TrainConfig t = tiny_train(2);
    train_psi(c, params, samples, t);
    train_phi(c, params, samples, t);
    calibrate_lift(c, params, samples);

    // Nonzero gradient on W for a non-degenerate sample.
    const std::vector<Sample> padded = prepare_samples(c, samples);
    Tape tape;
    BoundParameters bound(tape, params, [](const std::string& n) { return n == "fusion.weights"; });
    const Var loss = dice_loss(forward(c, bound, padded[0].volume), tape.constant(padded[0].mask));
    tape.backward(loss);
    EXPECT_GT(max_abs(tape.grad(bound["fusion.weights"])), 0.0);

    auto median_dice = [&] { return evaluate(c, params, samples).dice().median; };
    const double before = median_dice();
    finetune(c, params, samples, t);
    EXPECT_EQ(params.get("fusion.weights").shape(), (Shape{1, 1}));
    EXPECT_GE(median_dice(), before - 1e-12);
}

TEST(Training, DeterministicWithFixedSeed) {
    const PiNetConfig c = tiny_config();
    const std::vector<Sample> samples = tiny_samples(2);
    auto run = [&] {
        ParameterStore params = init_parameters(c, 5);
        train(c, params, samples, tiny_train(1));
        return params;
    };
    EXPECT_TRUE(run().identical(run()));
}

TEST(CrossValidation, FoldsTrainOnComplement) {
    const PiNetConfig c = tiny_config();
    const std::vector<Sample> samples = tiny_samples(6);
    TrainConfig t = tiny_train(1);
    t.stages = {Stage::phi, Stage::finetune};
    const CrossValidation cv = cross_validate(c, samples, 3, t);
    ASSERT_EQ(cv.folds.size(), 3u);
    std::set<std::string> ids;
    std::set<std::uint64_t> seeds;
    for (const auto& f : cv.folds) {
        EXPECT_EQ(f.config["train_size"], 4);
        EXPECT_EQ(f.samples.size(), 2u);
        for (const auto& s : f.samples) ids.insert(s.id);
        seeds.insert(f.seed);
    }
    EXPECT_EQ(ids.size(), 6u);
    EXPECT_EQ(seeds.size(), 3u);
    EXPECT_EQ(cv.aggregate.samples.size(), 6u);
    EXPECT_THROW(cross_validate(c, tiny_samples(2), 3, t), std::invalid_argument);
}
