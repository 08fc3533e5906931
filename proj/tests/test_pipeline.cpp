#include <gtest/gtest.h>

#include <cmath>

#include "pinet/geometry.h"
#include "pinet/ops.h"
#include "pinet/phantom.h"
#include "pinet/pipeline.h"
#include "pinet/training.h"
#include "test_util.h"

using namespace pinet;
using pinet::testing::random_tensor;

namespace {

PiNetConfig small_config(std::size_t orientations = 1, bool weighted = true) {
    PiNetConfig c;
    c.orientations = orientations;
    c.weighted = weighted;
    c.sampling_factor = sampling_factor_for_count(8, 3);
    c.bins = 3;
    c.psi.depth = 1;
    c.psi.base_filters = 2;
    c.phi = c.psi;
    c.finalize();
    return c;
}

}  // namespace

TEST(Fuse, SingleOrientationIsIdentity) {
    const Tensor y = random_tensor({1, 4, 4, 3}, 1);
    EXPECT_TRUE(fuse({y}, Tensor({1, 1}, 1.0)).identical(y));
}

TEST(Fuse, AgreeingOrientationsReturnTheCommonVolume) {
    const Tensor y = random_tensor({2, 5, 5, 5}, 2);
    std::vector<Tensor> oriented;
    for (int l = 1; l <= 3; ++l) oriented.push_back(orient(y, orientation_from_index(l)));
    const Tensor f = fuse(oriented, Tensor({3, 2}, 1.0));
    EXPECT_LE(max_abs(f - y), 1e-15);
}

TEST(Fuse, WeightsScalePerOrientation) {
    const Tensor a = random_tensor({1, 4, 4, 4}, 3), b = random_tensor({1, 4, 4, 4}, 4);
    const Tensor f = fuse({a, orient(b, orientation_from_index(2))}, Tensor::from({2, 1}, {2.0, 0.0}));
    EXPECT_LE(max_abs(f - a), 1e-15);
    EXPECT_THROW(fuse({a, a}, Tensor({1, 1}, 1.0)), ShapeError);
    EXPECT_THROW(fuse({a}, Tensor({1, 2}, 1.0)), ShapeError);
    EXPECT_THROW(fuse(std::vector<Tensor>{}, Tensor({1, 1}, 1.0)), ShapeError);
}

TEST(Fuse, GradientWithRespectToWeights) {
    const Tensor a = random_tensor({2, 3, 3, 3}, 5), b = random_tensor({2, 3, 3, 3}, 6);
    const auto r = grad_check(
        [&](Tape& t, const Var& w) {
            const Var f = fuse({t.constant(a), t.constant(b)}, w);
            return dot(f, f);
        },
        random_tensor({2, 2}, 7));
    EXPECT_LE(r.max_relative_error, 1e-6);
}

TEST(Threshold, Examples) {
    const Tensor soft = Tensor::from({3}, {0.6, 0.5, 1.0 / (1.0 + std::exp(5.0))});
    EXPECT_TRUE(threshold(soft).identical(Tensor::from({3}, {1, 1, 0})));
    EXPECT_TRUE(threshold(soft, 0.7).identical(Tensor::from({3}, {0, 0, 0})));
}

TEST(PadToSquare, CentresAndPads) {
    const Tensor v = random_tensor({4, 6, 3}, 8);
    const Tensor p = pad_to_square(v, false);
    EXPECT_EQ(p.shape(), (Shape{6, 6, 3}));
    EXPECT_EQ(p.at(1, 0, 0), v.at(0, 0, 0));
    EXPECT_EQ(p.at(0, 2, 1), 0.0);
    EXPECT_DOUBLE_EQ(sum(p), sum(v));
    EXPECT_EQ(pad_to_square(v, true).shape(), (Shape{6, 6, 6}));
    EXPECT_TRUE(pad_to_square(random_tensor({5, 5, 2}, 9), false).identical(random_tensor({5, 5, 2}, 9)));
    EXPECT_EQ(pad_to_square(random_tensor({2, 3, 4, 5}, 1), false).shape(), (Shape{2, 4, 4, 5}));
}

TEST(CheckInput, RejectsBadShapes) {
    const PiNetConfig c = small_config();
    EXPECT_NO_THROW(check_input(c, {8, 8, 4}));
    EXPECT_THROW(check_input(c, {8, 6, 4}), ShapeError);
    EXPECT_THROW(check_input(c, {8, 8}), ShapeError);
    try {
        check_input(c, {8, 8, 5});
        FAIL() << "expected an error";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find('2'), std::string::npos);
    }
    EXPECT_THROW(check_input(small_config(3), {8, 8, 4}), ShapeError);
    EXPECT_NO_THROW(check_input(small_config(3), {8, 8, 8}));
}

TEST(Config, JsonRoundTripAndValidation) {
    PiNetConfig c = small_config(2, false);
    c.threshold = 0.4;
    c.ramp.hann = true;
    const PiNetConfig d = pinet_config_from_json(to_json(c));
    EXPECT_EQ(to_json(d), to_json(c));
    c.orientations = 4;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c.orientations = 1;
    c.bins = 1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(InitParameters, NamesAndShapes) {
    PiNetConfig c = small_config(2);
    c.classes = 2;
    c.finalize();
    const ParameterStore p = init_parameters(c, 3);
    EXPECT_EQ(p.get("fusion.weights").shape(), (Shape{2, 2}));
    EXPECT_EQ(p.get("bins.weights").shape(), (Shape{2, 3}));
    EXPECT_EQ(p.get("lift.kernel").shape(), (Shape{2, 5, 5}));
    EXPECT_EQ(p.parameter_count("psi."), unet_parameter_count(c.psi));
    EXPECT_EQ(p.parameter_count("phi."), unet_parameter_count(c.phi));
    EXPECT_EQ(c.phi.in_channels, 2u);
}

TEST(Pipeline, SaturatedPsiMatchesUnweighted) {
    const PiNetConfig weighted = small_config(1, true), plain = small_config(1, false);
    ParameterStore p = init_parameters(weighted, 11);
    p.get("psi.head.kernel").fill(0.0);
    p.get("psi.head.bias").fill(60.0);  // sigmoid rounds to exactly 1
    const Tensor x = random_tensor({8, 8, 4}, 12, 0.0, 1.0);
    for (double deg : {0.0, 37.0, 120.0}) {
        EXPECT_LE(max_abs(phi_input(weighted, p, x, deg) - phi_input(plain, p, x, deg)), 1e-12) << deg;
    }
    EXPECT_LE(max_abs(forward(weighted, p, x) - forward(plain, p, x)), 1e-12);
}

TEST(Pipeline, OutputShapeRangeAndDeterminism) {
    const PiNetConfig c = small_config(3);
    const ParameterStore p = init_parameters(c, 13);
    const Tensor x = random_tensor({6, 8, 8}, 14, 0.0, 1.0);
    const Tensor y = forward(c, p, x);
    EXPECT_EQ(y.shape(), (Shape{1, 6, 8, 8}));
    for (double value : y.values()) {
        EXPECT_GE(value, 0.0);
        EXPECT_LE(value, 1.0);
    }
    EXPECT_TRUE(forward(c, p, x).identical(y));
}

TEST(Pipeline, CachedForwardMatchesFullForward) {
    const PiNetConfig c = small_config(2);
    const ParameterStore p = init_parameters(c, 15);
    const Tensor x = random_tensor({8, 8, 8}, 16, 0.0, 1.0);
    Tape tape;
    const BoundParameters bound(tape, p, nullptr);
    const Tensor full = forward(c, bound, x).value();
    EXPECT_LE(max_abs(full - forward(c, p, x)), 1e-12);
}

TEST(Pipeline, EndToEndGradientMatchesFiniteDifferences) {
    const PiNetConfig c = small_config(1);
    ParameterStore p = init_parameters(c, 17);
    p.set("lift.scale", Tensor::scalar(2.0));
    p.set("lift.bias", Tensor::scalar(-0.5));
    PhantomSpec spec;
    spec.size = 8;
    spec.semi_axis = {0.25, 0.35};
    const Sample ph = to_sample(generate_phantom(spec, 0));
    const Tensor& mask = ph.mask;

    auto loss_of = [&](const ParameterStore& params) { return dice_loss(forward(c, params, ph.volume), mask); };
    Tape tape;
    const BoundParameters bound(tape, p, [](const std::string&) { return true; });
    const Var loss = dice_loss(forward(c, bound, ph.volume), tape.constant(mask));
    tape.backward(loss);
    EXPECT_NEAR(loss.value()[0], loss_of(p), 1e-12);

    const double h = 1e-6;
    for (const char* name : {"lift.scale", "lift.bias", "bins.weights", "fusion.weights", "lift.kernel",
                             "phi.head.kernel", "phi.enc0.conv1.kernel", "psi.head.bias", "psi.mid.conv2.kernel"}) {
        const Tensor analytic = tape.grad(bound[name]);
        const std::size_t index = analytic.size() / 2;
        ParameterStore plus = p, minus = p;
        plus.get(name)[index] += h;
        minus.get(name)[index] -= h;
        const double numeric = (loss_of(plus) - loss_of(minus)) / (2 * h);
        const double scale = std::max({std::abs(numeric), std::abs(analytic[index]), 1e-6});
        EXPECT_LE(std::abs(numeric - analytic[index]) / scale, 1e-3) << name << " " << numeric << " " << analytic[index];
    }
}
