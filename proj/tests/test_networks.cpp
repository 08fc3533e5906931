#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pinet/networks.h"
#include "pinet/ops.h"
#include "test_util.h"

using namespace pinet;
using pinet::testing::random_tensor;

namespace {

// Layer-by-layer count of the architecture: two 3x3 convs per level, a 3x3 bottleneck pair,
// a 2x2 transposed conv and two 3x3 convs per decoder level, and a 1x1 head.
std::size_t counted_parameters(const UNetConfig& c) {
    auto conv = [](std::size_t k, std::size_t in, std::size_t out) { return k * k * in * out + out; };
    std::size_t total = 0;
    std::size_t in = c.in_channels;
    for (std::size_t l = 0; l < c.depth; ++l) {
        const std::size_t f = c.base_filters << l;
        total += conv(3, in, f) + conv(3, f, f);
        in = f;
    }
    const std::size_t bottom = c.base_filters << c.depth;
    total += conv(3, in, bottom) + conv(3, bottom, bottom);
    std::size_t coarse = bottom;
    for (std::size_t l = c.depth; l-- > 0;) {
        const std::size_t f = c.base_filters << l;
        total += conv(2, coarse, f) + conv(3, 2 * f, f) + conv(3, f, f);
        coarse = f;
    }
    const std::size_t out = c.head == HeadKind::softmax_bins ? c.classes * c.bins : c.classes;
    return total + conv(1, coarse, out);
}

UNetConfig tiny(std::size_t depth, std::size_t base, std::size_t in, HeadKind head, std::size_t classes,
                std::size_t bins = 1) {
    UNetConfig c;
    c.depth = depth;
    c.base_filters = base;
    c.in_channels = in;
    c.head = head;
    c.classes = classes;
    c.bins = bins;
    return c;
}

ParameterStore make_store(const UNetConfig& c, const std::string& prefix, std::uint64_t seed) {
    ParameterStore store;
    Rng rng(seed);
    init_unet(store, prefix, c, rng);
    return store;
}

}  // namespace

TEST(UNet, DocumentedParameterCount) {
    const UNetConfig c = tiny(1, 4, 1, HeadKind::sigmoid, 2);
    EXPECT_EQ(40u + 148 + 296 + 584 + 132 + 292 + 148 + 10, 1650u);
    EXPECT_EQ(unet_parameter_count(c), 1650u);
    EXPECT_EQ(make_store(c, "psi", 1).parameter_count(), 1650u);
}

TEST(UNet, StoreCountMatchesFormulaForRandomConfigs) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const HeadKind head = rng.below(2) ? HeadKind::sigmoid : HeadKind::softmax_bins;
        const UNetConfig c = tiny(1 + rng.below(3), 1 + rng.below(6), 1 + rng.below(3), head, 1 + rng.below(3),
                                  head == HeadKind::softmax_bins ? 2 + rng.below(5) : 1);
        const ParameterStore store = make_store(c, "net", trial);
        EXPECT_EQ(store.parameter_count("net."), counted_parameters(c));
        EXPECT_EQ(unet_parameter_count(c), counted_parameters(c));
    }
}

TEST(UNet, PreservesSpatialExtents) {
    const UNetConfig c = tiny(2, 2, 1, HeadKind::sigmoid, 1);
    const ParameterStore s = make_store(c, "psi", 3);
    const Tensor out = unet_forward(c, s, "psi", random_tensor({1, 64, 64}, 4));
    EXPECT_EQ(out.shape(), (Shape{1, 64, 64}));
    for (std::size_t i = 0; i < out.size(); ++i) {
        EXPECT_GT(out[i], 0.0);
        EXPECT_LT(out[i], 1.0);
    }
}

TEST(UNet, SoftmaxHeadSumsToOneOverBins) {
    const UNetConfig c = tiny(2, 3, 2, HeadKind::softmax_bins, 2, 5);
    const ParameterStore s = make_store(c, "phi", 5);
    const Tensor out = unet_forward(c, s, "phi", random_tensor({2, 16, 12}, 6));
    ASSERT_EQ(out.shape(), (Shape{10, 16, 12}));
    for (std::size_t k = 0; k < 2; ++k)
        for (std::size_t y = 0; y < 16; ++y)
            for (std::size_t x = 0; x < 12; ++x) {
                double total = 0.0;
                for (std::size_t j = 0; j < 5; ++j) total += out.at(k * 5 + j, y, x);
                EXPECT_NEAR(total, 1.0, 1e-9);
            }
}

TEST(UNet, IndivisibleExtentsNameTheMultiple) {
    const UNetConfig c = tiny(3, 2, 1, HeadKind::sigmoid, 1);
    const ParameterStore s = make_store(c, "psi", 7);
    try {
        unet_forward(c, s, "psi", Tensor({1, 20, 16}));
        FAIL() << "expected an error";
    } catch (const std::invalid_argument& e) {
        EXPECT_NE(std::string(e.what()).find("8"), std::string::npos) << e.what();
    }
}

TEST(UNet, GradCheckTinyNetwork) {
    const UNetConfig c = tiny(1, 2, 1, HeadKind::softmax_bins, 1, 3);
    const ParameterStore s = make_store(c, "phi", 8);
    const Tensor image = random_tensor({1, 8, 8}, 9);
    const Tensor probe = random_tensor({3, 8, 8}, 10);
    // Central differences of the Tensor forward against the tape gradient, per parameter.
    for (const std::string name : {"phi.enc0.conv1.kernel", "phi.mid.conv2.kernel", "phi.up0.kernel", "phi.head.bias",
                                   "phi.dec0.conv1.bias"}) {
        Tape tape;
        BoundParameters params(tape, s, [&](const std::string& n) { return n == name; });
        tape.backward(dot(unet_forward(c, params, "phi", tape.constant(image)), tape.constant(probe)));
        const Tensor analytic = tape.grad(params[name]);
        const double h = 1e-5;
        double worst = 0.0, scale = 0.0;
        Tensor numeric(analytic.shape());
        for (std::size_t i = 0; i < analytic.size(); ++i) {
            ParameterStore plus = s, minus = s;
            plus.get(name)[i] += h;
            minus.get(name)[i] -= h;
            numeric[i] = (dot(unet_forward(c, plus, "phi", image), probe) - dot(unet_forward(c, minus, "phi", image), probe)) /
                         (2 * h);
            scale = std::max({scale, std::abs(numeric[i]), std::abs(analytic[i])});
        }
        for (std::size_t i = 0; i < analytic.size(); ++i) {
            const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-3 * scale, 1e-12});
            worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
        }
        EXPECT_LE(worst, 1e-4) << name;
    }
}

TEST(UNet, GradCheckWithRespectToInput) {
    const UNetConfig c = tiny(1, 2, 1, HeadKind::sigmoid, 2);
    const ParameterStore s = make_store(c, "psi", 11);
    const Tensor probe = random_tensor({2, 8, 8}, 12);
    const auto r = grad_check(
        [&](Tape& tape, const Var& x) {
            BoundParameters params(tape, s, [](const std::string&) { return false; });
            return dot(unet_forward(c, params, "psi", x), tape.constant(probe));
        },
        random_tensor({1, 8, 8}, 13));
    EXPECT_LE(r.max_relative_error, 1e-4);
}

TEST(UNet, GlorotInitialisationBoundsAndZeroBiases) {
    const UNetConfig c = tiny(2, 4, 3, HeadKind::sigmoid, 1);
    const ParameterStore s = make_store(c, "psi", 14);
    const Tensor& k = s.get("psi.enc0.conv1.kernel");
    EXPECT_EQ(k.shape(), (Shape{4, 3, 3, 3}));
    const double bound = std::sqrt(6.0 / ((3.0 + 4.0) * 9.0));
    EXPECT_LE(max_abs(k), bound);
    EXPECT_GT(max_abs(k), 0.5 * bound);
    const Tensor& up = s.get("psi.up0.kernel");
    EXPECT_LE(max_abs(up), std::sqrt(6.0 / (4.0 * (up.shape()[0] + up.shape()[1]))));
    EXPECT_EQ(max_abs(s.get("psi.enc0.conv1.bias")), 0.0);
    EXPECT_TRUE(make_store(c, "psi", 14).identical(s));
    EXPECT_FALSE(make_store(c, "psi", 15).identical(s));
}

TEST(ParameterStoreTest, NamesAreUniqueAndShapesChecked) {
    ParameterStore s;
    s.add("a", Tensor({2}));
    EXPECT_THROW(s.add("a", Tensor({2})), std::invalid_argument);
    EXPECT_THROW(s.set("a", Tensor({3})), ShapeError);
    EXPECT_THROW(s.get("missing"), std::out_of_range);
    s.add("b.x", Tensor({3}));
    EXPECT_EQ(s.parameter_count("b."), 3u);
    EXPECT_EQ(s.names(), (std::vector<std::string>{"a", "b.x"}));
}

TEST(Checkpoint, RoundTripIsBitExact) {
    const UNetConfig c = tiny(1, 3, 1, HeadKind::softmax_bins, 1, 5);
    ParameterStore s = make_store(c, "phi", 16);
    s.add("lift.scale", Tensor::from({1}, {-0.0}));
    s.add("odd", Tensor::from({2}, {std::nextafter(1.0, 2.0), -1e-310}));
    const std::string path = (std::filesystem::temp_directory_path() / "pinet_ckpt_test.bin").string();
    const nlohmann::json config = {{"phi", to_json(c)}, {"note", "x"}};
    save_checkpoint(path, s, config);
    const Checkpoint loaded = load_checkpoint(path);
    EXPECT_TRUE(loaded.store.identical(s));
    EXPECT_EQ(loaded.config, config);
    EXPECT_EQ(unet_config_from_json(loaded.config["phi"]).bins, 5u);

    // Truncated payload and trailing bytes are both rejected.
    const auto size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, size - 3);
    EXPECT_THROW(load_checkpoint(path), std::runtime_error);
    save_checkpoint(path, s, config);
    {
        std::ofstream out(path, std::ios::binary | std::ios::app);
        out << "x";
    }
    EXPECT_THROW(load_checkpoint(path), std::runtime_error);
    std::filesystem::remove(path);
    EXPECT_THROW(load_checkpoint(path), std::runtime_error);
}

TEST(Psi, ConstantInputIsFinite) {
    const UNetConfig c = tiny(2, 2, 1, HeadKind::sigmoid, 1);
    const ParameterStore s = make_store(c, "psi", 17);
    const Tensor m = psi_mask(c, s, Tensor({8, 12}, 3.0));
    EXPECT_EQ(m.shape(), (Shape{1, 8, 12}));
    EXPECT_TRUE(m.all_finite());
    const Tensor r = psi_mask(c, s, random_tensor({8, 12}, 18, -100, 100));
    EXPECT_GE(min_value(r), 0.0);
    EXPECT_LE(max_value(r), 1.0);
}

TEST(Psi, TargetExamples) {
    const std::size_t n = 6, d = 3;
    EXPECT_EQ(max_abs(psi_target(Tensor({n, n, d}), 0.0)), 0.0);
    const Tensor full = psi_target(Tensor({n, n, d}, 1.0), 0.0);
    EXPECT_EQ(full.shape(), (Shape{1, n, d}));
    EXPECT_EQ(min_value(full), 1.0);

    Tensor single({n, n, d});
    single.at(2, 4, 1) = 1.0;
    const Tensor t = psi_target(single, 0.0);
    // Brute force: the line at depth t and height z sums over the transverse axis.
    for (std::size_t row = 0; row < n; ++row)
        for (std::size_t z = 0; z < d; ++z) {
            bool hit = false;
            for (std::size_t s = 0; s < n; ++s) hit = hit || single.at(row, s, z) != 0.0;
            EXPECT_EQ(t.at(0, row, z), hit ? 1.0 : 0.0);
        }
    EXPECT_THROW(psi_target(Tensor({n, n, d}, 0.5), 0.0), std::invalid_argument);
}
