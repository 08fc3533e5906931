#include <gtest/gtest.h>

#include <cmath>

#include "pinet/autodiff.h"
#include "pinet/ops.h"
#include "test_util.h"

using namespace pinet;
using pinet::testing::random_tensor;
using pinet::testing::relative_gap;

namespace {

// Weighted sum so gradients are not all ones.
Var probe(const Var& x, std::uint64_t seed) {
    Tape& tape = x.tape();
    return dot(x, tape.constant(random_tensor(x.shape(), seed)));
}

Tensor eval(const std::function<Var(Tape&)>& fn) {
    Tape tape;
    return fn(tape).value();
}

}  // namespace

TEST(Autodiff, QuadraticGradCheckIsExact) {
    const auto r = grad_check([](Tape&, const Var& x) { return mul(x, x); }, Tensor::scalar(3.0));
    EXPECT_NEAR(r.analytic[0], 6.0, 1e-12);
    EXPECT_NEAR(r.numeric[0], 6.0, 1e-6);
    EXPECT_LE(r.max_relative_error, 1e-9);
}

TEST(Autodiff, GradCheckRejectsNonScalar) {
    EXPECT_THROW(grad_check([](Tape&, const Var& x) { return x; }, Tensor({2}, 1.0)), ShapeError);
}

TEST(Autodiff, FanOutSumsBranchGradients) {
    Tape tape;
    const Var x = tape.variable(Tensor::from({2}, {1.5, -2.0}));
    const Var y = add(sigmoid(x), mul(x, x));
    tape.backward(sum(y));
    const Tensor& g = tape.grad(x);
    for (std::size_t i = 0; i < 2; ++i) {
        const double xi = x.value()[i];
        const double s = 1.0 / (1.0 + std::exp(-xi));
        EXPECT_DOUBLE_EQ(g[i], s * (1.0 - s) + 2.0 * xi);
    }
}

TEST(Autodiff, ConstantsReceiveNoGradient) {
    Tape tape;
    const Var c = tape.constant(Tensor({3}, 2.0));
    const Var x = tape.variable(Tensor({3}, 1.0));
    tape.backward(sum(mul(c, x)));
    EXPECT_FALSE(c.requires_grad());
    EXPECT_EQ(sum(tape.grad(c)), 0.0);
    EXPECT_EQ(sum(tape.grad(x)), 6.0);
}

TEST(Autodiff, NonFiniteOutputRaises) {
    Tape tape;
    const Var x = tape.variable(Tensor::scalar(1e300));
    EXPECT_THROW(mul(x, x), NumericError);
}

TEST(Ops, SoftmaxExamples) {
    auto run = [](Tensor t) { return eval([&](Tape& tape) { return softmax(tape.constant(t), 0); }); };
    const Tensor a = run(Tensor::from({2}, {0, 0}));
    EXPECT_DOUBLE_EQ(a[0], 0.5);
    const Tensor b = run(Tensor::from({2}, {1000, 1000}));
    EXPECT_DOUBLE_EQ(b[1], 0.5);
    const Tensor c = run(Tensor::from({2}, {0, std::log(3.0)}));
    EXPECT_NEAR(c[0], 0.25, 1e-15);
    EXPECT_NEAR(c[1], 0.75, 1e-15);
}

TEST(Ops, SoftmaxSumsToOneAlongAxis) {
    const Tensor x = random_tensor({3, 4, 5}, 11, -30.0, 30.0);
    for (std::size_t axis = 0; axis < 3; ++axis) {
        const Tensor s = eval([&](Tape& tape) { return softmax(tape.constant(x), axis); });
        const Shape& sh = x.shape();
        for (std::size_t i = 0; i < sh[0]; ++i)
            for (std::size_t j = 0; j < sh[1]; ++j)
                for (std::size_t k = 0; k < sh[2]; ++k) {
                    std::size_t idx[3] = {i, j, k};
                    if (idx[axis] != 0) continue;
                    double total = 0.0;
                    for (std::size_t m = 0; m < sh[axis]; ++m) {
                        idx[axis] = m;
                        total += s.at(idx[0], idx[1], idx[2]);
                    }
                    EXPECT_NEAR(total, 1.0, 1e-12);
                }
    }
}

TEST(Ops, SigmoidExamples) {
    const Tensor s = eval([](Tape& tape) {
        return sigmoid(tape.constant(Tensor::from({3}, {0.0, 1e3, std::log(3.0)})));
    });
    EXPECT_DOUBLE_EQ(s[0], 0.5);
    EXPECT_NEAR(s[1], 1.0, 1e-12);
    EXPECT_NEAR(s[2], 0.75, 1e-15);
}

TEST(Ops, Conv2dHandExample) {
    const Tensor out = eval([](Tape& tape) {
        return conv2d(tape.constant(Tensor::from({1, 2, 2}, {1, 2, 3, 4})), tape.constant(Tensor({1, 1, 3, 3}, 1.0)),
                      tape.constant(Tensor({1}, 0.0)), Padding::same);
    });
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(out[i], 10.0);
}

TEST(Ops, Conv2dDeltaKernelAndBias) {
    const Tensor x = random_tensor({2, 5, 6}, 3);
    Tensor k({2, 2, 3, 3});
    k.at(0, 0, 1, 1) = 1.0;
    k.at(1, 1, 1, 1) = 1.0;
    const Tensor y = eval([&](Tape& tape) {
        return conv2d(tape.constant(x), tape.constant(k), tape.constant(Tensor({2}, 0.0)), Padding::same);
    });
    EXPECT_TRUE(y.identical(x));
    const Tensor z = eval([&](Tape& tape) {
        return conv2d(tape.constant(Tensor({2, 5, 6})), tape.constant(random_tensor({3, 2, 3, 3}, 4)),
                      tape.constant(Tensor::from({3}, {0.5, -1.0, 2.0})), Padding::valid);
    });
    EXPECT_EQ(z.shape(), (Shape{3, 3, 4}));
    EXPECT_DOUBLE_EQ(z.at(2, 1, 1), 2.0);
}

TEST(Ops, Conv2dShapeMismatchThrows) {
    Tape tape;
    EXPECT_THROW(conv2d(tape.constant(Tensor({2, 4, 4})), tape.constant(Tensor({1, 3, 3, 3})),
                        tape.constant(Tensor({1})), Padding::same),
                 ShapeError);
}

TEST(Ops, MaxPoolExamples) {
    const Tensor a = eval([](Tape& tape) { return maxpool2d(tape.constant(Tensor::from({1, 2, 2}, {1, 2, 3, 4}))); });
    EXPECT_EQ(a.shape(), (Shape{1, 1, 1}));
    EXPECT_EQ(a[0], 4.0);
    const Tensor b = eval([](Tape& tape) { return maxpool2d(tape.constant(Tensor({2, 4, 6}, 3.0))); });
    EXPECT_EQ(b.shape(), (Shape{2, 2, 3}));
    for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(b[i], 3.0);

    Tape tape;
    const Var x = tape.variable(Tensor({1, 2, 2}, 4.0));
    tape.backward(sum(maxpool2d(x)));
    EXPECT_EQ(tape.grad(x)[0], 1.0);
    EXPECT_EQ(sum(tape.grad(x)), 1.0);
    EXPECT_THROW(maxpool2d(tape.constant(Tensor({1, 3, 4}))), ShapeError);
}

TEST(Ops, TransposedConvExamples) {
    const Tensor a = eval([](Tape& tape) {
        return transposed_conv2d(tape.constant(Tensor::from({1, 1, 1}, {1})),
                                 tape.constant(Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4})));
    });
    EXPECT_TRUE(a.identical(Tensor::from({1, 2, 2}, {1, 2, 3, 4})));
    const Tensor z = eval([](Tape& tape) {
        return transposed_conv2d(tape.constant(Tensor({2, 3, 3})), tape.constant(random_tensor({2, 3, 2, 2}, 9)));
    });
    EXPECT_EQ(z.shape(), (Shape{3, 6, 6}));
    EXPECT_EQ(max_abs(z), 0.0);
}

// Dense matrix of conv2d built column by column; its transpose must match the backward pass.
TEST(Ops, Conv2dBackwardIsDenseTranspose) {
    for (Padding padding : {Padding::same, Padding::valid}) {
        const Tensor k = random_tensor({2, 3, 3, 3}, 21);
        const Tensor zero_bias({2});
        const Shape in_shape{3, 6, 5};
        auto apply = [&](const Tensor& x) {
            return eval([&](Tape& tape) {
                return conv2d(tape.constant(x), tape.constant(k), tape.constant(zero_bias), padding);
            });
        };
        const std::size_t n = element_count(in_shape);
        const Tensor probe_out = apply(Tensor(in_shape));
        const Tensor y = random_tensor(probe_out.shape(), 22);
        // Column j of the matrix is conv(e_j); (A^T y)_j = <conv(e_j), y>.
        Tensor dense_adjoint(in_shape);
        for (std::size_t j = 0; j < n; ++j) {
            Tensor e(in_shape);
            e[j] = 1.0;
            dense_adjoint[j] = dot(apply(e), y);
        }
        Tape tape;
        const Var x = tape.variable(random_tensor(in_shape, 23));
        const Var out = conv2d(x, tape.constant(k), tape.constant(zero_bias), padding);
        tape.backward(dot(out, tape.constant(y)));
        const Tensor& g = tape.grad(x);
        EXPECT_LE(norm2(g - dense_adjoint) / norm2(dense_adjoint), 1e-12);
    }
}

// The stride-2 transposed convolution is the adjoint of the stride-2 correlation with the same kernel.
TEST(Ops, TransposedConvIsAdjointOfStridedConv) {
    const std::size_t cin = 3, cout = 2, h = 4, w = 3;
    const Tensor k = random_tensor({cin, cout, 2, 2}, 31);
    for (int trial = 0; trial < 5; ++trial) {
        const Tensor x = random_tensor({cin, h, w}, 40 + trial);
        const Tensor y = random_tensor({cout, 2 * h, 2 * w}, 50 + trial);
        const Tensor tx = eval([&](Tape& tape) { return transposed_conv2d(tape.constant(x), tape.constant(k)); });
        Tensor sy({cin, h, w});
        for (std::size_t ci = 0; ci < cin; ++ci)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) {
                    double acc = 0.0;
                    for (std::size_t co = 0; co < cout; ++co)
                        for (std::size_t a = 0; a < 2; ++a)
                            for (std::size_t b = 0; b < 2; ++b)
                                acc += k.at(ci, co, a, b) * y.at(co, 2 * i + a, 2 * j + b);
                    sy.at(ci, i, j) = acc;
                }
        EXPECT_LE(relative_gap(dot(tx, y), dot(x, sy)), 1e-10);
    }
}

TEST(Ops, PrimitiveGradChecks) {
    const double tol = 1e-4;
    const Tensor x = random_tensor({2, 4, 4}, 61);
    auto check = [&](const char* name, const std::function<Var(Tape&, const Var&)>& fn, const Tensor& at) {
        const auto r = grad_check(fn, at);
        EXPECT_LE(r.max_relative_error, tol) << name;
    };
    check("relu", [](Tape&, const Var& v) { return probe(relu(v), 1); }, x);
    check("sigmoid", [](Tape&, const Var& v) { return probe(sigmoid(v), 2); }, x);
    check("softmax", [](Tape&, const Var& v) { return probe(softmax(v, 1), 3); }, x);
    check("zscore", [](Tape&, const Var& v) { return probe(zscore(v), 4); }, x);
    check("mean", [](Tape&, const Var& v) { return mean(mul(v, v)); }, x);
    check("swap", [](Tape&, const Var& v) { return probe(swap_leading_axes(v), 5); }, x);
    check("slice", [](Tape&, const Var& v) { return probe(slice(v, 1, 1), 6); }, x);
    check("concat", [](Tape&, const Var& v) { return probe(concat(v, mul(v, v)), 7); }, x);
    check("stack", [](Tape&, const Var& v) { return probe(stack({v, sigmoid(v)}), 8); }, x);
    check("reshape", [](Tape&, const Var& v) { return probe(reshape(v, {8, 4}), 9); }, x);
    check("element", [](Tape&, const Var& v) { return probe(scale_by(v, element(v, 5)), 10); }, x);
    check("affine", [](Tape&, const Var& v) { return probe(affine(v, element(v, 1), element(v, 2)), 11); }, x);
    check("maxpool", [](Tape&, const Var& v) { return probe(maxpool2d(v), 12); }, x);
    check("conv2d input",
          [](Tape& t, const Var& v) {
              return probe(conv2d(v, t.constant(random_tensor({3, 2, 3, 3}, 13)), t.constant(random_tensor({3}, 14)),
                                  Padding::same),
                           15);
          },
          x);
    check("conv2d kernel",
          [&](Tape& t, const Var& k) {
              return probe(conv2d(t.constant(x), k, t.constant(random_tensor({3}, 14)), Padding::valid), 16);
          },
          random_tensor({3, 2, 3, 3}, 13));
    check("conv2d bias",
          [&](Tape& t, const Var& b) {
              return probe(conv2d(t.constant(x), t.constant(random_tensor({3, 2, 3, 3}, 13)), b, Padding::same), 17);
          },
          random_tensor({3}, 14));
    check("conv2d_shared",
          [](Tape& t, const Var& v) { return probe(conv2d_shared(v, t.constant(random_tensor({3, 3}, 18))), 19); }, x);
    check("conv2d_shared kernel",
          [&](Tape& t, const Var& k) { return probe(conv2d_shared(t.constant(x), k), 20); }, random_tensor({5, 5}, 18));
    check("transposed input",
          [](Tape& t, const Var& v) {
              return probe(transposed_conv2d(v, t.constant(random_tensor({2, 3, 2, 2}, 21)),
                                             t.constant(random_tensor({3}, 22))),
                           23);
          },
          x);
    check("transposed kernel",
          [&](Tape& t, const Var& k) { return probe(transposed_conv2d(t.constant(x), k), 24); },
          random_tensor({2, 3, 2, 2}, 21));
}

TEST(Ops, ShapeMismatchIsHardError) {
    Tape tape;
    const Var a = tape.constant(Tensor({2, 3}));
    const Var b = tape.constant(Tensor({3, 2}));
    EXPECT_THROW(add(a, b), ShapeError);
    EXPECT_THROW(mul(a, b), ShapeError);
    EXPECT_THROW(scale_by(a, b), ShapeError);
    EXPECT_THROW(reshape(a, {5}), ShapeError);
}
