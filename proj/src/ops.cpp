#include "pinet/ops.h"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace pinet {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

Tape& shared_tape(const Var& a, const Var& b) {
    if (&a.tape() != &b.tape()) throw std::logic_error("operands recorded on different tapes");
    return a.tape();
}

void require_scalar(const Var& s, const char* what) {
    if (s.value().size() != 1) {
        throw ShapeError(std::string(what) + ": expected a single-element tensor, got " +
                         to_string(s.shape()));
    }
}

template <class F>
Tensor map_values(const Tensor& x, F f) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return out;
}

double stable_sigmoid(double t) {
    if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
    const double e = std::exp(t);
    return e / (1.0 + e);
}

// Column matrix (C_in*kh*kw, out_h*out_w) for cross-correlation with zero padding.
void im2col(const double* x, std::size_t channels, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::ptrdiff_t pad_h, std::ptrdiff_t pad_w, std::size_t out_h,
            std::size_t out_w, double* col) {
    const std::size_t plane = out_h * out_w;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t u = 0; u < kh; ++u) {
            for (std::size_t v = 0; v < kw; ++v) {
                double* row = col + ((c * kh + u) * kw + v) * plane;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + u) - pad_h;
                    double* dst = row + oy * out_w;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
                        std::fill(dst, dst + out_w, 0.0);
                        continue;
                    }
                    const double* src = x + (c * h + static_cast<std::size_t>(iy)) * w;
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + v) - pad_w;
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                                      ? 0.0
                                      : src[static_cast<std::size_t>(ix)];
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, std::size_t channels, std::size_t h, std::size_t w,
                std::size_t kh, std::size_t kw, std::ptrdiff_t pad_h, std::ptrdiff_t pad_w,
                std::size_t out_h, std::size_t out_w, double* x) {
    const std::size_t plane = out_h * out_w;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t u = 0; u < kh; ++u) {
            for (std::size_t v = 0; v < kw; ++v) {
                const double* row = col + ((c * kh + u) * kw + v) * plane;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + u) - pad_h;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    double* dst = x + (c * h + static_cast<std::size_t>(iy)) * w;
                    const double* src = row + oy * out_w;
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox + v) - pad_w;
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) {
                            dst[static_cast<std::size_t>(ix)] += src[ox];
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Var add(const Var& a, const Var& b) {
    Tape& tape = shared_tape(a, b);
    require_same_shape(a.value(), b.value(), "add");
    return tape.record("add", a.value() + b.value(), {a, b}, [a, b](const Tensor& g, const Tensor&) {
        a.tape().accumulate(a, g);
        b.tape().accumulate(b, g);
    });
}

Var sub(const Var& a, const Var& b) {
    Tape& tape = shared_tape(a, b);
    require_same_shape(a.value(), b.value(), "sub");
    return tape.record("sub", a.value() - b.value(), {a, b}, [a, b](const Tensor& g, const Tensor&) {
        a.tape().accumulate(a, g);
        b.tape().accumulate(b, g * -1.0);
    });
}

Var mul(const Var& a, const Var& b) {
    Tape& tape = shared_tape(a, b);
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return tape.record("mul", std::move(out), {a, b}, [a, b](const Tensor& g, const Tensor&) {
        Tensor ga(g.shape()), gb(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] = g[i] * b.value()[i];
            gb[i] = g[i] * a.value()[i];
        }
        a.tape().accumulate(a, ga);
        b.tape().accumulate(b, gb);
    });
}

Var scale(const Var& x, double factor) {
    return x.tape().record("scale", x.value() * factor, {x},
                           [x, factor](const Tensor& g, const Tensor&) {
                               x.tape().accumulate(x, g * factor);
                           });
}

Var add_constant(const Var& x, double offset) {
    return x.tape().record("add_constant",
                           map_values(x.value(), [offset](double v) { return v + offset; }), {x},
                           [x](const Tensor& g, const Tensor&) { x.tape().accumulate(x, g); });
}

Var scale_by(const Var& x, const Var& s) {
    Tape& tape = shared_tape(x, s);
    require_scalar(s, "scale_by");
    const double factor = s.value()[0];
    return tape.record("scale_by", x.value() * factor, {x, s},
                       [x, s, factor](const Tensor& g, const Tensor&) {
                           x.tape().accumulate(x, g * factor);
                           x.tape().accumulate(s, Tensor(s.shape(), pinet::dot(g, x.value())));
                       });
}

Var affine(const Var& x, const Var& a, const Var& b) {
    Tape& tape = shared_tape(x, a);
    shared_tape(x, b);
    require_scalar(a, "affine scale");
    require_scalar(b, "affine offset");
    const double av = a.value()[0];
    const double bv = b.value()[0];
    Tensor out = map_values(x.value(), [av, bv](double v) { return av * v + bv; });
    return tape.record("affine", std::move(out), {x, a, b},
                       [x, a, b, av](const Tensor& g, const Tensor&) {
                           Tape& t = x.tape();
                           t.accumulate(x, g * av);
                           t.accumulate(a, Tensor(a.shape(), pinet::dot(g, x.value())));
                           t.accumulate(b, Tensor(b.shape(), pinet::sum(g)));
                       });
}

Var element(const Var& t, std::size_t flat_index) {
    if (flat_index >= t.value().size()) {
        throw ShapeError("element index " + std::to_string(flat_index) + " out of range for " +
                         to_string(t.shape()));
    }
    return t.tape().record("element", Tensor::scalar(t.value()[flat_index]), {t},
                           [t, flat_index](const Tensor& g, const Tensor&) {
                               if (t.requires_grad()) t.tape().grad_buffer(t)[flat_index] += g[0];
                           });
}

Var sum(const Var& x) {
    return x.tape().record("sum", Tensor::scalar(pinet::sum(x.value())), {x},
                           [x](const Tensor& g, const Tensor&) {
                               x.tape().accumulate(x, Tensor(x.shape(), g[0]));
                           });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var dot(const Var& a, const Var& b) {
    Tape& tape = shared_tape(a, b);
    return tape.record("dot", Tensor::scalar(pinet::dot(a.value(), b.value())), {a, b},
                       [a, b](const Tensor& g, const Tensor&) {
                           a.tape().accumulate(a, b.value() * g[0]);
                           b.tape().accumulate(b, a.value() * g[0]);
                       });
}

Var relu(const Var& x) {
    return x.tape().record("relu", map_values(x.value(), [](double v) { return v > 0 ? v : 0.0; }),
                           {x}, [x](const Tensor& g, const Tensor&) {
                               Tensor gx(g.shape());
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   gx[i] = x.value()[i] > 0 ? g[i] : 0.0;
                               }
                               x.tape().accumulate(x, gx);
                           });
}

Var sigmoid(const Var& x) {
    return x.tape().record("sigmoid", map_values(x.value(), stable_sigmoid), {x},
                           [x](const Tensor& g, const Tensor& s) {
                               Tensor gx(g.shape());
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   gx[i] = g[i] * s[i] * (1.0 - s[i]);
                               }
                               x.tape().accumulate(x, gx);
                           });
}

Var softmax(const Var& x, std::size_t axis) {
    const Shape& shape = x.shape();
    if (axis >= shape.size()) {
        throw ShapeError("softmax axis " + std::to_string(axis) + " invalid for " + to_string(shape));
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t n = shape[axis];

    const Tensor& in = x.value();
    Tensor out(shape);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < inner; ++k) {
            const std::size_t base = o * n * inner + k;
            double peak = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) peak = std::max(peak, in[base + j * inner]);
            double total = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double e = std::exp(in[base + j * inner] - peak);
                out[base + j * inner] = e;
                total += e;
            }
            for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
        }
    }
    return x.tape().record("softmax", std::move(out), {x},
                           [x, outer, inner, n](const Tensor& g, const Tensor& y) {
                               Tensor gx(g.shape());
                               for (std::size_t o = 0; o < outer; ++o) {
                                   for (std::size_t k = 0; k < inner; ++k) {
                                       const std::size_t base = o * n * inner + k;
                                       double weighted = 0.0;
                                       for (std::size_t j = 0; j < n; ++j) {
                                           weighted += g[base + j * inner] * y[base + j * inner];
                                       }
                                       for (std::size_t j = 0; j < n; ++j) {
                                           const std::size_t idx = base + j * inner;
                                           gx[idx] = y[idx] * (g[idx] - weighted);
                                       }
                                   }
                               }
                               x.tape().accumulate(x, gx);
                           });
}

Var zscore(const Var& x, double variance_floor) {
    const Tensor& in = x.value();
    const double count = static_cast<double>(in.size());
    const double mu = pinet::sum(in) / count;
    double var = 0.0;
    for (double v : in.values()) var += (v - mu) * (v - mu);
    var /= count;
    const bool floored = var < variance_floor;
    const double sd = std::sqrt(floored ? variance_floor : var);
    Tensor out = map_values(in, [mu, sd](double v) { return (v - mu) / sd; });
    return x.tape().record("zscore", std::move(out), {x},
                           [x, sd, floored, count](const Tensor& g, const Tensor& y) {
                               const double g_mean = pinet::sum(g) / count;
                               const double gy_mean = floored ? 0.0 : pinet::dot(g, y) / count;
                               Tensor gx(g.shape());
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   gx[i] = (g[i] - g_mean - y[i] * gy_mean) / sd;
                               }
                               x.tape().accumulate(x, gx);
                           });
}

Var reshape(const Var& x, Shape shape) {
    Shape original = x.shape();
    return x.tape().record("reshape", x.value().reshaped(std::move(shape)), {x},
                           [x, original](const Tensor& g, const Tensor&) {
                               x.tape().accumulate(x, g.reshaped(original));
                           });
}

Var concat(const Var& a, const Var& b) {
    Tape& tape = shared_tape(a, b);
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1)) {
        throw ShapeError("concat: trailing extents differ " + to_string(sa) + " vs " + to_string(sb));
    }
    Shape shape = sa;
    shape[0] += sb[0];
    Tensor out(shape);
    std::copy(a.value().data(), a.value().data() + a.value().size(), out.data());
    std::copy(b.value().data(), b.value().data() + b.value().size(), out.data() + a.value().size());
    const std::size_t split = sa[0];
    return tape.record("concat", std::move(out), {a, b}, [a, b, split](const Tensor& g, const Tensor&) {
        a.tape().accumulate(a, g.slice(0, split));
        b.tape().accumulate(b, g.slice(split, g.dim(0) - split));
    });
}

Var slice(const Var& x, std::size_t begin, std::size_t count) {
    return x.tape().record("slice", x.value().slice(begin, count), {x},
                           [x, begin](const Tensor& g, const Tensor&) {
                               if (!x.requires_grad()) return;
                               Tensor& gx = x.tape().grad_buffer(x);
                               const std::size_t offset = begin * (gx.size() / gx.dim(0));
                               for (std::size_t i = 0; i < g.size(); ++i) gx[offset + i] += g[i];
                           });
}

Var stack(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("stack of zero tensors");
    std::vector<Tensor> values;
    values.reserve(parts.size());
    for (const Var& p : parts) {
        shared_tape(parts[0], p);
        values.push_back(p.value());
    }
    return parts[0].tape().record("stack", pinet::stack(values), parts,
                                  [parts](const Tensor& g, const Tensor&) {
                                      for (std::size_t i = 0; i < parts.size(); ++i) {
                                          if (!parts[i].requires_grad()) continue;
                                          parts[i].tape().accumulate(
                                              parts[i], g.slice(i, 1).reshaped(parts[i].shape()));
                                      }
                                  });
}

namespace {

Tensor swap_leading(const Tensor& x) {
    Shape shape = x.shape();
    const std::size_t a = shape[0], b = shape[1], inner = x.size() / (a * b);
    std::swap(shape[0], shape[1]);
    Tensor out(shape);
    for (std::size_t i = 0; i < a; ++i)
        for (std::size_t j = 0; j < b; ++j)
            std::copy_n(x.data() + (i * b + j) * inner, inner, out.data() + (j * a + i) * inner);
    return out;
}

}  // namespace

Var swap_leading_axes(const Var& x) {
    if (x.value().rank() < 2) throw ShapeError("swap_leading_axes needs rank >= 2, got " + to_string(x.shape()));
    return x.tape().record("swap_leading_axes", swap_leading(x.value()), {x},
                           [x](const Tensor& g, const Tensor&) { x.tape().accumulate(x, swap_leading(g)); });
}

Var conv2d(const Var& input, const Var& kernel, const Var& bias, Padding padding) {
    Tape& tape = shared_tape(input, kernel);
    shared_tape(input, bias);
    const Tensor& x = input.value();
    const Tensor& k = kernel.value();
    require_rank(x, 3, "conv2d input");
    require_rank(k, 4, "conv2d kernel");
    const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
    if (k.dim(1) != cin) {
        throw ShapeError("conv2d: kernel " + to_string(k.shape()) + " expects " +
                         std::to_string(k.dim(1)) + " input channels, input is " + to_string(x.shape()));
    }
    if (bias.value().rank() != 1 || bias.value().dim(0) != cout) {
        throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " does not match " +
                         std::to_string(cout) + " output channels");
    }
    std::ptrdiff_t pad_h = 0, pad_w = 0;
    std::size_t out_h = 0, out_w = 0;
    if (padding == Padding::same) {
        if (kh % 2 == 0 || kw % 2 == 0) {
            throw ShapeError("conv2d: same padding needs odd kernel extents, got " + to_string(k.shape()));
        }
        pad_h = static_cast<std::ptrdiff_t>(kh / 2);
        pad_w = static_cast<std::ptrdiff_t>(kw / 2);
        out_h = h;
        out_w = w;
    } else {
        if (kh > h || kw > w) {
            throw ShapeError("conv2d: kernel " + to_string(k.shape()) + " larger than input " +
                             to_string(x.shape()));
        }
        out_h = h - kh + 1;
        out_w = w - kw + 1;
    }

    const std::size_t patch = cin * kh * kw;
    const std::size_t plane = out_h * out_w;
    Tensor col({patch, plane});
    im2col(x.data(), cin, h, w, kh, kw, pad_h, pad_w, out_h, out_w, col.data());

    Tensor out({cout, out_h, out_w});
    MatrixMap y(out.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(plane));
    ConstMatrixMap kmat(k.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(patch));
    ConstMatrixMap cmat(col.data(), static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(plane));
    y.noalias() = kmat * cmat;
    for (std::size_t c = 0; c < cout; ++c) y.row(static_cast<Eigen::Index>(c)).array() += bias.value()[c];

    return tape.record(
        "conv2d", std::move(out), {input, kernel, bias},
        [input, kernel, bias, col = std::move(col), cin, h, w, kh, kw, pad_h, pad_w, out_h, out_w,
         cout, patch, plane](const Tensor& g, const Tensor&) {
            Tape& t = input.tape();
            ConstMatrixMap gy(g.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(plane));
            ConstMatrixMap cmat(col.data(), static_cast<Eigen::Index>(patch),
                                static_cast<Eigen::Index>(plane));
            if (kernel.requires_grad()) {
                Tensor gk(kernel.shape());
                MatrixMap(gk.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(patch))
                    .noalias() = gy * cmat.transpose();
                t.accumulate(kernel, gk);
            }
            if (bias.requires_grad()) {
                Tensor gb(bias.shape());
                for (std::size_t c = 0; c < cout; ++c) gb[c] = gy.row(static_cast<Eigen::Index>(c)).sum();
                t.accumulate(bias, gb);
            }
            if (input.requires_grad()) {
                Tensor gcol({patch, plane});
                ConstMatrixMap kmat(kernel.value().data(), static_cast<Eigen::Index>(cout),
                                    static_cast<Eigen::Index>(patch));
                MatrixMap(gcol.data(), static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(plane))
                    .noalias() = kmat.transpose() * gy;
                Tensor& gx = t.grad_buffer(input);
                col2im_add(gcol.data(), cin, h, w, kh, kw, pad_h, pad_w, out_h, out_w, gx.data());
            }
        });
}

Var conv2d_shared(const Var& input, const Var& kernel) {
    Tape& tape = shared_tape(input, kernel);
    const Tensor& x = input.value();
    const Tensor& k = kernel.value();
    require_rank(x, 3, "conv2d_shared input");
    require_rank(k, 2, "conv2d_shared kernel");
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t kh = k.dim(0), kw = k.dim(1);
    if (kh % 2 == 0 || kw % 2 == 0) {
        throw ShapeError("conv2d_shared: kernel extents must be odd, got " + to_string(k.shape()));
    }
    const auto pad_h = static_cast<std::ptrdiff_t>(kh / 2);
    const auto pad_w = static_cast<std::ptrdiff_t>(kw / 2);
    const std::size_t patch = kh * kw;
    const std::size_t plane = h * w;

    // Each slice is a one-channel image; all slices share the (1, kh*kw) kernel row.
    Tensor cols({n, patch, plane});
    for (std::size_t s = 0; s < n; ++s) {
        im2col(x.data() + s * plane, 1, h, w, kh, kw, pad_h, pad_w, h, w, cols.data() + s * patch * plane);
    }
    Tensor out({n, h, w});
    Eigen::Map<const Eigen::RowVectorXd> krow(k.data(), static_cast<Eigen::Index>(patch));
    for (std::size_t s = 0; s < n; ++s) {
        ConstMatrixMap cmat(cols.data() + s * patch * plane, static_cast<Eigen::Index>(patch),
                            static_cast<Eigen::Index>(plane));
        Eigen::Map<Eigen::RowVectorXd>(out.data() + s * plane, static_cast<Eigen::Index>(plane))
            .noalias() = krow * cmat;
    }
    return tape.record(
        "conv2d_shared", std::move(out), {input, kernel},
        [input, kernel, cols = std::move(cols), n, h, w, kh, kw, pad_h, pad_w, patch,
         plane](const Tensor& g, const Tensor&) {
            Tape& t = input.tape();
            if (kernel.requires_grad()) {
                Tensor gk(kernel.shape());
                Eigen::Map<Eigen::RowVectorXd> gkrow(gk.data(), static_cast<Eigen::Index>(patch));
                for (std::size_t s = 0; s < n; ++s) {
                    ConstMatrixMap cmat(cols.data() + s * patch * plane, static_cast<Eigen::Index>(patch),
                                        static_cast<Eigen::Index>(plane));
                    Eigen::Map<const Eigen::RowVectorXd> grow(g.data() + s * plane,
                                                              static_cast<Eigen::Index>(plane));
                    gkrow.noalias() += grow * cmat.transpose();
                }
                t.accumulate(kernel, gk);
            }
            if (input.requires_grad()) {
                Eigen::Map<const Eigen::VectorXd> kvec(kernel.value().data(), static_cast<Eigen::Index>(patch));
                Tensor gcol({patch, plane});
                Tensor& gx = t.grad_buffer(input);
                for (std::size_t s = 0; s < n; ++s) {
                    Eigen::Map<const Eigen::RowVectorXd> grow(g.data() + s * plane,
                                                              static_cast<Eigen::Index>(plane));
                    MatrixMap(gcol.data(), static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(plane))
                        .noalias() = kvec * grow;
                    col2im_add(gcol.data(), 1, h, w, kh, kw, pad_h, pad_w, h, w, gx.data() + s * plane);
                }
            }
        });
}

Var maxpool2d(const Var& input) {
    const Tensor& x = input.value();
    require_rank(x, 3, "maxpool2d input");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % 2 != 0 || w % 2 != 0) {
        throw ShapeError("maxpool2d: spatial extents must be even, got " + to_string(x.shape()));
    }
    const std::size_t oh = h / 2, ow = w / 2;
    Tensor out({c, oh, ow});
    std::vector<std::size_t> argmax(out.size());
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
                std::size_t best = (ch * h + 2 * i) * w + 2 * j;
                // Row-major window scan; strict comparison keeps the first maximum.
                for (std::size_t di = 0; di < 2; ++di) {
                    for (std::size_t dj = 0; dj < 2; ++dj) {
                        const std::size_t idx = (ch * h + 2 * i + di) * w + 2 * j + dj;
                        if (x[idx] > x[best]) best = idx;
                    }
                }
                const std::size_t o = (ch * oh + i) * ow + j;
                out[o] = x[best];
                argmax[o] = best;
            }
        }
    }
    return input.tape().record("maxpool2d", std::move(out), {input},
                               [input, argmax = std::move(argmax)](const Tensor& g, const Tensor&) {
                                   if (!input.requires_grad()) return;
                                   Tensor& gx = input.tape().grad_buffer(input);
                                   for (std::size_t o = 0; o < g.size(); ++o) gx[argmax[o]] += g[o];
                               });
}

Var transposed_conv2d(const Var& input, const Var& kernel, const Var& bias) {
    Tape& tape = shared_tape(input, kernel);
    const bool has_bias = bias.valid();
    if (has_bias) shared_tape(input, bias);
    const Tensor& x = input.value();
    const Tensor& k = kernel.value();
    require_rank(x, 3, "transposed_conv2d input");
    require_rank(k, 4, "transposed_conv2d kernel");
    const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (k.dim(0) != cin || k.dim(2) != 2 || k.dim(3) != 2) {
        throw ShapeError("transposed_conv2d: kernel " + to_string(k.shape()) +
                         " must be (C_in,C_out,2,2) with C_in = " + std::to_string(cin));
    }
    const std::size_t cout = k.dim(1);
    if (has_bias && (bias.value().rank() != 1 || bias.value().dim(0) != cout)) {
        throw ShapeError("transposed_conv2d: bias " + to_string(bias.shape()) + " does not match " +
                         std::to_string(cout) + " output channels");
    }
    const std::size_t plane = h * w;
    const std::size_t taps = cout * 4;

    // z[(co,a,b), (i,j)] = sum_ci k[ci,(co,a,b)] x[ci,(i,j)], scattered to out[co, 2i+a, 2j+b].
    RowMatrix z(static_cast<Eigen::Index>(taps), static_cast<Eigen::Index>(plane));
    ConstMatrixMap kmat(k.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(taps));
    ConstMatrixMap xmat(x.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(plane));
    z.noalias() = kmat.transpose() * xmat;

    Tensor out({cout, 2 * h, 2 * w});
    for (std::size_t co = 0; co < cout; ++co) {
        const double b = has_bias ? bias.value()[co] : 0.0;
        for (std::size_t a = 0; a < 2; ++a) {
            for (std::size_t bb = 0; bb < 2; ++bb) {
                const double* row = z.data() + ((co * 2 + a) * 2 + bb) * plane;
                for (std::size_t i = 0; i < h; ++i) {
                    for (std::size_t j = 0; j < w; ++j) {
                        out.at(co, 2 * i + a, 2 * j + bb) = row[i * w + j] + b;
                    }
                }
            }
        }
    }
    std::vector<Var> inputs{input, kernel};
    if (has_bias) inputs.push_back(bias);
    return tape.record(
        "transposed_conv2d", std::move(out), inputs,
        [input, kernel, bias, has_bias, cin, cout, h, w, plane, taps](const Tensor& g, const Tensor&) {
            Tape& t = input.tape();
            RowMatrix gz(static_cast<Eigen::Index>(taps), static_cast<Eigen::Index>(plane));
            for (std::size_t co = 0; co < cout; ++co) {
                for (std::size_t a = 0; a < 2; ++a) {
                    for (std::size_t bb = 0; bb < 2; ++bb) {
                        double* row = gz.data() + ((co * 2 + a) * 2 + bb) * plane;
                        for (std::size_t i = 0; i < h; ++i) {
                            for (std::size_t j = 0; j < w; ++j) {
                                row[i * w + j] = g.at(co, 2 * i + a, 2 * j + bb);
                            }
                        }
                    }
                }
            }
            if (has_bias && bias.requires_grad()) {
                Tensor gb(bias.shape());
                for (std::size_t co = 0; co < cout; ++co) {
                    gb[co] = gz.middleRows(static_cast<Eigen::Index>(co * 4), 4).sum();
                }
                t.accumulate(bias, gb);
            }
            if (kernel.requires_grad()) {
                Tensor gk(kernel.shape());
                ConstMatrixMap xmat(input.value().data(), static_cast<Eigen::Index>(cin),
                                    static_cast<Eigen::Index>(plane));
                MatrixMap(gk.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(taps))
                    .noalias() = xmat * gz.transpose();
                t.accumulate(kernel, gk);
            }
            if (input.requires_grad()) {
                Tensor gx(input.shape());
                ConstMatrixMap kmat(kernel.value().data(), static_cast<Eigen::Index>(cin),
                                    static_cast<Eigen::Index>(taps));
                MatrixMap(gx.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(plane))
                    .noalias() = kmat * gz;
                t.accumulate(input, gx);
            }
        });
}

}  // namespace pinet
