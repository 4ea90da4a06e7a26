#include "robnas/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "robnas/kernels.hpp"

namespace robnas::op {

namespace {

Tape& tape_of(const Var& a) {
    if (!a.valid()) throw Error("op on an empty Var");
    return *a.tape();
}

void check_same(const Var& a, const Var& b, const char* what) {
    if (a.tape() != b.tape()) throw Error(std::string(what) + ": vars from different tapes");
    require_same_shape(a.value(), b.value(), what);
}

std::size_t plane_size(const Shape& s) {
    std::size_t p = 1;
    for (std::size_t i = 2; i < s.size(); ++i) p *= s[i];
    return p;
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank)
        throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
}

void accumulate(Tensor* dst, const Tensor& src) {
    if (dst) *dst += src;
}

// First/last output index o with o*stride + offset in [0, extent).
struct Range {
    std::size_t lo = 0, hi = 0;  // [lo, hi)
};

Range valid_outputs(std::size_t out_extent, std::size_t in_extent, std::size_t stride, long offset) {
    // need 0 <= o*stride + offset <= in_extent-1
    long lo = 0;
    if (offset < 0) lo = (-offset + static_cast<long>(stride) - 1) / static_cast<long>(stride);
    long top = static_cast<long>(in_extent) - 1 - offset;
    if (top < 0) return {};
    long hi = top / static_cast<long>(stride) + 1;
    hi = std::min<long>(hi, static_cast<long>(out_extent));
    if (hi <= lo) return {};
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, const ConvAttrs& a) {
    const std::size_t span = a.dilation * (kernel - 1) + 1;
    if (in + 2 * a.pad < span) throw ShapeError("convolution window larger than padded input");
    return (in + 2 * a.pad - span) / a.stride + 1;
}

std::size_t pool_out_extent(std::size_t in, const PoolAttrs& a) {
    if (in + 2 * a.pad < a.kernel) throw ShapeError("pooling window larger than padded input");
    if (a.pad * 2 > a.kernel) throw ShapeError("pooling padding exceeds half the window");
    return (in + 2 * a.pad - a.kernel) / a.stride + 1;
}

// ---------------------------------------------------------------- element-wise

Var add(const Var& a, const Var& b) {
    check_same(a, b, "add");
    return tape_of(a).record("add", a.value() + b.value(), {a, b},
                             [](const Tensor& g, std::span<Tensor* const> gi) {
                                 accumulate(gi[0], g);
                                 accumulate(gi[1], g);
                             });
}

Var sub(const Var& a, const Var& b) {
    check_same(a, b, "sub");
    return tape_of(a).record("sub", a.value() - b.value(), {a, b},
                             [](const Tensor& g, std::span<Tensor* const> gi) {
                                 accumulate(gi[0], g);
                                 if (gi[1]) *gi[1] -= g;
                             });
}

Var mul(const Var& a, const Var& b) {
    check_same(a, b, "mul");
    Tensor out(a.shape());
    kernels::mul(out.size(), a.value().ptr(), b.value().ptr(), out.ptr());
    return tape_of(a).record("mul", std::move(out), {a, b}, [a, b](const Tensor& g, std::span<Tensor* const> gi) {
        const std::size_t n = g.size();
        Tensor t(g.shape());
        if (gi[0]) {
            kernels::mul(n, g.ptr(), b.value().ptr(), t.ptr());
            *gi[0] += t;
        }
        if (gi[1]) {
            kernels::mul(n, g.ptr(), a.value().ptr(), t.ptr());
            *gi[1] += t;
        }
    });
}

Var scale(const Var& a, Real c) {
    return tape_of(a).record("scale", a.value() * c, {a}, [c](const Tensor& g, std::span<Tensor* const> gi) {
        if (gi[0]) kernels::axpy(g.size(), c, g.ptr(), gi[0]->ptr());
    });
}

Var mul_const(const Var& a, const Tensor& m) {
    require_same_shape(a.value(), m, "mul_const");
    Tensor out(a.shape());
    kernels::mul(out.size(), a.value().ptr(), m.ptr(), out.ptr());
    return tape_of(a).record("mul_const", std::move(out), {a}, [m](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        Tensor t(g.shape());
        kernels::mul(g.size(), g.ptr(), m.ptr(), t.ptr());
        *gi[0] += t;
    });
}

Var add_const(const Var& a, const Tensor& c) {
    require_same_shape(a.value(), c, "add_const");
    return tape_of(a).record("add_const", a.value() + c, {a},
                             [](const Tensor& g, std::span<Tensor* const> gi) { accumulate(gi[0], g); });
}

Var mul_scalar(const Var& a, const Var& s) {
    if (s.value().size() != 1) throw ShapeError("mul_scalar: scale must have one element");
    if (a.tape() != s.tape()) throw Error("mul_scalar: vars from different tapes");
    const Real sv = s.value()[0];
    return tape_of(a).record("mul_scalar", a.value() * sv, {a, s},
                             [a, sv](const Tensor& g, std::span<Tensor* const> gi) {
                                 if (gi[0]) kernels::axpy(g.size(), sv, g.ptr(), gi[0]->ptr());
                                 if (gi[1]) (*gi[1])[0] += kernels::dot(g.size(), g.ptr(), a.value().ptr());
                             });
}

Var abs(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.data()) v = std::abs(v);
    return tape_of(a).record("abs", std::move(out), {a}, [a](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        const auto& x = a.value();
        for (std::size_t i = 0; i < g.size(); ++i)
            (*gi[0])[i] += x[i] > 0 ? g[i] : (x[i] < 0 ? -g[i] : Real(0));
    });
}

Var sqrt(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.data()) {
        if (v < 0) throw NumericError("sqrt of negative value");
        v = std::sqrt(v);
    }
    const Tensor root = out;
    return tape_of(a).record("sqrt", std::move(out), {a}, [root](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i)
            if (root[i] > 0) (*gi[0])[i] += g[i] / (2 * root[i]);
    });
}

Var relu(const Var& a) {
    Tensor out(a.shape());
    kernels::relu(out.size(), a.value().ptr(), out.ptr());
    return tape_of(a).record("relu", std::move(out), {a}, [a](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        const auto& x = a.value();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > 0) (*gi[0])[i] += g[i];
    });
}

Var tanh(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.data()) v = std::tanh(v);
    const Tensor y = out;
    return tape_of(a).record("tanh", std::move(out), {a}, [y](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * (1 - y[i] * y[i]);
    });
}

// ---------------------------------------------------------------- reductions

Var sum(const Var& a) {
    const Real s = kernels::sum(a.value().size(), a.value().ptr());
    return tape_of(a).record("sum", Tensor::scalar(s), {a}, [](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        for (auto& v : gi[0]->data()) v += g[0];
    });
}

Var mean(const Var& a) { return scale(sum(a), Real(1) / static_cast<Real>(a.value().size())); }

Var sum_rows(const Var& a) {
    require_rank(a.value(), 2, "sum_rows");
    const std::size_t n = a.value().dim(0), m = a.value().dim(1);
    Tensor out(Shape{n});
    for (std::size_t i = 0; i < n; ++i) out[i] = kernels::sum(m, a.value().ptr() + i * m);
    return tape_of(a).record("sum_rows", std::move(out), {a}, [n, m](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) (*gi[0])[i * m + j] += g[i];
    });
}

Var reshape(const Var& a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return tape_of(a).record("reshape", std::move(out), {a}, [](const Tensor& g, std::span<Tensor* const> gi) {
        if (gi[0]) kernels::axpy(g.size(), Real(1), g.ptr(), gi[0]->ptr());
    });
}

Var concat_channels(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat_channels: no inputs");
    const Shape& s0 = xs[0].shape();
    if (s0.size() != 4) throw ShapeError("concat_channels: expected N x C x H x W inputs");
    std::size_t channels = 0;
    for (const auto& x : xs) {
        const auto& s = x.shape();
        if (s.size() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
            throw ShapeError("concat_channels: incompatible input " + shape_str(s));
        channels += s[1];
    }
    const std::size_t n = s0[0], hw = s0[2] * s0[3];
    Tensor out(Shape{n, channels, s0[2], s0[3]});
    std::vector<std::size_t> ch;
    std::size_t off = 0;
    for (const auto& x : xs) {
        const std::size_t c = x.shape()[1];
        for (std::size_t i = 0; i < n; ++i)
            std::copy_n(x.value().ptr() + i * c * hw, c * hw, out.ptr() + (i * channels + off) * hw);
        ch.push_back(c);
        off += c;
    }
    return tape_of(xs[0]).record("concat", std::move(out), xs,
                                 [ch, n, hw, channels](const Tensor& g, std::span<Tensor* const> gi) {
                                     std::size_t off = 0;
                                     for (std::size_t k = 0; k < ch.size(); ++k) {
                                         if (gi[k]) {
                                             for (std::size_t i = 0; i < n; ++i)
                                                 kernels::axpy(ch[k] * hw, Real(1),
                                                               g.ptr() + (i * channels + off) * hw,
                                                               gi[k]->ptr() + i * ch[k] * hw);
                                         }
                                         off += ch[k];
                                     }
                                 });
}

Var gather(const Var& a, std::vector<std::size_t> indices, Shape shape) {
    Tensor out(std::move(shape));
    if (out.size() != indices.size()) throw ShapeError("gather: index count does not match output shape");
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= a.value().size()) throw ShapeError("gather: index out of range");
        out[i] = a.value()[indices[i]];
    }
    return tape_of(a).record("gather", std::move(out), {a},
                             [idx = std::move(indices)](const Tensor& g, std::span<Tensor* const> gi) {
                                 if (!gi[0]) return;
                                 for (std::size_t i = 0; i < idx.size(); ++i) (*gi[0])[idx[i]] += g[i];
                             });
}

// ---------------------------------------------------------------- convolution

namespace {

struct ConvGeom {
    std::size_t n, cin, h, w, cout, cin_g, kh, kw, ho, wo, cout_g;
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& w, const ConvAttrs& a) {
    require_rank(x, 4, "conv2d input");
    require_rank(w, 4, "conv2d weight");
    if (a.groups == 0 || a.stride == 0 || a.dilation == 0) throw ShapeError("conv2d: zero stride/dilation/groups");
    ConvGeom g{};
    g.n = x.dim(0);
    g.cin = x.dim(1);
    g.h = x.dim(2);
    g.w = x.dim(3);
    g.cout = w.dim(0);
    g.cin_g = w.dim(1);
    g.kh = w.dim(2);
    g.kw = w.dim(3);
    if (g.cin % a.groups || g.cout % a.groups || g.cin / a.groups != g.cin_g)
        throw ShapeError("conv2d: channel mismatch, input " + shape_str(x.shape()) + " weight " +
                         shape_str(w.shape()) + " groups " + std::to_string(a.groups));
    g.ho = conv_out_extent(g.h, g.kh, a);
    g.wo = conv_out_extent(g.w, g.kw, a);
    g.cout_g = g.cout / a.groups;
    return g;
}

// Visits every (input row segment, output row segment, weight) triple of the
// convolution. `fn(x_off, out_off, len, w_index)` with unit stride in both rows
// when attrs.stride == 1; otherwise `strided` is called with explicit strides.
template <class Fn>
void for_each_tap(const ConvGeom& g, const ConvAttrs& a, Fn&& fn) {
    const bool plane = g.kh == 1 && g.kw == 1 && a.stride == 1 && a.pad == 0;
    for (std::size_t n = 0; n < g.n; ++n)
        for (std::size_t oc = 0; oc < g.cout; ++oc) {
            const std::size_t grp = oc / g.cout_g;
            for (std::size_t icg = 0; icg < g.cin_g; ++icg) {
                const std::size_t ic = grp * g.cin_g + icg;
                const std::size_t x_plane = (n * g.cin + ic) * g.h * g.w;
                const std::size_t o_plane = (n * g.cout + oc) * g.ho * g.wo;
                const std::size_t w_base = (oc * g.cin_g + icg) * g.kh * g.kw;
                if (plane) {
                    fn(x_plane, o_plane, g.h * g.w, std::size_t{1}, w_base);
                    continue;
                }
                for (std::size_t ki = 0; ki < g.kh; ++ki) {
                    const long hoff = static_cast<long>(ki * a.dilation) - static_cast<long>(a.pad);
                    const Range rows = valid_outputs(g.ho, g.h, a.stride, hoff);
                    for (std::size_t kj = 0; kj < g.kw; ++kj) {
                        const long woff = static_cast<long>(kj * a.dilation) - static_cast<long>(a.pad);
                        const Range cols = valid_outputs(g.wo, g.w, a.stride, woff);
                        if (cols.hi <= cols.lo) continue;
                        const std::size_t len = cols.hi - cols.lo;
                        for (std::size_t oh = rows.lo; oh < rows.hi; ++oh) {
                            const std::size_t ih = static_cast<std::size_t>(static_cast<long>(oh * a.stride) + hoff);
                            const std::size_t iw0 =
                                static_cast<std::size_t>(static_cast<long>(cols.lo * a.stride) + woff);
                            fn(x_plane + ih * g.w + iw0, o_plane + oh * g.wo + cols.lo, len, a.stride,
                               w_base + ki * g.kw + kj);
                        }
                    }
                }
            }
        }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const std::optional<Var>& b, const ConvAttrs& attrs) {
    const ConvGeom g = conv_geometry(x.value(), w.value(), attrs);
    if (b && (b->value().rank() != 1 || b->value().dim(0) != g.cout)) throw ShapeError("conv2d: bias shape");
    Tensor out(Shape{g.n, g.cout, g.ho, g.wo});
    const Real* xp = x.value().ptr();
    const Real* wp = w.value().ptr();
    Real* op = out.ptr();
    for_each_tap(g, attrs, [&](std::size_t xo, std::size_t oo, std::size_t len, std::size_t stride, std::size_t wi) {
        const Real wv = wp[wi];
        if (stride == 1) {
            kernels::axpy(len, wv, xp + xo, op + oo);
        } else {
            for (std::size_t t = 0; t < len; ++t) op[oo + t] += wv * xp[xo + t * stride];
        }
    });
    if (b) {
        const std::size_t hw = g.ho * g.wo;
        for (std::size_t n = 0; n < g.n; ++n)
            for (std::size_t oc = 0; oc < g.cout; ++oc) {
                const Real bv = b->value()[oc];
                Real* p = op + (n * g.cout + oc) * hw;
                for (std::size_t t = 0; t < hw; ++t) p[t] += bv;
            }
    }
    std::vector<Var> inputs{x, w};
    if (b) inputs.push_back(*b);
    return tape_of(x).record(
        "conv2d", std::move(out), std::move(inputs), [x, w, g, attrs](const Tensor& gout, std::span<Tensor* const> gi) {
            const Real* gp = gout.ptr();
            const Real* xp = x.value().ptr();
            const Real* wp = w.value().ptr();
            Real* gx = gi[0] ? gi[0]->ptr() : nullptr;
            Real* gw = gi[1] ? gi[1]->ptr() : nullptr;
            if (gx || gw) {
                for_each_tap(g, attrs,
                             [&](std::size_t xo, std::size_t oo, std::size_t len, std::size_t stride, std::size_t wi) {
                                 if (stride == 1) {
                                     if (gx) kernels::axpy(len, wp[wi], gp + oo, gx + xo);
                                     if (gw) gw[wi] += kernels::dot(len, gp + oo, xp + xo);
                                 } else {
                                     Real acc = 0;
                                     for (std::size_t t = 0; t < len; ++t) {
                                         if (gx) gx[xo + t * stride] += wp[wi] * gp[oo + t];
                                         acc += gp[oo + t] * xp[xo + t * stride];
                                     }
                                     if (gw) gw[wi] += acc;
                                 }
                             });
            }
            if (gi.size() > 2 && gi[2]) {
                const std::size_t hw = g.ho * g.wo;
                for (std::size_t n = 0; n < g.n; ++n)
                    for (std::size_t oc = 0; oc < g.cout; ++oc)
                        (*gi[2])[oc] += kernels::sum(hw, gp + (n * g.cout + oc) * hw);
            }
        });
}

// ---------------------------------------------------------------- normalization

Var batchnorm_train(const Var& x, const Var& gamma, const Var& beta, Real eps, Tensor* batch_mean,
                    Tensor* batch_var) {
    const Tensor& xv = x.value();
    if (xv.rank() < 2) throw ShapeError("batchnorm: input rank < 2");
    const std::size_t n = xv.dim(0), c = xv.dim(1), hw = plane_size(xv.shape());
    if (gamma.value().size() != c || beta.value().size() != c) throw ShapeError("batchnorm: parameter shape");
    if (eps <= 0) throw NumericError("batchnorm: eps must be positive");
    const auto m = static_cast<Real>(n * hw);
    Tensor mu(Shape{c}), var(Shape{c}), inv(Shape{c});
    for (std::size_t ch = 0; ch < c; ++ch) {
        Real s = 0;
        for (std::size_t i = 0; i < n; ++i) s += kernels::sum(hw, xv.ptr() + (i * c + ch) * hw);
        const Real mean = s / m;
        Real ss = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const Real* p = xv.ptr() + (i * c + ch) * hw;
            for (std::size_t t = 0; t < hw; ++t) ss += (p[t] - mean) * (p[t] - mean);
        }
        mu[ch] = mean;
        var[ch] = ss / m;
        inv[ch] = Real(1) / std::sqrt(var[ch] + eps);
    }
    Tensor xhat(xv.shape()), out(xv.shape());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (i * c + ch) * hw;
            for (std::size_t t = 0; t < hw; ++t) {
                xhat[base + t] = (xv[base + t] - mu[ch]) * inv[ch];
                out[base + t] = gamma.value()[ch] * xhat[base + t] + beta.value()[ch];
            }
        }
    if (batch_mean) *batch_mean = mu;
    if (batch_var) *batch_var = var;
    return tape_of(x).record(
        "batchnorm", std::move(out), {x, gamma, beta},
        [gamma, xhat = std::move(xhat), inv, n, c, hw, m](const Tensor& g, std::span<Tensor* const> gi) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                Real sg = 0, sgx = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    const std::size_t base = (i * c + ch) * hw;
                    sg += kernels::sum(hw, g.ptr() + base);
                    sgx += kernels::dot(hw, g.ptr() + base, xhat.ptr() + base);
                }
                if (gi[1]) (*gi[1])[ch] += sgx;
                if (gi[2]) (*gi[2])[ch] += sg;
                if (gi[0]) {
                    const Real gm = gamma.value()[ch];
                    const Real k = gm * inv[ch] / m;
                    for (std::size_t i = 0; i < n; ++i) {
                        const std::size_t base = (i * c + ch) * hw;
                        for (std::size_t t = 0; t < hw; ++t)
                            (*gi[0])[base + t] += k * (m * g[base + t] - sg - xhat[base + t] * sgx);
                    }
                }
            }
        });
}

Var channel_affine(const Var& x, const Var& scale, const std::optional<Var>& shift) {
    const Tensor& xv = x.value();
    if (xv.rank() < 2) throw ShapeError("channel_affine: input rank < 2");
    const std::size_t n = xv.dim(0), c = xv.dim(1), hw = plane_size(xv.shape());
    if (scale.value().size() != c || (shift && shift->value().size() != c))
        throw ShapeError("channel_affine: parameter shape");
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (i * c + ch) * hw;
            const Real s = scale.value()[ch];
            const Real t = shift ? shift->value()[ch] : Real(0);
            for (std::size_t k = 0; k < hw; ++k) out[base + k] = s * xv[base + k] + t;
        }
    std::vector<Var> inputs{x, scale};
    if (shift) inputs.push_back(*shift);
    return tape_of(x).record("channel_affine", std::move(out), std::move(inputs),
                             [x, scale, n, c, hw](const Tensor& g, std::span<Tensor* const> gi) {
                                 for (std::size_t i = 0; i < n; ++i)
                                     for (std::size_t ch = 0; ch < c; ++ch) {
                                         const std::size_t base = (i * c + ch) * hw;
                                         if (gi[0])
                                             kernels::axpy(hw, scale.value()[ch], g.ptr() + base,
                                                           gi[0]->ptr() + base);
                                         if (gi[1])
                                             (*gi[1])[ch] += kernels::dot(hw, g.ptr() + base, x.value().ptr() + base);
                                         if (gi.size() > 2 && gi[2]) (*gi[2])[ch] += kernels::sum(hw, g.ptr() + base);
                                     }
                             });
}

// ---------------------------------------------------------------- pooling

Var max_pool2d(const Var& x, const PoolAttrs& a, std::vector<std::size_t>* argmax) {
    const Tensor& xv = x.value();
    require_rank(xv, 4, "max_pool2d");
    const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const std::size_t ho = pool_out_extent(h, a), wo = pool_out_extent(w, a);
    Tensor out(Shape{n, c, ho, wo});
    std::vector<std::size_t> idx(out.size());
    for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t oh = 0; oh < ho; ++oh)
            for (std::size_t ow = 0; ow < wo; ++ow) {
                Real best = -std::numeric_limits<Real>::infinity();
                std::size_t best_i = 0;
                for (std::size_t ki = 0; ki < a.kernel; ++ki) {
                    const long ih = static_cast<long>(oh * a.stride + ki) - static_cast<long>(a.pad);
                    if (ih < 0 || ih >= static_cast<long>(h)) continue;
                    for (std::size_t kj = 0; kj < a.kernel; ++kj) {
                        const long iw = static_cast<long>(ow * a.stride + kj) - static_cast<long>(a.pad);
                        if (iw < 0 || iw >= static_cast<long>(w)) continue;
                        const std::size_t i = p * h * w + static_cast<std::size_t>(ih) * w + static_cast<std::size_t>(iw);
                        if (xv[i] > best) {
                            best = xv[i];
                            best_i = i;
                        }
                    }
                }
                const std::size_t o = (p * ho + oh) * wo + ow;
                out[o] = best;
                idx[o] = best_i;
            }
    if (argmax) *argmax = idx;
    return tape_of(x).record("max_pool2d", std::move(out), {x},
                             [idx = std::move(idx)](const Tensor& g, std::span<Tensor* const> gi) {
                                 if (!gi[0]) return;
                                 for (std::size_t o = 0; o < idx.size(); ++o) (*gi[0])[idx[o]] += g[o];
                             });
}

Var avg_pool2d(const Var& x, const PoolAttrs& a) {
    const Tensor& xv = x.value();
    require_rank(xv, 4, "avg_pool2d");
    const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
    const std::size_t ho = pool_out_extent(h, a), wo = pool_out_extent(w, a);
    Tensor out(Shape{n, c, ho, wo});
    // window bounds and divisor per output cell, shared across planes
    struct Win {
        std::size_t h0, h1, w0, w1;
        Real inv;
    };
    std::vector<Win> wins(ho * wo);
    for (std::size_t oh = 0; oh < ho; ++oh)
        for (std::size_t ow = 0; ow < wo; ++ow) {
            const long h0 = static_cast<long>(oh * a.stride) - static_cast<long>(a.pad);
            const long w0 = static_cast<long>(ow * a.stride) - static_cast<long>(a.pad);
            Win win{static_cast<std::size_t>(std::max<long>(h0, 0)),
                    static_cast<std::size_t>(std::min<long>(h0 + static_cast<long>(a.kernel), static_cast<long>(h))),
                    static_cast<std::size_t>(std::max<long>(w0, 0)),
                    static_cast<std::size_t>(std::min<long>(w0 + static_cast<long>(a.kernel), static_cast<long>(w))),
                    0};
            win.inv = Real(1) / static_cast<Real>((win.h1 - win.h0) * (win.w1 - win.w0));
            wins[oh * wo + ow] = win;
        }
    for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t o = 0; o < ho * wo; ++o) {
            const Win& win = wins[o];
            Real s = 0;
            for (std::size_t ih = win.h0; ih < win.h1; ++ih)
                for (std::size_t iw = win.w0; iw < win.w1; ++iw) s += xv[p * h * w + ih * w + iw];
            out[p * ho * wo + o] = s * win.inv;
        }
    return tape_of(x).record("avg_pool2d", std::move(out), {x},
                             [wins = std::move(wins), n, c, h, w, ho, wo](const Tensor& g, std::span<Tensor* const> gi) {
                                 if (!gi[0]) return;
                                 for (std::size_t p = 0; p < n * c; ++p)
                                     for (std::size_t o = 0; o < ho * wo; ++o) {
                                         const Win& win = wins[o];
                                         const Real v = g[p * ho * wo + o] * win.inv;
                                         for (std::size_t ih = win.h0; ih < win.h1; ++ih)
                                             for (std::size_t iw = win.w0; iw < win.w1; ++iw)
                                                 (*gi[0])[p * h * w + ih * w + iw] += v;
                                     }
                             });
}

Var global_avg_pool(const Var& x) {
    const Tensor& xv = x.value();
    require_rank(xv, 4, "global_avg_pool");
    const std::size_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
    Tensor out(Shape{n, c});
    const Real inv = Real(1) / static_cast<Real>(hw);
    for (std::size_t p = 0; p < n * c; ++p) out[p] = kernels::sum(hw, xv.ptr() + p * hw) * inv;
    return tape_of(x).record("global_avg_pool", std::move(out), {x},
                             [n, c, hw, inv](const Tensor& g, std::span<Tensor* const> gi) {
                                 if (!gi[0]) return;
                                 for (std::size_t p = 0; p < n * c; ++p) {
                                     const Real v = g[p] * inv;
                                     Real* d = gi[0]->ptr() + p * hw;
                                     for (std::size_t t = 0; t < hw; ++t) d[t] += v;
                                 }
                             });
}

Var linear(const Var& x, const Var& w, const std::optional<Var>& b) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    require_rank(xv, 2, "linear input");
    require_rank(wv, 2, "linear weight");
    const std::size_t n = xv.dim(0), d = xv.dim(1), k = wv.dim(0);
    if (wv.dim(1) != d) throw ShapeError("linear: weight " + shape_str(wv.shape()) + " vs input " + shape_str(xv.shape()));
    if (b && b->value().size() != k) throw ShapeError("linear: bias shape");
    Tensor out(Shape{n, k});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < k; ++j)
            out[i * k + j] = kernels::dot(d, xv.ptr() + i * d, wv.ptr() + j * d) + (b ? b->value()[j] : Real(0));
    std::vector<Var> inputs{x, w};
    if (b) inputs.push_back(*b);
    return tape_of(x).record("linear", std::move(out), std::move(inputs),
                             [x, w, n, d, k](const Tensor& g, std::span<Tensor* const> gi) {
                                 for (std::size_t i = 0; i < n; ++i)
                                     for (std::size_t j = 0; j < k; ++j) {
                                         const Real gv = g[i * k + j];
                                         if (gi[0]) kernels::axpy(d, gv, w.value().ptr() + j * d, gi[0]->ptr() + i * d);
                                         if (gi[1]) kernels::axpy(d, gv, x.value().ptr() + i * d, gi[1]->ptr() + j * d);
                                         if (gi.size() > 2 && gi[2]) (*gi[2])[j] += gv;
                                     }
                             });
}

// ---------------------------------------------------------------- classification

Var softmax_rows(const Var& a) {
    const Tensor& av = a.value();
    require_rank(av, 2, "softmax_rows");
    const std::size_t r = av.dim(0), c = av.dim(1);
    Tensor out(av.shape());
    for (std::size_t i = 0; i < r; ++i) {
        const Real* row = av.ptr() + i * c;
        const Real mx = *std::max_element(row, row + c);
        Real s = 0;
        for (std::size_t j = 0; j < c; ++j) s += out[i * c + j] = std::exp(row[j] - mx);
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= s;
    }
    const Tensor y = out;
    return tape_of(a).record("softmax_rows", std::move(out), {a}, [y, r, c](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        for (std::size_t i = 0; i < r; ++i) {
            const Real dotgy = kernels::dot(c, g.ptr() + i * c, y.ptr() + i * c);
            for (std::size_t j = 0; j < c; ++j) (*gi[0])[i * c + j] += y[i * c + j] * (g[i * c + j] - dotgy);
        }
    });
}

Var weighted_sum(const std::vector<Var>& xs, const Var& weights, const std::vector<std::size_t>& cols) {
    if (xs.empty()) throw ShapeError("weighted_sum: no inputs");
    if (xs.size() != cols.size()) throw ShapeError("weighted_sum: inputs and columns differ in length");
    const Tensor& wv = weights.value();
    Tensor out(xs[0].shape());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        require_same_shape(xs[i].value(), out, "weighted_sum");
        if (cols[i] >= wv.size()) throw ShapeError("weighted_sum: column out of range");
        kernels::axpy(out.size(), wv[cols[i]], xs[i].value().ptr(), out.ptr());
    }
    std::vector<Var> inputs = xs;
    inputs.push_back(weights);
    return tape_of(weights).record("weighted_sum", std::move(out), std::move(inputs),
                                   [xs, weights, cols](const Tensor& g, std::span<Tensor* const> gi) {
                                       const std::size_t m = xs.size();
                                       for (std::size_t i = 0; i < m; ++i) {
                                           if (gi[i]) kernels::axpy(g.size(), weights.value()[cols[i]], g.ptr(), gi[i]->ptr());
                                           if (gi[m])
                                               (*gi[m])[cols[i]] += kernels::dot(g.size(), g.ptr(), xs[i].value().ptr());
                                       }
                                   });
}

Var cross_entropy(const Var& logits, const std::vector<std::size_t>& labels) {
    const Tensor& z = logits.value();
    require_rank(z, 2, "cross_entropy");
    const std::size_t n = z.dim(0), k = z.dim(1);
    if (labels.size() != n) throw ShapeError("cross_entropy: label count mismatch");
    Tensor prob(z.shape());
    Real loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= k) throw ShapeError("cross_entropy: label out of range");
        const Real* row = z.ptr() + i * k;
        const Real mx = *std::max_element(row, row + k);
        Real s = 0;
        for (std::size_t j = 0; j < k; ++j) s += prob[i * k + j] = std::exp(row[j] - mx);
        for (std::size_t j = 0; j < k; ++j) prob[i * k + j] /= s;
        loss += std::log(s) + mx - row[labels[i]];
    }
    loss /= static_cast<Real>(n);
    return tape_of(logits).record("cross_entropy", Tensor::scalar(loss), {logits},
                                  [prob, labels, n, k](const Tensor& g, std::span<Tensor* const> gi) {
                                      if (!gi[0]) return;
                                      const Real s = g[0] / static_cast<Real>(n);
                                      for (std::size_t i = 0; i < n; ++i)
                                          for (std::size_t j = 0; j < k; ++j)
                                              (*gi[0])[i * k + j] +=
                                                  s * (prob[i * k + j] - (j == labels[i] ? Real(1) : Real(0)));
                                  });
}

Var min_rows(const Var& a) {
    const Tensor& av = a.value();
    require_rank(av, 2, "min_rows");
    const std::size_t r = av.dim(0), c = av.dim(1);
    Tensor out(Shape{r});
    std::vector<std::size_t> arg(r);
    for (std::size_t i = 0; i < r; ++i) {
        const Real* row = av.ptr() + i * c;
        arg[i] = static_cast<std::size_t>(std::min_element(row, row + c) - row);
        out[i] = row[arg[i]];
    }
    return tape_of(a).record("min_rows", std::move(out), {a}, [arg, c](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        for (std::size_t i = 0; i < arg.size(); ++i) (*gi[0])[i * c + arg[i]] += g[i];
    });
}

Var softmin_rows(const Var& a, Real temperature) {
    if (temperature <= 0) throw Error("softmin_rows: temperature must be positive");
    const Tensor& av = a.value();
    require_rank(av, 2, "softmin_rows");
    const std::size_t r = av.dim(0), c = av.dim(1);
    Tensor out(Shape{r}), wts(av.shape());
    for (std::size_t i = 0; i < r; ++i) {
        const Real* row = av.ptr() + i * c;
        const Real mn = *std::min_element(row, row + c);
        Real s = 0;
        for (std::size_t j = 0; j < c; ++j) s += wts[i * c + j] = std::exp(-temperature * (row[j] - mn));
        for (std::size_t j = 0; j < c; ++j) wts[i * c + j] /= s;
        out[i] = mn - std::log(s) / temperature;
    }
    return tape_of(a).record("softmin_rows", std::move(out), {a}, [wts, r, c](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) (*gi[0])[i * c + j] += g[i] * wts[i * c + j];
    });
}

Var affine_margin_lower(const Var& center, const std::optional<Var>& radius, Real eps, int dual_q, const Var& w,
                        const std::optional<Var>& b, const std::vector<std::size_t>& labels) {
    const Tensor& cv = center.value();
    const Tensor& wv = w.value();
    require_rank(cv, 2, "affine_margin_lower center");
    require_rank(wv, 2, "affine_margin_lower weight");
    const std::size_t n = cv.dim(0), d = cv.dim(1), k = wv.dim(0);
    if (wv.dim(1) != d) throw ShapeError("affine_margin_lower: weight/feature mismatch");
    if (k < 2) throw ShapeError("affine_margin_lower: need at least two classes");
    if (labels.size() != n) throw ShapeError("affine_margin_lower: label count mismatch");
    if (radius) require_same_shape(radius->value(), cv, "affine_margin_lower radius");
    if (!radius && dual_q != 1 && dual_q != 2) throw Error("affine_margin_lower: dual exponent must be 1 or 2");
    if (b && b->value().size() != k) throw ShapeError("affine_margin_lower: bias shape");

    Tensor out(Shape{n, k - 1});
    std::vector<Real> diff(d);
    auto fill_diff = [&](std::size_t y, std::size_t j) {
        for (std::size_t t = 0; t < d; ++t) diff[t] = wv[y * d + t] - wv[j * d + t];
    };
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t y = labels[i];
        if (y >= k) throw ShapeError("affine_margin_lower: label out of range");
        std::size_t col = 0;
        for (std::size_t j = 0; j < k; ++j) {
            if (j == y) continue;
            fill_diff(y, j);
            Real v = kernels::dot(d, diff.data(), cv.ptr() + i * d);
            if (b) v += b->value()[y] - b->value()[j];
            if (radius) {
                const Real* r = radius->value().ptr() + i * d;
                for (std::size_t t = 0; t < d; ++t) v -= std::abs(diff[t]) * r[t];
            } else if (dual_q == 1) {
                Real s = 0;
                for (auto e : diff) s += std::abs(e);
                v -= eps * s;
            } else {
                v -= eps * l2_norm(diff);
            }
            out[i * (k - 1) + col++] = v;
        }
    }
    std::vector<Var> inputs{center, w};
    const bool has_r = radius.has_value();
    const bool has_b = b.has_value();
    if (has_r) inputs.push_back(*radius);
    if (has_b) inputs.push_back(*b);
    return tape_of(center).record(
        "affine_margin_lower", std::move(out), std::move(inputs),
        [center, w, radius, eps, dual_q, labels, n, d, k, has_r, has_b](const Tensor& g, std::span<Tensor* const> gi) {
            const Tensor& cv = center.value();
            const Tensor& wv = w.value();
            Tensor* gc = gi[0];
            Tensor* gw = gi[1];
            Tensor* gr = has_r ? gi[2] : nullptr;
            Tensor* gb = has_b ? gi[has_r ? 3 : 2] : nullptr;
            std::vector<Real> diff(d), dd(d);
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t y = labels[i];
                std::size_t col = 0;
                for (std::size_t j = 0; j < k; ++j) {
                    if (j == y) continue;
                    const Real gv = g[i * (k - 1) + col++];
                    if (gv == 0) continue;
                    for (std::size_t t = 0; t < d; ++t) diff[t] = wv[y * d + t] - wv[j * d + t];
                    if (gc) kernels::axpy(d, gv, diff.data(), gc->ptr() + i * d);
                    // dd = d(value)/d(diff)
                    for (std::size_t t = 0; t < d; ++t) dd[t] = cv[i * d + t];
                    if (has_r) {
                        const Real* r = radius->value().ptr() + i * d;
                        for (std::size_t t = 0; t < d; ++t) {
                            const Real sgn = diff[t] > 0 ? Real(1) : (diff[t] < 0 ? Real(-1) : Real(0));
                            dd[t] -= sgn * r[t];
                            if (gr) (*gr)[i * d + t] -= gv * std::abs(diff[t]);
                        }
                    } else if (dual_q == 1) {
                        for (std::size_t t = 0; t < d; ++t)
                            dd[t] -= eps * (diff[t] > 0 ? Real(1) : (diff[t] < 0 ? Real(-1) : Real(0)));
                    } else {
                        const Real nrm = l2_norm(diff);
                        if (nrm > 0)
                            for (std::size_t t = 0; t < d; ++t) dd[t] -= eps * diff[t] / nrm;
                    }
                    if (gw) {
                        kernels::axpy(d, gv, dd.data(), gw->ptr() + y * d);
                        kernels::axpy(d, -gv, dd.data(), gw->ptr() + j * d);
                    }
                    if (gb) {
                        (*gb)[y] += gv;
                        (*gb)[j] -= gv;
                    }
                }
            }
        });
}

Var interval_margin(const Var& lower, const Var& upper, const std::vector<std::size_t>& labels) {
    check_same(lower, upper, "interval_margin");
    const Tensor& lv = lower.value();
    require_rank(lv, 2, "interval_margin");
    const std::size_t n = lv.dim(0), k = lv.dim(1);
    if (k < 2) throw ShapeError("interval_margin: need at least two classes");
    if (labels.size() != n) throw ShapeError("interval_margin: label count mismatch");
    Tensor out(Shape{n, k - 1});
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] >= k) throw ShapeError("interval_margin: label out of range");
        std::size_t col = 0;
        for (std::size_t j = 0; j < k; ++j)
            if (j != labels[i]) out[i * (k - 1) + col++] = lv[i * k + labels[i]] - upper.value()[i * k + j];
    }
    return tape_of(lower).record("interval_margin", std::move(out), {lower, upper},
                                 [labels, n, k](const Tensor& g, std::span<Tensor* const> gi) {
                                     for (std::size_t i = 0; i < n; ++i) {
                                         std::size_t col = 0;
                                         for (std::size_t j = 0; j < k; ++j) {
                                             if (j == labels[i]) continue;
                                             const Real gv = g[i * (k - 1) + col++];
                                             if (gi[0]) (*gi[0])[i * k + labels[i]] += gv;
                                             if (gi[1]) (*gi[1])[i * k + j] -= gv;
                                         }
                                     }
                                 });
}

}  // namespace robnas::op
