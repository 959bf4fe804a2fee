#include "attnkit/nn.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

namespace attnkit {

namespace {

using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatrixRM>;
using ConstMapRM = Eigen::Map<const MatrixRM>;

bool wants_grad(const Tensor4& t, Tape* tape) {
    return t.defined() && (t.requires_grad() || (tape && tape->tracks(t)));
}

}  // namespace

// ---- ParamRegistry ----

void ParamRegistry::add(const std::string& name, const Tensor4& t, bool trainable) {
    if (find(name) != nullptr) {
        throw ContractError("registry: duplicate parameter name '" + name + "'");
    }
    entries_.push_back(Entry{name, t, trainable});
}

const ParamRegistry::Entry* ParamRegistry::find(const std::string& name) const {
    for (const auto& e : entries_) {
        if (e.name == name) return &e;
    }
    return nullptr;
}

long long ParamRegistry::trainable_count() const {
    long long n = 0;
    for (const auto& e : entries_) {
        if (e.trainable) n += e.tensor.numel();
    }
    return n;
}

long long ParamRegistry::total_count() const {
    long long n = 0;
    for (const auto& e : entries_) n += e.tensor.numel();
    return n;
}

// ---- layer states ----

Conv2dState Conv2dState::make(int c_out, int c_in, int k, int stride, int padding, bool with_bias,
                              Rng& rng) {
    if (c_out < 1 || c_in < 1 || k < 1 || stride < 1 || padding < 0) {
        throw ConfigError("conv2d: invalid configuration");
    }
    Conv2dState s;
    const Scalar bound = std::sqrt(1.0 / (static_cast<Scalar>(c_in) * k * k));
    s.weight = Tensor4::uniform({c_out, c_in, k, k}, -bound, bound, rng, true);
    if (with_bias) {
        s.bias = Tensor4::uniform({1, c_out, 1, 1}, -bound, bound, rng, true);
    }
    s.stride = stride;
    s.padding = padding;
    return s;
}

Conv2dState Conv2dState::shape_preserving(int c_out, int c_in, int k, Rng& rng) {
    if (k % 2 == 0) {
        throw ConfigError("conv2d: shape-preserving kernels must be odd, got k=" +
                          std::to_string(k));
    }
    return make(c_out, c_in, k, 1, (k - 1) / 2, false, rng);
}

void Conv2dState::register_into(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".weight", weight, true);
    if (bias.defined()) reg.add(prefix + ".bias", bias, true);
}

BatchNorm2dState BatchNorm2dState::make(int channels) {
    if (channels < 1) throw ConfigError("batchnorm2d: channels must be >= 1");
    BatchNorm2dState s;
    s.gamma = Tensor4::constant({1, channels, 1, 1}, 1.0, true);
    s.beta = Tensor4::zeros({1, channels, 1, 1}, true);
    s.running_mean = Tensor4::zeros({1, channels, 1, 1});
    s.running_var = Tensor4::constant({1, channels, 1, 1}, 1.0);
    return s;
}

void BatchNorm2dState::register_into(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".gamma", gamma, true);
    reg.add(prefix + ".beta", beta, true);
    reg.add(prefix + ".running_mean", running_mean, false);
    reg.add(prefix + ".running_var", running_var, false);
}

Mlp2State Mlp2State::make(int channels, int reduction, Rng& rng) {
    if (reduction < 1 || channels % reduction != 0) {
        throw ConfigError("mlp2: reduction " + std::to_string(reduction) +
                          " must divide channel count " + std::to_string(channels));
    }
    const int hidden = channels / reduction;
    Mlp2State s;
    const Scalar b0 = std::sqrt(1.0 / channels);
    const Scalar b1 = std::sqrt(1.0 / hidden);
    s.w0 = Tensor4::uniform({hidden, channels, 1, 1}, -b0, b0, rng, true);
    s.w1 = Tensor4::uniform({channels, hidden, 1, 1}, -b1, b1, rng, true);
    s.reduction = reduction;
    return s;
}

void Mlp2State::register_into(ParamRegistry& reg, const std::string& prefix) const {
    reg.add(prefix + ".w0", w0, true);
    reg.add(prefix + ".w1", w1, true);
}

// ---- conv2d ----

namespace {

struct ConvDims {
    int n, c_in, h, w;
    int c_out, k, stride, pad;
    int h_out, w_out;
};

ConvDims conv_dims(const Shape4& x, const Conv2dState& s) {
    ConvDims d;
    d.n = x.n;
    d.c_in = x.c;
    d.h = x.h;
    d.w = x.w;
    d.c_out = s.out_channels();
    d.k = s.kernel();
    d.stride = s.stride;
    d.pad = s.padding;
    d.h_out = (x.h + 2 * s.padding - d.k) / s.stride + 1;
    d.w_out = (x.w + 2 * s.padding - d.k) / s.stride + 1;
    if (d.h_out < 1 || d.w_out < 1) {
        throw DimensionError("conv2d: kernel does not fit input " + to_string(x));
    }
    return d;
}

// col is (C_in*k*k) x (H_out*W_out), row-major.
void im2col(std::span<const Scalar> x, const ConvDims& d, int batch, MatrixRM& col) {
    const long long base = static_cast<long long>(batch) * d.c_in * d.h * d.w;
    for (int c = 0; c < d.c_in; ++c) {
        for (int ky = 0; ky < d.k; ++ky) {
            for (int kx = 0; kx < d.k; ++kx) {
                const int row = (c * d.k + ky) * d.k + kx;
                int col_idx = 0;
                for (int oy = 0; oy < d.h_out; ++oy) {
                    const int iy = oy * d.stride - d.pad + ky;
                    for (int ox = 0; ox < d.w_out; ++ox, ++col_idx) {
                        const int ix = ox * d.stride - d.pad + kx;
                        Scalar v = 0.0;
                        if (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) {
                            v = x[static_cast<std::size_t>(
                                base + (static_cast<long long>(c) * d.h + iy) * d.w + ix)];
                        }
                        col(row, col_idx) = v;
                    }
                }
            }
        }
    }
}

// Scatters a (C_in*k*k) x (H_out*W_out) gradient back onto the input image.
void col2im_accum(const MatrixRM& dcol, const ConvDims& d, int batch, std::span<Scalar> dx) {
    const long long base = static_cast<long long>(batch) * d.c_in * d.h * d.w;
    for (int c = 0; c < d.c_in; ++c) {
        for (int ky = 0; ky < d.k; ++ky) {
            for (int kx = 0; kx < d.k; ++kx) {
                const int row = (c * d.k + ky) * d.k + kx;
                int col_idx = 0;
                for (int oy = 0; oy < d.h_out; ++oy) {
                    const int iy = oy * d.stride - d.pad + ky;
                    for (int ox = 0; ox < d.w_out; ++ox, ++col_idx) {
                        const int ix = ox * d.stride - d.pad + kx;
                        if (iy >= 0 && iy < d.h && ix >= 0 && ix < d.w) {
                            dx[static_cast<std::size_t>(
                                base + (static_cast<long long>(c) * d.h + iy) * d.w + ix)] +=
                                dcol(row, col_idx);
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor4 conv2d(const Tensor4& x, const Conv2dState& s) {
    if (x.shape().c != s.in_channels()) {
        throw DimensionError("conv2d: input has " + std::to_string(x.shape().c) +
                             " channels, weight expects " + std::to_string(s.in_channels()));
    }
    const ConvDims d = conv_dims(x.shape(), s);
    Tensor4 out = Tensor4::zeros({d.n, d.c_out, d.h_out, d.w_out});

    const int patch = d.c_in * d.k * d.k;
    const int cols = d.h_out * d.w_out;
    ConstMapRM wmat(s.weight.values().data(), d.c_out, patch);
    MatrixRM col(patch, cols);
    auto ov = out.mutable_values();
    for (int n = 0; n < d.n; ++n) {
        im2col(x.values(), d, n, col);
        MapRM out_n(ov.data() + static_cast<long long>(n) * d.c_out * cols, d.c_out, cols);
        out_n.noalias() = wmat * col;
    }
    if (s.has_bias()) {
        auto bv = s.bias.values();
        long long idx = 0;
        for (int n = 0; n < d.n; ++n)
            for (int c = 0; c < d.c_out; ++c)
                for (int i = 0; i < cols; ++i, ++idx)
                    ov[static_cast<std::size_t>(idx)] += bv[static_cast<std::size_t>(c)];
    }

    Tape* tape = Tape::active();
    if (tape && (wants_grad(x, tape) || wants_grad(s.weight, tape) || wants_grad(s.bias, tape))) {
        const int nx = tape->ensure_node(x);
        const int nw = tape->ensure_node(s.weight);
        const int nb = s.has_bias() ? tape->ensure_node(s.bias) : -1;
        Tensor4 x_keep = x, w_keep = s.weight;
        int node = tape->record(
            out.numel(), {nx, nw, nb},
            [nx, nw, nb, d, x_keep, w_keep](Tape& t, std::span<const Scalar> g) {
                const int patch = d.c_in * d.k * d.k;
                const int cols = d.h_out * d.w_out;
                ConstMapRM wmat(w_keep.values().data(), d.c_out, patch);
                MatrixRM col(patch, cols);
                const bool need_col = nw >= 0;
                for (int n = 0; n < d.n; ++n) {
                    ConstMapRM g_n(g.data() + static_cast<long long>(n) * d.c_out * cols,
                                   d.c_out, cols);
                    if (need_col) {
                        im2col(x_keep.values(), d, n, col);
                        MapRM dw(t.grad_accum(nw).data(), d.c_out, patch);
                        dw.noalias() += g_n * col.transpose();
                    }
                    if (nx >= 0) {
                        MatrixRM dcol = wmat.transpose() * g_n;
                        col2im_accum(dcol, d, n, t.grad_accum(nx));
                    }
                    if (nb >= 0) {
                        auto db = t.grad_accum(nb);
                        for (int c = 0; c < d.c_out; ++c) {
                            db[static_cast<std::size_t>(c)] += g_n.row(c).sum();
                        }
                    }
                }
            });
        tape->attach(out, node);
    }
    return out;
}

// ---- batchnorm2d ----

Tensor4 batchnorm2d(const Tensor4& x, BatchNorm2dState& s) {
    const int C = s.channels();
    if (x.shape().c != C) {
        throw DimensionError("batchnorm2d: input has " + std::to_string(x.shape().c) +
                             " channels, state has " + std::to_string(C));
    }
    const Shape4 xs = x.shape();
    const long long plane = static_cast<long long>(xs.h) * xs.w;
    const long long m = static_cast<long long>(xs.n) * plane;
    Tensor4 out = Tensor4::zeros(xs);
    auto xv = x.values();
    auto ov = out.mutable_values();
    Tape* tape = Tape::active();
    const bool track =
        tape && (wants_grad(x, tape) || wants_grad(s.gamma, tape) || wants_grad(s.beta, tape));

    auto channel_offset = [&](int n, int c) {
        return (static_cast<long long>(n) * C + c) * plane;
    };

    if (s.mode == Mode::train) {
        if (m <= 1) {
            throw DimensionError("batchnorm2d: degenerate batch, train mode needs N*H*W > 1");
        }
        std::vector<Scalar> mean(static_cast<std::size_t>(C), 0.0);
        std::vector<Scalar> invstd(static_cast<std::size_t>(C), 0.0);
        auto gv = s.gamma.values();
        auto bv = s.beta.values();
        for (int c = 0; c < C; ++c) {
            Scalar acc = 0.0;
            for (int n = 0; n < xs.n; ++n) {
                const long long off = channel_offset(n, c);
                for (long long i = 0; i < plane; ++i) acc += xv[static_cast<std::size_t>(off + i)];
            }
            const Scalar mu = acc / static_cast<Scalar>(m);
            Scalar var_acc = 0.0;
            for (int n = 0; n < xs.n; ++n) {
                const long long off = channel_offset(n, c);
                for (long long i = 0; i < plane; ++i) {
                    const Scalar diff = xv[static_cast<std::size_t>(off + i)] - mu;
                    var_acc += diff * diff;
                }
            }
            const Scalar var = var_acc / static_cast<Scalar>(m);
            mean[static_cast<std::size_t>(c)] = mu;
            invstd[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var + s.eps);
            for (int n = 0; n < xs.n; ++n) {
                const long long off = channel_offset(n, c);
                for (long long i = 0; i < plane; ++i) {
                    const Scalar xhat = (xv[static_cast<std::size_t>(off + i)] - mu) *
                                        invstd[static_cast<std::size_t>(c)];
                    ov[static_cast<std::size_t>(off + i)] =
                        gv[static_cast<std::size_t>(c)] * xhat + bv[static_cast<std::size_t>(c)];
                }
            }
            // Running stats: EMA with unbiased batch variance.
            auto rm = s.running_mean.mutable_values();
            auto rv = s.running_var.mutable_values();
            const Scalar unbiased = var * static_cast<Scalar>(m) / static_cast<Scalar>(m - 1);
            rm[static_cast<std::size_t>(c)] =
                (1.0 - s.momentum) * rm[static_cast<std::size_t>(c)] + s.momentum * mu;
            rv[static_cast<std::size_t>(c)] =
                (1.0 - s.momentum) * rv[static_cast<std::size_t>(c)] + s.momentum * unbiased;
        }

        if (track) {
            const int nx = tape->ensure_node(x);
            const int ng = tape->ensure_node(s.gamma);
            const int nbeta = tape->ensure_node(s.beta);
            Tensor4 x_keep = x, gamma_keep = s.gamma;
            int node = tape->record(
                out.numel(), {nx, ng, nbeta},
                [nx, ng, nbeta, xs, C, plane, m, mean, invstd, x_keep,
                 gamma_keep](Tape& t, std::span<const Scalar> g) {
                    auto xv = x_keep.values();
                    auto gv = gamma_keep.values();
                    auto channel_offset = [&](int n, int c) {
                        return (static_cast<long long>(n) * C + c) * plane;
                    };
                    for (int c = 0; c < C; ++c) {
                        const Scalar mu = mean[static_cast<std::size_t>(c)];
                        const Scalar is = invstd[static_cast<std::size_t>(c)];
                        Scalar sum_g = 0.0, sum_gx = 0.0;
                        for (int n = 0; n < xs.n; ++n) {
                            const long long off = channel_offset(n, c);
                            for (long long i = 0; i < plane; ++i) {
                                const Scalar gi = g[static_cast<std::size_t>(off + i)];
                                const Scalar xhat =
                                    (xv[static_cast<std::size_t>(off + i)] - mu) * is;
                                sum_g += gi;
                                sum_gx += gi * xhat;
                            }
                        }
                        if (ng >= 0) t.grad_accum(ng)[static_cast<std::size_t>(c)] += sum_gx;
                        if (nbeta >= 0) t.grad_accum(nbeta)[static_cast<std::size_t>(c)] += sum_g;
                        if (nx >= 0) {
                            auto dx = t.grad_accum(nx);
                            const Scalar gam = gv[static_cast<std::size_t>(c)];
                            const Scalar inv_m = 1.0 / static_cast<Scalar>(m);
                            for (int n = 0; n < xs.n; ++n) {
                                const long long off = channel_offset(n, c);
                                for (long long i = 0; i < plane; ++i) {
                                    const Scalar gi = g[static_cast<std::size_t>(off + i)];
                                    const Scalar xhat =
                                        (xv[static_cast<std::size_t>(off + i)] - mu) * is;
                                    dx[static_cast<std::size_t>(off + i)] +=
                                        gam * is * (gi - inv_m * sum_g - xhat * inv_m * sum_gx);
                                }
                            }
                        }
                    }
                });
            tape->attach(out, node);
        }
        return out;
    }

    // Eval: per-channel affine using running statistics.
    auto gv = s.gamma.values();
    auto bv = s.beta.values();
    auto rm = s.running_mean.values();
    auto rv = s.running_var.values();
    std::vector<Scalar> invstd(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
        invstd[static_cast<std::size_t>(c)] =
            1.0 / std::sqrt(rv[static_cast<std::size_t>(c)] + s.eps);
    }
    for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < C; ++c) {
            const long long off = channel_offset(n, c);
            const Scalar a = gv[static_cast<std::size_t>(c)] * invstd[static_cast<std::size_t>(c)];
            const Scalar b = bv[static_cast<std::size_t>(c)] -
                             a * rm[static_cast<std::size_t>(c)];
            for (long long i = 0; i < plane; ++i) {
                ov[static_cast<std::size_t>(off + i)] =
                    a * xv[static_cast<std::size_t>(off + i)] + b;
            }
        }
    }

    if (track) {
        const int nx = tape->ensure_node(x);
        const int ng = tape->ensure_node(s.gamma);
        const int nbeta = tape->ensure_node(s.beta);
        Tensor4 x_keep = x, gamma_keep = s.gamma, rm_keep = s.running_mean;
        int node = tape->record(
            out.numel(), {nx, ng, nbeta},
            [nx, ng, nbeta, xs, C, plane, invstd, x_keep, gamma_keep,
             rm_keep](Tape& t, std::span<const Scalar> g) {
                auto xv = x_keep.values();
                auto gv = gamma_keep.values();
                auto rmv = rm_keep.values();
                auto channel_offset = [&](int n, int c) {
                    return (static_cast<long long>(n) * C + c) * plane;
                };
                for (int c = 0; c < C; ++c) {
                    const Scalar is = invstd[static_cast<std::size_t>(c)];
                    Scalar sum_g = 0.0, sum_gx = 0.0;
                    for (int n = 0; n < xs.n; ++n) {
                        const long long off = channel_offset(n, c);
                        for (long long i = 0; i < plane; ++i) {
                            const Scalar gi = g[static_cast<std::size_t>(off + i)];
                            sum_g += gi;
                            sum_gx += gi * (xv[static_cast<std::size_t>(off + i)] -
                                            rmv[static_cast<std::size_t>(c)]) *
                                      is;
                        }
                    }
                    if (ng >= 0) t.grad_accum(ng)[static_cast<std::size_t>(c)] += sum_gx;
                    if (nbeta >= 0) t.grad_accum(nbeta)[static_cast<std::size_t>(c)] += sum_g;
                    if (nx >= 0) {
                        auto dx = t.grad_accum(nx);
                        const Scalar a = gv[static_cast<std::size_t>(c)] * is;
                        for (int n = 0; n < xs.n; ++n) {
                            const long long off = channel_offset(n, c);
                            for (long long i = 0; i < plane; ++i) {
                                dx[static_cast<std::size_t>(off + i)] +=
                                    a * g[static_cast<std::size_t>(off + i)];
                            }
                        }
                    }
                }
            });
        tape->attach(out, node);
    }
    return out;
}

// ---- poolings ----

Tensor4 gap(const Tensor4& x) {
    const Shape4 xs = x.shape();
    const long long plane = static_cast<long long>(xs.h) * xs.w;
    Tensor4 out = Tensor4::zeros({xs.n, xs.c, 1, 1});
    auto xv = x.values();
    auto ov = out.mutable_values();
    for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < xs.c; ++c) {
            const long long off = (static_cast<long long>(n) * xs.c + c) * plane;
            Scalar acc = 0.0;
            for (long long i = 0; i < plane; ++i) acc += xv[static_cast<std::size_t>(off + i)];
            ov[static_cast<std::size_t>(n) * xs.c + c] = acc / static_cast<Scalar>(plane);
        }
    }
    Tape* tape = Tape::active();
    if (tape && wants_grad(x, tape)) {
        const int nx = tape->ensure_node(x);
        int node = tape->record(out.numel(), {nx}, [nx, xs, plane](Tape& t,
                                                                   std::span<const Scalar> g) {
            if (nx < 0) return;
            auto dx = t.grad_accum(nx);
            const Scalar inv = 1.0 / static_cast<Scalar>(plane);
            for (int n = 0; n < xs.n; ++n)
                for (int c = 0; c < xs.c; ++c) {
                    const long long off = (static_cast<long long>(n) * xs.c + c) * plane;
                    const Scalar gi = g[static_cast<std::size_t>(n) * xs.c + c] * inv;
                    for (long long i = 0; i < plane; ++i)
                        dx[static_cast<std::size_t>(off + i)] += gi;
                }
        });
        tape->attach(out, node);
    }
    return out;
}

Tensor4 gmp(const Tensor4& x) {
    const Shape4 xs = x.shape();
    const long long plane = static_cast<long long>(xs.h) * xs.w;
    Tensor4 out = Tensor4::zeros({xs.n, xs.c, 1, 1});
    std::vector<long long> argmax(static_cast<std::size_t>(xs.n) * xs.c, 0);
    auto xv = x.values();
    auto ov = out.mutable_values();
    for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < xs.c; ++c) {
            const long long off = (static_cast<long long>(n) * xs.c + c) * plane;
            Scalar best = xv[static_cast<std::size_t>(off)];
            long long best_i = off;
            for (long long i = 1; i < plane; ++i) {
                const Scalar v = xv[static_cast<std::size_t>(off + i)];
                if (v > best) {  // strict: first argmax wins in row-major order
                    best = v;
                    best_i = off + i;
                }
            }
            ov[static_cast<std::size_t>(n) * xs.c + c] = best;
            argmax[static_cast<std::size_t>(n) * xs.c + c] = best_i;
        }
    }
    Tape* tape = Tape::active();
    if (tape && wants_grad(x, tape)) {
        const int nx = tape->ensure_node(x);
        int node = tape->record(out.numel(), {nx},
                                [nx, argmax](Tape& t, std::span<const Scalar> g) {
                                    if (nx < 0) return;
                                    auto dx = t.grad_accum(nx);
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                        dx[static_cast<std::size_t>(argmax[i])] += g[i];
                                });
        tape->attach(out, node);
    }
    return out;
}

Tensor4 zpool(const Tensor4& x) {
    const Shape4 xs = x.shape();
    const long long plane = static_cast<long long>(xs.h) * xs.w;
    Tensor4 out = Tensor4::zeros({xs.n, 2, xs.h, xs.w});
    std::vector<int> argmax(static_cast<std::size_t>(xs.n) * plane, 0);
    auto xv = x.values();
    auto ov = out.mutable_values();
    for (int n = 0; n < xs.n; ++n) {
        const long long in_base = static_cast<long long>(n) * xs.c * plane;
        const long long out_base = static_cast<long long>(n) * 2 * plane;
        for (long long i = 0; i < plane; ++i) {
            Scalar best = xv[static_cast<std::size_t>(in_base + i)];
            int best_c = 0;
            Scalar acc = best;
            for (int c = 1; c < xs.c; ++c) {
                const Scalar v = xv[static_cast<std::size_t>(in_base + c * plane + i)];
                acc += v;
                if (v > best) {
                    best = v;
                    best_c = c;
                }
            }
            ov[static_cast<std::size_t>(out_base + i)] = best;
            ov[static_cast<std::size_t>(out_base + plane + i)] = acc / static_cast<Scalar>(xs.c);
            argmax[static_cast<std::size_t>(n) * plane + i] = best_c;
        }
    }
    Tape* tape = Tape::active();
    if (tape && wants_grad(x, tape)) {
        const int nx = tape->ensure_node(x);
        int node = tape->record(
            out.numel(), {nx}, [nx, xs, plane, argmax](Tape& t, std::span<const Scalar> g) {
                if (nx < 0) return;
                auto dx = t.grad_accum(nx);
                const Scalar inv_c = 1.0 / static_cast<Scalar>(xs.c);
                for (int n = 0; n < xs.n; ++n) {
                    const long long in_base = static_cast<long long>(n) * xs.c * plane;
                    const long long out_base = static_cast<long long>(n) * 2 * plane;
                    for (long long i = 0; i < plane; ++i) {
                        const int mc = argmax[static_cast<std::size_t>(n) * plane + i];
                        dx[static_cast<std::size_t>(in_base + mc * plane + i)] +=
                            g[static_cast<std::size_t>(out_base + i)];
                        const Scalar gm =
                            g[static_cast<std::size_t>(out_base + plane + i)] * inv_c;
                        for (int c = 0; c < xs.c; ++c)
                            dx[static_cast<std::size_t>(in_base + c * plane + i)] += gm;
                    }
                }
            });
        tape->attach(out, node);
    }
    return out;
}

Tensor4 maxpool2d(const Tensor4& x, int k, int stride, int padding) {
    if (k < 1 || stride < 1 || padding < 0) {
        throw ConfigError("maxpool2d: invalid configuration");
    }
    const Shape4 xs = x.shape();
    const int h_out = (xs.h + 2 * padding - k) / stride + 1;
    const int w_out = (xs.w + 2 * padding - k) / stride + 1;
    if (h_out < 1 || w_out < 1) {
        throw DimensionError("maxpool2d: window does not fit input " + to_string(xs));
    }
    Tensor4 out = Tensor4::zeros({xs.n, xs.c, h_out, w_out});
    std::vector<long long> argmax(static_cast<std::size_t>(out.numel()), 0);
    auto xv = x.values();
    auto ov = out.mutable_values();
    long long oidx = 0;
    for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < xs.c; ++c) {
            const long long base = (static_cast<long long>(n) * xs.c + c) *
                                   static_cast<long long>(xs.h) * xs.w;
            for (int oy = 0; oy < h_out; ++oy) {
                for (int ox = 0; ox < w_out; ++ox, ++oidx) {
                    Scalar best = -std::numeric_limits<Scalar>::infinity();
                    long long best_i = -1;
                    for (int ky = 0; ky < k; ++ky) {
                        const int iy = oy * stride - padding + ky;
                        if (iy < 0 || iy >= xs.h) continue;
                        for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * stride - padding + kx;
                            if (ix < 0 || ix >= xs.w) continue;
                            const long long idx = base + static_cast<long long>(iy) * xs.w + ix;
                            const Scalar v = xv[static_cast<std::size_t>(idx)];
                            if (v > best) {
                                best = v;
                                best_i = idx;
                            }
                        }
                    }
                    ov[static_cast<std::size_t>(oidx)] = best;
                    argmax[static_cast<std::size_t>(oidx)] = best_i;
                }
            }
        }
    }
    Tape* tape = Tape::active();
    if (tape && wants_grad(x, tape)) {
        const int nx = tape->ensure_node(x);
        int node = tape->record(out.numel(), {nx},
                                [nx, argmax](Tape& t, std::span<const Scalar> g) {
                                    if (nx < 0) return;
                                    auto dx = t.grad_accum(nx);
                                    for (std::size_t i = 0; i < g.size(); ++i) {
                                        if (argmax[i] >= 0)
                                            dx[static_cast<std::size_t>(argmax[i])] += g[i];
                                    }
                                });
        tape->attach(out, node);
    }
    return out;
}

// ---- activations ----

Tensor4 sigmoid(const Tensor4& x) {
    Tensor4 out = Tensor4::zeros(x.shape());
    auto xv = x.values();
    auto ov = out.mutable_values();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        // Stable form: never exponentiates a large positive argument.
        if (xv[i] >= 0.0) {
            ov[i] = 1.0 / (1.0 + std::exp(-xv[i]));
        } else {
            const Scalar e = std::exp(xv[i]);
            ov[i] = e / (1.0 + e);
        }
    }

    Tape* tape = Tape::active();
    if (tape && wants_grad(x, tape)) {
        const int nx = tape->ensure_node(x);
        Tensor4 y_keep = out;
        int node =
            tape->record(out.numel(), {nx}, [nx, y_keep](Tape& t, std::span<const Scalar> g) {
                if (nx < 0) return;
                auto dx = t.grad_accum(nx);
                auto yv = y_keep.values();
                for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * yv[i] * (1.0 - yv[i]);
            });
        tape->attach(out, node);
    }
    return out;
}

Tensor4 relu(const Tensor4& x) {
    Tensor4 out = Tensor4::zeros(x.shape());
    auto xv = x.values();
    auto ov = out.mutable_values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;

    Tape* tape = Tape::active();
    if (tape && wants_grad(x, tape)) {
        const int nx = tape->ensure_node(x);
        Tensor4 x_keep = x;
        int node =
            tape->record(out.numel(), {nx}, [nx, x_keep](Tape& t, std::span<const Scalar> g) {
                if (nx < 0) return;
                auto dx = t.grad_accum(nx);
                auto xv = x_keep.values();
                // Subgradient at 0 is taken as 0.
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (xv[i] > 0.0) dx[i] += g[i];
            });
        tape->attach(out, node);
    }
    return out;
}

// ---- mlp2 ----

Tensor4 mlp2(const Tensor4& v, const Mlp2State& s) {
    const Shape4 vs = v.shape();
    if (vs.h != 1 || vs.w != 1) {
        throw DimensionError("mlp2: input must be (N,C,1,1), got " + to_string(vs));
    }
    if (vs.c != s.channels()) {
        throw DimensionError("mlp2: input has " + std::to_string(vs.c) +
                             " channels, state has " + std::to_string(s.channels()));
    }
    // Both stages are 1x1 convolutions over a 1x1 map, i.e. plain matrix
    // products; this reuses conv2d's forward and backward.
    Conv2dState stage0{s.w0, Tensor4(), 1, 0};
    Conv2dState stage1{s.w1, Tensor4(), 1, 0};
    return conv2d(relu(conv2d(v, stage0)), stage1);
}

// ---- cross entropy ----

Tensor4 cross_entropy_mean(const Tensor4& logits, const std::vector<int>& labels) {
    const Shape4 ls = logits.shape();
    if (ls.h != 1 || ls.w != 1) {
        throw DimensionError("cross_entropy: logits must be (N,K,1,1), got " + to_string(ls));
    }
    if (static_cast<int>(labels.size()) != ls.n) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) +
                             " labels for batch of " + std::to_string(ls.n));
    }
    const int N = ls.n, K = ls.c;
    for (int lab : labels) {
        if (lab < 0 || lab >= K) {
            throw ContractError("cross_entropy: label " + std::to_string(lab) +
                                " out of range [0," + std::to_string(K) + ")");
        }
    }
    auto lv = logits.values();
    std::vector<Scalar> softmax(static_cast<std::size_t>(N) * K);
    Scalar loss = 0.0;
    for (int n = 0; n < N; ++n) {
        const long long off = static_cast<long long>(n) * K;
        Scalar mx = lv[static_cast<std::size_t>(off)];
        for (int k = 1; k < K; ++k)
            mx = std::max(mx, lv[static_cast<std::size_t>(off + k)]);
        Scalar denom = 0.0;
        for (int k = 0; k < K; ++k)
            denom += std::exp(lv[static_cast<std::size_t>(off + k)] - mx);
        const Scalar lse = mx + std::log(denom);
        for (int k = 0; k < K; ++k)
            softmax[static_cast<std::size_t>(off + k)] =
                std::exp(lv[static_cast<std::size_t>(off + k)] - lse);
        loss += lse - lv[static_cast<std::size_t>(off + labels[static_cast<std::size_t>(n)])];
    }
    loss /= static_cast<Scalar>(N);
    Tensor4 out = Tensor4::from_values({1, 1, 1, 1}, {loss});

    Tape* tape = Tape::active();
    if (tape && wants_grad(logits, tape)) {
        const int nl = tape->ensure_node(logits);
        std::vector<int> labels_copy = labels;
        int node = tape->record(
            1, {nl}, [nl, N, K, softmax, labels_copy](Tape& t, std::span<const Scalar> g) {
                if (nl < 0) return;
                auto dl = t.grad_accum(nl);
                const Scalar gscale = g[0] / static_cast<Scalar>(N);
                for (int n = 0; n < N; ++n) {
                    const long long off = static_cast<long long>(n) * K;
                    for (int k = 0; k < K; ++k) {
                        Scalar v = softmax[static_cast<std::size_t>(off + k)];
                        if (k == labels_copy[static_cast<std::size_t>(n)]) v -= 1.0;
                        dl[static_cast<std::size_t>(off + k)] += gscale * v;
                    }
                }
            });
        tape->attach(out, node);
    }
    return out;
}

}  // namespace attnkit
