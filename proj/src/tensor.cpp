#include "attnkit/tensor.hpp"

#include <atomic>
#include <sstream>
#include <utility>

namespace attnkit {

namespace {

thread_local Tape* g_active_tape = nullptr;

std::uint64_t next_tape_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
}

void check_shape(const Shape4& s) {
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) {
        throw DimensionError("tensor shape entries must be >= 1, got " + to_string(s));
    }
}

std::shared_ptr<detail::TensorStorage> make_storage(Shape4 shape, bool requires_grad) {
    check_shape(shape);
    auto s = std::make_shared<detail::TensorStorage>();
    s->shape = shape;
    s->value.resize(static_cast<std::size_t>(shape.numel()), 0.0);
    s->requires_grad = requires_grad;
    if (requires_grad) {
        s->grad.resize(s->value.size(), 0.0);
    }
    return s;
}

bool broadcastable(const Shape4& a, const Shape4& b) {
    for (int axis = 0; axis < 4; ++axis) {
        if (b[axis] != a[axis] && b[axis] != 1) return false;
    }
    return true;
}

// Flat index into b for position (in,ic,ih,iw) of a, with size-1 axes of b
// pinned at 0.
long long broadcast_index(const Shape4& b, int in, int ic, int ih, int iw) {
    return b.index(b.n == 1 ? 0 : in, b.c == 1 ? 0 : ic, b.h == 1 ? 0 : ih,
                   b.w == 1 ? 0 : iw);
}

}  // namespace

std::string to_string(const Shape4& s) {
    std::ostringstream os;
    os << "(" << s.n << "," << s.c << "," << s.h << "," << s.w << ")";
    return os.str();
}

// ---- Tensor4 ----

Tensor4 Tensor4::zeros(Shape4 shape, bool requires_grad) {
    return Tensor4(make_storage(shape, requires_grad));
}

Tensor4 Tensor4::constant(Shape4 shape, Scalar value, bool requires_grad) {
    auto s = make_storage(shape, requires_grad);
    std::fill(s->value.begin(), s->value.end(), value);
    return Tensor4(std::move(s));
}

Tensor4 Tensor4::uniform(Shape4 shape, Scalar lo, Scalar hi, std::uint64_t seed,
                         bool requires_grad) {
    Rng rng(seed);
    return uniform(shape, lo, hi, rng, requires_grad);
}

Tensor4 Tensor4::uniform(Shape4 shape, Scalar lo, Scalar hi, Rng& rng, bool requires_grad) {
    auto s = make_storage(shape, requires_grad);
    for (auto& v : s->value) v = rng.uniform(lo, hi);
    return Tensor4(std::move(s));
}

Tensor4 Tensor4::from_values(Shape4 shape, std::vector<Scalar> values, bool requires_grad) {
    check_shape(shape);
    if (static_cast<long long>(values.size()) != shape.numel()) {
        throw DimensionError("value count " + std::to_string(values.size()) +
                             " does not match shape " + to_string(shape));
    }
    auto s = std::make_shared<detail::TensorStorage>();
    s->shape = shape;
    s->value = std::move(values);
    s->requires_grad = requires_grad;
    if (requires_grad) s->grad.resize(s->value.size(), 0.0);
    return Tensor4(std::move(s));
}

void Tensor4::zero_grad() {
    if (s_ && !s_->grad.empty()) {
        std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
    }
}

Scalar Tensor4::scalar_value() const {
    if (numel() != 1) {
        throw ContractError("scalar_value() on tensor of shape " + to_string(shape()));
    }
    return s_->value[0];
}

// ---- Tape ----

Tape::Tape() : id_(next_tape_id()) {}

Tape::~Tape() = default;

Tape* Tape::active() { return g_active_tape; }

bool Tape::tracks(const Tensor4& t) const {
    return t.s_ && t.s_->tape_id == id_ && t.s_->node >= 0;
}

int Tape::node_of(const Tensor4& t) const {
    return tracks(t) ? t.s_->node : -1;
}

int Tape::ensure_node(const Tensor4& t) {
    if (!t.s_) return -1;
    if (t.s_->tape_id == id_ && t.s_->node >= 0) return t.s_->node;
    if (!t.s_->requires_grad) return -1;
    // Leaf: its backward rule drains the accumulated node gradient into the
    // tensor's own grad buffer.
    auto storage = t.s_;
    int node = record(t.numel(), {}, [storage](Tape& tape, std::span<const Scalar> g) {
        (void)tape;
        for (std::size_t i = 0; i < g.size(); ++i) storage->grad[i] += g[i];
    });
    storage->tape_id = id_;
    storage->node = node;
    return node;
}

int Tape::record(long long out_size, std::vector<int> inputs, BackwardFn fn) {
    Node node;
    node.inputs = std::move(inputs);
    node.backward = std::move(fn);
    node.size = out_size;
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
}

void Tape::attach(Tensor4& out, int node) {
    out.s_->tape_id = id_;
    out.s_->node = node;
}

std::span<Scalar> Tape::grad_accum(int node) {
    auto& buf = grads_[static_cast<std::size_t>(node)];
    if (buf.empty()) {
        buf.resize(static_cast<std::size_t>(nodes_[static_cast<std::size_t>(node)].size), 0.0);
    }
    return buf;
}

std::span<const Scalar> Tape::grad_of_node(int node) const {
    if (node < 0 || node >= static_cast<int>(grads_.size())) return {};
    return grads_[static_cast<std::size_t>(node)];
}

std::span<const Scalar> Tape::grad_of(const Tensor4& t) const {
    if (!tracks(t)) {
        throw ContractError("grad_of: tensor is not on this tape");
    }
    return grad_of_node(t.s_->node);
}

void Tape::backward(const Tensor4& root) {
    if (!tracks(root)) {
        throw ContractError("backward: root is not on this tape");
    }
    if (root.numel() != 1) {
        throw ContractError("backward: root must have shape (1,1,1,1), got " +
                            to_string(root.shape()));
    }
    grads_.assign(nodes_.size(), {});
    std::vector<char> reached(nodes_.size(), 0);

    const int root_node = root.s_->node;
    grad_accum(root_node)[0] = 1.0;
    reached[static_cast<std::size_t>(root_node)] = 1;

    for (int i = root_node; i >= 0; --i) {
        if (!reached[static_cast<std::size_t>(i)]) continue;
        auto& node = nodes_[static_cast<std::size_t>(i)];
        for (int in : node.inputs) {
            if (in >= 0) reached[static_cast<std::size_t>(in)] = 1;
        }
        if (node.backward) {
            node.backward(*this, grad_accum(i));
        }
    }
}

void backward(const Tensor4& root, Tape& tape) { tape.backward(root); }

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = prev_; }

// ---- op kernels ----

namespace {

// Reduce-adds g (shaped like `out`) into the grad buffer of an input with
// shape `in_shape` that was broadcast to `out`.
void accumulate_broadcast(std::span<const Scalar> g, const Shape4& out,
                          const Shape4& in_shape, std::span<Scalar> dst) {
    if (in_shape == out) {
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        return;
    }
    long long idx = 0;
    for (int in = 0; in < out.n; ++in)
        for (int ic = 0; ic < out.c; ++ic)
            for (int ih = 0; ih < out.h; ++ih)
                for (int iw = 0; iw < out.w; ++iw, ++idx)
                    dst[static_cast<std::size_t>(broadcast_index(in_shape, in, ic, ih, iw))] +=
                        g[static_cast<std::size_t>(idx)];
}

enum class BinaryOp { Add, Mul };

Tensor4 binary_broadcast(const Tensor4& a, const Tensor4& b, BinaryOp op, const char* name) {
    if (!broadcastable(a.shape(), b.shape())) {
        throw DimensionError(std::string(name) + ": shape " + to_string(b.shape()) +
                             " is not broadcastable to " + to_string(a.shape()));
    }
    const Shape4 out_shape = a.shape();
    Tensor4 out = Tensor4::zeros(out_shape);
    auto av = a.values();
    auto bv = b.values();
    auto ov = out.mutable_values();
    const bool same = a.shape() == b.shape();
    if (same) {
        if (op == BinaryOp::Add) {
            for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
        } else {
            for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
        }
    } else {
        const Shape4 bs = b.shape();
        long long idx = 0;
        for (int in = 0; in < out_shape.n; ++in)
            for (int ic = 0; ic < out_shape.c; ++ic)
                for (int ih = 0; ih < out_shape.h; ++ih)
                    for (int iw = 0; iw < out_shape.w; ++iw, ++idx) {
                        const Scalar bval =
                            bv[static_cast<std::size_t>(broadcast_index(bs, in, ic, ih, iw))];
                        ov[static_cast<std::size_t>(idx)] =
                            op == BinaryOp::Add ? av[static_cast<std::size_t>(idx)] + bval
                                                : av[static_cast<std::size_t>(idx)] * bval;
                    }
    }

    Tape* tape = Tape::active();
    if (tape && (a.requires_grad() || b.requires_grad() || tape->tracks(a) || tape->tracks(b))) {
        const int na = tape->ensure_node(a);
        const int nb = tape->ensure_node(b);
        const Shape4 bs = b.shape();
        Tape::BackwardFn fn;
        if (op == BinaryOp::Add) {
            fn = [na, nb, out_shape, bs](Tape& t, std::span<const Scalar> g) {
                if (na >= 0) {
                    auto da = t.grad_accum(na);
                    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                }
                if (nb >= 0) accumulate_broadcast(g, out_shape, bs, t.grad_accum(nb));
            };
        } else {
            // Keep the operand buffers alive for the backward pass.
            Tensor4 a_keep = a, b_keep = b;
            fn = [na, nb, out_shape, bs, a_keep, b_keep](Tape& t, std::span<const Scalar> g) {
                auto sa = a_keep.values();
                auto sb = b_keep.values();
                if (na >= 0) {
                    auto da = t.grad_accum(na);
                    long long idx = 0;
                    for (int in = 0; in < out_shape.n; ++in)
                        for (int ic = 0; ic < out_shape.c; ++ic)
                            for (int ih = 0; ih < out_shape.h; ++ih)
                                for (int iw = 0; iw < out_shape.w; ++iw, ++idx)
                                    da[static_cast<std::size_t>(idx)] +=
                                        g[static_cast<std::size_t>(idx)] *
                                        sb[static_cast<std::size_t>(
                                            broadcast_index(bs, in, ic, ih, iw))];
                }
                if (nb >= 0) {
                    auto db = t.grad_accum(nb);
                    long long idx = 0;
                    for (int in = 0; in < out_shape.n; ++in)
                        for (int ic = 0; ic < out_shape.c; ++ic)
                            for (int ih = 0; ih < out_shape.h; ++ih)
                                for (int iw = 0; iw < out_shape.w; ++iw, ++idx)
                                    db[static_cast<std::size_t>(
                                        broadcast_index(bs, in, ic, ih, iw))] +=
                                        g[static_cast<std::size_t>(idx)] *
                                        sa[static_cast<std::size_t>(idx)];
                }
            };
        }
        tape->attach(out, tape->record(out.numel(), {na, nb}, std::move(fn)));
    }
    return out;
}

}  // namespace

Tensor4 add(const Tensor4& a, const Tensor4& b) {
    return binary_broadcast(a, b, BinaryOp::Add, "add");
}

Tensor4 mul(const Tensor4& a, const Tensor4& b) {
    if (!(a.shape() == b.shape())) {
        throw DimensionError("mul: shapes differ, " + to_string(a.shape()) + " vs " +
                             to_string(b.shape()) + " (use broadcast_mul)");
    }
    return binary_broadcast(a, b, BinaryOp::Mul, "mul");
}

Tensor4 broadcast_mul(const Tensor4& a, const Tensor4& b) {
    return binary_broadcast(a, b, BinaryOp::Mul, "broadcast_mul");
}

Tensor4 scale(const Tensor4& a, Scalar factor) {
    Tensor4 out = Tensor4::zeros(a.shape());
    auto av = a.values();
    auto ov = out.mutable_values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = factor * av[i];

    Tape* tape = Tape::active();
    if (tape && (a.requires_grad() || tape->tracks(a))) {
        const int na = tape->ensure_node(a);
        int node = tape->record(out.numel(), {na}, [na, factor](Tape& t, std::span<const Scalar> g) {
            if (na < 0) return;
            auto da = t.grad_accum(na);
            for (std::size_t i = 0; i < g.size(); ++i) da[i] += factor * g[i];
        });
        tape->attach(out, node);
    }
    return out;
}

AxesPerm inverse_perm(const AxesPerm& perm) {
    AxesPerm inv{};
    for (int i = 0; i < 3; ++i) inv[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)] - 1)] = i + 1;
    return inv;
}

namespace {

void validate_perm(const AxesPerm& perm) {
    bool seen[4] = {false, false, false, false};
    for (int p : perm) {
        if (p < 1 || p > 3 || seen[p]) {
            throw ContractError("permute: axes must be a permutation of {1,2,3}");
        }
        seen[p] = true;
    }
}

// out[n, i1, i2, i3] = in[n, j1, j2, j3] with j_{perm[a]} = i_{a+1}.
void permute_values(std::span<const Scalar> src, const Shape4& in_shape, const AxesPerm& perm,
                    std::span<Scalar> dst, const Shape4& out_shape) {
    long long idx = 0;
    int j[4] = {0, 0, 0, 0};
    for (int in = 0; in < out_shape.n; ++in)
        for (int i1 = 0; i1 < out_shape.c; ++i1)
            for (int i2 = 0; i2 < out_shape.h; ++i2)
                for (int i3 = 0; i3 < out_shape.w; ++i3, ++idx) {
                    j[perm[0]] = i1;
                    j[perm[1]] = i2;
                    j[perm[2]] = i3;
                    dst[static_cast<std::size_t>(idx)] =
                        src[static_cast<std::size_t>(in_shape.index(in, j[1], j[2], j[3]))];
                }
}

}  // namespace

Tensor4 permute(const Tensor4& x, const AxesPerm& perm) {
    validate_perm(perm);
    const Shape4 in_shape = x.shape();
    Shape4 out_shape = in_shape;
    for (int a = 0; a < 3; ++a) out_shape[a + 1] = in_shape[perm[static_cast<std::size_t>(a)]];

    Tensor4 out = Tensor4::zeros(out_shape);
    permute_values(x.values(), in_shape, perm, out.mutable_values(), out_shape);

    Tape* tape = Tape::active();
    if (tape && (x.requires_grad() || tape->tracks(x))) {
        const int nx = tape->ensure_node(x);
        const AxesPerm inv = inverse_perm(perm);
        int node = tape->record(
            out.numel(), {nx}, [nx, inv, out_shape, in_shape](Tape& t, std::span<const Scalar> g) {
                if (nx < 0) return;
                // Gradient flows through the inverse permutation.
                std::vector<Scalar> tmp(g.size());
                permute_values(g, out_shape, inv, tmp, in_shape);
                auto dx = t.grad_accum(nx);
                for (std::size_t i = 0; i < tmp.size(); ++i) dx[i] += tmp[i];
            });
        tape->attach(out, node);
    }
    return out;
}

namespace {

void flip_values(std::span<const Scalar> src, const Shape4& s, int axis, std::span<Scalar> dst) {
    long long idx = 0;
    for (int in = 0; in < s.n; ++in)
        for (int ic = 0; ic < s.c; ++ic)
            for (int ih = 0; ih < s.h; ++ih)
                for (int iw = 0; iw < s.w; ++iw, ++idx) {
                    int j[4] = {in, ic, ih, iw};
                    j[axis] = s[axis] - 1 - j[axis];
                    dst[static_cast<std::size_t>(idx)] =
                        src[static_cast<std::size_t>(s.index(j[0], j[1], j[2], j[3]))];
                }
}

}  // namespace

Tensor4 flip(const Tensor4& x, int axis) {
    if (axis < 1 || axis > 3) {
        throw ContractError("flip: axis must be 1, 2, or 3");
    }
    Tensor4 out = Tensor4::zeros(x.shape());
    flip_values(x.values(), x.shape(), axis, out.mutable_values());

    Tape* tape = Tape::active();
    if (tape && (x.requires_grad() || tape->tracks(x))) {
        const int nx = tape->ensure_node(x);
        const Shape4 s = x.shape();
        int node =
            tape->record(out.numel(), {nx}, [nx, s, axis](Tape& t, std::span<const Scalar> g) {
                if (nx < 0) return;
                std::vector<Scalar> tmp(g.size());
                flip_values(g, s, axis, tmp);
                auto dx = t.grad_accum(nx);
                for (std::size_t i = 0; i < tmp.size(); ++i) dx[i] += tmp[i];
            });
        tape->attach(out, node);
    }
    return out;
}

Tensor4 sum(const Tensor4& x) {
    Scalar total = 0.0;
    for (Scalar v : x.values()) total += v;
    Tensor4 out = Tensor4::from_values({1, 1, 1, 1}, {total});

    Tape* tape = Tape::active();
    if (tape && (x.requires_grad() || tape->tracks(x))) {
        const int nx = tape->ensure_node(x);
        const long long n = x.numel();
        int node = tape->record(1, {nx}, [nx, n](Tape& t, std::span<const Scalar> g) {
            if (nx < 0) return;
            auto dx = t.grad_accum(nx);
            for (long long i = 0; i < n; ++i) dx[static_cast<std::size_t>(i)] += g[0];
        });
        tape->attach(out, node);
    }
    return out;
}

Tensor4 pick(const Tensor4& x, int n, int c, int h, int w) {
    const Shape4& s = x.shape();
    if (n < 0 || n >= s.n || c < 0 || c >= s.c || h < 0 || h >= s.h || w < 0 || w >= s.w) {
        throw ContractError("pick: index out of range for shape " + to_string(s));
    }
    const long long flat = s.index(n, c, h, w);
    Tensor4 out = Tensor4::from_values({1, 1, 1, 1}, {x.values()[static_cast<std::size_t>(flat)]});

    Tape* tape = Tape::active();
    if (tape && (x.requires_grad() || tape->tracks(x))) {
        const int nx = tape->ensure_node(x);
        int node = tape->record(1, {nx}, [nx, flat](Tape& t, std::span<const Scalar> g) {
            if (nx < 0) return;
            t.grad_accum(nx)[static_cast<std::size_t>(flat)] += g[0];
        });
        tape->attach(out, node);
    }
    return out;
}

}  // namespace attnkit
