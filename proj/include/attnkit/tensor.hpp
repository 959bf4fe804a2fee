#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "attnkit/errors.hpp"
#include "attnkit/rng.hpp"

namespace attnkit {

using Scalar = double;

// Dense (N, C, H, W) shape, row-major with W fastest.
struct Shape4 {
    int n = 0, c = 0, h = 0, w = 0;

    long long numel() const {
        return static_cast<long long>(n) * c * h * w;
    }
    long long index(int in, int ic, int ih, int iw) const {
        return ((static_cast<long long>(in) * c + ic) * h + ih) * w + iw;
    }
    int operator[](int axis) const {
        switch (axis) {
            case 0: return n;
            case 1: return c;
            case 2: return h;
            default: return w;
        }
    }
    int& operator[](int axis) {
        switch (axis) {
            case 0: return n;
            case 1: return c;
            case 2: return h;
            default: return w;
        }
    }
    bool operator==(const Shape4&) const = default;
};

std::string to_string(const Shape4& s);

class Tape;

namespace detail {

struct TensorStorage {
    Shape4 shape;
    std::vector<Scalar> value;
    std::vector<Scalar> grad;  // same length as value iff requires_grad
    bool requires_grad = false;

    // Autodiff linkage: node handle valid only for the tape whose id matches.
    std::uint64_t tape_id = 0;
    int node = -1;
};

}  // namespace detail

// Value-semantic handle to a dense rank-4 tensor of 64-bit floats. Copies
// share the underlying buffer; tensors are treated as immutable once built,
// except for gradient accumulation during backward and parameter updates
// applied between passes through mutable_values().
class Tensor4 {
public:
    Tensor4() = default;

    static Tensor4 zeros(Shape4 shape, bool requires_grad = false);
    static Tensor4 constant(Shape4 shape, Scalar value, bool requires_grad = false);
    // Reproducible: the same 64-bit seed always yields the same bits.
    static Tensor4 uniform(Shape4 shape, Scalar lo, Scalar hi, std::uint64_t seed,
                           bool requires_grad = false);
    static Tensor4 uniform(Shape4 shape, Scalar lo, Scalar hi, Rng& rng,
                           bool requires_grad = false);
    static Tensor4 from_values(Shape4 shape, std::vector<Scalar> values,
                               bool requires_grad = false);

    bool defined() const { return static_cast<bool>(s_); }
    Shape4 shape() const { return s_->shape; }
    long long numel() const { return s_->shape.numel(); }
    bool requires_grad() const { return s_ && s_->requires_grad; }

    // Spans alias the underlying buffer, so they are only obtainable from
    // lvalues; a span into a temporary tensor would dangle.
    std::span<const Scalar> values() const& { return s_->value; }
    std::span<const Scalar> values() const&& = delete;
    // Single-writer escape hatch for optimizers and finite-difference
    // probes; never call while a tape referencing this tensor is live.
    std::span<Scalar> mutable_values() & { return s_->value; }
    std::span<Scalar> mutable_values() && = delete;

    std::span<const Scalar> grad() const& { return s_->grad; }
    std::span<const Scalar> grad() const&& = delete;
    void zero_grad();

    Scalar at(int in, int ic, int ih, int iw) const {
        return s_->value[static_cast<std::size_t>(s_->shape.index(in, ic, ih, iw))];
    }
    Scalar scalar_value() const;

private:
    explicit Tensor4(std::shared_ptr<detail::TensorStorage> s) : s_(std::move(s)) {}
    std::shared_ptr<detail::TensorStorage> s_;

    friend class Tape;
};

// Wengert-list reverse-mode tape. Operations append nodes in execution
// order; backward replays them in strict reverse order. One tape per
// worker; tensors attach lazily on first tracked use.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Thread-local active tape, or nullptr when recording is off.
    static Tape* active();

    // Accumulates d(root)/dX into the grad of every requires_grad tensor on
    // this tape and keeps per-node gradients queryable via grad_of().
    void backward(const Tensor4& root);

    bool tracks(const Tensor4& t) const;
    int node_of(const Tensor4& t) const;  // -1 when not on this tape
    std::span<const Scalar> grad_of(const Tensor4& t) const;
    std::span<const Scalar> grad_of_node(int node) const;

    // --- raw recording interface (op kernels and custom ops) ---
    using BackwardFn = std::function<void(Tape&, std::span<const Scalar>)>;

    // Registers t as a leaf if it requires grad; returns its node or -1.
    int ensure_node(const Tensor4& t);
    int record(long long out_size, std::vector<int> inputs, BackwardFn fn);
    void attach(Tensor4& out, int node);
    // Zero-initialized gradient buffer of a node, for use inside BackwardFn.
    std::span<Scalar> grad_accum(int node);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        std::vector<int> inputs;
        BackwardFn backward;
        long long size = 0;
    };

    std::uint64_t id_;
    std::vector<Node> nodes_;
    std::vector<std::vector<Scalar>> grads_;
};

// RAII activation of a tape on the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

// ---- differentiable tensor operations ----
//
// Every op records itself on the active tape when at least one operand is
// gradient-tracked; with no active tape they are plain numeric kernels.

// b must be broadcastable to a: every axis of b equals a's or equals 1.
Tensor4 add(const Tensor4& a, const Tensor4& b);
// Strict same-shape elementwise product.
Tensor4 mul(const Tensor4& a, const Tensor4& b);
// Elementwise product with b broadcast to a's shape.
Tensor4 broadcast_mul(const Tensor4& a, const Tensor4& b);
Tensor4 scale(const Tensor4& a, Scalar factor);

// Axes permutation of the three non-batch axes. perm[i] gives, for output
// axis i+1, the source axis (1..3): out.shape[i+1] = in.shape[perm[i]].
using AxesPerm = std::array<int, 3>;
Tensor4 permute(const Tensor4& x, const AxesPerm& perm);
AxesPerm inverse_perm(const AxesPerm& perm);

// Reverses a tensor along one non-batch axis (1..3).
Tensor4 flip(const Tensor4& x, int axis);

// Full reduction to a (1,1,1,1) scalar tensor.
Tensor4 sum(const Tensor4& x);
// Extracts one element as a (1,1,1,1) scalar tensor.
Tensor4 pick(const Tensor4& x, int n, int c, int h, int w);

// Convenience: backward on the active graph of root's tape.
void backward(const Tensor4& root, Tape& tape);

}  // namespace attnkit
