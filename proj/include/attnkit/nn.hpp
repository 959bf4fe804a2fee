#pragma once

#include <optional>
#include <string>
#include <vector>

#include "attnkit/tensor.hpp"

namespace attnkit {

enum class Mode { train, eval };

// Ordered, uniquely named view over a model's tensors. Entry order is the
// serialization order; names are stable across runs for a fixed build.
class ParamRegistry {
public:
    struct Entry {
        std::string name;
        Tensor4 tensor;   // shares storage with the owning layer state
        bool trainable = true;
    };

    void add(const std::string& name, const Tensor4& t, bool trainable = true);
    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& mutable_entries() { return entries_; }
    const Entry* find(const std::string& name) const;
    long long trainable_count() const;
    long long total_count() const;

private:
    std::vector<Entry> entries_;
};

// ---- layer states ----

struct Conv2dState {
    Tensor4 weight;  // (C_out, C_in, k, k)
    Tensor4 bias;    // (1, C_out, 1, 1); undefined handle when bias-free
    int stride = 1;
    int padding = 0;

    // Weights drawn seeded-uniform in +/- sqrt(1 / (C_in * k^2)).
    static Conv2dState make(int c_out, int c_in, int k, int stride, int padding, bool with_bias,
                            Rng& rng);
    // padding = (k-1)/2 with odd k, so spatial dimensions are preserved at stride 1.
    static Conv2dState shape_preserving(int c_out, int c_in, int k, Rng& rng);

    int out_channels() const { return weight.shape().n; }
    int in_channels() const { return weight.shape().c; }
    int kernel() const { return weight.shape().h; }
    bool has_bias() const { return bias.defined(); }
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
};

struct BatchNorm2dState {
    Tensor4 gamma;         // (1,C,1,1), init 1
    Tensor4 beta;          // (1,C,1,1), init 0
    Tensor4 running_mean;  // (1,C,1,1), not trainable
    Tensor4 running_var;   // (1,C,1,1), not trainable, entries >= 0
    Scalar eps = 1e-5;
    Scalar momentum = 0.1;
    Mode mode = Mode::train;

    static BatchNorm2dState make(int channels);
    int channels() const { return gamma.shape().c; }
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
};

// Bias-free two-layer bottleneck MLP acting on (N,C,1,1) descriptors:
// v -> w1 * relu(w0 * v), with w0: (C/r x C) and w1: (C x C/r).
struct Mlp2State {
    Tensor4 w0;  // (C/r, C, 1, 1)
    Tensor4 w1;  // (C, C/r, 1, 1)
    int reduction = 16;

    static Mlp2State make(int channels, int reduction, Rng& rng);
    int channels() const { return w1.shape().n; }
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
};

// ---- operations ----

// Cross-correlation (no kernel flip) with zero padding.
// Output spatial size: floor((H + 2*padding - k) / stride) + 1.
Tensor4 conv2d(const Tensor4& x, const Conv2dState& s);

// Train mode normalizes over (N,H,W) with batch statistics and updates the
// running stats by exponential moving average (unbiased variance, matching
// the usual deep-learning convention); eval mode is the deterministic
// per-channel affine map using the running stats.
Tensor4 batchnorm2d(const Tensor4& x, BatchNorm2dState& s);

// Global average / max pooling over all spatial positions, to (N,C,1,1).
Tensor4 gap(const Tensor4& x);
Tensor4 gmp(const Tensor4& x);

// Reduces the channel axis to two: channel 0 carries the per-position max,
// channel 1 the per-position mean. (N,C,D1,D2) -> (N,2,D1,D2).
Tensor4 zpool(const Tensor4& x);

Tensor4 sigmoid(const Tensor4& x);
Tensor4 relu(const Tensor4& x);

// Windowed spatial max with implicit -inf padding; gradient routes to the
// first argmax of each window in row-major order.
Tensor4 maxpool2d(const Tensor4& x, int k, int stride, int padding);

Tensor4 mlp2(const Tensor4& v, const Mlp2State& s);

// Mean softmax cross-entropy over the batch. logits: (N,K,1,1); labels in
// [0,K). Returns a scalar (1,1,1,1) tensor.
Tensor4 cross_entropy_mean(const Tensor4& logits, const std::vector<int>& labels);

}  // namespace attnkit
