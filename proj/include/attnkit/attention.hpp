#pragma once

#include "attnkit/nn.hpp"

namespace attnkit {

// How the permuting branches realize the 90-degree rotation. `transpose`
// swaps the axes only; `transpose_with_flip` additionally reverses the new
// leading axis, yielding a true geometric rotation. Both are exactly
// invertible.
enum class RotationVariant { transpose, transpose_with_flip };

// One attention gate: Z-pool -> k x k conv (2 -> 1 channels, bias-free,
// shape-preserving) -> batchnorm -> sigmoid. Output values lie in (0,1).
struct AttentionGateState {
    Conv2dState conv;     // weight (1, 2, k, k)
    BatchNorm2dState bn;  // single channel

    static AttentionGateState make(int k, Rng& rng);
    bool defined() const { return conv.weight.defined(); }
    int kernel() const { return conv.kernel(); }
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
};

struct TripletAttentionConfig {
    int kernel = 7;  // odd
    // Branches 1-2, the pair that permutes the tensor to couple C with H or
    // W ("channel off" in ablation tables disables these two).
    bool channel_branches_enabled = true;
    // Branch 3, the unpermuted spatial gate ("spatial off" disables it).
    bool spatial_branch_enabled = true;
    RotationVariant rotation = RotationVariant::transpose;
};

// Three parallel branches with independent gates, averaged over the
// enabled subset. Branch 1 views the tensor as (N,W,H,C) and couples C
// with H; branch 2 views it as (N,H,C,W) and couples C with W; branch 3
// gates the unpermuted (H,W) plane.
struct TripletAttentionState {
    AttentionGateState gate_ch;  // branch 1
    AttentionGateState gate_cw;  // branch 2
    AttentionGateState gate_hw;  // branch 3
    TripletAttentionConfig config;

    // Gates exist only for enabled branches, so the parameter census of an
    // ablated module shrinks accordingly.
    static TripletAttentionState make(const TripletAttentionConfig& cfg, Rng& rng);
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
    void set_mode(Mode m);
};

struct CbamState {
    Mlp2State mlp;               // shared by the GAP and GMP paths
    AttentionGateState spatial;  // gate applied after channel reweighting

    static CbamState make(int channels, int reduction, int k, Rng& rng);
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
    void set_mode(Mode m);
};

struct SeState {
    Mlp2State mlp;

    static SeState make(int channels, int reduction, Rng& rng);
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
    void set_mode(Mode) {}
};

// sigmoid(batchnorm(conv(zpool(t)))): (N,C0,D1,D2) -> (N,1,D1,D2).
Tensor4 gate_forward(const Tensor4& t, AttentionGateState& g);

// Refined tensor of the same shape as x; mean of the enabled branches.
Tensor4 triplet_forward(const Tensor4& x, TripletAttentionState& s);

// sigma(mlp2(gap(x)) + mlp2(gmp(x))), one shared MLP: (N,C,H,W) -> (N,C,1,1).
Tensor4 cbam_channel_forward(const Tensor4& x, CbamState& s);
// Channel weights applied, then the spatial gate, sequentially.
Tensor4 cbam_forward(const Tensor4& x, CbamState& s);

// x * sigma(mlp2(gap(x))).
Tensor4 se_forward(const Tensor4& x, SeState& s);

// Parameter-count helpers for complexity accounting. "conv" counts conv
// and MLP weight matrices; "total" additionally counts batchnorm affine
// parameters.
long long conv_param_count(const TripletAttentionState& s);
long long total_param_count(const TripletAttentionState& s);
long long conv_param_count(const CbamState& s);
long long total_param_count(const CbamState& s);
long long conv_param_count(const SeState& s);
long long total_param_count(const SeState& s);

}  // namespace attnkit
