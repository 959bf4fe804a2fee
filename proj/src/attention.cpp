#include "attnkit/attention.hpp"

namespace attnkit {

namespace {

// Branch 1 views (N,C,H,W) as (N,W,H,C); branch 2 as (N,H,C,W). Both
// permutations are self-inverse axis swaps.
constexpr AxesPerm kPermCH{3, 2, 1};
constexpr AxesPerm kPermCW{2, 1, 3};

Tensor4 rotate_in(const Tensor4& x, const AxesPerm& perm, RotationVariant rot) {
    Tensor4 t = permute(x, perm);
    if (rot == RotationVariant::transpose_with_flip) {
        t = flip(t, 1);
    }
    return t;
}

Tensor4 rotate_out(const Tensor4& y, const AxesPerm& perm, RotationVariant rot) {
    Tensor4 t = y;
    if (rot == RotationVariant::transpose_with_flip) {
        t = flip(t, 1);
    }
    return permute(t, inverse_perm(perm));
}

}  // namespace

AttentionGateState AttentionGateState::make(int k, Rng& rng) {
    if (k < 1 || k % 2 == 0) {
        throw ConfigError("attention gate: kernel must be odd and positive, got " +
                          std::to_string(k));
    }
    AttentionGateState g;
    g.conv = Conv2dState::shape_preserving(1, 2, k, rng);
    g.bn = BatchNorm2dState::make(1);
    return g;
}

void AttentionGateState::register_into(ParamRegistry& reg, const std::string& prefix) const {
    conv.register_into(reg, prefix + ".conv");
    bn.register_into(reg, prefix + ".bn");
}

Tensor4 gate_forward(const Tensor4& t, AttentionGateState& g) {
    return sigmoid(batchnorm2d(conv2d(zpool(t), g.conv), g.bn));
}

TripletAttentionState TripletAttentionState::make(const TripletAttentionConfig& cfg, Rng& rng) {
    if (!cfg.channel_branches_enabled && !cfg.spatial_branch_enabled) {
        throw ConfigError("triplet attention: at least one branch must be enabled");
    }
    TripletAttentionState s;
    s.config = cfg;
    if (cfg.channel_branches_enabled) {
        s.gate_ch = AttentionGateState::make(cfg.kernel, rng);
        s.gate_cw = AttentionGateState::make(cfg.kernel, rng);
    }
    if (cfg.spatial_branch_enabled) {
        s.gate_hw = AttentionGateState::make(cfg.kernel, rng);
    }
    return s;
}

void TripletAttentionState::register_into(ParamRegistry& reg, const std::string& prefix) const {
    if (gate_ch.defined()) gate_ch.register_into(reg, prefix + ".gate_ch");
    if (gate_cw.defined()) gate_cw.register_into(reg, prefix + ".gate_cw");
    if (gate_hw.defined()) gate_hw.register_into(reg, prefix + ".gate_hw");
}

void TripletAttentionState::set_mode(Mode m) {
    if (gate_ch.defined()) gate_ch.bn.mode = m;
    if (gate_cw.defined()) gate_cw.bn.mode = m;
    if (gate_hw.defined()) gate_hw.bn.mode = m;
}

Tensor4 triplet_forward(const Tensor4& x, TripletAttentionState& s) {
    const auto& cfg = s.config;
    if (!cfg.channel_branches_enabled && !cfg.spatial_branch_enabled) {
        throw ConfigError("triplet attention: all branches disabled");
    }
    Tensor4 acc;
    int branches = 0;
    auto accumulate = [&](Tensor4 y) {
        acc = acc.defined() ? add(acc, y) : std::move(y);
        ++branches;
    };
    if (cfg.channel_branches_enabled) {
        {
            Tensor4 x1 = rotate_in(x, kPermCH, cfg.rotation);
            Tensor4 w1 = gate_forward(x1, s.gate_ch);
            accumulate(rotate_out(broadcast_mul(x1, w1), kPermCH, cfg.rotation));
        }
        {
            Tensor4 x2 = rotate_in(x, kPermCW, cfg.rotation);
            Tensor4 w2 = gate_forward(x2, s.gate_cw);
            accumulate(rotate_out(broadcast_mul(x2, w2), kPermCW, cfg.rotation));
        }
    }
    if (cfg.spatial_branch_enabled) {
        accumulate(broadcast_mul(x, gate_forward(x, s.gate_hw)));
    }
    return branches == 1 ? acc : scale(acc, 1.0 / static_cast<Scalar>(branches));
}

CbamState CbamState::make(int channels, int reduction, int k, Rng& rng) {
    CbamState s;
    s.mlp = Mlp2State::make(channels, reduction, rng);
    s.spatial = AttentionGateState::make(k, rng);
    return s;
}

void CbamState::register_into(ParamRegistry& reg, const std::string& prefix) const {
    mlp.register_into(reg, prefix + ".mlp");
    spatial.register_into(reg, prefix + ".spatial");
}

void CbamState::set_mode(Mode m) { spatial.bn.mode = m; }

Tensor4 cbam_channel_forward(const Tensor4& x, CbamState& s) {
    return sigmoid(add(mlp2(gap(x), s.mlp), mlp2(gmp(x), s.mlp)));
}

Tensor4 cbam_forward(const Tensor4& x, CbamState& s) {
    Tensor4 reweighted = broadcast_mul(x, cbam_channel_forward(x, s));
    Tensor4 gate = gate_forward(reweighted, s.spatial);
    return broadcast_mul(reweighted, gate);
}

SeState SeState::make(int channels, int reduction, Rng& rng) {
    SeState s;
    s.mlp = Mlp2State::make(channels, reduction, rng);
    return s;
}

void SeState::register_into(ParamRegistry& reg, const std::string& prefix) const {
    mlp.register_into(reg, prefix + ".mlp");
}

Tensor4 se_forward(const Tensor4& x, SeState& s) {
    return broadcast_mul(x, sigmoid(mlp2(gap(x), s.mlp)));
}

// ---- parameter counts ----

namespace {

long long gate_conv_params(const AttentionGateState& g) {
    return g.defined() ? g.conv.weight.numel() : 0;
}

long long gate_total_params(const AttentionGateState& g) {
    return g.defined() ? g.conv.weight.numel() + g.bn.gamma.numel() + g.bn.beta.numel() : 0;
}

}  // namespace

long long conv_param_count(const TripletAttentionState& s) {
    return gate_conv_params(s.gate_ch) + gate_conv_params(s.gate_cw) +
           gate_conv_params(s.gate_hw);
}

long long total_param_count(const TripletAttentionState& s) {
    return gate_total_params(s.gate_ch) + gate_total_params(s.gate_cw) +
           gate_total_params(s.gate_hw);
}

long long conv_param_count(const CbamState& s) {
    return s.mlp.w0.numel() + s.mlp.w1.numel() + gate_conv_params(s.spatial);
}

long long total_param_count(const CbamState& s) {
    return s.mlp.w0.numel() + s.mlp.w1.numel() + gate_total_params(s.spatial);
}

long long conv_param_count(const SeState& s) { return s.mlp.w0.numel() + s.mlp.w1.numel(); }

long long total_param_count(const SeState& s) { return conv_param_count(s); }

}  // namespace attnkit
