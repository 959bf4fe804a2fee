#include "attnkit/complexity.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include <json.hpp>

namespace attnkit {

namespace {

constexpr const char* kCountingConvention =
    "conv/matmul MACs + 1 op per element for batchnorm and activations; "
    "poolings, permutations and elementwise reweighting excluded; 1 MAC = 1 FLOP";

struct Placement {
    long long channels;
    int count;
};

// One module per bottleneck block of the canonical 16-block layout.
constexpr Placement kResnet50Blocks[] = {{256, 3}, {512, 4}, {1024, 6}, {2048, 3}};
// The three stage-transition channel widths used for bam.
constexpr long long kBamPlacements[] = {256, 512, 1024};

}  // namespace

Mechanism mechanism_from_string(const std::string& s) {
    if (s == "se") return Mechanism::se;
    if (s == "cbam") return Mechanism::cbam;
    if (s == "bam") return Mechanism::bam;
    if (s == "gc") return Mechanism::gc;
    if (s == "triplet") return Mechanism::triplet;
    throw ConfigError("complexity: unknown mechanism '" + s + "'");
}

std::string to_string(Mechanism m) {
    switch (m) {
        case Mechanism::se: return "se";
        case Mechanism::cbam: return "cbam";
        case Mechanism::bam: return "bam";
        case Mechanism::gc: return "gc";
        default: return "triplet";
    }
}

long long formula_params(Mechanism m, long long channels, int reduction, int kernel) {
    const long long C = channels;
    const long long r = reduction;
    const long long k = kernel;
    switch (m) {
        case Mechanism::se:
        case Mechanism::cbam:
        case Mechanism::gc:
        case Mechanism::bam:
            if (r < 1 || C % r != 0) {
                throw ConfigError("complexity: reduction " + std::to_string(r) +
                                  " must divide channels " + std::to_string(C));
            }
            break;
        case Mechanism::triplet:
            break;
    }
    if ((m == Mechanism::cbam || m == Mechanism::bam || m == Mechanism::triplet) &&
        (k < 1 || k % 2 == 0)) {
        throw ConfigError("complexity: kernel must be odd and positive, got " +
                          std::to_string(k));
    }
    switch (m) {
        case Mechanism::se: return 2 * C * C / r;
        case Mechanism::cbam: return 2 * C * C / r + 2 * k * k;
        case Mechanism::bam: return C / r * (3 * C + 2 * k * k * C / r + 1);
        case Mechanism::gc: return 2 * C * C / r + C;
        default: return 6 * k * k;
    }
}

long long resnet50_overhead(Mechanism m, int reduction, int kernel) {
    if (kernel <= 0) kernel = m == Mechanism::bam ? 3 : 7;
    long long total = 0;
    if (m == Mechanism::bam) {
        for (long long c : kBamPlacements) total += formula_params(m, c, reduction, kernel);
        return total;
    }
    for (const auto& p : kResnet50Blocks) {
        total += p.count * formula_params(m, p.channels, reduction, kernel);
    }
    return total;
}

double reference_overhead(Mechanism m) {
    switch (m) {
        case Mechanism::se: return 2.514e6;
        case Mechanism::cbam: return 2.532e6;
        case Mechanism::bam: return 0.358e6;
        case Mechanism::gc: return 2.548e6;
        default: return 0.0048e6;
    }
}

// ---- exact census ----

namespace {

Mechanism mechanism_of(AttentionKind kind) {
    switch (kind) {
        case AttentionKind::se: return Mechanism::se;
        case AttentionKind::cbam: return Mechanism::cbam;
        case AttentionKind::triplet: return Mechanism::triplet;
        default: throw ContractError("no mechanism for attention kind 'none'");
    }
}

// MAC model shared by the census and the analyzer. `h` and `w` are the
// spatial dims of the tensor the module gates; `c` its channels.
long long attention_macs(const AttentionModule& m, long long c, long long h, long long w) {
    auto gate_macs = [](long long k, long long d1, long long d2) {
        // conv (2 -> 1 channels) + batchnorm + sigmoid on the gate map
        return 2 * k * k * d1 * d2 + 2 * d1 * d2;
    };
    switch (m.kind) {
        case AttentionKind::none:
            return 0;
        case AttentionKind::se: {
            const long long hidden = m.se.mlp.w0.shape().n;
            // two matmuls + relu(hidden) + sigmoid(c)
            return m.se.mlp.w0.numel() + m.se.mlp.w1.numel() + hidden + c;
        }
        case AttentionKind::cbam: {
            const long long hidden = m.cbam.mlp.w0.shape().n;
            const long long mlp = m.cbam.mlp.w0.numel() + m.cbam.mlp.w1.numel() + hidden;
            // shared MLP runs on both the gap and gmp paths
            return 2 * mlp + c + gate_macs(m.cbam.spatial.kernel(), h, w);
        }
        default: {
            long long total = 0;
            const auto& t = m.triplet;
            if (t.config.channel_branches_enabled) {
                total += gate_macs(t.config.kernel, h, c);  // (H,C) plane
                total += gate_macs(t.config.kernel, c, w);  // (C,W) plane
            }
            if (t.config.spatial_branch_enabled) {
                total += gate_macs(t.config.kernel, h, w);
            }
            return total;
        }
    }
}

long long conv_macs(const Conv2dState& s, long long h_out, long long w_out) {
    return conv2d_mac_count(s.out_channels(), s.in_channels(), s.kernel(), h_out, w_out,
                            s.has_bias());
}

struct SpatialDims {
    long long h, w;
};

SpatialDims after_conv(const SpatialDims& d, const Conv2dState& s) {
    return {(d.h + 2 * s.padding - s.kernel()) / s.stride + 1,
            (d.w + 2 * s.padding - s.kernel()) / s.stride + 1};
}

}  // namespace

ComplexityReport exact_count(const Network& net) {
    ComplexityReport rep;
    rep.mechanism = to_string(net.spec().attention.kind);
    rep.reduction = net.spec().attention.reduction;
    rep.kernel = net.spec().attention.kernel;
    rep.counting_convention = kCountingConvention;

    long long att_total_with_bn = 0;
    const auto& names = net.block_names();
    for (std::size_t i = 0; i < net.blocks().size(); ++i) {
        const Block& b = net.blocks()[i];
        if (b.attention.kind == AttentionKind::none) continue;
        ComplexityRow row;
        row.name = names[i] + ".att";
        row.formula_params =
            formula_params(mechanism_of(b.attention.kind), b.out_channels,
                           net.spec().attention.reduction, net.spec().attention.kernel);
        row.exact_conv_only = b.attention.conv_params();
        row.exact_with_bn = b.attention.total_params();
        rep.rows.push_back(row);
        att_total_with_bn += row.exact_with_bn;
    }
    for (const auto& row : rep.rows) {
        rep.totals.formula_params += row.formula_params;
        rep.totals.exact_conv_only += row.exact_conv_only;
        rep.totals.exact_with_bn += row.exact_with_bn;
    }
    rep.totals.name = "total";
    rep.backbone_params = net.registry().trainable_count() - att_total_with_bn;
    rep.total_params = net.registry().trainable_count();
    return rep;
}

namespace {

struct MacWalk {
    long long total = 0;
    std::vector<long long> attention_rows;  // one entry per attention module
};

MacWalk walk_macs(const Network& net, int in_h, int in_w) {
    MacWalk out;
    SpatialDims d{in_h, in_w};

    if (net.stem().present) {
        d = after_conv(d, net.stem().conv);
        out.total += conv_macs(net.stem().conv, d.h, d.w);
        out.total += 2 * net.stem().conv.out_channels() * d.h * d.w;  // bn + relu
        if (net.stem().maxpool) {
            d = {(d.h + 2 - 3) / 2 + 1, (d.w + 2 - 3) / 2 + 1};
        }
    }

    for (const Block& b : net.blocks()) {
        SpatialDims bd = d;
        switch (b.type) {
            case BlockType::plain: {
                bd = after_conv(bd, b.conv1);
                out.total += conv_macs(b.conv1, bd.h, bd.w);
                out.total += 2 * b.out_channels * bd.h * bd.w;  // bn + relu
                break;
            }
            case BlockType::resnet_basic: {
                bd = after_conv(bd, b.conv1);
                out.total += conv_macs(b.conv1, bd.h, bd.w);
                out.total += 2 * b.out_channels * bd.h * bd.w;  // bn1 + relu
                out.total += conv_macs(b.conv2, bd.h, bd.w);
                out.total += 2 * b.out_channels * bd.h * bd.w;  // bn2 + final relu
                break;
            }
            case BlockType::resnet_bottleneck: {
                const long long mid = b.conv1.out_channels();
                SpatialDims d1 = after_conv(bd, b.conv1);
                out.total += conv_macs(b.conv1, d1.h, d1.w) + 2 * mid * d1.h * d1.w;
                SpatialDims d2 = after_conv(d1, b.conv2);
                out.total += conv_macs(b.conv2, d2.h, d2.w) + 2 * mid * d2.h * d2.w;
                bd = after_conv(d2, b.conv3);
                out.total += conv_macs(b.conv3, bd.h, bd.w) + b.out_channels * bd.h * bd.w;
                out.total += b.out_channels * bd.h * bd.w;  // final relu
                break;
            }
        }
        if (b.has_downsample) {
            SpatialDims dd = after_conv(d, b.down_conv);
            out.total += conv_macs(b.down_conv, dd.h, dd.w);
            out.total += b.out_channels * dd.h * dd.w;  // down bn
        }
        if (b.attention.kind != AttentionKind::none) {
            const long long am = attention_macs(b.attention, b.out_channels, bd.h, bd.w);
            out.total += am;
            out.attention_rows.push_back(am);
        }
        d = bd;
    }

    out.total += conv_macs(net.head(), 1, 1);
    return out;
}

}  // namespace

long long conv2d_mac_count(int c_out, int c_in, int k, long long h_out, long long w_out,
                           bool bias) {
    long long macs = static_cast<long long>(c_out) * c_in * k * k * h_out * w_out;
    if (bias) macs += static_cast<long long>(c_out) * h_out * w_out;
    return macs;
}

long long estimate_macs(const Network& net, int in_c, int in_h, int in_w) {
    (void)in_c;
    return walk_macs(net, in_h, in_w).total;
}

ComplexityReport analyze(const Network& net, int in_c, int in_h, int in_w) {
    (void)in_c;
    ComplexityReport rep = exact_count(net);
    const MacWalk walk = walk_macs(net, in_h, in_w);
    rep.total_macs = walk.total;
    long long att_macs = 0;
    for (std::size_t i = 0; i < rep.rows.size() && i < walk.attention_rows.size(); ++i) {
        rep.rows[i].macs = walk.attention_rows[i];
        att_macs += walk.attention_rows[i];
    }
    rep.totals.macs = att_macs;
    rep.backbone_macs = rep.total_macs - att_macs;
    return rep;
}

std::string report_text(const ComplexityReport& r) {
    std::ostringstream os;
    char line[160];
    os << "attention mechanism: " << r.mechanism << " (r=" << r.reduction << ", k=" << r.kernel
       << ")\n";
    os << "counting convention: " << r.counting_convention << "\n";
    std::snprintf(line, sizeof(line), "%-16s %14s %16s %14s %14s\n", "module", "formula",
                  "exact(conv)", "exact(+bn)", "macs");
    os << line;
    for (const auto& row : r.rows) {
        std::snprintf(line, sizeof(line), "%-16s %14lld %16lld %14lld %14lld\n", row.name.c_str(),
                      row.formula_params, row.exact_conv_only, row.exact_with_bn, row.macs);
        os << line;
    }
    std::snprintf(line, sizeof(line), "%-16s %14lld %16lld %14lld %14lld\n", "total",
                  r.totals.formula_params, r.totals.exact_conv_only, r.totals.exact_with_bn,
                  r.totals.macs);
    os << line;
    os << "backbone params: " << r.backbone_params << "\n";
    os << "total params:    " << r.total_params << "\n";
    os << "backbone macs:   " << r.backbone_macs << "\n";
    os << "total macs:      " << r.total_macs << "\n";
    return os.str();
}

std::string report_json(const ComplexityReport& r) {
    nlohmann::json j;
    j["mechanism"] = r.mechanism;
    j["reduction"] = r.reduction;
    j["kernel"] = r.kernel;
    j["counting_convention"] = r.counting_convention;
    j["rows"] = nlohmann::json::array();
    for (const auto& row : r.rows) {
        j["rows"].push_back({{"name", row.name},
                             {"formula_params", row.formula_params},
                             {"exact_params_conv_only", row.exact_conv_only},
                             {"exact_params_with_bn", row.exact_with_bn},
                             {"macs", row.macs}});
    }
    j["totals"] = {{"formula_params", r.totals.formula_params},
                   {"exact_params_conv_only", r.totals.exact_conv_only},
                   {"exact_params_with_bn", r.totals.exact_with_bn},
                   {"macs", r.totals.macs}};
    j["backbone_params"] = r.backbone_params;
    j["total_params"] = r.total_params;
    j["backbone_macs"] = r.backbone_macs;
    j["total_macs"] = r.total_macs;
    return j.dump(2);
}

std::string resnet50_formula_table() {
    std::ostringstream os;
    char line[160];
    os << "added parameters on the 16-block bottleneck host (r=16; k=7, bam k=3)\n";
    std::snprintf(line, sizeof(line), "%-14s %14s %14s %10s\n", "mechanism", "formula sum",
                  "reference", "delta");
    os << line;
    auto put_row = [&](const std::string& name, long long ours, double ref, bool compare) {
        if (!compare) {
            std::snprintf(line, sizeof(line), "%-14s %14lld %14s %10s\n", name.c_str(), ours, "-",
                          "-");
        } else {
            const double delta = (static_cast<double>(ours) - ref) / ref * 100.0;
            const bool flag = std::abs(delta) > 0.1;
            std::snprintf(line, sizeof(line), "%-14s %14lld %14.0f %9.2f%%%s\n", name.c_str(),
                          ours, ref, delta, flag ? "  <- differs from reference" : "");
        }
        os << line;
    };
    for (Mechanism m : {Mechanism::se, Mechanism::cbam, Mechanism::bam, Mechanism::gc}) {
        put_row(to_string(m), resnet50_overhead(m), reference_overhead(m), true);
    }
    // The reference triplet figure (0.0048M) counts the gate batchnorm
    // affine pairs; the conv-only row has no published counterpart.
    put_row("triplet", resnet50_overhead(Mechanism::triplet), 0.0, false);
    put_row("triplet(+bn)", resnet50_overhead(Mechanism::triplet) + 16 * 6,
            reference_overhead(Mechanism::triplet), true);
    return os.str();
}

}  // namespace attnkit
