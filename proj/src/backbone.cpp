#include "attnkit/backbone.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace attnkit {

using nlohmann::json;

std::string to_string(BlockType t) {
    switch (t) {
        case BlockType::plain: return "plain";
        case BlockType::resnet_basic: return "resnet-basic";
        default: return "resnet-bottleneck";
    }
}

std::string to_string(AttentionKind k) {
    switch (k) {
        case AttentionKind::none: return "none";
        case AttentionKind::se: return "se";
        case AttentionKind::cbam: return "cbam";
        default: return "triplet";
    }
}

namespace {

BlockType block_type_from_string(const std::string& s) {
    if (s == "plain") return BlockType::plain;
    if (s == "resnet-basic") return BlockType::resnet_basic;
    if (s == "resnet-bottleneck") return BlockType::resnet_bottleneck;
    throw ConfigError("arch: unknown block_type '" + s + "'");
}

AttentionKind attention_kind_from_string(const std::string& s) {
    if (s == "none") return AttentionKind::none;
    if (s == "se") return AttentionKind::se;
    if (s == "cbam") return AttentionKind::cbam;
    if (s == "triplet") return AttentionKind::triplet;
    throw ConfigError("arch: unknown attention kind '" + s + "'");
}

void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed,
                         const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* k : allowed) {
            if (it.key() == k) {
                ok = true;
                break;
            }
        }
        if (!ok) throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
}

AttentionSpec attention_spec_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("arch: attention must be an object");
    reject_unknown_keys(j,
                        {"kind", "k", "r", "channel_branches_enabled", "spatial_branch_enabled",
                         "rotation_variant"},
                        "arch.attention");
    AttentionSpec a;
    a.kind = attention_kind_from_string(j.value("kind", "none"));
    a.kernel = j.value("k", 7);
    a.reduction = j.value("r", 16);
    a.channel_branches_enabled = j.value("channel_branches_enabled", true);
    a.spatial_branch_enabled = j.value("spatial_branch_enabled", true);
    const std::string rot = j.value("rotation_variant", "transpose");
    if (rot == "transpose") {
        a.rotation = RotationVariant::transpose;
    } else if (rot == "transpose-with-flip") {
        a.rotation = RotationVariant::transpose_with_flip;
    } else {
        throw ConfigError("arch: unknown rotation_variant '" + rot + "'");
    }
    return a;
}

void validate(const ArchSpec& spec) {
    if (spec.stage_channels.empty()) throw ConfigError("arch: stage_channels is empty");
    for (const auto& st : spec.stage_channels) {
        if (st.channels < 1 || st.blocks < 1) {
            throw ConfigError("arch: stage channels and block counts must be >= 1");
        }
        if (st.stride != 1 && st.stride != 2) {
            throw ConfigError("arch: stage strides must be 1 or 2");
        }
        if (spec.block_type == BlockType::resnet_bottleneck && st.channels % 4 != 0) {
            throw ConfigError("arch: bottleneck stage channels must be divisible by 4 "
                              "(expansion), got " + std::to_string(st.channels));
        }
    }
    if (spec.num_classes < 2) throw ConfigError("arch: num_classes must be >= 2");
    if (spec.in_channels < 1 || spec.in_height < 1 || spec.in_width < 1) {
        throw ConfigError("arch: input_shape entries must be >= 1");
    }
    if (spec.attention.kind == AttentionKind::triplet &&
        !spec.attention.channel_branches_enabled && !spec.attention.spatial_branch_enabled) {
        throw ConfigError("arch: triplet attention needs at least one enabled branch");
    }
}

}  // namespace

ArchSpec arch_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("arch: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("arch: document must be a JSON object");
    reject_unknown_keys(
        j, {"block_type", "stage_channels", "attention", "num_classes", "input_shape"}, "arch");

    ArchSpec spec;
    try {
        spec.block_type = block_type_from_string(j.at("block_type").get<std::string>());
        for (const auto& row : j.at("stage_channels")) {
            if (!row.is_array() || row.size() != 3) {
                throw ConfigError("arch: stage_channels rows must be [channels, blocks, stride]");
            }
            spec.stage_channels.push_back(
                StageSpec{row[0].get<int>(), row[1].get<int>(), row[2].get<int>()});
        }
        if (j.contains("attention")) spec.attention = attention_spec_from_json(j.at("attention"));
        spec.num_classes = j.at("num_classes").get<int>();
        const auto& shape = j.at("input_shape");
        if (!shape.is_array() || shape.size() != 3) {
            throw ConfigError("arch: input_shape must be [C, H, W]");
        }
        spec.in_channels = shape[0].get<int>();
        spec.in_height = shape[1].get<int>();
        spec.in_width = shape[2].get<int>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("arch: ") + e.what());
    }
    validate(spec);
    return spec;
}

ArchSpec arch_from_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("arch: cannot open '" + path + "'");
    std::stringstream buf;
    buf << is.rdbuf();
    return arch_from_json_text(buf.str());
}

ArchSpec resnet50_arch(AttentionKind kind, int kernel, int reduction, int num_classes) {
    ArchSpec spec;
    spec.block_type = BlockType::resnet_bottleneck;
    spec.stage_channels = {{256, 3, 1}, {512, 4, 2}, {1024, 6, 2}, {2048, 3, 2}};
    spec.attention.kind = kind;
    spec.attention.kernel = kernel;
    spec.attention.reduction = reduction;
    spec.num_classes = num_classes;
    spec.in_channels = 3;
    spec.in_height = 224;
    spec.in_width = 224;
    return spec;
}

// ---- attention module ----

AttentionModule AttentionModule::make(const AttentionSpec& spec, int channels, Rng& rng) {
    AttentionModule m;
    m.kind = spec.kind;
    switch (spec.kind) {
        case AttentionKind::none:
            break;
        case AttentionKind::se:
            m.se = SeState::make(channels, spec.reduction, rng);
            break;
        case AttentionKind::cbam:
            m.cbam = CbamState::make(channels, spec.reduction, spec.kernel, rng);
            break;
        case AttentionKind::triplet: {
            TripletAttentionConfig cfg;
            cfg.kernel = spec.kernel;
            cfg.channel_branches_enabled = spec.channel_branches_enabled;
            cfg.spatial_branch_enabled = spec.spatial_branch_enabled;
            cfg.rotation = spec.rotation;
            m.triplet = TripletAttentionState::make(cfg, rng);
            break;
        }
    }
    return m;
}

Tensor4 AttentionModule::forward(const Tensor4& x) {
    switch (kind) {
        case AttentionKind::none: return x;
        case AttentionKind::se: return se_forward(x, se);
        case AttentionKind::cbam: return cbam_forward(x, cbam);
        default: return triplet_forward(x, triplet);
    }
}

void AttentionModule::set_mode(Mode m) {
    switch (kind) {
        case AttentionKind::none: break;
        case AttentionKind::se: se.set_mode(m); break;
        case AttentionKind::cbam: cbam.set_mode(m); break;
        default: triplet.set_mode(m); break;
    }
}

void AttentionModule::register_into(ParamRegistry& reg, const std::string& prefix) const {
    switch (kind) {
        case AttentionKind::none: break;
        case AttentionKind::se: se.register_into(reg, prefix); break;
        case AttentionKind::cbam: cbam.register_into(reg, prefix); break;
        default: triplet.register_into(reg, prefix); break;
    }
}

long long AttentionModule::conv_params() const {
    switch (kind) {
        case AttentionKind::none: return 0;
        case AttentionKind::se: return conv_param_count(se);
        case AttentionKind::cbam: return conv_param_count(cbam);
        default: return conv_param_count(triplet);
    }
}

long long AttentionModule::total_params() const {
    switch (kind) {
        case AttentionKind::none: return 0;
        case AttentionKind::se: return total_param_count(se);
        case AttentionKind::cbam: return total_param_count(cbam);
        default: return total_param_count(triplet);
    }
}

// ---- network construction ----

const Tensor4* ActivationTrace::find(const std::string& name) const {
    for (const auto& [n, t] : entries) {
        if (n == name) return &t;
    }
    return nullptr;
}

namespace {

Block make_block(BlockType type, const AttentionSpec& att, int in_ch, int out_ch, int stride,
                 Rng& rng) {
    Block b;
    b.type = type;
    b.in_channels = in_ch;
    b.out_channels = out_ch;
    b.stride = stride;
    switch (type) {
        case BlockType::plain:
            b.conv1 = Conv2dState::make(out_ch, in_ch, 3, stride, 1, false, rng);
            b.bn1 = BatchNorm2dState::make(out_ch);
            break;
        case BlockType::resnet_basic:
            b.conv1 = Conv2dState::make(out_ch, in_ch, 3, stride, 1, false, rng);
            b.bn1 = BatchNorm2dState::make(out_ch);
            b.conv2 = Conv2dState::make(out_ch, out_ch, 3, 1, 1, false, rng);
            b.bn2 = BatchNorm2dState::make(out_ch);
            break;
        case BlockType::resnet_bottleneck: {
            const int mid = out_ch / 4;
            b.conv1 = Conv2dState::make(mid, in_ch, 1, 1, 0, false, rng);
            b.bn1 = BatchNorm2dState::make(mid);
            b.conv2 = Conv2dState::make(mid, mid, 3, stride, 1, false, rng);
            b.bn2 = BatchNorm2dState::make(mid);
            b.conv3 = Conv2dState::make(out_ch, mid, 1, 1, 0, false, rng);
            b.bn3 = BatchNorm2dState::make(out_ch);
            break;
        }
    }
    if (type != BlockType::plain && (stride != 1 || in_ch != out_ch)) {
        b.has_downsample = true;
        b.down_conv = Conv2dState::make(out_ch, in_ch, 1, stride, 0, false, rng);
        b.down_bn = BatchNorm2dState::make(out_ch);
    }
    b.attention = AttentionModule::make(att, out_ch, rng);
    return b;
}

void register_block(const Block& b, ParamRegistry& reg, const std::string& prefix) {
    b.conv1.register_into(reg, prefix + ".conv1");
    b.bn1.register_into(reg, prefix + ".bn1");
    if (b.type != BlockType::plain) {
        b.conv2.register_into(reg, prefix + ".conv2");
        b.bn2.register_into(reg, prefix + ".bn2");
    }
    if (b.type == BlockType::resnet_bottleneck) {
        b.conv3.register_into(reg, prefix + ".conv3");
        b.bn3.register_into(reg, prefix + ".bn3");
    }
    if (b.has_downsample) {
        b.down_conv.register_into(reg, prefix + ".down.conv");
        b.down_bn.register_into(reg, prefix + ".down.bn");
    }
    b.attention.register_into(reg, prefix + ".att");
}

void set_block_mode(Block& b, Mode m) {
    b.bn1.mode = m;
    if (b.type != BlockType::plain) b.bn2.mode = m;
    if (b.type == BlockType::resnet_bottleneck) b.bn3.mode = m;
    if (b.has_downsample) b.down_bn.mode = m;
    b.attention.set_mode(m);
}

}  // namespace

Network build(const ArchSpec& spec, std::uint64_t seed) {
    validate(spec);
    Network net;
    net.spec_ = spec;
    Rng rng(seed);

    int channels = spec.in_channels;
    if (spec.block_type != BlockType::plain) {
        // Stem: 3x3 for small inputs, the 7x7 + maxpool arrangement for
        // image-scale inputs.
        const int stem_out = spec.block_type == BlockType::resnet_bottleneck
                                 ? spec.stage_channels.front().channels / 4
                                 : spec.stage_channels.front().channels;
        net.stem_.present = true;
        if (spec.in_height >= 64) {
            net.stem_.conv = Conv2dState::make(stem_out, channels, 7, 2, 3, false, rng);
            net.stem_.maxpool = true;
        } else {
            net.stem_.conv = Conv2dState::make(stem_out, channels, 3, 1, 1, false, rng);
        }
        net.stem_.bn = BatchNorm2dState::make(stem_out);
        channels = stem_out;
    }

    for (std::size_t si = 0; si < spec.stage_channels.size(); ++si) {
        const StageSpec& st = spec.stage_channels[si];
        for (int bi = 0; bi < st.blocks; ++bi) {
            const int stride = bi == 0 ? st.stride : 1;
            net.blocks_.push_back(
                make_block(spec.block_type, spec.attention, channels, st.channels, stride, rng));
            net.block_names_.push_back("s" + std::to_string(si) + ".b" + std::to_string(bi));
            channels = st.channels;
        }
    }

    net.fc_ = Conv2dState::make(spec.num_classes, channels, 1, 1, 0, true, rng);

    if (net.stem_.present) {
        net.stem_.conv.register_into(net.registry_, "stem.conv");
        net.stem_.bn.register_into(net.registry_, "stem.bn");
    }
    for (std::size_t i = 0; i < net.blocks_.size(); ++i) {
        register_block(net.blocks_[i], net.registry_, net.block_names_[i]);
    }
    net.fc_.register_into(net.registry_, "head.fc");
    return net;
}

Tensor4 Network::forward(const Tensor4& x, Mode mode, ActivationTrace* trace,
                         const ActivationPatch* patch) {
    const Shape4 xs = x.shape();
    if (xs.c != spec_.in_channels || xs.h != spec_.in_height || xs.w != spec_.in_width) {
        throw DimensionError("forward: input " + to_string(xs) + " does not match spec (C,H,W)=(" +
                             std::to_string(spec_.in_channels) + "," +
                             std::to_string(spec_.in_height) + "," +
                             std::to_string(spec_.in_width) + ")");
    }

    auto note = [&](const std::string& name, Tensor4 t) -> Tensor4 {
        if (patch && patch->layer == name) {
            t = add(t, patch->delta);
        }
        if (trace) trace->entries.emplace_back(name, t);
        return t;
    };

    Tensor4 h = x;
    if (stem_.present) {
        stem_.bn.mode = mode;
        h = relu(batchnorm2d(conv2d(h, stem_.conv), stem_.bn));
        if (stem_.maxpool) h = maxpool2d(h, 3, 2, 1);
        h = note("stem.out", h);
    }

    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        Block& b = blocks_[i];
        set_block_mode(b, mode);
        Tensor4 out;
        switch (b.type) {
            case BlockType::plain: {
                Tensor4 t = batchnorm2d(conv2d(h, b.conv1), b.bn1);
                out = relu(b.attention.forward(t));
                break;
            }
            case BlockType::resnet_basic: {
                Tensor4 t = relu(batchnorm2d(conv2d(h, b.conv1), b.bn1));
                t = batchnorm2d(conv2d(t, b.conv2), b.bn2);
                t = b.attention.forward(t);
                Tensor4 shortcut =
                    b.has_downsample ? batchnorm2d(conv2d(h, b.down_conv), b.down_bn) : h;
                out = relu(add(shortcut, t));
                break;
            }
            case BlockType::resnet_bottleneck: {
                Tensor4 t = relu(batchnorm2d(conv2d(h, b.conv1), b.bn1));
                t = relu(batchnorm2d(conv2d(t, b.conv2), b.bn2));
                t = batchnorm2d(conv2d(t, b.conv3), b.bn3);
                t = b.attention.forward(t);
                Tensor4 shortcut =
                    b.has_downsample ? batchnorm2d(conv2d(h, b.down_conv), b.down_bn) : h;
                out = relu(add(shortcut, t));
                break;
            }
        }
        h = note(block_names_[i] + ".out", out);
    }

    h = note("features", h);
    Tensor4 pooled = gap(h);
    return conv2d(pooled, fc_);
}

int Network::attention_module_count() const {
    int n = 0;
    for (const auto& b : blocks_) {
        if (b.attention.kind != AttentionKind::none) ++n;
    }
    return n;
}

}  // namespace attnkit
