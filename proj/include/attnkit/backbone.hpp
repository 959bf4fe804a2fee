#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "attnkit/attention.hpp"

namespace attnkit {

enum class BlockType { plain, resnet_basic, resnet_bottleneck };
enum class AttentionKind { none, se, cbam, triplet };

std::string to_string(BlockType t);
std::string to_string(AttentionKind k);

struct StageSpec {
    int channels = 0;  // block output channels (expansion included for bottlenecks)
    int blocks = 0;
    int stride = 1;  // stride of the stage's first block, 1 or 2
};

struct AttentionSpec {
    AttentionKind kind = AttentionKind::none;
    int kernel = 7;      // triplet branches and the cbam spatial gate
    int reduction = 16;  // se / cbam MLP bottleneck
    bool channel_branches_enabled = true;
    bool spatial_branch_enabled = true;
    RotationVariant rotation = RotationVariant::transpose;
};

// Declarative backbone description. JSON field names: block_type,
// stage_channels, attention, num_classes, input_shape; unknown keys are
// rejected.
struct ArchSpec {
    BlockType block_type = BlockType::plain;
    std::vector<StageSpec> stage_channels;
    AttentionSpec attention;
    int num_classes = 10;
    int in_channels = 3;
    int in_height = 32;
    int in_width = 32;
};

ArchSpec arch_from_json_text(const std::string& text);
ArchSpec arch_from_json_file(const std::string& path);

// The canonical 16-bottleneck-block host network at 224x224, stages
// (256,3,1) (512,4,2) (1024,6,2) (2048,3,2).
ArchSpec resnet50_arch(AttentionKind kind, int kernel = 7, int reduction = 16,
                       int num_classes = 1000);

// One attention module instance; only the state matching `kind` is built.
struct AttentionModule {
    AttentionKind kind = AttentionKind::none;
    TripletAttentionState triplet;
    CbamState cbam;
    SeState se;

    static AttentionModule make(const AttentionSpec& spec, int channels, Rng& rng);
    Tensor4 forward(const Tensor4& x);
    void set_mode(Mode m);
    void register_into(ParamRegistry& reg, const std::string& prefix) const;
    long long conv_params() const;
    long long total_params() const;
};

struct Block {
    BlockType type = BlockType::plain;
    int in_channels = 0, out_channels = 0, stride = 1;
    Conv2dState conv1;
    BatchNorm2dState bn1;
    Conv2dState conv2;  // basic + bottleneck
    BatchNorm2dState bn2;
    Conv2dState conv3;  // bottleneck only
    BatchNorm2dState bn3;
    bool has_downsample = false;
    Conv2dState down_conv;
    BatchNorm2dState down_bn;
    AttentionModule attention;
};

struct Stem {
    bool present = false;
    Conv2dState conv;
    BatchNorm2dState bn;
    bool maxpool = false;  // 3x3 stride-2 window after the stem conv
};

// Named forward activations, recorded in execution order.
struct ActivationTrace {
    std::vector<std::pair<std::string, Tensor4>> entries;
    const Tensor4* find(const std::string& name) const;
};

// Additive perturbation injected at one named activation; used to probe
// gradients with finite differences.
struct ActivationPatch {
    std::string layer;
    Tensor4 delta;
};

class Network {
public:
    Network() = default;
    Network(const Network&) = delete;
    Network& operator=(const Network&) = delete;
    Network(Network&&) = default;
    Network& operator=(Network&&) = default;

    Tensor4 forward(const Tensor4& x, Mode mode, ActivationTrace* trace = nullptr,
                    const ActivationPatch* patch = nullptr);

    const ArchSpec& spec() const { return spec_; }
    const ParamRegistry& registry() const { return registry_; }
    ParamRegistry& registry() { return registry_; }
    const std::vector<Block>& blocks() const { return blocks_; }
    const Stem& stem() const { return stem_; }
    const Conv2dState& head() const { return fc_; }
    const std::vector<std::string>& block_names() const { return block_names_; }
    // The last pre-head activation; the default Grad-CAM target.
    std::string default_cam_layer() const { return "features"; }
    int attention_module_count() const;

private:
    friend Network build(const ArchSpec& spec, std::uint64_t seed);

    ArchSpec spec_;
    Stem stem_;
    std::vector<Block> blocks_;
    std::vector<std::string> block_names_;
    Conv2dState fc_;
    ParamRegistry registry_;
};

// Deterministic construction: the same spec and seed give bit-identical
// parameters.
Network build(const ArchSpec& spec, std::uint64_t seed);

}  // namespace attnkit
