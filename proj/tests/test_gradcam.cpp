#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "attnkit/gradcam.hpp"

using namespace attnkit;
namespace fs = std::filesystem;

namespace {

ArchSpec cam_arch(int channels, int classes) {
    ArchSpec spec;
    spec.block_type = BlockType::plain;
    spec.stage_channels = {{channels, 1, 1}};
    spec.attention.kind = AttentionKind::none;
    spec.num_classes = classes;
    spec.in_channels = 3;
    spec.in_height = 8;
    spec.in_width = 8;
    return spec;
}

// Points logit k at exactly one feature channel: W[k][channel] = 1, rest 0.
void wire_head_to_channel(Network& net, int class_index, int channel) {
    for (auto& e : net.registry().mutable_entries()) {
        if (e.name == "head.fc.weight") {
            auto w = e.tensor.mutable_values();
            std::fill(w.begin(), w.end(), 0.0);
            const int c_in = e.tensor.shape().c;
            w[static_cast<std::size_t>(class_index * c_in + channel)] = 1.0;
        } else if (e.name == "head.fc.bias") {
            std::fill(e.tensor.mutable_values().begin(), e.tensor.mutable_values().end(), 0.0);
        }
    }
}

std::string temp_file(const std::string& name) {
    return (fs::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("gradcam matches the analytic single-channel oracle") {
    Network net = build(cam_arch(4, 2), 31);
    wire_head_to_channel(net, 0, 2);

    Tensor4 x = Tensor4::uniform({1, 3, 8, 8}, 0.0, 1.0, 7);
    ActivationTrace trace;
    net.forward(x, Mode::eval, &trace);
    const Tensor4& act = *trace.find("s0.b0.out");

    Heatmap h = gradcam(net, x, 0, "s0.b0.out");
    CHECK(h.source_layer == "s0.b0.out");
    CHECK(h.height == 8);
    CHECK(h.width == 8);

    // logit0 = gap(channel 2), so alpha is e_2 / 64 and the map is channel 2
    // normalized by its max.
    Scalar mx = 0.0;
    for (int i = 0; i < 64; ++i)
        mx = std::max(mx, act.values()[static_cast<std::size_t>(2 * 64 + i)]);
    REQUIRE(mx > 0.0);
    for (int i = 0; i < 64; ++i) {
        const Scalar expect = act.values()[static_cast<std::size_t>(2 * 64 + i)] / mx;
        CHECK(std::abs(h.values[static_cast<std::size_t>(i)] - expect) < 1e-6);
    }
}

TEST_CASE("constant logits give an identically zero heatmap") {
    Network net = build(cam_arch(4, 2), 33);
    for (auto& e : net.registry().mutable_entries()) {
        if (e.name.rfind("head.fc", 0) == 0) {
            std::fill(e.tensor.mutable_values().begin(), e.tensor.mutable_values().end(), 0.0);
        }
    }
    Tensor4 x = Tensor4::uniform({1, 3, 8, 8}, 0.0, 1.0, 9);
    Heatmap h = gradcam(net, x, 1, net.default_cam_layer());
    for (Scalar v : h.values) CHECK(v == 0.0);
    for (Scalar v : h.upsampled) CHECK(v == 0.0);
}

TEST_CASE("heatmaps stay in [0,1] with max exactly 1 for random nets") {
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        Network net = build(cam_arch(6, 3), seed);
        Tensor4 x = Tensor4::uniform({1, 3, 8, 8}, 0.0, 1.0, seed + 100);
        Heatmap h = gradcam(net, x, static_cast<int>(seed % 3), net.default_cam_layer());
        Scalar mx = 0.0;
        for (Scalar v : h.values) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
            mx = std::max(mx, v);
        }
        CHECK((mx == 1.0 || mx == 0.0));
        for (Scalar v : h.upsampled) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
}

TEST_CASE("scaling the head weights leaves the normalized heatmap unchanged") {
    Network net = build(cam_arch(4, 2), 41);
    Tensor4 x = Tensor4::uniform({1, 3, 8, 8}, 0.0, 1.0, 11);
    Heatmap before = gradcam(net, x, 0, net.default_cam_layer());
    for (auto& e : net.registry().mutable_entries()) {
        if (e.name.rfind("head.fc", 0) == 0) {
            for (auto& v : e.tensor.mutable_values()) v *= 2.0;
        }
    }
    Heatmap after = gradcam(net, x, 0, net.default_cam_layer());
    REQUIRE(before.values.size() == after.values.size());
    for (std::size_t i = 0; i < before.values.size(); ++i) {
        CHECK(std::abs(before.values[i] - after.values[i]) < 1e-12);
    }
}

TEST_CASE("channel weights agree with finite-difference activation probes") {
    Network net = build(cam_arch(4, 2), 51);
    Tensor4 x = Tensor4::uniform({1, 3, 8, 8}, 0.0, 1.0, 13);
    const std::string layer = "s0.b0.out";
    const int cls = 1;

    // Tape alphas.
    Tape tape;
    ActivationTrace trace;
    std::vector<Scalar> alpha(4, 0.0);
    {
        TapeScope scope(tape);
        Tensor4 logits = net.forward(x, Mode::eval, &trace);
        tape.backward(pick(logits, 0, cls, 0, 0));
    }
    const Tensor4& act = *trace.find(layer);
    auto g = tape.grad_of(act);
    for (int c = 0; c < 4; ++c) {
        Scalar acc = 0.0;
        for (int i = 0; i < 64; ++i) acc += g[static_cast<std::size_t>(c * 64 + i)];
        alpha[static_cast<std::size_t>(c)] = acc / 64.0;
    }

    // Finite differences: bump one activation channel by +/- eps.
    const Scalar eps = 1e-5;
    for (int c = 0; c < 4; ++c) {
        ActivationPatch patch;
        patch.layer = layer;
        Tensor4 delta = Tensor4::zeros(act.shape());
        for (int i = 0; i < 64; ++i)
            delta.mutable_values()[static_cast<std::size_t>(c * 64 + i)] = eps;
        patch.delta = delta;
        Tensor4 up = net.forward(x, Mode::eval, nullptr, &patch);
        for (auto& v : delta.mutable_values()) v = -v;
        Tensor4 dn = net.forward(x, Mode::eval, nullptr, &patch);
        const Scalar fd =
            (up.at(0, cls, 0, 0) - dn.at(0, cls, 0, 0)) / (2 * eps) / 64.0;  // per-element mean
        const Scalar err = std::abs(fd - alpha[static_cast<std::size_t>(c)]) /
                           std::max({std::abs(fd), std::abs(alpha[static_cast<std::size_t>(c)]),
                                     Scalar(1e-6)});
        CHECK(err < 1e-3);
    }
}

TEST_CASE("gradcam contract errors") {
    Network net = build(cam_arch(4, 2), 61);
    Tensor4 x = Tensor4::uniform({1, 3, 8, 8}, 0.0, 1.0, 15);
    CHECK_THROWS_AS(gradcam(net, x, 0, "nonexistent.layer"), LookupError);
    CHECK_THROWS_AS(gradcam(net, x, 7, "features"), ContractError);
    Tensor4 batch2 = Tensor4::uniform({2, 3, 8, 8}, 0.0, 1.0, 15);
    CHECK_THROWS_AS(gradcam(net, batch2, 0, "features"), ContractError);
}

TEST_CASE("pgm emission: scale-and-round oracle and bit-exact round trip") {
    Heatmap h;
    h.height = 2;
    h.width = 2;
    h.values = {0.0, 1.0, 0.5, 0.25};
    const std::string path = temp_file("attnkit_cam.pgm");
    write_pgm(h, path);

    PgmImage img = read_pgm(path);
    CHECK(img.width == 2);
    CHECK(img.height == 2);
    REQUIRE(img.pixels.size() == 4);
    CHECK(img.pixels[0] == 0);
    CHECK(img.pixels[1] == 255);
    CHECK(img.pixels[2] == 128);  // 127.5 rounds half-up
    CHECK(img.pixels[3] == 64);   // 63.75 rounds up

    // Re-emit and compare bytes.
    const std::string path2 = temp_file("attnkit_cam2.pgm");
    Heatmap h2;
    h2.height = 2;
    h2.width = 2;
    for (auto p : img.pixels) h2.values.push_back(static_cast<Scalar>(p) / 255.0);
    write_pgm(h2, path2);
    PgmImage img2 = read_pgm(path2);
    CHECK(img2.pixels == img.pixels);
    fs::remove(path);
    fs::remove(path2);
}

TEST_CASE("all-zero maps emit all-zero pixels") {
    Heatmap h;
    h.height = 2;
    h.width = 3;
    h.values.assign(6, 0.0);
    const std::string path = temp_file("attnkit_zero.pgm");
    write_pgm(h, path);
    PgmImage img = read_pgm(path);
    for (auto p : img.pixels) CHECK(p == 0);
    fs::remove(path);
}

TEST_CASE("ppm overlay blends the heatmap into the red channel") {
    Heatmap h;
    h.height = 1;
    h.width = 2;
    h.values = {1.0, 0.0};
    h.up_height = 1;
    h.up_width = 2;
    h.upsampled = {1.0, 0.0};
    std::vector<Scalar> gray = {0.0, 1.0};
    const std::string path = temp_file("attnkit_overlay.ppm");
    write_ppm_overlay(h, gray, path);

    std::ifstream is(path, std::ios::binary);
    std::string magic;
    int w, ht, maxval;
    is >> magic >> w >> ht >> maxval;
    is.get();
    unsigned char px[6];
    is.read(reinterpret_cast<char*>(px), 6);
    CHECK(magic == "P6");
    // pixel 0: heat 1 on black -> (128, 0, 0); pixel 1: no heat on white -> (128, 128, 128)
    CHECK(static_cast<int>(px[0]) == 128);
    CHECK(static_cast<int>(px[1]) == 0);
    CHECK(static_cast<int>(px[2]) == 0);
    CHECK(static_cast<int>(px[3]) == 128);
    CHECK(static_cast<int>(px[4]) == 128);
    CHECK(static_cast<int>(px[5]) == 128);

    std::vector<Scalar> wrong_size = {0.0};
    CHECK_THROWS_AS(write_ppm_overlay(h, wrong_size, path), DimensionError);
    fs::remove(path);
}

TEST_CASE("bilinear upsampling preserves constants and value range") {
    std::vector<Scalar> flat(9, 0.4);
    std::vector<Scalar> up = bilinear_resize(flat, 3, 3, 7, 7);
    for (Scalar v : up) CHECK(v == doctest::Approx(0.4).epsilon(1e-15));

    std::vector<Scalar> ramp = {0.0, 1.0, 0.0, 1.0};
    std::vector<Scalar> up2 = bilinear_resize(ramp, 2, 2, 5, 5);
    for (Scalar v : up2) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}
