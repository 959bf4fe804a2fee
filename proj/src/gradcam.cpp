#include "attnkit/gradcam.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace attnkit {

Heatmap gradcam(Network& net, const Tensor4& x, int class_index, const std::string& layer_name) {
    if (x.shape().n != 1) {
        throw ContractError("gradcam: expects a single-sample batch, got " +
                            to_string(x.shape()));
    }
    if (class_index < 0 || class_index >= net.spec().num_classes) {
        throw ContractError("gradcam: class index " + std::to_string(class_index) +
                            " out of range [0," + std::to_string(net.spec().num_classes) + ")");
    }

    Tape tape;
    ActivationTrace trace;
    Tensor4 logits;
    {
        TapeScope scope(tape);
        logits = net.forward(x, Mode::eval, &trace);
        const Tensor4* act = trace.find(layer_name);
        if (act == nullptr) {
            throw LookupError("gradcam: no activation named '" + layer_name + "'");
        }
        tape.backward(pick(logits, 0, class_index, 0, 0));
    }
    const Tensor4& act = *trace.find(layer_name);
    std::span<const Scalar> g = tape.grad_of(act);

    const Shape4 as = act.shape();
    const long long plane = static_cast<long long>(as.h) * as.w;

    // alpha_c: spatial mean of the gradient per channel.
    std::vector<Scalar> alpha(static_cast<std::size_t>(as.c), 0.0);
    for (int c = 0; c < as.c; ++c) {
        Scalar acc = 0.0;
        for (long long i = 0; i < plane; ++i)
            acc += g[static_cast<std::size_t>(c * plane + i)];
        alpha[static_cast<std::size_t>(c)] = acc / static_cast<Scalar>(plane);
    }

    Heatmap h;
    h.height = as.h;
    h.width = as.w;
    h.source_layer = layer_name;
    h.class_index = class_index;
    h.values.resize(static_cast<std::size_t>(plane), 0.0);
    for (long long i = 0; i < plane; ++i) {
        Scalar acc = 0.0;
        for (int c = 0; c < as.c; ++c)
            acc += alpha[static_cast<std::size_t>(c)] *
                   act.values()[static_cast<std::size_t>(c * plane + i)];
        h.values[static_cast<std::size_t>(i)] = acc > 0.0 ? acc : 0.0;
    }

    Scalar mx = 0.0;
    for (Scalar v : h.values) mx = std::max(mx, v);
    if (mx > 0.0) {
        for (auto& v : h.values) v /= mx;  // identically-zero maps stay zero
    }

    h.up_height = x.shape().h;
    h.up_width = x.shape().w;
    h.upsampled = bilinear_resize(h.values, h.height, h.width, h.up_height, h.up_width);
    return h;
}

std::vector<Scalar> bilinear_resize(std::span<const Scalar> src, int sh, int sw, int dh, int dw) {
    std::vector<Scalar> out(static_cast<std::size_t>(dh) * dw, 0.0);
    const Scalar sy = static_cast<Scalar>(sh) / dh;
    const Scalar sx = static_cast<Scalar>(sw) / dw;
    for (int y = 0; y < dh; ++y) {
        const Scalar fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<Scalar>(sh - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, sh - 1);
        const Scalar wy = fy - y0;
        for (int x = 0; x < dw; ++x) {
            const Scalar fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<Scalar>(sw - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, sw - 1);
            const Scalar wx = fx - x0;
            const Scalar top = src[static_cast<std::size_t>(y0 * sw + x0)] * (1 - wx) +
                               src[static_cast<std::size_t>(y0 * sw + x1)] * wx;
            const Scalar bot = src[static_cast<std::size_t>(y1 * sw + x0)] * (1 - wx) +
                               src[static_cast<std::size_t>(y1 * sw + x1)] * wx;
            out[static_cast<std::size_t>(y) * dw + x] = top * (1 - wy) + bot * wy;
        }
    }
    return out;
}

namespace {

std::uint8_t to_byte(Scalar v) {
    // Half-up rounding of v*255, clamped.
    const Scalar scaled = std::clamp(v, 0.0, 1.0) * 255.0;
    return static_cast<std::uint8_t>(std::floor(scaled + 0.5));
}

}  // namespace

void write_pgm(const Heatmap& h, const std::string& path) {
    const bool up = !h.upsampled.empty();
    const int wd = up ? h.up_width : h.width;
    const int ht = up ? h.up_height : h.height;
    const auto& vals = up ? h.upsampled : h.values;

    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("pgm: cannot open '" + path + "' for writing");
    os << "P5 " << wd << " " << ht << " 255\n";
    for (Scalar v : vals) {
        const char byte = static_cast<char>(to_byte(v));
        os.write(&byte, 1);
    }
    if (!os) throw IoError("pgm: write failed for '" + path + "'");
}

void write_ppm_overlay(const Heatmap& h, std::span<const Scalar> gray, const std::string& path) {
    const int wd = h.up_width, ht = h.up_height;
    if (static_cast<long long>(gray.size()) != static_cast<long long>(wd) * ht) {
        throw DimensionError("ppm overlay: grayscale image size does not match the heatmap");
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("ppm: cannot open '" + path + "' for writing");
    os << "P6 " << wd << " " << ht << " 255\n";
    for (std::size_t i = 0; i < gray.size(); ++i) {
        const Scalar base = 0.5 * std::clamp(gray[i], 0.0, 1.0);
        const std::uint8_t r = to_byte(base + 0.5 * std::clamp(h.upsampled[i], 0.0, 1.0));
        const std::uint8_t gb = to_byte(base);
        const char rgb[3] = {static_cast<char>(r), static_cast<char>(gb),
                             static_cast<char>(gb)};
        os.write(rgb, 3);
    }
    if (!os) throw IoError("ppm: write failed for '" + path + "'");
}

PgmImage read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("pgm: cannot open '" + path + "'");
    std::string magic;
    int w = 0, ht = 0, maxval = 0;
    if (!(is >> magic >> w >> ht >> maxval) || magic != "P5" || maxval != 255) {
        throw FormatError("pgm: bad header in '" + path + "'");
    }
    is.get();  // single whitespace after the header
    PgmImage img;
    img.width = w;
    img.height = ht;
    img.pixels.resize(static_cast<std::size_t>(w) * ht);
    is.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (is.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
        throw FormatError("pgm: truncated pixel data in '" + path + "'");
    }
    return img;
}

}  // namespace attnkit
