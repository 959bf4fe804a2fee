#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "attnkit/backbone.hpp"

namespace attnkit {

// Class-activation heatmap. `values` live at the source layer's resolution
// in [0,1]; the max is exactly 1 unless the map is identically zero.
// `upsampled` is the bilinear resize to input resolution.
struct Heatmap {
    int height = 0, width = 0;
    std::vector<Scalar> values;
    std::string source_layer;
    int class_index = 0;
    int up_height = 0, up_width = 0;
    std::vector<Scalar> upsampled;
};

// Per-channel weights are the spatial means of d(logit_class)/d(activation);
// the map is relu of the weighted channel sum, normalized by its max.
// Runs the network in eval mode with gradient recording.
Heatmap gradcam(Network& net, const Tensor4& x, int class_index, const std::string& layer_name);

// Bilinear resize helper (center-aligned sampling).
std::vector<Scalar> bilinear_resize(std::span<const Scalar> src, int sh, int sw, int dh, int dw);

// 8-bit binary PGM ("P5 W H 255\n") of the upsampled map; values scale to
// 0-255 with half-up rounding.
void write_pgm(const Heatmap& h, const std::string& path);

// PPM ("P6") overlay: the heatmap as red-channel intensity blended at 50%
// with a grayscale image of the same (up_height, up_width) size in [0,1].
void write_ppm_overlay(const Heatmap& h, std::span<const Scalar> gray, const std::string& path);

struct PgmImage {
    int width = 0, height = 0;
    std::vector<std::uint8_t> pixels;
};

PgmImage read_pgm(const std::string& path);

}  // namespace attnkit
