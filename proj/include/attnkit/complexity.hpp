#pragma once

#include <string>
#include <vector>

#include "attnkit/backbone.hpp"

namespace attnkit {

// The five mechanisms with closed-form parameter counts. Only se, cbam and
// triplet exist as executable layers; bam and gc have formula rows only.
enum class Mechanism { se, cbam, bam, gc, triplet };

Mechanism mechanism_from_string(const std::string& s);
std::string to_string(Mechanism m);

// Closed-form added parameters of one module instance at C input channels:
//   se      2C^2/r
//   cbam    2C^2/r + 2k^2
//   bam     C/r (3C + 2k^2 C/r + 1)
//   gc      2C^2/r + C
//   triplet 6k^2
long long formula_params(Mechanism m, long long channels, int reduction, int kernel);

// Formula totals across the canonical ResNet-50 placements: one module per
// bottleneck block (256x3, 512x4, 1024x6, 2048x3), except bam which sits at
// the three stage transitions C in {256, 512, 1024}. r defaults to 16, k to
// 7 (cbam, triplet) or 3 (bam); pass kernel <= 0 for the default.
long long resnet50_overhead(Mechanism m, int reduction = 16, int kernel = 0);

// Widely published overhead figures for these mechanisms on a ResNet-50
// host, for delta reporting. Units: parameters.
double reference_overhead(Mechanism m);

struct ComplexityRow {
    std::string name;
    long long formula_params = 0;
    long long exact_conv_only = 0;  // conv / matmul weights
    long long exact_with_bn = 0;    // + batchnorm affine
    long long macs = 0;
};

struct ComplexityReport {
    std::string mechanism;  // attention kind of the analyzed network
    std::vector<ComplexityRow> rows;  // one per attention module instance
    ComplexityRow totals;             // column sums over rows
    long long backbone_params = 0;    // trainable parameters outside attention
    long long backbone_macs = 0;
    long long total_params = 0;  // backbone + attention (with bn)
    long long total_macs = 0;
    int reduction = 16;
    int kernel = 7;
    std::string counting_convention;
};

// Parameter census by walking the built network; MAC columns are zero.
ComplexityReport exact_count(const Network& net);

// MAC analysis at the given (C,H,W) input, per batch element. Counts
// multiply-accumulates of weighted transforms (convolutions, matrix
// products) plus one op per element for batchnorm and activations;
// poolings, permutations and elementwise reweighting are memory-bound and
// excluded. 1 MAC = 1 FLOP.
long long estimate_macs(const Network& net, int in_c, int in_h, int in_w);

// The convolution term of the model: C_out * C_in * k^2 * H_out * W_out,
// plus C_out * H_out * W_out when a bias is present.
long long conv2d_mac_count(int c_out, int c_in, int k, long long h_out, long long w_out,
                           bool bias);

// Census and MAC analysis combined.
ComplexityReport analyze(const Network& net, int in_c, int in_h, int in_w);

std::string report_text(const ComplexityReport& r);
std::string report_json(const ComplexityReport& r);

// Formula-vs-reference table across all five mechanisms at the canonical
// ResNet-50 placements; rows whose relative delta exceeds 0.1% are flagged.
std::string resnet50_formula_table();

}  // namespace attnkit
