#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "attnkit/tensor.hpp"

namespace attnkit {

// In-memory dataset. Images are (C,H,W) row-major floats in [0,1]; the
// normalization stats are applied when batches are assembled, not here.
struct DatasetHandle {
    int channels = 3;
    int height = 0;
    int width = 0;
    int num_classes = 10;
    struct Sample {
        std::vector<Scalar> image;
        int label = 0;
    };
    std::vector<Sample> samples;
    std::vector<Scalar> mean;  // per-channel; empty means identity
    std::vector<Scalar> stdev;

    std::size_t size() const { return samples.size(); }
};

// Loads one CIFAR-10 binary file: records of 3073 bytes, a label byte
// followed by 3072 pixel bytes in planar R,G,B order (32x32 row-major).
// Pixels become byte/255; record order is preserved.
DatasetHandle load_cifar10(const std::string& path);

// Class-conditional blobs at 3x16x16: a deterministic per-class pattern
// plus seeded uniform noise, clamped to [0,1]. Labels cycle 0..classes-1,
// so class balance is exact whenever classes divides n. Linearly separable
// at low noise.
DatasetHandle gen_synthetic(int classes, int n, Scalar noise, std::uint64_t seed);

// Batch assembly with per-channel normalization (image - mean) / stdev.
Tensor4 make_batch(const DatasetHandle& data, std::span<const int> indices);
std::vector<int> batch_labels(const DatasetHandle& data, std::span<const int> indices);

}  // namespace attnkit
