#include "attnkit/data.hpp"

#include <cmath>
#include <fstream>

namespace attnkit {

namespace {

constexpr int kCifarDim = 32;
constexpr int kCifarPixels = 3 * kCifarDim * kCifarDim;  // 3072
constexpr int kCifarRecord = kCifarPixels + 1;           // 3073

}  // namespace

DatasetHandle load_cifar10(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("dataset: cannot open '" + path + "'");
    is.seekg(0, std::ios::end);
    const long long length = is.tellg();
    is.seekg(0, std::ios::beg);
    if (length % kCifarRecord != 0) {
        const long long offset = (length / kCifarRecord) * kCifarRecord;
        throw FormatError("dataset: '" + path + "' length " + std::to_string(length) +
                          " is not a multiple of 3073; truncated record starts at offset " +
                          std::to_string(offset));
    }

    DatasetHandle data;
    data.channels = 3;
    data.height = kCifarDim;
    data.width = kCifarDim;
    data.num_classes = 10;
    const long long count = length / kCifarRecord;
    data.samples.reserve(static_cast<std::size_t>(count));

    std::vector<unsigned char> record(kCifarRecord);
    for (long long r = 0; r < count; ++r) {
        is.read(reinterpret_cast<char*>(record.data()), kCifarRecord);
        if (is.gcount() != kCifarRecord) {
            throw FormatError("dataset: short read at record " + std::to_string(r));
        }
        const int label = record[0];
        if (label > 9) {
            throw FormatError("dataset: record " + std::to_string(r) + " has label " +
                              std::to_string(label) + " > 9 (offset " +
                              std::to_string(r * kCifarRecord) + ")");
        }
        DatasetHandle::Sample s;
        s.label = label;
        s.image.resize(kCifarPixels);
        for (int i = 0; i < kCifarPixels; ++i) {
            s.image[static_cast<std::size_t>(i)] = static_cast<Scalar>(record[i + 1]) / 255.0;
        }
        data.samples.push_back(std::move(s));
    }
    return data;
}

namespace {

// Per-class pattern: a bright bump at a class-specific position on a ring,
// strongest in channel (c mod 3), over a dim base. Pure function of the
// class index.
std::vector<Scalar> class_pattern(int cls, int classes, int dim) {
    std::vector<Scalar> img(static_cast<std::size_t>(3 * dim * dim), 0.15);
    const double angle = 2.0 * 3.14159265358979323846 * cls / classes;
    const double cx = dim / 2.0 + 0.3 * dim * std::cos(angle);
    const double cy = dim / 2.0 + 0.3 * dim * std::sin(angle);
    const double sigma2 = 2.0 * (dim / 6.0) * (dim / 6.0);
    for (int ch = 0; ch < 3; ++ch) {
        const double gain = ch == cls % 3 ? 0.7 : 0.25;
        for (int y = 0; y < dim; ++y) {
            for (int x = 0; x < dim; ++x) {
                const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                img[static_cast<std::size_t>((ch * dim + y) * dim + x)] +=
                    gain * std::exp(-d2 / sigma2);
            }
        }
    }
    for (auto& v : img) v = std::min(v, 1.0);
    return img;
}

}  // namespace

DatasetHandle gen_synthetic(int classes, int n, Scalar noise, std::uint64_t seed) {
    if (classes < 2) throw ConfigError("synthetic dataset: classes must be >= 2");
    if (n < 0) throw ConfigError("synthetic dataset: n must be >= 0");
    const int dim = 16;
    DatasetHandle data;
    data.channels = 3;
    data.height = dim;
    data.width = dim;
    data.num_classes = classes;

    std::vector<std::vector<Scalar>> patterns;
    patterns.reserve(static_cast<std::size_t>(classes));
    for (int c = 0; c < classes; ++c) patterns.push_back(class_pattern(c, classes, dim));

    Rng rng(seed);
    data.samples.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const int cls = i % classes;
        DatasetHandle::Sample s;
        s.label = cls;
        s.image = patterns[static_cast<std::size_t>(cls)];
        if (noise > 0.0) {
            for (auto& v : s.image) {
                v = std::clamp(v + rng.uniform(-noise, noise), 0.0, 1.0);
            }
        }
        data.samples.push_back(std::move(s));
    }
    return data;
}

Tensor4 make_batch(const DatasetHandle& data, std::span<const int> indices) {
    if (indices.empty()) throw ContractError("make_batch: empty index list");
    const int plane = data.height * data.width;
    Tensor4 batch = Tensor4::zeros(
        {static_cast<int>(indices.size()), data.channels, data.height, data.width});
    auto bv = batch.mutable_values();
    const bool normalized = !data.mean.empty();
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const int idx = indices[b];
        if (idx < 0 || idx >= static_cast<int>(data.samples.size())) {
            throw ContractError("make_batch: index " + std::to_string(idx) + " out of range");
        }
        const auto& img = data.samples[static_cast<std::size_t>(idx)].image;
        for (int c = 0; c < data.channels; ++c) {
            const Scalar m = normalized ? data.mean[static_cast<std::size_t>(c)] : 0.0;
            const Scalar sd = normalized ? data.stdev[static_cast<std::size_t>(c)] : 1.0;
            for (int i = 0; i < plane; ++i) {
                bv[(b * data.channels + c) * plane + i] =
                    (img[static_cast<std::size_t>(c * plane + i)] - m) / sd;
            }
        }
    }
    return batch;
}

std::vector<int> batch_labels(const DatasetHandle& data, std::span<const int> indices) {
    std::vector<int> labels;
    labels.reserve(indices.size());
    for (int idx : indices) {
        labels.push_back(data.samples[static_cast<std::size_t>(idx)].label);
    }
    return labels;
}

}  // namespace attnkit
