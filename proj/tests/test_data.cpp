#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "attnkit/data.hpp"

using namespace attnkit;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream os(path, std::ios::binary);
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> cifar_record(unsigned char label, unsigned char seed) {
    std::vector<unsigned char> rec(3073);
    rec[0] = label;
    for (int i = 0; i < 3072; ++i) {
        rec[static_cast<std::size_t>(i + 1)] = static_cast<unsigned char>((i * 7 + seed) % 256);
    }
    return rec;
}

}  // namespace

TEST_CASE("cifar loader: handcrafted two-record fixture decodes exactly") {
    const std::string path = temp_path("attnkit_cifar_fixture.bin");
    std::vector<unsigned char> bytes = cifar_record(3, 11);
    std::vector<unsigned char> second = cifar_record(9, 101);
    bytes.insert(bytes.end(), second.begin(), second.end());
    write_bytes(path, bytes);

    DatasetHandle data = load_cifar10(path);
    REQUIRE(data.size() == 2);
    CHECK(data.height == 32);
    CHECK(data.width == 32);
    CHECK(data.samples[0].label == 3);
    CHECK(data.samples[1].label == 9);
    for (int i = 0; i < 3072; ++i) {
        const Scalar expect = static_cast<Scalar>((i * 7 + 11) % 256) / 255.0;
        CHECK(data.samples[0].image[static_cast<std::size_t>(i)] == expect);
    }
    std::filesystem::remove(path);
}

TEST_CASE("cifar loader: empty file gives zero samples without error") {
    const std::string path = temp_path("attnkit_cifar_empty.bin");
    write_bytes(path, {});
    DatasetHandle data = load_cifar10(path);
    CHECK(data.size() == 0);
    std::filesystem::remove(path);
}

TEST_CASE("cifar loader: truncated record is a format error naming the offset") {
    const std::string path = temp_path("attnkit_cifar_trunc.bin");
    std::vector<unsigned char> bytes = cifar_record(1, 5);
    bytes.resize(3073 + 100);  // one full record plus 100 stray bytes
    write_bytes(path, bytes);
    try {
        load_cifar10(path);
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("3073") != std::string::npos);
    }
    std::filesystem::remove(path);
}

TEST_CASE("cifar loader: label above 9 is a format error") {
    const std::string path = temp_path("attnkit_cifar_badlabel.bin");
    write_bytes(path, cifar_record(10, 1));
    CHECK_THROWS_AS(load_cifar10(path), FormatError);
    std::filesystem::remove(path);
}

TEST_CASE("cifar loader: missing file is an io error") {
    CHECK_THROWS_AS(load_cifar10(temp_path("attnkit_no_such_file.bin")), IoError);
}

TEST_CASE("synthetic: seeded generation reproduces bitwise") {
    DatasetHandle a = gen_synthetic(4, 20, 0.1, 99);
    DatasetHandle b = gen_synthetic(4, 20, 0.1, 99);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a.samples[i].label == b.samples[i].label);
        CHECK(a.samples[i].image == b.samples[i].image);
    }
    DatasetHandle c = gen_synthetic(4, 20, 0.1, 100);
    CHECK(a.samples[0].image != c.samples[0].image);
}

TEST_CASE("synthetic: class balance is exact when classes divides n") {
    DatasetHandle d = gen_synthetic(4, 40, 0.0, 1);
    int counts[4] = {0, 0, 0, 0};
    for (const auto& s : d.samples) ++counts[s.label];
    for (int c = 0; c < 4; ++c) CHECK(counts[c] == 10);
}

TEST_CASE("synthetic: zero noise makes same-class samples identical") {
    DatasetHandle d = gen_synthetic(3, 12, 0.0, 7);
    for (std::size_t i = 3; i < d.size(); ++i) {
        CHECK(d.samples[i].image == d.samples[i - 3].image);
    }
    for (const auto& s : d.samples) {
        for (Scalar v : s.image) {
            CHECK(v >= 0.0);
            CHECK(v <= 1.0);
        }
    }
    // Distinct classes get distinct patterns.
    CHECK(d.samples[0].image != d.samples[1].image);
}

TEST_CASE("make_batch applies the configured normalization") {
    DatasetHandle d = gen_synthetic(2, 4, 0.0, 3);
    d.mean = {0.5, 0.25, 0.0};
    d.stdev = {0.5, 1.0, 2.0};
    const int idx[2] = {1, 3};
    Tensor4 batch = make_batch(d, idx);
    CHECK(batch.shape() == Shape4{2, 3, 16, 16});
    const int plane = 256;
    for (int b = 0; b < 2; ++b)
        for (int c = 0; c < 3; ++c)
            for (int i = 0; i < plane; i += 37) {
                const Scalar raw =
                    d.samples[static_cast<std::size_t>(idx[b])].image[static_cast<std::size_t>(
                        c * plane + i)];
                const Scalar expect = (raw - d.mean[static_cast<std::size_t>(c)]) /
                                      d.stdev[static_cast<std::size_t>(c)];
                CHECK(batch.values()[static_cast<std::size_t>((b * 3 + c) * plane + i)] ==
                      expect);
            }
    std::vector<int> labels = batch_labels(d, idx);
    CHECK(labels == std::vector<int>{1, 1});
}

TEST_CASE("make_batch validates indices") {
    DatasetHandle d = gen_synthetic(2, 4, 0.0, 3);
    const int bad[1] = {4};
    CHECK_THROWS_AS(make_batch(d, bad), ContractError);
    CHECK_THROWS_AS(make_batch(d, std::span<const int>{}), ContractError);
}
