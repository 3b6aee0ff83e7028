#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cimq/error.hpp"
#include "cimq/rng.hpp"
#include "cimq/tensor.hpp"

namespace cimq {

/// Labelled images, NCHW, pixel values in [0, 1].
struct Dataset {
    Tensor<double> images;
    std::vector<int> labels;
    int num_classes = 2;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t channels() const { return images.dim(1); }
    std::size_t height() const { return images.dim(2); }
    std::size_t width() const { return images.dim(3); }
    std::size_t image_size() const { return channels() * height() * width(); }

    Tensor<double> batch(std::span<const std::size_t> idx) const
    {
        const std::size_t e = image_size();
        Tensor<double> out({idx.size(), channels(), height(), width()});
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy_n(images.data() + idx[i] * e, e, out.data() + i * e);
        return out;
    }
    std::vector<int> batch_labels(std::span<const std::size_t> idx) const
    {
        std::vector<int> out(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
        return out;
    }
};

struct SyntheticSpec {
    std::size_t count = 1000;
    std::size_t size = 16;
    double angle_deg = 25.0;      // class 0 blob axis at -angle, class 1 at +angle
    double angle_jitter_deg = 15.0;
    double blob_amplitude = 0.6;
    double grating_amplitude = 0.1;
    double pixel_noise = 0.1;
    double background = 0.0;

    bool operator==(const SyntheticSpec&) const = default;
};

/// Two classes of elongated Gaussian blobs told apart by orientation, over a random
/// sinusoidal grating and pixel noise. Pixels are clamped to [0, 1].
inline Dataset make_synthetic(const SyntheticSpec& spec, std::uint64_t seed)
{
    require(spec.count >= 1, "synthetic dataset needs at least one image");
    require(spec.size >= 4, "synthetic image size must be >= 4");
    const std::size_t n = spec.count, sz = spec.size;
    Rng rng(seed);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> normal(0.0, 1.0);
    Dataset d;
    d.num_classes = 2;
    d.images = Tensor<double>({n, 1, sz, sz});
    d.labels.resize(n);
    const double half = static_cast<double>(sz) / 2.0;
    const double deg = std::numbers::pi / 180.0;
    for (std::size_t i = 0; i < n; ++i) {
        const int label = uni(rng) < 0.5 ? 0 : 1;
        d.labels[i] = label;
        const double angle = ((label ? 1.0 : -1.0) * spec.angle_deg + spec.angle_jitter_deg * normal(rng)) * deg;
        const double cx = half + (uni(rng) - 0.5) * half, cy = half + (uni(rng) - 0.5) * half;
        const double long_ax = 0.22 * static_cast<double>(sz) * (0.8 + 0.4 * uni(rng));
        const double short_ax = long_ax * 0.3;
        const double amp = spec.blob_amplitude * (0.6 + 0.8 * uni(rng));
        const double g_ang = uni(rng) * std::numbers::pi, g_freq = 0.4 + 0.6 * uni(rng);
        const double g_phase = uni(rng) * 2.0 * std::numbers::pi;
        const double ca = std::cos(angle), sa = std::sin(angle);
        for (std::size_t y = 0; y < sz; ++y)
            for (std::size_t x = 0; x < sz; ++x) {
                const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
                const double u = dx * ca + dy * sa, v = -dx * sa + dy * ca;
                const double blob = amp * std::exp(-0.5 * (u * u / (long_ax * long_ax) + v * v / (short_ax * short_ax)));
                const double grating =
                    spec.grating_amplitude *
                    (0.5 + 0.5 * std::sin(g_freq * (static_cast<double>(x) * std::cos(g_ang) +
                                                     static_cast<double>(y) * std::sin(g_ang)) + g_phase));
                const double px = spec.background + blob + grating + spec.pixel_noise * normal(rng);
                d.images.at(i, 0, y, x) = std::clamp(px, 0.0, 1.0);
            }
    }
    return d;
}

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// CIFAR-10 binary version: records of one label byte then 3072 bytes of 32×32 R, G, B planes.
inline Dataset load_cifar10_binary(const std::string& path, std::size_t max_records = 0)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw RuntimeError("cannot open CIFAR-10 file '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() % kCifarRecordBytes != 0) {
        const std::size_t whole = bytes.size() / kCifarRecordBytes;
        throw RuntimeError("truncated CIFAR-10 file '" + path + "': record " + std::to_string(whole) +
                           " starting at byte offset " + std::to_string(whole * kCifarRecordBytes) +
                           " is incomplete (file size " + std::to_string(bytes.size()) + ")");
    }
    std::size_t n = bytes.size() / kCifarRecordBytes;
    if (max_records > 0) n = std::min(n, max_records);
    require(n > 0, "CIFAR-10 file '" + path + "' holds no records");
    Dataset d;
    d.num_classes = 10;
    d.images = Tensor<double>({n, 3, 32, 32});
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const unsigned char* rec = bytes.data() + i * kCifarRecordBytes;
        if (rec[0] > 9)
            throw RuntimeError("CIFAR-10 label " + std::to_string(rec[0]) + " out of range at byte offset " +
                               std::to_string(i * kCifarRecordBytes));
        d.labels[i] = rec[0];
        for (std::size_t p = 0; p < 3072; ++p) d.images[i * 3072 + p] = static_cast<double>(rec[1 + p]) / 255.0;
    }
    return d;
}

/// Split off the first `n_first` samples.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& d, std::size_t n_first)
{
    require(n_first <= d.size(), "split point beyond dataset size");
    std::vector<std::size_t> a(n_first), b(d.size() - n_first);
    std::iota(a.begin(), a.end(), 0);
    std::iota(b.begin(), b.end(), n_first);
    return {Dataset{d.batch(a), d.batch_labels(a), d.num_classes}, Dataset{d.batch(b), d.batch_labels(b), d.num_classes}};
}

}  // namespace cimq
