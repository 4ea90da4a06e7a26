#pragma once

// Image classification datasets in [0, 1], N x C x H x W.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "robnas/tensor.hpp"

namespace robnas {

struct Batch {
    Tensor x;
    std::vector<std::size_t> y;
};

struct Dataset {
    Tensor images;
    std::vector<std::size_t> labels;
    std::size_t classes = 0;
    std::string name;

    std::size_t size() const { return labels.size(); }
    Shape example_shape() const { return Shape(images.shape().begin() + 1, images.shape().end()); }
    /// Throws FormatError when pixels leave [0, 1], labels leave [0, K) or N = 0.
    void validate() const;
    Dataset subset(const std::vector<std::size_t>& rows) const;
    Batch batch(const std::vector<std::size_t>& rows) const;
    Batch all() const { return {images, labels}; }
};

/// Big-endian IDX pair (magic 2051 images, 2049 labels); pixels scaled by 1/255.
/// `target_hw` > 0 area-averages every image down to target_hw x target_hw;
/// `limit` > 0 keeps the first `limit` examples.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t target_hw = 0,
                 std::size_t limit = 0);

/// Area-weighted average resampling of N x C x H x W to N x C x hw x hw.
Tensor downsample(const Tensor& images, std::size_t hw);

enum class SyntheticKind { blobs, stripes };

SyntheticKind parse_synthetic_kind(std::string_view s);

/// blobs: one random prototype image per class plus Gaussian pixel noise.
/// stripes: oriented sinusoidal gratings, one orientation per class, with
/// phase jitter and pixel noise proportional to `noise`. Pixels are clamped to [0, 1].
Dataset make_synthetic(SyntheticKind kind, std::size_t n, std::size_t hw, std::size_t classes, Real noise,
                       std::uint64_t seed);

struct Splits {
    Dataset train, val, test;
};

/// Seeded shuffle, then floor(f * N) examples per split; the rounding remainder
/// floor(sum(f) * N) - sum(floor(f * N)) goes to train.
Splits split(const Dataset& d, std::array<Real, 3> fractions, std::uint64_t seed);

void save_dataset(const std::filesystem::path& path, const Dataset& d);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace robnas
