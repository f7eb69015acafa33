#pragma once

// Labelled image collections: the procedural shape dataset and IDX files.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "dsd/tensor.hpp"

namespace dsd::data {

struct Dataset {
  Tensor images;  // [n, channels, size, size], pixels in [0, 1]
  std::vector<std::size_t> labels;
  std::size_t classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t image_size() const { return images.dim(2); }

  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> gather_labels(std::span<const std::size_t> indices) const;
  // Pixel-wise mean of all images with the given label, [channels, size, size].
  Tensor class_mean(std::size_t label) const;
};

inline constexpr std::size_t kShapeFamilies = 10;

// samples_per_class images per class; class k draws shapes from family
// k mod 10 (bars, disks, rings, crosses, checkers, ...) with randomized
// position, extent and intensity. Labels are class-major.
Dataset synth_dataset(std::size_t classes, std::size_t samples_per_class, std::size_t image_size, std::uint64_t seed,
                      std::size_t channels = 1);

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

// Throws DataError for a bad magic, an image/label count mismatch or a
// truncated file. Images are scaled to [0, 1], then centre-padded or
// area-resampled to image_size (0 keeps the stored size).
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::size_t image_size = 0);

// Single-channel datasets only; pixels quantized to bytes by round-half-up.
void write_idx(const Dataset& dataset, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

// Square resampling of one [channels, n, n] image.
Tensor resize_image(const Tensor& image, std::size_t size);

}  // namespace dsd::data
