#pragma once

#include <filesystem>

#include "polyseg/tensor.hpp"

namespace polyseg {

/// Decode an image file to an RGB tensor 3 x H x W with values in [0, 1].
/// Throws LoadError naming the file on failure.
Tensor load_image_rgb(const std::filesystem::path& path);

/// Decode an image file to a grayscale tensor H x W with values in [0, 255].
Tensor load_image_gray(const std::filesystem::path& path);

/// Write a 3 x H x W tensor in [0, 1] as an 8-bit PNG.
void save_image_png(const std::filesystem::path& path, const Tensor& image);

/// Write a binary H x W mask as an 8-bit PNG with values {0, 255}.
void save_mask_png(const std::filesystem::path& path, const Tensor& mask);

} // namespace polyseg
