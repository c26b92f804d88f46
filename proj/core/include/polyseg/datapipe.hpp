#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "polyseg/tensor.hpp"

namespace polyseg {

/// One RGB endoscopic image (3 x H x W in [0,1]) with its binary polyp mask (H x W).
struct ImageSample {
    std::string id;
    Tensor image;
    Tensor mask;
};

/// Axis-aligned pixel box; must lie fully inside the image it is applied to.
struct BBox {
    int x0 = 0;
    int y0 = 0;
    int width = 0;
    int height = 0;
    bool operator==(const BBox&) const = default;
};

/// Load a Kvasir-SEG style layout: root/images/* and root/masks/* with
/// matching filename stems (.jpg/.jpeg/.png). Masks are binarized at the
/// default threshold, samples sorted by id.
/// Throws LoadError naming the file for unmatched pairs or size mismatches.
std::vector<ImageSample> load_dataset(const std::filesystem::path& root);

/// Matched (image, mask) file pairs sorted by stem, same error semantics as
/// load_dataset but without reading pixels; lets callers stream large sets.
std::vector<std::pair<std::filesystem::path, std::filesystem::path>> list_dataset_pairs(
    const std::filesystem::path& root);

/// Load one pair; id is the image filename stem.
ImageSample load_sample(const std::filesystem::path& image_path,
                        const std::filesystem::path& mask_path);

/// 1 where gray > threshold else 0; strict inequality. Threshold in [0,255].
Tensor binarize_mask(const Tensor& gray, int threshold = 127);

/// Tight box over the foreground, expanded by margin*max(width,height) on each
/// side and clipped to the image. Throws DomainError("no foreground") when the
/// mask is empty.
BBox mask_bbox(const Tensor& mask, double margin = 0.0);

bool has_foreground(const Tensor& mask);

/// Crop image and mask to the identical region; id gains a ".crop" suffix.
ImageSample crop_to_bbox(const ImageSample& sample, const BBox& box);

struct RotationOp {
    double angle_deg = 0.0; // in [-180, 180]
};
struct ZoomOp {
    double factor = 1.0; // in [0.5, 2.0]
};
using AugmentOp = std::variant<RotationOp, ZoomOp>;

/// Apply the same geometric transform to image (bilinear, zero padding) and
/// mask (nearest-neighbor, zero padding). Output dimensions are unchanged and
/// the mask stays binary. The seed is part of the contract for future
/// stochastic ops; rotation and zoom ignore it.
ImageSample augment(const ImageSample& sample, const AugmentOp& op, std::uint64_t seed = 0);

/// Seeded shuffle then partition; train gets floor(n * train_fraction).
std::pair<std::vector<ImageSample>, std::vector<ImageSample>> split(
    const std::vector<ImageSample>& samples, double train_fraction, std::uint64_t seed);

/// Bilinear image / nearest-neighbor mask resize. H, W >= 8.
ImageSample resize(const ImageSample& sample, int out_h, int out_w);

} // namespace polyseg
