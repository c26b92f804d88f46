#include "polyseg/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "polyseg/errors.hpp"
#include "polyseg/image_io.hpp"
#include "polyseg/rng.hpp"

namespace polyseg {

namespace fs = std::filesystem;

namespace {

bool has_image_ext(const fs::path& p) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
    return e == ".jpg" || e == ".jpeg" || e == ".png";
}

std::map<std::string, fs::path> list_by_stem(const fs::path& dir) {
    std::map<std::string, fs::path> out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file() || !has_image_ext(entry.path())) continue;
        const std::string stem = entry.path().stem().string();
        if (!out.emplace(stem, entry.path()).second)
            throw LoadError("duplicate stem '" + stem + "' in " + dir.string());
    }
    return out;
}

double bilinear_zero(const double* p, int h, int w, double sy, double sx) {
    const int y0 = static_cast<int>(std::floor(sy));
    const int x0 = static_cast<int>(std::floor(sx));
    const double wy = sy - y0;
    const double wx = sx - x0;
    auto at = [&](int y, int x) {
        return (y < 0 || y >= h || x < 0 || x >= w) ? 0.0 : p[static_cast<std::size_t>(y) * w + x];
    };
    return at(y0, x0) * (1.0 - wy) * (1.0 - wx) + at(y0, x0 + 1) * (1.0 - wy) * wx +
           at(y0 + 1, x0) * wy * (1.0 - wx) + at(y0 + 1, x0 + 1) * wy * wx;
}

double nearest_zero(const double* p, int h, int w, double sy, double sx) {
    const long y = std::lround(sy);
    const long x = std::lround(sx);
    return (y < 0 || y >= h || x < 0 || x >= w) ? 0.0 : p[static_cast<std::size_t>(y) * w + x];
}

/// Apply an inverse pixel mapping (dest -> source coords) jointly to image
/// (bilinear) and mask (nearest), both zero-padded outside the frame.
template <typename MapFn>
ImageSample apply_geometric(const ImageSample& s, MapFn&& dest_to_src) {
    const int h = s.mask.dim(0), w = s.mask.dim(1);
    ImageSample out;
    out.id = s.id;
    out.image = Tensor({3, h, w});
    out.mask = Tensor({h, w});
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            const auto [sy, sx] = dest_to_src(r, c);
            for (int ch = 0; ch < 3; ++ch) {
                const double* plane = s.image.data() + static_cast<std::size_t>(ch) * h * w;
                out.image.at(ch, r, c) = bilinear_zero(plane, h, w, sy, sx);
            }
            out.mask.at(r, c) = nearest_zero(s.mask.data(), h, w, sy, sx);
        }
    return out;
}

void check_sample(const ImageSample& s, const char* op) {
    if (s.image.ndim() != 3 || s.image.dim(0) != 3 || s.mask.ndim() != 2)
        throw ShapeError(std::string(op) + ": malformed sample '" + s.id + "'");
    if (s.image.dim(1) != s.mask.dim(0) || s.image.dim(2) != s.mask.dim(1))
        throw ShapeError(std::string(op) + ": image/mask dimensions differ for '" + s.id + "'");
}

} // namespace

std::vector<std::pair<fs::path, fs::path>> list_dataset_pairs(const fs::path& root) {
    const fs::path img_dir = root / "images";
    const fs::path mask_dir = root / "masks";
    if (!fs::is_directory(img_dir) || !fs::is_directory(mask_dir))
        throw LoadError("dataset root '" + root.string() +
                        "' must contain images/ and masks/ directories");

    auto images = list_by_stem(img_dir);
    auto masks = list_by_stem(mask_dir);
    for (const auto& [stem, path] : images)
        if (!masks.count(stem)) throw LoadError("no mask for image '" + path.string() + "'");
    for (const auto& [stem, path] : masks)
        if (!images.count(stem)) throw LoadError("no image for mask '" + path.string() + "'");

    std::vector<std::pair<fs::path, fs::path>> out;
    out.reserve(images.size());
    for (const auto& [stem, path] : images) // std::map iterates sorted by id
        out.emplace_back(path, masks.at(stem));
    return out;
}

ImageSample load_sample(const fs::path& image_path, const fs::path& mask_path) {
    ImageSample s;
    s.id = image_path.stem().string();
    s.image = load_image_rgb(image_path);
    s.mask = binarize_mask(load_image_gray(mask_path));
    if (s.image.dim(1) != s.mask.dim(0) || s.image.dim(2) != s.mask.dim(1))
        throw LoadError("image/mask size mismatch for '" + image_path.string() + "': image " +
                        s.image.shape_str() + ", mask " + s.mask.shape_str());
    return s;
}

std::vector<ImageSample> load_dataset(const fs::path& root) {
    std::vector<ImageSample> out;
    for (const auto& [img, mask] : list_dataset_pairs(root)) out.push_back(load_sample(img, mask));
    return out;
}

Tensor binarize_mask(const Tensor& gray, int threshold) {
    if (threshold < 0 || threshold > 255)
        throw DomainError("binarize_mask: threshold must be in [0, 255]");
    if (gray.ndim() != 2)
        throw ShapeError("binarize_mask: expected H x W, got " + gray.shape_str());
    Tensor out(gray.shape());
    const double* g = gray.data();
    double* o = out.data();
    for (std::size_t i = 0; i < gray.numel(); ++i) o[i] = g[i] > threshold ? 1.0 : 0.0;
    return out;
}

bool has_foreground(const Tensor& mask) {
    const double* p = mask.data();
    for (std::size_t i = 0; i < mask.numel(); ++i)
        if (p[i] != 0.0) return true;
    return false;
}

BBox mask_bbox(const Tensor& mask, double margin) {
    if (mask.ndim() != 2)
        throw ShapeError("mask_bbox: expected H x W, got " + mask.shape_str());
    if (margin < 0.0) throw DomainError("mask_bbox: margin must be >= 0");
    const int h = mask.dim(0), w = mask.dim(1);
    int ymin = h, ymax = -1, xmin = w, xmax = -1;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if (mask.at(y, x) != 0.0) {
                ymin = std::min(ymin, y);
                ymax = std::max(ymax, y);
                xmin = std::min(xmin, x);
                xmax = std::max(xmax, x);
            }
    if (ymax < 0) throw DomainError("mask_bbox: no foreground");

    const int bw = xmax - xmin + 1;
    const int bh = ymax - ymin + 1;
    const int expand = static_cast<int>(std::lround(margin * std::max(bw, bh)));
    const int x0 = std::max(0, xmin - expand);
    const int y0 = std::max(0, ymin - expand);
    const int x1 = std::min(w - 1, xmax + expand);
    const int y1 = std::min(h - 1, ymax + expand);
    return BBox{x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

ImageSample crop_to_bbox(const ImageSample& sample, const BBox& box) {
    check_sample(sample, "crop_to_bbox");
    const int h = sample.mask.dim(0), w = sample.mask.dim(1);
    if (box.width < 1 || box.height < 1 || box.x0 < 0 || box.y0 < 0 ||
        box.x0 + box.width > w || box.y0 + box.height > h)
        throw ShapeError("crop_to_bbox: box outside image bounds");

    ImageSample out;
    out.id = sample.id + ".crop";
    out.image = Tensor({3, box.height, box.width});
    out.mask = Tensor({box.height, box.width});
    for (int y = 0; y < box.height; ++y) {
        for (int ch = 0; ch < 3; ++ch)
            for (int x = 0; x < box.width; ++x)
                out.image.at(ch, y, x) = sample.image.at(ch, box.y0 + y, box.x0 + x);
        for (int x = 0; x < box.width; ++x) out.mask.at(y, x) = sample.mask.at(box.y0 + y, box.x0 + x);
    }
    return out;
}

ImageSample augment(const ImageSample& sample, const AugmentOp& op, std::uint64_t /*seed*/) {
    check_sample(sample, "augment");
    const int h = sample.mask.dim(0), w = sample.mask.dim(1);
    const double cy = (h - 1) / 2.0;
    const double cx = (w - 1) / 2.0;

    if (const auto* rot = std::get_if<RotationOp>(&op)) {
        if (rot->angle_deg < -180.0 || rot->angle_deg > 180.0)
            throw DomainError("augment: rotation angle must be in [-180, 180] degrees");
        const double rad = rot->angle_deg * std::acos(-1.0) / 180.0;
        double cs = std::cos(rad), sn = std::sin(rad);
        if (std::fmod(rot->angle_deg, 90.0) == 0.0) {
            // exact lattice rotation at right angles
            cs = std::round(cs);
            sn = std::round(sn);
        }
        return apply_geometric(sample, [&](int r, int c) {
            const double dy = r - cy, dx = c - cx;
            return std::pair<double, double>(cy + cs * dy + sn * dx, cx - sn * dy + cs * dx);
        });
    }
    const auto& zoom = std::get<ZoomOp>(op);
    if (zoom.factor < 0.5 || zoom.factor > 2.0)
        throw DomainError("augment: zoom factor must be in [0.5, 2.0]");
    const double inv = 1.0 / zoom.factor;
    return apply_geometric(sample, [&](int r, int c) {
        return std::pair<double, double>(cy + (r - cy) * inv, cx + (c - cx) * inv);
    });
}

std::pair<std::vector<ImageSample>, std::vector<ImageSample>> split(
    const std::vector<ImageSample>& samples, double train_fraction, std::uint64_t seed) {
    if (samples.empty()) throw DomainError("split: empty sample sequence");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw DomainError("split: train_fraction must be in (0, 1)");

    std::vector<std::size_t> idx(samples.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng(seed);
    rng.shuffle(idx);

    const auto train_n =
        static_cast<std::size_t>(std::floor(static_cast<double>(samples.size()) * train_fraction));
    std::pair<std::vector<ImageSample>, std::vector<ImageSample>> out;
    out.first.reserve(train_n);
    out.second.reserve(samples.size() - train_n);
    for (std::size_t i = 0; i < idx.size(); ++i)
        (i < train_n ? out.first : out.second).push_back(samples[idx[i]]);
    return out;
}

ImageSample resize(const ImageSample& sample, int out_h, int out_w) {
    check_sample(sample, "resize");
    if (out_h < 8 || out_w < 8) throw DomainError("resize: target dimensions must be >= 8");
    const int h = sample.mask.dim(0), w = sample.mask.dim(1);

    ImageSample out;
    out.id = sample.id;
    out.image = Tensor({3, out_h, out_w});
    out.mask = Tensor({out_h, out_w});
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(w) / out_w;
    for (int r = 0; r < out_h; ++r)
        for (int c = 0; c < out_w; ++c) {
            double src_y = (r + 0.5) * sy - 0.5;
            double src_x = (c + 0.5) * sx - 0.5;
            // clamp to the frame: resize replicates edges rather than zero-pads
            src_y = std::clamp(src_y, 0.0, static_cast<double>(h - 1));
            src_x = std::clamp(src_x, 0.0, static_cast<double>(w - 1));
            for (int ch = 0; ch < 3; ++ch) {
                const double* plane = sample.image.data() + static_cast<std::size_t>(ch) * h * w;
                out.image.at(ch, r, c) = bilinear_zero(plane, h, w, src_y, src_x);
            }
            out.mask.at(r, c) = nearest_zero(sample.mask.data(), h, w, src_y, src_x);
        }
    return out;
}

} // namespace polyseg
