#include "polyseg/image_io.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "polyseg/errors.hpp"

namespace polyseg {

Tensor load_image_rgb(const std::filesystem::path& path) {
    cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR); // BGR, 8-bit
    if (img.empty()) throw LoadError("cannot read image '" + path.string() + "'");
    const int h = img.rows, w = img.cols;
    Tensor t({3, h, w});
    for (int y = 0; y < h; ++y) {
        const cv::Vec3b* row = img.ptr<cv::Vec3b>(y);
        for (int x = 0; x < w; ++x) {
            t.at(0, y, x) = row[x][2] / 255.0; // R
            t.at(1, y, x) = row[x][1] / 255.0; // G
            t.at(2, y, x) = row[x][0] / 255.0; // B
        }
    }
    return t;
}

Tensor load_image_gray(const std::filesystem::path& path) {
    cv::Mat img = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (img.empty()) throw LoadError("cannot read mask '" + path.string() + "'");
    Tensor t({img.rows, img.cols});
    for (int y = 0; y < img.rows; ++y) {
        const std::uint8_t* row = img.ptr<std::uint8_t>(y);
        for (int x = 0; x < img.cols; ++x) t.at(y, x) = static_cast<double>(row[x]);
    }
    return t;
}

void save_image_png(const std::filesystem::path& path, const Tensor& image) {
    if (image.ndim() != 3 || image.dim(0) != 3)
        throw ShapeError("save_image_png: expected 3 x H x W, got " + image.shape_str());
    const int h = image.dim(1), w = image.dim(2);
    cv::Mat img(h, w, CV_8UC3);
    auto to_u8 = [](double v) {
        const double s = v * 255.0 + 0.5;
        return static_cast<std::uint8_t>(s < 0.0 ? 0.0 : (s > 255.0 ? 255.0 : s));
    };
    for (int y = 0; y < h; ++y) {
        cv::Vec3b* row = img.ptr<cv::Vec3b>(y);
        for (int x = 0; x < w; ++x) {
            row[x][2] = to_u8(image.at(0, y, x));
            row[x][1] = to_u8(image.at(1, y, x));
            row[x][0] = to_u8(image.at(2, y, x));
        }
    }
    if (!cv::imwrite(path.string(), img))
        throw LoadError("cannot write image '" + path.string() + "'");
}

void save_mask_png(const std::filesystem::path& path, const Tensor& mask) {
    if (mask.ndim() != 2)
        throw ShapeError("save_mask_png: expected H x W, got " + mask.shape_str());
    if (!is_binary(mask)) throw DomainError("save_mask_png: mask must be binary {0,1}");
    const int h = mask.dim(0), w = mask.dim(1);
    cv::Mat img(h, w, CV_8UC1);
    for (int y = 0; y < h; ++y) {
        std::uint8_t* row = img.ptr<std::uint8_t>(y);
        for (int x = 0; x < w; ++x) row[x] = mask.at(y, x) == 1.0 ? 255 : 0;
    }
    if (!cv::imwrite(path.string(), img))
        throw LoadError("cannot write mask '" + path.string() + "'");
}

} // namespace polyseg
