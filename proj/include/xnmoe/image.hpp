#pragma once

// Image decoding (OpenCV codecs), face cropping and bilinear resizing into
// normalized N×H×W×3 tensors.

#include "xnmoe/error.hpp"
#include "xnmoe/tensor.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace xnmoe {

/// 8-bit interleaved pixels, 1 (gray) or 3 (RGB) channels.
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 0;
    std::vector<std::uint8_t> pixels;

    std::uint8_t at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
};

/// Relative face box: origin and extent as fractions of the image size.
struct BBox {
    double x = 0.0;
    double y = 0.0;
    double w = 1.0;
    double h = 1.0;
};

inline constexpr double kBoxMargin = 0.10;

inline Image decode_image(const std::filesystem::path& path)
{
    cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (m.empty()) throw DataError("cannot decode image: " + path.string());
    if (m.depth() != CV_8U) throw DataError("unsupported bit depth (8-bit required): " + path.string());
    Image img;
    img.height = static_cast<std::size_t>(m.rows);
    img.width = static_cast<std::size_t>(m.cols);
    const int ch = m.channels();
    if (ch == 1) {
        img.channels = 1;
        img.pixels.resize(img.height * img.width);
        for (int y = 0; y < m.rows; ++y) {
            const auto* row = m.ptr<std::uint8_t>(y);
            std::copy(row, row + m.cols, img.pixels.begin() + static_cast<std::ptrdiff_t>(y) * m.cols);
        }
    } else if (ch == 3 || ch == 4) {
        // OpenCV stores BGR(A); alpha is dropped.
        img.channels = 3;
        img.pixels.resize(img.height * img.width * 3);
        for (int y = 0; y < m.rows; ++y) {
            const auto* row = m.ptr<std::uint8_t>(y);
            for (int x = 0; x < m.cols; ++x) {
                auto* dst = img.pixels.data() + (static_cast<std::size_t>(y) * img.width + static_cast<std::size_t>(x)) * 3;
                dst[0] = row[x * ch + 2];
                dst[1] = row[x * ch + 1];
                dst[2] = row[x * ch + 0];
            }
        }
    } else {
        throw DataError("unsupported channel count " + std::to_string(ch) + ": " + path.string());
    }
    return img;
}

/// Writes an 8-bit gray or RGB image; the format follows the extension (.png, .jpg).
inline void encode_image(const std::filesystem::path& path, const Image& img)
{
    cv::Mat m;
    if (img.channels == 1) {
        m = cv::Mat(static_cast<int>(img.height), static_cast<int>(img.width), CV_8UC1,
                    const_cast<std::uint8_t*>(img.pixels.data()))
                .clone();
    } else if (img.channels == 3) {
        m = cv::Mat(static_cast<int>(img.height), static_cast<int>(img.width), CV_8UC3);
        for (std::size_t y = 0; y < img.height; ++y) {
            auto* row = m.ptr<std::uint8_t>(static_cast<int>(y));
            for (std::size_t x = 0; x < img.width; ++x) {
                row[x * 3 + 0] = img.at(y, x, 2);
                row[x * 3 + 1] = img.at(y, x, 1);
                row[x * 3 + 2] = img.at(y, x, 0);
            }
        }
    } else {
        throw DataError("encode_image: channels must be 1 or 3");
    }
    if (!cv::imwrite(path.string(), m)) throw DataError("cannot write image: " + path.string());
}

/// Pixel rectangle [x0, x1) × [y0, y1).
struct PixelRect {
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};

/// Grows a relative box by kBoxMargin of its size on every side, clamps it to the
/// image and converts to pixels (floor of the start, ceil of the end).
inline PixelRect crop_rect(const BBox& box, std::size_t width, std::size_t height)
{
    if (!(box.w > 0.0) || !(box.h > 0.0)) throw DataError("bounding box must have positive width and height");
    const double fx0 = std::clamp(box.x - kBoxMargin * box.w, 0.0, 1.0);
    const double fy0 = std::clamp(box.y - kBoxMargin * box.h, 0.0, 1.0);
    const double fx1 = std::clamp(box.x + box.w + kBoxMargin * box.w, 0.0, 1.0);
    const double fy1 = std::clamp(box.y + box.h + kBoxMargin * box.h, 0.0, 1.0);
    const auto W = static_cast<double>(width), H = static_cast<double>(height);
    PixelRect r;
    r.x0 = static_cast<std::size_t>(std::floor(fx0 * W));
    r.y0 = static_cast<std::size_t>(std::floor(fy0 * H));
    r.x1 = std::min(width, static_cast<std::size_t>(std::ceil(fx1 * W)));
    r.y1 = std::min(height, static_cast<std::size_t>(std::ceil(fy1 * H)));
    if (r.x1 <= r.x0 || r.y1 <= r.y0) throw DataError("bounding box has zero area after clamping");
    return r;
}

/// Crops (optional box), resizes to size×size with bilinear sampling, replicates gray
/// to three channels and scales to [0, 1]. Writes size·size·3 values to `out`.
///
/// Sampling uses pixel-centre alignment: source = (dst + 0.5)·scale − 0.5, clamped
/// to the crop, so a constant image stays exactly constant.
template <class T>
void preprocess_into(const Image& img, const std::optional<BBox>& box, std::size_t size, T* out)
{
    const PixelRect r = box ? crop_rect(*box, img.width, img.height) : PixelRect{0, 0, img.width, img.height};
    const std::size_t cw = r.x1 - r.x0, chh = r.y1 - r.y0;
    const double sx = static_cast<double>(cw) / static_cast<double>(size);
    const double sy = static_cast<double>(chh) / static_cast<double>(size);

    struct Tap {
        std::size_t i0, i1;
        double f;
    };
    auto taps = [&](std::size_t n, double scale, std::size_t origin) {
        std::vector<Tap> t(size);
        for (std::size_t d = 0; d < size; ++d) {
            double s = (static_cast<double>(d) + 0.5) * scale - 0.5;
            s = std::clamp(s, 0.0, static_cast<double>(n - 1));
            const auto i0 = static_cast<std::size_t>(std::floor(s));
            const std::size_t i1 = std::min(i0 + 1, n - 1);
            t[d] = Tap{origin + i0, origin + i1, s - static_cast<double>(i0)};
        }
        return t;
    };
    const auto tx = taps(cw, sx, r.x0);
    const auto ty = taps(chh, sy, r.y0);

    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            T* px = out + (y * size + x) * 3;
            for (std::size_t c = 0; c < 3; ++c) {
                const std::size_t sc = img.channels == 1 ? 0 : c;
                const double a = img.at(ty[y].i0, tx[x].i0, sc), b = img.at(ty[y].i0, tx[x].i1, sc);
                const double cc = img.at(ty[y].i1, tx[x].i0, sc), d = img.at(ty[y].i1, tx[x].i1, sc);
                const double top = a + tx[x].f * (b - a);
                const double bot = cc + tx[x].f * (d - cc);
                const double v = (top + ty[y].f * (bot - top)) / 255.0;
                px[c] = static_cast<T>(std::clamp(v, 0.0, 1.0));
            }
        }
}

template <class T>
Tensor<T> preprocess(const Image& img, const std::optional<BBox>& box, std::size_t size = 224)
{
    Tensor<T> out(Shape{size, size, 3});
    preprocess_into(img, box, size, out.ptr());
    return out;
}

} // namespace xnmoe
