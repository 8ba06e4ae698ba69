#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "phyto/error.hpp"

namespace phyto {

/// Dense interleaved image, row-major, `Channels` samples per pixel.
template <typename T, int Channels>
class Image {
public:
    using value_type = T;
    static constexpr int channels = Channels;

    Image() = default;
    Image(int width, int height, T fill = T{})
        : width_(width), height_(height),
          data_(static_cast<std::size_t>(width) * height * Channels, fill) {
        if (width < 0 || height < 0) fail(Errc::InvalidArgument, "negative image dimensions");
    }

    [[nodiscard]] int width() const noexcept { return width_; }
    [[nodiscard]] int height() const noexcept { return height_; }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }
    [[nodiscard]] std::size_t pixel_count() const noexcept {
        return static_cast<std::size_t>(width_) * height_;
    }

    [[nodiscard]] T& at(int x, int y, int c = 0) noexcept { return data_[offset(x, y) + c]; }
    [[nodiscard]] const T& at(int x, int y, int c = 0) const noexcept {
        return data_[offset(x, y) + c];
    }

    /// Clamp-to-edge access.
    [[nodiscard]] const T& clamped(int x, int y, int c = 0) const noexcept {
        return at(std::clamp(x, 0, width_ - 1), std::clamp(y, 0, height_ - 1), c);
    }

    [[nodiscard]] T* pixel(int x, int y) noexcept { return data_.data() + offset(x, y); }
    [[nodiscard]] const T* pixel(int x, int y) const noexcept { return data_.data() + offset(x, y); }

    [[nodiscard]] std::span<T> data() noexcept { return data_; }
    [[nodiscard]] std::span<const T> data() const noexcept { return data_; }

    [[nodiscard]] bool same_size(const auto& other) const noexcept {
        return width_ == other.width() && height_ == other.height();
    }

    [[nodiscard]] Image crop(int x0, int y0, int w, int h) const {
        if (x0 < 0 || y0 < 0 || w < 0 || h < 0 || x0 + w > width_ || y0 + h > height_)
            fail(Errc::InvalidArgument, "crop outside image");
        Image out(w, h);
        for (int y = 0; y < h; ++y)
            std::copy_n(pixel(x0, y0 + y), static_cast<std::size_t>(w) * Channels, out.pixel(0, y));
        return out;
    }

    friend bool operator==(const Image&, const Image&) = default;

private:
    [[nodiscard]] std::size_t offset(int x, int y) const noexcept {
        return (static_cast<std::size_t>(y) * width_ + x) * Channels;
    }

    int width_ = 0;
    int height_ = 0;
    std::vector<T> data_;
};

using RgbImage = Image<std::uint8_t, 3>;
using GrayImage = Image<double, 1>;

inline double luminance(double r, double g, double b) noexcept {
    return 0.299 * r + 0.587 * g + 0.114 * b;
}

template <typename T>
GrayImage to_luminance(const Image<T, 3>& rgb) {
    GrayImage out(rgb.width(), rgb.height());
    for (int y = 0; y < rgb.height(); ++y)
        for (int x = 0; x < rgb.width(); ++x)
            out.at(x, y) = luminance(rgb.at(x, y, 0), rgb.at(x, y, 1), rgb.at(x, y, 2));
    return out;
}

}  // namespace phyto
