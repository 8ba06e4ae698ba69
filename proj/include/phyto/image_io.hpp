#pragma once

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "phyto/error.hpp"
#include "phyto/image.hpp"
#include "phyto/util.hpp"

namespace phyto::io {

using Depth16 = Image<std::uint16_t, 1>;

namespace detail {

inline RgbImage from_mat(const cv::Mat& mat, const std::string& what) {
    if (mat.empty()) fail(Errc::IoFailure, "cannot decode image " + what);
    if (mat.depth() != CV_8U) fail(Errc::UnsupportedFormat, what + ": only 8-bit images are supported");
    cv::Mat bgr;
    switch (mat.channels()) {
    case 1: cv::cvtColor(mat, bgr, cv::COLOR_GRAY2BGR); break;
    case 3: bgr = mat; break;
    case 4: cv::cvtColor(mat, bgr, cv::COLOR_BGRA2BGR); break;
    default: fail(Errc::UnsupportedFormat, what + ": unsupported channel count");
    }
    RgbImage out(bgr.cols, bgr.rows);
    for (int y = 0; y < bgr.rows; ++y) {
        const auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < bgr.cols; ++x) {
            out.at(x, y, 0) = row[x][2];
            out.at(x, y, 1) = row[x][1];
            out.at(x, y, 2) = row[x][0];
        }
    }
    return out;
}

inline cv::Mat to_mat(const RgbImage& img) {
    cv::Mat bgr(img.height(), img.width(), CV_8UC3);
    for (int y = 0; y < img.height(); ++y) {
        auto* row = bgr.ptr<cv::Vec3b>(y);
        for (int x = 0; x < img.width(); ++x)
            row[x] = cv::Vec3b(img.at(x, y, 2), img.at(x, y, 1), img.at(x, y, 0));
    }
    return bgr;
}

inline const std::vector<int>& png_params() {
    static const std::vector<int> params{cv::IMWRITE_PNG_COMPRESSION, 6};
    return params;
}

}  // namespace detail

inline RgbImage read_rgb(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) fail(Errc::IoFailure, "missing image " + path.string());
    return detail::from_mat(cv::imread(path.string(), cv::IMREAD_UNCHANGED), path.string());
}

inline RgbImage decode_rgb(std::string_view bytes) {
    std::vector<std::uint8_t> buf(bytes.begin(), bytes.end());
    return detail::from_mat(cv::imdecode(buf, cv::IMREAD_UNCHANGED), "<buffer>");
}

inline std::string encode_png(const RgbImage& img) {
    std::vector<std::uint8_t> buf;
    if (!cv::imencode(".png", detail::to_mat(img), buf, detail::png_params()))
        fail(Errc::IoFailure, "PNG encode failed");
    return std::string(buf.begin(), buf.end());
}

inline void write_png(const std::filesystem::path& path, const RgbImage& img) {
    write_file(path, encode_png(img));
}

inline std::string encode_png16(const Depth16& img) {
    cv::Mat mat(img.height(), img.width(), CV_16UC1);
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x) mat.at<std::uint16_t>(y, x) = img.at(x, y);
    std::vector<std::uint8_t> buf;
    if (!cv::imencode(".png", mat, buf, detail::png_params())) fail(Errc::IoFailure, "PNG encode failed");
    return std::string(buf.begin(), buf.end());
}

inline Depth16 read_png16(const std::filesystem::path& path) {
    cv::Mat mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
    if (mat.empty() || mat.type() != CV_16UC1)
        fail(Errc::UnsupportedFormat, path.string() + ": expected 16-bit grayscale PNG");
    Depth16 out(mat.cols, mat.rows);
    for (int y = 0; y < mat.rows; ++y)
        for (int x = 0; x < mat.cols; ++x) out.at(x, y) = mat.at<std::uint16_t>(y, x);
    return out;
}

inline void write_jpg(const std::filesystem::path& path, const RgbImage& img, int quality = 100) {
    std::vector<std::uint8_t> buf;
    cv::imencode(".jpg", detail::to_mat(img), buf, {cv::IMWRITE_JPEG_QUALITY, quality});
    write_file(path, std::string(buf.begin(), buf.end()));
}

}  // namespace phyto::io
