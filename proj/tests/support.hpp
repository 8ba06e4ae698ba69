#pragma once

// Test-only fixtures and generators. Nothing here calls into the code under test except to
// build inputs.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "phyto/image.hpp"
#include "phyto/stack_ingest.hpp"

namespace phyto::fixture {

namespace fs = std::filesystem;

inline fs::path fresh_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("phyto_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline GrayImage gaussian_blur(const GrayImage& src, double sigma) {
    if (sigma <= 0) return src;
    const int r = static_cast<int>(std::ceil(3 * sigma));
    std::vector<double> k(2 * r + 1);
    double s = 0;
    for (int i = -r; i <= r; ++i) s += k[i + r] = std::exp(-i * i / (2 * sigma * sigma));
    for (double& v : k) v /= s;
    GrayImage tmp(src.width(), src.height()), out(src.width(), src.height());
    for (int y = 0; y < src.height(); ++y)
        for (int x = 0; x < src.width(); ++x) {
            double a = 0;
            for (int i = -r; i <= r; ++i) a += k[i + r] * src.clamped(x + i, y);
            tmp.at(x, y) = a;
        }
    for (int y = 0; y < src.height(); ++y)
        for (int x = 0; x < src.width(); ++x) {
            double a = 0;
            for (int i = -r; i <= r; ++i) a += k[i + r] * tmp.clamped(x, y + i);
            out.at(x, y) = a;
        }
    return out;
}

/// Stack whose square regions are each in focus in exactly one plane. Texture is a
/// random-amplitude checkerboard on a smooth background; a region seen from plane z is the
/// texture blurred with sigma = defocus * |z - z_region|.
struct RegionStack {
    ingest::ZStack stack;
    Image<int, 1> truth;  // sharp plane per pixel
};

inline RegionStack make_region_stack(int w, int h, int n_slices, int region, std::uint64_t seed,
                                     double defocus = 0.8) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> amp(35.0, 60.0);
    std::uniform_int_distribution<int> plane(0, n_slices - 1);
    std::uniform_real_distribution<double> phase(0.0, 6.28);
    const double px = phase(rng), py = phase(rng);

    GrayImage texture(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double sign = ((x + y) % 2 == 0) ? 1.0 : -1.0;
            texture.at(x, y) = 128.0 + 25.0 * std::sin(x / 17.0 + px) * std::cos(y / 23.0 + py) + sign * amp(rng);
        }

    RegionStack out;
    out.truth = Image<int, 1>(w, h);
    const int rx = (w + region - 1) / region;
    const int ry = (h + region - 1) / region;
    std::vector<int> sharp(static_cast<std::size_t>(rx) * ry);
    for (auto& z : sharp) z = plane(rng);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.truth.at(x, y) = sharp[(y / region) * rx + (x / region)];

    std::vector<GrayImage> blurred(n_slices);
    for (int d = 0; d < n_slices; ++d) blurred[d] = gaussian_blur(texture, defocus * d);

    out.stack.slide_id = "UABPL-000001";
    out.stack.sector = 'a';
    out.stack.scale.n_slices = n_slices;
    for (int z = 0; z < n_slices; ++z) {
        RgbImage slice(w, h);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const int d = std::abs(z - out.truth.at(x, y));
                const double v = std::clamp(blurred[d].at(x, y), 0.0, 255.0);
                const auto g = static_cast<std::uint8_t>(std::lround(v));
                // Mild tint so channels are not identical.
                slice.at(x, y, 0) = g;
                slice.at(x, y, 1) = static_cast<std::uint8_t>(std::lround(v * 0.9));
                slice.at(x, y, 2) = static_cast<std::uint8_t>(std::lround(v * 0.8));
            }
        out.stack.slices.push_back(std::move(slice));
    }
    return out;
}

/// Smooth random texture (blurred white noise), values roughly in [40, 215].
inline GrayImage random_texture(int w, int h, std::uint64_t seed, double sigma = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 60.0);
    GrayImage g(w, h);
    for (auto& v : g.data()) v = n(rng);
    g = gaussian_blur(g, sigma);
    for (auto& v : g.data()) v = std::clamp(128.0 + 2.0 * v, 0.0, 255.0);
    return g;
}

inline RgbImage gray_to_rgb(const GrayImage& g) {
    RgbImage out(g.width(), g.height());
    for (int y = 0; y < g.height(); ++y)
        for (int x = 0; x < g.width(); ++x)
            for (int c = 0; c < 3; ++c)
                out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(g.at(x, y)), 0L, 255L));
    return out;
}

}  // namespace phyto::fixture
