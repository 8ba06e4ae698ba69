#pragma once

// Focus stacking: per-slice bilateral filtering, Laplacian focus response, argmax composition,
// log-space point thresholding, and two-chunk registration / colour gain correction.

#include <opencv2/core.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "phyto/error.hpp"
#include "phyto/image.hpp"
#include "phyto/point_cloud.hpp"
#include "phyto/stack_ingest.hpp"
#include "phyto/util.hpp"

namespace phyto::focus {

using ingest::ZStack;
using ResponseImage = Image<float, 1>;

struct ExtractionConfig {
    int bilateral_d = 15;
    double sigma_color = 35.0;
    std::optional<double> sigma_space;  // defaults to bilateral_d / 2
    int laplacian_ksize = 3;
    double k = 3.75;
    int final_bilateral_d = 20;

    [[nodiscard]] double effective_sigma_space() const {
        return sigma_space.value_or(bilateral_d / 2.0);
    }
    [[nodiscard]] double final_sigma_space() const { return final_bilateral_d / 2.0; }

    void validate() const {
        if (bilateral_d < 1 || final_bilateral_d < 1) fail(Errc::InvalidArgument, "bilateral diameter must be >= 1");
        if (!(sigma_color > 0) || !(effective_sigma_space() > 0))
            fail(Errc::InvalidArgument, "bilateral sigmas must be > 0");
        if (laplacian_ksize < 1 || laplacian_ksize % 2 == 0)
            fail(Errc::InvalidArgument, "laplacian_ksize must be odd and >= 1");
        if (!(k > 0)) fail(Errc::InvalidArgument, "threshold multiplier k must be > 0");
    }
};

/// Per-slice focus responses L >= 0.
struct FocusMap {
    int width = 0;
    int height = 0;
    std::vector<ResponseImage> responses;

    [[nodiscard]] int n_slices() const { return static_cast<int>(responses.size()); }
};

// ---------------------------------------------------------------- bilateral filter

namespace detail {

template <typename F>
void parallel_for(int n, F&& body) {
    const int workers = std::max(1, std::min<int>(n, static_cast<int>(std::thread::hardware_concurrency())));
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (int i = w; i < n; i += workers) body(i);
        });
}

}  // namespace detail

/// Edge-preserving bilateral filter. Circular window of radius d/2, Gaussian spatial weight,
/// Gaussian range weight on Euclidean RGB distance, clamp-to-edge borders.
inline RgbImage bilateral_filter(const RgbImage& src, int d, double sigma_color, double sigma_space) {
    if (d < 1 || !(sigma_color > 0) || !(sigma_space > 0))
        fail(Errc::InvalidArgument, "bilateral_filter: d >= 1 and sigmas > 0 required");
    const int radius = d / 2;
    if (radius == 0 || src.empty()) return src;

    const int w = src.width();
    const int h = src.height();
    const int pw = w + 2 * radius;
    const int ph = h + 2 * radius;

    // Clamp-padded copy so the inner loop has no bounds logic.
    std::vector<std::uint8_t> pad(static_cast<std::size_t>(pw) * ph * 3);
    for (int y = 0; y < ph; ++y)
        for (int x = 0; x < pw; ++x) {
            const auto* s = src.pixel(std::clamp(x - radius, 0, w - 1), std::clamp(y - radius, 0, h - 1));
            auto* p = &pad[(static_cast<std::size_t>(y) * pw + x) * 3];
            p[0] = s[0];
            p[1] = s[1];
            p[2] = s[2];
        }

    std::vector<std::ptrdiff_t> offsets;
    std::vector<float> space_w;
    for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
            const int r2 = dx * dx + dy * dy;
            if (r2 > radius * radius) continue;
            offsets.push_back((static_cast<std::ptrdiff_t>(dy) * pw + dx) * 3);
            space_w.push_back(static_cast<float>(std::exp(-r2 / (2.0 * sigma_space * sigma_space))));
        }

    constexpr int kMaxDist2 = 3 * 255 * 255;
    std::vector<float> color_w(kMaxDist2 + 1);
    const double inv = 1.0 / (2.0 * sigma_color * sigma_color);
    for (int i = 0; i <= kMaxDist2; ++i) color_w[i] = static_cast<float>(std::exp(-i * inv));

    RgbImage out(w, h);
    const std::size_t taps = offsets.size();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const auto* c = &pad[(static_cast<std::size_t>(y + radius) * pw + (x + radius)) * 3];
            const int cr = c[0], cg = c[1], cb = c[2];
            float sw = 0.f, sr = 0.f, sg = 0.f, sb = 0.f;
            for (std::size_t t = 0; t < taps; ++t) {
                const auto* q = c + offsets[t];
                const int dr = q[0] - cr, dg = q[1] - cg, db = q[2] - cb;
                const float wt = space_w[t] * color_w[dr * dr + dg * dg + db * db];
                sw += wt;
                sr += wt * q[0];
                sg += wt * q[1];
                sb += wt * q[2];
            }
            auto* o = out.pixel(x, y);
            o[0] = static_cast<std::uint8_t>(std::clamp(std::lround(sr / sw), 0L, 255L));
            o[1] = static_cast<std::uint8_t>(std::clamp(std::lround(sg / sw), 0L, 255L));
            o[2] = static_cast<std::uint8_t>(std::clamp(std::lround(sb / sw), 0L, 255L));
        }
    }
    return out;
}

// ---------------------------------------------------------------- Laplacian response

namespace detail {

inline std::vector<double> binomial(int n) {
    std::vector<double> k{1.0};
    for (int i = 1; i < n; ++i) {
        std::vector<double> next(k.size() + 1, 0.0);
        for (std::size_t j = 0; j < k.size(); ++j) {
            next[j] += k[j];
            next[j + 1] += k[j];
        }
        k = std::move(next);
    }
    double s = 0;
    for (double v : k) s += v;
    for (double& v : k) v /= s;
    return k;
}

inline std::vector<double> convolve(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> out(a.size() + b.size() - 1, 0.0);
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) out[i + j] += a[i] * b[j];
    return out;
}

inline GrayImage separable(const GrayImage& src, const std::vector<double>& kx, const std::vector<double>& ky) {
    const int rx = static_cast<int>(kx.size()) / 2;
    const int ry = static_cast<int>(ky.size()) / 2;
    GrayImage tmp(src.width(), src.height());
    for (int y = 0; y < src.height(); ++y)
        for (int x = 0; x < src.width(); ++x) {
            double s = 0;
            for (int i = -rx; i <= rx; ++i) s += kx[i + rx] * src.clamped(x + i, y);
            tmp.at(x, y) = s;
        }
    GrayImage out(src.width(), src.height());
    for (int y = 0; y < src.height(); ++y)
        for (int x = 0; x < src.width(); ++x) {
            double s = 0;
            for (int i = -ry; i <= ry; ++i) s += ky[i + ry] * tmp.clamped(x, y + i);
            out.at(x, y) = s;
        }
    return out;
}

}  // namespace detail

/// |Laplacian| of a luminance image. ksize 1 and 3 use the 5-point cross stencil; larger odd
/// sizes use a [1,-2,1] second difference smoothed by normalised binomial kernels, so every
/// size reports 2 on f = x^2.
inline ResponseImage laplacian_response(const GrayImage& lum, int ksize = 3) {
    if (ksize < 1 || ksize % 2 == 0) fail(Errc::InvalidArgument, "laplacian ksize must be odd");
    const int w = lum.width();
    const int h = lum.height();
    ResponseImage out(w, h);
    if (ksize <= 3) {
        for (int y = 0; y < h; ++y) {
            const int ym = std::max(y - 1, 0), yp = std::min(y + 1, h - 1);
            for (int x = 0; x < w; ++x) {
                const int xm = std::max(x - 1, 0), xp = std::min(x + 1, w - 1);
                const double v = lum.at(xm, y) + lum.at(xp, y) + lum.at(x, ym) + lum.at(x, yp) - 4.0 * lum.at(x, y);
                out.at(x, y) = static_cast<float>(std::abs(v));
            }
        }
        return out;
    }
    const auto smooth = detail::binomial(ksize);
    const auto second = detail::convolve({1.0, -2.0, 1.0}, detail::binomial(ksize - 2));
    const auto dxx = detail::separable(lum, second, smooth);
    const auto dyy = detail::separable(lum, smooth, second);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(x, y) = static_cast<float>(std::abs(dxx.at(x, y) + dyy.at(x, y)));
    return out;
}

inline ResponseImage laplacian_response(const RgbImage& rgb, int ksize = 3) {
    return laplacian_response(to_luminance(rgb), ksize);
}

// ---------------------------------------------------------------- composition

/// Bilateral-filtered slices and their focus responses.
struct FilteredStack {
    std::vector<RgbImage> slices;
    FocusMap focus;

    [[nodiscard]] int width() const { return focus.width; }
    [[nodiscard]] int height() const { return focus.height; }
    [[nodiscard]] int depth() const { return focus.n_slices(); }
};

inline FilteredStack filter_stack(const std::vector<RgbImage>& slices, const ExtractionConfig& config) {
    config.validate();
    if (slices.empty()) fail(Errc::EmptyStack, "stack has no slices");
    for (const auto& s : slices)
        if (!s.same_size(slices.front())) fail(Errc::DimensionMismatch, "slices differ in size");
    FilteredStack out;
    const int n = static_cast<int>(slices.size());
    out.slices.resize(n);
    out.focus.width = slices.front().width();
    out.focus.height = slices.front().height();
    out.focus.responses.resize(n);
    detail::parallel_for(n, [&](int z) {
        out.slices[z] = bilateral_filter(slices[z], config.bilateral_d, config.sigma_color,
                                         config.effective_sigma_space());
        out.focus.responses[z] = laplacian_response(out.slices[z], config.laplacian_ksize);
    });
    return out;
}

inline FilteredStack filter_stack(const ZStack& stack, const ExtractionConfig& config) {
    return filter_stack(stack.slices, config);
}

struct Orthoimage {
    RgbImage rgb;      // composite before display smoothing
    RgbImage display;  // final_bilateral_d smoothing of rgb
    Image<std::uint16_t, 1> depth;
};

inline Orthoimage compose_orthoimage(const FilteredStack& filtered, const ExtractionConfig& config) {
    config.validate();
    if (filtered.depth() == 0) fail(Errc::EmptyStack, "stack has no slices");
    const int w = filtered.width();
    const int h = filtered.height();
    Orthoimage ortho{RgbImage(w, h), {}, Image<std::uint16_t, 1>(w, h)};
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            int best = 0;
            float best_l = filtered.focus.responses[0].at(x, y);
            for (int z = 1; z < filtered.depth(); ++z) {
                const float l = filtered.focus.responses[z].at(x, y);
                if (l > best_l) {
                    best_l = l;
                    best = z;
                }
            }
            ortho.depth.at(x, y) = static_cast<std::uint16_t>(best);
            const auto* s = filtered.slices[best].pixel(x, y);
            std::copy_n(s, 3, ortho.rgb.pixel(x, y));
        }
    ortho.display = bilateral_filter(ortho.rgb, config.final_bilateral_d, config.sigma_color,
                                     config.final_sigma_space());
    return ortho;
}

inline Orthoimage compose_orthoimage(const ZStack& stack, const ExtractionConfig& config) {
    return compose_orthoimage(filter_stack(stack, config), config);
}

// ---------------------------------------------------------------- point extraction

struct ThresholdStats {
    double mean = 0;
    double stddev = 0;
    double threshold = 0;
};

/// mean/std (population) of log(L + 1) over every voxel, fixed summation order.
inline ThresholdStats log_response_stats(const FocusMap& focus, double k) {
    CompensatedSum sum;
    std::size_t n = 0;
    for (const auto& slice : focus.responses)
        for (float l : slice.data()) {
            sum.add(std::log1p(static_cast<double>(l)));
            ++n;
        }
    if (n == 0) fail(Errc::EmptyStack, "no voxels");
    ThresholdStats st;
    st.mean = sum.value() / static_cast<double>(n);
    CompensatedSum sq;
    for (const auto& slice : focus.responses)
        for (float l : slice.data()) {
            const double d = std::log1p(static_cast<double>(l)) - st.mean;
            sq.add(d * d);
        }
    st.stddev = std::sqrt(sq.value() / static_cast<double>(n));
    st.threshold = st.mean + k * st.stddev;
    return st;
}

struct ExtractionResult {
    PointCloud cloud;
    ThresholdStats stats;
    std::optional<std::string> warning;
};

/// Keeps voxel (x,y,z) iff log(L+1) > mean + k*std; points carry the filtered colour of their slice.
inline ExtractionResult extract_points(const FilteredStack& filtered, const ExtractionConfig& config,
                                       const ingest::ScaleInfo& scale = {}) {
    config.validate();
    ExtractionResult result;
    result.cloud.microns_per_pixel = scale.microns_per_pixel;
    result.cloud.z_step = scale.z_step;
    result.stats = log_response_stats(filtered.focus, config.k);
    if (result.stats.stddev == 0.0) {
        result.warning = "DegenerateStatistics: log-response standard deviation is zero; no points kept";
        return result;
    }
    const double t = result.stats.threshold;
    for (int z = 0; z < filtered.depth(); ++z) {
        const auto& resp = filtered.focus.responses[z];
        const auto& rgb = filtered.slices[z];
        for (int y = 0; y < filtered.height(); ++y)
            for (int x = 0; x < filtered.width(); ++x)
                if (std::log1p(static_cast<double>(resp.at(x, y))) > t) {
                    const auto* c = rgb.pixel(x, y);
                    result.cloud.points.push_back({x, y, z, c[0], c[1], c[2]});
                }
    }
    return result;
}

// ---------------------------------------------------------------- two-chunk registration

struct Offset {
    int dx = 0;
    int dy = 0;
    friend bool operator==(const Offset&, const Offset&) = default;
};

/// Integer translation s such that b(p) ~ a(p - s), from the argmax of the cyclic
/// cross-correlation of zero-mean crops computed in the frequency domain.
/// Ties: smallest |dx|+|dy|, then lexicographic (dx, dy).
inline Offset estimate_offset(const GrayImage& a, const GrayImage& b) {
    if (!a.same_size(b)) fail(Errc::DimensionMismatch, "correlation crops differ in size");
    const int w = a.width();
    const int h = a.height();
    if (w == 0 || h == 0) fail(Errc::ImageTooSmall, "empty correlation crop");
    auto to_mat = [&](const GrayImage& g) {
        double mean = 0;
        for (double v : g.data()) mean += v;
        mean /= static_cast<double>(g.pixel_count());
        cv::Mat m(h, w, CV_64F);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) m.at<double>(y, x) = g.at(x, y) - mean;
        return m;
    };
    cv::Mat fa, fb, prod, corr;
    cv::dft(to_mat(a), fa, cv::DFT_COMPLEX_OUTPUT);
    cv::dft(to_mat(b), fb, cv::DFT_COMPLEX_OUTPUT);
    cv::mulSpectrums(fb, fa, prod, 0, /*conjB=*/true);
    cv::idft(prod, corr, cv::DFT_REAL_OUTPUT | cv::DFT_SCALE);

    double peak = -std::numeric_limits<double>::infinity();
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) peak = std::max(peak, corr.at<double>(y, x));
    const double tie_tol = 1e-9 * std::max(1.0, std::abs(peak));
    auto signed_shift = [](int idx, int n) { return idx > n / 2 ? idx - n : idx; };
    std::optional<Offset> best;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (corr.at<double>(y, x) < peak - tie_tol) continue;
            const Offset cand{signed_shift(x, w), signed_shift(y, h)};
            if (!best) {
                best = cand;
                continue;
            }
            const int cm = std::abs(cand.dx) + std::abs(cand.dy);
            const int bm = std::abs(best->dx) + std::abs(best->dy);
            if (cm < bm || (cm == bm && std::tie(cand.dx, cand.dy) < std::tie(best->dx, best->dy))) best = cand;
        }
    return *best;
}

/// Central (w/3) x (h/3) crop.
template <typename T, int C>
Image<T, C> middle_ninth(const Image<T, C>& img) {
    const int cw = img.width() / 3;
    const int ch = img.height() / 3;
    return img.crop(cw, ch, cw, ch);
}

/// Offset of chunk B's zero-focus slice relative to chunk A's, from their middle ninths.
inline Offset register_chunks(const RgbImage& chunk_a_zero, const RgbImage& chunk_b_zero) {
    if (!chunk_a_zero.same_size(chunk_b_zero)) fail(Errc::DimensionMismatch, "zero slices differ in size");
    if (chunk_a_zero.width() < 9 || chunk_a_zero.height() < 9)
        fail(Errc::ImageTooSmall, "zero slice must be at least 9x9");
    return estimate_offset(to_luminance(middle_ninth(chunk_a_zero)), to_luminance(middle_ninth(chunk_b_zero)));
}

// ---------------------------------------------------------------- colour gain

struct ChannelGain {
    double alpha = 0.0;
    double beta = 1.0;
};

/// Per channel c: b_c = alpha_c + beta_c * a_c.
struct ColorGain {
    std::array<ChannelGain, 3> channel{};
};

/// Least-squares fit of chunk B's zero slice against chunk A's over pixels p where p + offset
/// lies inside B.
template <typename T>
ColorGain estimate_gain(const Image<T, 3>& a, const Image<T, 3>& b, Offset offset = {}) {
    if (!a.same_size(b)) fail(Errc::DimensionMismatch, "zero slices differ in size");
    ColorGain gain;
    for (int c = 0; c < 3; ++c) {
        CompensatedSum sa, sb;
        std::size_t n = 0;
        auto for_overlap = [&](auto&& fn) {
            for (int y = 0; y < a.height(); ++y) {
                const int by = y + offset.dy;
                if (by < 0 || by >= b.height()) continue;
                for (int x = 0; x < a.width(); ++x) {
                    const int bx = x + offset.dx;
                    if (bx < 0 || bx >= b.width()) continue;
                    fn(static_cast<double>(a.at(x, y, c)), static_cast<double>(b.at(bx, by, c)));
                }
            }
        };
        for_overlap([&](double va, double vb) {
            sa.add(va);
            sb.add(vb);
            ++n;
        });
        if (n < 2) fail(Errc::SingularFit, "no overlap between zero slices");
        const double ma = sa.value() / static_cast<double>(n);
        const double mb = sb.value() / static_cast<double>(n);
        CompensatedSum saa, sab;
        for_overlap([&](double va, double vb) {
            saa.add((va - ma) * (va - ma));
            sab.add((va - ma) * (vb - mb));
        });
        if (!(saa.value() > 0.0)) fail(Errc::SingularFit, "predictor channel has zero variance");
        const double beta = sab.value() / saa.value();
        if (beta == 0.0 || !std::isfinite(beta)) fail(Errc::SingularFit, "gain slope is zero");
        gain.channel[c] = {mb - beta * ma, beta};
    }
    return gain;
}

/// Maps chunk-B colours into chunk-A colour space: a = (b - alpha) / beta, clamped to [0, 255].
template <typename T>
Image<T, 3> apply_inverse_gain(const Image<T, 3>& img, const ColorGain& gain) {
    Image<T, 3> out(img.width(), img.height());
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            for (int c = 0; c < 3; ++c) {
                const auto& g = gain.channel[c];
                const double v = std::clamp((static_cast<double>(img.at(x, y, c)) - g.alpha) / g.beta, 0.0, 255.0);
                if constexpr (std::is_integral_v<T>)
                    out.at(x, y, c) = static_cast<T>(std::lround(v));
                else
                    out.at(x, y, c) = static_cast<T>(v);
            }
    return out;
}

/// Fits the gain on the shared zero slices and applies its inverse to every top-chunk slice.
inline std::vector<RgbImage> color_gain_correct(const std::vector<RgbImage>& top_chunk, const RgbImage& zero_a,
                                                const RgbImage& zero_b, Offset offset = {}) {
    const auto gain = estimate_gain(zero_a, zero_b, offset);
    std::vector<RgbImage> out;
    out.reserve(top_chunk.size());
    for (const auto& s : top_chunk) out.push_back(apply_inverse_gain(s, gain));
    return out;
}

/// Single stack in chunk-0 coordinates. chunk0's last slice and chunk1's first slice image the
/// same zero-focus plane; the merged stack keeps chunk0's copy. Chunk-1 pixels are resampled at
/// p + offset (clamped at the border) and gain-corrected.
inline std::vector<RgbImage> merge_chunks(const std::vector<RgbImage>& chunk0, const std::vector<RgbImage>& chunk1,
                                          Offset offset, const ColorGain& gain) {
    if (chunk0.empty() || chunk1.empty()) fail(Errc::EmptyStack, "both chunks need slices");
    const int w = chunk0.front().width();
    const int h = chunk0.front().height();
    for (const auto* chunk : {&chunk0, &chunk1})
        for (const auto& s : *chunk)
            if (s.width() != w || s.height() != h) fail(Errc::DimensionMismatch, "chunk slices differ in size");
    if (std::abs(offset.dx) > w / 3 || std::abs(offset.dy) > h / 3)
        fail(Errc::OffsetTooLarge, "chunk offset exceeds a third of the image");

    std::vector<RgbImage> merged = chunk0;
    for (std::size_t z = 1; z < chunk1.size(); ++z) {
        RgbImage shifted(w, h);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                for (int c = 0; c < 3; ++c) shifted.at(x, y, c) = chunk1[z].clamped(x + offset.dx, y + offset.dy, c);
        merged.push_back(apply_inverse_gain(shifted, gain));
    }
    return merged;
}

struct ChunkMerge {
    ZStack stack;
    Offset offset;
    ColorGain gain;
};

/// Splits at scale.chunk_boundary, registers the shared zero planes and merges.
inline ChunkMerge merge_chunked_stack(const ZStack& stack) {
    if (!stack.scale.chunk_boundary) fail(Errc::InvalidArgument, "stack has no chunk boundary");
    const auto b = static_cast<std::size_t>(*stack.scale.chunk_boundary);
    const std::vector<RgbImage> c0(stack.slices.begin(), stack.slices.begin() + static_cast<std::ptrdiff_t>(b));
    const std::vector<RgbImage> c1(stack.slices.begin() + static_cast<std::ptrdiff_t>(b), stack.slices.end());
    ChunkMerge m;
    m.offset = register_chunks(c0.back(), c1.front());
    m.gain = estimate_gain(c0.back(), c1.front(), m.offset);
    m.stack.slide_id = stack.slide_id;
    m.stack.sector = stack.sector;
    m.stack.slices = merge_chunks(c0, c1, m.offset, m.gain);
    m.stack.scale = stack.scale;
    m.stack.scale.n_slices = static_cast<int>(m.stack.slices.size());
    m.stack.scale.chunk_boundary.reset();
    return m;
}

}  // namespace phyto::focus
