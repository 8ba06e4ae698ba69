#pragma once

// SRPC1 point-cloud container.
//
// The file is a single zlib (RFC 1950) stream. Decompressed payload, little-endian:
//   "SRPC1"                       5 bytes magic
//   u32 point_count
//   f64 microns_per_pixel
//   f64 z_step_microns
//   point_count x { i32 x, i32 y, i32 z, u8 r, u8 g, u8 b }   15 bytes each, packed

#include <zlib.h>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "phyto/error.hpp"
#include "phyto/util.hpp"

namespace phyto {

struct Point {
    std::int32_t x = 0;
    std::int32_t y = 0;
    std::int32_t z = 0;
    std::uint8_t r = 0;
    std::uint8_t g = 0;
    std::uint8_t b = 0;

    friend bool operator==(const Point&, const Point&) = default;
    friend auto operator<=>(const Point& a, const Point& b) {
        return std::tie(a.x, a.y, a.z, a.r, a.g, a.b) <=> std::tie(b.x, b.y, b.z, b.r, b.g, b.b);
    }
};

struct PointCloud {
    std::vector<Point> points;
    double microns_per_pixel = 0.091;
    double z_step = 0.267;

    [[nodiscard]] std::size_t size() const noexcept { return points.size(); }
    [[nodiscard]] bool empty() const noexcept { return points.empty(); }
    friend bool operator==(const PointCloud&, const PointCloud&) = default;
};

namespace srpc {

inline constexpr std::string_view kMagic = "SRPC1";
inline constexpr std::size_t kHeaderSize = 5 + 4 + 8 + 8;
inline constexpr std::size_t kRecordSize = 15;

static_assert(std::endian::native == std::endian::little, "SRPC1 codec assumes a little-endian host");

namespace detail {

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

template <typename T>
T get(std::string_view in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) fail(Errc::ParseError, "SRPC1 payload truncated");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

inline std::string deflate(std::string_view raw) {
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::string out(bound, '\0');
    if (compress2(reinterpret_cast<Bytef*>(out.data()), &bound, reinterpret_cast<const Bytef*>(raw.data()),
                  static_cast<uLong>(raw.size()), 6) != Z_OK)
        fail(Errc::IoFailure, "deflate failed");
    out.resize(bound);
    return out;
}

inline std::string inflate(std::string_view compressed) {
    z_stream zs{};
    if (inflateInit(&zs) != Z_OK) fail(Errc::IoFailure, "inflateInit failed");
    zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(compressed.data()));
    zs.avail_in = static_cast<uInt>(compressed.size());
    std::string out;
    std::array<char, 1 << 16> chunk{};
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        zs.next_out = reinterpret_cast<Bytef*>(chunk.data());
        zs.avail_out = static_cast<uInt>(chunk.size());
        rc = ::inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            fail(Errc::ParseError, "SRPC1 stream is not valid zlib data");
        }
        out.append(chunk.data(), chunk.size() - zs.avail_out);
        if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
            inflateEnd(&zs);
            fail(Errc::ParseError, "SRPC1 stream truncated");
        }
    }
    inflateEnd(&zs);
    return out;
}

}  // namespace detail

inline std::string encode_raw(const PointCloud& cloud) {
    std::string raw;
    raw.reserve(kHeaderSize + cloud.size() * kRecordSize);
    raw.append(kMagic);
    detail::put<std::uint32_t>(raw, static_cast<std::uint32_t>(cloud.size()));
    detail::put<double>(raw, cloud.microns_per_pixel);
    detail::put<double>(raw, cloud.z_step);
    for (const auto& p : cloud.points) {
        detail::put<std::int32_t>(raw, p.x);
        detail::put<std::int32_t>(raw, p.y);
        detail::put<std::int32_t>(raw, p.z);
        raw.push_back(static_cast<char>(p.r));
        raw.push_back(static_cast<char>(p.g));
        raw.push_back(static_cast<char>(p.b));
    }
    return raw;
}

inline PointCloud decode_raw(std::string_view raw) {
    if (raw.size() < kHeaderSize || raw.substr(0, kMagic.size()) != kMagic)
        fail(Errc::ParseError, "missing SRPC1 magic");
    std::size_t pos = kMagic.size();
    PointCloud cloud;
    const auto n = detail::get<std::uint32_t>(raw, pos);
    cloud.microns_per_pixel = detail::get<double>(raw, pos);
    cloud.z_step = detail::get<double>(raw, pos);
    if (raw.size() != kHeaderSize + static_cast<std::size_t>(n) * kRecordSize)
        fail(Errc::ParseError, "SRPC1 record count does not match payload size");
    cloud.points.resize(n);
    for (auto& p : cloud.points) {
        p.x = detail::get<std::int32_t>(raw, pos);
        p.y = detail::get<std::int32_t>(raw, pos);
        p.z = detail::get<std::int32_t>(raw, pos);
        p.r = detail::get<std::uint8_t>(raw, pos);
        p.g = detail::get<std::uint8_t>(raw, pos);
        p.b = detail::get<std::uint8_t>(raw, pos);
    }
    return cloud;
}

inline std::string encode(const PointCloud& cloud) { return detail::deflate(encode_raw(cloud)); }
inline PointCloud decode(std::string_view bytes) { return decode_raw(detail::inflate(bytes)); }

inline void write(const std::filesystem::path& path, const PointCloud& cloud) {
    write_file(path, encode(cloud));
}
inline PointCloud read(const std::filesystem::path& path) { return decode(read_file(path)); }

}  // namespace srpc
}  // namespace phyto
