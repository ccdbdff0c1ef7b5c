#pragma once

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "disagg/grid.hpp"
#include "disagg/io.hpp"
#include "disagg/synthetic.hpp"

namespace disagg {

namespace detail {

inline void png_u32be(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v >> 24));
    out.push_back(static_cast<char>(v >> 16));
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v));
}

inline void png_chunk(std::string& out, const char type[4], std::string_view payload) {
    png_u32be(out, static_cast<std::uint32_t>(payload.size()));
    const std::size_t crc_start = out.size();
    out.append(type, 4);
    out.append(payload);
    const auto* p = reinterpret_cast<const Bytef*>(out.data() + crc_start);
    const auto crc = crc32(0, p, static_cast<uInt>(out.size() - crc_start));
    png_u32be(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

/// Encodes 8-bit grayscale (channels=1) or RGB (channels=3) pixels,
/// row-major and interleaved, as a single-IDAT PNG. Output-only format:
/// nothing in this project reads PNGs back.
inline void write_png(const std::filesystem::path& path, int height, int width, int channels,
                      std::span<const std::uint8_t> pixels) {
    if (height < 1 || width < 1 || (channels != 1 && channels != 3))
        throw std::invalid_argument("write_png: unsupported shape");
    if (pixels.size() != static_cast<std::size_t>(height) * width * channels)
        throw std::invalid_argument("write_png: pixel buffer size mismatch");

    // filter byte 0 (None) in front of every scanline
    const std::size_t stride = static_cast<std::size_t>(width) * channels;
    std::vector<Bytef> raw((stride + 1) * height);
    for (int r = 0; r < height; ++r) {
        raw[r * (stride + 1)] = 0;
        std::copy_n(pixels.data() + r * stride, stride, raw.data() + r * (stride + 1) + 1);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<Bytef> compressed(bound);
    if (compress2(compressed.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
        throw std::runtime_error("write_png: deflate failed");

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    detail::png_u32be(ihdr, static_cast<std::uint32_t>(width));
    detail::png_u32be(ihdr, static_cast<std::uint32_t>(height));
    ihdr.push_back(8);                            // bit depth
    ihdr.push_back(channels == 1 ? 0 : 2);        // color type: gray or truecolor
    ihdr.push_back(0);                            // compression
    ihdr.push_back(0);                            // filter
    ihdr.push_back(0);                            // interlace
    detail::png_chunk(out, "IHDR", ihdr);
    detail::png_chunk(out, "IDAT",
                      std::string_view(reinterpret_cast<const char*>(compressed.data()), bound));
    detail::png_chunk(out, "IEND", {});
    write_file_atomic(path, out);
}

/// Density visualization with the fixed linear mapping [0, vmax] -> [0, 255].
inline void write_density_png(const std::filesystem::path& path, const Grid<float>& density,
                              double vmax) {
    if (vmax <= 0) throw std::invalid_argument("write_density_png: vmax must be > 0");
    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(density.size()));
    for (std::int64_t p = 0; p < density.size(); ++p) {
        const double scaled = static_cast<double>(density.flat()[p]) / vmax * 255.0;
        pixels[static_cast<std::size_t>(p)] =
            static_cast<std::uint8_t>(std::clamp(std::lround(scaled), 0l, 255l));
    }
    write_png(path, density.height, density.width, 1, pixels);
}

inline void write_image_png(const std::filesystem::path& path, const Image& img) {
    std::vector<std::uint8_t> pixels(static_cast<std::size_t>(Image::kPixels) * 3);
    for (int r = 0; r < Image::kHeight; ++r)
        for (int c = 0; c < Image::kWidth; ++c)
            for (int ch = 0; ch < 3; ++ch)
                pixels[(static_cast<std::size_t>(r) * Image::kWidth + c) * 3 + ch] =
                    img.raw(ch, r, c);
    write_png(path, Image::kHeight, Image::kWidth, 3, pixels);
}

}  // namespace disagg
