#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace disagg {

/// Row-major H x W raster. Density grids are Grid<float>; pixel validity
/// masks are Grid<std::uint8_t>.
template <typename T>
struct Grid {
    int height = 0;
    int width = 0;
    std::vector<T> data;

    Grid() = default;
    Grid(int h, int w, T fill = T{})
        : height(h), width(w), data(check_extent(h, w), fill) {}

    std::size_t size() const { return data.size(); }

    T& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * width + c]; }
    const T& operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * width + c]; }

    std::span<T> flat() { return data; }
    std::span<const T> flat() const { return data; }

    bool same_shape_as(const Grid& other) const {
        return height == other.height && width == other.width;
    }

private:
    static std::size_t check_extent(int h, int w) {
        if (h < 0 || w < 0) throw std::invalid_argument("Grid: negative extent");
        return static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    }
};

using DensityGrid = Grid<float>;

/// Per-region booleans (1 = region participates in losses and metrics).
using RegionValidity = std::vector<std::uint8_t>;

}  // namespace disagg
