#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "disagg/grid.hpp"
#include "disagg/rng.hpp"
#include "disagg/sparse.hpp"

namespace disagg {

struct PixelCoord {
    int row = 0;
    int col = 0;
    bool operator==(const PixelCoord&) const = default;
};

using SeedSet = std::vector<PixelCoord>;

/// Pixel-to-region assignment. Label 0 is background and belongs to no
/// region; labels 1..n_regions index regions. Region ids stay contiguous;
/// an id that covers no pixel is simply an empty region.
struct RegionMap {
    int height = 0;
    int width = 0;
    int n_regions = 0;
    std::vector<std::int32_t> labels;  // row-major H*W

    std::int32_t& operator()(int r, int c) { return labels[static_cast<std::size_t>(r) * width + c]; }
    std::int32_t operator()(int r, int c) const { return labels[static_cast<std::size_t>(r) * width + c]; }
    std::size_t pixel_count() const { return labels.size(); }
};

inline void validate(const RegionMap& m) {
    if (m.height < 0 || m.width < 0 || m.n_regions < 0)
        throw std::invalid_argument("RegionMap: negative extent");
    if (m.labels.size() != static_cast<std::size_t>(m.height) * m.width)
        throw std::invalid_argument("RegionMap: label buffer does not match extent");
    for (std::int32_t v : m.labels)
        if (v < 0 || v > m.n_regions)
            throw std::invalid_argument("RegionMap: label outside [0, n_regions]");
}

/// k distinct pixel coordinates, uniform without replacement. Partial
/// Fisher-Yates over the flattened lattice keeps the draw order a pure
/// function of the generator state.
inline SeedSet sample_seeds(Rng& rng, int k, int height, int width) {
    const std::int64_t total = static_cast<std::int64_t>(height) * width;
    if (k < 1 || static_cast<std::int64_t>(k) > total)
        throw std::invalid_argument("sample_seeds: k must be in [1, H*W]");
    std::vector<std::int32_t> idx(static_cast<std::size_t>(total));
    std::iota(idx.begin(), idx.end(), 0);
    SeedSet seeds;
    seeds.reserve(k);
    for (int i = 0; i < k; ++i) {
        const std::int64_t j = i + static_cast<std::int64_t>(rng.below(total - i));
        std::swap(idx[i], idx[j]);
        seeds.push_back({idx[i] / width, idx[i] % width});
    }
    return seeds;
}

/// Nearest-seed partition under squared Euclidean distance on pixel centers.
/// Ties go to the lowest seed index. Every pixel receives a region, so the
/// result has no background.
inline RegionMap voronoi_partition(const SeedSet& seeds, int height, int width) {
    if (seeds.empty()) throw std::invalid_argument("voronoi_partition: empty seed set");
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        const auto& s = seeds[i];
        if (s.row < 0 || s.row >= height || s.col < 0 || s.col >= width)
            throw std::invalid_argument("voronoi_partition: seed out of bounds");
        for (std::size_t j = i + 1; j < seeds.size(); ++j)
            if (seeds[j] == s) throw std::invalid_argument("voronoi_partition: duplicate seed");
    }

    RegionMap map;
    map.height = height;
    map.width = width;
    map.n_regions = static_cast<int>(seeds.size());
    map.labels.resize(static_cast<std::size_t>(height) * width);
    for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
            std::int64_t best = -1;
            int best_idx = 0;
            for (std::size_t s = 0; s < seeds.size(); ++s) {
                const std::int64_t dr = r - seeds[s].row;
                const std::int64_t dc = c - seeds[s].col;
                const std::int64_t d2 = dr * dr + dc * dc;
                if (best < 0 || d2 < best) {
                    best = d2;
                    best_idx = static_cast<int>(s);
                }
            }
            map(r, c) = best_idx + 1;
        }
    }
    return map;
}

/// Aggregation matrix M with one row per region and one column per pixel
/// (row-major vectorization). Hard assignment: m_ij = 1 where pixel j has
/// label i+1. Background pixels appear in no row, so their columns are empty.
template <typename T = float>
CsrMatrix<T> build_aggregation_matrix(const RegionMap& regions) {
    validate(regions);
    const std::int64_t n_pixels = static_cast<std::int64_t>(regions.pixel_count());

    CsrMatrix<T> m;
    m.rows = regions.n_regions;
    m.cols = n_pixels;
    m.row_offsets.assign(regions.n_regions + 1, 0);
    for (std::int32_t label : regions.labels)
        if (label > 0) ++m.row_offsets[label];
    for (int i = 0; i < regions.n_regions; ++i) m.row_offsets[i + 1] += m.row_offsets[i];

    m.col_indices.resize(m.row_offsets[regions.n_regions]);
    std::vector<std::int64_t> cursor(m.row_offsets.begin(), m.row_offsets.end() - 1);
    for (std::int64_t j = 0; j < n_pixels; ++j) {
        const std::int32_t label = regions.labels[j];
        if (label > 0) m.col_indices[cursor[label - 1]++] = static_cast<std::int32_t>(j);
    }
    m.values.assign(m.col_indices.size(), T(1));
    return m;
}

/// Independent reference for regional aggregation: per-region plain summation
/// by explicit pixel iteration, no matrix involved.
template <typename T>
std::vector<T> aggregate_oracle(const Grid<T>& density, const RegionMap& regions) {
    if (density.height != regions.height || density.width != regions.width)
        throw std::invalid_argument("aggregate_oracle: shape mismatch");
    std::vector<T> sums(regions.n_regions, T(0));
    for (std::size_t j = 0; j < regions.pixel_count(); ++j) {
        const std::int32_t label = regions.labels[j];
        if (label > 0) sums[label - 1] += density.data[j];
    }
    return sums;
}

/// Per-region pixel counts (region id i+1 -> counts[i]).
inline std::vector<std::int64_t> region_sizes(const RegionMap& regions) {
    std::vector<std::int64_t> counts(regions.n_regions, 0);
    for (std::int32_t label : regions.labels)
        if (label > 0) ++counts[label - 1];
    return counts;
}

/// mask[i] is true iff every pixel of region i+1 lies inside the valid area.
/// Regions touching an invalid pixel are dropped from losses and metrics.
inline RegionValidity valid_region_mask(const RegionMap& regions,
                                        const Grid<std::uint8_t>& valid_pixels) {
    if (valid_pixels.height != regions.height || valid_pixels.width != regions.width)
        throw std::invalid_argument("valid_region_mask: shape mismatch");
    RegionValidity mask(regions.n_regions, 1);
    for (std::size_t j = 0; j < regions.pixel_count(); ++j) {
        const std::int32_t label = regions.labels[j];
        if (label > 0 && !valid_pixels.data[j]) mask[label - 1] = 0;
    }
    return mask;
}

}  // namespace disagg
