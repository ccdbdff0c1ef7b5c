#pragma once

#include <algorithm>
#include <array>
#include <bitset>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "disagg/grid.hpp"
#include "disagg/regions.hpp"
#include "disagg/rng.hpp"
#include "disagg/sparse.hpp"

namespace disagg {

enum class Task { binary, count, ratio, sparse };

inline std::string to_string(Task t) {
    switch (t) {
        case Task::binary: return "binary";
        case Task::count: return "count";
        case Task::ratio: return "ratio";
        case Task::sparse: return "sparse";
    }
    return "?";
}

inline Task task_from_string(const std::string& s) {
    if (s == "binary") return Task::binary;
    if (s == "count") return Task::count;
    if (s == "ratio") return Task::ratio;
    if (s == "sparse") return Task::sparse;
    throw std::invalid_argument("unknown task: " + s);
}

/// 32x32 RGB image stored channel-planar (R plane, G plane, B plane), each
/// plane row-major — the CIFAR-10 record layout. Three views of a byte:
/// raw in [0,255], network input in [-1,1], color coordinates in [0,1].
struct Image {
    static constexpr int kHeight = 32;
    static constexpr int kWidth = 32;
    static constexpr int kChannels = 3;
    static constexpr int kPixels = kHeight * kWidth;

    std::array<std::uint8_t, kChannels * kPixels> planes{};

    std::uint8_t raw(int channel, int row, int col) const {
        return planes[static_cast<std::size_t>(channel) * kPixels + row * kWidth + col];
    }
    std::uint8_t& raw(int channel, int row, int col) {
        return planes[static_cast<std::size_t>(channel) * kPixels + row * kWidth + col];
    }
    float normalized(int channel, int row, int col) const {
        return static_cast<float>(raw(channel, row, col)) / 127.5f - 1.0f;
    }
    double color01(int channel, int row, int col) const {
        return static_cast<double>(raw(channel, row, col)) / 255.0;
    }
};

/// Images plus split bookkeeping. Splits are contiguous: the first n_train
/// images train, the next n_val validate, the next n_test test.
struct Dataset {
    std::vector<Image> images;
    std::size_t n_train = 0;
    std::size_t n_val = 0;
    std::size_t n_test = 0;

    void set_splits(std::size_t train, std::size_t val, std::size_t test) {
        if (train + val + test > images.size())
            throw std::invalid_argument("Dataset: splits exceed image count");
        n_train = train;
        n_val = val;
        n_test = test;
    }

    std::span<const Image> train() const { return {images.data(), n_train}; }
    std::span<const Image> val() const { return {images.data() + n_train, n_val}; }
    std::span<const Image> test() const { return {images.data() + n_train + n_val, n_test}; }
};

namespace detail {

inline constexpr std::size_t kCifarRecord = 3073;       // label byte + 3 planes
inline constexpr std::size_t kCifarBatchBytes = 30730000;  // 10000 records

inline void load_cifar_batch(const std::filesystem::path& file, std::vector<Image>& out) {
    std::error_code ec;
    const auto size = std::filesystem::file_size(file, ec);
    if (ec) throw std::runtime_error("cifar-10: missing batch file " + file.string());
    if (size != kCifarBatchBytes)
        throw std::runtime_error("cifar-10: " + file.string() + " has " + std::to_string(size) +
                                 " bytes, expected " + std::to_string(kCifarBatchBytes));
    std::ifstream in(file, std::ios::binary);
    if (!in) throw std::runtime_error("cifar-10: cannot open " + file.string());
    std::vector<char> buf(kCifarBatchBytes);
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size()))
        throw std::runtime_error("cifar-10: short read on " + file.string());
    for (std::size_t r = 0; r < 10000; ++r) {
        Image img;
        // first byte of each record is the class label, which we discard
        const char* rec = buf.data() + r * kCifarRecord + 1;
        std::copy_n(reinterpret_cast<const std::uint8_t*>(rec), img.planes.size(),
                    img.planes.begin());
        out.push_back(img);
    }
}

}  // namespace detail

/// Reads the six standard CIFAR-10 binary batches. The last 2500 training
/// images become the validation split; class labels are discarded.
inline Dataset load_cifar10(const std::filesystem::path& dir) {
    Dataset ds;
    ds.images.reserve(60000);
    for (int b = 1; b <= 5; ++b)
        detail::load_cifar_batch(dir / ("data_batch_" + std::to_string(b) + ".bin"), ds.images);
    detail::load_cifar_batch(dir / "test_batch.bin", ds.images);
    ds.set_splits(47500, 2500, 10000);
    return ds;
}

/// Smoothly varying random color fields: per channel a random base level
/// plus three low-frequency sinusoidal gradients, clamped to [0,255].
/// Image i depends only on derive_seed(seed, i), so corpora are stable
/// under count changes and bit-identical across runs.
inline Image procedural_image(std::uint64_t image_seed) {
    Rng rng(image_seed);
    Image img;
    constexpr double kTwoPi = 6.283185307179586;
    for (int ch = 0; ch < Image::kChannels; ++ch) {
        const double base = rng.uniform(0.0, 255.0);
        double amp[3], freq[3], dx[3], dy[3], phase[3];
        for (int s = 0; s < 3; ++s) {
            amp[s] = rng.uniform(20.0, 110.0);
            const double wavelength = rng.uniform(8.0, 48.0);
            freq[s] = kTwoPi / wavelength;
            const double theta = rng.uniform(0.0, kTwoPi);
            dx[s] = std::cos(theta);
            dy[s] = std::sin(theta);
            phase[s] = rng.uniform(0.0, kTwoPi);
        }
        for (int r = 0; r < Image::kHeight; ++r)
            for (int c = 0; c < Image::kWidth; ++c) {
                double v = base;
                for (int s = 0; s < 3; ++s)
                    v += amp[s] * std::sin(freq[s] * (dx[s] * c + dy[s] * r) + phase[s]);
                img.raw(ch, r, c) =
                    static_cast<std::uint8_t>(std::clamp(std::lround(v), 0l, 255l));
            }
    }
    return img;
}

inline Dataset procedural_dataset(Rng& rng, std::size_t count) {
    if (count < 1) throw std::invalid_argument("procedural_dataset: count must be >= 1");
    const std::uint64_t corpus_seed = rng.next_u64();
    Dataset ds;
    ds.images.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        ds.images.push_back(procedural_image(derive_seed(corpus_seed, i)));
    ds.set_splits(count, 0, 0);
    return ds;
}

/// RGB points in [0,1]^3 against which pixel distances are thresholded.
struct ColorPalette {
    std::vector<std::array<double, 3>> colors;
};

/// Draws k uniform (image, pixel) pairs over the whole corpus, so every
/// palette color occurs verbatim at some dataset pixel.
inline ColorPalette sample_palette(Rng& rng, const Dataset& ds, int k) {
    if (ds.images.empty()) throw std::invalid_argument("sample_palette: empty dataset");
    ColorPalette pal;
    pal.colors.reserve(k);
    for (int i = 0; i < k; ++i) {
        const auto& img = ds.images[rng.below(ds.images.size())];
        const auto p = static_cast<int>(rng.below(Image::kPixels));
        const int r = p / Image::kWidth, c = p % Image::kWidth;
        pal.colors.push_back({img.color01(0, r, c), img.color01(1, r, c), img.color01(2, r, c)});
    }
    return pal;
}

namespace detail {

inline double color_dist_sq(const Image& img, int r, int c, const std::array<double, 3>& col) {
    const double d0 = img.color01(0, r, c) - col[0];
    const double d1 = img.color01(1, r, c) - col[1];
    const double d2 = img.color01(2, r, c) - col[2];
    return d0 * d0 + d1 * d1 + d2 * d2;
}

}  // namespace detail

/// f(p) = 1 iff some palette color is strictly closer than tau.
/// Distances compare as squares in double precision, so "exactly tau"
/// resolves to 0 without rounding through a square root.
inline Grid<float> density_binary(const Image& img, const ColorPalette& palette,
                                  double tau = 0.2) {
    Grid<float> f(Image::kHeight, Image::kWidth);
    const double tau_sq = tau * tau;
    for (int r = 0; r < Image::kHeight; ++r)
        for (int c = 0; c < Image::kWidth; ++c) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& col : palette.colors)
                best = std::min(best, detail::color_dist_sq(img, r, c, col));
            f(r, c) = best < tau_sq ? 1.0f : 0.0f;
        }
    return f;
}

/// f(p) = number of palette colors strictly within tau.
inline Grid<float> density_count(const Image& img, const ColorPalette& palette,
                                 double tau = 0.4) {
    Grid<float> f(Image::kHeight, Image::kWidth);
    const double tau_sq = tau * tau;
    for (int r = 0; r < Image::kHeight; ++r)
        for (int c = 0; c < Image::kWidth; ++c) {
            int hits = 0;
            for (const auto& col : palette.colors)
                if (detail::color_dist_sq(img, r, c, col) < tau_sq) ++hits;
            f(r, c) = static_cast<float>(hits);
        }
    return f;
}

/// f(p) = nearest distance over the second-nearest, in [0,1]; both zero
/// (pixel coincides with two palette colors) is taken as the limit 1.
inline Grid<float> density_ratio(const Image& img, const ColorPalette& palette) {
    if (palette.colors.size() < 2)
        throw std::invalid_argument("density_ratio: palette needs at least 2 colors");
    Grid<float> f(Image::kHeight, Image::kWidth);
    for (int r = 0; r < Image::kHeight; ++r)
        for (int c = 0; c < Image::kWidth; ++c) {
            double d1 = std::numeric_limits<double>::infinity();
            double d2 = std::numeric_limits<double>::infinity();
            for (const auto& col : palette.colors) {
                const double d = std::sqrt(detail::color_dist_sq(img, r, c, col));
                if (d < d1) {
                    d2 = d1;
                    d1 = d;
                } else if (d < d2) {
                    d2 = d;
                }
            }
            f(r, c) = d2 == 0.0 ? 1.0f : static_cast<float>(d1 / d2);
        }
    return f;
}

/// Color bins: 16 levels per channel, index = R/16 * 256 + G/16 * 16 + B/16
/// over the raw bytes.
struct SparseBinSet {
    std::vector<int> bins;          // sorted, unique
    std::bitset<4096> member;

    bool contains(int bin) const { return member.test(static_cast<std::size_t>(bin)); }
};

inline int color_bin(const Image& img, int r, int c) {
    return (img.raw(0, r, c) / 16) * 256 + (img.raw(1, r, c) / 16) * 16 + img.raw(2, r, c) / 16;
}

/// Keeps bins that appear in at least min_images distinct images while
/// averaging at most max_avg_pixels occurrences per image in which they
/// appear. Statistics run over every image in the corpus (all splits).
inline SparseBinSet select_sparse_bins(const Dataset& ds, std::size_t min_images = 29000,
                                       double max_avg_pixels = 10.0) {
    if (ds.images.empty()) throw std::invalid_argument("select_sparse_bins: empty dataset");
    std::vector<std::int64_t> image_count(4096, 0), pixel_count(4096, 0);
    std::vector<std::int64_t> seen(4096, -1);
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
        const Image& img = ds.images[i];
        for (int r = 0; r < Image::kHeight; ++r)
            for (int c = 0; c < Image::kWidth; ++c) {
                const int b = color_bin(img, r, c);
                ++pixel_count[b];
                if (seen[b] != static_cast<std::int64_t>(i)) {
                    seen[b] = static_cast<std::int64_t>(i);
                    ++image_count[b];
                }
            }
    }
    SparseBinSet set;
    for (int b = 0; b < 4096; ++b) {
        if (image_count[b] < static_cast<std::int64_t>(min_images)) continue;
        const double avg = static_cast<double>(pixel_count[b]) / static_cast<double>(image_count[b]);
        if (avg > max_avg_pixels) continue;
        set.bins.push_back(b);
        set.member.set(static_cast<std::size_t>(b));
    }
    return set;
}

inline Grid<float> density_sparse(const Image& img, const SparseBinSet& bins) {
    Grid<float> f(Image::kHeight, Image::kWidth);
    for (int r = 0; r < Image::kHeight; ++r)
        for (int c = 0; c < Image::kWidth; ++c)
            f(r, c) = bins.contains(color_bin(img, r, c)) ? 1.0f : 0.0f;
    return f;
}

using DensityFn = std::function<Grid<float>(const Image&)>;

/// One supervised instance: the image, its fixed region partition, the
/// aggregation matrix for the estimator path, the ground-truth density and
/// the region labels. Labels come from aggregate_oracle, not the matrix, so
/// the two aggregation routes stay independently testable.
struct Example {
    Image image;
    RegionMap regions;
    CsrMatrix<float> matrix;
    Grid<float> density;
    std::vector<float> labels;
    RegionValidity valid;  // one flag per region; synthetic regions are all valid
};

inline Example make_example(const Image& image, int k_regions, const DensityFn& density_fn,
                            Rng& rng) {
    Example ex;
    ex.image = image;
    const SeedSet seeds = sample_seeds(rng, k_regions, Image::kHeight, Image::kWidth);
    ex.regions = voronoi_partition(seeds, Image::kHeight, Image::kWidth);
    ex.matrix = build_aggregation_matrix<float>(ex.regions);
    ex.density = density_fn(image);
    ex.labels = aggregate_oracle<float>(ex.density, ex.regions);
    ex.valid.assign(ex.regions.n_regions, 1);
    return ex;
}

/// Options for assembling a supervised set from a corpus. Palette sizes and
/// thresholds default to the experiment definitions; sparse-bin thresholds
/// are overridable because 29000-image support only exists on the full
/// corpus.
struct BuildOptions {
    Task task = Task::binary;
    int k_regions = 10;
    std::uint64_t seed = 0;
    double tau_binary = 0.2;
    double tau_count = 0.4;
    std::size_t sparse_min_images = 29000;
    double sparse_max_avg_pixels = 10.0;
};

struct SupervisedSet {
    Task task = Task::binary;
    ColorPalette palette;  // binary/count/ratio tasks
    SparseBinSet bins;     // sparse task
    std::vector<Example> train;
    std::vector<Example> val;
    std::vector<Example> test;
};

namespace detail {

// Fixed stream indices under the master seed; image streams hang off
// kStreamRegions so adding streams later cannot shift region draws.
inline constexpr std::uint64_t kStreamPalette = 1;
inline constexpr std::uint64_t kStreamRegions = 2;

}  // namespace detail

/// Builds train/val/test examples with one global palette or bin set and a
/// per-image region draw keyed on the image's corpus index. Same seed, same
/// corpus, same options -> bit-identical set; changing k_regions keeps the
/// images and densities and changes only the partitions.
inline SupervisedSet build_supervised_set(const Dataset& ds, const BuildOptions& opt) {
    SupervisedSet set;
    set.task = opt.task;

    DensityFn fn;
    Rng palette_rng(derive_seed(opt.seed, detail::kStreamPalette));
    switch (opt.task) {
        case Task::binary:
            set.palette = sample_palette(palette_rng, ds, 15);
            fn = [&set, tau = opt.tau_binary](const Image& img) {
                return density_binary(img, set.palette, tau);
            };
            break;
        case Task::count:
            set.palette = sample_palette(palette_rng, ds, 20);
            fn = [&set, tau = opt.tau_count](const Image& img) {
                return density_count(img, set.palette, tau);
            };
            break;
        case Task::ratio:
            set.palette = sample_palette(palette_rng, ds, 20);
            fn = [&set](const Image& img) { return density_ratio(img, set.palette); };
            break;
        case Task::sparse:
            set.bins = select_sparse_bins(ds, opt.sparse_min_images, opt.sparse_max_avg_pixels);
            fn = [&set](const Image& img) { return density_sparse(img, set.bins); };
            break;
    }

    const std::uint64_t region_root = derive_seed(opt.seed, detail::kStreamRegions);
    auto build_split = [&](std::span<const Image> images, std::size_t index_base,
                           std::vector<Example>& out) {
        out.reserve(images.size());
        for (std::size_t i = 0; i < images.size(); ++i) {
            Rng rng(derive_seed(region_root, index_base + i));
            out.push_back(make_example(images[i], opt.k_regions, fn, rng));
        }
    };
    build_split(ds.train(), 0, set.train);
    build_split(ds.val(), ds.n_train, set.val);
    build_split(ds.test(), ds.n_train + ds.n_val, set.test);
    return set;
}

}  // namespace disagg
