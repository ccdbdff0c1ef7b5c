#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <type_traits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "disagg/training.hpp"

namespace disagg {

inline constexpr double kDasymetricZero = 1e-12;

/// Redistributes known region totals over pixels in proportion to the
/// estimated density: out(p) = density(p) * F(r) / F_hat(r). Regions whose
/// estimated sum is (numerically) zero fall back to a uniform spread; regions
/// masked out — and pixels outside every region — are set to zero.
template <typename T>
Grid<T> dasymetric_map(const Grid<T>& density, const RegionMap& regions,
                       std::type_identity_t<std::span<const T>> labels,
                       std::span<const std::uint8_t> mask = {}) {
    if (density.height != regions.height || density.width != regions.width)
        throw std::invalid_argument("dasymetric_map: density/region shape mismatch");
    if (static_cast<int>(labels.size()) != regions.n_regions)
        throw std::invalid_argument("dasymetric_map: label count != region count");
    if (!mask.empty() && static_cast<int>(mask.size()) != regions.n_regions)
        throw std::invalid_argument("dasymetric_map: mask size != region count");
    for (const T y : labels)
        if (y < T(0)) throw std::invalid_argument("dasymetric_map: negative label");

    std::vector<double> est_sum(regions.n_regions, 0.0);
    std::vector<std::int64_t> sizes(regions.n_regions, 0);
    const std::int64_t n = regions.pixel_count();
    for (std::int64_t p = 0; p < n; ++p) {
        const std::int32_t label = regions.labels[static_cast<std::size_t>(p)];
        if (label == 0) continue;
        est_sum[label - 1] += static_cast<double>(density.flat()[p]);
        ++sizes[label - 1];
    }

    // Per-region multiplier, or a flat value when the estimate is ~zero.
    std::vector<double> scale(regions.n_regions, 0.0);
    std::vector<double> flat_value(regions.n_regions, 0.0);
    std::vector<std::uint8_t> uniform(regions.n_regions, 0);
    for (int i = 0; i < regions.n_regions; ++i) {
        if (!mask.empty() && !mask[i]) continue;
        if (est_sum[i] < kDasymetricZero) {
            uniform[i] = 1;
            flat_value[i] = sizes[i] ? static_cast<double>(labels[i]) / sizes[i] : 0.0;
        } else {
            scale[i] = static_cast<double>(labels[i]) / est_sum[i];
        }
    }

    Grid<T> out(regions.height, regions.width);
    for (std::int64_t p = 0; p < n; ++p) {
        const std::int32_t label = regions.labels[static_cast<std::size_t>(p)];
        if (label == 0) continue;
        const int i = label - 1;
        if (!mask.empty() && !mask[i]) continue;
        out.flat()[p] = uniform[i]
                            ? static_cast<T>(flat_value[i])
                            : static_cast<T>(static_cast<double>(density.flat()[p]) * scale[i]);
    }
    return out;
}

/// Mean |estimate - truth| over all pixels (global pixel mean).
template <typename T>
double pixel_mae(const Grid<T>& estimate, const Grid<T>& truth) {
    if (!estimate.same_shape_as(truth)) throw std::invalid_argument("pixel_mae: shape mismatch");
    double total = 0;
    for (std::int64_t p = 0; p < estimate.size(); ++p)
        total += std::abs(static_cast<double>(estimate.flat()[p]) -
                          static_cast<double>(truth.flat()[p]));
    return total / static_cast<double>(estimate.size());
}

/// Global pixel mean over a collection of image pairs.
template <typename T>
double pixel_mae(std::span<const Grid<T>> estimates, std::span<const Grid<T>> truths) {
    if (estimates.size() != truths.size() || estimates.empty())
        throw std::invalid_argument("pixel_mae: image count mismatch");
    double total = 0;
    std::int64_t count = 0;
    for (std::size_t b = 0; b < estimates.size(); ++b) {
        if (!estimates[b].same_shape_as(truths[b]))
            throw std::invalid_argument("pixel_mae: shape mismatch");
        for (std::int64_t p = 0; p < estimates[b].size(); ++p)
            total += std::abs(static_cast<double>(estimates[b].flat()[p]) -
                              static_cast<double>(truths[b].flat()[p]));
        count += estimates[b].size();
    }
    return total / static_cast<double>(count);
}

/// Mean |estimate - label| over masked-in regions.
template <typename T>
double region_mae(std::span<const T> estimates, std::span<const T> labels,
                  std::span<const std::uint8_t> mask = {}) {
    if (estimates.size() != labels.size() || (!mask.empty() && mask.size() != labels.size()))
        throw std::invalid_argument("region_mae: shape mismatch");
    double total = 0;
    std::int64_t count = 0;
    for (std::size_t i = 0; i < estimates.size(); ++i) {
        if (!mask.empty() && !mask[i]) continue;
        total += std::abs(static_cast<double>(estimates[i]) - static_cast<double>(labels[i]));
        ++count;
    }
    if (count == 0) throw std::invalid_argument("region_mae: no masked-in regions");
    return total / static_cast<double>(count);
}

struct MetricsReport {
    std::string experiment;
    Method method = Method::ral;
    Activation activation = Activation::softplus;
    double l2_kernel_weight = 0;
    double l1_activity_weight = 0;
    int k_regions = 0;
    std::int64_t iterations = 0;
    std::uint64_t seed = 0;
    double pixel_mae = 0;
    double region_mae = 0;
    double best_val_region_mae = 0;
    std::int64_t best_iteration = 0;
};

namespace detail {

template <typename T>
MetricsReport report_from(const TrainConfig& cfg, const TrainResult<T>& run,
                          const SupervisedSet& data, const std::string& experiment) {
    const EvalResult test = evaluate_examples(run.best, data.test);
    MetricsReport r;
    r.experiment = experiment;
    r.method = cfg.method;
    r.activation = cfg.output_activation;
    r.l2_kernel_weight = cfg.l2_kernel_weight;
    r.l1_activity_weight = cfg.l1_activity_weight;
    r.k_regions = cfg.k_regions;
    r.iterations = cfg.total_iterations;
    r.seed = cfg.seed;
    r.pixel_mae = test.pixel_mae;
    r.region_mae = test.region_mae;
    r.best_val_region_mae = run.best_val_region_mae;
    r.best_iteration = run.best_iteration;
    return r;
}

}  // namespace detail

using MetricsSink = std::function<void(const MetricsRow&)>;

/// Trains both methods on the same data with the same seed and scores the
/// best checkpoints on the test split. Returns {ral, unif}.
inline std::array<MetricsReport, 2> run_comparison(const SupervisedSet& data,
                                                   const TrainConfig& base,
                                                   const MetricsSink& sink = {}) {
    std::array<MetricsReport, 2> out;
    TrainConfig cfg = base;
    cfg.method = Method::ral;
    out[0] = detail::report_from(cfg, train<float>(cfg, data, nullptr, sink), data,
                                 to_string(data.task) + "/ral");
    cfg.method = Method::unif;
    out[1] = detail::report_from(cfg, train<float>(cfg, data, nullptr, sink), data,
                                 to_string(data.task) + "/unif");
    return out;
}

/// The output-prior ablation on the sparse task: softplus, softplus with the
/// L1 activity penalty, sigmoid, sigmoid with the penalty — all method=ral.
inline std::array<MetricsReport, 4> run_priors_ablation(const SupervisedSet& data,
                                                        const TrainConfig& base,
                                                        double l1_weight = 1e-4,
                                                        const MetricsSink& sink = {}) {
    const std::array<std::pair<Activation, double>, 4> variants = {{
        {Activation::softplus, 0.0},
        {Activation::softplus, l1_weight},
        {Activation::sigmoid, 0.0},
        {Activation::sigmoid, l1_weight},
    }};
    std::array<MetricsReport, 4> out;
    for (std::size_t i = 0; i < variants.size(); ++i) {
        TrainConfig cfg = base;
        cfg.method = Method::ral;
        cfg.output_activation = variants[i].first;
        cfg.l1_activity_weight = variants[i].second;
        const std::string name = to_string(cfg.output_activation) +
                                 (variants[i].second > 0 ? "+l1" : "");
        out[i] = detail::report_from(cfg, train<float>(cfg, data, nullptr, sink), data,
                                     "priors/" + name);
    }
    return out;
}

struct SweepRow {
    int k = 0;
    MetricsReport report;
};

/// Retrains from scratch for each region count. The corpus, density truth
/// and seeds stay fixed; only the partitions change with k.
inline std::vector<SweepRow> sweep_regions(const Dataset& corpus, const BuildOptions& build,
                                           const TrainConfig& base, std::span<const int> ks,
                                           const MetricsSink& sink = {}) {
    if (ks.empty()) throw std::invalid_argument("sweep_regions: no region counts given");
    std::vector<SweepRow> rows;
    rows.reserve(ks.size());
    for (const int k : ks) {
        BuildOptions opt = build;
        opt.k_regions = k;
        const SupervisedSet data = build_supervised_set(corpus, opt);
        TrainConfig cfg = base;
        cfg.method = Method::ral;
        cfg.k_regions = k;
        rows.push_back({k, detail::report_from(cfg, train<float>(cfg, data, nullptr, sink), data,
                                               "sweep/k" + std::to_string(k))});
    }
    return rows;
}

}  // namespace disagg
