#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "disagg/pixelnet.hpp"
#include "disagg/ral.hpp"
#include "disagg/synthetic.hpp"

namespace disagg {

enum class Method { ral, unif };

inline std::string to_string(Method m) { return m == Method::ral ? "ral" : "unif"; }

inline Method method_from_string(const std::string& s) {
    if (s == "ral") return Method::ral;
    if (s == "unif") return Method::unif;
    throw std::invalid_argument("unknown method: " + s);
}

struct TrainConfig {
    Method method = Method::ral;
    Activation output_activation = Activation::softplus;
    std::vector<int> hidden = {64, 32, 16};
    double l2_kernel_weight = 1e-4;
    double l1_activity_weight = 0.0;
    int batch_size = 64;
    std::int64_t total_iterations = 120000;
    double lr0 = 1e-2;
    double lr_decay = 0.5;
    std::int64_t lr_period = 40000;
    std::uint64_t seed = 0;
    int k_regions = 10;
    std::int64_t eval_interval = 1000;
    std::int64_t log_interval = 100;

    void validate() const {
        if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
        if (total_iterations < 0)
            throw std::invalid_argument("TrainConfig: total_iterations must be >= 0");
        if (lr0 <= 0 || lr_decay <= 0) throw std::invalid_argument("TrainConfig: lr must be > 0");
        if (lr_period < 1) throw std::invalid_argument("TrainConfig: lr_period must be >= 1");
        if (l2_kernel_weight < 0 || l1_activity_weight < 0)
            throw std::invalid_argument("TrainConfig: penalty weights must be >= 0");
        if (k_regions < 1) throw std::invalid_argument("TrainConfig: k_regions must be >= 1");
        if (eval_interval < 1 || log_interval < 1)
            throw std::invalid_argument("TrainConfig: intervals must be >= 1");
        if (hidden.empty()) throw std::invalid_argument("TrainConfig: no hidden layers");
    }
};

/// Mean absolute error over masked-in regions; grad = sign(est - label)
/// divided by the masked-in count, zero on masked-out entries and at ties.
template <typename T>
T loss_region_l1(std::span<const T> estimates, std::span<const T> labels,
                 std::span<const std::uint8_t> mask, std::span<T> grad) {
    const std::size_t n = estimates.size();
    if (labels.size() != n || grad.size() != n || (!mask.empty() && mask.size() != n))
        throw std::invalid_argument("loss_region_l1: shape mismatch");
    std::size_t count = 0;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!mask.empty() && !mask[i]) {
            grad[i] = T(0);
            continue;
        }
        ++count;
        const T d = estimates[i] - labels[i];
        total += std::abs(static_cast<double>(d));
        grad[i] = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
    }
    if (count == 0) throw std::invalid_argument("loss_region_l1: no masked-in regions");
    const T inv = T(1) / static_cast<T>(count);
    for (std::size_t i = 0; i < n; ++i) grad[i] *= inv;
    return static_cast<T>(total / static_cast<double>(count));
}

/// Spreads each region label uniformly over the region's pixels. Background
/// pixels get target 0 and an ignore flag. The pixel ignore mask is the
/// second return; 1 means "use in the loss".
template <typename T>
std::pair<Grid<T>, std::vector<std::uint8_t>> uniform_targets(std::span<const T> labels,
                                                              const RegionMap& regions) {
    if (static_cast<int>(labels.size()) != regions.n_regions)
        throw std::invalid_argument("uniform_targets: label count != region count");
    const std::vector<std::int64_t> sizes = region_sizes(regions);
    std::vector<T> per_pixel(regions.n_regions, T(0));
    for (int i = 0; i < regions.n_regions; ++i) {
        if (sizes[i] == 0) {
            if (labels[i] != T(0))
                throw std::invalid_argument("uniform_targets: empty region with nonzero label");
            continue;
        }
        per_pixel[i] = labels[i] / static_cast<T>(sizes[i]);
    }
    Grid<T> targets(regions.height, regions.width);
    std::vector<std::uint8_t> use(static_cast<std::size_t>(regions.pixel_count()), 1);
    for (std::int64_t p = 0; p < regions.pixel_count(); ++p) {
        const std::int32_t label = regions.labels[static_cast<std::size_t>(p)];
        if (label == 0) {
            use[static_cast<std::size_t>(p)] = 0;
            continue;
        }
        targets.flat()[static_cast<std::size_t>(p)] = per_pixel[label - 1];
    }
    return {std::move(targets), std::move(use)};
}

/// Mean absolute error over non-ignored pixels with the same subgradient
/// convention as loss_region_l1.
template <typename T>
T loss_pixel_l1(std::span<const T> density, std::span<const T> targets,
                std::span<const std::uint8_t> use, std::span<T> grad) {
    const std::size_t n = density.size();
    if (targets.size() != n || grad.size() != n || (!use.empty() && use.size() != n))
        throw std::invalid_argument("loss_pixel_l1: shape mismatch");
    std::size_t count = 0;
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!use.empty() && !use[i]) {
            grad[i] = T(0);
            continue;
        }
        ++count;
        const T d = density[i] - targets[i];
        total += std::abs(static_cast<double>(d));
        grad[i] = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
    }
    if (count == 0) throw std::invalid_argument("loss_pixel_l1: all pixels ignored");
    const T inv = T(1) / static_cast<T>(count);
    for (std::size_t i = 0; i < n; ++i) grad[i] *= inv;
    return static_cast<T>(total / static_cast<double>(count));
}

/// lambda * sum of squared kernel entries (biases and shifts excluded).
/// When grads is non-null the contribution 2*lambda*w is added in place.
template <typename T>
T l2_kernel_penalty(PixelNetParams<T>& params, double lambda, PixelNetGrads<T>* grads = nullptr) {
    if (lambda < 0) throw std::invalid_argument("l2_kernel_penalty: lambda must be >= 0");
    if (lambda == 0) return T(0);
    double total = 0;
    auto refs = trainable_tensors(params);
    std::vector<std::span<T>> grad_refs;
    if (grads) grad_refs = grads->tensors();
    for (std::size_t i = 0; i < refs.size(); ++i) {
        if (!refs[i].is_weight) continue;
        for (std::size_t j = 0; j < refs[i].data.size(); ++j) {
            const double w = refs[i].data[j];
            total += w * w;
            if (grads) grad_refs[i][j] += static_cast<T>(2.0 * lambda * w);
        }
    }
    return static_cast<T>(lambda * total);
}

/// lambda * mean |density|. For the non-negative activations used here the
/// gradient is lambda/count at every pixel; it is added into grad_accum.
template <typename T>
T l1_activity_penalty(std::span<const T> density, double lambda, std::span<T> grad_accum) {
    if (lambda < 0) throw std::invalid_argument("l1_activity_penalty: lambda must be >= 0");
    if (grad_accum.size() != density.size())
        throw std::invalid_argument("l1_activity_penalty: shape mismatch");
    if (lambda == 0 || density.empty()) return T(0);
    double total = 0;
    for (const T v : density) total += std::abs(static_cast<double>(v));
    const T g = static_cast<T>(lambda / static_cast<double>(density.size()));
    for (T& v : grad_accum) v += g;
    return static_cast<T>(lambda * total / static_cast<double>(density.size()));
}

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEpsilon = 1e-8;

template <typename T>
struct OptimizerState {
    std::int64_t t = 0;
    std::vector<std::vector<T>> m;
    std::vector<std::vector<T>> v;
    std::vector<std::vector<T>> vmax;

    bool empty() const { return m.empty(); }

    void init_like(const std::vector<TensorRef<T>>& refs) {
        t = 0;
        m.clear();
        v.clear();
        vmax.clear();
        for (const auto& r : refs) {
            m.emplace_back(r.data.size(), T(0));
            v.emplace_back(r.data.size(), T(0));
            vmax.emplace_back(r.data.size(), T(0));
        }
    }
};

/// One AMSGrad update with bias correction:
///   t+=1; m = b1*m + (1-b1)*g; v = b2*v + (1-b2)*g^2; vmax = max(vmax, v)
///   theta -= lr * sqrt(1-b2^t)/(1-b1^t) * m / (sqrt(vmax) + eps)
template <typename T>
void amsgrad_step(OptimizerState<T>& state, std::vector<TensorRef<T>> params,
                  std::vector<std::span<T>> grads, double lr) {
    if (state.empty()) state.init_like(params);
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw std::invalid_argument("amsgrad_step: tensor list mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i].data.size() != grads[i].size() || params[i].data.size() != state.m[i].size())
            throw std::invalid_argument("amsgrad_step: shape mismatch in " + params[i].name);
        for (const T g : grads[i])
            if (!std::isfinite(g))
                throw std::runtime_error("amsgrad_step: non-finite gradient in " + params[i].name);
    }
    state.t += 1;
    const double correction =
        std::sqrt(1.0 - std::pow(kAdamBeta2, static_cast<double>(state.t))) /
        (1.0 - std::pow(kAdamBeta1, static_cast<double>(state.t)));
    const T alpha = static_cast<T>(lr * correction);
    const T b1 = static_cast<T>(kAdamBeta1), b2 = static_cast<T>(kAdamBeta2);
    const T eps = static_cast<T>(kAdamEpsilon);
    for (std::size_t i = 0; i < params.size(); ++i) {
        T* m = state.m[i].data();
        T* v = state.v[i].data();
        T* vmax = state.vmax[i].data();
        T* theta = params[i].data.data();
        const std::span<const T> g = grads[i];
        for (std::size_t j = 0; j < g.size(); ++j) {
            m[j] = b1 * m[j] + (T(1) - b1) * g[j];
            v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
            vmax[j] = std::max(vmax[j], v[j]);
            theta[j] -= alpha * m[j] / (std::sqrt(vmax[j]) + eps);
        }
    }
}

inline double lr_schedule(std::int64_t iteration, double lr0, double decay = 0.5,
                          std::int64_t period = 40000) {
    if (iteration < 0) throw std::invalid_argument("lr_schedule: iteration must be >= 0");
    return lr0 * std::pow(decay, static_cast<double>(iteration / period));
}

/// A training batch in channel-major form. Region structures are borrowed
/// from the examples; pixel targets (unif method) are materialized here.
template <typename T>
struct BatchView {
    int height = 0;
    int width = 0;
    ChannelMatrix<T> input;                     // channels x (B * H * W)
    std::vector<const CsrMatrix<T>*> matrices;  // one per example
    std::vector<T> labels;                      // concatenated region labels
    std::vector<std::uint8_t> mask;             // parallel to labels
    std::vector<std::int64_t> offsets;          // size B+1 into labels
    std::vector<T> pixel_targets;               // unif method only, B*H*W
    std::vector<std::uint8_t> pixel_use;        // unif method only

    std::size_t size() const { return matrices.size(); }
    std::int64_t pixels() const { return input.n; }
};

inline BatchView<float> build_batch(std::span<const Example> pool,
                                    std::span<const std::size_t> indices, Method method) {
    if (indices.empty()) throw std::invalid_argument("build_batch: empty batch");
    BatchView<float> batch;
    batch.height = Image::kHeight;
    batch.width = Image::kWidth;
    const std::int64_t per = Image::kPixels;
    batch.input.resize(Image::kChannels, static_cast<std::int64_t>(indices.size()) * per);
    batch.offsets.push_back(0);
    for (std::size_t b = 0; b < indices.size(); ++b) {
        const Example& ex = pool[indices[b]];
        for (int ch = 0; ch < Image::kChannels; ++ch) {
            float* dst = batch.input.row(ch) + static_cast<std::int64_t>(b) * per;
            const std::uint8_t* src = ex.image.planes.data() + ch * Image::kPixels;
            for (std::int64_t p = 0; p < per; ++p)
                dst[p] = static_cast<float>(src[p]) / 127.5f - 1.0f;
        }
        batch.matrices.push_back(&ex.matrix);
        batch.labels.insert(batch.labels.end(), ex.labels.begin(), ex.labels.end());
        batch.mask.insert(batch.mask.end(), ex.valid.begin(), ex.valid.end());
        batch.offsets.push_back(static_cast<std::int64_t>(batch.labels.size()));
        if (method == Method::unif) {
            auto [targets, use] = uniform_targets<float>(ex.labels, ex.regions);
            batch.pixel_targets.insert(batch.pixel_targets.end(), targets.flat().begin(),
                                       targets.flat().end());
            batch.pixel_use.insert(batch.pixel_use.end(), use.begin(), use.end());
        }
    }
    return batch;
}

/// Forward + loss + full backward for one batch. Returns the total loss
/// (data term plus enabled penalties) and fills `grads`. Disabled penalties
/// are skipped entirely so a zero-weight run is bit-identical to one with
/// the penalty code absent. When `region_estimates` is non-null it receives
/// the concatenated per-region estimates (RAL applied to the predictions).
template <typename T>
T batch_loss_and_grads(PixelNetParams<T>& params, const BatchView<T>& batch, Method method,
                       double l2_kernel_weight, double l1_activity_weight, ForwardCache<T>& cache,
                       PixelNetGrads<T>& grads, std::vector<T>* region_estimates = nullptr) {
    const std::int64_t total_pixels = batch.pixels();
    const std::int64_t per = static_cast<std::int64_t>(batch.height) * batch.width;
    std::vector<T> density = pixelnet_forward(params, batch.input, RunMode::train, &cache);

    std::vector<T> estimates(batch.labels.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const std::span<const T> slice(density.data() + static_cast<std::int64_t>(b) * per,
                                       static_cast<std::size_t>(per));
        const std::span<T> est(estimates.data() + batch.offsets[b],
                               static_cast<std::size_t>(batch.offsets[b + 1] - batch.offsets[b]));
        batch.matrices[b]->multiply(slice, est);
    }

    std::vector<T> density_grad(static_cast<std::size_t>(total_pixels), T(0));
    T loss;
    if (method == Method::ral) {
        std::vector<T> est_grad(estimates.size());
        loss = loss_region_l1<T>(estimates, batch.labels, batch.mask, est_grad);
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const std::span<const T> up(est_grad.data() + batch.offsets[b],
                                        static_cast<std::size_t>(batch.offsets[b + 1] -
                                                                 batch.offsets[b]));
            const std::span<T> out(density_grad.data() + static_cast<std::int64_t>(b) * per,
                                   static_cast<std::size_t>(per));
            batch.matrices[b]->multiply_transpose(up, out);
        }
    } else {
        loss = loss_pixel_l1<T>(density, batch.pixel_targets, batch.pixel_use, density_grad);
    }

    if (l1_activity_weight > 0)
        loss += l1_activity_penalty<T>(density, l1_activity_weight, density_grad);

    pixelnet_backward(params, cache, density_grad, grads);

    if (l2_kernel_weight > 0) loss += l2_kernel_penalty(params, l2_kernel_weight, &grads);

    if (region_estimates) *region_estimates = std::move(estimates);
    return loss;
}

struct MetricsRow {
    std::int64_t iteration = 0;
    std::string split;  // "train" or "val"
    double lr = std::numeric_limits<double>::quiet_NaN();
    double loss = std::numeric_limits<double>::quiet_NaN();
    double region_mae = std::numeric_limits<double>::quiet_NaN();
    double pixel_mae = std::numeric_limits<double>::quiet_NaN();
};

struct EvalResult {
    double region_mae = 0;
    double pixel_mae = 0;
};

/// Infer-mode metrics over a set of examples, processed in fixed-size
/// chunks. Region estimates come from the RAL applied to the predictions.
template <typename T>
EvalResult evaluate_examples(const PixelNetParams<T>& params, std::span<const Example> examples,
                             std::size_t chunk = 128) {
    if (examples.empty()) throw std::invalid_argument("evaluate_examples: no examples");
    double pixel_abs = 0, region_abs = 0;
    std::int64_t pixel_n = 0, region_n = 0;
    const std::int64_t per = Image::kPixels;
    ChannelMatrix<T> input;
    for (std::size_t start = 0; start < examples.size(); start += chunk) {
        const std::size_t count = std::min(chunk, examples.size() - start);
        input.resize(Image::kChannels, static_cast<std::int64_t>(count) * per);
        for (std::size_t b = 0; b < count; ++b) {
            const Example& ex = examples[start + b];
            for (int ch = 0; ch < Image::kChannels; ++ch) {
                T* dst = input.row(ch) + static_cast<std::int64_t>(b) * per;
                const std::uint8_t* src = ex.image.planes.data() + ch * Image::kPixels;
                for (std::int64_t p = 0; p < per; ++p)
                    dst[p] = static_cast<T>(src[p]) / T(127.5) - T(1);
            }
        }
        const std::vector<T> density = pixelnet_infer(params, input);
        for (std::size_t b = 0; b < count; ++b) {
            const Example& ex = examples[start + b];
            const std::span<const T> slice(density.data() + static_cast<std::int64_t>(b) * per,
                                           static_cast<std::size_t>(per));
            for (std::int64_t p = 0; p < per; ++p)
                pixel_abs += std::abs(static_cast<double>(slice[p]) -
                                      static_cast<double>(ex.density.flat()[p]));
            pixel_n += per;
            std::vector<T> est(ex.labels.size());
            CsrMatrix<T> cast_matrix;
            const CsrMatrix<T>* m;
            if constexpr (std::is_same_v<T, float>) {
                m = &ex.matrix;
            } else {
                cast_matrix = ex.matrix.template cast<T>();
                m = &cast_matrix;
            }
            m->multiply(slice, est);
            for (std::size_t i = 0; i < est.size(); ++i) {
                if (!ex.valid[i]) continue;
                region_abs += std::abs(static_cast<double>(est[i]) -
                                       static_cast<double>(ex.labels[i]));
                ++region_n;
            }
        }
    }
    if (region_n == 0) throw std::invalid_argument("evaluate_examples: no valid regions");
    return {region_abs / static_cast<double>(region_n), pixel_abs / static_cast<double>(pixel_n)};
}

template <typename T>
struct ResumePoint {
    PixelNetParams<T> params;
    OptimizerState<T> opt;
    std::int64_t iteration = 0;
};

template <typename T>
struct TrainResult {
    PixelNetParams<T> best;
    PixelNetParams<T> last;
    OptimizerState<T> opt;
    std::int64_t best_iteration = 0;
    double best_val_region_mae = std::numeric_limits<double>::infinity();
    std::int64_t end_iteration = 0;
    std::vector<MetricsRow> log;
};

namespace detail {

inline constexpr std::uint64_t kStreamInit = 1001;
inline constexpr std::uint64_t kStreamBatch = 1002;

}  // namespace detail

/// The full loop: sample a batch with replacement, forward in train mode,
/// method-specific loss plus penalties, backward, AMSGrad step. Every
/// eval_interval steps the validation split is scored in infer mode and the
/// best-by-region-MAE parameters are retained ("best checkpoint"). With no
/// validation split the final parameters double as best.
template <typename T = float>
TrainResult<T> train(const TrainConfig& cfg, const SupervisedSet& data,
                     const ResumePoint<T>* resume = nullptr,
                     const std::function<void(const MetricsRow&)>& on_metrics = {}) {
    cfg.validate();
    if (data.train.empty()) throw std::invalid_argument("train: empty training split");

    TrainResult<T> result;
    std::int64_t iter = 0;
    if (resume) {
        result.last = resume->params;
        result.opt = resume->opt;
        iter = resume->iteration;
    } else {
        Architecture arch;
        arch.in_channels = Image::kChannels;
        arch.hidden = cfg.hidden;
        arch.output_activation = cfg.output_activation;
        Rng init_rng(derive_seed(cfg.seed, detail::kStreamInit));
        result.last = init_params<T>(init_rng, arch);
    }
    result.best = result.last;
    result.best_iteration = iter;
    result.end_iteration = iter;
    if (iter >= cfg.total_iterations) return result;

    Rng batch_rng(derive_seed(derive_seed(cfg.seed, detail::kStreamBatch),
                              static_cast<std::uint64_t>(iter)));
    std::vector<std::size_t> indices(static_cast<std::size_t>(cfg.batch_size));
    ForwardCache<T> cache;
    PixelNetGrads<T> grads;
    bool have_best = false;

    auto emit = [&](const MetricsRow& row) {
        result.log.push_back(row);
        if (on_metrics) on_metrics(row);
    };

    for (; iter < cfg.total_iterations; ++iter) {
        static_assert(std::is_same_v<T, float>, "train() runs in single precision");
        const double lr = lr_schedule(iter, cfg.lr0, cfg.lr_decay, cfg.lr_period);
        for (auto& ix : indices) ix = static_cast<std::size_t>(batch_rng.below(data.train.size()));
        const BatchView<T> batch = build_batch(data.train, indices, cfg.method);

        std::vector<T> estimates;
        T loss = T(0);
        try {
            loss = batch_loss_and_grads(result.last, batch, cfg.method, cfg.l2_kernel_weight,
                                        cfg.l1_activity_weight, cache, grads, &estimates);
            if (!std::isfinite(static_cast<double>(loss)))
                throw std::runtime_error("non-finite loss");
            amsgrad_step(result.opt, trainable_tensors(result.last), grads.tensors(), lr);
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("train: aborted at iteration " + std::to_string(iter) + ": " +
                                     e.what());
        }
        const std::int64_t done = iter + 1;

        if (done % cfg.log_interval == 0 || done == cfg.total_iterations) {
            MetricsRow row;
            row.iteration = done;
            row.split = "train";
            row.lr = lr;
            row.loss = static_cast<double>(loss);
            double abs_sum = 0;
            std::int64_t n_in = 0;
            for (std::size_t i = 0; i < estimates.size(); ++i) {
                if (!batch.mask.empty() && !batch.mask[i]) continue;
                abs_sum += std::abs(static_cast<double>(estimates[i]) -
                                    static_cast<double>(batch.labels[i]));
                ++n_in;
            }
            row.region_mae = abs_sum / static_cast<double>(n_in);
            emit(row);
        }

        if (!data.val.empty() &&
            (done % cfg.eval_interval == 0 || done == cfg.total_iterations)) {
            const EvalResult ev = evaluate_examples(result.last, data.val);
            MetricsRow row;
            row.iteration = done;
            row.split = "val";
            row.lr = lr;
            row.region_mae = ev.region_mae;
            row.pixel_mae = ev.pixel_mae;
            emit(row);
            if (!have_best || ev.region_mae < result.best_val_region_mae) {
                have_best = true;
                result.best_val_region_mae = ev.region_mae;
                result.best = result.last;
                result.best_iteration = done;
            }
        }
    }
    result.end_iteration = cfg.total_iterations;
    if (!have_best) {
        result.best = result.last;
        result.best_iteration = cfg.total_iterations;
    }
    return result;
}

}  // namespace disagg
