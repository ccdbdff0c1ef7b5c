#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "disagg/rng.hpp"

namespace disagg {

enum class Activation { softplus, sigmoid, relu };

inline std::string to_string(Activation a) {
    switch (a) {
        case Activation::softplus: return "softplus";
        case Activation::sigmoid: return "sigmoid";
        case Activation::relu: return "relu";
    }
    return "?";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "softplus") return Activation::softplus;
    if (s == "sigmoid") return Activation::sigmoid;
    if (s == "relu") return Activation::relu;
    throw std::invalid_argument("unknown activation: " + s);
}

template <typename T>
T activation_apply(Activation kind, T x) {
    switch (kind) {
        case Activation::softplus:
            // max(x,0) + log1p(exp(-|x|)) never overflows
            return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x)));
        case Activation::sigmoid:
            return T(1) / (T(1) + std::exp(-x));
        case Activation::relu:
            return x > T(0) ? x : T(0);
    }
    return T(0);
}

/// d activation / dx at pre-activation x. ReLU's subgradient at 0 is 0.
template <typename T>
T activation_derivative(Activation kind, T x) {
    switch (kind) {
        case Activation::softplus:
            return T(1) / (T(1) + std::exp(-x));
        case Activation::sigmoid: {
            const T s = T(1) / (T(1) + std::exp(-x));
            return s * (T(1) - s);
        }
        case Activation::relu:
            return x > T(0) ? T(1) : T(0);
    }
    return T(0);
}

enum class RunMode { train, infer };

struct Architecture {
    int in_channels = 3;
    std::vector<int> hidden = {64, 32, 16};
    Activation output_activation = Activation::softplus;

    bool operator==(const Architecture&) const = default;
};

/// Channel-major activation buffer: `channels` rows of `n` contiguous pixel
/// values. Keeping each channel contiguous turns the per-pixel affine maps
/// into stride-1 axpy/dot loops.
template <typename T>
struct ChannelMatrix {
    int channels = 0;
    std::int64_t n = 0;
    std::vector<T> data;

    ChannelMatrix() = default;
    ChannelMatrix(int c, std::int64_t n_) { resize(c, n_); }

    /// A fresh matrix starts zeroed; resizing an existing one keeps the
    /// allocation and leaves the contents unspecified, so hot loops can
    /// recycle buffers without paying for a clear they will overwrite.
    void resize(int c, std::int64_t n_) {
        channels = c;
        n = n_;
        data.resize(static_cast<std::size_t>(c) * n_);
    }

    T* row(int c) { return data.data() + static_cast<std::size_t>(c) * n; }
    const T* row(int c) const { return data.data() + static_cast<std::size_t>(c) * n; }
};

template <typename T>
struct DenseLayer {
    int in = 0;
    int out = 0;
    std::vector<T> weight;  // out x in, row-major
    std::vector<T> bias;    // out

    void resize(int in_, int out_) {
        in = in_;
        out = out_;
        weight.assign(static_cast<std::size_t>(in_) * out_, T(0));
        bias.assign(out_, T(0));
    }
};

/// Batch normalization with the scale fixed at 1; only the shift is
/// trainable. Running statistics are bookkeeping, not parameters.
template <typename T>
struct BatchNormLayer {
    std::vector<T> shift;         // beta, trainable
    std::vector<T> running_mean;  // updated in train mode only
    std::vector<T> running_var;

    void resize(int channels) {
        shift.assign(channels, T(0));
        running_mean.assign(channels, T(0));
        running_var.assign(channels, T(1));
    }
};

inline constexpr double kBnEpsilon = 1e-3;
inline constexpr double kBnMomentum = 0.99;

template <typename T>
struct PixelNetParams {
    Architecture arch;
    std::vector<DenseLayer<T>> hidden;
    std::vector<BatchNormLayer<T>> norms;
    DenseLayer<T> output;
};

template <typename T>
struct TensorRef {
    std::string name;
    std::span<T> data;
    bool is_weight = false;  // true for the kernel matrices (L2-regularized)
};

/// Trainable tensors in a fixed traversal order shared by gradients,
/// optimizer state and checkpoints.
template <typename T>
std::vector<TensorRef<T>> trainable_tensors(PixelNetParams<T>& p) {
    std::vector<TensorRef<T>> refs;
    for (std::size_t l = 0; l < p.hidden.size(); ++l) {
        const std::string base = "hidden" + std::to_string(l);
        refs.push_back({base + ".weight", p.hidden[l].weight, true});
        refs.push_back({base + ".bias", p.hidden[l].bias, false});
        refs.push_back({base + ".shift", p.norms[l].shift, false});
    }
    refs.push_back({"output.weight", p.output.weight, true});
    refs.push_back({"output.bias", p.output.bias, false});
    return refs;
}

/// Fan-in/fan-out scaled uniform init for the kernels; biases, shifts and
/// running means start at zero, running variances at one.
template <typename T>
PixelNetParams<T> init_params(Rng& rng, const Architecture& arch) {
    PixelNetParams<T> p;
    p.arch = arch;
    p.hidden.resize(arch.hidden.size());
    p.norms.resize(arch.hidden.size());
    int fan_in = arch.in_channels;
    for (std::size_t l = 0; l < arch.hidden.size(); ++l) {
        const int fan_out = arch.hidden[l];
        p.hidden[l].resize(fan_in, fan_out);
        p.norms[l].resize(fan_out);
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& w : p.hidden[l].weight) w = static_cast<T>(rng.uniform(-bound, bound));
        fan_in = fan_out;
    }
    p.output.resize(fan_in, 1);
    const double bound = std::sqrt(6.0 / (fan_in + 1));
    for (auto& w : p.output.weight) w = static_cast<T>(rng.uniform(-bound, bound));
    return p;
}

namespace detail {

inline constexpr std::int64_t kPixelBlock = 1024;
inline constexpr int kChunk = 16;   // pixels per vector chunk
inline constexpr int kRowTile = 8;  // rows accumulated per pass over the inputs
inline constexpr int kDotTile = 4;  // square tile edge for the dot-product kernel

// The affine kernels tile their loops so several rows share each pass over
// the operand rows, with the accumulators held in vector registers via the
// GNU vector extension. Define DISAGG_PLAIN_KERNELS to force the plain
// row-at-a-time loops (any compiler); results are identical either way
// because every element sees the same accumulation order.
#if (defined(__GNUC__) || defined(__clang__)) && !defined(DISAGG_PLAIN_KERNELS)
#define DISAGG_VEC_KERNELS 1
template <typename T>
struct ChunkOf;
template <>
struct ChunkOf<float> {
    typedef float type __attribute__((vector_size(kChunk * sizeof(float))));
};
template <>
struct ChunkOf<double> {
    typedef double type __attribute__((vector_size(kChunk * sizeof(double))));
};

template <typename T>
typename ChunkOf<T>::type chunk_load(const T* p) {
    typename ChunkOf<T>::type v;
    std::memcpy(&v, p, sizeof v);
    return v;
}
template <typename T>
void chunk_store(T* p, typename ChunkOf<T>::type v) {
    std::memcpy(p, &v, sizeof v);
}
template <typename T>
typename ChunkOf<T>::type chunk_splat(T s) {
    return typename ChunkOf<T>::type{} + s;
}

template <typename T>
inline constexpr bool kVecKernels = std::is_same_v<T, float> || std::is_same_v<T, double>;
#else
template <typename T>
inline constexpr bool kVecKernels = false;
#endif

// One output row of z[o][:] = bias[o] + sum_in w[o][in] * x[in][:] over a
// pixel range. Also the reference accumulation order (bias, then ascending
// input index) that the tiled kernels must reproduce element for element.
template <typename T>
void affine_row(const DenseLayer<T>& L, const ChannelMatrix<T>& x, int o, std::int64_t from,
                std::int64_t to, T* zrow) {
    const T b = L.bias[o];
    for (std::int64_t p = from; p < to; ++p) zrow[p] = b;
    const T* wr = L.weight.data() + static_cast<std::size_t>(o) * L.in;
    for (int i = 0; i < L.in; ++i) {
        const T w = wr[i];
        const T* xr = x.row(i);
        for (std::int64_t p = from; p < to; ++p) zrow[p] += w * xr[p];
    }
}

// z[o][:] = bias[o] + sum_in w[o][in] * x[in][:]. Full kRowTile groups of
// output rows share each pass over the x rows, with the input-index loop
// kept outermost so every element sees the same addition order as
// affine_row; leftover rows and pixels take the plain path.
template <typename T>
void affine_forward(const DenseLayer<T>& L, const ChannelMatrix<T>& x, ChannelMatrix<T>& z) {
    const std::int64_t n = x.n;
    z.resize(L.out, n);
    const std::int64_t blocks = (n + kPixelBlock - 1) / kPixelBlock;
#pragma omp parallel for schedule(static) if (blocks > 1)
    for (std::int64_t blk = 0; blk < blocks; ++blk) {
        const std::int64_t p0 = blk * kPixelBlock;
        const std::int64_t pb = std::min(kPixelBlock, n - p0);
        if constexpr (kVecKernels<T>) {
#if DISAGG_VEC_KERNELS
            using V = typename ChunkOf<T>::type;
            int o0 = 0;
            for (; o0 + kRowTile <= L.out; o0 += kRowTile) {
                std::int64_t p = 0;
                for (; p + kChunk <= pb; p += kChunk) {
                    V acc[kRowTile];
                    for (int t = 0; t < kRowTile; ++t) acc[t] = chunk_splat(L.bias[o0 + t]);
                    for (int i = 0; i < L.in; ++i) {
                        const V xv = chunk_load(x.row(i) + p0 + p);
                        for (int t = 0; t < kRowTile; ++t)
                            acc[t] += L.weight[static_cast<std::size_t>(o0 + t) * L.in + i] * xv;
                    }
                    for (int t = 0; t < kRowTile; ++t)
                        chunk_store(z.row(o0 + t) + p0 + p, acc[t]);
                }
                if (p < pb)
                    for (int t = 0; t < kRowTile; ++t)
                        affine_row(L, x, o0 + t, p0 + p, p0 + pb, z.row(o0 + t));
            }
            for (; o0 < L.out; ++o0) affine_row(L, x, o0, p0, p0 + pb, z.row(o0));
#endif
        } else {
            for (int o = 0; o < L.out; ++o) affine_row(L, x, o, p0, p0 + pb, z.row(o));
        }
    }
}

// Dot product with a fixed lane structure so vectorization does not depend
// on reassociation and the result is reproducible for any thread count.
template <typename T>
T dot_lanes(const T* a, const T* b, std::int64_t len) {
    constexpr int kLanes = 16;
    T acc[kLanes] = {};
    std::int64_t p = 0;
    for (; p + kLanes <= len; p += kLanes)
        for (int l = 0; l < kLanes; ++l) acc[l] += a[p + l] * b[p + l];
    T tail = T(0);
    for (; p < len; ++p) tail += a[p] * b[p];
    T s = tail;
    for (int l = 0; l < kLanes; ++l) s += acc[l];
    return s;
}

template <typename T>
T sum_lanes(const T* a, std::int64_t len) {
    constexpr int kLanes = 16;
    T acc[kLanes] = {};
    std::int64_t p = 0;
    for (; p + kLanes <= len; p += kLanes)
        for (int l = 0; l < kLanes; ++l) acc[l] += a[p + l];
    T tail = T(0);
    for (; p < len; ++p) tail += a[p];
    T s = tail;
    for (int l = 0; l < kLanes; ++l) s += acc[l];
    return s;
}

// One input row of dx[i][:] = sum_o w[o][i] * dz[o][:] over a pixel range,
// in the reference accumulation order (zero, then ascending output index).
template <typename T>
void transposed_row(const DenseLayer<T>& L, const ChannelMatrix<T>& dz, int i, std::int64_t from,
                    std::int64_t to, T* dxrow) {
    for (std::int64_t p = from; p < to; ++p) dxrow[p] = T(0);
    for (int o = 0; o < L.out; ++o) {
        const T w = L.weight[static_cast<std::size_t>(o) * L.in + i];
        const T* dzr = dz.row(o);
        for (std::int64_t p = from; p < to; ++p) dxrow[p] += w * dzr[p];
    }
}

// dW[o][in] += sum_p dz[o][p] x[in][p]; db[o] += sum_p dz[o][p];
// dx[in][:] = sum_o w[o][in] dz[o][:] (skipped when dx is null).
// Per-block partials are reduced in block order, independent of threading.
template <typename T>
void affine_backward(const DenseLayer<T>& L, const ChannelMatrix<T>& x,
                     const ChannelMatrix<T>& dz, std::vector<T>& dw, std::vector<T>& db,
                     ChannelMatrix<T>* dx) {
    const std::int64_t n = x.n;
    const std::int64_t blocks = (n + kPixelBlock - 1) / kPixelBlock;
    const std::size_t wsize = L.weight.size();
    std::vector<T> partial(static_cast<std::size_t>(blocks) * (wsize + L.out), T(0));
    if (dx) dx->resize(L.in, n);

#pragma omp parallel for schedule(static) if (blocks > 1)
    for (std::int64_t blk = 0; blk < blocks; ++blk) {
        const std::int64_t p0 = blk * kPixelBlock;
        const std::int64_t pb = std::min(kPixelBlock, n - p0);
        T* pw = partial.data() + static_cast<std::size_t>(blk) * (wsize + L.out);
        T* pb_bias = pw + wsize;
        for (int o = 0; o < L.out; ++o) pb_bias[o] = sum_lanes(dz.row(o) + p0, pb);
        if constexpr (kVecKernels<T>) {
#if DISAGG_VEC_KERNELS
            using V = typename ChunkOf<T>::type;
            // Weight-gradient dots in kDotTile x kDotTile groups so each
            // loaded chunk of dz / x feeds several dots. Lane layout and the
            // tail-then-lanes reduction match dot_lanes exactly; leftover
            // rows fall back to it outright.
            int o0 = 0;
            for (; o0 + kDotTile <= L.out; o0 += kDotTile) {
                int i0 = 0;
                for (; i0 + kDotTile <= L.in; i0 += kDotTile) {
                    V lanes[kDotTile][kDotTile] = {};
                    std::int64_t p = 0;
                    for (; p + kChunk <= pb; p += kChunk)
                        for (int a = 0; a < kDotTile; ++a) {
                            const V dzv = chunk_load(dz.row(o0 + a) + p0 + p);
                            for (int b = 0; b < kDotTile; ++b)
                                lanes[a][b] += dzv * chunk_load(x.row(i0 + b) + p0 + p);
                        }
                    for (int a = 0; a < kDotTile; ++a)
                        for (int b = 0; b < kDotTile; ++b) {
                            const T* dzr = dz.row(o0 + a) + p0;
                            const T* xr = x.row(i0 + b) + p0;
                            T s = T(0);
                            for (std::int64_t q = p; q < pb; ++q) s += dzr[q] * xr[q];
                            for (int l = 0; l < kChunk; ++l) s += lanes[a][b][l];
                            pw[static_cast<std::size_t>(o0 + a) * L.in + (i0 + b)] = s;
                        }
                }
                for (; i0 < L.in; ++i0)
                    for (int a = 0; a < kDotTile; ++a)
                        pw[static_cast<std::size_t>(o0 + a) * L.in + i0] =
                            dot_lanes(dz.row(o0 + a) + p0, x.row(i0) + p0, pb);
            }
            for (; o0 < L.out; ++o0)
                for (int i = 0; i < L.in; ++i)
                    pw[static_cast<std::size_t>(o0) * L.in + i] =
                        dot_lanes(dz.row(o0) + p0, x.row(i) + p0, pb);
            if (dx) {
                // dx rows in kRowTile groups sharing each pass over the dz
                // rows; the output-index loop stays outermost to keep
                // transposed_row's per-element addition order.
                int i0 = 0;
                for (; i0 + kRowTile <= L.in; i0 += kRowTile) {
                    std::int64_t p = 0;
                    for (; p + kChunk <= pb; p += kChunk) {
                        V acc[kRowTile] = {};
                        for (int o = 0; o < L.out; ++o) {
                            const V dzv = chunk_load(dz.row(o) + p0 + p);
                            for (int t = 0; t < kRowTile; ++t)
                                acc[t] +=
                                    L.weight[static_cast<std::size_t>(o) * L.in + i0 + t] * dzv;
                        }
                        for (int t = 0; t < kRowTile; ++t)
                            chunk_store(dx->row(i0 + t) + p0 + p, acc[t]);
                    }
                    if (p < pb)
                        for (int t = 0; t < kRowTile; ++t)
                            transposed_row(L, dz, i0 + t, p0 + p, p0 + pb, dx->row(i0 + t));
                }
                for (; i0 < L.in; ++i0) transposed_row(L, dz, i0, p0, p0 + pb, dx->row(i0));
            }
#endif
        } else {
            for (int o = 0; o < L.out; ++o)
                for (int i = 0; i < L.in; ++i)
                    pw[static_cast<std::size_t>(o) * L.in + i] =
                        dot_lanes(dz.row(o) + p0, x.row(i) + p0, pb);
            if (dx)
                for (int i = 0; i < L.in; ++i) transposed_row(L, dz, i, p0, p0 + pb, dx->row(i));
        }
    }

    dw.assign(wsize, T(0));
    db.assign(L.out, T(0));
    for (std::int64_t blk = 0; blk < blocks; ++blk) {
        const T* pw = partial.data() + static_cast<std::size_t>(blk) * (wsize + L.out);
        for (std::size_t i = 0; i < wsize; ++i) dw[i] += pw[i];
        for (int o = 0; o < L.out; ++o) db[o] += pw[wsize + o];
    }
}

// Channel-wise mean and biased variance with block partials (two passes).
template <typename T>
void batch_stats(const T* row, std::int64_t n, T& mean, T& var) {
    const std::int64_t blocks = (n + kPixelBlock - 1) / kPixelBlock;
    std::vector<T> partial(blocks);
    for (std::int64_t blk = 0; blk < blocks; ++blk) {
        const std::int64_t p0 = blk * kPixelBlock;
        partial[blk] = sum_lanes(row + p0, std::min(kPixelBlock, n - p0));
    }
    T s = T(0);
    for (T v : partial) s += v;
    mean = s / static_cast<T>(n);
    for (std::int64_t blk = 0; blk < blocks; ++blk) {
        const std::int64_t p0 = blk * kPixelBlock;
        const std::int64_t pb = std::min(kPixelBlock, n - p0);
        constexpr int kLanes = 16;
        T acc[kLanes] = {};
        const T* r = row + p0;
        std::int64_t p = 0;
        for (; p + kLanes <= pb; p += kLanes)
            for (int l = 0; l < kLanes; ++l) {
                const T d = r[p + l] - mean;
                acc[l] += d * d;
            }
        T tail = T(0);
        for (; p < pb; ++p) {
            const T d = r[p] - mean;
            tail += d * d;
        }
        T bsum = tail;
        for (int l = 0; l < kLanes; ++l) bsum += acc[l];
        partial[blk] = bsum;
    }
    T q = T(0);
    for (T v : partial) q += v;
    var = q / static_cast<T>(n);
}

}  // namespace detail

template <typename T>
struct LayerCache {
    ChannelMatrix<T> pre;   // affine output z
    ChannelMatrix<T> post;  // batchnorm output y (layer output)
    std::vector<T> mean;    // batch statistics used in this pass
    std::vector<T> inv_std;
};

template <typename T>
struct ForwardCache {
    RunMode mode = RunMode::infer;
    ChannelMatrix<T> input;
    std::vector<LayerCache<T>> layers;
    ChannelMatrix<T> out_pre;  // output-layer pre-activation, 1 x n
    // Ping-pong workspace for the matching backward pass; keeping it here
    // lets a training loop reuse the allocations across steps.
    ChannelMatrix<T> grad_a;
    ChannelMatrix<T> grad_b;
};

/// Per pixel: three (affine -> ReLU -> batchnorm) stages, then affine and
/// the output activation. Train mode normalizes with statistics over all
/// pixels of the batch and folds them into the running estimates; infer
/// mode normalizes with the running estimates and leaves params untouched.
template <typename T>
std::vector<T> pixelnet_forward(PixelNetParams<T>& params, const ChannelMatrix<T>& input,
                                RunMode mode, std::type_identity_t<ForwardCache<T>*> cache) {
    if (input.channels != params.arch.in_channels)
        throw std::invalid_argument("pixelnet_forward: wrong input channel count");
    const std::int64_t n = input.n;
    if (mode == RunMode::train && n < 2)
        throw std::invalid_argument("pixelnet_forward: train mode needs at least 2 pixels");
    for (const T& v : input.data)
        if (!std::isfinite(v)) throw std::invalid_argument("pixelnet_forward: non-finite input");

    if (cache) {
        cache->mode = mode;
        cache->input = input;
        cache->layers.resize(params.hidden.size());
    }

    // Without a cache the two scratch buffers alternate so a layer never
    // writes into the buffer it is reading from.
    ChannelMatrix<T> scratch[2];
    int which = 0;
    const ChannelMatrix<T>* cur = &input;
    for (std::size_t l = 0; l < params.hidden.size(); ++l) {
        ChannelMatrix<T>& z = cache ? cache->layers[l].pre : scratch[which];
        detail::affine_forward(params.hidden[l], *cur, z);

        ChannelMatrix<T>& y = cache ? cache->layers[l].post : scratch[which];
        if (cache) y.resize(z.channels, n);
        BatchNormLayer<T>& bn = params.norms[l];
        std::vector<T>* means = cache ? &cache->layers[l].mean : nullptr;
        std::vector<T>* inv_stds = cache ? &cache->layers[l].inv_std : nullptr;
        if (means) means->assign(z.channels, T(0));
        if (inv_stds) inv_stds->assign(z.channels, T(0));

        for (int c = 0; c < z.channels; ++c) {
            T* zr = z.row(c);
            // ReLU applies in place before normalization
            for (std::int64_t p = 0; p < n; ++p) zr[p] = zr[p] > T(0) ? zr[p] : T(0);

            T mean, var;
            if (mode == RunMode::train) {
                detail::batch_stats(zr, n, mean, var);
                bn.running_mean[c] = static_cast<T>(kBnMomentum) * bn.running_mean[c] +
                                     static_cast<T>(1.0 - kBnMomentum) * mean;
                bn.running_var[c] = static_cast<T>(kBnMomentum) * bn.running_var[c] +
                                    static_cast<T>(1.0 - kBnMomentum) * var;
            } else {
                mean = bn.running_mean[c];
                var = bn.running_var[c];
            }
            const T inv_std = T(1) / std::sqrt(var + static_cast<T>(kBnEpsilon));
            const T beta = bn.shift[c];
            T* yr = y.row(c);
            const std::int64_t blocks = (n + detail::kPixelBlock - 1) / detail::kPixelBlock;
#pragma omp parallel for schedule(static) if (blocks > 4)
            for (std::int64_t blk = 0; blk < blocks; ++blk) {
                const std::int64_t p0 = blk * detail::kPixelBlock;
                const std::int64_t pe = std::min(p0 + detail::kPixelBlock, n);
                for (std::int64_t p = p0; p < pe; ++p) yr[p] = (zr[p] - mean) * inv_std + beta;
            }
            if (means) (*means)[c] = mean;
            if (inv_stds) (*inv_stds)[c] = inv_std;
        }
        cur = &y;
        which ^= 1;
    }

    ChannelMatrix<T>& zo = cache ? cache->out_pre : scratch[which];
    detail::affine_forward(params.output, *cur, zo);

    std::vector<T> out(static_cast<std::size_t>(n));
    const Activation act = params.arch.output_activation;
    const T* zr = zo.row(0);
    for (std::int64_t p = 0; p < n; ++p) out[p] = activation_apply(act, zr[p]);
    return out;
}

template <typename T>
std::vector<T> pixelnet_infer(const PixelNetParams<T>& params, const ChannelMatrix<T>& input) {
    return pixelnet_forward(const_cast<PixelNetParams<T>&>(params), input, RunMode::infer, nullptr);
}

template <typename T>
struct PixelNetGrads {
    std::vector<std::vector<T>> hidden_weight;
    std::vector<std::vector<T>> hidden_bias;
    std::vector<std::vector<T>> shift;
    std::vector<T> output_weight;
    std::vector<T> output_bias;
    ChannelMatrix<T> input;  // gradient w.r.t. the network input

    /// Same traversal order as trainable_tensors().
    std::vector<std::span<T>> tensors() {
        std::vector<std::span<T>> refs;
        for (std::size_t l = 0; l < hidden_weight.size(); ++l) {
            refs.emplace_back(hidden_weight[l]);
            refs.emplace_back(hidden_bias[l]);
            refs.emplace_back(shift[l]);
        }
        refs.emplace_back(output_weight);
        refs.emplace_back(output_bias);
        return refs;
    }
};

/// Exact reverse-mode gradients of sum(output * upstream) w.r.t. every
/// trainable tensor, including the batch-statistic terms of the
/// normalization. Running-stat updates are not differentiated.
template <typename T>
void pixelnet_backward(const PixelNetParams<T>& params, ForwardCache<T>& cache,
                       std::type_identity_t<std::span<const T>> upstream,
                       PixelNetGrads<T>& grads) {
    if (cache.mode != RunMode::train)
        throw std::invalid_argument("pixelnet_backward: cache was not produced by a train-mode forward");
    const std::int64_t n = cache.input.n;
    if (static_cast<std::int64_t>(upstream.size()) != n)
        throw std::invalid_argument("pixelnet_backward: upstream size mismatch");
    const std::size_t n_hidden = params.hidden.size();
    if (cache.layers.size() != n_hidden)
        throw std::invalid_argument("pixelnet_backward: cache does not match architecture");

    grads.hidden_weight.resize(n_hidden);
    grads.hidden_bias.resize(n_hidden);
    grads.shift.resize(n_hidden);

    // output activation; grad_b doubles as the 1-row activation gradient
    // before it joins the ping-pong rotation below
    ChannelMatrix<T>* down = &cache.grad_a;  // gradient flowing toward the input
    ChannelMatrix<T>* next = &cache.grad_b;
    {
        next->resize(1, n);
        const T* zr = cache.out_pre.row(0);
        T* dzr = next->row(0);
        const Activation act = params.arch.output_activation;
        for (std::int64_t p = 0; p < n; ++p)
            dzr[p] = upstream[p] * activation_derivative(act, zr[p]);
    }

    // output affine
    {
        const ChannelMatrix<T>& x = n_hidden ? cache.layers.back().post : cache.input;
        if (n_hidden == 0) {
            detail::affine_backward(params.output, x, *next, grads.output_weight,
                                    grads.output_bias, &grads.input);
            return;
        }
        detail::affine_backward(params.output, x, *next, grads.output_weight, grads.output_bias,
                                down);
    }

    for (std::size_t li = n_hidden; li-- > 0;) {
        const LayerCache<T>& lc = cache.layers[li];
        const BatchNormLayer<T>& bn = params.norms[li];
        const int channels = params.hidden[li].out;

        // batchnorm backward, scale fixed at 1:
        //   dx_i = inv_std * (g_i - mean(g) - xhat_i * mean(g*xhat))
        // with xhat recovered as y - beta. The ReLU mask folds into the
        // second pass: its "passed" pixels are exactly the positive entries
        // of `pre`, which was rectified in place by the forward.
        grads.shift[li].assign(channels, T(0));
        ChannelMatrix<T>& da = *down;  // overwritten with the gradient at the affine output
        for (int c = 0; c < channels; ++c) {
            T* g = da.row(c);
            const T* y = lc.post.row(c);
            const T* a = lc.pre.row(c);
            const T beta = bn.shift[c];
            const T inv_std = lc.inv_std[c];

            constexpr int kLanes = 16;
            T acc1[kLanes] = {}, acc2[kLanes] = {};
            std::int64_t p = 0;
            for (; p + kLanes <= n; p += kLanes)
                for (int l = 0; l < kLanes; ++l) {
                    acc1[l] += g[p + l];
                    acc2[l] += g[p + l] * (y[p + l] - beta);
                }
            T s1 = T(0), s2 = T(0);
            for (; p < n; ++p) {
                s1 += g[p];
                s2 += g[p] * (y[p] - beta);
            }
            for (int l = 0; l < kLanes; ++l) {
                s1 += acc1[l];
                s2 += acc2[l];
            }
            grads.shift[li][c] = s1;
            const T m1 = s1 / static_cast<T>(n);
            const T m2 = s2 / static_cast<T>(n);
            for (std::int64_t q = 0; q < n; ++q) {
                const T bnq = inv_std * (g[q] - m1 - (y[q] - beta) * m2);
                g[q] = a[q] > T(0) ? bnq : T(0);
            }
        }

        const ChannelMatrix<T>& x = li == 0 ? cache.input : cache.layers[li - 1].post;
        // The bottom layer writes its input gradient straight into `grads`;
        // above it the two workspace matrices alternate.
        ChannelMatrix<T>* dx = li == 0 ? &grads.input : next;
        detail::affine_backward(params.hidden[li], x, da, grads.hidden_weight[li],
                                grads.hidden_bias[li], dx);
        std::swap(down, next);
    }
}

}  // namespace disagg
