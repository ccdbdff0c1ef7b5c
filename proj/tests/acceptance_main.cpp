// Acceptance suite: one [PASS]/[FAIL] line per criterion, exit 0 only if
// every criterion passes. The fast numerical criteria run first; the
// training-based reproductions follow on a reduced protocol sized for a
// single desktop core (roughly two hours end to end).
//
// Environment knobs:
//   DISAGG_CIFAR_DIR  directory holding the CIFAR-10 binary batches; when
//                     unset, ./data/cifar-10-batches-bin is probed. Without
//                     CIFAR the suite runs entirely on the procedural corpus
//                     and the CIFAR-anchored checks fall back as documented
//                     per criterion.
//   DISAGG_FULL=1     additionally run the full-protocol extensions
//                     (120000-iteration runs; hours, CIFAR required).
//
// Training progress goes to stderr; the verdict lines go to stdout.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "disagg/grid.hpp"
#include "disagg/mapping.hpp"
#include "disagg/pixelnet.hpp"
#include "disagg/ral.hpp"
#include "disagg/regions.hpp"
#include "disagg/rng.hpp"
#include "disagg/sparse.hpp"
#include "disagg/synthetic.hpp"
#include "disagg/training.hpp"

namespace {

using namespace disagg;

// ---------------------------------------------------------------------------
// Fixed protocol constants. Seeds are arbitrary but pinned so every run of
// the suite sees the same corpus, the same partitions and the same inits.

constexpr std::uint64_t kCorpusSeed = 31;
constexpr std::uint64_t kBuildSeed = 7;
constexpr std::uint64_t kTrainSeed = 1;

constexpr std::size_t kCorpusImages = 11500;
constexpr std::size_t kTrainImages = 10000;
constexpr std::size_t kValImages = 500;
constexpr std::size_t kTestImages = 1000;

constexpr std::int64_t kMainIters = 30000;     // binary-task headline comparison
constexpr std::int64_t kReducedIters = 10000;  // count/ratio and prior orderings
constexpr std::int64_t kSweepIters = 8000;     // region-count sweep
constexpr std::int64_t kFullIters = 120000;    // DISAGG_FULL extensions

// Sparse-bin thresholds for the procedural corpus: the defaults assume
// CIFAR-scale support counts, so the reduced protocol lowers them to where
// the corpus actually has rare-but-recurring colors (~113 bins, ~5% of
// pixels positive).
constexpr std::size_t kProceduralSparseMinImages = 2500;
constexpr double kProceduralSparseMaxAvg = 3.0;

// ---------------------------------------------------------------------------
// Reporting scaffolding.

struct Outcome {
    bool pass = false;
    std::string detail;
};

int g_checks = 0;
int g_passed = 0;

void run_check(int number, const std::string& title, const std::function<Outcome()>& body) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
        out = body();
    } catch (const std::exception& e) {
        out.pass = false;
        out.detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    ++g_checks;
    if (out.pass) ++g_passed;
    std::ostringstream line;
    line << (out.pass ? "[PASS]" : "[FAIL]") << " criterion " << number << ": " << title;
    if (!out.detail.empty()) line << " -- " << out.detail;
    line << "  (" << std::fixed << std::setprecision(1) << secs << " s)";
    std::cout << line.str() << std::endl;
}

std::string fmt(double v, int prec = 4) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(prec) << v;
    return s.str();
}

std::optional<std::filesystem::path> cifar_dir() {
    if (const char* env = std::getenv("DISAGG_CIFAR_DIR")) {
        const std::filesystem::path p(env);
        if (std::filesystem::exists(p / "data_batch_1.bin")) return p;
    }
    const std::filesystem::path local("data/cifar-10-batches-bin");
    if (std::filesystem::exists(local / "data_batch_1.bin")) return local;
    return std::nullopt;
}

bool full_protocol() {
    const char* env = std::getenv("DISAGG_FULL");
    return env && *env && std::string(env) != "0";
}

/// Scales the default schedule (120000 iterations, halving every 40000)
/// down to a reduced iteration budget.
TrainConfig reduced_config(std::int64_t iters) {
    TrainConfig cfg;
    cfg.total_iterations = iters;
    cfg.lr_period = std::max<std::int64_t>(1, (iters + 2) / 3);
    cfg.eval_interval = std::max<std::int64_t>(1, iters / 10);
    cfg.log_interval = cfg.eval_interval;
    cfg.seed = kTrainSeed;
    return cfg;
}

/// Prints validation rows to stderr so long runs are observable without
/// touching the verdict stream.
MetricsSink progress_sink(std::string tag) {
    return [tag = std::move(tag)](const MetricsRow& row) {
        if (row.split != "val") return;
        std::cerr << "    [" << tag << "] iter " << row.iteration << "  val region_mae "
                  << fmt(row.region_mae) << "  pixel_mae " << fmt(row.pixel_mae) << "\n";
    };
}

// ---------------------------------------------------------------------------
// Criterion 1: the sparse-matrix aggregation route agrees with the
// brute-force raster tally on random density/partition pairs -- within 1e-6
// relative in single precision and exactly in double precision.

Outcome check_oracle_equivalence() {
    Rng rng(2024);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const int h = 32, w = 32;
        const int k = 1 + static_cast<int>(rng.below(40));
        const RegionMap regions = voronoi_partition(sample_seeds(rng, k, h, w), h, w);

        Grid<float> f(h, w);
        for (auto& v : f.flat()) v = static_cast<float>(rng.uniform(0.0, 4.0));
        const CsrMatrix<float> m = build_aggregation_matrix<float>(regions);
        const std::vector<float> fast = ral_forward(m, f);
        const std::vector<float> slow = aggregate_oracle<float>(f, regions);
        for (int i = 0; i < regions.n_regions; ++i) {
            const double denom = std::max(1.0, std::abs(static_cast<double>(slow[i])));
            worst = std::max(worst, std::abs(static_cast<double>(fast[i]) - slow[i]) / denom);
        }

        Grid<double> fd(h, w);
        for (std::size_t i = 0; i < f.size(); ++i) fd.flat()[i] = f.flat()[i];
        const std::vector<double> fastd = ral_forward(m.cast<double>(), fd);
        const std::vector<double> slowd = aggregate_oracle<double>(fd, regions);
        if (fastd != slowd)
            return {false, "double-precision routes differ on trial " + std::to_string(trial)};
    }
    return {worst <= 1e-6, "100 random partitions, max float rel err " + fmt(worst, 9) +
                               ", double exact"};
}

// ---------------------------------------------------------------------------
// Criterion 2: <Mf, u> == <f, M^T u> to 1e-6 relative, and the analytic
// end-to-end gradients of the batch loss match central finite differences
// to 1e-4 relative in double precision (4x4 input, widths 2/2/2, softplus
// and sigmoid heads, penalties on and off).

Outcome check_adjoint_and_gradients() {
    Rng rng(4711);

    double worst_adjoint = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const int h = 4 + static_cast<int>(rng.below(29));
        const int w = 4 + static_cast<int>(rng.below(29));
        const int k = 1 + static_cast<int>(rng.below(12));
        const RegionMap regions = voronoi_partition(sample_seeds(rng, k, h, w), h, w);
        const CsrMatrix<double> m = build_aggregation_matrix<double>(regions);

        std::vector<double> f(m.cols), u(m.rows), mf(m.rows), mtu(m.cols);
        for (auto& v : f) v = rng.uniform(-2.0, 2.0);
        for (auto& v : u) v = rng.uniform(-2.0, 2.0);
        ral_forward<double>(m, f, mf);
        ral_backward<double>(m, u, mtu);
        double lhs = 0, rhs = 0;
        for (std::size_t i = 0; i < u.size(); ++i) lhs += mf[i] * u[i];
        for (std::size_t j = 0; j < f.size(); ++j) rhs += f[j] * mtu[j];
        worst_adjoint =
            std::max(worst_adjoint, std::abs(lhs - rhs) / std::max(1.0, std::abs(lhs)));
    }
    if (worst_adjoint > 1e-6)
        return {false, "adjoint identity off by " + fmt(worst_adjoint, 9)};

    // Hand-built double-precision batch: one 4x4 example, two regions.
    const int h = 4, w = 4;
    const RegionMap regions = voronoi_partition(sample_seeds(rng, 2, h, w), h, w);
    const CsrMatrix<double> m = build_aggregation_matrix<double>(regions);

    BatchView<double> batch;
    batch.height = h;
    batch.width = w;
    batch.input.resize(3, h * w);
    for (int c = 0; c < 3; ++c)
        for (std::int64_t p = 0; p < h * w; ++p) batch.input.row(c)[p] = rng.uniform(-1.0, 1.0);
    batch.matrices = {&m};
    batch.labels.resize(regions.n_regions);
    for (auto& y : batch.labels) y = rng.uniform(0.0, 8.0);
    batch.mask.assign(regions.n_regions, 1);
    batch.offsets = {0, regions.n_regions};

    double worst_grad = 0;
    std::string worst_where;
    for (const Activation act : {Activation::softplus, Activation::sigmoid}) {
        for (const double l2 : {0.0, 1e-3}) {
            for (const double l1 : {0.0, 1e-3}) {
                Architecture arch;
                arch.hidden = {2, 2, 2};
                arch.output_activation = act;
                Rng init_rng(derive_seed(99, static_cast<std::uint64_t>(act)));
                PixelNetParams<double> params = init_params<double>(init_rng, arch);

                ForwardCache<double> cache;
                PixelNetGrads<double> grads;
                batch_loss_and_grads<double>(params, batch, Method::ral, l2, l1, cache, grads);
                const std::vector<std::span<double>> analytic = grads.tensors();

                const auto refs = trainable_tensors(params);
                const double step = 1e-6;
                for (std::size_t t = 0; t < refs.size(); ++t) {
                    for (std::size_t j = 0; j < refs[t].data.size(); ++j) {
                        double& x = refs[t].data[j];
                        const double saved = x;
                        ForwardCache<double> c2;
                        PixelNetGrads<double> g2;
                        x = saved + step;
                        const double up =
                            batch_loss_and_grads<double>(params, batch, Method::ral, l2, l1, c2, g2);
                        x = saved - step;
                        const double down =
                            batch_loss_and_grads<double>(params, batch, Method::ral, l2, l1, c2, g2);
                        x = saved;
                        const double fd = (up - down) / (2 * step);
                        const double rel =
                            std::abs(analytic[t][j] - fd) / std::max(1.0, std::abs(fd));
                        if (rel > worst_grad) {
                            worst_grad = rel;
                            worst_where = to_string(act) + " l2=" + fmt(l2, 3) +
                                          " l1=" + fmt(l1, 3) + " " + refs[t].name + "[" +
                                          std::to_string(j) + "]";
                        }
                    }
                }
            }
        }
    }
    if (worst_grad > 1e-4)
        return {false, "gradient rel err " + fmt(worst_grad, 7) + " at " + worst_where};
    return {true, "adjoint rel err " + fmt(worst_adjoint, 9) + ", worst gradient rel err " +
                      fmt(worst_grad, 7)};
}

// ---------------------------------------------------------------------------
// Criterion 3: dasymetric redistribution reproduces every masked-in label
// exactly (1e-5 relative), is idempotent, zeroes masked-out regions, and
// falls back to a uniform split where the estimated density sums to zero.

Outcome check_dasymetric() {
    Rng rng(555);
    const int h = 32, w = 32, k = 12;
    const RegionMap regions = voronoi_partition(sample_seeds(rng, k, h, w), h, w);

    Grid<float> density(h, w);
    for (auto& v : density.flat()) v = static_cast<float>(rng.uniform(0.0, 2.0));
    // Region 4 gets an all-zero estimate to exercise the uniform fallback.
    for (std::size_t p = 0; p < density.size(); ++p)
        if (regions.labels[p] == 5) density.flat()[p] = 0.0f;

    std::vector<float> labels(k);
    for (auto& y : labels) y = static_cast<float>(rng.uniform(0.0, 50.0));
    labels[2] = 0.0f;  // a zero label must produce a zero region
    RegionValidity mask(k, 1);
    mask[7] = 0;

    const Grid<float> out = dasymetric_map(density, regions, labels, mask);
    const std::vector<float> sums = aggregate_oracle<float>(out, regions);
    const std::vector<std::int64_t> sizes = region_sizes(regions);

    for (int i = 0; i < k; ++i) {
        if (!mask[i]) continue;
        const double rel = std::abs(static_cast<double>(sums[i]) - labels[i]) /
                           std::max(1.0, static_cast<double>(labels[i]));
        if (rel > 1e-5)
            return {false, "region " + std::to_string(i) + " sum off by " + fmt(rel, 8)};
    }
    for (std::size_t p = 0; p < out.size(); ++p)
        if (regions.labels[p] == 8 && out.flat()[p] != 0.0f)
            return {false, "masked-out region leaked a non-zero pixel"};

    // Uniform fallback: every pixel of region 4 carries label/size.
    const float flat = labels[4] / static_cast<float>(sizes[4]);
    for (std::size_t p = 0; p < out.size(); ++p)
        if (regions.labels[p] == 5 && std::abs(out.flat()[p] - flat) > 1e-6f)
            return {false, "zero-density region was not split uniformly"};

    const Grid<float> again = dasymetric_map(out, regions, labels, mask);
    double worst_idem = 0;
    for (std::size_t p = 0; p < out.size(); ++p)
        worst_idem = std::max(worst_idem,
                              std::abs(static_cast<double>(again.flat()[p]) - out.flat()[p]) /
                                  std::max(1.0, std::abs(static_cast<double>(out.flat()[p]))));
    if (worst_idem > 1e-5) return {false, "not idempotent, drift " + fmt(worst_idem, 8)};
    return {true, "labels reproduced, masked region zeroed, uniform fallback, idempotent"};
}

// ---------------------------------------------------------------------------
// Criterion 9: sparse-bin selection. The hand-tallied 3-image corpus pins
// the thresholds' semantics; with CIFAR-10 present the canonical thresholds
// (29000 images, <= 10 px/image) must select exactly 26 bins.

Outcome check_sparse_bins(const std::optional<std::filesystem::path>& cifar) {
    // Image A: all black (bin 0). Image B: one black pixel, 1023 white
    // (bin 4095). Image C: five pixels of bin 17 (raw 0,16,16), 1019 red
    // (bin 3840). Tallies: bin 0 in 2 images, 1025 px (avg 512.5); bins
    // 4095/3840 in 1 image each, avg > 1000; bin 17 in 1 image, avg 5.
    Image a;  // zero-initialized planes
    Image b;
    b.planes.fill(255);
    for (int c = 0; c < 3; ++c) b.planes[static_cast<std::size_t>(c) * Image::kPixels] = 0;
    Image c17;
    for (int p = 0; p < Image::kPixels; ++p) {
        c17.planes[p] = 255;  // red channel
        c17.planes[Image::kPixels + p] = 0;
        c17.planes[2 * Image::kPixels + p] = 0;
    }
    for (const int p : {10, 100, 200, 300, 400}) {
        c17.planes[p] = 0;
        c17.planes[Image::kPixels + p] = 16;
        c17.planes[2 * Image::kPixels + p] = 16;
    }
    Dataset tiny;
    tiny.images = {a, b, c17};
    tiny.set_splits(3, 0, 0);

    const SparseBinSet rare = select_sparse_bins(tiny, 1, 10.0);
    if (rare.bins != std::vector<int>{17})
        return {false, "(1, 10) selected " + std::to_string(rare.bins.size()) +
                           " bins instead of exactly {17}"};
    const Grid<float> fc = density_sparse(c17, rare);
    double sum = 0;
    for (const float v : fc.flat()) sum += v;
    if (sum != 5.0) return {false, "bin-17 density summed to " + fmt(sum, 1) + ", expected 5"};
    const Grid<float> fa = density_sparse(a, rare);
    for (const float v : fa.flat())
        if (v != 0.0f) return {false, "all-black image hit a rare bin"};
    if (!select_sparse_bins(tiny, 2, 10.0).bins.empty())
        return {false, "(2, 10) should select nothing (black averages 512.5 px)"};
    if (select_sparse_bins(tiny, 2, 600.0).bins != std::vector<int>{0})
        return {false, "(2, 600) should select exactly the black bin"};

    if (!cifar) return {true, "hand-tallied corpus (CIFAR-10 not present)"};
    const Dataset full = load_cifar10(*cifar);
    const SparseBinSet canonical = select_sparse_bins(full, 29000, 10.0);
    if (canonical.bins.size() != 26)
        return {false, "CIFAR thresholds selected " + std::to_string(canonical.bins.size()) +
                           " bins, expected 26"};
    return {true, "hand-tallied corpus, and CIFAR thresholds give exactly 26 bins"};
}

// ---------------------------------------------------------------------------
// Criterion 10: regions flagged invalid contribute exactly zero gradient
// over a full training step. Two pools that differ only in an invalid
// region's label must produce bit-identical gradients and parameters; the
// same perturbation on a valid region must not.

Outcome check_boundary_masking() {
    Rng corpus_rng(909);
    Dataset ds = procedural_dataset(corpus_rng, 8);
    BuildOptions opt;
    opt.task = Task::binary;
    opt.k_regions = 6;
    opt.seed = 13;
    const SupervisedSet sup = build_supervised_set(ds, opt);

    std::vector<Example> base(sup.train.begin(), sup.train.end());
    const int j = 2;  // doctored region index within example 0

    struct StepResult {
        PixelNetParams<float> params;
        PixelNetGrads<float> grads;
    };
    const auto step = [](std::span<const Example> pool) {
        const std::array<std::size_t, 4> indices = {0, 1, 2, 3};
        const BatchView<float> batch = build_batch(pool, indices, Method::ral);
        Rng init_rng(derive_seed(kTrainSeed, 4242));
        StepResult r{init_params<float>(init_rng, Architecture{}), {}};
        ForwardCache<float> cache;
        batch_loss_and_grads<float>(r.params, batch, Method::ral, 1e-4, 0.0, cache, r.grads);
        OptimizerState<float> opt_state;
        opt_state.init_like(trainable_tensors(r.params));
        amsgrad_step(opt_state, trainable_tensors(r.params), r.grads.tensors(), 1e-2);
        return r;
    };
    const auto bitwise_equal = [](StepResult& x, StepResult& y) {
        const auto px = trainable_tensors(x.params);
        const auto py = trainable_tensors(y.params);
        for (std::size_t t = 0; t < px.size(); ++t)
            if (std::memcmp(px[t].data.data(), py[t].data.data(),
                            px[t].data.size() * sizeof(float)) != 0)
                return false;
        const auto gx = x.grads.tensors();
        const auto gy = y.grads.tensors();
        for (std::size_t t = 0; t < gx.size(); ++t)
            if (std::memcmp(gx[t].data(), gy[t].data(), gx[t].size() * sizeof(float)) != 0)
                return false;
        return true;
    };

    std::vector<Example> masked = base;
    masked[0].valid[j] = 0;
    std::vector<Example> masked_perturbed = masked;
    masked_perturbed[0].labels[j] += 1000.0f;

    StepResult r1 = step(masked);
    StepResult r2 = step(masked_perturbed);
    if (!bitwise_equal(r1, r2))
        return {false, "an invalid region's label leaked into the gradients"};

    // Differential control: the identical perturbation on a *valid* region
    // must change the step, or the check above proves nothing.
    std::vector<Example> perturbed = base;
    perturbed[0].labels[j] += 1000.0f;
    StepResult r3 = step(base);
    StepResult r4 = step(perturbed);
    if (bitwise_equal(r3, r4))
        return {false, "control failed: a valid region's label did not affect the step"};
    return {true, "invalid region bit-identical under label perturbation; valid control differs"};
}

// ---------------------------------------------------------------------------
// Criterion 5: untrained models as an error anchor. Ten fresh inits are
// scored on the binary-task test split: on CIFAR-derived truth the mean
// pixel MAE must sit within 0.484 +/- 0.03; on the procedural corpus the
// same statistic is logged and property-checked against [0.3, 0.7].

Outcome check_random_init(const SupervisedSet& binary_set,
                          const std::optional<std::filesystem::path>& cifar) {
    const auto mean_untrained_mae = [](const SupervisedSet& data) {
        double total = 0;
        for (int s = 0; s < 10; ++s) {
            Rng init_rng(derive_seed(7000, static_cast<std::uint64_t>(s)));
            PixelNetParams<float> params = init_params<float>(init_rng, Architecture{});
            total += evaluate_examples(params, data.test).pixel_mae;
        }
        return total / 10.0;
    };

    const double proc_mean = mean_untrained_mae(binary_set);
    const bool proc_ok = proc_mean >= 0.3 && proc_mean <= 0.7;
    if (!cifar)
        return {proc_ok, "procedural mean " + fmt(proc_mean) +
                             " vs [0.30, 0.70] (CIFAR-10 not present)"};

    Dataset full = load_cifar10(*cifar);
    full.set_splits(1, 1, 10000);
    BuildOptions opt;
    opt.task = Task::binary;
    opt.k_regions = 10;
    opt.seed = kBuildSeed;
    const SupervisedSet cifar_set = build_supervised_set(full, opt);
    const double cifar_mean = mean_untrained_mae(cifar_set);
    const bool cifar_ok = std::abs(cifar_mean - 0.484) <= 0.03;
    return {proc_ok && cifar_ok, "CIFAR mean " + fmt(cifar_mean) +
                                     " vs 0.484 +/- 0.03, procedural mean " + fmt(proc_mean) +
                                     " vs [0.30, 0.70]"};
}

// ---------------------------------------------------------------------------
// Criterion 4: binary-task headline. Aggregate supervision must reach pixel
// MAE < 0.15 while uniform redistribution stays above 0.25 and at least
// twice as bad. DISAGG_FULL adds the 120000-iteration CIFAR run with its
// MAE pinned to [0.02, 0.08].

Outcome check_binary_headline(const SupervisedSet& data,
                              const std::optional<std::filesystem::path>& cifar, bool full) {
    TrainConfig cfg = reduced_config(kMainIters);
    const auto reports = run_comparison(data, cfg, progress_sink("binary"));
    const double ral = reports[0].pixel_mae;
    const double unif = reports[1].pixel_mae;
    const bool reduced_ok = ral < 0.15 && unif > 0.25 && ral < 0.5 * unif;
    std::string detail = "ral " + fmt(ral) + " (< 0.15), unif " + fmt(unif) +
                         " (> 0.25), ratio " + fmt(ral / unif, 3) + " (< 0.5)";
    if (!full || !cifar) return {reduced_ok, detail};

    Dataset corpus = load_cifar10(*cifar);
    BuildOptions opt;
    opt.task = Task::binary;
    opt.k_regions = 10;
    opt.seed = kBuildSeed;
    const SupervisedSet cifar_set = build_supervised_set(corpus, opt);
    TrainConfig full_cfg;  // stock schedule: 120000 iterations
    full_cfg.seed = kTrainSeed;
    const TrainResult<float> run =
        train<float>(full_cfg, cifar_set, nullptr, progress_sink("binary-full"));
    const double full_mae = evaluate_examples(run.best, cifar_set.test).pixel_mae;
    const bool full_ok = full_mae >= 0.02 && full_mae <= 0.08;
    detail += "; full CIFAR ral " + fmt(full_mae) + " vs [0.02, 0.08]";
    return {reduced_ok && full_ok, detail};
}

// ---------------------------------------------------------------------------
// Criterion 6: on the count and ratio tasks, aggregate supervision must
// beat uniform redistribution. DISAGG_FULL adds the full-protocol CIFAR
// runs checked against anchors within +/- 50% relative.

Outcome check_count_ratio(const Dataset& corpus,
                          const std::optional<std::filesystem::path>& cifar, bool full) {
    std::string detail;
    bool ok = true;
    for (const Task task : {Task::count, Task::ratio}) {
        BuildOptions opt;
        opt.task = task;
        opt.k_regions = 10;
        opt.seed = kBuildSeed;
        const SupervisedSet data = build_supervised_set(corpus, opt);
        TrainConfig cfg = reduced_config(kReducedIters);
        const auto reports = run_comparison(data, cfg, progress_sink(to_string(task)));
        const bool won = reports[0].pixel_mae < reports[1].pixel_mae;
        ok = ok && won;
        if (!detail.empty()) detail += ", ";
        detail += to_string(task) + " ral " + fmt(reports[0].pixel_mae) + " vs unif " +
                  fmt(reports[1].pixel_mae);
    }
    if (!full || !cifar) return {ok, detail};

    const std::array<std::pair<Task, std::array<double, 2>>, 2> anchors = {{
        {Task::count, {0.267, 0.785}},
        {Task::ratio, {0.038, 0.176}},
    }};
    Dataset cifar_corpus = load_cifar10(*cifar);
    for (const auto& [task, anchor] : anchors) {
        BuildOptions opt;
        opt.task = task;
        opt.k_regions = 10;
        opt.seed = kBuildSeed;
        const SupervisedSet data = build_supervised_set(cifar_corpus, opt);
        TrainConfig cfg;  // stock schedule
        cfg.seed = kTrainSeed;
        const auto reports =
            run_comparison(data, cfg, progress_sink(to_string(task) + "-full"));
        for (int i = 0; i < 2; ++i) {
            const double rel = std::abs(reports[i].pixel_mae - anchor[i]) / anchor[i];
            ok = ok && rel <= 0.5;
            detail += "; full " + reports[i].experiment + " " + fmt(reports[i].pixel_mae) +
                      " vs " + fmt(anchor[i], 3) + " +/- 50%";
        }
    }
    return {ok, detail};
}

// ---------------------------------------------------------------------------
// Criterion 7: output-prior ablation on the sparse task. At reduced scale
// the two end points of the ordering are checked: a sigmoid head with the
// L1 activity penalty must beat an unconstrained softplus head. DISAGG_FULL
// runs the full four-variant ablation and checks the monotone ordering.

Outcome check_priors(const Dataset& corpus, const std::optional<std::filesystem::path>& cifar,
                     bool full) {
    BuildOptions opt;
    opt.task = Task::sparse;
    opt.k_regions = 10;
    opt.seed = kBuildSeed;
    opt.sparse_min_images = kProceduralSparseMinImages;
    opt.sparse_max_avg_pixels = kProceduralSparseMaxAvg;
    const SupervisedSet data = build_supervised_set(corpus, opt);

    TrainConfig base = reduced_config(kReducedIters);
    TrainConfig soft = base;
    soft.output_activation = Activation::softplus;
    soft.l1_activity_weight = 0.0;
    TrainConfig sig = base;
    sig.output_activation = Activation::sigmoid;
    sig.l1_activity_weight = 1e-4;

    const TrainResult<float> run_soft =
        train<float>(soft, data, nullptr, progress_sink("sparse-softplus"));
    const double mae_soft = evaluate_examples(run_soft.best, data.test).pixel_mae;
    const TrainResult<float> run_sig =
        train<float>(sig, data, nullptr, progress_sink("sparse-sigmoid+l1"));
    const double mae_sig = evaluate_examples(run_sig.best, data.test).pixel_mae;
    bool ok = mae_sig < mae_soft;
    std::string detail =
        "sigmoid+l1 " + fmt(mae_sig) + " < softplus " + fmt(mae_soft) + " with " +
        std::to_string(data.bins.bins.size()) + " rare bins";

    if (!full || !cifar) return {ok, detail};

    Dataset cifar_corpus = load_cifar10(*cifar);
    BuildOptions copt;
    copt.task = Task::sparse;
    copt.k_regions = 10;
    copt.seed = kBuildSeed;
    const SupervisedSet cdata = build_supervised_set(cifar_corpus, copt);
    TrainConfig cfg;  // stock schedule
    cfg.seed = kTrainSeed;
    const auto reports = run_priors_ablation(cdata, cfg, 1e-4, progress_sink("priors-full"));
    // Expected ordering: softplus > softplus+l1 > sigmoid > sigmoid+l1.
    const bool monotone = reports[0].pixel_mae > reports[1].pixel_mae &&
                          reports[1].pixel_mae > reports[2].pixel_mae &&
                          reports[2].pixel_mae > reports[3].pixel_mae;
    ok = ok && monotone;
    detail += "; full ordering";
    for (const auto& r : reports) detail += " " + r.experiment + " " + fmt(r.pixel_mae);
    return {ok, detail};
}

// ---------------------------------------------------------------------------
// Criterion 8: error against the number of supervision regions. A single
// region per image must be clearly worst, and the gain from 15 to 25
// regions must be smaller than the gain from 1 to 15 (diminishing returns).

Outcome check_region_sweep(const Dataset& corpus) {
    Dataset trimmed;
    trimmed.images.assign(corpus.images.begin(), corpus.images.begin() + 5500);
    trimmed.set_splits(4000, 500, 1000);

    BuildOptions opt;
    opt.task = Task::binary;
    opt.seed = kBuildSeed;
    TrainConfig cfg = reduced_config(kSweepIters);
    const std::array<int, 5> ks = {1, 5, 10, 15, 25};
    const std::vector<SweepRow> rows = sweep_regions(trimmed, opt, cfg, ks, progress_sink("sweep"));

    const auto mae = [&](int k) {
        for (const auto& row : rows)
            if (row.k == k) return row.report.pixel_mae;
        throw std::logic_error("sweep row missing");
    };
    const bool ok = mae(1) > mae(10) && (mae(1) - mae(15)) > std::abs(mae(15) - mae(25));
    std::string detail = "pixel MAE by k:";
    for (const auto& row : rows)
        detail += " k" + std::to_string(row.k) + "=" + fmt(row.report.pixel_mae);
    return {ok, detail};
}

}  // namespace

int main() {
    std::cout << "disagg acceptance suite" << std::endl;
    const std::optional<std::filesystem::path> cifar = cifar_dir();
    const bool full = full_protocol();
    std::cout << "  CIFAR-10: " << (cifar ? cifar->string() : "not present; procedural corpus")
              << std::endl;
    std::cout << "  protocol: " << (full ? "full (DISAGG_FULL=1)" : "reduced") << std::endl;

    run_check(1, "aggregation matches the brute-force oracle", check_oracle_equivalence);
    run_check(2, "adjoint identity and end-to-end finite differences",
              check_adjoint_and_gradients);
    run_check(3, "dasymetric redistribution is exact", check_dasymetric);
    run_check(9, "sparse-bin selection", [&] { return check_sparse_bins(cifar); });
    run_check(10, "invalid regions contribute zero gradient", check_boundary_masking);

    std::cerr << "building the procedural corpus (" << kCorpusImages << " images, seed "
              << kCorpusSeed << ")...\n";
    Rng corpus_rng(kCorpusSeed);
    Dataset corpus = procedural_dataset(corpus_rng, kCorpusImages);
    corpus.set_splits(kTrainImages, kValImages, kTestImages);

    {
        BuildOptions opt;
        opt.task = Task::binary;
        opt.k_regions = 10;
        opt.seed = kBuildSeed;
        const SupervisedSet binary_set = build_supervised_set(corpus, opt);
        run_check(5, "untrained-model error anchor",
                  [&] { return check_random_init(binary_set, cifar); });
        run_check(4, "binary task: aggregate supervision beats uniform redistribution",
                  [&] { return check_binary_headline(binary_set, cifar, full); });
    }
    run_check(6, "count and ratio tasks: aggregate supervision wins",
              [&] { return check_count_ratio(corpus, cifar, full); });
    run_check(7, "sparse task: sigmoid with L1 activity beats unconstrained softplus",
              [&] { return check_priors(corpus, cifar, full); });
    run_check(8, "region sweep: k=1 worst, diminishing returns past 15",
              [&] { return check_region_sweep(corpus); });

    std::cout << "acceptance: " << g_passed << "/" << g_checks << " criteria passed"
              << std::endl;
    return g_passed == g_checks ? 0 : 1;
}
