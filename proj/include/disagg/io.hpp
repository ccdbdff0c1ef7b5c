#pragma once

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "disagg/grid.hpp"
#include "disagg/mapping.hpp"
#include "disagg/pixelnet.hpp"
#include "disagg/regions.hpp"
#include "disagg/synthetic.hpp"
#include "disagg/training.hpp"

namespace disagg {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

// ---------------------------------------------------------------------------
// low-level helpers

/// Writes via a temp file in the same directory plus rename, so readers
/// never observe a truncated artifact.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open for writing: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return std::move(buf).str();
}

namespace detail {

inline std::int64_t parse_int(std::string_view s, const std::string& what) {
    std::int64_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw std::runtime_error("invalid integer for " + what + ": '" + std::string(s) + "'");
    return v;
}

inline double parse_real(std::string_view s, const std::string& what) {
    double v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size())
        throw std::runtime_error("invalid number for " + what + ": '" + std::string(s) + "'");
    return v;
}

inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            parts.emplace_back(s.substr(start));
            return parts;
        }
        parts.emplace_back(s.substr(start, pos - start));
        start = pos + 1;
    }
}

template <typename T>
void append_raw(std::string& out, std::span<const T> values) {
    const auto* bytes = reinterpret_cast<const char*>(values.data());
    out.append(bytes, values.size() * sizeof(T));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// rasters: `RASTER v1 <H> <W> <dtype>` + row-major little-endian payload

namespace detail {

inline std::string raster_header(int h, int w, const char* dtype) {
    return "RASTER v1 " + std::to_string(h) + " " + std::to_string(w) + " " + dtype + "\n";
}

struct RasterInfo {
    int height = 0;
    int width = 0;
    std::string dtype;
    std::size_t payload_offset = 0;
};

inline RasterInfo parse_raster_header(const std::string& bytes, const std::string& path) {
    const std::size_t eol = bytes.find('\n');
    if (eol == std::string::npos) throw std::runtime_error("raster: missing header: " + path);
    const auto fields = split(std::string_view(bytes).substr(0, eol), ' ');
    if (fields.size() != 5 || fields[0] != "RASTER" || fields[1] != "v1")
        throw std::runtime_error("raster: bad header in " + path);
    RasterInfo info;
    info.height = static_cast<int>(parse_int(fields[2], "raster height"));
    info.width = static_cast<int>(parse_int(fields[3], "raster width"));
    info.dtype = fields[4];
    info.payload_offset = eol + 1;
    if (info.height < 0 || info.width < 0)
        throw std::runtime_error("raster: negative extent in " + path);
    return info;
}

}  // namespace detail

inline void write_raster(const std::filesystem::path& path, const Grid<float>& grid) {
    std::string out = detail::raster_header(grid.height, grid.width, "float32le");
    detail::append_raw<float>(out, grid.flat());
    write_file_atomic(path, out);
}

inline Grid<float> read_raster(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    const auto info = detail::parse_raster_header(bytes, path.string());
    if (info.dtype != "float32le")
        throw std::runtime_error("raster: expected float32le, got " + info.dtype + " in " +
                                 path.string());
    Grid<float> grid(info.height, info.width);
    const std::size_t need = static_cast<std::size_t>(grid.size()) * sizeof(float);
    if (bytes.size() - info.payload_offset != need)
        throw std::runtime_error("raster: payload size mismatch in " + path.string());
    std::memcpy(grid.flat().data(), bytes.data() + info.payload_offset, need);
    return grid;
}

inline void write_region_raster(const std::filesystem::path& path, const RegionMap& regions) {
    std::string out = detail::raster_header(regions.height, regions.width, "int32le");
    detail::append_raw<std::int32_t>(out, std::span<const std::int32_t>(regions.labels));
    write_file_atomic(path, out);
}

inline RegionMap read_region_raster(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    const auto info = detail::parse_raster_header(bytes, path.string());
    if (info.dtype != "int32le")
        throw std::runtime_error("raster: expected int32le, got " + info.dtype + " in " +
                                 path.string());
    RegionMap regions;
    regions.height = info.height;
    regions.width = info.width;
    regions.labels.resize(static_cast<std::size_t>(info.height) * info.width);
    const std::size_t need = regions.labels.size() * sizeof(std::int32_t);
    if (bytes.size() - info.payload_offset != need)
        throw std::runtime_error("raster: payload size mismatch in " + path.string());
    std::memcpy(regions.labels.data(), bytes.data() + info.payload_offset, need);
    std::int32_t max_label = 0;
    for (const std::int32_t l : regions.labels) {
        if (l < 0) throw std::runtime_error("raster: negative region label in " + path.string());
        max_label = std::max(max_label, l);
    }
    regions.n_regions = max_label;
    validate(regions);
    return regions;
}

// ---------------------------------------------------------------------------
// stacks: `STACK v1 <count> <H> <W> <C> <dtype>` + count fixed-size items

namespace detail {

struct StackInfo {
    std::size_t count = 0;
    int height = 0, width = 0, channels = 0;
    std::string dtype;
    std::size_t payload_offset = 0;
};

inline std::string stack_header(std::size_t count, int h, int w, int c, const char* dtype) {
    return "STACK v1 " + std::to_string(count) + " " + std::to_string(h) + " " +
           std::to_string(w) + " " + std::to_string(c) + " " + dtype + "\n";
}

inline StackInfo parse_stack_header(const std::string& bytes, const std::string& path) {
    const std::size_t eol = bytes.find('\n');
    if (eol == std::string::npos) throw std::runtime_error("stack: missing header: " + path);
    const auto fields = split(std::string_view(bytes).substr(0, eol), ' ');
    if (fields.size() != 7 || fields[0] != "STACK" || fields[1] != "v1")
        throw std::runtime_error("stack: bad header in " + path);
    StackInfo info;
    info.count = static_cast<std::size_t>(parse_int(fields[2], "stack count"));
    info.height = static_cast<int>(parse_int(fields[3], "stack height"));
    info.width = static_cast<int>(parse_int(fields[4], "stack width"));
    info.channels = static_cast<int>(parse_int(fields[5], "stack channels"));
    info.dtype = fields[6];
    info.payload_offset = eol + 1;
    return info;
}

inline void check_stack_payload(const StackInfo& info, std::size_t have, std::size_t item_bytes,
                                const std::string& path) {
    if (have != info.count * item_bytes)
        throw std::runtime_error("stack: payload size mismatch in " + path);
}

}  // namespace detail

inline void write_image_stack(const std::filesystem::path& path, std::span<const Image> images) {
    std::string out = detail::stack_header(images.size(), Image::kHeight, Image::kWidth,
                                           Image::kChannels, "u8");
    for (const Image& img : images)
        out.append(reinterpret_cast<const char*>(img.planes.data()), img.planes.size());
    write_file_atomic(path, out);
}

inline std::vector<Image> read_image_stack(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    const auto info = detail::parse_stack_header(bytes, path.string());
    if (info.dtype != "u8" || info.height != Image::kHeight || info.width != Image::kWidth ||
        info.channels != Image::kChannels)
        throw std::runtime_error("stack: not a 32x32x3 u8 image stack: " + path.string());
    constexpr std::size_t item = sizeof(Image::planes);
    detail::check_stack_payload(info, bytes.size() - info.payload_offset, item, path.string());
    std::vector<Image> images(info.count);
    for (std::size_t i = 0; i < info.count; ++i)
        std::memcpy(images[i].planes.data(), bytes.data() + info.payload_offset + i * item, item);
    return images;
}

inline void write_density_stack(const std::filesystem::path& path,
                                std::span<const Grid<float>> grids) {
    if (grids.empty()) throw std::invalid_argument("write_density_stack: empty stack");
    const int h = grids.front().height, w = grids.front().width;
    std::string out = detail::stack_header(grids.size(), h, w, 1, "f32");
    for (const auto& g : grids) {
        if (g.height != h || g.width != w)
            throw std::invalid_argument("write_density_stack: mixed shapes");
        detail::append_raw<float>(out, g.flat());
    }
    write_file_atomic(path, out);
}

inline std::vector<Grid<float>> read_density_stack(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    const auto info = detail::parse_stack_header(bytes, path.string());
    if (info.dtype != "f32" || info.channels != 1)
        throw std::runtime_error("stack: not an f32 density stack: " + path.string());
    const std::size_t item = static_cast<std::size_t>(info.height) * info.width * sizeof(float);
    detail::check_stack_payload(info, bytes.size() - info.payload_offset, item, path.string());
    std::vector<Grid<float>> grids;
    grids.reserve(info.count);
    for (std::size_t i = 0; i < info.count; ++i) {
        Grid<float> g(info.height, info.width);
        std::memcpy(g.flat().data(), bytes.data() + info.payload_offset + i * item, item);
        grids.push_back(std::move(g));
    }
    return grids;
}

inline void write_region_stack(const std::filesystem::path& path,
                               std::span<const RegionMap> maps) {
    if (maps.empty()) throw std::invalid_argument("write_region_stack: empty stack");
    const int h = maps.front().height, w = maps.front().width;
    std::string out = detail::stack_header(maps.size(), h, w, 1, "i32");
    for (const auto& m : maps) {
        if (m.height != h || m.width != w)
            throw std::invalid_argument("write_region_stack: mixed shapes");
        detail::append_raw<std::int32_t>(out, std::span<const std::int32_t>(m.labels));
    }
    write_file_atomic(path, out);
}

inline std::vector<RegionMap> read_region_stack(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    const auto info = detail::parse_stack_header(bytes, path.string());
    if (info.dtype != "i32" || info.channels != 1)
        throw std::runtime_error("stack: not an i32 region stack: " + path.string());
    const std::size_t item =
        static_cast<std::size_t>(info.height) * info.width * sizeof(std::int32_t);
    detail::check_stack_payload(info, bytes.size() - info.payload_offset, item, path.string());
    std::vector<RegionMap> maps;
    maps.reserve(info.count);
    for (std::size_t i = 0; i < info.count; ++i) {
        RegionMap m;
        m.height = info.height;
        m.width = info.width;
        m.labels.resize(static_cast<std::size_t>(info.height) * info.width);
        std::memcpy(m.labels.data(), bytes.data() + info.payload_offset + i * item, item);
        std::int32_t max_label = 0;
        for (const std::int32_t l : m.labels) {
            if (l < 0) throw std::runtime_error("stack: negative region label in " + path.string());
            max_label = std::max(max_label, l);
        }
        m.n_regions = max_label;
        validate(m);
        maps.push_back(std::move(m));
    }
    return maps;
}

// ---------------------------------------------------------------------------
// label lists: one CSV line of aggregate values per example

inline void write_labels_csv(const std::filesystem::path& path,
                             std::span<const std::vector<float>> labels) {
    std::string out;
    for (const auto& row : labels) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) out += ',';
            out += detail::format_real(row[i]);
        }
        out += '\n';
    }
    write_file_atomic(path, out);
}

inline std::vector<std::vector<float>> read_labels_csv(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    std::vector<std::vector<float>> rows;
    for (const auto& line : detail::split(bytes, '\n')) {
        if (line.empty()) continue;
        std::vector<float> row;
        for (const auto& field : detail::split(line, ','))
            row.push_back(static_cast<float>(detail::parse_real(field, "label")));
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// run configuration: flat key=value, unknown keys rejected

struct RunConfig {
    TrainConfig train;
    Task task = Task::binary;
    std::string source = "procedural";  // "procedural" or "cifar10"
    std::string cifar_dir;
    std::size_t procedural_count = 11500;
    std::size_t n_train = 10000;
    std::size_t n_val = 500;
    std::size_t n_test = 1000;
    double tau_binary = 0.2;
    double tau_count = 0.4;
    std::size_t sparse_min_images = 29000;
    double sparse_max_avg_pixels = 10.0;
    std::string checkpoint_policy = "both";  // "both", "best" or "final"

    BuildOptions build_options() const {
        BuildOptions opt;
        opt.task = task;
        opt.k_regions = train.k_regions;
        opt.seed = train.seed;
        opt.tau_binary = tau_binary;
        opt.tau_count = tau_count;
        opt.sparse_min_images = sparse_min_images;
        opt.sparse_max_avg_pixels = sparse_max_avg_pixels;
        return opt;
    }
};

inline std::string serialize_run_config(const RunConfig& c) {
    std::string hidden;
    for (std::size_t i = 0; i < c.train.hidden.size(); ++i) {
        if (i) hidden += ',';
        hidden += std::to_string(c.train.hidden[i]);
    }
    std::string out;
    auto kv = [&out](const std::string& k, const std::string& v) { out += k + "=" + v + "\n"; };
    kv("task", to_string(c.task));
    kv("source", c.source);
    kv("cifar_dir", c.cifar_dir);
    kv("procedural_count", std::to_string(c.procedural_count));
    kv("n_train", std::to_string(c.n_train));
    kv("n_val", std::to_string(c.n_val));
    kv("n_test", std::to_string(c.n_test));
    kv("method", to_string(c.train.method));
    kv("activation", to_string(c.train.output_activation));
    kv("hidden", hidden);
    kv("l2_kernel_weight", detail::format_real(c.train.l2_kernel_weight));
    kv("l1_activity_weight", detail::format_real(c.train.l1_activity_weight));
    kv("batch_size", std::to_string(c.train.batch_size));
    kv("total_iterations", std::to_string(c.train.total_iterations));
    kv("lr0", detail::format_real(c.train.lr0));
    kv("lr_decay", detail::format_real(c.train.lr_decay));
    kv("lr_period", std::to_string(c.train.lr_period));
    kv("seed", std::to_string(c.train.seed));
    kv("k_regions", std::to_string(c.train.k_regions));
    kv("eval_interval", std::to_string(c.train.eval_interval));
    kv("log_interval", std::to_string(c.train.log_interval));
    kv("tau_binary", detail::format_real(c.tau_binary));
    kv("tau_count", detail::format_real(c.tau_count));
    kv("sparse_min_images", std::to_string(c.sparse_min_images));
    kv("sparse_max_avg_pixels", detail::format_real(c.sparse_max_avg_pixels));
    kv("checkpoint_policy", c.checkpoint_policy);
    return out;
}

/// Applies `key=value` lines onto the defaults. Blank lines and lines
/// starting with '#' are skipped; an unknown key is an error, not a warning,
/// so typos cannot silently fall back to defaults.
inline RunConfig parse_run_config(const std::string& text) {
    RunConfig c;
    for (const auto& raw : detail::split(text, '\n')) {
        std::string line = raw;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line.front() == '#') continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: expected key=value, got '" + line + "'");
        const std::string key = line.substr(0, eq);
        const std::string value = line.substr(eq + 1);
        if (key == "task") {
            c.task = task_from_string(value);
        } else if (key == "source") {
            if (value != "procedural" && value != "cifar10")
                throw std::runtime_error("config: source must be procedural or cifar10");
            c.source = value;
        } else if (key == "cifar_dir") {
            c.cifar_dir = value;
        } else if (key == "procedural_count") {
            c.procedural_count = static_cast<std::size_t>(detail::parse_int(value, key));
        } else if (key == "n_train") {
            c.n_train = static_cast<std::size_t>(detail::parse_int(value, key));
        } else if (key == "n_val") {
            c.n_val = static_cast<std::size_t>(detail::parse_int(value, key));
        } else if (key == "n_test") {
            c.n_test = static_cast<std::size_t>(detail::parse_int(value, key));
        } else if (key == "method") {
            c.train.method = method_from_string(value);
        } else if (key == "activation") {
            c.train.output_activation = activation_from_string(value);
        } else if (key == "hidden") {
            c.train.hidden.clear();
            for (const auto& part : detail::split(value, ','))
                c.train.hidden.push_back(static_cast<int>(detail::parse_int(part, key)));
        } else if (key == "l2_kernel_weight") {
            c.train.l2_kernel_weight = detail::parse_real(value, key);
        } else if (key == "l1_activity_weight") {
            c.train.l1_activity_weight = detail::parse_real(value, key);
        } else if (key == "batch_size") {
            c.train.batch_size = static_cast<int>(detail::parse_int(value, key));
        } else if (key == "total_iterations") {
            c.train.total_iterations = detail::parse_int(value, key);
        } else if (key == "lr0") {
            c.train.lr0 = detail::parse_real(value, key);
        } else if (key == "lr_decay") {
            c.train.lr_decay = detail::parse_real(value, key);
        } else if (key == "lr_period") {
            c.train.lr_period = detail::parse_int(value, key);
        } else if (key == "seed") {
            c.train.seed = static_cast<std::uint64_t>(detail::parse_int(value, key));
        } else if (key == "k_regions") {
            c.train.k_regions = static_cast<int>(detail::parse_int(value, key));
        } else if (key == "eval_interval") {
            c.train.eval_interval = detail::parse_int(value, key);
        } else if (key == "log_interval") {
            c.train.log_interval = detail::parse_int(value, key);
        } else if (key == "tau_binary") {
            c.tau_binary = detail::parse_real(value, key);
        } else if (key == "tau_count") {
            c.tau_count = detail::parse_real(value, key);
        } else if (key == "sparse_min_images") {
            c.sparse_min_images = static_cast<std::size_t>(detail::parse_int(value, key));
        } else if (key == "sparse_max_avg_pixels") {
            c.sparse_max_avg_pixels = detail::parse_real(value, key);
        } else if (key == "checkpoint_policy") {
            if (value != "both" && value != "best" && value != "final")
                throw std::runtime_error("config: checkpoint_policy must be both, best or final");
            c.checkpoint_policy = value;
        } else {
            throw std::runtime_error("config: unknown key '" + key + "'");
        }
    }
    return c;
}

inline RunConfig read_run_config(const std::filesystem::path& path) {
    return parse_run_config(read_file(path));
}

inline void write_run_config(const std::filesystem::path& path, const RunConfig& c) {
    write_file_atomic(path, serialize_run_config(c));
}

// ---------------------------------------------------------------------------
// checkpoints: text manifest + float32 blob, bit-exact round trip

struct Checkpoint {
    PixelNetParams<float> params;
    std::int64_t iteration = 0;
    bool has_optimizer = false;
    OptimizerState<float> opt;
};

namespace detail {

struct NamedSpan {
    std::string name;
    std::span<const float> data;
};

inline std::vector<NamedSpan> checkpoint_tensors(const PixelNetParams<float>& p) {
    std::vector<NamedSpan> out;
    for (std::size_t l = 0; l < p.hidden.size(); ++l) {
        const std::string base = "hidden" + std::to_string(l);
        out.push_back({base + ".weight", p.hidden[l].weight});
        out.push_back({base + ".bias", p.hidden[l].bias});
        out.push_back({base + ".shift", p.norms[l].shift});
        out.push_back({base + ".running_mean", p.norms[l].running_mean});
        out.push_back({base + ".running_var", p.norms[l].running_var});
    }
    out.push_back({"output.weight", p.output.weight});
    out.push_back({"output.bias", p.output.bias});
    return out;
}

inline std::vector<std::pair<std::string, std::span<float>>> checkpoint_slots(
    PixelNetParams<float>& p) {
    std::vector<std::pair<std::string, std::span<float>>> out;
    for (std::size_t l = 0; l < p.hidden.size(); ++l) {
        const std::string base = "hidden" + std::to_string(l);
        out.emplace_back(base + ".weight", std::span<float>(p.hidden[l].weight));
        out.emplace_back(base + ".bias", std::span<float>(p.hidden[l].bias));
        out.emplace_back(base + ".shift", std::span<float>(p.norms[l].shift));
        out.emplace_back(base + ".running_mean", std::span<float>(p.norms[l].running_mean));
        out.emplace_back(base + ".running_var", std::span<float>(p.norms[l].running_var));
    }
    out.emplace_back("output.weight", std::span<float>(p.output.weight));
    out.emplace_back("output.bias", std::span<float>(p.output.bias));
    return out;
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path,
                            const PixelNetParams<float>& params, std::int64_t iteration,
                            const OptimizerState<float>* opt = nullptr) {
    std::vector<detail::NamedSpan> tensors = detail::checkpoint_tensors(params);
    if (opt && !opt->empty()) {
        for (std::size_t i = 0; i < opt->m.size(); ++i) {
            const std::string base = "opt." + std::to_string(i);
            tensors.push_back({base + ".m", opt->m[i]});
            tensors.push_back({base + ".v", opt->v[i]});
            tensors.push_back({base + ".vmax", opt->vmax[i]});
        }
    }

    std::string hidden;
    for (std::size_t i = 0; i < params.arch.hidden.size(); ++i) {
        if (i) hidden += ',';
        hidden += std::to_string(params.arch.hidden[i]);
    }
    std::string head = "CHECKPOINT v1\n";
    head += "in_channels " + std::to_string(params.arch.in_channels) + "\n";
    head += "hidden " + hidden + "\n";
    head += "activation " + to_string(params.arch.output_activation) + "\n";
    head += "iteration " + std::to_string(iteration) + "\n";
    head += "optimizer " + std::string(opt && !opt->empty() ? "1" : "0") + "\n";
    if (opt && !opt->empty()) head += "opt_t " + std::to_string(opt->t) + "\n";

    std::size_t offset = 0;
    for (const auto& t : tensors) {
        head += "tensor " + t.name + " " + std::to_string(t.data.size()) + " " +
                std::to_string(offset) + "\n";
        offset += t.data.size();
    }
    head += "blob " + std::to_string(offset) + "\n";

    std::string out = std::move(head);
    out.reserve(out.size() + offset * sizeof(float));
    for (const auto& t : tensors) detail::append_raw<float>(out, t.data);
    write_file_atomic(path, out);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const std::string bytes = read_file(path);
    std::size_t pos = 0;
    auto next_line = [&]() -> std::string {
        const std::size_t eol = bytes.find('\n', pos);
        if (eol == std::string::npos)
            throw std::runtime_error("checkpoint: truncated header in " + path.string());
        std::string line = bytes.substr(pos, eol - pos);
        pos = eol + 1;
        return line;
    };
    if (next_line() != "CHECKPOINT v1")
        throw std::runtime_error("checkpoint: bad magic in " + path.string());

    auto expect_kv = [&](const std::string& key) {
        const std::string line = next_line();
        if (line.rfind(key + " ", 0) != 0)
            throw std::runtime_error("checkpoint: expected '" + key + "' in " + path.string());
        return line.substr(key.size() + 1);
    };

    Checkpoint ck;
    Architecture arch;
    arch.in_channels = static_cast<int>(detail::parse_int(expect_kv("in_channels"), "in_channels"));
    arch.hidden.clear();
    for (const auto& part : detail::split(expect_kv("hidden"), ','))
        arch.hidden.push_back(static_cast<int>(detail::parse_int(part, "hidden")));
    arch.output_activation = activation_from_string(expect_kv("activation"));
    ck.iteration = detail::parse_int(expect_kv("iteration"), "iteration");
    ck.has_optimizer = detail::parse_int(expect_kv("optimizer"), "optimizer") != 0;
    if (ck.has_optimizer) ck.opt.t = detail::parse_int(expect_kv("opt_t"), "opt_t");

    struct Entry {
        std::string name;
        std::size_t count, offset;
    };
    std::vector<Entry> entries;
    std::size_t blob_count = 0;
    while (true) {
        const std::string line = next_line();
        const auto fields = detail::split(line, ' ');
        if (fields[0] == "blob") {
            blob_count = static_cast<std::size_t>(detail::parse_int(fields.at(1), "blob"));
            break;
        }
        if (fields[0] != "tensor" || fields.size() != 4)
            throw std::runtime_error("checkpoint: bad manifest line '" + line + "'");
        entries.push_back({fields[1],
                           static_cast<std::size_t>(detail::parse_int(fields[2], "tensor count")),
                           static_cast<std::size_t>(detail::parse_int(fields[3], "tensor offset"))});
    }
    if (bytes.size() - pos != blob_count * sizeof(float))
        throw std::runtime_error("checkpoint: blob size mismatch in " + path.string());
    const char* blob = bytes.data() + pos;

    // Allocate the parameter tensors from the declared architecture, then
    // fill every slot from the manifest; missing or extra names are errors.
    Rng dummy(0);
    ck.params = init_params<float>(dummy, arch);
    auto slots = detail::checkpoint_slots(ck.params);
    std::vector<std::pair<std::string, std::span<float>>> opt_slots;
    if (ck.has_optimizer) {
        const std::int64_t saved_t = ck.opt.t;  // init_like resets the step counter
        ck.opt.init_like(trainable_tensors(ck.params));
        ck.opt.t = saved_t;
        for (std::size_t i = 0; i < ck.opt.m.size(); ++i) {
            const std::string base = "opt." + std::to_string(i);
            opt_slots.emplace_back(base + ".m", std::span<float>(ck.opt.m[i]));
            opt_slots.emplace_back(base + ".v", std::span<float>(ck.opt.v[i]));
            opt_slots.emplace_back(base + ".vmax", std::span<float>(ck.opt.vmax[i]));
        }
    }
    slots.insert(slots.end(), opt_slots.begin(), opt_slots.end());

    if (slots.size() != entries.size())
        throw std::runtime_error("checkpoint: tensor count mismatch in " + path.string());
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const Entry& e = entries[i];
        if (e.name != slots[i].first)
            throw std::runtime_error("checkpoint: expected tensor '" + slots[i].first +
                                     "', found '" + e.name + "'");
        if (e.count != slots[i].second.size())
            throw std::runtime_error("checkpoint: size mismatch for " + e.name);
        if ((e.offset + e.count) * sizeof(float) > blob_count * sizeof(float))
            throw std::runtime_error("checkpoint: tensor outside blob: " + e.name);
        std::memcpy(slots[i].second.data(), blob + e.offset * sizeof(float),
                    e.count * sizeof(float));
    }
    return ck;
}

// ---------------------------------------------------------------------------
// metrics CSV

inline std::string metrics_csv(std::span<const MetricsRow> rows) {
    std::string out = "iteration,split,lr,loss,region_mae,pixel_mae\n";
    auto field = [](double v) { return std::isnan(v) ? std::string() : detail::format_real(v); };
    for (const auto& r : rows) {
        out += std::to_string(r.iteration) + "," + r.split + "," + field(r.lr) + "," +
               field(r.loss) + "," + field(r.region_mae) + "," + field(r.pixel_mae) + "\n";
    }
    return out;
}

inline void write_metrics_csv(const std::filesystem::path& path,
                              std::span<const MetricsRow> rows) {
    write_file_atomic(path, metrics_csv(rows));
}

// ---------------------------------------------------------------------------
// content fingerprints (FNV-1a, 64-bit)

inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ull) {
    for (const char c : bytes) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fingerprint_file(const std::filesystem::path& path) {
    return fnv1a64(read_file(path));
}

// ---------------------------------------------------------------------------
// dataset bundles: one directory holding all three splits plus provenance

namespace detail {

inline const char* kSplitNames[3] = {"train", "val", "test"};

}  // namespace detail

/// Writes images/regions/density/labels per split, the palette or bin set,
/// the config that produced the bundle, and a manifest with split sizes and
/// a content fingerprint over the split files.
inline void write_bundle(const std::filesystem::path& dir, const SupervisedSet& set,
                         const RunConfig& config) {
    std::filesystem::create_directories(dir);
    const std::vector<Example>* splits[3] = {&set.train, &set.val, &set.test};
    std::vector<std::filesystem::path> data_files;
    for (int s = 0; s < 3; ++s) {
        const auto& examples = *splits[s];
        if (examples.empty()) continue;
        std::vector<Image> images;
        std::vector<RegionMap> regions;
        std::vector<Grid<float>> densities;
        std::vector<std::vector<float>> labels;
        images.reserve(examples.size());
        for (const Example& ex : examples) {
            images.push_back(ex.image);
            regions.push_back(ex.regions);
            densities.push_back(ex.density);
            labels.push_back(ex.labels);
        }
        const std::string base = detail::kSplitNames[s];
        write_image_stack(dir / (base + "_images.stack"), images);
        write_region_stack(dir / (base + "_regions.stack"), regions);
        write_density_stack(dir / (base + "_density.stack"), densities);
        write_labels_csv(dir / (base + "_labels.csv"), labels);
        for (const char* suffix : {"_images.stack", "_regions.stack", "_density.stack"})
            data_files.push_back(dir / (base + suffix));
        data_files.push_back(dir / (base + "_labels.csv"));
    }

    if (set.task == Task::sparse) {
        std::string bins;
        for (std::size_t i = 0; i < set.bins.bins.size(); ++i)
            bins += std::to_string(set.bins.bins[i]) + "\n";
        write_file_atomic(dir / "bins.txt", bins);
    } else {
        std::string pal;
        for (const auto& c : set.palette.colors)
            pal += detail::format_real(c[0]) + "," + detail::format_real(c[1]) + "," +
                   detail::format_real(c[2]) + "\n";
        write_file_atomic(dir / "palette.csv", pal);
    }
    write_run_config(dir / "config.txt", config);

    std::uint64_t fp = 0xcbf29ce484222325ull;
    for (const auto& f : data_files) fp = fnv1a64(read_file(f), fp);
    std::string manifest = "BUNDLE v1\n";
    manifest += "task " + to_string(set.task) + "\n";
    manifest += "n_train " + std::to_string(set.train.size()) + "\n";
    manifest += "n_val " + std::to_string(set.val.size()) + "\n";
    manifest += "n_test " + std::to_string(set.test.size()) + "\n";
    manifest += "fingerprint " + std::to_string(fp) + "\n";
    write_file_atomic(dir / "manifest.txt", manifest);
}

inline SupervisedSet read_bundle(const std::filesystem::path& dir) {
    const std::string manifest = read_file(dir / "manifest.txt");
    const auto lines = detail::split(manifest, '\n');
    if (lines.empty() || lines[0] != "BUNDLE v1")
        throw std::runtime_error("bundle: bad manifest in " + dir.string());
    SupervisedSet set;
    std::size_t counts[3] = {0, 0, 0};
    for (const auto& line : lines) {
        const auto fields = detail::split(line, ' ');
        if (fields.size() != 2) continue;
        if (fields[0] == "task") set.task = task_from_string(fields[1]);
        if (fields[0] == "n_train") counts[0] = detail::parse_int(fields[1], "n_train");
        if (fields[0] == "n_val") counts[1] = detail::parse_int(fields[1], "n_val");
        if (fields[0] == "n_test") counts[2] = detail::parse_int(fields[1], "n_test");
    }

    if (set.task == Task::sparse) {
        for (const auto& line : detail::split(read_file(dir / "bins.txt"), '\n')) {
            if (line.empty()) continue;
            const int b = static_cast<int>(detail::parse_int(line, "bin"));
            set.bins.bins.push_back(b);
            set.bins.member.set(static_cast<std::size_t>(b));
        }
    } else {
        for (const auto& line : detail::split(read_file(dir / "palette.csv"), '\n')) {
            if (line.empty()) continue;
            const auto fields = detail::split(line, ',');
            if (fields.size() != 3) throw std::runtime_error("bundle: bad palette line");
            set.palette.colors.push_back({detail::parse_real(fields[0], "palette"),
                                          detail::parse_real(fields[1], "palette"),
                                          detail::parse_real(fields[2], "palette")});
        }
    }

    std::vector<Example>* splits[3] = {&set.train, &set.val, &set.test};
    for (int s = 0; s < 3; ++s) {
        if (counts[s] == 0) continue;
        const std::string base = detail::kSplitNames[s];
        auto images = read_image_stack(dir / (base + "_images.stack"));
        auto regions = read_region_stack(dir / (base + "_regions.stack"));
        auto densities = read_density_stack(dir / (base + "_density.stack"));
        auto labels = read_labels_csv(dir / (base + "_labels.csv"));
        if (images.size() != counts[s] || regions.size() != counts[s] ||
            densities.size() != counts[s] || labels.size() != counts[s])
            throw std::runtime_error("bundle: split size mismatch for " + base);
        splits[s]->reserve(counts[s]);
        for (std::size_t i = 0; i < counts[s]; ++i) {
            Example ex;
            ex.image = images[i];
            ex.regions = std::move(regions[i]);
            ex.matrix = build_aggregation_matrix<float>(ex.regions);
            ex.density = std::move(densities[i]);
            ex.labels = std::move(labels[i]);
            if (static_cast<int>(ex.labels.size()) != ex.regions.n_regions)
                throw std::runtime_error("bundle: label/region count mismatch in " + base);
            ex.valid.assign(ex.regions.n_regions, 1);
            splits[s]->push_back(std::move(ex));
        }
    }
    return set;
}

}  // namespace disagg
