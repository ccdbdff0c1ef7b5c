#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace disagg {

/// Compressed sparse row matrix. Row i owns the entry range
/// [row_offsets[i], row_offsets[i+1]) of col_indices/values.
template <typename T>
struct CsrMatrix {
    std::int64_t rows = 0;
    std::int64_t cols = 0;
    std::vector<std::int64_t> row_offsets;  // size rows + 1
    std::vector<std::int32_t> col_indices;
    std::vector<T> values;

    std::int64_t nnz() const { return static_cast<std::int64_t>(col_indices.size()); }

    /// y = M x
    void multiply(std::span<const T> x, std::span<T> y) const {
        if (static_cast<std::int64_t>(x.size()) != cols ||
            static_cast<std::int64_t>(y.size()) != rows)
            throw std::invalid_argument("CsrMatrix::multiply: shape mismatch");
        for (std::int64_t i = 0; i < rows; ++i) {
            T acc = T(0);
            for (std::int64_t e = row_offsets[i]; e < row_offsets[i + 1]; ++e)
                acc += values[e] * x[col_indices[e]];
            y[i] = acc;
        }
    }

    /// g = M^T u (transpose scatter). g is overwritten, not accumulated into.
    void multiply_transpose(std::span<const T> u, std::span<T> g) const {
        if (static_cast<std::int64_t>(u.size()) != rows ||
            static_cast<std::int64_t>(g.size()) != cols)
            throw std::invalid_argument("CsrMatrix::multiply_transpose: shape mismatch");
        for (auto& v : g) v = T(0);
        for (std::int64_t i = 0; i < rows; ++i) {
            const T ui = u[i];
            if (ui == T(0)) continue;
            for (std::int64_t e = row_offsets[i]; e < row_offsets[i + 1]; ++e)
                g[col_indices[e]] += values[e] * ui;
        }
    }

    template <typename U>
    CsrMatrix<U> cast() const {
        CsrMatrix<U> out;
        out.rows = rows;
        out.cols = cols;
        out.row_offsets = row_offsets;
        out.col_indices = col_indices;
        out.values.assign(values.begin(), values.end());
        return out;
    }
};

}  // namespace disagg
