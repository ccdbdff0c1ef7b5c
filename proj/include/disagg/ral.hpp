#pragma once

#include <span>
#include <type_traits>
#include <stdexcept>
#include <vector>

#include "disagg/grid.hpp"
#include "disagg/sparse.hpp"

namespace disagg {

/// Regional aggregation: F_hat = M vec(f_hat), row-major vectorization.
/// O(nnz) sparse product; the dense form would waste memory and work on the
/// zero entries.
template <typename T>
void ral_forward(const CsrMatrix<T>& m, std::type_identity_t<std::span<const T>> density,
                 std::type_identity_t<std::span<T>> aggregates) {
    m.multiply(density, aggregates);
}

template <typename T>
std::vector<T> ral_forward(const CsrMatrix<T>& m, const Grid<T>& density) {
    if (static_cast<std::int64_t>(density.size()) != m.cols)
        throw std::invalid_argument("ral_forward: density size does not match matrix columns");
    std::vector<T> aggregates(m.rows);
    m.multiply(density.flat(), aggregates);
    return aggregates;
}

/// Adjoint of the aggregation: grad over pixel j is sum_i m_ij * upstream_i.
/// Masked-out regions contribute zero by zeroing their upstream entries
/// before the call.
template <typename T>
void ral_backward(const CsrMatrix<T>& m, std::type_identity_t<std::span<const T>> upstream,
                  std::type_identity_t<std::span<T>> density_grad) {
    m.multiply_transpose(upstream, density_grad);
}

template <typename T>
Grid<T> ral_backward(const CsrMatrix<T>& m, std::type_identity_t<std::span<const T>> upstream,
                     int height, int width) {
    if (static_cast<std::int64_t>(height) * width != m.cols)
        throw std::invalid_argument("ral_backward: grid extent does not match matrix columns");
    Grid<T> grad(height, width);
    m.multiply_transpose(upstream, grad.flat());
    return grad;
}

}  // namespace disagg
