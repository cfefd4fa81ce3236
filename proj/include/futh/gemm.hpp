#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace futh::detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C (m x n) = op(A) * op(B) [+ C]. Row-major, op = optional transpose.
/// Single-threaded Eigen kernel; results are bitwise reproducible for a fixed build.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool trans_a, bool trans_b,
          bool accumulate) {
    using CMap = Eigen::Map<RowMat<T>>;
    using AMap = Eigen::Map<const RowMat<T>>;
    const auto M = static_cast<Eigen::Index>(m);
    const auto K = static_cast<Eigen::Index>(k);
    const auto N = static_cast<Eigen::Index>(n);
    CMap cm(c, M, N);
    auto run = [&](const auto& lhs, const auto& rhs) {
        if (accumulate) {
            cm.noalias() += lhs * rhs;
        } else {
            cm.noalias() = lhs * rhs;
        }
    };
    if (!trans_a && !trans_b) {
        run(AMap(a, M, K), AMap(b, K, N));
    } else if (!trans_a && trans_b) {
        run(AMap(a, M, K), AMap(b, N, K).transpose());
    } else if (trans_a && !trans_b) {
        run(AMap(a, K, M).transpose(), AMap(b, K, N));
    } else {
        run(AMap(a, K, M).transpose(), AMap(b, N, K).transpose());
    }
}

}  // namespace futh::detail
