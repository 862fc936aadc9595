#pragma once

// Data-parallel inner loops. Every kernel writes each output element from a
// single thread in a fixed summation order, so results do not depend on the
// thread count. `reference::` holds the plain serial versions the tests and
// the benchmark compare against.

#include <cstddef>
#include <span>

namespace bevis::kernels {

/// c[m×n] = a[m×k]·b[k×n]  (or += when accumulate).
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate = false);
/// c[m×n] = a[k×m]ᵀ·b[k×n]
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate = false);
/// c[m×n] = a[m×k]·b[n×k]ᵀ
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate = false);

/// HWC image → (h·w)×(9·c) patch matrix for a 3×3 same-padded convolution.
void im2col3x3(std::span<const double> image, std::size_t h, std::size_t w, std::size_t c,
               std::span<double> col);
/// Adjoint of im2col3x3; accumulates into `image`.
void col2im3x3(std::span<const double> col, std::size_t h, std::size_t w, std::size_t c,
               std::span<double> image);

/// Column sums of a rows×cols matrix, accumulated into out[cols].
void column_sums(std::span<const double> x, std::size_t rows, std::size_t cols,
                 std::span<double> out);

/// For each query q: out[q] = mean of points within `radius` of centers[q],
/// or centers[q] itself when the ball is empty. Returns nothing; counts[q]
/// receives the number of in-ball points.
void ball_means(std::span<const double> points, std::size_t n, std::size_t d,
                std::span<const double> centers, std::size_t queries, double radius,
                std::span<double> out, std::span<std::size_t> counts);

namespace reference {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate = false);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate = false);
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate = false);
void im2col3x3(std::span<const double> image, std::size_t h, std::size_t w, std::size_t c,
               std::span<double> col);
void col2im3x3(std::span<const double> col, std::size_t h, std::size_t w, std::size_t c,
               std::span<double> image);
void ball_means(std::span<const double> points, std::size_t n, std::size_t d,
                std::span<const double> centers, std::size_t queries, double radius,
                std::span<double> out, std::span<std::size_t> counts);

}  // namespace reference

}  // namespace bevis::kernels
