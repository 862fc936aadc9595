#include "bevis/kernels.hpp"

#include <algorithm>
#include <cstdint>
#include <vector>

namespace bevis::kernels {

namespace {

constexpr std::size_t kRowBlock = 8;
constexpr std::size_t kPointChunk = 256;

using Index = std::int64_t;

}  // namespace

namespace {

constexpr std::size_t kDepthBlock = 256;

// acc[R][NC] += a(r, p)·b(p, j) over one depth block, where a(r, p) is
// a[r·sai + p·sap]; then stored (overwrite) or added into c.
template <std::size_t R, std::size_t NC>
inline void micro_kernel(const double* a, std::size_t sai, std::size_t sap, const double* b,
                         std::size_t ldb, double* c, std::size_t ldc, std::size_t kc,
                         bool overwrite) {
  double acc[R][NC] = {};
  for (std::size_t p = 0; p < kc; ++p) {
    const double* bp = b + p * ldb;
    for (std::size_t r = 0; r < R; ++r) {
      const double av = a[r * sai + p * sap];
#pragma omp simd
      for (std::size_t j = 0; j < NC; ++j) acc[r][j] += av * bp[j];
    }
  }
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t j = 0; j < NC; ++j)
      c[r * ldc + j] = overwrite ? acc[r][j] : c[r * ldc + j] + acc[r][j];
}

void edge_kernel(const double* a, std::size_t sai, std::size_t sap, const double* b,
                 std::size_t ldb, double* c, std::size_t ldc, std::size_t kc, bool overwrite,
                 std::size_t rows, std::size_t cols) {
  double acc[kRowBlock][16] = {};
  for (std::size_t p = 0; p < kc; ++p) {
    const double* bp = b + p * ldb;
    for (std::size_t r = 0; r < rows; ++r) {
      const double av = a[r * sai + p * sap];
      for (std::size_t j = 0; j < cols; ++j) acc[r][j] += av * bp[j];
    }
  }
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j)
      c[r * ldc + j] = overwrite ? acc[r][j] : c[r * ldc + j] + acc[r][j];
}

/// c[m×n] (+)= A·b with A(i, p) = a[i·sai + p·sap] and b row-major k×n.
void gemm_blocked(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t sai,
                  std::size_t sap, const double* b, double* c, bool accumulate) {
  if (k == 0) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    return;
  }
  constexpr std::size_t R = 4;
  const auto blocks = static_cast<Index>((m + R - 1) / R);
  for (std::size_t p0 = 0; p0 < k; p0 += kDepthBlock) {
    const std::size_t kc = std::min(kDepthBlock, k - p0);
    const bool overwrite = !accumulate && p0 == 0;
    const double* bk = b + p0 * n;
#pragma omp parallel for schedule(static)
    for (Index blk = 0; blk < blocks; ++blk) {
      const std::size_t i0 = static_cast<std::size_t>(blk) * R;
      const std::size_t rows = std::min(R, m - i0);
      const double* ab = a + i0 * sai + p0 * sap;
      double* cb = c + i0 * n;
      std::size_t j0 = 0;
      if (rows == R) {
        for (; j0 + 16 <= n; j0 += 16) micro_kernel<R, 16>(ab, sai, sap, bk + j0, n, cb + j0, n, kc, overwrite);
        if (j0 + 8 <= n) {
          micro_kernel<R, 8>(ab, sai, sap, bk + j0, n, cb + j0, n, kc, overwrite);
          j0 += 8;
        }
      }
      for (; j0 < n; j0 += 16) {
        edge_kernel(ab, sai, sap, bk + j0, n, cb + j0, n, kc, overwrite, rows, std::min<std::size_t>(16, n - j0));
      }
    }
  }
}

}  // namespace

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate) {
  gemm_blocked(m, n, k, a.data(), k, 1, b.data(), c.data(), accumulate);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate) {
  gemm_blocked(m, n, k, a.data(), 1, m, b.data(), c.data(), accumulate);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate) {
  std::vector<double> bt(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(m, n, k, a, bt, c, accumulate);
}

void im2col3x3(std::span<const double> image, std::size_t h, std::size_t w, std::size_t c,
               std::span<double> col) {
  const std::size_t row_len = 9 * c;
#pragma omp parallel for schedule(static)
  for (Index yi = 0; yi < static_cast<Index>(h); ++yi) {
    const auto y = static_cast<std::size_t>(yi);
    for (std::size_t x = 0; x < w; ++x) {
      double* dst = col.data() + (y * w + x) * row_len;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        const auto sy = static_cast<Index>(y + ky) - 1;
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const auto sx = static_cast<Index>(x + kx) - 1;
          double* out = dst + (ky * 3 + kx) * c;
          if (sy < 0 || sx < 0 || sy >= static_cast<Index>(h) || sx >= static_cast<Index>(w)) {
            std::fill(out, out + c, 0.0);
          } else {
            const double* src = image.data() + (static_cast<std::size_t>(sy) * w +
                                                static_cast<std::size_t>(sx)) * c;
            std::copy(src, src + c, out);
          }
        }
      }
    }
  }
}

void col2im3x3(std::span<const double> col, std::size_t h, std::size_t w, std::size_t c,
               std::span<double> image) {
  const std::size_t row_len = 9 * c;
  // Gather form: each destination pixel pulls from the patches that read it.
#pragma omp parallel for schedule(static)
  for (Index yi = 0; yi < static_cast<Index>(h); ++yi) {
    const auto y = static_cast<std::size_t>(yi);
    for (std::size_t x = 0; x < w; ++x) {
      double* dst = image.data() + (y * w + x) * c;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        const auto oy = static_cast<Index>(y) - static_cast<Index>(ky) + 1;
        if (oy < 0 || oy >= static_cast<Index>(h)) continue;
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const auto ox = static_cast<Index>(x) - static_cast<Index>(kx) + 1;
          if (ox < 0 || ox >= static_cast<Index>(w)) continue;
          const double* src = col.data() +
                               (static_cast<std::size_t>(oy) * w + static_cast<std::size_t>(ox)) *
                                   row_len +
                               (ky * 3 + kx) * c;
#pragma omp simd
          for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += src[ch];
        }
      }
    }
  }
}

void column_sums(std::span<const double> x, std::size_t rows, std::size_t cols,
                 std::span<double> out) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data() + r * cols;
#pragma omp simd
    for (std::size_t j = 0; j < cols; ++j) out[j] += row[j];
  }
}

void ball_means(std::span<const double> points, std::size_t n, std::size_t d,
                std::span<const double> centers, std::size_t queries, double radius,
                std::span<double> out, std::span<std::size_t> counts) {
  // Structure-of-arrays copy so the distance loop vectorizes over points.
  std::vector<double> soa(n * d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < d; ++t) soa[t * n + i] = points[i * d + t];
  const double r2 = radius * radius;

#pragma omp parallel
  {
    std::vector<double> dist2(kPointChunk);
    std::vector<double> sum(d);
#pragma omp for schedule(dynamic, 16)
    for (Index qi = 0; qi < static_cast<Index>(queries); ++qi) {
      const auto q = static_cast<std::size_t>(qi);
      const double* center = centers.data() + q * d;
      std::fill(sum.begin(), sum.end(), 0.0);
      std::size_t count = 0;
      for (std::size_t start = 0; start < n; start += kPointChunk) {
        const std::size_t len = std::min(kPointChunk, n - start);
        std::fill(dist2.begin(), dist2.begin() + static_cast<std::ptrdiff_t>(len), 0.0);
        for (std::size_t t = 0; t < d; ++t) {
          const double* col = soa.data() + t * n + start;
          const double ct = center[t];
#pragma omp simd
          for (std::size_t i = 0; i < len; ++i) {
            const double diff = col[i] - ct;
            dist2[i] += diff * diff;
          }
        }
        for (std::size_t i = 0; i < len; ++i) {
          if (dist2[i] <= r2) {
            const double* p = points.data() + (start + i) * d;
            for (std::size_t t = 0; t < d; ++t) sum[t] += p[t];
            ++count;
          }
        }
      }
      counts[q] = count;
      double* dst = out.data() + q * d;
      for (std::size_t t = 0; t < d; ++t)
        dst[t] = count ? sum[t] / static_cast<double>(count) : center[t];
    }
  }
}

namespace reference {

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] = s;
    }
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[p * m + i] * b[p * n + j];
      c[i * n + j] = s;
    }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, std::span<const double> a,
             std::span<const double> b, std::span<double> c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = accumulate ? c[i * n + j] : 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      c[i * n + j] = s;
    }
}

void im2col3x3(std::span<const double> image, std::size_t h, std::size_t w, std::size_t c,
               std::span<double> col) {
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const long sy = static_cast<long>(y + ky) - 1;
            const long sx = static_cast<long>(x + kx) - 1;
            const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<long>(h) &&
                                sx < static_cast<long>(w);
            col[(y * w + x) * 9 * c + (ky * 3 + kx) * c + ch] =
                inside ? image[(static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c + ch]
                       : 0.0;
          }
}

void col2im3x3(std::span<const double> col, std::size_t h, std::size_t w, std::size_t c,
               std::span<double> image) {
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const long sy = static_cast<long>(y + ky) - 1;
            const long sx = static_cast<long>(x + kx) - 1;
            if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w))
              continue;
            image[(static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c + ch] +=
                col[(y * w + x) * 9 * c + (ky * 3 + kx) * c + ch];
          }
}

void ball_means(std::span<const double> points, std::size_t n, std::size_t d,
                std::span<const double> centers, std::size_t queries, double radius,
                std::span<double> out, std::span<std::size_t> counts) {
  for (std::size_t q = 0; q < queries; ++q) {
    std::vector<double> sum(d, 0.0);
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double dist2 = 0.0;
      for (std::size_t t = 0; t < d; ++t) {
        const double diff = points[i * d + t] - centers[q * d + t];
        dist2 += diff * diff;
      }
      if (dist2 <= radius * radius) {
        for (std::size_t t = 0; t < d; ++t) sum[t] += points[i * d + t];
        ++count;
      }
    }
    counts[q] = count;
    for (std::size_t t = 0; t < d; ++t)
      out[q * d + t] = count ? sum[t] / static_cast<double>(count) : centers[q * d + t];
  }
}

}  // namespace reference

}  // namespace bevis::kernels
