#include "polyv/kernels.hpp"

#include <atomic>
#include <cmath>

namespace polyv::kernels {

namespace {
std::atomic<bool> g_parallel{
#ifdef _OPENMP
    true
#else
    false
#endif
};

constexpr double kTwoPi = 6.28318530717958647692;

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

inline void matmul_nn_row(std::size_t i, std::size_t k, std::size_t n, const double* a, const double* b,
                          double* c) {
  const double* ai = a + i * k;
  double* ci = c + i * n;
  for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    double av = ai[p];
    const double* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
  }
}

// c[r, :] for c = a^T * b; a is m x k, b is m x n, r indexes k.
inline void matmul_tn_row(std::size_t r, std::size_t m, std::size_t k, std::size_t n, const double* a,
                          const double* b, double* c) {
  double* cr = c + r * n;
  for (std::size_t j = 0; j < n; ++j) cr[j] = 0.0;
  for (std::size_t p = 0; p < m; ++p) {
    double av = a[p * k + r];
    const double* bp = b + p * n;
    for (std::size_t j = 0; j < n; ++j) cr[j] += av * bp[j];
  }
}

// c[i, :] for c = a * b^T; a is m x k, b is n x k.
inline void matmul_nt_row(std::size_t i, std::size_t k, std::size_t n, const double* a, const double* b,
                          double* c) {
  const double* ai = a + i * k;
  double* ci = c + i * n;
  for (std::size_t j = 0; j < n; ++j) {
    const double* bj = b + j * k;
    double acc = 0.0;
    for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
    ci[j] = acc;
  }
}

inline void softmax_row(std::size_t r, std::size_t cols, const double* x, double* y) {
  const double* xr = x + r * cols;
  double* yr = y + r * cols;
  double mx = xr[0];
  for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    yr[j] = std::exp(xr[j] - mx);
    sum += yr[j];
  }
  double inv = 1.0 / sum;
  for (std::size_t j = 0; j < cols; ++j) yr[j] *= inv;
}

inline void layer_norm_row(std::size_t r, std::size_t cols, const double* x, const double* gain,
                           const double* bias, double eps, double* y, double* normed, double* rstd) {
  const double* xr = x + r * cols;
  double* yr = y + r * cols;
  double mean = 0.0;
  for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
  mean /= static_cast<double>(cols);
  double var = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    double d = xr[j] - mean;
    var += d * d;
  }
  var /= static_cast<double>(cols);
  double inv_sigma = 1.0 / std::sqrt(var + eps);
  if (rstd) rstd[r] = inv_sigma;
  for (std::size_t j = 0; j < cols; ++j) {
    double xhat = (xr[j] - mean) * inv_sigma;
    if (normed) normed[r * cols + j] = xhat;
    yr[j] = xhat * gain[j] + bias[j];
  }
}

inline void lift_point(std::size_t i, std::size_t j, std::size_t width, const double* depth,
                       const double* kinv, const double* ext, double* points) {
  double d = depth[i * width + j];
  // Camera-space point: d * [j i 1] * (K^-1)^T, i.e. row vector times K^-T,
  // which is componentwise p_c = K^-1_row dot products against [j i 1].
  double pj = static_cast<double>(j);
  double pi = static_cast<double>(i);
  double cam[3];
  for (std::size_t c = 0; c < 3; ++c) {
    // ([j i 1] * (K^-1)^T)_c = sum_t [j i 1]_t * K^-1[c, t]
    cam[c] = d * (pj * kinv[c * 3 + 0] + pi * kinv[c * 3 + 1] + kinv[c * 3 + 2]);
  }
  // [x y z 1] = [cam, 1] * B^T; component c is row c of B dotted with [cam, 1].
  double* out = points + (i * width + j) * 3;
  for (std::size_t c = 0; c < 3; ++c) {
    out[c] = cam[0] * ext[c * 4 + 0] + cam[1] * ext[c * 4 + 1] + cam[2] * ext[c * 4 + 2] + ext[c * 4 + 3];
  }
}

inline void sinusoid_point(std::size_t p, const double* points, std::size_t num_frequencies,
                           double base_wavelength, double ratio, std::size_t output_dim, double* out) {
  const double* xyz = points + p * 3;
  double* row = out + p * output_dim;
  std::size_t idx = 0;
  for (std::size_t axis = 0; axis < 3; ++axis) {
    double wavelength = base_wavelength;
    for (std::size_t f = 0; f < num_frequencies; ++f) {
      double omega = kTwoPi / wavelength;
      row[idx++] = std::sin(omega * xyz[axis]);
      row[idx++] = std::cos(omega * xyz[axis]);
      wavelength *= ratio;
    }
  }
  for (; idx < output_dim; ++idx) row[idx] = 0.0;
}

}  // namespace

void set_parallel(bool enabled) { g_parallel.store(enabled); }
bool parallel_enabled() { return g_parallel.load(); }

namespace serial {

void matmul_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) matmul_nn_row(i, k, n, a, b, c);
}

void matmul_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t r = 0; r < k; ++r) matmul_tn_row(r, m, k, n, a, b, c);
}

void matmul_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) matmul_nt_row(i, k, n, a, b, c);
}

void softmax_rows(std::size_t rows, std::size_t cols, const double* x, double* y) {
  for (std::size_t r = 0; r < rows; ++r) softmax_row(r, cols, x, y);
}

void layer_norm_rows(std::size_t rows, std::size_t cols, const double* x, const double* gain,
                     const double* bias, double eps, double* y, double* normed, double* rstd) {
  for (std::size_t r = 0; r < rows; ++r) layer_norm_row(r, cols, x, gain, bias, eps, y, normed, rstd);
}

void silu(std::size_t n, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] * sigmoid(x[i]);
}

void lift_points(std::size_t height, std::size_t width, const double* depth, const double* intrinsics_inv,
                 const double* extrinsics, double* points) {
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) lift_point(i, j, width, depth, intrinsics_inv, extrinsics, points);
  }
}

void sinusoid_encode(std::size_t count, const double* points, std::size_t num_frequencies,
                     double base_wavelength, double ratio, std::size_t output_dim, double* out) {
  for (std::size_t p = 0; p < count; ++p) {
    sinusoid_point(p, points, num_frequencies, base_wavelength, ratio, output_dim, out);
  }
}

}  // namespace serial

namespace par {

void matmul_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(m); ++i) {
    matmul_nn_row(static_cast<std::size_t>(i), k, n, a, b, c);
  }
}

void matmul_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
#pragma omp parallel for schedule(static)
  for (long long r = 0; r < static_cast<long long>(k); ++r) {
    matmul_tn_row(static_cast<std::size_t>(r), m, k, n, a, b, c);
  }
}

void matmul_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(m); ++i) {
    matmul_nt_row(static_cast<std::size_t>(i), k, n, a, b, c);
  }
}

void softmax_rows(std::size_t rows, std::size_t cols, const double* x, double* y) {
#pragma omp parallel for schedule(static)
  for (long long r = 0; r < static_cast<long long>(rows); ++r) {
    softmax_row(static_cast<std::size_t>(r), cols, x, y);
  }
}

void layer_norm_rows(std::size_t rows, std::size_t cols, const double* x, const double* gain,
                     const double* bias, double eps, double* y, double* normed, double* rstd) {
#pragma omp parallel for schedule(static)
  for (long long r = 0; r < static_cast<long long>(rows); ++r) {
    layer_norm_row(static_cast<std::size_t>(r), cols, x, gain, bias, eps, y, normed, rstd);
  }
}

void silu(std::size_t n, const double* x, double* y) {
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(n); ++i) {
    y[i] = x[i] * sigmoid(x[i]);
  }
}

void lift_points(std::size_t height, std::size_t width, const double* depth, const double* intrinsics_inv,
                 const double* extrinsics, double* points) {
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(height); ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      lift_point(static_cast<std::size_t>(i), j, width, depth, intrinsics_inv, extrinsics, points);
    }
  }
}

void sinusoid_encode(std::size_t count, const double* points, std::size_t num_frequencies,
                     double base_wavelength, double ratio, std::size_t output_dim, double* out) {
#pragma omp parallel for schedule(static)
  for (long long p = 0; p < static_cast<long long>(count); ++p) {
    sinusoid_point(static_cast<std::size_t>(p), points, num_frequencies, base_wavelength, ratio, output_dim, out);
  }
}

}  // namespace par

// Dispatch layer. Small problems stay serial; thread startup costs more than
// the loop below these cutoffs.
namespace {
constexpr std::size_t kMatmulParCutoff = 32 * 1024;  // m*k*n
constexpr std::size_t kRowsParCutoff = 64;
constexpr std::size_t kElemParCutoff = 16 * 1024;
}  // namespace

void matmul_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  if (parallel_enabled() && m * k * n >= kMatmulParCutoff && m > 1) {
    par::matmul_nn(m, k, n, a, b, c);
  } else {
    serial::matmul_nn(m, k, n, a, b, c);
  }
}

void matmul_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  if (parallel_enabled() && m * k * n >= kMatmulParCutoff && k > 1) {
    par::matmul_tn(m, k, n, a, b, c);
  } else {
    serial::matmul_tn(m, k, n, a, b, c);
  }
}

void matmul_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c) {
  if (parallel_enabled() && m * k * n >= kMatmulParCutoff && m > 1) {
    par::matmul_nt(m, k, n, a, b, c);
  } else {
    serial::matmul_nt(m, k, n, a, b, c);
  }
}

void softmax_rows(std::size_t rows, std::size_t cols, const double* x, double* y) {
  if (parallel_enabled() && rows >= kRowsParCutoff) {
    par::softmax_rows(rows, cols, x, y);
  } else {
    serial::softmax_rows(rows, cols, x, y);
  }
}

void layer_norm_rows(std::size_t rows, std::size_t cols, const double* x, const double* gain,
                     const double* bias, double eps, double* y, double* normed, double* rstd) {
  if (parallel_enabled() && rows >= kRowsParCutoff) {
    par::layer_norm_rows(rows, cols, x, gain, bias, eps, y, normed, rstd);
  } else {
    serial::layer_norm_rows(rows, cols, x, gain, bias, eps, y, normed, rstd);
  }
}

void silu(std::size_t n, const double* x, double* y) {
  if (parallel_enabled() && n >= kElemParCutoff) {
    par::silu(n, x, y);
  } else {
    serial::silu(n, x, y);
  }
}

void lift_points(std::size_t height, std::size_t width, const double* depth, const double* intrinsics_inv,
                 const double* extrinsics, double* points) {
  if (parallel_enabled() && height * width >= kElemParCutoff / 4) {
    par::lift_points(height, width, depth, intrinsics_inv, extrinsics, points);
  } else {
    serial::lift_points(height, width, depth, intrinsics_inv, extrinsics, points);
  }
}

void sinusoid_encode(std::size_t count, const double* points, std::size_t num_frequencies,
                     double base_wavelength, double ratio, std::size_t output_dim, double* out) {
  if (parallel_enabled() && count >= kRowsParCutoff * 4) {
    par::sinusoid_encode(count, points, num_frequencies, base_wavelength, ratio, output_dim, out);
  } else {
    serial::sinusoid_encode(count, points, num_frequencies, base_wavelength, ratio, output_dim, out);
  }
}

}  // namespace polyv::kernels
