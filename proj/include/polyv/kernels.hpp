#pragma once

#include <cstddef>

namespace polyv::kernels {

// Dense inner loops shared by the tape ops and the geometry module. Each
// kernel exists in a serial reference form and an OpenMP form that
// parallelizes only the independent outer loop; per-element arithmetic order
// is identical, so the two variants produce bit-identical output. Tests
// assert that equality and the benchmark target compares their throughput.
//
// The process-wide switch selects which variant the dispatching entry points
// use. Default: parallel when compiled with OpenMP.

void set_parallel(bool enabled);
bool parallel_enabled();

namespace serial {
void matmul_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
void matmul_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
void matmul_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
void softmax_rows(std::size_t rows, std::size_t cols, const double* x, double* y);
void layer_norm_rows(std::size_t rows, std::size_t cols, const double* x, const double* gain,
                     const double* bias, double eps, double* y, double* normed, double* rstd);
void silu(std::size_t n, const double* x, double* y);
void lift_points(std::size_t height, std::size_t width, const double* depth, const double* intrinsics_inv,
                 const double* extrinsics, double* points);
void sinusoid_encode(std::size_t count, const double* points, std::size_t num_frequencies,
                     double base_wavelength, double ratio, std::size_t output_dim, double* out);
}  // namespace serial

namespace par {
void matmul_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
void matmul_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
void matmul_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
void softmax_rows(std::size_t rows, std::size_t cols, const double* x, double* y);
void layer_norm_rows(std::size_t rows, std::size_t cols, const double* x, const double* gain,
                     const double* bias, double eps, double* y, double* normed, double* rstd);
void silu(std::size_t n, const double* x, double* y);
void lift_points(std::size_t height, std::size_t width, const double* depth, const double* intrinsics_inv,
                 const double* extrinsics, double* points);
void sinusoid_encode(std::size_t count, const double* points, std::size_t num_frequencies,
                     double base_wavelength, double ratio, std::size_t output_dim, double* out);
}  // namespace par

// Dispatching entry points; honor set_parallel().
// matmul_nn: c[m x n] = a[m x k] * b[k x n]
// matmul_tn: c[k x n] = a^T * b with a[m x k], b[m x n]
// matmul_nt: c[m x n] = a * b^T with a[m x k], b[n x k]
void matmul_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
void matmul_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
void matmul_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
void softmax_rows(std::size_t rows, std::size_t cols, const double* x, double* y);
// layer_norm_rows also emits the normalized activations and per-row 1/sigma
// needed by the backward pass (normed and rstd may be null).
void layer_norm_rows(std::size_t rows, std::size_t cols, const double* x, const double* gain,
                     const double* bias, double eps, double* y, double* normed, double* rstd);
void silu(std::size_t n, const double* x, double* y);
// points: H*W*3 world coordinates; intrinsics_inv is K^-1 (3x3), extrinsics is B (4x4).
void lift_points(std::size_t height, std::size_t width, const double* depth, const double* intrinsics_inv,
                 const double* extrinsics, double* points);
// out: count x output_dim, per point [sin, cos] pairs over 3 axes and the
// frequency ladder, zero-padded to output_dim.
void sinusoid_encode(std::size_t count, const double* points, std::size_t num_frequencies,
                     double base_wavelength, double ratio, std::size_t output_dim, double* out);

}  // namespace polyv::kernels
