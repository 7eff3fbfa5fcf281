// Compares the serial reference kernels against their OpenMP variants on
// sizes past the dispatch cutoffs. Output is a plain table; correctness
// (bit-identity) is covered by the unit tests, this target is throughput.
#include <chrono>
#include <cstdio>
#include <vector>

#include "polyv/kernels.hpp"
#include "polyv/rng.hpp"

namespace {

using Clock = std::chrono::steady_clock;

template <typename F>
double time_best_of(int reps, F&& f) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    auto t0 = Clock::now();
    f();
    auto t1 = Clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

std::vector<double> randn_vec(std::size_t n, polyv::Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

void report(const char* name, double serial_ms, double par_ms) {
  std::printf("%-18s serial %9.3f ms   openmp %9.3f ms   speedup %5.2fx\n", name, serial_ms, par_ms,
              serial_ms / par_ms);
}

}  // namespace

int main() {
  polyv::Rng rng(42);
  namespace k = polyv::kernels;

  {
    const std::size_t m = 256, kk = 256, n = 256;
    auto a = randn_vec(m * kk, rng), b = randn_vec(kk * n, rng);
    std::vector<double> c(m * n);
    double s = time_best_of(5, [&] { k::serial::matmul_nn(m, kk, n, a.data(), b.data(), c.data()); });
    double p = time_best_of(5, [&] { k::par::matmul_nn(m, kk, n, a.data(), b.data(), c.data()); });
    report("matmul_nn 256^3", s, p);
  }
  {
    const std::size_t m = 256, kk = 256, n = 256;
    auto a = randn_vec(m * kk, rng), b = randn_vec(m * n, rng);
    std::vector<double> c(kk * n);
    double s = time_best_of(5, [&] { k::serial::matmul_tn(m, kk, n, a.data(), b.data(), c.data()); });
    double p = time_best_of(5, [&] { k::par::matmul_tn(m, kk, n, a.data(), b.data(), c.data()); });
    report("matmul_tn 256^3", s, p);
  }
  {
    const std::size_t rows = 8192, cols = 512;
    auto x = randn_vec(rows * cols, rng);
    std::vector<double> y(rows * cols);
    double s = time_best_of(5, [&] { k::serial::softmax_rows(rows, cols, x.data(), y.data()); });
    double p = time_best_of(5, [&] { k::par::softmax_rows(rows, cols, x.data(), y.data()); });
    report("softmax 8192x512", s, p);
  }
  {
    const std::size_t rows = 8192, cols = 512;
    auto x = randn_vec(rows * cols, rng);
    auto gain = randn_vec(cols, rng), bias = randn_vec(cols, rng);
    std::vector<double> y(rows * cols), normed(rows * cols), rstd(rows);
    double s = time_best_of(5, [&] {
      k::serial::layer_norm_rows(rows, cols, x.data(), gain.data(), bias.data(), 1e-5, y.data(),
                                 normed.data(), rstd.data());
    });
    double p = time_best_of(5, [&] {
      k::par::layer_norm_rows(rows, cols, x.data(), gain.data(), bias.data(), 1e-5, y.data(),
                              normed.data(), rstd.data());
    });
    report("layernorm 8192x512", s, p);
  }
  {
    const std::size_t n = 1 << 22;
    auto x = randn_vec(n, rng);
    std::vector<double> y(n);
    double s = time_best_of(5, [&] { k::serial::silu(n, x.data(), y.data()); });
    double p = time_best_of(5, [&] { k::par::silu(n, x.data(), y.data()); });
    report("silu 4M", s, p);
  }
  {
    const std::size_t h = 512, w = 512;
    auto depth = randn_vec(h * w, rng);
    for (double& d : depth) d = d * d;  // depths must be nonnegative
    std::vector<double> kinv = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    std::vector<double> ext = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1};
    std::vector<double> pts(h * w * 3);
    double s = time_best_of(5,
                            [&] { k::serial::lift_points(h, w, depth.data(), kinv.data(), ext.data(), pts.data()); });
    double p =
        time_best_of(5, [&] { k::par::lift_points(h, w, depth.data(), kinv.data(), ext.data(), pts.data()); });
    report("lift 512x512", s, p);
  }
  {
    const std::size_t count = 1 << 16;
    auto pts = randn_vec(count * 3, rng);
    const std::size_t nf = 8, dim = 48;
    std::vector<double> out(count * dim);
    double s = time_best_of(
        5, [&] { k::serial::sinusoid_encode(count, pts.data(), nf, 1.0, 2.0, dim, out.data()); });
    double p = time_best_of(
        5, [&] { k::par::sinusoid_encode(count, pts.data(), nf, 1.0, 2.0, dim, out.data()); });
    report("sinusoid 65536", s, p);
  }
  return 0;
}
