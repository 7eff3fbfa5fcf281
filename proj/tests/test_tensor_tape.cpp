#include <doctest.h>

#include <cmath>
#include <cstring>
#include <sstream>
#include <vector>

#include "polyv/error.hpp"
#include "polyv/kernels.hpp"
#include "polyv/rng.hpp"
#include "polyv/tape.hpp"
#include "polyv/tensor.hpp"

using namespace polyv;

TEST_CASE("tensor construction and accessors") {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.numel() == 6);
  CHECK(t.at(1, 2) == 6.0);
  CHECK(t.at(4) == 5.0);
  CHECK(Tensor::scalar(7.5).item() == 7.5);
  CHECK(Tensor::full({2, 2}, 3.0).at(1, 1) == 3.0);
  Tensor eye = Tensor::identity(3);
  CHECK(eye.at(0, 0) == 1.0);
  CHECK(eye.at(0, 1) == 0.0);

  CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), DimensionError);
  double inf = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(Tensor({1}, {inf}), Error);
  double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(Tensor({1}, {nan}), Error);
}

TEST_CASE("tensor text round-trip is bit exact") {
  Rng rng(7);
  Tensor t = Tensor::randn({5, 7}, rng, 2.7);
  std::stringstream ss;
  write_tensor_text(ss, t);
  Tensor back = read_tensor_text(ss);
  REQUIRE(back.same_shape(t));
  CHECK(std::memcmp(back.data(), t.data(), t.numel() * sizeof(double)) == 0);
}

TEST_CASE("rng substreams differ by label and agree by seed") {
  CHECK(substream(1, "alpha") != substream(1, "beta"));
  CHECK(substream(1, "alpha") == substream(1, "alpha"));
  CHECK(substream(1, "alpha") != substream(2, "alpha"));
  Rng a(substream(9, "x")), b(substream(9, "x"));
  for (int i = 0; i < 16; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("matmul is associative within fp tolerance") {
  Rng rng(3);
  Tensor a = Tensor::randn({4, 5}, rng), b = Tensor::randn({5, 6}, rng), c = Tensor::randn({6, 3}, rng);
  auto mm = [](const Tensor& x, const Tensor& y) {
    Tensor z({x.rows(), y.cols()});
    kernels::matmul_nn(x.rows(), x.cols(), y.cols(), x.data(), y.data(), z.data());
    return z;
  };
  Tensor left = mm(mm(a, b), c), right = mm(a, mm(b, c));
  for (std::size_t i = 0; i < left.numel(); ++i) CHECK(left.at(i) == doctest::Approx(right.at(i)).epsilon(1e-9));
}

TEST_CASE("serial and openmp kernels are bit identical") {
  Rng rng(11);
  namespace k = kernels;
  // Sizes chosen past any dispatch cutoff so the parallel paths actually run.
  const std::size_t m = 67, kk = 53, n = 71;
  std::vector<double> a(m * kk), b(kk * n), bt(n * kk), am(m * n);
  for (double& x : a) x = rng.normal();
  for (double& x : b) x = rng.normal();
  for (double& x : bt) x = rng.normal();
  for (double& x : am) x = rng.normal();

  std::vector<double> c1(m * n), c2(m * n);
  k::serial::matmul_nn(m, kk, n, a.data(), b.data(), c1.data());
  k::par::matmul_nn(m, kk, n, a.data(), b.data(), c2.data());
  CHECK(std::memcmp(c1.data(), c2.data(), c1.size() * sizeof(double)) == 0);

  std::vector<double> d1(kk * n), d2(kk * n);
  k::serial::matmul_tn(m, kk, n, a.data(), am.data(), d1.data());
  k::par::matmul_tn(m, kk, n, a.data(), am.data(), d2.data());
  CHECK(std::memcmp(d1.data(), d2.data(), d1.size() * sizeof(double)) == 0);

  std::vector<double> e1(m * n), e2(m * n);
  k::serial::matmul_nt(m, kk, n, a.data(), bt.data(), e1.data());
  k::par::matmul_nt(m, kk, n, a.data(), bt.data(), e2.data());
  CHECK(std::memcmp(e1.data(), e2.data(), e1.size() * sizeof(double)) == 0);

  const std::size_t rows = 130, cols = 40;
  std::vector<double> x(rows * cols), y1(rows * cols), y2(rows * cols);
  for (double& v : x) v = rng.normal();
  k::serial::softmax_rows(rows, cols, x.data(), y1.data());
  k::par::softmax_rows(rows, cols, x.data(), y2.data());
  CHECK(std::memcmp(y1.data(), y2.data(), y1.size() * sizeof(double)) == 0);

  std::vector<double> gain(cols), bias(cols);
  for (double& v : gain) v = rng.normal();
  for (double& v : bias) v = rng.normal();
  std::vector<double> n1(rows * cols), n2(rows * cols), r1(rows), r2(rows);
  k::serial::layer_norm_rows(rows, cols, x.data(), gain.data(), bias.data(), 1e-5, y1.data(), n1.data(),
                             r1.data());
  k::par::layer_norm_rows(rows, cols, x.data(), gain.data(), bias.data(), 1e-5, y2.data(), n2.data(),
                          r2.data());
  CHECK(std::memcmp(y1.data(), y2.data(), y1.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(n1.data(), n2.data(), n1.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(r1.data(), r2.data(), r1.size() * sizeof(double)) == 0);

  k::serial::silu(x.size(), x.data(), y1.data());
  k::par::silu(x.size(), x.data(), y2.data());
  CHECK(std::memcmp(y1.data(), y2.data(), y1.size() * sizeof(double)) == 0);

  const std::size_t h = 19, w = 23;
  std::vector<double> depth(h * w);
  for (double& v : depth) v = rng.uniform(0.1, 5.0);
  std::vector<double> kinv = {1.1, 0.0, -0.3, 0.0, 0.9, -0.2, 0.0, 0.0, 1.0};
  std::vector<double> ext = {0.8, -0.6, 0, 1.5, 0.6, 0.8, 0, -0.5, 0, 0, 1, 2.0, 0, 0, 0, 1};
  std::vector<double> p1(h * w * 3), p2(h * w * 3);
  k::serial::lift_points(h, w, depth.data(), kinv.data(), ext.data(), p1.data());
  k::par::lift_points(h, w, depth.data(), kinv.data(), ext.data(), p2.data());
  CHECK(std::memcmp(p1.data(), p2.data(), p1.size() * sizeof(double)) == 0);

  const std::size_t count = 257;
  std::vector<double> pts(count * 3);
  for (double& v : pts) v = rng.normal();
  std::vector<double> s1(count * 48), s2(count * 48);
  k::serial::sinusoid_encode(count, pts.data(), 8, 1.0, 2.0, 48, s1.data());
  k::par::sinusoid_encode(count, pts.data(), 8, 1.0, 2.0, 48, s2.data());
  CHECK(std::memcmp(s1.data(), s2.data(), s1.size() * sizeof(double)) == 0);

  // Dispatch honors the process-wide switch.
  bool was = k::parallel_enabled();
  k::set_parallel(false);
  CHECK_FALSE(k::parallel_enabled());
  k::set_parallel(was);
}

TEST_CASE("tape computes hand-checked values eagerly") {
  Tape tape;
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 2}, {5, 6, 7, 8});
  NodeId na = tape.constant(a), nb = tape.constant(b);
  NodeId prod = tape.matmul(na, nb);
  CHECK(tape.value(prod).at(0, 0) == 19.0);
  CHECK(tape.value(prod).at(0, 1) == 22.0);
  CHECK(tape.value(prod).at(1, 0) == 43.0);
  CHECK(tape.value(prod).at(1, 1) == 50.0);

  NodeId nsum = tape.sum(prod);
  CHECK(tape.value(nsum).item() == 19.0 + 22.0 + 43.0 + 50.0);

  NodeId sc = tape.scale(na, 2.0);
  CHECK(tape.value(sc).at(1, 1) == 8.0);

  NodeId nt = tape.matmul_nt(na, nb);  // a * b^T
  CHECK(tape.value(nt).at(0, 0) == 1 * 5 + 2 * 6);
  CHECK(tape.value(nt).at(0, 1) == 1 * 7 + 2 * 8);

  NodeId sl = tape.slice_cols(na, 1, 2);
  CHECK(tape.value(sl).cols() == 1);
  CHECK(tape.value(sl).at(1, 0) == 4.0);

  NodeId cat = tape.concat_rows(na, nb);
  CHECK(tape.value(cat).rows() == 4);
  CHECK(tape.value(cat).at(3, 1) == 8.0);

  NodeId mc = tape.mean_cols(na);
  CHECK(tape.value(mc).numel() == 2);
  CHECK(tape.value(mc).at(0) == 2.0);  // mean of column 0: (1+3)/2
  CHECK(tape.value(mc).at(1) == 3.0);

  NodeId dc = tape.dot_const(mc, {10.0, 100.0}, 0.5);
  CHECK(tape.value(dc).item() == 0.5 * (10.0 * 2.0 + 100.0 * 3.0));

  CHECK(tape.replay_matches());
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(5);
  Tape tape;
  NodeId x = tape.constant(Tensor::randn({6, 9}, rng, 3.0));
  NodeId p = tape.softmax(x, 1);
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 9; ++c) s += tape.value(p).at(r, c);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("cross entropy matches explicit softmax-log pipeline") {
  Rng rng(17);
  Tensor logits = Tensor::randn({5, 8}, rng, 2.0);
  std::vector<int> targets = {3, 0, 7, 2, 2};
  Tape tape;
  NodeId nl = tape.constant(logits);
  NodeId ce = tape.cross_entropy(nl, targets);

  double expect = 0.0;
  for (std::size_t r = 0; r < 5; ++r) {
    double mx = logits.at(r, 0);
    for (std::size_t c = 1; c < 8; ++c) mx = std::max(mx, logits.at(r, c));
    double z = 0;
    for (std::size_t c = 0; c < 8; ++c) z += std::exp(logits.at(r, c) - mx);
    expect -= (logits.at(r, static_cast<std::size_t>(targets[r])) - mx) - std::log(z);
  }
  expect /= 5.0;
  CHECK(tape.value(ce).item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("mse is the raw sum of squared differences") {
  Tape tape;
  NodeId a = tape.constant(Tensor({3}, {1, 2, 3}));
  NodeId b = tape.constant(Tensor({3}, {2, 0, 3}));
  NodeId m = tape.mse(a, b);
  CHECK(tape.value(m).item() == 1.0 + 4.0 + 0.0);
}

TEST_CASE("backward requires a scalar root and accumulates on repeat") {
  Tensor w({2}, {3.0, -1.0});
  Tape tape;
  NodeId nw = tape.param(w);
  CHECK(tape.param(w) == nw);  // rebinding returns the same node
  NodeId s = tape.sum(tape.mul(nw, nw));

  CHECK_THROWS_AS(tape.backward(nw), ParameterError);

  tape.backward(s);
  CHECK(w.grad()[0] == 6.0);  // d/dw sum(w*w) = 2w
  CHECK(w.grad()[1] == -2.0);
  tape.backward(s);
  CHECK(w.grad()[0] == 12.0);  // accumulates, does not overwrite
  w.zero_grad();
  CHECK(w.grad()[0] == 0.0);
}

TEST_CASE("backward corruption hook skews exactly the named op") {
  Tensor x({1}, {2.0});
  {
    Tape tape;
    NodeId s = tape.scale(tape.param(x), 3.0);
    x.zero_grad();
    tape.backward(s);
    CHECK(x.grad()[0] == 3.0);
  }
  set_backward_corruption("scale");
  {
    Tape tape;
    NodeId s = tape.scale(tape.param(x), 3.0);
    x.zero_grad();
    tape.backward(s);
    CHECK(x.grad()[0] == doctest::Approx(3.0 * 1.01).epsilon(1e-15));
  }
  set_backward_corruption("");
  CHECK(backward_corruption().empty());
}

TEST_CASE("gather scatter and per-row column picks") {
  Tape tape;
  NodeId x = tape.constant(Tensor({3, 2}, {1, 2, 3, 4, 5, 6}));
  NodeId g = tape.gather_rows(x, {2, 0, 2});
  CHECK(tape.value(g).at(0, 0) == 5.0);
  CHECK(tape.value(g).at(2, 1) == 6.0);

  NodeId sc = tape.scatter_rows(g, {1, 0, 2}, 4);
  CHECK(tape.value(sc).rows() == 4);
  CHECK(tape.value(sc).at(1, 0) == 5.0);
  CHECK(tape.value(sc).at(3, 0) == 0.0);  // untouched row stays zero

  NodeId pick = tape.gather_cols_per_row(x, {{1}, {0}, {1}});
  CHECK(tape.value(pick).at(0, 0) == 2.0);
  CHECK(tape.value(pick).at(1, 0) == 3.0);
  CHECK(tape.value(pick).at(2, 0) == 6.0);

  NodeId rn = tape.row_normalize(tape.constant(Tensor({2, 2}, {1, 3, 2, 2})));
  CHECK(tape.value(rn).at(0, 0) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(tape.value(rn).at(0, 1) == doctest::Approx(0.75).epsilon(1e-15));

  NodeId sr = tape.scale_rows(x, tape.constant(Tensor({3}, {2, 0, 1})));
  CHECK(tape.value(sr).at(0, 1) == 4.0);
  CHECK(tape.value(sr).at(1, 0) == 0.0);
  CHECK(tape.value(sr).at(2, 1) == 6.0);

  CHECK(tape.replay_matches());
}

TEST_CASE("layer norm normalizes rows to unit variance before affine") {
  Rng rng(23);
  Tape tape;
  NodeId x = tape.constant(Tensor::randn({4, 16}, rng, 5.0));
  NodeId gain = tape.constant(Tensor::full({16}, 1.0));
  NodeId bias = tape.constant(Tensor::zeros({16}));
  NodeId y = tape.layer_norm(x, gain, bias, 1e-5);
  for (std::size_t r = 0; r < 4; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 16; ++c) mean += tape.value(y).at(r, c);
    mean /= 16;
    for (std::size_t c = 0; c < 16; ++c) {
      double d = tape.value(y).at(r, c) - mean;
      var += d * d;
    }
    var /= 16;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(std::abs(var - 1.0) < 1e-3);  // eps shrinks variance slightly
  }
}
