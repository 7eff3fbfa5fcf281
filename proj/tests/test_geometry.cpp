#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "polyv/error.hpp"
#include "polyv/geometry.hpp"
#include "polyv/rng.hpp"
#include "polyv/tensor.hpp"

using namespace polyv;

namespace {

// Independent 3x3 inverse via Gauss-Jordan with partial pivoting; deliberately
// a different algorithm (and op order) than the adjugate used by the library.
std::vector<double> ge_invert_3x3(const std::vector<double>& m) {
  double a[3][6] = {};
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) a[r][c] = m[static_cast<std::size_t>(r * 3 + c)];
    a[r][3 + r] = 1.0;
  }
  for (int col = 0; col < 3; ++col) {
    int piv = col;
    for (int r = col + 1; r < 3; ++r) {
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    }
    REQUIRE(std::abs(a[piv][col]) > 1e-12);
    if (piv != col) {
      for (int c = 0; c < 6; ++c) std::swap(a[piv][c], a[col][c]);
    }
    double d = a[col][col];
    for (int c = 0; c < 6; ++c) a[col][c] /= d;
    for (int r = 0; r < 3; ++r) {
      if (r == col) continue;
      double f = a[r][col];
      for (int c = 0; c < 6; ++c) a[r][c] -= f * a[col][c];
    }
  }
  std::vector<double> inv(9);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) inv[static_cast<std::size_t>(r * 3 + c)] = a[r][3 + c];
  }
  return inv;
}

// Scalar reference lift: world = B * [K^-1 * (D * [j, i, 1]^T); 1], computed
// in plain column-vector form, one pixel at a time.
void oracle_lift(const CameraFrame& f, std::size_t i, std::size_t j, double out[3]) {
  std::vector<double> k(f.intrinsics.data(), f.intrinsics.data() + 9);
  std::vector<double> kinv = ge_invert_3x3(k);
  double d = f.depth.at(i, j);
  double pix[3] = {static_cast<double>(j), static_cast<double>(i), 1.0};
  double cam[3];
  for (int r = 0; r < 3; ++r) {
    cam[r] = 0;
    for (int c = 0; c < 3; ++c) cam[r] += kinv[static_cast<std::size_t>(r * 3 + c)] * pix[c];
    cam[r] *= d;
  }
  double hom[4] = {cam[0], cam[1], cam[2], 1.0};
  for (int r = 0; r < 3; ++r) {
    out[r] = 0;
    for (int c = 0; c < 4; ++c) out[r] += f.extrinsics.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) * hom[c];
  }
}

CameraFrame random_rig(Rng& rng, std::size_t h, std::size_t w) {
  CameraFrame f;
  f.depth = Tensor({h, w});
  for (std::size_t i = 0; i < h * w; ++i) f.depth.at(i) = rng.uniform(0.1, 3.0);
  double fx = rng.uniform(0.8, 1.6), fy = rng.uniform(0.8, 1.6);
  double cx = rng.uniform(-0.5, 0.5), cy = rng.uniform(-0.5, 0.5);
  double skew = rng.uniform(-0.1, 0.1);
  f.intrinsics = Tensor({3, 3}, {fx, skew, cx, 0, fy, cy, 0, 0, 1});
  double ang = rng.uniform(0.0, 6.28), ang2 = rng.uniform(0.0, 6.28);
  double ca = std::cos(ang), sa = std::sin(ang), cb = std::cos(ang2), sb = std::sin(ang2);
  // Rz(ang) * Rx(ang2) rotation plus a small translation.
  f.extrinsics = Tensor({4, 4}, {ca, -sa * cb, sa * sb,  rng.uniform(-1.0, 1.0),
                                 sa, ca * cb,  -ca * sb, rng.uniform(-1.0, 1.0),
                                 0,  sb,       cb,       rng.uniform(-1.0, 1.0),
                                 0,  0,        0,        1});
  return f;
}

}  // namespace

TEST_CASE("adjugate inverse matches gauss-jordan on random matrices") {
  CHECK(invert_3x3(Tensor::identity(3)).at(1, 1) == 1.0);
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor m({3, 3});
    for (std::size_t i = 0; i < 9; ++i) m.at(i) = rng.uniform(-2.0, 2.0);
    m.at(0, 0) += 3.0;  // keep away from singularity
    m.at(1, 1) += 3.0;
    m.at(2, 2) += 3.0;
    Tensor inv = invert_3x3(m);
    std::vector<double> ref = ge_invert_3x3(std::vector<double>(m.data(), m.data() + 9));
    for (std::size_t i = 0; i < 9; ++i) CHECK(std::abs(inv.at(i) - ref[i]) < 1e-12);
    // m * inv == I
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t c = 0; c < 3; ++c) {
        double s = 0;
        for (std::size_t k = 0; k < 3; ++k) s += m.at(r, k) * inv.at(k, c);
        CHECK(std::abs(s - (r == c ? 1.0 : 0.0)) < 1e-12);
      }
    }
  }
  Tensor sing({3, 3}, {1, 2, 3, 2, 4, 6, 0, 0, 1});  // rank 2
  CHECK_THROWS_AS(invert_3x3(sing), GeometryError);
}

TEST_CASE("identity rig lifts pixel (i, j) to exactly (j*D, i*D, D)") {
  CameraFrame f;
  f.depth = Tensor({3, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  f.intrinsics = Tensor::identity(3);
  f.extrinsics = Tensor::identity(4);
  f.validate();
  PointMap pm = lift_to_world(f);
  REQUIRE(pm.height() == 3);
  REQUIRE(pm.width() == 4);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      double d = f.depth.at(i, j);
      CHECK(pm.at(i, j, 0) == static_cast<double>(j) * d);  // bit exact
      CHECK(pm.at(i, j, 1) == static_cast<double>(i) * d);
      CHECK(pm.at(i, j, 2) == d);
    }
  }
}

TEST_CASE("random rigs agree with the scalar per-pixel oracle") {
  Rng rng(77);
  for (int trial = 0; trial < 10; ++trial) {
    CameraFrame f = random_rig(rng, 8, 8);
    f.validate();
    PointMap pm = lift_to_world(f);
    for (std::size_t i = 0; i < 8; ++i) {
      for (std::size_t j = 0; j < 8; ++j) {
        double ref[3];
        oracle_lift(f, i, j, ref);
        for (std::size_t c = 0; c < 3; ++c) CHECK(std::abs(pm.at(i, j, c) - ref[c]) < 1e-12);
      }
    }
  }
}

TEST_CASE("camera validation rejects bad rigs") {
  CameraFrame f;
  f.depth = Tensor({2, 2}, {1, 1, 1, 1});
  f.intrinsics = Tensor::identity(3);
  f.extrinsics = Tensor::identity(4);
  f.validate();

  CameraFrame neg = f;
  neg.depth.at(0, 0) = -0.5;
  CHECK_THROWS_AS(neg.validate(), GeometryError);

  CameraFrame badrow = f;
  badrow.extrinsics.at(3, 1) = 0.5;
  CHECK_THROWS_AS(badrow.validate(), GeometryError);

  CameraFrame singk = f;
  singk.intrinsics.at(0, 0) = 0.0;
  CHECK_THROWS_AS(singk.validate(), GeometryError);
}

TEST_CASE("camera frame json parsing") {
  std::string good = R"({"depth": {"dims": [2, 2], "values": [1, 2, 3, 4]},
                         "K": [1,0,0, 0,1,0, 0,0,1],
                         "B": [1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]})";
  CameraFrame f = camera_frame_from_json_text(good);
  CHECK(f.depth.at(1, 1) == 4.0);

  CHECK_THROWS_AS(camera_frame_from_json_text(R"({"K": [1]})"), DataError);

  // Malformed input reports where parsing stopped.
  try {
    camera_frame_from_json_text("{\"depth\": [1, 2,,]}");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("column") != std::string::npos);
  }

  std::string short_depth = R"({"depth": {"dims": [2, 2], "values": [1, 2, 3]},
                                "K": [1,0,0, 0,1,0, 0,0,1],
                                "B": [1,0,0,0, 0,1,0,0, 0,0,1,0, 0,0,0,1]})";
  CHECK_THROWS_AS(camera_frame_from_json_text(short_depth), DataError);
}

TEST_CASE("sinusoidal encoding follows the frequency ladder layout") {
  GeoEncodingConfig cfg;
  cfg.num_frequencies = 2;
  cfg.base_wavelength = 0.5;
  cfg.output_dim = 16;  // 12 used, 4 zero padding
  cfg.validate();

  PointMap pm;
  pm.coords = Tensor({1, 1, 3}, {0.3, -1.2, 2.0});
  Tensor enc = sinusoidal_encode(pm, cfg);
  REQUIRE(enc.rows() == 1);
  REQUIRE(enc.cols() == 16);

  const double two_pi = 6.283185307179586476925286766559;
  std::size_t idx = 0;
  for (std::size_t axis = 0; axis < 3; ++axis) {
    double wavelength = cfg.base_wavelength;
    for (std::size_t fq = 0; fq < cfg.num_frequencies; ++fq) {
      double omega = two_pi / wavelength;
      double a = pm.coords.at(axis);
      CHECK(enc.at(0, idx++) == doctest::Approx(std::sin(omega * a)).epsilon(1e-15));
      CHECK(enc.at(0, idx++) == doctest::Approx(std::cos(omega * a)).epsilon(1e-15));
      wavelength *= 2.0;
    }
  }
  for (; idx < 16; ++idx) CHECK(enc.at(0, idx) == 0.0);

  GeoEncodingConfig bad = cfg;
  bad.output_dim = 11;  // below 6 * num_frequencies
  CHECK_THROWS_AS(bad.validate(), ParameterError);
}

TEST_CASE("coordinate injection is an elementwise sum") {
  Tensor vis({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor enc({2, 3}, {10, 20, 30, 40, 50, 60});
  Tensor out = inject_coords(vis, enc);
  CHECK(out.at(1, 2) == 66.0);
  Tensor bad({3, 2}, {0, 0, 0, 0, 0, 0});
  CHECK_THROWS_AS(inject_coords(vis, bad), DimensionError);
}

TEST_CASE("frame sampling covers endpoints with near-uniform stride") {
  for (std::size_t total = 1; total <= 200; ++total) {
    for (std::size_t mx = 1; mx <= 12; ++mx) {
      auto idx = sample_frames(total, mx);
      if (total <= mx) {
        REQUIRE(idx.size() == total);
        for (std::size_t t = 0; t < total; ++t) CHECK(idx[t] == t);
        continue;
      }
      if (mx == 1) {
        CHECK(idx == std::vector<std::size_t>{0});
        continue;
      }
      REQUIRE(idx.size() == mx);
      CHECK(idx.front() == 0);
      CHECK(idx.back() == total - 1);
      double stride = static_cast<double>(total - 1) / static_cast<double>(mx - 1);
      for (std::size_t t = 1; t < idx.size(); ++t) {
        CHECK(idx[t] > idx[t - 1]);  // strictly increasing
        double gap = static_cast<double>(idx[t] - idx[t - 1]);
        CHECK(gap >= std::floor(stride));
        CHECK(gap <= std::ceil(stride));
      }
    }
  }
  CHECK(sample_frames(100, 1) == std::vector<std::size_t>{0});
  CHECK_THROWS_AS(sample_frames(0, 4), ParameterError);
  CHECK_THROWS_AS(sample_frames(4, 0), ParameterError);
}
