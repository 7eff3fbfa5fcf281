#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "polyv/tensor.hpp"

namespace polyv {

// One depth frame with its camera. Depth is H x W meters, intrinsics is the
// 3x3 K matrix, extrinsics the 4x4 camera-to-world transform B.
struct CameraFrame {
  Tensor depth;       // H x W
  Tensor intrinsics;  // 3 x 3
  Tensor extrinsics;  // 4 x 4

  std::size_t height() const { return depth.rows(); }
  std::size_t width() const { return depth.cols(); }

  // Throws GeometryError unless: |det K| > 1e-12, bottom row of B is
  // [0,0,0,1] within 1e-12, and every depth entry is nonnegative.
  void validate() const;
};

// Per-pixel world coordinates produced by lifting a CameraFrame.
struct PointMap {
  Tensor coords;  // H x W x 3

  std::size_t height() const { return coords.extent(0); }
  std::size_t width() const { return coords.extent(1); }
  double at(std::size_t i, std::size_t j, std::size_t c) const {
    return coords.data()[(i * width() + j) * 3 + c];
  }
};

struct GeoEncodingConfig {
  std::size_t num_frequencies = 8;
  double base_wavelength = 1.0;  // meters; ladder is geometric with ratio 2
  std::size_t output_dim = 48;   // >= 6 * num_frequencies; excess is zero padding

  void validate() const;  // ParameterError on violation
};

// Inverse of a 3x3 matrix by adjugate; GeometryError when |det| <= 1e-12.
Tensor invert_3x3(const Tensor& m);

// Per pixel (i, j): homogeneous [x y z 1] = [D_ij * [j i 1] * (K^-1)^T, 1] * B^T,
// keeping the first three components.
PointMap lift_to_world(const CameraFrame& frame);

// Row per point: [sin(w_f * a), cos(w_f * a)] over axes a in {x, y, z} and
// frequencies w_f = 2*pi / (base_wavelength * 2^f), zero-padded to output_dim.
Tensor sinusoidal_encode(const PointMap& points, const GeoEncodingConfig& cfg);

// Elementwise sum of visual tokens and their positional encodings.
Tensor inject_coords(const Tensor& visual_tokens, const Tensor& encodings);

// All indices when total <= max; otherwise exactly max uniform-stride picks,
// strictly increasing, first = 0 and last = total-1.
std::vector<std::size_t> sample_frames(std::size_t total_frames, std::size_t max_frames);

// JSON document with keys "depth" {"dims": [H, W], "values": row-major},
// "K" (9 reals, row-major), "B" (16 reals, row-major). DataError on malformed
// input; the returned frame has been validated.
CameraFrame camera_frame_from_json_text(const std::string& text);
CameraFrame load_camera_frame(const std::string& path);

}  // namespace polyv
