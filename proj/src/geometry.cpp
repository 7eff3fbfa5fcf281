#include "polyv/geometry.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "polyv/error.hpp"
#include "polyv/kernels.hpp"

namespace polyv {

void CameraFrame::validate() const {
  if (depth.ndim() != 2) throw GeometryError("depth must be 2-D, got " + depth.shape_str());
  if (intrinsics.shape() != std::vector<std::size_t>{3, 3}) {
    throw GeometryError("intrinsics must be 3x3, got " + intrinsics.shape_str());
  }
  if (extrinsics.shape() != std::vector<std::size_t>{4, 4}) {
    throw GeometryError("extrinsics must be 4x4, got " + extrinsics.shape_str());
  }
  for (std::size_t i = 0; i < depth.numel(); ++i) {
    if (depth.at(i) < 0.0) throw GeometryError("depth entries must be nonnegative");
  }
  const Tensor& b = extrinsics;
  if (std::abs(b.at(3, 0)) > 1e-12 || std::abs(b.at(3, 1)) > 1e-12 || std::abs(b.at(3, 2)) > 1e-12 ||
      std::abs(b.at(3, 3) - 1.0) > 1e-12) {
    throw GeometryError("extrinsics bottom row must be [0,0,0,1]");
  }
  invert_3x3(intrinsics);  // throws on singular K
}

void GeoEncodingConfig::validate() const {
  if (num_frequencies == 0) throw ParameterError("num_frequencies must be at least 1");
  if (!(base_wavelength > 0.0) || !std::isfinite(base_wavelength)) {
    throw ParameterError("base_wavelength must be positive and finite");
  }
  if (output_dim < 6 * num_frequencies) {
    throw ParameterError("output_dim " + std::to_string(output_dim) + " cannot hold 6*" +
                         std::to_string(num_frequencies) + " sin/cos components");
  }
}

Tensor invert_3x3(const Tensor& m) {
  if (m.shape() != std::vector<std::size_t>{3, 3}) {
    throw GeometryError("invert_3x3 needs a 3x3 matrix, got " + m.shape_str());
  }
  double a = m.at(0, 0), b = m.at(0, 1), c = m.at(0, 2);
  double d = m.at(1, 0), e = m.at(1, 1), f = m.at(1, 2);
  double g = m.at(2, 0), h = m.at(2, 1), i = m.at(2, 2);
  double det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g);
  if (std::abs(det) <= 1e-12) {
    throw GeometryError("singular intrinsics: |det| = " + std::to_string(std::abs(det)));
  }
  double inv = 1.0 / det;
  Tensor r({3, 3});
  r.at(0, 0) = (e * i - f * h) * inv;
  r.at(0, 1) = (c * h - b * i) * inv;
  r.at(0, 2) = (b * f - c * e) * inv;
  r.at(1, 0) = (f * g - d * i) * inv;
  r.at(1, 1) = (a * i - c * g) * inv;
  r.at(1, 2) = (c * d - a * f) * inv;
  r.at(2, 0) = (d * h - e * g) * inv;
  r.at(2, 1) = (b * g - a * h) * inv;
  r.at(2, 2) = (a * e - b * d) * inv;
  return r;
}

PointMap lift_to_world(const CameraFrame& frame) {
  frame.validate();
  Tensor kinv = invert_3x3(frame.intrinsics);
  std::size_t h = frame.height(), w = frame.width();
  PointMap out;
  out.coords = Tensor({h, w, 3});
  kernels::lift_points(h, w, frame.depth.data(), kinv.data(), frame.extrinsics.data(), out.coords.data());
  if (!out.coords.all_finite()) throw GeometryError("lifted coordinates are non-finite");
  return out;
}

Tensor sinusoidal_encode(const PointMap& points, const GeoEncodingConfig& cfg) {
  cfg.validate();
  std::size_t count = points.height() * points.width();
  Tensor out({count, cfg.output_dim});
  kernels::sinusoid_encode(count, points.coords.data(), cfg.num_frequencies, cfg.base_wavelength, 2.0,
                           cfg.output_dim, out.data());
  return out;
}

Tensor inject_coords(const Tensor& visual_tokens, const Tensor& encodings) {
  if (!visual_tokens.same_shape(encodings)) {
    throw DimensionError("inject_coords shape mismatch: " + visual_tokens.shape_str() + " vs " +
                         encodings.shape_str());
  }
  Tensor out(visual_tokens.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out.at(i) = visual_tokens.at(i) + encodings.at(i);
  return out;
}

std::vector<std::size_t> sample_frames(std::size_t total_frames, std::size_t max_frames) {
  if (total_frames == 0 || max_frames == 0) {
    throw ParameterError("sample_frames counts must be at least 1");
  }
  std::vector<std::size_t> idx;
  if (total_frames <= max_frames) {
    idx.resize(total_frames);
    for (std::size_t t = 0; t < total_frames; ++t) idx[t] = t;
    return idx;
  }
  if (max_frames == 1) return {0};
  idx.resize(max_frames);
  double span = static_cast<double>(total_frames - 1);
  double denom = static_cast<double>(max_frames - 1);
  for (std::size_t t = 0; t < max_frames; ++t) {
    idx[t] = static_cast<std::size_t>(std::llround(static_cast<double>(t) * span / denom));
  }
  return idx;
}

namespace {

Tensor tensor_from_flat(const nlohmann::json& arr, std::vector<std::size_t> shape, const std::string& key) {
  if (!arr.is_array()) throw DataError("camera frame key '" + key + "' must be an array");
  std::vector<double> vals;
  vals.reserve(arr.size());
  for (const auto& v : arr) {
    if (!v.is_number()) throw DataError("camera frame key '" + key + "' holds a non-numeric entry");
    vals.push_back(v.get<double>());
  }
  if (vals.size() != shape_product(shape)) {
    throw DataError("camera frame key '" + key + "' has " + std::to_string(vals.size()) + " values");
  }
  return Tensor(std::move(shape), std::move(vals));
}

}  // namespace

CameraFrame camera_frame_from_json_text(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(std::string("camera frame document is not valid JSON: ") + e.what());
  }
  if (!doc.contains("depth") || !doc.contains("K") || !doc.contains("B")) {
    throw DataError("camera frame document needs keys depth, K, B");
  }
  const auto& d = doc["depth"];
  if (!d.is_object() || !d.contains("dims") || !d.contains("values") || !d["dims"].is_array() ||
      d["dims"].size() != 2) {
    throw DataError("depth must be an object with dims [H, W] and row-major values");
  }
  std::size_t h = 0, w = 0;
  try {
    h = d["dims"][0].get<std::size_t>();
    w = d["dims"][1].get<std::size_t>();
  } catch (const nlohmann::json::exception&) {
    throw DataError("depth dims must be nonnegative integers");
  }
  if (h == 0 || w == 0) throw DataError("depth dims must be positive");
  CameraFrame frame;
  try {
    frame.depth = tensor_from_flat(d["values"], {h, w}, "depth.values");
    frame.intrinsics = tensor_from_flat(doc["K"], {3, 3}, "K");
    frame.extrinsics = tensor_from_flat(doc["B"], {4, 4}, "B");
  } catch (const DimensionError& e) {
    throw DataError(e.what());
  }
  frame.validate();
  return frame;
}

CameraFrame load_camera_frame(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open camera frame file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return camera_frame_from_json_text(ss.str());
}

}  // namespace polyv
