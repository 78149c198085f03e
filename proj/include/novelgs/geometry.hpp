#pragma once

// Pinhole cameras, Plücker ray maps and camera-frame utilities.
//
// Conventions (used everywhere in the library):
//   * world frame is right-handed with +z up;
//   * camera frame is x right, y down, z forward;
//   * `rotation` maps camera-frame directions to world-frame directions;
//   * pixel (row i, col j) has its center at image coordinates (j + 0.5, i + 0.5).

#include "novelgs/autograd.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace novelgs {

using Vec2 = Eigen::Matrix<Real, 2, 1>;
using Vec3 = Eigen::Matrix<Real, 3, 1>;
using Vec4 = Eigen::Matrix<Real, 4, 1>;
using Mat2 = Eigen::Matrix<Real, 2, 2>;
using Mat3 = Eigen::Matrix<Real, 3, 3>;

struct Resolution {
  int height = 0;
  int width = 0;
  std::size_t pixels() const { return static_cast<std::size_t>(height) * static_cast<std::size_t>(width); }
  bool operator==(const Resolution&) const = default;
};

struct Camera {
  Mat3 rotation = Mat3::Identity();  // world-from-camera
  Vec3 center = Vec3::Zero();
  Real focal = 1.0;
  Vec2 principal_point = Vec2::Zero();
  Resolution resolution;

  // Throws std::invalid_argument when an invariant is violated.
  void validate() const {
    if (!(focal > 0.0) || !std::isfinite(focal))
      throw std::invalid_argument("camera: focal length must be positive and finite");
    if (resolution.height <= 0 || resolution.width <= 0)
      throw std::invalid_argument("camera: resolution must be positive");
    if (!principal_point.allFinite() || !center.allFinite())
      throw std::invalid_argument("camera: non-finite intrinsics or center");
    const Real orth = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (orth > 1e-6 || std::abs(rotation.determinant() - 1.0) > 1e-6)
      throw std::invalid_argument("camera: rotation is not a proper orthonormal matrix");
  }

  Vec3 to_camera(const Vec3& world) const { return rotation.transpose() * (world - center); }

  // World-space unit direction through the center of pixel (row, col).
  Vec3 pixel_direction(int row, int col) const {
    const Vec3 d_cam((col + 0.5 - principal_point.x()) / focal,
                     (row + 0.5 - principal_point.y()) / focal, 1.0);
    return (rotation * d_cam).normalized();
  }
};

// Camera at `eye` looking at `target`; `up` is the world up direction.
inline Camera look_at(const Vec3& eye, const Vec3& target, Resolution resolution, Real focal,
                      const Vec3& up = Vec3::UnitZ()) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(up);
  if (right.norm() < 1e-9) right = forward.cross(Vec3::UnitY());
  right.normalize();
  const Vec3 down = forward.cross(right);
  Camera cam;
  cam.rotation.col(0) = right;
  cam.rotation.col(1) = down;
  cam.rotation.col(2) = forward;
  cam.center = eye;
  cam.focal = focal;
  cam.principal_point = Vec2(resolution.width / 2.0, resolution.height / 2.0);
  cam.resolution = resolution;
  return cam;
}

// Per-pixel Plücker coordinates (o x d, d), row-major with 6 channels per pixel.
struct RayMap {
  Resolution resolution;
  Vec3 origin = Vec3::Zero();  // shared ray origin (camera center)
  std::vector<Real> values;

  static constexpr std::size_t kChannels = 6;

  Vec3 moment(std::size_t pixel) const { return Vec3(values[pixel * 6], values[pixel * 6 + 1], values[pixel * 6 + 2]); }
  Vec3 direction(std::size_t pixel) const {
    return Vec3(values[pixel * 6 + 3], values[pixel * 6 + 4], values[pixel * 6 + 5]);
  }
};

inline RayMap ray_map(const Camera& camera) {
  camera.validate();
  RayMap map;
  map.resolution = camera.resolution;
  map.origin = camera.center;
  map.values.resize(camera.resolution.pixels() * RayMap::kChannels);
  std::size_t p = 0;
  for (int i = 0; i < camera.resolution.height; ++i) {
    for (int j = 0; j < camera.resolution.width; ++j, ++p) {
      const Vec3 d = camera.pixel_direction(i, j);
      const Vec3 m = camera.center.cross(d);
      for (int k = 0; k < 3; ++k) {
        map.values[p * 6 + k] = m[k];
        map.values[p * 6 + 3 + k] = d[k];
      }
    }
  }
  return map;
}

// Rotation that brings `position` onto the positive y axis: first about +z
// (azimuth), then about +x (elevation). Identity when the position lies on
// the up axis, where the azimuth is undefined.
inline Mat3 canonical_rotation(const Vec3& position) {
  const Real planar = std::hypot(position.x(), position.y());
  if (planar < 1e-12) return Mat3::Identity();
  const Real azimuth = std::numbers::pi / 2.0 - std::atan2(position.y(), position.x());
  const Real tilt = -std::atan2(position.z(), planar);
  const Mat3 about_z = Eigen::AngleAxis<Real>(azimuth, Vec3::UnitZ()).toRotationMatrix();
  const Mat3 about_x = Eigen::AngleAxis<Real>(tilt, Vec3::UnitX()).toRotationMatrix();
  return about_x * about_z;
}

inline Camera transform_camera(const Camera& cam, const Mat3& rot, Real scale = 1.0) {
  Camera out = cam;
  out.rotation = rot * cam.rotation;
  out.center = scale * (rot * cam.center);
  return out;
}

struct NormalizedCameras {
  std::vector<Camera> cameras;
  Mat3 rotation = Mat3::Identity();  // normalized-from-world
  Real scale = 1.0;
};

// Rigidly re-expresses all cameras in a frame where the camera at
// `condition_index` sits at (0, y, 0) with y > 0. Scene origin is kept fixed.
// With `canonical_radius`, positions are additionally scaled so that the
// condition camera is that far from the origin.
inline NormalizedCameras normalize_camera_frame(const std::vector<Camera>& cameras,
                                                std::size_t condition_index,
                                                std::optional<Real> canonical_radius = std::nullopt) {
  if (condition_index >= cameras.size())
    throw std::out_of_range("normalize_cameras: condition index out of range");
  const Vec3& anchor = cameras[condition_index].center;
  if (anchor.norm() < 1e-12)
    throw std::invalid_argument("normalize_cameras: condition camera is at the world origin");
  NormalizedCameras out;
  out.rotation = canonical_rotation(anchor);
  if (canonical_radius) out.scale = *canonical_radius / anchor.norm();
  out.cameras.reserve(cameras.size());
  for (const auto& c : cameras) out.cameras.push_back(transform_camera(c, out.rotation, out.scale));
  return out;
}

inline std::vector<Camera> normalize_cameras(const std::vector<Camera>& cameras, std::size_t condition_index,
                                             std::optional<Real> canonical_radius = std::nullopt) {
  return normalize_camera_frame(cameras, condition_index, canonical_radius).cameras;
}

inline Real deg_to_rad(Real deg) { return deg * std::numbers::pi / 180.0; }

inline Vec3 spherical_position(Real radius, Real azimuth_deg, Real elevation_deg) {
  const Real az = deg_to_rad(azimuth_deg), el = deg_to_rad(elevation_deg);
  return radius * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
}

// Elevation-major ordering: all azimuths of elevations[0] first.
inline std::vector<Camera> orbit_cameras(int azimuth_count, const std::vector<Real>& elevations_deg, Real radius,
                                         Resolution resolution, Real focal) {
  if (azimuth_count < 1) throw std::invalid_argument("orbit_cameras: azimuth_count must be >= 1");
  if (!(radius > 0.0)) throw std::invalid_argument("orbit_cameras: radius must be positive");
  std::vector<Camera> cams;
  cams.reserve(static_cast<std::size_t>(azimuth_count) * elevations_deg.size());
  for (Real el : elevations_deg) {
    for (int k = 0; k < azimuth_count; ++k) {
      const Real az = 360.0 * k / azimuth_count;
      cams.push_back(look_at(spherical_position(radius, az, el), Vec3::Zero(), resolution, focal));
    }
  }
  return cams;
}

// The 21-view evaluation trajectory: 7 azimuths at elevations 30, 0, -30 degrees.
inline std::vector<Camera> evaluation_orbit(Real radius, Resolution resolution, Real focal) {
  return orbit_cameras(7, {30.0, 0.0, -30.0}, radius, resolution, focal);
}

// Focal length (pixels) giving the requested horizontal field of view.
inline Real focal_from_fov(int width, Real fov_deg) { return 0.5 * width / std::tan(deg_to_rad(fov_deg) / 2.0); }

// ---------------------------------------------------------------------------
// `cameras` file: JSON array of per-view records.

inline nlohmann::json camera_to_json(const Camera& c) {
  nlohmann::json j;
  std::vector<Real> rot(9);
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) rot[r * 3 + k] = c.rotation(r, k);
  j["rotation"] = rot;
  j["center"] = {c.center.x(), c.center.y(), c.center.z()};
  j["focal"] = c.focal;
  j["principal_point"] = {c.principal_point.x(), c.principal_point.y()};
  j["height"] = c.resolution.height;
  j["width"] = c.resolution.width;
  return j;
}

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera c;
  const auto rot = j.at("rotation").get<std::vector<Real>>();
  const auto center = j.at("center").get<std::vector<Real>>();
  const auto pp = j.at("principal_point").get<std::vector<Real>>();
  if (rot.size() != 9 || center.size() != 3 || pp.size() != 2)
    throw std::runtime_error("cameras file: malformed record");
  for (int r = 0; r < 3; ++r)
    for (int k = 0; k < 3; ++k) c.rotation(r, k) = rot[r * 3 + k];
  c.center = Vec3(center[0], center[1], center[2]);
  c.focal = j.at("focal").get<Real>();
  c.principal_point = Vec2(pp[0], pp[1]);
  c.resolution = {j.at("height").get<int>(), j.at("width").get<int>()};
  c.validate();
  return c;
}

inline void write_cameras(const std::filesystem::path& path, const std::vector<Camera>& cameras) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& c : cameras) arr.push_back(camera_to_json(c));
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << arr.dump(2) << "\n";
}

inline std::vector<Camera> read_cameras(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const auto arr = nlohmann::json::parse(in);
  std::vector<Camera> cams;
  for (const auto& j : arr) cams.push_back(camera_from_json(j));
  return cams;
}

}  // namespace novelgs
