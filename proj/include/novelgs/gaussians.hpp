#pragma once

// Per-pixel Gaussian attribute maps, their activation into 3D Gaussians and
// the NVGS binary container.

#include "novelgs/autograd.hpp"
#include "novelgs/geometry.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <vector>

namespace novelgs {

// Raw network output channel layout.
namespace raw_channel {
inline constexpr std::size_t kDepth = 0;
inline constexpr std::size_t kRotation = 1;  // 4 channels
inline constexpr std::size_t kScale = 5;     // 3 channels
inline constexpr std::size_t kOpacity = 8;
inline constexpr std::size_t kColor = 9;  // 3 channels
inline constexpr std::size_t kCount = 12;
}  // namespace raw_channel

struct AttributeMap {
  Resolution resolution;
  std::vector<Real> raw;  // H*W*12, row-major pixels

  AttributeMap() = default;
  AttributeMap(Resolution res, std::vector<Real> values) : resolution(res), raw(std::move(values)) {
    if (raw.size() != resolution.pixels() * raw_channel::kCount)
      throw std::invalid_argument("AttributeMap: expected exactly 12 channels per pixel");
  }
  std::span<const Real> pixel(std::size_t p) const {
    return std::span<const Real>(raw).subspan(p * raw_channel::kCount, raw_channel::kCount);
  }
};

// Flat Gaussian records: center(3) scale(3) quaternion wxyz(4) opacity(1) color(3).
struct GaussianSet {
  static constexpr std::size_t kStride = 14;
  static constexpr std::size_t kCenter = 0;
  static constexpr std::size_t kScale = 3;
  static constexpr std::size_t kRotation = 6;
  static constexpr std::size_t kOpacity = 10;
  static constexpr std::size_t kColor = 11;

  std::vector<Real> data;

  GaussianSet() = default;
  explicit GaussianSet(std::vector<Real> records) : data(std::move(records)) {
    if (data.size() % kStride != 0) throw std::invalid_argument("GaussianSet: record size must be 14");
  }

  std::size_t size() const { return data.size() / kStride; }
  bool empty() const { return data.empty(); }

  std::span<Real> record(std::size_t i) { return std::span<Real>(data).subspan(i * kStride, kStride); }
  std::span<const Real> record(std::size_t i) const {
    return std::span<const Real>(data).subspan(i * kStride, kStride);
  }
  Vec3 center(std::size_t i) const { return Vec3(data.data() + i * kStride + kCenter); }
  Vec3 scale(std::size_t i) const { return Vec3(data.data() + i * kStride + kScale); }
  Vec4 rotation(std::size_t i) const { return Vec4(data.data() + i * kStride + kRotation); }
  Real opacity(std::size_t i) const { return data[i * kStride + kOpacity]; }
  Vec3 color(std::size_t i) const { return Vec3(data.data() + i * kStride + kColor); }

  void push_back(const Vec3& center, const Vec3& scale, const Vec4& q, Real opacity, const Vec3& color) {
    const std::array<Real, kStride> rec{center.x(), center.y(), center.z(), scale.x(), scale.y(), scale.z(),
                                         q[0],       q[1],       q[2],       q[3],      opacity,   color.x(),
                                         color.y(),  color.z()};
    data.insert(data.end(), rec.begin(), rec.end());
  }

  bool operator==(const GaussianSet&) const = default;
};

struct ActivationConfig {
  Real depth_near = 0.1;
  Real depth_far = 4.5;
  Real scale_min = 0.005;
  Real scale_max = 0.02;
  Real clip_extent = 1.0;  // centers clamped to [-extent, extent]^3
};

inline Real sigmoid(Real x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const Real e = std::exp(x);
  return e / (1.0 + e);
}

inline Real logit(Real p) { return std::log(p / (1.0 - p)); }

namespace detail {

// Activates one pixel's 12 raw channels into a 14-float record.
inline void activate_pixel(const Real* raw, const Vec3& origin, const Vec3& dir, const ActivationConfig& cfg,
                           Real* out) {
  const Real w = sigmoid(raw[raw_channel::kDepth]);
  const Real t = (1.0 - w) * cfg.depth_near + w * cfg.depth_far;
  for (int k = 0; k < 3; ++k)
    out[GaussianSet::kCenter + k] = std::clamp(origin[k] + t * dir[k], -cfg.clip_extent, cfg.clip_extent);
  for (int k = 0; k < 3; ++k)
    out[GaussianSet::kScale + k] =
        cfg.scale_min + (cfg.scale_max - cfg.scale_min) * sigmoid(raw[raw_channel::kScale + k]);
  const Real* q = raw + raw_channel::kRotation;
  const Real norm = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  if (norm > 0.0 && std::isfinite(norm)) {
    for (int k = 0; k < 4; ++k) out[GaussianSet::kRotation + k] = q[k] / norm;
  } else {
    out[GaussianSet::kRotation] = 1.0;
    for (int k = 1; k < 4; ++k) out[GaussianSet::kRotation + k] = 0.0;
  }
  out[GaussianSet::kOpacity] = sigmoid(raw[raw_channel::kOpacity]);
  for (int k = 0; k < 3; ++k) out[GaussianSet::kColor + k] = sigmoid(raw[raw_channel::kColor + k]);
}

// Chain rule for activate_pixel: accumulates into grad_raw.
inline void activate_pixel_backward(const Real* raw, const Vec3& origin, const Vec3& dir, const ActivationConfig& cfg,
                                    const Real* grad_out, Real* grad_raw) {
  const Real w = sigmoid(raw[raw_channel::kDepth]);
  const Real t = (1.0 - w) * cfg.depth_near + w * cfg.depth_far;
  Real g_t = 0;
  for (int k = 0; k < 3; ++k) {
    const Real x = origin[k] + t * dir[k];
    if (x > -cfg.clip_extent && x < cfg.clip_extent) g_t += grad_out[GaussianSet::kCenter + k] * dir[k];
  }
  grad_raw[raw_channel::kDepth] += g_t * (cfg.depth_far - cfg.depth_near) * w * (1.0 - w);

  for (int k = 0; k < 3; ++k) {
    const Real s = sigmoid(raw[raw_channel::kScale + k]);
    grad_raw[raw_channel::kScale + k] +=
        grad_out[GaussianSet::kScale + k] * (cfg.scale_max - cfg.scale_min) * s * (1.0 - s);
  }

  const Real* q = raw + raw_channel::kRotation;
  const Real norm = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
  if (norm > 0.0 && std::isfinite(norm)) {
    const Real* gq = grad_out + GaussianSet::kRotation;
    Real dot = 0;
    for (int k = 0; k < 4; ++k) dot += gq[k] * q[k] / norm;
    for (int k = 0; k < 4; ++k) grad_raw[raw_channel::kRotation + k] += (gq[k] - dot * q[k] / norm) / norm;
  }

  const Real o = sigmoid(raw[raw_channel::kOpacity]);
  grad_raw[raw_channel::kOpacity] += grad_out[GaussianSet::kOpacity] * o * (1.0 - o);
  for (int k = 0; k < 3; ++k) {
    const Real c = sigmoid(raw[raw_channel::kColor + k]);
    grad_raw[raw_channel::kColor + k] += grad_out[GaussianSet::kColor + k] * c * (1.0 - c);
  }
}

}  // namespace detail

inline GaussianSet activate_attributes(const AttributeMap& raw, const RayMap& rays, const ActivationConfig& cfg = {}) {
  if (raw.resolution != rays.resolution)
    throw std::invalid_argument("activate_attributes: attribute map and ray map sizes differ");
  const std::size_t n = raw.resolution.pixels();
  GaussianSet out(std::vector<Real>(n * GaussianSet::kStride));
  for (std::size_t p = 0; p < n; ++p)
    detail::activate_pixel(raw.raw.data() + p * raw_channel::kCount, rays.origin, rays.direction(p), cfg,
                           out.data.data() + p * GaussianSet::kStride);
  return out;
}

// Differentiable variant over stacked views: raw is [V*H*W, 12], `rays` holds
// one RayMap per view in the same order. Returns [V*H*W, 14].
inline ad::Var activate_attributes(const ad::Var& raw, const std::vector<RayMap>& rays,
                                   const ActivationConfig& cfg = {}) {
  std::size_t total = 0;
  for (const auto& r : rays) total += r.resolution.pixels();
  ad::require_shape(raw, {total, raw_channel::kCount}, "activate_attributes");

  struct PixelRay {
    Vec3 origin, dir;
  };
  auto pixel_rays = std::make_shared<std::vector<PixelRay>>();
  pixel_rays->reserve(total);
  for (const auto& r : rays)
    for (std::size_t p = 0; p < r.resolution.pixels(); ++p) pixel_rays->push_back({r.origin, r.direction(p)});

  std::vector<Real> value(total * GaussianSet::kStride);
  for (std::size_t p = 0; p < total; ++p)
    detail::activate_pixel(raw.value().data() + p * raw_channel::kCount, (*pixel_rays)[p].origin,
                           (*pixel_rays)[p].dir, cfg, value.data() + p * GaussianSet::kStride);

  return ad::make_op({total, GaussianSet::kStride}, std::move(value), {raw}, [pixel_rays, cfg, total](ad::Node& self) {
    ad::Node& in = *self.inputs[0];
    auto& g = in.ensure_grad();
    for (std::size_t p = 0; p < total; ++p)
      detail::activate_pixel_backward(in.value.data() + p * raw_channel::kCount, (*pixel_rays)[p].origin,
                                      (*pixel_rays)[p].dir, cfg, self.grad.data() + p * GaussianSet::kStride,
                                      g.data() + p * raw_channel::kCount);
  });
}

inline GaussianSet merge_views(const std::vector<GaussianSet>& sets) {
  if (sets.empty()) throw std::invalid_argument("merge_views: no sets to merge");
  GaussianSet out;
  std::size_t total = 0;
  for (const auto& s : sets) total += s.data.size();
  out.data.reserve(total);
  for (const auto& s : sets) out.data.insert(out.data.end(), s.data.begin(), s.data.end());
  return out;
}

inline GaussianSet to_gaussian_set(const ad::Var& records) {
  ad::require_shape(records, {records.rows(), GaussianSet::kStride}, "to_gaussian_set");
  return GaussianSet(std::vector<Real>(records.value().begin(), records.value().end()));
}

// Applies x -> rotation * x / scale to every Gaussian (inverse of a camera
// frame normalization with the given rotation and scale).
inline GaussianSet transform_to_world(const GaussianSet& set, const Mat3& normalized_from_world, Real scale = 1.0) {
  GaussianSet out = set;
  const Mat3 world_from_normalized = normalized_from_world.transpose();
  const Eigen::Quaternion<Real> qr(world_from_normalized);
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto rec = out.record(i);
    const Vec3 c = world_from_normalized * set.center(i) / scale;
    for (int k = 0; k < 3; ++k) rec[GaussianSet::kCenter + k] = c[k];
    for (int k = 0; k < 3; ++k) rec[GaussianSet::kScale + k] /= scale;
    const Vec4 q = set.rotation(i);
    const Eigen::Quaternion<Real> qg(q[0], q[1], q[2], q[3]);
    const Eigen::Quaternion<Real> rotated = qr * qg;
    rec[GaussianSet::kRotation + 0] = rotated.w();
    rec[GaussianSet::kRotation + 1] = rotated.x();
    rec[GaussianSet::kRotation + 2] = rotated.y();
    rec[GaussianSet::kRotation + 3] = rotated.z();
  }
  return out;
}

// ---------------------------------------------------------------------------
// NVGS container: "NVGS", u32 version, u32 count, then count * 14 f32, all
// little-endian.

inline constexpr std::uint32_t kNvgsVersion = 1;

namespace detail {
inline void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xffu));
}
inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
}  // namespace detail

inline std::vector<unsigned char> encode_nvgs(const GaussianSet& set) {
  std::vector<unsigned char> buf{'N', 'V', 'G', 'S'};
  detail::put_u32(buf, kNvgsVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(set.size()));
  buf.reserve(buf.size() + set.data.size() * 4);
  for (Real v : set.data) detail::put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return buf;
}

inline GaussianSet decode_nvgs(std::span<const unsigned char> bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "NVGS", 4) != 0)
    throw std::runtime_error("nvgs: bad magic");
  const std::uint32_t version = detail::get_u32(bytes.data() + 4);
  if (version != kNvgsVersion) throw std::runtime_error("nvgs: unsupported version " + std::to_string(version));
  const std::uint32_t count = detail::get_u32(bytes.data() + 8);
  const std::size_t expected = 12 + static_cast<std::size_t>(count) * GaussianSet::kStride * 4;
  if (bytes.size() != expected) throw std::runtime_error("nvgs: truncated or oversized payload");
  GaussianSet set(std::vector<Real>(static_cast<std::size_t>(count) * GaussianSet::kStride));
  for (std::size_t i = 0; i < set.data.size(); ++i)
    set.data[i] = std::bit_cast<float>(detail::get_u32(bytes.data() + 12 + 4 * i));
  return set;
}

inline void write_nvgs(const std::filesystem::path& path, const GaussianSet& set) {
  const auto buf = encode_nvgs(set);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

inline GaussianSet read_nvgs(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_nvgs(buf);
}

}  // namespace novelgs
