#pragma once

// Gaussian splatting: EWA projection of 3D Gaussians to screen-space splats
// followed by front-to-back alpha compositing. `render_reference` is the
// brute-force oracle over every pixel/splat pair; `render` bins splats into
// their screen bounds and carries the analytic backward pass.

#include "novelgs/autograd.hpp"
#include "novelgs/gaussians.hpp"
#include "novelgs/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <optional>
#include <vector>

namespace novelgs {

struct RenderConfig {
  Real alpha_max = 0.999;
  Real cov_epsilon = 0.3;  // px^2 added to the projected covariance diagonal
  Real near_plane = 0.01;
  Real weight_epsilon = 1e-8;  // contributions below this weight are skipped by `render`
  Vec3 background = Vec3::Zero();
};

struct Splat2D {
  Vec2 mean2d;
  Mat2 cov2d;
  Real depth = 0;
  Real opacity = 0;
  Vec3 color = Vec3::Zero();
};

struct RenderOutput {
  Resolution resolution;
  std::vector<Real> image;  // H*W*3
  std::vector<Real> alpha;  // H*W
};

inline Mat3 quaternion_to_matrix(const Vec4& q) {
  const Real w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),  //
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),   //
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

namespace detail {

// Projection intermediates kept for the backward pass.
struct Projection {
  Vec3 cam_point;
  Eigen::Matrix<Real, 2, 3> jacobian;
  Mat3 view_cov;  // covariance in camera coordinates
  Mat3 rot;       // rotation of the normalized quaternion
  Vec4 q_unit;
  Real q_norm = 1;
  Splat2D splat;
  Mat2 conic;  // inverse of splat.cov2d
};

inline std::optional<Projection> project(std::span<const Real> rec, const Camera& camera, const RenderConfig& cfg) {
  Projection pr;
  const Vec3 center(rec[GaussianSet::kCenter], rec[GaussianSet::kCenter + 1], rec[GaussianSet::kCenter + 2]);
  pr.cam_point = camera.to_camera(center);
  const Real z = pr.cam_point.z();
  if (!(z > cfg.near_plane)) return std::nullopt;

  const Real f = camera.focal;
  const Real px = pr.cam_point.x(), py = pr.cam_point.y();
  pr.jacobian << f / z, 0, -f * px / (z * z), 0, f / z, -f * py / (z * z);

  const Vec4 q(rec[GaussianSet::kRotation], rec[GaussianSet::kRotation + 1], rec[GaussianSet::kRotation + 2],
               rec[GaussianSet::kRotation + 3]);
  pr.q_norm = q.norm();
  pr.q_unit = pr.q_norm > 0 ? Vec4(q / pr.q_norm) : Vec4(1, 0, 0, 0);
  pr.rot = quaternion_to_matrix(pr.q_unit);
  const Vec3 s(rec[GaussianSet::kScale], rec[GaussianSet::kScale + 1], rec[GaussianSet::kScale + 2]);
  const Mat3 world_cov = pr.rot * s.cwiseProduct(s).asDiagonal() * pr.rot.transpose();
  const Mat3& wc = camera.rotation;  // world-from-camera
  pr.view_cov = wc.transpose() * world_cov * wc;

  Splat2D& sp = pr.splat;
  sp.mean2d = Vec2(f * px / z + camera.principal_point.x(), f * py / z + camera.principal_point.y());
  sp.cov2d = pr.jacobian * pr.view_cov * pr.jacobian.transpose();
  sp.cov2d(0, 0) += cfg.cov_epsilon;
  sp.cov2d(1, 1) += cfg.cov_epsilon;
  sp.cov2d(0, 1) = sp.cov2d(1, 0) = 0.5 * (sp.cov2d(0, 1) + sp.cov2d(1, 0));
  const Real det = sp.cov2d.determinant();
  if (!(det > 0)) return std::nullopt;
  pr.conic << sp.cov2d(1, 1) / det, -sp.cov2d(0, 1) / det, -sp.cov2d(1, 0) / det, sp.cov2d(0, 0) / det;
  sp.depth = z;
  sp.opacity = rec[GaussianSet::kOpacity];
  sp.color = Vec3(rec[GaussianSet::kColor], rec[GaussianSet::kColor + 1], rec[GaussianSet::kColor + 2]);
  return pr;
}

struct PreparedSplat {
  std::uint32_t index;  // Gaussian index in the input set
  Real mx, my;
  Real qa, qb, qc;  // conic entries
  Real opacity;
  Real r, g, b;
};

inline PreparedSplat prepare(std::uint32_t index, const Projection& pr) {
  return {index,
          pr.splat.mean2d.x(),
          pr.splat.mean2d.y(),
          pr.conic(0, 0),
          pr.conic(0, 1),
          pr.conic(1, 1),
          pr.splat.opacity,
          pr.splat.color.x(),
          pr.splat.color.y(),
          pr.splat.color.z()};
}

inline Real gaussian_weight(const PreparedSplat& s, Real u, Real v) {
  const Real dx = u - s.mx, dy = v - s.my;
  return std::exp(-0.5 * (s.qa * dx * dx + 2.0 * s.qb * dx * dy + s.qc * dy * dy));
}

struct Frame {
  std::vector<Projection> projections;   // indexed like `splats`
  std::vector<PreparedSplat> splats;     // sorted front to back
};

// Projects every Gaussian and orders the survivors by (depth, index).
inline Frame build_frame(const Real* records, std::size_t count, const Camera& camera, const RenderConfig& cfg) {
  std::vector<std::pair<Projection, std::uint32_t>> visible;
  visible.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::span<const Real> rec(records + i * GaussianSet::kStride, GaussianSet::kStride);
    if (auto pr = project(rec, camera, cfg)) visible.emplace_back(std::move(*pr), static_cast<std::uint32_t>(i));
  }
  std::vector<std::size_t> order(visible.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const Real da = visible[a].first.splat.depth, db = visible[b].first.splat.depth;
    if (da != db) return da < db;
    return visible[a].second < visible[b].second;
  });
  Frame frame;
  frame.projections.reserve(order.size());
  frame.splats.reserve(order.size());
  for (std::size_t k : order) {
    frame.splats.push_back(prepare(visible[k].second, visible[k].first));
    frame.projections.push_back(std::move(visible[k].first));
  }
  return frame;
}

inline RenderOutput blank_output(const Camera& camera, const RenderConfig& cfg) {
  RenderOutput out;
  out.resolution = camera.resolution;
  out.image.resize(camera.resolution.pixels() * 3);
  out.alpha.assign(camera.resolution.pixels(), 0.0);
  for (std::size_t p = 0; p < camera.resolution.pixels(); ++p)
    for (int c = 0; c < 3; ++c) out.image[p * 3 + c] = cfg.background[c];
  return out;
}

// Pixel -> splat lists (compressed rows) for the screen-bounds path.
struct Binning {
  std::vector<std::uint32_t> offsets;  // pixels + 1
  std::vector<std::uint32_t> entries;  // positions into Frame::splats
};

inline Binning bin_splats(const Frame& frame, Resolution res, const RenderConfig& cfg) {
  const std::size_t npix = res.pixels();
  struct Box {
    int x0, x1, y0, y1;
  };
  std::vector<Box> boxes(frame.splats.size());
  for (std::size_t k = 0; k < frame.splats.size(); ++k) {
    const auto& s = frame.splats[k];
    Box& b = boxes[k];
    if (cfg.weight_epsilon <= 0) {
      b = {0, res.width - 1, 0, res.height - 1};
      continue;
    }
    if (s.opacity <= cfg.weight_epsilon) {
      b = {1, 0, 1, 0};
      continue;
    }
    // opacity * exp(-m/2) >= eps  <=>  m <= m_cut; the ellipse m <= m_cut has
    // half-extents sqrt(m_cut * cov_xx) and sqrt(m_cut * cov_yy).
    const Real m_cut = 2.0 * std::log(s.opacity / cfg.weight_epsilon);
    const Mat2& cov = frame.projections[k].splat.cov2d;
    const Real hx = std::sqrt(m_cut * cov(0, 0)) + 1e-6, hy = std::sqrt(m_cut * cov(1, 1)) + 1e-6;
    // Pixel centers sit at integer + 0.5.
    const Real fx0 = std::ceil(s.mx - hx - 0.5), fx1 = std::floor(s.mx + hx - 0.5);
    const Real fy0 = std::ceil(s.my - hy - 0.5), fy1 = std::floor(s.my + hy - 0.5);
    b.x0 = static_cast<int>(std::max<Real>(fx0, 0));
    b.x1 = static_cast<int>(std::min<Real>(fx1, res.width - 1));
    b.y0 = static_cast<int>(std::max<Real>(fy0, 0));
    b.y1 = static_cast<int>(std::min<Real>(fy1, res.height - 1));
    if (fx1 < 0 || fy1 < 0 || fx0 > res.width - 1 || fy0 > res.height - 1) b = {1, 0, 1, 0};
  }
  Binning bins;
  bins.offsets.assign(npix + 1, 0);
  for (const auto& b : boxes)
    for (int y = b.y0; y <= b.y1; ++y)
      for (int x = b.x0; x <= b.x1; ++x) ++bins.offsets[static_cast<std::size_t>(y) * res.width + x + 1];
  for (std::size_t p = 0; p < npix; ++p) bins.offsets[p + 1] += bins.offsets[p];
  bins.entries.resize(bins.offsets[npix]);
  std::vector<std::uint32_t> cursor(bins.offsets.begin(), bins.offsets.end() - 1);
  for (std::size_t k = 0; k < boxes.size(); ++k) {
    const auto& b = boxes[k];
    for (int y = b.y0; y <= b.y1; ++y)
      for (int x = b.x0; x <= b.x1; ++x)
        bins.entries[cursor[static_cast<std::size_t>(y) * res.width + x]++] = static_cast<std::uint32_t>(k);
  }
  return bins;
}

}  // namespace detail

// Projects Gaussian `index` of `set`; std::nullopt when it is culled.
inline std::optional<Splat2D> project_gaussian(const GaussianSet& set, std::size_t index, const Camera& camera,
                                               const RenderConfig& cfg = {}) {
  auto pr = detail::project(set.record(index), camera, cfg);
  if (!pr) return std::nullopt;
  return pr->splat;
}

inline RenderOutput render_reference(const GaussianSet& set, const Camera& camera, const RenderConfig& cfg = {}) {
  camera.validate();
  RenderOutput out = detail::blank_output(camera, cfg);
  const auto frame = detail::build_frame(set.data.data(), set.size(), camera, cfg);
  const Resolution res = camera.resolution;
  for (int i = 0; i < res.height; ++i) {
    for (int j = 0; j < res.width; ++j) {
      const Real u = j + 0.5, v = i + 0.5;
      Real transmittance = 1.0;
      Vec3 color = Vec3::Zero();
      for (const auto& s : frame.splats) {
        const Real a = std::min(cfg.alpha_max, s.opacity * detail::gaussian_weight(s, u, v));
        const Real w = a * transmittance;
        color += w * Vec3(s.r, s.g, s.b);
        transmittance *= (1.0 - a);
      }
      const std::size_t p = static_cast<std::size_t>(i) * res.width + j;
      for (int c = 0; c < 3; ++c) out.image[p * 3 + c] = color[c] + transmittance * cfg.background[c];
      out.alpha[p] = 1.0 - transmittance;
    }
  }
  return out;
}

namespace detail {

struct RasterCache {
  Camera camera;
  RenderConfig cfg;
  Frame frame;
  Binning bins;
};

inline RenderOutput rasterize(const RasterCache& cache) {
  const Resolution res = cache.camera.resolution;
  const RenderConfig& cfg = cache.cfg;
  RenderOutput out = blank_output(cache.camera, cfg);
  for (int i = 0; i < res.height; ++i) {
    for (int j = 0; j < res.width; ++j) {
      const std::size_t p = static_cast<std::size_t>(i) * res.width + j;
      const Real u = j + 0.5, v = i + 0.5;
      Real transmittance = 1.0;
      Vec3 color = Vec3::Zero();
      for (std::uint32_t e = cache.bins.offsets[p]; e < cache.bins.offsets[p + 1]; ++e) {
        const auto& s = cache.frame.splats[cache.bins.entries[e]];
        const Real raw = s.opacity * gaussian_weight(s, u, v);
        if (raw < cfg.weight_epsilon) continue;
        const Real a = std::min(cfg.alpha_max, raw);
        const Real w = a * transmittance;
        color += w * Vec3(s.r, s.g, s.b);
        transmittance *= (1.0 - a);
      }
      for (int c = 0; c < 3; ++c) out.image[p * 3 + c] = color[c] + transmittance * cfg.background[c];
      out.alpha[p] = 1.0 - transmittance;
    }
  }
  return out;
}

// Gradient of the loss with respect to the [N, 14] Gaussian records, given
// d(loss)/d(image) (H*W*3) and d(loss)/d(alpha) (H*W).
inline void rasterize_backward(const RasterCache& cache, const Real* records, std::span<const Real> grad_image,
                               std::span<const Real> grad_alpha, Real* grad_records) {
  const Resolution res = cache.camera.resolution;
  const RenderConfig& cfg = cache.cfg;
  const std::size_t nsplat = cache.frame.splats.size();

  struct SplatGrad {
    Real mx = 0, my = 0;
    Real qa = 0, qb = 0, qc = 0;  // d/d(conic entry); qb is the total for the shared off-diagonal
    Real opacity = 0;
    Real r = 0, g = 0, b = 0;
  };
  std::vector<SplatGrad> sg(nsplat);

  struct Contribution {
    std::uint32_t k;
    Real weight;  // Gaussian falloff
    Real a;       // clamped alpha
    Real t;       // transmittance before this splat
    Real dx, dy;
  };
  std::vector<Contribution> stack;

  for (int i = 0; i < res.height; ++i) {
    for (int j = 0; j < res.width; ++j) {
      const std::size_t p = static_cast<std::size_t>(i) * res.width + j;
      const Real u = j + 0.5, v = i + 0.5;
      stack.clear();
      Real transmittance = 1.0;
      for (std::uint32_t e = cache.bins.offsets[p]; e < cache.bins.offsets[p + 1]; ++e) {
        const std::uint32_t k = cache.bins.entries[e];
        const auto& s = cache.frame.splats[k];
        const Real dx = u - s.mx, dy = v - s.my;
        const Real weight = std::exp(-0.5 * (s.qa * dx * dx + 2.0 * s.qb * dx * dy + s.qc * dy * dy));
        const Real raw = s.opacity * weight;
        if (raw < cfg.weight_epsilon) continue;
        const Real a = std::min(cfg.alpha_max, raw);
        stack.push_back({k, weight, a, transmittance, dx, dy});
        transmittance *= (1.0 - a);
      }
      const Vec3 g_col(grad_image[p * 3], grad_image[p * 3 + 1], grad_image[p * 3 + 2]);
      const Real g_alpha = grad_alpha[p];
      // Walking back to front: `behind` is the composite of everything after
      // the current splat (background included), `suffix` their transmittance.
      Vec3 behind = cfg.background;
      Real suffix = 1.0;
      for (auto it = stack.rbegin(); it != stack.rend(); ++it) {
        const auto& s = cache.frame.splats[it->k];
        const Vec3 c(s.r, s.g, s.b);
        SplatGrad& g = sg[it->k];
        const Real w = it->a * it->t;
        g.r += g_col[0] * w;
        g.g += g_col[1] * w;
        g.b += g_col[2] * w;
        const Real d_a = it->t * g_col.dot(c - behind) + g_alpha * it->t * suffix;
        behind = it->a * c + (1.0 - it->a) * behind;
        suffix *= (1.0 - it->a);
        if (s.opacity * it->weight > cfg.alpha_max) continue;  // clamped
        g.opacity += d_a * it->weight;
        const Real d_weight = d_a * s.opacity;
        const Real d_m = -0.5 * it->weight * d_weight;
        const Real dx = it->dx, dy = it->dy;
        g.qa += d_m * dx * dx;
        g.qb += d_m * 2.0 * dx * dy;
        g.qc += d_m * dy * dy;
        // m depends on the mean through dx = u - mx.
        g.mx += d_m * -2.0 * (s.qa * dx + s.qb * dy);
        g.my += d_m * -2.0 * (s.qb * dx + s.qc * dy);
      }
    }
  }

  const Camera& camera = cache.camera;
  const Mat3& wc = camera.rotation;
  const Real f = camera.focal;
  for (std::size_t k = 0; k < nsplat; ++k) {
    const SplatGrad& g = sg[k];
    const Projection& pr = cache.frame.projections[k];
    const std::uint32_t idx = cache.frame.splats[k].index;
    Real* out = grad_records + static_cast<std::size_t>(idx) * GaussianSet::kStride;
    const Real* rec = records + static_cast<std::size_t>(idx) * GaussianSet::kStride;

    out[GaussianSet::kOpacity] += g.opacity;
    out[GaussianSet::kColor] += g.r;
    out[GaussianSet::kColor + 1] += g.g;
    out[GaussianSet::kColor + 2] += g.b;

    // conic = cov^-1  =>  dL/dcov = -conic * G * conic (symmetric form).
    Mat2 g_conic;
    g_conic << g.qa, 0.5 * g.qb, 0.5 * g.qb, g.qc;
    const Mat2 g_cov = -pr.conic * g_conic * pr.conic;

    // cov2d = J V J^T + eps I
    const Eigen::Matrix<Real, 2, 3>& jac = pr.jacobian;
    const Mat3 g_view = jac.transpose() * g_cov * jac;
    const Eigen::Matrix<Real, 2, 3> g_jac = 2.0 * g_cov * jac * pr.view_cov;

    // Camera-space point gradient from the mean and the Jacobian.
    const Real x = pr.cam_point.x(), y = pr.cam_point.y(), z = pr.cam_point.z();
    Vec3 g_cam = Vec3::Zero();
    g_cam.x() += g.mx * f / z;
    g_cam.z() += g.mx * -f * x / (z * z);
    g_cam.y() += g.my * f / z;
    g_cam.z() += g.my * -f * y / (z * z);
    g_cam.z() += g_jac(0, 0) * -f / (z * z);
    g_cam.x() += g_jac(0, 2) * -f / (z * z);
    g_cam.z() += g_jac(0, 2) * 2.0 * f * x / (z * z * z);
    g_cam.z() += g_jac(1, 1) * -f / (z * z);
    g_cam.y() += g_jac(1, 2) * -f / (z * z);
    g_cam.z() += g_jac(1, 2) * 2.0 * f * y / (z * z * z);
    const Vec3 g_center = wc * g_cam;
    for (int c = 0; c < 3; ++c) out[GaussianSet::kCenter + c] += g_center[c];

    // view_cov = W^T Sigma W, Sigma = R S^2 R^T = L L^T with L = R S.
    const Mat3 g_sigma = wc * g_view * wc.transpose();
    const Vec3 s(rec[GaussianSet::kScale], rec[GaussianSet::kScale + 1], rec[GaussianSet::kScale + 2]);
    const Mat3 l = pr.rot * s.asDiagonal();
    const Mat3 g_l = 2.0 * g_sigma * l;
    const Mat3 g_rot = g_l * s.asDiagonal();
    for (int c = 0; c < 3; ++c) out[GaussianSet::kScale + c] += g_l.col(c).dot(pr.rot.col(c));

    const Real qw = pr.q_unit[0], qx = pr.q_unit[1], qy = pr.q_unit[2], qz = pr.q_unit[3];
    const Mat3& G = g_rot;
    Vec4 g_q;
    g_q[0] = 2 * (-qz * G(0, 1) + qy * G(0, 2) + qz * G(1, 0) - qx * G(1, 2) - qy * G(2, 0) + qx * G(2, 1));
    g_q[1] = 2 * (qy * G(0, 1) + qz * G(0, 2) + qy * G(1, 0) - 2 * qx * G(1, 1) - qw * G(1, 2) + qz * G(2, 0) +
                  qw * G(2, 1) - 2 * qx * G(2, 2));
    g_q[2] = 2 * (-2 * qy * G(0, 0) + qx * G(0, 1) + qw * G(0, 2) + qx * G(1, 0) + qz * G(1, 2) - qw * G(2, 0) +
                  qz * G(2, 1) - 2 * qy * G(2, 2));
    g_q[3] = 2 * (-2 * qz * G(0, 0) - qw * G(0, 1) + qx * G(0, 2) + qw * G(1, 0) - 2 * qz * G(1, 1) +
                  qy * G(1, 2) + qx * G(2, 0) + qy * G(2, 1));
    if (pr.q_norm > 0) {
      const Vec4 g_raw = (g_q - pr.q_unit * pr.q_unit.dot(g_q)) / pr.q_norm;
      for (int c = 0; c < 4; ++c) out[GaussianSet::kRotation + c] += g_raw[c];
    }
  }
}

inline std::shared_ptr<RasterCache> make_cache(const Real* records, std::size_t count, const Camera& camera,
                                               const RenderConfig& cfg) {
  camera.validate();
  auto cache = std::make_shared<RasterCache>();
  cache->camera = camera;
  cache->cfg = cfg;
  cache->frame = build_frame(records, count, camera, cfg);
  cache->bins = bin_splats(cache->frame, camera.resolution, cfg);
  return cache;
}

}  // namespace detail

inline RenderOutput render(const GaussianSet& set, const Camera& camera, const RenderConfig& cfg = {}) {
  const auto cache = detail::make_cache(set.data.data(), set.size(), camera, cfg);
  return detail::rasterize(*cache);
}

// Differentiable render of [N, 14] Gaussian records; returns [H*W, 4] with
// RGB in columns 0..2 and alpha in column 3.
inline ad::Var render(const ad::Var& records, const Camera& camera, const RenderConfig& cfg = {}) {
  ad::require_shape(records, {records.rows(), GaussianSet::kStride}, "render");
  auto cache = detail::make_cache(records.value().data(), records.rows(), camera, cfg);
  const RenderOutput img = detail::rasterize(*cache);
  const std::size_t npix = camera.resolution.pixels();
  std::vector<Real> value(npix * 4);
  for (std::size_t p = 0; p < npix; ++p) {
    for (int c = 0; c < 3; ++c) value[p * 4 + c] = img.image[p * 3 + c];
    value[p * 4 + 3] = img.alpha[p];
  }
  return ad::make_op({npix, 4}, std::move(value), {records}, [cache, npix](ad::Node& self) {
    ad::Node& in = *self.inputs[0];
    std::vector<Real> g_img(npix * 3), g_alpha(npix);
    for (std::size_t p = 0; p < npix; ++p) {
      for (int c = 0; c < 3; ++c) g_img[p * 3 + c] = self.grad[p * 4 + c];
      g_alpha[p] = self.grad[p * 4 + 3];
    }
    auto& g = in.ensure_grad();
    detail::rasterize_backward(*cache, in.value.data(), g_img, g_alpha, g.data());
  });
}

}  // namespace novelgs
