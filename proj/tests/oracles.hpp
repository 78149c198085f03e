#pragma once

// Oracles and fixtures shared by the unit and acceptance binaries (no test
// framework dependency).

#include "novelgs/novelgs.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace novelgs::testing {

// Central-difference gradient of a scalar function of `x` (perturbed in place).
inline std::vector<Real> numeric_gradient(std::span<Real> x, const std::function<Real()>& f, Real h = 1e-6) {
  std::vector<Real> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const Real keep = x[i];
    x[i] = keep + h;
    const Real up = f();
    x[i] = keep - h;
    const Real down = f();
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

// ||a - b|| / max(||a||, ||b||, floor)
inline Real relative_error(std::span<const Real> a, std::span<const Real> b, Real floor = 1e-8) {
  Real diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

// Fixed pseudo-random weights so the scalar loss exercises every output.
inline std::vector<Real> probe_weights(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return init_normal(n, 1.0, rng);
}

inline ad::Var weighted_sum(const ad::Var& x, std::span<const Real> w) {
  Real s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += x.value()[i] * w[i];
  auto weights = std::make_shared<std::vector<Real>>(w.begin(), w.end());
  return ad::make_op({1, 1}, {s}, {x}, [weights](ad::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * (*weights)[i];
  });
}

inline Image random_image(Resolution res, std::uint64_t seed) {
  Rng rng(seed);
  Image img(res);
  for (auto& v : img.rgb) v = uniform01(rng);
  return img;
}

inline Camera test_camera(Real az, Real el, Resolution res = {32, 32}, Real radius = 2.0) {
  return look_at(spherical_position(radius, az, el), Vec3::Zero(), res, focal_from_fov(res.width, 40.0));
}

inline DenoiserConfig tiny_denoiser_config() {
  DenoiserConfig c;
  c.width = 16;
  c.layer_count = 2;
  c.head_count = 2;
  c.patch_size = 4;
  c.time_frequency_dim = 16;
  c.time_embedding_dim = 8;
  c.upsample_channels = 4;
  c.resolution = {8, 8};
  c.timestep_count = 1000;
  return c;
}

// Gives every parameter a generic nonzero value (breaks the zero init).
inline void randomize_parameters(Denoiser& model, std::uint64_t seed, Real stddev = 0.3) {
  Rng rng(seed);
  for (auto& [_, v] : model.parameters().entries())
    for (auto& x : v.mutable_value()) x += stddev * standard_normal(rng);
}

}  // namespace novelgs::testing

namespace novelgs::testing {

// Random Gaussians inside a box around the origin, visible from test_camera.
inline GaussianSet random_scene(std::size_t count, std::uint64_t seed, Real extent = 0.6, Real scale_lo = 0.01,
                                Real scale_hi = 0.08) {
  Rng rng(seed);
  auto u = [&](Real lo, Real hi) { return lo + (hi - lo) * uniform01(rng); };
  GaussianSet set;
  for (std::size_t i = 0; i < count; ++i) {
    Vec4 q(standard_normal(rng), standard_normal(rng), standard_normal(rng), standard_normal(rng));
    set.push_back(Vec3(u(-extent, extent), u(-extent, extent), u(-extent, extent)),
                  Vec3(u(scale_lo, scale_hi), u(scale_lo, scale_hi), u(scale_lo, scale_hi)), q.normalized(),
                  u(0.05, 0.95), Vec3(u(0, 1), u(0, 1), u(0, 1)));
  }
  return set;
}

// Few large Gaussians at clearly separated depths along the viewing axis of
// a camera on the +x axis, so a 1e-3 step never reorders them.
inline GaussianSet separated_scene(std::uint64_t seed, std::size_t count = 4) {
  Rng rng(seed);
  auto u = [&](Real lo, Real hi) { return lo + (hi - lo) * uniform01(rng); };
  GaussianSet set;
  for (std::size_t i = 0; i < count; ++i) {
    const Real depth_offset = -0.6 + 1.2 * static_cast<Real>(i) / std::max<std::size_t>(count - 1, 1);
    Vec4 q(standard_normal(rng), standard_normal(rng), standard_normal(rng), standard_normal(rng));
    set.push_back(Vec3(depth_offset, u(-0.25, 0.25), u(-0.25, 0.25)), Vec3(u(0.06, 0.14), u(0.06, 0.14), u(0.06, 0.14)),
                  q.normalized() * u(0.7, 1.4), u(0.3, 0.8), Vec3(u(0.1, 0.9), u(0.1, 0.9), u(0.1, 0.9)));
  }
  return set;
}

struct FieldErrors {
  Real center = 0, scale = 0, rotation = 0, opacity = 0, color = 0;
  Real max() const { return std::max({center, scale, rotation, opacity, color}); }
};

// Relative error (norm-wise per field) between analytic renderer gradients
// and central differences of a fixed random image+alpha functional.
inline FieldErrors renderer_gradient_errors(const GaussianSet& set, const Camera& cam, std::uint64_t seed,
                                            Real step = 1e-3) {
  const std::size_t n = set.size();
  auto records = ad::Var::parameter({n, GaussianSet::kStride}, set.data);
  const auto w = probe_weights(cam.resolution.pixels() * 4, seed);
  ad::backward(weighted_sum(render(records, cam), w));
  const std::vector<Real> analytic(records.grad().begin(), records.grad().end());
  GaussianSet probe = set;
  auto eval = [&] {
    const auto out = render(probe, cam);
    Real s = 0;
    for (std::size_t p = 0; p < cam.resolution.pixels(); ++p) {
      for (int c = 0; c < 3; ++c) s += w[p * 4 + c] * out.image[p * 3 + c];
      s += w[p * 4 + 3] * out.alpha[p];
    }
    return s;
  };
  const auto numeric = numeric_gradient(probe.data, eval, step);
  auto field = [&](std::size_t offset, std::size_t width) {
    std::vector<Real> a, b;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < width; ++k) {
        a.push_back(analytic[i * GaussianSet::kStride + offset + k]);
        b.push_back(numeric[i * GaussianSet::kStride + offset + k]);
      }
    return relative_error(a, b);
  };
  return {field(GaussianSet::kCenter, 3), field(GaussianSet::kScale, 3), field(GaussianSet::kRotation, 4),
          field(GaussianSet::kOpacity, 1), field(GaussianSet::kColor, 3)};
}

inline Real max_abs_difference(const RenderOutput& a, const RenderOutput& b) {
  Real m = 0;
  for (std::size_t i = 0; i < a.image.size(); ++i) m = std::max(m, std::abs(a.image[i] - b.image[i]));
  for (std::size_t i = 0; i < a.alpha.size(); ++i) m = std::max(m, std::abs(a.alpha[i] - b.alpha[i]));
  return m;
}

}  // namespace novelgs::testing
