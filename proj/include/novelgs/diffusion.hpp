#pragma once

// Squared-cosine noise schedule, forward noising and the render-then-renoise
// sampler that turns noisy target views into a Gaussian set.

#include "novelgs/denoiser.hpp"
#include "novelgs/gaussians.hpp"
#include "novelgs/geometry.hpp"
#include "novelgs/image.hpp"
#include "novelgs/nn.hpp"
#include "novelgs/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace novelgs {

struct DiffusionSchedule {
  int step_count = 0;
  std::vector<Real> alpha_bar;  // cumulative signal fraction per step
  std::vector<Real> betas;
  std::string kind = "squaredcos_cap_v2";
  // Linear-schedule endpoints carried as metadata only; the squared-cosine
  // law defines the betas.
  Real beta_start = 0.0001;
  Real beta_end = 0.02;
};

inline constexpr Real kCosineOffset = 0.008;
inline constexpr Real kMaxBeta = 0.999;

inline Real cosine_alpha_bar(Real fraction) {
  const Real c = std::cos((fraction + kCosineOffset) / (1.0 + kCosineOffset) * std::numbers::pi / 2.0);
  return c * c;
}

// alpha_bar(t) = cos^2(((t/T + s)/(1 + s)) * pi/2); beta_t = 1 - alpha_bar(t)/alpha_bar(t-1)
// (alpha_bar(-1) = 1) capped at 0.999. The stored alpha_bar is the running
// product of (1 - beta), identical to the cosine law wherever the cap is inactive.
inline DiffusionSchedule make_schedule(int step_count = 1000) {
  if (step_count < 1) throw std::invalid_argument("make_schedule: step_count must be >= 1");
  DiffusionSchedule s;
  s.step_count = step_count;
  s.betas.resize(step_count);
  s.alpha_bar.resize(step_count);
  Real prev = 1.0, product = 1.0;
  for (int t = 0; t < step_count; ++t) {
    const Real cur = cosine_alpha_bar(static_cast<Real>(t) / step_count);
    s.betas[t] = std::min(1.0 - cur / prev, kMaxBeta);
    product *= (1.0 - s.betas[t]);
    s.alpha_bar[t] = product;
    prev = cur;
  }
  return s;
}

// x_t = sqrt(abar) * x0 + sqrt(1 - abar) * noise
inline std::vector<Real> q_sample(std::span<const Real> x0, Real alpha_bar, std::span<const Real> noise) {
  if (x0.size() != noise.size()) throw std::invalid_argument("q_sample: noise shape differs from x0");
  const Real a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  std::vector<Real> out(x0.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * noise[i];
  return out;
}

inline std::vector<Real> q_sample(std::span<const Real> x0, const DiffusionSchedule& schedule, int t,
                                  std::span<const Real> noise) {
  if (t < 0 || t >= schedule.step_count) throw std::out_of_range("q_sample: timestep out of range");
  return q_sample(x0, schedule.alpha_bar[t], noise);
}

// [0,1] images <-> the [-1,1] range diffusion operates in.
inline std::vector<Real> to_signed(std::span<const Real> v) {
  std::vector<Real> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = 2.0 * v[i] - 1.0;
  return out;
}
inline std::vector<Real> to_unit(std::span<const Real> v) {
  std::vector<Real> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = 0.5 * (v[i] + 1.0);
  return out;
}

inline std::vector<Real> normal_noise(std::size_t n, Rng& rng) {
  std::vector<Real> out(n);
  for (auto& v : out) v = standard_normal(rng);
  return out;
}

// Uniformly strided timesteps from T-1 down to 0 (a single step uses T-1).
inline std::vector<int> inference_timesteps(int step_count, int inference_steps) {
  if (inference_steps < 1 || inference_steps > step_count)
    throw std::invalid_argument("inference_timesteps: steps must be in [1, " + std::to_string(step_count) + "]");
  if (inference_steps == 1) return {step_count - 1};
  std::vector<int> ts(inference_steps);
  for (int k = 0; k < inference_steps; ++k)
    ts[k] = static_cast<int>(std::lround(static_cast<Real>(step_count - 1) * (inference_steps - 1 - k) /
                                         (inference_steps - 1)));
  return ts;
}

struct SamplerOptions {
  int inference_steps = 50;
  std::uint64_t seed = 0;
  bool frozen_noise = false;  // reuse one noise draw per view for every re-noising step
  ActivationConfig activation;
  RenderConfig render;
};

struct SampleResult {
  GaussianSet gaussians;             // world frame
  GaussianSet normalized_gaussians;  // frame of the first clean camera
  std::vector<int> timesteps;
  Mat3 normalization = Mat3::Identity();
};

// `cameras` holds every camera of the scene (world frame); clean_images[i] is
// the view seen by cameras[clean_indices[i]]; noisy_indices name the target
// cameras to denoise.
inline SampleResult sample(const Denoiser& model, const DiffusionSchedule& schedule,
                           const std::vector<const Image*>& clean_images, const std::vector<std::size_t>& clean_indices,
                           const std::vector<Camera>& cameras, const std::vector<std::size_t>& noisy_indices,
                           const SamplerOptions& options = {}) {
  if (clean_images.empty()) throw std::invalid_argument("sample: at least one clean view is required");
  if (clean_images.size() != clean_indices.size())
    throw std::invalid_argument("sample: clean image and index counts differ");
  for (auto i : clean_indices)
    if (i >= cameras.size()) throw std::invalid_argument("sample: clean index out of range");
  for (auto i : noisy_indices)
    if (i >= cameras.size()) throw std::invalid_argument("sample: noisy index out of range");
  const Resolution res = model.config().resolution;
  for (const auto* img : clean_images)
    if (img->resolution != res) throw std::invalid_argument("sample: image resolution differs from the model's");
  for (const auto& c : cameras)
    if (c.resolution != res) throw std::invalid_argument("sample: camera resolution differs from the model's");

  const auto frame = normalize_camera_frame(cameras, clean_indices.front());
  std::vector<RayMap> rays;
  for (auto i : clean_indices) rays.push_back(ray_map(frame.cameras[i]));
  for (auto i : noisy_indices) rays.push_back(ray_map(frame.cameras[i]));

  Rng rng(options.seed);
  const std::size_t n = noisy_indices.size();
  const std::size_t len = res.pixels() * 3;
  std::vector<std::vector<Real>> noisy(n), frozen(n);
  for (std::size_t k = 0; k < n; ++k) {
    noisy[k] = normal_noise(len, rng);
    if (options.frozen_noise) frozen[k] = noisy[k];
  }

  SampleResult result;
  result.normalization = frame.rotation;
  result.timesteps = n == 0 ? std::vector<int>{0} : inference_timesteps(schedule.step_count, options.inference_steps);

  GaussianSet current;
  for (std::size_t step = 0; step < result.timesteps.size(); ++step) {
    const int t = result.timesteps[step];
    std::vector<Image> noisy_views;
    noisy_views.reserve(n);
    for (std::size_t k = 0; k < n; ++k) noisy_views.emplace_back(res, to_unit(noisy[k]));
    std::vector<const Image*> views(clean_images);
    for (const auto& v : noisy_views) views.push_back(&v);

    const auto raw = model.forward_rays(views, rays, t);
    current = to_gaussian_set(activate_attributes(raw, rays, options.activation));
    if (step + 1 == result.timesteps.size()) break;

    const int t_next = result.timesteps[step + 1];
    for (std::size_t k = 0; k < n; ++k) {
      const auto estimate = render(current, frame.cameras[noisy_indices[k]], options.render);
      const auto x0 = to_signed(estimate.image);
      const auto eps = options.frozen_noise ? frozen[k] : normal_noise(len, rng);
      noisy[k] = q_sample(x0, schedule, t_next, eps);
    }
  }
  result.normalized_gaussians = current;
  result.gaussians = transform_to_world(current, frame.rotation, frame.scale);
  return result;
}

}  // namespace novelgs
