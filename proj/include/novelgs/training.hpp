#pragma once

// Rendering losses, the perceptual plugin boundary, AdamW, view batches and
// the train step / staged training loop.

#include "novelgs/autograd.hpp"
#include "novelgs/data.hpp"
#include "novelgs/denoiser.hpp"
#include "novelgs/diffusion.hpp"
#include "novelgs/gaussians.hpp"
#include "novelgs/geometry.hpp"
#include "novelgs/image.hpp"
#include "novelgs/nn.hpp"
#include "novelgs/renderer.hpp"

#include <dlfcn.h>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace novelgs {

// ---------------------------------------------------------------------------
// Perceptual distance plugin

class PerceptualBackend {
 public:
  virtual ~PerceptualBackend() = default;
  // Distance between two H*W*3 images in [0,1]; when grad is non-empty it
  // receives d(distance)/d(pred).
  virtual Real distance(std::span<const Real> pred, std::span<const Real> target, Resolution res,
                        std::span<Real> grad) const = 0;
};

// Shared-library backend exporting
//   double novelgs_perceptual_distance(const double* pred, const double* target,
//                                      int height, int width, double* grad_or_null);
class PluginPerceptualBackend : public PerceptualBackend {
 public:
  using Fn = double (*)(const double*, const double*, int, int, double*);

  explicit PluginPerceptualBackend(const std::string& path) {
    handle_ = dlopen(path.c_str(), RTLD_NOW | RTLD_LOCAL);
    if (!handle_) throw std::runtime_error("cannot load perceptual plugin " + path + ": " + dlerror());
    fn_ = reinterpret_cast<Fn>(dlsym(handle_, "novelgs_perceptual_distance"));
    if (!fn_) {
      dlclose(handle_);
      throw std::runtime_error("perceptual plugin " + path + " lacks novelgs_perceptual_distance");
    }
  }
  ~PluginPerceptualBackend() override {
    if (handle_) dlclose(handle_);
  }
  PluginPerceptualBackend(const PluginPerceptualBackend&) = delete;
  PluginPerceptualBackend& operator=(const PluginPerceptualBackend&) = delete;

  Real distance(std::span<const Real> pred, std::span<const Real> target, Resolution res,
                std::span<Real> grad) const override {
    return fn_(pred.data(), target.data(), res.height, res.width, grad.empty() ? nullptr : grad.data());
  }

 private:
  void* handle_ = nullptr;
  Fn fn_ = nullptr;
};

inline constexpr const char* kPerceptualPluginEnv = "NOVELGS_PERCEPTUAL_PLUGIN";

// Returns nullptr when the environment variable is unset or empty.
inline std::shared_ptr<PerceptualBackend> perceptual_backend_from_env() {
  const char* path = std::getenv(kPerceptualPluginEnv);
  if (!path || !*path) return nullptr;
  return std::make_shared<PluginPerceptualBackend>(path);
}

// ---------------------------------------------------------------------------
// Losses

struct LossOptions {
  Real lambda = 1.0;  // perceptual weight
  const PerceptualBackend* perceptual = nullptr;
  std::function<void(const std::string&)> warn = [](const std::string& msg) { std::cerr << "warning: " << msg << "\n"; };
  // Shared by copies, so a training run warns about a missing backend once.
  std::shared_ptr<bool> warned = std::make_shared<bool>(false);
};

namespace detail {

inline void require_same(std::size_t a, std::size_t b, const char* op) {
  if (a != b)
    throw std::invalid_argument(std::string(op) + ": shape mismatch (" + std::to_string(a) + " vs " +
                                std::to_string(b) + " values)");
}

inline bool perceptual_active(const LossOptions& opt) {
  if (opt.lambda == 0.0) return false;
  if (opt.perceptual) return true;
  if (opt.warned && !*opt.warned && opt.warn) {
    opt.warn("perceptual backend absent; image loss uses lambda = 0");
    *opt.warned = true;
  }
  return false;
}

inline Real mean_squared(std::span<const Real> a, std::span<const Real> b) {
  Real s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return a.empty() ? 0.0 : s / static_cast<Real>(a.size());
}

}  // namespace detail

inline Real loss_image(const Image& pred, const Image& target, const LossOptions& opt = {}) {
  if (pred.resolution != target.resolution) throw std::invalid_argument("loss_image: shape mismatch");
  detail::require_same(pred.rgb.size(), target.rgb.size(), "loss_image");
  Real loss = detail::mean_squared(pred.rgb, target.rgb);
  if (detail::perceptual_active(opt)) loss += opt.lambda * opt.perceptual->distance(pred.rgb, target.rgb, pred.resolution, {});
  return loss;
}

inline Real loss_mask(const Mask& pred_alpha, const Mask& target) {
  if (pred_alpha.resolution != target.resolution) throw std::invalid_argument("loss_mask: shape mismatch");
  detail::require_same(pred_alpha.values.size(), target.values.size(), "loss_mask");
  return detail::mean_squared(pred_alpha.values, target.values);
}

// Differentiable forms: `rgb` is [H*W, 3], `alpha` is [H*W, 1].
inline ad::Var loss_image(const ad::Var& rgb, const Image& target, const LossOptions& opt = {}) {
  detail::require_same(rgb.size(), target.rgb.size(), "loss_image");
  ad::Var loss = ad::mse(rgb, target.rgb);
  if (!detail::perceptual_active(opt)) return loss;
  auto grad = std::make_shared<std::vector<Real>>(rgb.size());
  const Real d = opt.perceptual->distance(rgb.value(), target.rgb, target.resolution, *grad);
  const Real lambda = opt.lambda;
  auto term = ad::make_op({1, 1}, {lambda * d}, {rgb}, [grad, lambda](ad::Node& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * lambda * (*grad)[i];
  });
  return ad::add_scalars({loss, term});
}

inline ad::Var loss_mask(const ad::Var& alpha, const Mask& target) {
  detail::require_same(alpha.size(), target.values.size(), "loss_mask");
  return ad::mse(alpha, target.values);
}

struct LossBreakdown {
  Real total = 0;
  Real image = 0;  // mean over views
  Real mask = 0;
};

// (1/T) * sum_i (loss_image_i + loss_mask_i) over the supervised views.
inline LossBreakdown loss_total(const std::vector<Image>& renders, const std::vector<Mask>& alphas,
                                const std::vector<Image>& targets, const std::vector<Mask>& masks,
                                const LossOptions& opt = {}) {
  if (renders.empty()) throw std::invalid_argument("loss_total: empty supervision set");
  if (renders.size() != alphas.size() || renders.size() != targets.size() || renders.size() != masks.size())
    throw std::invalid_argument("loss_total: view counts differ");
  LossBreakdown out;
  for (std::size_t v = 0; v < renders.size(); ++v) {
    out.image += loss_image(renders[v], targets[v], opt);
    out.mask += loss_mask(alphas[v], masks[v]);
  }
  const Real n = static_cast<Real>(renders.size());
  out.image /= n;
  out.mask /= n;
  out.total = out.image + out.mask;
  return out;
}

inline Real psnr_from_mse(Real mse, Real cap = 99.0) {
  if (mse <= 0.0) return cap;
  return std::min(cap, -10.0 * std::log10(mse));
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamWConfig {
  Real beta1 = 0.9;
  Real beta2 = 0.95;
  Real epsilon = 1e-8;
  Real weight_decay = 0.05;
};

// Weight matrices decay; biases, embeddings and registers do not.
inline bool decays(const std::string& name) {
  const auto dot = name.rfind('.');
  const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
  return leaf.rfind("weight", 0) == 0;
}

class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  void step(ParameterSet& params, Real lr) {
    ++step_;
    const Real bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<Real>(step_));
    const Real bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<Real>(step_));
    for (auto& [name, var] : params.entries()) {
      auto& st = state_[name];
      const std::size_t n = var.size();
      if (st.m.size() != n) {
        st.m.assign(n, 0.0);
        st.v.assign(n, 0.0);
      }
      auto value = var.mutable_value();
      const auto grad = var.grad();
      const Real decay = decays(name) ? cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const Real g = grad.empty() ? 0.0 : grad[i];
        st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
        st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
        value[i] -= lr * decay * value[i];
        value[i] -= lr * (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + cfg_.epsilon);
      }
    }
  }

  struct Moments {
    std::vector<Real> m, v;
  };

  const AdamWConfig& config() const { return cfg_; }
  long long step_count() const { return step_; }
  void set_step_count(long long s) { step_ = s; }
  std::map<std::string, Moments>& state() { return state_; }
  const std::map<std::string, Moments>& state() const { return state_; }
  // Moments are tied to parameter shapes; drop those that no longer match.
  void prune(const ParameterSet& params) {
    for (const auto& [name, var] : params.entries()) {
      auto it = state_.find(name);
      if (it != state_.end() && it->second.m.size() != var.size()) state_.erase(it);
    }
  }

 private:
  AdamWConfig cfg_;
  long long step_ = 0;
  std::map<std::string, Moments> state_;
};

inline Real global_grad_norm(const ParameterSet& params) {
  Real s = 0;
  for (const auto& [_, v] : params.entries())
    for (Real g : v.grad()) s += g * g;
  return std::sqrt(s);
}

inline void scale_grads(ParameterSet& params, Real factor) {
  for (auto& [_, v] : params.entries()) {
    auto* n = v.node();
    for (auto& g : n->grad) g *= factor;
  }
}

// ---------------------------------------------------------------------------
// Configuration

struct StageConfig {
  Resolution resolution{32, 32};
  int steps = 2000;
  Real learning_rate = 4e-4;
  Real min_learning_rate = 0.0;
  int warmup_steps = 0;
  int decay_start = 3000;  // cosine annealing from here to `steps`
};

// Linear warmup, constant, then cosine decay to the floor at the stage end.
inline Real learning_rate_at(const StageConfig& s, int step) {
  if (s.warmup_steps > 0 && step < s.warmup_steps)
    return s.learning_rate * static_cast<Real>(step + 1) / static_cast<Real>(s.warmup_steps);
  if (step < s.decay_start || s.steps <= s.decay_start) return s.learning_rate;
  const Real frac = std::min(1.0, static_cast<Real>(step - s.decay_start) / static_cast<Real>(s.steps - s.decay_start));
  return s.min_learning_rate + 0.5 * (s.learning_rate - s.min_learning_rate) * (1.0 + std::cos(std::numbers::pi * frac));
}

struct TrainConfig {
  std::size_t clean_count = 4;
  std::size_t noisy_count = 1;
  std::size_t extra_supervision_count = 3;
  bool supervise_clean = false;
  std::vector<StageConfig> stages{StageConfig{}};
  AdamWConfig optimizer;
  Real grad_clip = 1.0;  // global-norm clip, 0 disables
  Real lambda = 1.0;
  std::size_t batch_size = 1;
  std::size_t grad_accumulation = 1;
  std::uint64_t seed = 0;
  int log_interval = 10;
  int checkpoint_interval = 0;
  ActivationConfig activation;
  RenderConfig render;

  void validate(std::size_t patch_size) const {
    if (clean_count < 1) throw std::invalid_argument("TrainConfig: clean_count must be >= 1");
    if (noisy_count + extra_supervision_count + (supervise_clean ? clean_count : 0) == 0)
      throw std::invalid_argument("TrainConfig: empty supervision set");
    if (batch_size < 1 || grad_accumulation < 1)
      throw std::invalid_argument("TrainConfig: batch_size and grad_accumulation must be >= 1");
    if (stages.empty()) throw std::invalid_argument("TrainConfig: no stages");
    for (const auto& s : stages) {
      check_patch_divisible(s.resolution, patch_size);
      if (s.steps < 0) throw std::invalid_argument("TrainConfig: negative step count");
    }
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.stages)
    stages.push_back({{"resolution", {s.resolution.height, s.resolution.width}},
                      {"steps", s.steps},
                      {"learning_rate", s.learning_rate},
                      {"min_learning_rate", s.min_learning_rate},
                      {"warmup_steps", s.warmup_steps},
                      {"decay_start", s.decay_start}});
  return {{"clean_count", c.clean_count},
          {"noisy_count", c.noisy_count},
          {"extra_supervision_count", c.extra_supervision_count},
          {"supervise_clean", c.supervise_clean},
          {"stages", stages},
          {"beta1", c.optimizer.beta1},
          {"beta2", c.optimizer.beta2},
          {"epsilon", c.optimizer.epsilon},
          {"weight_decay", c.optimizer.weight_decay},
          {"grad_clip", c.grad_clip},
          {"lambda", c.lambda},
          {"batch_size", c.batch_size},
          {"grad_accumulation", c.grad_accumulation},
          {"seed", c.seed},
          {"log_interval", c.log_interval},
          {"checkpoint_interval", c.checkpoint_interval}};
}

// Missing keys keep their defaults.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("clean_count", c.clean_count);
  get("noisy_count", c.noisy_count);
  get("extra_supervision_count", c.extra_supervision_count);
  get("supervise_clean", c.supervise_clean);
  get("beta1", c.optimizer.beta1);
  get("beta2", c.optimizer.beta2);
  get("epsilon", c.optimizer.epsilon);
  get("weight_decay", c.optimizer.weight_decay);
  get("grad_clip", c.grad_clip);
  get("lambda", c.lambda);
  get("batch_size", c.batch_size);
  get("grad_accumulation", c.grad_accumulation);
  get("seed", c.seed);
  get("log_interval", c.log_interval);
  get("checkpoint_interval", c.checkpoint_interval);
  if (j.contains("stages")) {
    c.stages.clear();
    for (const auto& s : j.at("stages")) {
      StageConfig st;
      if (s.contains("resolution")) st.resolution = {s.at("resolution").at(0).get<int>(), s.at("resolution").at(1).get<int>()};
      if (s.contains("steps")) st.steps = s.at("steps").get<int>();
      if (s.contains("learning_rate")) st.learning_rate = s.at("learning_rate").get<Real>();
      if (s.contains("min_learning_rate")) st.min_learning_rate = s.at("min_learning_rate").get<Real>();
      if (s.contains("warmup_steps")) st.warmup_steps = s.at("warmup_steps").get<int>();
      if (s.contains("decay_start")) st.decay_start = s.at("decay_start").get<int>();
      c.stages.push_back(st);
    }
  }
  return c;
}

// Desk-scale two-stage schedule: 32^2 at 4e-4, then 64^2 at 4e-5 warm-started.
inline std::vector<StageConfig> two_stage_schedule(int stage1_steps, int stage2_steps) {
  StageConfig a{{32, 32}, stage1_steps, 4e-4, 0.0, 0, 3000};
  StageConfig b{{64, 64}, stage2_steps, 4e-5, 0.0, 0, 3000};
  return {a, b};
}

// ---------------------------------------------------------------------------
// Batches

enum class ViewRole { kClean, kNoisy, kSupervision };

struct ViewBatch {
  std::vector<const Image*> images;
  std::vector<const Mask*> masks;
  std::vector<Camera> cameras;
  std::vector<ViewRole> roles;
  int timestep = -1;  // < 0: drawn uniformly by train_step

  std::vector<std::size_t> indices(ViewRole role) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < roles.size(); ++i)
      if (roles[i] == role) out.push_back(i);
    return out;
  }

  void validate() const {
    if (images.size() != roles.size() || masks.size() != roles.size() || cameras.size() != roles.size())
      throw std::invalid_argument("ViewBatch: image, mask, camera and role counts differ");
    if (indices(ViewRole::kClean).empty()) throw std::invalid_argument("ViewBatch: no clean view");
    for (std::size_t i = 0; i < roles.size(); ++i) {
      if (!images[i] || !masks[i]) throw std::invalid_argument("ViewBatch: null view");
      if (images[i]->resolution != cameras[i].resolution || masks[i]->resolution != cameras[i].resolution)
        throw std::invalid_argument("ViewBatch: view " + std::to_string(i) + " resolution mismatch");
      for (Real m : masks[i]->values)
        if (!(m >= 0.0 && m <= 1.0)) throw std::invalid_argument("ViewBatch: mask values must lie in [0,1]");
    }
  }
};

inline ViewBatch make_view_batch(const SceneSample& sample, const ViewSplit& split, int timestep = -1) {
  ViewBatch b;
  auto add = [&](const std::vector<std::size_t>& idx, ViewRole role) {
    for (auto i : idx) {
      if (i >= sample.view_count()) throw std::invalid_argument("make_view_batch: view index out of range");
      b.images.push_back(&sample.images[i]);
      b.masks.push_back(&sample.masks[i]);
      b.cameras.push_back(sample.cameras[i]);
      b.roles.push_back(role);
    }
  };
  add(split.clean, ViewRole::kClean);
  add(split.noisy, ViewRole::kNoisy);
  add(split.supervision, ViewRole::kSupervision);
  b.timestep = timestep;
  return b;
}

struct StepOptions {
  LossOptions loss;
  bool supervise_clean = false;
  ActivationConfig activation;
  RenderConfig render;
};

struct BatchLoss {
  ad::Var total;
  Real image = 0;
  Real mask = 0;
  Real psnr = 0;  // mean over supervised views
  int timestep = 0;
};

// Builds the differentiable loss for one batch: normalize the cameras to the
// first clean view, noise the noisy views to `t`, predict, render every
// supervised camera and average the per-view losses.
inline BatchLoss batch_loss(const Denoiser& model, const ViewBatch& batch, const DiffusionSchedule& schedule, int t,
                            Rng& noise_rng, const StepOptions& opt) {
  batch.validate();
  if (t < 0 || t >= schedule.step_count) throw std::out_of_range("batch_loss: timestep out of range");
  const auto clean = batch.indices(ViewRole::kClean);
  const auto noisy = batch.indices(ViewRole::kNoisy);
  std::vector<std::size_t> supervised = noisy;
  for (auto i : batch.indices(ViewRole::kSupervision)) supervised.push_back(i);
  if (opt.supervise_clean) supervised.insert(supervised.end(), clean.begin(), clean.end());
  if (supervised.empty()) throw std::invalid_argument("batch_loss: empty supervision set");

  const auto frame = normalize_camera_frame(batch.cameras, clean.front());
  std::vector<Image> noised;
  noised.reserve(noisy.size());
  for (auto i : noisy) {
    const auto& img = *batch.images[i];
    const auto eps = normal_noise(img.rgb.size(), noise_rng);
    noised.emplace_back(img.resolution, to_unit(q_sample(to_signed(img.rgb), schedule, t, eps)));
  }
  std::vector<const Image*> views;
  std::vector<RayMap> rays;
  for (auto i : clean) {
    views.push_back(batch.images[i]);
    rays.push_back(ray_map(frame.cameras[i]));
  }
  for (std::size_t k = 0; k < noisy.size(); ++k) {
    views.push_back(&noised[k]);
    rays.push_back(ray_map(frame.cameras[noisy[k]]));
  }

  const auto gaussians = activate_attributes(model.forward_rays(views, rays, t), rays, opt.activation);
  std::vector<ad::Var> terms;
  BatchLoss out;
  out.timestep = t;
  for (auto i : supervised) {
    const auto rendered = render(gaussians, frame.cameras[i], opt.render);
    const auto rgb = ad::slice_cols(rendered, 0, 3);
    const auto alpha = ad::slice_cols(rendered, 3, 1);
    const auto li = loss_image(rgb, *batch.images[i], opt.loss);
    const auto lm = loss_mask(alpha, *batch.masks[i]);
    out.image += li.item();
    out.mask += lm.item();
    out.psnr += psnr_from_mse(detail::mean_squared(rgb.value(), batch.images[i]->rgb));
    terms.push_back(li);
    terms.push_back(lm);
  }
  const Real n = static_cast<Real>(supervised.size());
  out.total = ad::scale(ad::add_scalars(terms), 1.0 / n);
  out.image /= n;
  out.mask /= n;
  out.psnr /= n;
  return out;
}

struct StepMetrics {
  long long step = 0;
  Real loss = 0;
  Real loss_img = 0;
  Real loss_mask = 0;
  Real psnr = 0;
  Real learning_rate = 0;
  Real grad_norm = 0;
  bool aborted = false;
  std::vector<int> timesteps;
};

inline nlohmann::json to_json(const StepMetrics& m) {
  return {{"step", m.step},
          {"loss", m.loss},
          {"loss_img", m.loss_img},
          {"loss_mask", m.loss_mask},
          {"psnr", m.psnr},
          {"lr", m.learning_rate},
          {"grad_norm", m.grad_norm},
          {"aborted", m.aborted}};
}

// One optimizer update accumulated over every batch in `batches` (micro-batches
// of one update). Batches with timestep < 0 draw t uniformly from [0, T).
// A non-finite loss leaves parameters and optimizer state untouched.
inline StepMetrics train_step(Denoiser& model, std::span<const ViewBatch> batches, const DiffusionSchedule& schedule,
                              AdamW& optimizer, Real learning_rate, Real grad_clip, const StepOptions& opt, Rng& rng) {
  if (batches.empty()) throw std::invalid_argument("train_step: no batches");
  auto& params = model.parameters();
  params.zero_grad();
  StepMetrics m;
  m.learning_rate = learning_rate;
  const Real weight = 1.0 / static_cast<Real>(batches.size());
  for (const auto& batch : batches) {
    const int t = batch.timestep >= 0 ? batch.timestep : static_cast<int>(uniform_index(rng, schedule.step_count));
    auto loss = batch_loss(model, batch, schedule, t, rng, opt);
    m.timesteps.push_back(t);
    const Real value = loss.total.item();
    if (!std::isfinite(value)) {
      params.zero_grad();
      m.aborted = true;
      m.loss = value;
      return m;
    }
    ad::backward(loss.total, weight);
    m.loss += weight * value;
    m.loss_img += weight * loss.image;
    m.loss_mask += weight * loss.mask;
    m.psnr += weight * loss.psnr;
  }
  m.grad_norm = global_grad_norm(params);
  if (!std::isfinite(m.grad_norm)) {
    params.zero_grad();
    m.aborted = true;
    return m;
  }
  if (grad_clip > 0.0 && m.grad_norm > grad_clip) scale_grads(params, grad_clip / m.grad_norm);
  optimizer.step(params, learning_rate);
  m.step = optimizer.step_count();
  return m;
}

// ---------------------------------------------------------------------------
// Staged training loop

class Trainer {
 public:
  using StepCallback = std::function<void(const StepMetrics&, std::size_t stage, int stage_step)>;

  Trainer(Denoiser& model, DiffusionSchedule schedule, TrainConfig config,
          std::shared_ptr<PerceptualBackend> perceptual = nullptr)
      : model_(model),
        schedule_(std::move(schedule)),
        config_(std::move(config)),
        perceptual_(std::move(perceptual)),
        optimizer_(config_.optimizer),
        rng_(config_.seed) {
    config_.validate(model_.config().patch_size);
    options_.loss.lambda = config_.lambda;
    options_.loss.perceptual = perceptual_.get();
    options_.supervise_clean = config_.supervise_clean;
    options_.activation = config_.activation;
    options_.render = config_.render;
  }

  // Draws one batch: a random scene, a random disjoint role split, t from train_step.
  ViewBatch draw_batch(const std::vector<SceneSample>& scenes) {
    if (scenes.empty()) throw std::invalid_argument("Trainer: no training scenes");
    const auto& scene = scenes[uniform_index(rng_, scenes.size())];
    const auto split = sample_view_split(scene, config_.clean_count, config_.noisy_count,
                                         config_.extra_supervision_count, rng_());
    return make_view_batch(scene, split);
  }

  StepMetrics step(const std::vector<SceneSample>& scenes, Real learning_rate) {
    std::vector<ViewBatch> batches;
    for (std::size_t k = 0; k < config_.batch_size * config_.grad_accumulation; ++k)
      batches.push_back(draw_batch(scenes));
    return train_step(model_, batches, schedule_, optimizer_, learning_rate, config_.grad_clip, options_, rng_);
  }

  // Runs one stage on scenes rendered at that stage's resolution.
  void run_stage(std::size_t stage, const std::vector<SceneSample>& scenes, const StepCallback& on_step = {}) {
    const auto& sc = config_.stages.at(stage);
    for (const auto& s : scenes)
      for (const auto& c : s.cameras)
        if (c.resolution != sc.resolution)
          throw std::invalid_argument("Trainer: scene " + s.id + " does not match the stage resolution");
    model_.set_resolution(sc.resolution);
    optimizer_.prune(model_.parameters());
    for (int i = 0; i < sc.steps; ++i) {
      const auto m = step(scenes, learning_rate_at(sc, i));
      if (on_step) on_step(m, stage, i);
    }
  }

  Denoiser& model() { return model_; }
  const DiffusionSchedule& schedule() const { return schedule_; }
  const TrainConfig& config() const { return config_; }
  AdamW& optimizer() { return optimizer_; }
  const StepOptions& options() const { return options_; }
  Rng& rng() { return rng_; }

 private:
  Denoiser& model_;
  DiffusionSchedule schedule_;
  TrainConfig config_;
  std::shared_ptr<PerceptualBackend> perceptual_;
  AdamW optimizer_;
  StepOptions options_;
  Rng rng_;
};

// Mean supervised-view PSNR without updating parameters, using fixed splits
// and timesteps drawn from `seed`.
inline Real evaluate_supervision_psnr(const Denoiser& model, const std::vector<SceneSample>& scenes,
                                      const DiffusionSchedule& schedule, const TrainConfig& cfg, int draws_per_scene,
                                      std::uint64_t seed, const StepOptions& opt = {}) {
  Rng rng(seed);
  Real total = 0;
  int count = 0;
  for (const auto& scene : scenes) {
    for (int d = 0; d < draws_per_scene; ++d) {
      const auto split = sample_view_split(scene, cfg.clean_count, cfg.noisy_count, cfg.extra_supervision_count, rng());
      const auto batch = make_view_batch(scene, split);
      const int t = static_cast<int>(uniform_index(rng, schedule.step_count));
      total += batch_loss(model, batch, schedule, t, rng, opt).psnr;
      ++count;
    }
  }
  return count ? total / count : 0.0;
}

}  // namespace novelgs
