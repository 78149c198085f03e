#pragma once

// Image metrics and the orbit evaluation harness.

#include "novelgs/data.hpp"
#include "novelgs/denoiser.hpp"
#include "novelgs/diffusion.hpp"
#include "novelgs/gaussians.hpp"
#include "novelgs/geometry.hpp"
#include "novelgs/image.hpp"
#include "novelgs/renderer.hpp"
#include "novelgs/training.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <memory>
#include <optional>
#include <regex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace novelgs {

inline constexpr Real kPsnrCap = 99.0;

inline Real psnr(const Image& pred, const Image& target, Real cap = kPsnrCap) {
  if (pred.resolution != target.resolution || pred.rgb.size() != target.rgb.size())
    throw std::invalid_argument("psnr: shape mismatch");
  return psnr_from_mse(detail::mean_squared(pred.rgb, target.rgb), cap);
}

inline std::vector<Real> to_grayscale(const Image& img) {
  std::vector<Real> g(img.resolution.pixels());
  for (std::size_t p = 0; p < g.size(); ++p)
    g[p] = 0.299 * img.rgb[3 * p] + 0.587 * img.rgb[3 * p + 1] + 0.114 * img.rgb[3 * p + 2];
  return g;
}

struct SsimOptions {
  int window = 11;
  Real sigma = 1.5;
  Real k1 = 0.01;
  Real k2 = 0.03;
  Real data_range = 1.0;
};

// Mean SSIM over all fully contained Gaussian windows of the luma channel.
inline Real ssim(const Image& pred, const Image& target, const SsimOptions& opt = {}) {
  if (pred.resolution != target.resolution || pred.rgb.size() != target.rgb.size())
    throw std::invalid_argument("ssim: shape mismatch");
  const int h = pred.resolution.height, w = pred.resolution.width, k = opt.window;
  if (h < k || w < k)
    throw std::invalid_argument("ssim: image " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than the " +
                                std::to_string(k) + "-pixel window");
  std::vector<Real> kernel(k);
  Real ksum = 0;
  for (int i = 0; i < k; ++i) {
    const Real d = i - (k - 1) / 2.0;
    kernel[i] = std::exp(-d * d / (2 * opt.sigma * opt.sigma));
    ksum += kernel[i];
  }
  for (auto& v : kernel) v /= ksum;

  const auto x = to_grayscale(pred), y = to_grayscale(target);
  const Real c1 = std::pow(opt.k1 * opt.data_range, 2), c2 = std::pow(opt.k2 * opt.data_range, 2);
  Real total = 0;
  int count = 0;
  for (int r = 0; r + k <= h; ++r) {
    for (int c = 0; c + k <= w; ++c) {
      Real mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
          const Real wt = kernel[i] * kernel[j];
          const Real a = x[(r + i) * w + c + j], b = y[(r + i) * w + c + j];
          mx += wt * a;
          my += wt * b;
          sxx += wt * a * a;
          syy += wt * b * b;
          sxy += wt * a * b;
        }
      }
      const Real vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  }
  return total / count;
}

// ---------------------------------------------------------------------------
// Evaluation protocol

struct EvalProtocol {
  // Either explicit view indices or counts (converted by `resolve`).
  std::vector<std::size_t> clean_indices;
  std::vector<std::size_t> noisy_indices;
  std::optional<std::size_t> clean_count;
  std::optional<std::size_t> noisy_count;
  int inference_steps = 50;
  std::uint64_t seed = 0;

  bool by_count() const { return clean_count.has_value(); }

  // Count protocols pick views evenly spaced over the scene's index order;
  // the first `clean_count` are clean and the rest noisy.
  std::pair<std::vector<std::size_t>, std::vector<std::size_t>> resolve(std::size_t view_count) const {
    if (!by_count()) return {clean_indices, noisy_indices};
    const std::size_t m = *clean_count, n = noisy_count.value_or(0), total = m + n;
    if (total > view_count) return {{}, {}};
    std::vector<std::size_t> clean, noisy;
    for (std::size_t i = 0; i < total; ++i) {
      const auto idx = static_cast<std::size_t>(std::lround(static_cast<Real>(i) * view_count / total)) % view_count;
      (i < m ? clean : noisy).push_back(idx);
    }
    return {clean, noisy};
  }

  std::string name() const {
    if (by_count()) return "ncv" + std::to_string(*clean_count) + "nnv" + std::to_string(noisy_count.value_or(0));
    auto join = [](const std::vector<std::size_t>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    return "icv" + join(clean_indices) + "_inv" + join(noisy_indices);
  }
};

// Parses "ncv<m>nnv<n>" (counts) or "icv<i,j,...>_inv<k,...>" (indices).
inline EvalProtocol parse_protocol(const std::string& text) {
  static const std::regex counts(R"(ncv(\d+)nnv(\d+))");
  static const std::regex indices(R"(icv([\d,]+)_inv([\d,]*))");
  auto split = [](const std::string& s) {
    std::vector<std::size_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ','))
      if (!tok.empty()) out.push_back(std::stoul(tok));
    return out;
  };
  std::smatch m;
  EvalProtocol p;
  if (std::regex_match(text, m, counts)) {
    p.clean_count = std::stoul(m[1]);
    p.noisy_count = std::stoul(m[2]);
    if (*p.clean_count < 1) throw std::invalid_argument("protocol needs at least one clean view");
  } else if (std::regex_match(text, m, indices)) {
    p.clean_indices = split(m[1]);
    p.noisy_indices = split(m[2]);
    if (p.clean_indices.empty()) throw std::invalid_argument("protocol needs at least one clean view");
  } else {
    throw std::invalid_argument("unrecognized protocol '" + text + "' (expected ncv<m>nnv<n> or icv<i,..>_inv<k,..>)");
  }
  return p;
}

// Anything mapping posed input views to a world-frame Gaussian set.
class Reconstructor {
 public:
  virtual ~Reconstructor() = default;
  virtual GaussianSet reconstruct(const SceneSample& scene, const std::vector<std::size_t>& clean,
                                  const std::vector<std::size_t>& noisy, std::uint64_t seed) const = 0;
};

// Oracle upper bound: returns the scene's own ground truth.
class GroundTruthReconstructor : public Reconstructor {
 public:
  GaussianSet reconstruct(const SceneSample& scene, const std::vector<std::size_t>&, const std::vector<std::size_t>&,
                          std::uint64_t) const override {
    if (!scene.ground_truth) throw std::runtime_error("scene " + scene.id + " has no ground truth");
    return *scene.ground_truth;
  }
};

class DiffusionReconstructor : public Reconstructor {
 public:
  DiffusionReconstructor(const Denoiser& model, const DiffusionSchedule& schedule, SamplerOptions options)
      : model_(model), schedule_(schedule), options_(std::move(options)) {}

  GaussianSet reconstruct(const SceneSample& scene, const std::vector<std::size_t>& clean,
                          const std::vector<std::size_t>& noisy, std::uint64_t seed) const override {
    std::vector<const Image*> images;
    for (auto i : clean) images.push_back(&scene.images.at(i));
    auto opt = options_;
    opt.seed = seed;
    return sample(model_, schedule_, images, clean, scene.cameras, noisy, opt).gaussians;
  }

 private:
  const Denoiser& model_;
  const DiffusionSchedule& schedule_;
  SamplerOptions options_;
};

struct SceneScore {
  std::string id;
  bool skipped = false;
  std::string reason;
  Real psnr = 0;
  Real ssim = 0;
  std::optional<Real> lpips;
};

struct EvalReport {
  std::string protocol;
  std::optional<std::size_t> ncv, nnv;   // count protocols
  std::vector<std::size_t> icv, inv;     // index protocols
  int inference_steps = 0;
  std::uint64_t seed = 0;
  std::vector<SceneScore> scenes;
  Real psnr = 0;
  Real ssim = 0;
  std::optional<Real> lpips;
  std::size_t evaluated = 0;

  void aggregate() {
    psnr = ssim = 0;
    Real lp = 0;
    std::size_t nlp = 0;
    evaluated = 0;
    for (const auto& s : scenes) {
      if (s.skipped) continue;
      psnr += s.psnr;
      ssim += s.ssim;
      if (s.lpips) {
        lp += *s.lpips;
        ++nlp;
      }
      ++evaluated;
    }
    if (evaluated) {
      psnr /= static_cast<Real>(evaluated);
      ssim /= static_cast<Real>(evaluated);
    }
    lpips = nlp && nlp == evaluated ? std::optional<Real>(lp / static_cast<Real>(nlp)) : std::nullopt;
  }
};

struct EvalOptions {
  RenderConfig render{.weight_epsilon = 0.0};  // exact compositing for both sides
  const PerceptualBackend* lpips = nullptr;
  std::optional<Real> orbit_radius;  // defaults to the mean input-camera distance
};

inline EvalReport evaluate(const Reconstructor& model, const std::vector<SceneSample>& scenes,
                           const EvalProtocol& protocol, const EvalOptions& opt = {}) {
  EvalReport report;
  report.protocol = protocol.name();
  report.ncv = protocol.clean_count;
  report.nnv = protocol.by_count() ? std::optional<std::size_t>(protocol.noisy_count.value_or(0)) : std::nullopt;
  report.icv = protocol.clean_indices;
  report.inv = protocol.noisy_indices;
  report.inference_steps = protocol.inference_steps;
  report.seed = protocol.seed;

  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto& scene = scenes[s];
    SceneScore score;
    score.id = scene.id;
    const auto [clean, noisy] = protocol.resolve(scene.view_count());
    auto skip = [&](std::string why) {
      score.skipped = true;
      score.reason = std::move(why);
      report.scenes.push_back(score);
    };
    if (clean.empty()) {
      skip("not enough views for the protocol");
      continue;
    }
    if (std::any_of(clean.begin(), clean.end(), [&](auto i) { return i >= scene.view_count(); }) ||
        std::any_of(noisy.begin(), noisy.end(), [&](auto i) { return i >= scene.view_count(); })) {
      skip("missing views");
      continue;
    }
    if (!scene.ground_truth) {
      skip("no ground-truth Gaussians");
      continue;
    }
    const GaussianSet predicted = model.reconstruct(scene, clean, noisy, protocol.seed + s);

    Real radius = 0;
    for (const auto& c : scene.cameras) radius += c.center.norm();
    radius = opt.orbit_radius.value_or(radius / static_cast<Real>(scene.cameras.size()));
    const auto& ref = scene.cameras.front();
    const auto orbit = evaluation_orbit(radius, ref.resolution, ref.focal);
    Real lp = 0;
    for (const auto& cam : orbit) {
      const auto gt = render_reference(*scene.ground_truth, cam, opt.render);
      const auto pr = render(predicted, cam, opt.render);
      const Image a(cam.resolution, pr.image), b(cam.resolution, gt.image);
      score.psnr += psnr(a, b);
      score.ssim += ssim(a, b);
      if (opt.lpips) lp += opt.lpips->distance(a.rgb, b.rgb, cam.resolution, {});
    }
    const Real n = static_cast<Real>(orbit.size());
    score.psnr /= n;
    score.ssim /= n;
    if (opt.lpips) score.lpips = lp / n;
    report.scenes.push_back(score);
  }
  report.aggregate();
  return report;
}

namespace detail {
inline std::string join_indices(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}
inline std::string fixed(Real v, int digits) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(digits) << v;
  return o.str();
}
}  // namespace detail

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json scenes = nlohmann::json::array();
  for (const auto& s : r.scenes) {
    nlohmann::json j{{"id", s.id}, {"skipped", s.skipped}};
    if (s.skipped) {
      j["reason"] = s.reason;
    } else {
      j["psnr"] = s.psnr;
      j["ssim"] = s.ssim;
      j["lpips"] = s.lpips ? nlohmann::json(*s.lpips) : nlohmann::json(nullptr);
    }
    scenes.push_back(j);
  }
  nlohmann::json config{{"protocol", r.protocol}, {"inference_steps", r.inference_steps}, {"seed", r.seed}};
  if (r.ncv) {
    config["ncv"] = *r.ncv;
    config["nnv"] = r.nnv.value_or(0);
  } else {
    config["icv"] = r.icv;
    config["inv"] = r.inv;
  }
  return {{"config", config},
          {"scenes", scenes},
          {"aggregate",
           {{"psnr", r.psnr},
            {"ssim", r.ssim},
            {"lpips", r.lpips ? nlohmann::json(*r.lpips) : nlohmann::json(nullptr)},
            {"evaluated", r.evaluated}}}};
}

// Aligned table with one row per report: NCV/NNV (or ICV/INV), PSNR, SSIM, LPIPS.
inline std::string format_table(const std::vector<EvalReport>& reports) {
  const bool counts = !reports.empty() && reports.front().ncv.has_value();
  std::vector<std::vector<std::string>> rows;
  rows.push_back({counts ? "NCV" : "ICV", counts ? "NNV" : "INV", "PSNR", "SSIM", "LPIPS"});
  for (const auto& r : reports) {
    std::string a = r.ncv ? std::to_string(*r.ncv) : detail::join_indices(r.icv);
    std::string b = r.ncv ? std::to_string(r.nnv.value_or(0)) : (r.inv.empty() ? "-" : detail::join_indices(r.inv));
    rows.push_back({a, b, detail::fixed(r.psnr, 3), detail::fixed(r.ssim, 3),
                    r.lpips ? detail::fixed(*r.lpips, 3) : "n/a"});
  }
  std::vector<std::size_t> width(5, 0);
  for (const auto& row : rows)
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  std::ostringstream out;
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c) out << " | ";
      out << std::setw(static_cast<int>(width[c])) << (c < 2 ? std::left : std::right) << row[c];
    }
    out << "\n";
  }
  return out.str();
}

inline std::string format_table(const EvalReport& report) { return format_table(std::vector<EvalReport>{report}); }

}  // namespace novelgs
