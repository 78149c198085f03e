#pragma once

// Subcommands behind the `novelgs` executable. `run_cli` returns the process
// exit status: 0 success, 1 runtime failure, 2 usage error.

#include "novelgs/checkpoint.hpp"
#include "novelgs/data.hpp"
#include "novelgs/denoiser.hpp"
#include "novelgs/diffusion.hpp"
#include "novelgs/gaussians.hpp"
#include "novelgs/geometry.hpp"
#include "novelgs/image.hpp"
#include "novelgs/metrics.hpp"
#include "novelgs/renderer.hpp"
#include "novelgs/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

namespace novelgs {

inline constexpr const char* kCodeVersion = "0.1.0";
inline constexpr const char* kRunManifestName = "run_manifest.json";

// Appends one run record to <dir>/run_manifest.json (created on first use).
inline void append_run_manifest(const std::filesystem::path& dir, const std::string& command,
                                const nlohmann::json& config, std::uint64_t seed, const nlohmann::json& inputs,
                                double wall_seconds) {
  std::filesystem::create_directories(dir);
  const auto path = dir / kRunManifestName;
  nlohmann::json doc{{"runs", nlohmann::json::array()}};
  if (std::filesystem::exists(path)) {
    std::ifstream in(path);
    doc = nlohmann::json::parse(in);
  }
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::ostringstream stamp;
  stamp << std::put_time(std::gmtime(&now), "%Y-%m-%dT%H:%M:%SZ");
  doc["runs"].push_back({{"command", command},
                         {"config", config},
                         {"seed", seed},
                         {"code_version", kCodeVersion},
                         {"inputs", inputs},
                         {"output", dir.string()},
                         {"started_utc", stamp.str()},
                         {"wall_seconds", wall_seconds}});
  std::ofstream out(path);
  out << doc.dump(2) << "\n";
}

// Same scene at another resolution: intrinsics rescaled, views re-rendered
// from the ground-truth Gaussians.
inline SceneSample rerender_scene(const SceneSample& scene, Resolution res, const RenderConfig& cfg = {}) {
  if (!scene.ground_truth) throw std::runtime_error("scene " + scene.id + " has no ground truth to re-render");
  SceneSample out;
  out.id = scene.id;
  out.ground_truth = scene.ground_truth;
  for (const auto& c : scene.cameras) {
    Camera cam = c;
    const Real sx = static_cast<Real>(res.width) / c.resolution.width;
    cam.focal = c.focal * sx;
    cam.principal_point = Vec2(res.width / 2.0, res.height / 2.0);
    cam.resolution = res;
    auto r = render_reference(*scene.ground_truth, cam, cfg);
    out.masks.push_back(threshold_alpha(r));
    out.images.emplace_back(res, std::move(r.image));
    out.cameras.push_back(cam);
  }
  return out;
}

inline std::vector<std::size_t> parse_index_list(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    std::size_t used = 0;
    const auto v = std::stoul(tok, &used);
    if (used != tok.size()) throw std::invalid_argument("bad view index '" + tok + "'");
    out.push_back(v);
  }
  return out;
}

// Orbit frames: multiples of three use the evaluation elevations (30, 0, -30);
// other counts orbit at a single 20 degree elevation.
inline std::vector<Camera> turntable_cameras(int frame_count, Real radius, Resolution res, Real focal) {
  if (frame_count < 1) throw std::invalid_argument("frame count must be >= 1");
  if (frame_count % 3 == 0) return orbit_cameras(frame_count / 3, {30.0, 0.0, -30.0}, radius, res, focal);
  return orbit_cameras(frame_count, {20.0}, radius, res, focal);
}

inline void write_frames(const std::filesystem::path& dir, const GaussianSet& set, const std::vector<Camera>& cams,
                         const RenderConfig& cfg = {}) {
  std::filesystem::create_directories(dir);
  for (std::size_t k = 0; k < cams.size(); ++k) {
    auto r = render(set, cams[k], cfg);
    char name[32];
    std::snprintf(name, sizeof name, "frame_%03zu.png", k);
    write_png(dir / name, Image(cams[k].resolution, std::move(r.image)));
  }
}

// Standard 3D Gaussian splatting PLY (binary little-endian): position,
// normals, DC color, logit opacity, log scale, wxyz rotation.
inline void write_gaussian_ply(const std::filesystem::path& path, const GaussianSet& set) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "ply\nformat binary_little_endian 1.0\nelement vertex " << set.size() << "\n";
  for (const char* p : {"x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1",
                        "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"})
    out << "property float " << p << "\n";
  out << "end_header\n";
  constexpr Real sh_c0 = 0.28209479177387814;
  for (std::size_t i = 0; i < set.size(); ++i) {
    const Vec3 c = set.center(i), s = set.scale(i), col = set.color(i);
    const Vec4 q = set.rotation(i);
    const Real o = std::clamp(set.opacity(i), 1e-6, 1.0 - 1e-6);
    const float rec[17] = {float(c.x()), float(c.y()), float(c.z()), 0.f, 0.f, 0.f,
                           float((col.x() - 0.5) / sh_c0), float((col.y() - 0.5) / sh_c0), float((col.z() - 0.5) / sh_c0),
                           float(logit(o)), float(std::log(s.x())), float(std::log(s.y())), float(std::log(s.z())),
                           float(q[0]), float(q[1]), float(q[2]), float(q[3])};
    out.write(reinterpret_cast<const char*>(rec), sizeof rec);
  }
}

namespace cli {

inline int gen_data(const std::string& out_dir, int scenes, int eval_scenes, int views, int res, Real fov, Real radius,
                    std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::filesystem::path root(out_dir);
  if (std::filesystem::exists(root / "manifest.json"))
    throw std::runtime_error(out_dir + " already holds a dataset; refusing to overwrite");
  DatasetManifest manifest;
  DatasetRenderOptions opt;
  opt.view_count = views;
  opt.resolution = {res, res};
  opt.fov_deg = fov;
  opt.radius = radius;
  Rng rng(seed);
  for (int s = 0; s < scenes + eval_scenes; ++s) {
    char id[32];
    std::snprintf(id, sizeof id, "scene_%04d", s);
    SceneSpec spec;
    spec.seed = rng();
    opt.seed = rng();
    const auto sample = make_synthetic_sample(id, spec, opt);
    write_scene(root / "scenes" / id, sample);
    manifest.scenes.push_back({id, s < scenes ? "train" : "eval"});
  }
  const nlohmann::json settings{{"scenes", scenes}, {"eval_scenes", eval_scenes}, {"views", views},
                                {"resolution", res}, {"fov_deg", fov},            {"radius", radius},
                                {"seed", seed}};
  manifest.settings = settings;
  write_manifest(root, manifest);
  append_run_manifest(root, "gen-data", settings, seed, nlohmann::json::object(),
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  std::cout << "wrote " << scenes << " train + " << eval_scenes << " eval scenes to " << out_dir << "\n";
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string out;
  std::string config;
  std::string resume;
  int steps = -1;  // overrides stage 1 steps when >= 0
  std::uint64_t seed = 0;
};

inline int train(const TrainArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  nlohmann::json file = nlohmann::json::object();
  if (!a.config.empty()) {
    std::ifstream in(a.config);
    if (!in) throw std::runtime_error("cannot read config " + a.config);
    file = nlohmann::json::parse(in);
  }
  auto scenes = read_dataset(a.data, "train");
  if (scenes.empty()) throw std::runtime_error("no training scenes in " + a.data);

  std::unique_ptr<Denoiser> model;
  DiffusionSchedule schedule;
  std::optional<AdamW> resumed_opt;
  TrainConfig tc = train_config_from_json(file.value("train", nlohmann::json::object()));
  tc.seed = a.seed;
  if (a.steps >= 0) tc.stages.front().steps = a.steps;
  if (!file.contains("train") || !file["train"].contains("stages"))
    tc.stages.front().resolution = scenes.front().cameras.front().resolution;
  if (!a.resume.empty()) {
    auto ck = load_checkpoint(a.resume);
    model = std::move(ck.model);
    schedule = ck.schedule;
    resumed_opt = std::move(ck.optimizer);
  } else {
    auto mc = denoiser_config_from_json(file.value("model", nlohmann::json::object()));
    mc.resolution = tc.stages.front().resolution;
    mc.init_seed = a.seed;
    model = std::make_unique<Denoiser>(mc);
    schedule = make_schedule(static_cast<int>(mc.timestep_count));
  }

  const std::filesystem::path out(a.out);
  std::filesystem::create_directories(out);
  const nlohmann::json resolved{{"model", to_json(model->config())}, {"train", to_json(tc)}, {"schedule", to_json(schedule)}};
  {
    std::ofstream cfg(out / "config.json");
    cfg << resolved.dump(2) << "\n";
  }
  Trainer trainer(*model, schedule, tc, perceptual_backend_from_env());
  if (resumed_opt) trainer.optimizer() = std::move(*resumed_opt);
  std::ofstream log(out / "metrics.jsonl");
  long long global = 0;
  for (std::size_t s = 0; s < tc.stages.size(); ++s) {
    std::vector<SceneSample> stage_scenes;
    for (const auto& sc : scenes)
      stage_scenes.push_back(sc.cameras.front().resolution == tc.stages[s].resolution
                                 ? sc
                                 : rerender_scene(sc, tc.stages[s].resolution, tc.render));
    trainer.run_stage(s, stage_scenes, [&](const StepMetrics& m, std::size_t stage, int i) {
      ++global;
      auto j = to_json(m);
      j["stage"] = stage;
      log << j.dump() << "\n";
      if (tc.log_interval > 0 && (i % tc.log_interval == 0 || i + 1 == tc.stages[stage].steps))
        std::cout << "stage " << stage << " step " << i << " loss " << m.loss << " psnr " << m.psnr << "\n";
      if (m.aborted) std::cerr << "warning: non-finite loss at step " << global << "; update skipped\n";
      if (tc.checkpoint_interval > 0 && global % tc.checkpoint_interval == 0)
        save_checkpoint(out / ("checkpoint_" + std::to_string(global) + ".nvck"), *model, schedule,
                        &trainer.optimizer(), {{"train", to_json(tc)}, {"step", global}});
    });
  }
  save_checkpoint(out / "checkpoint.nvck", *model, schedule, &trainer.optimizer(),
                  {{"train", to_json(tc)}, {"step", global}});
  append_run_manifest(out, "train", resolved, a.seed, {{"data", a.data}, {"config", a.config}, {"resume", a.resume}},
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return 0;
}

struct InferArgs {
  std::string checkpoint;
  std::string scene;
  std::string out;
  std::string clean = "0";
  std::string noisy;
  int steps = 50;
  int frames = 21;
  bool frozen_noise = false;
  std::uint64_t seed = 0;
};

inline int infer(const InferArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  auto ck = load_checkpoint(a.checkpoint);
  const auto scene = read_scene(a.scene);
  const auto clean = parse_index_list(a.clean), noisy = parse_index_list(a.noisy);
  if (clean.empty()) throw std::invalid_argument("--clean needs at least one view index");
  std::vector<const Image*> images;
  for (auto i : clean) {
    if (i >= scene.view_count()) throw std::invalid_argument("clean index " + std::to_string(i) + " out of range");
    images.push_back(&scene.images[i]);
  }
  SamplerOptions opt;
  opt.inference_steps = a.steps;
  opt.seed = a.seed;
  opt.frozen_noise = a.frozen_noise;
  const auto result = sample(*ck.model, ck.schedule, images, clean, scene.cameras, noisy, opt);

  const std::filesystem::path out(a.out);
  std::filesystem::create_directories(out);
  write_nvgs(out / "gaussians.nvgs", result.gaussians);
  Real radius = 0;
  for (const auto& c : scene.cameras) radius += c.center.norm();
  radius /= static_cast<Real>(scene.cameras.size());
  const auto& ref = scene.cameras.front();
  write_frames(out / "orbit", result.gaussians, turntable_cameras(a.frames, radius, ref.resolution, ref.focal));
  const nlohmann::json cfg{{"clean", clean}, {"noisy", noisy}, {"steps", a.steps}, {"frames", a.frames},
                           {"frozen_noise", a.frozen_noise}};
  append_run_manifest(out, "infer", cfg, a.seed, {{"checkpoint", a.checkpoint}, {"scene", a.scene}},
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  std::cout << "wrote " << result.gaussians.size() << " Gaussians to " << (out / "gaussians.nvgs").string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  bool ground_truth = false;
  std::string data;
  std::string split = "eval";
  std::string out;
  std::string protocol;
  std::string clean;
  std::string noisy;
  int ncv = -1;
  int nnv = -1;
  int steps = 50;
  std::uint64_t seed = 0;
};

inline EvalProtocol protocol_from_args(const EvalArgs& a) {
  const int forms = (!a.protocol.empty()) + (!a.clean.empty()) + (a.ncv >= 0);
  if (forms != 1) throw CLI::ValidationError("eval", "give exactly one of --protocol, --clean/--noisy, --ncv/--nnv");
  EvalProtocol p;
  if (!a.protocol.empty()) {
    p = parse_protocol(a.protocol);
  } else if (!a.clean.empty()) {
    p.clean_indices = parse_index_list(a.clean);
    p.noisy_indices = parse_index_list(a.noisy);
  } else {
    if (a.ncv < 1) throw CLI::ValidationError("--ncv", "must be >= 1");
    p.clean_count = static_cast<std::size_t>(a.ncv);
    p.noisy_count = static_cast<std::size_t>(std::max(a.nnv, 0));
  }
  p.inference_steps = a.steps;
  p.seed = a.seed;
  return p;
}

inline int eval(const EvalArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto protocol = protocol_from_args(a);
  if (a.ground_truth == !a.checkpoint.empty())
    throw CLI::ValidationError("eval", "give exactly one of --checkpoint or --ground-truth");
  auto scenes = read_dataset(a.data, a.split);
  const auto lpips = perceptual_backend_from_env();
  EvalOptions eo;
  eo.lpips = lpips.get();

  EvalReport report;
  if (a.ground_truth) {
    report = evaluate(GroundTruthReconstructor{}, scenes, protocol, eo);
  } else {
    auto ck = load_checkpoint(a.checkpoint);
    SamplerOptions so;
    so.inference_steps = a.steps;
    DiffusionReconstructor rec(*ck.model, ck.schedule, so);
    report = evaluate(rec, scenes, protocol, eo);
  }
  const std::filesystem::path out(a.out);
  std::filesystem::create_directories(out);
  {
    std::ofstream j(out / "report.json");
    j << to_json(report).dump(2) << "\n";
    std::ofstream t(out / "report.txt");
    t << format_table(report);
  }
  std::cout << format_table(report);
  append_run_manifest(out, "eval", to_json(report).at("config"), a.seed,
                      {{"checkpoint", a.checkpoint}, {"ground_truth", a.ground_truth}, {"data", a.data}, {"split", a.split}},
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return 0;
}

struct OrbitArgs {
  std::string gaussians;
  std::string out;
  int frames = 21;
  int res = 32;
  Real radius = 2.0;
  Real fov = 40.0;
};

inline int render_orbit(const OrbitArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto set = read_nvgs(a.gaussians);
  if (set.empty()) std::cerr << "warning: " << a.gaussians << " holds no Gaussians; frames will be background only\n";
  const Resolution res{a.res, a.res};
  write_frames(a.out, set, turntable_cameras(a.frames, a.radius, res, focal_from_fov(a.res, a.fov)));
  append_run_manifest(a.out, "render-orbit",
                      {{"frames", a.frames}, {"resolution", a.res}, {"radius", a.radius}, {"fov_deg", a.fov}}, 0,
                      {{"gaussians", a.gaussians}},
                      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  return 0;
}

inline int export_gaussians(const std::string& in, const std::string& out) {
  const auto set = read_nvgs(in);
  const std::filesystem::path path(out);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (path.extension() == ".nvgs")
    write_nvgs(path, set);
  else
    write_gaussian_ply(path, set);
  append_run_manifest(path.has_parent_path() ? path.parent_path() : std::filesystem::path("."), "export-gaussians",
                      {{"format", path.extension() == ".nvgs" ? "nvgs" : "ply"}}, 0, {{"gaussians", in}}, 0.0);
  return 0;
}

}  // namespace cli

inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Gaussian-splatting diffusion reconstruction toolkit", "novelgs"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Seed for every random choice")->capture_default_str();

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic multi-view dataset");
  std::string gen_out;
  int scenes = 64, eval_scenes = 8, views = 16, res = 32;
  Real fov = 40.0, radius = 2.0;
  gen->add_option("--out", gen_out, "Output dataset directory")->required();
  gen->add_option("--scenes", scenes, "Training scenes")->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--eval-scenes", eval_scenes, "Held-out scenes")->check(CLI::NonNegativeNumber)->capture_default_str();
  gen->add_option("--views", views, "Views per scene")->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--res", res, "Square resolution")->check(CLI::PositiveNumber)->capture_default_str();
  gen->add_option("--fov", fov, "Horizontal field of view (degrees)")->capture_default_str();
  gen->add_option("--radius", radius, "Camera distance")->capture_default_str();

  auto* tr = app.add_subcommand("train", "Train the denoiser");
  cli::TrainArgs ta;
  tr->add_option("--data", ta.data, "Dataset directory")->required();
  tr->add_option("--out", ta.out, "Run directory")->required();
  tr->add_option("--config", ta.config, "JSON run configuration");
  tr->add_option("--resume", ta.resume, "Checkpoint to continue from");
  tr->add_option("--steps", ta.steps, "Override stage 1 step count");

  auto* inf = app.add_subcommand("infer", "Reconstruct one scene");
  cli::InferArgs ia;
  inf->add_option("--checkpoint", ia.checkpoint, "Model checkpoint")->required();
  inf->add_option("--scene", ia.scene, "Scene directory")->required();
  inf->add_option("--out", ia.out, "Output directory")->required();
  inf->add_option("--clean", ia.clean, "Clean view indices (ICV), comma separated")->capture_default_str();
  inf->add_option("--noisy", ia.noisy, "Noisy view indices (INV), comma separated");
  inf->add_option("--steps", ia.steps, "Denoising steps")->check(CLI::PositiveNumber)->capture_default_str();
  inf->add_option("--frames", ia.frames, "Orbit frames")->check(CLI::PositiveNumber)->capture_default_str();
  inf->add_flag("--frozen-noise", ia.frozen_noise, "Reuse one noise draw per view");

  auto* ev = app.add_subcommand("eval", "Score reconstructions on the evaluation orbit");
  cli::EvalArgs ea;
  ev->add_option("--checkpoint", ea.checkpoint, "Model checkpoint");
  ev->add_flag("--ground-truth", ea.ground_truth, "Score the ground-truth Gaussians (upper bound)");
  ev->add_option("--data", ea.data, "Dataset directory")->required();
  ev->add_option("--split", ea.split, "Manifest split")->capture_default_str();
  ev->add_option("--out", ea.out, "Report directory")->required();
  ev->add_option("--protocol", ea.protocol, "ncv<m>nnv<n> or icv<i,..>_inv<k,..>");
  ev->add_option("--clean", ea.clean, "Clean view indices (ICV)");
  ev->add_option("--noisy", ea.noisy, "Noisy view indices (INV)");
  ev->add_option("--ncv", ea.ncv, "Number of clean views");
  ev->add_option("--nnv", ea.nnv, "Number of noisy views");
  ev->add_option("--steps", ea.steps, "Denoising steps")->check(CLI::PositiveNumber)->capture_default_str();

  auto* orb = app.add_subcommand("render-orbit", "Render turntable frames of a Gaussians file");
  cli::OrbitArgs oa;
  orb->add_option("--gaussians", oa.gaussians, "NVGS file")->required();
  orb->add_option("--out", oa.out, "Frame directory")->required();
  orb->add_option("--frames", oa.frames, "Frame count")->check(CLI::PositiveNumber)->capture_default_str();
  orb->add_option("--res", oa.res, "Square resolution")->check(CLI::PositiveNumber)->capture_default_str();
  orb->add_option("--radius", oa.radius, "Camera distance")->capture_default_str();
  orb->add_option("--fov", oa.fov, "Horizontal field of view (degrees)")->capture_default_str();

  auto* ex = app.add_subcommand("export-gaussians", "Convert a Gaussians file (.ply or .nvgs output)");
  std::string ex_in, ex_out;
  ex->add_option("--gaussians", ex_in, "NVGS file")->required();
  ex->add_option("--out", ex_out, "Output path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen) return cli::gen_data(gen_out, scenes, eval_scenes, views, res, fov, radius, seed);
    if (*tr) {
      ta.seed = seed;
      return cli::train(ta);
    }
    if (*inf) {
      ia.seed = seed;
      return cli::infer(ia);
    }
    if (*ev) {
      ea.seed = seed;
      return cli::eval(ea);
    }
    if (*orb) return cli::render_orbit(oa);
    if (*ex) return cli::export_gaussians(ex_in, ex_out);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace novelgs
