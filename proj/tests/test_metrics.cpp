#include "support.hpp"

#include <numeric>

using namespace novelgs;
using namespace novelgs::testing;

namespace {

Image constant_image(Resolution res, Real v) { return Image(res, std::vector<Real>(res.pixels() * 3, v)); }

std::vector<SceneSample> eval_scenes(int count, int views = 8, int side = 16) {
  std::vector<SceneSample> out;
  for (int s = 0; s < count; ++s) {
    SceneSpec spec;
    spec.seed = 500 + s;
    DatasetRenderOptions opt;
    opt.seed = 600 + s;
    opt.view_count = views;
    opt.resolution = {side, side};
    out.push_back(make_synthetic_sample("scene_" + std::to_string(s), spec, opt));
  }
  return out;
}

// Returns a shifted copy of the scene's own Gaussians.
class ShiftedReconstructor : public Reconstructor {
 public:
  GaussianSet reconstruct(const SceneSample& scene, const std::vector<std::size_t>&, const std::vector<std::size_t>&,
                          std::uint64_t) const override {
    auto set = *scene.ground_truth;
    for (std::size_t i = 0; i < set.size(); ++i) set.record(i)[GaussianSet::kCenter] += 0.05;
    return set;
  }
};

}  // namespace

TEST(Metrics, PsnrOfKnownMse) {
  const Resolution res{4, 4};
  const auto a = constant_image(res, 0.5), b = constant_image(res, 0.6);
  // Every pixel differs by 0.1, so the MSE is 0.01.
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
  EXPECT_DOUBLE_EQ(psnr(a, b), psnr(b, a));
  EXPECT_EQ(psnr(a, a), kPsnrCap);
  EXPECT_EQ(psnr(a, a, 50.0), 50.0);
}

TEST(Metrics, PsnrDecreasesWithNoise) {
  const auto clean = random_image({16, 16}, 4);
  Rng rng(2);
  const auto noise = normal_noise(clean.rgb.size(), rng);
  Real prev = kPsnrCap + 1;
  for (Real sigma : {0.0, 0.01, 0.03, 0.1, 0.3}) {
    Image noisy = clean;
    for (std::size_t i = 0; i < noise.size(); ++i) noisy.rgb[i] += sigma * noise[i];
    const Real p = psnr(noisy, clean);
    EXPECT_LT(p, prev) << sigma;
    prev = p;
  }
}

TEST(Metrics, SsimReferenceCases) {
  const auto img = random_image({16, 16}, 9);
  EXPECT_NEAR(ssim(img, img), 1.0, 1e-12);
  Image inverted = img;
  for (auto& v : inverted.rgb) v = 1.0 - v;
  EXPECT_LT(ssim(img, inverted), 1.0);
  EXPECT_LT(ssim(img, inverted), ssim(img, img));
  const auto flat = constant_image({12, 12}, 0.3);
  EXPECT_NEAR(ssim(flat, flat), 1.0, 1e-12);
  EXPECT_LT(ssim(flat, constant_image({12, 12}, 0.8)), 1.0);
  EXPECT_NEAR(ssim(img, inverted), ssim(inverted, img), 1e-12);
  EXPECT_THROW(ssim(constant_image({8, 8}, 0.1), constant_image({8, 8}, 0.1)), std::invalid_argument);
  EXPECT_THROW(ssim(img, constant_image({12, 12}, 0.1)), std::invalid_argument);
}

TEST(Metrics, SsimMatchesSingleWindowFormula) {
  // With an 11x11 image only one window fits, so SSIM reduces to the global
  // weighted statistics of the grayscale images.
  const auto a = random_image({11, 11}, 1), b = random_image({11, 11}, 2);
  const auto ga = to_grayscale(a), gb = to_grayscale(b);
  std::vector<Real> w(121);
  Real total = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      const Real d2 = (i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0);
      total += w[i * 11 + j] = std::exp(-d2 / (2 * 1.5 * 1.5));
    }
  Real ma = 0, mb = 0;
  for (int k = 0; k < 121; ++k) ma += w[k] / total * ga[k], mb += w[k] / total * gb[k];
  Real va = 0, vb = 0, cov = 0;
  for (int k = 0; k < 121; ++k) {
    va += w[k] / total * (ga[k] - ma) * (ga[k] - ma);
    vb += w[k] / total * (gb[k] - mb) * (gb[k] - mb);
    cov += w[k] / total * (ga[k] - ma) * (gb[k] - mb);
  }
  const Real c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const Real expected = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  EXPECT_NEAR(ssim(a, b), expected, 1e-9);
}

TEST(Metrics, ProtocolParsing) {
  const auto counts = parse_protocol("ncv4nnv1");
  ASSERT_TRUE(counts.by_count());
  EXPECT_EQ(*counts.clean_count, 4u);
  EXPECT_EQ(*counts.noisy_count, 1u);
  EXPECT_EQ(counts.name(), "ncv4nnv1");
  const auto [clean, noisy] = counts.resolve(10);
  EXPECT_EQ(clean, (std::vector<std::size_t>{0, 2, 4, 6}));
  EXPECT_EQ(noisy, (std::vector<std::size_t>{8}));
  EXPECT_TRUE(counts.resolve(4).first.empty());

  const auto idx = parse_protocol("icv0,3,6,9_inv15");
  EXPECT_FALSE(idx.by_count());
  EXPECT_EQ(idx.clean_indices, (std::vector<std::size_t>{0, 3, 6, 9}));
  EXPECT_EQ(idx.noisy_indices, (std::vector<std::size_t>{15}));
  EXPECT_EQ(idx.name(), "icv0,3,6,9_inv15");
  EXPECT_TRUE(parse_protocol("icv2_inv").noisy_indices.empty());

  for (const char* bad : {"ncv0nnv1", "icv_inv1", "nope", "ncv4"}) EXPECT_THROW(parse_protocol(bad), std::invalid_argument) << bad;
}

TEST(Metrics, GroundTruthReachesCapOnEveryView) {
  const auto scenes = eval_scenes(2);
  const auto report = evaluate(GroundTruthReconstructor{}, scenes, parse_protocol("ncv4nnv1"));
  ASSERT_EQ(report.scenes.size(), 2u);
  EXPECT_EQ(report.evaluated, 2u);
  for (const auto& s : report.scenes) {
    EXPECT_FALSE(s.skipped);
    EXPECT_EQ(s.psnr, kPsnrCap);
    EXPECT_NEAR(s.ssim, 1.0, 1e-12);
    EXPECT_FALSE(s.lpips.has_value());
  }
  EXPECT_EQ(report.psnr, kPsnrCap);
  EXPECT_FALSE(report.lpips.has_value());
}

TEST(Metrics, ImperfectReconstructionScoresBelowCap) {
  const auto scenes = eval_scenes(2);
  const auto report = evaluate(ShiftedReconstructor{}, scenes, parse_protocol("icv0_inv"));
  for (const auto& s : report.scenes) {
    EXPECT_LT(s.psnr, kPsnrCap);
    EXPECT_LT(s.ssim, 1.0);
  }
}

TEST(Metrics, SkippedScenesAndAggregation) {
  auto scenes = eval_scenes(3);
  scenes.push_back(eval_scenes(1, 3)[0]);  // too few views for ncv4nnv1
  scenes.back().id = "short";
  scenes[1].ground_truth.reset();
  const auto report = evaluate(ShiftedReconstructor{}, scenes, parse_protocol("ncv4nnv1"));
  ASSERT_EQ(report.scenes.size(), 4u);
  EXPECT_TRUE(report.scenes[1].skipped);
  EXPECT_TRUE(report.scenes[3].skipped);
  EXPECT_FALSE(report.scenes[3].reason.empty());
  EXPECT_EQ(report.evaluated, 2u);
  // Aggregate is the plain mean of the evaluated rows.
  EXPECT_NEAR(report.psnr, (report.scenes[0].psnr + report.scenes[2].psnr) / 2, 1e-9);
  EXPECT_NEAR(report.ssim, (report.scenes[0].ssim + report.scenes[2].ssim) / 2, 1e-9);

  const auto j = to_json(report);
  EXPECT_EQ(j.at("config").at("ncv"), 4);
  EXPECT_EQ(j.at("config").at("nnv"), 1);
  EXPECT_EQ(j.at("scenes").size(), 4u);
  EXPECT_TRUE(j.at("scenes")[1].at("skipped").get<bool>());
  EXPECT_TRUE(j.at("aggregate").at("lpips").is_null());
  EXPECT_EQ(j.at("aggregate").at("evaluated"), 2);

  // Out-of-range explicit indices are skipped too.
  const auto out_of_range = evaluate(GroundTruthReconstructor{}, scenes, parse_protocol("icv0_inv20"));
  for (const auto& s : out_of_range.scenes) EXPECT_TRUE(s.skipped);
  EXPECT_EQ(out_of_range.evaluated, 0u);
}

TEST(Metrics, DiffusionEvaluationIsDeterministic) {
  const auto scenes = eval_scenes(1, 8, 16);
  auto cfg = tiny_denoiser_config();
  cfg.resolution = {16, 16};
  Denoiser model(cfg);
  randomize_parameters(model, 3, 0.1);
  const auto schedule = make_schedule();
  SamplerOptions so;
  so.inference_steps = 3;
  DiffusionReconstructor rec(model, schedule, so);
  auto protocol = parse_protocol("ncv2nnv1");
  protocol.inference_steps = 3;
  protocol.seed = 4;
  EvalOptions eo;
  const auto a = evaluate(rec, scenes, protocol, eo);
  const auto b = evaluate(rec, scenes, protocol, eo);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  EXPECT_EQ(format_table(a), format_table(b));
  EXPECT_EQ(a.evaluated, 1u);
}

TEST(Metrics, TableLayout) {
  EvalReport r;
  r.ncv = 4;
  r.nnv = 1;
  r.psnr = 21.23456;
  r.ssim = 0.5;
  const auto table = format_table(r);
  const auto nl = table.find('\n');
  ASSERT_NE(nl, std::string::npos);
  EXPECT_EQ(table.substr(0, nl), "NCV | NNV |   PSNR |  SSIM | LPIPS");
  EXPECT_EQ(table.substr(nl + 1), "4   | 1   | 21.235 | 0.500 |   n/a\n");

  EvalReport idx;
  idx.icv = {0, 3};
  idx.lpips = 0.25;
  const auto t2 = format_table(idx);
  EXPECT_EQ(t2.substr(0, 6), "ICV | ");
  EXPECT_NE(t2.find("0,3 | -"), std::string::npos);
  EXPECT_NE(t2.find("0.250"), std::string::npos);
}
