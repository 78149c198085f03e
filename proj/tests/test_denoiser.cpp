#include "support.hpp"

#include <set>

using namespace novelgs;
using namespace novelgs::testing;

namespace {

struct Inputs {
  std::vector<Image> images;
  std::vector<Camera> cameras;
  std::vector<const Image*> ptrs() const {
    std::vector<const Image*> p;
    for (const auto& i : images) p.push_back(&i);
    return p;
  }
};

Inputs make_inputs(Resolution res, std::size_t views, std::uint64_t seed) {
  Inputs in;
  for (std::size_t v = 0; v < views; ++v) {
    in.images.push_back(random_image(res, seed + v));
    in.cameras.push_back(test_camera(360.0 * v / views + 10.0, 15.0 * (v % 3), res));
  }
  in.cameras = normalize_cameras(in.cameras, 0);
  return in;
}

}  // namespace

TEST(Denoiser, ToyShapeYieldsPixelAlignedMaps) {
  DenoiserConfig c;  // D=64, 4 layers, p=8, 32x32
  Denoiser model(c);
  const auto in = make_inputs({32, 32}, 5, 3);
  const auto raw = model.forward(in.ptrs(), in.cameras, 500);
  EXPECT_EQ(raw.rows(), 5u * 32 * 32);
  EXPECT_EQ(raw.cols(), raw_channel::kCount);
  const auto maps = model.predict_attribute_maps({&in.images[0], &in.images[1], &in.images[2], &in.images[3]},
                                                 {&in.images[4]}, in.cameras, 10);
  ASSERT_EQ(maps.size(), 5u);
  for (const auto& m : maps) EXPECT_EQ(m.raw.size(), 32u * 32 * 12);
}

TEST(Denoiser, InitialOutputEqualsHeadBiases) {
  DenoiserConfig c = tiny_denoiser_config();
  c.bias.depth = 0.25;
  c.bias.scale = -0.5;
  c.bias.color = 0.1;
  Denoiser model(c);
  const auto in = make_inputs(c.resolution, 3, 11);
  const auto raw = model.forward(in.ptrs(), in.cameras, 123);
  const std::vector<Real> expected{0.25, 1, 0, 0, 0, -0.5, -0.5, -0.5, c.bias.opacity, 0.1, 0.1, 0.1};
  for (std::size_t r = 0; r < raw.rows(); ++r)
    for (std::size_t k = 0; k < 12; ++k) ASSERT_EQ(raw.value()[r * 12 + k], expected[k]);
}

TEST(Denoiser, BlockIsIdentityAtInit) {
  Denoiser model(tiny_denoiser_config());
  Rng rng(4);
  const auto tokens = ad::Var::constant({7, 16}, init_normal(7 * 16, 1.0, rng));
  const auto cond = ad::silu(model.timestep_embedding(42));
  const auto out = model.block_forward(0, tokens, cond);
  for (std::size_t i = 0; i < tokens.size(); ++i) EXPECT_EQ(out.value()[i], tokens.value()[i]);
}

TEST(Denoiser, BlockIsPermutationEquivariant) {
  Denoiser model(tiny_denoiser_config());
  randomize_parameters(model, 9);
  Rng rng(5);
  const std::size_t n = 6, d = 16;
  const auto values = init_normal(n * d, 1.0, rng);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  std::vector<Real> permuted(n * d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < d; ++k) permuted[r * d + k] = values[perm[r] * d + k];
  const auto cond = ad::silu(model.timestep_embedding(7));
  const auto a = model.block_forward(1, ad::Var::constant({n, d}, values), cond);
  const auto b = model.block_forward(1, ad::Var::constant({n, d}, permuted), cond);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(b.value()[r * d + k], a.value()[perm[r] * d + k], 1e-12);
}

TEST(Denoiser, SingleTokenBlockIsFinite) {
  Denoiser model(tiny_denoiser_config());
  randomize_parameters(model, 2);
  const auto out = model.block_forward(0, ad::Var::constant({1, 16}, std::vector<Real>(16, 0.5)),
                                       ad::silu(model.timestep_embedding(0)));
  for (Real v : out.value()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Denoiser, TimestepEmbeddingAtZeroHasUnitCosines) {
  const auto f = timestep_frequencies(0, 256);
  for (std::size_t i = 0; i < 128; ++i) {
    EXPECT_EQ(f[i], 1.0);
    EXPECT_EQ(f[128 + i], 0.0);
  }
}

TEST(Denoiser, TimestepEmbeddingsDistinctAcrossSchedule) {
  DenoiserConfig c;
  Denoiser model(c);
  std::set<std::vector<Real>> seen;
  for (int t = 0; t < 1000; ++t) {
    const auto f = timestep_frequencies(t, c.time_frequency_dim);
    EXPECT_TRUE(seen.insert(f).second) << "duplicate frequency features at t=" << t;
  }
  std::set<std::vector<Real>> embedded;
  for (int t = 0; t < 1000; ++t) {
    const auto e = model.timestep_embedding(t);
    embedded.insert(std::vector<Real>(e.value().begin(), e.value().end()));
  }
  EXPECT_EQ(embedded.size(), 1000u);
  const auto a = model.timestep_embedding(17), b = model.timestep_embedding(17);
  EXPECT_TRUE(std::equal(a.value().begin(), a.value().end(), b.value().begin()));
  EXPECT_THROW(model.timestep_embedding(1000), std::out_of_range);
  EXPECT_THROW(model.timestep_embedding(-1), std::out_of_range);
}

TEST(Denoiser, NoNoisyViewsStillReturnsCleanMaps) {
  Denoiser model(tiny_denoiser_config());
  const auto in = make_inputs({8, 8}, 2, 1);
  const auto maps = model.predict_attribute_maps(in.ptrs(), {}, in.cameras, 0);
  EXPECT_EQ(maps.size(), 2u);
}

TEST(Denoiser, RegisterTokensDoNotChangeShapes) {
  auto c = tiny_denoiser_config();
  const auto in = make_inputs(c.resolution, 2, 1);
  c.register_token_count = 2;
  const auto a = Denoiser(c).forward(in.ptrs(), in.cameras, 3);
  c.register_token_count = 4;
  const auto b = Denoiser(c).forward(in.ptrs(), in.cameras, 3);
  EXPECT_EQ(a.shape(), b.shape());
}

TEST(Denoiser, RejectsMismatchedViewsAndBadConfig) {
  Denoiser model(tiny_denoiser_config());
  const auto in = make_inputs({8, 8}, 2, 1);
  EXPECT_THROW(model.forward(in.ptrs(), {in.cameras[0]}, 0), std::invalid_argument);
  auto c = tiny_denoiser_config();
  c.head_count = 3;
  EXPECT_THROW(Denoiser{c}, std::invalid_argument);
  c = tiny_denoiser_config();
  c.resolution = {10, 10};
  EXPECT_THROW(Denoiser{c}, std::invalid_argument);
}

TEST(Denoiser, ForwardIsDeterministic) {
  Denoiser model(tiny_denoiser_config());
  randomize_parameters(model, 1);
  const auto in = make_inputs({8, 8}, 3, 2);
  const auto a = model.forward(in.ptrs(), in.cameras, 77);
  const auto b = model.forward(in.ptrs(), in.cameras, 77);
  EXPECT_TRUE(std::equal(a.value().begin(), a.value().end(), b.value().begin()));
}

// Every parameter's analytic gradient matches central differences on a
// sampled subset of its entries.
TEST(Denoiser, ParameterGradientsMatchFiniteDifferences) {
  auto c = tiny_denoiser_config();
  c.register_token_count = 2;
  Denoiser model(c);
  randomize_parameters(model, 21);
  const auto in = make_inputs(c.resolution, 3, 8);
  const auto w = probe_weights(3 * 64 * 12, 99);
  auto loss = [&] { return weighted_sum(model.forward(in.ptrs(), in.cameras, 250), w); };
  model.parameters().zero_grad();
  ad::backward(loss());
  Rng pick(3);
  for (auto& [name, var] : model.parameters().entries()) {
    const std::vector<Real> analytic(var.grad().begin(), var.grad().end());
    auto values = var.mutable_value();
    std::vector<Real> a, n;
    for (int s = 0; s < 6; ++s) {
      const std::size_t i = uniform_index(pick, values.size());
      const Real keep = values[i], h = 1e-5;
      values[i] = keep + h;
      const Real up = loss().item();
      values[i] = keep - h;
      const Real down = loss().item();
      values[i] = keep;
      a.push_back(analytic[i]);
      n.push_back((up - down) / (2 * h));
    }
    EXPECT_LT(relative_error(a, n, 1e-6), 1e-4) << name;
  }
}

// Under the rendering loss every parameter receives some gradient.
TEST(Denoiser, EveryParameterReceivesGradient) {
  auto c = tiny_denoiser_config();
  c.register_token_count = 1;
  Denoiser model(c);
  randomize_parameters(model, 4, 0.1);
  const auto in = make_inputs(c.resolution, 2, 5);
  std::vector<RayMap> rays;
  for (const auto& cam : in.cameras) rays.push_back(ray_map(cam));
  const auto g = activate_attributes(model.forward_rays(in.ptrs(), rays, 100), rays);
  const auto r = render(g, in.cameras[1]);
  const auto target = random_image(c.resolution, 77);
  ad::backward(ad::mse(ad::slice_cols(r, 0, 3), target.rgb));
  for (const auto& [name, var] : model.parameters().entries()) {
    Real norm = 0;
    for (Real v : var.grad()) norm += v * v;
    EXPECT_GT(norm, 0.0) << name;
  }
}

TEST(Denoiser, SetResolutionResamplesPositionalGrid) {
  auto c = tiny_denoiser_config();
  Denoiser model(c);
  randomize_parameters(model, 6);
  const auto old = model.tokenizer().positional_embedding().value();
  const std::vector<Real> before(old.begin(), old.end());
  model.set_resolution({16, 16});
  EXPECT_EQ(model.config().resolution, (Resolution{16, 16}));
  const auto pos = model.parameters().find("tokenizer.pos_embed");
  EXPECT_EQ(pos.rows(), 16u);
  // Corners survive align-corners resampling exactly.
  for (std::size_t k = 0; k < c.width; ++k) {
    EXPECT_DOUBLE_EQ(pos.value()[k], before[k]);
    EXPECT_DOUBLE_EQ(pos.value()[15 * c.width + k], before[3 * c.width + k]);
  }
  const auto in = make_inputs({16, 16}, 2, 3);
  EXPECT_EQ(model.forward(in.ptrs(), in.cameras, 1).rows(), 2u * 256);
}

TEST(Denoiser, CloneIsIndependent) {
  Denoiser model(tiny_denoiser_config());
  auto copy = model.clone();
  copy.parameters().entries().front().second.mutable_value()[0] += 1.0;
  EXPECT_NE(copy.parameters().entries().front().second.value()[0],
            model.parameters().entries().front().second.value()[0]);
}

TEST(Denoiser, ConfigJsonRoundTrip) {
  auto c = DenoiserConfig::full_size_preset();
  c.register_token_count = 3;
  const auto back = denoiser_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.width, 768u);
  EXPECT_EQ(back.layer_count, 24u);
}
