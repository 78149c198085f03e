#include "support.hpp"

using namespace novelgs;
using namespace novelgs::testing;

namespace {

struct Fixture {
  ParameterSet params;
  Tokenizer tokenizer;
  Fixture(std::size_t patch, std::size_t width, Resolution res, std::uint64_t seed = 1) {
    Rng rng(seed);
    tokenizer = Tokenizer(params, "tok", patch, width, res, rng);
  }
};

std::vector<RayMap> rays_for(std::size_t views, Resolution res) {
  std::vector<RayMap> out;
  for (std::size_t v = 0; v < views; ++v) out.push_back(ray_map(test_camera(50.0 * v, 10.0, res)));
  return out;
}

std::vector<const Image*> ptrs(const std::vector<Image>& images) {
  std::vector<const Image*> p;
  for (const auto& i : images) p.push_back(&i);
  return p;
}

}  // namespace

TEST(Tokenizer, TokenCounts) {
  for (auto [side, patch, per_view] : {std::tuple{32, 8, 16}, std::tuple{512, 8, 4096}, std::tuple{16, 4, 16}}) {
    const Resolution res{side, side};
    std::vector<Image> images(2, Image(res));
    const auto flat = patchify(ptrs(images), rays_for(2, res), patch);
    EXPECT_EQ(flat.rows(), 2u * per_view) << side;
    EXPECT_EQ(flat.cols(), 9u * patch * patch);
  }
  Fixture f(8, 16, {32, 32});
  std::vector<Image> images(3, Image({32, 32}));
  const auto grid = f.tokenizer.tokenize(ptrs(images), rays_for(3, {32, 32}));
  EXPECT_EQ(grid.tokens_per_view(), 16u);
  EXPECT_EQ(grid.tokens.shape(), (ad::Shape{48, 16}));
}

TEST(Tokenizer, PatchLayoutIsRowColChannel) {
  const Resolution res{4, 4};
  Image img(res);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<Real>(i);
  const auto rays = rays_for(1, res);
  const auto flat = patchify({&img}, rays, 2);
  // Second patch of the first patch row starts at pixel (0, 2).
  const auto row = flat.value().subspan(1 * 36, 36);
  const std::size_t pix = 2;
  EXPECT_EQ(row[0], img.rgb[pix * 3]);
  EXPECT_EQ(row[3], rays[0].values[pix * 6]);
  EXPECT_EQ(row[8], rays[0].values[pix * 6 + 5]);
  // (1, 0) inside that patch is pixel (1, 2).
  EXPECT_EQ(row[18], img.rgb[(1 * 4 + 2) * 3]);
}

TEST(Tokenizer, ZeroInputsGivePositionalEmbedding) {
  Fixture f(4, 8, {8, 8});
  for (auto& [name, var] : f.params.entries())
    if (name.starts_with("tok.proj"))
      for (auto& v : var.mutable_value()) v = 0.0;
  std::vector<Image> images(2, Image({8, 8}));
  std::vector<RayMap> rays = rays_for(2, {8, 8});
  for (auto& r : rays) std::fill(r.values.begin(), r.values.end(), 0.0);
  const auto grid = f.tokenizer.tokenize(ptrs(images), rays);
  const auto pos = f.tokenizer.positional_embedding().value();
  for (std::size_t v = 0; v < 2; ++v)
    for (std::size_t i = 0; i < pos.size(); ++i) EXPECT_EQ(grid.tokens.value()[v * pos.size() + i], pos[i]);
}

TEST(Tokenizer, LinearBeforePositionalEmbedding) {
  Fixture f(4, 8, {8, 8});
  for (auto& [name, var] : f.params.entries())
    if (name == "tok.proj.bias")
      for (auto& v : var.mutable_value()) v = 0.0;
  const auto rays = rays_for(1, {8, 8});
  std::vector<RayMap> scaled_rays = rays;
  for (auto& v : scaled_rays[0].values) v *= 2.5;
  const auto img = random_image({8, 8}, 3);
  Image scaled = img;
  for (auto& v : scaled.rgb) v *= 2.5;
  const auto a = f.tokenizer.tokenize({&img}, rays).tokens;
  const auto b = f.tokenizer.tokenize({&scaled}, scaled_rays).tokens;
  const auto pos = f.tokenizer.positional_embedding().value();
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_NEAR(b.value()[i] - pos[i], 2.5 * (a.value()[i] - pos[i]), 1e-12);
}

TEST(Tokenizer, ViewPermutationPermutesTokenBlocks) {
  Fixture f(4, 8, {8, 8});
  const std::vector<Image> images{random_image({8, 8}, 1), random_image({8, 8}, 2)};
  auto rays = rays_for(2, {8, 8});
  const auto a = f.tokenizer.tokenize({&images[0], &images[1]}, rays).tokens;
  const auto b = f.tokenizer.tokenize({&images[1], &images[0]}, {rays[1], rays[0]}).tokens;
  const std::size_t block = 4 * 8;
  for (std::size_t i = 0; i < block; ++i) {
    EXPECT_EQ(a.value()[i], b.value()[block + i]);
    EXPECT_EQ(a.value()[block + i], b.value()[i]);
  }
}

TEST(Tokenizer, IndivisibleResolutionRejected) {
  EXPECT_THROW(Fixture(8, 16, {30, 32}), std::invalid_argument);
  Image odd({12, 12});
  try {
    patchify({&odd}, rays_for(1, {12, 12}), 8);
    FAIL() << "expected rejection";
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("not divisible by patch size 8"), std::string::npos);
  }
  Fixture f(4, 8, {8, 8});
  std::vector<Image> wrong(1, Image({16, 16}));
  EXPECT_THROW(f.tokenizer.tokenize(ptrs(wrong), rays_for(1, {16, 16})), std::invalid_argument);
  std::vector<Image> ok(2, Image({8, 8}));
  EXPECT_THROW(f.tokenizer.tokenize(ptrs(ok), rays_for(1, {8, 8})), std::invalid_argument);
}

TEST(Tokenizer, ResampleGridKeepsCornersAndConstants) {
  const std::vector<Real> grid{1, 2, 3, 4};  // 2x2, width 1
  const auto up = resample_grid(grid, 2, 2, 3, 3, 1);
  EXPECT_EQ(up, (std::vector<Real>{1, 1.5, 2, 2, 2.5, 3, 3, 3.5, 4}));
  const auto same = resample_grid(grid, 2, 2, 2, 2, 1);
  EXPECT_EQ(same, grid);
}
