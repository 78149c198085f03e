#include "support.hpp"

#include <filesystem>

using namespace novelgs;
using namespace novelgs::testing;

namespace {

RayMap single_ray(const Vec3& origin, const Vec3& dir) {
  RayMap m;
  m.resolution = {1, 1};
  m.origin = origin;
  const Vec3 d = dir.normalized(), mo = origin.cross(d);
  m.values = {mo.x(), mo.y(), mo.z(), d.x(), d.y(), d.z()};
  return m;
}

GaussianSet activate_one(std::vector<Real> raw, const Vec3& origin = Vec3::Zero(), const Vec3& dir = Vec3::UnitZ()) {
  return activate_attributes(AttributeMap({1, 1}, std::move(raw)), single_ray(origin, dir));
}

std::vector<Real> raw_pixel(Real depth, Vec4 q, Real scale, Real opacity, Real color) {
  return {depth, q[0], q[1], q[2], q[3], scale, scale, scale, opacity, color, color, color};
}

}  // namespace

TEST(Gaussians, ZeroDepthLogitPlacesCenterAtMidDepth) {
  const Vec3 o(0.1, -0.2, 0.0), d = Vec3(0.0, 0.3, 1.0).normalized();
  const auto g = activate_one(raw_pixel(0, {1, 0, 0, 0}, 0, 0, 0), o, d);
  // sigmoid(0) = 0.5 -> t = 0.5 * 0.1 + 0.5 * 4.5, then clipped into the unit box.
  const Vec3 expected = (o + 2.3 * d).cwiseMax(-1.0).cwiseMin(1.0);
  EXPECT_NEAR((g.center(0) - expected).norm(), 0.0, 1e-12);
  ActivationConfig wide;
  wide.clip_extent = 10.0;
  const auto unclipped = activate_attributes(AttributeMap({1, 1}, raw_pixel(0, {1, 0, 0, 0}, 0, 0, 0)),
                                             single_ray(o, d), wide);
  EXPECT_NEAR((unclipped.center(0) - (o + 2.3 * d)).norm(), 0.0, 1e-12);
}

TEST(Gaussians, ZeroScaleLogitGivesMidScale) {
  const auto g = activate_one(raw_pixel(0, {1, 0, 0, 0}, 0, 0, 0));
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(g.scale(0)[k], 0.0125, 1e-15);
  EXPECT_DOUBLE_EQ(g.opacity(0), 0.5);
  EXPECT_DOUBLE_EQ(g.color(0)[1], 0.5);
}

TEST(Gaussians, QuaternionNormalizedOrReplaced) {
  EXPECT_EQ(activate_one(raw_pixel(0, {2, 0, 0, 0}, 0, 0, 0)).rotation(0), Vec4(1, 0, 0, 0));
  EXPECT_EQ(activate_one(raw_pixel(0, {0, 0, 0, 0}, 0, 0, 0)).rotation(0), Vec4(1, 0, 0, 0));
  const auto q = activate_one(raw_pixel(0, {0, 3, 0, 4}, 0, 0, 0)).rotation(0);
  EXPECT_NEAR((q - Vec4(0, 0.6, 0, 0.8)).norm(), 0.0, 1e-15);
}

TEST(Gaussians, DepthLimitsApproachNearAndFar) {
  ActivationConfig wide;
  wide.clip_extent = 10.0;
  auto depth_at = [&](Real logit_value) {
    return activate_attributes(AttributeMap({1, 1}, raw_pixel(logit_value, {1, 0, 0, 0}, 0, 0, 0)),
                               single_ray(Vec3::Zero(), Vec3::UnitZ()), wide)
        .center(0)
        .z();
  };
  EXPECT_NEAR(depth_at(-40.0), 0.1, 1e-12);
  EXPECT_NEAR(depth_at(40.0), 4.5, 1e-12);
}

TEST(Gaussians, BoundsHoldOverRandomInputs) {
  ActivationConfig wide;
  wide.clip_extent = 100.0;  // expose the unclipped depth
  Rng rng(5);
  const std::size_t n = 20000;
  std::vector<Real> raw(n * 12);
  for (auto& v : raw) v = 6.0 * standard_normal(rng);
  RayMap rays;
  rays.resolution = {1, static_cast<int>(n)};
  for (std::size_t p = 0; p < n; ++p) {
    const Vec3 d = Vec3(standard_normal(rng), standard_normal(rng), standard_normal(rng)).normalized();
    rays.values.insert(rays.values.end(), {0, 0, 0, d.x(), d.y(), d.z()});
  }
  const auto g = activate_attributes(AttributeMap(rays.resolution, raw), rays, wide);
  for (std::size_t i = 0; i < n; ++i) {
    const Real t = g.center(i).norm();
    EXPECT_GT(t, 0.1 - 1e-12);
    EXPECT_LT(t, 4.5 + 1e-12);
    EXPECT_NEAR(g.rotation(i).norm(), 1.0, 1e-12);
    for (int k = 0; k < 3; ++k) {
      EXPECT_GE(g.scale(i)[k], 0.005);
      EXPECT_LE(g.scale(i)[k], 0.02);
      EXPECT_GE(g.color(i)[k], 0.0);
      EXPECT_LE(g.color(i)[k], 1.0);
    }
  }
  const auto clipped = activate_attributes(AttributeMap(rays.resolution, raw), rays);
  for (Real v : clipped.data) EXPECT_TRUE(std::isfinite(v));
  for (std::size_t i = 0; i < n; ++i) EXPECT_LE(clipped.center(i).cwiseAbs().maxCoeff(), 1.0);
}

TEST(Gaussians, DepthMonotoneInLogit) {
  ActivationConfig wide;
  wide.clip_extent = 10.0;
  Real prev = -1;
  for (Real x = -8.0; x <= 8.0; x += 0.05) {
    const Real t = activate_attributes(AttributeMap({1, 1}, raw_pixel(x, {1, 0, 0, 0}, 0, 0, 0)),
                                       single_ray(Vec3::Zero(), Vec3::UnitZ()), wide)
                       .center(0)
                       .z();
    EXPECT_GT(t, prev);
    prev = t;
  }
}

TEST(Gaussians, DifferentiableActivationMatchesValuesAndGradients) {
  Rng rng(8);
  std::vector<RayMap> rays{ray_map(test_camera(10, 20, {3, 4})), ray_map(test_camera(100, -10, {3, 4}))};
  auto raw = ad::Var::parameter({24, 12}, init_normal(24 * 12, 1.5, rng));
  const auto out = activate_attributes(raw, rays);
  const std::vector<Real> first(raw.value().begin(), raw.value().begin() + 12 * 12);
  const auto ref = activate_attributes(AttributeMap({3, 4}, first), rays[0]);
  for (std::size_t i = 0; i < ref.data.size(); ++i) EXPECT_EQ(out.value()[i], ref.data[i]);

  ActivationConfig wide;
  wide.clip_extent = 10.0;  // keep away from clamp kinks
  const auto w = probe_weights(24 * 14, 3);
  ad::backward(weighted_sum(activate_attributes(raw, rays, wide), w));
  const std::vector<Real> analytic(raw.grad().begin(), raw.grad().end());
  const auto numeric = numeric_gradient(raw.mutable_value(), [&] {
    const auto o = activate_attributes(raw, rays, wide);
    Real s = 0;
    for (std::size_t i = 0; i < o.size(); ++i) s += w[i] * o.value()[i];
    return s;
  });
  EXPECT_LT(relative_error(analytic, numeric), 1e-6);
}

TEST(Gaussians, MergeConcatenatesInOrder) {
  const auto a = random_scene(1, 1), b = random_scene(1, 2);
  const auto m = merge_views({a, b});
  ASSERT_EQ(m.size(), 2u);
  EXPECT_EQ(m.center(0), a.center(0));
  EXPECT_EQ(m.color(1), b.color(0));
  EXPECT_EQ(merge_views({a}), a);
  EXPECT_THROW(merge_views({}), std::invalid_argument);
  std::vector<GaussianSet> views(5, GaussianSet(std::vector<Real>(32 * 32 * 14)));
  EXPECT_EQ(merge_views(views).size(), 5120u);
}

TEST(Gaussians, MismatchedSizesRejected) {
  EXPECT_THROW(AttributeMap({2, 2}, std::vector<Real>(11 * 4)), std::invalid_argument);
  EXPECT_THROW(activate_attributes(AttributeMap({2, 2}, std::vector<Real>(48)), ray_map(test_camera(0, 0, {3, 3}))),
               std::invalid_argument);
  EXPECT_THROW(GaussianSet(std::vector<Real>(13)), std::invalid_argument);
}

TEST(Gaussians, TransformToWorldInvertsNormalization) {
  const std::vector<Camera> cams{test_camera(70, 25), test_camera(160, -10)};
  const auto frame = normalize_camera_frame(cams, 0, 1.3);
  const auto world = random_scene(20, 9);
  // Express the scene in the normalized frame by hand, then map back.
  GaussianSet normalized = world;
  const Eigen::Quaternion<Real> qn(frame.rotation);
  for (std::size_t i = 0; i < world.size(); ++i) {
    auto rec = normalized.record(i);
    const Vec3 c = frame.scale * (frame.rotation * world.center(i));
    for (int k = 0; k < 3; ++k) rec[GaussianSet::kCenter + k] = c[k];
    for (int k = 0; k < 3; ++k) rec[GaussianSet::kScale + k] *= frame.scale;
    const Vec4 q = world.rotation(i);
    const auto r = qn * Eigen::Quaternion<Real>(q[0], q[1], q[2], q[3]);
    rec[GaussianSet::kRotation] = r.w();
    rec[GaussianSet::kRotation + 1] = r.x();
    rec[GaussianSet::kRotation + 2] = r.y();
    rec[GaussianSet::kRotation + 3] = r.z();
  }
  // Rendering is frame-independent: the normalized camera sees the same image.
  const auto a = render(normalized, frame.cameras[1]);
  const auto b = render(world, cams[1]);
  EXPECT_LT(max_abs_difference(a, b), 1e-9);
  const auto back = transform_to_world(normalized, frame.rotation, frame.scale);
  for (std::size_t i = 0; i < world.data.size(); ++i) EXPECT_NEAR(back.data[i], world.data[i], 1e-12);
}

TEST(Gaussians, NvgsRoundTripAndErrors) {
  const auto set = random_scene(7, 4);
  const auto bytes = encode_nvgs(set);
  ASSERT_EQ(bytes.size(), 12u + 7 * 14 * 4);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "NVGS");
  EXPECT_EQ(bytes[4], 1);  // version, little-endian
  EXPECT_EQ(bytes[8], 7);  // count
  const auto back = decode_nvgs(bytes);
  ASSERT_EQ(back.size(), 7u);
  for (std::size_t i = 0; i < set.data.size(); ++i) EXPECT_EQ(back.data[i], static_cast<float>(set.data[i]));

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_nvgs(bad), std::runtime_error);
  bad = bytes;
  bad[4] = 9;
  EXPECT_THROW(decode_nvgs(bad), std::runtime_error);
  bad = bytes;
  bad.pop_back();
  EXPECT_THROW(decode_nvgs(bad), std::runtime_error);

  const auto path = std::filesystem::temp_directory_path() / "novelgs_roundtrip.nvgs";
  write_nvgs(path, set);
  EXPECT_EQ(read_nvgs(path), back);
  std::filesystem::remove(path);
  EXPECT_THROW(read_nvgs(path), std::runtime_error);
}
