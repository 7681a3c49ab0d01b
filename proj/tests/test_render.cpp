#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <random>

#include "pod/render.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace pod;
using pod::testing::random_twist;
using pod::testing::rel_error;
using pod::testing::random_image_grad;
using pod::testing::random_scene_pose;
using pod::testing::weighted_sum;

namespace {

ObjectTemplate single_point_template(const VecX& feature, double radius = 0.03) {
  ObjectTemplate tpl;
  tpl.feature_dim = static_cast<int>(feature.size());
  Part p;
  p.points.push_back({Vec3::Zero(), feature, radius});
  tpl.parts.push_back(p);
  return tpl;
}




}  // namespace

TEST(Render, SinglePointAtCenter) {
  VecX f(4);
  f << 0.3, -1.0, 2.0, 0.5;
  const auto tpl = single_point_template(f, 0.05);
  Camera cam;
  cam.cx = cam.cy = 32.0;
  PoseConfig cfg = rest_config(tpl, Pose::from_translation(Vec3(0, 0, 2.0)));
  const auto img = render(tpl, cfg, cam);
  const std::size_t center = 32 * 64 + 32;
  // Kernel sum at the center is exactly 1, so coverage is 1 - exp(-kappa).
  const double cov = 1.0 - std::exp(-RenderParams{}.kappa);
  for (int d = 0; d < 4; ++d) EXPECT_NEAR(img.feature(center)[d], cov * f[d], 1e-12);
  std::size_t best = 0;
  for (std::size_t pix = 0; pix < img.pixels(); ++pix)
    if (img.opacity[pix] > img.opacity[best]) best = pix;
  EXPECT_EQ(best, center);
  // Footprint is 72 * 0.05 / 2 = 1.8 px; support ends at sqrt(2 * 16) of that.
  const int reach = static_cast<int>(std::sqrt(2.0 * detail::kTaperEnd) * 1.8);
  for (int k = 0; k < reach; ++k) EXPECT_GT(img.opacity[center + k], img.opacity[center + k + 1]);
  EXPECT_EQ(img.opacity[center + reach + 1], 0.0);
  EXPECT_NEAR(img.depth[center], cov * 2.0, 1e-12);
}

TEST(Render, SoftZTestOccludesFarPoint) {
  RenderParams rp;
  ObjectTemplate tpl;
  tpl.feature_dim = 2;
  Part p;
  VecX near_f(2), far_f(2);
  near_f << 1.0, 0.0;
  far_f << 0.0, 1.0;
  const double z1 = 2.0, z2 = z1 + 10.0 / rp.beta;
  p.points.push_back({Vec3(0, 0, 0), near_f, 0.05});
  p.points.push_back({Vec3(0, 0, z2 - z1), far_f, 0.05 * z2 / z1});  // same footprint in pixels
  tpl.parts.push_back(p);
  Camera cam;
  cam.cx = cam.cy = 32.0;
  const auto img = render(tpl, rest_config(tpl, Pose::from_translation(Vec3(0, 0, z1))), cam, rp);
  const double* c = img.feature(32 * 64 + 32);
  // Hand-evaluated weights: w_far / w_near = exp(-10).
  const double r = std::exp(-10.0);
  const double cov = 1.0 - std::exp(-rp.kappa * (1.0 + 1.0));
  EXPECT_NEAR(c[0], cov / (1.0 + r), 1e-12);
  EXPECT_LT(std::abs(c[0] - 1.0) + std::abs(c[1]), 1e-3);
}

TEST(Render, TranslationShiftsImageByOnePixel) {
  const auto tpl = build_template(TemplateKind::kRevolute2, 200, 7);
  Camera cam;
  cam.fx = cam.fy = 600.0;  // far, long-focal camera keeps the shift uniform across depth
  const double dist = 20.0;
  PoseConfig cfg = rest_config(tpl, Pose::from_translation(Vec3(0, 0, dist)) * axis_angle(Vec3(1, 1, 0), 0.6));
  RenderParams rp;
  rp.sigma = 0.15;
  const auto base = render(tpl, cfg, cam, rp);
  PoseConfig moved = cfg;
  moved.object.t.x() += dist / cam.fx;
  const auto shifted = render(tpl, moved, cam, rp);
  double num = 0.0, den = 0.0;
  for (int r = 0; r < 64; ++r)
    for (int c = 1; c < 64; ++c) {
      const std::size_t a = r * 64 + c, b = r * 64 + c - 1;
      for (int d = 0; d < base.dim; ++d) {
        const double diff = shifted.opacity[a] * shifted.feature(a)[d] - base.opacity[b] * base.feature(b)[d];
        num += diff * diff;
        den += std::pow(base.opacity[b] * base.feature(b)[d], 2);
      }
    }
  EXPECT_LT(std::sqrt(num / den), 0.05);
}

TEST(Render, ZeroImageGradientGivesZeroGrads) {
  std::mt19937_64 rng(1);
  const auto tpl = build_template(TemplateKind::kRevolute2, 40, 3);
  const auto cfg = random_scene_pose(tpl, rng);
  Camera cam;
  const auto img = render(tpl, cfg, cam);
  const auto g = render_backward(tpl, cfg, cam, {}, ImageGrad(img));
  EXPECT_EQ(g.object, Vec6::Zero());
  for (const auto& p : g.parts) EXPECT_EQ(p, Vec6::Zero());
}

TEST(Render, GradientMatchesFiniteDifferences) {
  const auto s = pod::testing::render_gradient_suite(20, 2);
  EXPECT_LT(s.max_rel, 1e-4) << s.worst;
  EXPECT_GT(s.checked, 20 * 18 * 0.9);
}

TEST(Render, ObjectGradientIsAdjointSumOfPartGradients) {
  std::mt19937_64 rng(3);
  const auto tpl = build_template(TemplateKind::kMultibody3, 40, 5);
  const auto cfg = random_scene_pose(tpl, rng);
  Camera cam;
  const auto img = render(tpl, cfg, cam);
  const auto g = render_backward(tpl, cfg, cam, {}, random_image_grad(img, rng));
  // O exp(d) P = O P exp(Ad_{P^-1} d)  =>  grad_O = sum_p Ad_{P^-1}^T grad_P.
  Vec6 sum = Vec6::Zero();
  for (std::size_t p = 0; p < tpl.parts.size(); ++p) sum += adjoint(cfg.parts[p].inverse()).transpose() * g.parts[p];
  EXPECT_LT((sum - g.object).norm(), 1e-9 * std::max(1.0, g.object.norm()));
}

TEST(Render, DeterministicAndBounded) {
  std::mt19937_64 rng(4);
  const auto tpl = build_template(TemplateKind::kRevolute3, 100, 4);
  const auto cfg = random_scene_pose(tpl, rng);
  Camera cam;
  const auto a = render(tpl, cfg, cam), b = render(tpl, cfg, cam);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.depth, b.depth);
  EXPECT_EQ(a.opacity, b.opacity);
  for (std::size_t pix = 0; pix < a.pixels(); ++pix) {
    EXPECT_GE(a.opacity[pix], 0.0);
    EXPECT_LT(a.opacity[pix], 1.0);
    if (a.opacity[pix] > 1e-3) {
      EXPECT_TRUE(std::isfinite(a.depth[pix]));
    }
  }
}

TEST(Render, CameraEquivariance) {
  std::mt19937_64 rng(5);
  const auto tpl = build_template(TemplateKind::kRevolute2, 100, 6);
  const auto cfg = random_scene_pose(tpl, rng);
  const Pose delta = pod::exp(random_twist(rng, 0.2, 0.1));
  PoseConfig moved = cfg;
  moved.object = delta * cfg.object;
  Camera cam, moved_cam;
  moved_cam.extrinsic = delta;  // camera moved by delta^-1
  const auto a = render(tpl, moved, cam), b = render(tpl, cfg, moved_cam);
  for (std::size_t i = 0; i < a.features.size(); ++i) ASSERT_NEAR(a.features[i], b.features[i], 1e-6);
  for (std::size_t i = 0; i < a.opacity.size(); ++i) ASSERT_NEAR(a.opacity[i], b.opacity[i], 1e-6);
}

TEST(Render, PointBehindCameraIsFlagged) {
  const auto tpl = build_template(TemplateKind::kRevolute2, 40, 3);
  const auto img = render(tpl, rest_config(tpl, Pose::from_translation(Vec3(0, 0, 0.0))), Camera{});
  EXPECT_TRUE(img.clipped);
  const auto ok = render(tpl, rest_config(tpl, Pose::from_translation(Vec3(0, 0, 2.4))), Camera{});
  EXPECT_FALSE(ok.clipped);
}

TEST(Render, BinaryDumpLayout) {
  const auto tpl = build_template(TemplateKind::kRevolute2, 40, 3);
  const auto img = render(tpl, rest_config(tpl, Pose::from_translation(Vec3(0, 0, 2.4))), Camera{});
  const auto path = (std::filesystem::temp_directory_path() / "pod_render_dump.bin").string();
  write_feature_image(path, img);
  EXPECT_EQ(std::filesystem::file_size(path), 12u + 4u * (img.features.size() + 2 * img.pixels()));
  const auto back = read_feature_image(path);
  EXPECT_EQ(back.height, 64);
  EXPECT_EQ(back.dim, 16);
  for (std::size_t i = 0; i < img.features.size(); ++i)
    EXPECT_EQ(back.features[i], static_cast<double>(static_cast<float>(img.features[i])));
  std::remove(path.c_str());
}
