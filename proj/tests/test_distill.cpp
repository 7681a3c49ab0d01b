#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "pod/distill.hpp"
#include "test_util.hpp"

using namespace pod;

namespace {

constexpr double kDeg = kPi / 180.0;

Vec3 camera_center(const Pose& object_to_camera) { return -(object_to_camera.R.transpose() * object_to_camera.t); }

struct Fixture {
  ObjectTemplate tpl = build_template(TemplateKind::kRevolute2, 60, 1);
  Camera cam;
  TrajectoryState traj;

  Fixture() {
    const auto script = default_script(TemplateKind::kRevolute2, tpl);
    std::vector<PoseConfig> poses;
    for (int i = 0; i < 24; ++i) poses.push_back(script_config(tpl, script, i / 24.0));
    traj = TrajectoryState::from_poses(poses);
  }

  DistillConfig small() const {
    DistillConfig c;
    c.n_azimuth = 12;
    c.n_elevation = 3;
    c.n_near = 20;
    return c;
  }
};

bool same_parts(const std::vector<Pose>& a, const std::vector<Pose>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t p = 0; p < a.size(); ++p)
    if (a[p].R != b[p].R || a[p].t != b[p].t) return false;
  return true;
}

}  // namespace

TEST(Hemisphere, FullGridCount) { EXPECT_EQ(sample_hemisphere(2.4, 600, 30, 1).size(), 18000u); }

TEST(Hemisphere, RadiusAndViewingCone) {
  const double d = 2.4, perturb = 20.0 * kDeg;
  const auto views = sample_hemisphere(d, 60, 10, 7, perturb);
  for (const auto& v : views) {
    EXPECT_TRUE(is_rotation(v.R));
    const double r = v.t.norm();  // distance from the camera center to the object origin
    EXPECT_GE(r, 0.5 * d - 1e-12);
    EXPECT_LE(r, d + 1e-12);
    // Angle between the optical axis and the ray to the origin.
    const double angle = std::acos(std::clamp(v.t.normalized().z(), -1.0, 1.0));
    EXPECT_LE(angle, perturb + 1e-9);
    EXPECT_GT(camera_center(v).z(), 0.0);  // upper hemisphere
  }
}

TEST(Hemisphere, ZeroPerturbationLooksAtOrigin) {
  for (const auto& v : sample_hemisphere(2.0, 8, 4, 3, 0.0)) {
    EXPECT_NEAR(v.t.x(), 0.0, 1e-12);
    EXPECT_NEAR(v.t.y(), 0.0, 1e-12);
    EXPECT_GT(v.t.z(), 0.0);
  }
}

TEST(Hemisphere, AzimuthHistogramIsUniform) {
  const int bins = 12, n_az = 120, n_el = 10;
  const auto views = sample_hemisphere(2.4, n_az, n_el, 5);
  std::vector<int> hist(bins, 0);
  for (const auto& v : views) {
    const Vec3 c = camera_center(v);
    double az = std::atan2(c.y(), c.x());
    if (az < 0) az += 2.0 * kPi;
    // Half-bin shift keeps grid azimuths off the bin edges.
    hist[static_cast<int>(std::floor((az / (2.0 * kPi) * bins) + 0.5)) % bins]++;
  }
  const double n = static_cast<double>(views.size()), p = 1.0 / bins;
  const double sigma = std::sqrt(n * p * (1 - p));
  for (int h : hist) EXPECT_LE(std::abs(h - n * p), 3.0 * sigma);
}

TEST(Hemisphere, DeterministicPerSeed) {
  const auto a = sample_hemisphere(2.4, 10, 3, 42), b = sample_hemisphere(2.4, 10, 3, 42);
  const auto c = sample_hemisphere(2.4, 10, 3, 43);
  ASSERT_EQ(a.size(), b.size());
  bool differs = false;
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].R, b[k].R);
    EXPECT_EQ(a[k].t, b[k].t);
    differs |= a[k].t != c[k].t;
  }
  EXPECT_TRUE(differs);
  EXPECT_THROW(sample_hemisphere(2.4, 0, 3, 1), Error);
}

TEST(NearCamera, PerturbationsWithinBounds) {
  std::mt19937_64 rng(9);
  std::vector<Pose> cams;
  for (int i = 0; i < 10; ++i) cams.push_back(look_at(Vec3(2.0 * std::cos(i), 2.0 * std::sin(i), 1.0)));
  const double rb = 10.0 * kDeg, tb = 0.24;
  std::vector<int> src;
  const auto aug = sample_near_camera(cams, 500, rb, tb, 3, &src);
  ASSERT_EQ(aug.size(), 500u);
  ASSERT_EQ(src.size(), 500u);
  std::set<int> used;
  for (std::size_t k = 0; k < aug.size(); ++k) {
    const Pose& s = cams[src[k]];
    EXPECT_LE(rotation_angle(s.R.transpose() * aug[k].R), rb + 1e-9);
    EXPECT_LE((aug[k].t - s.t).norm(), tb + 1e-12);
    // The combined distance obeys the sum of both bounds.
    EXPECT_LE(se3_distance(s, aug[k]), rb + tb + 1e-9);
    used.insert(src[k]);
  }
  EXPECT_EQ(used.size(), cams.size());
}

TEST(NearCamera, ZeroBoundsCopyAndZeroCountIsEmpty) {
  std::vector<Pose> cams = {look_at(Vec3(2, 0, 1)), look_at(Vec3(0, 2, 1))};
  std::vector<int> src;
  const auto copies = sample_near_camera(cams, 20, 0.0, 0.0, 1, &src);
  for (std::size_t k = 0; k < copies.size(); ++k) {
    EXPECT_TRUE(copies[k].R.isApprox(cams[src[k]].R, 1e-15));
    EXPECT_EQ(copies[k].t, cams[src[k]].t);
  }
  EXPECT_TRUE(sample_near_camera(cams, 0, 0.1, 0.1, 1).empty());
  EXPECT_THROW(sample_near_camera({}, 3, 0.1, 0.1, 1), Error);
}

TEST(BuildDataset, LoopZeroIsHemispherePlusIdentity) {
  Fixture f;
  auto cfg = f.small();
  const auto ds = build_dataset(f.tpl, f.traj, f.cam, cfg, 0, 1, 8);
  const int n_hemi = cfg.n_azimuth * cfg.n_elevation;
  EXPECT_EQ(ds.count(SampleSource::kHemisphere), static_cast<std::size_t>(n_hemi));
  EXPECT_EQ(ds.count(SampleSource::kIdentity), static_cast<std::size_t>(n_hemi));  // mix 0.5
  EXPECT_EQ(ds.count(SampleSource::kNearCamera), 0u);
  EXPECT_EQ(ds.count(SampleSource::kOriginal), 0u);
  const auto rest = rest_config(f.tpl).parts;
  for (std::size_t k = 0; k < ds.size(); ++k) {
    if (ds.sources[k] == SampleSource::kHemisphere) {
      ASSERT_GE(ds.frames[k], 0);
      const auto canon = canonicalize(f.tpl, f.traj.poses[ds.frames[k]]);
      EXPECT_TRUE(same_parts(ds.samples[k].label.parts, canon.parts));
    } else {
      EXPECT_EQ(ds.frames[k], -1);
      EXPECT_TRUE(same_parts(ds.samples[k].label.parts, rest));
    }
  }
  cfg.identity_mix = 0.0;
  EXPECT_EQ(build_dataset(f.tpl, f.traj, f.cam, cfg, 0, 1, 8).size(), static_cast<std::size_t>(n_hemi));
  EXPECT_EQ(build_dataset(f.tpl, f.traj, f.cam, f.small(), 0, 1, 8, false).size(), static_cast<std::size_t>(n_hemi));
}

TEST(BuildDataset, LaterLoopsUpsampleOriginals) {
  Fixture f;
  const auto cfg = f.small();
  const auto ds = build_dataset(f.tpl, f.traj, f.cam, cfg, 1, 2, 8);
  const std::size_t n_hemi = cfg.n_azimuth * cfg.n_elevation;
  EXPECT_EQ(ds.count(SampleSource::kHemisphere), n_hemi);
  EXPECT_EQ(ds.count(SampleSource::kNearCamera), static_cast<std::size_t>(cfg.n_near));
  EXPECT_EQ(ds.count(SampleSource::kIdentity), 0u);
  EXPECT_EQ(ds.count(SampleSource::kOriginal), n_hemi + cfg.n_near);
  // Every frame appears, each about equally often.
  std::vector<int> uses(f.traj.size(), 0);
  for (std::size_t k = 0; k < ds.size(); ++k) {
    if (ds.sources[k] != SampleSource::kOriginal) continue;
    const auto canon = canonicalize(f.tpl, f.traj.poses[ds.frames[k]]);
    EXPECT_EQ(ds.samples[k].label.object.t, canon.object.t);
    EXPECT_TRUE(same_parts(ds.samples[k].label.parts, canon.parts));
    uses[ds.frames[k]]++;
  }
  const auto [lo, hi] = std::minmax_element(uses.begin(), uses.end());
  EXPECT_LE(*hi - *lo, 1);
  EXPECT_GE(*lo, 1);
}

TEST(BuildDataset, WithoutViewAugmentationOnlyOriginals) {
  Fixture f;
  auto cfg = f.small();
  cfg.view_aug = false;
  const std::size_t n_hemi = cfg.n_azimuth * cfg.n_elevation;
  for (int loop : {0, 2}) {
    const auto ds = build_dataset(f.tpl, f.traj, f.cam, cfg, loop, 2, 8);
    EXPECT_EQ(ds.count(SampleSource::kOriginal), ds.size());
    EXPECT_EQ(ds.size(), n_hemi + (loop > 0 ? cfg.n_near : 0));
  }
}

TEST(BuildDataset, InvalidFramesAreNeverUsed) {
  Fixture f;
  auto traj = f.traj;
  for (int i = 0; i < traj.size(); i += 2) traj.valid[i] = false;
  const auto ds = build_dataset(f.tpl, traj, f.cam, f.small(), 1, 3, 8);
  for (int fr : ds.frames) EXPECT_TRUE(fr < 0 || traj.valid[fr]);
  traj.valid.assign(traj.size(), false);
  EXPECT_THROW(build_dataset(f.tpl, traj, f.cam, f.small(), 1, 3, 8), Error);
}

TEST(BuildDataset, RerenderingLabelsReproducesSamples) {
  Fixture f;
  const auto ds = build_dataset(f.tpl, f.traj, f.cam, f.small(), 1, 4, 8);
  for (std::size_t k = 0; k < ds.size(); k += 7) {
    const auto again = make_sample(f.tpl, ds.samples[k].label, f.cam, 8);
    EXPECT_EQ(again.desc.values, ds.samples[k].desc.values);
    EXPECT_EQ(again.bbox, ds.samples[k].bbox);
  }
}

TEST(BuildDataset, DeterministicPerSeed) {
  Fixture f;
  const auto a = build_dataset(f.tpl, f.traj, f.cam, f.small(), 1, 5, 8);
  const auto b = build_dataset(f.tpl, f.traj, f.cam, f.small(), 1, 5, 8);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a.frames[k], b.frames[k]);
    EXPECT_EQ(a.samples[k].desc.values, b.samples[k].desc.values);
  }
}

TEST(BuildDataset, IdentityDatasetUsesRestParts) {
  Fixture f;
  const auto cfg = f.small();
  const auto ds = build_identity_dataset(f.tpl, f.cam, cfg, 1, 8);
  EXPECT_EQ(ds.size(), static_cast<std::size_t>(cfg.n_azimuth * cfg.n_elevation));
  const auto rest = rest_config(f.tpl).parts;
  for (const auto& s : ds.samples) EXPECT_TRUE(same_parts(s.label.parts, rest));
}

TEST(DatasetFiles, RoundTrip) {
  Fixture f;
  auto cfg = f.small();
  cfg.n_azimuth = 4;
  cfg.n_near = 5;
  const auto ds = build_dataset(f.tpl, f.traj, f.cam, cfg, 1, 6, 8);
  const auto dir = std::filesystem::temp_directory_path() / "pod_test_dataset";
  std::filesystem::remove_all(dir);
  save_dataset(dir, f.tpl, f.cam, ds);
  const auto back = load_dataset(dir);
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t k = 0; k < ds.size(); ++k) {
    EXPECT_EQ(back.sources[k], ds.sources[k]);
    EXPECT_EQ(back.frames[k], ds.frames[k]);
    EXPECT_EQ(back.samples[k].label.object.t, ds.samples[k].label.object.t);
    EXPECT_EQ(back.samples[k].bbox, ds.samples[k].bbox);
    ASSERT_EQ(back.samples[k].desc.values.size(), ds.samples[k].desc.values.size());
    for (std::size_t v = 0; v < ds.samples[k].desc.values.size(); ++v)
      EXPECT_NEAR(back.samples[k].desc.values[v], ds.samples[k].desc.values[v], 1e-5);  // stored as f32
  }
  std::filesystem::remove_all(dir);
}
