#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>

#include "pod/cycle.hpp"
#include "test_util.hpp"

using namespace pod;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.points_per_part = 40;
  c.frames = 24;
  c.loops = 2;
  c.schedule.epochs = 3;
  c.prealign_steps = 2;
  c.baseline.steps_first = 10;
  c.baseline.steps_per_frame = 5;
  c.baseline.search_azimuths = 8;
  c.baseline.search_elevations = 2;
  c.distill.n_azimuth = 8;
  c.distill.n_elevation = 3;
  c.distill.n_near = 12;
  c.grid = 4;
  c.hidden = 16;
  c.epochs_first = 4;
  c.epochs_finetune = 3;
  c.eval_points = 60;
  c.eval_subset = 10;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("pod_test_cycle_" + name);
  fs::remove_all(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

bool same_poses(const TrajectoryState& a, const TrajectoryState& b) {
  if (a.size() != b.size() || a.valid != b.valid) return false;
  for (int i = 0; i < a.size(); ++i) {
    if (a.poses[i].object.R != b.poses[i].object.R || a.poses[i].object.t != b.poses[i].object.t) return false;
    for (std::size_t p = 0; p < a.poses[i].parts.size(); ++p)
      if (a.poses[i].parts[p].R != b.poses[i].parts[p].R || a.poses[i].parts[p].t != b.poses[i].parts[p].t)
        return false;
  }
  return true;
}

std::vector<std::string> labels_of(const CycleResult& r) {
  std::vector<std::string> out;
  for (const auto& rec : r.records) out.push_back(rec.label + "@" + std::to_string(rec.loop));
  return out;
}

}  // namespace

TEST(Config, JsonRoundTripIsExact) {
  auto c = depth_ambiguity_preset();
  c.loops = 3;
  c.ablation = Ablation::kNoMultiview;
  c.train.augment.mask_prob = 0.25;
  c.baseline.max_velocity_rot = 0.2;
  const auto j = config_to_json(c);
  EXPECT_EQ(config_to_json(config_from_json(j)), j);
  // Missing fields keep defaults.
  EXPECT_EQ(config_to_json(config_from_json(nlohmann::json::object())), config_to_json(ExperimentConfig{}));
}

TEST(Config, ValidationRejectsBadValues) {
  auto c = tiny_config();
  c.frames = 3;
  EXPECT_THROW(c.validate(), Error);
  c = tiny_config();
  c.dct_keep = 0.0;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_THROW(config_from_json({{"loops", -1}}), Error);
  EXPECT_THROW(config_from_json({{"template", "teapot"}}), Error);
  EXPECT_THROW(config_from_json({{"ablation", "no_everything"}}), Error);
}

TEST(Config, AblationNamesRoundTrip) {
  for (auto a : {Ablation::kNone, Ablation::kNoViewAug, Ablation::kNoBaselineInit, Ablation::kNoMultiview,
                 Ablation::kBaselineOnly})
    EXPECT_EQ(parse_ablation(to_string(a)), a);
  try {
    parse_ablation("no_views");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kUnknownKind);
  }
}

TEST(Manifest, Fnv1aReferenceVectors) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(fnv1a64("foobar"), 0x85944171f73967e8ull);
}

TEST(Manifest, DetectsChangedAndMissingFiles) {
  const auto d = fresh_dir("manifest");
  fs::create_directories(d / "sub");
  std::ofstream(d / "a.txt") << "alpha";
  std::ofstream(d / "sub" / "b.bin") << "beta";
  write_manifest(d);
  EXPECT_TRUE(verify_manifest(d).empty());
  std::ofstream(d / "a.txt") << "ALPHA";
  fs::remove(d / "sub" / "b.bin");
  auto bad = verify_manifest(d);
  std::sort(bad.begin(), bad.end());
  EXPECT_EQ(bad, (std::vector<std::string>{"a.txt", "sub/b.bin"}));
  fs::remove_all(d);
}

TEST(Interpolate, FillsGapsGeodesicallyAndCopiesEnds) {
  std::mt19937_64 rng(4);
  const Pose a = pod::testing::random_pose(rng);
  const Twist step = pod::testing::random_twist(rng, 0.6, 0.4);
  std::vector<PoseConfig> poses;
  for (int i = 0; i < 7; ++i) poses.push_back({a * exp(step * i), {exp(step * (0.5 * i))}});
  const auto truth = poses;
  std::vector<bool> have = {false, true, false, false, true, false, false};
  for (int i = 0; i < 7; ++i)
    if (!have[i]) poses[i] = PoseConfig{Pose{}, {Pose{}}};
  const auto out = interpolate_invalid(poses, have);
  // Frames 2 and 3 lie on the screw motion between 1 and 4.
  for (int i : {2, 3}) {
    EXPECT_LT((out[i].object.R - truth[i].object.R).norm(), 1e-9);
    EXPECT_LT((out[i].object.t - truth[i].object.t).norm(), 1e-9);
    EXPECT_LT((out[i].parts[0].t - truth[i].parts[0].t).norm(), 1e-9);
  }
  EXPECT_EQ(out[0].object.t, truth[1].object.t);
  EXPECT_EQ(out[5].object.t, truth[4].object.t);
  EXPECT_EQ(out[6].object.t, truth[4].object.t);
  EXPECT_THROW(interpolate_invalid(poses, std::vector<bool>(7, false)), Error);
  EXPECT_THROW(interpolate_invalid(poses, std::vector<bool>(3, true)), Error);
}

TEST(Interpolate, HalfTurnApartDoesNotThrow) {
  const Pose a;
  const Pose b(so3_exp(Vec3(kPi, 0, 0)), Vec3(1, 0, 0));
  EXPECT_NO_THROW(interpolate_pose(a, b, 0.3));
}

TEST(Cycle, WritesEveryArtifactAndVerifies) {
  const auto d = fresh_dir("artifacts");
  const auto cfg = tiny_config();
  std::vector<std::string> stages;
  const auto r = run_cycle(cfg, d, [&](const std::string& s) { stages.push_back(s); });
  ASSERT_EQ(r.loops.size(), 2u);
  for (const char* f : {"config.json", "baseline.json", "baseline_smoothed.json", "report.json", "pcp_vs_loop.csv",
                        "timings.json", "manifest.json", "loop_0/predictor.bin", "loop_0/loss_curve.csv",
                        "loop_0/predictions.json", "loop_0/metrics.json", "loop_1/prealigned.json",
                        "loop_1/optimized.json", "loop_1/telemetry.csv", "loop_1/metrics.json"})
    EXPECT_TRUE(fs::exists(d / f)) << f;
  EXPECT_TRUE(verify_manifest(d).empty());
  EXPECT_EQ(load_config(d / "config.json").frames, cfg.frames);
  EXPECT_EQ(labels_of(r), (std::vector<std::string>{
                              "baseline@0", "baseline_subset@0", "raw_prediction@0", "raw_prediction_subset@0",
                              "pod@0", "pod_subset@0", "optimized@1", "optimized_subset@1", "raw_prediction@1",
                              "raw_prediction_subset@1", "pod@1", "pod_subset@1"}));
  EXPECT_EQ(load_report(d).size(), r.records.size());
  EXPECT_NE(std::find(stages.begin(), stages.end(), "loop1/optimize"), stages.end());
  EXPECT_TRUE(r.timings.contains("loop1/train"));
  // Loop-0 distillation mixes hemisphere and rest views; later loops add
  // near-camera views and the optimized frames.
  EXPECT_GT(r.loops[1].dataset_size, r.loops[0].dataset_size);
  fs::remove_all(d);
}

TEST(Cycle, ZeroLoopsGivesBaselineOnly) {
  auto cfg = tiny_config();
  cfg.loops = 0;
  const auto r = run_cycle(cfg);
  EXPECT_TRUE(r.loops.empty());
  EXPECT_EQ(labels_of(r), (std::vector<std::string>{"baseline@0", "baseline_subset@0"}));
  EXPECT_EQ(&final_metrics(r), &*r.baseline_metrics);
}

TEST(Cycle, BaselineOnlyReproducesTrackerExactly) {
  const auto cfg = tiny_config();
  const auto sc = make_scenario(cfg);
  const auto r = run_ablation(cfg, Ablation::kBaselineOnly, sc);
  BaselineOptions bo = cfg.baseline;
  bo.seed = detail::mix_seed(cfg.seed, 0xba5e);
  EXPECT_TRUE(same_poses(r.baseline, baseline_incremental(sc.tpl, sc.video, bo)));
  EXPECT_TRUE(r.loops.empty());
}

TEST(Cycle, AblationsChangeOnlyTheirStage) {
  const auto cfg = tiny_config();
  const auto sc = make_scenario(cfg);
  const auto d = fresh_dir("ablations");
  const auto full = run_ablation(cfg, Ablation::kNone, sc, d / "full");
  const auto nomv = run_ablation(cfg, Ablation::kNoMultiview, sc, d / "nomv");
  const auto noaug = run_ablation(cfg, Ablation::kNoViewAug, sc);
  const auto noinit = run_ablation(cfg, Ablation::kNoBaselineInit, sc);

  // Matching is only used from loop 1 on, so loop 0 is shared.
  EXPECT_TRUE(same_poses(full.loops[0].predicted, nomv.loops[0].predicted));
  EXPECT_EQ(slurp(d / "full/loop_0/predictor.bin"), slurp(d / "nomv/loop_0/predictor.bin"));
  // The matched column of the telemetry is zero without matching.
  std::ifstream tel(d / "nomv/loop_1/telemetry.csv");
  std::string line;
  std::getline(tel, line);
  int rows = 0;
  while (std::getline(tel, line)) {
    EXPECT_EQ(line.substr(line.rfind(',') + 1), "0") << line;
    ++rows;
  }
  EXPECT_EQ(rows, cfg.schedule.epochs);

  // Same baseline, different distillation views.
  EXPECT_TRUE(same_poses(full.baseline, noaug.baseline));
  EXPECT_FALSE(same_poses(full.loops[0].predicted, noaug.loops[0].predicted));

  // No tracker at all; loop 0 learns from rest-configuration views.
  EXPECT_EQ(noinit.baseline.size(), 0);
  EXPECT_FALSE(noinit.baseline_metrics.has_value());
  EXPECT_EQ(noinit.loops[0].dataset_size,
            static_cast<std::size_t>(cfg.distill.n_azimuth * cfg.distill.n_elevation));
  EXPECT_EQ(noinit.records.front().label, "raw_prediction");
  fs::remove_all(d);
}

TEST(Cycle, RerunIsByteIdentical) {
  const auto cfg = tiny_config();
  const auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
  run_cycle(cfg, a);
  run_cycle(cfg, b);
  for (const char* f : {"report.json", "pcp_vs_loop.csv", "loop_0/metrics.json", "loop_1/metrics.json",
                        "loop_1/optimized.json", "loop_1/predictor.bin"})
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Cycle, StageFailureIsTaggedAndKeepsPartialArtifacts) {
  auto cfg = tiny_config();
  cfg.train.lr = std::numeric_limits<double>::quiet_NaN();
  const auto d = fresh_dir("failure");
  try {
    run_cycle(cfg, d);
    FAIL() << "expected a stage failure";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kStage);
    EXPECT_NE(std::string(e.what()).find("loop0/train"), std::string::npos) << e.what();
  }
  EXPECT_TRUE(fs::exists(d / "baseline.json"));
  EXPECT_TRUE(fs::exists(d / "report.json"));
  EXPECT_TRUE(verify_manifest(d).empty());
  EXPECT_EQ(load_report(d).front().label, "baseline");
  fs::remove_all(d);
}
