#pragma once

// Experiment orchestration: the predict, optimize, distill loop, its
// baseline and ablations, and the files a run leaves behind.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pod/capture.hpp"
#include "pod/distill.hpp"
#include "pod/error.hpp"
#include "pod/evalrep.hpp"
#include "pod/matching.hpp"
#include "pod/optim.hpp"
#include "pod/predictor.hpp"
#include "pod/scene.hpp"

namespace pod {

enum class Ablation { kNone, kNoViewAug, kNoBaselineInit, kNoMultiview, kBaselineOnly };

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::kNone: return "none";
    case Ablation::kNoViewAug: return "no_view_aug";
    case Ablation::kNoBaselineInit: return "no_baseline_init";
    case Ablation::kNoMultiview: return "no_multiview";
    case Ablation::kBaselineOnly: return "baseline_only";
  }
  return "none";
}

inline Ablation parse_ablation(std::string_view s) {
  for (auto a : {Ablation::kNone, Ablation::kNoViewAug, Ablation::kNoBaselineInit, Ablation::kNoMultiview,
                 Ablation::kBaselineOnly})
    if (s == to_string(a)) return a;
  throw Error(ErrorKind::kUnknownKind, "unknown ablation '" + std::string(s) + "'");
}

struct ExperimentConfig {
  TemplateKind kind = TemplateKind::kRevolute2;
  int points_per_part = 150;
  std::uint64_t template_seed = 1;
  int frames = 180;
  std::uint64_t capture_seed = 1;
  DegradeConfig degrade;
  std::optional<MotionScript> script;  // default motion for the template when empty
  Camera camera;

  int loops = 4;  // including loop 0; 0 runs the baseline only
  LossWeights weights;
  OptimSchedule schedule;
  int prealign_steps = 15;
  int nms_window = 5;
  BaselineOptions baseline;
  DistillConfig distill;

  int grid = 16;
  int hidden = 256;
  int epochs_first = 250;
  int epochs_finetune = 150;
  TrainConfig train;  // epochs are taken from the two fields above

  int eval_points = 500;
  std::uint64_t eval_seed = 3;
  int eval_subset = 30;  // leading frames evaluated separately
  double dct_keep = 0.25;

  Ablation ablation = Ablation::kNone;
  bool save_datasets = false;
  std::uint64_t seed = 1;

  void validate() const {
    require(points_per_part >= 1 && frames >= 8 && loops >= 0 && prealign_steps >= 0 && nms_window >= 0 &&
                grid >= 1 && hidden >= 1 && epochs_first >= 0 && epochs_finetune >= 0 && eval_points >= 1 &&
                eval_subset >= 1 && dct_keep > 0 && dct_keep <= 1,
            ErrorKind::kInvalidArgument, "invalid experiment configuration");
    require(camera.valid(), ErrorKind::kInvalidArgument, "invalid camera");
  }
};

inline nlohmann::json baseline_to_json(const BaselineOptions& b) {
  return {{"weights", weights_to_json(b.weights)},
          {"steps_first", b.steps_first},
          {"steps_per_frame", b.steps_per_frame},
          {"lr_rot", b.adam.lr_rot},
          {"lr_trans", b.adam.lr_trans},
          {"rank_pairs", b.rank_pairs},
          {"camera_distance", b.camera_distance},
          {"search_azimuths", b.search_azimuths},
          {"search_elevations", b.search_elevations},
          {"max_velocity_rot", b.max_velocity_rot},
          {"max_velocity_trans", b.max_velocity_trans},
          {"seed", b.seed}};
}

inline BaselineOptions baseline_from_json(const nlohmann::json& j) {
  BaselineOptions b;
  if (j.contains("weights")) b.weights = weights_from_json(j.at("weights"));
  b.steps_first = j.value("steps_first", b.steps_first);
  b.steps_per_frame = j.value("steps_per_frame", b.steps_per_frame);
  b.adam.lr_rot = j.value("lr_rot", b.adam.lr_rot);
  b.adam.lr_trans = j.value("lr_trans", b.adam.lr_trans);
  b.rank_pairs = j.value("rank_pairs", b.rank_pairs);
  b.camera_distance = j.value("camera_distance", b.camera_distance);
  b.search_azimuths = j.value("search_azimuths", b.search_azimuths);
  b.search_elevations = j.value("search_elevations", b.search_elevations);
  b.max_velocity_rot = j.value("max_velocity_rot", b.max_velocity_rot);
  b.max_velocity_trans = j.value("max_velocity_trans", b.max_velocity_trans);
  b.seed = j.value("seed", b.seed);
  require(b.steps_first >= 0 && b.steps_per_frame >= 0 && b.rank_pairs >= 1 && b.camera_distance > 0 &&
              b.search_azimuths >= 1 && b.search_elevations >= 1,
          ErrorKind::kInvalidArgument, "invalid baseline options");
  return b;
}

inline nlohmann::json train_to_json(const TrainConfig& t) {
  return {{"batch", t.batch},
          {"lr", t.lr},
          {"lr_floor", t.lr_floor},
          {"seed", t.seed},
          {"augment",
           {{"jitter_std", t.augment.jitter_std},
            {"mask_prob", t.augment.mask_prob},
            {"mask_rects_max", t.augment.mask_rects_max},
            {"mask_frac_min", t.augment.mask_frac_min},
            {"mask_frac_max", t.augment.mask_frac_max}}}};
}

inline TrainConfig train_from_json(const nlohmann::json& j) {
  TrainConfig t;
  t.batch = j.value("batch", t.batch);
  t.lr = j.value("lr", t.lr);
  t.lr_floor = j.value("lr_floor", t.lr_floor);
  t.seed = j.value("seed", t.seed);
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    t.augment.jitter_std = a.value("jitter_std", t.augment.jitter_std);
    t.augment.mask_prob = a.value("mask_prob", t.augment.mask_prob);
    t.augment.mask_rects_max = a.value("mask_rects_max", t.augment.mask_rects_max);
    t.augment.mask_frac_min = a.value("mask_frac_min", t.augment.mask_frac_min);
    t.augment.mask_frac_max = a.value("mask_frac_max", t.augment.mask_frac_max);
  }
  require(t.batch >= 0 && t.lr >= 0 && t.lr_floor >= 0 && t.lr_floor <= 1 && t.augment.jitter_std >= 0 &&
              t.augment.mask_prob >= 0 && t.augment.mask_prob <= 1 && t.augment.mask_rects_max >= 0 &&
              t.augment.mask_frac_min >= 0 && t.augment.mask_frac_max >= t.augment.mask_frac_min,
          ErrorKind::kInvalidArgument, "invalid training configuration");
  return t;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j = {{"template", to_string(c.kind)},
                      {"points_per_part", c.points_per_part},
                      {"template_seed", c.template_seed},
                      {"frames", c.frames},
                      {"capture_seed", c.capture_seed},
                      {"degrade", degrade_to_json(c.degrade)},
                      {"camera", camera_to_json(c.camera)},
                      {"loops", c.loops},
                      {"weights", weights_to_json(c.weights)},
                      {"schedule", schedule_to_json(c.schedule)},
                      {"prealign_steps", c.prealign_steps},
                      {"nms_window", c.nms_window},
                      {"baseline", baseline_to_json(c.baseline)},
                      {"distill", distill_to_json(c.distill)},
                      {"grid", c.grid},
                      {"hidden", c.hidden},
                      {"epochs_first", c.epochs_first},
                      {"epochs_finetune", c.epochs_finetune},
                      {"train", train_to_json(c.train)},
                      {"eval_points", c.eval_points},
                      {"eval_seed", c.eval_seed},
                      {"eval_subset", c.eval_subset},
                      {"dct_keep", c.dct_keep},
                      {"ablation", to_string(c.ablation)},
                      {"save_datasets", c.save_datasets},
                      {"seed", c.seed}};
  if (c.script) j["script"] = script_to_json(*c.script);
  return j;
}

/// Missing fields keep their defaults.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  if (j.contains("template")) c.kind = parse_template_kind(j.at("template").get<std::string>());
  c.points_per_part = j.value("points_per_part", c.points_per_part);
  c.template_seed = j.value("template_seed", c.template_seed);
  c.frames = j.value("frames", c.frames);
  c.capture_seed = j.value("capture_seed", c.capture_seed);
  if (j.contains("degrade")) c.degrade = degrade_from_json(j.at("degrade"));
  if (j.contains("script")) c.script = script_from_json(j.at("script"));
  if (j.contains("camera")) c.camera = camera_from_json(j.at("camera"));
  c.loops = j.value("loops", c.loops);
  if (j.contains("weights")) c.weights = weights_from_json(j.at("weights"));
  if (j.contains("schedule")) c.schedule = schedule_from_json(j.at("schedule"));
  c.prealign_steps = j.value("prealign_steps", c.prealign_steps);
  c.nms_window = j.value("nms_window", c.nms_window);
  if (j.contains("baseline")) c.baseline = baseline_from_json(j.at("baseline"));
  if (j.contains("distill")) c.distill = distill_from_json(j.at("distill"));
  c.grid = j.value("grid", c.grid);
  c.hidden = j.value("hidden", c.hidden);
  c.epochs_first = j.value("epochs_first", c.epochs_first);
  c.epochs_finetune = j.value("epochs_finetune", c.epochs_finetune);
  if (j.contains("train")) c.train = train_from_json(j.at("train"));
  c.eval_points = j.value("eval_points", c.eval_points);
  c.eval_seed = j.value("eval_seed", c.eval_seed);
  c.eval_subset = j.value("eval_subset", c.eval_subset);
  c.dct_keep = j.value("dct_keep", c.dct_keep);
  if (j.contains("ablation")) c.ablation = parse_ablation(j.at("ablation").get<std::string>());
  c.save_datasets = j.value("save_datasets", c.save_datasets);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorKind::kIo, "cannot read " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kIo, path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

/// Scene where a prismatic part slides along the viewing ray for most of the
/// video, so a single view cannot tell how far it moved.
inline ExperimentConfig depth_ambiguity_preset() {
  ExperimentConfig c;
  c.kind = TemplateKind::kPrismatic2;
  const auto tpl = build_template(c.kind, c.points_per_part, c.template_seed);
  MotionScript s = default_script(c.kind, tpl);
  // A low orbit keeps the horizontal slide axis close to the viewing ray.
  s.elevation_center = 15.0 * kPi / 180.0;
  s.elevation_amplitude = 10.0 * kPi / 180.0;
  c.script = s;
  return c;
}

// ---------------------------------------------------------------------------
// Scenario

struct Scenario {
  ObjectTemplate tpl;
  Video video;
  std::vector<EvalPoint> points;
};

inline Scenario make_scenario(const ExperimentConfig& c) {
  c.validate();
  Scenario s;
  s.tpl = build_template(c.kind, c.points_per_part, c.template_seed);
  const MotionScript script = c.script ? *c.script : default_script(c.kind, s.tpl);
  s.video = capture_video(s.tpl, script, c.frames, c.degrade, c.capture_seed, c.camera);
  s.points = eval_points(s.tpl, c.eval_points, c.eval_seed);
  return s;
}

// ---------------------------------------------------------------------------
// Trajectory helpers

inline Pose interpolate_pose(const Pose& a, const Pose& b, double u) {
  try {
    return a * exp(u * log(a.inverse() * b));
  } catch (const Error&) {
    return u < 0.5 ? a : b;  // half-turn apart; no unique geodesic
  }
}

/// Fills frames with `have[i] == false` by geodesic interpolation between the
/// nearest frames that have a value; ends copy their only neighbor.
inline std::vector<PoseConfig> interpolate_invalid(std::vector<PoseConfig> poses, const std::vector<bool>& have) {
  const int n = static_cast<int>(poses.size());
  require(static_cast<int>(have.size()) == n, ErrorKind::kShapeMismatch, "interpolate_invalid: length mismatch");
  std::vector<int> idx;
  for (int i = 0; i < n; ++i)
    if (have[i]) idx.push_back(i);
  require(!idx.empty(), ErrorKind::kNoPrediction, "interpolate_invalid: no frame has a prediction");
  for (int i = 0; i < n; ++i) {
    if (have[i]) continue;
    const auto hi = std::lower_bound(idx.begin(), idx.end(), i);
    if (hi == idx.begin()) {
      poses[i] = poses[*hi];
    } else if (hi == idx.end()) {
      poses[i] = poses[idx.back()];
    } else {
      const int a = *(hi - 1), b = *hi;
      const double u = static_cast<double>(i - a) / (b - a);
      poses[i].object = interpolate_pose(poses[a].object, poses[b].object, u);
      poses[i].parts.resize(poses[a].parts.size());
      for (std::size_t p = 0; p < poses[a].parts.size(); ++p)
        poses[i].parts[p] = interpolate_pose(poses[a].parts[p], poses[b].parts[p], u);
    }
  }
  return poses;
}

/// Low-pass filters the object pose and every part pose over time.
inline TrajectoryState smooth_trajectory(const TrajectoryState& s, double keep) {
  TrajectoryState out = s;
  const int n = s.size();
  if (n < 2 || keep >= 1.0) return out;
  std::vector<Pose> seq(n);
  for (int i = 0; i < n; ++i) seq[i] = s.poses[i].object;
  auto f = dct_lowpass(seq, keep);
  for (int i = 0; i < n; ++i) out.poses[i].object = f[i];
  for (std::size_t p = 0; p < s.poses.front().parts.size(); ++p) {
    for (int i = 0; i < n; ++i) seq[i] = s.poses[i].parts[p];
    f = dct_lowpass(seq, keep);
    for (int i = 0; i < n; ++i) out.poses[i].parts[p] = f[i];
  }
  return out;
}

/// Predicts every frame; frames without a usable prediction are interpolated
/// and flagged invalid. Results are canonicalized.
inline TrajectoryState predict_video(const ObjectTemplate& tpl, const PredictorParams& params, const Video& video) {
  const int n = video.size();
  std::vector<PoseConfig> poses(n, rest_config(tpl));
  std::vector<bool> have(n, false);
  for (int i = 0; i < n; ++i) {
    try {
      poses[i] = canonicalize(tpl, predict(params, video.observations[i]));
      have[i] = true;
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::kNoPrediction) throw;
    }
  }
  TrajectoryState s;
  s.poses = interpolate_invalid(std::move(poses), have);
  s.valid = have;
  return s;
}

// ---------------------------------------------------------------------------
// Artifacts

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hash_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::kIo, "cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(ss.str())));
  return buf;
}

/// Hashes every regular file under `dir` except the manifest itself.
inline nlohmann::json build_manifest(const std::filesystem::path& dir) {
  std::vector<std::string> names;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir))
    if (e.is_regular_file()) {
      const auto rel = std::filesystem::relative(e.path(), dir).generic_string();
      if (rel != "manifest.json") names.push_back(rel);
    }
  std::sort(names.begin(), names.end());
  nlohmann::json files = nlohmann::json::object();
  for (const auto& n : names) files[n] = hash_file(dir / n);
  return {{"format", "pod-manifest"}, {"hash", "fnv1a64"}, {"files", files}};
}

inline void write_manifest(const std::filesystem::path& dir) {
  const auto m = build_manifest(dir);
  std::ofstream os(dir / "manifest.json");
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot write manifest");
  os << m.dump(2) << "\n";
}

/// Files whose current hash differs from the manifest, or that are missing.
inline std::vector<std::string> verify_manifest(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  require(static_cast<bool>(is), ErrorKind::kIo, "no manifest in " + dir.string());
  nlohmann::json m;
  is >> m;
  std::vector<std::string> bad;
  for (const auto& [name, h] : m.at("files").items()) {
    const auto p = dir / name;
    if (!std::filesystem::exists(p) || hash_file(p) != h.get<std::string>()) bad.push_back(name);
  }
  return bad;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot write " + path.string());
  os << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// The loop

struct LoopOutcome {
  int loop = 0;
  TrajectoryState predicted;  // raw predictor output, interpolated where missing
  TrajectoryState optimized;  // after optimization and smoothing; empty at loop 0
  Metrics pod;                // smoothed predictions
  Metrics pod_subset;
  double final_train_loss = 0.0;
  std::size_t dataset_size = 0;
};

struct CycleResult {
  TrajectoryState baseline;           // raw tracker output; empty without a baseline
  std::optional<Metrics> baseline_metrics;  // smoothed tracker output
  std::vector<LoopOutcome> loops;
  std::vector<LoopRecord> records;
  PredictorParams predictor;
  nlohmann::json timings = nlohmann::json::object();
};

using Logger = std::function<void(const std::string&)>;

namespace detail {

template <typename F>
auto run_stage(const std::string& name, nlohmann::json& timings, const Logger& log, F&& f) {
  if (log) log(name);
  const auto t0 = std::chrono::steady_clock::now();
  auto finish = [&] {
    timings[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  try {
    if constexpr (std::is_void_v<decltype(f())>) {
      f();
      finish();
    } else {
      auto r = f();
      finish();
      return r;
    }
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kStage) throw;
    throw Error(ErrorKind::kStage, name + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorKind::kStage, name + ": " + e.what());
  }
}

inline std::vector<int> leading_frames(int n, int k) {
  std::vector<int> f;
  for (int i = 0; i < std::min(n, k); ++i) f.push_back(i);
  return f;
}

}  // namespace detail

/// Runs the full cycle on a captured scenario. With a non-empty `out`, every
/// stage leaves its artifacts there; a failing stage still leaves the
/// artifacts of the stages before it, the partial report and the manifest.
inline CycleResult run_cycle(const ExperimentConfig& cfg, const Scenario& sc, const std::filesystem::path& out = {},
                             const Logger& log = {}) {
  cfg.validate();
  namespace fs = std::filesystem;
  const bool write = !out.empty();
  const auto& tpl = sc.tpl;
  const auto& video = sc.video;
  const auto& cam = video.camera;
  const int n = video.size();
  const auto subset = detail::leading_frames(n, cfg.eval_subset);
  CycleResult res;
  auto& tm = res.timings;

  if (write) {
    fs::create_directories(out);
    write_json(out / "config.json", config_to_json(cfg));
  }
  auto finalize = [&] {
    if (!write) return;
    if (!res.records.empty()) report_loop(out, res.records);
    write_json(out / "timings.json", tm);
    write_manifest(out);
  };
  auto eval_pair = [&](const TrajectoryState& s, int loop, const std::string& label, Metrics* all, Metrics* sub) {
    const auto m = evaluate(tpl, s, video.gt_poses, sc.points);
    const auto ms = evaluate(tpl, s, video.gt_poses, sc.points, kDefaultAlphas, subset);
    res.records.push_back(make_record(m, loop, n, label));
    res.records.push_back(make_record(ms, loop, n, label + "_subset"));
    if (all) *all = m;
    if (sub) *sub = ms;
  };
  auto loop_dir = [&](int k) {
    const auto d = out / ("loop_" + std::to_string(k));
    fs::create_directories(d);
    return d;
  };

  try {
    const bool use_baseline = cfg.ablation != Ablation::kNoBaselineInit;
    TrajectoryState base_smooth;
    if (use_baseline) {
      BaselineOptions bo = cfg.baseline;
      bo.seed = detail::mix_seed(cfg.seed, 0xba5e);
      res.baseline = detail::run_stage("baseline", tm, log, [&] { return baseline_incremental(tpl, video, bo); });
      base_smooth = smooth_trajectory(res.baseline, cfg.dct_keep);
      Metrics bm;
      eval_pair(base_smooth, 0, "baseline", &bm, nullptr);
      res.baseline_metrics = bm;
      if (write) {
        save_trajectory(out / "baseline.json", res.baseline);
        save_trajectory(out / "baseline_smoothed.json", base_smooth);
      }
    }
    if (cfg.loops == 0 || cfg.ablation == Ablation::kBaselineOnly) {
      finalize();
      return res;
    }

    DistillConfig dcfg = cfg.distill;
    if (cfg.ablation == Ablation::kNoViewAug) dcfg.view_aug = false;
    OptimSchedule sched = cfg.schedule;
    if (cfg.ablation == Ablation::kNoMultiview) sched.use_matches = false;

    res.predictor = init_predictor(tpl.num_parts(), tpl.feature_dim, cfg.grid, cfg.hidden, detail::mix_seed(cfg.seed, 0x9e7));
    TrajectoryState labels = base_smooth;
    for (int k = 0; k < cfg.loops; ++k) {
      const std::string tag = "loop" + std::to_string(k) + "/";
      LoopOutcome lo;
      lo.loop = k;
      const fs::path dir = write ? loop_dir(k) : fs::path{};

      if (k > 0) {
        const auto pred = detail::run_stage(tag + "predict", tm, log, [&] { return predict_video(tpl, res.predictor, video); });
        TrajectoryState state = pred;
        for (int i = 0; i < n; ++i) state.valid[i] = !video.observations[i].fully_occluded;
        state = detail::run_stage(tag + "prealign", tm, log,
                                  [&] { return prealign_global(tpl, video, state, cfg.prealign_steps); });
        MatchSet matches;
        if (sched.use_matches)
          matches = detail::run_stage(tag + "match", tm, log, [&] { return mine_matches(state.poses, cfg.nms_window); });
        std::vector<EpochTelemetry> tel;
        OptimSchedule s = sched;
        s.seed = detail::mix_seed(sched.seed ^ cfg.seed, 0x0971 + k);
        auto opt = detail::run_stage(tag + "optimize", tm, log,
                                     [&] { return optimize_trajectory(tpl, video, state, matches, cfg.weights, s, &tel); });
        lo.optimized = smooth_trajectory(opt, cfg.dct_keep);
        for (auto& c : lo.optimized.poses) c = canonicalize(tpl, c);
        eval_pair(lo.optimized, k, "optimized", nullptr, nullptr);
        labels = lo.optimized;
        if (write) {
          save_trajectory(dir / "prealigned.json", state);
          save_trajectory(dir / "optimized.json", lo.optimized);
          write_telemetry_csv(dir / "telemetry.csv", tel);
        }
      }

      const std::uint64_t dseed = detail::mix_seed(cfg.seed, 0xd5 + k);
      Dataset ds = detail::run_stage(tag + "dataset", tm, log, [&] {
        if (k == 0 && !use_baseline) return build_identity_dataset(tpl, cam, dcfg, dseed, cfg.grid);
        return build_dataset(tpl, labels, cam, dcfg, k, dseed, cfg.grid);
      });
      lo.dataset_size = ds.size();
      if (write && cfg.save_datasets) save_dataset(dir / "dataset", tpl, cam, ds);

      TrainConfig tc = cfg.train;
      tc.epochs = k == 0 ? cfg.epochs_first : cfg.epochs_finetune;
      tc.seed = detail::mix_seed(cfg.train.seed ^ cfg.seed, 0x7a + k);
      if (k == 0) init_output_bias(res.predictor, ds.samples);
      const auto rep = detail::run_stage(tag + "train", tm, log, [&] { return train(res.predictor, ds.samples, cam, tc); });
      lo.final_train_loss = rep.loss_curve.empty() ? 0.0 : rep.loss_curve.back();

      lo.predicted = detail::run_stage(tag + "evaluate", tm, log, [&] {
        auto p = predict_video(tpl, res.predictor, video);
        eval_pair(p, k, "raw_prediction", nullptr, nullptr);
        eval_pair(smooth_trajectory(p, cfg.dct_keep), k, "pod", &lo.pod, &lo.pod_subset);
        return p;
      });
      if (write) {
        save_predictor(dir / "predictor.bin", res.predictor);
        write_loss_curve_csv(dir / "loss_curve.csv", rep.loss_curve);
        save_trajectory(dir / "predictions.json", lo.predicted);
        write_json(dir / "metrics.json", metrics_to_json(lo.pod, k, n));
      }
      if (log) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "loop %d: PCP@0.05 %.3f  @0.03 %.3f  (first %zu frames %.3f)", k,
                      lo.pod.pcp.at(0.05), lo.pod.pcp.at(0.03), subset.size(), lo.pod_subset.pcp.at(0.05));
        log(buf);
      }
      res.loops.push_back(std::move(lo));
    }
  } catch (...) {
    try {
      finalize();
    } catch (...) {
    }
    throw;
  }
  finalize();
  return res;
}

inline CycleResult run_cycle(const ExperimentConfig& cfg, const std::filesystem::path& out = {},
                             const Logger& log = {}) {
  return run_cycle(cfg, make_scenario(cfg), out, log);
}

/// Same as run_cycle with one documented stage switched off.
inline CycleResult run_ablation(ExperimentConfig cfg, Ablation ablation, const Scenario& sc,
                                const std::filesystem::path& out = {}, const Logger& log = {}) {
  cfg.ablation = ablation;
  return run_cycle(cfg, sc, out, log);
}

/// Final-loop smoothed prediction metrics, or the baseline's when no loop ran.
inline const Metrics& final_metrics(const CycleResult& r) {
  if (!r.loops.empty()) return r.loops.back().pod;
  require(r.baseline_metrics.has_value(), ErrorKind::kInvalidArgument, "final_metrics: run produced no metrics");
  return *r.baseline_metrics;
}

}  // namespace pod
