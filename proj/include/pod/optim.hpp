#pragma once

// Trajectory optimization over a whole video, per-frame global alignment,
// and the incremental optimization-only baseline.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "pod/capture.hpp"
#include "pod/error.hpp"
#include "pod/geom.hpp"
#include "pod/losses.hpp"
#include "pod/matching.hpp"
#include "pod/render.hpp"
#include "pod/scene.hpp"

namespace pod {

struct TrajectoryState {
  std::vector<PoseConfig> poses;
  std::vector<bool> valid;  // false for frames without data terms

  int size() const { return static_cast<int>(poses.size()); }

  static TrajectoryState from_poses(std::vector<PoseConfig> p) {
    TrajectoryState s;
    s.valid.assign(p.size(), true);
    s.poses = std::move(p);
    return s;
  }
};

inline nlohmann::json trajectory_to_json(const TrajectoryState& s) {
  nlohmann::json frames = nlohmann::json::array();
  for (int i = 0; i < s.size(); ++i) {
    auto f = pose_config_to_json(s.poses[i]);
    f["valid"] = static_cast<bool>(s.valid[i]);
    frames.push_back(std::move(f));
  }
  return {{"format", "pod-trajectory"}, {"version", 1}, {"frames", frames}};
}

inline TrajectoryState trajectory_from_json(const nlohmann::json& j) {
  require(j.value("format", "") == "pod-trajectory", ErrorKind::kIo, "not a trajectory document");
  TrajectoryState s;
  for (const auto& f : j.at("frames")) {
    s.poses.push_back(pose_config_from_json(f));
    s.valid.push_back(f.value("valid", true));
  }
  return s;
}

inline void save_trajectory(const std::filesystem::path& path, const TrajectoryState& s) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot write " + path.string());
  os << trajectory_to_json(s).dump() << "\n";
}

inline TrajectoryState load_trajectory(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorKind::kIo, "cannot read " + path.string());
  nlohmann::json j;
  is >> j;
  return trajectory_from_json(j);
}

// ---------------------------------------------------------------------------
// Adaptive moments on twist increments

struct AdamConfig {
  double lr_rot = 1e-2;
  double lr_trans = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One pose parameterized as base * exp(delta) with Adam state on delta.
struct PoseVar {
  Pose base;
  Twist delta = Twist::Zero();
  Twist m = Twist::Zero(), v = Twist::Zero();
  int t = 0;

  Pose value() const { return base * exp(delta); }

  // g is the right-perturbation gradient at value(); the chain through exp
  // maps it to the increment by the right Jacobian.
  void step(const Vec6& g, const AdamConfig& cfg) {
    const Vec6 gd = right_jacobian(delta).transpose() * g;
    ++t;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * gd;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * gd.cwiseProduct(gd);
    const double c1 = 1.0 - std::pow(cfg.beta1, t), c2 = 1.0 - std::pow(cfg.beta2, t);
    for (int k = 0; k < 6; ++k) {
      const double lr = k < 3 ? cfg.lr_rot : cfg.lr_trans;
      delta[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
    }
    // Fold large increments into the base so exp stays far from angle pi.
    if (delta.head<3>().norm() > 1.0) rebase();
  }

  void rebase() {
    base = value();
    base.R = nearest_rotation(base.R);
    delta.setZero();
    m.setZero();
    v.setZero();
    t = 0;
  }
};

struct FrameVars {
  PoseVar object;
  std::vector<PoseVar> parts;

  explicit FrameVars(const PoseConfig& c) {
    object.base = c.object;
    for (const auto& p : c.parts) parts.push_back({p});
  }
  PoseConfig value() const {
    PoseConfig c{object.value(), {}};
    for (const auto& p : parts) c.parts.push_back(p.value());
    return c;
  }
};

// ---------------------------------------------------------------------------
// Trajectory optimization

struct OptimSchedule {
  int epochs = 50;
  int batch = 20;
  AdamConfig adam;
  int rank_pairs = 10000;
  double rank_margin = 1e-4;
  bool use_matches = true;
  double lr_floor = 0.1;  // step size decays on a cosine to this fraction
  std::uint64_t seed = 0;
};

/// Step sizes for one epoch of the cosine decay.
inline AdamConfig epoch_adam(const OptimSchedule& s, int epoch) {
  AdamConfig a = s.adam;
  const double u = s.epochs > 1 ? static_cast<double>(epoch) / (s.epochs - 1) : 0.0;
  const double f = s.lr_floor + (1.0 - s.lr_floor) * 0.5 * (1.0 + std::cos(kPi * u));
  a.lr_rot *= f;
  a.lr_trans *= f;
  return a;
}

inline nlohmann::json schedule_to_json(const OptimSchedule& s) {
  return {{"epochs", s.epochs},     {"batch", s.batch},          {"lr_rot", s.adam.lr_rot},
          {"lr_trans", s.adam.lr_trans}, {"rank_pairs", s.rank_pairs}, {"rank_margin", s.rank_margin},
          {"use_matches", s.use_matches}, {"lr_floor", s.lr_floor}, {"seed", s.seed}};
}

inline OptimSchedule schedule_from_json(const nlohmann::json& j) {
  OptimSchedule s;
  s.epochs = j.value("epochs", s.epochs);
  s.batch = j.value("batch", s.batch);
  s.adam.lr_rot = j.value("lr_rot", s.adam.lr_rot);
  s.adam.lr_trans = j.value("lr_trans", s.adam.lr_trans);
  s.rank_pairs = j.value("rank_pairs", s.rank_pairs);
  s.rank_margin = j.value("rank_margin", s.rank_margin);
  s.use_matches = j.value("use_matches", s.use_matches);
  s.lr_floor = j.value("lr_floor", s.lr_floor);
  s.seed = j.value("seed", s.seed);
  require(s.lr_floor >= 0 && s.lr_floor <= 1, ErrorKind::kInvalidArgument, "lr_floor must be in [0, 1]");
  require(s.epochs >= 0 && s.batch >= 1 && s.rank_pairs >= 1 && s.adam.lr_rot >= 0 && s.adam.lr_trans >= 0,
          ErrorKind::kInvalidArgument, "invalid optimization schedule");
  return s;
}

struct EpochTelemetry {
  int epoch = 0;
  double feat = 0, depth = 0, mask = 0, static_ = 0, temporal = 0, matched = 0;
  double total(const LossWeights& w) const {
    return w.feat * feat + w.depth * depth + w.mask * mask + w.static_ * static_ + w.temporal * temporal + matched;
  }
};

inline void write_telemetry_csv(const std::filesystem::path& path, const std::vector<EpochTelemetry>& rows) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot write " + path.string());
  os << "epoch,feat,depth,mask,static,temporal,matched\n";
  os.precision(9);
  for (const auto& r : rows)
    os << r.epoch << "," << r.feat << "," << r.depth << "," << r.mask << "," << r.static_ << "," << r.temporal << ","
       << r.matched << "\n";
}

struct TrajectoryLoss {
  double feat = 0, depth = 0, mask = 0, static_ = 0, temporal = 0;
  double total(const LossWeights& w) const {
    return w.feat * feat + w.depth * depth + w.mask * mask + w.static_ * static_ + w.temporal * temporal;
  }
};

namespace detail {

inline std::vector<RankPairs> rank_pairs_for(const Video& video, int n_pairs, std::uint64_t seed) {
  std::vector<RankPairs> out;
  out.reserve(video.size());
  for (int i = 0; i < video.size(); ++i)
    out.push_back(sample_rank_pairs(video.observations[i], n_pairs, mix_seed(seed, 1000003u + i)));
  return out;
}

// Minibatches are contiguous runs of frames (so the temporal term sees
// neighbors), starting at a random offset, visited in random order.
inline std::vector<std::pair<int, int>> contiguous_batches(int n, int batch, std::mt19937_64& rng) {
  std::vector<std::pair<int, int>> out;
  const int offset = std::uniform_int_distribution<int>(0, std::max(0, std::min(batch, n) - 1))(rng);
  if (offset > 0) out.emplace_back(0, offset);
  for (int s = offset; s < n; s += batch) out.emplace_back(s, std::min(n, s + batch));
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

}  // namespace detail

/// Loss of a whole trajectory without matched terms: pixel terms summed over
/// valid frames, static over all frames, temporal over the full sequence of
/// each part. Used for telemetry checks.
inline TrajectoryLoss trajectory_loss(const ObjectTemplate& tpl, const Video& video, const TrajectoryState& s,
                                      const OptimSchedule& sched = {}) {
  require(s.size() == video.size(), ErrorKind::kShapeMismatch, "trajectory_loss: length mismatch");
  const auto pairs = detail::rank_pairs_for(video, sched.rank_pairs, sched.seed);
  TrajectoryLoss L;
  for (int i = 0; i < s.size(); ++i) {
    if (s.valid[i] && !video.observations[i].fully_occluded) {
      const auto img = render(tpl, s.poses[i], video.camera);
      L.feat += loss_feature(img, video.observations[i]);
      L.depth += loss_depth_rank(img, pairs[i], sched.rank_margin);
      L.mask += loss_mask(img, video.observations[i]);
    }
    L.static_ += loss_static(tpl, s.poses[i].parts);
  }
  for (int p = 0; p < tpl.num_parts(); ++p) {
    std::vector<Pose> seq;
    for (const auto& c : s.poses) seq.push_back(c.parts[p]);
    L.temporal += loss_temporal(seq);
  }
  return L;
}

/// Joint optimization of all frames. Each frame contributes its pixel and
/// static losses; with matches, one matched frame j per frame i is drawn in
/// proportion to camera distance and frame i's parts are rendered under
/// frame j's object pose, weighted by normalized similarity. The temporal
/// term runs over the parts of each contiguous minibatch. Part 0 is held
/// fixed so the object pose carries the root motion.
inline TrajectoryState optimize_trajectory(const ObjectTemplate& tpl, const Video& video, const TrajectoryState& init,
                                           const MatchSet& matches, const LossWeights& w,
                                           const OptimSchedule& sched, std::vector<EpochTelemetry>* telemetry = nullptr,
                                           const std::function<void(int, const TrajectoryState&)>& on_epoch = {}) {
  const int n = video.size();
  require(init.size() == n, ErrorKind::kShapeMismatch, "optimize_trajectory: init length mismatch");
  require(matches.empty() || static_cast<int>(matches.size()) == n, ErrorKind::kShapeMismatch,
          "optimize_trajectory: match set length mismatch");
  TrajectoryState out = init;
  if (w.all_zero() || sched.epochs == 0) return out;
  const int P = tpl.num_parts();
  std::vector<FrameVars> vars;
  vars.reserve(n);
  for (const auto& c : init.poses) vars.emplace_back(c);
  std::vector<bool> has_data(n);
  for (int i = 0; i < n; ++i) has_data[i] = init.valid[i] && !video.observations[i].fully_occluded;

  const auto pairs = detail::rank_pairs_for(video, sched.rank_pairs, sched.seed);
  std::mt19937_64 rng(detail::mix_seed(sched.seed, 77));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const bool multiview = sched.use_matches && !matches.empty();

  for (int epoch = 0; epoch < sched.epochs; ++epoch) {
    EpochTelemetry tel;
    tel.epoch = epoch;
    const AdamConfig adam = epoch_adam(sched, epoch);
    for (const auto& [b0, b1] : detail::contiguous_batches(n, sched.batch, rng)) {
      const int len = b1 - b0;
      const double scale = 1.0 / len;
      std::vector<PoseConfig> cur(len);
      for (int k = 0; k < len; ++k) cur[k] = vars[b0 + k].value();
      std::vector<Vec6> g_obj(len, Vec6::Zero());
      std::vector<std::vector<Vec6>> g_parts(len, std::vector<Vec6>(P, Vec6::Zero()));

      for (int k = 0; k < len; ++k) {
        const int i = b0 + k;
        if (has_data[i] && (w.feat > 0 || w.depth > 0 || w.mask > 0)) {
          const auto img = render(tpl, cur[k], video.camera);
          ImageGrad ig(img);
          const auto t = pixel_losses(img, video.observations[i], pairs[i], w, scale, &ig, sched.rank_margin);
          tel.feat += t.feat;
          tel.depth += t.depth;
          tel.mask += t.mask;
          const auto rg = render_backward(tpl, cur[k], video.camera, {}, ig);
          g_obj[k] += rg.object;
          for (int p = 0; p < P; ++p) g_parts[k][p] += rg.parts[p];
        }
        if (w.static_ > 0) tel.static_ += loss_static(tpl, cur[k].parts, &g_parts[k], scale * w.static_);

        if (multiview && has_data[i] && !matches[i].empty()) {
          // Importance sample one candidate by normalized camera distance.
          const auto& cands = matches[i];
          double csum = 0.0, smax = 0.0;
          for (const auto& c : cands) csum += c.camera_distance, smax = std::max(smax, c.similarity);
          std::size_t pick = cands.size() - 1;
          double r = u01(rng) * (csum > 0 ? csum : static_cast<double>(cands.size()));
          for (std::size_t c = 0; c < cands.size(); ++c) {
            r -= csum > 0 ? cands[c].camera_distance : 1.0;
            if (r < 0) {
              pick = c;
              break;
            }
          }
          const int j = cands[pick].frame;
          if (!video.observations[j].fully_occluded && init.valid[j]) {
            const double sw = smax > 0 ? cands[pick].similarity / smax : 1.0;
            PoseConfig mixed{vars[j].object.value(), cur[k].parts};
            const auto img = render(tpl, mixed, video.camera);
            ImageGrad ig(img);
            const auto t = pixel_losses(img, video.observations[j], pairs[j], w, scale * sw, &ig, sched.rank_margin);
            tel.matched += sw * t.total(w);
            const auto rg = render_backward(tpl, mixed, video.camera, {}, ig);
            for (int p = 0; p < P; ++p) g_parts[k][p] += rg.parts[p];
          }
        }
      }

      if (w.temporal > 0 && len >= 4) {
        for (int p = 0; p < P; ++p) {
          std::vector<Pose> seq(len);
          for (int k = 0; k < len; ++k) seq[k] = cur[k].parts[p];
          std::vector<Vec6> gt(len, Vec6::Zero());
          tel.temporal += loss_temporal(seq, &gt, scale * w.temporal);
          for (int k = 0; k < len; ++k) g_parts[k][p] += gt[k];
        }
      }

      for (int k = 0; k < len; ++k) {
        auto& fv = vars[b0 + k];
        if (has_data[b0 + k]) fv.object.step(g_obj[k], adam);
        for (int p = 1; p < P; ++p) fv.parts[p].step(g_parts[k][p], adam);
      }
    }
    if (telemetry) telemetry->push_back(tel);
    if (on_epoch) {
      for (int i = 0; i < n; ++i) out.poses[i] = vars[i].value();
      on_epoch(epoch, out);
    }
  }
  for (int i = 0; i < n; ++i) out.poses[i] = vars[i].value();
  return out;
}

// ---------------------------------------------------------------------------
// Per-frame refinement

namespace detail {

// Adam on one frame's poses against its own observation.
inline PoseConfig refine_frame(const ObjectTemplate& tpl, const Observation& obs, const Camera& cam,
                               const PoseConfig& init, const LossWeights& w, const RankPairs& pairs, int steps,
                               bool object_only, const AdamConfig& adam, double margin = 1e-4,
                               double lr_floor = 0.1) {
  FrameVars fv(init);
  const int P = tpl.num_parts();
  OptimSchedule decay;
  decay.epochs = steps;
  decay.adam = adam;
  decay.lr_floor = lr_floor;
  for (int s = 0; s < steps; ++s) {
    const AdamConfig step_adam = epoch_adam(decay, s);
    const PoseConfig cur = fv.value();
    const auto img = render(tpl, cur, cam);
    ImageGrad ig(img);
    pixel_losses(img, obs, pairs, w, 1.0, &ig, margin);
    const auto rg = render_backward(tpl, cur, cam, {}, ig);
    fv.object.step(rg.object, step_adam);
    if (object_only) continue;
    std::vector<Vec6> gp = rg.parts;
    if (w.static_ > 0) loss_static(tpl, cur.parts, &gp, w.static_);
    for (int p = 1; p < P; ++p) fv.parts[p].step(gp[p], step_adam);
  }
  PoseConfig out = fv.value();
  if (object_only) out.parts = init.parts;  // bit-identical parts
  return out;
}

}  // namespace detail

/// Optimizes only each frame's object-to-camera pose against feature and
/// mask losses; part poses are untouched.
inline TrajectoryState prealign_global(const ObjectTemplate& tpl, const Video& video, const TrajectoryState& state,
                                       int steps = 15, const AdamConfig& adam = {}) {
  require(steps >= 0, ErrorKind::kInvalidArgument, "prealign_global: steps must be >= 0");
  require(state.size() == video.size(), ErrorKind::kShapeMismatch, "prealign_global: length mismatch");
  TrajectoryState out = state;
  if (steps == 0) return out;
  LossWeights w;
  w.depth = 0.0;
  w.static_ = 0.0;
  w.temporal = 0.0;
  const RankPairs none;
  for (int i = 0; i < video.size(); ++i) {
    if (video.observations[i].fully_occluded) continue;
    out.poses[i] =
        detail::refine_frame(tpl, video.observations[i], video.camera, state.poses[i], w, none, steps, true, adam);
  }
  return out;
}

struct BaselineOptions {
  LossWeights weights;
  int steps_first = 150;     // frame 0, after the coarse viewpoint search
  int steps_per_frame = 100;
  AdamConfig adam;
  int rank_pairs = 2000;
  double camera_distance = 2.4;  // nominal capture distance
  int search_azimuths = 24;
  int search_elevations = 5;
  double max_velocity_rot = 0.3;    // per-frame limits for the constant-velocity guess
  double max_velocity_trans = 0.15;
  std::uint64_t seed = 0;
};

namespace detail {

inline Pose extrapolate(const Pose& before, const Pose& last, double max_rot, double max_trans) {
  const Pose step = before.inverse() * last;
  if (rotation_angle(step.R) > max_rot || step.t.norm() > max_trans) return last;
  Pose next = last * step;
  next.R = nearest_rotation(next.R);
  return next;
}

}  // namespace detail

/// Coarse object pose for a frame with parts at rest: best feature + mask
/// loss over look-at viewpoints on the upper hemisphere.
inline Pose search_viewpoint(const ObjectTemplate& tpl, const Observation& obs, const Camera& cam,
                             const BaselineOptions& opt) {
  LossWeights w;
  w.depth = 0.0;
  double best = std::numeric_limits<double>::infinity();
  Pose best_pose = look_at(Vec3(0, 0, opt.camera_distance));
  for (int e = 0; e < opt.search_elevations; ++e) {
    const double el = (5.0 + 75.0 * e / std::max(1, opt.search_elevations - 1)) * kPi / 180.0;
    for (int a = 0; a < opt.search_azimuths; ++a) {
      const double az = 2.0 * kPi * a / opt.search_azimuths;
      const Vec3 c = opt.camera_distance * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
      const PoseConfig cfg = rest_config(tpl, look_at(c));
      const auto img = render(tpl, cfg, cam);
      const double l = loss_feature(img, obs) + w.mask * loss_mask(img, obs);
      if (l < best) best = l, best_pose = cfg.object;
    }
  }
  return best_pose;
}

/// Incremental tracker: frame t starts from frame t-1's result and is refined
/// against its own observation only. Frame 0 starts from the rest
/// configuration at the best coarse viewpoint.
inline TrajectoryState baseline_incremental(const ObjectTemplate& tpl, const Video& video,
                                            const BaselineOptions& opt = {}) {
  const int n = video.size();
  TrajectoryState out;
  out.poses.resize(n);
  out.valid.assign(n, true);
  const auto pairs = detail::rank_pairs_for(video, opt.rank_pairs, opt.seed);
  PoseConfig prev, prev2;
  bool have_prev = false, have_prev2 = false;
  for (int i = 0; i < n; ++i) {
    const auto& obs = video.observations[i];
    if (obs.fully_occluded) {
      out.valid[i] = false;
      have_prev2 = false;
      if (have_prev) {
        out.poses[i] = prev;
      } else {
        out.poses[i] = rest_config(tpl, look_at(Vec3(0, 0, opt.camera_distance)));
      }
      continue;
    }
    int steps = opt.steps_per_frame;
    PoseConfig init;
    if (!have_prev) {
      init = rest_config(tpl, search_viewpoint(tpl, obs, video.camera, opt));
      init.object = detail::refine_frame(tpl, obs, video.camera, init, opt.weights, pairs[i], 30, true, opt.adam).object;
      steps = opt.steps_first;
    } else {
      // Constant-velocity guess from the last two solutions; implausibly
      // large steps (a lost track) fall back to the previous pose.
      init = prev;
      if (have_prev2) {
        init.object = detail::extrapolate(prev2.object, prev.object, opt.max_velocity_rot, opt.max_velocity_trans);
        for (int p = 1; p < tpl.num_parts(); ++p)
          init.parts[p] = detail::extrapolate(prev2.parts[p], prev.parts[p], opt.max_velocity_rot, opt.max_velocity_trans);
      }
    }
    prev2 = prev;
    have_prev2 = have_prev;
    prev = detail::refine_frame(tpl, obs, video.camera, init, opt.weights, pairs[i], steps, false, opt.adam);
    out.poses[i] = prev;
    have_prev = true;
  }
  // Leading occluded frames take the first tracked pose.
  for (int i = 0; i < n && !out.valid[i]; ++i)
    if (have_prev) {
      for (int k = i; k < n; ++k)
        if (out.valid[k]) {
          out.poses[i] = out.poses[k];
          break;
        }
    }
  return out;
}

}  // namespace pod
