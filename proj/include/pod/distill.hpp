#pragma once

// Synthetic training sets from an optimized trajectory: novel viewpoints on a
// hemisphere, perturbations of the optimized cameras, and the optimized
// (camera, configuration) pairs themselves.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <vector>

#include <json.hpp>

#include "pod/capture.hpp"
#include "pod/error.hpp"
#include "pod/geom.hpp"
#include "pod/optim.hpp"
#include "pod/predictor.hpp"
#include "pod/scene.hpp"

namespace pod {

namespace detail {

// Rotation by a uniformly random angle in [0, max_angle] about a random
// axis; in_plane restricts the axis to the x-y plane (tilt and pitch only).
inline Mat3 random_bounded_rotation(std::mt19937_64& rng, double max_angle, bool in_plane) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vec3 axis(n(rng), n(rng), in_plane ? 0.0 : n(rng));
  if (axis.norm() < 1e-12) axis = Vec3::UnitX();
  return so3_exp(axis.normalized() * (max_angle * u(rng)));
}

}  // namespace detail

/// Object-to-camera poses on an azimuth x elevation grid over the upper
/// hemisphere. Radius is uniform in [0.5 d_co, d_co]; each camera is then
/// turned about its own center by at most `perturb` radians off the look-at
/// direction.
inline std::vector<Pose> sample_hemisphere(double d_co, int n_azimuth, int n_elevation, std::uint64_t seed,
                                           double perturb = 20.0 * kPi / 180.0) {
  require(n_azimuth >= 1 && n_elevation >= 1, ErrorKind::kInvalidArgument, "sample_hemisphere: counts must be >= 1");
  require(d_co > 0 && perturb >= 0, ErrorKind::kInvalidArgument, "sample_hemisphere: bad radius or perturbation");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double el_lo = 5.0 * kPi / 180.0, el_hi = 85.0 * kPi / 180.0;
  std::vector<Pose> out;
  out.reserve(static_cast<std::size_t>(n_azimuth) * n_elevation);
  for (int e = 0; e < n_elevation; ++e) {
    const double el = el_lo + (el_hi - el_lo) * (e + 0.5) / n_elevation;
    for (int a = 0; a < n_azimuth; ++a) {
      const double az = 2.0 * kPi * a / n_azimuth;
      const double r = d_co * (0.5 + 0.5 * u(rng));
      const Vec3 c = r * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
      Pose cam = look_at(c);
      const Mat3 turn = detail::random_bounded_rotation(rng, perturb, true);
      out.push_back(Pose(turn * cam.R, turn * cam.t));
    }
  }
  return out;
}

/// Random bounded perturbations of randomly chosen source cameras. The
/// rotation turns the object about its own origin, so the rotation angle and
/// the translation change are each within their bound.
inline std::vector<Pose> sample_near_camera(const std::vector<Pose>& cameras, int n_aug, double rot_bound,
                                            double trans_bound, std::uint64_t seed, std::vector<int>* sources = nullptr) {
  require(!cameras.empty(), ErrorKind::kInvalidArgument, "sample_near_camera: no source cameras");
  require(n_aug >= 0 && rot_bound >= 0 && trans_bound >= 0, ErrorKind::kInvalidArgument,
          "sample_near_camera: negative count or bound");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, cameras.size() - 1);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Pose> out;
  if (sources) sources->clear();
  for (int k = 0; k < n_aug; ++k) {
    const std::size_t s = pick(rng);
    const Mat3 turn = detail::random_bounded_rotation(rng, rot_bound, false);
    Vec3 dir(n(rng), n(rng), n(rng));
    if (dir.norm() < 1e-12) dir = Vec3::UnitX();
    const Vec3 shift = dir.normalized() * (trans_bound * u(rng));
    out.push_back(Pose(turn * cameras[s].R, cameras[s].t + shift));
    if (sources) sources->push_back(static_cast<int>(s));
  }
  return out;
}

struct DistillConfig {
  double d_co = 2.4;
  int n_azimuth = 60;
  int n_elevation = 10;
  double hemisphere_perturb_deg = 20.0;
  int n_near = 600;
  double near_rot_deg = 10.0;
  double near_trans_frac = 0.1;  // of d_co
  double identity_mix = 0.5;     // loop-0 share of rest-configuration samples
  bool view_aug = true;          // false: optimized-camera views only
};

inline nlohmann::json distill_to_json(const DistillConfig& c) {
  return {{"d_co", c.d_co},
          {"n_azimuth", c.n_azimuth},
          {"n_elevation", c.n_elevation},
          {"hemisphere_perturb_deg", c.hemisphere_perturb_deg},
          {"n_near", c.n_near},
          {"near_rot_deg", c.near_rot_deg},
          {"near_trans_frac", c.near_trans_frac},
          {"identity_mix", c.identity_mix},
          {"view_aug", c.view_aug}};
}

inline DistillConfig distill_from_json(const nlohmann::json& j) {
  DistillConfig c;
  c.d_co = j.value("d_co", c.d_co);
  c.n_azimuth = j.value("n_azimuth", c.n_azimuth);
  c.n_elevation = j.value("n_elevation", c.n_elevation);
  c.hemisphere_perturb_deg = j.value("hemisphere_perturb_deg", c.hemisphere_perturb_deg);
  c.n_near = j.value("n_near", c.n_near);
  c.near_rot_deg = j.value("near_rot_deg", c.near_rot_deg);
  c.near_trans_frac = j.value("near_trans_frac", c.near_trans_frac);
  c.identity_mix = j.value("identity_mix", c.identity_mix);
  c.view_aug = j.value("view_aug", c.view_aug);
  require(c.d_co > 0 && c.n_azimuth >= 1 && c.n_elevation >= 1 && c.n_near >= 0 && c.identity_mix >= 0 &&
              c.identity_mix < 1 && c.near_rot_deg >= 0 && c.near_trans_frac >= 0 && c.hemisphere_perturb_deg >= 0,
          ErrorKind::kInvalidArgument, "invalid distill configuration");
  return c;
}

/// Where a sample came from; kept for structural checks.
enum class SampleSource { kHemisphere, kIdentity, kNearCamera, kOriginal };

struct Dataset {
  std::vector<TrainSample> samples;
  std::vector<SampleSource> sources;
  std::vector<int> frames;  // trajectory frame whose parts label the sample, -1 for identity

  std::size_t size() const { return samples.size(); }
  std::size_t count(SampleSource s) const { return static_cast<std::size_t>(std::count(sources.begin(), sources.end(), s)); }
};

/// Loop 0 pairs hemisphere views with uniformly drawn trajectory frames, plus
/// rest-configuration views in proportion `identity_mix`. Later loops add
/// near-camera perturbations and the optimized pairs upsampled to the
/// augmented count. Without view augmentation only optimized pairs are used,
/// upsampled to the count the loop would otherwise have drawn from novel
/// views. Frames flagged invalid are never used.
inline Dataset build_dataset(const ObjectTemplate& tpl, const TrajectoryState& traj, const Camera& cam,
                             const DistillConfig& cfg, int loop_index, std::uint64_t seed, int grid,
                             bool include_identity = true) {
  require(loop_index >= 0, ErrorKind::kInvalidArgument, "build_dataset: negative loop index");
  std::vector<int> valid;
  for (int i = 0; i < traj.size(); ++i)
    if (traj.valid[i]) valid.push_back(i);
  require(!valid.empty(), ErrorKind::kInvalidArgument, "build_dataset: trajectory has no valid frames");

  Dataset ds;
  auto add = [&](const Pose& camera, const std::vector<Pose>& parts, SampleSource src, int frame) {
    ds.samples.push_back(make_sample(tpl, PoseConfig{camera, parts}, cam, grid));
    ds.sources.push_back(src);
    ds.frames.push_back(frame);
  };
  // Labels use the frame where part 0 rests, as the optimizer does.
  std::vector<PoseConfig> canon;
  for (const auto& c : traj.poses) canon.push_back(canonicalize(tpl, c));
  auto canonical_parts = [&](int frame) { return canon[frame].parts; };

  std::mt19937_64 rng(detail::mix_seed(seed, 0xd157u + static_cast<std::uint64_t>(loop_index)));
  std::uniform_int_distribution<std::size_t> pick(0, valid.size() - 1);
  const double perturb = cfg.hemisphere_perturb_deg * kPi / 180.0;
  const int n_hemi = cfg.n_azimuth * cfg.n_elevation;

  if (!cfg.view_aug) {
    const int total = n_hemi + (loop_index > 0 ? cfg.n_near : 0);
    std::vector<int> order = valid;
    for (int k = 0; k < total; ++k) {
      if (k % static_cast<int>(order.size()) == 0) std::shuffle(order.begin(), order.end(), rng);
      const int f = order[k % order.size()];
      add(canon[f].object, canonical_parts(f), SampleSource::kOriginal, f);
    }
    return ds;
  }

  const auto views = sample_hemisphere(cfg.d_co, cfg.n_azimuth, cfg.n_elevation, rng(), perturb);
  for (const auto& v : views) {
    const int f = valid[pick(rng)];
    add(v, canonical_parts(f), SampleSource::kHemisphere, f);
  }
  if (loop_index == 0) {
    if (include_identity && cfg.identity_mix > 0) {
      const int n_id = static_cast<int>(std::lround(n_hemi * cfg.identity_mix / (1.0 - cfg.identity_mix)));
      const int az = std::max(1, static_cast<int>(std::lround(std::sqrt(n_id * 6.0))));
      const int el = std::max(1, (n_id + az - 1) / az);
      auto id_views = sample_hemisphere(cfg.d_co, az, el, rng(), perturb);
      id_views.resize(std::min<std::size_t>(id_views.size(), n_id));
      const auto rest = rest_config(tpl).parts;
      for (const auto& v : id_views) add(v, rest, SampleSource::kIdentity, -1);
    }
    return ds;
  }

  std::vector<Pose> cams;
  for (int f : valid) cams.push_back(canon[f].object);
  std::vector<int> src;
  const auto near = sample_near_camera(cams, cfg.n_near, cfg.near_rot_deg * kPi / 180.0,
                                       cfg.near_trans_frac * cfg.d_co, rng(), &src);
  for (std::size_t k = 0; k < near.size(); ++k) add(near[k], canonical_parts(valid[src[k]]), SampleSource::kNearCamera, valid[src[k]]);

  const int total = n_hemi + static_cast<int>(near.size());
  std::vector<int> order = valid;
  for (int k = 0; k < total; ++k) {
    if (k % static_cast<int>(order.size()) == 0) std::shuffle(order.begin(), order.end(), rng);
    const int f = order[k % order.size()];
    add(canon[f].object, canonical_parts(f), SampleSource::kOriginal, f);
  }
  return ds;
}

/// Rest-configuration hemisphere views only (predictor start without a
/// baseline trajectory).
inline Dataset build_identity_dataset(const ObjectTemplate& tpl, const Camera& cam, const DistillConfig& cfg,
                                      std::uint64_t seed, int grid) {
  Dataset ds;
  const auto views = sample_hemisphere(cfg.d_co, cfg.n_azimuth, cfg.n_elevation, detail::mix_seed(seed, 0x1d),
                                       cfg.hemisphere_perturb_deg * kPi / 180.0);
  const auto rest = rest_config(tpl).parts;
  for (const auto& v : views) {
    ds.samples.push_back(make_sample(tpl, PoseConfig{v, rest}, cam, grid));
    ds.sources.push_back(SampleSource::kIdentity);
    ds.frames.push_back(-1);
  }
  return ds;
}

inline const char* to_string(SampleSource s) {
  switch (s) {
    case SampleSource::kHemisphere: return "hemisphere";
    case SampleSource::kIdentity: return "identity";
    case SampleSource::kNearCamera: return "near_camera";
    case SampleSource::kOriginal: return "original";
  }
  return "?";
}

inline SampleSource sample_source_from_string(const std::string& s) {
  if (s == "hemisphere") return SampleSource::kHemisphere;
  if (s == "identity") return SampleSource::kIdentity;
  if (s == "near_camera") return SampleSource::kNearCamera;
  if (s == "original") return SampleSource::kOriginal;
  throw Error(ErrorKind::kUnknownKind, "unknown sample source: " + s);
}

/// Same layout as a saved video: manifest.json, one .feat per sample (the
/// render of its label) and labels.json.
inline void save_dataset(const std::filesystem::path& dir, const ObjectTemplate& tpl, const Camera& cam,
                         const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "frames");
  nlohmann::json man;
  man["format"] = "pod-dataset";
  man["version"] = 1;
  man["camera"] = camera_to_json(cam);
  man["sample_count"] = ds.size();
  man["grid"] = ds.samples.empty() ? 0 : ds.samples.front().desc.grid;
  nlohmann::json labels = nlohmann::json::array();
  for (std::size_t k = 0; k < ds.size(); ++k) {
    const FeatureImage img = render(tpl, ds.samples[k].label, cam);
    write_feature_image(detail::frame_stem(dir / "frames", static_cast<int>(k)) + ".feat", img);
    labels.push_back({{"pose", pose_config_to_json(ds.samples[k].label)},
                      {"source", to_string(ds.sources[k])},
                      {"frame", ds.frames[k]}});
  }
  std::ofstream m(dir / "manifest.json");
  std::ofstream l(dir / "labels.json");
  require(static_cast<bool>(m) && static_cast<bool>(l), ErrorKind::kIo, "cannot write dataset in " + dir.string());
  m << man.dump(2) << "\n";
  l << labels.dump() << "\n";
}

/// Reloads a dataset, pooling descriptors from the stored images.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream m(dir / "manifest.json");
  std::ifstream l(dir / "labels.json");
  require(static_cast<bool>(m) && static_cast<bool>(l), ErrorKind::kIo, "cannot read dataset in " + dir.string());
  nlohmann::json man, labels;
  m >> man;
  l >> labels;
  require(man.value("format", "") == "pod-dataset", ErrorKind::kIo, "not a dataset directory: " + dir.string());
  const int grid = man.at("grid");
  Dataset ds;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    const FeatureImage img = read_feature_image(detail::frame_stem(dir / "frames", static_cast<int>(k)) + ".feat");
    TrainSample s;
    auto [mask, bb] = render_mask(img);
    s.bbox = bb;
    s.desc = pool_descriptor(img, mask, grid);
    s.label = pose_config_from_json(labels[k].at("pose"));
    ds.samples.push_back(std::move(s));
    ds.sources.push_back(sample_source_from_string(labels[k].at("source")));
    ds.frames.push_back(labels[k].at("frame"));
  }
  return ds;
}

}  // namespace pod
