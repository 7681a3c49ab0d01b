#pragma once

// Ground-truth simulator: scripted articulation, a spiral camera, and
// degraded observations (occluders, feature noise, non-metric depth).

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "pod/error.hpp"
#include "pod/geom.hpp"
#include "pod/render.hpp"
#include "pod/scene.hpp"

namespace pod {

enum class JointType { kRevolute, kPrismatic };

/// Motion of one part relative to its parent, driven by a looping profile
/// q(t) = amplitude * (cos(phase) - cos(2 pi loops t + phase)) / 2, which is
/// zero at t = 0 for any phase.
struct JointSpec {
  int part = 1;
  int parent = 0;                // -1 means attached to the object frame
  JointType type = JointType::kRevolute;
  Vec3 pivot = Vec3::Zero();     // object frame at rest
  Vec3 axis = Vec3::UnitZ();     // object frame at rest, unit
  double amplitude = 1.0;        // radians or scene units
  double phase = 0.0;
};

/// Looping articulation plus a spiral camera around the object.
struct MotionScript {
  std::vector<JointSpec> joints;
  int loops = 4;
  double camera_distance = 2.4;
  double camera_loops = 3.0;          // azimuth revolutions per video
  double elevation_center = 35.0 * kPi / 180.0;
  double elevation_amplitude = 30.0 * kPi / 180.0;
};

/// Object-to-camera pose of a camera at `position` (object frame) looking at
/// `target` with image y pointing away from `up`.
inline Pose look_at(const Vec3& position, const Vec3& target = Vec3::Zero(), const Vec3& up = Vec3::UnitZ()) {
  const Vec3 z = (target - position).normalized();
  Vec3 x = z.cross(up);
  if (x.norm() < 1e-9) x = z.cross(Vec3::UnitX());
  x.normalize();
  const Vec3 y = z.cross(x);
  Pose cam_in_obj;
  cam_in_obj.R.col(0) = x;
  cam_in_obj.R.col(1) = y;
  cam_in_obj.R.col(2) = z;
  cam_in_obj.t = position;
  return cam_in_obj.inverse();
}

namespace detail {

inline double loop_profile(double amplitude, double phase, int loops, double t) {
  return amplitude * 0.5 * (std::cos(phase) - std::cos(2.0 * kPi * loops * t + phase));
}

inline Pose joint_transform(const JointSpec& j, double q) {
  if (j.type == JointType::kPrismatic) return Pose::from_translation(q * j.axis);
  // Rotation about an axis through the pivot.
  const Pose R = axis_angle(j.axis, q);
  return Pose::from_translation(j.pivot) * R * Pose::from_translation(-j.pivot);
}

}  // namespace detail

/// Part configuration at time t in [0, 1). The profile starts at rest for
/// every phase, so t = 0 is the rest configuration.
inline std::vector<Pose> script_parts(const ObjectTemplate& tpl, const MotionScript& s, double t) {
  const int P = tpl.num_parts();
  // Motion in the object frame, composed along the chain.
  std::vector<Pose> motion(P, Pose::identity());
  std::vector<bool> done(P, false);
  for (int p = 0; p < P; ++p) {
    bool driven = false;
    for (const auto& j : s.joints) driven |= j.part == p;
    if (!driven) done[p] = true;
  }
  for (int pass = 0; pass < P; ++pass) {
    for (const auto& j : s.joints) {
      require(j.part >= 0 && j.part < P && j.parent >= -1 && j.parent < P && j.parent != j.part,
              ErrorKind::kInvalidArgument, "motion script: bad joint indices");
      if (done[j.part] || (j.parent >= 0 && !done[j.parent])) continue;
      const Pose parent = j.parent >= 0 ? motion[j.parent] : Pose::identity();
      motion[j.part] = parent * detail::joint_transform(j, detail::loop_profile(j.amplitude, j.phase, s.loops, t));
      done[j.part] = true;
    }
  }
  for (int p = 0; p < P; ++p) require(done[p], ErrorKind::kInvalidArgument, "motion script: joint cycle");
  std::vector<Pose> parts(P);
  for (int p = 0; p < P; ++p) parts[p] = motion[p] * tpl.parts[p].rest_frame;
  return parts;
}

inline Pose script_camera(const MotionScript& s, double t) {
  const double az = 2.0 * kPi * s.camera_loops * t;
  const double el = s.elevation_center + s.elevation_amplitude * std::sin(2.0 * kPi * t);
  const Vec3 c = s.camera_distance * Vec3(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
  return look_at(c);
}

inline PoseConfig script_config(const ObjectTemplate& tpl, const MotionScript& s, double t) {
  return {script_camera(s, t), script_parts(tpl, s, t)};
}

/// Per-kind default articulation; pivots come from the template's
/// connections, so the joints sit exactly where the parts touch.
inline MotionScript default_script(TemplateKind kind, const ObjectTemplate& tpl) {
  MotionScript s;
  auto pivot = [&](int a, int b) {
    for (const auto& c : tpl.connections)
      if ((c.part_a == a && c.part_b == b) || (c.part_a == b && c.part_b == a)) return c.centroid;
    throw Error(ErrorKind::kInvalidArgument, "default_script: missing connection");
  };
  const double deg = kPi / 180.0;
  switch (kind) {
    case TemplateKind::kRevolute2:
      s.joints = {{1, 0, JointType::kRevolute, pivot(0, 1), Vec3::UnitY(), 75.0 * deg, 0.0}};
      break;
    case TemplateKind::kRevolute3:
      s.joints = {{1, 0, JointType::kRevolute, pivot(0, 1), Vec3::UnitY(), 70.0 * deg, 0.0},
                  {2, 0, JointType::kRevolute, pivot(0, 2), Vec3::UnitZ(), 60.0 * deg, 0.7 * kPi}};
      break;
    case TemplateKind::kPrismatic2:
      s.joints = {{1, 0, JointType::kPrismatic, pivot(0, 1), Vec3::UnitX(), 0.25, 0.0}};
      break;
    case TemplateKind::kMultibody3:
      s.joints = {{1, 0, JointType::kRevolute, pivot(0, 1), Vec3::UnitZ(), 50.0 * deg, 0.0},
                  {2, 1, JointType::kRevolute, pivot(1, 2), Vec3::UnitY(), 60.0 * deg, 0.5 * kPi}};
      break;
  }
  return s;
}

struct DegradeConfig {
  bool enabled = true;
  int occluders_min = 0;
  int occluders_max = 2;
  double occluder_frac_min = 0.05;  // of the object's in-image bounding box
  double occluder_frac_max = 0.20;
  double noise_std = 0.1;
  double depth_scale_min = 0.5, depth_scale_max = 2.0;
  double depth_offset_min = -0.2, depth_offset_max = 0.2;

  static DegradeConfig off() {
    DegradeConfig d;
    d.enabled = false;
    return d;
  }
};

struct Observation {
  FeatureImage image;                 // degraded features; depth and opacity are not for the tracker
  std::vector<std::uint8_t> mask;     // H*W, 1 = object visible
  std::vector<double> pseudo_depth;   // H*W
  int frame_index = 0;
  bool fully_occluded = false;

  int height() const { return image.height; }
  int width() const { return image.width; }
  std::size_t mask_count() const {
    std::size_t n = 0;
    for (auto m : mask) n += m;
    return n;
  }
};

struct Video {
  std::vector<Observation> observations;
  std::vector<PoseConfig> gt_poses;  // evaluation only
  Camera camera;
  std::uint64_t seed = 0;
  DegradeConfig degrade;
  MotionScript script;

  int size() const { return static_cast<int>(observations.size()); }
};

/// First n frames of a video, same motion and degradations.
inline Video truncate(const Video& v, int n) {
  require(n >= 2 && n <= v.size(), ErrorKind::kInvalidArgument, "truncate: bad frame count");
  Video out = v;
  out.observations.resize(n);
  if (!out.gt_poses.empty()) out.gt_poses.resize(n);
  return out;
}

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t k) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (k + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// Zeroes features and mask inside random rectangles over the object's box.
inline void apply_occluders(Observation& obs, const DegradeConfig& dc, std::mt19937_64& rng) {
  const int H = obs.height(), W = obs.width();
  int r0 = H, r1 = -1, c0 = W, c1 = -1;
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c)
      if (obs.mask[r * W + c]) r0 = std::min(r0, r), r1 = std::max(r1, r), c0 = std::min(c0, c), c1 = std::max(c1, c);
  std::uniform_int_distribution<int> count(dc.occluders_min, dc.occluders_max);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const int k = count(rng);
  if (r1 < 0) return;
  const double bh = r1 - r0 + 1, bw = c1 - c0 + 1;
  for (int i = 0; i < k; ++i) {
    const double frac = dc.occluder_frac_min + (dc.occluder_frac_max - dc.occluder_frac_min) * u01(rng);
    const double aspect = frac >= 1.0 ? 1.0 : std::exp(0.7 * (u01(rng) - 0.5));
    const int h = std::clamp(static_cast<int>(std::lround(bh * std::sqrt(frac) / aspect)), 1, static_cast<int>(bh));
    const int w = std::clamp(static_cast<int>(std::lround(bw * std::sqrt(frac) * aspect)), 1, static_cast<int>(bw));
    const int top = r0 + static_cast<int>(u01(rng) * (bh - h + 1 - 1e-9));
    const int left = c0 + static_cast<int>(u01(rng) * (bw - w + 1 - 1e-9));
    for (int r = top; r < top + h; ++r)
      for (int c = left; c < left + w; ++c) {
        const std::size_t pix = static_cast<std::size_t>(r) * W + c;
        obs.mask[pix] = 0;
        double* f = obs.image.feature(pix);
        for (int d = 0; d < obs.image.dim; ++d) f[d] = 0.0;
        obs.image.opacity[pix] = 0.0;
        obs.image.depth[pix] = 0.0;
      }
  }
}

}  // namespace detail

/// Renders and degrades one observation from a ground-truth config.
inline Observation observe(const ObjectTemplate& tpl, const PoseConfig& cfg, const Camera& cam,
                           const DegradeConfig& dc, std::mt19937_64& rng, int frame_index = 0) {
  Observation obs;
  obs.frame_index = frame_index;
  obs.image = render(tpl, cfg, cam);
  const std::size_t n = obs.image.pixels();
  obs.mask.resize(n);
  for (std::size_t pix = 0; pix < n; ++pix) obs.mask[pix] = obs.image.opacity[pix] > 0.5 ? 1 : 0;
  const std::vector<double> clean_depth = obs.image.depth;
  double a = 1.0, b = 0.0;
  if (dc.enabled) {
    detail::apply_occluders(obs, dc, rng);
    std::normal_distribution<double> noise(0.0, dc.noise_std);
    if (dc.noise_std > 0.0)
      for (auto& v : obs.image.features) v += noise(rng);
    std::uniform_real_distribution<double> ua(dc.depth_scale_min, dc.depth_scale_max);
    std::uniform_real_distribution<double> ub(dc.depth_offset_min, dc.depth_offset_max);
    a = ua(rng);
    b = ub(rng);
  }
  obs.pseudo_depth.resize(n);
  for (std::size_t pix = 0; pix < n; ++pix) obs.pseudo_depth[pix] = a * clean_depth[pix] + b;
  obs.fully_occluded = obs.mask_count() == 0;
  return obs;
}

/// Frame i is sampled at t = i / n_frames.
inline Video capture_video(const ObjectTemplate& tpl, const MotionScript& script, int n_frames,
                           const DegradeConfig& dc, std::uint64_t seed, const Camera& cam = {}) {
  require(n_frames >= 2, ErrorKind::kInvalidArgument, "capture_video: need at least 2 frames");
  Video v;
  v.camera = cam;
  v.seed = seed;
  v.degrade = dc;
  v.script = script;
  for (int i = 0; i < n_frames; ++i) {
    const double t = static_cast<double>(i) / n_frames;
    const PoseConfig cfg = script_config(tpl, script, t);
    std::mt19937_64 rng(detail::mix_seed(seed, static_cast<std::uint64_t>(i)));
    v.observations.push_back(observe(tpl, cfg, cam, dc, rng, i));
    v.gt_poses.push_back(cfg);
  }
  return v;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json camera_to_json(const Camera& c) {
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy}, {"width", c.width}, {"height", c.height},
          {"z_near", c.z_near}, {"extrinsic", pose_to_json(c.extrinsic)}};
}

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera c;
  c.fx = j.at("fx");
  c.fy = j.at("fy");
  c.cx = j.at("cx");
  c.cy = j.at("cy");
  c.width = j.at("width");
  c.height = j.at("height");
  c.z_near = j.value("z_near", c.z_near);
  if (j.contains("extrinsic")) c.extrinsic = pose_from_json(j.at("extrinsic"));
  require(c.valid(), ErrorKind::kInvalidArgument, "invalid camera in json");
  return c;
}

inline nlohmann::json degrade_to_json(const DegradeConfig& d) {
  return {{"enabled", d.enabled},
          {"occluders_min", d.occluders_min},
          {"occluders_max", d.occluders_max},
          {"occluder_frac_min", d.occluder_frac_min},
          {"occluder_frac_max", d.occluder_frac_max},
          {"noise_std", d.noise_std},
          {"depth_scale", {d.depth_scale_min, d.depth_scale_max}},
          {"depth_offset", {d.depth_offset_min, d.depth_offset_max}}};
}

inline DegradeConfig degrade_from_json(const nlohmann::json& j) {
  DegradeConfig d;
  d.enabled = j.value("enabled", d.enabled);
  d.occluders_min = j.value("occluders_min", d.occluders_min);
  d.occluders_max = j.value("occluders_max", d.occluders_max);
  d.occluder_frac_min = j.value("occluder_frac_min", d.occluder_frac_min);
  d.occluder_frac_max = j.value("occluder_frac_max", d.occluder_frac_max);
  d.noise_std = j.value("noise_std", d.noise_std);
  if (j.contains("depth_scale")) d.depth_scale_min = j["depth_scale"][0], d.depth_scale_max = j["depth_scale"][1];
  if (j.contains("depth_offset")) d.depth_offset_min = j["depth_offset"][0], d.depth_offset_max = j["depth_offset"][1];
  require(d.occluders_min >= 0 && d.occluders_max >= d.occluders_min && d.noise_std >= 0.0 &&
              d.depth_scale_min > 0.0 && d.depth_scale_max >= d.depth_scale_min,
          ErrorKind::kInvalidArgument, "invalid degrade config");
  return d;
}

inline nlohmann::json script_to_json(const MotionScript& s) {
  nlohmann::json joints = nlohmann::json::array();
  for (const auto& j : s.joints)
    joints.push_back({{"part", j.part},
                      {"parent", j.parent},
                      {"type", j.type == JointType::kRevolute ? "revolute" : "prismatic"},
                      {"pivot", {j.pivot.x(), j.pivot.y(), j.pivot.z()}},
                      {"axis", {j.axis.x(), j.axis.y(), j.axis.z()}},
                      {"amplitude", j.amplitude},
                      {"phase", j.phase}});
  return {{"joints", joints},
          {"loops", s.loops},
          {"camera_distance", s.camera_distance},
          {"camera_loops", s.camera_loops},
          {"elevation_center", s.elevation_center},
          {"elevation_amplitude", s.elevation_amplitude}};
}

inline MotionScript script_from_json(const nlohmann::json& j) {
  MotionScript s;
  for (const auto& jj : j.at("joints")) {
    JointSpec js;
    js.part = jj.at("part");
    js.parent = jj.at("parent");
    const std::string type = jj.at("type");
    require(type == "revolute" || type == "prismatic", ErrorKind::kUnknownKind, "unknown joint type " + type);
    js.type = type == "revolute" ? JointType::kRevolute : JointType::kPrismatic;
    js.pivot = Vec3(jj["pivot"][0], jj["pivot"][1], jj["pivot"][2]);
    js.axis = Vec3(jj["axis"][0], jj["axis"][1], jj["axis"][2]).normalized();
    js.amplitude = jj.at("amplitude");
    js.phase = jj.at("phase");
    s.joints.push_back(js);
  }
  s.loops = j.at("loops");
  s.camera_distance = j.at("camera_distance");
  s.camera_loops = j.at("camera_loops");
  s.elevation_center = j.at("elevation_center");
  s.elevation_amplitude = j.at("elevation_amplitude");
  require(s.loops >= 1 && s.camera_distance > 0.0, ErrorKind::kInvalidArgument, "invalid motion script");
  return s;
}

namespace detail {

inline std::string frame_stem(const std::filesystem::path& dir, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%05d", i);
  return (dir / buf).string();
}

inline void write_raster_header(std::ostream& os, int h, int w) {
  write_i32(os, h);
  write_i32(os, w);
}

}  // namespace detail

/// Directory layout: manifest.json, frames/frame_NNNNN.{feat,mask,pdepth},
/// and gt_poses.json (omitted for blind copies).
inline void save_video(const std::filesystem::path& dir, const Video& v, bool include_gt = true) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "frames");
  nlohmann::json man;
  man["format"] = "pod-video";
  man["version"] = 1;
  man["camera"] = camera_to_json(v.camera);
  man["frame_count"] = v.size();
  man["seed"] = v.seed;
  man["degrade"] = degrade_to_json(v.degrade);
  man["script"] = script_to_json(v.script);
  nlohmann::json occl = nlohmann::json::array();
  for (const auto& o : v.observations) occl.push_back(o.fully_occluded);
  man["fully_occluded"] = occl;
  {
    std::ofstream os(dir / "manifest.json");
    require(static_cast<bool>(os), ErrorKind::kIo, "cannot write manifest in " + dir.string());
    os << man.dump(2) << "\n";
  }
  for (int i = 0; i < v.size(); ++i) {
    const auto& o = v.observations[i];
    const std::string stem = detail::frame_stem(dir / "frames", i);
    write_feature_image(stem + ".feat", o.image);
    std::ofstream m(stem + ".mask", std::ios::binary);
    detail::write_raster_header(m, o.height(), o.width());
    m.write(reinterpret_cast<const char*>(o.mask.data()), static_cast<std::streamsize>(o.mask.size()));
    std::ofstream d(stem + ".pdepth", std::ios::binary);
    detail::write_raster_header(d, o.height(), o.width());
    for (double x : o.pseudo_depth) detail::write_f32(d, static_cast<float>(x));
    require(static_cast<bool>(m) && static_cast<bool>(d), ErrorKind::kIo, "write failed: " + stem);
  }
  if (include_gt) {
    nlohmann::json gt = nlohmann::json::array();
    for (const auto& c : v.gt_poses) gt.push_back(pose_config_to_json(c));
    std::ofstream os(dir / "gt_poses.json");
    os << gt.dump() << "\n";
  }
}

inline Video load_video(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::ifstream is(dir / "manifest.json");
  require(static_cast<bool>(is), ErrorKind::kIo, "no manifest in " + dir.string());
  nlohmann::json man;
  try {
    is >> man;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kIo, std::string("bad manifest: ") + e.what());
  }
  require(man.value("format", "") == "pod-video", ErrorKind::kIo, "not a video manifest: " + dir.string());
  Video v;
  v.camera = camera_from_json(man.at("camera"));
  v.seed = man.at("seed");
  v.degrade = degrade_from_json(man.at("degrade"));
  v.script = script_from_json(man.at("script"));
  const int n = man.at("frame_count");
  for (int i = 0; i < n; ++i) {
    const std::string stem = detail::frame_stem(dir / "frames", i);
    Observation o;
    o.frame_index = i;
    o.image = read_feature_image(stem + ".feat");
    std::ifstream m(stem + ".mask", std::ios::binary);
    require(static_cast<bool>(m), ErrorKind::kIo, "missing " + stem + ".mask");
    const int h = detail::read_i32(m), w = detail::read_i32(m);
    require(h == o.image.height && w == o.image.width, ErrorKind::kShapeMismatch, "mask shape mismatch");
    o.mask.resize(o.image.pixels());
    m.read(reinterpret_cast<char*>(o.mask.data()), static_cast<std::streamsize>(o.mask.size()));
    require(static_cast<bool>(m), ErrorKind::kIo, "truncated " + stem + ".mask");
    std::ifstream d(stem + ".pdepth", std::ios::binary);
    require(static_cast<bool>(d), ErrorKind::kIo, "missing " + stem + ".pdepth");
    require(detail::read_i32(d) == h && detail::read_i32(d) == w, ErrorKind::kShapeMismatch, "depth shape mismatch");
    o.pseudo_depth.resize(o.image.pixels());
    for (auto& x : o.pseudo_depth) x = detail::read_f32(d);
    o.fully_occluded = o.mask_count() == 0;
    v.observations.push_back(std::move(o));
  }
  if (fs::exists(dir / "gt_poses.json")) {
    std::ifstream g(dir / "gt_poses.json");
    nlohmann::json gt;
    g >> gt;
    for (const auto& c : gt) v.gt_poses.push_back(pose_config_from_json(c));
    require(static_cast<int>(v.gt_poses.size()) == n, ErrorKind::kShapeMismatch, "gt_poses length mismatch");
  }
  return v;
}

}  // namespace pod
