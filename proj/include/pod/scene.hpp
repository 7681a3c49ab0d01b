#pragma once

// Articulated object templates: rigid parts made of feature points, with
// centroid frames and the inter-part connections used by the static prior.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pod/error.hpp"
#include "pod/geom.hpp"

namespace pod {

using VecX = Eigen::VectorXd;

struct FeaturePoint {
  Vec3 position = Vec3::Zero();  // part frame
  VecX feature;
  double radius = 0.03;
};

struct Part {
  int id = 0;
  std::vector<FeaturePoint> points;
  Pose rest_frame;  // part frame in object frame at rest
};

struct Connection {
  int part_a = 0;
  int part_b = 0;
  Vec3 centroid = Vec3::Zero();  // object frame at rest
};

struct ObjectTemplate {
  std::vector<Part> parts;
  std::vector<Connection> connections;
  double bbox_diag = 1.0;
  int feature_dim = 16;

  int num_parts() const { return static_cast<int>(parts.size()); }
  std::size_t num_points() const {
    std::size_t n = 0;
    for (const auto& p : parts) n += p.points.size();
    return n;
  }
};

/// One frame's state: object-to-camera transform plus part-to-object transforms.
struct PoseConfig {
  Pose object;
  std::vector<Pose> parts;
};

inline PoseConfig rest_config(const ObjectTemplate& tpl, const Pose& object = Pose::identity()) {
  PoseConfig cfg{object, {}};
  for (const auto& p : tpl.parts) cfg.parts.push_back(p.rest_frame);
  return cfg;
}

/// Re-expresses a configuration so part 0 sits at its rest frame. The
/// composed part-to-camera poses are unchanged; this fixes the freedom of
/// moving the object frame and every part together.
inline PoseConfig canonicalize(const ObjectTemplate& tpl, const PoseConfig& cfg) {
  require(!cfg.parts.empty() && cfg.parts.size() == tpl.parts.size(), ErrorKind::kShapeMismatch,
          "canonicalize: part count mismatch");
  const Pose shift = cfg.parts[0] * tpl.parts[0].rest_frame.inverse();
  const Pose back = shift.inverse();
  PoseConfig out{cfg.object * shift, {}};
  for (std::size_t p = 0; p < cfg.parts.size(); ++p) out.parts.push_back(back * cfg.parts[p]);
  out.parts[0] = tpl.parts[0].rest_frame;
  return out;
}

enum class TemplateKind { kRevolute2, kRevolute3, kPrismatic2, kMultibody3 };

inline TemplateKind parse_template_kind(std::string_view s) {
  if (s == "revolute2") return TemplateKind::kRevolute2;
  if (s == "revolute3") return TemplateKind::kRevolute3;
  if (s == "prismatic2") return TemplateKind::kPrismatic2;
  if (s == "multibody3") return TemplateKind::kMultibody3;
  throw Error(ErrorKind::kUnknownKind, "unknown template kind '" + std::string(s) + "'");
}

inline std::string to_string(TemplateKind k) {
  switch (k) {
    case TemplateKind::kRevolute2: return "revolute2";
    case TemplateKind::kRevolute3: return "revolute3";
    case TemplateKind::kPrismatic2: return "prismatic2";
    case TemplateKind::kMultibody3: return "multibody3";
  }
  throw Error(ErrorKind::kUnknownKind, "unknown template kind");
}

inline constexpr double kDefaultConnectionThreshold = 0.03;
inline constexpr int kDefaultConnectionPairs = 3;

/// Connects parts a < b when at least `min_pairs` point pairs (object frame,
/// rest configuration) are closer than `dist_threshold`. The connection
/// centroid is the mean of the midpoints of all qualifying pairs.
inline std::vector<Connection> find_connections(const ObjectTemplate& tpl, double dist_threshold,
                                                int min_pairs = kDefaultConnectionPairs) {
  require(dist_threshold > 0.0, ErrorKind::kInvalidArgument, "find_connections: threshold must be > 0");
  std::vector<std::vector<Vec3>> world(tpl.parts.size());
  for (std::size_t p = 0; p < tpl.parts.size(); ++p)
    for (const auto& fp : tpl.parts[p].points) world[p].push_back(tpl.parts[p].rest_frame.apply(fp.position));

  std::vector<std::size_t> order(tpl.parts.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto x, auto y) { return tpl.parts[x].id < tpl.parts[y].id; });

  const double t2 = dist_threshold * dist_threshold;
  std::vector<Connection> out;
  for (std::size_t ia = 0; ia < order.size(); ++ia) {
    for (std::size_t ib = ia + 1; ib < order.size(); ++ib) {
      const auto& pa = world[order[ia]];
      const auto& pb = world[order[ib]];
      Vec3 sum = Vec3::Zero();
      long count = 0;
      for (const auto& x : pa)
        for (const auto& y : pb)
          if ((x - y).squaredNorm() < t2) {
            sum += 0.5 * (x + y);
            ++count;
          }
      if (count >= min_pairs)
        out.push_back({tpl.parts[order[ia]].id, tpl.parts[order[ib]].id, sum / static_cast<double>(count)});
    }
  }
  return out;
}

namespace detail {

struct BoxSpec {
  Vec3 center;
  Vec3 half;
};

// Flat square patch where two parts touch; both parts get the same grid of
// points on it so the contact is found regardless of random sampling.
struct ContactPatch {
  int part_a, part_b;
  Vec3 center;
  int normal_axis;
  double half_size;
};

inline Vec3 sample_box_surface(const BoxSpec& box, std::mt19937_64& rng) {
  const Vec3& h = box.half;
  const double areas[3] = {h.y() * h.z(), h.x() * h.z(), h.x() * h.y()};
  const double total = areas[0] + areas[1] + areas[2];
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  double pick = u01(rng) * total;
  int axis = 0;
  while (axis < 2 && pick > areas[axis]) pick -= areas[axis++];
  Vec3 p;
  for (int i = 0; i < 3; ++i) p[i] = (2.0 * u01(rng) - 1.0) * h[i];
  p[axis] = (u01(rng) < 0.5 ? -1.0 : 1.0) * h[axis];
  return box.center + p;
}

inline std::vector<Vec3> patch_grid(const ContactPatch& patch) {
  std::vector<Vec3> out;
  const int u = (patch.normal_axis + 1) % 3, v = (patch.normal_axis + 2) % 3;
  for (int i = -1; i <= 1; ++i)
    for (int j = -1; j <= 1; ++j) {
      Vec3 p = patch.center;
      p[u] += i * patch.half_size;
      p[v] += j * patch.half_size;
      out.push_back(p);
    }
  return out;
}

inline void layout_for(TemplateKind kind, std::vector<BoxSpec>& boxes, std::vector<ContactPatch>& patches) {
  switch (kind) {
    case TemplateKind::kRevolute2:
      boxes = {{{-0.3, 0.0, 0.0}, {0.3, 0.2, 0.12}}, {{0.3, 0.0, 0.0}, {0.3, 0.07, 0.07}}};
      patches = {{0, 1, {0.0, 0.0, 0.0}, 0, 0.05}};
      return;
    case TemplateKind::kRevolute3:
      boxes = {{{0.0, 0.0, 0.0}, {0.22, 0.18, 0.12}},
               {{0.47, 0.0, 0.0}, {0.25, 0.06, 0.06}},
               {{-0.42, 0.0, 0.04}, {0.2, 0.07, 0.05}}};
      patches = {{0, 1, {0.22, 0.0, 0.0}, 0, 0.04}, {0, 2, {-0.22, 0.0, 0.04}, 0, 0.04}};
      return;
    case TemplateKind::kPrismatic2:
      boxes = {{{0.0, 0.0, 0.0}, {0.3, 0.25, 0.15}}, {{0.0, 0.0, 0.2}, {0.25, 0.2, 0.05}}};
      patches = {{0, 1, {0.0, 0.0, 0.15}, 2, 0.1}};
      return;
    case TemplateKind::kMultibody3:
      boxes = {{{-0.4, 0.0, 0.0}, {0.15, 0.15, 0.15}},
               {{0.0, 0.0, 0.0}, {0.25, 0.1, 0.1}},
               {{0.4, 0.0, 0.0}, {0.15, 0.12, 0.12}}};
      patches = {{0, 1, {-0.25, 0.0, 0.0}, 0, 0.05}, {1, 2, {0.25, 0.0, 0.0}, 0, 0.05}};
      return;
  }
  throw Error(ErrorKind::kUnknownKind, "unknown template kind");
}

}  // namespace detail

struct TemplateOptions {
  int feature_dim = 16;
  double point_radius = 0.03;   // normalized scene units
  double feature_spread = 0.45; // rms norm of within-part feature variation
  double feature_frequency = 6.0;
};

/// Builds a normalized procedural template (max point distance 1, union
/// centroid at the origin). Deterministic given the seed.
inline ObjectTemplate build_template(TemplateKind kind, int points_per_part, std::uint64_t seed,
                                     const TemplateOptions& opt = {}) {
  require(points_per_part >= 4, ErrorKind::kInvalidArgument, "build_template: points_per_part must be >= 4");
  std::vector<detail::BoxSpec> boxes;
  std::vector<detail::ContactPatch> patches;
  detail::layout_for(kind, boxes, patches);
  const int n_parts = static_cast<int>(boxes.size());
  std::mt19937_64 rng(seed);

  std::vector<std::vector<Vec3>> raw(n_parts);
  for (const auto& patch : patches) {
    for (const auto& p : detail::patch_grid(patch)) {
      if (static_cast<int>(raw[patch.part_a].size()) < points_per_part) raw[patch.part_a].push_back(p);
      if (static_cast<int>(raw[patch.part_b].size()) < points_per_part) raw[patch.part_b].push_back(p);
    }
  }
  for (int p = 0; p < n_parts; ++p)
    while (static_cast<int>(raw[p].size()) < points_per_part) raw[p].push_back(detail::sample_box_surface(boxes[p], rng));

  // Normalize: union centroid to origin, max pairwise distance to 1.
  Vec3 centroid = Vec3::Zero();
  std::size_t total = 0;
  for (const auto& pts : raw)
    for (const auto& x : pts) centroid += x, ++total;
  centroid /= static_cast<double>(total);
  std::vector<Vec3> all;
  for (auto& pts : raw)
    for (auto& x : pts) all.push_back(x -= centroid);
  double max_d2 = 0.0;
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j) max_d2 = std::max(max_d2, (all[i] - all[j]).squaredNorm());
  const double scale = 1.0 / std::sqrt(max_d2);

  // Per-part feature clusters, resampled until well separated.
  const int D = opt.feature_dim;
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * kPi);
  std::vector<VecX> means;
  for (int attempt = 0;; ++attempt) {
    means.clear();
    for (int p = 0; p < n_parts; ++p) {
      VecX m(D);
      for (int d = 0; d < D; ++d) m[d] = normal(rng);
      means.push_back(m.normalized());
    }
    double min_sep = std::numeric_limits<double>::infinity();
    for (int a = 0; a < n_parts; ++a)
      for (int b = a + 1; b < n_parts; ++b) min_sep = std::min(min_sep, (means[a] - means[b]).norm());
    if (min_sep >= 2.0 * opt.feature_spread || attempt > 1000) break;
  }

  ObjectTemplate tpl;
  tpl.feature_dim = D;
  tpl.bbox_diag = 1.0;
  for (int p = 0; p < n_parts; ++p) {
    Eigen::MatrixXd freq(D, 3);
    VecX phi(D);
    for (int d = 0; d < D; ++d) {
      for (int k = 0; k < 3; ++k) freq(d, k) = normal(rng) * opt.feature_frequency / std::sqrt(3.0);
      phi[d] = phase(rng);
    }
    const double amp = opt.feature_spread * std::sqrt(2.0 / D);

    Part part;
    part.id = p;
    Vec3 c = Vec3::Zero();
    for (auto& x : raw[p]) c += x * scale;
    c /= static_cast<double>(raw[p].size());
    part.rest_frame = Pose::from_translation(c);
    for (const auto& x : raw[p]) {
      const Vec3 obj = x * scale;
      FeaturePoint fp;
      fp.position = obj - c;
      fp.radius = opt.point_radius;
      fp.feature = means[p];
      for (int d = 0; d < D; ++d) fp.feature[d] += amp * std::sin(freq.row(d).dot(obj) + phi[d]);
      part.points.push_back(std::move(fp));
    }
    // Exact zero mean in the part frame.
    Vec3 residual = Vec3::Zero();
    for (const auto& fp : part.points) residual += fp.position;
    residual /= static_cast<double>(part.points.size());
    for (auto& fp : part.points) fp.position -= residual;
    part.rest_frame.t += residual;
    tpl.parts.push_back(std::move(part));
  }
  tpl.connections = find_connections(tpl, kDefaultConnectionThreshold);
  return tpl;
}

struct EvalPoint {
  int part = 0;
  Vec3 position = Vec3::Zero();  // part frame
};

/// Stratified sample of template points, allocated to parts in proportion to
/// their point counts (largest remainder), deterministic per seed.
inline std::vector<EvalPoint> eval_points(const ObjectTemplate& tpl, int n, std::uint64_t seed) {
  require(n >= 1, ErrorKind::kInvalidArgument, "eval_points: n must be >= 1");
  const double total = static_cast<double>(tpl.num_points());
  const int P = tpl.num_parts();
  std::vector<int> alloc(P);
  std::vector<std::pair<double, int>> remainders;
  int assigned = 0;
  for (int p = 0; p < P; ++p) {
    const double exact = n * static_cast<double>(tpl.parts[p].points.size()) / total;
    alloc[p] = static_cast<int>(std::floor(exact));
    assigned += alloc[p];
    remainders.emplace_back(-(exact - alloc[p]), p);
  }
  std::sort(remainders.begin(), remainders.end());
  for (int k = 0; assigned < n; ++k, ++assigned) ++alloc[remainders[k % P].second];

  std::mt19937_64 rng(seed);
  std::vector<EvalPoint> out;
  for (int p = 0; p < P; ++p) {
    const auto& pts = tpl.parts[p].points;
    std::vector<std::size_t> idx(pts.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (int k = 0; k < alloc[p]; ++k) out.push_back({tpl.parts[p].id, pts[idx[k % idx.size()]].position});
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json template_to_json(const ObjectTemplate& tpl) {
  nlohmann::json j;
  j["feature_dim"] = tpl.feature_dim;
  j["bbox_diag"] = tpl.bbox_diag;
  j["parts"] = nlohmann::json::array();
  for (const auto& part : tpl.parts) {
    nlohmann::json jp;
    jp["id"] = part.id;
    jp["rest_frame"] = pose_to_json(part.rest_frame);
    jp["points"] = nlohmann::json::array();
    for (const auto& fp : part.points) {
      jp["points"].push_back({{"position", {fp.position.x(), fp.position.y(), fp.position.z()}},
                              {"feature", std::vector<double>(fp.feature.data(), fp.feature.data() + fp.feature.size())},
                              {"radius", fp.radius}});
    }
    j["parts"].push_back(std::move(jp));
  }
  j["connections"] = nlohmann::json::array();
  for (const auto& c : tpl.connections)
    j["connections"].push_back({{"part_a", c.part_a}, {"part_b", c.part_b},
                                {"centroid", {c.centroid.x(), c.centroid.y(), c.centroid.z()}}});
  return j;
}

inline ObjectTemplate template_from_json(const nlohmann::json& j) {
  ObjectTemplate tpl;
  tpl.feature_dim = j.at("feature_dim").get<int>();
  tpl.bbox_diag = j.at("bbox_diag").get<double>();
  for (const auto& jp : j.at("parts")) {
    Part part;
    part.id = jp.at("id").get<int>();
    part.rest_frame = pose_from_json(jp.at("rest_frame"));
    for (const auto& jpt : jp.at("points")) {
      FeaturePoint fp;
      const auto pos = jpt.at("position").get<std::vector<double>>();
      fp.position = Vec3(pos.at(0), pos.at(1), pos.at(2));
      const auto f = jpt.at("feature").get<std::vector<double>>();
      require(static_cast<int>(f.size()) == tpl.feature_dim, ErrorKind::kIo, "feature dimension mismatch");
      fp.feature = Eigen::Map<const VecX>(f.data(), static_cast<Eigen::Index>(f.size()));
      fp.radius = jpt.at("radius").get<double>();
      require(fp.radius > 0.0, ErrorKind::kIo, "point radius must be > 0");
      part.points.push_back(std::move(fp));
    }
    tpl.parts.push_back(std::move(part));
  }
  for (const auto& jc : j.at("connections")) {
    const auto c = jc.at("centroid").get<std::vector<double>>();
    tpl.connections.push_back({jc.at("part_a").get<int>(), jc.at("part_b").get<int>(), Vec3(c.at(0), c.at(1), c.at(2))});
  }
  return tpl;
}

inline nlohmann::json pose_config_to_json(const PoseConfig& cfg) {
  nlohmann::json j;
  j["object"] = pose_to_json(cfg.object);
  j["parts"] = nlohmann::json::array();
  for (const auto& p : cfg.parts) j["parts"].push_back(pose_to_json(p));
  return j;
}

inline PoseConfig pose_config_from_json(const nlohmann::json& j) {
  PoseConfig cfg;
  cfg.object = pose_from_json(j.at("object"));
  for (const auto& p : j.at("parts")) cfg.parts.push_back(pose_from_json(p));
  return cfg;
}

}  // namespace pod
