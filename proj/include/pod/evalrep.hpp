#pragma once

// Ground-truth evaluation (MSE and PCP over template points in the camera
// frame) and per-loop reports.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pod/error.hpp"
#include "pod/optim.hpp"
#include "pod/scene.hpp"

namespace pod {

inline const std::vector<double> kDefaultAlphas = {0.05, 0.04, 0.03};

struct FrameMetrics {
  int frame = 0;
  double mse = 0.0;
  std::map<double, double> pcp;
};

struct Metrics {
  double mse = 0.0;
  std::map<double, double> pcp;  // alpha -> fraction of (point, frame) pairs within alpha * bbox_diag
  std::vector<FrameMetrics> per_frame;
};

/// Evaluates `frames` (all frames when empty). Distances are measured in the
/// camera frame after composing object and part poses.
inline Metrics evaluate(const ObjectTemplate& tpl, const std::vector<PoseConfig>& est,
                        const std::vector<PoseConfig>& gt, const std::vector<EvalPoint>& points,
                        const std::vector<double>& alphas = kDefaultAlphas, const std::vector<int>& frames = {}) {
  require(est.size() == gt.size(), ErrorKind::kShapeMismatch, "evaluate: frame count mismatch");
  require(!points.empty(), ErrorKind::kInvalidArgument, "evaluate: no evaluation points");
  std::vector<int> idx = frames;
  if (idx.empty())
    for (int i = 0; i < static_cast<int>(est.size()); ++i) idx.push_back(i);
  Metrics m;
  std::map<double, std::size_t> hits;
  for (double a : alphas) hits[a] = 0;
  double sq = 0.0;
  for (int i : idx) {
    require(i >= 0 && i < static_cast<int>(est.size()), ErrorKind::kInvalidArgument, "evaluate: frame out of range");
    FrameMetrics fm;
    fm.frame = i;
    std::map<double, std::size_t> fh;
    for (const auto& pt : points) {
      const Vec3 a = est[i].object.apply(est[i].parts[pt.part].apply(pt.position));
      const Vec3 b = gt[i].object.apply(gt[i].parts[pt.part].apply(pt.position));
      const double d2 = (a - b).squaredNorm(), d = std::sqrt(d2);
      fm.mse += d2;
      for (double al : alphas)
        if (d < al * tpl.bbox_diag) ++fh[al];
    }
    sq += fm.mse;
    fm.mse /= static_cast<double>(points.size());
    for (double al : alphas) {
      fm.pcp[al] = static_cast<double>(fh[al]) / static_cast<double>(points.size());
      hits[al] += fh[al];
    }
    m.per_frame.push_back(std::move(fm));
  }
  const double total = static_cast<double>(points.size() * idx.size());
  m.mse = sq / total;
  for (double al : alphas) m.pcp[al] = static_cast<double>(hits[al]) / total;
  return m;
}

inline Metrics evaluate(const ObjectTemplate& tpl, const TrajectoryState& est, const std::vector<PoseConfig>& gt,
                        const std::vector<EvalPoint>& points, const std::vector<double>& alphas = kDefaultAlphas,
                        const std::vector<int>& frames = {}) {
  return evaluate(tpl, est.poses, gt, points, alphas, frames);
}

inline std::string alpha_key(double a) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", a);
  return buf;
}

inline nlohmann::json metrics_to_json(const Metrics& m, int loop, int video_frames) {
  nlohmann::json pcp = nlohmann::json::object();
  for (const auto& [a, v] : m.pcp) pcp[alpha_key(a)] = v;
  return {{"loop", loop}, {"video_frames", video_frames}, {"mse", m.mse}, {"pcp", pcp}};
}

struct LoopRecord {
  int loop = 0;
  int video_frames = 0;
  std::string label = "pod";  // which estimate the row describes
  double mse = 0.0;
  std::map<double, double> pcp;
};

inline LoopRecord make_record(const Metrics& m, int loop, int video_frames, std::string label = "pod") {
  return {loop, video_frames, std::move(label), m.mse, m.pcp};
}

inline nlohmann::json record_to_json(const LoopRecord& r) {
  nlohmann::json pcp = nlohmann::json::object();
  for (const auto& [a, v] : r.pcp) pcp[alpha_key(a)] = v;
  return {{"loop", r.loop}, {"video_frames", r.video_frames}, {"label", r.label}, {"mse", r.mse}, {"pcp", pcp}};
}

inline LoopRecord record_from_json(const nlohmann::json& j) {
  LoopRecord r;
  r.loop = j.at("loop");
  r.video_frames = j.at("video_frames");
  r.label = j.value("label", "pod");
  r.mse = j.at("mse");
  for (const auto& [k, v] : j.at("pcp").items()) r.pcp[std::stod(k)] = v.get<double>();
  return r;
}

/// Writes report.json (all rows) and pcp_vs_loop.csv; rows are kept in the
/// order given, so a series passes through verbatim.
inline void report_loop(const std::filesystem::path& dir, const std::vector<LoopRecord>& rows) {
  require(!rows.empty(), ErrorKind::kInvalidArgument, "report_loop: need at least one loop");
  std::filesystem::create_directories(dir);
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) arr.push_back(record_to_json(r));
  {
    std::ofstream os(dir / "report.json");
    require(static_cast<bool>(os), ErrorKind::kIo, "cannot write report.json");
    os << arr.dump(2) << "\n";
  }
  std::ofstream csv(dir / "pcp_vs_loop.csv");
  require(static_cast<bool>(csv), ErrorKind::kIo, "cannot write pcp_vs_loop.csv");
  csv << "label,loop,video_frames,mse";
  for (const auto& [a, v] : rows.front().pcp) csv << ",pcp_" << alpha_key(a);
  csv << "\n";
  csv.precision(10);
  for (const auto& r : rows) {
    csv << r.label << "," << r.loop << "," << r.video_frames << "," << r.mse;
    for (const auto& [a, v] : r.pcp) csv << "," << v;
    csv << "\n";
  }
}

inline std::vector<LoopRecord> load_report(const std::filesystem::path& dir) {
  std::ifstream is(dir / "report.json");
  require(static_cast<bool>(is), ErrorKind::kIo, "cannot read report.json in " + dir.string());
  nlohmann::json arr;
  is >> arr;
  std::vector<LoopRecord> rows;
  for (const auto& j : arr) rows.push_back(record_from_json(j));
  return rows;
}

}  // namespace pod
