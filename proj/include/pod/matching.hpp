#pragma once

// Quasi-multiview mining: frames whose predicted part configurations agree
// but whose viewpoints differ.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "pod/error.hpp"
#include "pod/geom.hpp"
#include "pod/scene.hpp"

namespace pod {

struct Match {
  int frame = 0;
  double similarity = 1.0;       // exp(-d / tau), in (0, 1]
  double camera_distance = 0.0;  // se3_distance of the object-to-camera poses
  double config_distance = 0.0;  // mean part se3_distance
};

using MatchSet = std::vector<std::vector<Match>>;

/// Mean over parts of se3_distance between two part configurations.
inline double config_distance(const std::vector<Pose>& a, const std::vector<Pose>& b) {
  require(a.size() == b.size() && !a.empty(), ErrorKind::kShapeMismatch, "config_distance: part count mismatch");
  double sum = 0.0;
  for (std::size_t p = 0; p < a.size(); ++p) sum += se3_distance(a[p], b[p]);
  return sum / static_cast<double>(a.size());
}

/// For each frame, ranks all other frames by configuration distance (ties go
/// to the larger camera distance, then the lower index), keeps the best N/4
/// after temporal non-max suppression, and attaches similarity and camera
/// distance.
inline MatchSet mine_matches(const std::vector<PoseConfig>& predicted, int nms_window = 5) {
  const int n = static_cast<int>(predicted.size());
  require(n >= 8, ErrorKind::kInvalidArgument, "mine_matches: need at least 8 frames");
  require(nms_window >= 0, ErrorKind::kInvalidArgument, "mine_matches: negative nms window");
  std::vector<double> dist(static_cast<std::size_t>(n) * n, 0.0), cam(static_cast<std::size_t>(n) * n, 0.0);
  std::vector<double> off_diag;
  off_diag.reserve(static_cast<std::size_t>(n) * (n - 1) / 2);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double d = config_distance(predicted[i].parts, predicted[j].parts);
      const double c = se3_distance(predicted[i].object, predicted[j].object);
      dist[i * n + j] = dist[j * n + i] = d;
      cam[i * n + j] = cam[j * n + i] = c;
      off_diag.push_back(d);
    }
  const auto mid = off_diag.begin() + static_cast<std::ptrdiff_t>(off_diag.size() / 2);
  std::nth_element(off_diag.begin(), mid, off_diag.end());
  const double tau = *mid;

  const int keep = n / 4;
  MatchSet out(n);
  std::vector<int> order;
  for (int i = 0; i < n; ++i) {
    order.clear();
    for (int j = 0; j < n; ++j)
      if (j != i) order.push_back(j);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      const double da = dist[i * n + a], db = dist[i * n + b];
      if (da != db) return da < db;
      const double ca = cam[i * n + a], cb = cam[i * n + b];
      if (ca != cb) return ca > cb;
      return a < b;
    });
    for (int j : order) {
      if (static_cast<int>(out[i].size()) >= keep) break;
      bool suppressed = false;
      for (const auto& m : out[i]) suppressed |= std::abs(m.frame - j) <= nms_window;
      if (suppressed) continue;
      const double d = dist[i * n + j];
      const double sim = tau > 1e-12 ? std::max(std::exp(-d / tau), std::numeric_limits<double>::min()) : 1.0;
      out[i].push_back({j, sim, cam[i * n + j], d});
    }
  }
  return out;
}

}  // namespace pod
