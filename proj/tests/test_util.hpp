#pragma once

// Shared generators for the unit tests.

#include <algorithm>
#include <cmath>
#include <random>

#include "pod/geom.hpp"

namespace pod::testing {

inline Twist random_twist(std::mt19937_64& rng, double max_rot, double max_trans) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vec3 w(n(rng), n(rng), n(rng));
  Vec3 v(n(rng), n(rng), n(rng));
  w = w.normalized() * max_rot * u(rng);
  v = v.normalized() * max_trans * u(rng);
  Twist xi;
  xi << w, v;
  return xi;
}

inline Pose random_pose(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(-kPi, kPi);
  const Vec3 axis = Vec3(n(rng), n(rng), n(rng)).normalized();
  return {so3_exp(axis * u(rng)), Vec3(n(rng), n(rng), n(rng))};
}

/// Relative error with a floor, as used by every gradient check.
inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-12});
}

}  // namespace pod::testing
