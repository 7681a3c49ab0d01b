#pragma once

// Rigid-body math on SO(3) / SE(3).
//
// Twists are ordered (rotation, translation). Pose perturbations throughout the
// library are right-multiplied: T <- T * exp(delta), i.e. expressed in the
// body frame of the pose being perturbed.

#include <Eigen/Core>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include <json.hpp>

#include "pod/error.hpp"

namespace pod {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Twist = Vec6;

inline constexpr double kPi = std::numbers::pi;

inline Mat3 hat(const Vec3& w) {
  Mat3 m;
  m << 0.0, -w.z(), w.y(),
       w.z(), 0.0, -w.x(),
       -w.y(), w.x(), 0.0;
  return m;
}

inline Vec3 vee(const Mat3& m) {
  return Vec3(m(2, 1) - m(1, 2), m(0, 2) - m(2, 0), m(1, 0) - m(0, 1)) * 0.5;
}

inline bool is_rotation(const Mat3& r, double tol = 1e-9) {
  return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() < tol &&
         std::abs(r.determinant() - 1.0) < tol;
}

/// Closest rotation in the Frobenius sense; removes drift from repeated products.
inline Mat3 nearest_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0 : 1.0;
  return svd.matrixU() * d * svd.matrixV().transpose();
}

/// Geodesic angle of a rotation, robust near 0 and pi.
inline double rotation_angle(const Mat3& r) {
  const double s = 0.5 * vee(r - r.transpose()).norm();  // = sin(theta)
  const double c = 0.5 * (r.trace() - 1.0);
  return std::atan2(s, c);
}

struct Pose {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  static Pose identity() { return {}; }
  static Pose from_translation(const Vec3& t) { return {Mat3::Identity(), t}; }

  Vec3 apply(const Vec3& x) const { return R * x + t; }
  Pose inverse() const { return {R.transpose(), -(R.transpose() * t)}; }
  Pose operator*(const Pose& b) const { return {R * b.R, R * b.t + t}; }
};

inline Pose compose(const Pose& a, const Pose& b) { return a * b; }

struct SO3Coeffs {
  double a, b, c;  // sin(t)/t, (1-cos(t))/t^2, (t-sin(t))/t^3
  double da, db, dc;  // derivatives of a, b, c divided by t
};

inline SO3Coeffs so3_coeffs(double theta) {
  const double t2 = theta * theta;
  if (theta < 1e-4) {
    return {1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0,
            -1.0 / 3.0 + t2 / 30.0, -1.0 / 12.0 + t2 / 180.0, -1.0 / 60.0 + t2 / 1260.0};
  }
  const double s = std::sin(theta), c = std::cos(theta);
  const double t3 = t2 * theta, t4 = t2 * t2, t5 = t4 * theta;
  return {s / theta,
          (1.0 - c) / t2,
          (theta - s) / t3,
          (theta * c - s) / t3,
          (theta * s - 2.0 * (1.0 - c)) / t4,
          (1.0 - c) / t4 - 3.0 * (theta - s) / t5};
}

inline Mat3 so3_exp(const Vec3& w) {
  const auto k = so3_coeffs(w.norm());
  const Mat3 W = hat(w);
  return Mat3::Identity() + k.a * W + k.b * W * W;
}

/// Rotation vector of `r`; throws near angle pi where the axis is ambiguous.
inline Vec3 so3_log(const Mat3& r) {
  const double theta = rotation_angle(r);
  require(theta < kPi - 1e-6, ErrorKind::kDegenerateRotation,
          "log of rotation with angle " + std::to_string(theta) + " too close to pi");
  const Vec3 v = 0.5 * vee(r - r.transpose());  // = sin(theta) * axis
  if (theta < 1e-4) return v * (1.0 + theta * theta / 6.0);
  return v * (theta / std::sin(theta));
}

inline Pose exp(const Twist& xi) {
  const Vec3 w = xi.head<3>(), v = xi.tail<3>();
  const auto k = so3_coeffs(w.norm());
  const Mat3 W = hat(w);
  const Mat3 W2 = W * W;
  const Mat3 V = Mat3::Identity() + k.b * W + k.c * W2;
  return {Mat3::Identity() + k.a * W + k.b * W2, V * v};
}

inline Twist log(const Pose& T) {
  const Vec3 w = so3_log(T.R);
  const double theta = w.norm();
  const Mat3 W = hat(w);
  Mat3 v_inv = Mat3::Identity() - 0.5 * W;
  if (theta < 1e-4) {
    v_inv += W * W / 12.0;
  } else {
    const double half = 0.5 * theta;
    const double coef = (1.0 - half * std::cos(half) / std::sin(half)) / (theta * theta);
    v_inv += coef * W * W;
  }
  Twist xi;
  xi << w, v_inv * T.t;
  return xi;
}

/// d vec([R | t]) / d xi at xi, with [R | t] flattened row-major (3x4 -> 12).
inline Eigen::Matrix<double, 12, 6> exp_jacobian(const Twist& xi) {
  const Vec3 w = xi.head<3>(), v = xi.tail<3>();
  const double theta = w.norm();
  const auto k = so3_coeffs(theta);
  const Mat3 W = hat(w);
  const Mat3 W2 = W * W;
  Eigen::Matrix<double, 12, 6> J = Eigen::Matrix<double, 12, 6>::Zero();
  for (int i = 0; i < 3; ++i) {
    const Mat3 E = hat(Vec3::Unit(i));
    const Mat3 dW2 = E * W + W * E;
    const Mat3 dR = k.da * w[i] * W + k.a * E + k.db * w[i] * W2 + k.b * dW2;
    const Mat3 dV = k.db * w[i] * W + k.b * E + k.dc * w[i] * W2 + k.c * dW2;
    const Vec3 dt = dV * v;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) J(4 * r + c, i) = dR(r, c);
      J(4 * r + 3, i) = dt[r];
    }
  }
  const Mat3 V = Mat3::Identity() + k.b * W + k.c * W2;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) J(4 * r + 3, 3 + c) = V(r, c);
  return J;
}

/// Right Jacobian: exp(xi + d) ~= exp(xi) * exp(Jr(xi) d).
inline Mat6 right_jacobian(const Twist& xi) {
  const Pose E = exp(xi);
  const auto J = exp_jacobian(xi);
  Mat6 jr;
  for (int k = 0; k < 6; ++k) {
    Mat3 dR;
    Vec3 dt;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) dR(r, c) = J(4 * r + c, k);
      dt[r] = J(4 * r + 3, k);
    }
    jr.col(k) << vee(E.R.transpose() * dR), E.R.transpose() * dt;
  }
  return jr;
}

/// Left Jacobian: exp(xi + d) ~= exp(Jl(xi) d) * exp(xi).
inline Mat6 left_jacobian(const Twist& xi) { return right_jacobian(-xi); }

/// Adjoint for (rotation, translation) twists: T exp(xi) T^-1 = exp(Ad_T xi).
inline Mat6 adjoint(const Pose& T) {
  Mat6 ad = Mat6::Zero();
  ad.topLeftCorner<3, 3>() = T.R;
  ad.bottomLeftCorner<3, 3>() = hat(T.t) * T.R;
  ad.bottomRightCorner<3, 3>() = T.R;
  return ad;
}

inline Pose axis_angle(const Vec3& axis, double angle) {
  return {so3_exp(axis.normalized() * angle), Vec3::Zero()};
}

inline Pose rot_z(double angle, const Vec3& t = Vec3::Zero()) {
  return {so3_exp(Vec3::UnitZ() * angle), t};
}

// ---------------------------------------------------------------------------
// 6D rotation representation

struct Rot6D {
  Vec3 a = Vec3::UnitX();
  Vec3 b = Vec3::UnitY();
};

inline Rot6D to_rot6d(const Mat3& r) { return {r.col(0), r.col(1)}; }

namespace detail {

struct GramSchmidtParts {
  double na, nb;
  Vec3 c1, c2, bp;
};

inline GramSchmidtParts gram_schmidt_parts(const Rot6D& r) {
  GramSchmidtParts g;
  g.na = r.a.norm();
  require(g.na > 0.0 && std::isfinite(g.na), ErrorKind::kInvalidRepresentation,
          "gram_schmidt: first vector is zero");
  g.c1 = r.a / g.na;
  g.bp = r.b - g.c1.dot(r.b) * g.c1;
  g.nb = g.bp.norm();
  require(r.b.norm() > 0.0 && g.nb > std::sin(1e-6) * r.b.norm(),
          ErrorKind::kInvalidRepresentation, "gram_schmidt: vectors are parallel or zero");
  g.c2 = g.bp / g.nb;
  return g;
}

}  // namespace detail

inline Mat3 gram_schmidt(const Rot6D& r) {
  const auto g = detail::gram_schmidt_parts(r);
  Mat3 m;
  m.col(0) = g.c1;
  m.col(1) = g.c2;
  m.col(2) = g.c1.cross(g.c2);
  return m;
}

/// d vec(R) / d (a, b), R flattened row-major.
inline Eigen::Matrix<double, 9, 6> gram_schmidt_jacobian(const Rot6D& r) {
  const auto g = detail::gram_schmidt_parts(r);
  const Mat3 I = Mat3::Identity();
  const Mat3 dc1_da = (I - g.c1 * g.c1.transpose()) / g.na;
  const Mat3 dbp_da = -(g.c1 * r.b.transpose() + g.c1.dot(r.b) * I) * dc1_da;
  const Mat3 dbp_db = I - g.c1 * g.c1.transpose();
  const Mat3 dc2_dbp = (I - g.c2 * g.c2.transpose()) / g.nb;
  const Mat3 dc2_da = dc2_dbp * dbp_da;
  const Mat3 dc2_db = dc2_dbp * dbp_db;
  const Mat3 dc3_da = -hat(g.c2) * dc1_da + hat(g.c1) * dc2_da;
  const Mat3 dc3_db = hat(g.c1) * dc2_db;

  Eigen::Matrix<double, 9, 6> J = Eigen::Matrix<double, 9, 6>::Zero();
  for (int row = 0; row < 3; ++row) {
    J.block<1, 3>(3 * row + 0, 0) = dc1_da.row(row);
    J.block<1, 3>(3 * row + 1, 0) = dc2_da.row(row);
    J.block<1, 3>(3 * row + 1, 3) = dc2_db.row(row);
    J.block<1, 3>(3 * row + 2, 0) = dc3_da.row(row);
    J.block<1, 3>(3 * row + 2, 3) = dc3_db.row(row);
  }
  return J;
}

// ---------------------------------------------------------------------------
// Distances and trajectory filtering

inline double se3_distance(const Pose& a, const Pose& b, double lambda_t = 1.0) {
  require(lambda_t > 0.0, ErrorKind::kInvalidArgument, "se3_distance: lambda_t must be > 0");
  return rotation_angle(a.R.transpose() * b.R) + lambda_t * (a.t - b.t).norm();
}

/// Rotation vector of `r` on the branch closest to `prev`.
inline Vec3 unwrap_rotvec(const Mat3& r, const Vec3& prev) {
  const double theta = rotation_angle(r);
  Vec3 axis;
  if (theta < 1e-12) {
    if (prev.norm() < 1e-12) return Vec3::Zero();
    axis = prev.normalized();
  } else if (theta > kPi - 1e-9) {
    // Axis from the symmetric part; sign chosen to agree with prev.
    const Mat3 s = 0.5 * (r + Mat3::Identity());
    int col = 0;
    s.diagonal().maxCoeff(&col);
    axis = s.col(col).normalized();
    if (axis.dot(prev) < 0.0) axis = -axis;
  } else {
    axis = vee(r - r.transpose()).normalized();
  }
  const double m0 = std::round((axis.dot(prev) - theta) / (2.0 * kPi));
  Vec3 best = axis * (theta + 2.0 * kPi * m0);
  for (double dm : {-1.0, 1.0}) {
    const Vec3 cand = axis * (theta + 2.0 * kPi * (m0 + dm));
    if ((cand - prev).norm() < (best - prev).norm()) best = cand;
  }
  return best;
}

/// Orthonormal DCT-II along a sequence.
inline std::vector<double> dct2(std::span<const double> x) {
  const std::size_t n = x.size();
  std::vector<double> out(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      acc += x[i] * std::cos(kPi * (static_cast<double>(i) + 0.5) * static_cast<double>(k) /
                             static_cast<double>(n));
    out[k] = acc * std::sqrt((k == 0 ? 1.0 : 2.0) / static_cast<double>(n));
  }
  return out;
}

/// Inverse of dct2 (DCT-III with matching scaling).
inline std::vector<double> idct2(std::span<const double> c) {
  const std::size_t n = c.size();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      acc += c[k] * std::sqrt((k == 0 ? 1.0 : 2.0) / static_cast<double>(n)) *
             std::cos(kPi * (static_cast<double>(i) + 0.5) * static_cast<double>(k) /
                      static_cast<double>(n));
    out[i] = acc;
  }
  return out;
}

/// Trajectory coordinates: (rotation vector unwrapped along the sequence,
/// translation) for each pose.
inline std::vector<Vec6> trajectory_coords(std::span<const Pose> traj) {
  std::vector<Vec6> out;
  out.reserve(traj.size());
  Vec3 prev = Vec3::Zero();
  for (const auto& T : traj) {
    prev = unwrap_rotvec(T.R, prev);
    Vec6 c;
    c << prev, T.t;
    out.push_back(c);
  }
  return out;
}

inline std::vector<Pose> trajectory_from_coords(std::span<const Vec6> coords) {
  std::vector<Pose> out;
  out.reserve(coords.size());
  for (const auto& c : coords) out.push_back(Pose{so3_exp(c.head<3>()), c.tail<3>()});
  return out;
}

/// Low-pass filters a pose sequence by truncating its DCT spectrum to the
/// first ceil(keep_fraction * T) coefficients, per coordinate channel.
inline std::vector<Pose> dct_lowpass(std::span<const Pose> traj, double keep_fraction) {
  require(traj.size() >= 2, ErrorKind::kInvalidArgument, "dct_lowpass: need >= 2 poses");
  require(keep_fraction > 0.0 && keep_fraction <= 1.0, ErrorKind::kInvalidArgument,
          "dct_lowpass: keep_fraction must be in (0, 1]");
  const std::size_t n = traj.size();
  const auto keep = static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(n) - 1e-12));
  auto coords = trajectory_coords(traj);
  if (keep < n) {
    std::vector<double> channel(n);
    for (int ch = 0; ch < 6; ++ch) {
      for (std::size_t i = 0; i < n; ++i) channel[i] = coords[i][ch];
      auto spec = dct2(channel);
      std::fill(spec.begin() + static_cast<std::ptrdiff_t>(keep), spec.end(), 0.0);
      const auto back = idct2(spec);
      for (std::size_t i = 0; i < n; ++i) coords[i][ch] = back[i];
    }
  }
  return trajectory_from_coords(coords);
}

}  // namespace pod

// ---------------------------------------------------------------------------
// JSON: poses as row-major 3x4 nested arrays, twists as 6-element arrays.

namespace pod {

inline nlohmann::json pose_to_json(const Pose& p) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) rows.push_back({p.R(r, 0), p.R(r, 1), p.R(r, 2), p.t[r]});
  return rows;
}

inline Pose pose_from_json(const nlohmann::json& j) {
  require(j.is_array() && j.size() == 3, ErrorKind::kIo, "pose must be a 3x4 array");
  Pose p;
  for (int r = 0; r < 3; ++r) {
    require(j[r].is_array() && j[r].size() == 4, ErrorKind::kIo, "pose row must have 4 entries");
    for (int c = 0; c < 3; ++c) p.R(r, c) = j[r][c].get<double>();
    p.t[r] = j[r][3].get<double>();
  }
  return p;
}

inline nlohmann::json twist_to_json(const Twist& xi) {
  return nlohmann::json(std::vector<double>(xi.data(), xi.data() + 6));
}

inline Twist twist_from_json(const nlohmann::json& j) {
  require(j.is_array() && j.size() == 6, ErrorKind::kIo, "twist must have 6 entries");
  Twist xi;
  for (int i = 0; i < 6; ++i) xi[i] = j[i].get<double>();
  return xi;
}

}  // namespace pod
