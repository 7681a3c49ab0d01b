#include <gtest/gtest.h>

#include <complex>
#include <random>

#include "pod/geom.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace pod;
using pod::testing::random_pose;
using pod::testing::random_twist;
using pod::testing::dct_via_dft;
using pod::testing::random_smooth_trajectory;

TEST(Geom, ComposeIdentityAndInverse) {
  std::mt19937_64 rng(1);
  const Pose T = random_pose(rng);
  const Pose a = Pose::identity() * T;
  EXPECT_LT((a.R - T.R).norm(), 1e-15);
  EXPECT_LT((a.t - T.t).norm(), 1e-15);
  const Pose id = T * T.inverse();
  EXPECT_LT((id.R - Mat3::Identity()).norm(), 1e-12);
  EXPECT_LT(id.t.norm(), 1e-12);
}

TEST(Geom, ComposeRotZExample) {
  const Pose a = rot_z(kPi / 2, Vec3(1, 0, 0));
  const Pose b = rot_z(kPi / 2);
  const Pose c = compose(a, b);
  // Expected Rz(180), t = (1, 0, 0): check by applying both sides to basis vectors.
  const Pose expected = rot_z(kPi, Vec3(1, 0, 0));
  for (int i = 0; i < 3; ++i) {
    const Vec3 e = Vec3::Unit(i);
    EXPECT_LT((c.apply(e) - a.apply(b.apply(e))).norm(), 1e-12);
    EXPECT_LT((c.apply(e) - expected.apply(e)).norm(), 1e-12);
  }
  EXPECT_LT((c.apply(Vec3::UnitX()) - Vec3(0, 0, 0)).norm(), 1e-12);
  EXPECT_LT((c.apply(Vec3::UnitY()) - Vec3(1, -1, 0)).norm(), 1e-12);
}

TEST(Geom, GroupAxiomsOnRandomPairs) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int n = 0; n < 10000; ++n) {
    const Pose a = random_pose(rng), b = random_pose(rng), c = random_pose(rng);
    const Vec3 x(u(rng), u(rng), u(rng));
    EXPECT_LT(((a * b).apply(x) - a.apply(b.apply(x))).norm(), 1e-9);
    const Pose l = (a * b) * c, r = a * (b * c);
    ASSERT_LT((l.R - r.R).norm() + (l.t - r.t).norm(), 1e-9);
    const Pose id = a * a.inverse();
    ASSERT_LT((id.R - Mat3::Identity()).norm() + id.t.norm(), 1e-9);
    ASSERT_TRUE(is_rotation((a * b).R));
  }
}

TEST(Geom, ExpOfZeroIsIdentity) {
  const Pose T = pod::exp(Twist::Zero());
  EXPECT_EQ(T.R, Mat3::Identity());
  EXPECT_EQ(T.t, Vec3::Zero());
}

TEST(Geom, ExpMatchesClosedFormRotZ) {
  Twist xi;
  xi << 0, 0, kPi / 2, 0, 0, 0;
  Mat3 rz;
  rz << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  EXPECT_LT((pod::exp(xi).R - rz).norm(), 1e-12);
}

TEST(Geom, ExpLogRoundTrip) {
  std::mt19937_64 rng(3);
  for (int n = 0; n < 2000; ++n) {
    const Twist xi = random_twist(rng, 2.99, 2.0);
    const Twist back = pod::log(pod::exp(xi));
    ASSERT_LT((back - xi).norm(), 1e-7) << xi.transpose();
    const Pose T = pod::exp(xi);
    const Pose T2 = pod::exp(pod::log(T));
    ASSERT_LT((T.R - T2.R).norm() + (T.t - T2.t).norm(), 1e-7);
  }
}

TEST(Geom, LogNearPiIsDegenerate) {
  const Pose T = rot_z(kPi - 1e-9);
  try {
    pod::log(T);
    FAIL() << "expected degenerate-rotation error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDegenerateRotation);
  }
  EXPECT_NO_THROW(pod::log(rot_z(kPi - 1e-3)));
}

TEST(Geom, GramSchmidtExamples) {
  EXPECT_LT((gram_schmidt({Vec3(1, 0, 0), Vec3(0, 1, 0)}) - Mat3::Identity()).norm(), 1e-15);
  EXPECT_LT((gram_schmidt({Vec3(2, 0, 0), Vec3(0, 3, 0)}) - Mat3::Identity()).norm(), 1e-15);
}

TEST(Geom, GramSchmidtPropertiesOnRandomInputs) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> s(0.01, 100.0);
  for (int k = 0; k < 2000; ++k) {
    const Rot6D r{Vec3(n(rng), n(rng), n(rng)), Vec3(n(rng), n(rng), n(rng))};
    const Mat3 R = gram_schmidt(r);
    ASSERT_TRUE(is_rotation(R));
    ASSERT_LT((R.col(0) - r.a.normalized()).norm(), 1e-12);
    const double scale = s(rng);
    const Mat3 Rs = gram_schmidt({scale * r.a, scale * r.b});
    ASSERT_LT((R - Rs).cwiseAbs().maxCoeff(), 1e-9);
    // Round trip through the label convention.
    ASSERT_LT((gram_schmidt(to_rot6d(R)) - R).norm(), 1e-12);
  }
}

TEST(Geom, GramSchmidtDegenerateInputs) {
  EXPECT_THROW(gram_schmidt({Vec3::Zero(), Vec3::UnitY()}), Error);
  EXPECT_THROW(gram_schmidt({Vec3::UnitX(), Vec3(2, 0, 0)}), Error);
  EXPECT_THROW(gram_schmidt({Vec3::UnitX(), Vec3::Zero()}), Error);
  try {
    gram_schmidt({Vec3::UnitX(), Vec3(1, 1e-9, 0)});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidRepresentation);
  }
}

TEST(Geom, GramSchmidtJacobianMatchesFiniteDifferences) {
  const auto s = pod::testing::gram_schmidt_jacobian_suite(50, 5);
  EXPECT_LT(s.max_rel, 1e-4) << s.worst;
  EXPECT_GT(s.checked, 50 * 20);
}

TEST(Geom, ExpJacobianMatchesFiniteDifferences) {
  const auto s = pod::testing::exp_jacobian_suite(50, 6);
  EXPECT_LT(s.max_rel, 1e-4) << s.worst;
  EXPECT_GT(s.checked, 50 * 20);
}

TEST(Geom, RightJacobianAndAdjoint) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const Twist xi = random_twist(rng, 2.0, 1.0);
    const Twist d = random_twist(rng, 1.0, 1.0) * 1e-6;
    const Pose lhs = pod::exp(xi + d);
    const Pose rhs = pod::exp(xi) * pod::exp(right_jacobian(xi) * d);
    EXPECT_LT((lhs.R - rhs.R).norm() + (lhs.t - rhs.t).norm(), 1e-10);
    const Pose rhs_l = pod::exp(left_jacobian(xi) * d) * pod::exp(xi);
    EXPECT_LT((lhs.R - rhs_l.R).norm() + (lhs.t - rhs_l.t).norm(), 1e-10);

    const Pose T = random_pose(rng);
    const Pose conj = T * pod::exp(xi) * T.inverse();
    const Pose via_ad = pod::exp(adjoint(T) * xi);
    EXPECT_LT((conj.R - via_ad.R).norm() + (conj.t - via_ad.t).norm(), 1e-9);
  }
}

TEST(Geom, Se3DistanceExamples) {
  std::mt19937_64 rng(8);
  const Pose T = random_pose(rng);
  EXPECT_NEAR(se3_distance(T, T), 0.0, 1e-12);
  EXPECT_NEAR(se3_distance(Pose::identity(), rot_z(kPi / 2)), kPi / 2, 1e-12);
  EXPECT_NEAR(se3_distance(Pose::identity(), Pose::from_translation(Vec3(0.3, 0, 0))), 0.3, 1e-15);
  const Pose U = random_pose(rng);
  EXPECT_NEAR(se3_distance(T, U, 0.5), se3_distance(U, T, 0.5), 1e-12);
  EXPECT_GT(se3_distance(T, U), 0.0);
  EXPECT_THROW(se3_distance(T, U, 0.0), Error);
}


TEST(Geom, DctLowpassConstantAndFullKeep) {
  std::mt19937_64 rng(9);
  const Pose T = random_pose(rng);
  const std::vector<Pose> constant(40, T);
  for (const auto& p : dct_lowpass(constant, 0.25)) {
    EXPECT_LT((p.R - T.R).norm(), 1e-9);
    EXPECT_LT((p.t - T.t).norm(), 1e-9);
  }
  const auto traj = random_smooth_trajectory(rng, 50);
  const auto same = dct_lowpass(traj, 1.0);
  for (std::size_t i = 0; i < traj.size(); ++i) {
    EXPECT_LT((same[i].R - traj[i].R).norm(), 1e-7);
    EXPECT_LT((same[i].t - traj[i].t).norm(), 1e-7);
  }
}

TEST(Geom, DctLowpassRemovesHighFrequencyJitter) {
  const int n = 60;
  std::vector<Pose> jitter;
  std::vector<double> channel;
  for (int i = 0; i < n; ++i) {
    const double x = 0.01 * ((i % 2) ? 1.0 : -1.0);
    channel.push_back(x);
    jitter.push_back(Pose::from_translation(Vec3(x, 0, 0)));
  }
  const auto filtered = dct_lowpass(jitter, 0.2);
  double before = 0.0, after = 0.0;
  for (int i = 0; i < n; ++i) {
    before += channel[i] * channel[i];
    after += filtered[i].t.squaredNorm() + pod::log(filtered[i]).head<3>().squaredNorm();
  }
  // Parseval: residual energy equals the energy of the kept DCT coefficients.
  const auto spec = dct_via_dft(channel);
  double kept = 0.0;
  for (int k = 0; k < 12; ++k) kept += spec[k] * spec[k];
  EXPECT_NEAR(after, kept, 1e-12);
  EXPECT_LE(after * 10.0, before);
}

TEST(Geom, DctLowpassIsIdempotent) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    auto traj = random_smooth_trajectory(rng, 45);
    std::normal_distribution<double> jitter(0.0, 0.02);
    for (auto& p : traj) p = p * pod::exp((Twist() << jitter(rng), jitter(rng), jitter(rng), jitter(rng), jitter(rng), jitter(rng)).finished());
    const auto once = dct_lowpass(traj, 0.25);
    const auto twice = dct_lowpass(once, 0.25);
    for (std::size_t i = 0; i < once.size(); ++i) {
      ASSERT_LT((once[i].R - twice[i].R).cwiseAbs().maxCoeff(), 1e-9);
      ASSERT_LT((once[i].t - twice[i].t).cwiseAbs().maxCoeff(), 1e-9);
    }
  }
}

TEST(Geom, DctLowpassMatchesDftReference) {
  std::mt19937_64 rng(11);
  const auto traj = random_smooth_trajectory(rng, 37);
  EXPECT_LT(pod::testing::max_pose_diff(dct_lowpass(traj, 0.3), pod::testing::dct_reference_lowpass(traj, 0.3)), 1e-7);
}

TEST(Geom, DctLowpassPreconditions) {
  std::vector<Pose> one(1);
  EXPECT_THROW(dct_lowpass(one, 0.5), Error);
  std::vector<Pose> two(2);
  EXPECT_THROW(dct_lowpass(two, 0.0), Error);
  EXPECT_THROW(dct_lowpass(two, 1.5), Error);
}

TEST(Geom, JsonLayout) {
  std::mt19937_64 rng(12);
  const Pose T = random_pose(rng);
  const auto j = pose_to_json(T);
  ASSERT_EQ(j.size(), 3u);
  EXPECT_EQ(j[1][3].get<double>(), T.t[1]);
  EXPECT_EQ(j[2][0].get<double>(), T.R(2, 0));
  const Pose back = pose_from_json(j);
  EXPECT_EQ(back.R, T.R);
  EXPECT_EQ(back.t, T.t);
  const Twist xi = random_twist(rng, 1.0, 1.0);
  EXPECT_EQ(twist_from_json(twist_to_json(xi)), xi);
}
