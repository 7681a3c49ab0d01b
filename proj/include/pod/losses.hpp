#pragma once

// Per-frame image losses and the pose priors, each returning its value and
// the gradient needed to chain into render_backward or the pose twists.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "pod/capture.hpp"
#include "pod/error.hpp"
#include "pod/geom.hpp"
#include "pod/render.hpp"
#include "pod/scene.hpp"

namespace pod {

struct LossWeights {
  double feat = 1.0;
  double depth = 0.1;
  double mask = 0.5;
  double static_ = 100.0;
  double temporal = 5.0;

  bool all_zero() const { return feat == 0.0 && depth == 0.0 && mask == 0.0 && static_ == 0.0 && temporal == 0.0; }
};

inline nlohmann::json weights_to_json(const LossWeights& w) {
  return {{"feat", w.feat}, {"depth", w.depth}, {"mask", w.mask}, {"static", w.static_}, {"temporal", w.temporal}};
}

inline LossWeights weights_from_json(const nlohmann::json& j) {
  LossWeights w;
  w.feat = j.value("feat", w.feat);
  w.depth = j.value("depth", w.depth);
  w.mask = j.value("mask", w.mask);
  w.static_ = j.value("static", w.static_);
  w.temporal = j.value("temporal", w.temporal);
  for (double v : {w.feat, w.depth, w.mask, w.static_, w.temporal})
    require(std::isfinite(v) && v >= 0.0, ErrorKind::kInvalidArgument, "loss weights must be finite and >= 0");
  return w;
}

// ---------------------------------------------------------------------------
// Image losses

/// Pixels where the observation mask is set or the render is opaque.
inline std::vector<std::uint8_t> feature_region(const FeatureImage& rendered, const Observation& obs) {
  std::vector<std::uint8_t> region(rendered.pixels());
  for (std::size_t pix = 0; pix < region.size(); ++pix)
    region[pix] = obs.mask[pix] || rendered.opacity[pix] > 0.5;
  return region;
}

/// Mean over region pixels of the squared feature distance. The region is
/// recomputed unless given; gradient checks pass a frozen one.
inline double loss_feature(const FeatureImage& rendered, const Observation& obs, ImageGrad* grad = nullptr,
                           double weight = 1.0, const std::vector<std::uint8_t>* region = nullptr) {
  require(rendered.features.size() == obs.image.features.size(), ErrorKind::kShapeMismatch,
          "loss_feature: shape mismatch");
  std::vector<std::uint8_t> own;
  if (!region) {
    own = feature_region(rendered, obs);
    region = &own;
  }
  std::size_t count = 0;
  for (auto r : *region) count += r;
  if (count == 0) return 0.0;
  const int D = rendered.dim;
  const double inv = 1.0 / static_cast<double>(count);
  double sum = 0.0;
  for (std::size_t pix = 0; pix < rendered.pixels(); ++pix) {
    if (!(*region)[pix]) continue;
    const double* a = rendered.feature(pix);
    const double* b = obs.image.feature(pix);
    for (int d = 0; d < D; ++d) {
      const double diff = a[d] - b[d];
      sum += diff * diff;
      if (grad) grad->features[pix * D + d] += weight * 2.0 * diff * inv;
    }
  }
  return sum * inv;
}

/// Fixed pair sample over the mask, ordered so pseudo_depth(near) < pseudo_depth(far).
struct RankPairs {
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;  // (near, far)
};

inline RankPairs sample_rank_pairs(const Observation& obs, int n_pairs, std::uint64_t seed) {
  require(n_pairs >= 1, ErrorKind::kInvalidArgument, "sample_rank_pairs: n_pairs must be >= 1");
  RankPairs out;
  std::vector<std::uint32_t> in;
  for (std::size_t pix = 0; pix < obs.mask.size(); ++pix)
    if (obs.mask[pix]) in.push_back(static_cast<std::uint32_t>(pix));
  if (in.size() < 2) return out;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, in.size() - 1);
  out.pairs.reserve(n_pairs);
  for (int k = 0; k < n_pairs; ++k) {
    const auto u = in[pick(rng)], v = in[pick(rng)];
    const double du = obs.pseudo_depth[u], dv = obs.pseudo_depth[v];
    if (du == dv) continue;  // no ordering to learn from
    out.pairs.emplace_back(du < dv ? u : v, du < dv ? v : u);
  }
  return out;
}

/// Mean hinge max(0, z(near) - z(far) + margin) over the pairs. `flag_empty`
/// is set when the mask gave no usable pairs.
inline double loss_depth_rank(const FeatureImage& rendered, const RankPairs& rp, double margin = 1e-4,
                              ImageGrad* grad = nullptr, double weight = 1.0, bool* flag_empty = nullptr) {
  if (flag_empty) *flag_empty = rp.pairs.empty();
  if (rp.pairs.empty()) return 0.0;
  const double inv = 1.0 / static_cast<double>(rp.pairs.size());
  double sum = 0.0;
  for (const auto& [u, v] : rp.pairs) {
    const double h = rendered.depth[u] - rendered.depth[v] + margin;
    if (h <= 0.0) continue;
    sum += h;
    if (grad) {
      grad->depth[u] += weight * inv;
      grad->depth[v] -= weight * inv;
    }
  }
  return sum * inv;
}

inline double loss_depth_rank(const FeatureImage& rendered, const Observation& obs, int n_pairs = 10000,
                              double margin = 1e-4, std::uint64_t seed = 0, ImageGrad* grad = nullptr,
                              double weight = 1.0, bool* flag_empty = nullptr) {
  return loss_depth_rank(rendered, sample_rank_pairs(obs, n_pairs, seed), margin, grad, weight, flag_empty);
}

/// Mean over all pixels of (opacity - mask)^2.
inline double loss_mask(const FeatureImage& rendered, const Observation& obs, ImageGrad* grad = nullptr,
                        double weight = 1.0) {
  require(rendered.opacity.size() == obs.mask.size(), ErrorKind::kShapeMismatch, "loss_mask: shape mismatch");
  const double inv = 1.0 / static_cast<double>(rendered.opacity.size());
  double sum = 0.0;
  for (std::size_t pix = 0; pix < rendered.opacity.size(); ++pix) {
    const double diff = rendered.opacity[pix] - (obs.mask[pix] ? 1.0 : 0.0);
    sum += diff * diff;
    if (grad) grad->opacity[pix] += weight * 2.0 * diff * inv;
  }
  return sum * inv;
}

struct PixelLossTerms {
  double feat = 0.0, depth = 0.0, mask = 0.0;
  double total(const LossWeights& w) const { return w.feat * feat + w.depth * depth + w.mask * mask; }
};

/// Weighted feature + depth-rank + mask losses of one render against one
/// observation, accumulating `scale` times the weighted gradient.
inline PixelLossTerms pixel_losses(const FeatureImage& rendered, const Observation& obs, const RankPairs& pairs,
                                   const LossWeights& w, double scale, ImageGrad* grad, double margin = 1e-4) {
  PixelLossTerms t;
  if (w.feat > 0.0) t.feat = loss_feature(rendered, obs, grad, scale * w.feat);
  if (w.depth > 0.0) t.depth = loss_depth_rank(rendered, pairs, margin, grad, scale * w.depth);
  if (w.mask > 0.0) t.mask = loss_mask(rendered, obs, grad, scale * w.mask);
  return t;
}

// ---------------------------------------------------------------------------
// Pose priors

/// Sum over connections of |T_a c_a - T_b c_b|^2 with c_x the connection
/// centroid in part x's rest frame. Gradients are right-perturbation twists.
inline double loss_static(const ObjectTemplate& tpl, std::span<const Pose> parts, std::vector<Vec6>* grads = nullptr,
                          double weight = 1.0) {
  require(parts.size() == tpl.parts.size(), ErrorKind::kShapeMismatch, "loss_static: part count mismatch");
  double sum = 0.0;
  for (const auto& c : tpl.connections) {
    const Vec3 ca = tpl.parts[c.part_a].rest_frame.inverse().apply(c.centroid);
    const Vec3 cb = tpl.parts[c.part_b].rest_frame.inverse().apply(c.centroid);
    const Pose& A = parts[c.part_a];
    const Pose& B = parts[c.part_b];
    const Vec3 r = A.apply(ca) - B.apply(cb);
    sum += r.squaredNorm();
    if (grads) {
      const Vec3 g = 2.0 * weight * r;
      const Vec3 ga = A.R.transpose() * g, gb = -(B.R.transpose() * g);
      (*grads)[c.part_a].head<3>() += ca.cross(ga);
      (*grads)[c.part_a].tail<3>() += ga;
      (*grads)[c.part_b].head<3>() += cb.cross(gb);
      (*grads)[c.part_b].tail<3>() += gb;
    }
  }
  return sum;
}

/// Smoothness of one pose sequence: v_t = log(T_t^-1 T_{t+1}) and the
/// penalty sum_t |v_t - (v_{t-1} + v_{t+1}) / 2|^2 over interior velocities.
/// Zero for fewer than four poses.
inline double loss_temporal(std::span<const Pose> seq, std::vector<Vec6>* grads = nullptr, double weight = 1.0) {
  const int n = static_cast<int>(seq.size());
  if (n < 4) return 0.0;
  std::vector<Twist> v(n - 1);
  for (int t = 0; t + 1 < n; ++t) v[t] = log(seq[t].inverse() * seq[t + 1]);
  std::vector<Twist> gv(n - 1, Twist::Zero());
  double sum = 0.0;
  for (int t = 1; t + 2 < n; ++t) {
    const Twist r = v[t] - 0.5 * (v[t - 1] + v[t + 1]);
    sum += r.squaredNorm();
    const Twist g = 2.0 * weight * r;
    gv[t] += g;
    gv[t - 1] -= 0.5 * g;
    gv[t + 1] -= 0.5 * g;
  }
  if (grads) {
    // log(exp(-a) D exp(b)) = v - Jl^-1(v) a + Jr^-1(v) b to first order.
    for (int t = 0; t + 1 < n; ++t) {
      if (gv[t].isZero(0.0)) continue;
      const Mat6 jr_inv = right_jacobian(v[t]).inverse();
      const Mat6 jl_inv = left_jacobian(v[t]).inverse();
      (*grads)[t] -= jl_inv.transpose() * gv[t];
      (*grads)[t + 1] += jr_inv.transpose() * gv[t];
    }
  }
  return sum;
}

}  // namespace pod
