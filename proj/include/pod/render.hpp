#pragma once

// Differentiable soft point-splatting renderer.
//
// For pixel x and point i with projection p_i, camera depth z_i and image-space
// footprint s_i:
//   g_i = exp(-q_i) * taper(q_i),   q_i = |x - p_i|^2 / (2 s_i^2)
//   w_i = g_i * exp(-beta (z_i - z_min(x)))
//   coverage = 1 - exp(-kappa sum g_i)
//   feature = coverage * sum w_i f_i / sum w_i
//   depth   = coverage * sum w_i z_i / sum w_i
//   opacity = 1 - exp(-sum g_i)
// A smooth taper takes the Gaussian to zero near 5.7 sigma so each point
// touches a bounded window. Feature and depth are ratios, so z_min cancels
// exactly and holding it fixed in the backward pass is not an approximation.
// The sharp coverage factor fades both to zero where no point reaches, which
// keeps the image continuous in the pose.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "pod/error.hpp"
#include "pod/geom.hpp"
#include "pod/scene.hpp"

namespace pod {

struct Camera {
  double fx = 72.0, fy = 72.0;
  double cx = 31.5, cy = 31.5;
  int width = 64, height = 64;
  Pose extrinsic;  // applied after the object-to-camera pose
  double z_near = 0.05;

  bool valid() const {
    return fx > 0 && fy > 0 && width > 0 && height > 0 && cx >= 0 && cx <= width - 1 && cy >= 0 &&
           cy <= height - 1;
  }
};

struct RenderParams {
  double sigma = 1.0;  // footprint scale: pixels per (radius * fx / z)
  double beta = 50.0;  // soft z-test sharpness
  double kappa = 10.0; // coverage sharpness
};

struct FeatureImage {
  int height = 0, width = 0, dim = 0;
  std::vector<double> features;  // (row, col, channel)
  std::vector<double> depth;
  std::vector<double> opacity;
  bool clipped = false;  // some point was behind z_near and omitted

  FeatureImage() = default;
  FeatureImage(int h, int w, int d)
      : height(h), width(w), dim(d), features(static_cast<std::size_t>(h) * w * d, 0.0),
        depth(static_cast<std::size_t>(h) * w, 0.0), opacity(static_cast<std::size_t>(h) * w, 0.0) {}

  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  double* feature(std::size_t pix) { return features.data() + pix * dim; }
  const double* feature(std::size_t pix) const { return features.data() + pix * dim; }
};

/// Loss gradient with respect to the rendered quantities.
struct ImageGrad {
  std::vector<double> features, depth, opacity;

  explicit ImageGrad(const FeatureImage& like)
      : features(like.features.size(), 0.0), depth(like.depth.size(), 0.0), opacity(like.opacity.size(), 0.0) {}
};

/// Right-perturbation gradients for each pose of the config.
struct RenderGrads {
  Vec6 object = Vec6::Zero();
  std::vector<Vec6> parts;
};

namespace detail {

inline constexpr double kTaperStart = 8.0;
inline constexpr double kTaperEnd = 16.0;

struct Kernel {
  double g;       // kernel value
  double dg_dq;   // derivative wrt q
};

// Gaussian in q with a bump-function taper: log g stays gently sloped wherever
// g is large enough to matter after the depth weighting, which can lift far
// tails by up to exp(beta * object depth).
inline Kernel splat_kernel(double q) {
  if (q >= kTaperEnd) return {0.0, 0.0};
  const double e = std::exp(-q);
  if (q <= kTaperStart) return {e, -e};
  constexpr double range = kTaperEnd - kTaperStart;
  const double s = (q - kTaperStart) / range;
  const double r = 1.0 / (1.0 - s);
  const double phi = s * s * s * r;
  if (phi > 600.0) return {0.0, 0.0};
  const double dphi = (3.0 * s * s * r + s * s * s * r * r) / range;
  const double g = e * std::exp(-phi);
  return {g, -g * (1.0 + dphi)};
}

struct Splat {
  double u, v, z, s;  // projection, depth, footprint sigma in pixels
  Vec3 cam;           // camera-frame position
  int part;
  const FeaturePoint* point;
};

struct Projected {
  std::vector<Splat> splats;
  bool clipped = false;
};

inline Projected project(const ObjectTemplate& tpl, const PoseConfig& pose, const Camera& cam,
                         const RenderParams& rp) {
  require(pose.parts.size() == tpl.parts.size(), ErrorKind::kShapeMismatch, "render: part count mismatch");
  require(cam.valid(), ErrorKind::kInvalidArgument, "render: invalid camera");
  Projected out;
  out.splats.reserve(tpl.num_points());
  for (std::size_t p = 0; p < tpl.parts.size(); ++p) {
    const Pose M = cam.extrinsic * pose.object * pose.parts[p];
    for (const auto& fp : tpl.parts[p].points) {
      const Vec3 X = M.apply(fp.position);
      if (!(X.z() > cam.z_near)) {
        out.clipped = true;
        continue;
      }
      const double inv_z = 1.0 / X.z();
      out.splats.push_back({cam.fx * X.x() * inv_z + cam.cx, cam.fy * X.y() * inv_z + cam.cy, X.z(),
                            rp.sigma * fp.radius * cam.fx * inv_z, X, static_cast<int>(p), &fp});
    }
  }
  return out;
}

// Calls fn(pix, q, dx, dy) for every pixel inside the splat's support.
template <typename Fn>
inline void for_each_pixel(const Splat& sp, int width, int height, Fn&& fn) {
  const double reach = std::sqrt(2.0 * kTaperEnd) * sp.s;
  const int c0 = std::max(0, static_cast<int>(std::ceil(sp.u - reach)));
  const int c1 = std::min(width - 1, static_cast<int>(std::floor(sp.u + reach)));
  const int r0 = std::max(0, static_cast<int>(std::ceil(sp.v - reach)));
  const int r1 = std::min(height - 1, static_cast<int>(std::floor(sp.v + reach)));
  const double inv = 1.0 / (2.0 * sp.s * sp.s);
  for (int r = r0; r <= r1; ++r) {
    const double dy = r - sp.v;
    for (int c = c0; c <= c1; ++c) {
      const double dx = c - sp.u;
      const double q = (dx * dx + dy * dy) * inv;
      if (q < kTaperEnd) fn(static_cast<std::size_t>(r) * width + c, q, dx, dy);
    }
  }
}

struct Accum {
  std::vector<double> zmin, wsum, gsum;
};

inline Accum accumulate(const Projected& pr, FeatureImage& img, const RenderParams& rp) {
  const std::size_t n = img.pixels();
  const int D = img.dim;
  Accum acc{std::vector<double>(n, std::numeric_limits<double>::infinity()), std::vector<double>(n, 0.0),
            std::vector<double>(n, 0.0)};
  for (const auto& sp : pr.splats)
    for_each_pixel(sp, img.width, img.height,
                   [&](std::size_t pix, double, double, double) { acc.zmin[pix] = std::min(acc.zmin[pix], sp.z); });
  for (const auto& sp : pr.splats) {
    const double* f = sp.point->feature.data();
    for_each_pixel(sp, img.width, img.height, [&](std::size_t pix, double q, double, double) {
      const double g = splat_kernel(q).g;
      const double w = g * std::exp(-rp.beta * (sp.z - acc.zmin[pix]));
      acc.wsum[pix] += w;
      acc.gsum[pix] += g;
      img.depth[pix] += w * sp.z;
      double* out = img.feature(pix);
      for (int d = 0; d < D; ++d) out[d] += w * f[d];
    });
  }
  for (std::size_t pix = 0; pix < n; ++pix) {
    img.opacity[pix] = 1.0 - std::exp(-acc.gsum[pix]);
    if (acc.wsum[pix] > 0.0) {
      const double inv = 1.0 / acc.wsum[pix];
      img.depth[pix] *= inv;
      double* out = img.feature(pix);
      for (int d = 0; d < D; ++d) out[d] *= inv;
    }
  }
  return acc;
}

inline void apply_coverage(const Accum& acc, FeatureImage& img, const RenderParams& rp) {
  const int D = img.dim;
  for (std::size_t pix = 0; pix < img.pixels(); ++pix) {
    const double cov = 1.0 - std::exp(-rp.kappa * acc.gsum[pix]);
    img.depth[pix] *= cov;
    double* out = img.feature(pix);
    for (int d = 0; d < D; ++d) out[d] *= cov;
  }
}

}  // namespace detail

inline FeatureImage render(const ObjectTemplate& tpl, const PoseConfig& pose, const Camera& cam,
                           const RenderParams& rp = {}) {
  const auto pr = detail::project(tpl, pose, cam, rp);
  FeatureImage img(cam.height, cam.width, tpl.feature_dim);
  img.clipped = pr.clipped;
  const auto acc = detail::accumulate(pr, img, rp);
  detail::apply_coverage(acc, img, rp);
  return img;
}

/// Backpropagates an image-space gradient to right-perturbation twists of the
/// object pose and every part pose.
inline RenderGrads render_backward(const ObjectTemplate& tpl, const PoseConfig& pose, const Camera& cam,
                                   const RenderParams& rp, const ImageGrad& grad) {
  const auto pr = detail::project(tpl, pose, cam, rp);
  FeatureImage img(cam.height, cam.width, tpl.feature_dim);
  const auto acc = detail::accumulate(pr, img, rp);
  const int D = img.dim;
  const std::size_t n = img.pixels();

  // Per-pixel terms shared by all splats; img holds the ratios before coverage.
  std::vector<double> a(n * D, 0.0), a_dot_f(n, 0.0), b(n, 0.0), b_dot_z(n, 0.0), c(n, 0.0);
  for (std::size_t pix = 0; pix < n; ++pix) {
    c[pix] = grad.opacity[pix] * std::exp(-acc.gsum[pix]);
    if (acc.wsum[pix] <= 0.0) continue;
    const double e_cov = std::exp(-rp.kappa * acc.gsum[pix]);
    const double cov = 1.0 - e_cov;
    const double inv = cov / acc.wsum[pix];
    const double* F = img.feature(pix);
    double dot = 0.0, d_cov = grad.depth[pix] * img.depth[pix];
    for (int d = 0; d < D; ++d) {
      a[pix * D + d] = grad.features[pix * D + d] * inv;
      dot += a[pix * D + d] * F[d];
      d_cov += grad.features[pix * D + d] * F[d];
    }
    a_dot_f[pix] = dot;
    b[pix] = grad.depth[pix] * inv;
    b_dot_z[pix] = b[pix] * img.depth[pix];
    c[pix] += d_cov * rp.kappa * e_cov;
  }

  RenderGrads out;
  out.parts.assign(tpl.parts.size(), Vec6::Zero());
  std::vector<Vec3> point_grad(pr.splats.size(), Vec3::Zero());
  for (std::size_t k = 0; k < pr.splats.size(); ++k) {
    const auto& sp = pr.splats[k];
    const double* f = sp.point->feature.data();
    double gu = 0.0, gv = 0.0, gs = 0.0, gz = 0.0;
    const double inv_s2 = 1.0 / (sp.s * sp.s);
    detail::for_each_pixel(sp, img.width, img.height, [&](std::size_t pix, double q, double dx, double dy) {
      const auto ker = detail::splat_kernel(q);
      const double e = std::exp(-rp.beta * (sp.z - acc.zmin[pix]));
      const double w = ker.g * e;
      double af = 0.0;
      const double* ap = a.data() + pix * D;
      for (int d = 0; d < D; ++d) af += ap[d] * f[d];
      const double dl_dw = af - a_dot_f[pix] + b[pix] * sp.z - b_dot_z[pix];
      const double dl_dg = dl_dw * e + c[pix];
      gz += dl_dw * (-rp.beta * w) + b[pix] * w;
      const double dl_dq = dl_dg * ker.dg_dq;
      gu += dl_dq * (-dx * inv_s2);
      gv += dl_dq * (-dy * inv_s2);
      gs += dl_dq * (-2.0 * q / sp.s);
    });
    const double inv_z = 1.0 / sp.z;
    const Vec3& X = sp.cam;
    point_grad[k] = Vec3(gu * cam.fx * inv_z, gv * cam.fy * inv_z,
                         gz - gu * cam.fx * X.x() * inv_z * inv_z - gv * cam.fy * X.y() * inv_z * inv_z -
                             gs * sp.s * inv_z);
  }

  const Pose EO = cam.extrinsic * pose.object;
  for (std::size_t k = 0; k < pr.splats.size(); ++k) {
    const auto& sp = pr.splats[k];
    const Pose& P = pose.parts[sp.part];
    const Vec3 p = sp.point->position;
    const Vec3 g_part = (EO.R * P.R).transpose() * point_grad[k];
    out.parts[sp.part].head<3>() += p.cross(g_part);
    out.parts[sp.part].tail<3>() += g_part;
    const Vec3 y = P.apply(p);
    const Vec3 g_obj = EO.R.transpose() * point_grad[k];
    out.object.head<3>() += y.cross(g_obj);
    out.object.tail<3>() += g_obj;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Debug dumps

namespace detail {

inline void write_i32(std::ostream& os, std::int32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint32_t>(v) >> (8 * i)) & 0xffu);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xffu);
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::int32_t read_i32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  require(static_cast<bool>(is), ErrorKind::kIo, "unexpected end of file");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return static_cast<std::int32_t>(v);
}

inline float read_f32(std::istream& is) {
  const auto bits = static_cast<std::uint32_t>(read_i32(is));
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

/// Flat little-endian dump: H, W, D as int32, then features, depth and
/// opacity as float32.
inline void write_feature_image(const std::string& path, const FeatureImage& img) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot open " + path);
  detail::write_i32(os, img.height);
  detail::write_i32(os, img.width);
  detail::write_i32(os, img.dim);
  for (double v : img.features) detail::write_f32(os, static_cast<float>(v));
  for (double v : img.depth) detail::write_f32(os, static_cast<float>(v));
  for (double v : img.opacity) detail::write_f32(os, static_cast<float>(v));
  require(static_cast<bool>(os), ErrorKind::kIo, "write failed: " + path);
}

inline FeatureImage read_feature_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::kIo, "cannot open " + path);
  const int h = detail::read_i32(is), w = detail::read_i32(is), d = detail::read_i32(is);
  require(h > 0 && w > 0 && d > 0 && h <= 1 << 14 && w <= 1 << 14 && d <= 1 << 12, ErrorKind::kIo,
          "bad feature image header in " + path);
  FeatureImage img(h, w, d);
  for (auto& v : img.features) v = detail::read_f32(is);
  for (auto& v : img.depth) v = detail::read_f32(is);
  for (auto& v : img.opacity) v = detail::read_f32(is);
  return img;
}

/// Binary PPM preview of the first three feature channels, min-max scaled.
inline void write_preview_ppm(const std::string& path, const FeatureImage& img) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot open " + path);
  os << "P6\n" << img.width << " " << img.height << "\n255\n";
  const int channels = std::min(3, img.dim);
  double lo[3] = {0, 0, 0}, hi[3] = {1, 1, 1};
  for (int ch = 0; ch < channels; ++ch) {
    lo[ch] = std::numeric_limits<double>::infinity();
    hi[ch] = -lo[ch];
    for (std::size_t pix = 0; pix < img.pixels(); ++pix) {
      lo[ch] = std::min(lo[ch], img.feature(pix)[ch]);
      hi[ch] = std::max(hi[ch], img.feature(pix)[ch]);
    }
  }
  for (std::size_t pix = 0; pix < img.pixels(); ++pix) {
    for (int ch = 0; ch < 3; ++ch) {
      double v = 0.0;
      if (ch < channels && hi[ch] > lo[ch]) v = (img.feature(pix)[ch] - lo[ch]) / (hi[ch] - lo[ch]);
      v *= img.opacity[pix];
      os.put(static_cast<char>(static_cast<unsigned char>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5)));
    }
  }
}

}  // namespace pod
