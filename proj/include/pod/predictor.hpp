#pragma once

// Feed-forward pose predictor: pooled feature descriptors in, object pose and
// every part pose out (Gram-Schmidt rotation + translation per pose).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "pod/capture.hpp"
#include "pod/error.hpp"
#include "pod/geom.hpp"
#include "pod/nn.hpp"
#include "pod/render.hpp"
#include "pod/scene.hpp"

namespace pod {

/// G x G x D cell averages of a feature image with everything outside the
/// mask zeroed. Stored (row, col, channel).
struct DescriptorGrid {
  int grid = 0, dim = 0;
  std::vector<float> values;

  float& at(int r, int c, int d) { return values[(static_cast<std::size_t>(r) * grid + c) * dim + d]; }
  float at(int r, int c, int d) const { return values[(static_cast<std::size_t>(r) * grid + c) * dim + d]; }
};

// Pixel range [begin, end) of cell k along an axis of n pixels.
inline std::pair<int, int> cell_span(int k, int G, int n) { return {k * n / G, (k + 1) * n / G}; }

inline DescriptorGrid pool_descriptor(const FeatureImage& img, const std::vector<std::uint8_t>& mask, int G) {
  require(G >= 1 && G <= img.height && G <= img.width, ErrorKind::kInvalidArgument, "pool_descriptor: bad grid size");
  require(mask.size() == img.pixels(), ErrorKind::kShapeMismatch, "pool_descriptor: mask shape mismatch");
  DescriptorGrid out{G, img.dim, std::vector<float>(static_cast<std::size_t>(G) * G * img.dim, 0.0f)};
  std::vector<double> acc(img.dim);
  for (int r = 0; r < G; ++r) {
    const auto [y0, y1] = cell_span(r, G, img.height);
    for (int c = 0; c < G; ++c) {
      const auto [x0, x1] = cell_span(c, G, img.width);
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          const std::size_t pix = static_cast<std::size_t>(y) * img.width + x;
          if (!mask[pix]) continue;
          const double* f = img.feature(pix);
          for (int d = 0; d < img.dim; ++d) acc[d] += f[d];
        }
      const double inv = 1.0 / ((y1 - y0) * (x1 - x0));
      for (int d = 0; d < img.dim; ++d) out.at(r, c, d) = static_cast<float>(acc[d] * inv);
    }
  }
  return out;
}

inline DescriptorGrid pool_descriptor(const Observation& obs, int G) { return pool_descriptor(obs.image, obs.mask, G); }

// ---------------------------------------------------------------------------
// Parameters and pose coding

inline constexpr int kPoseOutputs = 9;  // Rot6D + translation

struct PredictorParams {
  int parts = 0, dim = 0, grid = 0, hidden = 0;
  nn::Mlp<float> net;

  int outputs() const { return kPoseOutputs * (parts + 1); }
};

inline PredictorParams init_predictor(int parts, int dim, int grid = 8, int hidden = 256, std::uint64_t seed = 0) {
  require(parts >= 1 && dim >= 1 && grid >= 1 && hidden >= 1, ErrorKind::kInvalidArgument,
          "init_predictor: sizes must be >= 1");
  PredictorParams p{parts, dim, grid, hidden, {}};
  p.net = nn::make_mlp<float>({grid * grid * dim, hidden, hidden, kPoseOutputs * (parts + 1)}, seed);
  return p;
}

/// Object pose first, then parts; each as R(:,0), R(:,1), t.
inline std::vector<double> encode_pose_config(const PoseConfig& c) {
  std::vector<double> y;
  y.reserve(kPoseOutputs * (c.parts.size() + 1));
  auto put = [&](const Pose& p) {
    for (int col = 0; col < 2; ++col)
      for (int row = 0; row < 3; ++row) y.push_back(p.R(row, col));
    for (int k = 0; k < 3; ++k) y.push_back(p.t[k]);
  };
  put(c.object);
  for (const auto& p : c.parts) put(p);
  return y;
}

template <typename S>
PoseConfig decode_pose_config(const S* y, int parts) {
  auto get = [&](int k) {
    const S* v = y + kPoseOutputs * k;
    Rot6D r{Vec3(v[0], v[1], v[2]), Vec3(v[3], v[4], v[5])};
    return Pose(gram_schmidt(r), Vec3(v[6], v[7], v[8]));
  };
  PoseConfig c{get(0), {}};
  for (int p = 0; p < parts; ++p) c.parts.push_back(get(p + 1));
  return c;
}

inline PoseConfig predict(const PredictorParams& params, const DescriptorGrid& desc) {
  require(desc.grid == params.grid && desc.dim == params.dim, ErrorKind::kShapeMismatch,
          "predict: descriptor shape does not match the predictor");
  nn::Mat<float> x = Eigen::Map<const nn::Mat<float>>(desc.values.data(), desc.values.size(), 1);
  const nn::Mat<float> y = nn::forward(params.net, x);
  try {
    return decode_pose_config(y.data(), params.parts);
  } catch (const Error& e) {
    throw Error(ErrorKind::kNoPrediction, std::string("predict: degenerate rotation output: ") + e.what());
  }
}

/// Features outside the observation mask are zeroed before pooling.
inline PoseConfig predict(const PredictorParams& params, const Observation& obs) {
  require(obs.mask_count() > 0, ErrorKind::kNoPrediction, "predict: empty mask");
  return predict(params, pool_descriptor(obs, params.grid));
}

// ---------------------------------------------------------------------------
// Training

struct TrainSample {
  DescriptorGrid desc;               // pooled from the clean render of `label`
  std::array<int, 4> bbox{};         // mask bounds x0, y0, x1, y1 (exclusive)
  PoseConfig label;
};

/// Mask (opacity > 0.5) of a clean render and its bounding box x0, y0, x1, y1
/// (exclusive; all zero when empty).
inline std::pair<std::vector<std::uint8_t>, std::array<int, 4>> render_mask(const FeatureImage& img) {
  std::vector<std::uint8_t> mask(img.pixels());
  std::array<int, 4> bb{img.width, img.height, 0, 0};
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const std::size_t pix = static_cast<std::size_t>(y) * img.width + x;
      mask[pix] = img.opacity[pix] > 0.5;
      if (!mask[pix]) continue;
      bb[0] = std::min(bb[0], x), bb[1] = std::min(bb[1], y);
      bb[2] = std::max(bb[2], x + 1), bb[3] = std::max(bb[3], y + 1);
    }
  if (bb[2] <= bb[0]) bb = {0, 0, 0, 0};
  return {std::move(mask), bb};
}

/// Renders a label and pools it the way an observation would be pooled.
inline TrainSample make_sample(const ObjectTemplate& tpl, const PoseConfig& label, const Camera& cam, int G) {
  const FeatureImage img = render(tpl, label, cam);
  auto [mask, bb] = render_mask(img);
  return {pool_descriptor(img, mask, G), bb, label};
}

struct AugmentConfig {
  double jitter_std = 0.05;    // additive noise on occupied cells
  double mask_prob = 0.5;      // chance a sample gets zero rectangles
  int mask_rects_max = 2;
  double mask_frac_min = 0.05;  // rectangle area over the mask bounding box
  double mask_frac_max = 0.25;

  static AugmentConfig none() { return {0.0, 0.0, 0, 0.0, 0.0}; }
};

namespace detail {

// Zeroes a pixel rectangle at cell resolution: each cell keeps the fraction
// of its area outside the rectangle.
inline void zero_rectangle(DescriptorGrid& d, int width, int height, double rx0, double ry0, double rx1, double ry1) {
  for (int r = 0; r < d.grid; ++r) {
    const auto [y0, y1] = cell_span(r, d.grid, height);
    const double oy = std::max(0.0, std::min<double>(y1, ry1) - std::max<double>(y0, ry0));
    if (oy <= 0) continue;
    for (int c = 0; c < d.grid; ++c) {
      const auto [x0, x1] = cell_span(c, d.grid, width);
      const double ox = std::max(0.0, std::min<double>(x1, rx1) - std::max<double>(x0, rx0));
      if (ox <= 0) continue;
      const float keep = static_cast<float>(1.0 - ox * oy / ((x1 - x0) * (y1 - y0)));
      for (int k = 0; k < d.dim; ++k) d.at(r, c, k) *= keep;
    }
  }
}

inline void augment(DescriptorGrid& d, const std::array<int, 4>& bb, const Camera& cam, const AugmentConfig& a,
                    std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double bw = bb[2] - bb[0], bh = bb[3] - bb[1];
  if (a.mask_rects_max > 0 && bw > 0 && bh > 0 && u(rng) < a.mask_prob) {
    const int k = 1 + static_cast<int>(u(rng) * a.mask_rects_max) % a.mask_rects_max;
    for (int i = 0; i < k; ++i) {
      const double area = (a.mask_frac_min + (a.mask_frac_max - a.mask_frac_min) * u(rng)) * bw * bh;
      const double aspect = std::exp(std::log(0.5) + std::log(4.0) * u(rng));
      const double w = std::sqrt(area * aspect), h = area / w;
      const double cx = bb[0] + bw * u(rng), cy = bb[1] + bh * u(rng);
      zero_rectangle(d, cam.width, cam.height, cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2);
    }
  }
  if (a.jitter_std > 0) {
    std::normal_distribution<float> n(0.0f, static_cast<float>(a.jitter_std));
    for (int cell = 0; cell < d.grid * d.grid; ++cell) {
      float* v = d.values.data() + static_cast<std::size_t>(cell) * d.dim;
      bool occupied = false;
      for (int k = 0; k < d.dim; ++k) occupied |= v[k] != 0.0f;
      if (!occupied) continue;
      for (int k = 0; k < d.dim; ++k) v[k] += n(rng);
    }
  }
}

}  // namespace detail

struct TrainConfig {
  int epochs = 250;
  int batch = 0;        // 0: min(1600, ceil(N / 11))
  double lr = 1e-3;
  double lr_floor = 0.1;  // cosine decay to this fraction of lr
  AugmentConfig augment;
  std::uint64_t seed = 0;
};

inline int effective_batch(const TrainConfig& c, std::size_t n) {
  if (c.batch > 0) return static_cast<int>(std::min<std::size_t>(c.batch, n));
  return static_cast<int>(std::min<std::size_t>(1600, std::max<std::size_t>(1, (n + 10) / 11)));
}

struct TrainReport {
  std::vector<double> loss_curve;  // mean training L1 per epoch (augmented batches)
};

/// Sets the output biases to the mean label so training starts centered.
inline void init_output_bias(PredictorParams& params, const std::vector<TrainSample>& data) {
  require(!data.empty(), ErrorKind::kInvalidArgument, "init_output_bias: empty dataset");
  std::vector<double> mean(params.outputs(), 0.0);
  for (const auto& s : data) {
    const auto y = encode_pose_config(s.label);
    for (int k = 0; k < params.outputs(); ++k) mean[k] += y[k];
  }
  for (int k = 0; k < params.outputs(); ++k)
    params.net.layers.back().b[k] = static_cast<float>(mean[k] / static_cast<double>(data.size()));
}

inline TrainReport train(PredictorParams& params, const std::vector<TrainSample>& data, const Camera& cam,
                         const TrainConfig& cfg) {
  require(!data.empty(), ErrorKind::kInvalidArgument, "train: empty dataset");
  require(cfg.epochs >= 0 && cfg.lr >= 0, ErrorKind::kInvalidArgument, "train: invalid configuration");
  const int n = static_cast<int>(data.size());
  const int B = effective_batch(cfg, data.size());
  const int in = params.net.inputs(), out = params.outputs();
  for (const auto& s : data)
    require(s.desc.grid == params.grid && s.desc.dim == params.dim &&
                static_cast<int>(s.label.parts.size()) == params.parts,
            ErrorKind::kShapeMismatch, "train: sample shape does not match the predictor");

  std::mt19937_64 rng(cfg.seed);
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  nn::AdamState<float> adam(params.net);
  nn::AdamParams ap;
  ap.lr = cfg.lr;
  TrainReport rep;
  const int steps_per_epoch = (n + B - 1) / B;
  const long long total_steps = static_cast<long long>(steps_per_epoch) * cfg.epochs;
  long long step = 0;
  nn::Mat<float> X(in, B), Y(out, B), dY;
  nn::Tape<float> tape;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (int s0 = 0; s0 < n; s0 += B) {
      const int b = std::min(B, n - s0);
      X.resize(in, b);
      Y.resize(out, b);
      for (int k = 0; k < b; ++k) {
        const TrainSample& s = data[order[s0 + k]];
        DescriptorGrid d = s.desc;
        detail::augment(d, s.bbox, cam, cfg.augment, rng);
        X.col(k) = Eigen::Map<const nn::Vec<float>>(d.values.data(), in);
        const auto y = encode_pose_config(s.label);
        for (int j = 0; j < out; ++j) Y(j, k) = static_cast<float>(y[j]);
      }
      const nn::Mat<float> pred = nn::forward(params.net, X, &tape);
      const float loss = nn::l1_loss(pred, Y, &dY);
      if (!std::isfinite(loss))
        throw Error(ErrorKind::kNonFiniteLoss, "train: non-finite loss at epoch " + std::to_string(epoch) +
                                                   ", batch starting " + std::to_string(s0));
      nn::Grads<float> g(params.net);
      nn::backward(params.net, tape, dY, g);
      const double u = total_steps > 1 ? static_cast<double>(step) / (total_steps - 1) : 0.0;
      const double lr = cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + std::cos(kPi * u)));
      adam.step(params.net, g, ap, lr);
      ++step;
      epoch_loss += static_cast<double>(loss) * b;
    }
    rep.loss_curve.push_back(epoch_loss / n);
  }
  return rep;
}

/// Mean L1 of the predictor on samples without augmentation.
inline double evaluate_l1(const PredictorParams& params, const std::vector<TrainSample>& data) {
  require(!data.empty(), ErrorKind::kInvalidArgument, "evaluate_l1: empty dataset");
  double sum = 0.0;
  for (const auto& s : data) {
    nn::Mat<float> x = Eigen::Map<const nn::Mat<float>>(s.desc.values.data(), s.desc.values.size(), 1);
    const nn::Mat<float> y = nn::forward(params.net, x);
    const auto t = encode_pose_config(s.label);
    for (int k = 0; k < params.outputs(); ++k) sum += std::abs(static_cast<double>(y(k, 0)) - t[k]);
  }
  return sum / (static_cast<double>(data.size()) * params.outputs());
}

/// Largest relative difference between analytic and central-difference
/// gradients of the L1 loss on one sample, in double precision. Checks up to
/// `per_tensor` random entries of every weight and bias tensor.
inline double backward_check(const PredictorParams& params, const TrainSample& sample, int per_tensor = 24,
                             std::uint64_t seed = 0, double h = 1e-5) {
  nn::Mlp<double> net = params.net.cast<double>();
  nn::Mat<double> x = Eigen::Map<const nn::Mat<float>>(sample.desc.values.data(), sample.desc.values.size(), 1)
                          .cast<double>();
  const auto y = encode_pose_config(sample.label);
  const nn::Mat<double> target = Eigen::Map<const nn::Mat<double>>(y.data(), y.size(), 1);
  nn::Tape<double> tape;
  nn::Mat<double> dy;
  nn::l1_loss(nn::forward(net, x, &tape), target, &dy);
  nn::Grads<double> g(net);
  nn::backward(net, tape, dy, g);
  auto loss_at = [&]() { return nn::l1_loss<double>(nn::forward(net, x), target, nullptr); };
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  auto check = [&](double* w, const double* analytic, Eigen::Index size) {
    const int count = static_cast<int>(std::min<Eigen::Index>(per_tensor, size));
    for (int k = 0; k < count; ++k) {
      const Eigen::Index i = count == size ? k : std::uniform_int_distribution<Eigen::Index>(0, size - 1)(rng);
      const double keep = w[i];
      w[i] = keep + h;
      const double lp = loss_at();
      w[i] = keep - h;
      const double lm = loss_at();
      w[i] = keep;
      const double num = (lp - lm) / (2 * h);
      const double err = std::abs(num - analytic[i]) / std::max({std::abs(num), std::abs(analytic[i]), 1e-7});
      worst = std::max(worst, err);
    }
  };
  for (std::size_t l = 0; l < net.layers.size(); ++l) {
    check(net.layers[l].W.data(), g.dW[l].data(), net.layers[l].W.size());
    check(net.layers[l].b.data(), g.db[l].data(), net.layers[l].b.size());
  }
  return worst;
}

/// Norm of the analytic parameter gradient of the L1 loss on one sample.
inline double gradient_norm(const PredictorParams& params, const TrainSample& sample) {
  nn::Mlp<double> net = params.net.cast<double>();
  nn::Mat<double> x = Eigen::Map<const nn::Mat<float>>(sample.desc.values.data(), sample.desc.values.size(), 1)
                          .cast<double>();
  const auto y = encode_pose_config(sample.label);
  const nn::Mat<double> target = Eigen::Map<const nn::Mat<double>>(y.data(), y.size(), 1);
  nn::Tape<double> tape;
  nn::Mat<double> dy;
  nn::l1_loss(nn::forward(net, x, &tape), target, &dy);
  nn::Grads<double> g(net);
  nn::backward(net, tape, dy, g);
  double sq = 0.0;
  for (std::size_t l = 0; l < net.layers.size(); ++l) sq += g.dW[l].squaredNorm() + g.db[l].squaredNorm();
  return std::sqrt(sq);
}

// ---------------------------------------------------------------------------
// Checkpoints: "PODP", version, P, D, G, hidden, layer count, then per layer
// rows, cols, row-major weights and biases as little-endian float32.

inline constexpr std::int32_t kPredictorVersion = 1;

inline void save_predictor(const std::filesystem::path& path, const PredictorParams& p) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot write " + path.string());
  os.write("PODP", 4);
  for (std::int32_t v : {kPredictorVersion, p.parts, p.dim, p.grid, p.hidden, static_cast<std::int32_t>(p.net.layers.size())})
    detail::write_i32(os, v);
  for (const auto& l : p.net.layers) {
    detail::write_i32(os, static_cast<std::int32_t>(l.W.rows()));
    detail::write_i32(os, static_cast<std::int32_t>(l.W.cols()));
    for (Eigen::Index r = 0; r < l.W.rows(); ++r)
      for (Eigen::Index c = 0; c < l.W.cols(); ++c) detail::write_f32(os, l.W(r, c));
    for (Eigen::Index r = 0; r < l.b.size(); ++r) detail::write_f32(os, l.b[r]);
  }
  require(static_cast<bool>(os), ErrorKind::kIo, "write failed: " + path.string());
}

inline PredictorParams load_predictor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::kIo, "cannot read " + path.string());
  char magic[4];
  is.read(magic, 4);
  require(is && std::memcmp(magic, "PODP", 4) == 0, ErrorKind::kIo, "not a predictor checkpoint: " + path.string());
  const std::int32_t version = detail::read_i32(is);
  require(version == kPredictorVersion, ErrorKind::kIo, "unsupported predictor checkpoint version " + std::to_string(version));
  PredictorParams p;
  p.parts = detail::read_i32(is);
  p.dim = detail::read_i32(is);
  p.grid = detail::read_i32(is);
  p.hidden = detail::read_i32(is);
  const int layers = detail::read_i32(is);
  require(p.parts >= 1 && p.dim >= 1 && p.grid >= 1 && layers >= 1 && layers < 64, ErrorKind::kIo,
          "corrupt predictor checkpoint header");
  for (int k = 0; k < layers; ++k) {
    const int rows = detail::read_i32(is), cols = detail::read_i32(is);
    require(rows >= 1 && cols >= 1, ErrorKind::kIo, "corrupt predictor layer shape");
    nn::Layer<float> l;
    l.W.resize(rows, cols);
    l.b.resize(rows);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) l.W(r, c) = detail::read_f32(is);
    for (int r = 0; r < rows; ++r) l.b[r] = detail::read_f32(is);
    p.net.layers.push_back(std::move(l));
  }
  require(p.net.inputs() == p.grid * p.grid * p.dim && p.net.outputs() == p.outputs(), ErrorKind::kIo,
          "predictor checkpoint shapes are inconsistent");
  return p;
}

inline void write_loss_curve_csv(const std::filesystem::path& path, const std::vector<double>& curve) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorKind::kIo, "cannot write " + path.string());
  os << "epoch,l1\n";
  os.precision(9);
  for (std::size_t e = 0; e < curve.size(); ++e) os << e << "," << curve[e] << "\n";
}

}  // namespace pod
