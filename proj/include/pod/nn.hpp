#pragma once

// Small fully connected network with hand-written reverse mode. Templated on
// the scalar so training runs in float and gradient checks in double.

#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "pod/error.hpp"

namespace pod::nn {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
struct Layer {
  Mat<S> W;  // out x in
  Vec<S> b;
};

// SiLU keeps the network smooth, which the finite-difference check needs.
template <typename S>
S silu(S x) {
  return x / (S(1) + std::exp(-x));
}
template <typename S>
S silu_grad(S x) {
  const S s = S(1) / (S(1) + std::exp(-x));
  return s * (S(1) + x * (S(1) - s));
}

template <typename S>
struct Mlp {
  std::vector<Layer<S>> layers;

  int inputs() const { return layers.empty() ? 0 : static_cast<int>(layers.front().W.cols()); }
  int outputs() const { return layers.empty() ? 0 : static_cast<int>(layers.back().W.rows()); }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.W.size() + l.b.size();
    return n;
  }

  template <typename T>
  Mlp<T> cast() const {
    Mlp<T> out;
    for (const auto& l : layers) out.layers.push_back({l.W.template cast<T>(), l.b.template cast<T>()});
    return out;
  }
};

/// He-style uniform init scaled for SiLU; biases zero.
template <typename S>
Mlp<S> make_mlp(const std::vector<int>& widths, std::uint64_t seed) {
  require(widths.size() >= 2, ErrorKind::kInvalidArgument, "make_mlp: need at least input and output widths");
  Mlp<S> m;
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
    require(widths[k] >= 1 && widths[k + 1] >= 1, ErrorKind::kInvalidArgument, "make_mlp: widths must be >= 1");
    const double bound = std::sqrt(6.0 / widths[k]);
    std::uniform_real_distribution<double> u(-bound, bound);
    Layer<S> l;
    l.W.resize(widths[k + 1], widths[k]);
    for (Eigen::Index i = 0; i < l.W.size(); ++i) l.W.data()[i] = static_cast<S>(u(rng));
    l.b = Vec<S>::Zero(widths[k + 1]);
    m.layers.push_back(std::move(l));
  }
  // Small last layer so initial outputs sit near the bias.
  m.layers.back().W *= S(0.1);
  return m;
}

/// Activations kept for the backward pass; columns are samples.
template <typename S>
struct Tape {
  std::vector<Mat<S>> pre;   // pre-activations per layer
  std::vector<Mat<S>> post;  // inputs to each layer (post[0] = x)
};

template <typename S>
Mat<S> forward(const Mlp<S>& m, const Mat<S>& x, Tape<S>* tape = nullptr) {
  require(x.rows() == m.inputs(), ErrorKind::kShapeMismatch, "mlp forward: input width mismatch");
  Mat<S> h = x;
  if (tape) {
    tape->pre.clear();
    tape->post.clear();
  }
  for (std::size_t k = 0; k < m.layers.size(); ++k) {
    Mat<S> z = m.layers[k].W * h;
    z.colwise() += m.layers[k].b;
    if (tape) {
      tape->post.push_back(h);
      tape->pre.push_back(z);
    }
    if (k + 1 < m.layers.size()) {
      h = z.unaryExpr([](S v) { return silu(v); });
    } else {
      h = std::move(z);
    }
  }
  return h;
}

template <typename S>
struct Grads {
  std::vector<Mat<S>> dW;
  std::vector<Vec<S>> db;

  explicit Grads(const Mlp<S>& m) {
    for (const auto& l : m.layers) {
      dW.push_back(Mat<S>::Zero(l.W.rows(), l.W.cols()));
      db.push_back(Vec<S>::Zero(l.b.size()));
    }
  }
};

/// Accumulates parameter gradients for upstream dL/dy (outputs x batch).
template <typename S>
void backward(const Mlp<S>& m, const Tape<S>& tape, const Mat<S>& dy, Grads<S>& g) {
  Mat<S> d = dy;
  for (int k = static_cast<int>(m.layers.size()) - 1; k >= 0; --k) {
    g.dW[k].noalias() += d * tape.post[k].transpose();
    g.db[k] += d.rowwise().sum();
    if (k == 0) break;
    Mat<S> dh = m.layers[k].W.transpose() * d;
    d = dh.cwiseProduct(tape.pre[k - 1].unaryExpr([](S v) { return silu_grad(v); }));
  }
}

/// Mean absolute error over all entries and its gradient.
template <typename S>
S l1_loss(const Mat<S>& y, const Mat<S>& target, Mat<S>* dy) {
  require(y.rows() == target.rows() && y.cols() == target.cols(), ErrorKind::kShapeMismatch, "l1_loss: shape mismatch");
  const Mat<S> diff = y - target;
  const S inv = S(1) / static_cast<S>(diff.size());
  if (dy) *dy = diff.unaryExpr([inv](S v) { return v > S(0) ? inv : (v < S(0) ? -inv : S(0)); });
  return diff.cwiseAbs().sum() * inv;
}

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename S>
struct AdamState {
  std::vector<Mat<S>> mW, vW;
  std::vector<Vec<S>> mb, vb;
  long long t = 0;

  explicit AdamState(const Mlp<S>& m) {
    for (const auto& l : m.layers) {
      mW.push_back(Mat<S>::Zero(l.W.rows(), l.W.cols()));
      vW.push_back(Mat<S>::Zero(l.W.rows(), l.W.cols()));
      mb.push_back(Vec<S>::Zero(l.b.size()));
      vb.push_back(Vec<S>::Zero(l.b.size()));
    }
  }

  void step(Mlp<S>& m, const Grads<S>& g, const AdamParams& p, double lr) {
    ++t;
    const S b1 = static_cast<S>(p.beta1), b2 = static_cast<S>(p.beta2), eps = static_cast<S>(p.eps);
    const S c1 = static_cast<S>(1.0 - std::pow(p.beta1, static_cast<double>(t)));
    const S c2 = static_cast<S>(1.0 - std::pow(p.beta2, static_cast<double>(t)));
    const S a = static_cast<S>(lr);
    auto update = [&](auto& w, auto& mm, auto& vv, const auto& gg) {
      mm = b1 * mm + (S(1) - b1) * gg;
      vv = b2 * vv + (S(1) - b2) * gg.cwiseProduct(gg);
      w.array() -= a * (mm.array() / c1) / ((vv.array() / c2).sqrt() + eps);
    };
    for (std::size_t k = 0; k < m.layers.size(); ++k) {
      update(m.layers[k].W, mW[k], vW[k], g.dW[k]);
      update(m.layers[k].b, mb[k], vb[k], g.db[k]);
    }
  }
};

}  // namespace pod::nn
