#pragma once

// Test-only reference implementations, kept independent of the library's
// computation paths on purpose: naive loops instead of Eigen products, a
// separately hand-derived ABMIL backward, and the l1 subgradient optimality
// check used to certify ISTA solutions.

#include <cmath>
#include <vector>

#include "scmil/core.hpp"
#include "scmil/mil.hpp"

namespace oracle {

using scmil::Index;
using scmil::Matrix;
using scmil::Vector;

inline Matrix gemm_naive(const Matrix& a, const Matrix& b) {
  Matrix c = Matrix::Zero(a.rows(), b.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    for (Index j = 0; j < b.cols(); ++j) {
      double acc = 0.0;
      for (Index k = 0; k < a.cols(); ++k) acc += a(i, k) * b(k, j);
      c(i, j) = acc;
    }
  }
  return c;
}

inline Vector gemv_naive(const Matrix& a, const Vector& x) {
  Vector y = Vector::Zero(a.rows());
  for (Index i = 0; i < a.rows(); ++i) {
    double acc = 0.0;
    for (Index j = 0; j < a.cols(); ++j) acc += a(i, j) * x[j];
    y[i] = acc;
  }
  return y;
}

inline double sc_objective_naive(const Matrix& dict, const Vector& x, const Vector& alpha,
                                 double lambda) {
  double quad = 0.0;
  for (Index i = 0; i < dict.rows(); ++i) {
    double r = -x[i];
    for (Index j = 0; j < dict.cols(); ++j) r += dict(i, j) * alpha[j];
    quad += r * r;
  }
  double l1 = 0.0;
  for (Index j = 0; j < alpha.size(); ++j) l1 += std::abs(alpha[j]);
  return 0.5 * quad + lambda * l1;
}

/// Max violation of the l1 subgradient optimality conditions at alpha:
/// |D_j^T (D alpha - x)| <= lambda where alpha_j = 0, and
/// D_j^T (D alpha - x) = -lambda sign(alpha_j) elsewhere.
inline double kkt_residual(const Matrix& dict, const Vector& x, const Vector& alpha,
                           double lambda) {
  const Vector grad = gemv_naive(dict.transpose(), gemv_naive(dict, alpha) - x);
  double worst = 0.0;
  for (Index j = 0; j < alpha.size(); ++j) {
    if (alpha[j] == 0.0) {
      worst = std::max(worst, std::abs(grad[j]) - lambda);
    } else {
      const double sign = alpha[j] > 0.0 ? 1.0 : -1.0;
      worst = std::max(worst, std::abs(grad[j] + lambda * sign));
    }
  }
  return worst;
}

inline Matrix random_matrix(Index rows, Index cols, scmil::Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) m(r, c) = rng.uniform(lo, hi);
  }
  return m;
}

inline Vector random_vector(Index n, scmil::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Vector v(n);
  for (Index i = 0; i < n; ++i) v[i] = rng.uniform(lo, hi);
  return v;
}

/// Gradients of the clamped BCE for a plain (non-gated) ABMIL model without
/// an SC module, derived by hand in one flat pass. Duplicates the production
/// backward for cross-checking; do not share code with it.
struct AbmilRefGrads {
  Matrix d_embed_w;
  Vector d_embed_b;
  Matrix d_pool_v;
  Vector d_pool_w;
  Matrix d_head_w;
  Vector d_head_b;
};

inline AbmilRefGrads abmil_reference_backward(const scmil::MilModel& model,
                                              const scmil::Bag& bag) {
  using scmil::sigmoid;
  const std::size_t n = bag.instances.size();
  const Index p = model.embed_dim();

  std::vector<Vector> xs(n), pre(n), h(n), t(n);
  Vector e(static_cast<Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = (bag.instances[i] - model.feat_mean).cwiseProduct(model.feat_scale);
    pre[i] = model.embed.w * xs[i] + model.embed.b;
    h[i] = pre[i].cwiseMax(0.0);
    t[i] = (model.pooling.v * h[i]).array().tanh();
    e[static_cast<Index>(i)] = model.pooling.w.dot(t[i]);
  }
  Vector a = (e.array() - e.maxCoeff()).exp();
  a /= a.sum();
  Vector z = Vector::Zero(p);
  for (std::size_t i = 0; i < n; ++i) z += a[static_cast<Index>(i)] * h[i];
  const double logit = model.head.w.row(0).dot(z) + model.head.b[0];
  const double yhat = sigmoid(logit);

  AbmilRefGrads g;
  const bool clamped = yhat <= scmil::kProbClamp || yhat >= 1.0 - scmil::kProbClamp;
  const double dlogit = clamped ? 0.0 : yhat - static_cast<double>(bag.label);
  g.d_head_w = dlogit * z.transpose();
  g.d_head_b = Vector::Constant(1, dlogit);
  const Vector gz = dlogit * model.head.w.row(0).transpose();

  Vector ga(static_cast<Index>(n));
  for (std::size_t i = 0; i < n; ++i) ga[static_cast<Index>(i)] = gz.dot(h[i]);
  const double mixed = a.dot(ga);

  g.d_embed_w = Matrix::Zero(model.embed.w.rows(), model.embed.w.cols());
  g.d_embed_b = Vector::Zero(model.embed.b.size());
  g.d_pool_v = Matrix::Zero(model.pooling.v.rows(), model.pooling.v.cols());
  g.d_pool_w = Vector::Zero(model.pooling.w.size());
  for (std::size_t i = 0; i < n; ++i) {
    const Index ii = static_cast<Index>(i);
    const double ge = a[ii] * (ga[ii] - mixed);
    g.d_pool_w += ge * t[i];
    const Vector gv = (ge * model.pooling.w).cwiseProduct((1.0 - t[i].array().square()).matrix());
    g.d_pool_v += gv * h[i].transpose();
    Vector gh = a[ii] * gz + model.pooling.v.transpose() * gv;
    for (Index r = 0; r < p; ++r) {
      if (pre[i][r] <= 0.0) gh[r] = 0.0;
    }
    g.d_embed_w += gh * xs[i].transpose();
    g.d_embed_b += gh;
  }
  return g;
}

}  // namespace oracle
