#include "scmil/core.hpp"

#include <charconv>

namespace scmil {

Vector soft_threshold(const Vector& v, double lambda) {
  if (lambda < 0.0) {
    throw std::invalid_argument("soft_threshold: lambda must be nonnegative, got " +
                                std::to_string(lambda));
  }
  Vector out(v.size());
  for (Index j = 0; j < v.size(); ++j) {
    out[j] = soft_threshold(v[j], lambda);
  }
  return out;
}

double spectral_norm(const Matrix& m, double tol, int max_iter) {
  if (m.size() == 0) throw std::invalid_argument("spectral_norm: empty matrix");
  if (!(tol > 0.0)) throw std::invalid_argument("spectral_norm: tol must be positive");
  if (m.norm() == 0.0) return 0.0;

  Vector v = Vector::Ones(m.cols());
  v /= v.norm();
  double sigma = 0.0;
  Index restart = 0;
  for (int it = 0; it < max_iter; ++it) {
    Vector u = m * v;
    const double sigma_next = u.norm();
    if (sigma_next == 0.0) {
      // start vector lies in the null space; fall back to basis vectors
      if (restart >= m.cols()) return 0.0;  // unreachable for nonzero m
      v = Vector::Unit(m.cols(), restart++);
      sigma = 0.0;
      continue;
    }
    Vector w = m.transpose() * u;
    v = w / w.norm();
    if (it > 0 && std::abs(sigma_next - sigma) <= tol * sigma_next) {
      return sigma_next;
    }
    sigma = sigma_next;
  }
  throw SpectralNormError(
      "spectral_norm: no convergence after " + std::to_string(max_iter) +
          " iterations, last estimate " + std::to_string(sigma),
      sigma);
}

Matrix overcomplete_dct(Index p, Index m) {
  if (p < 1) throw std::invalid_argument("overcomplete_dct: p must be >= 1");
  if (m < p) {
    throw std::invalid_argument("overcomplete_dct: dictionary must be over-complete (m >= p), got p=" +
                                std::to_string(p) + ", m=" + std::to_string(m));
  }
  constexpr double kPi = 3.141592653589793238462643;
  Matrix d(p, m);
  for (Index k = 0; k < m; ++k) {
    for (Index r = 0; r < p; ++r) {
      d(r, k) = std::cos(kPi * static_cast<double>(k) * (2.0 * static_cast<double>(r) + 1.0) /
                         (2.0 * static_cast<double>(m)));
    }
    if (k >= 1) {
      d.col(k).array() -= d.col(k).mean();
    }
    const double nrm = d.col(k).norm();
    if (nrm > 0.0) d.col(k) /= nrm;
  }
  return d;
}

Matrix gemm(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("gemm: inner dimensions differ (" + std::to_string(a.cols()) +
                                " vs " + std::to_string(b.rows()) + ")");
  }
  return a * b;
}

Vector gemv(const Matrix& a, const Vector& x) {
  if (a.cols() != x.size()) {
    throw std::invalid_argument("gemv: matrix has " + std::to_string(a.cols()) +
                                " columns but vector has length " + std::to_string(x.size()));
  }
  return a * x;
}

void axpy(double a, const Vector& x, Vector& y) {
  if (x.size() != y.size()) {
    throw std::invalid_argument("axpy: length mismatch (" + std::to_string(x.size()) + " vs " +
                                std::to_string(y.size()) + ")");
  }
  y += a * x;
}

double dot(const Vector& x, const Vector& y) {
  if (x.size() != y.size()) {
    throw std::invalid_argument("dot: length mismatch (" + std::to_string(x.size()) + " vs " +
                                std::to_string(y.size()) + ")");
  }
  return x.dot(y);
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

bool parse_double(std::string_view s, double& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  const auto res = std::from_chars(first, last, out);
  return res.ec == std::errc() && res.ptr == last;
}

}  // namespace scmil
