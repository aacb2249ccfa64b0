#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace scmil {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Power iteration failed to reach the requested tolerance. Carries the last
/// estimate so callers can decide whether it is usable anyway.
class SpectralNormError : public std::runtime_error {
 public:
  SpectralNormError(const std::string& msg, double last_estimate)
      : std::runtime_error(msg), last_estimate_(last_estimate) {}
  double last_estimate() const { return last_estimate_; }

 private:
  double last_estimate_;
};

/// Malformed text input (bag CSV, checkpoint, vector file). Lines are 1-based.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& msg, std::size_t line)
      : std::runtime_error(msg + " (line " + std::to_string(line) + ")"),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Optimization blew up: non-finite gradient or loss. Carries the parameter
/// name (when known) and the epoch index.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& msg, std::string param, std::size_t epoch)
      : std::runtime_error(msg), param_(std::move(param)), epoch_(epoch) {}
  const std::string& param() const { return param_; }
  std::size_t epoch() const { return epoch_; }

 private:
  std::string param_;
  std::size_t epoch_;
};

/// A metric is undefined on the given inputs (e.g. AUC with one class).
class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG
//
// splitmix64 core with named substreams. std::random distributions are
// implementation-defined, so all draws are hand-rolled to keep every seeded
// run bit-identical across standard libraries.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {
    // decorrelate trivially related seeds
    next_u64();
    next_u64();
  }

  /// Substream derived from (seed, tag, index); streams with different tags
  /// or indices are independent for all practical purposes.
  Rng(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0)
      : Rng(mix(mix(seed ^ fnv1a(tag), 0x9e3779b97f4a7c15ull), index)) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925287 * u2);
  }

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    // modulo bias is negligible for the small n used here, but reject anyway
    const std::uint64_t limit = n * (UINT64_MAX / n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[static_cast<std::size_t>(below(i))]);
    }
  }

  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    return h;
  }

 private:
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Scalar kernels
// ---------------------------------------------------------------------------

/// ln(1 + e^x) with overflow-safe branching.
inline double softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

/// Numerically stable logistic function.
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// d/dx softplus(x) = sigmoid(x).
inline double softplus_grad(double x) { return sigmoid(x); }

/// Inverse of softplus on (0, inf); softplus(softplus_inverse(y)) == y.
inline double softplus_inverse(double y) {
  if (y > 30.0) return y;
  return std::log(std::expm1(y));
}

inline double relu(double x) { return x > 0.0 ? x : 0.0; }

inline double soft_threshold(double v, double lambda) {
  if (v > lambda) return v - lambda;
  if (v < -lambda) return v + lambda;
  return 0.0;
}

// ---------------------------------------------------------------------------
// Vector / matrix kernels
// ---------------------------------------------------------------------------

/// Element-wise soft-thresholding, the proximal map of lambda*||.||_1.
Vector soft_threshold(const Vector& v, double lambda);

/// Largest singular value of m via power iteration on m^T m, deterministic
/// all-ones start. Returns 0 for the zero matrix; throws SpectralNormError if
/// the estimate has not stabilized to relative tolerance tol within max_iter.
double spectral_norm(const Matrix& m, double tol = 1e-10, int max_iter = 10000);

/// p x m over-complete DCT: cosine columns, columns k >= 1 mean-centered,
/// every column scaled to unit Euclidean norm. Requires m >= p >= 1.
Matrix overcomplete_dct(Index p, Index m);

// Checked dense kernels. Eigen does the arithmetic; these add shape checks
// with real errors instead of asserts, for use at API boundaries.
Matrix gemm(const Matrix& a, const Matrix& b);
Vector gemv(const Matrix& a, const Vector& x);
void axpy(double a, const Vector& x, Vector& y);
double dot(const Vector& x, const Vector& y);

// ---------------------------------------------------------------------------
// Text I/O helpers
// ---------------------------------------------------------------------------

/// Shortest decimal representation that parses back bit-identically.
std::string format_double(double v);

/// Strict full-string parse; returns false on trailing garbage or overflow.
bool parse_double(std::string_view s, double& out);

}  // namespace scmil
