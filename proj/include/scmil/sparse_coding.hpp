#pragma once

#include <optional>
#include <vector>

#include "scmil/core.hpp"

namespace scmil {

// ---------------------------------------------------------------------------
// The SC module: classical ISTA (verification oracle), the L-layer tied-weight
// LISTA unrolling with a learnable dictionary / stepsize / per-instance
// sparsity strength, and analytic reverse-mode gradients through all of it.
// ---------------------------------------------------------------------------

/// Three affine layers, each followed by Softplus; regresses one strictly
/// positive sparsity strength per instance from its embedding.
struct LambdaNetParams {
  Matrix w1;  // h1 x p
  Vector b1;  // h1
  Matrix w2;  // h2 x h1
  Vector b2;  // h2
  Matrix w3;  // 1 x h2
  Vector b3;  // 1
};

inline constexpr Index kLambdaHidden1 = 64;
inline constexpr Index kLambdaHidden2 = 32;

/// Everything the SC module learns. The stepsize lives in the log domain so
/// mu = exp(log_mu) stays positive under unconstrained updates. One dictionary
/// and one stepsize are shared by all unrolled layers (tied weights).
struct ScModuleParams {
  Matrix dict;  // p x m, over-complete (m >= p)
  double log_mu = 0.0;
  LambdaNetParams lambda_net;
  int num_layers = 1;

  Index embed_dim() const { return dict.rows(); }
  Index num_atoms() const { return dict.cols(); }
  double mu() const { return std::exp(log_mu); }
};

/// W_t = I - (1/mu) D^T D and W_e = (1/mu) D^T, recomputed from the current
/// parameters on every forward pass.
struct ListaMatrices {
  Matrix w_t;  // m x m
  Matrix w_e;  // m x p
};

struct LambdaCache {
  Vector z1, q1;  // first layer pre/post activations
  Vector z2, q2;
  double z3 = 0.0;
  double lambda = 0.0;
  bool fixed = false;  // true when lambda was pinned externally (no net, no gradient)
};

/// Per-layer activations of one unrolled pass, everything backward needs.
struct ListaCache {
  Vector input;             // the embedding fed to the module (length p)
  std::vector<Vector> pre;  // pre[t] = W_t alpha^(t) + W_e x, for t = 0..L-1
  std::vector<Vector> post; // post[t] = alpha^(t), t = 0..L; post[0] = 0
  LambdaCache lam;
  double kink_margin = 0.0; // min over layers/coords of | |pre| - lambda |
  double sparsity = 0.0;    // fraction of exactly-zero coords of alpha^(L)

  const Vector& code() const { return post.back(); }
};

/// Gradient container mirroring ScModuleParams plus the input embedding.
struct ScGrads {
  Matrix d_dict;
  double d_log_mu = 0.0;
  LambdaNetParams d_lambda_net;
  Vector d_input;
};

struct IstaResult {
  Vector alpha;
  int iters = 0;
};

/// 0.5*||D a - x||^2 + lambda*||a||_1.
double sc_objective(const Matrix& dict, const Vector& x, const Vector& alpha, double lambda);

/// Classical ISTA on the objective above: proximal gradient steps
/// a <- S_{lambda/mu}(a - (1/mu) D^T (D a - x)) from a = 0, stopping when the
/// max-norm step falls below tol or after max_iter iterations. Converges to
/// the exact minimizer whenever mu >= ||D||_2^2. When trajectory is given it
/// receives every iterate including the final one.
IstaResult ista_solve(const Matrix& dict, const Vector& x, double lambda, double mu,
                      int max_iter = 10000, double tol = 1e-8,
                      std::vector<Vector>* trajectory = nullptr);

ListaMatrices lista_matrices(const ScModuleParams& params);

/// lambda_i = softplus(w3 softplus(w2 softplus(w1 x + b1) + b2) + b3) > 0.
LambdaCache lambda_forward(const LambdaNetParams& net, const Vector& x);

struct LambdaGrads {
  LambdaNetParams net;
  Vector d_input;
};

/// Reverse pass of lambda_forward: gradients of d_lambda * lambda_i w.r.t.
/// the net parameters and the input.
LambdaGrads lambda_backward(const LambdaNetParams& net, const LambdaCache& cache,
                            const Vector& x, double d_lambda);

/// L unrolled layers alpha^(t+1) = S_{lambda_i}(W_t alpha^(t) + W_e x) with
/// alpha^(0) = 0 and lambda_i regressed from x (or pinned to fixed_lambda,
/// in which case the lambda net is bypassed entirely).
ListaCache lista_forward(const ScModuleParams& params, const Vector& x,
                         std::optional<double> fixed_lambda = std::nullopt);

/// Same, with precomputed LISTA matrices (they only depend on the parameters,
/// so callers processing many instances build them once).
ListaCache lista_forward(const ScModuleParams& params, const ListaMatrices& mats,
                         const Vector& x, std::optional<double> fixed_lambda = std::nullopt);

/// Exact reverse-mode gradients of a scalar loss with d loss/d alpha^(L) =
/// d_alpha, w.r.t. the dictionary, log-stepsize, lambda-net parameters and the
/// input embedding. The soft-threshold uses its a.e. derivative: 1 where
/// |pre| > lambda (else 0), and d/d lambda = -sign(pre) on the same support.
/// All L layers accumulate into the single tied dictionary and stepsize.
ScGrads lista_backward(const ScModuleParams& params, const ListaCache& cache,
                       const Vector& d_alpha);
ScGrads lista_backward(const ScModuleParams& params, const ListaMatrices& mats,
                       const ListaCache& cache, const Vector& d_alpha);

/// Dictionary = over-complete DCT, log_mu = ln(||D||_2^2), lambda-net weights
/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) from the seed, biases zero.
ScModuleParams init_sc_module(Index p, Index m, int num_layers, std::uint64_t seed);

/// Max violation of the l1 subgradient optimality conditions at alpha; zero
/// exactly at the minimizer of sc_objective.
double kkt_residual(const Matrix& dict, const Vector& x, const Vector& alpha, double lambda);

/// Analytic per-instance cost of the unrolled module: 2m^2 + 2pm + m flops
/// per layer plus the lambda-net's multiply-adds and activations.
long long sc_flops_per_instance(Index p, Index m, int num_layers);

LambdaNetParams zeros_like(const LambdaNetParams& net);
ScGrads zero_grads(const ScModuleParams& params);

}  // namespace scmil
