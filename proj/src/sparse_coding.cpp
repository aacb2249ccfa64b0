#include "scmil/sparse_coding.hpp"

#include <limits>

namespace scmil {

namespace {

void check_dims(const Matrix& dict, const Vector& x, const Vector* alpha) {
  if (dict.rows() != x.size()) {
    throw std::invalid_argument("sparse_coding: dictionary has " + std::to_string(dict.rows()) +
                                " rows but signal has length " + std::to_string(x.size()));
  }
  if (alpha != nullptr && dict.cols() != alpha->size()) {
    throw std::invalid_argument("sparse_coding: dictionary has " + std::to_string(dict.cols()) +
                                " atoms but code has length " + std::to_string(alpha->size()));
  }
}

Matrix uniform_fan_in(Index rows, Index cols, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
  Matrix w(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      w(r, c) = rng.uniform(-bound, bound);
    }
  }
  return w;
}

}  // namespace

double sc_objective(const Matrix& dict, const Vector& x, const Vector& alpha, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("sc_objective: lambda must be nonnegative");
  check_dims(dict, x, &alpha);
  const Vector residual = dict * alpha - x;
  return 0.5 * residual.squaredNorm() + lambda * alpha.lpNorm<1>();
}

IstaResult ista_solve(const Matrix& dict, const Vector& x, double lambda, double mu,
                      int max_iter, double tol, std::vector<Vector>* trajectory) {
  if (!(mu > 0.0)) throw std::invalid_argument("ista_solve: mu must be positive");
  if (lambda < 0.0) throw std::invalid_argument("ista_solve: lambda must be nonnegative");
  check_dims(dict, x, nullptr);

  const double threshold = lambda / mu;
  Vector alpha = Vector::Zero(dict.cols());
  int iters = 0;
  while (iters < max_iter) {
    const Vector grad = dict.transpose() * (dict * alpha - x);
    const Vector next = soft_threshold(alpha - grad / mu, threshold);
    ++iters;
    const double step = (next - alpha).lpNorm<Eigen::Infinity>();
    alpha = next;
    if (trajectory != nullptr) trajectory->push_back(alpha);
    if (step < tol) break;
  }
  return {std::move(alpha), iters};
}

ListaMatrices lista_matrices(const ScModuleParams& params) {
  const double inv_mu = 1.0 / params.mu();
  ListaMatrices mats;
  mats.w_e = inv_mu * params.dict.transpose();
  mats.w_t = -(mats.w_e * params.dict);
  mats.w_t.diagonal().array() += 1.0;
  return mats;
}

LambdaCache lambda_forward(const LambdaNetParams& net, const Vector& x) {
  if (net.w1.cols() != x.size()) {
    throw std::invalid_argument("lambda_forward: net expects input of length " +
                                std::to_string(net.w1.cols()) + ", got " +
                                std::to_string(x.size()));
  }
  LambdaCache cache;
  cache.z1 = net.w1 * x + net.b1;
  cache.q1 = cache.z1.unaryExpr([](double v) { return softplus(v); });
  cache.z2 = net.w2 * cache.q1 + net.b2;
  cache.q2 = cache.z2.unaryExpr([](double v) { return softplus(v); });
  cache.z3 = (net.w3 * cache.q2)(0) + net.b3(0);
  cache.lambda = softplus(cache.z3);
  return cache;
}

ListaCache lista_forward(const ScModuleParams& params, const Vector& x,
                         std::optional<double> fixed_lambda) {
  return lista_forward(params, lista_matrices(params), x, fixed_lambda);
}

ListaCache lista_forward(const ScModuleParams& params, const ListaMatrices& mats,
                         const Vector& x, std::optional<double> fixed_lambda) {
  if (params.embed_dim() != x.size()) {
    throw std::invalid_argument("lista_forward: embedding length " + std::to_string(x.size()) +
                                " does not match dictionary atom dimension " +
                                std::to_string(params.embed_dim()));
  }
  if (params.num_layers < 1) throw std::invalid_argument("lista_forward: num_layers must be >= 1");

  ListaCache cache;
  cache.input = x;
  if (fixed_lambda.has_value()) {
    if (*fixed_lambda < 0.0) {
      throw std::invalid_argument("lista_forward: fixed lambda must be nonnegative");
    }
    cache.lam.lambda = *fixed_lambda;
    cache.lam.fixed = true;
  } else {
    cache.lam = lambda_forward(params.lambda_net, x);
  }
  const double lambda = cache.lam.lambda;

  const int layers = params.num_layers;
  const Vector bias = mats.w_e * x;  // constant across layers
  cache.pre.reserve(layers);
  cache.post.reserve(layers + 1);
  cache.post.push_back(Vector::Zero(params.num_atoms()));
  double margin = std::numeric_limits<double>::infinity();
  for (int t = 0; t < layers; ++t) {
    Vector pre = bias;
    if (t > 0) pre.noalias() += mats.w_t * cache.post.back();
    for (Index j = 0; j < pre.size(); ++j) {
      margin = std::min(margin, std::abs(std::abs(pre[j]) - lambda));
    }
    cache.post.push_back(soft_threshold(pre, lambda));
    cache.pre.push_back(std::move(pre));
  }
  cache.kink_margin = margin;

  const Vector& code = cache.post.back();
  Index zeros = 0;
  for (Index j = 0; j < code.size(); ++j) {
    if (code[j] == 0.0) ++zeros;
  }
  cache.sparsity = static_cast<double>(zeros) / static_cast<double>(code.size());
  return cache;
}

ScGrads lista_backward(const ScModuleParams& params, const ListaCache& cache,
                       const Vector& d_alpha) {
  return lista_backward(params, lista_matrices(params), cache, d_alpha);
}

ScGrads lista_backward(const ScModuleParams& params, const ListaMatrices& mats,
                       const ListaCache& cache, const Vector& d_alpha) {
  const int layers = params.num_layers;
  if (static_cast<int>(cache.pre.size()) != layers ||
      static_cast<int>(cache.post.size()) != layers + 1 ||
      cache.input.size() != params.embed_dim() ||
      cache.post.back().size() != params.num_atoms()) {
    throw std::logic_error("lista_backward: cache does not match the given parameters");
  }
  if (d_alpha.size() != params.num_atoms()) {
    throw std::logic_error("lista_backward: seed gradient has wrong length");
  }

  const double mu = params.mu();
  const double lambda = cache.lam.lambda;

  ScGrads grads = zero_grads(params);
  Matrix g_wt = Matrix::Zero(params.num_atoms(), params.num_atoms());
  Vector g_bias = Vector::Zero(params.num_atoms());  // gradient w.r.t. W_e x
  double g_lambda = 0.0;

  Vector g = d_alpha;
  for (int t = layers - 1; t >= 0; --t) {
    const Vector& pre = cache.pre[static_cast<std::size_t>(t)];
    Vector g_pre(pre.size());
    for (Index j = 0; j < pre.size(); ++j) {
      if (std::abs(pre[j]) > lambda) {
        g_pre[j] = g[j];
        g_lambda -= g[j] * (pre[j] > 0.0 ? 1.0 : -1.0);
      } else {
        g_pre[j] = 0.0;  // a.e. derivative; the kink itself maps to 0
      }
    }
    if (t > 0) {
      g_wt.noalias() += g_pre * cache.post[static_cast<std::size_t>(t)].transpose();
      g.noalias() = mats.w_t.transpose() * g_pre;
    }
    g_bias += g_pre;
  }

  const Matrix g_we = g_bias * cache.input.transpose();  // m x p
  Vector g_input = mats.w_e.transpose() * g_bias;

  // Map through W_t = I - (1/mu) D^T D and W_e = (1/mu) D^T.
  const Matrix gram = params.dict.transpose() * params.dict;
  grads.d_dict.noalias() = -(1.0 / mu) * (params.dict * (g_wt + g_wt.transpose()));
  grads.d_dict.noalias() += (1.0 / mu) * g_we.transpose();
  const double d_mu = (g_wt.cwiseProduct(gram).sum() -
                       g_we.cwiseProduct(params.dict.transpose()).sum()) /
                      (mu * mu);
  grads.d_log_mu = d_mu * mu;

  if (!cache.lam.fixed) {
    LambdaGrads lg = lambda_backward(params.lambda_net, cache.lam, cache.input, g_lambda);
    grads.d_lambda_net = std::move(lg.net);
    g_input += lg.d_input;
  }

  grads.d_input = std::move(g_input);
  return grads;
}

LambdaGrads lambda_backward(const LambdaNetParams& net, const LambdaCache& cache,
                            const Vector& x, double d_lambda) {
  if (cache.fixed) {
    throw std::logic_error("lambda_backward: cache came from a fixed-lambda forward pass");
  }
  LambdaGrads out;
  const double g_z3 = d_lambda * sigmoid(cache.z3);
  out.net.w3.noalias() = g_z3 * cache.q2.transpose();
  out.net.b3 = Vector::Constant(1, g_z3);
  const Vector g_q2 = net.w3.row(0).transpose() * g_z3;
  const Vector g_z2 = g_q2.cwiseProduct(cache.z2.unaryExpr([](double v) { return sigmoid(v); }));
  out.net.w2.noalias() = g_z2 * cache.q1.transpose();
  out.net.b2 = g_z2;
  const Vector g_q1 = net.w2.transpose() * g_z2;
  const Vector g_z1 = g_q1.cwiseProduct(cache.z1.unaryExpr([](double v) { return sigmoid(v); }));
  out.net.w1.noalias() = g_z1 * x.transpose();
  out.net.b1 = g_z1;
  out.d_input = net.w1.transpose() * g_z1;
  return out;
}

ScModuleParams init_sc_module(Index p, Index m, int num_layers, std::uint64_t seed) {
  if (m < p) {
    throw std::invalid_argument("init_sc_module: dictionary must be over-complete (m >= p), got p=" +
                                std::to_string(p) + ", m=" + std::to_string(m));
  }
  if (num_layers < 1) throw std::invalid_argument("init_sc_module: num_layers must be >= 1");

  ScModuleParams params;
  params.dict = overcomplete_dct(p, m);
  const double sigma = spectral_norm(params.dict);
  params.log_mu = 2.0 * std::log(sigma);
  params.num_layers = num_layers;

  Rng rng(seed, "lambda-net-init");
  params.lambda_net.w1 = uniform_fan_in(kLambdaHidden1, p, rng);
  params.lambda_net.b1 = Vector::Zero(kLambdaHidden1);
  params.lambda_net.w2 = uniform_fan_in(kLambdaHidden2, kLambdaHidden1, rng);
  params.lambda_net.b2 = Vector::Zero(kLambdaHidden2);
  params.lambda_net.w3 = uniform_fan_in(1, kLambdaHidden2, rng);
  params.lambda_net.b3 = Vector::Zero(1);
  return params;
}

double kkt_residual(const Matrix& dict, const Vector& x, const Vector& alpha, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("kkt_residual: lambda must be nonnegative");
  check_dims(dict, x, &alpha);
  const Vector grad = dict.transpose() * (dict * alpha - x);
  double worst = 0.0;
  for (Index j = 0; j < alpha.size(); ++j) {
    if (alpha[j] == 0.0) {
      worst = std::max(worst, std::abs(grad[j]) - lambda);
    } else {
      worst = std::max(worst, std::abs(grad[j] + lambda * (alpha[j] > 0.0 ? 1.0 : -1.0)));
    }
  }
  return worst;
}

long long sc_flops_per_instance(Index p, Index m, int num_layers) {
  const long long mm = static_cast<long long>(m);
  const long long pp = static_cast<long long>(p);
  const long long per_layer = 2 * mm * mm + 2 * pp * mm + mm;
  const long long lambda_net =
      2 * (pp * kLambdaHidden1 + kLambdaHidden1 * kLambdaHidden2 + kLambdaHidden2) +
      (kLambdaHidden1 + kLambdaHidden2 + 1);
  return static_cast<long long>(num_layers) * per_layer + lambda_net;
}

LambdaNetParams zeros_like(const LambdaNetParams& net) {
  LambdaNetParams z;
  z.w1 = Matrix::Zero(net.w1.rows(), net.w1.cols());
  z.b1 = Vector::Zero(net.b1.size());
  z.w2 = Matrix::Zero(net.w2.rows(), net.w2.cols());
  z.b2 = Vector::Zero(net.b2.size());
  z.w3 = Matrix::Zero(net.w3.rows(), net.w3.cols());
  z.b3 = Vector::Zero(net.b3.size());
  return z;
}

ScGrads zero_grads(const ScModuleParams& params) {
  ScGrads g;
  g.d_dict = Matrix::Zero(params.dict.rows(), params.dict.cols());
  g.d_log_mu = 0.0;
  g.d_lambda_net = zeros_like(params.lambda_net);
  g.d_input = Vector::Zero(params.embed_dim());
  return g;
}

}  // namespace scmil
