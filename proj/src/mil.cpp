#include "scmil/mil.hpp"

#include <algorithm>
#include <limits>

namespace scmil {

namespace {

// Uniform(-g/sqrt(fan_in), g/sqrt(fan_in)). A gain of 1 matches the
// lambda-net convention; the embedding uses a larger gain so the code
// pre-activations clear the initial soft thresholds (see init_mil_model).
Matrix uniform_init(Index rows, Index cols, double gain, Rng& rng) {
  const double bound = gain / std::sqrt(static_cast<double>(cols));
  Matrix w(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      w(r, c) = rng.uniform(-bound, bound);
    }
  }
  return w;
}

double clamp_boundary_margin(double logit) {
  const double boundary = std::log((1.0 - kProbClamp) / kProbClamp);
  return boundary - std::abs(logit);
}

}  // namespace

std::string to_string(MilVariant v) {
  switch (v) {
    case MilVariant::abmil: return "abmil";
    case MilVariant::abmil_gated: return "abmil_gated";
    case MilVariant::max_pool: return "max";
    case MilVariant::mean_pool: return "mean";
  }
  throw std::logic_error("to_string: unknown variant");
}

MilVariant variant_from_string(const std::string& s) {
  if (s == "abmil") return MilVariant::abmil;
  if (s == "abmil_gated") return MilVariant::abmil_gated;
  if (s == "max" || s == "max_pool") return MilVariant::max_pool;
  if (s == "mean" || s == "mean_pool") return MilVariant::mean_pool;
  throw std::invalid_argument("unknown MIL variant '" + s +
                              "' (expected abmil|abmil_gated|max|mean)");
}

double bce_loss(double yhat, int label) {
  const double y = std::clamp(yhat, kProbClamp, 1.0 - kProbClamp);
  return label == 1 ? -std::log(y) : -std::log(1.0 - y);
}

Vector max_pool(const std::vector<Vector>& h) {
  if (h.empty()) throw std::invalid_argument("max_pool: empty bag");
  Vector z = h.front();
  for (std::size_t i = 1; i < h.size(); ++i) {
    z = z.cwiseMax(h[i]);
  }
  return z;
}

Vector mean_pool(const std::vector<Vector>& h) {
  if (h.empty()) throw std::invalid_argument("mean_pool: empty bag");
  Vector z = Vector::Zero(h.front().size());
  for (const Vector& v : h) z += v;
  return z / static_cast<double>(h.size());
}

std::pair<Vector, Vector> attention_pool(const AttentionParams& params,
                                         const std::vector<Vector>& h, MilVariant variant) {
  if (h.empty()) throw std::invalid_argument("attention_pool: empty bag");
  const bool gated = variant == MilVariant::abmil_gated;
  const Index n = static_cast<Index>(h.size());

  Vector e(n);
  for (Index i = 0; i < n; ++i) {
    const Vector t = (params.v * h[static_cast<std::size_t>(i)]).array().tanh();
    if (gated) {
      const Vector s = (params.u * h[static_cast<std::size_t>(i)])
                           .unaryExpr([](double x) { return sigmoid(x); });
      e[i] = params.w.dot(t.cwiseProduct(s));
    } else {
      e[i] = params.w.dot(t);
    }
  }
  const double emax = e.maxCoeff();
  Vector a = (e.array() - emax).exp();
  a /= a.sum();

  Vector z = Vector::Zero(h.front().size());
  for (Index i = 0; i < n; ++i) z += a[i] * h[static_cast<std::size_t>(i)];
  return {std::move(z), std::move(a)};
}

Vector embed_instance(const MilModel& model, const Vector& x_raw) {
  if (x_raw.size() != model.d_raw()) {
    throw std::invalid_argument("embed_instance: expected raw dimension " +
                                std::to_string(model.d_raw()) + ", got " +
                                std::to_string(x_raw.size()));
  }
  const Vector x = (x_raw - model.feat_mean).cwiseProduct(model.feat_scale);
  return (model.embed.w * x + model.embed.b).cwiseMax(0.0);
}

ForwardTrace forward(const MilModel& model, const Bag& bag) {
  if (bag.instances.empty()) throw std::invalid_argument("forward: empty bag");
  if (model.sc.has_value() && model.sc->embed_dim() != model.embed_dim()) {
    throw std::logic_error("forward: embedding width does not match the SC module");
  }
  if (model.head.w.cols() != model.pooled_dim()) {
    throw std::logic_error("forward: classifier head does not match the pooled dimension");
  }

  ForwardTrace trace;
  const std::size_t n = bag.instances.size();
  trace.instances.resize(n);
  double margin = std::numeric_limits<double>::infinity();

  std::optional<ListaMatrices> mats;
  if (model.sc.has_value()) mats = lista_matrices(*model.sc);

  std::vector<Vector> pooled;
  pooled.reserve(n);
  double sparsity_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    InstanceTrace& inst = trace.instances[i];
    if (bag.instances[i].size() != model.d_raw()) {
      throw std::invalid_argument("forward: instance " + std::to_string(i) +
                                  " has dimension " + std::to_string(bag.instances[i].size()) +
                                  ", expected " + std::to_string(model.d_raw()));
    }
    inst.x_std = (bag.instances[i] - model.feat_mean).cwiseProduct(model.feat_scale);
    inst.pre_embed = model.embed.w * inst.x_std + model.embed.b;
    inst.h = inst.pre_embed.cwiseMax(0.0);
    margin = std::min(margin, inst.pre_embed.cwiseAbs().minCoeff());

    if (model.sc.has_value()) {
      inst.sc = lista_forward(*model.sc, *mats, inst.h);
      margin = std::min(margin, inst.sc.kink_margin);
      sparsity_sum += inst.sc.sparsity;
      pooled.push_back(inst.sc.code());
    } else {
      pooled.push_back(inst.h);
    }
  }
  if (model.sc.has_value()) trace.sparsity = sparsity_sum / static_cast<double>(n);

  switch (model.variant) {
    case MilVariant::abmil:
    case MilVariant::abmil_gated: {
      const bool gated = model.variant == MilVariant::abmil_gated;
      trace.scores.resize(static_cast<Index>(n));
      trace.tanh_vh.resize(n);
      if (gated) trace.sig_uh.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        trace.tanh_vh[i] = (model.pooling.v * pooled[i]).array().tanh();
        if (gated) {
          trace.sig_uh[i] = (model.pooling.u * pooled[i])
                                .unaryExpr([](double x) { return sigmoid(x); });
          trace.scores[static_cast<Index>(i)] =
              model.pooling.w.dot(trace.tanh_vh[i].cwiseProduct(trace.sig_uh[i]));
        } else {
          trace.scores[static_cast<Index>(i)] = model.pooling.w.dot(trace.tanh_vh[i]);
        }
      }
      const double emax = trace.scores.maxCoeff();
      trace.attention = (trace.scores.array() - emax).exp();
      trace.attention /= trace.attention.sum();
      trace.z = Vector::Zero(model.pooled_dim());
      for (std::size_t i = 0; i < n; ++i) {
        trace.z += trace.attention[static_cast<Index>(i)] * pooled[i];
      }
      break;
    }
    case MilVariant::max_pool: {
      const Index q = model.pooled_dim();
      trace.z.resize(q);
      trace.argmax.assign(static_cast<std::size_t>(q), 0);
      for (Index j = 0; j < q; ++j) {
        double best = pooled[0][j];
        double second = -std::numeric_limits<double>::infinity();
        Index best_i = 0;
        for (std::size_t i = 1; i < n; ++i) {
          const double v = pooled[i][j];
          if (v > best) {
            second = best;
            best = v;
            best_i = static_cast<Index>(i);
          } else {
            second = std::max(second, v);
          }
        }
        trace.z[j] = best;
        trace.argmax[static_cast<std::size_t>(j)] = best_i;
        // a tie between exact zeros is not a kink: hard zeros carry zero
        // derivative on every side (threshold/ReLU clamps)
        if (n > 1 && !(best == 0.0 && second == 0.0)) {
          margin = std::min(margin, best - second);
        }
      }
      break;
    }
    case MilVariant::mean_pool:
      trace.z = mean_pool(pooled);
      break;
  }

  trace.logit = model.head.w.row(0).dot(trace.z) + model.head.b[0];
  trace.yhat = sigmoid(trace.logit);
  margin = std::min(margin, clamp_boundary_margin(trace.logit));
  trace.kink_margin = margin;
  return trace;
}

MilGrads backward(const MilModel& model, const ForwardTrace& trace, int label) {
  const std::size_t n = trace.instances.size();
  if (n == 0) throw std::logic_error("backward: trace has no instances");
  if (model.has_attention() && trace.attention.size() != static_cast<Index>(n)) {
    throw std::logic_error("backward: trace does not match the model variant");
  }
  if (trace.z.size() != model.pooled_dim()) {
    throw std::logic_error("backward: trace pooled dimension does not match the model");
  }

  MilGrads grads = zero_grads(model);

  // Clamped BCE through the sigmoid head; zero gradient inside the clamp.
  const bool clamped = trace.yhat <= kProbClamp || trace.yhat >= 1.0 - kProbClamp;
  const double g_logit = clamped ? 0.0 : trace.yhat - static_cast<double>(label);

  grads.head.w.row(0) = g_logit * trace.z.transpose();
  grads.head.b[0] = g_logit;
  Vector g_z = g_logit * model.head.w.row(0).transpose();

  const bool has_sc = model.sc.has_value();
  auto pooled_input = [&](std::size_t i) -> const Vector& {
    return has_sc ? trace.instances[i].sc.code() : trace.instances[i].h;
  };

  std::vector<Vector> g_pooled(n);
  switch (model.variant) {
    case MilVariant::abmil:
    case MilVariant::abmil_gated: {
      const bool gated = model.variant == MilVariant::abmil_gated;
      const Vector& a = trace.attention;
      Vector g_a(static_cast<Index>(n));
      for (std::size_t i = 0; i < n; ++i) {
        g_pooled[i] = a[static_cast<Index>(i)] * g_z;
        g_a[static_cast<Index>(i)] = g_z.dot(pooled_input(i));
      }
      const double mixed = a.dot(g_a);
      for (std::size_t i = 0; i < n; ++i) {
        const Index ii = static_cast<Index>(i);
        const double g_e = a[ii] * (g_a[ii] - mixed);
        const Vector& t = trace.tanh_vh[i];
        if (gated) {
          const Vector& s = trace.sig_uh[i];
          grads.pooling.w += g_e * t.cwiseProduct(s);
          const Vector g_ts = g_e * model.pooling.w;
          const Vector g_v = g_ts.cwiseProduct(s).cwiseProduct(
              (1.0 - t.array().square()).matrix());
          const Vector g_u = g_ts.cwiseProduct(t).cwiseProduct(
              s.cwiseProduct((1.0 - s.array()).matrix()));
          grads.pooling.v.noalias() += g_v * pooled_input(i).transpose();
          grads.pooling.u.noalias() += g_u * pooled_input(i).transpose();
          g_pooled[i].noalias() += model.pooling.v.transpose() * g_v;
          g_pooled[i].noalias() += model.pooling.u.transpose() * g_u;
        } else {
          grads.pooling.w += g_e * t;
          const Vector g_v = (g_e * model.pooling.w).cwiseProduct(
              (1.0 - t.array().square()).matrix());
          grads.pooling.v.noalias() += g_v * pooled_input(i).transpose();
          g_pooled[i].noalias() += model.pooling.v.transpose() * g_v;
        }
      }
      break;
    }
    case MilVariant::max_pool: {
      for (std::size_t i = 0; i < n; ++i) {
        g_pooled[i] = Vector::Zero(model.pooled_dim());
      }
      for (Index j = 0; j < model.pooled_dim(); ++j) {
        g_pooled[static_cast<std::size_t>(trace.argmax[static_cast<std::size_t>(j)])][j] += g_z[j];
      }
      break;
    }
    case MilVariant::mean_pool: {
      const Vector g_each = g_z / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) g_pooled[i] = g_each;
      break;
    }
  }

  std::optional<ListaMatrices> mats;
  if (has_sc) mats = lista_matrices(*model.sc);

  for (std::size_t i = 0; i < n; ++i) {
    const InstanceTrace& inst = trace.instances[i];
    Vector g_h;
    if (has_sc) {
      ScGrads sg = lista_backward(*model.sc, *mats, inst.sc, g_pooled[i]);
      grads.sc->d_dict += sg.d_dict;
      grads.sc->d_log_mu += sg.d_log_mu;
      grads.sc->d_lambda_net.w1 += sg.d_lambda_net.w1;
      grads.sc->d_lambda_net.b1 += sg.d_lambda_net.b1;
      grads.sc->d_lambda_net.w2 += sg.d_lambda_net.w2;
      grads.sc->d_lambda_net.b2 += sg.d_lambda_net.b2;
      grads.sc->d_lambda_net.w3 += sg.d_lambda_net.w3;
      grads.sc->d_lambda_net.b3 += sg.d_lambda_net.b3;
      g_h = std::move(sg.d_input);
    } else {
      g_h = g_pooled[i];
    }
    const Vector g_pre =
        (inst.pre_embed.array() > 0.0).select(g_h, Vector::Zero(g_h.size()));
    grads.embed.w.noalias() += g_pre * inst.x_std.transpose();
    grads.embed.b += g_pre;
  }

  return grads;
}

MilModel init_mil_model(const MilModelConfig& cfg, std::uint64_t seed) {
  if (cfg.sc_enabled && cfg.atoms < cfg.embed_dim) {
    throw std::invalid_argument(
        "init_mil_model: the SC dictionary must be over-complete (atoms >= embed dim), got atoms=" +
        std::to_string(cfg.atoms) + ", embed=" + std::to_string(cfg.embed_dim));
  }
  MilModel model;
  model.variant = cfg.variant;

  if (cfg.sc_enabled) {
    model.sc = init_sc_module(cfg.embed_dim, cfg.atoms, cfg.layers,
                              Rng(seed, "sc-init").next_u64());
  }

  // The embedding init is scaled to the SC module's operating point: code
  // pre-activations (1/mu) D^T h must reach the initial lambda (~ln 2), and
  // mu = ||D||^2 grows with the dictionary's over-completeness. The positive
  // bias adds a constant component that loads onto the DCT's constant atom,
  // keeping some code coordinates above the initial soft threshold for every
  // seed; an all-zero code field would block every gradient path.
  const double mu_scale = cfg.sc_enabled ? model.sc->mu() : 2.86;
  Rng embed_rng(seed, "embed-init");
  model.embed.w = uniform_init(cfg.embed_dim, cfg.d_raw, 0.7 * mu_scale, embed_rng);
  model.embed.b = Vector::Constant(cfg.embed_dim,
                                   mu_scale / std::sqrt(static_cast<double>(cfg.embed_dim)));

  const Index q = cfg.sc_enabled ? cfg.atoms : cfg.embed_dim;
  Rng pool_rng(seed, "pool-init");
  if (cfg.variant == MilVariant::abmil || cfg.variant == MilVariant::abmil_gated) {
    model.pooling.v = uniform_init(cfg.att_hidden, q, 1.0, pool_rng);
    if (cfg.variant == MilVariant::abmil_gated) {
      model.pooling.u = uniform_init(cfg.att_hidden, q, 1.0, pool_rng);
    } else {
      model.pooling.u = Matrix(0, 0);
    }
    const double wb = 1.0 / std::sqrt(static_cast<double>(cfg.att_hidden));
    model.pooling.w = Vector(cfg.att_hidden);
    for (Index i = 0; i < cfg.att_hidden; ++i) model.pooling.w[i] = pool_rng.uniform(-wb, wb);
  } else {
    model.pooling.v = Matrix(0, 0);
    model.pooling.u = Matrix(0, 0);
    model.pooling.w = Vector(0);
  }

  Rng head_rng(seed, "head-init");
  model.head.w = uniform_init(1, q, 1.0, head_rng);
  model.head.b = Vector::Zero(1);

  model.feat_mean = Vector::Zero(cfg.d_raw);
  model.feat_scale = Vector::Ones(cfg.d_raw);
  return model;
}

MilGrads zero_grads(const MilModel& model) {
  MilGrads g;
  g.embed.w = Matrix::Zero(model.embed.w.rows(), model.embed.w.cols());
  g.embed.b = Vector::Zero(model.embed.b.size());
  if (model.sc.has_value()) g.sc = zero_grads(*model.sc);
  g.pooling.v = Matrix::Zero(model.pooling.v.rows(), model.pooling.v.cols());
  g.pooling.u = Matrix::Zero(model.pooling.u.rows(), model.pooling.u.cols());
  g.pooling.w = Vector::Zero(model.pooling.w.size());
  g.head.w = Matrix::Zero(model.head.w.rows(), model.head.w.cols());
  g.head.b = Vector::Zero(model.head.b.size());
  return g;
}

}  // namespace scmil
