#include "scmil/training.hpp"

#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

namespace scmil {

namespace {

constexpr double kPi = 3.141592653589793238462643;

void push(std::vector<TensorRef>& refs, std::string name, double* data, Index rows, Index cols,
          bool decay) {
  if (rows * cols == 0) return;
  refs.push_back(TensorRef{std::move(name), data, rows, cols, decay});
}

std::vector<TensorRef> collect(MilModel& model) {
  std::vector<TensorRef> refs;
  push(refs, "embed.w", model.embed.w.data(), model.embed.w.rows(), model.embed.w.cols(), true);
  push(refs, "embed.b", model.embed.b.data(), model.embed.b.size(), 1, true);
  if (model.sc.has_value()) {
    ScModuleParams& sc = *model.sc;
    push(refs, "sc.dict", sc.dict.data(), sc.dict.rows(), sc.dict.cols(), true);
    push(refs, "sc.log_mu", &sc.log_mu, 1, 1, false);
    push(refs, "sc.lambda.w1", sc.lambda_net.w1.data(), sc.lambda_net.w1.rows(),
         sc.lambda_net.w1.cols(), true);
    push(refs, "sc.lambda.b1", sc.lambda_net.b1.data(), sc.lambda_net.b1.size(), 1, false);
    push(refs, "sc.lambda.w2", sc.lambda_net.w2.data(), sc.lambda_net.w2.rows(),
         sc.lambda_net.w2.cols(), true);
    push(refs, "sc.lambda.b2", sc.lambda_net.b2.data(), sc.lambda_net.b2.size(), 1, false);
    push(refs, "sc.lambda.w3", sc.lambda_net.w3.data(), sc.lambda_net.w3.rows(),
         sc.lambda_net.w3.cols(), true);
    push(refs, "sc.lambda.b3", sc.lambda_net.b3.data(), sc.lambda_net.b3.size(), 1, false);
  }
  push(refs, "pool.v", model.pooling.v.data(), model.pooling.v.rows(), model.pooling.v.cols(),
       true);
  push(refs, "pool.u", model.pooling.u.data(), model.pooling.u.rows(), model.pooling.u.cols(),
       true);
  push(refs, "pool.w", model.pooling.w.data(), model.pooling.w.size(), 1, true);
  push(refs, "head.w", model.head.w.data(), model.head.w.rows(), model.head.w.cols(), true);
  push(refs, "head.b", model.head.b.data(), model.head.b.size(), 1, true);
  return refs;
}

std::uint64_t sub_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
  return Rng(seed, tag, index).next_u64();
}

double nan_value() { return std::numeric_limits<double>::quiet_NaN(); }

}  // namespace

double cosine_lr(int epoch, int total, double lr0) {
  if (epoch < 0 || epoch >= total) {
    throw std::invalid_argument("cosine_lr: epoch " + std::to_string(epoch) +
                                " outside [0, " + std::to_string(total) + ")");
  }
  if (!(lr0 > 0.0)) throw std::invalid_argument("cosine_lr: lr0 must be positive");
  return lr0 * 0.5 * (1.0 + std::cos(kPi * static_cast<double>(epoch) / static_cast<double>(total)));
}

std::vector<TensorRef> learnable_params(MilModel& model) { return collect(model); }

std::vector<TensorRef> learnable_params(const MilModel& model) {
  // read-only callers (checkpointing, gradient checks on copies)
  return collect(const_cast<MilModel&>(model));
}

std::vector<TensorRef> grad_tensors(MilGrads& grads, const MilModel& model) {
  std::vector<TensorRef> refs;
  push(refs, "embed.w", grads.embed.w.data(), grads.embed.w.rows(), grads.embed.w.cols(), true);
  push(refs, "embed.b", grads.embed.b.data(), grads.embed.b.size(), 1, true);
  if (model.sc.has_value()) {
    if (!grads.sc.has_value()) throw std::logic_error("grad_tensors: missing SC gradients");
    ScGrads& sc = *grads.sc;
    push(refs, "sc.dict", sc.d_dict.data(), sc.d_dict.rows(), sc.d_dict.cols(), true);
    push(refs, "sc.log_mu", &sc.d_log_mu, 1, 1, false);
    push(refs, "sc.lambda.w1", sc.d_lambda_net.w1.data(), sc.d_lambda_net.w1.rows(),
         sc.d_lambda_net.w1.cols(), true);
    push(refs, "sc.lambda.b1", sc.d_lambda_net.b1.data(), sc.d_lambda_net.b1.size(), 1, false);
    push(refs, "sc.lambda.w2", sc.d_lambda_net.w2.data(), sc.d_lambda_net.w2.rows(),
         sc.d_lambda_net.w2.cols(), true);
    push(refs, "sc.lambda.b2", sc.d_lambda_net.b2.data(), sc.d_lambda_net.b2.size(), 1, false);
    push(refs, "sc.lambda.w3", sc.d_lambda_net.w3.data(), sc.d_lambda_net.w3.rows(),
         sc.d_lambda_net.w3.cols(), true);
    push(refs, "sc.lambda.b3", sc.d_lambda_net.b3.data(), sc.d_lambda_net.b3.size(), 1, false);
  }
  push(refs, "pool.v", grads.pooling.v.data(), grads.pooling.v.rows(), grads.pooling.v.cols(),
       true);
  push(refs, "pool.u", grads.pooling.u.data(), grads.pooling.u.rows(), grads.pooling.u.cols(),
       true);
  push(refs, "pool.w", grads.pooling.w.data(), grads.pooling.w.size(), 1, true);
  push(refs, "head.w", grads.head.w.data(), grads.head.w.rows(), grads.head.w.cols(), true);
  push(refs, "head.b", grads.head.b.data(), grads.head.b.size(), 1, true);
  return refs;
}

void adam_step(AdamState& state, std::vector<TensorRef>& params,
               const std::vector<TensorRef>& grads, double lr, const TrainConfig& cfg) {
  if (params.size() != grads.size()) {
    throw std::invalid_argument("adam_step: parameter/gradient tensor counts differ");
  }
  if (state.m.empty()) {
    state.m.reserve(params.size());
    state.v.reserve(params.size());
    for (const TensorRef& p : params) {
      state.m.push_back(Vector::Zero(p.size()));
      state.v.push_back(Vector::Zero(p.size()));
    }
  }
  if (state.m.size() != params.size()) {
    throw std::invalid_argument("adam_step: state does not match parameter count");
  }

  for (std::size_t i = 0; i < params.size(); ++i) {
    const Eigen::Map<const Vector> g(grads[i].data, grads[i].size());
    if (!g.allFinite()) {
      throw TrainingError("adam_step: non-finite gradient in " + params[i].name, params[i].name,
                          0);
    }
  }

  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size()) {
      throw std::invalid_argument("adam_step: shape mismatch for " + params[i].name);
    }
    Eigen::Map<Vector> p(params[i].data, params[i].size());
    const Eigen::Map<const Vector> g(grads[i].data, grads[i].size());
    Vector& m = state.m[i];
    Vector& v = state.v[i];
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const Vector update =
        ((m / bc1).array() / ((v / bc2).array().sqrt() + cfg.adam_eps)).matrix();
    if (params[i].decay && cfg.weight_decay != 0.0) {
      p *= (1.0 - lr * cfg.weight_decay);
    }
    p -= lr * update;
  }
}

EvalMetrics evaluate(const MilModel& model, const std::vector<Bag>& bags) {
  if (bags.empty()) throw std::invalid_argument("evaluate: empty bag list");
  std::vector<double> scores;
  std::vector<int> labels;
  scores.reserve(bags.size());
  labels.reserve(bags.size());
  double loss = 0.0;
  for (const Bag& bag : bags) {
    const ForwardTrace trace = forward(model, bag);
    loss += bce_loss(trace.yhat, bag.label);
    scores.push_back(trace.yhat);
    labels.push_back(bag.label);
  }
  EvalMetrics out;
  out.loss = loss / static_cast<double>(bags.size());
  out.acc = accuracy(scores, labels);
  try {
    out.auc_score = auc(scores, labels);
  } catch (const MetricError&) {
    out.auc_score = nan_value();
  }
  return out;
}

namespace {

/// Per-dimension standardization from the training split. Constant features
/// map to zero.
void fit_standardization(MilModel& model, const std::vector<Bag>& train) {
  const Index d = model.d_raw();
  Vector sum = Vector::Zero(d);
  Vector sumsq = Vector::Zero(d);
  double count = 0.0;
  for (const Bag& bag : train) {
    for (const Vector& x : bag.instances) {
      if (x.size() != d) throw std::invalid_argument("fit: instance dimension mismatch");
      sum += x;
      sumsq += x.cwiseProduct(x);
      count += 1.0;
    }
  }
  model.feat_mean = sum / count;
  Vector var = sumsq / count - model.feat_mean.cwiseProduct(model.feat_mean);
  model.feat_scale.resize(d);
  for (Index j = 0; j < d; ++j) {
    const double sd = std::sqrt(std::max(var[j], 0.0));
    model.feat_scale[j] = sd < 1e-12 ? 1.0 : 1.0 / sd;
  }
}

}  // namespace

FitResult fit(MilModel model, const std::vector<Bag>& train, const std::vector<Bag>& val,
              const TrainConfig& cfg) {
  if (train.empty()) throw std::invalid_argument("fit: empty training split");
  if (cfg.epochs < 1) throw std::invalid_argument("fit: epochs must be >= 1");

  fit_standardization(model, train);

  std::vector<TensorRef> params = learnable_params(model);
  AdamState state;

  FitResult result;
  double best_acc = -1.0;
  double best_auc = -1.0;

  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);
    Rng shuffle_rng(cfg.seed, "epoch-shuffle", static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t idx : order) {
      const Bag& bag = train[idx];
      const ForwardTrace trace = forward(model, bag);
      const double loss = bce_loss(trace.yhat, bag.label);
      if (!std::isfinite(loss)) {
        throw TrainingError("fit: loss diverged at epoch " + std::to_string(epoch), "",
                            static_cast<std::size_t>(epoch));
      }
      loss_sum += loss;
      MilGrads grads = backward(model, trace, bag.label);
      std::vector<TensorRef> grad_refs = grad_tensors(grads, model);
      try {
        adam_step(state, params, grad_refs, lr, cfg);
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + " at epoch " + std::to_string(epoch),
                            e.param(), static_cast<std::size_t>(epoch));
      }
      ++result.steps_taken;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = lr;
    stats.train_loss = loss_sum / static_cast<double>(train.size());
    if (!val.empty()) {
      const EvalMetrics m = evaluate(model, val);
      stats.val_acc = m.acc;
      stats.val_auc = m.auc_score;
      const double auc_cmp = std::isnan(m.auc_score) ? -1.0 : m.auc_score;
      if (m.acc > best_acc || (m.acc == best_acc && auc_cmp > best_auc)) {
        best_acc = m.acc;
        best_auc = auc_cmp;
        result.model = model;
        result.best_epoch = epoch;
      }
    } else {
      stats.val_acc = nan_value();
      stats.val_auc = nan_value();
    }
    result.history.push_back(stats);
  }

  if (val.empty() || result.best_epoch < 0) {
    result.model = std::move(model);
    result.best_epoch = cfg.epochs - 1;
  }
  return result;
}

GradCheckReport grad_check(const MilModel& model, const Bag& bag, double eps, double kink_margin,
                           Index max_coords) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  if (max_coords < 1) throw std::invalid_argument("grad_check: max_coords must be >= 1");

  MilModel work = model;
  std::vector<TensorRef> params = learnable_params(work);

  const ForwardTrace trace = forward(work, bag);
  GradCheckReport report;
  report.margin = trace.kink_margin;
  report.margin_ok = trace.kink_margin >= kink_margin;
  if (!report.margin_ok) return report;  // caller should redraw the bag

  MilGrads grads = backward(work, trace, bag.label);
  const std::vector<TensorRef> grad_refs = grad_tensors(grads, work);

  Index total = 0;
  for (const TensorRef& p : params) total += p.size();
  const Index stride = total <= max_coords ? 1 : (total + max_coords - 1) / max_coords;

  const auto loss_at = [&]() { return bce_loss(forward(work, bag).yhat, bag.label); };

  report.groups.reserve(params.size());
  for (const TensorRef& p : params) {
    report.groups.push_back(GradCheckGroup{p.name, 0.0, 0.0, 0.0});
  }

  Index global = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (Index j = 0; j < params[t].size(); ++j, ++global) {
      if (global % stride != 0) continue;
      double* slot = params[t].data + j;
      const double saved = *slot;
      *slot = saved + eps;
      const double f_plus = loss_at();
      *slot = saved - eps;
      const double f_minus = loss_at();
      *slot = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * eps);
      const double analytic = grad_refs[t].data[j];
      const double rel = std::abs(numeric - analytic) /
                         std::max({std::abs(numeric), std::abs(analytic), 1e-4});
      ++report.coords_checked;
      if (rel > report.groups[t].max_rel_err) {
        report.groups[t].max_rel_err = rel;
        report.groups[t].worst_analytic = analytic;
        report.groups[t].worst_numeric = numeric;
      }
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = params[t].name;
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const Matrix* Checkpoint::find(const std::string& name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return &t.value;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ostringstream out;
  out << "SCMIL-CKPT v1\n" << ckpt.tensors.size() << "\n";
  for (const NamedTensor& t : ckpt.tensors) {
    if (t.name.empty() || t.name.find_first_of(" \n\t") != std::string::npos) {
      throw std::invalid_argument("save_checkpoint: invalid tensor name '" + t.name + "'");
    }
    out << t.name << ' ' << t.value.rows() << ' ' << t.value.cols() << '\n';
    for (Index r = 0; r < t.value.rows(); ++r) {
      for (Index c = 0; c < t.value.cols(); ++c) {
        if (c > 0) out << ' ';
        out << format_double(t.value(r, c));
      }
      out << '\n';
    }
  }
  for (const auto& [key, value] : ckpt.config) {
    out << "# " << key << '=' << value << '\n';
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  file << out.str();
  if (!file) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("load_checkpoint: cannot open " + path.string());

  std::size_t lineno = 0;
  std::string line;
  const auto next_line = [&](const char* what) {
    if (!std::getline(file, line)) {
      throw ParseError(std::string("load_checkpoint: truncated file, expected ") + what, lineno + 1);
    }
    ++lineno;
  };

  next_line("magic header");
  if (line != "SCMIL-CKPT v1") throw ParseError("load_checkpoint: bad magic header", lineno);
  next_line("tensor count");
  long count = -1;
  try {
    std::size_t pos = 0;
    count = std::stol(line, &pos);
    if (pos != line.size()) count = -1;
  } catch (...) {
    count = -1;
  }
  if (count < 0) throw ParseError("load_checkpoint: invalid tensor count '" + line + "'", lineno);

  Checkpoint ckpt;
  ckpt.tensors.reserve(static_cast<std::size_t>(count));
  for (long t = 0; t < count; ++t) {
    next_line("tensor header");
    std::istringstream hdr(line);
    std::string name;
    long rows = -1, cols = -1;
    std::string extra;
    if (!(hdr >> name >> rows >> cols) || (hdr >> extra) || rows < 0 || cols < 0) {
      throw ParseError("load_checkpoint: malformed tensor header '" + line + "'", lineno);
    }
    Matrix value(rows, cols);
    for (long r = 0; r < rows; ++r) {
      next_line("tensor row");
      std::size_t start = 0;
      for (long c = 0; c < cols; ++c) {
        std::size_t end = line.find(' ', start);
        const std::string_view tok =
            std::string_view(line).substr(start, end == std::string::npos ? line.size() - start
                                                                          : end - start);
        double v = 0.0;
        if (tok.empty() || !parse_double(tok, v)) {
          throw ParseError("load_checkpoint: bad value in tensor " + name, lineno);
        }
        value(r, c) = v;
        if (end == std::string::npos) {
          if (c + 1 != cols) {
            throw ParseError("load_checkpoint: row has too few values in tensor " + name, lineno);
          }
          start = line.size();
        } else {
          start = end + 1;
        }
      }
      if (start != line.size()) {
        throw ParseError("load_checkpoint: row has too many values in tensor " + name, lineno);
      }
    }
    ckpt.tensors.push_back(NamedTensor{std::move(name), std::move(value)});
  }

  while (std::getline(file, line)) {
    ++lineno;
    if (line.rfind("# ", 0) != 0) {
      throw ParseError("load_checkpoint: unexpected content after tensors (tensor count mismatch?)",
                       lineno);
    }
    const std::string entry = line.substr(2);
    const std::size_t eq = entry.find('=');
    if (eq == std::string::npos) {
      throw ParseError("load_checkpoint: malformed config comment", lineno);
    }
    ckpt.config.emplace_back(entry.substr(0, eq), entry.substr(eq + 1));
  }
  return ckpt;
}

namespace {

/// Allocates a model with the right shapes and zeroed tensors.
MilModel make_model_shell(const MilModelConfig& cfg) {
  MilModel model;
  model.variant = cfg.variant;
  model.embed.w = Matrix::Zero(cfg.embed_dim, cfg.d_raw);
  model.embed.b = Vector::Zero(cfg.embed_dim);
  if (cfg.sc_enabled) {
    ScModuleParams sc;
    sc.dict = Matrix::Zero(cfg.embed_dim, cfg.atoms);
    sc.log_mu = 0.0;
    sc.num_layers = cfg.layers;
    sc.lambda_net.w1 = Matrix::Zero(kLambdaHidden1, cfg.embed_dim);
    sc.lambda_net.b1 = Vector::Zero(kLambdaHidden1);
    sc.lambda_net.w2 = Matrix::Zero(kLambdaHidden2, kLambdaHidden1);
    sc.lambda_net.b2 = Vector::Zero(kLambdaHidden2);
    sc.lambda_net.w3 = Matrix::Zero(1, kLambdaHidden2);
    sc.lambda_net.b3 = Vector::Zero(1);
    model.sc = std::move(sc);
  }
  const Index q = cfg.sc_enabled ? cfg.atoms : cfg.embed_dim;
  if (cfg.variant == MilVariant::abmil || cfg.variant == MilVariant::abmil_gated) {
    model.pooling.v = Matrix::Zero(cfg.att_hidden, q);
    model.pooling.u = cfg.variant == MilVariant::abmil_gated ? Matrix::Zero(cfg.att_hidden, q)
                                                             : Matrix(0, 0);
    model.pooling.w = Vector::Zero(cfg.att_hidden);
  } else {
    model.pooling.v = Matrix(0, 0);
    model.pooling.u = Matrix(0, 0);
    model.pooling.w = Vector(0);
  }
  model.head.w = Matrix::Zero(1, q);
  model.head.b = Vector::Zero(1);
  model.feat_mean = Vector::Zero(cfg.d_raw);
  model.feat_scale = Vector::Ones(cfg.d_raw);
  return model;
}

std::string config_value(const Checkpoint& ckpt, const std::string& key) {
  for (const auto& [k, v] : ckpt.config) {
    if (k == key) return v;
  }
  throw std::runtime_error("checkpoint is missing config key '" + key + "'");
}

}  // namespace

Checkpoint to_checkpoint(const MilModel& model) {
  Checkpoint ckpt;
  for (const TensorRef& p : learnable_params(model)) {
    Matrix value(p.rows, p.cols);
    for (Index j = 0; j < p.size(); ++j) {
      // TensorRef flattening is column-major for matrices (Eigen default)
      value(j % p.rows, j / p.rows) = p.data[j];
    }
    ckpt.tensors.push_back(NamedTensor{p.name, std::move(value)});
  }
  ckpt.tensors.push_back(NamedTensor{"norm.mean", model.feat_mean});
  ckpt.tensors.push_back(NamedTensor{"norm.scale", model.feat_scale});

  ckpt.config.emplace_back("variant", to_string(model.variant));
  ckpt.config.emplace_back("sc", model.sc.has_value() ? "on" : "off");
  ckpt.config.emplace_back("d_raw", std::to_string(model.d_raw()));
  ckpt.config.emplace_back("embed_dim", std::to_string(model.embed_dim()));
  if (model.sc.has_value()) {
    ckpt.config.emplace_back("atoms", std::to_string(model.sc->num_atoms()));
    ckpt.config.emplace_back("layers", std::to_string(model.sc->num_layers));
  }
  ckpt.config.emplace_back("att_hidden", std::to_string(model.pooling.w.size()));
  return ckpt;
}

MilModel model_from_checkpoint(const Checkpoint& ckpt) {
  MilModelConfig cfg;
  cfg.variant = variant_from_string(config_value(ckpt, "variant"));
  cfg.sc_enabled = config_value(ckpt, "sc") == "on";
  cfg.d_raw = std::stol(config_value(ckpt, "d_raw"));
  cfg.embed_dim = std::stol(config_value(ckpt, "embed_dim"));
  if (cfg.sc_enabled) {
    cfg.atoms = std::stol(config_value(ckpt, "atoms"));
    cfg.layers = static_cast<int>(std::stol(config_value(ckpt, "layers")));
  }
  cfg.att_hidden = std::stol(config_value(ckpt, "att_hidden"));

  MilModel model = make_model_shell(cfg);
  for (TensorRef& p : learnable_params(model)) {
    const Matrix* value = ckpt.find(p.name);
    if (value == nullptr) {
      throw std::runtime_error("checkpoint is missing tensor '" + p.name + "'");
    }
    if (value->rows() != p.rows || value->cols() != p.cols) {
      throw std::runtime_error("checkpoint tensor '" + p.name + "' has shape " +
                               std::to_string(value->rows()) + "x" +
                               std::to_string(value->cols()) + ", expected " +
                               std::to_string(p.rows) + "x" + std::to_string(p.cols));
    }
    for (Index j = 0; j < p.size(); ++j) {
      p.data[j] = (*value)(j % p.rows, j / p.rows);
    }
  }
  const Matrix* mean = ckpt.find("norm.mean");
  const Matrix* scale = ckpt.find("norm.scale");
  if (mean == nullptr || scale == nullptr) {
    throw std::runtime_error("checkpoint is missing the feature standardization tensors");
  }
  if (mean->rows() != cfg.d_raw || scale->rows() != cfg.d_raw || mean->cols() != 1 ||
      scale->cols() != 1) {
    throw std::runtime_error("checkpoint standardization tensors have the wrong shape");
  }
  model.feat_mean = mean->col(0);
  model.feat_scale = scale->col(0);
  return model;
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

CvResult run_cv(const Dataset& dataset, const CvConfig& cfg) {
  const FoldPlan plan =
      kfold_split(dataset, cfg.k, cfg.repetitions, sub_seed(cfg.train.seed, "cv-folds"));

  struct Task {
    int rep;
    int fold;
  };
  std::vector<Task> tasks;
  tasks.reserve(static_cast<std::size_t>(cfg.k) * static_cast<std::size_t>(cfg.repetitions));
  for (int r = 0; r < cfg.repetitions; ++r) {
    for (int f = 0; f < cfg.k; ++f) tasks.push_back(Task{r, f});
  }

  CvResult result;
  result.rows.resize(tasks.size());

  const auto run_task = [&](std::size_t idx) {
    const Task& task = tasks[idx];
    const auto [train_bags, test_bags] =
        select_fold(dataset, plan.reps[static_cast<std::size_t>(task.rep)]
                                      [static_cast<std::size_t>(task.fold)]);
    const std::uint64_t fold_tag =
        static_cast<std::uint64_t>(task.rep) * static_cast<std::uint64_t>(cfg.k) +
        static_cast<std::uint64_t>(task.fold);
    MilModel model = init_mil_model(cfg.model, sub_seed(cfg.train.seed, "cv-model", fold_tag));
    TrainConfig tcfg = cfg.train;
    tcfg.seed = sub_seed(cfg.train.seed, "cv-train", fold_tag);
    const FitResult fitted = fit(std::move(model), train_bags, test_bags, tcfg);
    const EvalMetrics m = evaluate(fitted.model, test_bags);
    result.rows[idx] = CvFoldRow{task.rep,
                                 task.fold,
                                 m.acc,
                                 m.auc_score,
                                 static_cast<int>(train_bags.size()),
                                 static_cast<int>(test_bags.size())};
  };

  const int jobs = std::max(1, cfg.jobs);
  if (jobs == 1) {
    for (std::size_t i = 0; i < tasks.size(); ++i) run_task(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> workers;
    const std::size_t n_workers =
        std::min<std::size_t>(static_cast<std::size_t>(jobs), tasks.size());
    for (std::size_t w = 0; w < n_workers; ++w) {
      workers.emplace_back([&]() {
        for (;;) {
          const std::size_t idx = next.fetch_add(1);
          if (idx >= tasks.size()) return;
          try {
            run_task(idx);
          } catch (...) {
            std::lock_guard<std::mutex> lock(error_mutex);
            if (!error) error = std::current_exception();
            return;
          }
        }
      });
    }
    for (std::thread& t : workers) t.join();
    if (error) std::rethrow_exception(error);
  }

  const double n = static_cast<double>(result.rows.size());
  double acc_sum = 0.0, auc_sum = 0.0;
  for (const CvFoldRow& row : result.rows) {
    acc_sum += row.acc;
    auc_sum += row.auc_score;
  }
  result.mean_acc = acc_sum / n;
  result.mean_auc = auc_sum / n;
  double acc_ss = 0.0, auc_ss = 0.0;
  for (const CvFoldRow& row : result.rows) {
    acc_ss += (row.acc - result.mean_acc) * (row.acc - result.mean_acc);
    auc_ss += (row.auc_score - result.mean_auc) * (row.auc_score - result.mean_auc);
  }
  if (result.rows.size() > 1) {
    result.std_acc = std::sqrt(acc_ss / (n - 1.0));
    result.std_auc = std::sqrt(auc_ss / (n - 1.0));
  }
  return result;
}

}  // namespace scmil
