// Command-line front end: training, cross-validation, ablation grids,
// gradient checks, and standalone sparse-coding solves. Every run writes a
// key=value manifest plus machine-readable CSVs into --out.

#include <CLI11.hpp>

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "scmil/data.hpp"
#include "scmil/mil.hpp"
#include "scmil/sparse_coding.hpp"
#include "scmil/training.hpp"

namespace fs = std::filesystem;
using namespace scmil;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Shared flag bundles
// ---------------------------------------------------------------------------

struct DataFlags {
  std::string data_path;
  std::string synth_preset;  // set (possibly empty) when --synth given
  bool synth_given = false;
  int synth_bags = 200;
  int synth_bag_min = 20;
  int synth_bag_max = 50;
  int synth_d_raw = 64;
  int synth_atoms = 32;
  int synth_pos_atoms = 4;
  double synth_rate = 0.1;
  double synth_noise = 0.05;
  int synth_sparsity = 3;
};

struct ModelFlags {
  std::string variant = "abmil_gated";
  std::string sc = "on";
  int atoms = 256;
  int layers = 5;
  int embed = 128;
  int att_hidden = 128;
};

struct TrainFlags {
  int epochs = 40;
  double lr = 1e-4;
  double weight_decay = 5e-3;
  std::uint64_t seed = 0;
};

void add_data_flags(CLI::App* cmd, DataFlags& f) {
  cmd->add_option("--data", f.data_path, "bag CSV file (bag_id,label,f0,...)");
  cmd->add_option("--synth", f.synth_preset,
                  "use the synthetic generator (optionally '--synth default')")
      ->expected(0, 1);
  cmd->add_option("--synth-bags", f.synth_bags, "synthetic: number of bags");
  cmd->add_option("--synth-bag-min", f.synth_bag_min, "synthetic: min bag size");
  cmd->add_option("--synth-bag-max", f.synth_bag_max, "synthetic: max bag size");
  cmd->add_option("--synth-dim", f.synth_d_raw, "synthetic: feature dimension");
  cmd->add_option("--synth-atoms", f.synth_atoms, "synthetic: ground-truth atoms");
  cmd->add_option("--synth-pos-atoms", f.synth_pos_atoms, "synthetic: positive atom count");
  cmd->add_option("--synth-rate", f.synth_rate, "synthetic: positive instance rate");
  cmd->add_option("--synth-noise", f.synth_noise, "synthetic: noise sigma");
  cmd->add_option("--synth-sparsity", f.synth_sparsity, "synthetic: code sparsity s");
}

void add_model_flags(CLI::App* cmd, ModelFlags& f) {
  cmd->add_option("--variant", f.variant, "abmil|abmil_gated|max|mean")
      ->check(CLI::IsMember({"abmil", "abmil_gated", "max", "mean"}));
  cmd->add_option("--sc", f.sc, "sparse-coding module on|off")
      ->check(CLI::IsMember({"on", "off"}));
  cmd->add_option("--atoms", f.atoms, "dictionary atoms m");
  cmd->add_option("--layers", f.layers, "unrolled layers L");
  cmd->add_option("--embed", f.embed, "embedding width p");
  cmd->add_option("--att-hidden", f.att_hidden, "attention hidden width");
}

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--epochs", f.epochs, "training epochs");
  cmd->add_option("--lr", f.lr, "initial learning rate (cosine annealed)");
  cmd->add_option("--weight-decay", f.weight_decay, "decoupled l2 weight decay");
  cmd->add_option("--seed", f.seed, "master seed; all randomness derives from it");
}

std::uint64_t stream_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index = 0) {
  return Rng(seed, tag, index).next_u64();
}

struct LoadedData {
  Dataset dataset;
  std::string source;
};

LoadedData load_data(const DataFlags& f, std::uint64_t master_seed) {
  const bool synth = f.synth_given || !f.synth_preset.empty();
  if (!f.data_path.empty() && synth) {
    throw UsageError("--data and --synth are mutually exclusive");
  }
  if (!f.synth_preset.empty() && f.synth_preset != "default") {
    throw UsageError("unknown synthetic preset '" + f.synth_preset + "' (only 'default')");
  }
  if (!f.data_path.empty()) {
    if (!fs::exists(f.data_path)) {
      throw UsageError("data file does not exist: " + f.data_path);
    }
    return LoadedData{load_bags_csv(f.data_path), f.data_path};
  }
  if (!synth) {
    throw UsageError("either --data <csv> or --synth is required");
  }
  SynthConfig cfg;
  cfg.num_bags = f.synth_bags;
  cfg.bag_min = f.synth_bag_min;
  cfg.bag_max = f.synth_bag_max;
  cfg.d_raw = f.synth_d_raw;
  cfg.true_atoms = f.synth_atoms;
  cfg.positive_atoms = f.synth_pos_atoms;
  cfg.positive_rate = f.synth_rate;
  cfg.noise_sigma = f.synth_noise;
  cfg.code_sparsity = f.synth_sparsity;
  cfg.seed = stream_seed(master_seed, "synth");
  return LoadedData{synth_generate(cfg), "synth"};
}

MilModelConfig model_config(const ModelFlags& f, Index d_raw) {
  MilModelConfig cfg;
  cfg.d_raw = d_raw;
  cfg.embed_dim = f.embed;
  cfg.atoms = f.atoms;
  cfg.layers = f.layers;
  cfg.att_hidden = f.att_hidden;
  cfg.variant = variant_from_string(f.variant);
  cfg.sc_enabled = f.sc == "on";
  if (cfg.sc_enabled && cfg.atoms < cfg.embed_dim) {
    throw UsageError("the dictionary must be over-complete: --atoms (" +
                     std::to_string(cfg.atoms) + ") must be >= --embed (" +
                     std::to_string(cfg.embed_dim) + ")");
  }
  if (cfg.layers < 1) throw UsageError("--layers must be >= 1");
  if (cfg.embed_dim < 1) throw UsageError("--embed must be >= 1");
  return cfg;
}

long long param_count(const MilModel& model) {
  long long total = 0;
  for (const TensorRef& p : learnable_params(model)) total += p.size();
  return total;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << v;
  return out.str();
}

using KeyValues = std::vector<std::pair<std::string, std::string>>;

void write_manifest(const fs::path& dir, const KeyValues& entries) {
  std::ofstream out(dir / "manifest.txt", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
  for (const auto& [k, v] : entries) out << k << '=' << v << '\n';
}

void append_common(KeyValues& m, const std::string& command, const LoadedData& data,
                   std::uint64_t seed) {
  m.emplace_back("command", command);
  m.emplace_back("seed", std::to_string(seed));
  m.emplace_back("dataset", data.source);
  m.emplace_back("dataset_bags", std::to_string(data.dataset.bags.size()));
  m.emplace_back("dataset_dim", std::to_string(data.dataset.feature_dim));
  m.emplace_back("dataset_fingerprint", hex64(dataset_fingerprint(data.dataset)));
}

void append_model(KeyValues& m, const ModelFlags& f) {
  m.emplace_back("variant", f.variant);
  m.emplace_back("sc", f.sc);
  if (f.sc == "on") {
    m.emplace_back("atoms", std::to_string(f.atoms));
    m.emplace_back("layers", std::to_string(f.layers));
  }
  m.emplace_back("embed", std::to_string(f.embed));
  m.emplace_back("att_hidden", std::to_string(f.att_hidden));
}

void append_train(KeyValues& m, const TrainFlags& f) {
  m.emplace_back("epochs", std::to_string(f.epochs));
  m.emplace_back("lr", format_double(f.lr));
  m.emplace_back("weight_decay", format_double(f.weight_decay));
}

class WallClock {
 public:
  WallClock() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

void write_history_csv(const fs::path& path, const std::vector<EpochStats>& history) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,lr,train_loss,val_accuracy,val_auc\n";
  for (const EpochStats& s : history) {
    out << s.epoch << ',' << format_double(s.lr) << ',' << format_double(s.train_loss) << ','
        << format_double(s.val_acc) << ',' << format_double(s.val_auc) << '\n';
  }
}

TrainConfig train_config(const TrainFlags& f) {
  TrainConfig cfg;
  cfg.epochs = f.epochs;
  cfg.lr0 = f.lr;
  cfg.weight_decay = f.weight_decay;
  cfg.seed = stream_seed(f.seed, "train");
  return cfg;
}

Checkpoint checkpoint_with_history(const MilModel& model, const TrainFlags& tf,
                                   const std::vector<EpochStats>& history) {
  Checkpoint ckpt = to_checkpoint(model);
  ckpt.config.emplace_back("epochs", std::to_string(tf.epochs));
  ckpt.config.emplace_back("lr0", format_double(tf.lr));
  ckpt.config.emplace_back("weight_decay", format_double(tf.weight_decay));
  ckpt.config.emplace_back("seed", std::to_string(tf.seed));
  for (const EpochStats& s : history) {
    ckpt.config.emplace_back("history." + std::to_string(s.epoch),
                             format_double(s.lr) + "," + format_double(s.train_loss) + "," +
                                 format_double(s.val_acc) + "," + format_double(s.val_auc));
  }
  return ckpt;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  DataFlags data;
  ModelFlags model;
  TrainFlags train;
  double val_frac = 0.0;
  std::string out = "scmil-train";
};

int cmd_train(const TrainArgs& args) {
  WallClock clock;
  const LoadedData data = load_data(args.data, args.train.seed);
  const MilModelConfig mcfg = model_config(args.model, data.dataset.feature_dim);

  std::vector<Bag> train_bags = data.dataset.bags;
  std::vector<Bag> val_bags;
  if (args.val_frac > 0.0) {
    if (args.val_frac >= 1.0) throw UsageError("--val-frac must be in [0, 1)");
    // stratified validation holdout
    Rng rng(args.train.seed, "val-split");
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < train_bags.size(); ++i) {
      (train_bags[i].label == 1 ? pos : neg).push_back(i);
    }
    rng.shuffle(pos);
    rng.shuffle(neg);
    std::vector<bool> is_val(train_bags.size(), false);
    const auto take = [&](const std::vector<std::size_t>& cls) {
      const std::size_t n_val =
          static_cast<std::size_t>(args.val_frac * static_cast<double>(cls.size()));
      for (std::size_t i = 0; i < n_val; ++i) is_val[cls[i]] = true;
    };
    take(pos);
    take(neg);
    std::vector<Bag> rest;
    for (std::size_t i = 0; i < train_bags.size(); ++i) {
      (is_val[i] ? val_bags : rest).push_back(train_bags[i]);
    }
    train_bags = std::move(rest);
  }

  MilModel model = init_mil_model(mcfg, stream_seed(args.train.seed, "init"));
  const FitResult result = fit(std::move(model), train_bags, val_bags, train_config(args.train));

  fs::create_directories(args.out);
  write_history_csv(fs::path(args.out) / "metrics.csv", result.history);
  save_checkpoint(fs::path(args.out) / "checkpoint.txt",
                  checkpoint_with_history(result.model, args.train, result.history));

  const EvalMetrics train_metrics = evaluate(result.model, train_bags);

  KeyValues manifest;
  append_common(manifest, "train", data, args.train.seed);
  append_model(manifest, args.model);
  append_train(manifest, args.train);
  manifest.emplace_back("val_frac", format_double(args.val_frac));
  manifest.emplace_back("n_train_bags", std::to_string(train_bags.size()));
  manifest.emplace_back("n_val_bags", std::to_string(val_bags.size()));
  manifest.emplace_back("params", std::to_string(param_count(result.model)));
  manifest.emplace_back("steps_taken", std::to_string(result.steps_taken));
  manifest.emplace_back("best_epoch", std::to_string(result.best_epoch));
  manifest.emplace_back("final_train_loss", format_double(result.history.back().train_loss));
  manifest.emplace_back("train_accuracy", format_double(train_metrics.acc));
  if (!val_bags.empty()) {
    const EvalMetrics val_metrics = evaluate(result.model, val_bags);
    manifest.emplace_back("val_accuracy", format_double(val_metrics.acc));
    manifest.emplace_back("val_auc", format_double(val_metrics.auc_score));
  }
  manifest.emplace_back("checkpoint", (fs::path(args.out) / "checkpoint.txt").string());
  manifest.emplace_back("metrics_csv", (fs::path(args.out) / "metrics.csv").string());
  manifest.emplace_back("wall_clock_sec", format_double(clock.seconds()));
  write_manifest(args.out, manifest);

  std::cout << "trained " << train_bags.size() << " bags for " << args.train.epochs
            << " epochs; final train loss " << format_double(result.history.back().train_loss)
            << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// cv
// ---------------------------------------------------------------------------

struct CvArgs {
  DataFlags data;
  ModelFlags model;
  TrainFlags train;
  int k = 10;
  int reps = 5;
  int jobs = 1;
  std::string out = "scmil-cv";
};

void write_cv_csv(const fs::path& path, const CvResult& result) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "rep,fold,accuracy,auc,n_train,n_test\n";
  for (const CvFoldRow& row : result.rows) {
    out << row.rep << ',' << row.fold << ',' << format_double(row.acc) << ','
        << format_double(row.auc_score) << ',' << row.n_train << ',' << row.n_test << '\n';
  }
}

int cmd_cv(const CvArgs& args) {
  WallClock clock;
  const LoadedData data = load_data(args.data, args.train.seed);

  CvConfig cfg;
  cfg.model = model_config(args.model, data.dataset.feature_dim);
  cfg.train = train_config(args.train);
  cfg.k = args.k;
  cfg.repetitions = args.reps;
  cfg.jobs = args.jobs;

  CvResult result;
  try {
    result = run_cv(data.dataset, cfg);
  } catch (const std::invalid_argument& e) {
    // infeasible stratification and friends: runtime failure, not usage
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }

  fs::create_directories(args.out);
  write_cv_csv(fs::path(args.out) / "results.csv", result);

  std::ostringstream human;
  human << "cross-validation: k=" << args.k << " reps=" << args.reps << " on " << data.source
        << "\n"
        << "accuracy " << format_double(result.mean_acc) << " +/- "
        << format_double(result.std_acc) << "\n"
        << "auc      " << format_double(result.mean_auc) << " +/- "
        << format_double(result.std_auc) << "\n";
  std::ofstream summary(fs::path(args.out) / "summary.txt", std::ios::binary);
  summary << human.str();
  std::cout << human.str();

  KeyValues manifest;
  append_common(manifest, "cv", data, args.train.seed);
  append_model(manifest, args.model);
  append_train(manifest, args.train);
  manifest.emplace_back("k", std::to_string(args.k));
  manifest.emplace_back("reps", std::to_string(args.reps));
  manifest.emplace_back("mean_accuracy", format_double(result.mean_acc));
  manifest.emplace_back("std_accuracy", format_double(result.std_acc));
  manifest.emplace_back("mean_auc", format_double(result.mean_auc));
  manifest.emplace_back("std_auc", format_double(result.std_auc));
  manifest.emplace_back("results_csv", (fs::path(args.out) / "results.csv").string());
  manifest.emplace_back("wall_clock_sec", format_double(clock.seconds()));
  write_manifest(args.out, manifest);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblateArgs {
  DataFlags data;
  ModelFlags model;
  TrainFlags train;
  std::vector<int> atoms_grid = {64, 128, 256, 512};
  std::vector<int> layers_grid = {1, 3, 5, 7, 9};
  int jobs = 1;
  std::string out = "scmil-ablate";
};

struct AblateCell {
  int atoms = 0;
  int layers = 0;
  long long params = 0;
  long long flops = 0;
  double acc = 0.0;
  double auc_score = 0.0;
};

int cmd_ablate(const AblateArgs& args) {
  WallClock clock;
  if (args.atoms_grid.empty() || args.layers_grid.empty()) {
    throw UsageError("--atoms-grid and --layers-grid must be nonempty");
  }
  const LoadedData data = load_data(args.data, args.train.seed);

  // one deterministic stratified 80/20 split shared by every cell
  const FoldPlan plan =
      kfold_split(data.dataset, 5, 1, stream_seed(args.train.seed, "ablate-split"));
  const auto [train_bags, test_bags] = select_fold(data.dataset, plan.reps[0][0]);

  std::vector<AblateCell> cells;
  for (int m : args.atoms_grid) {
    for (int layers : args.layers_grid) cells.push_back(AblateCell{m, layers, 0, 0, 0.0, 0.0});
  }

  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  const auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      try {
        AblateCell& cell = cells[i];
        ModelFlags mf = args.model;
        mf.atoms = cell.atoms;
        mf.layers = cell.layers;
        const MilModelConfig mcfg = model_config(mf, data.dataset.feature_dim);
        MilModel model = init_mil_model(mcfg, stream_seed(args.train.seed, "ablate-init", i));
        cell.params = param_count(model);
        cell.flops = sc_flops_per_instance(mcfg.embed_dim, mcfg.atoms, mcfg.layers);
        TrainConfig tcfg = train_config(args.train);
        tcfg.seed = stream_seed(args.train.seed, "ablate-train", i);
        const FitResult result = fit(std::move(model), train_bags, test_bags, tcfg);
        const EvalMetrics metrics = evaluate(result.model, test_bags);
        cell.acc = metrics.acc;
        cell.auc_score = metrics.auc_score;
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  const int jobs = std::max(1, args.jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < jobs; ++w) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);

  fs::create_directories(args.out);
  std::ofstream csv(fs::path(args.out) / "ablation.csv", std::ios::binary);
  csv << "atoms,layers,params,flops_per_instance,accuracy,auc\n";
  for (const AblateCell& cell : cells) {
    csv << cell.atoms << ',' << cell.layers << ',' << cell.params << ',' << cell.flops << ','
        << format_double(cell.acc) << ',' << format_double(cell.auc_score) << '\n';
  }
  csv.close();

  std::cout << "atoms layers params flops accuracy auc\n";
  for (const AblateCell& cell : cells) {
    std::cout << cell.atoms << ' ' << cell.layers << ' ' << cell.params << ' ' << cell.flops
              << ' ' << format_double(cell.acc) << ' ' << format_double(cell.auc_score) << "\n";
  }

  KeyValues manifest;
  append_common(manifest, "ablate", data, args.train.seed);
  append_model(manifest, args.model);
  append_train(manifest, args.train);
  std::ostringstream ag, lg;
  for (std::size_t i = 0; i < args.atoms_grid.size(); ++i) {
    if (i) ag << ',';
    ag << args.atoms_grid[i];
  }
  for (std::size_t i = 0; i < args.layers_grid.size(); ++i) {
    if (i) lg << ',';
    lg << args.layers_grid[i];
  }
  manifest.emplace_back("atoms_grid", ag.str());
  manifest.emplace_back("layers_grid", lg.str());
  manifest.emplace_back("results_csv", (fs::path(args.out) / "ablation.csv").string());
  manifest.emplace_back("wall_clock_sec", format_double(clock.seconds()));
  write_manifest(args.out, manifest);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradcheckArgs {
  ModelFlags model;
  int d_raw = 10;
  int instances = 4;
  int seeds = 5;
  double eps = 1e-5;
  double kink_margin = 1e-3;
  std::uint64_t seed = 0;
  std::string out = "scmil-gradcheck";
};

int cmd_gradcheck(const GradcheckArgs& args) {
  WallClock clock;
  if (!(args.eps > 0.0)) throw UsageError("--eps must be positive");
  const MilModelConfig mcfg = model_config(args.model, args.d_raw);
  const double threshold = mcfg.sc_enabled ? 1e-4 : 1e-6;

  double worst = 0.0;
  std::string worst_param = "-";
  std::vector<std::pair<std::string, double>> group_worst;
  int checked = 0;

  for (int s = 0; s < args.seeds; ++s) {
    // jitter the init so the check runs at a generic point, then redraw bags
    // until every pre-activation clears the kink margin
    MilModel model = init_mil_model(mcfg, stream_seed(args.seed, "gradcheck-init", s));
    Rng jitter(args.seed, "gradcheck-jitter", s);
    for (TensorRef& p : learnable_params(model)) {
      for (Index j = 0; j < p.size(); ++j) p.data[j] += 0.05 * jitter.normal();
    }

    GradCheckReport report;
    bool got_margin = false;
    for (std::uint64_t draw = 0; draw < 64; ++draw) {
      Bag bag;
      bag.id = "gradcheck";
      bag.label = static_cast<int>(draw % 2);
      Rng rng(args.seed, "gradcheck-bag", static_cast<std::uint64_t>(s) * 1000 + draw);
      for (int i = 0; i < args.instances; ++i) {
        Vector x(args.d_raw);
        for (Index j = 0; j < x.size(); ++j) x[j] = rng.uniform(-2.0, 2.0);
        bag.instances.push_back(std::move(x));
      }
      report = grad_check(model, bag, args.eps, args.kink_margin);
      if (report.margin_ok) {
        got_margin = true;
        break;
      }
    }
    if (!got_margin) {
      std::cerr << "error: could not draw a bag clear of threshold kinks\n";
      return kExitRuntime;
    }
    ++checked;
    if (report.max_rel_err > worst) {
      worst = report.max_rel_err;
      worst_param = report.worst_param;
    }
    for (const GradCheckGroup& g : report.groups) {
      auto it = std::find_if(group_worst.begin(), group_worst.end(),
                             [&](const auto& kv) { return kv.first == g.name; });
      if (it == group_worst.end()) {
        group_worst.emplace_back(g.name, g.max_rel_err);
      } else {
        it->second = std::max(it->second, g.max_rel_err);
      }
    }
  }

  std::cout << "gradient check: variant=" << args.model.variant << " sc=" << args.model.sc
            << " seeds=" << checked << " threshold=" << format_double(threshold) << "\n";
  for (const auto& [name, err] : group_worst) {
    std::cout << "  " << name << " max_rel_err=" << format_double(err)
              << (err < threshold ? "" : "  <-- FAIL") << "\n";
  }
  std::cout << "worst " << worst_param << " " << format_double(worst) << "\n";

  fs::create_directories(args.out);
  KeyValues manifest;
  manifest.emplace_back("command", "gradcheck");
  manifest.emplace_back("seed", std::to_string(args.seed));
  append_model(manifest, args.model);
  manifest.emplace_back("d_raw", std::to_string(args.d_raw));
  manifest.emplace_back("eps", format_double(args.eps));
  manifest.emplace_back("kink_margin", format_double(args.kink_margin));
  manifest.emplace_back("seeds", std::to_string(args.seeds));
  manifest.emplace_back("threshold", format_double(threshold));
  manifest.emplace_back("max_rel_err", format_double(worst));
  manifest.emplace_back("worst_param", worst_param);
  manifest.emplace_back("wall_clock_sec", format_double(clock.seconds()));
  write_manifest(args.out, manifest);

  if (worst >= threshold) {
    std::cerr << "gradient check FAILED: " << worst_param << " rel err " << format_double(worst)
              << " >= " << format_double(threshold) << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// solve
// ---------------------------------------------------------------------------

struct SolveArgs {
  std::string dict;  // "dct:p,m" or checkpoint path
  std::string input;
  double lambda = 0.1;
  double mu = 0.0;  // <= 0: use ||D||^2
  int max_iter = 10000;
  double tol = 1e-8;
  std::string out = "scmil-solve";
};

long parse_long_strict(const std::string& s, const char* what) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw UsageError(std::string(what) + ": bad integer '" + s + "'");
    return v;
  } catch (const std::invalid_argument&) {
    throw UsageError(std::string(what) + ": bad integer '" + s + "'");
  } catch (const std::out_of_range&) {
    throw UsageError(std::string(what) + ": integer out of range '" + s + "'");
  }
}

Matrix dict_from_spec(const std::string& spec) {
  if (spec.rfind("dct:", 0) == 0) {
    const std::string dims = spec.substr(4);
    const std::size_t comma = dims.find(',');
    if (comma == std::string::npos) {
      throw UsageError("--dict dct:p,m requires two comma-separated sizes");
    }
    const long p = parse_long_strict(dims.substr(0, comma), "--dict");
    const long m = parse_long_strict(dims.substr(comma + 1), "--dict");
    return overcomplete_dct(p, m);
  }
  if (spec.rfind("identity:", 0) == 0) {
    const long n = parse_long_strict(spec.substr(9), "--dict");
    if (n < 1) throw UsageError("--dict identity:n requires n >= 1");
    return Matrix::Identity(n, n);
  }
  if (!fs::exists(spec)) throw UsageError("--dict: no such file: " + spec);
  const Checkpoint ckpt = load_checkpoint(spec);
  const Matrix* dict = ckpt.find("sc.dict");
  if (dict == nullptr) {
    throw UsageError("checkpoint " + spec + " has no sc.dict tensor (model trained without SC?)");
  }
  return *dict;
}

Vector vector_from_file(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw UsageError("--input: cannot open " + path);
  std::vector<double> values;
  std::size_t lineno = 1;
  char c = 0;
  std::string current;
  const auto flush = [&]() {
    if (current.empty()) return;
    double v = 0.0;
    if (!parse_double(current, v)) {
      throw ParseError("solve: bad numeric token '" + current + "'", lineno);
    }
    values.push_back(v);
    current.clear();
  };
  while (file.get(c)) {
    if (c == ',' || c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      flush();
      if (c == '\n') ++lineno;
    } else {
      current.push_back(c);
    }
  }
  flush();
  if (values.empty()) throw ParseError("solve: input vector file is empty", lineno);
  Vector x(static_cast<Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) x[static_cast<Index>(i)] = values[i];
  return x;
}

int cmd_solve(const SolveArgs& args) {
  WallClock clock;
  const Matrix dict = dict_from_spec(args.dict);
  const Vector x = vector_from_file(args.input);
  if (x.size() != dict.rows()) {
    throw UsageError("input vector has length " + std::to_string(x.size()) +
                     " but the dictionary has " + std::to_string(dict.rows()) + " rows");
  }
  if (args.lambda < 0.0) throw UsageError("--lambda must be nonnegative");
  const double mu = args.mu > 0.0 ? args.mu : spectral_norm(dict) * spectral_norm(dict);

  const auto [alpha, iters] = ista_solve(dict, x, args.lambda, mu, args.max_iter, args.tol);
  const double objective = sc_objective(dict, x, alpha, args.lambda);
  const double residual = kkt_residual(dict, x, alpha, args.lambda);
  Index zeros = 0;
  for (Index j = 0; j < alpha.size(); ++j) {
    if (alpha[j] == 0.0) ++zeros;
  }
  const double sparsity = static_cast<double>(zeros) / static_cast<double>(alpha.size());

  std::ostringstream alpha_line;
  for (Index j = 0; j < alpha.size(); ++j) {
    if (j) alpha_line << ',';
    alpha_line << format_double(alpha[j]);
  }
  std::cout << "alpha=" << alpha_line.str() << "\n"
            << "objective=" << format_double(objective) << "\n"
            << "iterations=" << iters << "\n"
            << "sparsity=" << format_double(sparsity) << "\n"
            << "kkt_residual=" << format_double(residual) << "\n"
            << "mu=" << format_double(mu) << "\n";

  fs::create_directories(args.out);
  KeyValues manifest;
  manifest.emplace_back("command", "solve");
  manifest.emplace_back("dict", args.dict);
  manifest.emplace_back("input", args.input);
  manifest.emplace_back("lambda", format_double(args.lambda));
  manifest.emplace_back("mu", format_double(mu));
  manifest.emplace_back("max_iter", std::to_string(args.max_iter));
  manifest.emplace_back("tol", format_double(args.tol));
  manifest.emplace_back("objective", format_double(objective));
  manifest.emplace_back("iterations", std::to_string(iters));
  manifest.emplace_back("sparsity", format_double(sparsity));
  manifest.emplace_back("kkt_residual", format_double(residual));
  manifest.emplace_back("alpha", alpha_line.str());
  manifest.emplace_back("wall_clock_sec", format_double(clock.seconds()));
  write_manifest(args.out, manifest);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"scmil: unrolled sparse dictionary learning inside attention-based MIL"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key=value configuration file (flags win)");

  TrainArgs train_args;
  CLI::App* train_cmd = app.add_subcommand("train", "train one model");
  add_data_flags(train_cmd, train_args.data);
  add_model_flags(train_cmd, train_args.model);
  add_train_flags(train_cmd, train_args.train);
  train_cmd->add_option("--val-frac", train_args.val_frac,
                        "stratified validation holdout fraction");
  train_cmd->add_option("--out", train_args.out, "output directory");

  CvArgs cv_args;
  CLI::App* cv_cmd = app.add_subcommand("cv", "k-fold cross-validation with repetitions");
  add_data_flags(cv_cmd, cv_args.data);
  add_model_flags(cv_cmd, cv_args.model);
  add_train_flags(cv_cmd, cv_args.train);
  cv_cmd->add_option("--k", cv_args.k, "folds");
  cv_cmd->add_option("--reps", cv_args.reps, "repetitions");
  cv_cmd->add_option("--jobs", cv_args.jobs, "parallel fold workers");
  cv_cmd->add_option("--out", cv_args.out, "output directory");

  AblateArgs ablate_args;
  CLI::App* ablate_cmd = app.add_subcommand("ablate", "atoms x layers ablation grid");
  add_data_flags(ablate_cmd, ablate_args.data);
  add_model_flags(ablate_cmd, ablate_args.model);
  add_train_flags(ablate_cmd, ablate_args.train);
  ablate_cmd->add_option("--atoms-grid", ablate_args.atoms_grid, "atom counts")->delimiter(',');
  ablate_cmd->add_option("--layers-grid", ablate_args.layers_grid, "layer counts")
      ->delimiter(',');
  ablate_cmd->add_option("--jobs", ablate_args.jobs, "parallel cell workers");
  ablate_cmd->add_option("--out", ablate_args.out, "output directory");

  GradcheckArgs gradcheck_args;
  CLI::App* gradcheck_cmd =
      app.add_subcommand("gradcheck", "finite-difference check of the full backward pass");
  add_model_flags(gradcheck_cmd, gradcheck_args.model);
  gradcheck_cmd->add_option("--d-raw", gradcheck_args.d_raw, "raw feature dimension");
  gradcheck_cmd->add_option("--instances", gradcheck_args.instances, "instances per bag");
  gradcheck_cmd->add_option("--seeds", gradcheck_args.seeds, "number of random restarts");
  gradcheck_cmd->add_option("--eps", gradcheck_args.eps, "central difference step");
  gradcheck_cmd->add_option("--kink-margin", gradcheck_args.kink_margin,
                            "minimum distance to soft-threshold kinks");
  gradcheck_cmd->add_option("--seed", gradcheck_args.seed, "master seed");
  gradcheck_cmd->add_option("--out", gradcheck_args.out, "output directory");

  SolveArgs solve_args;
  CLI::App* solve_cmd = app.add_subcommand("solve", "standalone ISTA sparse-coding solve");
  solve_cmd->add_option("--dict", solve_args.dict, "'dct:p,m', 'identity:n' or a checkpoint path")
      ->required();
  solve_cmd->add_option("--input", solve_args.input, "vector file (comma/whitespace separated)")
      ->required();
  solve_cmd->add_option("--lambda", solve_args.lambda, "sparsity strength");
  solve_cmd->add_option("--mu", solve_args.mu, "stepsize parameter (default: ||D||^2)");
  solve_cmd->add_option("--max-iter", solve_args.max_iter, "iteration cap");
  solve_cmd->add_option("--tol", solve_args.tol, "max-norm stopping tolerance");
  solve_cmd->add_option("--out", solve_args.out, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (train_cmd->parsed()) {
      train_args.data.synth_given = train_cmd->count("--synth") > 0;
      return cmd_train(train_args);
    }
    if (cv_cmd->parsed()) {
      cv_args.data.synth_given = cv_cmd->count("--synth") > 0;
      return cmd_cv(cv_args);
    }
    if (ablate_cmd->parsed()) {
      ablate_args.data.synth_given = ablate_cmd->count("--synth") > 0;
      return cmd_ablate(ablate_args);
    }
    if (gradcheck_cmd->parsed()) return cmd_gradcheck(gradcheck_args);
    if (solve_cmd->parsed()) return cmd_solve(solve_args);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const TrainingError& e) {
    std::cerr << "training error: " << e.what() << "\n";
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
