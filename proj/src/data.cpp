#include "scmil/data.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace scmil {

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

void strip_cr(std::string& line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
}

}  // namespace

Dataset load_bags_csv(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("load_bags_csv: cannot open " + path.string());

  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(file, line)) {
    throw ParseError("load_bags_csv: empty file", 1);
  }
  ++lineno;
  strip_cr(line);
  const std::vector<std::string> header = split_csv(line);
  if (header.size() < 3 || header[0] != "bag_id" || header[1] != "label") {
    throw ParseError("load_bags_csv: header must be bag_id,label,f0,...", lineno);
  }
  const Index d = static_cast<Index>(header.size()) - 2;
  for (Index j = 0; j < d; ++j) {
    if (header[static_cast<std::size_t>(j) + 2] != "f" + std::to_string(j)) {
      throw ParseError("load_bags_csv: feature column " + std::to_string(j) +
                           " must be named f" + std::to_string(j),
                       lineno);
    }
  }

  Dataset dataset;
  dataset.feature_dim = d;
  dataset.name = path.stem().string();
  std::unordered_map<std::string, std::size_t> bag_index;

  bool any_row = false;
  while (std::getline(file, line)) {
    ++lineno;
    strip_cr(line);
    if (line.empty()) {
      throw ParseError("load_bags_csv: blank line", lineno);
    }
    const std::vector<std::string> tokens = split_csv(line);
    if (static_cast<Index>(tokens.size()) != d + 2) {
      throw ParseError("load_bags_csv: expected " + std::to_string(d + 2) + " fields, got " +
                           std::to_string(tokens.size()),
                       lineno);
    }
    const std::string& id = tokens[0];
    if (id.empty()) throw ParseError("load_bags_csv: empty bag_id", lineno);
    int label = -1;
    if (tokens[1] == "0") label = 0;
    else if (tokens[1] == "1") label = 1;
    else throw ParseError("load_bags_csv: label must be 0 or 1, got '" + tokens[1] + "'", lineno);

    Vector x(d);
    for (Index j = 0; j < d; ++j) {
      double v = 0.0;
      if (!parse_double(tokens[static_cast<std::size_t>(j) + 2], v)) {
        throw ParseError("load_bags_csv: bad numeric value '" +
                             tokens[static_cast<std::size_t>(j) + 2] + "'",
                         lineno);
      }
      x[j] = v;
    }

    const auto it = bag_index.find(id);
    if (it == bag_index.end()) {
      bag_index.emplace(id, dataset.bags.size());
      Bag bag;
      bag.id = id;
      bag.label = label;
      bag.instances.push_back(std::move(x));
      dataset.bags.push_back(std::move(bag));
    } else {
      Bag& bag = dataset.bags[it->second];
      if (bag.label != label) {
        throw ParseError("load_bags_csv: bag '" + id + "' has inconsistent labels", lineno);
      }
      bag.instances.push_back(std::move(x));
    }
    any_row = true;
  }
  if (!any_row) throw ParseError("load_bags_csv: no instance rows", lineno);
  return dataset;
}

void write_bags_csv(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream file(path, std::ios::binary);
  if (!file) throw std::runtime_error("write_bags_csv: cannot open " + path.string());
  file << "bag_id,label";
  for (Index j = 0; j < dataset.feature_dim; ++j) file << ",f" << j;
  file << '\n';
  for (const Bag& bag : dataset.bags) {
    if (bag.id.find_first_of(",\n\r") != std::string::npos) {
      throw std::invalid_argument("write_bags_csv: bag id '" + bag.id + "' contains a delimiter");
    }
    for (const Vector& x : bag.instances) {
      file << bag.id << ',' << bag.label;
      for (Index j = 0; j < x.size(); ++j) {
        file << ',' << format_double(x[j]);
      }
      file << '\n';
    }
  }
  if (!file) throw std::runtime_error("write_bags_csv: write failed for " + path.string());
}

SynthData synth_generate_full(const SynthConfig& cfg) {
  if (cfg.num_bags < 2) throw std::invalid_argument("synth_generate: need at least 2 bags");
  if (cfg.bag_min < 1 || cfg.bag_max < cfg.bag_min) {
    throw std::invalid_argument("synth_generate: invalid bag size range");
  }
  if (cfg.d_raw < 1 || cfg.true_atoms < 2) {
    throw std::invalid_argument("synth_generate: invalid dictionary size");
  }
  if (cfg.positive_atoms < 1 || cfg.positive_atoms >= cfg.true_atoms) {
    throw std::invalid_argument(
        "synth_generate: positive_atoms must be in [1, true_atoms)");
  }
  if (cfg.code_sparsity < 1 || cfg.code_sparsity >= cfg.true_atoms ||
      cfg.code_sparsity > cfg.true_atoms - cfg.positive_atoms) {
    throw std::invalid_argument(
        "synth_generate: code_sparsity must fit within the non-positive atom set");
  }
  if (!(cfg.positive_rate > 0.0) || cfg.positive_rate > 1.0) {
    throw std::invalid_argument("synth_generate: positive_rate must be in (0, 1]");
  }
  if (cfg.noise_sigma < 0.0) {
    throw std::invalid_argument("synth_generate: noise_sigma must be nonnegative");
  }

  SynthData out;
  out.positive_atoms = cfg.positive_atoms;

  Rng dict_rng(cfg.seed, "synth-dict");
  out.true_dict.resize(cfg.d_raw, cfg.true_atoms);
  for (Index k = 0; k < cfg.true_atoms; ++k) {
    for (Index r = 0; r < cfg.d_raw; ++r) out.true_dict(r, k) = dict_rng.normal();
    out.true_dict.col(k) /= out.true_dict.col(k).norm();
  }

  Rng rng(cfg.seed, "synth-bags");
  // weak signed background loadings vs. a dominant positive-signed loading on
  // a positive atom, so a nearest-atom detector can certify the labels
  const auto background_coef = [&]() {
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    return sign * rng.uniform(0.5, 1.5);
  };
  const auto positive_coef = [&]() { return rng.uniform(2.5, 3.5); };

  std::vector<Index> background_atoms;
  for (Index k = cfg.positive_atoms; k < cfg.true_atoms; ++k) background_atoms.push_back(k);

  const auto make_instance = [&](bool positive) {
    Vector code = Vector::Zero(cfg.true_atoms);
    std::vector<Index> pool = background_atoms;
    rng.shuffle(pool);
    const Index n_background = positive ? cfg.code_sparsity - 1 : cfg.code_sparsity;
    for (Index j = 0; j < n_background; ++j) code[pool[static_cast<std::size_t>(j)]] = background_coef();
    if (positive) {
      const Index atom = static_cast<Index>(rng.below(static_cast<std::uint64_t>(cfg.positive_atoms)));
      code[atom] = positive_coef();
    }
    Vector x = out.true_dict * code;
    if (cfg.noise_sigma > 0.0) {
      for (Index r = 0; r < x.size(); ++r) x[r] += cfg.noise_sigma * rng.normal();
    }
    return x;
  };

  out.dataset.feature_dim = cfg.d_raw;
  out.dataset.name = "synth";
  out.dataset.bags.reserve(static_cast<std::size_t>(cfg.num_bags));
  int digits = 1;
  for (int v = cfg.num_bags - 1; v >= 10; v /= 10) ++digits;
  for (int b = 0; b < cfg.num_bags; ++b) {
    Bag bag;
    std::string num = std::to_string(b);
    bag.id = "synth" + std::string(static_cast<std::size_t>(digits) - num.size(), '0') + num;
    bag.label = (b % 2 == 0) ? 1 : 0;
    const int n = cfg.bag_min +
                  static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.bag_max - cfg.bag_min + 1)));
    std::vector<bool> positive(static_cast<std::size_t>(n), false);
    if (bag.label == 1) {
      const int n_pos = static_cast<int>(
          std::ceil(cfg.positive_rate * static_cast<double>(n)));
      std::vector<int> slots(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) slots[static_cast<std::size_t>(i)] = i;
      rng.shuffle(slots);
      for (int i = 0; i < n_pos; ++i) positive[static_cast<std::size_t>(slots[static_cast<std::size_t>(i)])] = true;
    }
    bag.instances.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      bag.instances.push_back(make_instance(positive[static_cast<std::size_t>(i)]));
    }
    out.dataset.bags.push_back(std::move(bag));
  }
  return out;
}

Dataset synth_generate(const SynthConfig& cfg) { return synth_generate_full(cfg).dataset; }

FoldPlan kfold_split(const Dataset& dataset, int k, int repetitions, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("kfold_split: k must be >= 2");
  if (repetitions < 1) throw std::invalid_argument("kfold_split: repetitions must be >= 1");

  std::vector<std::size_t> pos, neg;
  std::unordered_set<std::string> seen;
  for (std::size_t i = 0; i < dataset.bags.size(); ++i) {
    if (!seen.insert(dataset.bags[i].id).second) {
      throw std::invalid_argument("kfold_split: duplicate bag id '" + dataset.bags[i].id + "'");
    }
    (dataset.bags[i].label == 1 ? pos : neg).push_back(i);
  }
  for (const auto* cls : {&pos, &neg}) {
    if (static_cast<int>(cls->size()) < k) {
      throw std::invalid_argument("kfold_split: a class has only " +
                                  std::to_string(cls->size()) + " bags, fewer than k=" +
                                  std::to_string(k) + "; use a smaller k");
    }
  }

  FoldPlan plan;
  plan.k = k;
  plan.repetitions = repetitions;
  plan.seed = seed;
  plan.reps.resize(static_cast<std::size_t>(repetitions));
  for (int r = 0; r < repetitions; ++r) {
    Rng rng(seed, "kfold", static_cast<std::uint64_t>(r));
    std::vector<std::size_t> p = pos, n = neg;
    rng.shuffle(p);
    rng.shuffle(n);
    std::vector<std::vector<std::size_t>> fold_members(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < p.size(); ++i) fold_members[i % static_cast<std::size_t>(k)].push_back(p[i]);
    for (std::size_t i = 0; i < n.size(); ++i) fold_members[i % static_cast<std::size_t>(k)].push_back(n[i]);

    std::vector<FoldPlan::Fold>& folds = plan.reps[static_cast<std::size_t>(r)];
    folds.resize(static_cast<std::size_t>(k));
    for (int f = 0; f < k; ++f) {
      FoldPlan::Fold& fold = folds[static_cast<std::size_t>(f)];
      for (int g = 0; g < k; ++g) {
        for (std::size_t idx : fold_members[static_cast<std::size_t>(g)]) {
          (g == f ? fold.test_ids : fold.train_ids).push_back(dataset.bags[idx].id);
        }
      }
    }
  }
  return plan;
}

std::pair<std::vector<Bag>, std::vector<Bag>> select_fold(const Dataset& dataset,
                                                          const FoldPlan::Fold& fold) {
  std::unordered_map<std::string, const Bag*> by_id;
  for (const Bag& bag : dataset.bags) by_id.emplace(bag.id, &bag);
  const auto pick = [&](const std::vector<std::string>& ids) {
    std::vector<Bag> out;
    out.reserve(ids.size());
    for (const std::string& id : ids) {
      const auto it = by_id.find(id);
      if (it == by_id.end()) {
        throw std::invalid_argument("select_fold: unknown bag id '" + id + "'");
      }
      out.push_back(*it->second);
    }
    return out;
  };
  return {pick(fold.train_ids), pick(fold.test_ids)};
}

double accuracy(const std::vector<double>& preds, const std::vector<int>& labels,
                double threshold) {
  if (preds.empty() || preds.size() != labels.size()) {
    throw std::invalid_argument("accuracy: empty or mismatched inputs");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int pred = preds[i] >= threshold ? 1 : 0;
    if (pred == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.empty() || scores.size() != labels.size()) {
    throw std::invalid_argument("auc: empty or mismatched inputs");
  }
  // Mann-Whitney over all positive/negative pairs; quadratic but the bag
  // counts here are small
  double wins = 0.0;
  std::size_t n_pos = 0, n_neg = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] == 1) {
      ++n_pos;
      for (std::size_t j = 0; j < scores.size(); ++j) {
        if (labels[j] != 1) {
          if (scores[i] > scores[j]) wins += 1.0;
          else if (scores[i] == scores[j]) wins += 0.5;
        }
      }
    } else {
      ++n_neg;
    }
  }
  if (n_pos == 0 || n_neg == 0) {
    throw MetricError("auc: undefined with a single class present");
  }
  return wins / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

std::uint64_t dataset_fingerprint(const Dataset& dataset) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  const auto mix_bytes = [&h](const void* data, std::size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ull;
    }
  };
  const auto mix_u64 = [&](std::uint64_t v) { mix_bytes(&v, sizeof v); };

  mix_u64(static_cast<std::uint64_t>(dataset.feature_dim));
  mix_u64(dataset.bags.size());
  for (const Bag& bag : dataset.bags) {
    mix_bytes(bag.id.data(), bag.id.size());
    mix_u64(static_cast<std::uint64_t>(bag.label));
    mix_u64(bag.instances.size());
    for (const Vector& x : bag.instances) {
      for (Index j = 0; j < x.size(); ++j) {
        std::uint64_t bits;
        const double v = x[j];
        std::memcpy(&bits, &v, sizeof bits);
        mix_u64(bits);
      }
    }
  }
  return h;
}

}  // namespace scmil
