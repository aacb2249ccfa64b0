#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "oracles.hpp"
#include "scmil/data.hpp"

using namespace scmil;

namespace {

std::filesystem::path write_temp(const std::string& name, const std::string& content) {
  const auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream f(path, std::ios::binary);
  f << content;
  return path;
}

}  // namespace

TEST_CASE("load_bags_csv groups rows into bags") {
  const auto path = write_temp("scmil_ok.csv",
                               "bag_id,label,f0,f1\n"
                               "m1,1,0.5,-1.25\n"
                               "m1,1,2,3\n");
  const Dataset d = load_bags_csv(path);
  REQUIRE(d.bags.size() == 1);
  CHECK(d.feature_dim == 2);
  CHECK(d.bags[0].id == "m1");
  CHECK(d.bags[0].label == 1);
  REQUIRE(d.bags[0].instances.size() == 2);
  CHECK(d.bags[0].instances[0][1] == -1.25);
  CHECK(d.bags[0].instances[1][0] == 2.0);
  std::filesystem::remove(path);
}

TEST_CASE("load_bags_csv preserves first-appearance bag order") {
  const auto path = write_temp("scmil_order.csv",
                               "bag_id,label,f0\n"
                               "z,1,1\n"
                               "a,0,2\n"
                               "z,1,3\n"
                               "k,1,4\n");
  const Dataset d = load_bags_csv(path);
  REQUIRE(d.bags.size() == 3);
  CHECK(d.bags[0].id == "z");
  CHECK(d.bags[1].id == "a");
  CHECK(d.bags[2].id == "k");
  CHECK(d.bags[0].instances.size() == 2);
  std::filesystem::remove(path);
}

TEST_CASE("load_bags_csv rejects inconsistent bag labels") {
  const auto path = write_temp("scmil_inconsistent.csv",
                               "bag_id,label,f0\n"
                               "m1,0,1\n"
                               "m1,1,2\n");
  try {
    load_bags_csv(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("m1") != std::string::npos);
    CHECK(e.line() == 3);
  }
  std::filesystem::remove(path);
}

TEST_CASE("load_bags_csv rejects ragged rows with the line number") {
  const auto path = write_temp("scmil_ragged.csv",
                               "bag_id,label,f0,f1\n"
                               "m1,1,1,2\n"
                               "m1,1,1\n");
  try {
    load_bags_csv(path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  std::filesystem::remove(path);
}

TEST_CASE("load_bags_csv rejects empty and header-only files") {
  const auto empty = write_temp("scmil_empty.csv", "");
  CHECK_THROWS_AS(load_bags_csv(empty), ParseError);
  std::filesystem::remove(empty);
  const auto header_only = write_temp("scmil_header.csv", "bag_id,label,f0\n");
  CHECK_THROWS_AS(load_bags_csv(header_only), ParseError);
  std::filesystem::remove(header_only);
}

TEST_CASE("load_bags_csv rejects bad headers, labels and values") {
  for (const char* content : {
           "id,label,f0\nm,1,1\n",          // wrong first column
           "bag_id,label,g0\nm,1,1\n",      // wrong feature name
           "bag_id,label,f0\nm,2,1\n",      // label out of {0,1}
           "bag_id,label,f0\nm,1,abc\n",    // unparsable value
           "bag_id,label,f0\nm,1,1\n\nm,1,2\n",  // interior blank line
       }) {
    const auto path = write_temp("scmil_bad.csv", content);
    CHECK_THROWS_AS(load_bags_csv(path), ParseError);
    std::filesystem::remove(path);
  }
}

TEST_CASE("bag CSV write/load round-trips exactly") {
  const Dataset d = synth_generate([] {
    SynthConfig cfg;
    cfg.num_bags = 8;
    cfg.bag_min = 2;
    cfg.bag_max = 5;
    cfg.d_raw = 7;
    cfg.true_atoms = 6;
    cfg.positive_atoms = 2;
    cfg.code_sparsity = 2;
    cfg.seed = 3;
    return cfg;
  }());
  const auto path = std::filesystem::temp_directory_path() / "scmil_roundtrip.csv";
  write_bags_csv(path, d);
  const Dataset back = load_bags_csv(path);
  REQUIRE(back.bags.size() == d.bags.size());
  CHECK(back.feature_dim == d.feature_dim);
  for (std::size_t b = 0; b < d.bags.size(); ++b) {
    CHECK(back.bags[b].id == d.bags[b].id);
    CHECK(back.bags[b].label == d.bags[b].label);
    REQUIRE(back.bags[b].instances.size() == d.bags[b].instances.size());
    for (std::size_t i = 0; i < d.bags[b].instances.size(); ++i) {
      CHECK((back.bags[b].instances[i] - d.bags[b].instances[i]).lpNorm<Eigen::Infinity>() ==
            0.0);
    }
  }
  CHECK(dataset_fingerprint(back) == dataset_fingerprint(d));
  std::filesystem::remove(path);
}

TEST_CASE("synth_generate honors the full positive rate") {
  SynthConfig cfg;
  cfg.num_bags = 10;
  cfg.bag_min = 3;
  cfg.bag_max = 6;
  cfg.positive_rate = 1.0;
  cfg.noise_sigma = 0.0;
  cfg.seed = 5;
  const SynthData data = synth_generate_full(cfg);
  for (const Bag& bag : data.dataset.bags) {
    if (bag.label == 0) continue;
    for (const Vector& x : bag.instances) {
      // every instance must load a positive atom: max correlation over the
      // positive set beats the strongest background coefficient bound
      double best_pos = 0.0;
      for (Index k = 0; k < data.positive_atoms; ++k) {
        best_pos = std::max(best_pos, std::abs(data.true_dict.col(k).dot(x)));
      }
      CHECK(best_pos > 1.0);
    }
  }
}

TEST_CASE("synth_generate with zero noise and s=1 emits scaled atoms") {
  SynthConfig cfg;
  cfg.num_bags = 6;
  cfg.bag_min = 2;
  cfg.bag_max = 4;
  cfg.noise_sigma = 0.0;
  cfg.code_sparsity = 1;
  cfg.seed = 7;
  const SynthData data = synth_generate_full(cfg);
  for (const Bag& bag : data.dataset.bags) {
    for (const Vector& x : bag.instances) {
      // residual after projecting onto the best atom must vanish
      double best = 0.0;
      Index best_k = 0;
      for (Index k = 0; k < data.true_dict.cols(); ++k) {
        const double c = std::abs(data.true_dict.col(k).dot(x));
        if (c > best) {
          best = c;
          best_k = k;
        }
      }
      const Vector residual = x - data.true_dict.col(best_k).dot(x) * data.true_dict.col(best_k);
      CHECK(residual.lpNorm<Eigen::Infinity>() < 1e-12);
    }
  }
}

TEST_CASE("synth_generate default config is recoverable by a nearest-atom detector") {
  const SynthConfig cfg;  // the documented defaults, seed 0
  const SynthData data = synth_generate_full(cfg);
  REQUIRE(data.dataset.bags.size() == 200);
  int checked = 0;
  for (const Bag& bag : data.dataset.bags) {
    bool bag_flagged = false;
    for (const Vector& x : bag.instances) {
      Index best_k = 0;
      double best = 0.0;
      for (Index k = 0; k < data.true_dict.cols(); ++k) {
        const double c = std::abs(data.true_dict.col(k).dot(x));
        if (c > best) {
          best = c;
          best_k = k;
        }
      }
      if (best_k < data.positive_atoms) {
        bag_flagged = true;
        break;
      }
    }
    CHECK(bag_flagged == (bag.label == 1));
    ++checked;
  }
  CHECK(checked == 200);
}

TEST_CASE("synth_generate rejects infeasible configurations") {
  SynthConfig cfg;
  cfg.positive_atoms = cfg.true_atoms;  // no background atoms left
  CHECK_THROWS_AS(synth_generate(cfg), std::invalid_argument);
  cfg = SynthConfig{};
  cfg.code_sparsity = cfg.true_atoms;
  CHECK_THROWS_AS(synth_generate(cfg), std::invalid_argument);
  cfg = SynthConfig{};
  cfg.positive_rate = 0.0;
  CHECK_THROWS_AS(synth_generate(cfg), std::invalid_argument);
  cfg = SynthConfig{};
  cfg.bag_max = cfg.bag_min - 1;
  CHECK_THROWS_AS(synth_generate(cfg), std::invalid_argument);
}

TEST_CASE("kfold_split on four bags gives one of each class per fold") {
  Dataset d;
  d.feature_dim = 1;
  for (int i = 0; i < 4; ++i) {
    Bag bag;
    bag.id = "b" + std::to_string(i);
    bag.label = i % 2;
    bag.instances.push_back(Vector::Zero(1));
    d.bags.push_back(bag);
  }
  const FoldPlan plan = kfold_split(d, 2, 1, 0);
  for (const auto& fold : plan.reps[0]) {
    CHECK(fold.test_ids.size() == 2);
    CHECK(fold.train_ids.size() == 2);
    int pos = 0;
    for (const auto& id : fold.test_ids) {
      const int idx = id[1] - '0';
      pos += idx % 2;
    }
    CHECK(pos == 1);
  }
}

TEST_CASE("kfold_split folds partition the dataset") {
  const Dataset d = synth_generate([] {
    SynthConfig cfg;
    cfg.num_bags = 37;
    cfg.bag_min = 1;
    cfg.bag_max = 3;
    cfg.seed = 11;
    return cfg;
  }());
  const FoldPlan plan = kfold_split(d, 5, 3, 13);
  for (const auto& rep : plan.reps) {
    std::set<std::string> seen;
    for (const auto& fold : rep) {
      for (const auto& id : fold.test_ids) {
        CHECK(seen.insert(id).second);  // disjoint
      }
      // train = complement of test
      CHECK(fold.train_ids.size() + fold.test_ids.size() == d.bags.size());
    }
    CHECK(seen.size() == d.bags.size());  // exhaustive

    // stratification: per-fold positive counts within 1 of each other
    std::vector<int> pos_counts;
    for (const auto& fold : rep) {
      int pos = 0;
      for (const auto& id : fold.test_ids) {
        for (const Bag& bag : d.bags) {
          if (bag.id == id) pos += bag.label;
        }
      }
      pos_counts.push_back(pos);
    }
    const auto [lo, hi] = std::minmax_element(pos_counts.begin(), pos_counts.end());
    CHECK(*hi - *lo <= 1);
  }
}

TEST_CASE("kfold_split is deterministic and validates inputs") {
  const Dataset d = synth_generate([] {
    SynthConfig cfg;
    cfg.num_bags = 20;
    cfg.bag_min = 1;
    cfg.bag_max = 2;
    cfg.seed = 17;
    return cfg;
  }());
  const FoldPlan a = kfold_split(d, 4, 2, 23);
  const FoldPlan b = kfold_split(d, 4, 2, 23);
  for (int r = 0; r < 2; ++r) {
    for (int f = 0; f < 4; ++f) {
      CHECK(a.reps[r][f].test_ids == b.reps[r][f].test_ids);
      CHECK(a.reps[r][f].train_ids == b.reps[r][f].train_ids);
    }
  }
  try {
    kfold_split(d, 11, 1, 0);  // each class has 10 bags
    FAIL("expected invalid_argument");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("smaller k") != std::string::npos);
  }
  CHECK_THROWS_AS(kfold_split(d, 1, 1, 0), std::invalid_argument);
}

TEST_CASE("select_fold materializes train and test bags") {
  const Dataset d = synth_generate([] {
    SynthConfig cfg;
    cfg.num_bags = 10;
    cfg.bag_min = 1;
    cfg.bag_max = 2;
    cfg.seed = 29;
    return cfg;
  }());
  const FoldPlan plan = kfold_split(d, 2, 1, 31);
  const auto [train, test] = select_fold(d, plan.reps[0][0]);
  CHECK(train.size() + test.size() == d.bags.size());
  CHECK(!train.empty());
  CHECK(!test.empty());
}

TEST_CASE("accuracy counts threshold-side agreement") {
  CHECK(accuracy({0.9, 0.2, 0.7, 0.1}, {1, 0, 1, 0}) == 1.0);
  CHECK(accuracy({0.9, 0.2}, {0, 1}) == 0.0);
  CHECK(accuracy({0.5}, {1}) == 1.0);  // scores at the threshold predict positive
  CHECK(accuracy({0.4, 0.6, 0.6, 0.4}, {1, 1, 0, 0}) == 0.5);
  CHECK_THROWS_AS(accuracy({}, {}), std::invalid_argument);
  CHECK_THROWS_AS(accuracy({0.5}, {1, 0}), std::invalid_argument);
}

TEST_CASE("auc matches pair enumeration") {
  CHECK(auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}) == 1.0);
  CHECK(auc({0.5, 0.5, 0.5}, {1, 0, 1}) == 0.5);
  CHECK(auc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK_THROWS_AS(auc({0.5, 0.6}, {1, 1}), MetricError);
  CHECK_THROWS_AS(auc({}, {}), std::invalid_argument);
}

TEST_CASE("auc is invariant under strictly monotone transforms") {
  Rng rng(37);
  std::vector<double> scores;
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) {
    scores.push_back(rng.uniform(-3.0, 3.0));
    labels.push_back(static_cast<int>(rng.below(2)));
  }
  labels[0] = 1;
  labels[1] = 0;
  const double base = auc(scores, labels);
  std::vector<double> squashed, shifted;
  for (double s : scores) {
    squashed.push_back(sigmoid(s));
    shifted.push_back(3.0 * s + 11.0);
  }
  CHECK(auc(squashed, labels) == doctest::Approx(base).epsilon(1e-15));
  CHECK(auc(shifted, labels) == doctest::Approx(base).epsilon(1e-15));
}

TEST_CASE("dataset_fingerprint reflects content and order") {
  Dataset a = synth_generate([] {
    SynthConfig cfg;
    cfg.num_bags = 4;
    cfg.bag_min = 1;
    cfg.bag_max = 2;
    cfg.seed = 41;
    return cfg;
  }());
  Dataset b = a;
  CHECK(dataset_fingerprint(a) == dataset_fingerprint(b));
  std::swap(b.bags[0], b.bags[1]);
  CHECK(dataset_fingerprint(a) != dataset_fingerprint(b));
  Dataset c = a;
  c.bags[0].instances[0][0] += 1e-12;
  CHECK(dataset_fingerprint(a) != dataset_fingerprint(c));
}
