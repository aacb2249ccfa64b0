#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "scmil/core.hpp"
#include "scmil/mil.hpp"

namespace scmil {

// ---------------------------------------------------------------------------
// Bag datasets: CSV ingestion, synthetic generation with a known ground-truth
// dictionary, stratified cross-validation splits, and evaluation metrics.
// ---------------------------------------------------------------------------

struct Dataset {
  std::vector<Bag> bags;
  Index feature_dim = 0;
  std::string name;
};

/// Bag CSV: header `bag_id,label,f0,...,f{d-1}`, one row per instance, all
/// rows of a bag carrying the same label. Bags keep first-appearance order.
Dataset load_bags_csv(const std::filesystem::path& path);

/// Canonical writer for the same format; load(write(d)) reproduces d exactly.
void write_bags_csv(const std::filesystem::path& path, const Dataset& dataset);

struct SynthConfig {
  int num_bags = 200;
  int bag_min = 20;
  int bag_max = 50;
  Index d_raw = 64;
  Index true_atoms = 32;
  Index positive_atoms = 4;     // first positive_atoms columns mark positives
  double positive_rate = 0.1;   // fraction of positive instances in a positive bag
  double noise_sigma = 0.05;
  Index code_sparsity = 3;      // s atoms per instance
  std::uint64_t seed = 0;
};

struct SynthData {
  Dataset dataset;
  Matrix true_dict;  // d_raw x true_atoms, unit-norm columns
  Index positive_atoms = 0;
};

/// Instances are s-sparse combinations of ground-truth atoms plus Gaussian
/// noise; positive instances additionally load one atom from the positive
/// set with a larger coefficient. Positive bags contain ceil(rate*n) positive
/// instances, negative bags none, so bag labels follow the MIL rule exactly.
SynthData synth_generate_full(const SynthConfig& cfg);
Dataset synth_generate(const SynthConfig& cfg);

struct FoldPlan {
  struct Fold {
    std::vector<std::string> train_ids;
    std::vector<std::string> test_ids;
  };
  int k = 0;
  int repetitions = 0;
  std::uint64_t seed = 0;
  std::vector<std::vector<Fold>> reps;  // reps[r][fold]
};

/// Stratified k-fold plan, repeated; every repetition is an exact partition
/// with per-fold class counts within one bag of proportional.
FoldPlan kfold_split(const Dataset& dataset, int k, int repetitions, std::uint64_t seed);

/// Materialize one fold of a plan into (train, test) bag lists.
std::pair<std::vector<Bag>, std::vector<Bag>> select_fold(const Dataset& dataset,
                                                          const FoldPlan::Fold& fold);

/// Fraction of predictions on the correct side of the threshold (scores at
/// the threshold count as positive predictions).
double accuracy(const std::vector<double>& preds, const std::vector<int>& labels,
                double threshold = 0.5);

/// Mann-Whitney AUC with ties counted 1/2; requires both classes present.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

/// Content hash over labels, ids and features; order-sensitive.
std::uint64_t dataset_fingerprint(const Dataset& dataset);

}  // namespace scmil
