// Integration checks of the command-line surface: spawns the real binary and
// inspects exit codes, stdout and the emitted manifests/CSVs.
//
//   test_cli <path-to-scmil-cli>

#include <Eigen/LU>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "scmil/core.hpp"

namespace fs = std::filesystem;
using namespace scmil;

namespace {

int g_failures = 0;
std::string g_cli;
fs::path g_work;

void check(bool ok, const std::string& what) {
  if (!ok) {
    std::cerr << "FAILED: " << what << "\n";
    ++g_failures;
  }
}

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = g_cli + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return status < 0 ? -1 : WEXITSTATUS(status);
}

std::map<std::string, std::string> read_manifest(const fs::path& path) {
  std::map<std::string, std::string> out;
  std::ifstream f(path);
  std::string line;
  while (std::getline(f, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

Vector parse_alpha(const std::string& csv) {
  std::vector<double> values;
  std::size_t start = 0;
  while (start <= csv.size()) {
    const auto comma = csv.find(',', start);
    const std::string tok =
        csv.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    double v = 0.0;
    if (!parse_double(tok, v)) throw std::runtime_error("bad alpha token: " + tok);
    values.push_back(v);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  Vector out(static_cast<Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) out[static_cast<Index>(i)] = values[i];
  return out;
}

void write_vector(const fs::path& path, const Vector& x) {
  std::ofstream f(path, std::ios::binary);
  for (Index j = 0; j < x.size(); ++j) {
    if (j) f << ',';
    f << format_double(x[j]);
  }
  f << '\n';
}

void solve_closed_form() {
  Vector x(2);
  x << 2.0, -0.5;
  write_vector(g_work / "x2.csv", x);
  const fs::path out = g_work / "solve_id";
  const int rc = run("solve --dict identity:2 --input " + (g_work / "x2.csv").string() +
                         " --lambda 1 --out " + out.string(),
                     g_work / "solve_id.log");
  check(rc == 0, "solve identity exit code");
  const auto manifest = read_manifest(out / "manifest.txt");
  check(manifest.at("alpha") == "1,0", "solve identity alpha = [1, 0], got " +
                                           manifest.at("alpha"));
}

void solve_least_squares() {
  // lambda = 0 on a square nonsingular dictionary converges to D^{-1} x
  const Matrix d = overcomplete_dct(6, 6);
  Rng rng(5);
  Vector x(6);
  for (Index j = 0; j < 6; ++j) x[j] = rng.uniform(-1.0, 1.0);
  write_vector(g_work / "x6.csv", x);
  const fs::path out = g_work / "solve_ls";
  const int rc = run("solve --dict dct:6,6 --input " + (g_work / "x6.csv").string() +
                         " --lambda 0 --tol 1e-12 --max-iter 100000 --out " + out.string(),
                     g_work / "solve_ls.log");
  check(rc == 0, "solve lambda=0 exit code");
  const auto manifest = read_manifest(out / "manifest.txt");
  const Vector alpha = parse_alpha(manifest.at("alpha"));
  const Vector direct = Eigen::PartialPivLU<Matrix>(d).solve(x);
  check((alpha - direct).lpNorm<Eigen::Infinity>() < 1e-6,
        "solve lambda=0 matches the dense solve");
}

void solve_kkt() {
  Rng rng(7);
  Vector x(8);
  for (Index j = 0; j < 8; ++j) x[j] = rng.uniform(-1.0, 1.0);
  write_vector(g_work / "x8.csv", x);
  const fs::path out = g_work / "solve_kkt";
  const int rc = run("solve --dict dct:8,16 --input " + (g_work / "x8.csv").string() +
                         " --lambda 0.1 --tol 1e-12 --max-iter 200000 --out " + out.string(),
                     g_work / "solve_kkt.log");
  check(rc == 0, "solve kkt exit code");
  const auto manifest = read_manifest(out / "manifest.txt");
  double residual = 1.0;
  check(parse_double(manifest.at("kkt_residual"), residual) && residual < 1e-6,
        "solve reports KKT residual below 1e-6, got " + manifest.at("kkt_residual"));
  double sparsity = -1.0;
  check(parse_double(manifest.at("sparsity"), sparsity) && sparsity > 0.0,
        "solve reports a nonzero sparsity fraction");
}

void usage_errors() {
  check(run("train --synth --atoms 16 --embed 32 --out " + (g_work / "u1").string(),
            g_work / "u1.log") == 2,
        "under-complete dictionary is a usage error");
  check(run("train --data missing.csv --synth --out " + (g_work / "u2").string(),
            g_work / "u2.log") == 2,
        "--data with --synth is a usage error");
  check(run("solve --dict identity:2", g_work / "u3.log") == 2,
        "missing required --input is a usage error");
  check(run("nonsense", g_work / "u4.log") == 2, "unknown subcommand is a usage error");
}

void runtime_failures() {
  // a huge finite-difference step wrecks the comparison: exit 1, not 2
  check(run("gradcheck --variant abmil --sc off --embed 4 --d-raw 6 --att-hidden 4 "
            "--seeds 1 --eps 0.5 --out " +
                (g_work / "r1").string(),
            g_work / "r1.log") == 1,
        "gradcheck threshold breach is a runtime failure");
  // k exceeding the class counts: infeasible stratification
  check(run("cv --synth --synth-bags 12 --synth-bag-min 2 --synth-bag-max 3 --k 50 "
            "--reps 1 --epochs 1 --embed 8 --atoms 16 --att-hidden 4 --layers 1 --out " +
                (g_work / "r2").string(),
            g_work / "r2.log") == 1,
        "infeasible stratification is a runtime failure");
}

void cv_small() {
  const fs::path out = g_work / "cv";
  const int rc = run(
      "cv --synth --synth-bags 12 --synth-bag-min 2 --synth-bag-max 4 --variant abmil "
      "--sc on --atoms 16 --embed 8 --att-hidden 8 --layers 1 --epochs 2 --lr 1e-3 "
      "--k 2 --reps 1 --seed 5 --out " +
          out.string(),
      g_work / "cv.log");
  check(rc == 0, "cv exit code");

  std::ifstream csv(out / "results.csv");
  std::string line;
  std::getline(csv, line);
  check(line == "rep,fold,accuracy,auc,n_train,n_test", "cv results header");
  double acc_sum = 0.0;
  int rows = 0;
  while (std::getline(csv, line)) {
    std::stringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    std::getline(ss, field, ',');
    std::getline(ss, field, ',');
    double acc = 0.0;
    check(parse_double(field, acc), "cv accuracy field parses");
    acc_sum += acc;
    ++rows;
  }
  check(rows == 2, "cv emits one row per fold");
  const auto manifest = read_manifest(out / "manifest.txt");
  double mean = -1.0;
  check(parse_double(manifest.at("mean_accuracy"), mean), "cv manifest mean parses");
  check(std::abs(mean - acc_sum / 2.0) < 1e-12, "cv summary mean equals the fold-row mean");
  check(fs::exists(out / "summary.txt"), "cv writes the human-readable summary");
}

void ablate_single_cell() {
  const fs::path out = g_work / "ab";
  const int rc = run(
      "ablate --synth --synth-bags 12 --synth-bag-min 2 --synth-bag-max 4 --variant abmil "
      "--sc on --atoms-grid 16 --layers-grid 1 --embed 8 --att-hidden 8 --epochs 1 "
      "--lr 1e-3 --seed 5 --out " +
          out.string(),
      g_work / "ab.log");
  check(rc == 0, "ablate exit code");
  std::ifstream csv(out / "ablation.csv");
  std::string line;
  int lines = 0;
  while (std::getline(csv, line)) ++lines;
  check(lines == 2, "1x1 grid produces a single-row table (plus header)");
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << "usage: test_cli <path-to-scmil-cli>\n";
    return 2;
  }
  g_cli = argv[1];
  g_work = fs::current_path() / "cli_test_artifacts";
  fs::remove_all(g_work);
  fs::create_directories(g_work);

  solve_closed_form();
  solve_least_squares();
  solve_kkt();
  usage_errors();
  runtime_failures();
  cv_small();
  ablate_single_cell();

  if (g_failures == 0) {
    std::cout << "test_cli: all checks passed\n";
    return 0;
  }
  std::cout << "test_cli: " << g_failures << " check(s) failed\n";
  return 1;
}
