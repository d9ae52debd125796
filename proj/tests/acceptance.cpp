// Acceptance gate: one PASS/FAIL line per criterion, exit status 1 when any fails.

#include <CLI11.hpp>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vflbd/experiment.hpp"
#include "vflbd/gradcheck.hpp"
#include "vflbd/graph.hpp"
#include "vflbd/inference.hpp"
#include "vflbd/metrics.hpp"

using namespace vflbd;
namespace fs = std::filesystem;

namespace {

// Tolerances.
constexpr double kA1MinCda = 0.90;
constexpr std::size_t kA1MaxEpochs = 5;
constexpr double kA1MaxSeconds = 600;
constexpr double kA2MinAsr = 0.80;
constexpr double kA2MaxCdaGap = 0.03;
constexpr double kA2MaxSeconds = 1200;
constexpr double kA3MinPrecision = 0.75;
constexpr double kA4MaxDrop = 0.15;
constexpr double kA5Band = 0.05;
constexpr double kA6EigenTol = 1e-9;
constexpr std::size_t kA7Trials = 10;
constexpr double kA8KlRel = 0.01;
constexpr double kA8GradTol = 1e-4;
constexpr double kA8EigenTol = 1e-9;
constexpr double kA9MinGap = 0.20;
constexpr double kA9MaxCdaGap = 0.03;
const std::vector<std::uint64_t> kSeeds{1, 2, 3};
const std::vector<double> kConnectivity{0, 2, 4, 6, 8, 10};

fs::path g_out;
std::map<std::string, RunSummary> g_cache;

const RunSummary& run(const std::string& name, std::uint64_t seed, double gamma = -1) {
  std::ostringstream key;
  key << name << "_seed" << seed;
  if (gamma >= 0) key << "_gamma" << gamma;
  auto it = g_cache.find(key.str());
  if (it != g_cache.end()) return it->second;
  ExperimentConfig c = preset(name, VFLBD_DATA_DIR);
  c.seed = seed;
  c.train.seed = seed;
  c.train.parallel_clients = false;
  if (gamma >= 0) c.trigger.gamma = gamma;
  c.output_dir = (g_out / key.str()).string();
  auto res = run_experiment(c);
  res.summary.records.clear();
  std::cerr << "  [" << key.str() << "] cda=" << res.summary.cda << " asr=" << res.summary.asr.value_or(-1)
            << " precision=" << res.summary.label_precision.value_or(-1)
            << " runtime=" << res.manifest.runtime_seconds << "s\n";
  return g_cache.emplace(key.str(), res.summary).first->second;
}

double runtime_of(const std::string& name, std::uint64_t seed) {
  run(name, seed);
  return read_manifest(g_out / (name + "_seed" + std::to_string(seed)) / "manifest.json").runtime_seconds;
}

template <typename F>
double mean_over_seeds(F&& f) {
  double s = 0;
  for (auto seed : kSeeds) s += f(seed);
  return s / double(kSeeds.size());
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

double eigen_lambda2(const AdversaryGraph& g) {
  const Matrix<double> l = laplacian(g);
  Eigen::MatrixXd m(l.rows(), l.cols());
  for (std::size_t i = 0; i < l.rows(); ++i)
    for (std::size_t j = 0; j < l.cols(); ++j) m(Eigen::Index(i), Eigen::Index(j)) = l(i, j);
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m).eigenvalues()(1);
}

Verdict a1() {
  const auto cfg = preset("mnist-benign", VFLBD_DATA_DIR);
  const auto& s = run("mnist-benign", 1);
  const double secs = runtime_of("mnist-benign", 1);
  return {s.cda >= kA1MinCda && cfg.train.epochs <= kA1MaxEpochs && secs <= kA1MaxSeconds,
          "CDA " + fmt(s.cda) + ", " + std::to_string(cfg.train.epochs) + " epochs, " + fmt(secs) + "s"};
}

Verdict a2() {
  const double benign = run("mnist-benign", 1).cda;
  const auto& s = run("mnist-attack", 1);
  const double secs = runtime_of("mnist-attack", 1);
  const double asr = s.asr.value_or(0);
  return {asr >= kA2MinAsr && std::abs(s.cda - benign) <= kA2MaxCdaGap && secs <= kA2MaxSeconds,
          "ASR " + fmt(asr) + ", CDA " + fmt(s.cda) + " vs benign " + fmt(benign) + ", " + fmt(secs) + "s"};
}

Verdict a3() {
  bool ok = true;
  std::string detail = "precision";
  for (auto seed : kSeeds) {
    const double p = run("mnist-attack", seed).label_precision.value_or(0);
    ok = ok && p >= kA3MinPrecision;
    detail += " " + fmt(p);
  }
  const double hybrid = mean_over_seeds([](auto s) { return run("mnist-attack", s).label_precision.value_or(0); });
  const double vae_only = mean_over_seeds([](auto s) { return run("mnist-vae-only", s).label_precision.value_or(0); });
  return {ok && hybrid >= vae_only, detail + "; mean hybrid " + fmt(hybrid) + " vs VAE-only " + fmt(vae_only)};
}

Verdict a4() {
  const double base = mean_over_seeds([](auto s) { return run("mnist-attack", s).asr.value_or(0); });
  const double noised = mean_over_seeds([](auto s) { return run("mnist-defense", s).asr.value_or(0); });
  return {base - noised <= kA4MaxDrop, "mean ASR " + fmt(base) + " -> " + fmt(noised) + " under noise"};
}

Verdict a5() {
  std::vector<double> means;
  std::string detail = "mean ASR";
  for (double gamma : {1.0, 10.0, 20.0}) {
    means.push_back(mean_over_seeds([gamma](auto s) {
      return gamma == 20.0 ? run("mnist-attack", s).asr.value_or(0) : run("mnist-attack", s, gamma).asr.value_or(0);
    }));
    detail += " gamma=" + fmt(gamma) + ":" + fmt(means.back());
  }
  bool ok = true;
  for (std::size_t i = 1; i < means.size(); ++i) ok = ok && means[i] >= means[i - 1] - kA5Band;
  return {ok, detail};
}

Verdict a6() {
  const auto base = preset("mnist-method2", VFLBD_DATA_DIR);
  std::vector<double> rho, delta;
  bool eigen_ok = true;
  for (double v : kConnectivity) {
    ExperimentConfig c = apply_axis(base, SweepAxis::Connectivity, v);
    c.train.parallel_clients = false;
    c.output_dir = (g_out / ("connectivity_" + fmt(v))).string();
    const auto res = run_experiment(c);
    const auto edges = read_edge_list(fs::path(c.output_dir) / "graph.edges");
    const double oracle = eigen_lambda2(AdversaryGraph(c.adversaries.ids, edges));
    eigen_ok = eigen_ok && res.summary.rho && std::abs(*res.summary.rho - oracle) <= kA6EigenTol;
    rho.push_back(oracle);
    delta.push_back(res.summary.mean_delta.value_or(-1));
    std::cerr << "  [connectivity " << v << "] rho=" << oracle << " delta=" << delta.back() << "\n";
  }
  bool increasing = true;
  for (std::size_t i = 1; i < rho.size(); ++i) increasing = increasing && rho[i] > rho[i - 1];
  const bool measured = std::all_of(delta.begin(), delta.end(), [](double d) { return d >= 0; });
  const double r = spearman(rho, delta);
  std::string detail = "rho";
  for (double x : rho) detail += " " + fmt(x);
  detail += "; Spearman(rho, delta) " + fmt(r);
  return {eigen_ok && increasing && measured && r >= 0.0, detail};
}

Verdict a7() {
  std::size_t held = 0;
  bool zero = true;
  for (std::uint64_t seed = 1; seed <= kA7Trials; ++seed) {
    ToyConfig cfg;
    cfg.seed = seed;
    if (run_theorem_toy(cfg).holds) ++held;
    cfg.poisoning = false;
    zero = zero && run_theorem_toy(cfg).params.delta == 0.0;
  }
  return {held == kA7Trials && zero,
          std::to_string(held) + "/" + std::to_string(kA7Trials) + " bounds hold; clean delta " +
              (zero ? "0" : "nonzero")};
}

std::vector<std::size_t> count_votes(const VoteTally& t, std::size_t n) {
  std::map<std::size_t, std::size_t> count;
  for (auto s : t.sets) {
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    for (std::size_t j : s) ++count[j];
  }
  std::vector<std::size_t> out;
  for (auto [j, c] : count)
    if (c > (n + 1) / 2) out.push_back(j);
  return out;
}

Verdict a8() {
  std::size_t failures = 0;
  std::mt19937_64 rng(8);

  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 9;
    VoteTally t;
    for (std::size_t a = 0; a < n; ++a) {
      std::vector<std::size_t> s(rng() % 40);
      for (auto& v : s) v = rng() % 30;
      t.sets.push_back(s);
    }
    if (majority_vote(t, n) != count_votes(t, n)) ++failures;
  }

  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 20; ++trial) {
    Matrix<double> e(64, 4);
    for (double& v : e.storage()) v = u(rng);
    std::vector<int> y(64);
    for (auto& v : y) v = int(rng() % 4);
    std::vector<std::size_t> anchors(64);
    std::iota(anchors.begin(), anchors.end(), std::size_t{0});
    const auto got = batch_hard_triplets(e, std::span<const int>(y), std::span<const std::size_t>(anchors));
    std::vector<Triplet> want;
    for (std::size_t a = 0; a < 64; ++a) {
      double dp = -1, dn = INFINITY;
      std::size_t p = 64, n = 64;
      for (std::size_t j = 0; j < 64; ++j) {
        if (j == a) continue;
        double d = 0;
        for (std::size_t c = 0; c < 4; ++c) d += (e(a, c) - e(j, c)) * (e(a, c) - e(j, c));
        if (y[j] == y[a] && d > dp) dp = d, p = j;
        if (y[j] != y[a] && d < dn) dn = d, n = j;
      }
      if (p < 64 && n < 64) want.push_back({a, p, n});
    }
    if (got != want) ++failures;
  }

  for (int trial = 0; trial < 3; ++trial) {
    Matrix<double> mu(1, 4), sigma(1, 4);
    for (double& v : mu.storage()) v = 1.5 * u(rng);
    for (double& v : sigma.storage()) v = 1.15 + 0.85 * u(rng);
    const double closed = kl_divergence_gaussian(mu, sigma);
    std::normal_distribution<double> nd;
    double acc = 0;
    const int draws = 1000000;
    for (int s = 0; s < draws; ++s)
      for (std::size_t c = 0; c < 4; ++c) {
        const double eps = nd(rng), z = mu(0, c) + sigma(0, c) * eps;
        acc += -0.5 * eps * eps - std::log(sigma(0, c)) + 0.5 * z * z;
      }
    if (std::abs(acc / draws - closed) > kA8KlRel * closed) ++failures;
  }

  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + trial % 11;
    std::vector<std::size_t> ids(n);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    std::vector<Edge> edges;
    for (std::size_t i = 1; i < n; ++i) edges.emplace_back(rng() % i, i);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (rng() % 10 < 3) edges.emplace_back(i, j);
    const AdversaryGraph g(ids, edges);
    if (std::abs(algebraic_connectivity(g) - eigen_lambda2(g)) > kA8EigenTol) ++failures;
  }

  double worst = 0;
  for (std::uint64_t seed : {1, 2, 3})
    for (const auto& c : run_gradcheck_suite(seed)) {
      worst = std::max(worst, c.result.max_relative_error);
      if (!(c.result.max_relative_error <= kA8GradTol)) ++failures;
    }
  return {failures == 0, std::to_string(failures) + " failures; worst gradient rel. error " + fmt(worst)};
}

Verdict a9() {
  const double swap = mean_over_seeds([](auto s) { return run("mnist-attack", s).asr.value_or(0); });
  const double no_swap = mean_over_seeds([](auto s) { return run("mnist-no-swap", s).asr.value_or(0); });
  const double vote = mean_over_seeds([](auto s) { return run("mnist-vote-method2", s).asr.value_or(0); });
  const double no_vote = mean_over_seeds([](auto s) { return run("mnist-no-vote", s).asr.value_or(0); });
  double cda_gap = 0;
  for (auto [ablated, base] : {std::pair<const char*, const char*>{"mnist-no-swap", "mnist-attack"},
                               {"mnist-vae-only", "mnist-attack"},
                               {"mnist-no-vote", "mnist-vote-method2"}})
    cda_gap = std::max(cda_gap, std::abs(mean_over_seeds([&](auto s) { return run(ablated, s).cda; }) -
                                         mean_over_seeds([&](auto s) { return run(base, s).cda; })));
  return {swap - no_swap >= kA9MinGap && vote - no_vote >= kA9MinGap && cda_gap <= kA9MaxCdaGap,
          "mean ASR swap " + fmt(swap) + " vs no-swap " + fmt(no_swap) + "; vote " + fmt(vote) + " vs no-vote " +
              fmt(no_vote) + "; max CDA gap " + fmt(cda_gap)};
}

Verdict a10() {
  ::setenv("VFLBD_DATA_DIR", VFLBD_DATA_DIR, 1);
  std::vector<std::string> bodies;
  for (const char* tag : {"a", "b"}) {
    const fs::path dir = g_out / (std::string("determinism_") + tag);
    fs::remove_all(dir);
    const std::string cmd = std::string("\"") + VFLBD_CLI + "\" run --preset mnist-attack --seed 7 --deterministic --out \"" +
                            dir.string() + "\" > /dev/null";
    if (std::system(cmd.c_str()) != 0) return {false, "run command failed"};
    bodies.push_back(read_text(dir / "metrics.jsonl"));
  }
  const bool same = !bodies[0].empty() && bodies[0] == bodies[1];
  return {same, same ? "metrics.jsonl identical (" + git_blob_sha1(bodies[0]).substr(0, 12) + ")" : "outputs differ"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance gate"};
  std::string out = "acceptance_runs";
  app.add_option("--out", out, "directory for run artifacts");
  CLI11_PARSE(app, argc, argv);
  g_out = out;
  fs::create_directories(g_out);

  const std::vector<std::pair<std::string, Verdict (*)()>> criteria{
      {"A1", a1}, {"A2", a2}, {"A3", a3}, {"A4", a4}, {"A5", a5},
      {"A6", a6}, {"A7", a7}, {"A8", a8}, {"A9", a9}, {"A10", a10}};
  std::size_t failed = 0;
  for (const auto& [name, fn] : criteria) {
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    if (!v.pass) ++failed;
    std::cout << name << ' ' << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed ? 1 : 0;
}
