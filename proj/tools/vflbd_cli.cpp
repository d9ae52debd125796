#include <CLI11.hpp>

#include <cmath>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "vflbd/experiment.hpp"
#include "vflbd/gradcheck.hpp"
#include "vflbd/metrics.hpp"
#include "vflbd/report.hpp"

namespace {

using namespace vflbd;

struct Common {
  std::string config;
  std::string preset;
  std::string out;
  std::uint64_t seed = 0;
  bool seed_given = false;
  bool deterministic = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "experiment configuration JSON");
  cmd->add_option("--preset", c.preset, "named scenario preset");
  cmd->add_option("--seed", c.seed, "base seed")->each([&c](const std::string&) { c.seed_given = true; });
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_flag("--deterministic", c.deterministic, "sequential client execution");
}

ExperimentConfig resolve(const Common& c) {
  if (!c.config.empty() && !c.preset.empty())
    fail(ErrorKind::Configuration, "--config and --preset are mutually exclusive");
  ExperimentConfig cfg;
  if (!c.config.empty()) cfg = parse_config(c.config);
  else if (!c.preset.empty()) cfg = preset(c.preset, default_data_dir());
  else fail(ErrorKind::Configuration, "one of --config or --preset is required");
  if (c.seed_given) cfg.seed = c.seed;
  cfg.train.seed = cfg.seed;
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (c.deterministic) cfg.train.parallel_clients = false;
  return cfg;
}

void print_summary(const RunSummary& s) {
  std::cout << "cda=" << s.cda;
  if (s.asr) std::cout << " asr=" << *s.asr;
  if (s.label_precision) std::cout << " label_precision=" << *s.label_precision;
  if (s.label_recall) std::cout << " label_recall=" << *s.label_recall;
  if (s.rho) std::cout << " rho=" << *s.rho;
  if (s.mean_delta) std::cout << " mean_delta=" << *s.mean_delta;
  std::cout << " consensus=" << s.consensus_size << " poisoned=" << s.poisoned << '\n';
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      fail(ErrorKind::Configuration, "sweep value '" + item + "' is not a number");
    }
  }
  require(!out.empty(), ErrorKind::Configuration, "sweep needs at least one value");
  return out;
}

int plot_metrics(const std::string& input, const std::string& output, const std::string& field) {
  std::istringstream in(read_text(input));
  PlotSeries series{field, {}, {}};
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (!j.contains(field) || j[field].is_null()) continue;
    series.x.push_back(j.at("round").get<double>());
    series.y.push_back(j[field].get<double>());
  }
  require(!series.x.empty(), ErrorKind::Format, input + ": no '" + field + "' values");
  write_line_plot(output, field + " vs round", "round", field, {series});
  std::cout << "wrote " << output << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vflbd: decentralized backdoor attack simulator for split vertical federated learning"};
  app.require_subcommand(1);

  Common run_opts;
  auto* run = app.add_subcommand("run", "run one experiment");
  add_common(run, run_opts);

  Common sweep_opts;
  std::string axis, values;
  std::size_t seeds = 1;
  auto* sweep = app.add_subcommand("sweep", "run one experiment per axis value");
  add_common(sweep, sweep_opts);
  sweep->add_option("--axis", axis, "gamma|adversary-count|connectivity|margin|latent-dim|beta|seed")->required();
  sweep->add_option("--values", values, "comma-separated values")->required();
  sweep->add_option("--seeds", seeds, "seeds per value");

  std::size_t trials = 10;
  std::uint64_t bound_seed = 1;
  bool no_poison = false;
  auto* bound = app.add_subcommand("verify-bound", "check the convergence bound on the instrumented toy problem");
  bound->add_option("--trials", trials, "seeded trials");
  bound->add_option("--seed", bound_seed, "first seed");
  bound->add_flag("--no-poison", no_poison, "disable the trigger perturbation");

  std::string plot_in, plot_out, plot_field = "asr";
  auto* plot = app.add_subcommand("plot", "plot a metrics JSONL field against round");
  plot->add_option("--metrics", plot_in, "metrics.jsonl")->required();
  plot->add_option("--field", plot_field, "cda|asr|delta|proximity");
  plot->add_option("--out", plot_out, "SVG path")->required();

  std::uint64_t gc_seed = 1;
  double gc_tol = 1e-4;
  auto* grad = app.add_subcommand("gradcheck", "compare analytic gradients with central differences");
  grad->add_option("--seed", gc_seed, "seed");
  grad->add_option("--tolerance", gc_tol, "maximum relative error");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      const auto cfg = resolve(run_opts);
      const auto res = run_experiment(cfg);
      print_summary(res.summary);
      std::cout << "manifest " << (res.manifest.directory / "manifest.json").string() << '\n';
    } else if (*sweep) {
      auto cfg = resolve(sweep_opts);
      const auto points = run_sweep(cfg, parse_sweep_axis(axis), parse_values(values), seeds);
      int failed = 0;
      for (const auto& p : points) {
        std::cout << axis << '=' << p.value << " seed=" << p.seed << ' ';
        if (p.result) {
          print_summary(p.result->summary);
        } else {
          std::cout << "error: " << p.error << '\n';
          ++failed;
        }
      }
      return failed ? 1 : 0;
    } else if (*bound) {
      std::size_t held = 0;
      for (std::size_t i = 0; i < trials; ++i) {
        ToyConfig tc;
        tc.seed = bound_seed + i;
        tc.poisoning = !no_poison;
        const auto r = run_theorem_toy(tc);
        held += r.holds;
        std::cout << "seed=" << tc.seed << " min_grad_sq=" << r.min_grad_sq << " bound=" << r.bound
                  << " L=" << r.params.L << " Gamma=" << r.params.Gamma << " delta=" << r.params.delta
                  << (r.holds ? " holds" : " VIOLATED") << '\n';
      }
      std::cout << held << '/' << trials << " trials within bound\n";
      return held == trials ? 0 : 1;
    } else if (*plot) {
      return plot_metrics(plot_in, plot_out, plot_field);
    } else if (*grad) {
      int failed = 0;
      for (const auto& c : run_gradcheck_suite(gc_seed)) {
        const bool ok = c.result.max_relative_error <= gc_tol;
        failed += !ok;
        std::cout << (ok ? "ok   " : "FAIL ") << c.name << " params=" << c.result.parameters
                  << " rel_err=" << c.result.max_relative_error << '\n';
      }
      return failed ? 1 : 0;
    }
  } catch (const vflbd::Error& e) {
    std::cerr << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
