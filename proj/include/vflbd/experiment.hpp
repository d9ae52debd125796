#pragma once

// Experiment configuration (strict JSON), desk-scale presets, end-to-end runs
// (label inference, then attacked SplitNN training) and parameter sweeps.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vflbd/graph.hpp"
#include "vflbd/inference.hpp"
#include "vflbd/metrics.hpp"
#include "vflbd/protocol.hpp"
#include "vflbd/report.hpp"
#include "vflbd/trigger.hpp"

namespace vflbd {

struct DatasetConfig {
  std::string kind = "idx";  // idx | synthetic
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t train_cap = 8000;
  std::size_t test_cap = 2000;
  std::size_t synthetic_train = 2000;
  std::size_t synthetic_test = 500;
  int classes = 10;
  std::size_t channels = 1, height = 28, width = 28;
  double noise = 0.15;
};

struct PartitionConfig {
  std::string kind = "strips";  // strips | grid
  std::size_t clients = 6;
  std::size_t grid_rows = 2, grid_cols = 2;
};

struct AdversaryConfig {
  std::vector<std::size_t> ids;
  std::string topology = "complete";
  std::vector<Edge> edges;
  std::size_t extra_edges = 0;
  bool normalized_rho = false;
};

struct AuxConfig {
  std::size_t count = 360;
  double target_fraction = 0.16;
};

struct AblationConfig {
  bool no_swap = false;
  bool no_vote = false;
  bool vae_only_loss = false;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetConfig dataset;
  PartitionConfig partition;
  ModelConfig models;
  TrainConfig train;
  bool defense = false;
  double defense_variance = 1e-10;
  AdversaryConfig adversaries;
  AuxConfig aux;
  VaeLossConfig vae_loss;
  VaeTrainOptions vae;
  std::size_t retrain_epochs = 30;
  ClassifierOptions classifier;
  InferenceConfig inference;
  VoteRule vote_rule = VoteRule::StrictlyAbove;
  TriggerSpec trigger;
  double zeta = 0.01;
  AblationConfig ablation;
  std::size_t asr_samples = 250;
  std::string output_dir = "runs/experiment";
  std::uint64_t seed = 1;

  bool attacked() const { return !adversaries.ids.empty(); }
};

nlohmann::ordered_json to_json(const ExperimentConfig& cfg);
// Strict: unknown keys and every invariant violation are collected into one Configuration error.
ExperimentConfig from_json(const nlohmann::json& j);
ExperimentConfig parse_config(const std::filesystem::path& path);
void validate(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

// Directory holding the IDX files: $VFLBD_DATA_DIR or ./data.
std::filesystem::path default_data_dir();
std::vector<std::string> preset_names();
ExperimentConfig preset(const std::string& name, const std::filesystem::path& data_dir = default_data_dir());

struct RunSummary {
  double cda = 0.0;
  std::optional<double> asr;
  std::optional<double> label_precision;
  std::optional<double> label_recall;
  std::size_t consensus_size = 0;
  std::size_t poisoned = 0;
  std::optional<double> mean_delta;
  std::optional<double> rho;
  std::vector<MetricsRecord> records;
};

struct ExperimentResult {
  RunManifest manifest;
  RunSummary summary;
};

// Writes metrics.jsonl, traces.jsonl, summary.csv, config.json, plots and manifest.json under cfg.output_dir.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

enum class SweepAxis { Gamma, AdversaryCount, Connectivity, Margin, LatentDim, Beta, Seed };
SweepAxis parse_sweep_axis(const std::string& name);
std::string to_string(SweepAxis a);

// Base config with the axis set to `value` (adversary count picks ids 0..c-1;
// connectivity sets the number of edges added to the line).
ExperimentConfig apply_axis(ExperimentConfig cfg, SweepAxis axis, double value);

struct SweepPoint {
  double value = 0.0;
  std::uint64_t seed = 0;
  std::optional<ExperimentResult> result;
  std::string error;
};

// One run per (value, seed); seeds are base.seed + s for s < seeds. Writes
// sweep.csv and sweep.svg under base.output_dir; failed runs are recorded and skipped.
std::vector<SweepPoint> run_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<double>& values,
                                  std::size_t seeds = 1);

}  // namespace vflbd
