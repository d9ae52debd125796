#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vflbd/protocol.hpp"

namespace vflbd {

struct MetricsRecord {
  std::size_t round = 0;
  std::size_t epoch = 0;
  std::optional<double> asr;
  double cda = 0.0;
  std::optional<double> label_inf_accuracy;
  std::optional<double> delta;
  std::optional<double> rho;
  std::optional<double> proximity;
  std::string run_id;
  std::string config_hash;

  void validate() const;
};

std::string record_to_json(const MetricsRecord& r);

// Top-1 accuracy of argmax rows against labels.
double accuracy(const Matrix<float>& logits, std::span<const int> labels);

// Splits full images into client slices and runs the split model.
Matrix<float> predict_images(const SplitState& state, const Matrix<float>& images, const ImageShape& shape);

double clean_data_accuracy(const SplitState& state, const VerticalDataset& test);

// Trigger-implanted non-target test images (no substitution) classified as target.
double attack_success_rate(const SplitState& state, const RawDataset& test,
                           const std::map<std::size_t, AdversaryTriggerShare>& shares, double gamma, bool clip,
                           int target_label, std::size_t sample_count, std::uint64_t seed);

// Fraction of `inferred` whose true label is the target; absent when empty.
std::optional<double> label_inference_accuracy(const std::vector<std::size_t>& inferred,
                                               const std::vector<int>& labels, int target_label);
std::optional<double> label_inference_recall(const std::vector<std::size_t>& inferred,
                                             const std::vector<int>& labels, int target_label);

// ‖mean(a) − mean(b)‖₂ over rows.
double embedding_proximity(const Matrix<float>& poisoned, const Matrix<float>& target);

double gradient_perturbation_delta(std::span<const float> attacked, std::span<const float> benign);
double gradient_perturbation_delta(std::span<const double> attacked, std::span<const double> benign);

struct TheoremParams {
  double F0 = 0.0;
  double L = 0.0;
  double Gamma = 0.0;
  double delta = 0.0;
  double K = 0.0;
  std::vector<double> eta;  // one per round; T = eta.size()

  void validate() const;
};

// 4·F0/Ση + 4·(Ση²/Ση)·(K·L·Γ + K·L·δ) + 2·K·δ.
double theorem1_bound(const TheoremParams& p);

struct GradientSample {
  std::vector<double> theta;
  std::vector<double> full_grad;
  // Mini-batch gradient draws at theta, each split into per-party blocks.
  std::vector<std::vector<double>> batch_grads;
};

struct EstimationInput {
  std::vector<GradientSample> samples;
  std::vector<std::pair<std::size_t, std::size_t>> blocks;  // [offset, length) per party
  std::vector<double> perturbations;                        // ‖∇ᵃ − ∇‖ per round
  double F0 = 0.0;
  std::vector<double> eta;
};

// L̂: max secant ratio over sample pairs; Γ̂: max over samples and blocks of the
// mean squared mini-batch deviation; δ̂: max squared perturbation.
TheoremParams estimate_theorem_params(const EstimationInput& in);

struct ToyConfig {
  std::size_t samples = 256;
  std::size_t features_per_client = 4;
  std::size_t batch_size = 16;
  std::size_t rounds = 200;
  double ridge = 0.05;
  double poison_fraction = 0.1;
  double trigger = 1.0;
  bool poisoning = true;
  std::size_t gradient_draws = 8;
  std::size_t sample_every = 10;
  std::uint64_t seed = 1;
};

struct ToyReport {
  TheoremParams params;
  double bound = 0.0;
  double min_grad_sq = 0.0;
  double pilot_L = 0.0;
  bool holds = false;
};

// Two linear clients (h_k = θ_k·x_k) and a server ŷ = a·s + b·tanh(s), s = h₁ + h₂,
// squared loss plus ridge, trained by equal-rate SGD (K = 3). The adversary
// shifts client 1's features on poisoned samples.
ToyReport run_theorem_toy(const ToyConfig& cfg);

// Spearman rank correlation with average ranks for ties; 0 when either side is constant.
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace vflbd
