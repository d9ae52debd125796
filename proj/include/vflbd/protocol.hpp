#pragma once

// SplitNN training loop: server-issued mini-batches, client embeddings, server
// loss and top update, per-sample embedding gradients (optionally noised), and
// client-side SGD.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vflbd/models.hpp"
#include "vflbd/trigger.hpp"

namespace vflbd {

struct NoiseDefenseConfig {
  double variance = 1e-10;
  std::uint64_t seed = 0;
};

enum class TopOptimizer { Adam, Sgd };

struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t rounds = 0;  // when nonzero, overrides epochs
  std::size_t batch_size = 64;
  double lr = 0.1;          // η for bottom models (and the top model under SGD)
  double lr_decay = 1.0;    // per-epoch multiplicative factor on η
  TopOptimizer top_optimizer = TopOptimizer::Adam;
  AdamConfig top_adam{3e-3};
  std::optional<NoiseDefenseConfig> defense;
  std::size_t eval_every = 0;  // rounds between evaluations; 0 = once per epoch
  bool instrument = false;     // record benign vs attacked top gradients
  bool parallel_clients = false;
  std::uint64_t seed = 1;

  void validate() const;
  std::size_t total_rounds(std::size_t n) const;
  double eta(std::size_t round, std::size_t n) const;
};

// grads + N(0, variance) elementwise, drawn from (cfg.seed, round, client).
void apply_noise_defense(std::vector<GradientBatch<float>>& grads, const NoiseDefenseConfig& cfg,
                         std::size_t round = 0);

// Adversary-side poisoning hooked into the client phase.
struct AttackContext {
  PoisonPlan plan;
  std::map<std::size_t, AdversaryTriggerShare> shares;
  std::map<std::size_t, VaeModel<float>> generators;  // slice-shaped VAEs (substitution)
  PoisonOptions options;
  std::uint64_t seed = 0;

  bool active() const { return !plan.disabled && !plan.indices.empty(); }
};

struct SplitState {
  const VerticalDataset* data = nullptr;
  std::vector<BottomModel<float>> bottoms;
  TopModel<float> top;
  AdamState<float> top_state;
  const AttackContext* attack = nullptr;
};

struct ModelConfig {
  std::string bottom = "dense:128,relu,dense:32";
  std::string top_hidden = "dense:64,relu";
};

SplitState init_split_state(const VerticalDataset& data, const ModelConfig& models, std::uint64_t seed);

struct RoundTrace {
  std::size_t t = 0;
  double loss = 0.0;
  std::size_t poisoned_rows = 0;
  std::vector<Provenance> provenance;  // per client gradient
  std::optional<std::vector<float>> benign_grad;
  std::optional<std::vector<float>> attacked_grad;
  std::optional<double> delta;
  double grad_norm = 0.0;
};

std::string trace_to_json(const RoundTrace& trace);

// Client slices for the round's indices, with adversary poisoning applied.
std::vector<Matrix<float>> client_batches(const SplitState& state, std::span<const std::size_t> indices,
                                          bool poison, std::size_t* poisoned_rows = nullptr);

RoundTrace run_round(SplitState& state, const TrainConfig& cfg, std::size_t t);

// Logits for whole client slice matrices (same row order).
Matrix<float> predict_logits(const SplitState& state, const std::vector<Matrix<float>>& slices);

struct TrainResult {
  std::vector<RoundTrace> traces;
  std::vector<std::size_t> eval_rounds;
};

// Runs all rounds; `on_eval(round, epoch)` fires at the configured cadence and
// after the last round. Traces go to `trace_path` as JSONL when set.
TrainResult train(SplitState& state, const TrainConfig& cfg,
                  const std::function<void(std::size_t, std::size_t)>& on_eval = {},
                  const std::optional<std::filesystem::path>& trace_path = std::nullopt);

}  // namespace vflbd
