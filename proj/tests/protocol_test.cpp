#include "vflbd/protocol.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "vflbd/metrics.hpp"

using namespace vflbd;
namespace fs = std::filesystem;

namespace {

const PartitionScheme kSix = PartitionScheme::vertical_strips(28, 28, 6);

VerticalDataset small_data(std::size_t n = 256) {
  SyntheticSpec spec;
  spec.count = n;
  spec.seed = 3;
  return partition_features(make_synthetic(spec), kSix);
}

ModelConfig small_models() { return ModelConfig{"dense:16,relu,dense:8", "dense:16,relu"}; }

TrainConfig small_train() {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.seed = 5;
  return cfg;
}

AttackContext make_attack(const VerticalDataset& data) {
  AttackContext a;
  std::vector<std::size_t> consensus;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data.server_labels()[i] == 0) consensus.push_back(i);
  a.plan = select_poison_set(consensus, 0.1, data.size(), 9, {1, 2, 3});
  a.shares = build_trigger_method1(TriggerSpec{}, kSix, {1, 2, 3});
  a.options = PoisonOptions{20.0, false, false};
  a.seed = 11;
  return a;
}

std::vector<float> all_params(const SplitState& s) {
  std::vector<float> out = s.top.net.parameters().values;
  for (const auto& b : s.bottoms) out.insert(out.end(), b.net.parameters().values.begin(), b.net.parameters().values.end());
  return out;
}

}  // namespace

TEST(Protocol, LossDecreases) {
  const auto data = small_data();
  auto state = init_split_state(data, small_models(), 1);
  auto cfg = small_train();
  cfg.epochs = 20;
  const auto res = train(state, cfg);
  const std::size_t rpe = rounds_per_epoch(data.size(), cfg.batch_size);
  double first = 0, last = 0;
  for (std::size_t t = 0; t < rpe; ++t) {
    first += res.traces[t].loss;
    last += res.traces[res.traces.size() - 1 - t].loss;
  }
  EXPECT_LT(last, 0.5 * first);
  EXPECT_GT(clean_data_accuracy(state, data), 0.8);
}

TEST(Protocol, SeriesLengthAndTraceFile) {
  const auto data = small_data();
  auto state = init_split_state(data, small_models(), 1);
  auto cfg = small_train();
  cfg.eval_every = 3;
  std::vector<std::pair<std::size_t, std::size_t>> evals;
  const auto path = fs::path(::testing::TempDir()) / "traces.jsonl";
  const auto res = train(state, cfg, [&](std::size_t r, std::size_t e) { evals.emplace_back(r, e); }, path);
  EXPECT_EQ(res.traces.size(), 16u);
  EXPECT_EQ(res.eval_rounds, (std::vector<std::size_t>{3, 6, 9, 12, 15, 16}));
  ASSERT_EQ(evals.size(), 6u);
  EXPECT_EQ(evals.front(), (std::pair<std::size_t, std::size_t>{3, 1}));
  EXPECT_EQ(evals.back(), (std::pair<std::size_t, std::size_t>{16, 2}));
  std::ifstream is(path);
  std::size_t lines = 0;
  for (std::string l; std::getline(is, l);) ++lines;
  EXPECT_EQ(lines, 16u);
  cfg.rounds = 5;
  auto again = init_split_state(data, small_models(), 1);
  EXPECT_EQ(train(again, cfg).traces.size(), 5u);
}

TEST(Protocol, LearningRateSchedule) {
  TrainConfig cfg;
  cfg.batch_size = 10;
  cfg.lr = 0.1;
  cfg.lr_decay = 0.5;
  EXPECT_DOUBLE_EQ(cfg.eta(0, 100), 0.1);
  EXPECT_DOUBLE_EQ(cfg.eta(9, 100), 0.1);
  EXPECT_DOUBLE_EQ(cfg.eta(10, 100), 0.05);
  EXPECT_DOUBLE_EQ(cfg.eta(25, 100), 0.025);
  cfg.lr = 0;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(Protocol, ZeroVarianceDefenseLeavesTrajectory) {
  const auto data = small_data();
  auto a = init_split_state(data, small_models(), 2);
  auto b = init_split_state(data, small_models(), 2);
  auto cfg = small_train();
  train(a, cfg);
  cfg.defense = NoiseDefenseConfig{0.0, 4};
  const auto res = train(b, cfg);
  EXPECT_EQ(all_params(a), all_params(b));
  for (auto p : res.traces.front().provenance) EXPECT_EQ(p, Provenance::Noised);
}

TEST(NoiseDefense, StandardDeviationAndSeeding) {
  Matrix<float> zeros(1000, 1000, 0.0f);
  std::vector<GradientBatch<float>> g{{zeros, Provenance::Benign, 0}};
  apply_noise_defense(g, NoiseDefenseConfig{1e-10, 3}, 2);
  double s = 0, ss = 0;
  for (float v : g[0].values.storage()) {
    s += v;
    ss += double(v) * v;
  }
  const double n = 1e6, mean = s / n, sd = std::sqrt(ss / n - mean * mean);
  EXPECT_NEAR(sd, 1e-5, 5e-7);
  EXPECT_NEAR(mean, 0.0, 5e-8);

  std::vector<GradientBatch<float>> h{{zeros, Provenance::Benign, 0}};
  apply_noise_defense(h, NoiseDefenseConfig{1e-10, 3}, 2);
  EXPECT_EQ(h[0].values, g[0].values);
  std::vector<GradientBatch<float>> other{{zeros, Provenance::Benign, 0}};
  apply_noise_defense(other, NoiseDefenseConfig{1e-10, 3}, 3);
  EXPECT_NE(other[0].values, g[0].values);

  Matrix<float> ones(4, 4, 1.0f);
  std::vector<GradientBatch<float>> id{{ones, Provenance::Attacked, 1}};
  apply_noise_defense(id, NoiseDefenseConfig{0.0, 3});
  EXPECT_EQ(id[0].values, ones);
  EXPECT_EQ(id[0].provenance, Provenance::Noised);
  EXPECT_THROW(apply_noise_defense(id, NoiseDefenseConfig{-1.0, 3}), Error);
}

TEST(Instrumentation, CarriesBothGradients) {
  const auto data = small_data();
  auto state = init_split_state(data, small_models(), 1);
  auto cfg = small_train();
  cfg.instrument = true;
  const auto benign = run_round(state, cfg, 0);
  ASSERT_TRUE(benign.benign_grad && benign.attacked_grad && benign.delta);
  EXPECT_EQ(*benign.benign_grad, *benign.attacked_grad);
  EXPECT_EQ(*benign.delta, 0.0);

  const auto attack = make_attack(data);
  auto poisoned = init_split_state(data, small_models(), 1);
  poisoned.attack = &attack;
  const auto res = train(poisoned, cfg);
  double max_delta = 0;
  for (const auto& tr : res.traces) {
    ASSERT_TRUE(tr.delta);
    EXPECT_EQ(tr.benign_grad->size(), tr.attacked_grad->size());
    EXPECT_NEAR(*tr.delta, gradient_perturbation_delta(*tr.attacked_grad, *tr.benign_grad), 1e-6);
    if (tr.poisoned_rows == 0) EXPECT_EQ(*tr.delta, 0.0);
    max_delta = std::max(max_delta, *tr.delta);
    for (auto p : tr.provenance) EXPECT_EQ(p, Provenance::Attacked);
  }
  EXPECT_GT(max_delta, 0.0);
}

TEST(ClientBatches, PoisoningTouchesOnlyAdversarySlices) {
  const auto data = small_data();
  const auto attack = make_attack(data);
  auto state = init_split_state(data, small_models(), 1);
  state.attack = &attack;
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::size_t rows = 0;
  const auto dirty = client_batches(state, idx, true, &rows);
  const auto clean = client_batches(state, idx, false);
  EXPECT_EQ(rows, attack.plan.indices.size());
  for (std::size_t k = 0; k < 6; ++k) {
    EXPECT_EQ(clean[k], data.client_view(k));
    if (k < 1 || k > 3) EXPECT_EQ(dirty[k], clean[k]);
    else EXPECT_NE(dirty[k], clean[k]);
  }
}

TEST(Protocol, UntrainedModelAccuracyIsStable) {
  const auto data = small_data();
  const auto state = init_split_state(data, small_models(), 8);
  std::vector<Matrix<float>> slices;
  for (std::size_t k = 0; k < 6; ++k) slices.push_back(data.client_view(k));
  const auto logits = predict_logits(state, slices);
  const double acc = accuracy(logits, data.server_labels());
  EXPECT_DOUBLE_EQ(clean_data_accuracy(state, data), acc);
  EXPECT_DOUBLE_EQ(clean_data_accuracy(state, data), acc);
}

TEST(Protocol, ParallelMatchesSequential) {
  const auto data = small_data();
  const auto attack = make_attack(data);
  auto a = init_split_state(data, small_models(), 3);
  auto b = init_split_state(data, small_models(), 3);
  a.attack = b.attack = &attack;
  auto cfg = small_train();
  cfg.defense = NoiseDefenseConfig{1e-6, 2};
  const auto ra = train(a, cfg);
  cfg.parallel_clients = true;
  const auto rb = train(b, cfg);
  EXPECT_EQ(all_params(a), all_params(b));
  for (std::size_t t = 0; t < ra.traces.size(); ++t) EXPECT_EQ(ra.traces[t].loss, rb.traces[t].loss);
}

TEST(Protocol, TraceJson) {
  RoundTrace tr;
  tr.t = 4;
  tr.loss = 0.5;
  tr.delta = 0.25;
  tr.provenance = {Provenance::Benign, Provenance::Noised};
  const std::string j = trace_to_json(tr);
  EXPECT_NE(j.find("\"t\":4"), std::string::npos);
  EXPECT_NE(j.find("\"delta\":0.25"), std::string::npos);
  EXPECT_NE(j.find("\"noised\""), std::string::npos);
}
