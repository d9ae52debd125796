#include "vflbd/protocol.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <thread>

#include <json.hpp>

namespace vflbd {

void TrainConfig::validate() const {
  require(epochs >= 1 || rounds >= 1, ErrorKind::Configuration, "training needs at least one round");
  require(batch_size >= 1, ErrorKind::Configuration, "batch size must be positive");
  require(lr > 0.0, ErrorKind::Configuration, "learning rate must be positive");
  require(lr_decay > 0.0, ErrorKind::Configuration, "learning-rate decay must be positive");
  if (defense) require(defense->variance >= 0.0, ErrorKind::Configuration, "noise variance must be non-negative");
  top_adam.validate();
}

std::size_t TrainConfig::total_rounds(std::size_t n) const {
  return rounds ? rounds : epochs * rounds_per_epoch(n, batch_size);
}

double TrainConfig::eta(std::size_t round, std::size_t n) const {
  const std::size_t epoch = round / rounds_per_epoch(n, batch_size);
  return lr * std::pow(lr_decay, double(epoch));
}

void apply_noise_defense(std::vector<GradientBatch<float>>& grads, const NoiseDefenseConfig& cfg,
                         std::size_t round) {
  require(cfg.variance >= 0.0, ErrorKind::Configuration, "noise variance must be non-negative");
  const double sd = std::sqrt(cfg.variance);
  for (auto& g : grads) {
    g.provenance = Provenance::Noised;
    if (sd == 0.0) continue;
    Rng rng = make_rng(cfg.seed, {kTagNoise, round, g.client});
    std::normal_distribution<double> nd(0.0, sd);
    for (float& v : g.values.storage()) v = float(double(v) + nd(rng));
  }
}

SplitState init_split_state(const VerticalDataset& data, const ModelConfig& models, std::uint64_t seed) {
  SplitState s;
  s.data = &data;
  std::vector<std::size_t> dims;
  for (std::size_t k = 0; k < data.num_clients(); ++k) {
    Rng rng = make_rng(seed, {kTagInit, k});
    s.bottoms.push_back(make_bottom<float>(data.slice_shape(k), models.bottom, rng));
    dims.push_back(s.bottoms.back().embedding_dim());
  }
  Rng rng = make_rng(seed, {kTagInit, data.num_clients()});
  s.top = make_top<float>(dims, std::size_t(data.num_classes()), models.top_hidden, rng);
  return s;
}

std::string trace_to_json(const RoundTrace& trace) {
  nlohmann::ordered_json j;
  j["t"] = trace.t;
  j["loss"] = trace.loss;
  j["poisoned_rows"] = trace.poisoned_rows;
  j["grad_norm"] = trace.grad_norm;
  if (trace.delta) j["delta"] = *trace.delta;
  std::vector<std::string> prov;
  for (auto p : trace.provenance) prov.push_back(to_string(p));
  j["provenance"] = prov;
  return j.dump();
}

std::vector<Matrix<float>> client_batches(const SplitState& state, std::span<const std::size_t> indices,
                                          bool poison, std::size_t* poisoned_rows) {
  std::vector<Matrix<float>> out;
  std::size_t changed = 0;
  for (std::size_t k = 0; k < state.data->num_clients(); ++k) {
    out.push_back(gather_rows(state.data->client_view(k), indices));
    if (!poison || !state.attack || !state.attack->active()) continue;
    auto sh = state.attack->shares.find(k);
    if (sh == state.attack->shares.end()) continue;
    auto gen = state.attack->generators.find(k);
    const VaeModel<float>* vae = gen == state.attack->generators.end() ? nullptr : &gen->second;
    changed = std::max(changed, poison_batch(out.back(), indices, k, state.attack->plan, sh->second, vae,
                                             state.attack->options, state.attack->seed));
  }
  if (poisoned_rows) *poisoned_rows = changed;
  return out;
}

namespace {

std::vector<EmbeddingBatch<float>> embed_all(const SplitState& state, const std::vector<Matrix<float>>& batches,
                                             std::size_t t, bool parallel) {
  std::vector<EmbeddingBatch<float>> emb(batches.size());
  auto work = [&](std::size_t k) { emb[k] = forward_bottom(state.bottoms[k], batches[k], k, t); };
  if (parallel && batches.size() > 1) {
    std::vector<std::thread> pool;
    for (std::size_t k = 0; k < batches.size(); ++k) pool.emplace_back(work, k);
    for (auto& th : pool) th.join();
  } else {
    for (std::size_t k = 0; k < batches.size(); ++k) work(k);
  }
  return emb;
}

double l2(std::span<const float> v) {
  double s = 0;
  for (float x : v) s += double(x) * double(x);
  return std::sqrt(s);
}

}  // namespace

RoundTrace run_round(SplitState& state, const TrainConfig& cfg, std::size_t t) {
  try {
    const std::size_t n = state.data->size();
    const auto idx = minibatch_indices(n, cfg.batch_size, t, cfg.seed);
    RoundTrace trace;
    trace.t = t;
    const auto batches = client_batches(state, idx, true, &trace.poisoned_rows);
    const auto emb = embed_all(state, batches, t, cfg.parallel_clients);
    std::vector<int> labels;
    labels.reserve(idx.size());
    for (std::size_t i : idx) labels.push_back(state.data->server_labels()[i]);
    auto tb = backward_top(state.top, std::span<const EmbeddingBatch<float>>(emb), std::span<const int>(labels));
    trace.loss = double(tb.loss);
    trace.grad_norm = l2(tb.grad_theta);

    if (cfg.instrument) {
      trace.attacked_grad = tb.grad_theta;
      if (trace.poisoned_rows > 0) {
        const auto clean = client_batches(state, idx, false);
        const auto clean_emb = embed_all(state, clean, t, cfg.parallel_clients);
        trace.benign_grad = backward_top(state.top, std::span<const EmbeddingBatch<float>>(clean_emb),
                                         std::span<const int>(labels))
                                .grad_theta;
      } else {
        trace.benign_grad = tb.grad_theta;
      }
      double d = 0;
      for (std::size_t i = 0; i < tb.grad_theta.size(); ++i) {
        const double e = double((*trace.attacked_grad)[i]) - double((*trace.benign_grad)[i]);
        d += e * e;
      }
      trace.delta = std::sqrt(d);
    }

    const double eta = cfg.eta(t, n);
    auto theta_top = std::span<float>(state.top.net.parameters().values);
    if (cfg.top_optimizer == TopOptimizer::Adam)
      adam_step(state.top_state, theta_top, std::span<const float>(tb.grad_theta), cfg.top_adam);
    else
      sgd_step(theta_top, std::span<const float>(tb.grad_theta), float(eta));

    auto& grads = tb.per_embedding;
    if (state.attack && state.attack->active())
      for (auto& g : grads) g.provenance = Provenance::Attacked;
    if (cfg.defense) apply_noise_defense(grads, *cfg.defense, t);
    for (const auto& g : grads) trace.provenance.push_back(g.provenance);

    auto update = [&](std::size_t k) {
      const auto g = backward_bottom(state.bottoms[k], batches[k], grads[k]);
      sgd_step(std::span<float>(state.bottoms[k].net.parameters().values), std::span<const float>(g), float(eta));
    };
    if (cfg.parallel_clients && grads.size() > 1) {
      std::vector<std::thread> pool;
      for (std::size_t k = 0; k < grads.size(); ++k) pool.emplace_back(update, k);
      for (auto& th : pool) th.join();
    } else {
      for (std::size_t k = 0; k < grads.size(); ++k) update(k);
    }
    return trace;
  } catch (const Error& e) {
    throw Error(e.kind(), "round " + std::to_string(t) + ": " + e.detail());
  }
}

Matrix<float> predict_logits(const SplitState& state, const std::vector<Matrix<float>>& slices) {
  std::vector<EmbeddingBatch<float>> emb;
  for (std::size_t k = 0; k < slices.size(); ++k) emb.push_back(forward_bottom(state.bottoms[k], slices[k], k));
  return top_logits(state.top, std::span<const EmbeddingBatch<float>>(emb));
}

TrainResult train(SplitState& state, const TrainConfig& cfg,
                  const std::function<void(std::size_t, std::size_t)>& on_eval,
                  const std::optional<std::filesystem::path>& trace_path) {
  cfg.validate();
  const std::size_t n = state.data->size();
  const std::size_t total = cfg.total_rounds(n), rpe = rounds_per_epoch(n, cfg.batch_size);
  const std::size_t every = cfg.eval_every ? cfg.eval_every : rpe;
  std::ofstream os;
  if (trace_path) {
    os.open(*trace_path);
    require(static_cast<bool>(os), ErrorKind::Io, "cannot create " + trace_path->string());
  }
  TrainResult res;
  for (std::size_t t = 0; t < total; ++t) {
    res.traces.push_back(run_round(state, cfg, t));
    if (os.is_open()) os << trace_to_json(res.traces.back()) << '\n';
    if ((t + 1) % every == 0 || t + 1 == total) {
      res.eval_rounds.push_back(t + 1);
      if (on_eval) on_eval(t + 1, (t + 1 + rpe - 1) / rpe);
    }
  }
  return res;
}

}  // namespace vflbd
