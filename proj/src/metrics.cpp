#include "vflbd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <json.hpp>

namespace vflbd {

void MetricsRecord::validate() const {
  auto rate = [](std::optional<double> v, const char* name) {
    if (v) require(*v >= 0.0 && *v <= 1.0, ErrorKind::Contract, std::string(name) + " outside [0,1]");
  };
  rate(asr, "ASR");
  rate(cda, "CDA");
  rate(label_inf_accuracy, "label-inference accuracy");
  if (delta) require(*delta >= 0.0, ErrorKind::Contract, "delta must be non-negative");
}

std::string record_to_json(const MetricsRecord& r) {
  r.validate();
  nlohmann::ordered_json j;
  j["run_id"] = r.run_id;
  j["config_hash"] = r.config_hash;
  j["round"] = r.round;
  j["epoch"] = r.epoch;
  j["cda"] = r.cda;
  if (r.asr) j["asr"] = *r.asr;
  if (r.label_inf_accuracy) j["label_inf_accuracy"] = *r.label_inf_accuracy;
  if (r.delta) j["delta"] = *r.delta;
  if (r.rho) j["rho"] = *r.rho;
  if (r.proximity) j["proximity"] = *r.proximity;
  return j.dump();
}

double accuracy(const Matrix<float>& logits, std::span<const int> labels) {
  require(logits.rows() == labels.size(), ErrorKind::Alignment, "logit rows != label count");
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (strict_argmax(std::span<const float>(logits.row(r))) == labels[r]) ++hit;
  }
  return double(hit) / double(labels.size());
}

Matrix<float> predict_images(const SplitState& state, const Matrix<float>& images, const ImageShape& shape) {
  const auto& scheme = state.data->scheme();
  std::vector<Matrix<float>> slices;
  for (std::size_t k = 0; k < scheme.num_clients(); ++k) {
    const Rect& r = scheme.slices[k];
    Matrix<float> m(images.rows(), shape.channels * r.area());
    for (std::size_t i = 0; i < images.rows(); ++i) extract_rect(images.row(i), shape, r, m.row(i));
    slices.push_back(std::move(m));
  }
  return predict_logits(state, slices);
}

double clean_data_accuracy(const SplitState& state, const VerticalDataset& test) {
  std::vector<Matrix<float>> slices;
  for (std::size_t k = 0; k < test.num_clients(); ++k) slices.push_back(test.client_view(k));
  return accuracy(predict_logits(state, slices), std::span<const int>(test.server_labels()));
}

double attack_success_rate(const SplitState& state, const RawDataset& test,
                           const std::map<std::size_t, AdversaryTriggerShare>& shares, double gamma, bool clip,
                           int target_label, std::size_t sample_count, std::uint64_t seed) {
  std::vector<std::size_t> pool;
  for (std::size_t i = 0; i < test.size(); ++i)
    if (test.labels[i] != target_label) pool.push_back(i);
  require(sample_count <= pool.size(), ErrorKind::Configuration, "not enough non-target test points for ASR");
  if (sample_count == 0) return 0.0;
  Rng rng = make_rng(seed, {kTagEval});
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(sample_count);
  Matrix<float> imgs = gather_rows(test.images, std::span<const std::size_t>(pool));
  for (std::size_t r = 0; r < imgs.rows(); ++r)
    implant_full(imgs.row(r), test.shape, shares, gamma, clip, derive_seed(seed, {kTagEval, pool[r]}));
  const Matrix<float> logits = predict_images(state, imgs, test.shape);
  std::vector<int> target(sample_count, target_label);
  return accuracy(logits, std::span<const int>(target));
}

std::optional<double> label_inference_accuracy(const std::vector<std::size_t>& inferred,
                                               const std::vector<int>& labels, int target_label) {
  if (inferred.empty()) return std::nullopt;
  std::size_t hit = 0;
  for (std::size_t i : inferred) {
    require(i < labels.size(), ErrorKind::Contract, "inferred index out of range");
    if (labels[i] == target_label) ++hit;
  }
  return double(hit) / double(inferred.size());
}

std::optional<double> label_inference_recall(const std::vector<std::size_t>& inferred,
                                             const std::vector<int>& labels, int target_label) {
  const auto total = std::count(labels.begin(), labels.end(), target_label);
  if (total == 0) return std::nullopt;
  std::size_t hit = 0;
  for (std::size_t i : inferred)
    if (i < labels.size() && labels[i] == target_label) ++hit;
  return double(hit) / double(total);
}

double embedding_proximity(const Matrix<float>& poisoned, const Matrix<float>& target) {
  require(poisoned.rows() > 0 && target.rows() > 0, ErrorKind::Contract, "embedding sets must be nonempty");
  require(poisoned.cols() == target.cols(), ErrorKind::Contract, "embedding widths differ");
  double s = 0;
  for (std::size_t c = 0; c < poisoned.cols(); ++c) {
    double a = 0, b = 0;
    for (std::size_t r = 0; r < poisoned.rows(); ++r) a += poisoned(r, c);
    for (std::size_t r = 0; r < target.rows(); ++r) b += target(r, c);
    const double d = a / double(poisoned.rows()) - b / double(target.rows());
    s += d * d;
  }
  return std::sqrt(s);
}

namespace {

template <typename T>
double delta_impl(std::span<const T> a, std::span<const T> b) {
  require(a.size() == b.size(), ErrorKind::Contract, "gradient shapes differ");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

double sqnorm(std::span<const double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  return s;
}

}  // namespace

double gradient_perturbation_delta(std::span<const float> a, std::span<const float> b) { return delta_impl(a, b); }
double gradient_perturbation_delta(std::span<const double> a, std::span<const double> b) {
  return delta_impl(a, b);
}

void TheoremParams::validate() const {
  require(F0 >= 0 && L >= 0 && Gamma >= 0 && delta >= 0 && K >= 0, ErrorKind::Contract,
          "theorem parameters must be non-negative");
  require(!eta.empty(), ErrorKind::Precondition, "empty learning-rate schedule");
  for (double e : eta) {
    require(e > 0.0, ErrorKind::Precondition, "learning rates must be positive");
    require(L == 0.0 || e <= 1.0 / (4.0 * L) * (1 + 1e-12), ErrorKind::Precondition,
            "learning rate exceeds 1/(4L)");
  }
}

double theorem1_bound(const TheoremParams& p) {
  p.validate();
  double s1 = 0, s2 = 0;
  for (double e : p.eta) {
    s1 += e;
    s2 += e * e;
  }
  return 4.0 * p.F0 / s1 + 4.0 * (s2 / s1) * (p.K * p.L * p.Gamma + p.K * p.L * p.delta) + 2.0 * p.K * p.delta;
}

TheoremParams estimate_theorem_params(const EstimationInput& in) {
  require(in.samples.size() >= 2, ErrorKind::Estimation, "need at least two gradient samples");
  TheoremParams p;
  p.F0 = in.F0;
  p.K = double(in.blocks.size());
  p.eta = in.eta;
  for (std::size_t i = 0; i < in.samples.size(); ++i)
    for (std::size_t j = i + 1; j < in.samples.size(); ++j) {
      const auto& a = in.samples[i];
      const auto& b = in.samples[j];
      const double dx = delta_impl(std::span<const double>(a.theta), std::span<const double>(b.theta));
      if (dx <= 1e-12) continue;
      p.L = std::max(p.L, delta_impl(std::span<const double>(a.full_grad), std::span<const double>(b.full_grad)) / dx);
    }
  for (const auto& s : in.samples) {
    if (s.batch_grads.empty()) continue;
    for (auto [off, len] : in.blocks) {
      double acc = 0;
      for (const auto& g : s.batch_grads)
        for (std::size_t i = off; i < off + len; ++i) acc += (g[i] - s.full_grad[i]) * (g[i] - s.full_grad[i]);
      p.Gamma = std::max(p.Gamma, acc / double(s.batch_grads.size()));
    }
  }
  for (double d : in.perturbations) p.delta = std::max(p.delta, d * d);
  return p;
}

namespace {

struct Toy {
  std::size_t n, d;
  std::vector<double> x1, x2, y;  // n×d row-major
  std::vector<bool> poisoned;
  double ridge, trigger;

  std::size_t dim() const { return 2 * d + 2; }

  // Gradient of the mean squared loss over `idx` plus ridge; returns the loss.
  double grad(const std::vector<double>& th, std::span<const std::size_t> idx, bool attack,
              std::vector<double>& g) const {
    g.assign(dim(), 0.0);
    double loss = 0;
    const double a = th[2 * d], b = th[2 * d + 1];
    for (std::size_t i : idx) {
      const double shift = attack && poisoned[i] ? trigger : 0.0;
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) s += th[j] * (x1[i * d + j] + shift) + th[d + j] * x2[i * d + j];
      const double ts = std::tanh(s);
      const double r = a * s + b * ts - y[i];
      loss += 0.5 * r * r;
      const double ds = r * (a + b * (1 - ts * ts));
      for (std::size_t j = 0; j < d; ++j) {
        g[j] += ds * (x1[i * d + j] + shift);
        g[d + j] += ds * x2[i * d + j];
      }
      g[2 * d] += r * s;
      g[2 * d + 1] += r * ts;
    }
    const double inv = 1.0 / double(idx.size());
    double reg = 0;
    for (std::size_t j = 0; j < dim(); ++j) {
      g[j] = g[j] * inv + ridge * th[j];
      reg += th[j] * th[j];
    }
    return loss * inv + 0.5 * ridge * reg;
  }
};

}  // namespace

ToyReport run_theorem_toy(const ToyConfig& cfg) {
  require(cfg.samples >= cfg.batch_size && cfg.batch_size > 0, ErrorKind::Configuration, "invalid toy batch size");
  require(cfg.rounds >= 1 && cfg.sample_every >= 1, ErrorKind::Configuration, "invalid toy schedule");
  Rng rng = make_rng(cfg.seed, {kTagToy});
  std::normal_distribution<double> nd(0.0, 1.0);
  Toy toy{cfg.samples, cfg.features_per_client, {}, {}, {}, {}, cfg.ridge, cfg.trigger};
  const std::size_t n = toy.n, d = toy.d;
  std::vector<double> w(2 * d);
  for (double& v : w) v = nd(rng) * 0.5;
  toy.x1.resize(n * d);
  toy.x2.resize(n * d);
  toy.y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      toy.x1[i * d + j] = nd(rng);
      toy.x2[i * d + j] = nd(rng);
      s += w[j] * toy.x1[i * d + j] + w[d + j] * toy.x2[i * d + j];
    }
    toy.y[i] = s + 0.5 * std::tanh(s) + 0.1 * nd(rng);
  }
  toy.poisoned.assign(n, false);
  if (cfg.poisoning) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto count = static_cast<std::size_t>(std::lround(cfg.poison_fraction * double(n)));
    for (std::size_t i = 0; i < count; ++i) toy.poisoned[perm[i]] = true;
  }

  std::vector<double> theta(toy.dim());
  for (double& v : theta) v = nd(rng) * 0.3;
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});

  // Pilot smoothness estimate on the benign objective around the start point.
  ToyReport rep;
  std::vector<double> ga, gb;
  std::uniform_real_distribution<double> box(-1.5, 1.5);
  for (int k = 0; k < 200; ++k) {
    std::vector<double> p = theta, q = theta;
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] += box(rng);
      q[j] = p[j] + 0.1 * box(rng);
    }
    toy.grad(p, all, false, ga);
    toy.grad(q, all, false, gb);
    rep.pilot_L = std::max(rep.pilot_L, delta_impl(std::span<const double>(ga), std::span<const double>(gb)) /
                                            delta_impl(std::span<const double>(p), std::span<const double>(q)));
  }
  const double eta = 1.0 / (8.0 * rep.pilot_L);

  EstimationInput est;
  est.blocks = {{0, d}, {d, d}, {2 * d, 2}};
  std::vector<double> g_full, g_att, g_ben;
  est.F0 = toy.grad(theta, all, false, g_full);
  rep.min_grad_sq = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    toy.grad(theta, all, false, g_full);
    rep.min_grad_sq = std::min(rep.min_grad_sq, sqnorm(g_full));
    if (t % cfg.sample_every == 0) {
      GradientSample s{theta, g_full, {}};
      for (std::size_t k = 0; k < cfg.gradient_draws; ++k) {
        const auto idx = minibatch_indices(n, cfg.batch_size, k, derive_seed(cfg.seed, {kTagToy, t}));
        toy.grad(theta, idx, false, ga);
        s.batch_grads.push_back(ga);
      }
      est.samples.push_back(std::move(s));
    }
    const auto idx = minibatch_indices(n, cfg.batch_size, t, cfg.seed);
    toy.grad(theta, idx, true, g_att);
    toy.grad(theta, idx, false, g_ben);
    est.perturbations.push_back(delta_impl(std::span<const double>(g_att), std::span<const double>(g_ben)));
    for (std::size_t j = 0; j < theta.size(); ++j) theta[j] -= eta * g_att[j];
    est.eta.push_back(eta);
  }
  rep.params = estimate_theorem_params(est);
  rep.params.L = std::max(rep.params.L, rep.pilot_L);
  rep.bound = theorem1_bound(rep.params);
  rep.holds = rep.min_grad_sq <= rep.bound;
  return rep;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), ErrorKind::Contract, "spearman inputs differ in length");
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  auto ranks = [n](std::span<const double> v) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = 0.5 * double(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / double(n);
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / double(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace vflbd
