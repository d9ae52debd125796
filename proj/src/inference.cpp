#include "vflbd/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "vflbd/simd/kernels.hpp"

namespace vflbd {

void VaeLossConfig::validate() const {
  require(lambda > 0.0 && lambda < 1.0, ErrorKind::Configuration, "lambda must lie in (0,1)");
  require(lambda_hat >= 0.0, ErrorKind::Configuration, "lambda_hat must be non-negative");
  require(margin > 0.0, ErrorKind::Configuration, "triplet margin must be positive");
}

void InferenceConfig::validate(int num_classes) const {
  require(target_label >= 0 && target_label < num_classes, ErrorKind::Configuration, "target label outside classes");
  require(beta >= 0.0 && beta <= 1.0, ErrorKind::Configuration, "beta must lie in [0,1]");
}

double kl_divergence_gaussian(const Matrix<double>& mu, const Matrix<double>& sigma) {
  require(mu.rows() == sigma.rows() && mu.cols() == sigma.cols(), ErrorKind::Contract, "mu/sigma shape mismatch");
  double total = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const double m = mu.storage()[i], s = sigma.storage()[i];
    require(s > 0.0, ErrorKind::Domain, "sigma must be positive");
    total += 0.5 * (m * m + s * s - 1.0 - 2.0 * std::log(s));
  }
  return mu.rows() ? total / double(mu.rows()) : 0.0;
}

template <typename T>
T kl_from_logvar(const Matrix<T>& mu, const Matrix<T>& logvar, Matrix<T>* d_mu, Matrix<T>* d_logvar) {
  require(mu.rows() == logvar.rows() && mu.cols() == logvar.cols(), ErrorKind::Contract, "mu/logvar shape mismatch");
  const std::size_t b = std::max<std::size_t>(mu.rows(), 1);
  if (d_mu) *d_mu = Matrix<T>(mu.rows(), mu.cols());
  if (d_logvar) *d_logvar = Matrix<T>(mu.rows(), mu.cols());
  double total = 0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    const T m = mu.storage()[i], lv = logvar.storage()[i], ev = std::exp(lv);
    total += 0.5 * double(m * m + ev - T(1) - lv);
    if (d_mu) d_mu->storage()[i] = m / T(b);
    if (d_logvar) d_logvar->storage()[i] = T(0.5) * (ev - T(1)) / T(b);
  }
  return T(total / double(b));
}

template <typename T>
T reconstruction_loss(const Matrix<T>& x, const Matrix<T>& xbar, Matrix<T>* d_xbar) {
  require(x.rows() == xbar.rows() && x.cols() == xbar.cols(), ErrorKind::Contract, "reconstruction shape mismatch");
  const std::size_t b = std::max<std::size_t>(x.rows(), 1);
  if (d_xbar) *d_xbar = Matrix<T>(x.rows(), x.cols());
  double total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T d = xbar.storage()[i] - x.storage()[i];
    total += double(d) * double(d);
    if (d_xbar) d_xbar->storage()[i] = T(2) * d / T(b);
  }
  return T(total / double(b));
}

template <typename T>
T vae_loss(const Matrix<T>& x, const Matrix<T>& xbar, const Matrix<T>& mu, const Matrix<T>& logvar,
           const VaeLossConfig& cfg) {
  const T lam = T(cfg.lambda);
  return lam * reconstruction_loss(x, xbar) + (T(1) - lam) * kl_from_logvar(mu, logvar);
}

namespace {

template <typename T>
T sqdist_rows(const Matrix<T>& m, std::size_t a, std::size_t b) {
  return simd::sqdist(m.row(a).data(), m.row(b).data(), m.cols());
}

}  // namespace

template <typename T>
std::vector<Triplet> batch_hard_triplets(const Matrix<T>& embeddings, std::span<const int> labels,
                                         std::span<const std::size_t> anchors) {
  require(labels.size() == embeddings.rows(), ErrorKind::Alignment, "label count != embedding rows");
  std::vector<Triplet> out;
  for (std::size_t a : anchors) {
    require(a < embeddings.rows(), ErrorKind::Contract, "anchor out of range");
    std::size_t best_p = 0, best_n = 0;
    T dp = T(-1), dn = std::numeric_limits<T>::infinity();
    bool has_p = false, has_n = false;
    for (std::size_t j = 0; j < embeddings.rows(); ++j) {
      if (j == a) continue;
      const T d = sqdist_rows(embeddings, a, j);
      if (labels[j] == labels[a]) {
        if (!has_p || d > dp) {
          dp = d;
          best_p = j;
          has_p = true;
        }
      } else if (!has_n || d < dn) {
        dn = d;
        best_n = j;
        has_n = true;
      }
    }
    if (has_p && has_n) out.push_back({a, best_p, best_n});
  }
  return out;
}

template <typename T>
T triplet_loss(std::span<const T> a, std::span<const T> p, std::span<const T> n, T margin) {
  require(a.size() == p.size() && a.size() == n.size(), ErrorKind::Contract, "triplet width mismatch");
  const T v = simd::sqdist(a.data(), p.data(), a.size()) - simd::sqdist(a.data(), n.data(), a.size()) + margin;
  return v > T(0) ? v : T(0);
}

template <typename T>
T mean_triplet_loss(const Matrix<T>& e, const std::vector<Triplet>& triples, T margin, Matrix<T>* d_e) {
  if (d_e) *d_e = Matrix<T>(e.rows(), e.cols());
  if (triples.empty()) return T(0);
  const T inv = T(1) / T(triples.size());
  double total = 0;
  for (const Triplet& t : triples) {
    const T l = triplet_loss(e.row(t.anchor), e.row(t.positive), e.row(t.negative), margin);
    total += double(l);
    if (!d_e || l <= T(0)) continue;
    for (std::size_t c = 0; c < e.cols(); ++c) {
      const T a = e(t.anchor, c), p = e(t.positive, c), n = e(t.negative, c);
      (*d_e)(t.anchor, c) += T(2) * (n - p) * inv;
      (*d_e)(t.positive, c) += T(2) * (p - a) * inv;
      (*d_e)(t.negative, c) += T(2) * (a - n) * inv;
    }
  }
  return T(total) * inv;
}

template <typename T>
T final_loss(const Matrix<T>& x, const Matrix<T>& xbar, const Matrix<T>& mu, const Matrix<T>& logvar,
             const std::vector<Triplet>& triples, const VaeLossConfig& cfg) {
  return vae_loss(x, xbar, mu, logvar, cfg) + T(cfg.lambda_hat) * mean_triplet_loss(mu, triples, T(cfg.margin));
}

namespace {

template <typename T>
Matrix<T> rows_of(const Matrix<T>& m, const std::vector<std::size_t>& rows) {
  return gather_rows(m, std::span<const std::size_t>(rows));
}

template <typename T>
void scatter_rows(const Matrix<T>& src, const std::vector<std::size_t>& rows, Matrix<T>& dst) {
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < src.cols(); ++c) dst(rows[r], c) += src(r, c);
}

}  // namespace

template <typename T>
VaeObjective<T> vae_objective(const VaeModel<T>& vae, const Matrix<T>& x, const std::vector<std::size_t>& rec_rows,
                              const std::vector<Triplet>* triples, const VaeLossConfig& cfg,
                              std::uint64_t noise_seed) {
  auto fwd = vae_forward(vae, x, noise_seed);
  const T lam = T(cfg.lambda);
  Matrix<T> d_xbar(x.rows(), x.cols()), d_mu(x.rows(), vae.latent_dim), d_lv(x.rows(), vae.latent_dim);
  Matrix<T> g_rec, g_mu, g_lv;
  const T rec = reconstruction_loss(rows_of(x, rec_rows), rows_of(fwd.xbar, rec_rows), &g_rec);
  const T kl = kl_from_logvar(rows_of(fwd.mu, rec_rows), rows_of(fwd.logvar, rec_rows), &g_mu, &g_lv);
  for (T& v : g_rec.storage()) v *= lam;
  for (T& v : g_mu.storage()) v *= (T(1) - lam);
  for (T& v : g_lv.storage()) v *= (T(1) - lam);
  scatter_rows(g_rec, rec_rows, d_xbar);
  scatter_rows(g_mu, rec_rows, d_mu);
  scatter_rows(g_lv, rec_rows, d_lv);
  VaeObjective<T> out;
  out.loss = lam * rec + (T(1) - lam) * kl;
  if (triples && cfg.lambda_hat > 0.0) {
    Matrix<T> g_trip;
    const T trip = mean_triplet_loss(fwd.mu, *triples, T(cfg.margin), &g_trip);
    const T w = T(cfg.lambda_hat);
    for (std::size_t i = 0; i < d_mu.size(); ++i) d_mu.storage()[i] += w * g_trip.storage()[i];
    out.loss += w * trip;
  }
  out.grads = vae_backward(vae, fwd, d_xbar, d_mu, d_lv);
  return out;
}

namespace {

struct VaeOptimizer {
  AdamState<float> enc, dec;
  AdamConfig cfg;

  void step(VaeModel<float>& vae, const VaeGradients<float>& g) {
    adam_step(enc, std::span<float>(vae.encoder.parameters().values), std::span<const float>(g.encoder), cfg);
    adam_step(dec, std::span<float>(vae.decoder.parameters().values), std::span<const float>(g.decoder), cfg);
  }
};

double vae_step(VaeModel<float>& vae, VaeOptimizer& opt, const Matrix<float>& x,
                const std::vector<std::size_t>& rec_rows, const std::vector<Triplet>* triples,
                const VaeLossConfig& cfg, std::uint64_t noise_seed) {
  auto obj = vae_objective(vae, x, rec_rows, triples, cfg, noise_seed);
  opt.step(vae, obj.grads);
  return double(obj.loss);
}

}  // namespace

VaeTrainResult train_adversary_vae(const Matrix<float>& features, const AuxiliaryLabels& aux,
                                   const VaeLossConfig& cfg, const VaeTrainOptions& opt, std::uint64_t seed) {
  cfg.validate();
  std::vector<std::size_t> targets, others;
  for (auto [i, y] : aux.entries) {
    require(i < features.rows(), ErrorKind::Contract, "aux index outside the view");
    (y == aux.target_label ? targets : others).push_back(i);
  }
  require(targets.size() >= 2, ErrorKind::Scarcity, "need at least two target-label aux samples");
  require(!others.empty(), ErrorKind::Scarcity, "need at least one non-target aux sample");

  Rng rng = make_rng(seed, {kTagVae});
  VaeTrainResult res{make_vae<float>(ImageShape{1, 1, features.cols()}, opt.hidden, opt.latent_dim, rng), {}};
  VaeOptimizer optimizer;
  optimizer.cfg.lr = opt.lr;

  for (std::size_t step = 0; step < opt.steps; ++step) {
    std::vector<std::size_t> pos = targets, neg = others;
    std::shuffle(pos.begin(), pos.end(), rng);
    std::shuffle(neg.begin(), neg.end(), rng);
    if (pos.size() > opt.batch_size) pos.resize(opt.batch_size);
    if (neg.size() > opt.negatives_per_batch) neg.resize(opt.negatives_per_batch);
    std::vector<std::size_t> rows = pos;
    rows.insert(rows.end(), neg.begin(), neg.end());
    std::vector<int> labels;
    for (std::size_t i : rows) labels.push_back(aux.entries.at(i));
    std::vector<std::size_t> anchor_rows(pos.size());
    std::iota(anchor_rows.begin(), anchor_rows.end(), std::size_t{0});
    std::vector<std::size_t> rec_rows = anchor_rows;
    if (opt.reconstruction == ReconstructionSet::Auxiliary) {
      rec_rows.resize(rows.size());
      std::iota(rec_rows.begin(), rec_rows.end(), std::size_t{0});
    }
    const Matrix<float> x = rows_of(features, rows);
    const auto triples =
        batch_hard_triplets(vae_encode_mean(res.vae, x), std::span<const int>(labels), std::span(anchor_rows));
    res.loss_series.push_back(vae_step(res.vae, optimizer, x, rec_rows, &triples, cfg,
                                       derive_seed(seed, {kTagVae, step})));
  }
  return res;
}

AuxClassifier train_aux_classifier(const VaeModel<float>& vae, const Matrix<float>& features,
                                   const AuxiliaryLabels& aux, int num_classes, const ClassifierOptions& opt,
                                   std::uint64_t seed) {
  const auto idx = aux.indices();
  std::vector<int> labels;
  for (std::size_t i : idx) labels.push_back(aux.entries.at(i));
  require(std::set<int>(labels.begin(), labels.end()).size() >= 2, ErrorKind::Degenerate,
          "auxiliary set holds a single class");
  const Matrix<float> mu = vae_encode_mean(vae, rows_of(features, idx));
  auto layers = parse_architecture(opt.hidden);
  layers.push_back({LayerSpec::Kind::Dense, std::size_t(num_classes), 0});
  AuxClassifier clf{Network<float>(ImageShape{1, 1, vae.latent_dim}, std::move(layers)), num_classes};
  Rng rng = make_rng(seed, {kTagClassifier});
  clf.net.initialize(rng);
  AdamState<float> state;
  AdamConfig acfg;
  acfg.lr = opt.lr;
  std::vector<float> grad(clf.net.num_parameters());
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    typename Network<float>::Tape tape;
    const auto logits = clf.net.forward(mu, &tape);
    Matrix<float> dlogits;
    cross_entropy(logits, std::span<const int>(labels), &dlogits);
    std::fill(grad.begin(), grad.end(), 0.0f);
    clf.net.backward(tape, dlogits, grad, false);
    adam_step(state, std::span<float>(clf.net.parameters().values), std::span<const float>(grad), acfg);
  }
  return clf;
}

Matrix<float> classify(const VaeModel<float>& vae, const AuxClassifier& clf, const Matrix<float>& features) {
  return softmax_rows(clf.net.forward(vae_encode_mean(vae, features)));
}

InferenceResult infer_local(const VaeModel<float>& vae, const AuxClassifier& clf, const Matrix<float>& features,
                            const AuxiliaryLabels& aux, const InferenceConfig& cfg, std::size_t owner) {
  cfg.validate(clf.num_classes);
  const Matrix<float> probs = classify(vae, clf, features);
  InferenceResult res;
  res.owner = owner;
  for (std::size_t i = 0; i < features.rows(); ++i) {
    const double p = probs(i, std::size_t(cfg.target_label));
    if (auto it = aux.entries.find(i); it != aux.entries.end()) {
      if (it->second == cfg.target_label) {
        res.indices.push_back(i);
        res.confidence[i] = p;
      }
      continue;
    }
    if (strict_argmax(probs.row(i)) == cfg.target_label && p >= cfg.beta) {
      res.indices.push_back(i);
      res.confidence[i] = p;
    }
  }
  return res;
}

VaeTrainResult retrain_local_vae(const VaeModel<float>& source, const Matrix<float>& slices, ImageShape slice_shape,
                                 const VaeLossConfig& cfg, const VaeTrainOptions& opt, std::size_t epochs,
                                 std::uint64_t seed) {
  require(slices.rows() > 0, ErrorKind::Scarcity, "inferred set is empty");
  require(slices.cols() == slice_shape.size(), ErrorKind::Contract, "slice rows do not match slice shape");
  Rng rng = make_rng(seed, {kTagVae, 1});
  VaeTrainResult res{make_vae<float>(ImageShape{1, 1, slice_shape.size()}, opt.hidden, source.latent_dim, rng), {}};
  res.vae.encoder.copy_matching_tail(source.encoder);
  res.vae.decoder.copy_matching_head(source.decoder);
  VaeOptimizer optimizer;
  optimizer.cfg.lr = opt.lr;
  const std::size_t n = slices.rows(), bs = std::min(opt.batch_size, n);
  std::size_t step = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < n; s += bs, ++step, ++batches) {
      std::vector<std::size_t> rows(order.begin() + std::ptrdiff_t(s),
                                    order.begin() + std::ptrdiff_t(std::min(n, s + bs)));
      std::vector<std::size_t> all(rows.size());
      std::iota(all.begin(), all.end(), std::size_t{0});
      epoch_loss += vae_step(res.vae, optimizer, rows_of(slices, rows), all, nullptr, cfg,
                             derive_seed(seed, {kTagVae, 2, step}));
    }
    res.loss_series.push_back(epoch_loss / double(batches));
  }
  return res;
}

ConsensusOutcome collaborative_inference(const std::map<std::size_t, InferenceResult>& local,
                                         const AdversaryGraph& g, VoteRule rule) {
  ConsensusOutcome out;
  out.leader = elect_leader(g);
  if (g.size() == 1) {
    const auto it = local.find(out.leader);
    require(it != local.end(), ErrorKind::Connectivity, "missing local inference result");
    out.global = it->second.indices;
    out.per_adversary[out.leader] = out.global;
    return out;
  }
  std::map<std::size_t, std::vector<std::size_t>> payloads;
  for (const auto& [id, r] : local) payloads[id] = r.indices;
  VoteTally tally;
  for (auto& [id, set] : bfs_collect(g, out.leader, payloads)) tally.sets.push_back(std::move(set));
  out.global = majority_vote(tally, g.size(), rule);
  out.per_adversary = distribute_results(g, out.leader, out.global);
  return out;
}

#define VFLBD_INSTANTIATE(T)                                                                                  \
  template T kl_from_logvar<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>*, Matrix<T>*);                   \
  template T reconstruction_loss<T>(const Matrix<T>&, const Matrix<T>&, Matrix<T>*);                          \
  template T vae_loss<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, const Matrix<T>&,              \
                         const VaeLossConfig&);                                                               \
  template std::vector<Triplet> batch_hard_triplets<T>(const Matrix<T>&, std::span<const int>,                \
                                                       std::span<const std::size_t>);                         \
  template T triplet_loss<T>(std::span<const T>, std::span<const T>, std::span<const T>, T);                  \
  template T mean_triplet_loss<T>(const Matrix<T>&, const std::vector<Triplet>&, T, Matrix<T>*);              \
  template T final_loss<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&, const Matrix<T>&,            \
                           const std::vector<Triplet>&, const VaeLossConfig&);                          \
  template VaeObjective<T> vae_objective<T>(const VaeModel<T>&, const Matrix<T>&,                            \
                                            const std::vector<std::size_t>&, const std::vector<Triplet>*,    \
                                            const VaeLossConfig&, std::uint64_t);

VFLBD_INSTANTIATE(float)
VFLBD_INSTANTIATE(double)

#undef VFLBD_INSTANTIATE

}  // namespace vflbd
