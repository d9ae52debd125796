#include "vflbd/inference.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <numeric>
#include <set>

using namespace vflbd;

namespace {

Matrix<double> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix<double> m(r, c);
  for (double& v : m.storage()) v = u(rng);
  return m;
}

// Encoder emitting μ = x and log σ² = 0 on 2-D inputs.
VaeModel<float> identity_encoder_vae() {
  Rng rng(1);
  auto vae = make_vae<float>({1, 1, 2}, "", 2, rng);
  vae.encoder = Network<float>({1, 1, 2}, parse_architecture("dense:4"));
  auto& p = vae.encoder.parameters().values;
  std::fill(p.begin(), p.end(), 0.0f);
  p[0] = 1;
  p[3] = 1;
  return vae;
}

// Two Gaussian blobs; class 0 around (+c, +c), class 1 around (−c, −c).
Matrix<float> blobs(std::size_t n, float c, std::vector<int>& labels, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> noise(0, 0.5f);
  Matrix<float> x(n, 2);
  labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    labels[i] = int(i % 2);
    const float s = labels[i] == 0 ? c : -c;
    x(i, 0) = s + noise(rng);
    x(i, 1) = s + noise(rng);
  }
  return x;
}

AuxiliaryLabels aux_from(const std::vector<int>& labels, std::size_t count) {
  AuxiliaryLabels a;
  for (std::size_t i = 0; i < count; ++i) a.entries[i] = labels[i];
  return a;
}

std::vector<std::size_t> exhaustive_triplet_positive(const Matrix<double>& e, const std::vector<int>& y, std::size_t a,
                                                     bool positive) {
  std::vector<std::size_t> best;
  double best_d = positive ? -1 : INFINITY;
  for (std::size_t j = 0; j < e.rows(); ++j) {
    if (j == a) continue;
    if ((y[j] == y[a]) != positive) continue;
    double d = 0;
    for (std::size_t c = 0; c < e.cols(); ++c) d += (e(a, c) - e(j, c)) * (e(a, c) - e(j, c));
    if (positive ? d > best_d : d < best_d) {
      best_d = d;
      best = {j};
    }
  }
  return best;
}

}  // namespace

TEST(Kl, ClosedFormExamples) {
  EXPECT_EQ(kl_divergence_gaussian(Matrix<double>(1, 3, 0.0), Matrix<double>(1, 3, 1.0)), 0.0);
  Matrix<double> mu(1, 2, 0.0);
  mu(0, 0) = 1;
  EXPECT_NEAR(kl_divergence_gaussian(mu, Matrix<double>(1, 2, 1.0)), 0.5, 1e-15);
  try {
    kl_divergence_gaussian(mu, Matrix<double>(1, 2, 0.0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Domain);
  }
}

TEST(Kl, MatchesMonteCarloEstimate) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 3; ++trial) {
    const auto mu = random_matrix(1, 4, 100 + trial, -1.5, 1.5);
    const auto sigma = random_matrix(1, 4, 200 + trial, 0.3, 2.0);
    const double closed = kl_divergence_gaussian(mu, sigma);
    std::normal_distribution<double> n(0, 1);
    double acc = 0;
    const int draws = 1000000;
    for (int s = 0; s < draws; ++s) {
      double logq_minus_logp = 0;
      for (std::size_t c = 0; c < 4; ++c) {
        const double e = n(rng), z = mu(0, c) + sigma(0, c) * e;
        logq_minus_logp += -0.5 * e * e - std::log(sigma(0, c)) + 0.5 * z * z;
      }
      acc += logq_minus_logp;
    }
    EXPECT_NEAR(acc / draws, closed, 0.01 * closed) << "trial " << trial;
  }
}

TEST(Kl, LogvarFormAgreesWithSigmaForm) {
  const auto mu = random_matrix(5, 3, 1), lv = random_matrix(5, 3, 2);
  Matrix<double> sigma(5, 3);
  for (std::size_t i = 0; i < lv.size(); ++i) sigma.storage()[i] = std::exp(0.5 * lv.storage()[i]);
  EXPECT_NEAR(kl_from_logvar(mu, lv), kl_divergence_gaussian(mu, sigma), 1e-12);
}

TEST(Reconstruction, Arithmetic) {
  const auto x = random_matrix(3, 4, 1);
  EXPECT_EQ(reconstruction_loss(x, x), 0.0);
  Matrix<double> a(1, 4, 0.0), b(1, 4, 0.5);
  EXPECT_DOUBLE_EQ(reconstruction_loss(a, b), 1.0);
  Matrix<double> g;
  reconstruction_loss(x, Matrix<double>(3, 4, 0.25), &g);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g.storage()[i], 2 * (0.25 - x.storage()[i]) / 3, 1e-15);
}

TEST(VaeLoss, ComponentsAndLimits) {
  const auto x = random_matrix(4, 5, 1, 0, 1), xbar = random_matrix(4, 5, 2, 0, 1);
  const auto mu = random_matrix(4, 3, 3), lv = random_matrix(4, 3, 4);
  VaeLossConfig cfg;
  EXPECT_NEAR(vae_loss(x, xbar, mu, lv, cfg), 0.9 * reconstruction_loss(x, xbar) + 0.1 * kl_from_logvar(mu, lv),
              1e-12);
  cfg.lambda = 0.999999;
  EXPECT_NEAR(vae_loss(x, xbar, mu, lv, cfg), reconstruction_loss(x, xbar), 1e-5);
  EXPECT_EQ(vae_loss(x, x, Matrix<double>(4, 3, 0.0), Matrix<double>(4, 3, 0.0), VaeLossConfig{}), 0.0);
}

TEST(Triplet, ArithmeticExamples) {
  const std::vector<double> a{0, 0}, p1{std::sqrt(0.1), 0}, n1{std::sqrt(0.5), 0};
  EXPECT_NEAR(triplet_loss<double>(a, p1, n1, 0.2), 0.0, 1e-15);
  const std::vector<double> p2{std::sqrt(0.4), 0}, n2{0, std::sqrt(0.3)};
  EXPECT_NEAR(triplet_loss<double>(a, p2, n2, 0.2), 0.3, 1e-12);
  EXPECT_NEAR(triplet_loss<double>(a, p2, p2, 0.7), 0.7, 1e-15);
}

TEST(Triplet, BatchHardPicksFarthestPositiveAndLowestIndexTie) {
  Matrix<double> e(4, 1);
  e(0, 0) = 0;
  e(1, 0) = 0.1;
  e(2, 0) = 0.9;
  e(3, 0) = 0.5;
  const std::vector<int> y{0, 0, 0, 1};
  const std::vector<std::size_t> anchors{0};
  auto t = batch_hard_triplets(e, std::span<const int>(y), std::span<const std::size_t>(anchors));
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0].positive, 2u);

  Matrix<double> eq(4, 1, 1.0);
  eq(0, 0) = 0;
  const std::vector<int> y2{0, 0, 1, 1};
  t = batch_hard_triplets(eq, std::span<const int>(y2), std::span<const std::size_t>(anchors));
  ASSERT_EQ(t.size(), 1u);
  EXPECT_EQ(t[0].negative, 2u);
}

TEST(Triplet, BatchHardMatchesExhaustiveScan) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto e = random_matrix(64, 4, 50 + trial);
    std::vector<int> y(64);
    for (auto& v : y) v = int(rng() % 4);
    std::vector<std::size_t> anchors(64);
    std::iota(anchors.begin(), anchors.end(), std::size_t{0});
    const auto got = batch_hard_triplets(e, std::span<const int>(y), std::span<const std::size_t>(anchors));
    std::size_t k = 0;
    for (std::size_t a = 0; a < 64; ++a) {
      const auto p = exhaustive_triplet_positive(e, y, a, true), n = exhaustive_triplet_positive(e, y, a, false);
      if (p.empty() || n.empty()) continue;
      ASSERT_LT(k, got.size());
      EXPECT_EQ(got[k].anchor, a);
      EXPECT_EQ(got[k].positive, p[0]);
      EXPECT_EQ(got[k].negative, n[0]);
      ++k;
    }
    EXPECT_EQ(k, got.size());
  }
}

TEST(FinalLoss, ReducesToVaeLoss) {
  const auto x = random_matrix(6, 5, 1, 0, 1), xbar = random_matrix(6, 5, 2, 0, 1);
  const auto mu = random_matrix(6, 3, 3), lv = random_matrix(6, 3, 4);
  const std::vector<Triplet> triples{{0, 1, 2}, {3, 4, 5}};
  VaeLossConfig cfg;
  const double base = vae_loss(x, xbar, mu, lv, cfg);
  EXPECT_NEAR(final_loss(x, xbar, mu, lv, {}, cfg), base, 1e-15);
  EXPECT_NEAR(final_loss(x, xbar, mu, lv, triples, cfg), base + mean_triplet_loss(mu, triples, 0.4), 1e-12);
  cfg.lambda_hat = 0;
  EXPECT_NEAR(final_loss(x, xbar, mu, lv, triples, cfg), base, 1e-15);
}

TEST(AdversaryVae, LossDropsAndTrainingIsSeeded) {
  SyntheticSpec spec;
  spec.count = 100;
  spec.shape = {1, 6, 6};
  spec.num_classes = 4;
  const auto raw = make_synthetic(spec);
  AuxiliaryLabels aux;
  aux.target_label = 0;
  for (std::size_t i = 0; i < 100; ++i) aux.entries[i] = raw.labels[i];
  VaeTrainOptions opt;
  opt.hidden = "dense:32,relu";
  opt.latent_dim = 4;
  opt.steps = 200;
  const auto a = train_adversary_vae(raw.images, aux, VaeLossConfig{}, opt, 5);
  const double head = (a.loss_series[0] + a.loss_series[1] + a.loss_series[2]) / 3;
  const std::size_t n = a.loss_series.size();
  const double tail = (a.loss_series[n - 1] + a.loss_series[n - 2] + a.loss_series[n - 3]) / 3;
  EXPECT_LE(tail, 0.8 * head);
  const auto b = train_adversary_vae(raw.images, aux, VaeLossConfig{}, opt, 5);
  EXPECT_EQ(a.vae.encoder.parameters().values, b.vae.encoder.parameters().values);
  EXPECT_EQ(a.vae.decoder.parameters().values, b.vae.decoder.parameters().values);
}

TEST(AdversaryVae, ScarceTargetsAreRejected) {
  AuxiliaryLabels aux;
  aux.entries = {{0, 0}, {1, 1}, {2, 1}};
  try {
    train_adversary_vae(Matrix<float>(3, 4, 0.5f), aux, VaeLossConfig{}, VaeTrainOptions{}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Scarcity);
  }
}

TEST(AuxClassifier, SeparableFixtureIsLearnedExactly) {
  std::vector<int> labels;
  const auto x = blobs(100, 3.0f, labels, 1);
  const auto vae = identity_encoder_vae();
  const auto aux = aux_from(labels, 100);
  ClassifierOptions opt;
  opt.epochs = 200;
  const auto clf = train_aux_classifier(vae, x, aux, 2, opt, 3);
  const auto p = classify(vae, clf, x);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < 100; ++i) {
    float s = 0;
    for (float v : p.row(i)) s += v;
    EXPECT_NEAR(s, 1.0f, 1e-6f);
    correct += strict_argmax<float>(p.row(i)) == labels[i];
  }
  EXPECT_EQ(correct, 100u);
}

TEST(AuxClassifier, HeldOutBeatsMajorityBaseline) {
  std::vector<int> labels;
  const auto x = blobs(300, 0.8f, labels, 2);
  const auto vae = identity_encoder_vae();
  const auto clf = train_aux_classifier(vae, x, aux_from(labels, 100), 2, ClassifierOptions{}, 3);
  const auto p = classify(vae, clf, x);
  std::size_t correct = 0, majority = 0;
  for (std::size_t i = 100; i < 300; ++i) {
    correct += strict_argmax<float>(p.row(i)) == labels[i];
    majority += labels[i] == 0;
  }
  EXPECT_GE(correct, std::max(majority, 200 - majority));
}

TEST(AuxClassifier, SingleClassIsDegenerate) {
  const auto vae = identity_encoder_vae();
  AuxiliaryLabels aux;
  aux.entries = {{0, 1}, {1, 1}};
  try {
    train_aux_classifier(vae, Matrix<float>(2, 2, 0.1f), aux, 2, ClassifierOptions{}, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Degenerate);
  }
}

class LocalInference : public ::testing::Test {
 protected:
  void SetUp() override {
    x = blobs(200, 0.7f, labels, 4);
    aux = aux_from(labels, 40);
    aux.target_label = 0;
    ClassifierOptions opt;
    opt.epochs = 60;
    clf = train_aux_classifier(vae, x, aux, 2, opt, 3);
    probs = classify(vae, clf, x);
  }

  std::vector<std::size_t> recompute(double beta) const {
    std::set<std::size_t> out;
    for (auto [i, y] : aux.entries)
      if (y == 0) out.insert(i);
    for (std::size_t i = 0; i < x.rows(); ++i)
      if (!aux.contains(i) && strict_argmax<float>(probs.row(i)) == 0 && probs(i, 0) >= beta) out.insert(i);
    return {out.begin(), out.end()};
  }

  std::vector<int> labels;
  Matrix<float> x;
  AuxiliaryLabels aux;
  VaeModel<float> vae = identity_encoder_vae();
  AuxClassifier clf;
  Matrix<float> probs;
};

TEST_F(LocalInference, BetaExtremes) {
  float top = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) top = std::max(top, probs(i, 0));
  ASSERT_LT(top, 1.0f);
  const auto seeded = recompute(2.0);
  EXPECT_EQ(infer_local(vae, clf, x, aux, {0, 1.0}).indices, seeded);
  const auto all = infer_local(vae, clf, x, aux, {0, 0.0}).indices;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const bool expect = (aux.contains(i) && labels[i] == 0) || (!aux.contains(i) && strict_argmax<float>(probs.row(i)) == 0);
    EXPECT_EQ(std::binary_search(all.begin(), all.end(), i), expect);
  }
}

TEST_F(LocalInference, MatchesExhaustiveRecompute) {
  for (double beta : {0.5, 0.7, 0.9, 0.99}) {
    const auto r = infer_local(vae, clf, x, aux, {0, beta}, 3);
    EXPECT_EQ(r.owner, 3u);
    EXPECT_EQ(r.indices, recompute(beta)) << "beta " << beta;
    for (auto [i, c] : r.confidence) {
      EXPECT_GE(c, 0.0);
      EXPECT_LE(c, 1.0);
    }
  }
}

TEST(Retrain, ShapeAndLossDecrease) {
  SyntheticSpec spec;
  spec.count = 120;
  spec.shape = {1, 6, 6};
  const auto raw = make_synthetic(spec);
  Rng rng(1);
  const auto source = make_vae<float>({1, 1, 72}, "dense:32,relu", 4, rng);
  Matrix<float> slices(120, 18);
  for (std::size_t i = 0; i < 120; ++i)
    for (std::size_t j = 0; j < 18; ++j) slices(i, j) = raw.images(i, (j / 3) * 6 + j % 3);
  VaeTrainOptions opt;
  opt.hidden = "dense:32,relu";
  opt.latent_dim = 4;
  opt.batch_size = 32;
  const auto r = retrain_local_vae(source, slices, {1, 6, 3}, VaeLossConfig{}, opt, 40, 2);
  EXPECT_EQ(r.vae.decoder.output_dim(), 18u);
  EXPECT_EQ(r.vae.input_shape().size(), 18u);
  ASSERT_EQ(r.loss_series.size(), 40u);
  EXPECT_LT(r.loss_series.back(), r.loss_series.front());
  EXPECT_THROW(retrain_local_vae(source, Matrix<float>(0, 18), {1, 6, 3}, VaeLossConfig{}, opt, 2, 2), Error);
}

TEST(Collaborative, SingletonAndIdenticalSets) {
  std::map<std::size_t, InferenceResult> one{{4, {4, {1, 5, 9}, {}}}};
  const auto g1 = AdversaryGraph({4}, {});
  const auto o1 = collaborative_inference(one, g1);
  EXPECT_EQ(o1.global, (std::vector<std::size_t>{1, 5, 9}));
  EXPECT_EQ(o1.per_adversary.at(4), o1.global);

  std::map<std::size_t, InferenceResult> same;
  for (std::size_t m : {0u, 1u, 2u}) same[m] = {m, {2, 3, 7}, {}};
  const auto o = collaborative_inference(same, build_graph(Topology::Line, {0, 1, 2}, 1));
  EXPECT_EQ(o.global, (std::vector<std::size_t>{2, 3, 7}));
  EXPECT_EQ(o.leader, 1u);
  for (const auto& [m, s] : o.per_adversary) EXPECT_EQ(s, o.global);
}

TEST(Collaborative, MatchesCountingOracle) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + trial % 5;
    std::vector<std::size_t> ids(n);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    std::map<std::size_t, InferenceResult> local;
    std::map<std::size_t, std::size_t> count;
    for (std::size_t m : ids) {
      std::set<std::size_t> s;
      for (int k = 0; k < 15; ++k) s.insert(rng() % 20);
      local[m] = {m, {s.begin(), s.end()}, {}};
      for (std::size_t j : s) ++count[j];
    }
    std::vector<std::size_t> expect;
    for (auto [j, c] : count)
      if (c > (n + 1) / 2) expect.push_back(j);
    EXPECT_EQ(collaborative_inference(local, build_graph(Topology::Complete, ids, 1)).global, expect);
  }
}
