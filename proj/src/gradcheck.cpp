#include "vflbd/gradcheck.hpp"

#include <random>

#include "vflbd/inference.hpp"

namespace vflbd {

namespace {

Matrix<double> random_matrix(std::size_t r, std::size_t c, Rng& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Matrix<double> m(r, c);
  for (double& v : m.storage()) v = u(rng);
  return m;
}

double dot(const Matrix<double>& a, const Matrix<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.storage()[i] * b.storage()[i];
  return s;
}

NamedGradcheck network_params(const std::string& name, ImageShape in, const std::string& arch, Rng& rng) {
  Network<double> net(in, parse_architecture(arch));
  net.initialize(rng);
  const auto x = random_matrix(3, in.size(), rng);
  const auto w = random_matrix(3, net.output_dim(), rng);
  typename Network<double>::Tape tape;
  net.forward(x, &tape);
  std::vector<double> g(net.num_parameters(), 0.0);
  net.backward(tape, w, g, false);
  auto f = [&](std::span<const double> theta) {
    Network<double> copy = net;
    copy.parameters().values.assign(theta.begin(), theta.end());
    return dot(copy.forward(x), w);
  };
  return {name, central_difference_check(f, net.parameters().values, g)};
}

NamedGradcheck network_input(const std::string& name, ImageShape in, const std::string& arch, Rng& rng) {
  Network<double> net(in, parse_architecture(arch));
  net.initialize(rng);
  const auto x = random_matrix(2, in.size(), rng);
  const auto w = random_matrix(2, net.output_dim(), rng);
  typename Network<double>::Tape tape;
  net.forward(x, &tape);
  std::vector<double> g(net.num_parameters(), 0.0);
  const auto dx = net.backward(tape, w, g, true);
  auto f = [&](std::span<const double> v) {
    return dot(net.forward(Matrix<double>(x.rows(), x.cols(), std::vector<double>(v.begin(), v.end()))), w);
  };
  return {name, central_difference_check(f, x.storage(), dx.storage())};
}

NamedGradcheck split_composed(Rng& rng) {
  const ImageShape s0{1, 2, 3}, s1{1, 2, 2};
  auto b0 = make_bottom<double>(s0, "dense:5,tanh,dense:3", rng);
  auto b1 = make_bottom<double>(s1, "conv:2x3,sigmoid,dense:4", rng);
  auto top = make_top<double>({3, 4}, 3, "dense:6,tanh", rng);
  const auto x0 = random_matrix(4, s0.size(), rng, 0, 1), x1 = random_matrix(4, s1.size(), rng, 0, 1);
  const std::vector<int> labels{0, 2, 1, 2};
  const std::size_t n0 = b0.net.num_parameters(), n1 = b1.net.num_parameters(), nt = top.net.num_parameters();

  auto loss = [&](const BottomModel<double>& a, const BottomModel<double>& b, const TopModel<double>& t) {
    std::vector<EmbeddingBatch<double>> e{forward_bottom(a, x0, 0), forward_bottom(b, x1, 1)};
    return forward_top_loss(t, std::span<const EmbeddingBatch<double>>(e), labels);
  };
  std::vector<EmbeddingBatch<double>> e{forward_bottom(b0, x0, 0), forward_bottom(b1, x1, 1)};
  const auto tb = backward_top(top, std::span<const EmbeddingBatch<double>>(e), labels);
  const auto g0 = backward_bottom(b0, x0, tb.per_embedding[0]);
  const auto g1 = backward_bottom(b1, x1, tb.per_embedding[1]);

  std::vector<double> theta, grad;
  for (auto* p : {&b0.net.parameters().values, &b1.net.parameters().values, &top.net.parameters().values})
    theta.insert(theta.end(), p->begin(), p->end());
  grad.insert(grad.end(), g0.begin(), g0.end());
  grad.insert(grad.end(), g1.begin(), g1.end());
  grad.insert(grad.end(), tb.grad_theta.begin(), tb.grad_theta.end());

  auto f = [&](std::span<const double> v) {
    auto a = b0;
    auto b = b1;
    auto t = top;
    a.net.parameters().values.assign(v.begin(), v.begin() + std::ptrdiff_t(n0));
    b.net.parameters().values.assign(v.begin() + std::ptrdiff_t(n0), v.begin() + std::ptrdiff_t(n0 + n1));
    t.net.parameters().values.assign(v.begin() + std::ptrdiff_t(n0 + n1), v.begin() + std::ptrdiff_t(n0 + n1 + nt));
    return loss(a, b, t);
  };
  return {"split_bottom_top", central_difference_check(f, theta, grad)};
}

NamedGradcheck vae_full(Rng& rng, std::uint64_t seed) {
  const ImageShape in{1, 1, 6};
  auto vae = make_vae<double>(in, "dense:7,tanh", 3, rng);
  const auto x = random_matrix(6, in.size(), rng, 0.05, 0.95);
  const std::vector<int> labels{0, 0, 0, 1, 1, 2};
  const std::vector<std::size_t> anchors{0, 1, 2}, rec_rows{0, 1, 2};
  const auto triples = batch_hard_triplets(vae_encode_mean(vae, x), std::span<const int>(labels),
                                           std::span<const std::size_t>(anchors));
  VaeLossConfig cfg;
  cfg.margin = 50.0;
  const std::uint64_t noise = derive_seed(seed, {kTagVae});
  const auto obj = vae_objective(vae, x, rec_rows, &triples, cfg, noise);
  const std::size_t ne = vae.encoder.num_parameters();
  std::vector<double> theta = vae.encoder.parameters().values, grad = obj.grads.encoder;
  theta.insert(theta.end(), vae.decoder.parameters().values.begin(), vae.decoder.parameters().values.end());
  grad.insert(grad.end(), obj.grads.decoder.begin(), obj.grads.decoder.end());
  auto f = [&](std::span<const double> v) {
    auto copy = vae;
    copy.encoder.parameters().values.assign(v.begin(), v.begin() + std::ptrdiff_t(ne));
    copy.decoder.parameters().values.assign(v.begin() + std::ptrdiff_t(ne), v.end());
    return vae_objective(copy, x, rec_rows, &triples, cfg, noise).loss;
  };
  return {"vae_hybrid_objective", central_difference_check(f, theta, grad)};
}

NamedGradcheck loss_terms(Rng& rng) {
  const auto x = random_matrix(4, 5, rng, 0, 1), xbar = random_matrix(4, 5, rng, 0, 1);
  const auto mu = random_matrix(4, 3, rng), lv = random_matrix(4, 3, rng, -0.5, 0.5);
  const auto emb = random_matrix(4, 3, rng);
  const std::vector<Triplet> triples{{0, 1, 2}, {3, 1, 0}};
  Matrix<double> g_rec, g_mu, g_lv, g_trip;
  reconstruction_loss(x, xbar, &g_rec);
  kl_from_logvar(mu, lv, &g_mu, &g_lv);
  mean_triplet_loss(emb, triples, 40.0, &g_trip);
  std::vector<double> theta, grad;
  for (const auto* m : {&xbar, &mu, &lv, &emb}) theta.insert(theta.end(), m->storage().begin(), m->storage().end());
  for (const auto* m : {&g_rec, &g_mu, &g_lv, &g_trip})
    grad.insert(grad.end(), m->storage().begin(), m->storage().end());
  auto f = [&](std::span<const double> v) {
    std::size_t off = 0;
    auto take = [&](const Matrix<double>& shape) {
      Matrix<double> m(shape.rows(), shape.cols(),
                       std::vector<double>(v.begin() + std::ptrdiff_t(off), v.begin() + std::ptrdiff_t(off + shape.size())));
      off += shape.size();
      return m;
    };
    const auto a = take(xbar), b = take(mu), c = take(lv), d = take(emb);
    return reconstruction_loss(x, a) + kl_from_logvar(b, c) + mean_triplet_loss(d, triples, 40.0);
  };
  return {"loss_terms", central_difference_check(f, theta, grad)};
}

}  // namespace

std::vector<NamedGradcheck> run_gradcheck_suite(std::uint64_t seed) {
  Rng rng = make_rng(seed, {kTagInit});
  std::vector<NamedGradcheck> out;
  out.push_back(network_params("dense_tanh_sigmoid", {1, 1, 5}, "dense:6,tanh,dense:4,sigmoid,dense:3", rng));
  out.push_back(network_params("dense_relu", {1, 1, 5}, "dense:8,relu,dense:3,identity", rng));
  out.push_back(network_params("conv_stack", {2, 4, 5}, "conv:3x3,tanh,conv:2x1,sigmoid,dense:3", rng));
  out.push_back(network_input("dense_input", {1, 1, 5}, "dense:6,tanh,dense:3", rng));
  out.push_back(network_input("conv_input", {1, 5, 4}, "conv:2x3,tanh,dense:3", rng));
  out.push_back(split_composed(rng));
  out.push_back(vae_full(rng, seed));
  out.push_back(loss_terms(rng));
  return out;
}

}  // namespace vflbd
