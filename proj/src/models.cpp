#include "vflbd/models.hpp"

#include <cmath>
#include <numeric>
#include <random>

namespace vflbd {

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::Benign: return "benign";
    case Provenance::Attacked: return "attacked";
    case Provenance::Noised: return "noised";
  }
  return "?";
}

template <typename T>
BottomModel<T> make_bottom(ImageShape slice, std::string_view arch, Rng& rng) {
  auto layers = parse_architecture(arch);
  require(!layers.empty(), ErrorKind::Configuration, "bottom architecture is empty");
  BottomModel<T> m{Network<T>(slice, std::move(layers))};
  m.net.initialize(rng);
  return m;
}

template <typename T>
EmbeddingBatch<T> forward_bottom(const BottomModel<T>& model, const Matrix<T>& x, std::size_t client,
                                 std::size_t round) {
  require(x.cols() == model.net.input_dim(), ErrorKind::Contract,
          "client " + std::to_string(client) + " slice width does not match its bottom model");
  return {model.net.forward(x), client, round};
}

template <typename T>
std::vector<T> backward_bottom(const BottomModel<T>& model, const Matrix<T>& x, const GradientBatch<T>& upstream) {
  require(upstream.values.rows() == x.rows(), ErrorKind::Alignment, "upstream rows != batch size");
  require(upstream.values.cols() == model.embedding_dim(), ErrorKind::Alignment, "upstream width != embedding width");
  typename Network<T>::Tape tape;
  model.net.forward(x, &tape);
  Matrix<T> g = upstream.values;
  const T inv = T(1) / T(std::max<std::size_t>(x.rows(), 1));
  for (T& v : g.storage()) v *= inv;
  std::vector<T> grad(model.net.num_parameters(), T(0));
  model.net.backward(tape, g, grad, false);
  return grad;
}

template <typename T>
TopModel<T> make_top(std::vector<std::size_t> client_dims, std::size_t num_classes, std::string_view hidden_arch,
                     Rng& rng) {
  require(!client_dims.empty(), ErrorKind::Configuration, "top model needs at least one client");
  require(num_classes >= 2, ErrorKind::Configuration, "top model needs at least two classes");
  auto layers = parse_architecture(hidden_arch);
  layers.push_back({LayerSpec::Kind::Dense, num_classes, 0});
  const std::size_t in = std::accumulate(client_dims.begin(), client_dims.end(), std::size_t{0});
  TopModel<T> top{Network<T>(ImageShape{1, 1, in}, std::move(layers)), std::move(client_dims)};
  top.net.initialize(rng);
  return top;
}

template <typename T>
Matrix<T> concat_embeddings(const TopModel<T>& top, std::span<const EmbeddingBatch<T>> embeddings) {
  require(embeddings.size() == top.num_clients(), ErrorKind::Alignment,
          "expected " + std::to_string(top.num_clients()) + " client embeddings, got " +
              std::to_string(embeddings.size()));
  const std::size_t batch = embeddings.front().values.rows();
  Matrix<T> h(batch, top.net.input_dim());
  std::size_t off = 0;
  for (std::size_t k = 0; k < embeddings.size(); ++k) {
    const auto& e = embeddings[k].values;
    require(e.rows() == batch, ErrorKind::Alignment, "client embeddings are not row-aligned");
    require(e.cols() == top.client_dims[k], ErrorKind::Alignment, "client embedding width mismatch");
    for (std::size_t r = 0; r < batch; ++r) std::copy(e.row(r).begin(), e.row(r).end(), h.row(r).begin() + off);
    off += e.cols();
  }
  return h;
}

template <typename T>
Matrix<T> top_logits(const TopModel<T>& top, std::span<const EmbeddingBatch<T>> embeddings) {
  return top.net.forward(concat_embeddings(top, embeddings));
}

template <typename T>
T forward_top_loss(const TopModel<T>& top, std::span<const EmbeddingBatch<T>> embeddings,
                   std::span<const int> labels) {
  return cross_entropy(top_logits(top, embeddings), labels);
}

template <typename T>
TopBackward<T> backward_top(const TopModel<T>& top, std::span<const EmbeddingBatch<T>> embeddings,
                            std::span<const int> labels) {
  const Matrix<T> h = concat_embeddings(top, embeddings);
  typename Network<T>::Tape tape;
  const Matrix<T> logits = top.net.forward(h, &tape);
  Matrix<T> dlogits;
  TopBackward<T> out;
  out.loss = cross_entropy(logits, labels, &dlogits);
  out.grad_theta.assign(top.net.num_parameters(), T(0));
  const Matrix<T> dh = top.net.backward(tape, dlogits, out.grad_theta, true);
  const T batch = T(h.rows());
  std::size_t off = 0;
  for (std::size_t k = 0; k < embeddings.size(); ++k) {
    GradientBatch<T> g{Matrix<T>(h.rows(), top.client_dims[k]), Provenance::Benign, embeddings[k].client};
    for (std::size_t r = 0; r < h.rows(); ++r)
      for (std::size_t c = 0; c < top.client_dims[k]; ++c) g.values(r, c) = dh(r, off + c) * batch;
    off += top.client_dims[k];
    out.per_embedding.push_back(std::move(g));
  }
  return out;
}

template <typename T>
VaeModel<T> make_vae(ImageShape input, std::string_view hidden_arch, std::size_t latent_dim, Rng& rng) {
  require(latent_dim > 0, ErrorKind::Configuration, "latent dimension must be positive");
  auto enc = parse_architecture(hidden_arch);
  std::vector<LayerSpec> dec;
  for (auto it = enc.rbegin(); it != enc.rend(); ++it) {
    if (it->kind != LayerSpec::Kind::Dense) continue;
    dec.push_back({LayerSpec::Kind::Dense, it->units, 0});
    dec.push_back({LayerSpec::Kind::Relu, 0, 0});
  }
  enc.push_back({LayerSpec::Kind::Dense, 2 * latent_dim, 0});
  dec.push_back({LayerSpec::Kind::Dense, input.size(), 0});
  dec.push_back({LayerSpec::Kind::Sigmoid, 0, 0});
  VaeModel<T> vae{Network<T>(input, std::move(enc)), Network<T>(ImageShape{1, 1, latent_dim}, std::move(dec)),
                  latent_dim};
  vae.encoder.initialize(rng);
  vae.decoder.initialize(rng);
  return vae;
}

namespace {

template <typename T>
void split_moments(const Matrix<T>& enc, std::size_t d, Matrix<T>& mu, Matrix<T>& logvar) {
  mu = Matrix<T>(enc.rows(), d);
  logvar = Matrix<T>(enc.rows(), d);
  for (std::size_t r = 0; r < enc.rows(); ++r)
    for (std::size_t c = 0; c < d; ++c) {
      mu(r, c) = enc(r, c);
      logvar(r, c) = enc(r, d + c);
    }
}

}  // namespace

template <typename T>
VaeForward<T> vae_forward(const VaeModel<T>& vae, const Matrix<T>& x, std::uint64_t seed, T noise_scale) {
  require(x.cols() == vae.encoder.input_dim(), ErrorKind::Contract, "VAE input width mismatch");
  VaeForward<T> f;
  const Matrix<T> enc = vae.encoder.forward(x, &f.enc_tape);
  split_moments(enc, vae.latent_dim, f.mu, f.logvar);
  f.sigma = f.logvar;
  for (T& v : f.sigma.storage()) v = std::exp(T(0.5) * v);
  f.eps = Matrix<T>(x.rows(), vae.latent_dim);
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (T& v : f.eps.storage()) v = T(nd(rng));
  f.z = f.mu;
  if (noise_scale != T(0))
    for (std::size_t i = 0; i < f.z.size(); ++i)
      f.z.storage()[i] += noise_scale * f.sigma.storage()[i] * f.eps.storage()[i];
  f.xbar = vae.decoder.forward(f.z, &f.dec_tape);
  return f;
}

template <typename T>
Matrix<T> vae_encode_mean(const VaeModel<T>& vae, const Matrix<T>& x) {
  require(x.cols() == vae.encoder.input_dim(), ErrorKind::Contract, "VAE input width mismatch");
  Matrix<T> mu, logvar;
  split_moments(vae.encoder.forward(x), vae.latent_dim, mu, logvar);
  return mu;
}

template <typename T>
Matrix<T> vae_decode(const VaeModel<T>& vae, const Matrix<T>& z) {
  return vae.decoder.forward(z);
}

template <typename T>
VaeGradients<T> vae_backward(const VaeModel<T>& vae, const VaeForward<T>& fwd, const Matrix<T>& d_xbar,
                             const Matrix<T>& d_mu, const Matrix<T>& d_logvar) {
  const std::size_t batch = fwd.mu.rows(), d = vae.latent_dim;
  VaeGradients<T> g;
  g.encoder.assign(vae.encoder.num_parameters(), T(0));
  g.decoder.assign(vae.decoder.num_parameters(), T(0));
  const Matrix<T> dz = vae.decoder.backward(fwd.dec_tape, d_xbar, g.decoder, true);
  Matrix<T> denc(batch, 2 * d);
  // Recover the noise scale actually used from z − μ = s·σ·ε.
  for (std::size_t r = 0; r < batch; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      const T noise = fwd.z(r, c) - fwd.mu(r, c);
      denc(r, c) = dz(r, c) + (d_mu.empty() ? T(0) : d_mu(r, c));
      denc(r, d + c) = T(0.5) * dz(r, c) * noise + (d_logvar.empty() ? T(0) : d_logvar(r, c));
    }
  vae.encoder.backward(fwd.enc_tape, denc, g.encoder, false);
  return g;
}

GradcheckResult central_difference_check(const std::function<double(std::span<const double>)>& f,
                                         std::vector<double> theta, std::span<const double> analytic,
                                         double step) {
  require(analytic.size() == theta.size(), ErrorKind::Contract, "analytic gradient size mismatch");
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double keep = theta[i];
    theta[i] = keep + step;
    const double up = f(theta);
    theta[i] = keep - step;
    const double down = f(theta);
    theta[i] = keep;
    const double num = (up - down) / (2 * step);
    diff += (num - analytic[i]) * (num - analytic[i]);
    na += analytic[i] * analytic[i];
    nn += num * num;
  }
  return {std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12}), theta.size()};
}

#define VFLBD_INSTANTIATE(T)                                                                                    \
  template BottomModel<T> make_bottom<T>(ImageShape, std::string_view, Rng&);                                   \
  template EmbeddingBatch<T> forward_bottom<T>(const BottomModel<T>&, const Matrix<T>&, std::size_t,           \
                                               std::size_t);                                                    \
  template std::vector<T> backward_bottom<T>(const BottomModel<T>&, const Matrix<T>&, const GradientBatch<T>&); \
  template TopModel<T> make_top<T>(std::vector<std::size_t>, std::size_t, std::string_view, Rng&);              \
  template Matrix<T> concat_embeddings<T>(const TopModel<T>&, std::span<const EmbeddingBatch<T>>);              \
  template Matrix<T> top_logits<T>(const TopModel<T>&, std::span<const EmbeddingBatch<T>>);                     \
  template T forward_top_loss<T>(const TopModel<T>&, std::span<const EmbeddingBatch<T>>, std::span<const int>); \
  template TopBackward<T> backward_top<T>(const TopModel<T>&, std::span<const EmbeddingBatch<T>>,              \
                                          std::span<const int>);                                                \
  template VaeModel<T> make_vae<T>(ImageShape, std::string_view, std::size_t, Rng&);                           \
  template VaeForward<T> vae_forward<T>(const VaeModel<T>&, const Matrix<T>&, std::uint64_t, T);               \
  template Matrix<T> vae_encode_mean<T>(const VaeModel<T>&, const Matrix<T>&);                                  \
  template Matrix<T> vae_decode<T>(const VaeModel<T>&, const Matrix<T>&);                                       \
  template VaeGradients<T> vae_backward<T>(const VaeModel<T>&, const VaeForward<T>&, const Matrix<T>&,          \
                                           const Matrix<T>&, const Matrix<T>&);

VFLBD_INSTANTIATE(float)
VFLBD_INSTANTIATE(double)

#undef VFLBD_INSTANTIATE

}  // namespace vflbd
