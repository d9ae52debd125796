#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "vflbd/nn.hpp"

namespace vflbd {

enum class Provenance { Benign, Attacked, Noised };
std::string to_string(Provenance p);

template <typename T>
struct EmbeddingBatch {
  Matrix<T> values;  // batch × d_emb
  std::size_t client = 0;
  std::size_t round = 0;
};

// Per-sample gradients dℓ_i/dh_i of the server loss with respect to one client's embeddings.
template <typename T>
struct GradientBatch {
  Matrix<T> values;
  Provenance provenance = Provenance::Benign;
  std::size_t client = 0;
};

template <typename T>
struct BottomModel {
  Network<T> net;

  std::size_t embedding_dim() const { return net.output_dim(); }
};

template <typename T>
BottomModel<T> make_bottom(ImageShape slice, std::string_view arch, Rng& rng);

template <typename T>
EmbeddingBatch<T> forward_bottom(const BottomModel<T>& model, const Matrix<T>& x, std::size_t client = 0,
                                 std::size_t round = 0);

// (1/B) Σ_i (dℓ_i/dh_i)·(dh_i/dθ_k).
template <typename T>
std::vector<T> backward_bottom(const BottomModel<T>& model, const Matrix<T>& x, const GradientBatch<T>& upstream);

template <typename T>
struct TopModel {
  Network<T> net;
  std::vector<std::size_t> client_dims;

  std::size_t num_clients() const { return client_dims.size(); }
  std::size_t num_classes() const { return net.output_dim(); }
};

template <typename T>
TopModel<T> make_top(std::vector<std::size_t> client_dims, std::size_t num_classes, std::string_view hidden_arch,
                     Rng& rng);

template <typename T>
Matrix<T> concat_embeddings(const TopModel<T>& top, std::span<const EmbeddingBatch<T>> embeddings);

template <typename T>
Matrix<T> top_logits(const TopModel<T>& top, std::span<const EmbeddingBatch<T>> embeddings);

template <typename T>
T forward_top_loss(const TopModel<T>& top, std::span<const EmbeddingBatch<T>> embeddings,
                   std::span<const int> labels);

template <typename T>
struct TopBackward {
  T loss = 0;
  std::vector<T> grad_theta;                   // gradient of the mean loss
  std::vector<GradientBatch<T>> per_embedding;  // per-sample gradients, one batch per client
};

template <typename T>
TopBackward<T> backward_top(const TopModel<T>& top, std::span<const EmbeddingBatch<T>> embeddings,
                            std::span<const int> labels);

// Encoder emits [μ | log σ²]; the decoder ends in a sigmoid so x̄ lies in (0,1).
template <typename T>
struct VaeModel {
  Network<T> encoder;
  Network<T> decoder;
  std::size_t latent_dim = 0;

  ImageShape input_shape() const { return encoder.input_shape(); }
};

template <typename T>
VaeModel<T> make_vae(ImageShape input, std::string_view hidden_arch, std::size_t latent_dim, Rng& rng);

template <typename T>
struct VaeForward {
  Matrix<T> mu, logvar, sigma, eps, z, xbar;
  typename Network<T>::Tape enc_tape, dec_tape;
};

// z = μ + noise_scale·σ⊙ε with ε drawn from `seed`; noise_scale 0 gives z = μ.
template <typename T>
VaeForward<T> vae_forward(const VaeModel<T>& vae, const Matrix<T>& x, std::uint64_t seed, T noise_scale = T(1));

template <typename T>
Matrix<T> vae_encode_mean(const VaeModel<T>& vae, const Matrix<T>& x);

template <typename T>
Matrix<T> vae_decode(const VaeModel<T>& vae, const Matrix<T>& z);

template <typename T>
struct VaeGradients {
  std::vector<T> encoder;
  std::vector<T> decoder;
};

// Backpropagates upstream gradients on x̄, μ and log σ² through the reparameterized sample.
template <typename T>
VaeGradients<T> vae_backward(const VaeModel<T>& vae, const VaeForward<T>& fwd, const Matrix<T>& d_xbar,
                             const Matrix<T>& d_mu, const Matrix<T>& d_logvar);

struct GradcheckResult {
  double max_relative_error = 0.0;
  std::size_t parameters = 0;
};

// Compares analytic gradient against central differences with the given step;
// relative error is ‖g − ĝ‖ / max(‖g‖, ‖ĝ‖, 1e-12).
GradcheckResult central_difference_check(const std::function<double(std::span<const double>)>& f,
                                         std::vector<double> theta, std::span<const double> analytic,
                                         double step = 1e-6);

}  // namespace vflbd
