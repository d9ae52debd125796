#pragma once

// Adversary-side label inference: hybrid VAE + batch-hard triplet training on
// the shared view, an auxiliary classifier over μ-embeddings, thresholded
// local inference, retraining on the owner's own slice, and consensus.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vflbd/graph.hpp"
#include "vflbd/models.hpp"

namespace vflbd {

struct VaeLossConfig {
  double lambda = 0.9;      // reconstruction weight; KL gets 1 - lambda
  double lambda_hat = 1.0;  // triplet weight
  double margin = 0.4;      // κ̂

  void validate() const;
};

struct InferenceConfig {
  int target_label = 0;
  double beta = 0.999;

  void validate(int num_classes) const;
};

// Batch mean of 0.5·Σ(μ² + σ² − 1 − ln σ²). Throws Domain when any σ ≤ 0.
double kl_divergence_gaussian(const Matrix<double>& mu, const Matrix<double>& sigma);

// Same in terms of log σ², with optional gradients (of the batch mean).
template <typename T>
T kl_from_logvar(const Matrix<T>& mu, const Matrix<T>& logvar, Matrix<T>* d_mu = nullptr,
                 Matrix<T>* d_logvar = nullptr);

// Batch mean of per-sample summed squared error; gradient wrt x̄ is 2(x̄ − x)/B.
template <typename T>
T reconstruction_loss(const Matrix<T>& x, const Matrix<T>& xbar, Matrix<T>* d_xbar = nullptr);

template <typename T>
T vae_loss(const Matrix<T>& x, const Matrix<T>& xbar, const Matrix<T>& mu, const Matrix<T>& logvar,
           const VaeLossConfig& cfg);

struct Triplet {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;
  bool operator==(const Triplet&) const = default;
};

// For every anchor row: farthest same-label row and closest different-label
// row (squared Euclidean), ties to the lowest row. Anchors lacking either are skipped.
template <typename T>
std::vector<Triplet> batch_hard_triplets(const Matrix<T>& embeddings, std::span<const int> labels,
                                         std::span<const std::size_t> anchors);

template <typename T>
T triplet_loss(std::span<const T> a, std::span<const T> p, std::span<const T> n, T margin);

// Mean triplet loss over `triples` (0 when empty), optional gradient wrt the embeddings.
template <typename T>
T mean_triplet_loss(const Matrix<T>& embeddings, const std::vector<Triplet>& triples, T margin,
                    Matrix<T>* d_embeddings = nullptr);

// vae_loss + λ̂ · mean triplet loss on μ.
template <typename T>
T final_loss(const Matrix<T>& x, const Matrix<T>& xbar, const Matrix<T>& mu, const Matrix<T>& logvar,
             const std::vector<Triplet>& triples, const VaeLossConfig& cfg);

template <typename T>
struct VaeObjective {
  T loss = 0;
  VaeGradients<T> grads;
};

// Loss and parameter gradients for one batch: reconstruction and KL over `rec_rows`,
// plus λ̂ times the triplet loss on μ when `triples` is given.
template <typename T>
VaeObjective<T> vae_objective(const VaeModel<T>& vae, const Matrix<T>& x, const std::vector<std::size_t>& rec_rows,
                              const std::vector<Triplet>* triples, const VaeLossConfig& cfg,
                              std::uint64_t noise_seed);

enum class ReconstructionSet { Target, Auxiliary };

struct VaeTrainOptions {
  std::string hidden = "dense:128,relu";
  std::size_t latent_dim = 32;
  std::size_t steps = 300;
  std::size_t negatives_per_batch = 64;
  std::size_t batch_size = 64;  // retraining batch size
  double lr = 1e-3;
  ReconstructionSet reconstruction = ReconstructionSet::Target;
};

struct VaeTrainResult {
  VaeModel<float> vae;
  std::vector<double> loss_series;
};

// Trains on the aux points visible in `features` (rows = dataset indices).
VaeTrainResult train_adversary_vae(const Matrix<float>& features, const AuxiliaryLabels& aux,
                                   const VaeLossConfig& cfg, const VaeTrainOptions& opt, std::uint64_t seed);

struct AuxClassifier {
  Network<float> net;
  int num_classes = 0;
};

struct ClassifierOptions {
  std::string hidden = "dense:64,relu";
  std::size_t epochs = 300;
  double lr = 3e-3;
};

AuxClassifier train_aux_classifier(const VaeModel<float>& vae, const Matrix<float>& features,
                                   const AuxiliaryLabels& aux, int num_classes, const ClassifierOptions& opt,
                                   std::uint64_t seed);

// Softmax over classes for μ-embeddings of `features` rows.
Matrix<float> classify(const VaeModel<float>& vae, const AuxClassifier& clf, const Matrix<float>& features);

struct InferenceResult {
  std::size_t owner = 0;
  std::vector<std::size_t> indices;           // ascending
  std::map<std::size_t, double> confidence;  // per index, in [0,1]
};

// Seeds with the aux target indices; an unlabeled index joins when the strict
// argmax is the target and its probability is ≥ β.
InferenceResult infer_local(const VaeModel<float>& vae, const AuxClassifier& clf, const Matrix<float>& features,
                            const AuxiliaryLabels& aux, const InferenceConfig& cfg, std::size_t owner = 0);

// Slice-shaped VAE trained with the VAE loss on `slices`, reusing parameters
// of layers whose shapes match `source`.
VaeTrainResult retrain_local_vae(const VaeModel<float>& source, const Matrix<float>& slices, ImageShape slice_shape,
                                 const VaeLossConfig& cfg, const VaeTrainOptions& opt, std::size_t epochs,
                                 std::uint64_t seed);

struct ConsensusOutcome {
  std::size_t leader = 0;
  std::vector<std::size_t> global;
  std::map<std::size_t, std::vector<std::size_t>> per_adversary;
};

// Leader election, BFS collection, vote and distribution; a single adversary passes through.
ConsensusOutcome collaborative_inference(const std::map<std::size_t, InferenceResult>& local,
                                         const AdversaryGraph& g, VoteRule rule = VoteRule::StrictlyAbove);

}  // namespace vflbd
