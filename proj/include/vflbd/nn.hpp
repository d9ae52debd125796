#pragma once

// Minimal differentiable layer stack: dense, same-padded 2-D convolution and
// elementwise activations, with hand-written backward passes. Parameters of a
// network live in one flat vector described by a shape manifest.

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vflbd/dataset.hpp"
#include "vflbd/rng.hpp"
#include "vflbd/tensor.hpp"

namespace vflbd {

struct TensorShape {
  std::string name;
  std::vector<std::size_t> dims;

  std::size_t count() const;
  bool operator==(const TensorShape&) const = default;
};

template <typename T>
struct ParameterVector {
  std::vector<T> values;
  std::vector<TensorShape> manifest;

  std::size_t size() const { return values.size(); }
  // Manifest shapes multiply out to the vector length and all entries are finite.
  void validate() const;
};

struct LayerSpec {
  enum class Kind { Dense, Conv2d, Relu, Tanh, Sigmoid, Identity };
  Kind kind = Kind::Dense;
  std::size_t units = 0;   // Dense: output width; Conv2d: output channels
  std::size_t kernel = 0;  // Conv2d: odd kernel size, stride 1, same padding

  bool operator==(const LayerSpec&) const = default;
};

// "dense:64,relu,dense:16" or "conv:8x3,relu,conv:16x3,relu,dense:32".
std::vector<LayerSpec> parse_architecture(std::string_view text);
std::string format_architecture(const std::vector<LayerSpec>& layers);

template <typename T>
class Network {
 public:
  struct Tape {
    std::vector<Matrix<T>> values;  // values[0] = input, values[l + 1] = output of layer l
  };

  Network() = default;
  Network(ImageShape input, std::vector<LayerSpec> layers);

  std::size_t input_dim() const { return input_.size(); }
  std::size_t output_dim() const { return out_dims_.empty() ? input_dim() : out_dims_.back().size(); }
  const ImageShape& input_shape() const { return input_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }

  ParameterVector<T>& parameters() { return params_; }
  const ParameterVector<T>& parameters() const { return params_; }
  std::size_t num_parameters() const { return params_.size(); }

  // Fan-in scaled uniform initialisation U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases.
  void initialize(Rng& rng);

  Matrix<T> forward(const Matrix<T>& x, Tape* tape = nullptr) const;

  // Accumulates dLoss/dparams into grad_params (length num_parameters()) and
  // returns dLoss/dinput (empty matrix when want_input_grad is false).
  Matrix<T> backward(const Tape& tape, const Matrix<T>& grad_out, std::span<T> grad_params,
                     bool want_input_grad = true) const;

  // Copies layers whose parameter shapes match `other`, layer by layer from the output end.
  std::size_t copy_matching_tail(const Network& other);
  // Same, walking from the input end.
  std::size_t copy_matching_head(const Network& other);

  template <typename U>
  Network<U> cast() const {
    Network<U> out(input_, layers_);
    for (std::size_t i = 0; i < params_.values.size(); ++i)
      out.parameters().values[i] = static_cast<U>(params_.values[i]);
    return out;
  }

 private:
  struct LayerSlot {
    std::size_t weight_offset = 0;
    std::size_t bias_offset = 0;
    std::size_t fan_in = 0;
  };

  ImageShape input_;
  std::vector<LayerSpec> layers_;
  std::vector<ImageShape> in_dims_;
  std::vector<ImageShape> out_dims_;
  std::vector<LayerSlot> slots_;
  ParameterVector<T> params_;
};

// Row-wise softmax.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits);

// Mean cross-entropy over rows; when grad is non-null it receives dLoss/dlogits.
template <typename T>
T cross_entropy(const Matrix<T>& logits, std::span<const int> labels, Matrix<T>* grad = nullptr);

// Index of the unique maximum of a row, or -1 when the maximum is tied.
template <typename T>
int strict_argmax(std::span<const T> row);

template <typename T>
void sgd_step(std::span<T> theta, std::span<const T> grad, T lr);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  std::size_t step = 0;
};

template <typename T>
void adam_step(AdamState<T>& state, std::span<T> theta, std::span<const T> grad,
               const AdamConfig& cfg);

// Flat binary checkpoint: "VFLBDCK1", manifest (names + dims), then raw values.
template <typename T>
void save_checkpoint(const ParameterVector<T>& params, const std::filesystem::path& path);
template <typename T>
ParameterVector<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace vflbd
