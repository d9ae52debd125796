#include "vflbd/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "vflbd/simd/kernels.hpp"

namespace vflbd {

std::size_t TensorShape::count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

template <typename T>
void ParameterVector<T>::validate() const {
  std::size_t total = 0;
  for (const auto& s : manifest) total += s.count();
  require(total == values.size(), ErrorKind::Contract, "parameter manifest does not match vector length");
  for (T v : values) require(std::isfinite(double(v)), ErrorKind::Numeric, "non-finite parameter");
}

std::vector<LayerSpec> parse_architecture(std::string_view text) {
  std::vector<LayerSpec> out;
  std::stringstream ss{std::string(text)};
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok.erase(std::remove_if(tok.begin(), tok.end(), [](unsigned char c) { return std::isspace(c); }),
              tok.end());
    if (tok.empty()) continue;
    LayerSpec spec;
    try {
      if (tok.rfind("dense:", 0) == 0) {
        spec.kind = LayerSpec::Kind::Dense;
        spec.units = std::stoul(tok.substr(6));
      } else if (tok.rfind("conv:", 0) == 0) {
        spec.kind = LayerSpec::Kind::Conv2d;
        auto x = tok.find('x', 5);
        require(x != std::string::npos, ErrorKind::Configuration, "conv layer needs <channels>x<kernel>");
        spec.units = std::stoul(tok.substr(5, x - 5));
        spec.kernel = std::stoul(tok.substr(x + 1));
        require(spec.kernel % 2 == 1, ErrorKind::Configuration, "conv kernel must be odd");
      } else if (tok == "relu") {
        spec.kind = LayerSpec::Kind::Relu;
      } else if (tok == "tanh") {
        spec.kind = LayerSpec::Kind::Tanh;
      } else if (tok == "sigmoid") {
        spec.kind = LayerSpec::Kind::Sigmoid;
      } else if (tok == "identity") {
        spec.kind = LayerSpec::Kind::Identity;
      } else {
        fail(ErrorKind::Configuration, "unknown layer '" + tok + "'");
      }
    } catch (const std::logic_error&) {
      fail(ErrorKind::Configuration, "malformed layer '" + tok + "'");
    }
    require(spec.kind != LayerSpec::Kind::Dense || spec.units > 0, ErrorKind::Configuration,
            "dense width must be positive");
    out.push_back(spec);
  }
  return out;
}

std::string format_architecture(const std::vector<LayerSpec>& layers) {
  std::string out;
  for (const auto& l : layers) {
    if (!out.empty()) out += ",";
    switch (l.kind) {
      case LayerSpec::Kind::Dense: out += "dense:" + std::to_string(l.units); break;
      case LayerSpec::Kind::Conv2d:
        out += "conv:" + std::to_string(l.units) + "x" + std::to_string(l.kernel);
        break;
      case LayerSpec::Kind::Relu: out += "relu"; break;
      case LayerSpec::Kind::Tanh: out += "tanh"; break;
      case LayerSpec::Kind::Sigmoid: out += "sigmoid"; break;
      case LayerSpec::Kind::Identity: out += "identity"; break;
    }
  }
  return out;
}

template <typename T>
Network<T>::Network(ImageShape input, std::vector<LayerSpec> layers)
    : input_(input), layers_(std::move(layers)) {
  ImageShape cur = input_;
  std::size_t offset = 0;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerSpec& spec = layers_[l];
    LayerSlot slot;
    ImageShape next = cur;
    if (spec.kind == LayerSpec::Kind::Dense) {
      slot.fan_in = cur.size();
      slot.weight_offset = offset;
      offset += spec.units * slot.fan_in;
      slot.bias_offset = offset;
      offset += spec.units;
      next = ImageShape{1, 1, spec.units};
      params_.manifest.push_back({"dense" + std::to_string(l) + ".weight", {spec.units, slot.fan_in}});
      params_.manifest.push_back({"dense" + std::to_string(l) + ".bias", {spec.units}});
    } else if (spec.kind == LayerSpec::Kind::Conv2d) {
      slot.fan_in = cur.channels * spec.kernel * spec.kernel;
      slot.weight_offset = offset;
      offset += spec.units * slot.fan_in;
      slot.bias_offset = offset;
      offset += spec.units;
      next = ImageShape{spec.units, cur.height, cur.width};
      params_.manifest.push_back({"conv" + std::to_string(l) + ".weight",
                                  {spec.units, cur.channels, spec.kernel, spec.kernel}});
      params_.manifest.push_back({"conv" + std::to_string(l) + ".bias", {spec.units}});
    }
    in_dims_.push_back(cur);
    out_dims_.push_back(next);
    slots_.push_back(slot);
    cur = next;
  }
  params_.values.assign(offset, T(0));
}

template <typename T>
void Network<T>::initialize(Rng& rng) {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const auto kind = layers_[l].kind;
    if (kind != LayerSpec::Kind::Dense && kind != LayerSpec::Kind::Conv2d) continue;
    const LayerSlot& s = slots_[l];
    const double bound = 1.0 / std::sqrt(double(s.fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t i = s.weight_offset; i < s.bias_offset; ++i) params_.values[i] = T(dist(rng));
    std::fill(params_.values.begin() + static_cast<std::ptrdiff_t>(s.bias_offset),
              params_.values.begin() + static_cast<std::ptrdiff_t>(s.bias_offset + layers_[l].units), T(0));
  }
}

namespace {

// Patch matrix for one sample: row p = (y, x) output pixel, columns (c, ky, kx).
template <typename T>
void im2col(const T* img, const ImageShape& s, std::size_t k, T* cols) {
  const std::ptrdiff_t half = std::ptrdiff_t(k / 2);
  const std::size_t ckk = s.channels * k * k;
  for (std::size_t y = 0; y < s.height; ++y)
    for (std::size_t x = 0; x < s.width; ++x) {
      T* row = cols + (y * s.width + x) * ckk;
      std::size_t o = 0;
      for (std::size_t c = 0; c < s.channels; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx, ++o) {
            std::ptrdiff_t yy = std::ptrdiff_t(y + ky) - half, xx = std::ptrdiff_t(x + kx) - half;
            row[o] = (yy < 0 || xx < 0 || yy >= std::ptrdiff_t(s.height) || xx >= std::ptrdiff_t(s.width))
                         ? T(0)
                         : img[(c * s.height + std::size_t(yy)) * s.width + std::size_t(xx)];
          }
    }
}

template <typename T>
void col2im_add(const T* cols, const ImageShape& s, std::size_t k, T* img) {
  const std::ptrdiff_t half = std::ptrdiff_t(k / 2);
  const std::size_t ckk = s.channels * k * k;
  for (std::size_t y = 0; y < s.height; ++y)
    for (std::size_t x = 0; x < s.width; ++x) {
      const T* row = cols + (y * s.width + x) * ckk;
      std::size_t o = 0;
      for (std::size_t c = 0; c < s.channels; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx, ++o) {
            std::ptrdiff_t yy = std::ptrdiff_t(y + ky) - half, xx = std::ptrdiff_t(x + kx) - half;
            if (yy < 0 || xx < 0 || yy >= std::ptrdiff_t(s.height) || xx >= std::ptrdiff_t(s.width)) continue;
            img[(c * s.height + std::size_t(yy)) * s.width + std::size_t(xx)] += row[o];
          }
    }
}

}  // namespace

template <typename T>
Matrix<T> Network<T>::forward(const Matrix<T>& x, Tape* tape) const {
  require(x.cols() == input_dim(), ErrorKind::Contract,
          "input width " + std::to_string(x.cols()) + " != expected " + std::to_string(input_dim()));
  const auto& K = simd::kernels<T>();
  const std::size_t batch = x.rows();
  if (tape) {
    tape->values.clear();
    tape->values.reserve(layers_.size() + 1);
    tape->values.push_back(x);
  }
  Matrix<T> cur = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const LayerSpec& spec = layers_[l];
    const LayerSlot& s = slots_[l];
    const T* w = params_.values.data() + s.weight_offset;
    const T* b = params_.values.data() + s.bias_offset;
    Matrix<T> next;
    switch (spec.kind) {
      case LayerSpec::Kind::Dense: {
        next = Matrix<T>(batch, spec.units);
        K.gemm_nt(batch, spec.units, s.fan_in, cur.data(), w, next.data(), false);
        for (std::size_t r = 0; r < batch; ++r) K.axpy(T(1), b, next.row(r).data(), spec.units);
        break;
      }
      case LayerSpec::Kind::Conv2d: {
        const ImageShape& in = in_dims_[l];
        const std::size_t hw = in.height * in.width;
        next = Matrix<T>(batch, spec.units * hw);
        std::vector<T> cols(hw * s.fan_in);
        for (std::size_t r = 0; r < batch; ++r) {
          im2col(cur.row(r).data(), in, spec.kernel, cols.data());
          T* out = next.row(r).data();
          K.gemm_nt(spec.units, hw, s.fan_in, w, cols.data(), out, false);
          for (std::size_t co = 0; co < spec.units; ++co)
            for (std::size_t p = 0; p < hw; ++p) out[co * hw + p] += b[co];
        }
        break;
      }
      case LayerSpec::Kind::Relu:
        next = cur;
        for (T& v : next.storage()) v = v > T(0) ? v : T(0);
        break;
      case LayerSpec::Kind::Tanh:
        next = cur;
        for (T& v : next.storage()) v = std::tanh(v);
        break;
      case LayerSpec::Kind::Sigmoid:
        next = cur;
        for (T& v : next.storage()) v = T(1) / (T(1) + std::exp(-v));
        break;
      case LayerSpec::Kind::Identity:
        next = cur;
        break;
    }
    if (tape) tape->values.push_back(next);
    cur = std::move(next);
  }
  return cur;
}

template <typename T>
Matrix<T> Network<T>::backward(const Tape& tape, const Matrix<T>& grad_out, std::span<T> grad_params,
                               bool want_input_grad) const {
  require(tape.values.size() == layers_.size() + 1, ErrorKind::Contract, "tape does not match network");
  require(grad_params.size() == params_.size(), ErrorKind::Contract, "gradient buffer size mismatch");
  require(grad_out.rows() == tape.values.back().rows() && grad_out.cols() == output_dim(),
          ErrorKind::Alignment, "upstream gradient shape mismatch");
  const auto& K = simd::kernels<T>();
  const std::size_t batch = grad_out.rows();
  Matrix<T> g = grad_out;
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const LayerSpec& spec = layers_[li];
    const LayerSlot& s = slots_[li];
    const Matrix<T>& in = tape.values[li];
    const Matrix<T>& out = tape.values[li + 1];
    const bool need_dx = want_input_grad || li > 0;
    switch (spec.kind) {
      case LayerSpec::Kind::Dense: {
        const T* w = params_.values.data() + s.weight_offset;
        T* dw = grad_params.data() + s.weight_offset;
        T* db = grad_params.data() + s.bias_offset;
        K.gemm_tn(spec.units, s.fan_in, batch, g.data(), in.data(), dw, true);
        for (std::size_t r = 0; r < batch; ++r) K.axpy(T(1), g.row(r).data(), db, spec.units);
        if (need_dx) {
          Matrix<T> dx(batch, s.fan_in);
          K.gemm_nn(batch, s.fan_in, spec.units, g.data(), w, dx.data(), false);
          g = std::move(dx);
        }
        break;
      }
      case LayerSpec::Kind::Conv2d: {
        const ImageShape& ish = in_dims_[li];
        const std::size_t hw = ish.height * ish.width;
        const T* w = params_.values.data() + s.weight_offset;
        T* dw = grad_params.data() + s.weight_offset;
        T* db = grad_params.data() + s.bias_offset;
        std::vector<T> cols(hw * s.fan_in), dcols(hw * s.fan_in);
        Matrix<T> dx(need_dx ? batch : 0, need_dx ? ish.size() : 0);
        for (std::size_t r = 0; r < batch; ++r) {
          const T* go = g.row(r).data();
          im2col(in.row(r).data(), ish, spec.kernel, cols.data());
          K.gemm_nn(spec.units, s.fan_in, hw, go, cols.data(), dw, true);
          for (std::size_t co = 0; co < spec.units; ++co)
            for (std::size_t p = 0; p < hw; ++p) db[co] += go[co * hw + p];
          if (need_dx) {
            K.gemm_tn(hw, s.fan_in, spec.units, go, w, dcols.data(), false);
            col2im_add(dcols.data(), ish, spec.kernel, dx.row(r).data());
          }
        }
        if (need_dx) g = std::move(dx);
        break;
      }
      case LayerSpec::Kind::Relu:
        for (std::size_t i = 0; i < g.size(); ++i)
          if (!(out.storage()[i] > T(0))) g.storage()[i] = T(0);
        break;
      case LayerSpec::Kind::Tanh:
        for (std::size_t i = 0; i < g.size(); ++i) {
          T y = out.storage()[i];
          g.storage()[i] *= (T(1) - y * y);
        }
        break;
      case LayerSpec::Kind::Sigmoid:
        for (std::size_t i = 0; i < g.size(); ++i) {
          T y = out.storage()[i];
          g.storage()[i] *= y * (T(1) - y);
        }
        break;
      case LayerSpec::Kind::Identity:
        break;
    }
  }
  return want_input_grad ? g : Matrix<T>();
}

template <typename T>
std::size_t Network<T>::copy_matching_tail(const Network& other) {
  std::size_t copied = 0;
  std::size_t a = layers_.size(), b = other.layers_.size();
  while (a > 0 && b > 0) {
    --a;
    --b;
    const auto& la = layers_[a];
    const auto& lb = other.layers_[b];
    if (!(la == lb)) break;
    if (la.kind != LayerSpec::Kind::Dense && la.kind != LayerSpec::Kind::Conv2d) continue;
    if (slots_[a].fan_in != other.slots_[b].fan_in) break;
    const std::size_t n = la.units * slots_[a].fan_in + la.units;
    std::copy_n(other.params_.values.begin() + static_cast<std::ptrdiff_t>(other.slots_[b].weight_offset), n,
                params_.values.begin() + static_cast<std::ptrdiff_t>(slots_[a].weight_offset));
    ++copied;
  }
  return copied;
}

template <typename T>
std::size_t Network<T>::copy_matching_head(const Network& other) {
  std::size_t copied = 0;
  for (std::size_t l = 0; l < layers_.size() && l < other.layers_.size(); ++l) {
    const auto& la = layers_[l];
    if (!(la == other.layers_[l])) break;
    if (la.kind != LayerSpec::Kind::Dense && la.kind != LayerSpec::Kind::Conv2d) continue;
    if (slots_[l].fan_in != other.slots_[l].fan_in) break;
    const std::size_t n = la.units * slots_[l].fan_in + la.units;
    std::copy_n(other.params_.values.begin() + static_cast<std::ptrdiff_t>(other.slots_[l].weight_offset), n,
                params_.values.begin() + static_cast<std::ptrdiff_t>(slots_[l].weight_offset));
    ++copied;
  }
  return copied;
}

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& logits) {
  Matrix<T> p(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto in = logits.row(r);
    auto out = p.row(r);
    T mx = *std::max_element(in.begin(), in.end());
    T sum = 0;
    for (std::size_t c = 0; c < in.size(); ++c) sum += (out[c] = std::exp(in[c] - mx));
    for (auto& v : out) v /= sum;
  }
  return p;
}

template <typename T>
T cross_entropy(const Matrix<T>& logits, std::span<const int> labels, Matrix<T>* grad) {
  require(labels.size() == logits.rows(), ErrorKind::Alignment, "label count != batch size");
  const std::size_t batch = logits.rows();
  T loss = 0;
  if (grad) *grad = Matrix<T>(batch, logits.cols());
  for (std::size_t r = 0; r < batch; ++r) {
    auto in = logits.row(r);
    const int y = labels[r];
    require(y >= 0 && std::size_t(y) < in.size(), ErrorKind::Contract, "label outside logit range");
    T mx = *std::max_element(in.begin(), in.end());
    T sum = 0;
    for (T v : in) sum += std::exp(v - mx);
    const T lse = mx + std::log(sum);
    loss += lse - in[std::size_t(y)];
    if (grad) {
      auto g = grad->row(r);
      for (std::size_t c = 0; c < in.size(); ++c) g[c] = std::exp(in[c] - lse) / T(batch);
      g[std::size_t(y)] -= T(1) / T(batch);
    }
  }
  return loss / T(batch);
}

template <typename T>
int strict_argmax(std::span<const T> row) {
  int best = -1;
  bool tied = false;
  for (std::size_t c = 0; c < row.size(); ++c) {
    if (best < 0 || row[c] > row[std::size_t(best)]) {
      best = int(c);
      tied = false;
    } else if (row[c] == row[std::size_t(best)]) {
      tied = true;
    }
  }
  return tied ? -1 : best;
}

template <typename T>
void sgd_step(std::span<T> theta, std::span<const T> grad, T lr) {
  require(theta.size() == grad.size(), ErrorKind::Contract, "parameter/gradient size mismatch");
  require(lr >= T(0), ErrorKind::Configuration, "learning rate must be non-negative");
  for (T g : grad) require(std::isfinite(double(g)), ErrorKind::Numeric, "non-finite gradient");
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * grad[i];
}

void AdamConfig::validate() const {
  require(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0, ErrorKind::Configuration,
          "Adam betas must lie in (0,1)");
  require(lr > 0.0 && eps > 0.0, ErrorKind::Configuration, "Adam lr and eps must be positive");
}

template <typename T>
void adam_step(AdamState<T>& state, std::span<T> theta, std::span<const T> grad, const AdamConfig& cfg) {
  cfg.validate();
  require(theta.size() == grad.size(), ErrorKind::Contract, "parameter/gradient size mismatch");
  if (state.m.empty()) {
    state.m.assign(theta.size(), T(0));
    state.v.assign(theta.size(), T(0));
    state.step = 0;
  }
  require(state.m.size() == theta.size(), ErrorKind::Contract, "Adam state size mismatch");
  for (T g : grad) require(std::isfinite(double(g)), ErrorKind::Numeric, "non-finite gradient");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.step));
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    state.m[i] = b1 * state.m[i] + (T(1) - b1) * grad[i];
    state.v[i] = b2 * state.v[i] + (T(1) - b2) * grad[i] * grad[i];
    const double mhat = double(state.m[i]) / bc1;
    const double vhat = double(state.v[i]) / bc2;
    theta[i] -= T(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
  }
}

namespace {

void put_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  require(static_cast<bool>(is), ErrorKind::Format, "truncated checkpoint");
  return v;
}
std::uint64_t get_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  require(static_cast<bool>(is), ErrorKind::Format, "truncated checkpoint");
  return v;
}

constexpr char kCheckpointMagic[8] = {'V', 'F', 'L', 'B', 'D', 'C', 'K', '1'};

}  // namespace

template <typename T>
void save_checkpoint(const ParameterVector<T>& params, const std::filesystem::path& path) {
  params.validate();
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::Io, "cannot create " + path.string());
  os.write(kCheckpointMagic, 8);
  put_u32(os, sizeof(T));
  put_u32(os, static_cast<std::uint32_t>(params.manifest.size()));
  for (const auto& s : params.manifest) {
    put_u32(os, static_cast<std::uint32_t>(s.name.size()));
    os.write(s.name.data(), static_cast<std::streamsize>(s.name.size()));
    put_u32(os, static_cast<std::uint32_t>(s.dims.size()));
    for (auto d : s.dims) put_u64(os, d);
  }
  put_u64(os, params.values.size());
  os.write(reinterpret_cast<const char*>(params.values.data()),
           static_cast<std::streamsize>(params.values.size() * sizeof(T)));
}

template <typename T>
ParameterVector<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::Io, "cannot open " + path.string());
  char magic[8];
  is.read(magic, 8);
  require(is && std::memcmp(magic, kCheckpointMagic, 8) == 0, ErrorKind::Format, "not a checkpoint");
  require(get_u32(is) == sizeof(T), ErrorKind::Format, "checkpoint scalar width mismatch");
  ParameterVector<T> p;
  const auto n = get_u32(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    TensorShape s;
    s.name.resize(get_u32(is));
    is.read(s.name.data(), static_cast<std::streamsize>(s.name.size()));
    const auto nd = get_u32(is);
    for (std::uint32_t d = 0; d < nd; ++d) s.dims.push_back(get_u64(is));
    p.manifest.push_back(std::move(s));
  }
  p.values.resize(get_u64(is));
  is.read(reinterpret_cast<char*>(p.values.data()), static_cast<std::streamsize>(p.values.size() * sizeof(T)));
  require(static_cast<bool>(is), ErrorKind::Format, "truncated checkpoint payload");
  p.validate();
  return p;
}

#define VFLBD_INSTANTIATE(T)                                                                       \
  template struct ParameterVector<T>;                                                              \
  template class Network<T>;                                                                       \
  template Matrix<T> softmax_rows<T>(const Matrix<T>&);                                            \
  template T cross_entropy<T>(const Matrix<T>&, std::span<const int>, Matrix<T>*);                 \
  template int strict_argmax<T>(std::span<const T>);                                               \
  template void sgd_step<T>(std::span<T>, std::span<const T>, T);                                  \
  template void adam_step<T>(AdamState<T>&, std::span<T>, std::span<const T>, const AdamConfig&); \
  template void save_checkpoint<T>(const ParameterVector<T>&, const std::filesystem::path&);       \
  template ParameterVector<T> load_checkpoint<T>(const std::filesystem::path&);

VFLBD_INSTANTIATE(float)
VFLBD_INSTANTIATE(double)

#undef VFLBD_INSTANTIATE

}  // namespace vflbd
