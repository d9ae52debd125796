#include "vflbd/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "vflbd/rng.hpp"

namespace vflbd {
namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

class GzReader {
 public:
  explicit GzReader(const std::filesystem::path& path) : path_(path.string()) {
    file_ = gzopen(path_.c_str(), "rb");
    require(file_ != nullptr, ErrorKind::Io, "cannot open " + path_);
  }
  ~GzReader() {
    if (file_) gzclose(file_);
  }
  GzReader(const GzReader&) = delete;
  GzReader& operator=(const GzReader&) = delete;

  // Reads up to n bytes; returns the count actually read.
  std::size_t read(void* dst, std::size_t n) {
    int got = gzread(file_, dst, static_cast<unsigned>(n));
    require(got >= 0, ErrorKind::Io, "read failure in " + path_);
    return static_cast<std::size_t>(got);
  }

  std::uint32_t read_be32() {
    unsigned char b[4];
    require(read(b, 4) == 4, ErrorKind::Format, "truncated header in " + path_);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
  }

 private:
  std::string path_;
  gzFile file_ = nullptr;
};

void put_be32(std::string& out, std::uint32_t v) {
  out.push_back(char((v >> 24) & 0xff));
  out.push_back(char((v >> 16) & 0xff));
  out.push_back(char((v >> 8) & 0xff));
  out.push_back(char(v & 0xff));
}

void write_bytes(const std::filesystem::path& path, const std::string& bytes) {
  if (path.extension() == ".gz") {
    gzFile f = gzopen(path.string().c_str(), "wb");
    require(f != nullptr, ErrorKind::Io, "cannot create " + path.string());
    int wrote = gzwrite(f, bytes.data(), static_cast<unsigned>(bytes.size()));
    gzclose(f);
    require(wrote == static_cast<int>(bytes.size()), ErrorKind::Io, "short write " + path.string());
  } else {
    std::ofstream f(path, std::ios::binary);
    require(static_cast<bool>(f), ErrorKind::Io, "cannot create " + path.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
}

}  // namespace

void RawDataset::validate() const {
  require(!labels.empty(), ErrorKind::Contract, "dataset must hold at least one sample");
  require(images.rows() == labels.size(), ErrorKind::Alignment, "image/label count mismatch");
  require(images.cols() == shape.size(), ErrorKind::Contract, "image row width != C*H*W");
  for (int l : labels) {
    require(l >= 0 && l < num_classes, ErrorKind::Contract, "label outside class range");
  }
}

RawDataset load_idx(const std::filesystem::path& images_path,
                    const std::filesystem::path& labels_path, SplitTag split) {
  GzReader img(images_path);
  require(img.read_be32() == kImageMagic, ErrorKind::Format,
          "bad image magic in " + images_path.string());
  const std::uint32_t n_img = img.read_be32();
  const std::uint32_t rows = img.read_be32();
  const std::uint32_t cols = img.read_be32();

  GzReader lab(labels_path);
  require(lab.read_be32() == kLabelMagic, ErrorKind::Format,
          "bad label magic in " + labels_path.string());
  const std::uint32_t n_lab = lab.read_be32();
  require(n_img == n_lab, ErrorKind::Alignment,
          "image count " + std::to_string(n_img) + " != label count " + std::to_string(n_lab));

  RawDataset out;
  out.split = split;
  out.shape = ImageShape{1, rows, cols};
  const std::size_t px = std::size_t(rows) * cols;
  std::vector<unsigned char> buf(std::size_t(n_img) * px);
  require(img.read(buf.data(), buf.size()) == buf.size(), ErrorKind::Alignment,
          "image payload shorter than header count");
  std::vector<unsigned char> lbuf(n_lab);
  require(lab.read(lbuf.data(), lbuf.size()) == lbuf.size(), ErrorKind::Alignment,
          "label payload shorter than header count");

  out.images = Matrix<float>(n_img, px);
  std::transform(buf.begin(), buf.end(), out.images.storage().begin(),
                 [](unsigned char b) { return float(b) / 255.0f; });
  out.labels.assign(lbuf.begin(), lbuf.end());
  int max_label = 0;
  for (int l : out.labels) max_label = std::max(max_label, l);
  out.num_classes = std::max(10, max_label + 1);
  out.validate();
  return out;
}

void write_idx(const RawDataset& data, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path) {
  require(data.shape.channels == 1, ErrorKind::Contract, "IDX writer supports one channel");
  std::string img;
  put_be32(img, kImageMagic);
  put_be32(img, static_cast<std::uint32_t>(data.size()));
  put_be32(img, static_cast<std::uint32_t>(data.shape.height));
  put_be32(img, static_cast<std::uint32_t>(data.shape.width));
  for (float v : data.images.storage()) {
    img.push_back(char(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
  }
  std::string lab;
  put_be32(lab, kLabelMagic);
  put_be32(lab, static_cast<std::uint32_t>(data.size()));
  for (int l : data.labels) lab.push_back(char(static_cast<unsigned char>(l)));
  write_bytes(images_path, img);
  write_bytes(labels_path, lab);
}

RawDataset take_prefix(const RawDataset& data, std::size_t count) {
  count = std::min(count, data.size());
  RawDataset out;
  out.shape = data.shape;
  out.num_classes = data.num_classes;
  out.split = data.split;
  out.labels.assign(data.labels.begin(), data.labels.begin() + static_cast<std::ptrdiff_t>(count));
  std::vector<float> px(data.images.storage().begin(),
                        data.images.storage().begin() +
                            static_cast<std::ptrdiff_t>(count * data.images.cols()));
  out.images = Matrix<float>(count, data.images.cols(), std::move(px));
  return out;
}

RawDataset make_synthetic(const SyntheticSpec& spec, SplitTag split) {
  require(spec.count >= 1 && spec.num_classes >= 2, ErrorKind::Configuration,
          "synthetic dataset needs count >= 1 and >= 2 classes");
  const ImageShape shape = spec.shape;
  const std::size_t dim = shape.size();
  // Prototypes come from a split-independent stream so train/test share classes.
  Rng proto_rng = make_rng(spec.seed, {kTagSynthetic});
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::vector<float>> protos(static_cast<std::size_t>(spec.num_classes),
                                         std::vector<float>(dim, 0.0f));
  for (auto& proto : protos) {
    for (int blob = 0; blob < 3; ++blob) {
      double cy = 0.2 + 0.6 * unit(proto_rng), cx = 0.2 + 0.6 * unit(proto_rng);
      double rad = 0.08 + 0.12 * unit(proto_rng);
      for (std::size_t c = 0; c < shape.channels; ++c)
        for (std::size_t y = 0; y < shape.height; ++y)
          for (std::size_t x = 0; x < shape.width; ++x) {
            double dy = (double(y) + 0.5) / double(shape.height) - cy;
            double dx = (double(x) + 0.5) / double(shape.width) - cx;
            double v = std::exp(-(dx * dx + dy * dy) / (2 * rad * rad));
            float& p = proto[(c * shape.height + y) * shape.width + x];
            p = std::max(p, float(v));
          }
    }
  }
  Rng rng = make_rng(spec.seed, {kTagSynthetic, split == SplitTag::Train ? 1u : 2u});
  std::normal_distribution<double> noise(0.0, spec.noise_std);
  std::uniform_int_distribution<int> cls(0, spec.num_classes - 1);
  RawDataset out;
  out.shape = shape;
  out.num_classes = spec.num_classes;
  out.split = split;
  out.images = Matrix<float>(spec.count, dim);
  out.labels.resize(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) {
    int y = cls(rng);
    out.labels[i] = y;
    auto row = out.images.row(i);
    for (std::size_t d = 0; d < dim; ++d) {
      row[d] = float(std::clamp(double(protos[std::size_t(y)][d]) + noise(rng), 0.0, 1.0));
    }
  }
  return out;
}

bool overlaps(const Rect& a, const Rect& b) {
  return a.row0 < b.row0 + b.rows && b.row0 < a.row0 + a.rows && a.col0 < b.col0 + b.cols &&
         b.col0 < a.col0 + a.cols;
}

void PartitionScheme::validate() const {
  require(slices.size() >= 2, ErrorKind::Scheme, "a partition needs at least two clients");
  std::size_t area = 0;
  for (std::size_t i = 0; i < slices.size(); ++i) {
    const Rect& r = slices[i];
    require(r.rows > 0 && r.cols > 0, ErrorKind::Scheme, "empty slice for client " + std::to_string(i));
    require(r.row0 + r.rows <= image_height && r.col0 + r.cols <= image_width, ErrorKind::Scheme,
            "slice " + std::to_string(i) + " leaves the image");
    for (std::size_t j = 0; j < i; ++j) {
      require(!overlaps(r, slices[j]), ErrorKind::Scheme,
              "slices " + std::to_string(j) + " and " + std::to_string(i) + " overlap");
    }
    area += r.area();
  }
  // Disjoint and inside the image, so equal area means full cover.
  require(area == image_height * image_width, ErrorKind::Scheme, "slices do not cover the image");
}

std::size_t PartitionScheme::owner_of(std::size_t r, std::size_t c) const {
  for (std::size_t k = 0; k < slices.size(); ++k)
    if (slices[k].contains(r, c)) return k;
  fail(ErrorKind::Scheme, "pixel not covered by any slice");
}

PartitionScheme PartitionScheme::vertical_strips(std::size_t height, std::size_t width,
                                                 std::size_t clients) {
  require(clients >= 2 && clients <= width, ErrorKind::Scheme, "strip count must be in [2, width]");
  PartitionScheme s{height, width, {}};
  const std::size_t base = width / clients, extra = width % clients;
  std::size_t col = 0;
  for (std::size_t k = 0; k < clients; ++k) {
    std::size_t w = base + (k < extra ? 1 : 0);
    s.slices.push_back(Rect{0, col, height, w});
    col += w;
  }
  return s;
}

PartitionScheme PartitionScheme::grid(std::size_t height, std::size_t width, std::size_t grid_rows,
                                      std::size_t grid_cols) {
  require(grid_rows * grid_cols >= 2 && grid_rows <= height && grid_cols <= width,
          ErrorKind::Scheme, "invalid grid partition");
  PartitionScheme s{height, width, {}};
  std::size_t row = 0;
  for (std::size_t gr = 0; gr < grid_rows; ++gr) {
    std::size_t h = height / grid_rows + (gr < height % grid_rows ? 1 : 0);
    std::size_t col = 0;
    for (std::size_t gc = 0; gc < grid_cols; ++gc) {
      std::size_t w = width / grid_cols + (gc < width % grid_cols ? 1 : 0);
      s.slices.push_back(Rect{row, col, h, w});
      col += w;
    }
    row += h;
  }
  return s;
}

void extract_rect(std::span<const float> image, const ImageShape& shape, const Rect& rect,
                  std::span<float> out) {
  std::size_t o = 0;
  for (std::size_t c = 0; c < shape.channels; ++c)
    for (std::size_t r = 0; r < rect.rows; ++r) {
      const float* src = image.data() + (c * shape.height + rect.row0 + r) * shape.width + rect.col0;
      std::copy(src, src + rect.cols, out.data() + o);
      o += rect.cols;
    }
}

VerticalDataset::VerticalDataset(std::vector<Matrix<float>> slices, std::vector<int> labels,
                                 PartitionScheme scheme, ImageShape shape, int num_classes)
    : slices_(std::move(slices)),
      labels_(std::move(labels)),
      scheme_(std::move(scheme)),
      shape_(shape),
      num_classes_(num_classes) {}

ImageShape VerticalDataset::slice_shape(std::size_t client) const {
  const Rect& r = scheme_.slices.at(client);
  return ImageShape{shape_.channels, r.rows, r.cols};
}

std::vector<float> VerticalDataset::reassemble(std::size_t i) const {
  std::vector<float> img(shape_.size(), 0.0f);
  for (std::size_t k = 0; k < slices_.size(); ++k) {
    const Rect& rect = scheme_.slices[k];
    auto src = slices_[k].row(i);
    std::size_t o = 0;
    for (std::size_t c = 0; c < shape_.channels; ++c)
      for (std::size_t r = 0; r < rect.rows; ++r) {
        float* dst = img.data() + (c * shape_.height + rect.row0 + r) * shape_.width + rect.col0;
        std::copy(src.data() + o, src.data() + o + rect.cols, dst);
        o += rect.cols;
      }
  }
  return img;
}

VerticalDataset partition_features(const RawDataset& raw, const PartitionScheme& scheme) {
  require(scheme.image_height == raw.shape.height && scheme.image_width == raw.shape.width,
          ErrorKind::Scheme, "scheme geometry does not match image shape");
  scheme.validate();
  std::vector<Matrix<float>> slices;
  slices.reserve(scheme.num_clients());
  for (const Rect& rect : scheme.slices) {
    Matrix<float> m(raw.size(), raw.shape.channels * rect.area());
    for (std::size_t i = 0; i < raw.size(); ++i) extract_rect(raw.images.row(i), raw.shape, rect, m.row(i));
    slices.push_back(std::move(m));
  }
  return VerticalDataset(std::move(slices), raw.labels, scheme, raw.shape, raw.num_classes);
}

std::vector<std::size_t> AuxiliaryLabels::indices() const {
  std::vector<std::size_t> out;
  out.reserve(entries.size());
  for (const auto& [i, _] : entries) out.push_back(i);
  return out;
}

std::vector<std::size_t> AuxiliaryLabels::target_indices() const {
  std::vector<std::size_t> out;
  for (const auto& [i, l] : entries)
    if (l == target_label) out.push_back(i);
  return out;
}

AuxiliaryLabels sample_auxiliary(const std::vector<int>& labels, std::size_t count,
                                 double target_fraction, int target_label, std::uint64_t seed) {
  require(count <= labels.size(), ErrorKind::Configuration, "auxiliary count exceeds dataset size");
  require(target_fraction >= 0.0 && target_fraction <= 1.0, ErrorKind::Configuration,
          "target fraction must lie in [0,1]");
  AuxiliaryLabels aux;
  aux.target_fraction = target_fraction;
  aux.target_label = target_label;
  if (count == 0) return aux;
  const auto n_target = static_cast<std::size_t>(std::llround(double(count) * target_fraction));
  std::vector<std::size_t> targets, others;
  for (std::size_t i = 0; i < labels.size(); ++i) (labels[i] == target_label ? targets : others).push_back(i);
  require(targets.size() >= n_target, ErrorKind::Scarcity,
          "only " + std::to_string(targets.size()) + " samples carry the target label");
  require(others.size() >= count - n_target, ErrorKind::Scarcity, "not enough non-target samples");
  Rng rng = make_rng(seed, {kTagAux});
  std::shuffle(targets.begin(), targets.end(), rng);
  std::shuffle(others.begin(), others.end(), rng);
  for (std::size_t k = 0; k < n_target; ++k) aux.entries[targets[k]] = target_label;
  for (std::size_t k = 0; k < count - n_target; ++k) aux.entries[others[k]] = labels[others[k]];
  return aux;
}

std::size_t rounds_per_epoch(std::size_t n, std::size_t batch_size) {
  return (n + batch_size - 1) / batch_size;
}

std::vector<std::size_t> minibatch_indices(std::size_t n, std::size_t batch_size,
                                           std::size_t round_t, std::uint64_t seed) {
  require(batch_size >= 1 && batch_size <= n, ErrorKind::Configuration,
          "batch size must lie in [1, N]");
  const std::size_t per_epoch = rounds_per_epoch(n, batch_size);
  const std::size_t epoch = round_t / per_epoch, pos = round_t % per_epoch;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng = make_rng(seed, {kTagBatch, epoch});
  std::shuffle(perm.begin(), perm.end(), rng);
  const std::size_t begin = pos * batch_size, end = std::min(n, begin + batch_size);
  return {perm.begin() + static_cast<std::ptrdiff_t>(begin), perm.begin() + static_cast<std::ptrdiff_t>(end)};
}

}  // namespace vflbd
