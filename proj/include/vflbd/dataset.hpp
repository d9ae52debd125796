#pragma once

// Image datasets, vertical (feature-wise) partitioning across clients, the
// adversaries' small labelled auxiliary set, and the server's mini-batch
// index stream.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vflbd/tensor.hpp"

namespace vflbd {

struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t size() const { return channels * height * width; }
  bool operator==(const ImageShape&) const = default;
};

enum class SplitTag { Train, Test };

struct RawDataset {
  Matrix<float> images;  // N x (C*H*W), pixels in [0,1], channel-major per row
  std::vector<int> labels;
  ImageShape shape;
  int num_classes = 10;
  SplitTag split = SplitTag::Train;

  std::size_t size() const { return labels.size(); }
  void validate() const;
};

// Reads an IDX image/label pair (plain or gzip). Images must be magic 0x803
// (uint8, 3 dims), labels 0x801 (uint8, 1 dim).
RawDataset load_idx(const std::filesystem::path& images_path,
                    const std::filesystem::path& labels_path, SplitTag split = SplitTag::Train);

// Writes pixels (rounded from [0,1] to uint8) and labels as IDX files; gzip
// when the path ends in ".gz". Used for fixtures and data preparation.
void write_idx(const RawDataset& data, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path);

// Keeps the first `count` samples.
RawDataset take_prefix(const RawDataset& data, std::size_t count);

struct SyntheticSpec {
  std::size_t count = 1000;
  int num_classes = 10;
  ImageShape shape{1, 28, 28};
  double noise_std = 0.15;
  std::uint64_t seed = 7;
};

// Class-conditional blob images: each class owns a random smooth prototype,
// samples are prototype + Gaussian noise clamped to [0,1].
RawDataset make_synthetic(const SyntheticSpec& spec, SplitTag split = SplitTag::Train);

struct Rect {
  std::size_t row0 = 0;
  std::size_t col0 = 0;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t area() const { return rows * cols; }
  bool contains(std::size_t r, std::size_t c) const {
    return r >= row0 && r < row0 + rows && c >= col0 && c < col0 + cols;
  }
  bool operator==(const Rect&) const = default;
};

bool overlaps(const Rect& a, const Rect& b);

struct PartitionScheme {
  std::size_t image_height = 0;
  std::size_t image_width = 0;
  std::vector<Rect> slices;  // one rectangle per client

  std::size_t num_clients() const { return slices.size(); }
  // Throws Scheme when rectangles overlap, leave pixels uncovered or leave the image.
  void validate() const;
  // Client owning pixel (r, c).
  std::size_t owner_of(std::size_t r, std::size_t c) const;

  static PartitionScheme vertical_strips(std::size_t height, std::size_t width,
                                         std::size_t clients);
  static PartitionScheme grid(std::size_t height, std::size_t width, std::size_t grid_rows,
                              std::size_t grid_cols);
};

// Feature slices per client. Only the server view exposes labels.
class VerticalDataset {
 public:
  VerticalDataset() = default;
  VerticalDataset(std::vector<Matrix<float>> slices, std::vector<int> labels,
                  PartitionScheme scheme, ImageShape shape, int num_classes);

  std::size_t size() const { return labels_.size(); }
  std::size_t num_clients() const { return slices_.size(); }
  const PartitionScheme& scheme() const { return scheme_; }
  const ImageShape& image_shape() const { return shape_; }
  int num_classes() const { return num_classes_; }

  // Client-visible data: slice k, one row per sample (C*rows*cols values).
  const Matrix<float>& client_view(std::size_t client) const { return slices_.at(client); }
  ImageShape slice_shape(std::size_t client) const;

  // Server-visible labels.
  const std::vector<int>& server_labels() const { return labels_; }

  // Reassembles sample i into a full image row.
  std::vector<float> reassemble(std::size_t i) const;

 private:
  std::vector<Matrix<float>> slices_;
  std::vector<int> labels_;
  PartitionScheme scheme_;
  ImageShape shape_;
  int num_classes_ = 10;
};

VerticalDataset partition_features(const RawDataset& raw, const PartitionScheme& scheme);

// Copies the rectangle `rect` of image row `image` (full image) into `out`.
void extract_rect(std::span<const float> image, const ImageShape& shape, const Rect& rect,
                  std::span<float> out);

struct AuxiliaryLabels {
  std::map<std::size_t, int> entries;  // sample index -> label
  double target_fraction = 0.0;
  int target_label = 0;

  std::size_t size() const { return entries.size(); }
  bool contains(std::size_t i) const { return entries.count(i) != 0; }
  std::vector<std::size_t> indices() const;
  std::vector<std::size_t> target_indices() const;
};

// Draws `count` labelled samples of which round(count * target_fraction) carry
// `target_label`. Deterministic under seed.
AuxiliaryLabels sample_auxiliary(const std::vector<int>& labels, std::size_t count,
                                 double target_fraction, int target_label, std::uint64_t seed);

// Index list the server issues to every client for round t. Each epoch of
// ceil(N / batch_size) rounds is one seeded permutation of 0..N-1.
std::vector<std::size_t> minibatch_indices(std::size_t n, std::size_t batch_size,
                                           std::size_t round_t, std::uint64_t seed);

std::size_t rounds_per_epoch(std::size_t n, std::size_t batch_size);

}  // namespace vflbd
