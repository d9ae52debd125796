#include "vflbd/dataset.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <set>

namespace fs = std::filesystem;
using namespace vflbd;

namespace {

RawDataset tiny_fixture() {
  RawDataset d;
  d.shape = {1, 3, 4};
  d.num_classes = 10;
  d.images = Matrix<float>(4, 12);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 12; ++j) d.images(i, j) = float((i * 37 + j * 11) % 256) / 255.0f;
  d.labels = {3, 0, 9, 1};
  return d;
}

fs::path temp(const std::string& name) { return fs::path(::testing::TempDir()) / name; }

void expect_kind(ErrorKind kind, const std::function<void()>& f) {
  try {
    f();
    FAIL() << "no error raised";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
  }
}

}  // namespace

TEST(Idx, RoundTripPlainAndGzip) {
  const RawDataset d = tiny_fixture();
  for (const char* ext : {"", ".gz"}) {
    const auto img = temp(std::string("rt-img") + ext), lab = temp(std::string("rt-lab") + ext);
    write_idx(d, img, lab);
    const RawDataset back = load_idx(img, lab);
    EXPECT_EQ(back.shape, d.shape);
    EXPECT_EQ(back.labels, d.labels);
    EXPECT_EQ(back.images, d.images);
  }
}

TEST(Idx, TruncatedLabelsAreAnAlignmentError) {
  const RawDataset d = tiny_fixture();
  const auto img = temp("tr-img"), lab = temp("tr-lab");
  write_idx(d, img, lab);
  const auto size = fs::file_size(lab);
  fs::resize_file(lab, size - 2);
  expect_kind(ErrorKind::Alignment, [&] { load_idx(img, lab); });
}

TEST(Idx, BadMagicIsAFormatError) {
  const RawDataset d = tiny_fixture();
  const auto img = temp("bm-img"), lab = temp("bm-lab");
  write_idx(d, img, lab);
  expect_kind(ErrorKind::Format, [&] { load_idx(lab, lab); });
}

TEST(Idx, MissingFileIsAnIoError) {
  expect_kind(ErrorKind::Io, [] { load_idx("/nonexistent/a", "/nonexistent/b"); });
}

TEST(Idx, BundledMnistHeaders) {
  const fs::path dir = fs::path(VFLBD_DATA_DIR) / "mnist";
  const RawDataset train = load_idx(dir / "train-images-idx3-ubyte.gz", dir / "train-labels-idx1-ubyte.gz");
  EXPECT_EQ(train.size(), 8000u);
  EXPECT_EQ(train.shape, (ImageShape{1, 28, 28}));
  const RawDataset test =
      load_idx(dir / "t10k-images-idx3-ubyte.gz", dir / "t10k-labels-idx1-ubyte.gz", SplitTag::Test);
  EXPECT_EQ(test.size(), 2000u);
  std::set<int> classes(train.labels.begin(), train.labels.end());
  EXPECT_EQ(classes.size(), 10u);
}

TEST(Partition, QuadrantsAreFourteenSquare) {
  const auto s = PartitionScheme::grid(28, 28, 2, 2);
  ASSERT_EQ(s.num_clients(), 4u);
  for (const auto& r : s.slices) {
    EXPECT_EQ(r.rows, 14u);
    EXPECT_EQ(r.cols, 14u);
  }
  EXPECT_NO_THROW(s.validate());
}

TEST(Partition, TenStripWidths) {
  const auto s = PartitionScheme::vertical_strips(28, 28, 10);
  std::vector<std::size_t> widths;
  std::size_t sum = 0;
  for (const auto& r : s.slices) {
    widths.push_back(r.cols);
    sum += r.cols;
  }
  EXPECT_EQ(widths, (std::vector<std::size_t>{3, 3, 3, 3, 3, 3, 3, 3, 2, 2}));
  EXPECT_EQ(sum, 28u);
}

TEST(Partition, SixStripWidths) {
  const auto s = PartitionScheme::vertical_strips(28, 28, 6);
  std::vector<std::size_t> widths;
  for (const auto& r : s.slices) widths.push_back(r.cols);
  EXPECT_EQ(widths, (std::vector<std::size_t>{5, 5, 5, 5, 4, 4}));
}

TEST(Partition, OverlapAndGapAreSchemeErrors) {
  PartitionScheme s{4, 4, {Rect{0, 0, 4, 3}, Rect{0, 2, 4, 2}}};
  expect_kind(ErrorKind::Scheme, [&] { s.validate(); });
  PartitionScheme gap{4, 4, {Rect{0, 0, 4, 1}, Rect{0, 2, 4, 2}}};
  expect_kind(ErrorKind::Scheme, [&] { gap.validate(); });
}

TEST(Partition, EveryPixelHasExactlyOneOwner) {
  for (auto s : {PartitionScheme::vertical_strips(28, 28, 6), PartitionScheme::grid(28, 28, 3, 4),
                 PartitionScheme::vertical_strips(28, 28, 10)}) {
    for (std::size_t r = 0; r < 28; ++r)
      for (std::size_t c = 0; c < 28; ++c) {
        std::size_t owners = 0;
        for (const auto& rect : s.slices) owners += rect.contains(r, c);
        EXPECT_EQ(owners, 1u);
        EXPECT_TRUE(s.slices[s.owner_of(r, c)].contains(r, c));
      }
  }
}

TEST(Partition, ReassembleInvertsSplit) {
  SyntheticSpec spec;
  spec.count = 20;
  spec.shape = {2, 8, 9};
  const RawDataset raw = make_synthetic(spec);
  const auto v = partition_features(raw, PartitionScheme::grid(8, 9, 2, 3));
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const auto img = v.reassemble(i);
    auto row = raw.images.row(i);
    EXPECT_TRUE(std::equal(img.begin(), img.end(), row.begin()));
  }
}

TEST(Auxiliary, TargetCountsFollowRounding) {
  std::vector<int> labels(5000);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = int(i % 10);
  auto a = sample_auxiliary(labels, 360, 0.16, 0, 3);
  EXPECT_EQ(a.size(), 360u);
  EXPECT_EQ(a.target_indices().size(), 58u);
  auto b = sample_auxiliary(labels, 350, 0.14, 0, 3);
  EXPECT_EQ(b.target_indices().size(), 49u);
  EXPECT_TRUE(sample_auxiliary(labels, 0, 0.16, 0, 3).entries.empty());
}

TEST(Auxiliary, LabelsMatchDatasetAndDrawIsSeeded) {
  std::vector<int> labels(1000);
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = int((i * 7) % 10);
  const auto a = sample_auxiliary(labels, 100, 0.2, 4, 11);
  for (auto [i, y] : a.entries) EXPECT_EQ(labels[i], y);
  EXPECT_EQ(a.entries, sample_auxiliary(labels, 100, 0.2, 4, 11).entries);
  EXPECT_NE(a.entries, sample_auxiliary(labels, 100, 0.2, 4, 12).entries);
}

TEST(Minibatch, SingleBatchIsPermutation) {
  auto idx = minibatch_indices(10, 10, 0, 5);
  std::sort(idx.begin(), idx.end());
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(idx[i], i);
  EXPECT_EQ(minibatch_indices(10, 10, 0, 5), minibatch_indices(10, 10, 0, 5));
}

TEST(Minibatch, EpochCoversEachIndexOnce) {
  for (std::size_t n : {100u, 101u, 250u}) {
    const std::size_t b = 16, rounds = rounds_per_epoch(n, b);
    for (std::size_t epoch = 0; epoch < 2; ++epoch) {
      std::multiset<std::size_t> seen;
      for (std::size_t t = 0; t < rounds; ++t)
        for (std::size_t i : minibatch_indices(n, b, epoch * rounds + t, 9)) seen.insert(i);
      ASSERT_EQ(seen.size(), n);
      for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(seen.count(i), 1u);
    }
  }
}

TEST(Synthetic, ShapesAndRange) {
  SyntheticSpec spec;
  spec.count = 50;
  const auto d = make_synthetic(spec);
  EXPECT_EQ(d.images.rows(), 50u);
  for (float v : d.images.storage()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_EQ(make_synthetic(spec).images, d.images);
}
