#include "vflbd/graph.hpp"

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>

using namespace vflbd;

namespace {

double eigen_lambda2(const AdversaryGraph& g, bool normalized) {
  const Matrix<double> l = laplacian(g, normalized);
  Eigen::MatrixXd m(l.rows(), l.cols());
  for (std::size_t i = 0; i < l.rows(); ++i)
    for (std::size_t j = 0; j < l.cols(); ++j) m(Eigen::Index(i), Eigen::Index(j)) = l(i, j);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  return es.eigenvalues()(1);
}

AdversaryGraph random_connected(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> ids(n);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  std::vector<Edge> edges;
  for (std::size_t i = 1; i < n; ++i) edges.emplace_back(std::uniform_int_distribution<std::size_t>(0, i - 1)(rng), i);
  std::bernoulli_distribution extra(0.3);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (extra(rng)) edges.emplace_back(i, j);
  return AdversaryGraph(ids, edges);
}

std::vector<std::size_t> brute_vote(const VoteTally& t, std::size_t n, VoteRule rule) {
  std::map<std::size_t, std::size_t> count;
  for (const auto& s : t.sets) {
    std::vector<std::size_t> u = s;
    std::sort(u.begin(), u.end());
    u.erase(std::unique(u.begin(), u.end()), u.end());
    for (std::size_t j : u) ++count[j];
  }
  const std::size_t thr = (n + 1) / 2;
  std::vector<std::size_t> out;
  for (auto [j, c] : count)
    if (rule == VoteRule::StrictlyAbove ? c > thr : c >= thr) out.push_back(j);
  return out;
}

VerticalDataset small_dataset() {
  SyntheticSpec spec;
  spec.count = 40;
  spec.shape = {1, 6, 8};
  return partition_features(make_synthetic(spec), PartitionScheme::vertical_strips(6, 8, 4));
}

}  // namespace

TEST(Topology, EdgeCountsAndDegrees) {
  const auto k5 = build_graph(Topology::Complete, {0, 1, 2, 3, 4}, 1);
  EXPECT_EQ(k5.num_edges(), 10u);
  const auto p4 = build_graph(Topology::Line, {2, 5, 7, 9}, 1);
  EXPECT_EQ(p4.num_edges(), 3u);
  std::vector<std::size_t> deg;
  for (std::size_t id : p4.ids()) deg.push_back(p4.degree(id));
  EXPECT_EQ(deg, (std::vector<std::size_t>{1, 2, 2, 1}));
  EXPECT_EQ(build_graph(Topology::Ring, {0, 1, 2, 3}, 1).num_edges(), 4u);
  EXPECT_EQ(build_graph(Topology::Star, {0, 1, 2, 3}, 1).degree(0), 3u);
}

TEST(Topology, DegreeSweepGrowsToComplete) {
  std::vector<std::size_t> ids(10);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  const auto sweep = degree_sweep(ids, 4, 3);
  ASSERT_GE(sweep.size(), 2u);
  EXPECT_EQ(sweep.front().num_edges(), 9u);
  EXPECT_EQ(sweep.back().num_edges(), 45u);
  for (std::size_t i = 1; i < sweep.size(); ++i) {
    EXPECT_GE(sweep[i].num_edges(), sweep[i - 1].num_edges());
    for (auto e : sweep[i - 1].edges()) EXPECT_TRUE(sweep[i].has_edge(e.first, e.second));
  }
}

TEST(Topology, InvalidGraphs) {
  try {
    AdversaryGraph({0, 1, 2, 3}, {{0, 1}, {2, 3}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Connectivity);
  }
  EXPECT_THROW(AdversaryGraph({0, 1}, {{0, 0}}), Error);
  EXPECT_THROW(AdversaryGraph({0, 1}, {{0, 5}}), Error);
}

TEST(Connectivity, KnownSpectra) {
  EXPECT_NEAR(algebraic_connectivity(build_graph(Topology::Line, {0, 1}, 1)), 2.0, 1e-12);
  EXPECT_NEAR(algebraic_connectivity(build_graph(Topology::Complete, {0, 1, 2, 3}, 1)), 4.0, 1e-12);
  EXPECT_NEAR(algebraic_connectivity(build_graph(Topology::Line, {0, 1, 2}, 1)), 1.0, 1e-12);
  EXPECT_EQ(algebraic_connectivity(AdversaryGraph({4}, {})), 0.0);
}

TEST(Connectivity, MatchesEigenOnRandomGraphs) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + trial % 11;
    const auto g = random_connected(n, rng);
    for (bool norm : {false, true})
      EXPECT_NEAR(algebraic_connectivity(g, norm), eigen_lambda2(g, norm), 1e-9) << "n=" << n;
  }
}

TEST(Connectivity, DegreeSweepIsStrictlyIncreasingForSixNodes) {
  const auto sweep = degree_sweep({0, 1, 2, 3, 4, 5}, 2, 1);
  for (std::size_t i = 1; i < sweep.size(); ++i)
    EXPECT_GT(algebraic_connectivity(sweep[i]), algebraic_connectivity(sweep[i - 1]) + 1e-9);
}

TEST(Views, CompleteAndLineCoverage) {
  const auto data = small_dataset();
  const auto complete = share_features(build_graph(Topology::Complete, {0, 1, 3}, 1), data);
  for (const auto& [m, v] : complete) EXPECT_EQ(v.members, (std::vector<std::size_t>{0, 1, 3}));
  const auto line = share_features(build_graph(Topology::Line, {0, 1, 2, 3}, 1), data);
  EXPECT_EQ(line.at(1).members.size(), 3u);
  EXPECT_EQ(line.at(0).members.size(), 2u);
}

TEST(Views, ContentMatchesDatasetLookup) {
  const auto data = small_dataset();
  const auto views = share_features(build_graph(Topology::Line, {0, 1, 2, 3}, 1), data);
  std::mt19937_64 rng(2);
  for (int k = 0; k < 100; ++k) {
    const std::size_t m = rng() % 4, i = rng() % data.size();
    const auto& v = views.at(m);
    for (std::size_t b = 0; b < v.members.size(); ++b) {
      const auto src = data.client_view(v.members[b]).row(i);
      for (std::size_t j = 0; j < src.size(); ++j) EXPECT_EQ(v.features(i, v.offsets[b] + j), src[j]);
    }
    const auto img = v.partial_image(i), full = data.reassemble(i);
    const auto mask = v.partial_mask();
    for (std::size_t p = 0; p < img.size(); ++p) EXPECT_EQ(img[p], mask[p] ? full[p] : 0.0f);
  }
}

TEST(Consensus, LeaderElection) {
  EXPECT_EQ(elect_leader(build_graph(Topology::Star, {3, 1, 2, 0}, 1)), 0u);
  EXPECT_EQ(elect_leader(build_graph(Topology::Complete, {4, 6, 9}, 1)), 4u);
  const AdversaryGraph custom({0, 1, 2, 3}, {{0, 1}, {1, 2}, {1, 3}, {2, 3}});
  EXPECT_EQ(elect_leader(custom), 1u);
}

TEST(Consensus, BfsOrder) {
  const auto line = build_graph(Topology::Line, {0, 1, 2}, 1);
  EXPECT_EQ(bfs_order(line, 0), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(bfs_order(build_graph(Topology::Complete, {0, 1, 2, 3}, 1), 0), (std::vector<std::size_t>{0, 1, 2, 3}));
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const auto g = random_connected(2 + t % 9, rng);
    std::map<std::size_t, int> payloads;
    for (std::size_t id : g.ids()) payloads[id] = int(id);
    EXPECT_EQ(bfs_collect(g, elect_leader(g), payloads).size(), g.size());
  }
}

TEST(Consensus, VoteThresholdExamples) {
  VoteTally t{{{7, 8}, {7, 8}, {7, 8}, {7}, {}}};
  EXPECT_EQ(majority_vote(t, 5), (std::vector<std::size_t>{7}));
  VoteTally two{{{1, 2}, {2}}};
  EXPECT_EQ(majority_vote(two, 2), (std::vector<std::size_t>{2}));
  EXPECT_EQ(vote_threshold(5), 3u);
  EXPECT_EQ(vote_threshold(2), 1u);
}

TEST(Consensus, VoteMatchesBruteForceCounter) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng() % 9;
    VoteTally t;
    for (std::size_t a = 0; a < n; ++a) {
      std::vector<std::size_t> s;
      const std::size_t len = rng() % 40;
      for (std::size_t k = 0; k < len; ++k) s.push_back(rng() % 30);
      t.sets.push_back(s);
    }
    for (auto rule : {VoteRule::StrictlyAbove, VoteRule::AtLeast})
      ASSERT_EQ(majority_vote(t, n, rule), brute_vote(t, n, rule));
  }
}

TEST(Consensus, DistributionReachesEveryone) {
  const auto g = build_graph(Topology::Line, {0, 2, 4, 5}, 1);
  const std::vector<std::size_t> global{3, 9, 11};
  const auto out = distribute_results(g, elect_leader(g), global);
  ASSERT_EQ(out.size(), 4u);
  for (const auto& [m, s] : out) EXPECT_EQ(s, global);
}

TEST(Consensus, MaterializedSlicesMatchLookup) {
  const auto data = small_dataset();
  const std::vector<std::size_t> idx{0, 5, 39, 12};
  const auto m = materialize_slices(data, 2, idx);
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) EXPECT_EQ(m(r, c), data.client_view(2)(idx[r], c));
}

TEST(EdgeList, RoundTripAndMalformed) {
  const auto dir = std::filesystem::path(::testing::TempDir());
  const auto g = build_graph(Topology::Ring, {0, 1, 2, 3, 4}, 1);
  write_edge_list(g, dir / "ring.edges");
  EXPECT_EQ(read_edge_list(dir / "ring.edges"), g.edges());
  {
    std::ofstream os(dir / "bad.edges");
    os << "# comment\n0 1\n2 x\n";
  }
  try {
    read_edge_list(dir / "bad.edges");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Format);
  }
}
