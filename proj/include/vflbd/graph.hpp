#pragma once

// Collusion graph over adversarial clients: topology presets, algebraic
// connectivity, one-hop feature sharing and the leader/BFS/vote consensus.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "vflbd/dataset.hpp"

namespace vflbd {

using Edge = std::pair<std::size_t, std::size_t>;

class AdversaryGraph {
 public:
  AdversaryGraph() = default;
  // `ids` are client ids; edges reference client ids. Throws Connectivity when
  // the result is disconnected, Contract on self-loops or unknown ids.
  AdversaryGraph(std::vector<std::size_t> ids, const std::vector<Edge>& edges);

  std::size_t size() const { return ids_.size(); }
  const std::vector<std::size_t>& ids() const { return ids_; }
  bool contains(std::size_t id) const;
  std::size_t degree(std::size_t id) const;
  // Neighbour ids in ascending order.
  std::vector<std::size_t> neighbors(std::size_t id) const;
  std::vector<Edge> edges() const;  // (u < v), lexicographic
  std::size_t num_edges() const;
  bool has_edge(std::size_t u, std::size_t v) const;

  // Position-indexed adjacency, positions follow ascending ids.
  const std::vector<std::vector<std::size_t>>& adjacency() const { return adj_; }
  std::size_t position(std::size_t id) const;

 private:
  std::vector<std::size_t> ids_;
  std::vector<std::vector<std::size_t>> adj_;
};

enum class Topology { Complete, Line, Ring, Star, Custom, DegreeSweep };
Topology parse_topology(const std::string& name);
std::string to_string(Topology t);

struct TopologyOptions {
  std::vector<Edge> custom_edges;  // Custom
  std::size_t extra_edges = 0;     // DegreeSweep: edges added on top of the line
};

// Line/ring/star follow ascending id order. DegreeSweep starts from the line
// and adds `extra_edges` edges one at a time, each the candidate that raises λ₂
// the most; candidates are visited in a seeded random order so ties resolve
// deterministically under `seed`.
AdversaryGraph build_graph(Topology topology, std::vector<std::size_t> ids, std::uint64_t seed,
                           const TopologyOptions& options = {});

// Graphs from the line up to the complete graph, `step` edges apart.
std::vector<AdversaryGraph> degree_sweep(const std::vector<std::size_t>& ids, std::size_t step,
                                         std::uint64_t seed);

// Eigenvalues (ascending) of a symmetric matrix by cyclic Jacobi rotations.
std::vector<double> symmetric_eigenvalues(Matrix<double> a, double tol = 1e-12);

Matrix<double> laplacian(const AdversaryGraph& g, bool normalized = false);

// λ₂ of the graph Laplacian (unnormalized unless `normalized`). A single node gives 0.
double algebraic_connectivity(const AdversaryGraph& g, bool normalized = false);

// Adversary m's slices together with those of its one-hop neighbours.
struct ConcatenatedView {
  std::size_t owner = 0;
  std::vector<std::size_t> members;  // ascending client ids, includes owner
  std::vector<Rect> geometry;        // slice rectangle per member
  std::vector<std::size_t> offsets;  // column offset of each member's block
  Matrix<float> features;            // N x Σ slice sizes, blocks in member order
  ImageShape image_shape;

  ImageShape flat_shape() const { return {1, 1, features.cols()}; }
  // Partial image of sample i: shared pixels filled, everything else 0.
  std::vector<float> partial_image(std::size_t i) const;
  std::vector<float> partial_mask() const;
};

ConcatenatedView make_view(const VerticalDataset& data, std::size_t owner, std::vector<std::size_t> members);
std::map<std::size_t, ConcatenatedView> share_features(const AdversaryGraph& g, const VerticalDataset& data);

std::size_t elect_leader(const AdversaryGraph& g);
std::vector<std::size_t> bfs_order(const AdversaryGraph& g, std::size_t leader);

template <typename P>
std::vector<std::pair<std::size_t, P>> bfs_collect(const AdversaryGraph& g, std::size_t leader,
                                                   const std::map<std::size_t, P>& payloads) {
  std::vector<std::pair<std::size_t, P>> out;
  for (std::size_t id : bfs_order(g, leader)) {
    auto it = payloads.find(id);
    require(it != payloads.end(), ErrorKind::Connectivity,
            "adversary " + std::to_string(id) + " has no payload");
    out.emplace_back(id, it->second);
  }
  return out;
}

enum class VoteRule { StrictlyAbove, AtLeast };

struct VoteTally {
  std::vector<std::vector<std::size_t>> sets;
};

std::size_t vote_threshold(std::size_t num_adversaries);  // ceil(|A| / 2)

// { j : multiplicity(j) > ceil(|A|/2) } (or >= under VoteRule::AtLeast), ascending.
std::vector<std::size_t> majority_vote(const VoteTally& tally, std::size_t num_adversaries,
                                       VoteRule rule = VoteRule::StrictlyAbove);

std::map<std::size_t, std::vector<std::size_t>> distribute_results(const AdversaryGraph& g, std::size_t leader,
                                                                   const std::vector<std::size_t>& global);

// Rows of client `client`'s slice for the given sample indices.
Matrix<float> materialize_slices(const VerticalDataset& data, std::size_t client,
                                 const std::vector<std::size_t>& indices);

// "u v" per line; '#' starts a comment.
std::vector<Edge> read_edge_list(const std::filesystem::path& path);
void write_edge_list(const AdversaryGraph& g, const std::filesystem::path& path);

}  // namespace vflbd
