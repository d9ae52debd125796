#include "vflbd/graph.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "vflbd/rng.hpp"

namespace vflbd {

AdversaryGraph::AdversaryGraph(std::vector<std::size_t> ids, const std::vector<Edge>& edges)
    : ids_(std::move(ids)) {
  std::sort(ids_.begin(), ids_.end());
  require(!ids_.empty(), ErrorKind::Contract, "adversary set is empty");
  require(std::adjacent_find(ids_.begin(), ids_.end()) == ids_.end(), ErrorKind::Contract,
          "duplicate adversary id");
  adj_.assign(ids_.size(), {});
  for (auto [u, v] : edges) {
    require(u != v, ErrorKind::Contract, "self-loop on adversary " + std::to_string(u));
    require(contains(u) && contains(v), ErrorKind::Contract,
            "edge " + std::to_string(u) + "-" + std::to_string(v) + " references a non-adversary");
    const std::size_t a = position(u), b = position(v);
    if (std::find(adj_[a].begin(), adj_[a].end(), b) != adj_[a].end()) continue;
    adj_[a].push_back(b);
    adj_[b].push_back(a);
  }
  for (auto& row : adj_) std::sort(row.begin(), row.end());
  std::vector<bool> seen(ids_.size(), false);
  std::deque<std::size_t> q{0};
  seen[0] = true;
  std::size_t visited = 1;
  while (!q.empty()) {
    const std::size_t u = q.front();
    q.pop_front();
    for (std::size_t v : adj_[u])
      if (!seen[v]) {
        seen[v] = true;
        ++visited;
        q.push_back(v);
      }
  }
  require(visited == ids_.size(), ErrorKind::Connectivity, "adversary graph is disconnected");
}

bool AdversaryGraph::contains(std::size_t id) const { return std::binary_search(ids_.begin(), ids_.end(), id); }

std::size_t AdversaryGraph::position(std::size_t id) const {
  auto it = std::lower_bound(ids_.begin(), ids_.end(), id);
  require(it != ids_.end() && *it == id, ErrorKind::Contract, "unknown adversary " + std::to_string(id));
  return static_cast<std::size_t>(it - ids_.begin());
}

std::size_t AdversaryGraph::degree(std::size_t id) const { return adj_[position(id)].size(); }

std::vector<std::size_t> AdversaryGraph::neighbors(std::size_t id) const {
  std::vector<std::size_t> out;
  for (std::size_t p : adj_[position(id)]) out.push_back(ids_[p]);
  return out;
}

std::vector<Edge> AdversaryGraph::edges() const {
  std::vector<Edge> out;
  for (std::size_t a = 0; a < adj_.size(); ++a)
    for (std::size_t b : adj_[a])
      if (a < b) out.emplace_back(ids_[a], ids_[b]);
  return out;
}

std::size_t AdversaryGraph::num_edges() const {
  std::size_t s = 0;
  for (const auto& r : adj_) s += r.size();
  return s / 2;
}

bool AdversaryGraph::has_edge(std::size_t u, std::size_t v) const {
  const auto& r = adj_[position(u)];
  return std::binary_search(r.begin(), r.end(), position(v));
}

Topology parse_topology(const std::string& name) {
  if (name == "complete") return Topology::Complete;
  if (name == "line") return Topology::Line;
  if (name == "ring") return Topology::Ring;
  if (name == "star") return Topology::Star;
  if (name == "custom") return Topology::Custom;
  if (name == "degree-sweep") return Topology::DegreeSweep;
  fail(ErrorKind::Configuration, "unknown topology '" + name + "'");
}

std::string to_string(Topology t) {
  switch (t) {
    case Topology::Complete: return "complete";
    case Topology::Line: return "line";
    case Topology::Ring: return "ring";
    case Topology::Star: return "star";
    case Topology::Custom: return "custom";
    case Topology::DegreeSweep: return "degree-sweep";
  }
  return "?";
}

namespace {

std::vector<Edge> line_edges(const std::vector<std::size_t>& ids) {
  std::vector<Edge> e;
  for (std::size_t i = 1; i < ids.size(); ++i) e.emplace_back(ids[i - 1], ids[i]);
  return e;
}

// Adds `count` edges greedily by λ₂, scanning candidates in a seeded order.
std::vector<Edge> grow_edges(const std::vector<std::size_t>& ids, std::vector<Edge> edges, std::size_t count,
                             std::uint64_t seed) {
  for (std::size_t added = 0; added < count; ++added) {
    std::set<Edge> have(edges.begin(), edges.end());
    std::vector<Edge> cand;
    for (std::size_t a = 0; a < ids.size(); ++a)
      for (std::size_t b = a + 1; b < ids.size(); ++b)
        if (!have.count({ids[a], ids[b]})) cand.emplace_back(ids[a], ids[b]);
    if (cand.empty()) break;
    Rng rng = make_rng(seed, {kTagGraph, added});
    std::shuffle(cand.begin(), cand.end(), rng);
    double best = -1.0;
    Edge pick = cand.front();
    for (const Edge& e : cand) {
      auto trial = edges;
      trial.push_back(e);
      const double rho = algebraic_connectivity(AdversaryGraph(ids, trial));
      if (rho > best + 1e-9) {
        best = rho;
        pick = e;
      }
    }
    edges.push_back(pick);
  }
  return edges;
}

}  // namespace

AdversaryGraph build_graph(Topology topology, std::vector<std::size_t> ids, std::uint64_t seed,
                           const TopologyOptions& options) {
  std::sort(ids.begin(), ids.end());
  std::vector<Edge> edges;
  switch (topology) {
    case Topology::Complete:
      for (std::size_t a = 0; a < ids.size(); ++a)
        for (std::size_t b = a + 1; b < ids.size(); ++b) edges.emplace_back(ids[a], ids[b]);
      break;
    case Topology::Line: edges = line_edges(ids); break;
    case Topology::Ring:
      edges = line_edges(ids);
      if (ids.size() > 2) edges.emplace_back(ids.front(), ids.back());
      break;
    case Topology::Star:
      for (std::size_t i = 1; i < ids.size(); ++i) edges.emplace_back(ids[0], ids[i]);
      break;
    case Topology::Custom: edges = options.custom_edges; break;
    case Topology::DegreeSweep: edges = grow_edges(ids, line_edges(ids), options.extra_edges, seed); break;
  }
  return AdversaryGraph(std::move(ids), edges);
}

std::vector<AdversaryGraph> degree_sweep(const std::vector<std::size_t>& ids, std::size_t step, std::uint64_t seed) {
  require(step >= 1, ErrorKind::Configuration, "degree sweep step must be positive");
  std::vector<std::size_t> sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const std::size_t extra_max = n * (n - 1) / 2 - (n - 1);
  std::vector<AdversaryGraph> out;
  std::vector<Edge> edges = line_edges(sorted);
  out.emplace_back(sorted, edges);
  std::size_t extra = 0;
  while (extra < extra_max) {
    const std::size_t add = std::min(step, extra_max - extra);
    for (std::size_t i = 0; i < add; ++i) edges = grow_edges(sorted, edges, 1, derive_seed(seed, {extra + i}));
    extra += add;
    out.emplace_back(sorted, edges);
  }
  return out;
}

std::vector<double> symmetric_eigenvalues(Matrix<double> a, double tol) {
  const std::size_t n = a.rows();
  require(a.cols() == n, ErrorKind::Contract, "matrix must be square");
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(off) < tol) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a(p, q)) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
  std::sort(ev.begin(), ev.end());
  return ev;
}

Matrix<double> laplacian(const AdversaryGraph& g, bool normalized) {
  const std::size_t n = g.size();
  Matrix<double> l(n, n);
  const auto& adj = g.adjacency();
  for (std::size_t a = 0; a < n; ++a) {
    l(a, a) = double(adj[a].size());
    for (std::size_t b : adj[a]) l(a, b) = -1.0;
  }
  if (normalized)
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t b = 0; b < n; ++b)
        if (l(a, b) != 0.0) l(a, b) /= std::sqrt(double(adj[a].size()) * double(adj[b].size()));
  return l;
}

double algebraic_connectivity(const AdversaryGraph& g, bool normalized) {
  if (g.size() < 2) return 0.0;
  const double rho = symmetric_eigenvalues(laplacian(g, normalized))[1];
  require(rho > 1e-9, ErrorKind::Contract, "graph has zero algebraic connectivity");
  return rho;
}

std::vector<float> ConcatenatedView::partial_image(std::size_t i) const {
  std::vector<float> img(image_shape.size(), 0.0f);
  auto row = features.row(i);
  const std::size_t plane = image_shape.height * image_shape.width;
  for (std::size_t m = 0; m < members.size(); ++m) {
    const Rect& r = geometry[m];
    std::size_t o = offsets[m];
    for (std::size_t c = 0; c < image_shape.channels; ++c)
      for (std::size_t y = 0; y < r.rows; ++y)
        for (std::size_t x = 0; x < r.cols; ++x)
          img[c * plane + (r.row0 + y) * image_shape.width + r.col0 + x] = row[o++];
  }
  return img;
}

std::vector<float> ConcatenatedView::partial_mask() const {
  std::vector<float> mask(image_shape.size(), 0.0f);
  const std::size_t plane = image_shape.height * image_shape.width;
  for (const Rect& r : geometry)
    for (std::size_t c = 0; c < image_shape.channels; ++c)
      for (std::size_t y = 0; y < r.rows; ++y)
        for (std::size_t x = 0; x < r.cols; ++x) mask[c * plane + (r.row0 + y) * image_shape.width + r.col0 + x] = 1;
  return mask;
}

ConcatenatedView make_view(const VerticalDataset& data, std::size_t owner, std::vector<std::size_t> members) {
  std::sort(members.begin(), members.end());
  members.erase(std::unique(members.begin(), members.end()), members.end());
  require(std::binary_search(members.begin(), members.end(), owner), ErrorKind::Contract,
          "view must include its owner");
  ConcatenatedView v;
  v.owner = owner;
  v.members = members;
  v.image_shape = data.image_shape();
  std::size_t width = 0;
  for (std::size_t m : members) {
    require(m < data.num_clients(), ErrorKind::Contract, "adversary id " + std::to_string(m) + " is not a client");
    v.geometry.push_back(data.scheme().slices[m]);
    v.offsets.push_back(width);
    width += data.client_view(m).cols();
  }
  v.features = Matrix<float>(data.size(), width);
  for (std::size_t j = 0; j < members.size(); ++j) {
    const auto& src = data.client_view(members[j]);
    for (std::size_t i = 0; i < data.size(); ++i)
      std::copy(src.row(i).begin(), src.row(i).end(), v.features.row(i).begin() + v.offsets[j]);
  }
  return v;
}

std::map<std::size_t, ConcatenatedView> share_features(const AdversaryGraph& g, const VerticalDataset& data) {
  std::map<std::size_t, ConcatenatedView> out;
  for (std::size_t m : g.ids()) {
    auto members = g.neighbors(m);
    members.push_back(m);
    out.emplace(m, make_view(data, m, std::move(members)));
  }
  return out;
}

std::size_t elect_leader(const AdversaryGraph& g) {
  std::size_t best = g.ids().front();
  for (std::size_t id : g.ids())
    if (g.degree(id) > g.degree(best)) best = id;
  return best;
}

std::vector<std::size_t> bfs_order(const AdversaryGraph& g, std::size_t leader) {
  std::vector<bool> seen(g.size(), false);
  std::vector<std::size_t> order;
  std::deque<std::size_t> q{g.position(leader)};
  seen[q.front()] = true;
  while (!q.empty()) {
    const std::size_t u = q.front();
    q.pop_front();
    order.push_back(g.ids()[u]);
    for (std::size_t v : g.adjacency()[u])
      if (!seen[v]) {
        seen[v] = true;
        q.push_back(v);
      }
  }
  require(order.size() == g.size(), ErrorKind::Connectivity, "BFS did not reach every adversary");
  return order;
}

std::size_t vote_threshold(std::size_t num_adversaries) { return (num_adversaries + 1) / 2; }

std::vector<std::size_t> majority_vote(const VoteTally& tally, std::size_t num_adversaries, VoteRule rule) {
  std::map<std::size_t, std::size_t> count;
  for (const auto& s : tally.sets) {
    std::set<std::size_t> uniq(s.begin(), s.end());
    for (std::size_t j : uniq) ++count[j];
  }
  const std::size_t th = vote_threshold(num_adversaries);
  std::vector<std::size_t> out;
  for (auto [j, c] : count)
    if (rule == VoteRule::StrictlyAbove ? c > th : c >= th) out.push_back(j);
  return out;
}

std::map<std::size_t, std::vector<std::size_t>> distribute_results(const AdversaryGraph& g, std::size_t leader,
                                                                   const std::vector<std::size_t>& global) {
  std::map<std::size_t, std::vector<std::size_t>> out;
  for (std::size_t id : bfs_order(g, leader)) out[id] = global;
  return out;
}

Matrix<float> materialize_slices(const VerticalDataset& data, std::size_t client,
                                 const std::vector<std::size_t>& indices) {
  for (std::size_t i : indices) require(i < data.size(), ErrorKind::Contract, "sample index out of range");
  return gather_rows(data.client_view(client), std::span<const std::size_t>(indices));
}

std::vector<Edge> read_edge_list(const std::filesystem::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorKind::Io, "cannot open " + path.string());
  std::vector<Edge> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    std::istringstream ls(line);
    std::size_t u, v;
    if (!(ls >> u)) continue;
    require(static_cast<bool>(ls >> v), ErrorKind::Format,
            path.string() + ":" + std::to_string(lineno) + ": expected 'u v'");
    std::string rest;
    require(!(ls >> rest), ErrorKind::Format, path.string() + ":" + std::to_string(lineno) + ": trailing tokens");
    out.emplace_back(u, v);
  }
  return out;
}

void write_edge_list(const AdversaryGraph& g, const std::filesystem::path& path) {
  std::ofstream os(path);
  require(static_cast<bool>(os), ErrorKind::Io, "cannot create " + path.string());
  for (auto [u, v] : g.edges()) os << u << ' ' << v << '\n';
}

}  // namespace vflbd
