#include "dnbp/graph.hpp"

#include <algorithm>
#include <sstream>

#include "dnbp/error.hpp"

namespace dnbp {

GraphSpec::GraphSpec(std::string name, int num_nodes, std::vector<Edge> edges)
    : name_(std::move(name)), num_nodes_(num_nodes), edges_(std::move(edges)), neighbors_(num_nodes) {
  if (num_nodes < 1) throw DataError("graph '" + name_ + "' must have at least one node");
  for (std::size_t i = 0; i < edges_.size(); ++i) {
    auto [a, b] = edges_[i];
    if (a < 0 || b < 0 || a >= num_nodes || b >= num_nodes)
      throw DataError("graph '" + name_ + "': edge (" + std::to_string(a) + "," + std::to_string(b) +
                      ") references a missing node");
    if (a == b) throw DataError("graph '" + name_ + "': self-loop on node " + std::to_string(a));
    for (std::size_t j = 0; j < i; ++j) {
      auto [c, d] = edges_[j];
      if ((a == c && b == d) || (a == d && b == c))
        throw DataError("graph '" + name_ + "': duplicate edge (" + std::to_string(a) + "," + std::to_string(b) + ")");
    }
    neighbors_[a].push_back(b);
    neighbors_[b].push_back(a);
  }
  for (auto& n : neighbors_) std::sort(n.begin(), n.end());
}

GraphSpec GraphSpec::pendulum() { return GraphSpec("pendulum", 3, {{0, 1}, {1, 2}}); }

GraphSpec GraphSpec::spider() {
  return GraphSpec("spider", 7, {{0, 1}, {0, 2}, {0, 3}, {1, 4}, {2, 5}, {3, 6}});
}

GraphSpec GraphSpec::by_name(const std::string& name) {
  if (name == "pendulum") return pendulum();
  if (name == "spider") return spider();
  throw UsageError("unknown graph '" + name + "' (expected pendulum or spider)");
}

GraphSpec GraphSpec::parse(const std::string& text) {
  std::istringstream in(text);
  std::string line, name = "custom";
  int nodes = -1;
  std::vector<Edge> edges;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto p = line.find('#'); p != std::string::npos) line.erase(p);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    bool ok = true;
    if (key == "name") {
      ok = static_cast<bool>(ls >> name);
    } else if (key == "nodes") {
      ok = static_cast<bool>(ls >> nodes);
    } else if (key == "edge") {
      int a, b;
      ok = static_cast<bool>(ls >> a >> b);
      if (ok) edges.emplace_back(a, b);
    } else {
      ok = false;
    }
    std::string extra;
    if (!ok || (ls >> extra)) throw DataError("graph description line " + std::to_string(lineno) + ": cannot parse '" + line + "'");
  }
  if (nodes < 0) throw DataError("graph description lacks a 'nodes' line");
  return GraphSpec(name, nodes, std::move(edges));
}

std::string GraphSpec::to_text() const {
  std::ostringstream os;
  os << "name " << name_ << "\nnodes " << num_nodes_ << "\n";
  for (auto [a, b] : edges_) os << "edge " << a << " " << b << "\n";
  return os.str();
}

int GraphSpec::edge_index(int a, int b) const {
  for (std::size_t i = 0; i < edges_.size(); ++i)
    if ((edges_[i].first == a && edges_[i].second == b) || (edges_[i].first == b && edges_[i].second == a))
      return static_cast<int>(i);
  return -1;
}

// ---------------------------------------------------------------------------

Potentials::Potentials(const GraphSpec& graph, std::uint64_t seed) : graph_(graph) {
  std::mt19937_64 rng(seed);
  for (int s = 0; s < graph_.num_nodes(); ++s) {
    const std::string ug = unary_group(s);
    encoder_.emplace_back(params_, ug + ".enc", ug, rng);
    unary_head_.emplace_back(params_, ug + ".head", ug, 2 + kFeatureDim, std::vector<int>{64, 64, 1},
                             Head::ScaledSigmoid, rng);
    const std::string dg = diffusion_group(s);
    diffusion_.emplace_back(params_, dg, dg, kNoiseDim, std::vector<int>{64, 64, 2}, Head::None, rng);
  }
  for (const Edge& e : graph_.edges()) {
    const std::string pg = density_group(e);
    density_.emplace_back(params_, pg, pg, 2, std::vector<int>{32, 32, 32, 32, 1}, Head::ScaledSigmoid, rng);
    const std::string sg = sampler_group(e);
    sampler_.emplace_back(params_, sg, sg, kNoiseDim, std::vector<int>{64, 64, 2}, Head::None, rng);
  }
}

Var Potentials::encode(Tape& tape, int node, Var image) const { return encoder_.at(node).forward(tape, image); }

Var Potentials::unary(Tape& tape, int node, Var particles, Var features) const {
  const Tensor& p = tape.value(particles);
  if (p.cols() != 2) throw ShapeError("unary potential expects [N,2] particles, got " + shape_str(p.shape));
  if (tape.value(features).shape != std::vector<int>{1, kFeatureDim})
    throw ShapeError("unary potential expects [1,10] features, got " + shape_str(tape.value(features).shape));
  Var x = tape.concat_cols(particles, tape.broadcast_rows(features, p.rows()));
  return unary_head_.at(node).forward(tape, x);
}

Var Potentials::pairwise_density(Tape& tape, int edge_idx, Var delta) const {
  return density_.at(edge_idx).forward(tape, delta);
}

Var Potentials::pairwise_translation(Tape& tape, int edge_idx, Var noise) const {
  return sampler_.at(edge_idx).forward(tape, noise);
}

Var Potentials::pairwise_sample(Tape& tape, int edge_idx, Var conditioner, Direction dir, Var noise) const {
  Var t = pairwise_translation(tape, edge_idx, noise);
  return dir == Direction::SourceGivenDest ? tape.add(conditioner, t) : tape.sub(conditioner, t);
}

Var Potentials::diffusion_translation(Tape& tape, int node, Var noise) const {
  return diffusion_.at(node).forward(tape, noise);
}

Var Potentials::diffusion_sample(Tape& tape, int node, Var particles, Var noise) const {
  return tape.add(particles, diffusion_translation(tape, node, noise));
}

// ---------------------------------------------------------------------------

Tensor image_to_tensor(const std::vector<std::uint8_t>& rgb, int width, int height) {
  if (width != kImageSize || height != kImageSize || rgb.size() != static_cast<std::size_t>(width) * height * 3)
    throw ShapeError("observation must be a 128x128 RGB image, got " + std::to_string(width) + "x" +
                     std::to_string(height));
  Tensor t({height, width, 3});
  for (std::size_t i = 0; i < rgb.size(); ++i) t.data[i] = static_cast<float>(rgb[i]) / 255.0f;
  return t;
}

Tensor sample_noise(int rows, std::mt19937_64& rng) {
  Tensor t({rows, kNoiseDim});
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (float& v : t.data) v = n(rng);
  return t;
}

Tensor keypoints_to_tensor(const std::vector<Keypoint>& pts) {
  Tensor t({static_cast<int>(pts.size()), 2});
  for (std::size_t i = 0; i < pts.size(); ++i) {
    t.data[2 * i] = pts[i].x;
    t.data[2 * i + 1] = pts[i].y;
  }
  return t;
}

std::vector<Keypoint> tensor_to_keypoints(const Tensor& t) {
  if (t.cols() != 2) throw ShapeError("expected [N,2] keypoints, got " + shape_str(t.shape));
  std::vector<Keypoint> out(t.rows());
  for (int i = 0; i < t.rows(); ++i) out[i] = {t.data[2 * i], t.data[2 * i + 1]};
  return out;
}

}  // namespace dnbp
