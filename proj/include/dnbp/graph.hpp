#pragma once

#include <array>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dnbp/nn.hpp"
#include "dnbp/tape.hpp"

namespace dnbp {

/// 2-D keypoint in normalised image coordinates; x right, y down, the frame
/// spans [-1, 1] on both axes.
struct Keypoint {
  float x = 0.0f;
  float y = 0.0f;

  friend bool operator==(const Keypoint&, const Keypoint&) = default;
};

using Edge = std::pair<int, int>;

/// Undirected pairwise MRF topology. Edges are stored as given; the edge
/// (s, d) owns networks that model the translation x_s - x_d.
class GraphSpec {
 public:
  GraphSpec() = default;
  GraphSpec(std::string name, int num_nodes, std::vector<Edge> edges);

  static GraphSpec pendulum();
  static GraphSpec spider();
  static GraphSpec by_name(const std::string& name);
  /// Text form: lines "name <id>", "nodes <n>", "edge <a> <b>"; '#' starts a comment.
  static GraphSpec parse(const std::string& text);
  std::string to_text() const;

  const std::string& name() const { return name_; }
  int num_nodes() const { return num_nodes_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<int>& neighbors(int node) const { return neighbors_.at(node); }
  /// Index into edges() of the edge joining a and b, or -1.
  int edge_index(int a, int b) const;
  bool has_edge(int a, int b) const { return edge_index(a, b) >= 0; }

 private:
  std::string name_;
  int num_nodes_ = 0;
  std::vector<Edge> edges_;
  std::vector<std::vector<int>> neighbors_;
};

enum class Direction { SourceGivenDest, DestGivenSource };

/// Every learned network of a graph: per node the unary encoder + head and
/// the diffusion sampler, per edge the pairwise density and pairwise sampler.
class Potentials {
 public:
  Potentials(const GraphSpec& graph, std::uint64_t seed);

  const GraphSpec& graph() const { return graph_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  static std::string unary_group(int node) { return "unary" + std::to_string(node); }
  static std::string diffusion_group(int node) { return "diffusion" + std::to_string(node); }
  static std::string density_group(const Edge& e) { return "density" + std::to_string(e.first) + "-" + std::to_string(e.second); }
  static std::string sampler_group(const Edge& e) { return "sampler" + std::to_string(e.first) + "-" + std::to_string(e.second); }

  /// Features f_s(y) for `node`; image is [128,128,3] with values in [0,1].
  Var encode(Tape& tape, int node, Var image) const;
  /// l_s(x (+) features): particles [N,2], features [1,10] -> [N,1].
  Var unary(Tape& tape, int node, Var particles, Var features) const;
  /// Pairwise density on translations x_s - x_d of edge `edge_idx`: [N,2] -> [N,1].
  Var pairwise_density(Tape& tape, int edge_idx, Var delta) const;
  /// Translation sampled by the edge sampler from noise [N,64] -> [N,2].
  Var pairwise_translation(Tape& tape, int edge_idx, Var noise) const;
  /// conditioner +/- translation according to `dir` (conditioner [N,2]).
  Var pairwise_sample(Tape& tape, int edge_idx, Var conditioner, Direction dir, Var noise) const;
  /// Diffusion translation from noise [N,64] -> [N,2].
  Var diffusion_translation(Tape& tape, int node, Var noise) const;
  /// particle + diffusion translation.
  Var diffusion_sample(Tape& tape, int node, Var particles, Var noise) const;

  const Mlp& density_net(int edge_idx) const { return density_[edge_idx]; }
  const Mlp& sampler_net(int edge_idx) const { return sampler_[edge_idx]; }
  const Mlp& diffusion_net(int node) const { return diffusion_[node]; }
  const Mlp& unary_head(int node) const { return unary_head_[node]; }

 private:
  GraphSpec graph_;
  ParamStore params_;
  std::vector<ConvEncoder> encoder_;
  std::vector<Mlp> unary_head_;
  std::vector<Mlp> diffusion_;
  std::vector<Mlp> density_;
  std::vector<Mlp> sampler_;
};

/// Converts an 8-bit interleaved RGB image into the [128,128,3] float
/// tensor layout consumed by the encoder (values scaled to [0,1]).
Tensor image_to_tensor(const std::vector<std::uint8_t>& rgb, int width, int height);

/// Samples 64-dimensional standard normal noise rows.
Tensor sample_noise(int rows, std::mt19937_64& rng);

Tensor keypoints_to_tensor(const std::vector<Keypoint>& pts);
std::vector<Keypoint> tensor_to_keypoints(const Tensor& t);

}  // namespace dnbp
