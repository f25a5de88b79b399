#pragma once

#include <array>
#include <optional>
#include <random>
#include <vector>

#include "dnbp/graph.hpp"
#include "dnbp/tape.hpp"

namespace dnbp {

enum class Mode { Train, Eval };

/// Weighted particle set. `components` holds, per particle, the triple
/// (w_unary_d, w_unary_s, w_neigh_s) when the set is a belief.
struct ParticleSet {
  std::vector<Keypoint> particles;
  std::vector<float> weights;
  std::vector<std::array<float, 3>> components;

  int size() const { return static_cast<int>(particles.size()); }
};

struct Message {
  int source = -1;
  int dest = -1;
  ParticleSet set;  // weights normalised
  int frame = -1;
};

struct Belief {
  int node = -1;
  ParticleSet set;  // weights normalised
  int frame = -1;
};

/// Axis-aligned box the uniform proposal draws from.
struct ProposalBox {
  float lo = -1.0f;
  float hi = 1.0f;
};

struct InferenceConfig {
  int particles = 100;   // M, particles per message
  int u_samples = 10;    // U, pairwise samples averaged per unary weight
  float gamma = 0.9f;    // uniform-proposal fraction, train mode only
  ProposalBox proposal;
};

/// Inference state carried from one frame to the next. Beliefs are absent
/// before the first frame; messages are indexed by directed_edge_index.
struct FrameState {
  int frame = -1;
  std::vector<Belief> beliefs;
  std::vector<Message> messages;

  bool has_beliefs() const { return !beliefs.empty(); }
};

int num_directed_edges(const GraphSpec& g);
/// Index of directed edge s -> d: 2*e for (first -> second), 2*e+1 for the reverse.
int directed_edge_index(const GraphSpec& g, int s, int d);

/// State before frame 0: no beliefs, and every directed edge carries a
/// uniformly weighted message of M particles from the uniform proposal.
FrameState initial_state(const GraphSpec& g, const InferenceConfig& cfg, std::mt19937_64& rng);

struct MessageVars {
  int source = -1;
  int dest = -1;
  Var particles;  // [M,2]
  Var w_unary;    // [M,1]
  Var w_neigh;    // [M,1]
  Var weights;    // [M,1], w_unary * w_neigh (unnormalised)
};

struct BeliefVars {
  int node = -1;
  Var particles;  // [T,2]
  Var weights;    // [T,1], normalised
  Var unary_d;    // [T,1] component weights, raw
  Var unary_s;
  Var neigh;
};

struct ResampleResult {
  Var particles;         // [M,2]; the first `resampled` rows are diffused draws
  int resampled = 0;
  bool fell_back = false;  // all-zero belief weights forced the uniform proposal
};

/// Draws floor((1-gamma) M) particles from `prev` by multinomial resampling
/// and diffuses them with node d's diffusion sampler; the remaining draws
/// come from the uniform proposal. In eval mode gamma is ignored. Nothing
/// upstream of the draw is differentiable.
ResampleResult resample_and_diffuse(Tape& tape, const Potentials& pots, const Belief& prev, int M, float gamma,
                                    Mode mode, const ProposalBox& box, std::mt19937_64& rng);

/// M particles from the uniform proposal.
Tensor uniform_particles(int M, const ProposalBox& box, std::mt19937_64& rng);

/// Multinomial resampling of indices proportional to `weights`.
std::vector<int> resample_indices(const std::vector<float>& weights, int n, std::mt19937_64& rng);

/// Message s -> d for the current frame. `features` holds each node's
/// encoder output for the frame; the sender's unary network is evaluated
/// with its stop-flag set. `truth` (ground-truth keypoints per node) is
/// required in train mode, where the neighbour sums are replaced by a
/// density evaluation at the sender's true position.
MessageVars message_update(Tape& tape, const Potentials& pots, const FrameState& prev, const std::vector<Var>& features,
                           int s, int d, const InferenceConfig& cfg, Mode mode,
                           const std::vector<Keypoint>* truth, std::mt19937_64& rng);

/// Belief of node d from one incoming message per neighbour.
BeliefVars belief_update(Tape& tape, const Potentials& pots, const std::vector<MessageVars>& incoming, Var features_d,
                         int d);

Message to_message(const Tape& tape, const MessageVars& m, int frame);
Belief to_belief(const Tape& tape, const BeliefVars& b, int frame);

struct FrameOutput {
  std::vector<Var> features;
  std::vector<MessageVars> messages;  // by directed edge index
  std::vector<BeliefVars> beliefs;    // by node
  FrameState state;                   // plain snapshot for the next frame
};

/// One full frame: every directed message from the previous frame's state,
/// then every belief in ascending node order.
FrameOutput run_frame(Tape& tape, const Potentials& pots, const FrameState& prev, const Tensor& image,
                      const InferenceConfig& cfg, Mode mode, const std::vector<Keypoint>* truth,
                      std::mt19937_64& rng);

/// Highest-weight particle; ties go to the lowest index.
Keypoint max_weight_estimate(const Belief& belief);

/// N joint samples (each one keypoint per node) drawn sequentially in node
/// order, reweighting each belief by the pairwise densities against the
/// already-sampled neighbours.
std::vector<std::vector<Keypoint>> smc_joint_sample(const std::vector<Belief>& beliefs, const Potentials& pots, int N,
                                                    std::mt19937_64& rng);

/// Eval-mode tracker over a sequence of frames.
class Tracker {
 public:
  Tracker(const Potentials& pots, InferenceConfig cfg, std::uint64_t seed);

  /// Advances one frame; `image` is the [128,128,3] float tensor.
  const std::vector<Belief>& step(const Tensor& image);
  const FrameState& state() const { return state_; }
  std::mt19937_64& rng() { return rng_; }

 private:
  const Potentials& pots_;
  InferenceConfig cfg_;
  std::mt19937_64 rng_;
  FrameState state_;
};

}  // namespace dnbp
