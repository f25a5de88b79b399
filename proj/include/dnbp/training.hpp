#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dnbp/adam.hpp"
#include "dnbp/beliefprop.hpp"
#include "dnbp/simulators.hpp"

namespace dnbp {

struct TrainConfig {
  std::string task = "pendulum";
  int particles = 100;       // M during training
  int eval_particles = 200;  // M during tracking and evaluation
  float gamma = 0.9f;
  int u_samples = 10;
  float kernel_sigma = 0.05f;
  float lr = 1e-3f;
  int batch = 6;
  float noise_sigma = 20.0f;  // pixel noise on the 0-255 scale
  int patience = 5;
  int max_epochs = 50;
  double scale = 1.0;
  std::uint64_t seed = 0;
  double clip_norm = 10.0;
  double time_budget = 0.0;  // wall-clock seconds for training, 0 for none

  /// Throws UsageError when a field is out of range.
  void validate() const;
  InferenceConfig inference(Mode mode) const;
};

/// Keys accepted in config files and as CLI overrides, in documentation order.
const std::vector<std::string>& config_keys();
/// Sets one field from its textual value; throws UsageError for unknown keys or bad values.
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
/// Flat "key = value" text, '#' comments; errors name the offending line.
TrainConfig parse_config(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::string& path, TrainConfig base = {});
std::string config_to_text(const TrainConfig& cfg);

struct NodeLoss {
  double b_unary_d = 0.0;  // partial belief densities at the true keypoint
  double b_unary_rho = 0.0;
  double b_neigh_rho = 0.0;
  double loss = 0.0;       // -log of their product
};

struct LossBreakdown {
  std::vector<NodeLoss> nodes;
  double total = 0.0;
};

/// Differentiable per-node loss; `out` receives the partial values.
Var partial_belief_loss(Tape& tape, const BeliefVars& belief, Keypoint truth, float sigma, NodeLoss* out = nullptr);
/// Same loss on a plain belief (uses its stored component weights).
NodeLoss partial_belief_loss(const Belief& belief, Keypoint truth, float sigma);

/// Adds N(0, sigma) noise to every channel on the 0-255 scale, clamps, and
/// converts to the encoder's [0,1] tensor.
Tensor augment_image(const Image& img, float sigma, std::mt19937_64& rng);
Tensor image_tensor(const Image& img);

/// One batch member's carried inference state.
struct Lane {
  FrameState state;
  std::mt19937_64 rng;
};

struct StepResult {
  LossBreakdown loss;  // summed over lanes
  bool skipped = false;
  double grad_norm = 0.0;
};

/// One frame of training for every lane in lockstep: train-mode frame on a
/// fresh tape per lane, loss summed over nodes and lanes, global-norm clip,
/// one Adam step. Lanes advance their state even when the step is skipped.
StepResult train_step(Potentials& pots, std::vector<Lane>& lanes, const std::vector<const Image*>& frames,
                      const std::vector<const std::vector<Keypoint>*>& truths, const TrainConfig& cfg,
                      AdamState& adam);

/// Train-mode loss over whole sequences without noise or updates.
double validation_loss(const Potentials& pots, const std::vector<SequenceRecord>& seqs, const TrainConfig& cfg);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;  // mean per frame
  double val_loss = 0.0;
  int skipped = 0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> epochs;
  int best_epoch = -1;
  double best_val = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains `pots` in place; on return it holds the best-validation parameters.
TrainResult train(Potentials& pots, const std::vector<SequenceRecord>& train_set,
                  const std::vector<SequenceRecord>& val_set, const TrainConfig& cfg, const EpochCallback& cb = {});

/// Loads <data>/train and <data>/val, trains from a seeded initialisation and
/// writes the best checkpoint.
TrainResult train_from_disk(const std::string& data_dir, const std::string& checkpoint_path, const TrainConfig& cfg,
                            const EpochCallback& cb = {});

std::vector<SequenceRecord> load_split(const std::string& split_dir);

}  // namespace dnbp
