#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "dnbp/beliefprop.hpp"
#include "dnbp/simulators.hpp"

namespace dnbp {

inline constexpr int kEntropyBins = 40;
inline constexpr int kEntropySamples = 2000;

/// Distance between two normalised keypoints in pixels of the 128x128 frame.
double pixel_error(Keypoint a, Keypoint b);

/// Mean pixel error over aligned [frame][node] prediction and label sets.
double avg_euclidean_error(const std::vector<std::vector<Keypoint>>& pred,
                           const std::vector<std::vector<Keypoint>>& truth);

/// Per clutter bin and keypoint: error sums and counts.
struct ErrorReport {
  int bins = 0;
  int nodes = 0;
  std::vector<double> sum;  // [bin * nodes + node]
  std::vector<long> count;

  ErrorReport() = default;
  ErrorReport(int bins, int nodes);
  void add(int bin, int node, double err);
  double mean(int bin, int node) const;
  /// mean over every keypoint of a bin; NaN for an empty bin
  double bin_mean(int bin) const;
  double overall() const;
};

/// Shannon entropy (nats) of a normalised histogram, 0 log 0 = 0.
double histogram_entropy(const std::vector<double>& hist);
/// 40x40 weighted histogram over [-1,1]^2 (points outside clamp to the edge bins).
std::vector<double> belief_histogram(const std::vector<Keypoint>& pts, const std::vector<float>& weights);
/// Entropy of the belief's weighted histogram, without resampling.
double histogram_entropy(const Belief& belief);
/// Resamples `samples` unweighted particles, bins them 40x40 and returns the entropy.
double marginal_entropy(const Belief& belief, std::mt19937_64& rng, int samples = kEntropySamples);

// ---------------------------------------------------------------------------

struct FramePrediction {
  std::vector<Keypoint> estimates;  // per node
  std::vector<double> entropies;    // per node, may be empty
  std::vector<Belief> beliefs;      // filled only when requested
};

/// Produces one prediction per frame of a sequence.
using SequencePredictor = std::function<std::vector<FramePrediction>(const SequenceRecord&, std::uint64_t seed)>;

/// Eval-mode DNBP tracking with max-weight estimates and resampled entropies.
SequencePredictor dnbp_predictor(const Potentials& pots, InferenceConfig cfg, bool keep_beliefs = false);
/// Returns the labels themselves.
SequencePredictor oracle_predictor();
/// Predicts the image centre for every keypoint.
SequencePredictor center_predictor();

/// Tracks one sequence and writes its TrackReport as JSON lines: one record
/// per (frame, node) with the estimate, entropy and optionally particles.
void write_track_report(std::ostream& out, const SequenceRecord& seq, const std::vector<FramePrediction>& preds,
                        bool with_particles);

/// Expected pixel error of a uniformly random prediction in [-1,1]^2,
/// averaged over all labels (midpoint quadrature on a `grid` x `grid` lattice).
double uniform_baseline_error(const std::vector<std::vector<Keypoint>>& labels, int grid = 128);

struct EvalRow {
  int sequence = 0;
  int decile = 0;
  int node = 0;
  int frame = 0;
  double error_px = 0.0;
  double entropy = 0.0;
};

struct EvalResult {
  ErrorReport report;
  std::vector<EvalRow> rows;
  double baseline_px = 0.0;  // uniform random predictor on the same labels
};

/// Tracks every sequence of a test split directory and aggregates errors by
/// decile and keypoint. Deterministic for a given seed regardless of `jobs`.
EvalResult evaluate_dataset(const std::string& split_dir, const SequencePredictor& predictor, std::uint64_t seed,
                            int jobs = 1, int max_frames = 0);

void write_eval_csv(const std::string& path, const std::string& task, const EvalResult& r);
/// Error-vs-decile curve, one line per keypoint plus the mean.
void write_error_plot(const std::string& path, const ErrorReport& r);

// ---------------------------------------------------------------------------

struct OcclusionFrame {
  double coverage = 0.0;  // fraction of structure pixels under the occluder
  bool occluded = false;  // coverage above the threshold
  std::vector<double> entropies;
};

struct EntropyTrace {
  std::vector<OcclusionFrame> frames;
  /// mean entropy of `node` over flagged (true) or unflagged (false) frames; NaN if none
  double mean_entropy(int node, bool occluded) const;
};

struct OcclusionSequence {
  SequenceRecord seq;
  std::vector<double> coverage;
};

/// A clutter-free sequence with a 40x60 px block sweeping horizontally
/// across the frame at rows [y0, y0+60).
OcclusionSequence build_occlusion_sequence(Task task, int frames, std::uint64_t seed, int y0 = 40, int width = 40,
                                           int height = 60);
/// Occluder placement per frame, for arbitrary sweeps.
using OccluderPath = std::function<Occluder(int frame, int frames)>;
OcclusionSequence build_occlusion_sequence(Task task, int frames, std::uint64_t seed, const OccluderPath& path);

EntropyTrace occlusion_entropy_report(const Potentials& pots, const InferenceConfig& cfg, const OcclusionSequence& occ,
                                      std::uint64_t seed, double threshold = 0.25);

// ---------------------------------------------------------------------------

struct Grid2D {
  int n = 0;
  double lo = -2.0, hi = 2.0;
  std::vector<double> v;  // row-major, row = y index

  Grid2D() = default;
  Grid2D(int n, double lo, double hi) : n(n), lo(lo), hi(hi), v(static_cast<std::size_t>(n) * n, 0.0) {}
  double centre(int i) const { return lo + (i + 0.5) * (hi - lo) / n; }
  int bin(double x) const;
  void normalise();
};

struct PairwiseInspection {
  int edge = -1;
  Grid2D training_hist;  // 40x40, ground-truth translations
  Grid2D sampler_hist;   // 40x40, sampler translations
  Grid2D density_grid;   // 100x100, density network
  double grid_modal_radius = 0.0;
  double training_modal_radius = 0.0;
  double total_variation = 0.0;  // between the two histograms
};

/// Translations x_s - x_d for edge (s, d) from every label of the sequences.
std::vector<Keypoint> edge_translations(const GraphSpec& g, int edge, const std::vector<std::vector<Keypoint>>& labels);
/// Centre of the most populated bin of a radial histogram (bin width 0.02).
double modal_radius(const std::vector<Keypoint>& translations);
double total_variation(const Grid2D& a, const Grid2D& b);

PairwiseInspection inspect_pairwise(const Potentials& pots, int edge, const std::vector<std::vector<Keypoint>>& labels,
                                    int samples, std::uint64_t seed, int grid = 100, double extent = 2.0);

/// Writes the three panels as PNG heat maps plus a JSON file with the raw arrays.
void write_inspection(const std::string& out_dir, const PairwiseInspection& r);

}  // namespace dnbp
