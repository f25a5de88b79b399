#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dnbp/graph.hpp"
#include "dnbp/image.hpp"

namespace dnbp {

enum class Task { Pendulum, Spider };

Task task_from_name(const std::string& name);
std::string task_name(Task t);
GraphSpec task_graph(Task t);

// ---------------------------------------------------------------------------
// double pendulum (two-link acrobot, zero torque)

struct PendulumState {
  double th1 = 0.0, th2 = 0.0;    // rad, wrapped to [0, 2pi)
  double dth1 = 0.0, dth2 = 0.0;  // rad/s
};

struct PendulumParams {
  double m1 = 1.0, m2 = 1.0;
  double l1 = 0.8, l2 = 0.8;
  double lc1 = 0.4, lc2 = 0.4;
  double i1 = 1.0, i2 = 1.0;
  double g = 9.8;
};

inline constexpr double kPendulumDt = 0.08;
/// world metres -> normalised image units
inline constexpr double kPendulumScale = 1.0 / 1.8;

/// Angular accelerations (d2th1, d2th2) of the equations of motion.
std::array<double, 2> pendulum_accel(const PendulumState& s, const PendulumParams& p = {});
/// One frame of dynamics: RK4 over `dt`, split into `substeps` equal pieces.
PendulumState pendulum_step(const PendulumState& s, double dt = kPendulumDt, int substeps = 8,
                            const PendulumParams& p = {});
/// Kinetic plus potential energy, the potential offset so its minimum is 0.
double pendulum_energy(const PendulumState& s, const PendulumParams& p = {});
/// Base, middle joint and end effector; theta = 0 hangs straight down (image y down).
std::vector<Keypoint> pendulum_keypoints(const PendulumState& s, const PendulumParams& p = {});
PendulumState random_pendulum(std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// spider: root with three revolute-prismatic arms, each ending in a revolute elbow

inline constexpr double kSpiderCanvas = 500.0;
inline constexpr double kSpiderDt = 0.01;
inline constexpr double kSpiderLinkHeight = 80.0;
inline constexpr double kSpiderLinkWidth = 20.0;
inline constexpr double kSpiderJointRadius = 10.0;
inline constexpr double kSpiderExtMin = 20.0, kSpiderExtMax = 80.0;
inline constexpr double kSpiderSectorHalf = 60.0 * 3.14159265358979323846 / 180.0;
inline constexpr double kSpiderElbowMax = 35.0 * 3.14159265358979323846 / 180.0;

struct SpiderArm {
  double rot = 0.0;   // offset from the sector bisector, |rot| <= 60 deg
  double ext = 50.0;  // prismatic extension in px, [20, 80]
  double beta = 0.0;  // elbow angle, |beta| <= 35 deg
  double v_rot = 0.0, v_ext = 0.0, v_beta = 0.0;
};

struct SpiderState {
  double x = 250.0, y = 250.0, theta = 0.0;  // root, canvas px and rad
  double vx = 0.0, vy = 0.0, vtheta = 0.0;
  std::array<SpiderArm, 3> arms;
};

/// Sector bisector of arm i relative to the root orientation (rad).
double spider_bisector(int arm);
SpiderState spider_step(const SpiderState& s, double dt = kSpiderDt);
/// Root, three elbows, three tips, in normalised coordinates.
std::vector<Keypoint> spider_keypoints(const SpiderState& s);
bool spider_within_limits(const SpiderState& s);
SpiderState random_spider(std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// clutter and rendering; all geometry below is in normalised image units

enum class ShapeKind { Rectangle, Circle };
enum class Layer { Beneath, Above };
enum class ClutterKind { None, Static, Dynamic };

std::string clutter_kind_name(ClutterKind k);
ClutterKind clutter_kind_from_name(const std::string& s);

using Rgb = std::array<std::uint8_t, 3>;

struct ClutterItem {
  ShapeKind kind = ShapeKind::Rectangle;
  double width = 0.0, height = 0.0;  // rectangle; height runs along the orientation axis
  double radius = 0.0;               // circle
  Rgb color{};
  double x = 0.0, y = 0.0, theta = 0.0;
  double vx = 0.0, vy = 0.0, vtheta = 0.0;  // per frame
  Layer layer = Layer::Beneath;
};

std::vector<ClutterItem> gen_clutter(Task task, int count_beneath, int count_above, bool dynamic, std::mt19937_64& rng);
/// Advances every item by one frame of its constant velocities.
void step_clutter(std::vector<ClutterItem>& items);

inline constexpr int kRenderSize = 128;

struct RenderedFrame {
  Image image;
  std::vector<std::uint8_t> clutter_mask;    // 1 where any clutter shape covers the pixel
  std::vector<std::uint8_t> structure_mask;  // 1 where the structure is drawn
};

/// Axis-aligned occluding block drawn above everything, in pixel units.
struct Occluder {
  int x0 = 0, y0 = 0, width = 0, height = 0;
  Rgb color{64, 64, 64};
};

/// Beneath-layer clutter, the structure, above-layer clutter, then the
/// optional occluder. Pixel centres are tested against exact shapes.
RenderedFrame render_frame(Task task, const std::vector<Keypoint>& keypoints, const std::vector<ClutterItem>& clutter,
                           const std::optional<Occluder>& occluder = std::nullopt);

double frame_ratio(const std::vector<std::uint8_t>& mask);
double clutter_ratio(const std::vector<std::vector<std::uint8_t>>& masks);

// ---------------------------------------------------------------------------
// sequences and datasets

struct SequenceRecord {
  Task task = Task::Pendulum;
  std::uint64_t seed = 0;
  ClutterKind clutter_kind = ClutterKind::None;
  double clutter_ratio = 0.0;
  int decile = -1;  // test split only
  std::vector<Image> frames;
  std::vector<std::vector<Keypoint>> labels;
  std::vector<double> frame_ratios;
  std::vector<std::vector<std::uint8_t>> masks;  // in memory only
};

/// Simulates one sequence of `frames` frames with the given clutter counts.
SequenceRecord simulate_sequence(Task task, int frames, int count_beneath, int count_above, ClutterKind kind,
                                 std::uint64_t seed);

/// Half-open clutter-ratio range [lo, hi); `zero` demands a clutter-free sequence.
struct RatioBin {
  double lo = 0.0, hi = 0.0;
  bool zero = false;
};

std::vector<RatioBin> train_bins(Task task);
std::vector<RatioBin> test_deciles();

struct SplitPlan {
  int sequences = 0;       // per bin for the test split, in total otherwise
  int frames = 0;
  std::vector<RatioBin> bins;
};

/// Dataset sizes for a split at the given scale: round(scale * n), at least 1.
SplitPlan split_plan(Task task, const std::string& split, double scale);
int scaled_count(int n, double scale);

/// Draws a sequence whose clutter ratio falls in `bin`: binomial clutter
/// counts first, then a bisection over the total count. Throws DataError
/// once the attempt budget is exhausted.
SequenceRecord sample_in_bin(Task task, int frames, const RatioBin& bin, ClutterKind kind, std::uint64_t seed,
                             int budget = 4000);

/// Seed of sequence `index` in `split`, derived from the master seed.
std::uint64_t sequence_seed(std::uint64_t master, const std::string& split, int index);

struct GenerateOptions {
  double scale = 1.0;
  int frames = 0;  // 0: the split's default
  int jobs = 1;
};

/// Generates and writes <out>/<split>/seq_XXXXX/{frames/NNNN.png, labels.json}
/// plus <out>/<split>/dataset.json. Returns the number of sequences.
int generate_dataset(Task task, const std::string& split, const GenerateOptions& opt, std::uint64_t seed,
                     const std::string& out_dir);

void write_sequence(const SequenceRecord& rec, const std::string& dir);
SequenceRecord read_sequence(const std::string& dir);

struct DatasetInfo {
  Task task = Task::Pendulum;
  std::string split;
  std::vector<std::string> sequence_dirs;  // absolute or relative to cwd
  std::vector<RatioBin> bins;
};

/// Reads <dir>/dataset.json (dir being a split directory).
DatasetInfo read_dataset_info(const std::string& dir);

}  // namespace dnbp
