#include "dnbp/training.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <numbers>
#include <sstream>

#include "dnbp/checkpoint.hpp"
#include "dnbp/error.hpp"

namespace dnbp {

// ---------------------------------------------------------------------------
// config

void TrainConfig::validate() const {
  auto bad = [](const std::string& what) { throw UsageError("config: " + what); };
  task_from_name(task);
  if (particles < 2) bad("particles must be at least 2");
  if (eval_particles < 2) bad("eval_particles must be at least 2");
  if (!(gamma >= 0.0f && gamma <= 1.0f)) bad("gamma must lie in [0,1]");
  if (u_samples < 1) bad("u_samples must be positive");
  if (!(kernel_sigma > 0.0f)) bad("kernel_sigma must be positive");
  if (!(lr >= 0.0f)) bad("lr must be non-negative");
  if (batch < 1) bad("batch must be positive");
  if (!(noise_sigma >= 0.0f)) bad("noise_sigma must be non-negative");
  if (patience < 1) bad("patience must be positive");
  if (max_epochs < 1) bad("max_epochs must be positive");
  if (!(scale > 0.0)) bad("scale must be positive");
  if (!(clip_norm > 0.0)) bad("clip_norm must be positive");
  if (!(time_budget >= 0.0)) bad("time_budget must be non-negative");
}

InferenceConfig TrainConfig::inference(Mode mode) const {
  InferenceConfig c;
  c.particles = mode == Mode::Train ? particles : eval_particles;
  c.u_samples = u_samples;
  c.gamma = gamma;
  return c;
}

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{"task",  "particles",   "eval_particles", "gamma",    "u_samples",
                                             "kernel_sigma", "lr",   "batch",          "noise_sigma", "patience",
                                             "max_epochs",   "scale", "seed",          "clip_norm",
                                             "time_budget"};
  return keys;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw UsageError("config: invalid value '" + v + "' for " + key);
  return out;
}

}  // namespace

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "task") {
    task_from_name(v);
    cfg.task = v;
  } else if (key == "particles") {
    cfg.particles = parse_number<int>(key, v);
  } else if (key == "eval_particles") {
    cfg.eval_particles = parse_number<int>(key, v);
  } else if (key == "gamma") {
    cfg.gamma = parse_number<float>(key, v);
  } else if (key == "u_samples") {
    cfg.u_samples = parse_number<int>(key, v);
  } else if (key == "kernel_sigma") {
    cfg.kernel_sigma = parse_number<float>(key, v);
  } else if (key == "lr") {
    cfg.lr = parse_number<float>(key, v);
  } else if (key == "batch") {
    cfg.batch = parse_number<int>(key, v);
  } else if (key == "noise_sigma") {
    cfg.noise_sigma = parse_number<float>(key, v);
  } else if (key == "patience") {
    cfg.patience = parse_number<int>(key, v);
  } else if (key == "max_epochs") {
    cfg.max_epochs = parse_number<int>(key, v);
  } else if (key == "scale") {
    cfg.scale = parse_number<double>(key, v);
  } else if (key == "seed") {
    cfg.seed = parse_number<std::uint64_t>(key, v);
  } else if (key == "clip_norm") {
    cfg.clip_norm = parse_number<double>(key, v);
  } else if (key == "time_budget") {
    cfg.time_budget = parse_number<double>(key, v);
  } else {
    throw UsageError("config: unknown key '" + key + "'");
  }
}

TrainConfig parse_config(const std::string& text, TrainConfig cfg) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string orig = line;
    if (auto p = line.find('#'); p != std::string::npos) line.erase(p);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError("config line " + std::to_string(lineno) + ": expected key = value, got '" + orig + "'");
    try {
      set_config_value(cfg, trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const UsageError& e) {
      throw UsageError("config line " + std::to_string(lineno) + " ('" + orig + "'): " + e.what());
    }
  }
  return cfg;
}

TrainConfig load_config(const std::string& path, TrainConfig base) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string config_to_text(const TrainConfig& c) {
  std::ostringstream os;
  os.precision(9);
  os << "task = " << c.task << "\nparticles = " << c.particles << "\neval_particles = " << c.eval_particles
     << "\ngamma = " << c.gamma << "\nu_samples = " << c.u_samples << "\nkernel_sigma = " << c.kernel_sigma
     << "\nlr = " << c.lr << "\nbatch = " << c.batch << "\nnoise_sigma = " << c.noise_sigma
     << "\npatience = " << c.patience << "\nmax_epochs = " << c.max_epochs << "\nscale = " << c.scale
     << "\nseed = " << c.seed << "\nclip_norm = " << c.clip_norm
     << "\ntime_budget = " << c.time_budget << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// loss

Var partial_belief_loss(Tape& tape, const BeliefVars& b, Keypoint truth, float sigma, NodeLoss* out) {
  Var l1 = tape.log_gaussian_mixture(tape.normalize(b.unary_d), b.particles, truth.x, truth.y, sigma);
  Var l2 = tape.log_gaussian_mixture(tape.normalize(b.unary_s), b.particles, truth.x, truth.y, sigma);
  Var l3 = tape.log_gaussian_mixture(tape.normalize(b.neigh), b.particles, truth.x, truth.y, sigma);
  Var loss = tape.scale(tape.add(tape.add(l1, l2), l3), -1.0f);
  if (out) {
    out->b_unary_d = std::exp(tape.value(l1).data[0]);
    out->b_unary_rho = std::exp(tape.value(l2).data[0]);
    out->b_neigh_rho = std::exp(tape.value(l3).data[0]);
    out->loss = tape.value(loss).data[0];
  }
  return loss;
}

NodeLoss partial_belief_loss(const Belief& b, Keypoint truth, float sigma) {
  const int n = b.set.size();
  if (n == 0) throw DataError("loss of an empty belief");
  if (static_cast<int>(b.set.components.size()) != n) throw DataError("belief lacks component weights");
  if (!(sigma > 0.0f)) throw UsageError("kernel sigma must be positive");
  const double s2 = static_cast<double>(sigma) * sigma;
  double log_part[3];
  for (int f = 0; f < 3; ++f) {
    double tot = 0.0;
    for (const auto& c : b.set.components) tot += c[f];
    if (!(tot > 0.0)) throw NumericError("component family " + std::to_string(f) + " has zero total weight");
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> a(n);
    for (int i = 0; i < n; ++i) {
      const double w = b.set.components[i][f] / tot;
      const double dx = truth.x - b.set.particles[i].x, dy = truth.y - b.set.particles[i].y;
      a[i] = w > 0.0 ? std::log(w) - std::log(2.0 * std::numbers::pi * s2) - (dx * dx + dy * dy) / (2.0 * s2)
                     : -std::numeric_limits<double>::infinity();
      mx = std::max(mx, a[i]);
    }
    double s = 0.0;
    for (double v : a) s += std::exp(v - mx);
    log_part[f] = mx + std::log(s);
  }
  NodeLoss out;
  out.b_unary_d = std::exp(log_part[0]);
  out.b_unary_rho = std::exp(log_part[1]);
  out.b_neigh_rho = std::exp(log_part[2]);
  out.loss = -(log_part[0] + log_part[1] + log_part[2]);
  if (!std::isfinite(out.loss)) throw NumericError("non-finite loss for node " + std::to_string(b.node));
  return out;
}

// ---------------------------------------------------------------------------

Tensor image_tensor(const Image& img) { return image_to_tensor(img.rgb, img.width, img.height); }

Tensor augment_image(const Image& img, float sigma, std::mt19937_64& rng) {
  Tensor t = image_tensor(img);
  if (sigma <= 0.0f) return t;
  std::normal_distribution<float> n(0.0f, sigma);
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    const float v = static_cast<float>(img.rgb[i]) + n(rng);
    t.data[i] = std::clamp(v, 0.0f, 255.0f) / 255.0f;
  }
  return t;
}

namespace {

void check_labels(const GraphSpec& g, const std::vector<SequenceRecord>& seqs, const char* which) {
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const auto& s = seqs[i];
    if (s.frames.size() != s.labels.size() || s.frames.empty())
      throw DataError(std::string(which) + " sequence " + std::to_string(i) + " has mismatched frames and labels");
    for (const auto& l : s.labels)
      if (static_cast<int>(l.size()) != g.num_nodes())
        throw DataError(std::string(which) + " sequence " + std::to_string(i) + " has " + std::to_string(l.size()) +
                        " keypoints per frame; graph '" + g.name() + "' has " + std::to_string(g.num_nodes()) +
                        " nodes");
  }
}

}  // namespace

StepResult train_step(Potentials& pots, std::vector<Lane>& lanes, const std::vector<const Image*>& frames,
                      const std::vector<const std::vector<Keypoint>*>& truths, const TrainConfig& cfg,
                      AdamState& adam) {
  if (frames.size() != lanes.size() || truths.size() != lanes.size())
    throw ShapeError("train_step: lanes, frames and labels disagree");
  const GraphSpec& g = pots.graph();
  const InferenceConfig inf = cfg.inference(Mode::Train);
  StepResult res;
  res.loss.nodes.assign(g.num_nodes(), NodeLoss{});
  Gradients total = zero_gradients(pots.params());
  std::string why;

  for (std::size_t l = 0; l < lanes.size(); ++l) {
    Lane& lane = lanes[l];
    try {
      Tape tape(&pots.params(), true);
      Tensor img = augment_image(*frames[l], cfg.noise_sigma, lane.rng);
      FrameOutput out = run_frame(tape, pots, lane.state, img, inf, Mode::Train, truths[l], lane.rng);
      Var loss;
      for (int d = 0; d < g.num_nodes(); ++d) {
        NodeLoss nl;
        Var ld = partial_belief_loss(tape, out.beliefs[d], (*truths[l])[d], cfg.kernel_sigma, &nl);
        loss = loss.valid() ? tape.add(loss, ld) : ld;
        res.loss.nodes[d].b_unary_d += nl.b_unary_d;
        res.loss.nodes[d].b_unary_rho += nl.b_unary_rho;
        res.loss.nodes[d].b_neigh_rho += nl.b_neigh_rho;
        res.loss.nodes[d].loss += nl.loss;
      }
      const float lv = tape.value(loss).data[0];
      lane.state = std::move(out.state);
      if (!std::isfinite(lv)) {
        res.skipped = true;
        why = "non-finite loss";
        continue;
      }
      res.loss.total += lv;
      if (!res.skipped) total.accumulate(tape.backward(loss));
    } catch (const NumericError& e) {
      res.skipped = true;
      why = e.what();
      lane.state = initial_state(g, inf, lane.rng);
    }
  }
  if (!res.skipped && !total.all_finite()) {
    res.skipped = true;
    why = "non-finite gradient";
  }
  if (res.skipped) {
    std::cerr << "warning: skipping batch (" << why << ")\n";
    return res;
  }
  res.grad_norm = clip_global_norm(total, cfg.clip_norm);
  adam_step(pots.params(), total, adam);
  return res;
}

double validation_loss(const Potentials& pots, const std::vector<SequenceRecord>& seqs, const TrainConfig& cfg) {
  const GraphSpec& g = pots.graph();
  const InferenceConfig inf = cfg.inference(Mode::Train);
  double sum = 0.0;
  long count = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    std::mt19937_64 rng(cfg.seed ^ (0x5A17ull + 7919ull * i));
    FrameState state = initial_state(g, inf, rng);
    for (std::size_t f = 0; f < seqs[i].frames.size(); ++f) {
      try {
        Tape tape(&pots.params(), false);
        FrameOutput out = run_frame(tape, pots, state, image_tensor(seqs[i].frames[f]), inf, Mode::Train,
                                    &seqs[i].labels[f], rng);
        double fl = 0.0;
        for (int d = 0; d < g.num_nodes(); ++d) {
          NodeLoss nl;
          partial_belief_loss(tape, out.beliefs[d], seqs[i].labels[f][d], cfg.kernel_sigma, &nl);
          fl += nl.loss;
        }
        state = std::move(out.state);
        if (std::isfinite(fl)) {
          sum += fl;
          ++count;
        }
      } catch (const NumericError&) {
        state = initial_state(g, inf, rng);
      }
    }
  }
  return count > 0 ? sum / static_cast<double>(count) : std::numeric_limits<double>::infinity();
}

TrainResult train(Potentials& pots, const std::vector<SequenceRecord>& train_set,
                  const std::vector<SequenceRecord>& val_set, const TrainConfig& cfg, const EpochCallback& cb) {
  cfg.validate();
  const GraphSpec& g = pots.graph();
  if (train_set.empty()) throw DataError("training set is empty");
  check_labels(g, train_set, "training");
  check_labels(g, val_set, "validation");

  std::mt19937_64 rng(cfg.seed);
  AdamState adam = make_adam(pots.params(), cfg.lr);
  const InferenceConfig inf = cfg.inference(Mode::Train);

  TrainResult result;
  result.best_val = std::numeric_limits<double>::infinity();
  std::vector<Tensor> best;
  for (const auto& p : pots.params()) best.push_back(p.value);
  int stale = 0;
  const auto start = std::chrono::steady_clock::now();

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<int> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::shuffle(order.begin(), order.end(), rng);

    EpochLog log;
    log.epoch = epoch;
    long frames_seen = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch));
      std::vector<Lane> lanes;
      std::size_t len = std::numeric_limits<std::size_t>::max();
      for (std::size_t k = b; k < e; ++k) {
        Lane lane{FrameState{}, std::mt19937_64(rng())};
        lane.state = initial_state(g, inf, lane.rng);
        lanes.push_back(std::move(lane));
        len = std::min(len, train_set[order[k]].frames.size());
      }
      for (std::size_t t = 0; t < len; ++t) {
        std::vector<const Image*> frames;
        std::vector<const std::vector<Keypoint>*> truths;
        for (std::size_t k = b; k < e; ++k) {
          frames.push_back(&train_set[order[k]].frames[t]);
          truths.push_back(&train_set[order[k]].labels[t]);
        }
        StepResult r = train_step(pots, lanes, frames, truths, cfg, adam);
        if (r.skipped) {
          ++log.skipped;
        } else {
          log.train_loss += r.loss.total;
          frames_seen += static_cast<long>(lanes.size());
        }
      }
    }
    if (frames_seen == 0)
      throw NumericError("every training step of epoch " + std::to_string(epoch) + " failed numerically");
    log.train_loss /= static_cast<double>(frames_seen);
    log.val_loss = val_set.empty() ? log.train_loss : validation_loss(pots, val_set, cfg);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(log);
    if (cb) cb(log);

    if (std::isfinite(log.val_loss) && log.val_loss < result.best_val) {
      result.best_val = log.val_loss;
      result.best_epoch = epoch;
      for (int i = 0; i < pots.params().size(); ++i) best[i] = pots.params()[i].value;
      stale = 0;
    } else if (++stale >= cfg.patience) {
      break;
    }
    // stop when another epoch of the same length would overrun the budget
    if (cfg.time_budget > 0.0) {
      const double used = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (used + log.seconds > cfg.time_budget) break;
    }
  }
  for (int i = 0; i < pots.params().size(); ++i) pots.params()[i].value = best[i];
  return result;
}

std::vector<SequenceRecord> load_split(const std::string& split_dir) {
  DatasetInfo info = read_dataset_info(split_dir);
  std::vector<SequenceRecord> out;
  for (const auto& d : info.sequence_dirs) {
    out.push_back(read_sequence(d));
    if (out.back().task != info.task) throw DataError("sequence '" + d + "' belongs to a different task");
  }
  return out;
}

TrainResult train_from_disk(const std::string& data_dir, const std::string& checkpoint_path, const TrainConfig& cfg,
                            const EpochCallback& cb) {
  namespace fs = std::filesystem;
  cfg.validate();
  const fs::path root(data_dir);
  if (!fs::exists(root / "train" / "dataset.json")) throw DataError("no training split under '" + data_dir + "'");
  auto train_set = load_split((root / "train").string());
  std::vector<SequenceRecord> val_set;
  if (fs::exists(root / "val" / "dataset.json")) val_set = load_split((root / "val").string());
  if (!train_set.empty() && task_name(train_set.front().task) != cfg.task)
    throw DataError("dataset holds " + task_name(train_set.front().task) + " sequences but the config task is " +
                    cfg.task);
  Potentials pots(task_graph(task_from_name(cfg.task)), cfg.seed);
  TrainResult r = train(pots, train_set, val_set, cfg, cb);
  save_checkpoint(pots, checkpoint_path);
  return r;
}

}  // namespace dnbp
