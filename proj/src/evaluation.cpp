#include "dnbp/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <ostream>
#include <thread>

#include <json.hpp>

#include "dnbp/error.hpp"
#include "dnbp/training.hpp"

namespace fs = std::filesystem;

namespace dnbp {

double pixel_error(Keypoint a, Keypoint b) {
  const double dx = static_cast<double>(a.x) - b.x, dy = static_cast<double>(a.y) - b.y;
  return std::hypot(dx, dy) * (kRenderSize / 2.0);
}

double avg_euclidean_error(const std::vector<std::vector<Keypoint>>& pred,
                           const std::vector<std::vector<Keypoint>>& truth) {
  if (pred.size() != truth.size()) throw DataError("prediction and label counts differ");
  double s = 0.0;
  long n = 0;
  for (std::size_t f = 0; f < pred.size(); ++f) {
    if (pred[f].size() != truth[f].size()) throw DataError("frame " + std::to_string(f) + ": keypoint counts differ");
    for (std::size_t k = 0; k < pred[f].size(); ++k) {
      s += pixel_error(pred[f][k], truth[f][k]);
      ++n;
    }
  }
  if (n == 0) throw DataError("no keypoints to compare");
  return s / static_cast<double>(n);
}

ErrorReport::ErrorReport(int b, int n)
    : bins(b), nodes(n), sum(static_cast<std::size_t>(b) * n, 0.0), count(static_cast<std::size_t>(b) * n, 0) {}

void ErrorReport::add(int bin, int node, double err) {
  if (bin < 0 || bin >= bins || node < 0 || node >= nodes) throw DataError("error report index out of range");
  sum[bin * nodes + node] += err;
  count[bin * nodes + node] += 1;
}

double ErrorReport::mean(int bin, int node) const {
  const long c = count.at(bin * nodes + node);
  return c ? sum[bin * nodes + node] / static_cast<double>(c) : std::numeric_limits<double>::quiet_NaN();
}

double ErrorReport::bin_mean(int bin) const {
  double s = 0.0;
  long c = 0;
  for (int k = 0; k < nodes; ++k) {
    s += sum[bin * nodes + k];
    c += count[bin * nodes + k];
  }
  return c ? s / static_cast<double>(c) : std::numeric_limits<double>::quiet_NaN();
}

double ErrorReport::overall() const {
  double s = 0.0;
  long c = 0;
  for (std::size_t i = 0; i < sum.size(); ++i) {
    s += sum[i];
    c += count[i];
  }
  return c ? s / static_cast<double>(c) : std::numeric_limits<double>::quiet_NaN();
}

// ---------------------------------------------------------------------------

double histogram_entropy(const std::vector<double>& hist) {
  double tot = 0.0;
  for (double v : hist) tot += v;
  if (!(tot > 0.0)) throw DataError("entropy of an empty histogram");
  double h = 0.0;
  for (double v : hist)
    if (v > 0.0) {
      const double p = v / tot;
      h -= p * std::log(p);
    }
  return std::max(0.0, h);
}

namespace {

int entropy_bin(float v) {
  const int b = static_cast<int>(std::floor((static_cast<double>(v) + 1.0) * kEntropyBins / 2.0));
  return std::clamp(b, 0, kEntropyBins - 1);
}

}  // namespace

std::vector<double> belief_histogram(const std::vector<Keypoint>& pts, const std::vector<float>& weights) {
  if (pts.size() != weights.size()) throw DataError("histogram points and weights differ in length");
  std::vector<double> h(kEntropyBins * kEntropyBins, 0.0);
  for (std::size_t i = 0; i < pts.size(); ++i) h[entropy_bin(pts[i].y) * kEntropyBins + entropy_bin(pts[i].x)] += weights[i];
  return h;
}

double histogram_entropy(const Belief& b) {
  if (b.set.size() == 0) throw DataError("entropy of an empty belief");
  return histogram_entropy(belief_histogram(b.set.particles, b.set.weights));
}

double marginal_entropy(const Belief& b, std::mt19937_64& rng, int samples) {
  if (b.set.size() == 0) throw DataError("entropy of an empty belief");
  const auto idx = resample_indices(b.set.weights, samples, rng);
  std::vector<double> h(kEntropyBins * kEntropyBins, 0.0);
  for (int i : idx) h[entropy_bin(b.set.particles[i].y) * kEntropyBins + entropy_bin(b.set.particles[i].x)] += 1.0;
  return histogram_entropy(h);
}

// ---------------------------------------------------------------------------

SequencePredictor dnbp_predictor(const Potentials& pots, InferenceConfig cfg, bool keep_beliefs) {
  return [&pots, cfg, keep_beliefs](const SequenceRecord& seq, std::uint64_t seed) {
    Tracker tracker(pots, cfg, seed);
    std::mt19937_64 erng(seed ^ 0xE27A0ull);
    std::vector<FramePrediction> out;
    for (const Image& frame : seq.frames) {
      const auto& beliefs = tracker.step(image_tensor(frame));
      FramePrediction p;
      for (const Belief& b : beliefs) {
        p.estimates.push_back(max_weight_estimate(b));
        p.entropies.push_back(marginal_entropy(b, erng));
      }
      if (keep_beliefs) p.beliefs = beliefs;
      out.push_back(std::move(p));
    }
    return out;
  };
}

SequencePredictor oracle_predictor() {
  return [](const SequenceRecord& seq, std::uint64_t) {
    std::vector<FramePrediction> out;
    for (const auto& l : seq.labels) out.push_back({l, std::vector<double>(l.size(), 0.0), {}});
    return out;
  };
}

SequencePredictor center_predictor() {
  return [](const SequenceRecord& seq, std::uint64_t) {
    std::vector<FramePrediction> out;
    for (const auto& l : seq.labels)
      out.push_back({std::vector<Keypoint>(l.size(), Keypoint{0.0f, 0.0f}), std::vector<double>(l.size(), 0.0), {}});
    return out;
  };
}

void write_track_report(std::ostream& out, const SequenceRecord& seq, const std::vector<FramePrediction>& preds,
                        bool with_particles) {
  for (std::size_t f = 0; f < preds.size(); ++f) {
    const auto& p = preds[f];
    for (std::size_t k = 0; k < p.estimates.size(); ++k) {
      nlohmann::json j;
      j["frame"] = f;
      j["node"] = k;
      j["x"] = p.estimates[k].x;
      j["y"] = p.estimates[k].y;
      if (k < p.entropies.size()) j["entropy_nats"] = p.entropies[k];
      if (f < seq.labels.size() && k < seq.labels[f].size())
        j["error_px"] = pixel_error(p.estimates[k], seq.labels[f][k]);
      if (with_particles && k < p.beliefs.size()) {
        auto arr = nlohmann::json::array();
        const auto& s = p.beliefs[k].set;
        for (int i = 0; i < s.size(); ++i) arr.push_back({s.particles[i].x, s.particles[i].y, s.weights[i]});
        j["particles"] = std::move(arr);
      }
      out << j.dump() << "\n";
    }
  }
}

double uniform_baseline_error(const std::vector<std::vector<Keypoint>>& labels, int grid) {
  if (grid < 1) throw UsageError("quadrature grid must be positive");
  double s = 0.0;
  long n = 0;
  const double h = 2.0 / grid;
  for (const auto& frame : labels)
    for (const auto& k : frame) {
      double acc = 0.0;
      for (int iy = 0; iy < grid; ++iy) {
        const double dy = -1.0 + (iy + 0.5) * h - k.y;
        for (int ix = 0; ix < grid; ++ix) {
          const double dx = -1.0 + (ix + 0.5) * h - k.x;
          acc += std::sqrt(dx * dx + dy * dy);
        }
      }
      s += acc / (static_cast<double>(grid) * grid);
      ++n;
    }
  if (n == 0) throw DataError("no labels for the baseline");
  return s / static_cast<double>(n) * (kRenderSize / 2.0);
}

EvalResult evaluate_dataset(const std::string& split_dir, const SequencePredictor& predictor, std::uint64_t seed,
                            int jobs, int max_frames) {
  const DatasetInfo info = read_dataset_info(split_dir);
  const int nseq = static_cast<int>(info.sequence_dirs.size());
  if (nseq == 0) throw DataError("no sequences in '" + split_dir + "'");
  const int nodes = task_graph(info.task).num_nodes();
  const int nbins = std::max<int>(1, static_cast<int>(info.bins.size()));

  std::vector<std::vector<EvalRow>> rows(nseq);
  std::vector<std::vector<std::vector<Keypoint>>> labels(nseq);
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (int i = next++; i < nseq; i = next++) {
      try {
        SequenceRecord rec = read_sequence(info.sequence_dirs[i]);
        if (max_frames > 0 && static_cast<int>(rec.frames.size()) > max_frames) {
          rec.frames.resize(max_frames);
          rec.labels.resize(max_frames);
        }
        for (const auto& l : rec.labels)
          if (static_cast<int>(l.size()) != nodes) throw DataError("sequence keypoint count does not match the graph");
        const auto preds = predictor(rec, sequence_seed(seed, "eval", i));
        if (preds.size() != rec.labels.size()) throw DataError("predictor returned the wrong number of frames");
        for (const auto& p : preds)
          if (static_cast<int>(p.estimates.size()) != nodes)
            throw DataError("predictor graph has " + std::to_string(p.estimates.size()) + " nodes, the dataset has " +
                            std::to_string(nodes));
        const int decile = std::clamp(rec.decile, 0, nbins - 1);
        for (std::size_t f = 0; f < preds.size(); ++f)
          for (int k = 0; k < nodes; ++k) {
            EvalRow r;
            r.sequence = i;
            r.decile = decile;
            r.node = k;
            r.frame = static_cast<int>(f);
            r.error_px = pixel_error(preds[f].estimates.at(k), rec.labels[f][k]);
            r.entropy = k < static_cast<int>(preds[f].entropies.size()) ? preds[f].entropies[k] : 0.0;
            rows[i].push_back(r);
          }
        labels[i] = std::move(rec.labels);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!failure) failure = std::current_exception();
        next = nseq;
      }
    }
  };
  const int nthreads = std::max(1, std::min(jobs, nseq));
  std::vector<std::thread> pool;
  for (int t = 1; t < nthreads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  EvalResult res;
  res.report = ErrorReport(nbins, nodes);
  std::vector<std::vector<Keypoint>> all_labels;
  for (int i = 0; i < nseq; ++i) {
    for (const auto& r : rows[i]) {
      res.report.add(r.decile, r.node, r.error_px);
      res.rows.push_back(r);
    }
    for (auto& l : labels[i]) all_labels.push_back(std::move(l));
  }
  res.baseline_px = uniform_baseline_error(all_labels, 64);
  return res;
}

void write_eval_csv(const std::string& path, const std::string& task, const EvalResult& r) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw DataError("cannot write '" + path + "'");
  std::fprintf(f, "task,sequence_id,decile,node_id,frame,error_px,entropy_nats\n");
  for (const auto& row : r.rows)
    std::fprintf(f, "%s,%d,%d,%d,%d,%.6f,%.6f\n", task.c_str(), row.sequence, row.decile, row.node, row.frame,
                 row.error_px, row.entropy);
  std::fclose(f);
}

// ---------------------------------------------------------------------------
// small raster plotting

namespace {

void put(Image& img, int x, int y, const Rgb& c) {
  if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
  std::uint8_t* p = img.px(x, y);
  p[0] = c[0];
  p[1] = c[1];
  p[2] = c[2];
}

void line(Image& img, int x0, int y0, int x1, int y1, const Rgb& c, int thick = 1) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    for (int oy = 0; oy < thick; ++oy)
      for (int ox = 0; ox < thick; ++ox) put(img, x0 + ox, y0 + oy, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

Rgb heat(double t) {
  t = std::clamp(t, 0.0, 1.0);
  // black -> purple -> orange -> yellow
  const double r = std::clamp(1.5 * t, 0.0, 1.0);
  const double g = std::clamp(2.0 * t - 0.8, 0.0, 1.0);
  const double b = t < 0.5 ? 1.2 * t : std::max(0.0, 0.6 - 1.2 * (t - 0.5));
  return {static_cast<std::uint8_t>(255 * r), static_cast<std::uint8_t>(255 * g), static_cast<std::uint8_t>(255 * b)};
}

Image heatmap(const Grid2D& g, int cell) {
  Image img(g.n * cell, g.n * cell);
  double mx = 0.0;
  for (double v : g.v) mx = std::max(mx, v);
  for (int y = 0; y < g.n; ++y)
    for (int x = 0; x < g.n; ++x) {
      const Rgb c = heat(mx > 0 ? g.v[y * g.n + x] / mx : 0.0);
      for (int oy = 0; oy < cell; ++oy)
        for (int ox = 0; ox < cell; ++ox) put(img, x * cell + ox, y * cell + oy, c);
    }
  return img;
}

}  // namespace

void write_error_plot(const std::string& path, const ErrorReport& r) {
  const int W = 480, H = 320, L = 40, R = 20, T = 20, B = 30;
  Image img(W, H, 255);
  double mx = 1.0;
  for (int b = 0; b < r.bins; ++b)
    for (int k = 0; k < r.nodes; ++k)
      if (std::isfinite(r.mean(b, k))) mx = std::max(mx, r.mean(b, k));
  mx *= 1.1;
  const Rgb axis{0, 0, 0};
  line(img, L, H - B, W - R, H - B, axis);
  line(img, L, T, L, H - B, axis);
  // gridlines every 5 px of error
  for (double v = 5.0; v < mx; v += 5.0) {
    const int y = H - B - static_cast<int>((H - B - T) * v / mx);
    for (int x = L + 1; x < W - R; x += 4) put(img, x, y, {200, 200, 200});
  }
  auto px = [&](int b) { return L + (r.bins > 1 ? (W - L - R) * b / (r.bins - 1) : (W - L - R) / 2); };
  auto py = [&](double v) { return H - B - static_cast<int>((H - B - T) * v / mx); };
  static const std::array<Rgb, 8> palette{{{0, 114, 178}, {213, 94, 0}, {0, 158, 115}, {204, 121, 167},
                                           {86, 180, 233}, {230, 159, 0}, {120, 120, 120}, {240, 228, 66}}};
  auto draw = [&](auto value, const Rgb& c, int thick) {
    int lx = -1, ly = -1;
    for (int b = 0; b < r.bins; ++b) {
      const double v = value(b);
      if (!std::isfinite(v)) continue;
      const int x = px(b), y = py(v);
      if (lx >= 0) line(img, lx, ly, x, y, c, thick);
      for (int o = -2; o <= 2; ++o) line(img, x - 2, y + o, x + 2, y + o, c);
      lx = x;
      ly = y;
    }
  };
  for (int k = 0; k < r.nodes; ++k) draw([&](int b) { return r.mean(b, k); }, palette[k % palette.size()], 1);
  draw([&](int b) { return r.bin_mean(b); }, axis, 2);
  for (int b = 0; b < r.bins; ++b) line(img, px(b), H - B, px(b), H - B + 4, axis);
  write_png(path, img);
}

// ---------------------------------------------------------------------------

double EntropyTrace::mean_entropy(int node, bool occluded) const {
  double s = 0.0;
  int n = 0;
  for (const auto& f : frames)
    if (f.occluded == occluded && node < static_cast<int>(f.entropies.size())) {
      s += f.entropies[node];
      ++n;
    }
  return n ? s / n : std::numeric_limits<double>::quiet_NaN();
}

OcclusionSequence build_occlusion_sequence(Task task, int frames, std::uint64_t seed, int y0, int width, int height) {
  return build_occlusion_sequence(task, frames, seed, [=](int f, int n) {
    const int travel = kRenderSize + width;
    const int x0 = n > 1 ? -width + static_cast<int>(std::lround(static_cast<double>(f) * travel / (n - 1))) : 0;
    return Occluder{x0, y0, width, height, {64, 64, 64}};
  });
}

OcclusionSequence build_occlusion_sequence(Task task, int frames, std::uint64_t seed, const OccluderPath& path) {
  // an unoccluded, clutter-free sequence supplies the trajectory
  SequenceRecord base = simulate_sequence(task, frames, 0, 0, ClutterKind::None, seed);
  OcclusionSequence out;
  out.seq = base;
  out.seq.frames.clear();
  out.seq.masks.clear();
  for (int f = 0; f < frames; ++f) {
    const Occluder o = path(f, frames);
    RenderedFrame r = render_frame(task, base.labels[f], {}, o);
    long structure = 0, covered = 0;
    for (int y = 0; y < kRenderSize; ++y)
      for (int x = 0; x < kRenderSize; ++x) {
        if (!r.structure_mask[static_cast<std::size_t>(y) * kRenderSize + x]) continue;
        ++structure;
        if (x >= o.x0 && x < o.x0 + o.width && y >= o.y0 && y < o.y0 + o.height) ++covered;
      }
    out.coverage.push_back(structure ? static_cast<double>(covered) / static_cast<double>(structure) : 0.0);
    out.seq.frames.push_back(std::move(r.image));
  }
  return out;
}

EntropyTrace occlusion_entropy_report(const Potentials& pots, const InferenceConfig& cfg, const OcclusionSequence& occ,
                                      std::uint64_t seed, double threshold) {
  const auto preds = dnbp_predictor(pots, cfg)(occ.seq, seed);
  EntropyTrace t;
  for (std::size_t f = 0; f < preds.size(); ++f) {
    OcclusionFrame fr;
    fr.coverage = occ.coverage[f];
    fr.occluded = fr.coverage > threshold;
    fr.entropies = preds[f].entropies;
    t.frames.push_back(std::move(fr));
  }
  return t;
}

// ---------------------------------------------------------------------------

int Grid2D::bin(double x) const {
  const int b = static_cast<int>(std::floor((x - lo) / (hi - lo) * n));
  return std::clamp(b, 0, n - 1);
}

void Grid2D::normalise() {
  double s = 0.0;
  for (double x : v) s += x;
  if (s > 0.0)
    for (double& x : v) x /= s;
}

std::vector<Keypoint> edge_translations(const GraphSpec& g, int edge, const std::vector<std::vector<Keypoint>>& labels) {
  if (edge < 0 || edge >= static_cast<int>(g.edges().size())) throw UsageError("unknown edge index " + std::to_string(edge));
  const auto [s, d] = g.edges()[edge];
  std::vector<Keypoint> out;
  for (const auto& l : labels) {
    if (static_cast<int>(l.size()) != g.num_nodes()) throw DataError("label count does not match the graph");
    out.push_back({l[s].x - l[d].x, l[s].y - l[d].y});
  }
  return out;
}

double modal_radius(const std::vector<Keypoint>& t) {
  if (t.empty()) throw DataError("no translations");
  constexpr double w = 0.02;
  std::vector<long> h(200, 0);
  for (const auto& k : t) {
    const int b = std::min<int>(199, static_cast<int>(std::hypot(k.x, k.y) / w));
    ++h[b];
  }
  const auto it = std::max_element(h.begin(), h.end());
  return (static_cast<double>(it - h.begin()) + 0.5) * w;
}

double total_variation(const Grid2D& a, const Grid2D& b) {
  if (a.v.size() != b.v.size()) throw ShapeError("histograms differ in size");
  double sa = 0.0, sb = 0.0;
  for (double v : a.v) sa += v;
  for (double v : b.v) sb += v;
  if (!(sa > 0.0) || !(sb > 0.0)) throw DataError("total variation of an empty histogram");
  double tv = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) tv += std::abs(a.v[i] / sa - b.v[i] / sb);
  return 0.5 * tv;
}

PairwiseInspection inspect_pairwise(const Potentials& pots, int edge, const std::vector<std::vector<Keypoint>>& labels,
                                    int samples, std::uint64_t seed, int grid, double extent) {
  const GraphSpec& g = pots.graph();
  if (edge < 0 || edge >= static_cast<int>(g.edges().size())) throw UsageError("unknown edge index " + std::to_string(edge));
  if (samples < 1 || grid < 2) throw UsageError("sample count and grid size must be positive");
  PairwiseInspection r;
  r.edge = edge;

  const auto trans = edge_translations(g, edge, labels);
  if (trans.empty()) throw DataError("no labels to build the reference histogram");
  r.training_hist = Grid2D(kEntropyBins, -extent, extent);
  for (const auto& t : trans) r.training_hist.v[r.training_hist.bin(t.y) * kEntropyBins + r.training_hist.bin(t.x)] += 1;
  r.training_hist.normalise();
  r.training_modal_radius = modal_radius(trans);

  std::mt19937_64 rng(seed);
  r.sampler_hist = Grid2D(kEntropyBins, -extent, extent);
  constexpr int kChunk = 4096;
  for (int done = 0; done < samples; done += kChunk) {
    const int n = std::min(kChunk, samples - done);
    Tape tape(&pots.params(), false);
    const Tensor& t = tape.value(pots.pairwise_translation(tape, edge, tape.constant(sample_noise(n, rng), "noise")));
    for (int i = 0; i < n; ++i)
      r.sampler_hist.v[r.sampler_hist.bin(t.data[2 * i + 1]) * kEntropyBins + r.sampler_hist.bin(t.data[2 * i])] += 1;
  }
  r.sampler_hist.normalise();
  r.total_variation = total_variation(r.training_hist, r.sampler_hist);

  r.density_grid = Grid2D(grid, -extent, extent);
  Tensor pts({grid * grid, 2});
  for (int y = 0; y < grid; ++y)
    for (int x = 0; x < grid; ++x) {
      pts.data[2 * (y * grid + x)] = static_cast<float>(r.density_grid.centre(x));
      pts.data[2 * (y * grid + x) + 1] = static_cast<float>(r.density_grid.centre(y));
    }
  Tape tape(&pots.params(), false);
  const Tensor& dens = tape.value(pots.pairwise_density(tape, edge, tape.constant(pts, "grid")));
  int best = 0;
  for (int i = 0; i < grid * grid; ++i) {
    r.density_grid.v[i] = dens.data[i];
    if (dens.data[i] > dens.data[best]) best = i;
  }
  r.grid_modal_radius = std::hypot(pts.data[2 * best], pts.data[2 * best + 1]);
  return r;
}

void write_inspection(const std::string& out_dir, const PairwiseInspection& r) {
  fs::create_directories(out_dir);
  const std::string tag = "edge" + std::to_string(r.edge);
  write_png((fs::path(out_dir) / (tag + "_training_hist.png")).string(), heatmap(r.training_hist, 4));
  write_png((fs::path(out_dir) / (tag + "_sampler_hist.png")).string(), heatmap(r.sampler_hist, 4));
  write_png((fs::path(out_dir) / (tag + "_density_grid.png")).string(), heatmap(r.density_grid, 2));
  nlohmann::json j;
  j["edge"] = r.edge;
  j["extent"] = {r.training_hist.lo, r.training_hist.hi};
  j["training_hist"] = {{"n", r.training_hist.n}, {"values", r.training_hist.v}};
  j["sampler_hist"] = {{"n", r.sampler_hist.n}, {"values", r.sampler_hist.v}};
  j["density_grid"] = {{"n", r.density_grid.n}, {"values", r.density_grid.v}};
  j["grid_modal_radius"] = r.grid_modal_radius;
  j["training_modal_radius"] = r.training_modal_radius;
  j["total_variation"] = r.total_variation;
  std::ofstream out(fs::path(out_dir) / (tag + "_inspection.json"));
  if (!out) throw DataError("cannot write inspection output in '" + out_dir + "'");
  out << j.dump() << "\n";
}

}  // namespace dnbp
