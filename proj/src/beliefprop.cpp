#include "dnbp/beliefprop.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

#include "dnbp/error.hpp"

namespace dnbp {

int num_directed_edges(const GraphSpec& g) { return 2 * static_cast<int>(g.edges().size()); }

int directed_edge_index(const GraphSpec& g, int s, int d) {
  const int e = g.edge_index(s, d);
  if (e < 0) throw DataError("no edge between nodes " + std::to_string(s) + " and " + std::to_string(d));
  return g.edges()[e].first == s ? 2 * e : 2 * e + 1;
}

Tensor uniform_particles(int M, const ProposalBox& box, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(box.lo, box.hi);
  Tensor t({M, 2});
  for (float& v : t.data) v = u(rng);
  return t;
}

FrameState initial_state(const GraphSpec& g, const InferenceConfig& cfg, std::mt19937_64& rng) {
  if (cfg.particles < 1) throw UsageError("particle count must be positive");
  FrameState st;
  st.messages.resize(num_directed_edges(g));
  for (std::size_t e = 0; e < g.edges().size(); ++e) {
    auto [a, b] = g.edges()[e];
    for (int dir = 0; dir < 2; ++dir) {
      Message& m = st.messages[2 * e + dir];
      m.source = dir == 0 ? a : b;
      m.dest = dir == 0 ? b : a;
      m.set.particles = tensor_to_keypoints(uniform_particles(cfg.particles, cfg.proposal, rng));
      m.set.weights.assign(cfg.particles, 1.0f / static_cast<float>(cfg.particles));
    }
  }
  return st;
}

std::vector<int> resample_indices(const std::vector<float>& weights, int n, std::mt19937_64& rng) {
  std::vector<double> cdf(weights.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!(weights[i] >= 0.0f) || !std::isfinite(weights[i])) throw NumericError("resampling weight " + std::to_string(i) + " is invalid");
    acc += weights[i];
    cdf[i] = acc;
  }
  if (!(acc > 0.0)) throw NumericError("resampling weights sum to zero");
  std::uniform_real_distribution<double> u(0.0, acc);
  std::vector<int> out(n);
  for (int k = 0; k < n; ++k) {
    const double r = u(rng);
    auto it = std::upper_bound(cdf.begin(), cdf.end(), r);
    int idx = static_cast<int>(it - cdf.begin());
    if (idx >= static_cast<int>(cdf.size())) idx = static_cast<int>(cdf.size()) - 1;
    // skip zero-weight entries that share a cdf value with their successor
    while (weights[idx] <= 0.0f && idx + 1 < static_cast<int>(cdf.size())) ++idx;
    out[k] = idx;
  }
  return out;
}

ResampleResult resample_and_diffuse(Tape& tape, const Potentials& pots, const Belief& prev, int M, float gamma,
                                    Mode mode, const ProposalBox& box, std::mt19937_64& rng) {
  if (M < 1) throw UsageError("particle count must be positive");
  if (mode == Mode::Train && !(gamma >= 0.0f && gamma <= 1.0f)) throw UsageError("gamma must lie in [0,1]");
  const float g = mode == Mode::Eval ? 0.0f : gamma;
  int n_res = static_cast<int>(std::floor((1.0f - g) * static_cast<float>(M) + 1e-4f));
  n_res = std::clamp(n_res, 0, M);

  ResampleResult r;
  const double total = std::accumulate(prev.set.weights.begin(), prev.set.weights.end(), 0.0);
  if (n_res > 0 && (prev.set.size() == 0 || !(total > 0.0))) {
    std::cerr << "warning: belief of node " << prev.node << " has zero total weight; using the uniform proposal\n";
    n_res = 0;
    r.fell_back = true;
  }
  std::vector<Var> parts;
  if (n_res > 0) {
    const auto idx = resample_indices(prev.set.weights, n_res, rng);
    Tensor base({n_res, 2});
    for (int k = 0; k < n_res; ++k) {
      base.data[2 * k] = prev.set.particles[idx[k]].x;
      base.data[2 * k + 1] = prev.set.particles[idx[k]].y;
    }
    Var noise = tape.constant(sample_noise(n_res, rng), "diffusion noise");
    parts.push_back(pots.diffusion_sample(tape, prev.node, tape.constant(std::move(base), "resampled"), noise));
  }
  if (n_res < M) parts.push_back(tape.constant(uniform_particles(M - n_res, box, rng), "uniform proposal"));
  r.particles = parts.size() == 1 ? parts[0] : tape.concat_rows(parts);
  r.resampled = n_res;
  return r;
}

namespace {

// Orients a translation so it reads x_first - x_second for edge e, given
// x_s (the sender's position) and x_d.
Var oriented(Tape& tape, const Edge& e, int s, Var xs, Var xd) {
  return e.first == s ? tape.sub(xs, xd) : tape.sub(xd, xs);
}

Tensor ones(int n) { return Tensor({n, 1}, 1.0f); }

}  // namespace

MessageVars message_update(Tape& tape, const Potentials& pots, const FrameState& prev, const std::vector<Var>& features,
                           int s, int d, const InferenceConfig& cfg, Mode mode,
                           const std::vector<Keypoint>* truth, std::mt19937_64& rng) {
  const GraphSpec& g = pots.graph();
  const int e = g.edge_index(s, d);
  if (e < 0) throw DataError("message requested along missing edge " + std::to_string(s) + "->" + std::to_string(d));
  const Edge& edge = g.edges()[e];
  const int M = cfg.particles;
  const int U = cfg.u_samples;
  if (M < 1 || U < 1) throw UsageError("particle and sample counts must be positive");
  if (mode == Mode::Train) {
    if (truth == nullptr) throw DataError("train-mode message update requires ground-truth keypoints");
    if (static_cast<int>(truth->size()) != g.num_nodes())
      throw DataError("ground truth has " + std::to_string(truth->size()) + " keypoints, graph has " +
                      std::to_string(g.num_nodes()));
  }

  MessageVars out;
  out.source = s;
  out.dest = d;

  // particles for x_d
  Var mu;
  if (prev.has_beliefs()) {
    mu = resample_and_diffuse(tape, pots, prev.beliefs.at(d), M, cfg.gamma, mode, cfg.proposal, rng).particles;
  } else {
    mu = tape.constant(uniform_particles(M, cfg.proposal, rng), "uniform proposal");
  }
  out.particles = mu;

  // unary term: mean over U pairwise samples of x_s given each x_d particle
  const Direction dir = edge.first == s ? Direction::SourceGivenDest : Direction::DestGivenSource;
  Var cond = tape.repeat_rows(mu, U);
  Var noise = tape.constant(sample_noise(M * U, rng), "pairwise noise");
  Var xs_hat = pots.pairwise_sample(tape, e, cond, dir, noise);
  const std::string ug = Potentials::unary_group(s);
  const bool was_stopped = tape.stopped(ug);
  tape.set_stop(ug, true);
  Var feat = tape.detach(features.at(s));
  out.w_unary = tape.group_mean(pots.unary(tape, s, xs_hat, feat), U);
  tape.set_stop(ug, was_stopped);

  // neighbour term
  std::vector<int> others;
  for (int u : g.neighbors(s))
    if (u != d) others.push_back(u);
  if (others.empty()) {
    out.w_neigh = tape.constant(ones(M), "empty product");
  } else if (mode == Mode::Train) {
    const Keypoint xs = (*truth)[s];
    Tensor rep({M, 2});
    for (int i = 0; i < M; ++i) {
      rep.data[2 * i] = xs.x;
      rep.data[2 * i + 1] = xs.y;
    }
    Var xs_rep = tape.constant(std::move(rep), "true sender position");
    Var dens = pots.pairwise_density(tape, e, oriented(tape, edge, s, xs_rep, mu));
    Var w = dens;
    for (std::size_t k = 1; k < others.size(); ++k) w = tape.mul(w, dens);
    out.w_neigh = w;
  } else {
    Var w;
    for (int u : others) {
      const Message& in = prev.messages.at(directed_edge_index(g, u, s));
      if (in.set.size() == 0) throw DataError("missing message " + std::to_string(u) + "->" + std::to_string(s));
      const int Mu = in.set.size();
      // normalised incoming weights
      double tot = 0.0;
      for (float v : in.set.weights) tot += v;
      Tensor wu({Mu, 1});
      for (int j = 0; j < Mu; ++j)
        wu.data[j] = tot > 0.0 ? static_cast<float>(in.set.weights[j] / tot) : 1.0f / static_cast<float>(Mu);
      // pair (i, j): x_d = mu_i, x_s = particle j of m_{u->s}
      Tensor tiled({M * Mu, 2});
      for (int i = 0; i < M; ++i)
        for (int j = 0; j < Mu; ++j) {
          tiled.data[2 * (i * Mu + j)] = in.set.particles[j].x;
          tiled.data[2 * (i * Mu + j) + 1] = in.set.particles[j].y;
        }
      Var xs = tape.constant(std::move(tiled), "incoming particles");
      Var xd = tape.repeat_rows(mu, Mu);
      Var dens = tape.reshape(pots.pairwise_density(tape, e, oriented(tape, edge, s, xs, xd)), {M, Mu});
      Var term = tape.matmul(dens, tape.constant(std::move(wu), "incoming weights"));
      w = w.valid() ? tape.mul(w, term) : term;
    }
    out.w_neigh = w;
  }
  out.weights = tape.mul(out.w_unary, out.w_neigh);
  return out;
}

BeliefVars belief_update(Tape& tape, const Potentials& pots, const std::vector<MessageVars>& incoming, Var features_d,
                         int d) {
  const GraphSpec& g = pots.graph();
  const auto& nbrs = g.neighbors(d);
  if (nbrs.empty()) throw DataError("node " + std::to_string(d) + " has no neighbours; its belief is undefined");
  std::vector<Var> parts, weights, ud, us, nb;
  for (int s : nbrs) {
    const MessageVars* m = nullptr;
    for (const auto& c : incoming)
      if (c.source == s && c.dest == d) m = &c;
    if (m == nullptr) throw DataError("belief of node " + std::to_string(d) + " lacks message from " + std::to_string(s));
    Var phi = pots.unary(tape, d, m->particles, features_d);
    parts.push_back(m->particles);
    weights.push_back(tape.normalize(tape.mul(m->weights, phi)));
    ud.push_back(phi);
    us.push_back(m->w_unary);
    nb.push_back(m->w_neigh);
  }
  BeliefVars b;
  b.node = d;
  auto cat = [&](std::vector<Var>& v) { return v.size() == 1 ? v[0] : tape.concat_rows(v); };
  b.particles = cat(parts);
  b.weights = tape.normalize(cat(weights));
  b.unary_d = cat(ud);
  b.unary_s = cat(us);
  b.neigh = cat(nb);
  return b;
}

namespace {

std::vector<float> normalised(const Tensor& w) {
  double tot = 0.0;
  for (float v : w.data) tot += v;
  std::vector<float> out(w.data.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = tot > 0.0 ? static_cast<float>(w.data[i] / tot) : 0.0f;
  return out;
}

}  // namespace

Message to_message(const Tape& tape, const MessageVars& m, int frame) {
  Message out;
  out.source = m.source;
  out.dest = m.dest;
  out.frame = frame;
  out.set.particles = tensor_to_keypoints(tape.value(m.particles));
  out.set.weights = normalised(tape.value(m.weights));
  return out;
}

Belief to_belief(const Tape& tape, const BeliefVars& b, int frame) {
  Belief out;
  out.node = b.node;
  out.frame = frame;
  out.set.particles = tensor_to_keypoints(tape.value(b.particles));
  out.set.weights = tape.value(b.weights).data;
  const auto& a = tape.value(b.unary_d).data;
  const auto& c = tape.value(b.unary_s).data;
  const auto& n = tape.value(b.neigh).data;
  out.set.components.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out.set.components[i] = {a[i], c[i], n[i]};
  return out;
}

FrameOutput run_frame(Tape& tape, const Potentials& pots, const FrameState& prev, const Tensor& image,
                      const InferenceConfig& cfg, Mode mode, const std::vector<Keypoint>* truth,
                      std::mt19937_64& rng) {
  const GraphSpec& g = pots.graph();
  FrameOutput out;
  Var img = tape.constant(image, "image");
  for (int v = 0; v < g.num_nodes(); ++v) out.features.push_back(pots.encode(tape, v, img));
  out.messages.resize(num_directed_edges(g));
  for (int s = 0; s < g.num_nodes(); ++s)
    for (int d : g.neighbors(s))
      out.messages[directed_edge_index(g, s, d)] =
          message_update(tape, pots, prev, out.features, s, d, cfg, mode, truth, rng);
  for (int d = 0; d < g.num_nodes(); ++d)
    out.beliefs.push_back(belief_update(tape, pots, out.messages, out.features[d], d));

  const int frame = prev.frame + 1;
  out.state.frame = frame;
  for (const auto& m : out.messages) out.state.messages.push_back(to_message(tape, m, frame));
  for (const auto& b : out.beliefs) out.state.beliefs.push_back(to_belief(tape, b, frame));
  return out;
}

Keypoint max_weight_estimate(const Belief& belief) {
  if (belief.set.size() == 0) throw DataError("empty belief for node " + std::to_string(belief.node));
  int best = 0;
  for (int i = 1; i < belief.set.size(); ++i)
    if (belief.set.weights[i] > belief.set.weights[best]) best = i;
  return belief.set.particles[best];
}

std::vector<std::vector<Keypoint>> smc_joint_sample(const std::vector<Belief>& beliefs, const Potentials& pots, int N,
                                                    std::mt19937_64& rng) {
  const GraphSpec& g = pots.graph();
  if (static_cast<int>(beliefs.size()) != g.num_nodes()) throw DataError("one belief per node is required");
  if (N < 1) throw UsageError("sample count must be positive");
  std::vector<std::vector<Keypoint>> samples(N, std::vector<Keypoint>(g.num_nodes()));
  for (int k = 0; k < g.num_nodes(); ++k) {
    const Belief& b = beliefs[k];
    const int T = b.set.size();
    if (T == 0) throw DataError("empty belief for node " + std::to_string(k));
    std::vector<int> earlier;
    for (int j : g.neighbors(k))
      if (j < k) earlier.push_back(j);
    if (earlier.empty()) {
      auto idx = resample_indices(b.set.weights, N, rng);
      for (int n = 0; n < N; ++n) samples[n][k] = b.set.particles[idx[n]];
      continue;
    }
    // w[n*T + i] = w_i * prod_j psi(x_j^n, mu_i)
    std::vector<double> w(static_cast<std::size_t>(N) * T);
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < T; ++i) w[static_cast<std::size_t>(n) * T + i] = b.set.weights[i];
    for (int j : earlier) {
      const int e = g.edge_index(j, k);
      const Edge& edge = g.edges()[e];
      Tensor delta({N * T, 2});
      for (int n = 0; n < N; ++n)
        for (int i = 0; i < T; ++i) {
          const Keypoint xj = samples[n][j];
          const Keypoint xk = b.set.particles[i];
          // edge models x_first - x_second
          const bool j_first = edge.first == j;
          const float dx = j_first ? xj.x - xk.x : xk.x - xj.x;
          const float dy = j_first ? xj.y - xk.y : xk.y - xj.y;
          delta.data[2 * (n * T + i)] = dx;
          delta.data[2 * (n * T + i) + 1] = dy;
        }
      Tape tape(&pots.params(), false);
      const Tensor& dens = tape.value(pots.pairwise_density(tape, e, tape.constant(std::move(delta), "translations")));
      for (std::size_t q = 0; q < w.size(); ++q) w[q] *= dens.data[q];
    }
    for (int n = 0; n < N; ++n) {
      std::vector<float> row(T);
      double tot = 0.0;
      for (int i = 0; i < T; ++i) tot += (row[i] = static_cast<float>(w[static_cast<std::size_t>(n) * T + i]));
      int pick;
      if (tot > 0.0) {
        pick = resample_indices(row, 1, rng)[0];
      } else {
        pick = resample_indices(b.set.weights, 1, rng)[0];
      }
      samples[n][k] = b.set.particles[pick];
    }
  }
  return samples;
}

Tracker::Tracker(const Potentials& pots, InferenceConfig cfg, std::uint64_t seed)
    : pots_(pots), cfg_(cfg), rng_(seed) {
  state_ = initial_state(pots_.graph(), cfg_, rng_);
}

const std::vector<Belief>& Tracker::step(const Tensor& image) {
  Tape tape(&pots_.params(), false);
  FrameOutput out = run_frame(tape, pots_, state_, image, cfg_, Mode::Eval, nullptr, rng_);
  state_ = std::move(out.state);
  return state_.beliefs;
}

}  // namespace dnbp
