#pragma once

// Finite-difference gradient check of every learned network against the
// double-precision oracle in test_util.hpp.

#include <chrono>
#include <cmath>
#include <functional>
#include <random>

#include "dnbp/graph.hpp"
#include "test_util.hpp"

namespace dnbp::testing {

inline Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f) {
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor t(std::move(shape));
  for (float& v : t.data) v = u(rng);
  return t;
}

inline double dot(const DMat& a, const std::vector<double>& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.v.size(); ++i) s += a.v[i] * r[i];
  return s;
}

// Compares analytic float gradients against central differences of the
// double oracle, on a sample of coordinates plus one random direction
// through every parameter of the network's group. Stencils whose two ends
// see a different ReLU/max-pool pattern than the centre straddle a kink,
// where a finite difference says nothing about the derivative; such
// coordinates are redrawn (input coordinates are dropped).
struct GradCheck {
  const ParamStore& store;
  std::vector<int> ids;  // parameters of the network under test
  double h = 1e-3;
  mutable int kinks = 0;

  // objective(params, input) evaluated in double
  template <class F>
  double relative_error(const Gradients& g, const std::vector<double>& input_grad, std::vector<double> input,
                        const F& objective, std::mt19937_64& rng, int coords) const {
    DParams p = widen(store);
    std::vector<double> analytic, numeric;
    std::vector<std::uint32_t> centre, up_pat, down_pat;
    g_pattern = &centre;
    objective(p, input);
    g_pattern = nullptr;

    // returns false when the stencil crosses a kink
    auto central = [&](auto&& perturb, double& out) {
      up_pat.clear();
      down_pat.clear();
      perturb(+h);
      g_pattern = &up_pat;
      const double up = objective(p, input);
      perturb(-2.0 * h);
      g_pattern = &down_pat;
      const double down = objective(p, input);
      g_pattern = nullptr;
      perturb(+h);
      out = (up - down) / (2.0 * h);
      const bool smooth = up_pat == centre && down_pat == centre;
      if (!smooth) ++kinks;
      return smooth;
    };

    std::uniform_int_distribution<std::size_t> pick_param(0, ids.size() - 1);
    for (int k = 0, tries = 0; k < coords && tries < 50 * coords; ++tries) {
      const int id = ids[pick_param(rng)];
      std::uniform_int_distribution<std::size_t> pick(0, p[id].size() - 1);
      const std::size_t j = pick(rng);
      double fd;
      if (!central([&](double d) { p[id][j] += d; }, fd)) continue;
      analytic.push_back(g[id].data[j]);
      numeric.push_back(fd);
      ++k;
    }
    for (std::size_t j = 0; j < input.size(); ++j) {
      double fd;
      if (!central([&](double d) { input[j] += d; }, fd)) continue;
      analytic.push_back(input_grad[j]);
      numeric.push_back(fd);
    }
    // random unit directions over every parameter of the network
    std::normal_distribution<double> n01;
    for (int tries = 0; tries < 20; ++tries) {
      std::vector<std::vector<double>> dir;
      double norm = 0.0;
      for (int id : ids) {
        dir.emplace_back(p[id].size());
        for (double& v : dir.back()) norm += (v = n01(rng)) * v;
      }
      norm = std::sqrt(norm);
      double dd = 0.0;
      for (std::size_t k = 0; k < ids.size(); ++k)
        for (std::size_t j = 0; j < dir[k].size(); ++j) dd += g[ids[k]].data[j] * (dir[k][j] /= norm);
      double fd;
      if (!central(
              [&](double d) {
                for (std::size_t k = 0; k < ids.size(); ++k)
                  for (std::size_t j = 0; j < dir[k].size(); ++j) p[ids[k]][j] += d * dir[k][j];
              },
              fd))
        continue;
      analytic.push_back(dd);
      numeric.push_back(fd);
      break;
    }

    double diff = 0.0, ref = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      ref += numeric[i] * numeric[i];
    }
    return std::sqrt(diff) / std::max(std::sqrt(ref), 1e-8);
  }
};

inline std::vector<double> random_weights(int n, std::mt19937_64& rng) {
  std::normal_distribution<double> n01;
  std::vector<double> r(n);
  for (double& v : r) v = n01(rng);
  return r;
}

inline constexpr int kInputs = 100;
inline constexpr int kRows = 4;

// Shared driver for the three fully connected networks.
inline double check_mlp(const Potentials& pots, const Mlp& net, const std::string& group, bool sigmoid, int in_dim,
                 const std::function<Var(Tape&, Var)>& forward, std::mt19937_64& rng) {
  GradCheck gc{pots.params(), pots.params().group_ids(group)};
  double worst = 0.0;
  for (int n = 0; n < kInputs; ++n) {
    Tensor x = random_tensor({kRows, in_dim}, rng, -2.0f, 2.0f);
    Tape tape(&pots.params());
    Var xv = tape.input(x);
    Var out = forward(tape, xv);
    const auto r = random_weights(static_cast<int>(tape.value(out).size()), rng);
    Tensor seed(tape.value(out).shape);
    for (std::size_t i = 0; i < r.size(); ++i) seed.data[i] = static_cast<float>(r[i]);
    Gradients g = tape.backward(out, seed);
    const Tensor gx = tape.grad(xv);
    std::vector<double> input(x.data.begin(), x.data.end()), input_grad(gx.data.begin(), gx.data.end());
    auto objective = [&](const DParams& p, const std::vector<double>& in) {
      DMat m(kRows, in_dim);
      m.v = in;
      return dot(d_mlp(net, p, m, sigmoid), r);
    };
    const double e = gc.relative_error(g, input_grad, input, objective, rng, 12);
    worst = std::max(worst, e);
  }
  return worst;
}

struct NetworkCheck {
  double diffusion = 0, density = 0, sampler = 0, unary = 0;
  double seconds = 0;
  double worst() const { return std::max(std::max(diffusion, density), std::max(sampler, unary)); }
};

/// Worst relative error per network over kInputs random inputs each.
inline NetworkCheck check_all_networks(std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  Potentials pots(GraphSpec::pendulum(), seed);
  std::mt19937_64 rng(seed + 1);
  NetworkCheck res;
  res.diffusion = check_mlp(pots, pots.diffusion_net(0), Potentials::diffusion_group(0), false, kNoiseDim,
                            [&](Tape& t, Var x) { return pots.diffusion_translation(t, 0, x); }, rng);
  const Edge e = pots.graph().edges()[0];
  res.density = check_mlp(pots, pots.density_net(0), Potentials::density_group(e), true, 2,
                          [&](Tape& t, Var x) { return pots.pairwise_density(t, 0, x); }, rng);
  res.sampler = check_mlp(pots, pots.sampler_net(0), Potentials::sampler_group(e), false, kNoiseDim,
                          [&](Tape& t, Var x) { return pots.pairwise_translation(t, 0, x); }, rng);

  // unary: encoder and head together, gradient also w.r.t. the particles
  GradCheck gc{pots.params(), pots.params().group_ids(Potentials::unary_group(0))};
  for (int n = 0; n < kInputs; ++n) {
    Tensor img = random_tensor({128, 128, 3}, rng, 0.0f, 1.0f);
    Tensor parts = random_tensor({kRows, 2}, rng);
    Tape tape(&pots.params());
    Var pv = tape.input(parts);
    Var out = pots.unary(tape, 0, pv, pots.encode(tape, 0, tape.constant(img)));
    const auto r = random_weights(kRows, rng);
    Tensor grad_seed({kRows, 1});
    for (int i = 0; i < kRows; ++i) grad_seed.data[i] = static_cast<float>(r[i]);
    Gradients g = tape.backward(out, grad_seed);
    const Tensor gp = tape.grad(pv);
    DVolume vol{128, 128, 3, std::vector<double>(img.data.begin(), img.data.end())};
    auto objective = [&](const DParams& p, const std::vector<double>& in) {
      const auto feat = d_encoder(pots.params(), p, "unary0.enc", vol);
      DMat x(kRows, 2 + kFeatureDim);
      for (int i = 0; i < kRows; ++i) {
        x.at(i, 0) = in[2 * i];
        x.at(i, 1) = in[2 * i + 1];
        for (int k = 0; k < kFeatureDim; ++k) x.at(i, 2 + k) = feat[k];
      }
      return dot(d_mlp(pots.unary_head(0), p, x, true), r);
    };
    res.unary = std::max(res.unary, gc.relative_error(g, std::vector<double>(gp.data.begin(), gp.data.end()),
                                                      std::vector<double>(parts.data.begin(), parts.data.end()),
                                                      objective, rng, 4));
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return res;
}

}  // namespace dnbp::testing
