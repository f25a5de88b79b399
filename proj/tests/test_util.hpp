#pragma once

// Test helpers: a double-precision reference implementation of the network
// layers, used as the finite-difference oracle for the tape.

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <vector>

#include "dnbp/nn.hpp"
#include "dnbp/tape.hpp"

namespace dnbp::testing {

struct DMat {
  int rows = 0, cols = 0;
  std::vector<double> v;
  DMat() = default;
  DMat(int r, int c) : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, 0.0) {}
  double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
};

/// When set, the oracle appends every ReLU sign and max-pool choice here, so a
/// finite-difference stencil that crosses a kink can be detected.
inline thread_local std::vector<std::uint32_t>* g_pattern = nullptr;

/// Parameter values widened to double, indexed like the ParamStore.
using DParams = std::vector<std::vector<double>>;

inline DParams widen(const ParamStore& store) {
  DParams out;
  for (const auto& p : store) out.emplace_back(p.value.data.begin(), p.value.data.end());
  return out;
}

inline DMat from_tensor(const Tensor& t) {
  DMat m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.size(); ++i) m.v[i] = t.data[i];
  return m;
}

inline DMat d_linear(const DMat& x, const std::vector<double>& w, const std::vector<double>& b, int out) {
  DMat y(x.rows, out);
  for (int r = 0; r < x.rows; ++r)
    for (int o = 0; o < out; ++o) {
      double s = b[o];
      for (int i = 0; i < x.cols; ++i) s += x.at(r, i) * w[static_cast<std::size_t>(i) * out + o];
      y.at(r, o) = s;
    }
  return y;
}

inline void d_relu(std::vector<double>& x) {
  for (double& v : x) {
    if (g_pattern) g_pattern->push_back(v > 0.0);
    v = v > 0.0 ? v : 0.0;
  }
}

inline void d_sigmoid_scaled(DMat& x, double lo, double hi) {
  for (double& v : x.v) v = lo + (hi - lo) / (1.0 + std::exp(-v));
}

/// Fully connected stack with ReLU between layers, optional scaled-sigmoid head.
inline DMat d_mlp(const Mlp& net, const DParams& p, DMat x, bool sigmoid_head) {
  const auto& w = net.weight_ids();
  const auto& b = net.bias_ids();
  for (std::size_t l = 0; l < w.size(); ++l) {
    const int out = static_cast<int>(p[b[l]].size());
    x = d_linear(x, p[w[l]], p[b[l]], out);
    if (l + 1 < w.size()) d_relu(x.v);
  }
  if (sigmoid_head) d_sigmoid_scaled(x, kDensityFloor, kDensityCeil);
  return x;
}

struct DVolume {
  int h = 0, w = 0, c = 0;
  std::vector<double> v;  // HWC
  double& at(int y, int x, int k) { return v[(static_cast<std::size_t>(y) * w + x) * c + k]; }
  double at(int y, int x, int k) const { return v[(static_cast<std::size_t>(y) * w + x) * c + k]; }
};

inline DVolume d_conv3x3(const DVolume& x, const std::vector<double>& wt, const std::vector<double>& b, int out) {
  DVolume y;
  y.h = (x.h + 2 - 3) / 2 + 1;
  y.w = (x.w + 2 - 3) / 2 + 1;
  y.c = out;
  y.v.assign(static_cast<std::size_t>(y.h) * y.w * out, 0.0);
  for (int oy = 0; oy < y.h; ++oy)
    for (int ox = 0; ox < y.w; ++ox)
      for (int o = 0; o < out; ++o) {
        double s = b[o];
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
            if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
            for (int c = 0; c < x.c; ++c)
              s += x.at(iy, ix, c) * wt[(static_cast<std::size_t>(ky * 3 + kx) * x.c + c) * out + o];
          }
        y.at(oy, ox, o) = s;
      }
  return y;
}

inline DVolume d_maxpool(const DVolume& x) {
  DVolume y;
  y.h = (x.h + 1) / 2;
  y.w = (x.w + 1) / 2;
  y.c = x.c;
  y.v.assign(static_cast<std::size_t>(y.h) * y.w * y.c, 0.0);
  for (int oy = 0; oy < y.h; ++oy)
    for (int ox = 0; ox < y.w; ++ox)
      for (int c = 0; c < x.c; ++c) {
        double best = -INFINITY;
        std::uint32_t arg = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int iy = 2 * oy + dy, ix = 2 * ox + dx;
            if (iy < x.h && ix < x.w && x.at(iy, ix, c) > best) {
              best = x.at(iy, ix, c);
              arg = static_cast<std::uint32_t>(dy * 2 + dx);
            }
          }
        if (g_pattern) g_pattern->push_back(arg);
        y.at(oy, ox, c) = best;
      }
  return y;
}

/// Encoder features for an image: conv weights are found by parameter name.
inline std::vector<double> d_encoder(const ParamStore& store, const DParams& p, const std::string& prefix,
                                     DVolume x) {
  for (int k = 0; k < ConvEncoder::kBlocks; ++k) {
    const std::string name = prefix + ".conv" + std::to_string(k);
    const auto& b = p[store.find(name + ".b")];
    x = d_conv3x3(x, p[store.find(name + ".w")], b, static_cast<int>(b.size()));
    d_relu(x.v);
    if (x.h > 1 || x.w > 1) x = d_maxpool(x);
  }
  return x.v;
}

inline std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("dnbp_test_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

}  // namespace dnbp::testing
