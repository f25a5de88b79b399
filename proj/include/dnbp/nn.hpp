#pragma once

#include <random>
#include <string>
#include <vector>

#include "dnbp/tape.hpp"

namespace dnbp {

inline constexpr float kDensityFloor = 0.005f;
inline constexpr float kDensityCeil = 1.0f;
inline constexpr int kNoiseDim = 64;
inline constexpr int kImageSize = 128;
inline constexpr int kFeatureDim = 10;

enum class Head { None, ScaledSigmoid };

/// Stack of fully connected layers, ReLU between them, with an optional
/// sigmoid head rescaled to [kDensityFloor, kDensityCeil].
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore& store, const std::string& prefix, const std::string& group, int in, std::vector<int> widths,
      Head head, std::mt19937_64& rng);

  Var forward(Tape& tape, Var x) const;
  int in_dim() const { return in_; }
  int out_dim() const { return widths_.empty() ? in_ : widths_.back(); }
  const std::vector<int>& weight_ids() const { return w_; }
  const std::vector<int>& bias_ids() const { return b_; }

 private:
  int in_ = 0;
  std::vector<int> widths_;
  std::vector<int> w_, b_;
  Head head_ = Head::None;
};

/// 5 x [conv(3x3, 10, stride 2, pad 1, ReLU), maxpool(2x2, 2, ceil)] on a
/// [128,128,3] image. A block whose input is already 1x1 skips its pool.
/// Output is the flattened [1,10] feature row.
class ConvEncoder {
 public:
  ConvEncoder() = default;
  ConvEncoder(ParamStore& store, const std::string& prefix, const std::string& group, std::mt19937_64& rng);

  Var forward(Tape& tape, Var image) const;

  static constexpr int kBlocks = 5;
  static constexpr int kChannels = 10;
  /// Spatial size after each block for a square input of `size`.
  static std::vector<int> shape_schedule(int size);

 private:
  std::vector<int> w_, b_;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
Tensor init_uniform(std::vector<int> shape, int fan_in, std::mt19937_64& rng);

}  // namespace dnbp
