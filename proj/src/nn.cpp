#include "dnbp/nn.hpp"

#include <cmath>

#include "dnbp/error.hpp"

namespace dnbp {

Tensor init_uniform(std::vector<int> shape, int fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (float& v : t.data) v = dist(rng);
  return t;
}

Mlp::Mlp(ParamStore& store, const std::string& prefix, const std::string& group, int in, std::vector<int> widths,
         Head head, std::mt19937_64& rng)
    : in_(in), widths_(std::move(widths)), head_(head) {
  int fan_in = in;
  for (std::size_t l = 0; l < widths_.size(); ++l) {
    const int out = widths_[l];
    const std::string name = prefix + ".fc" + std::to_string(l);
    w_.push_back(store.add(name + ".w", group, init_uniform({fan_in, out}, fan_in, rng)));
    b_.push_back(store.add(name + ".b", group, init_uniform({1, out}, fan_in, rng)));
    fan_in = out;
  }
}

Var Mlp::forward(Tape& tape, Var x) const {
  Var h = x;
  for (std::size_t l = 0; l < w_.size(); ++l) {
    h = tape.linear(h, tape.param(w_[l]), tape.param(b_[l]));
    if (l + 1 < w_.size()) h = tape.relu(h);
  }
  if (head_ == Head::ScaledSigmoid) h = tape.sigmoid_scaled(h, kDensityFloor, kDensityCeil);
  return h;
}

ConvEncoder::ConvEncoder(ParamStore& store, const std::string& prefix, const std::string& group,
                         std::mt19937_64& rng) {
  int in_ch = 3;
  for (int k = 0; k < kBlocks; ++k) {
    const std::string name = prefix + ".conv" + std::to_string(k);
    const int fan_in = 9 * in_ch;
    w_.push_back(store.add(name + ".w", group, init_uniform({fan_in, kChannels}, fan_in, rng)));
    b_.push_back(store.add(name + ".b", group, init_uniform({1, kChannels}, fan_in, rng)));
    in_ch = kChannels;
  }
}

std::vector<int> ConvEncoder::shape_schedule(int size) {
  std::vector<int> out;
  for (int k = 0; k < kBlocks; ++k) {
    size = (size + 2 - 3) / 2 + 1;
    if (size > 1) size = (size + 1) / 2;
    out.push_back(size);
  }
  return out;
}

Var ConvEncoder::forward(Tape& tape, Var image) const {
  const Tensor& iv = tape.value(image);
  if (iv.shape != std::vector<int>{kImageSize, kImageSize, 3})
    throw ShapeError("encoder expects a [128,128,3] image, got " + shape_str(iv.shape));
  Var h = image;
  for (std::size_t k = 0; k < w_.size(); ++k) {
    h = tape.relu(tape.conv3x3(h, tape.param(w_[k]), tape.param(b_[k]), 2, 1));
    const auto& s = tape.value(h).shape;
    if (s[0] > 1 || s[1] > 1) h = tape.maxpool2x2(h);
  }
  const auto& s = tape.value(h).shape;
  return tape.reshape(h, {1, s[0] * s[1] * s[2]});
}

}  // namespace dnbp
