#pragma once

#include <deque>
#include <functional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dnbp/tensor.hpp"

namespace dnbp {

/// A named trainable tensor. `group` identifies the potential network the
/// tensor belongs to (e.g. "unary1"); stop-flags act on groups.
struct Param {
  std::string name;
  std::string group;
  Tensor value;
};

/// Ordered collection of parameters. Order is stable and defines the
/// checkpoint layout.
class ParamStore {
 public:
  int add(std::string name, std::string group, Tensor value);
  int size() const { return static_cast<int>(params_.size()); }
  Param& operator[](int id) { return params_[id]; }
  const Param& operator[](int id) const { return params_[id]; }
  int find(std::string_view name) const;  // -1 when absent
  std::vector<int> group_ids(std::string_view group) const;
  std::vector<std::string> groups() const;
  std::size_t num_values() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Param> params_;
  std::unordered_map<std::string, int> index_;
};

/// Per-parameter gradients returned by Tape::backward, indexed like the
/// ParamStore. Entries for parameters that were never used, or only used
/// with their stop-flag set, are zero tensors of the parameter's shape.
struct Gradients {
  std::vector<Tensor> grads;

  Tensor& operator[](int id) { return grads[id]; }
  const Tensor& operator[](int id) const { return grads[id]; }
  void accumulate(const Gradients& other);
  double global_norm() const;
  void scale(float f);
  bool all_finite() const;
};

Gradients zero_gradients(const ParamStore& params);

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Records a forward computation over dense tensors and replays it in
/// reverse to produce parameter gradients.
///
/// Every op runs eagerly when recorded. A parameter use recorded while its
/// group is stopped (see set_stop) contributes nothing to that parameter's
/// gradient, but gradients still flow through the use to its other inputs.
class Tape {
 public:
  explicit Tape(const ParamStore* params = nullptr, bool grad_enabled = true);

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  // Leaves
  Var constant(Tensor t, std::string_view label = "input");
  /// Like constant, but gradients reaching it are kept (see grad).
  Var input(Tensor t, std::string_view label = "input");
  Var param(int id);
  Var param(std::string_view name);
  Var detach(Var x);

  void set_stop(const std::string& group, bool stopped);
  bool stopped(const std::string& group) const { return stop_groups_.contains(group); }

  // Layers
  Var linear(Var x, Var w, Var b);  // x [N,in] w [in,out] b [1,out]
  Var conv3x3(Var x, Var w, Var b, int stride, int pad);  // x [H,W,C] w [9C,O] b [1,O]
  Var maxpool2x2(Var x);  // [H,W,C], stride 2, ceil mode
  Var relu(Var x);
  Var sigmoid_scaled(Var x, float lo, float hi);

  // Shape plumbing
  Var reshape(Var x, std::vector<int> shape);
  Var concat_cols(Var a, Var b);
  Var concat_rows(std::span<const Var> parts);
  Var broadcast_rows(Var row, int n);  // [1,C] -> [n,C]
  Var repeat_rows(Var x, int k);       // each row repeated k times consecutively
  Var group_mean(Var x, int k);        // [N*k,C] -> [N,C], mean of consecutive groups

  // Elementwise (identical shapes unless noted)
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var scale(Var x, float s);
  Var log(Var x);
  Var exp(Var x);

  // Reductions and small linear algebra
  Var sum(Var x);      // -> [1]
  Var product(Var x);  // -> [1]
  Var matmul(Var a, Var b);  // [N,K] x [K,M]
  Var normalize(Var w);      // w / sum(w)

  /// Isotropic 2-D Gaussian density N(point; mu_i, sigma^2 I) per row of
  /// mu [N,2]; returns [N,1].
  Var gaussian_density(Var mu, float px, float py, float sigma);
  /// log(sum_i w_i N(point; mu_i, sigma^2 I)), computed stably in double.
  /// w [N,1] non-negative, mu [N,2]; returns [1].
  Var log_gaussian_mixture(Var w, Var mu, float px, float py, float sigma);

  const Tensor& value(Var v) const;
  int size() const { return static_cast<int>(nodes_.size()); }
  bool grad_enabled() const { return grad_enabled_; }

  /// Reverse pass from `out` seeded with `seed` (same shape as out).
  Gradients backward(Var out, const Tensor& seed);
  Gradients backward(Var out);  // seed of ones; out must be a scalar
  /// Gradient of `out` w.r.t. an arbitrary recorded node, after backward.
  Tensor grad(Var v) const;

  /// Re-executes every recorded op in order against the current parameter
  /// values and the recorded constants.
  void replay();

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    std::vector<int> in;
    int param = -1;
    bool stopped = false;
    bool needs = false;
    std::function<void(Tape&, int)> fwd;
    std::function<void(Tape&, int)> bwd;
  };

  Var record(std::string op, std::vector<int> in, std::function<void(Tape&, int)> fwd,
             std::function<void(Tape&, int)> bwd);
  Node& node(int id) { return nodes_[id]; }
  const Node& node(int id) const { return nodes_[id]; }
  Tensor& val(int id) { return nodes_[id].value; }
  Tensor& grd(int id);
  std::string describe(Var v) const;
  void check_same(const char* op, Var a, Var b) const;

  const ParamStore* params_;
  bool grad_enabled_;
  bool backward_done_ = false;
  std::deque<Node> nodes_;  // stable references for value()
  std::set<std::string> stop_groups_;
};

}  // namespace dnbp
