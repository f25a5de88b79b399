#include "dnbp/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

#include "dnbp/error.hpp"

namespace dnbp {

// ---------------------------------------------------------------------------
// ParamStore / Gradients

int ParamStore::add(std::string name, std::string group, Tensor value) {
  if (index_.contains(name)) throw Error("duplicate parameter name '" + name + "'");
  int id = size();
  index_.emplace(name, id);
  params_.push_back(Param{std::move(name), std::move(group), std::move(value)});
  return id;
}

int ParamStore::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? -1 : it->second;
}

std::vector<int> ParamStore::group_ids(std::string_view group) const {
  std::vector<int> ids;
  for (int i = 0; i < size(); ++i)
    if (params_[i].group == group) ids.push_back(i);
  return ids;
}

std::vector<std::string> ParamStore::groups() const {
  std::vector<std::string> out;
  for (const auto& p : params_)
    if (std::find(out.begin(), out.end(), p.group) == out.end()) out.push_back(p.group);
  return out;
}

std::size_t ParamStore::num_values() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

Gradients zero_gradients(const ParamStore& params) {
  Gradients g;
  g.grads.reserve(params.size());
  for (const auto& p : params) g.grads.emplace_back(p.value.shape, 0.0f);
  return g;
}

void Gradients::accumulate(const Gradients& other) {
  if (grads.empty()) {
    grads = other.grads;
    return;
  }
  if (other.grads.size() != grads.size()) throw ShapeError("gradient sets of different size");
  for (std::size_t i = 0; i < grads.size(); ++i) {
    auto& a = grads[i].data;
    const auto& b = other.grads[i].data;
    if (a.size() != b.size()) throw ShapeError("gradient shape mismatch for parameter " + std::to_string(i));
    for (std::size_t k = 0; k < a.size(); ++k) a[k] += b[k];
  }
}

double Gradients::global_norm() const {
  double s = 0.0;
  for (const auto& g : grads)
    for (float v : g.data) s += static_cast<double>(v) * v;
  return std::sqrt(s);
}

void Gradients::scale(float f) {
  for (auto& g : grads)
    for (float& v : g.data) v *= f;
}

bool Gradients::all_finite() const {
  return std::all_of(grads.begin(), grads.end(), [](const Tensor& t) { return t.all_finite(); });
}

// ---------------------------------------------------------------------------
// Tape core

Tape::Tape(const ParamStore* params, bool grad_enabled) : params_(params), grad_enabled_(grad_enabled) {}

Var Tape::record(std::string op, std::vector<int> in, std::function<void(Tape&, int)> fwd,
                 std::function<void(Tape&, int)> bwd) {
  for (int i : in)
    if (i < 0 || i >= size()) throw Error(op + ": input variable is not recorded on this tape");
  int id = size();
  Node n;
  n.op = std::move(op);
  n.in = std::move(in);
  for (int i : n.in) n.needs = n.needs || nodes_[i].needs;
  n.fwd = std::move(fwd);
  if (grad_enabled_) n.bwd = std::move(bwd);
  nodes_.push_back(std::move(n));
  nodes_[id].fwd(*this, id);
  return Var{id};
}

Tensor& Tape::grd(int id) {
  Node& n = nodes_[id];
  if (n.grad.data.empty()) n.grad = Tensor(n.value.shape, 0.0f);
  return n.grad;
}

const Tensor& Tape::value(Var v) const {
  if (v.id < 0 || v.id >= size()) throw Error("value(): variable is not recorded on this tape");
  return nodes_[v.id].value;
}

std::string Tape::describe(Var v) const {
  const Node& n = nodes_[v.id];
  std::string s = n.op;
  if (n.param >= 0 && params_) s += " '" + (*params_)[n.param].name + "'";
  return s + " " + shape_str(n.value.shape);
}

void Tape::check_same(const char* op, Var a, Var b) const {
  if (value(a).shape != value(b).shape)
    throw ShapeError(std::string(op) + ": shape mismatch between " + describe(a) + " and " + describe(b));
}

void Tape::set_stop(const std::string& group, bool stopped) {
  if (stopped)
    stop_groups_.insert(group);
  else
    stop_groups_.erase(group);
}

Var Tape::constant(Tensor t, std::string_view label) {
  if (!t.all_finite()) {
    auto it = std::find_if(t.data.begin(), t.data.end(), [](float v) { return !std::isfinite(v); });
    throw NumericError("non-finite value in input '" + std::string(label) + "' at flat index " +
                       std::to_string(it - t.data.begin()) + " (shape " + shape_str(t.shape) + ")");
  }
  int id = size();
  Node n;
  n.op = "constant";
  n.value = std::move(t);
  nodes_.push_back(std::move(n));
  return Var{id};
}

Var Tape::input(Tensor t, std::string_view label) {
  Var v = constant(std::move(t), label);
  nodes_[v.id].needs = grad_enabled_;
  return v;
}

Var Tape::param(int pid) {
  if (!params_ || pid < 0 || pid >= params_->size()) throw Error("param(): unknown parameter id");
  int id = size();
  Node n;
  n.op = "param";
  n.param = pid;
  n.stopped = stop_groups_.contains((*params_)[pid].group);
  n.needs = grad_enabled_ && !n.stopped;
  n.value = (*params_)[pid].value;
  n.fwd = [](Tape& t, int self) { t.val(self) = (*t.params_)[t.node(self).param].value; };
  nodes_.push_back(std::move(n));
  return Var{id};
}

Var Tape::param(std::string_view name) {
  int pid = params_ ? params_->find(name) : -1;
  if (pid < 0) throw Error("unknown parameter '" + std::string(name) + "'");
  return param(pid);
}

Var Tape::detach(Var x) {
  const Tensor& v = value(x);
  int id = size();
  Node n;
  n.op = "detach";
  n.in = {x.id};
  n.value = v;
  n.fwd = [](Tape& t, int self) { t.val(self) = t.val(t.node(self).in[0]); };
  nodes_.push_back(std::move(n));
  return Var{id};
}

Gradients Tape::backward(Var out) {
  const Tensor& v = value(out);
  if (v.size() != 1) throw ShapeError("backward(): implicit seed requires a scalar output, got " + describe(out));
  return backward(out, Tensor(v.shape, 1.0f));
}

Gradients Tape::backward(Var out, const Tensor& seed) {
  if (!grad_enabled_) throw Error("backward(): tape was recorded without gradients");
  if (nodes_.empty()) throw Error("backward(): no forward pass recorded on this tape");
  const Tensor& ov = value(out);
  if (seed.size() != ov.size())
    throw ShapeError("backward(): seed shape " + shape_str(seed.shape) + " does not match output " + describe(out));
  for (auto& n : nodes_) n.grad = Tensor();
  Gradients result;
  if (params_) result = zero_gradients(*params_);
  grd(out.id).data = seed.data;
  for (int id = out.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.needs || n.grad.data.empty()) continue;
    if (n.param >= 0) {
      if (!n.stopped) {
        auto& acc = result[n.param].data;
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += n.grad.data[k];
      }
      continue;
    }
    if (n.bwd) n.bwd(*this, id);
  }
  backward_done_ = true;
  return result;
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (n.grad.data.empty()) return Tensor(n.value.shape, 0.0f);
  return n.grad;
}

void Tape::replay() {
  for (int id = 0; id < size(); ++id)
    if (nodes_[id].fwd) nodes_[id].fwd(*this, id);
  backward_done_ = false;
}

// ---------------------------------------------------------------------------
// Layers

Var Tape::linear(Var x, Var w, Var b) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  const Tensor& bv = value(b);
  if (wv.shape.size() != 2 || xv.cols() != wv.shape[0] || static_cast<int>(bv.size()) != wv.shape[1])
    throw ShapeError("linear layer " + describe(w) + ": input " + describe(x) + ", bias " + describe(b));
  return record(
      "linear", {x.id, w.id, b.id},
      [](Tape& t, int self) {
        const auto& in = t.node(self).in;
        const Tensor& X = t.val(in[0]);
        const Tensor& W = t.val(in[1]);
        const Tensor& B = t.val(in[2]);
        const int n = X.rows(), k = W.shape[0], m = W.shape[1];
        Tensor& Y = t.val(self);
        Y = Tensor({n, m});
        for (int r = 0; r < n; ++r) {
          float* y = &Y.data[static_cast<std::size_t>(r) * m];
          const float* xr = &X.data[static_cast<std::size_t>(r) * k];
          for (int o = 0; o < m; ++o) y[o] = B.data[o];
          for (int i = 0; i < k; ++i) {
            const float xi = xr[i];
            const float* wr = &W.data[static_cast<std::size_t>(i) * m];
            for (int o = 0; o < m; ++o) y[o] += xi * wr[o];
          }
        }
      },
      [](Tape& t, int self) {
        const auto& in = t.node(self).in;
        const Tensor& X = t.val(in[0]);
        const Tensor& W = t.val(in[1]);
        const Tensor& G = t.node(self).grad;
        const int n = X.rows(), k = W.shape[0], m = W.shape[1];
        if (t.node(in[0]).needs) {
          std::vector<float> wt(static_cast<std::size_t>(k) * m);
          for (int i = 0; i < k; ++i)
            for (int o = 0; o < m; ++o) wt[static_cast<std::size_t>(o) * k + i] = W.data[static_cast<std::size_t>(i) * m + o];
          Tensor& GX = t.grd(in[0]);
          for (int r = 0; r < n; ++r) {
            float* gx = &GX.data[static_cast<std::size_t>(r) * k];
            const float* g = &G.data[static_cast<std::size_t>(r) * m];
            for (int o = 0; o < m; ++o) {
              const float go = g[o];
              const float* wr = &wt[static_cast<std::size_t>(o) * k];
              for (int i = 0; i < k; ++i) gx[i] += go * wr[i];
            }
          }
        }
        if (t.node(in[1]).needs) {
          Tensor& GW = t.grd(in[1]);
          for (int r = 0; r < n; ++r) {
            const float* xr = &X.data[static_cast<std::size_t>(r) * k];
            const float* g = &G.data[static_cast<std::size_t>(r) * m];
            for (int i = 0; i < k; ++i) {
              const float xi = xr[i];
              float* gw = &GW.data[static_cast<std::size_t>(i) * m];
              for (int o = 0; o < m; ++o) gw[o] += xi * g[o];
            }
          }
        }
        if (t.node(in[2]).needs) {
          Tensor& GB = t.grd(in[2]);
          for (int r = 0; r < n; ++r)
            for (int o = 0; o < m; ++o) GB.data[o] += G.data[static_cast<std::size_t>(r) * m + o];
        }
      });
}

namespace {
int conv_out(int n, int stride, int pad) { return (n + 2 * pad - 3) / stride + 1; }
}  // namespace

Var Tape::conv3x3(Var x, Var w, Var b, int stride, int pad) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(w);
  const Tensor& bv = value(b);
  if (xv.shape.size() != 3 || wv.shape.size() != 2 || wv.shape[0] != 9 * xv.shape[2] ||
      static_cast<int>(bv.size()) != wv.shape[1])
    throw ShapeError("conv3x3 layer " + describe(w) + ": input " + describe(x) + ", bias " + describe(b));
  if (stride < 1 || pad < 0 || conv_out(xv.shape[0], stride, pad) < 1 || conv_out(xv.shape[1], stride, pad) < 1)
    throw ShapeError("conv3x3 layer " + describe(w) + ": empty output for input " + describe(x));
  return record(
      "conv3x3", {x.id, w.id, b.id},
      [stride, pad](Tape& t, int self) {
        const auto& in = t.node(self).in;
        const Tensor& X = t.val(in[0]);
        const Tensor& W = t.val(in[1]);
        const Tensor& B = t.val(in[2]);
        const int H = X.shape[0], Wd = X.shape[1], C = X.shape[2], O = W.shape[1];
        const int Ho = conv_out(H, stride, pad), Wo = conv_out(Wd, stride, pad);
        Tensor& Y = t.val(self);
        Y = Tensor({Ho, Wo, O});
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            float* y = &Y.data[(static_cast<std::size_t>(oy) * Wo + ox) * O];
            for (int o = 0; o < O; ++o) y[o] = B.data[o];
            for (int ky = 0; ky < 3; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < 3; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= Wd) continue;
                const float* xp = &X.data[(static_cast<std::size_t>(iy) * Wd + ix) * C];
                const float* wk = &W.data[static_cast<std::size_t>((ky * 3 + kx) * C) * O];
                for (int c = 0; c < C; ++c) {
                  const float xc = xp[c];
                  const float* wr = wk + static_cast<std::size_t>(c) * O;
                  for (int o = 0; o < O; ++o) y[o] += xc * wr[o];
                }
              }
            }
          }
      },
      [stride, pad](Tape& t, int self) {
        const auto& in = t.node(self).in;
        const Tensor& X = t.val(in[0]);
        const Tensor& W = t.val(in[1]);
        const Tensor& G = t.node(self).grad;
        const int H = X.shape[0], Wd = X.shape[1], C = X.shape[2], O = W.shape[1];
        const int Ho = G.shape[0], Wo = G.shape[1];
        const bool need_x = t.node(in[0]).needs, need_w = t.node(in[1]).needs;
        Tensor* GX = need_x ? &t.grd(in[0]) : nullptr;
        Tensor* GW = need_w ? &t.grd(in[1]) : nullptr;
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox) {
            const float* g = &G.data[(static_cast<std::size_t>(oy) * Wo + ox) * O];
            for (int ky = 0; ky < 3; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < 3; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= Wd) continue;
                const std::size_t xoff = (static_cast<std::size_t>(iy) * Wd + ix) * C;
                const std::size_t woff = static_cast<std::size_t>((ky * 3 + kx) * C) * O;
                for (int c = 0; c < C; ++c) {
                  const float* wr = &W.data[woff + static_cast<std::size_t>(c) * O];
                  if (GX) {
                    float acc = 0.0f;
                    for (int o = 0; o < O; ++o) acc += g[o] * wr[o];
                    GX->data[xoff + c] += acc;
                  }
                  if (GW) {
                    const float xc = X.data[xoff + c];
                    float* gw = &GW->data[woff + static_cast<std::size_t>(c) * O];
                    for (int o = 0; o < O; ++o) gw[o] += xc * g[o];
                  }
                }
              }
            }
          }
        if (t.node(in[2]).needs) {
          Tensor& GB = t.grd(in[2]);
          for (std::size_t p = 0; p < static_cast<std::size_t>(Ho) * Wo; ++p)
            for (int o = 0; o < O; ++o) GB.data[o] += G.data[p * O + o];
        }
      });
}

Var Tape::maxpool2x2(Var x) {
  const Tensor& xv = value(x);
  if (xv.shape.size() != 3) throw ShapeError("maxpool2x2: expected [H,W,C] input, got " + describe(x));
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  return record(
      "maxpool2x2", {x.id},
      [argmax](Tape& t, int self) {
        const Tensor& X = t.val(t.node(self).in[0]);
        const int H = X.shape[0], W = X.shape[1], C = X.shape[2];
        const int Ho = (H + 1) / 2, Wo = (W + 1) / 2;
        Tensor& Y = t.val(self);
        Y = Tensor({Ho, Wo, C});
        argmax->assign(Y.size(), 0);
        for (int oy = 0; oy < Ho; ++oy)
          for (int ox = 0; ox < Wo; ++ox)
            for (int c = 0; c < C; ++c) {
              float best = -std::numeric_limits<float>::infinity();
              std::size_t bi = 0;
              for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                  const int iy = 2 * oy + dy, ix = 2 * ox + dx;
                  if (iy >= H || ix >= W) continue;
                  const std::size_t k = (static_cast<std::size_t>(iy) * W + ix) * C + c;
                  if (X.data[k] > best) {
                    best = X.data[k];
                    bi = k;
                  }
                }
              const std::size_t o = (static_cast<std::size_t>(oy) * Wo + ox) * C + c;
              Y.data[o] = best;
              (*argmax)[o] = bi;
            }
      },
      [argmax](Tape& t, int self) {
        const int in = t.node(self).in[0];
        if (!t.node(in).needs) return;
        Tensor& GX = t.grd(in);
        const Tensor& G = t.node(self).grad;
        for (std::size_t o = 0; o < G.size(); ++o) GX.data[(*argmax)[o]] += G.data[o];
      });
}

Var Tape::relu(Var x) {
  value(x);
  return record(
      "relu", {x.id},
      [](Tape& t, int self) {
        const Tensor& X = t.val(t.node(self).in[0]);
        Tensor& Y = t.val(self);
        Y = X;
        for (float& v : Y.data) v = v > 0.0f ? v : 0.0f;
      },
      [](Tape& t, int self) {
        const int in = t.node(self).in[0];
        if (!t.node(in).needs) return;
        const Tensor& X = t.val(in);
        const Tensor& G = t.node(self).grad;
        Tensor& GX = t.grd(in);
        for (std::size_t k = 0; k < G.size(); ++k)
          if (X.data[k] > 0.0f) GX.data[k] += G.data[k];
      });
}

Var Tape::sigmoid_scaled(Var x, float lo, float hi) {
  value(x);
  if (!(hi > lo)) throw Error("sigmoid_scaled: empty output interval");
  return record(
      "sigmoid_scaled", {x.id},
      [lo, hi](Tape& t, int self) {
        const Tensor& X = t.val(t.node(self).in[0]);
        Tensor& Y = t.val(self);
        Y = X;
        for (float& v : Y.data) {
          const float s = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v)) : std::exp(v) / (1.0f + std::exp(v));
          v = std::clamp(lo + (hi - lo) * s, lo, hi);
        }
      },
      [lo, hi](Tape& t, int self) {
        const int in = t.node(self).in[0];
        if (!t.node(in).needs) return;
        const Tensor& Y = t.val(self);
        const Tensor& G = t.node(self).grad;
        Tensor& GX = t.grd(in);
        for (std::size_t k = 0; k < G.size(); ++k) {
          const float s = (Y.data[k] - lo) / (hi - lo);
          GX.data[k] += G.data[k] * (hi - lo) * s * (1.0f - s);
        }
      });
}

// ---------------------------------------------------------------------------
// Shape plumbing

Var Tape::reshape(Var x, std::vector<int> shape) {
  if (shape_size(shape) != value(x).size())
    throw ShapeError("reshape: cannot view " + describe(x) + " as " + shape_str(shape));
  return record(
      "reshape", {x.id},
      [shape](Tape& t, int self) { t.val(self) = Tensor(shape, t.val(t.node(self).in[0]).data); },
      [](Tape& t, int self) {
        const int in = t.node(self).in[0];
        if (!t.node(in).needs) return;
        Tensor& GX = t.grd(in);
        const Tensor& G = t.node(self).grad;
        for (std::size_t k = 0; k < G.size(); ++k) GX.data[k] += G.data[k];
      });
}

Var Tape::concat_cols(Var a, Var b) {
  if (value(a).rows() != value(b).rows())
    throw ShapeError("concat_cols: row mismatch between " + describe(a) + " and " + describe(b));
  return record(
      "concat_cols", {a.id, b.id},
      [](Tape& t, int self) {
        const Tensor& A = t.val(t.node(self).in[0]);
        const Tensor& B = t.val(t.node(self).in[1]);
        const int n = A.rows(), ca = A.cols(), cb = B.cols();
        Tensor& Y = t.val(self);
        Y = Tensor({n, ca + cb});
        for (int r = 0; r < n; ++r) {
          std::copy_n(&A.data[static_cast<std::size_t>(r) * ca], ca, &Y.data[static_cast<std::size_t>(r) * (ca + cb)]);
          std::copy_n(&B.data[static_cast<std::size_t>(r) * cb], cb,
                      &Y.data[static_cast<std::size_t>(r) * (ca + cb) + ca]);
        }
      },
      [](Tape& t, int self) {
        const int ia = t.node(self).in[0], ib = t.node(self).in[1];
        const Tensor& G = t.node(self).grad;
        const int n = t.val(ia).rows(), ca = t.val(ia).cols(), cb = t.val(ib).cols();
        if (t.node(ia).needs) {
          Tensor& GA = t.grd(ia);
          for (int r = 0; r < n; ++r)
            for (int c = 0; c < ca; ++c) GA.data[static_cast<std::size_t>(r) * ca + c] += G.at(r, c);
        }
        if (t.node(ib).needs) {
          Tensor& GB = t.grd(ib);
          for (int r = 0; r < n; ++r)
            for (int c = 0; c < cb; ++c) GB.data[static_cast<std::size_t>(r) * cb + c] += G.at(r, ca + c);
        }
      });
}

Var Tape::concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  std::vector<int> in;
  const int c = value(parts[0]).cols();
  for (Var p : parts) {
    if (value(p).cols() != c)
      throw ShapeError("concat_rows: column mismatch between " + describe(parts[0]) + " and " + describe(p));
    in.push_back(p.id);
  }
  return record(
      "concat_rows", std::move(in),
      [](Tape& t, int self) {
        const auto& in = t.node(self).in;
        int n = 0;
        const int c = t.val(in[0]).cols();
        for (int i : in) n += t.val(i).rows();
        Tensor& Y = t.val(self);
        Y = Tensor({n, c});
        std::size_t off = 0;
        for (int i : in) {
          std::copy(t.val(i).data.begin(), t.val(i).data.end(), Y.data.begin() + static_cast<std::ptrdiff_t>(off));
          off += t.val(i).size();
        }
      },
      [](Tape& t, int self) {
        const auto& in = t.node(self).in;
        const Tensor& G = t.node(self).grad;
        std::size_t off = 0;
        for (int i : in) {
          const std::size_t sz = t.val(i).size();
          if (t.node(i).needs) {
            Tensor& GI = t.grd(i);
            for (std::size_t k = 0; k < sz; ++k) GI.data[k] += G.data[off + k];
          }
          off += sz;
        }
      });
}

Var Tape::broadcast_rows(Var row, int n) {
  if (value(row).rows() != 1 || n < 1) throw ShapeError("broadcast_rows: expected a single row, got " + describe(row));
  return record(
      "broadcast_rows", {row.id},
      [n](Tape& t, int self) {
        const Tensor& X = t.val(t.node(self).in[0]);
        const int c = X.cols();
        Tensor& Y = t.val(self);
        Y = Tensor({n, c});
        for (int r = 0; r < n; ++r) std::copy(X.data.begin(), X.data.end(), Y.data.begin() + static_cast<std::ptrdiff_t>(r) * c);
      },
      [n](Tape& t, int self) {
        const int in = t.node(self).in[0];
        if (!t.node(in).needs) return;
        Tensor& GX = t.grd(in);
        const Tensor& G = t.node(self).grad;
        const int c = GX.cols();
        for (int r = 0; r < n; ++r)
          for (int k = 0; k < c; ++k) GX.data[k] += G.data[static_cast<std::size_t>(r) * c + k];
      });
}

Var Tape::repeat_rows(Var x, int k) {
  if (k < 1) throw ShapeError("repeat_rows: repeat count must be positive");
  value(x);
  return record(
      "repeat_rows", {x.id},
      [k](Tape& t, int self) {
        const Tensor& X = t.val(t.node(self).in[0]);
        const int n = X.rows(), c = X.cols();
        Tensor& Y = t.val(self);
        Y = Tensor({n * k, c});
        for (int r = 0; r < n; ++r)
          for (int j = 0; j < k; ++j)
            std::copy_n(&X.data[static_cast<std::size_t>(r) * c], c, &Y.data[(static_cast<std::size_t>(r) * k + j) * c]);
      },
      [k](Tape& t, int self) {
        const int in = t.node(self).in[0];
        if (!t.node(in).needs) return;
        Tensor& GX = t.grd(in);
        const Tensor& G = t.node(self).grad;
        const int n = GX.rows(), c = GX.cols();
        for (int r = 0; r < n; ++r)
          for (int j = 0; j < k; ++j)
            for (int q = 0; q < c; ++q)
              GX.data[static_cast<std::size_t>(r) * c + q] += G.data[(static_cast<std::size_t>(r) * k + j) * c + q];
      });
}

Var Tape::group_mean(Var x, int k) {
  if (k < 1 || value(x).rows() % k != 0)
    throw ShapeError("group_mean: " + describe(x) + " rows not divisible by " + std::to_string(k));
  return record(
      "group_mean", {x.id},
      [k](Tape& t, int self) {
        const Tensor& X = t.val(t.node(self).in[0]);
        const int n = X.rows() / k, c = X.cols();
        Tensor& Y = t.val(self);
        Y = Tensor({n, c});
        for (int r = 0; r < n; ++r)
          for (int j = 0; j < k; ++j)
            for (int q = 0; q < c; ++q)
              Y.data[static_cast<std::size_t>(r) * c + q] += X.data[(static_cast<std::size_t>(r) * k + j) * c + q];
        for (float& v : Y.data) v /= static_cast<float>(k);
      },
      [k](Tape& t, int self) {
        const int in = t.node(self).in[0];
        if (!t.node(in).needs) return;
        Tensor& GX = t.grd(in);
        const Tensor& G = t.node(self).grad;
        const int n = G.rows(), c = G.cols();
        const float inv = 1.0f / static_cast<float>(k);
        for (int r = 0; r < n; ++r)
          for (int j = 0; j < k; ++j)
            for (int q = 0; q < c; ++q)
              GX.data[(static_cast<std::size_t>(r) * k + j) * c + q] += G.data[static_cast<std::size_t>(r) * c + q] * inv;
      });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <class F>
void map2(const Tensor& a, const Tensor& b, Tensor& y, F f) {
  y = a;
  for (std::size_t k = 0; k < y.size(); ++k) y.data[k] = f(a.data[k], b.data[k]);
}

}  // namespace

Var Tape::add(Var a, Var b) {
  check_same("add", a, b);
  return record(
      "add", {a.id, b.id},
      [](Tape& t, int self) {
        map2(t.val(t.node(self).in[0]), t.val(t.node(self).in[1]), t.val(self), [](float p, float q) { return p + q; });
      },
      [](Tape& t, int self) {
        const Tensor& G = t.node(self).grad;
        for (int i : t.node(self).in) {
          if (!t.node(i).needs) continue;
          Tensor& GI = t.grd(i);
          for (std::size_t k = 0; k < G.size(); ++k) GI.data[k] += G.data[k];
        }
      });
}

Var Tape::sub(Var a, Var b) {
  check_same("sub", a, b);
  return record(
      "sub", {a.id, b.id},
      [](Tape& t, int self) {
        map2(t.val(t.node(self).in[0]), t.val(t.node(self).in[1]), t.val(self), [](float p, float q) { return p - q; });
      },
      [](Tape& t, int self) {
        const Tensor& G = t.node(self).grad;
        const int ia = t.node(self).in[0], ib = t.node(self).in[1];
        if (t.node(ia).needs) {
          Tensor& GA = t.grd(ia);
          for (std::size_t k = 0; k < G.size(); ++k) GA.data[k] += G.data[k];
        }
        if (t.node(ib).needs) {
          Tensor& GB = t.grd(ib);
          for (std::size_t k = 0; k < G.size(); ++k) GB.data[k] -= G.data[k];
        }
      });
}

Var Tape::mul(Var a, Var b) {
  check_same("mul", a, b);
  return record(
      "mul", {a.id, b.id},
      [](Tape& t, int self) {
        map2(t.val(t.node(self).in[0]), t.val(t.node(self).in[1]), t.val(self), [](float p, float q) { return p * q; });
      },
      [](Tape& t, int self) {
        const Tensor& G = t.node(self).grad;
        const int ia = t.node(self).in[0], ib = t.node(self).in[1];
        const Tensor& A = t.val(ia);
        const Tensor& B = t.val(ib);
        if (t.node(ia).needs) {
          Tensor& GA = t.grd(ia);
          for (std::size_t k = 0; k < G.size(); ++k) GA.data[k] += G.data[k] * B.data[k];
        }
        if (t.node(ib).needs) {
          Tensor& GB = t.grd(ib);
          for (std::size_t k = 0; k < G.size(); ++k) GB.data[k] += G.data[k] * A.data[k];
        }
      });
}

Var Tape::div(Var a, Var b) {
  check_same("div", a, b);
  return record(
      "div", {a.id, b.id},
      [](Tape& t, int self) {
        map2(t.val(t.node(self).in[0]), t.val(t.node(self).in[1]), t.val(self), [](float p, float q) { return p / q; });
      },
      [](Tape& t, int self) {
        const Tensor& G = t.node(self).grad;
        const int ia = t.node(self).in[0], ib = t.node(self).in[1];
        const Tensor& B = t.val(ib);
        const Tensor& Y = t.val(self);
        if (t.node(ia).needs) {
          Tensor& GA = t.grd(ia);
          for (std::size_t k = 0; k < G.size(); ++k) GA.data[k] += G.data[k] / B.data[k];
        }
        if (t.node(ib).needs) {
          Tensor& GB = t.grd(ib);
          for (std::size_t k = 0; k < G.size(); ++k) GB.data[k] -= G.data[k] * Y.data[k] / B.data[k];
        }
      });
}

Var Tape::scale(Var x, float s) {
  value(x);
  return record(
      "scale", {x.id},
      [s](Tape& t, int self) {
        Tensor& Y = t.val(self);
        Y = t.val(t.node(self).in[0]);
        for (float& v : Y.data) v *= s;
      },
      [s](Tape& t, int self) {
        const int in = t.node(self).in[0];
        if (!t.node(in).needs) return;
        Tensor& GX = t.grd(in);
        const Tensor& G = t.node(self).grad;
        for (std::size_t k = 0; k < G.size(); ++k) GX.data[k] += G.data[k] * s;
      });
}

Var Tape::log(Var x) {
  for (float v : value(x).data)
    if (!(v > 0.0f)) throw NumericError("log: non-positive input in " + describe(x));
  return record(
      "log", {x.id},
      [](Tape& t, int self) {
        Tensor& Y = t.val(self);
        Y = t.val(t.node(self).in[0]);
        for (float& v : Y.data) v = std::log(v);
      },
      [](Tape& t, int self) {
        const int in = t.node(self).in[0];
        if (!t.node(in).needs) return;
        const Tensor& X = t.val(in);
        Tensor& GX = t.grd(in);
        const Tensor& G = t.node(self).grad;
        for (std::size_t k = 0; k < G.size(); ++k) GX.data[k] += G.data[k] / X.data[k];
      });
}

Var Tape::exp(Var x) {
  value(x);
  return record(
      "exp", {x.id},
      [](Tape& t, int self) {
        Tensor& Y = t.val(self);
        Y = t.val(t.node(self).in[0]);
        for (float& v : Y.data) v = std::exp(v);
      },
      [](Tape& t, int self) {
        const int in = t.node(self).in[0];
        if (!t.node(in).needs) return;
        const Tensor& Y = t.val(self);
        Tensor& GX = t.grd(in);
        const Tensor& G = t.node(self).grad;
        for (std::size_t k = 0; k < G.size(); ++k) GX.data[k] += G.data[k] * Y.data[k];
      });
}

// ---------------------------------------------------------------------------
// Reductions

Var Tape::sum(Var x) {
  value(x);
  return record(
      "sum", {x.id},
      [](Tape& t, int self) {
        double s = 0.0;
        for (float v : t.val(t.node(self).in[0]).data) s += v;
        t.val(self) = Tensor::scalar(static_cast<float>(s));
      },
      [](Tape& t, int self) {
        const int in = t.node(self).in[0];
        if (!t.node(in).needs) return;
        const float g = t.node(self).grad.data[0];
        for (float& v : t.grd(in).data) v += g;
      });
}

Var Tape::product(Var x) {
  value(x);
  return record(
      "product", {x.id},
      [](Tape& t, int self) {
        float p = 1.0f;
        for (float v : t.val(t.node(self).in[0]).data) p *= v;
        t.val(self) = Tensor::scalar(p);
      },
      [](Tape& t, int self) {
        const int in = t.node(self).in[0];
        if (!t.node(in).needs) return;
        const Tensor& X = t.val(in);
        const float g = t.node(self).grad.data[0];
        const std::size_t n = X.size();
        // prefix/suffix products so zero entries are handled exactly
        std::vector<float> suffix(n + 1, 1.0f);
        for (std::size_t k = n; k-- > 0;) suffix[k] = suffix[k + 1] * X.data[k];
        Tensor& GX = t.grd(in);
        float prefix = 1.0f;
        for (std::size_t k = 0; k < n; ++k) {
          GX.data[k] += g * prefix * suffix[k + 1];
          prefix *= X.data[k];
        }
      });
}

Var Tape::matmul(Var a, Var b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.cols() != bv.rows()) throw ShapeError("matmul: inner dimension mismatch between " + describe(a) + " and " + describe(b));
  return record(
      "matmul", {a.id, b.id},
      [](Tape& t, int self) {
        const Tensor& A = t.val(t.node(self).in[0]);
        const Tensor& B = t.val(t.node(self).in[1]);
        const int n = A.rows(), k = A.cols(), m = B.cols();
        Tensor& Y = t.val(self);
        Y = Tensor({n, m});
        for (int r = 0; r < n; ++r)
          for (int i = 0; i < k; ++i) {
            const float ai = A.data[static_cast<std::size_t>(r) * k + i];
            const float* br = &B.data[static_cast<std::size_t>(i) * m];
            float* y = &Y.data[static_cast<std::size_t>(r) * m];
            for (int o = 0; o < m; ++o) y[o] += ai * br[o];
          }
      },
      [](Tape& t, int self) {
        const int ia = t.node(self).in[0], ib = t.node(self).in[1];
        const Tensor& A = t.val(ia);
        const Tensor& B = t.val(ib);
        const Tensor& G = t.node(self).grad;
        const int n = A.rows(), k = A.cols(), m = B.cols();
        if (t.node(ia).needs) {
          Tensor& GA = t.grd(ia);
          for (int r = 0; r < n; ++r)
            for (int i = 0; i < k; ++i) {
              float acc = 0.0f;
              for (int o = 0; o < m; ++o) acc += G.data[static_cast<std::size_t>(r) * m + o] * B.data[static_cast<std::size_t>(i) * m + o];
              GA.data[static_cast<std::size_t>(r) * k + i] += acc;
            }
        }
        if (t.node(ib).needs) {
          Tensor& GB = t.grd(ib);
          for (int r = 0; r < n; ++r)
            for (int i = 0; i < k; ++i) {
              const float ai = A.data[static_cast<std::size_t>(r) * k + i];
              for (int o = 0; o < m; ++o) GB.data[static_cast<std::size_t>(i) * m + o] += ai * G.data[static_cast<std::size_t>(r) * m + o];
            }
        }
      });
}

Var Tape::normalize(Var w) {
  double s = 0.0;
  for (float v : value(w).data) s += v;
  if (!(s > 0.0)) throw NumericError("normalize: weights of " + describe(w) + " do not sum to a positive value");
  return record(
      "normalize", {w.id},
      [](Tape& t, int self) {
        const Tensor& X = t.val(t.node(self).in[0]);
        double s = 0.0;
        for (float v : X.data) s += v;
        Tensor& Y = t.val(self);
        Y = X;
        for (float& v : Y.data) v = static_cast<float>(v / s);
      },
      [](Tape& t, int self) {
        const int in = t.node(self).in[0];
        if (!t.node(in).needs) return;
        const Tensor& X = t.val(in);
        const Tensor& Y = t.val(self);
        const Tensor& G = t.node(self).grad;
        double s = 0.0, gy = 0.0;
        for (std::size_t k = 0; k < X.size(); ++k) {
          s += X.data[k];
          gy += static_cast<double>(G.data[k]) * Y.data[k];
        }
        Tensor& GX = t.grd(in);
        for (std::size_t k = 0; k < X.size(); ++k) GX.data[k] += static_cast<float>((G.data[k] - gy) / s);
      });
}

Var Tape::gaussian_density(Var mu, float px, float py, float sigma) {
  if (value(mu).cols() != 2) throw ShapeError("gaussian_density: expected [N,2] means, got " + describe(mu));
  if (!(sigma > 0.0f)) throw Error("gaussian_density: sigma must be positive");
  return record(
      "gaussian_density", {mu.id},
      [px, py, sigma](Tape& t, int self) {
        const Tensor& M = t.val(t.node(self).in[0]);
        const int n = M.rows();
        const double s2 = static_cast<double>(sigma) * sigma;
        const double norm = 1.0 / (2.0 * std::numbers::pi * s2);
        Tensor& Y = t.val(self);
        Y = Tensor({n, 1});
        for (int r = 0; r < n; ++r) {
          const double dx = px - M.data[2 * r], dy = py - M.data[2 * r + 1];
          Y.data[r] = static_cast<float>(norm * std::exp(-(dx * dx + dy * dy) / (2.0 * s2)));
        }
      },
      [px, py, sigma](Tape& t, int self) {
        const int in = t.node(self).in[0];
        if (!t.node(in).needs) return;
        const Tensor& M = t.val(in);
        const Tensor& Y = t.val(self);
        const Tensor& G = t.node(self).grad;
        Tensor& GM = t.grd(in);
        const float s2 = sigma * sigma;
        for (int r = 0; r < M.rows(); ++r) {
          const float c = G.data[r] * Y.data[r] / s2;
          GM.data[2 * r] += c * (px - M.data[2 * r]);
          GM.data[2 * r + 1] += c * (py - M.data[2 * r + 1]);
        }
      });
}

Var Tape::log_gaussian_mixture(Var w, Var mu, float px, float py, float sigma) {
  const Tensor& wv = value(w);
  const Tensor& mv = value(mu);
  if (mv.cols() != 2 || static_cast<int>(wv.size()) != mv.rows())
    throw ShapeError("log_gaussian_mixture: weights " + describe(w) + " and means " + describe(mu) + " disagree");
  if (!(sigma > 0.0f)) throw Error("log_gaussian_mixture: sigma must be positive");
  bool any = false;
  for (float v : wv.data) {
    if (v < 0.0f) throw NumericError("log_gaussian_mixture: negative mixture weight");
    any = any || v > 0.0f;
  }
  if (!any) throw NumericError("log_gaussian_mixture: all mixture weights are zero");
  // log N_i is shared by forward and backward
  auto lognorm = [px, py, sigma](const Tensor& M, int r) {
    const double s2 = static_cast<double>(sigma) * sigma;
    const double dx = px - M.data[2 * r], dy = py - M.data[2 * r + 1];
    return -std::log(2.0 * std::numbers::pi * s2) - (dx * dx + dy * dy) / (2.0 * s2);
  };
  return record(
      "log_gaussian_mixture", {w.id, mu.id},
      [lognorm](Tape& t, int self) {
        const Tensor& W = t.val(t.node(self).in[0]);
        const Tensor& M = t.val(t.node(self).in[1]);
        double mx = -std::numeric_limits<double>::infinity();
        std::vector<double> a(W.size());
        for (int r = 0; r < M.rows(); ++r) {
          a[r] = W.data[r] > 0.0f ? std::log(static_cast<double>(W.data[r])) + lognorm(M, r)
                                  : -std::numeric_limits<double>::infinity();
          mx = std::max(mx, a[r]);
        }
        double s = 0.0;
        for (double v : a) s += std::exp(v - mx);
        t.val(self) = Tensor::scalar(static_cast<float>(mx + std::log(s)));
      },
      [lognorm, px, py, sigma](Tape& t, int self) {
        const int iw = t.node(self).in[0], im = t.node(self).in[1];
        const Tensor& W = t.val(iw);
        const Tensor& M = t.val(im);
        const float g = t.node(self).grad.data[0];
        // recompute the log-sum in double rather than trusting the float output
        double mx = -std::numeric_limits<double>::infinity();
        std::vector<double> ln(W.size()), a(W.size());
        for (int r = 0; r < M.rows(); ++r) {
          ln[r] = lognorm(M, r);
          a[r] = W.data[r] > 0.0f ? std::log(static_cast<double>(W.data[r])) + ln[r]
                                  : -std::numeric_limits<double>::infinity();
          mx = std::max(mx, a[r]);
        }
        double s = 0.0;
        for (double v : a) s += std::exp(v - mx);
        const double L = mx + std::log(s);
        const double s2 = static_cast<double>(sigma) * sigma;
        Tensor* GW = t.node(iw).needs ? &t.grd(iw) : nullptr;
        Tensor* GM = t.node(im).needs ? &t.grd(im) : nullptr;
        for (int r = 0; r < M.rows(); ++r) {
          if (GW) GW->data[r] += static_cast<float>(g * std::exp(ln[r] - L));
          if (GM) {
            const double resp = std::exp(a[r] - L);
            GM->data[2 * r] += static_cast<float>(g * resp * (px - M.data[2 * r]) / s2);
            GM->data[2 * r + 1] += static_cast<float>(g * resp * (py - M.data[2 * r + 1]) / s2);
          }
        }
      });
}

}  // namespace dnbp
