#include "dnbp/simulators.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "dnbp/error.hpp"

namespace fs = std::filesystem;

namespace dnbp {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double wrap_angle(double a) {
  a = std::fmod(a, kTwoPi);
  if (a < 0.0) a += kTwoPi;
  if (a >= kTwoPi) a = 0.0;
  return a;
}

// equally weighted two-component Gaussian mixture with means +m and -m
double symmetric_mixture(std::mt19937_64& rng, double m, double sd) {
  std::bernoulli_distribution coin(0.5);
  std::normal_distribution<double> n(0.0, sd);
  const double sign = coin(rng) ? 1.0 : -1.0;
  return sign * m + n(rng);
}

constexpr Rgb kWhite{255, 255, 255};
constexpr Rgb kPendulumLink1{0, 204, 204};
constexpr Rgb kPendulumLink2{245, 87, 77};
constexpr Rgb kPendulumJoint{204, 204, 0};
constexpr Rgb kPendulumCircleAlt{96, 217, 63};
constexpr Rgb kSpiderJoint{255, 255, 0};
constexpr std::array<Rgb, 3> kSpiderArm{{{255, 0, 0}, {0, 255, 0}, {0, 0, 255}}};

// pendulum appearance in world metres
constexpr double kPendulumLinkWidth = 0.2;
constexpr double kPendulumJointRadius = 0.1;

}  // namespace

Task task_from_name(const std::string& name) {
  if (name == "pendulum") return Task::Pendulum;
  if (name == "spider") return Task::Spider;
  throw UsageError("unknown task '" + name + "' (expected pendulum or spider)");
}

std::string task_name(Task t) { return t == Task::Pendulum ? "pendulum" : "spider"; }

GraphSpec task_graph(Task t) { return t == Task::Pendulum ? GraphSpec::pendulum() : GraphSpec::spider(); }

// ---------------------------------------------------------------------------

std::array<double, 2> pendulum_accel(const PendulumState& s, const PendulumParams& p) {
  const double c2 = std::cos(s.th2), s2 = std::sin(s.th2);
  const double d1 = p.m1 * p.lc1 * p.lc1 + p.m2 * (p.l1 * p.l1 + p.lc2 * p.lc2 + 2.0 * p.l1 * p.lc2 * c2) + p.i1 + p.i2;
  const double d2 = p.m2 * (p.lc2 * p.lc2 + p.l1 * p.lc2 * c2) + p.i2;
  const double phi2 = p.m2 * p.lc2 * p.g * std::sin(s.th1 + s.th2);
  const double phi1 = -p.m2 * p.l1 * p.lc2 * s.dth2 * s.dth2 * s2 - 2.0 * p.m2 * p.l1 * p.lc2 * s.dth2 * s.dth1 * s2 +
                      (p.m1 * p.lc1 + p.m2 * p.l1) * p.g * std::sin(s.th1) + phi2;
  const double dd2 = (d2 / d1 * phi1 - p.m2 * p.l1 * p.lc2 * s.dth1 * s.dth1 * s2 - phi2) /
                     (p.m2 * p.lc2 * p.lc2 + p.i2 - d2 * d2 / d1);
  const double dd1 = -(d2 * dd2 + phi1) / d1;
  return {dd1, dd2};
}

PendulumState pendulum_step(const PendulumState& s0, double dt, int substeps, const PendulumParams& p) {
  if (substeps < 1) substeps = 1;
  using V = std::array<double, 4>;
  auto deriv = [&](const V& v) {
    PendulumState s{v[0], v[1], v[2], v[3]};
    auto a = pendulum_accel(s, p);
    return V{v[2], v[3], a[0], a[1]};
  };
  V y{s0.th1, s0.th2, s0.dth1, s0.dth2};
  const double h = dt / substeps;
  for (int k = 0; k < substeps; ++k) {
    const V k1 = deriv(y);
    V t;
    for (int i = 0; i < 4; ++i) t[i] = y[i] + 0.5 * h * k1[i];
    const V k2 = deriv(t);
    for (int i = 0; i < 4; ++i) t[i] = y[i] + 0.5 * h * k2[i];
    const V k3 = deriv(t);
    for (int i = 0; i < 4; ++i) t[i] = y[i] + h * k3[i];
    const V k4 = deriv(t);
    for (int i = 0; i < 4; ++i) y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  }
  return {wrap_angle(y[0]), wrap_angle(y[1]), y[2], y[3]};
}

double pendulum_energy(const PendulumState& s, const PendulumParams& p) {
  const double c2 = std::cos(s.th2);
  const double m11 = p.m1 * p.lc1 * p.lc1 + p.m2 * (p.l1 * p.l1 + p.lc2 * p.lc2 + 2.0 * p.l1 * p.lc2 * c2) + p.i1 + p.i2;
  const double m12 = p.m2 * (p.lc2 * p.lc2 + p.l1 * p.lc2 * c2) + p.i2;
  const double m22 = p.m2 * p.lc2 * p.lc2 + p.i2;
  const double kin = 0.5 * (m11 * s.dth1 * s.dth1 + 2.0 * m12 * s.dth1 * s.dth2 + m22 * s.dth2 * s.dth2);
  const double a = (p.m1 * p.lc1 + p.m2 * p.l1) * p.g;
  const double b = p.m2 * p.lc2 * p.g;
  const double pot = a * (1.0 - std::cos(s.th1)) + b * (1.0 - std::cos(s.th1 + s.th2));
  return kin + pot;
}

std::vector<Keypoint> pendulum_keypoints(const PendulumState& s, const PendulumParams& p) {
  const double k = kPendulumScale;
  const double mx = k * p.l1 * std::sin(s.th1), my = k * p.l1 * std::cos(s.th1);
  const double ex = mx + k * p.l2 * std::sin(s.th1 + s.th2), ey = my + k * p.l2 * std::cos(s.th1 + s.th2);
  return {{0.0f, 0.0f},
          {static_cast<float>(mx), static_cast<float>(my)},
          {static_cast<float>(ex), static_cast<float>(ey)}};
}

PendulumState random_pendulum(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, kTwoPi);
  PendulumState s;
  s.th1 = u(rng);
  s.th2 = u(rng);
  return s;
}

// ---------------------------------------------------------------------------

double spider_bisector(int arm) { return (90.0 + 120.0 * arm) * std::numbers::pi / 180.0; }

namespace {

// integrates one coordinate and reflects it (and its velocity) at [lo, hi]
void reflect_step(double& v, double& rate, double lo, double hi, double dt) {
  v += rate * dt;
  if (v > hi) {
    v = 2.0 * hi - v;
    rate = -std::abs(rate);
  } else if (v < lo) {
    v = 2.0 * lo - v;
    rate = std::abs(rate);
  }
  v = std::clamp(v, lo, hi);
}

}  // namespace

SpiderState spider_step(const SpiderState& s0, double dt) {
  SpiderState s = s0;
  s.x += s.vx * dt;
  s.y += s.vy * dt;
  s.theta = wrap_angle(s.theta + s.vtheta * dt);
  for (auto& a : s.arms) {
    reflect_step(a.rot, a.v_rot, -kSpiderSectorHalf, kSpiderSectorHalf, dt);
    reflect_step(a.ext, a.v_ext, kSpiderExtMin, kSpiderExtMax, dt);
    reflect_step(a.beta, a.v_beta, -kSpiderElbowMax, kSpiderElbowMax, dt);
  }
  return s;
}

std::vector<Keypoint> spider_keypoints(const SpiderState& s) {
  const double c = kSpiderCanvas / 2.0;
  auto norm = [c](double px, double py) {
    return Keypoint{static_cast<float>((px - c) / c), static_cast<float>((py - c) / c)};
  };
  std::vector<Keypoint> out(7);
  out[0] = norm(s.x, s.y);
  for (int i = 0; i < 3; ++i) {
    const SpiderArm& a = s.arms[i];
    const double ang = s.theta + spider_bisector(i) + a.rot;
    const double r = a.ext + kSpiderLinkHeight;
    const double ex = s.x + r * std::cos(ang), ey = s.y + r * std::sin(ang);
    const double ang2 = ang + a.beta;
    out[1 + i] = norm(ex, ey);
    out[4 + i] = norm(ex + kSpiderLinkHeight * std::cos(ang2), ey + kSpiderLinkHeight * std::sin(ang2));
  }
  return out;
}

bool spider_within_limits(const SpiderState& s) {
  for (const auto& a : s.arms) {
    if (a.rot < -kSpiderSectorHalf || a.rot > kSpiderSectorHalf) return false;
    if (a.ext < kSpiderExtMin || a.ext > kSpiderExtMax) return false;
    if (a.beta < -kSpiderElbowMax || a.beta > kSpiderElbowMax) return false;
  }
  return true;
}

SpiderState random_spider(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  SpiderState s;
  s.x = uni(160.0, 340.0);
  s.y = uni(160.0, 340.0);
  s.theta = uni(0.0, kTwoPi);
  s.vx = symmetric_mixture(rng, 24.0, 15.0);
  s.vy = symmetric_mixture(rng, 24.0, 15.0);
  s.vtheta = symmetric_mixture(rng, 0.3, 0.1);
  for (auto& a : s.arms) {
    a.rot = uni(-kSpiderSectorHalf, kSpiderSectorHalf);
    a.ext = uni(kSpiderExtMin, kSpiderExtMax);
    a.beta = uni(-kSpiderElbowMax, kSpiderElbowMax);
    a.v_rot = symmetric_mixture(rng, 0.3, 0.1);
    a.v_ext = symmetric_mixture(rng, 500.0, 60.0);
    a.v_beta = symmetric_mixture(rng, 0.3, 0.1);
  }
  return s;
}

// ---------------------------------------------------------------------------

std::string clutter_kind_name(ClutterKind k) {
  switch (k) {
    case ClutterKind::None: return "none";
    case ClutterKind::Static: return "static";
    case ClutterKind::Dynamic: return "dynamic";
  }
  return "none";
}

ClutterKind clutter_kind_from_name(const std::string& s) {
  if (s == "none") return ClutterKind::None;
  if (s == "static") return ClutterKind::Static;
  if (s == "dynamic") return ClutterKind::Dynamic;
  throw DataError("unknown clutter kind '" + s + "'");
}

std::vector<ClutterItem> gen_clutter(Task task, int count_beneath, int count_above, bool dynamic, std::mt19937_64& rng) {
  if (count_beneath < 0 || count_above < 0) throw UsageError("clutter counts must be non-negative");
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto normal = [&](double m, double sd) { return std::normal_distribution<double>(m, sd)(rng); };
  std::vector<ClutterItem> items;
  const int total = count_beneath + count_above;
  items.reserve(total);
  for (int k = 0; k < total; ++k) {
    ClutterItem c;
    c.layer = k < count_beneath ? Layer::Beneath : Layer::Above;
    if (task == Task::Pendulum) {
      const double s = kPendulumScale;
      c.kind = u01(rng) < 0.8 ? ShapeKind::Rectangle : ShapeKind::Circle;
      if (c.kind == ShapeKind::Rectangle) {
        c.width = std::max(0.0, normal(0.2, 0.05)) * s;
        c.height = std::max(0.0, normal(0.8, 0.2)) * s;
        c.color = u01(rng) < 0.5 ? kPendulumLink1 : kPendulumLink2;
      } else {
        c.radius = std::max(0.0, normal(0.1, 0.1)) * s;
        c.color = u01(rng) < 0.5 ? kPendulumJoint : kPendulumCircleAlt;
      }
      // 1.5x the image extent
      c.x = -1.5 + 3.0 * u01(rng);
      c.y = -1.5 + 3.0 * u01(rng);
      c.theta = kTwoPi * u01(rng);
      if (dynamic) {
        c.vx = normal(0.0, 0.025) * s;
        c.vy = normal(0.0, 0.025) * s;
        c.vtheta = normal(0.0, 0.05);
      }
    } else {
      const double px = kSpiderCanvas / 2.0;
      c.kind = u01(rng) < 0.7 ? ShapeKind::Rectangle : ShapeKind::Circle;
      if (c.kind == ShapeKind::Rectangle) {
        c.width = std::max(0.0, normal(20.0, 3.0)) / px;
        c.height = std::max(0.0, normal(80.0, 5.0)) / px;
        c.color = kSpiderArm[std::min(2, static_cast<int>(u01(rng) * 3.0))];
      } else {
        c.radius = std::max(0.0, normal(10.0, 3.0)) / px;
        c.color = kSpiderJoint;
      }
      c.x = -1.0 + 2.0 * u01(rng);
      c.y = -1.0 + 2.0 * u01(rng);
      c.theta = kTwoPi * u01(rng);
      if (dynamic) {
        c.vx = normal(0.0, 3.0) * kSpiderDt / px;
        c.vy = normal(0.0, 3.0) * kSpiderDt / px;
        c.vtheta = normal(0.0, 0.05) * kSpiderDt;
      }
    }
    items.push_back(c);
  }
  return items;
}

void step_clutter(std::vector<ClutterItem>& items) {
  for (auto& c : items) {
    c.x += c.vx;
    c.y += c.vy;
    c.theta += c.vtheta;
  }
}

// ---------------------------------------------------------------------------

namespace {

struct Shape {
  bool circle = false;
  double cx = 0, cy = 0;
  double ux = 1, uy = 0;  // long axis
  double half_len = 0, half_wid = 0;
  double r = 0;
};

Shape segment_shape(Keypoint a, Keypoint b, double width) {
  Shape s;
  s.cx = 0.5 * (a.x + b.x);
  s.cy = 0.5 * (a.y + b.y);
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len = std::hypot(dx, dy);
  if (len > 0) {
    s.ux = dx / len;
    s.uy = dy / len;
  }
  s.half_len = 0.5 * len;
  s.half_wid = 0.5 * width;
  return s;
}

Shape circle_shape(double x, double y, double r) {
  Shape s;
  s.circle = true;
  s.cx = x;
  s.cy = y;
  s.r = r;
  return s;
}

Shape clutter_shape(const ClutterItem& c) {
  if (c.kind == ShapeKind::Circle) return circle_shape(c.x, c.y, c.radius);
  Shape s;
  s.cx = c.x;
  s.cy = c.y;
  s.ux = std::cos(c.theta);
  s.uy = std::sin(c.theta);
  s.half_len = 0.5 * c.height;
  s.half_wid = 0.5 * c.width;
  return s;
}

constexpr double kHalf = kRenderSize / 2.0;

inline double pixel_centre(int i) { return (i + 0.5) / kHalf - 1.0; }

void fill(Image& img, std::vector<std::uint8_t>* mask, const Shape& s, const Rgb& color) {
  double ext;
  if (s.circle) {
    if (!(s.r > 0)) return;
    ext = s.r;
  } else {
    if (!(s.half_len > 0) || !(s.half_wid > 0)) return;
    ext = std::hypot(s.half_len, s.half_wid);
  }
  const int x0 = std::max(0, static_cast<int>(std::floor((s.cx - ext + 1.0) * kHalf - 0.5)));
  const int x1 = std::min(kRenderSize - 1, static_cast<int>(std::ceil((s.cx + ext + 1.0) * kHalf - 0.5)));
  const int y0 = std::max(0, static_cast<int>(std::floor((s.cy - ext + 1.0) * kHalf - 0.5)));
  const int y1 = std::min(kRenderSize - 1, static_cast<int>(std::ceil((s.cy + ext + 1.0) * kHalf - 0.5)));
  for (int y = y0; y <= y1; ++y) {
    const double py = pixel_centre(y) - s.cy;
    for (int x = x0; x <= x1; ++x) {
      const double px = pixel_centre(x) - s.cx;
      bool in;
      if (s.circle) {
        in = px * px + py * py <= s.r * s.r;
      } else {
        const double along = px * s.ux + py * s.uy;
        const double across = -px * s.uy + py * s.ux;
        in = std::abs(along) <= s.half_len && std::abs(across) <= s.half_wid;
      }
      if (!in) continue;
      std::uint8_t* p = img.px(x, y);
      p[0] = color[0];
      p[1] = color[1];
      p[2] = color[2];
      if (mask) (*mask)[static_cast<std::size_t>(y) * kRenderSize + x] = 1;
    }
  }
}

void draw_structure(Task task, const std::vector<Keypoint>& k, Image& img, std::vector<std::uint8_t>* mask) {
  if (task == Task::Pendulum) {
    if (k.size() != 3) throw ShapeError("pendulum rendering needs 3 keypoints");
    const double w = kPendulumLinkWidth * kPendulumScale;
    const double r = kPendulumJointRadius * kPendulumScale;
    fill(img, mask, segment_shape(k[0], k[1], w), kPendulumLink1);
    fill(img, mask, segment_shape(k[1], k[2], w), kPendulumLink2);
    fill(img, mask, circle_shape(k[0].x, k[0].y, r), kPendulumJoint);
    fill(img, mask, circle_shape(k[1].x, k[1].y, r), kPendulumJoint);
  } else {
    if (k.size() != 7) throw ShapeError("spider rendering needs 7 keypoints");
    const double px = kSpiderCanvas / 2.0;
    const double w = kSpiderLinkWidth / px;
    const double h = kSpiderLinkHeight / px;
    for (int i = 0; i < 3; ++i) {
      // inner link ends at the elbow and spans one link height back toward the root
      const Keypoint root = k[0], elbow = k[1 + i];
      const double dx = elbow.x - root.x, dy = elbow.y - root.y;
      const double len = std::hypot(dx, dy);
      Keypoint start = elbow;
      if (len > 0) {
        start = {static_cast<float>(elbow.x - dx / len * h), static_cast<float>(elbow.y - dy / len * h)};
      }
      fill(img, mask, segment_shape(start, elbow, w), kSpiderArm[i]);
      fill(img, mask, segment_shape(elbow, k[4 + i], w), kSpiderArm[i]);
    }
    const double r = kSpiderJointRadius / px;
    for (int i = 0; i < 4; ++i) fill(img, mask, circle_shape(k[i].x, k[i].y, r), kSpiderJoint);
  }
}

}  // namespace

RenderedFrame render_frame(Task task, const std::vector<Keypoint>& keypoints, const std::vector<ClutterItem>& clutter,
                           const std::optional<Occluder>& occluder) {
  RenderedFrame out;
  out.image = Image(kRenderSize, kRenderSize, 255);
  const std::size_t n = static_cast<std::size_t>(kRenderSize) * kRenderSize;
  out.clutter_mask.assign(n, 0);
  out.structure_mask.assign(n, 0);
  for (const auto& c : clutter)
    if (c.layer == Layer::Beneath) fill(out.image, &out.clutter_mask, clutter_shape(c), c.color);
  // the structure mask is drawn on a scratch image so clutter beneath it does not count
  Image scratch(kRenderSize, kRenderSize);
  draw_structure(task, keypoints, scratch, &out.structure_mask);
  draw_structure(task, keypoints, out.image, nullptr);
  for (const auto& c : clutter)
    if (c.layer == Layer::Above) fill(out.image, &out.clutter_mask, clutter_shape(c), c.color);
  if (occluder) {
    const Occluder& o = *occluder;
    for (int y = std::max(0, o.y0); y < std::min(kRenderSize, o.y0 + o.height); ++y)
      for (int x = std::max(0, o.x0); x < std::min(kRenderSize, o.x0 + o.width); ++x) {
        std::uint8_t* p = out.image.px(x, y);
        p[0] = o.color[0];
        p[1] = o.color[1];
        p[2] = o.color[2];
      }
  }
  return out;
}

double frame_ratio(const std::vector<std::uint8_t>& mask) {
  if (mask.empty()) throw DataError("empty occlusion mask");
  std::size_t c = 0;
  for (auto v : mask) c += v != 0;
  return static_cast<double>(c) / static_cast<double>(mask.size());
}

double clutter_ratio(const std::vector<std::vector<std::uint8_t>>& masks) {
  if (masks.empty()) throw DataError("clutter ratio of an empty sequence");
  double s = 0.0;
  for (const auto& m : masks) s += frame_ratio(m);
  return s / static_cast<double>(masks.size());
}

// ---------------------------------------------------------------------------

SequenceRecord simulate_sequence(Task task, int frames, int count_beneath, int count_above, ClutterKind kind,
                                 std::uint64_t seed) {
  if (frames < 1) throw UsageError("a sequence needs at least one frame");
  std::mt19937_64 rng(seed);
  SequenceRecord rec;
  rec.task = task;
  rec.seed = seed;
  rec.clutter_kind = kind;

  std::vector<std::vector<Keypoint>> labels;
  if (task == Task::Pendulum) {
    PendulumState s = random_pendulum(rng);
    for (int f = 0; f < frames; ++f) {
      labels.push_back(pendulum_keypoints(s));
      s = pendulum_step(s);
    }
  } else {
    // redraw until every keypoint of every frame stays inside the image
    bool ok = false;
    for (int attempt = 0; attempt < 10000 && !ok; ++attempt) {
      SpiderState s = random_spider(rng);
      labels.clear();
      ok = true;
      for (int f = 0; f < frames && ok; ++f) {
        auto k = spider_keypoints(s);
        for (const auto& p : k)
          if (std::abs(p.x) > 1.0f || std::abs(p.y) > 1.0f) ok = false;
        labels.push_back(std::move(k));
        s = spider_step(s);
      }
    }
    if (!ok) throw DataError("could not draw a spider trajectory that stays inside the frame");
  }

  auto clutter = gen_clutter(task, count_beneath, count_above, kind == ClutterKind::Dynamic, rng);
  for (int f = 0; f < frames; ++f) {
    RenderedFrame r = render_frame(task, labels[f], clutter);
    rec.frame_ratios.push_back(frame_ratio(r.clutter_mask));
    rec.frames.push_back(std::move(r.image));
    rec.masks.push_back(std::move(r.clutter_mask));
    step_clutter(clutter);
  }
  rec.labels = std::move(labels);
  rec.clutter_ratio = clutter_ratio(rec.masks);
  return rec;
}

std::vector<RatioBin> train_bins(Task task) {
  std::vector<RatioBin> b{{0.0, 0.0, true}, {0.0, 0.04, false}, {0.04, 0.1, false}};
  if (task == Task::Spider) {
    b.push_back({0.1, 0.2, false});
    b.push_back({0.2, 0.3, false});
  }
  return b;
}

std::vector<RatioBin> test_deciles() {
  std::vector<RatioBin> b;
  for (int k = 0; k < 10; ++k) b.push_back({0.095 * k, k == 9 ? 0.95 + 1e-9 : 0.095 * (k + 1), false});
  return b;
}

int scaled_count(int n, double scale) {
  if (!(scale > 0.0)) throw UsageError("scale must be positive");
  return std::max(1, static_cast<int>(std::lround(scale * n)));
}

SplitPlan split_plan(Task task, const std::string& split, double scale) {
  SplitPlan p;
  const bool pend = task == Task::Pendulum;
  if (split == "train") {
    p.sequences = scaled_count(pend ? 1024 : 2048, scale);
    p.frames = 20;
    p.bins = train_bins(task);
  } else if (split == "val") {
    p.sequences = scaled_count(pend ? 150 : 300, scale);
    p.frames = 20;
    p.bins = train_bins(task);
  } else if (split == "test") {
    p.sequences = scaled_count(50, scale);
    p.frames = 100;
    p.bins = test_deciles();
  } else {
    throw UsageError("unknown split '" + split + "' (expected train, val or test)");
  }
  return p;
}

namespace {

bool in_bin(const RatioBin& b, double r) {
  if (b.zero) return r == 0.0;
  return r > 0.0 && r >= b.lo && r < b.hi;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t sequence_seed(std::uint64_t master, const std::string& split, int index) {
  std::uint64_t tag = split == "train" ? 1 : split == "val" ? 2 : split == "test" ? 3 : 4;
  return splitmix64(splitmix64(splitmix64(master) ^ tag) + static_cast<std::uint64_t>(index));
}

SequenceRecord sample_in_bin(Task task, int frames, const RatioBin& bin, ClutterKind kind, std::uint64_t seed,
                             int budget) {
  if (bin.zero) return simulate_sequence(task, frames, 0, 0, ClutterKind::None, splitmix64(seed));
  if (kind == ClutterKind::None) throw UsageError("a cluttered bin needs static or dynamic clutter");
  std::mt19937_64 rng(seed);
  const int n = task == Task::Pendulum ? 15 : 10;
  const double p = task == Task::Pendulum ? 0.3 : 0.5;
  constexpr int kBinomialAttempts = 40;

  double count = 2.0 * n * p;  // search state once binomial draws stop succeeding
  double step = 1.5;
  int last_dir = 0;
  for (int a = 0; a < budget; ++a) {
    int cb, ca;
    if (a < kBinomialAttempts) {
      std::binomial_distribution<int> bin_np(n, p);
      cb = bin_np(rng);
      ca = bin_np(rng);
    } else {
      const int c = std::max(1, static_cast<int>(std::lround(count)));
      cb = std::binomial_distribution<int>(c, 0.5)(rng);
      ca = c - cb;
    }
    SequenceRecord rec = simulate_sequence(task, frames, cb, ca, kind, splitmix64(seed + 1 + a));
    if (in_bin(bin, rec.clutter_ratio)) return rec;
    if (a < kBinomialAttempts) continue;
    const int dir = rec.clutter_ratio < bin.lo || rec.clutter_ratio == 0.0 ? 1 : -1;
    if (last_dir != 0 && dir != last_dir) step = std::max(1.02, 1.0 + (step - 1.0) * 0.6);
    last_dir = dir;
    count = dir > 0 ? std::max(count + 1.0, count * step) : std::max(1.0, count / step);
  }
  std::ostringstream os;
  os << "could not reach clutter-ratio bin [" << bin.lo << ", " << bin.hi << ") within " << budget << " attempts";
  throw DataError(os.str());
}

// ---------------------------------------------------------------------------

void write_sequence(const SequenceRecord& rec, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "frames");
  for (std::size_t f = 0; f < rec.frames.size(); ++f) {
    char name[16];
    std::snprintf(name, sizeof name, "%04zu.png", f);
    write_png((fs::path(dir) / "frames" / name).string(), rec.frames[f]);
  }
  nlohmann::json j;
  j["task"] = task_name(rec.task);
  j["seed"] = rec.seed;
  j["clutter_kind"] = clutter_kind_name(rec.clutter_kind);
  j["clutter_ratio"] = rec.clutter_ratio;
  if (rec.decile >= 0) j["decile"] = rec.decile;
  j["frame_clutter_ratios"] = rec.frame_ratios;
  auto kp = nlohmann::json::array();
  for (const auto& frame : rec.labels) {
    auto row = nlohmann::json::array();
    for (const auto& k : frame) row.push_back({k.x, k.y});
    kp.push_back(std::move(row));
  }
  j["keypoints"] = std::move(kp);
  std::ofstream out(fs::path(dir) / "labels.json");
  if (!out) throw DataError("cannot write labels in '" + dir + "'");
  out << j.dump(1) << "\n";
}

SequenceRecord read_sequence(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "labels.json");
  if (!in) throw DataError("missing labels.json in '" + dir + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed labels.json in '" + dir + "': " + e.what());
  }
  SequenceRecord rec;
  try {
    rec.task = task_from_name(j.at("task").get<std::string>());
    rec.seed = j.value("seed", std::uint64_t{0});
    rec.clutter_kind = clutter_kind_from_name(j.value("clutter_kind", std::string("none")));
    rec.clutter_ratio = j.value("clutter_ratio", 0.0);
    rec.decile = j.value("decile", -1);
    rec.frame_ratios = j.value("frame_clutter_ratios", std::vector<double>{});
    for (const auto& row : j.at("keypoints")) {
      std::vector<Keypoint> frame;
      for (const auto& k : row) frame.push_back({k.at(0).get<float>(), k.at(1).get<float>()});
      rec.labels.push_back(std::move(frame));
    }
  } catch (const UsageError& e) {
    throw DataError(std::string("labels.json in '") + dir + "': " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("labels.json in '" + dir + "': " + e.what());
  }
  for (std::size_t f = 0; f < rec.labels.size(); ++f) {
    char name[16];
    std::snprintf(name, sizeof name, "%04zu.png", f);
    rec.frames.push_back(read_png((fs::path(dir) / "frames" / name).string()));
  }
  return rec;
}

int generate_dataset(Task task, const std::string& split, const GenerateOptions& opt, std::uint64_t seed,
                     const std::string& out_dir) {
  const SplitPlan plan = split_plan(task, split, opt.scale);
  const int frames = opt.frames > 0 ? opt.frames : plan.frames;
  const bool test = split == "test";
  const int nbins = static_cast<int>(plan.bins.size());
  const int total = test ? plan.sequences * nbins : plan.sequences;

  struct Job {
    int bin;
    ClutterKind kind;
  };
  std::vector<Job> jobs(total);
  for (int i = 0; i < total; ++i) {
    if (test) {
      const int j = i % plan.sequences;
      jobs[i] = {i / plan.sequences, j % 2 == 0 ? ClutterKind::Static : ClutterKind::Dynamic};
    } else {
      const int b = i % nbins;
      const ClutterKind k = plan.bins[b].zero ? ClutterKind::None
                            : (i / nbins) % 2 == 0 ? ClutterKind::Static
                                                   : ClutterKind::Dynamic;
      jobs[i] = {b, k};
    }
  }

  const fs::path root = fs::path(out_dir) / split;
  fs::create_directories(root);
  std::vector<double> ratios(total, 0.0);
  std::vector<ClutterKind> kinds(total);
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (int i = next++; i < total; i = next++) {
      try {
        SequenceRecord rec = sample_in_bin(task, frames, plan.bins[jobs[i].bin], jobs[i].kind,
                                           sequence_seed(seed, split, i));
        if (test) rec.decile = jobs[i].bin;
        char name[16];
        std::snprintf(name, sizeof name, "seq_%05d", i);
        write_sequence(rec, (root / name).string());
        ratios[i] = rec.clutter_ratio;
        kinds[i] = rec.clutter_kind;
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mu);
        if (!failure) failure = std::current_exception();
        next = total;
      }
    }
  };
  const int nthreads = std::max(1, std::min(opt.jobs, total));
  std::vector<std::thread> pool;
  for (int t = 1; t < nthreads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  nlohmann::json meta;
  meta["task"] = task_name(task);
  meta["split"] = split;
  meta["scale"] = opt.scale;
  meta["seed"] = seed;
  meta["frames"] = frames;
  auto bins = nlohmann::json::array();
  for (const auto& b : plan.bins) bins.push_back({{"lo", b.lo}, {"hi", b.hi}, {"zero", b.zero}});
  meta["bins"] = std::move(bins);
  meta["bin_kind"] = test ? "decile" : "train";
  auto seqs = nlohmann::json::array();
  for (int i = 0; i < total; ++i) {
    char name[16];
    std::snprintf(name, sizeof name, "seq_%05d", i);
    seqs.push_back({{"dir", name}, {"bin", jobs[i].bin}, {"clutter_kind", clutter_kind_name(kinds[i])},
                    {"clutter_ratio", ratios[i]}});
  }
  meta["sequences"] = std::move(seqs);
  std::ofstream out(root / "dataset.json");
  if (!out) throw DataError("cannot write dataset metadata in '" + root.string() + "'");
  out << meta.dump(1) << "\n";
  return total;
}

DatasetInfo read_dataset_info(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "dataset.json");
  if (!in) throw DataError("'" + dir + "' is not a dataset split directory (no dataset.json)");
  nlohmann::json j;
  try {
    in >> j;
    DatasetInfo info;
    info.task = task_from_name(j.at("task").get<std::string>());
    info.split = j.value("split", std::string());
    for (const auto& b : j.at("bins")) info.bins.push_back({b.at("lo"), b.at("hi"), b.at("zero")});
    for (const auto& s : j.at("sequences"))
      info.sequence_dirs.push_back((fs::path(dir) / s.at("dir").get<std::string>()).string());
    return info;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed dataset.json in '" + dir + "': " + e.what());
  } catch (const UsageError& e) {
    throw DataError("dataset.json in '" + dir + "': " + e.what());
  }
}

}  // namespace dnbp
