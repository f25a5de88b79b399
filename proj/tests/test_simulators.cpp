#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "dnbp/error.hpp"
#include "dnbp/simulators.hpp"
#include "test_util.hpp"

using namespace dnbp;
namespace fs = std::filesystem;

namespace {

constexpr double kPi = std::numbers::pi;

double dist(Keypoint a, Keypoint b) { return std::hypot(a.x - b.x, a.y - b.y); }

ClutterItem full_frame_rect(Layer layer) {
  ClutterItem c;
  c.kind = ShapeKind::Rectangle;
  c.width = 4.0;
  c.height = 4.0;
  c.color = {10, 20, 30};
  c.layer = layer;
  return c;
}

}  // namespace

TEST(Pendulum, UnstableEquilibrium) {
  PendulumState s{kPi, 0.0, 0.0, 0.0};
  const auto acc = pendulum_accel(s);
  EXPECT_NEAR(acc[0], 0.0, 1e-9);
  EXPECT_NEAR(acc[1], 0.0, 1e-9);
  const PendulumState n = pendulum_step(s);
  EXPECT_NEAR(n.th1, kPi, 1e-9);
  EXPECT_NEAR(n.th2, 0.0, 1e-9);
  EXPECT_NEAR(n.dth1, 0.0, 1e-9);
  EXPECT_NEAR(n.dth2, 0.0, 1e-9);
}

TEST(Pendulum, StableEquilibrium) {
  const PendulumState n = pendulum_step(PendulumState{});
  EXPECT_NEAR(n.th1, 0.0, 1e-9);
  EXPECT_NEAR(n.th2, 0.0, 1e-9);
  EXPECT_NEAR(n.dth1, 0.0, 1e-9);
  EXPECT_NEAR(n.dth2, 0.0, 1e-9);
}

TEST(Pendulum, EnergyDrift) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    PendulumState s = random_pendulum(rng);
    EXPECT_EQ(s.dth1, 0.0);
    EXPECT_EQ(s.dth2, 0.0);
    const double e0 = pendulum_energy(s);
    if (e0 < 1e-3) continue;
    for (int k = 0; k < 100; ++k) s = pendulum_step(s);
    EXPECT_LT(std::abs(pendulum_energy(s) - e0), 0.01 * e0) << "trial " << trial;
  }
}

TEST(Pendulum, AnglesWrapped) {
  std::mt19937_64 rng(3);
  PendulumState s = random_pendulum(rng);
  for (int k = 0; k < 200; ++k) {
    s = pendulum_step(s);
    ASSERT_GE(s.th1, 0.0);
    ASSERT_LT(s.th1, 2 * kPi);
    ASSERT_GE(s.th2, 0.0);
    ASSERT_LT(s.th2, 2 * kPi);
  }
}

TEST(Pendulum, ForwardKinematics) {
  auto k = pendulum_keypoints(PendulumState{});
  EXPECT_NEAR(k[0].x, 0.0, 1e-6);
  EXPECT_NEAR(k[0].y, 0.0, 1e-6);
  EXPECT_NEAR(k[1].x, 0.0, 1e-4);
  EXPECT_NEAR(k[1].y, 0.4444, 1e-4);
  EXPECT_NEAR(k[2].x, 0.0, 1e-4);
  EXPECT_NEAR(k[2].y, 0.8889, 1e-4);
  k = pendulum_keypoints(PendulumState{kPi / 2, 0.0, 0.0, 0.0});
  EXPECT_NEAR(k[1].x, 0.4444, 1e-4);
  EXPECT_NEAR(k[1].y, 0.0, 1e-4);
  EXPECT_NEAR(k[2].x, 0.8889, 1e-4);
  EXPECT_NEAR(k[2].y, 0.0, 1e-4);
}

TEST(Pendulum, BaseFixedAndLabelsInRange) {
  const SequenceRecord rec = simulate_sequence(Task::Pendulum, 40, 0, 0, ClutterKind::None, 8);
  for (const auto& f : rec.labels) {
    ASSERT_EQ(f.size(), 3u);
    EXPECT_EQ(f[0].x, 0.0f);
    EXPECT_EQ(f[0].y, 0.0f);
    for (const auto& k : f) {
      EXPECT_LE(std::abs(k.x), 1.0f);
      EXPECT_LE(std::abs(k.y), 1.0f);
    }
  }
}

TEST(Spider, ZeroVelocityIsConstant) {
  SpiderState s;
  for (auto& a : s.arms) a.ext = 40.0;
  const auto k0 = spider_keypoints(s);
  SpiderState t = s;
  for (int i = 0; i < 50; ++i) t = spider_step(t);
  const auto k1 = spider_keypoints(t);
  for (std::size_t i = 0; i < k0.size(); ++i) {
    EXPECT_EQ(k0[i].x, k1[i].x);
    EXPECT_EQ(k0[i].y, k1[i].y);
  }
}

TEST(Spider, ReflectsAtExtensionLimit) {
  SpiderState s;
  s.arms[0].ext = kSpiderExtMax;
  s.arms[0].v_ext = 30.0;
  const SpiderState n = spider_step(s);
  EXPECT_LT(n.arms[0].v_ext, 0.0);
  EXPECT_LE(n.arms[0].ext, kSpiderExtMax);
  s.arms[1].beta = -kSpiderElbowMax;
  s.arms[1].v_beta = -0.3;
  EXPECT_GT(spider_step(s).arms[1].v_beta, 0.0);
}

TEST(Spider, ForwardKinematics) {
  SpiderState s;
  s.x = s.y = kSpiderCanvas / 2;
  s.theta = 0.0;
  for (auto& a : s.arms) {
    a.rot = 0.0;
    a.ext = 20.0;
    a.beta = 0.0;
  }
  const auto k = spider_keypoints(s);
  EXPECT_NEAR(k[0].x, 0.0, 1e-6);
  EXPECT_NEAR(k[0].y, 0.0, 1e-6);
  EXPECT_NEAR(dist(k[1], k[0]), 100.0 / 250.0, 1e-6);
  EXPECT_NEAR(dist(k[4], k[1]), 80.0 / 250.0, 1e-6);
  // first arm on its bisector points straight down the image
  EXPECT_NEAR(k[1].x, 0.0, 1e-6);
  EXPECT_NEAR(k[1].y, 0.4, 1e-6);
}

TEST(Spider, StaysWithinLimits) {
  std::mt19937_64 rng(17);
  SpiderState s = random_spider(rng);
  ASSERT_TRUE(spider_within_limits(s));
  for (int i = 0; i < 100000; ++i) {
    s = spider_step(s);
    ASSERT_TRUE(spider_within_limits(s)) << "step " << i;
  }
}

TEST(Clutter, StaticHasZeroVelocity) {
  std::mt19937_64 rng(2);
  for (Task t : {Task::Pendulum, Task::Spider})
    for (const auto& c : gen_clutter(t, 20, 20, false, rng)) {
      EXPECT_EQ(c.vx, 0.0);
      EXPECT_EQ(c.vy, 0.0);
      EXPECT_EQ(c.vtheta, 0.0);
    }
  bool moving = false;
  for (const auto& c : gen_clutter(Task::Pendulum, 5, 5, true, rng)) moving |= c.vx != 0.0;
  EXPECT_TRUE(moving);
}

TEST(Clutter, Layers) {
  std::mt19937_64 rng(4);
  const auto items = gen_clutter(Task::Spider, 3, 5, true, rng);
  ASSERT_EQ(items.size(), 8u);
  for (int i = 0; i < 8; ++i) EXPECT_EQ(items[i].layer, i < 3 ? Layer::Beneath : Layer::Above);
  EXPECT_THROW(gen_clutter(Task::Spider, -1, 0, true, rng), UsageError);
}

TEST(Clutter, PendulumFrequencies) {
  std::mt19937_64 rng(5);
  const auto items = gen_clutter(Task::Pendulum, 5000, 5000, true, rng);
  int rect = 0, rect_c1 = 0, circ = 0, circ_c1 = 0;
  for (const auto& c : items) {
    if (c.kind == ShapeKind::Rectangle) {
      ++rect;
      EXPECT_TRUE(c.color == Rgb({0, 204, 204}) || c.color == Rgb({245, 87, 77}));
      rect_c1 += c.color == Rgb({0, 204, 204});
    } else {
      ++circ;
      EXPECT_TRUE(c.color == Rgb({204, 204, 0}) || c.color == Rgb({96, 217, 63}));
      circ_c1 += c.color == Rgb({204, 204, 0});
    }
    EXPECT_GE(c.x, -1.5);
    EXPECT_LE(c.x, 1.5);
  }
  EXPECT_NEAR(rect / 10000.0, 0.8, 0.02);
  EXPECT_NEAR(static_cast<double>(rect_c1) / rect, 0.5, 0.02);
  EXPECT_NEAR(static_cast<double>(circ_c1) / circ, 0.5, 0.05);
}

TEST(Clutter, SpiderFrequencies) {
  std::mt19937_64 rng(6);
  const auto items = gen_clutter(Task::Spider, 5000, 5000, true, rng);
  int rect = 0;
  for (const auto& c : items) {
    if (c.kind == ShapeKind::Rectangle) {
      ++rect;
    } else {
      EXPECT_EQ(c.color, Rgb({255, 255, 0}));
    }
    EXPECT_GE(c.x, -1.0);
    EXPECT_LE(c.x, 1.0);
  }
  EXPECT_NEAR(rect / 10000.0, 0.7, 0.02);
}

TEST(Render, NoClutterMeansEmptyMask) {
  const auto r = render_frame(Task::Pendulum, pendulum_keypoints(PendulumState{1.0, 2.0, 0, 0}), {});
  EXPECT_EQ(frame_ratio(r.clutter_mask), 0.0);
  EXPECT_GT(frame_ratio(r.structure_mask), 0.0);
  EXPECT_EQ(r.image.width, kRenderSize);
  EXPECT_EQ(r.image.height, kRenderSize);
}

TEST(Render, FullFrameClutter) {
  const auto kp = pendulum_keypoints(PendulumState{});
  for (Layer layer : {Layer::Beneath, Layer::Above}) {
    const auto r = render_frame(Task::Pendulum, kp, {full_frame_rect(layer)});
    EXPECT_EQ(frame_ratio(r.clutter_mask), 1.0);
  }
  // above-layer clutter hides the structure entirely
  const auto r = render_frame(Task::Pendulum, kp, {full_frame_rect(Layer::Above)});
  for (int y = 0; y < kRenderSize; ++y)
    for (int x = 0; x < kRenderSize; ++x) ASSERT_EQ(r.image.px(x, y)[0], 10);
}

TEST(Render, Deterministic) {
  std::mt19937_64 rng(8);
  SpiderState s = random_spider(rng);
  const auto clutter = gen_clutter(Task::Spider, 4, 4, true, rng);
  const auto a = render_frame(Task::Spider, spider_keypoints(s), clutter);
  const auto b = render_frame(Task::Spider, spider_keypoints(s), clutter);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.clutter_mask, b.clutter_mask);
  EXPECT_THROW(render_frame(Task::Spider, pendulum_keypoints(PendulumState{}), {}), ShapeError);
}

TEST(ClutterRatio, Oracles) {
  const std::size_t n = kRenderSize * kRenderSize;
  std::vector<std::uint8_t> none(n, 0), all(n, 1), half(n, 0);
  for (std::size_t i = 0; i < n / 2; ++i) half[i] = 1;
  EXPECT_EQ(clutter_ratio({none, none, none}), 0.0);
  EXPECT_EQ(clutter_ratio({all, all}), 1.0);
  for (int len : {1, 3, 17}) EXPECT_EQ(clutter_ratio(std::vector<std::vector<std::uint8_t>>(len, half)), 0.5);
  EXPECT_DOUBLE_EQ(clutter_ratio({none, all}), 0.5);
  EXPECT_THROW(clutter_ratio({}), DataError);
}

TEST(Sequence, RatioMatchesMasks) {
  const SequenceRecord rec = simulate_sequence(Task::Spider, 10, 4, 4, ClutterKind::Dynamic, 12);
  ASSERT_EQ(rec.frames.size(), 10u);
  ASSERT_EQ(rec.labels.size(), 10u);
  EXPECT_EQ(rec.labels[0].size(), 7u);
  double sum = 0;
  for (const auto& m : rec.masks) {
    std::size_t c = 0;
    for (auto v : m) c += v;
    sum += static_cast<double>(c) / m.size();
  }
  EXPECT_NEAR(rec.clutter_ratio, sum / 10.0, 1e-12);
  // dynamic clutter moves, so consecutive masks differ
  EXPECT_NE(rec.masks[0], rec.masks[9]);
  const SequenceRecord again = simulate_sequence(Task::Spider, 10, 4, 4, ClutterKind::Dynamic, 12);
  EXPECT_EQ(again.frames, rec.frames);
}

TEST(Sequence, StaticClutterMaskConstantForPendulum) {
  const SequenceRecord rec = simulate_sequence(Task::Pendulum, 6, 3, 3, ClutterKind::Static, 13);
  for (const auto& m : rec.masks) EXPECT_EQ(m, rec.masks[0]);
}

TEST(Sequence, SampleInBin) {
  for (Task t : {Task::Pendulum, Task::Spider}) {
    const auto deciles = test_deciles();
    for (int d : {0, 4, 9}) {
      const SequenceRecord rec = sample_in_bin(t, 4, deciles[d], ClutterKind::Static, 100 + d);
      EXPECT_GE(rec.clutter_ratio, deciles[d].lo);
      EXPECT_LT(rec.clutter_ratio, deciles[d].hi);
      EXPECT_GT(rec.clutter_ratio, 0.0);
    }
    const SequenceRecord clean = sample_in_bin(t, 4, RatioBin{0, 0, true}, ClutterKind::None, 1);
    EXPECT_EQ(clean.clutter_ratio, 0.0);
    EXPECT_EQ(clean.clutter_kind, ClutterKind::None);
  }
  EXPECT_THROW(sample_in_bin(Task::Pendulum, 2, RatioBin{0.999, 1.0, false}, ClutterKind::Static, 1, 5), DataError);
}

TEST(Dataset, SplitPlan) {
  EXPECT_EQ(split_plan(Task::Pendulum, "train", 1.0).sequences, 1024);
  EXPECT_EQ(split_plan(Task::Pendulum, "train", 1.0).frames, 20);
  EXPECT_EQ(split_plan(Task::Spider, "train", 1.0).sequences, 2048);
  EXPECT_EQ(split_plan(Task::Pendulum, "test", 1.0).sequences, 50);
  EXPECT_EQ(split_plan(Task::Pendulum, "test", 1.0).frames, 100);
  EXPECT_EQ(split_plan(Task::Pendulum, "train", 0.05).sequences, 51);
  EXPECT_EQ(split_plan(Task::Spider, "train", 1.0).bins.size(), 5u);
  EXPECT_EQ(split_plan(Task::Pendulum, "test", 0.001).sequences, 1);
  EXPECT_THROW(split_plan(Task::Pendulum, "dev", 1.0), UsageError);
  EXPECT_THROW(scaled_count(10, 0.0), UsageError);
  const auto d = test_deciles();
  ASSERT_EQ(d.size(), 10u);
  EXPECT_DOUBLE_EQ(d[1].lo, 0.095);
  EXPECT_GE(d[9].hi, 0.95);
}

TEST(Dataset, GenerateDeterministicAndConsistent) {
  const fs::path a = dnbp::testing::temp_dir("gen_a"), b = dnbp::testing::temp_dir("gen_b");
  GenerateOptions opt;
  opt.scale = 0.02;
  opt.frames = 3;
  opt.jobs = 2;
  EXPECT_EQ(generate_dataset(Task::Pendulum, "train", opt, 9, a.string()), 20);
  opt.jobs = 1;
  EXPECT_EQ(generate_dataset(Task::Pendulum, "train", opt, 9, b.string()), 20);

  const DatasetInfo info = read_dataset_info((a / "train").string());
  ASSERT_EQ(info.sequence_dirs.size(), 20u);
  int clean = 0;
  for (const auto& dir : info.sequence_dirs) {
    const SequenceRecord rec = read_sequence(dir);
    ASSERT_EQ(rec.frames.size(), 3u);
    double s = 0;
    for (double r : rec.frame_ratios) s += r;
    EXPECT_NEAR(rec.clutter_ratio, s / 3.0, 1e-6);
    clean += rec.clutter_ratio == 0.0;
    for (const auto& f : rec.labels)
      for (const auto& k : f) {
        EXPECT_LE(std::abs(k.x), 1.0f);
        EXPECT_LE(std::abs(k.y), 1.0f);
      }
    const fs::path rel = fs::relative(dir, a);
    EXPECT_EQ(dnbp::testing::read_file(fs::path(dir) / "labels.json"),
              dnbp::testing::read_file(b / rel / "labels.json"));
    EXPECT_EQ(dnbp::testing::read_file(fs::path(dir) / "frames" / "0002.png"),
              dnbp::testing::read_file(b / rel / "frames" / "0002.png"));
  }
  EXPECT_EQ(clean, 7);  // one of three bins is clutter-free
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Dataset, TestSplitHitsDeciles) {
  const fs::path dir = dnbp::testing::temp_dir("gen_test");
  GenerateOptions opt;
  opt.scale = 0.02;
  opt.frames = 4;
  EXPECT_EQ(generate_dataset(Task::Pendulum, "test", opt, 3, dir.string()), 10);
  const DatasetInfo info = read_dataset_info((dir / "test").string());
  for (const auto& d : info.sequence_dirs) {
    const SequenceRecord rec = read_sequence(d);
    ASSERT_GE(rec.decile, 0);
    EXPECT_GE(rec.clutter_ratio, info.bins[rec.decile].lo);
    EXPECT_LT(rec.clutter_ratio, info.bins[rec.decile].hi);
  }
  fs::remove_all(dir);
}

TEST(Png, RoundTrip) {
  const fs::path dir = dnbp::testing::temp_dir("png");
  Image img(7, 5);
  for (std::size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<std::uint8_t>(i * 37);
  write_png((dir / "x.png").string(), img);
  EXPECT_EQ(read_png((dir / "x.png").string()), img);
  EXPECT_THROW(read_png((dir / "missing.png").string()), DataError);
  fs::remove_all(dir);
}
