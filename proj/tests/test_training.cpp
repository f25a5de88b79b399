#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numbers>
#include <random>

#include "dnbp/checkpoint.hpp"
#include "dnbp/error.hpp"
#include "dnbp/training.hpp"
#include "test_util.hpp"

using namespace dnbp;

namespace {

Belief single_particle(Keypoint at) {
  Belief b;
  b.node = 0;
  b.set.particles = {at};
  b.set.weights = {1.0f};
  b.set.components = {{1.0f, 1.0f, 1.0f}};
  return b;
}

Image random_frame(std::mt19937_64& rng) {
  Image img(128, 128);
  std::uniform_int_distribution<int> u(0, 255);
  for (auto& v : img.rgb) v = static_cast<std::uint8_t>(u(rng));
  return img;
}

bool all_zero(const Tensor& t) {
  for (float v : t.data)
    if (v != 0.0f) return false;
  return true;
}

// Whether any parameter of `group` has a non-zero gradient.
bool touched(const Potentials& pots, const Gradients& g, const std::string& group) {
  for (int id : pots.params().group_ids(group))
    if (!all_zero(g[id])) return true;
  return false;
}

TrainConfig small_config() {
  TrainConfig cfg;
  cfg.particles = 12;
  cfg.u_samples = 2;
  cfg.noise_sigma = 0.0f;
  cfg.batch = 2;
  return cfg;
}

}  // namespace

TEST(Loss, SingleParticleAtTruth) {
  const double sigma = 0.05;
  const double partial = 1.0 / (2.0 * std::numbers::pi * sigma * sigma);
  const NodeLoss nl = partial_belief_loss(single_particle({0.3f, -0.2f}), {0.3f, -0.2f}, 0.05f);
  // kernel sigma is the float 0.05f
  const double s32 = 0.05f;
  const double expect = -3.0 * std::log(1.0 / (2.0 * std::numbers::pi * s32 * s32));
  EXPECT_NEAR(nl.loss, expect, 1e-6);
  EXPECT_NEAR(nl.loss, -12.460, 1e-3);
  EXPECT_NEAR(nl.b_unary_d, partial, 1e-3);
  EXPECT_NEAR(nl.b_unary_rho, partial, 1e-3);
  EXPECT_NEAR(nl.b_neigh_rho, partial, 1e-3);

  Tape tape;
  BeliefVars bv;
  bv.particles = tape.constant(Tensor({1, 2}, std::vector<float>{0.3f, -0.2f}));
  bv.unary_d = bv.unary_s = bv.neigh = tape.constant(Tensor({1, 1}, 1.0f));
  bv.weights = bv.unary_d;
  NodeLoss tl;
  Var l = partial_belief_loss(tape, bv, {0.3f, -0.2f}, 0.05f, &tl);
  EXPECT_NEAR(tape.value(l)[0], expect, 1e-5);
}

TEST(Loss, DoublingSigma) {
  const Belief b = single_particle({0.0f, 0.0f});
  const NodeLoss a = partial_belief_loss(b, {0, 0}, 0.05f);
  const NodeLoss c = partial_belief_loss(b, {0, 0}, 0.1f);
  EXPECT_NEAR(c.b_unary_d, a.b_unary_d / 4.0, 1e-9);
  EXPECT_NEAR(c.loss - a.loss, 3.0 * std::log(4.0), 1e-6);
}

TEST(Loss, GrowsWithDistance) {
  double prev = -INFINITY;
  for (float d : {0.0f, 0.05f, 0.5f, 2.0f, 10.0f}) {
    const double l = partial_belief_loss(single_particle({d, 0.0f}), {0, 0}, 0.05f).loss;
    EXPECT_TRUE(std::isfinite(l));
    EXPECT_GT(l, prev);
    prev = l;
  }
}

TEST(Loss, FamiliesUseTheirOwnWeights) {
  Belief b;
  b.node = 0;
  b.set.particles = {{0, 0}, {1, 0}};
  b.set.weights = {0.5f, 0.5f};
  b.set.components = {{1.0f, 0.0f, 1.0f}, {0.0f, 1.0f, 1.0f}};
  const NodeLoss nl = partial_belief_loss(b, {0, 0}, 0.05f);
  const double peak = 1.0 / (2.0 * std::numbers::pi * 0.05f * 0.05f);
  EXPECT_NEAR(nl.b_unary_d, peak, 1e-3);
  EXPECT_LT(nl.b_unary_rho, 1e-80);  // exp(-200) * peak
  EXPECT_NEAR(nl.b_neigh_rho, peak / 2.0, 1e-3);
}

TEST(Config, ParseAndRoundTrip) {
  TrainConfig c = parse_config("# comment\ntask = spider\nparticles=64\n  gamma = 0.5 # trailing\nlr = 2e-4\nseed = 99\n");
  EXPECT_EQ(c.task, "spider");
  EXPECT_EQ(c.particles, 64);
  EXPECT_FLOAT_EQ(c.gamma, 0.5f);
  EXPECT_FLOAT_EQ(c.lr, 2e-4f);
  EXPECT_EQ(c.seed, 99u);
  EXPECT_EQ(c.batch, 6);
  const TrainConfig d = parse_config(config_to_text(c));
  EXPECT_EQ(config_to_text(d), config_to_text(c));
}

TEST(Config, ErrorsNameTheLine) {
  try {
    parse_config("particles = 10\n\nbogus = 3\n");
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  try {
    parse_config("gamma = lots\n");
    FAIL();
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_config("no equals sign\n"), UsageError);
  EXPECT_THROW(parse_config("task = octopus\n"), Error);
  TrainConfig bad;
  bad.gamma = 1.5f;
  EXPECT_THROW(bad.validate(), UsageError);
}

TEST(Config, KeysCoverDocumentedSet) {
  const auto& k = config_keys();
  for (const char* key : {"task", "particles", "gamma", "u_samples", "kernel_sigma", "lr", "batch", "noise_sigma",
                          "patience", "seed"})
    EXPECT_NE(std::find(k.begin(), k.end(), key), k.end()) << key;
}

TEST(Augment, NoiseOnlyTouchesPixels) {
  std::mt19937_64 rng(1);
  Image img = random_frame(rng);
  const Tensor clean = image_tensor(img);
  EXPECT_EQ(augment_image(img, 0.0f, rng).data, clean.data);
  const Tensor noisy = augment_image(img, 20.0f, rng);
  double diff = 0.0;
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    EXPECT_GE(noisy.data[i], 0.0f);
    EXPECT_LE(noisy.data[i], 1.0f);
    diff += std::abs(noisy.data[i] - clean.data[i]);
  }
  EXPECT_GT(diff / static_cast<double>(noisy.size()), 0.02);
}

TEST(TrainStep, ZeroLearningRateLeavesParameters) {
  Potentials pots(GraphSpec::pendulum(), 3);
  const std::string before = checkpoint_bytes(pots);
  TrainConfig cfg = small_config();
  cfg.lr = 0.0f;
  AdamState adam = make_adam(pots.params(), cfg.lr);
  std::mt19937_64 rng(4);
  std::vector<Lane> lanes;
  for (int l = 0; l < 2; ++l) {
    Lane lane{FrameState{}, std::mt19937_64(10 + l)};
    lane.state = initial_state(pots.graph(), cfg.inference(Mode::Train), lane.rng);
    lanes.push_back(std::move(lane));
  }
  Image a = random_frame(rng), b = random_frame(rng);
  std::vector<Keypoint> truth{{0, 0}, {0, 0.4f}, {0.1f, 0.8f}};
  for (int t = 0; t < 3; ++t) {
    StepResult r = train_step(pots, lanes, {&a, &b}, {&truth, &truth}, cfg, adam);
    EXPECT_FALSE(r.skipped);
    EXPECT_TRUE(std::isfinite(r.loss.total));
  }
  EXPECT_EQ(adam.step_count, 3);
  EXPECT_EQ(checkpoint_bytes(pots), before);
}

// A two-node chain (the smallest graph with messages) on one fixed frame.
TEST(TrainStep, LossDecreasesOnFixedFrame) {
  Potentials pots(GraphSpec("pair", 2, {{0, 1}}), 5);
  TrainConfig cfg = small_config();
  cfg.particles = 20;
  AdamState adam = make_adam(pots.params(), cfg.lr);
  std::mt19937_64 rng(6);
  const Image frame = random_frame(rng);
  const std::vector<Keypoint> truth{{0.2f, -0.1f}, {-0.3f, 0.4f}};
  std::vector<Lane> lanes(1, Lane{FrameState{}, std::mt19937_64(7)});
  lanes[0].state = initial_state(pots.graph(), cfg.inference(Mode::Train), lanes[0].rng);
  std::vector<double> losses;
  for (int t = 0; t < 200; ++t) {
    StepResult r = train_step(pots, lanes, {&frame}, {&truth}, cfg, adam);
    ASSERT_FALSE(r.skipped);
    losses.push_back(r.loss.total);
  }
  auto avg = [&](int from) {
    double s = 0.0;
    for (int i = from; i < from + 20; ++i) s += losses[i];
    return s / 20.0;
  };
  EXPECT_LT(avg(180), avg(0));
  std::printf("moving average: first %.3f last %.3f\n", avg(0), avg(180));
}

// Unary gradients through a neighbour's outgoing message are stopped, while
// the node's own belief path reaches its unary network.
TEST(Decoupling, UnaryPathIsolation) {
  Potentials pots(GraphSpec::pendulum(), 8);
  std::mt19937_64 rng(9);
  TrainConfig cfg = small_config();
  const InferenceConfig inf = cfg.inference(Mode::Train);
  FrameState st = initial_state(pots.graph(), inf, rng);
  const std::vector<Keypoint> truth{{0, 0}, {0, 0.44f}, {0.2f, 0.8f}};
  // advance one frame so beliefs exist and particles come from the diffusion sampler
  {
    Tape t0(&pots.params(), false);
    st = run_frame(t0, pots, st, image_tensor(random_frame(rng)), inf, Mode::Train, &truth, rng).state;
  }
  Tape tape(&pots.params());
  FrameOutput out = run_frame(tape, pots, st, image_tensor(random_frame(rng)), inf, Mode::Train, &truth, rng);

  // path through message 0 -> 1 only
  const MessageVars& m01 = out.messages[directed_edge_index(pots.graph(), 0, 1)];
  Gradients gm = tape.backward(tape.sum(tape.log(m01.weights)));
  for (int v = 0; v < 3; ++v) EXPECT_FALSE(touched(pots, gm, Potentials::unary_group(v))) << v;
  EXPECT_TRUE(touched(pots, gm, "sampler0-1"));
  EXPECT_TRUE(touched(pots, gm, "diffusion1"));

  // node 0's belief path: its own unary is trained
  Var l0 = partial_belief_loss(tape, out.beliefs[0], truth[0], cfg.kernel_sigma);
  Gradients gb = tape.backward(l0);
  EXPECT_TRUE(touched(pots, gb, Potentials::unary_group(0)));
  EXPECT_FALSE(touched(pots, gb, Potentials::unary_group(1)));
  EXPECT_FALSE(touched(pots, gb, Potentials::unary_group(2)));
}

// With particles fixed (first frame: uniform proposal constants), each
// partial term's gradient reaches only its own family.
TEST(Decoupling, FamiliesAtFixedSamples) {
  Potentials pots(GraphSpec::pendulum(), 10);
  std::mt19937_64 rng(11);
  TrainConfig cfg = small_config();
  const InferenceConfig inf = cfg.inference(Mode::Train);
  const std::vector<Keypoint> truth{{0, 0}, {0, 0.44f}, {0.2f, 0.8f}};
  Tape tape(&pots.params());
  FrameOutput out =
      run_frame(tape, pots, initial_state(pots.graph(), inf, rng), image_tensor(random_frame(rng)), inf, Mode::Train,
                &truth, rng);
  // node 0 hears from node 1, whose other neighbour (2) feeds the density term
  const BeliefVars& b = out.beliefs[0];
  auto term = [&](Var w) {
    return tape.scale(tape.log_gaussian_mixture(tape.normalize(w), b.particles, truth[0].x, truth[0].y, 0.05f), -1.0f);
  };
  const std::vector<std::string> sampler{"sampler0-1", "sampler1-2"}, density{"density0-1", "density1-2"};
  auto only = [&](const Gradients& g, const std::vector<std::string>& allowed, const std::string& must) {
    for (const auto& grp : pots.params().groups()) {
      const bool ok = std::find(allowed.begin(), allowed.end(), grp) != allowed.end();
      if (!ok) EXPECT_FALSE(touched(pots, g, grp)) << grp;
    }
    EXPECT_TRUE(touched(pots, g, must)) << must;
  };
  only(tape.backward(term(b.unary_d)), {"unary0"}, "unary0");
  only(tape.backward(term(b.unary_s)), sampler, "sampler0-1");
  only(tape.backward(term(b.neigh)), density, "density0-1");
}

TEST(Train, EmptyAndMismatchedData) {
  Potentials pots(GraphSpec::pendulum(), 1);
  TrainConfig cfg = small_config();
  EXPECT_THROW(train(pots, {}, {}, cfg), DataError);
  SequenceRecord spider = simulate_sequence(Task::Spider, 2, 0, 0, ClutterKind::None, 3);
  EXPECT_THROW(train(pots, {spider}, {}, cfg), DataError);
}

TEST(Train, ShortRunCheckpointReloads) {
  std::vector<SequenceRecord> seqs;
  for (int i = 0; i < 32; ++i) seqs.push_back(simulate_sequence(Task::Pendulum, 3, i % 3, i % 2, ClutterKind::Static, 100 + i));
  std::vector<SequenceRecord> val(seqs.begin(), seqs.begin() + 2);
  Potentials pots(GraphSpec::pendulum(), 2);
  TrainConfig cfg = small_config();
  cfg.particles = 6;
  cfg.batch = 6;
  cfg.max_epochs = 3;
  cfg.patience = 3;
  TrainResult r = train(pots, seqs, val, cfg);
  EXPECT_GE(r.best_epoch, 1);
  EXPECT_LE(static_cast<int>(r.epochs.size()), 3);

  const auto dir = dnbp::testing::temp_dir("ckpt");
  save_checkpoint(pots, (dir / "m.ckpt").string());
  auto back = load_checkpoint((dir / "m.ckpt").string());
  ASSERT_EQ(back->params().size(), pots.params().size());
  for (int i = 0; i < pots.params().size(); ++i) {
    EXPECT_EQ(back->params()[i].name, pots.params()[i].name);
    EXPECT_EQ(back->params()[i].group, pots.params()[i].group);
    EXPECT_EQ(back->params()[i].value.shape, pots.params()[i].value.shape);
    EXPECT_EQ(0, std::memcmp(back->params()[i].value.data.data(), pots.params()[i].value.data.data(),
                             pots.params()[i].value.size() * sizeof(float)));
  }
  EXPECT_EQ(checkpoint_bytes(*back), checkpoint_bytes(pots));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsDamage) {
  Potentials pots(GraphSpec::spider(), 4);
  const std::string bytes = checkpoint_bytes(pots);
  EXPECT_EQ(checkpoint_bytes(*checkpoint_from_bytes(bytes)), bytes);
  EXPECT_THROW(checkpoint_from_bytes("not a checkpoint"), DataError);
  EXPECT_THROW(checkpoint_from_bytes(bytes.substr(0, bytes.size() - 4)), DataError);
  EXPECT_THROW(checkpoint_from_bytes(bytes + "xx"), DataError);
  EXPECT_THROW(load_checkpoint("/nonexistent/model.ckpt"), DataError);
  Potentials other(GraphSpec::pendulum(), 4);
  EXPECT_THROW(copy_parameters(pots, other), Error);
}
