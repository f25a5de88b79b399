#include <gtest/gtest.h>

#include <random>
#include <set>

#include "dnbp/error.hpp"
#include "dnbp/graph.hpp"

using namespace dnbp;

namespace {

void zero_group(Potentials& pots, const std::string& group) {
  for (int id : pots.params().group_ids(group)) pots.params()[id].value.fill(0.0f);
}

Tensor uniform(std::vector<int> shape, std::mt19937_64& rng, float lo, float hi) {
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor t(std::move(shape));
  for (float& v : t.data) v = u(rng);
  return t;
}

std::vector<std::vector<int>> layer_shapes(const ParamStore& store, const std::string& prefix, int layers) {
  std::vector<std::vector<int>> out;
  for (int l = 0; l < layers; ++l) out.push_back(store[store.find(prefix + ".fc" + std::to_string(l) + ".w")].value.shape);
  return out;
}

}  // namespace

TEST(GraphSpec, Pendulum) {
  const GraphSpec g = GraphSpec::pendulum();
  EXPECT_EQ(g.num_nodes(), 3);
  EXPECT_EQ(g.edges(), (std::vector<Edge>{{0, 1}, {1, 2}}));
  EXPECT_EQ(g.neighbors(0), (std::vector<int>{1}));
  EXPECT_EQ(g.neighbors(1), (std::vector<int>{0, 2}));
  EXPECT_EQ(g.neighbors(2), (std::vector<int>{1}));
}

TEST(GraphSpec, Spider) {
  const GraphSpec g = GraphSpec::spider();
  EXPECT_EQ(g.num_nodes(), 7);
  EXPECT_EQ(g.edges(), (std::vector<Edge>{{0, 1}, {0, 2}, {0, 3}, {1, 4}, {2, 5}, {3, 6}}));
  EXPECT_EQ(g.neighbors(0), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(g.neighbors(6), (std::vector<int>{3}));
}

TEST(GraphSpec, NeighbourMapSymmetric) {
  for (const GraphSpec& g : {GraphSpec::pendulum(), GraphSpec::spider()}) {
    for (int a = 0; a < g.num_nodes(); ++a)
      for (int b : g.neighbors(a)) {
        const auto& back = g.neighbors(b);
        EXPECT_NE(std::find(back.begin(), back.end(), a), back.end());
        EXPECT_TRUE(g.has_edge(a, b));
      }
  }
}

TEST(GraphSpec, ByName) {
  EXPECT_EQ(GraphSpec::by_name("spider").num_nodes(), 7);
  EXPECT_THROW(GraphSpec::by_name("octopus"), UsageError);
}

TEST(GraphSpec, ParseRoundTrip) {
  const GraphSpec g = GraphSpec::parse("# a star\nname star\nnodes 4\nedge 0 1\nedge 0 2  # comment\n\nedge 3 0\n");
  EXPECT_EQ(g.name(), "star");
  EXPECT_EQ(g.num_nodes(), 4);
  EXPECT_EQ(g.neighbors(0), (std::vector<int>{1, 2, 3}));
  const GraphSpec h = GraphSpec::parse(g.to_text());
  EXPECT_EQ(h.edges(), g.edges());
  EXPECT_EQ(h.name(), g.name());
}

TEST(GraphSpec, Errors) {
  EXPECT_THROW(GraphSpec("g", 2, {{0, 0}}), DataError);
  EXPECT_THROW(GraphSpec("g", 2, {{0, 2}}), DataError);
  EXPECT_THROW(GraphSpec("g", 2, {{0, 1}, {1, 0}}), DataError);
  EXPECT_THROW(GraphSpec("g", 0, {}), DataError);
  try {
    GraphSpec::parse("nodes 3\nedge 0 1\nedge zero 2\n");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(GraphSpec::parse("edge 0 1\n"), DataError);
}

TEST(Potentials, ArchitectureShapes) {
  Potentials pots(GraphSpec::pendulum(), 1);
  const ParamStore& p = pots.params();
  EXPECT_EQ(layer_shapes(p, "unary0.head", 3), (std::vector<std::vector<int>>{{12, 64}, {64, 64}, {64, 1}}));
  EXPECT_EQ(layer_shapes(p, "diffusion2", 3), (std::vector<std::vector<int>>{{64, 64}, {64, 64}, {64, 2}}));
  EXPECT_EQ(layer_shapes(p, "density0-1", 5),
            (std::vector<std::vector<int>>{{2, 32}, {32, 32}, {32, 32}, {32, 32}, {32, 1}}));
  EXPECT_EQ(layer_shapes(p, "sampler1-2", 3), (std::vector<std::vector<int>>{{64, 64}, {64, 64}, {64, 2}}));
  for (int k = 0; k < 5; ++k)
    EXPECT_EQ(p[p.find("unary1.enc.conv" + std::to_string(k) + ".w")].value.shape,
              (std::vector<int>{k == 0 ? 27 : 90, 10}));
  // groups: one unary and diffusion per node, one density and sampler per edge
  const auto groups = p.groups();
  EXPECT_EQ(std::set<std::string>(groups.begin(), groups.end()),
            (std::set<std::string>{"unary0", "unary1", "unary2", "diffusion0", "diffusion1", "diffusion2", "density0-1",
                                   "density1-2", "sampler0-1", "sampler1-2"}));
}

TEST(Potentials, InitialisationBounds) {
  Potentials pots(GraphSpec::spider(), 3);
  const ParamStore& p = pots.params();
  const Tensor& w = p[p.find("density0-1.fc1.w")].value;
  float lo = 1, hi = -1;
  for (float v : w.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const float bound = 1.0f / std::sqrt(32.0f);
  EXPECT_GE(lo, -bound);
  EXPECT_LE(hi, bound);
  EXPECT_LT(lo, -0.8f * bound);
  EXPECT_GT(hi, 0.8f * bound);
}

TEST(Potentials, SeedDeterminism) {
  Potentials a(GraphSpec::pendulum(), 17), b(GraphSpec::pendulum(), 17), c(GraphSpec::pendulum(), 18);
  for (int i = 0; i < a.params().size(); ++i) EXPECT_EQ(a.params()[i].value.data, b.params()[i].value.data);
  EXPECT_NE(a.params()[0].value.data, c.params()[0].value.data);
}

TEST(Potentials, UnaryRangeAndDeterminism) {
  Potentials pots(GraphSpec::pendulum(), 4);
  std::mt19937_64 rng(5);
  Tape tape(&pots.params(), false);
  Var parts = tape.constant(uniform({1000, 2}, rng, -3.0f, 3.0f));
  Var feat = tape.constant(uniform({1, kFeatureDim}, rng, -5.0f, 5.0f));
  const Tensor a = tape.value(pots.unary(tape, 1, parts, feat));
  const Tensor b = tape.value(pots.unary(tape, 1, parts, feat));
  ASSERT_EQ(a.shape, (std::vector<int>{1000, 1}));
  for (float v : a.data) {
    EXPECT_GE(v, kDensityFloor);
    EXPECT_LE(v, kDensityCeil);
  }
  EXPECT_EQ(a.data, b.data);
  EXPECT_THROW(pots.unary(tape, 1, tape.constant(Tensor({4, 3})), feat), ShapeError);
}

TEST(Potentials, DensityTranslationInvariance) {
  Potentials pots(GraphSpec::pendulum(), 6);
  std::mt19937_64 rng(7);
  Tensor xs = uniform({200, 2}, rng, -1, 1), xd = uniform({200, 2}, rng, -1, 1);
  Tape tape(&pots.params(), false);
  const Tensor d0 = tape.value(pots.pairwise_density(tape, 0, tape.sub(tape.constant(xs), tape.constant(xd))));
  for (std::size_t i = 0; i < xs.size(); i += 2) {
    xs.data[i] += 0.37f;
    xd.data[i] += 0.37f;
  }
  const Tensor d1 = tape.value(pots.pairwise_density(tape, 0, tape.sub(tape.constant(xs), tape.constant(xd))));
  for (std::size_t i = 0; i < d0.size(); ++i) {
    EXPECT_NEAR(d0.data[i], d1.data[i], 1e-6);
    EXPECT_GE(d0.data[i], kDensityFloor);
    EXPECT_LE(d0.data[i], kDensityCeil);
  }
}

TEST(Potentials, SampleDirectionsSymmetric) {
  Potentials pots(GraphSpec::pendulum(), 8);
  std::mt19937_64 rng(9);
  Tape tape(&pots.params(), false);
  Var cond = tape.constant(uniform({50, 2}, rng, -1, 1));
  Var noise = tape.constant(sample_noise(50, rng));
  const Tensor a = tape.value(pots.pairwise_sample(tape, 1, cond, Direction::SourceGivenDest, noise));
  const Tensor b = tape.value(pots.pairwise_sample(tape, 1, cond, Direction::DestGivenSource, noise));
  const Tensor& c = tape.value(cond);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data[i] + b.data[i], 2.0f * c.data[i], 1e-6);
}

TEST(Potentials, ZeroedSamplersAreIdentity) {
  Potentials pots(GraphSpec::pendulum(), 10);
  zero_group(pots, "sampler0-1");
  zero_group(pots, "diffusion2");
  std::mt19937_64 rng(11);
  Tape tape(&pots.params(), false);
  Var x = tape.constant(uniform({20, 2}, rng, -1, 1));
  Var noise = tape.constant(sample_noise(20, rng));
  EXPECT_EQ(tape.value(pots.pairwise_sample(tape, 0, x, Direction::SourceGivenDest, noise)).data, tape.value(x).data);
  EXPECT_EQ(tape.value(pots.diffusion_sample(tape, 2, x, noise)).data, tape.value(x).data);
}

TEST(Potentials, DiffusionIsParticlePlusTranslation) {
  Potentials pots(GraphSpec::pendulum(), 12);
  std::mt19937_64 rng(13);
  Tape tape(&pots.params(), false);
  Var x = tape.constant(uniform({20, 2}, rng, -1, 1));
  Var noise = tape.constant(sample_noise(20, rng));
  const Tensor t = tape.value(pots.diffusion_translation(tape, 0, noise));
  const Tensor s = tape.value(pots.diffusion_sample(tape, 0, x, noise));
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(s.data[i], tape.value(x).data[i] + t.data[i]);
}

TEST(Observation, ImageConversion) {
  std::vector<std::uint8_t> rgb(128 * 128 * 3, 0);
  rgb[0] = 255;
  rgb[5] = 51;
  const Tensor t = image_to_tensor(rgb, 128, 128);
  EXPECT_EQ(t.shape, (std::vector<int>{128, 128, 3}));
  EXPECT_FLOAT_EQ(t.data[0], 1.0f);
  EXPECT_FLOAT_EQ(t.data[5], 0.2f);
  EXPECT_THROW(image_to_tensor(std::vector<std::uint8_t>(64 * 64 * 3), 64, 64), ShapeError);
}
