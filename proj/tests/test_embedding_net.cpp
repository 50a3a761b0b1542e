#include <gtest/gtest.h>

#include "tpn/embedding_net.hpp"
#include "tpn/prototypical.hpp"
#include "tpn/rng.hpp"

using namespace tpn;

TEST(EmbeddingNet, InitIsDeterministicInTheSeed) {
  NetworkConfig cfg;
  cfg.seed = 17;
  EXPECT_EQ(init_parameters<double>(cfg), init_parameters<double>(cfg));
  NetworkConfig other = cfg;
  other.seed = 18;
  EXPECT_FALSE(init_parameters<double>(cfg) == init_parameters<double>(other));
}

TEST(EmbeddingNet, MlpLayerCount) {
  NetworkConfig cfg;
  cfg.embedding_dim = 2;
  const auto p = init_parameters<double>(cfg);
  ASSERT_EQ(p.size(), 6u);
  const char* names[] = {"fc0.weight", "fc0.bias", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"};
  const Shape shapes[] = {{2, 64}, {64}, {64, 64}, {64}, {64, 2}, {2}};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(p.entries()[i].name, names[i]);
    EXPECT_EQ(p.entries()[i].value.shape(), shapes[i]);
  }
  for (std::size_t i = 1; i < 6; i += 2)
    for (double b : p.entries()[i].value.data()) EXPECT_EQ(b, 0.0);
}

TEST(EmbeddingNet, WeightsStayWithinTheFanInBound) {
  NetworkConfig cfg;
  const auto p = init_parameters<double>(cfg);
  for (double w : p.at("fc0.weight").data()) EXPECT_LE(std::abs(w), std::sqrt(6.0 / 2.0));
  for (double w : p.at("fc1.weight").data()) EXPECT_LE(std::abs(w), std::sqrt(6.0 / 64.0));
}

TEST(EmbeddingNet, LeNetOn28x28GivesWidthTen) {
  NetworkConfig cfg;
  cfg.arch = Architecture::lenet2conv;
  EmbeddingNet net(cfg);
  EXPECT_EQ(net.parameters().at("conv0.weight").shape(), (Shape{25, 20}));
  EXPECT_EQ(net.parameters().at("conv1.weight").shape(), (Shape{500, 50}));
  EXPECT_EQ(net.parameters().at("fc0.weight").shape(), (Shape{800, 500}));
  Rng rng(3);
  Tensor images(Shape{3, 784});
  for (auto& v : images.data()) v = rng.uniform();
  const Tensor e = net.embed(images);
  EXPECT_EQ(e.shape(), (Shape{3, 10}));
  EXPECT_TRUE(e.all_finite());
}

TEST(EmbeddingNet, EmptyBatchGivesEmptyEmbedding) {
  EmbeddingNet net(NetworkConfig{});
  EXPECT_EQ(net.embed(Tensor(Shape{0, 2})).shape(), (Shape{0, 10}));
}

TEST(EmbeddingNet, IdentityNetwork) {
  NetworkConfig cfg;
  cfg.hidden = {};
  cfg.input_dim = 3;
  cfg.embedding_dim = 3;
  Parameters p;
  p.add("fc0.weight", Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));
  p.add("fc0.bias", Tensor(Shape{3}));
  EmbeddingNet net(cfg, p);
  const Tensor x = Tensor::matrix({{1.5, -2, 0.25}, {-7, 3, 1e6}});
  EXPECT_EQ(net.embed(x), x);
}

TEST(EmbeddingNet, StructuralErrors) {
  NetworkConfig cfg;
  cfg.hidden = {64, 0};
  EXPECT_THROW((void)init_parameters<double>(cfg), ShapeError);
  NetworkConfig zero_m;
  zero_m.embedding_dim = 0;
  EXPECT_THROW((void)init_parameters<double>(zero_m), ShapeError);
  EmbeddingNet net(NetworkConfig{});
  EXPECT_THROW((void)net.embed(Tensor(Shape{4, 3})), ShapeError);
  Parameters wrong;
  wrong.add("fc0.weight", Tensor(Shape{2, 2}));
  EXPECT_THROW(EmbeddingNet(NetworkConfig{}, wrong), ShapeError);
}

TEST(EmbeddingNet, ChunkingDoesNotChangeTheResult) {
  EmbeddingNet net(NetworkConfig{});
  Rng rng(4);
  Tensor x(Shape{37, 2});
  for (auto& v : x.data()) v = rng.normal();
  EXPECT_EQ(net.embed(x, 5), net.embed(x, 256));
}

TEST(EmbeddingNet, SupervisedLossGradientMatchesFiniteDifferences) {
  NetworkConfig cfg;
  cfg.hidden = {6};
  cfg.embedding_dim = 3;
  cfg.seed = 9;
  EmbeddingNet net(cfg);
  const Tensor x = Tensor::matrix({{0.3, 1.2}, {-0.4, 0.9}, {1.1, -0.8}, {0.7, -1.3}});
  const std::vector<int> y{0, 0, 1, 1};
  for (std::size_t which = 0; which < net.parameters().size(); ++which) {
    const double err = grad_check(
        [&](Tape& tape, const Var& w) {
          auto theta = net.bind(tape);
          theta.vars[which] = w;
          auto e = net.embed(theta, tape.constant(x));
          return supervised_loss(classify(e, compute_prototypes(e, y, 2, Domain::source)), y);
        },
        net.parameters().entries()[which].value, 1e-6);
    EXPECT_LE(err, 1e-4) << net.parameters().entries()[which].name;
  }
}

TEST(EmbeddingNet, LeNetGradientMatchesFiniteDifferences) {
  NetworkConfig cfg;
  cfg.arch = Architecture::lenet2conv;
  cfg.image_height = cfg.image_width = 18;
  cfg.conv_filters = {2, 3};
  cfg.conv_kernel = 3;
  cfg.fc_width = 5;
  cfg.embedding_dim = 3;
  EmbeddingNet net(cfg);
  Rng rng(5);
  Tensor x(Shape{4, 324});
  for (auto& v : x.data()) v = rng.uniform();
  // Zero biases put relu exactly on its kink wherever a patch is all zero.
  for (auto& e : net.parameters().entries())
    if (e.value.rank() == 1)
      for (auto& v : e.value.data()) v = rng.uniform(0.05, 0.2);
  const std::vector<int> y{0, 1, 0, 1};
  for (const char* name : {"conv0.weight", "conv1.bias", "fc0.weight"}) {
    std::size_t which = 0;
    while (net.parameters().entries()[which].name != name) ++which;
    const double err = grad_check(
        [&](Tape& tape, const Var& w) {
          auto theta = net.bind(tape);
          theta.vars[which] = w;
          auto e = net.embed(theta, tape.constant(x));
          return supervised_loss(classify(e, compute_prototypes(e, y, 2, Domain::source)), y);
        },
        net.parameters().at(name), 1e-6);
    EXPECT_LE(err, 1e-4) << name;
  }
}
