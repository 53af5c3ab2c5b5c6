#include <cmath>

#include <gtest/gtest.h>

#include "support/toys.hpp"

using namespace focalpyr;
using focalpyr::fixtures::random_tensor;

namespace {

bool all_zero(const Tensor& t) {
  if (!t.has_grad()) return true;
  for (double g : t.grad())
    if (g != 0.0) return false;
  return true;
}

Tensor image(Rng& rng, std::size_t c, std::size_t size) { return random_tensor(rng, {2, c, size, size}, 0, 1, false); }

}  // namespace

TEST(Linear, IdentityAndZeroWeight) {
  Rng rng(1);
  const Tensor x = random_tensor(rng, {3, 3}, -1, 1, false);
  LinearLayer id(Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Tensor::zeros({3}));
  EXPECT_EQ(id.forward(x).to_vector(), x.to_vector());
  LinearLayer zero(Tensor::zeros({2, 3}), Tensor::from({2}, {0.5, -1.5}));
  const Tensor y = zero.forward(x);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(y[r * 2], 0.5);
    EXPECT_EQ(y[r * 2 + 1], -1.5);
  }
  EXPECT_THROW(zero.forward(Tensor::zeros({3, 4})), DimensionError);
  EXPECT_THROW(LinearLayer(Tensor::zeros({2, 3}), Tensor::zeros({3})), DimensionError);
}

TEST(Linear, InitializationWithinFanInBound) {
  Rng rng(2);
  LinearLayer l(16, 8, rng);
  for (const Tensor& p : l.parameters())
    for (double v : p.data()) EXPECT_LE(std::abs(v), 1.0 / 4.0);
  Rng again(2);
  EXPECT_EQ(LinearLayer(16, 8, again).weight().to_vector(), l.weight().to_vector());
}

TEST(Linear, GradCheckAtTenRandomPoints) {
  Rng rng(3);
  for (int point = 0; point < 10; ++point) {
    LinearLayer l(4, 3, rng);
    std::vector<Tensor> wrt{random_tensor(rng, {5, 4}), l.weight(), l.bias()};
    EXPECT_LT(grad_check([&] { return fixtures::contract(l.forward(wrt[0])); }, wrt), 1e-4);
  }
}

TEST(Linear, FrozenLayerSurvivesTrainingBitIdentical) {
  Rng rng(4);
  LinearLayer frozen(6, 4, rng, true);
  LinearLayer trained(4, 1, rng);
  const auto before = frozen.weight().to_vector();
  const auto bias_before = frozen.bias().to_vector();
  std::vector<Tensor> params = frozen.parameters();
  for (const Tensor& p : trained.parameters()) params.push_back(p);
  AdamState opt;
  for (int step = 0; step < 20; ++step) {
    const Tensor x = random_tensor(rng, {4, 6}, -1, 1, false);
    Tensor loss = mean(square(trained.forward(relu(frozen.forward(x)))));
    zero_grad(params);
    backward(loss);
    adam_step(opt, params);
  }
  EXPECT_EQ(frozen.weight().to_vector(), before);
  EXPECT_EQ(frozen.bias().to_vector(), bias_before);
  EXPECT_TRUE(all_zero(frozen.weight()));
}

TEST(Conv5x5, PreservesSpatialSize) {
  Rng rng(5);
  Conv2dLayer conv(1, 1, rng);
  EXPECT_EQ(conv.forward(image(rng, 1, 14)).shape(), (Shape{2, 1, 14, 14}));
  NoGradGuard guard;
  for (std::size_t h = 5; h <= 64; h += 1)
    for (std::size_t w = 5; w <= 64; w += 7) {
      const Tensor out = conv.forward(Tensor::zeros({1, 1, h, w}));
      EXPECT_EQ(out.dim(2), h);
      EXPECT_EQ(out.dim(3), w);
    }
}

TEST(Conv5x5, DeltaKernelIsIdentity) {
  Rng rng(6);
  std::vector<double> k(25, 0.0);
  k[12] = 1.0;
  Conv2dLayer conv(Tensor::from({1, 1, 5, 5}, k), Tensor::zeros({1}));
  const Tensor x = image(rng, 1, 9);
  EXPECT_EQ(conv.forward(x).to_vector(), x.to_vector());
}

TEST(Conv5x5, ErrorsAndGradients) {
  Rng rng(7);
  Conv2dLayer conv(2, 3, rng);
  EXPECT_THROW(conv.forward(image(rng, 1, 8)), DimensionError);
  EXPECT_THROW(Conv2dLayer(Tensor::zeros({1, 1, 3, 3}), Tensor::zeros({1})), DimensionError);
  for (int point = 0; point < 10; ++point) {
    Conv2dLayer c(1, 1, rng);
    std::vector<Tensor> wrt{random_tensor(rng, {1, 1, 8, 8}), c.kernel(), c.bias()};
    EXPECT_LT(grad_check([&] { return fixtures::contract(c.forward(wrt[0])); }, wrt), 1e-4);
  }
}

TEST(Resize, SameSizeAndConstantMaps) {
  Rng rng(8);
  const Tensor x = image(rng, 3, 7);
  for (ResizeMode mode : {ResizeMode::nearest, ResizeMode::bilinear})
    EXPECT_EQ(resize_to(x, 7, 7, mode).to_vector(), x.to_vector());
  const Tensor c = Tensor::full({1, 2, 5, 3}, 0.37);
  for (ResizeMode mode : {ResizeMode::nearest, ResizeMode::bilinear})
    for (auto [h, w] : {std::pair{1, 1}, {14, 14}, {3, 11}, {40, 2}}) {
      const Tensor r = resize_to(c, h, w, mode);
      EXPECT_EQ(r.shape(), (Shape{1, 2, std::size_t(h), std::size_t(w)}));
      for (double v : r.data()) EXPECT_EQ(v, 0.37);
    }
}

// Half-pixel-center bilinear, computed by hand for each output pixel:
// source coordinate s = (o + 0.5) * in/out - 0.5, clamped to [0, in-1].
TEST(Resize, BilinearTwoByTwoToFourByFour) {
  const Tensor x = Tensor::from({1, 1, 2, 2}, {0, 1, 2, 3});
  const std::vector<double> expected{0.0, 0.25, 0.75, 1.0,  //
                                     0.5, 0.75, 1.25, 1.5,  //
                                     1.5, 1.75, 2.25, 2.5,  //
                                     2.0, 2.25, 2.75, 3.0};
  const Tensor r = resize_to(x, 4, 4, ResizeMode::bilinear);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(r[i], expected[i], 1e-15) << i;
}

TEST(Resize, NearestReplicatesValues) {
  const Tensor x = Tensor::from({1, 1, 2, 2}, {0, 1, 2, 3});
  const Tensor r = resize_to(x, 4, 4, ResizeMode::nearest);
  EXPECT_EQ(r.to_vector(), (std::vector<double>{0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3}));
  const Tensor down = resize_to(Tensor::from({1, 1, 4, 4}, r.to_vector()), 2, 2, ResizeMode::nearest);
  for (double v : down.data()) EXPECT_TRUE(v == 0 || v == 1 || v == 2 || v == 3);
}

TEST(Attention, SingleTokenReturnsValueProjection) {
  Rng rng(9);
  AttentionLayer attn(4, rng);
  const Tensor token = random_tensor(rng, {1, 1, 4}, -1, 1, false);
  const auto out = attn.forward_with_weights(token);
  EXPECT_EQ(out.weights.to_vector(), std::vector<double>{1.0});
  const Tensor expected = matmul(reshape(token, {1, 4}), transpose(attn.value_projection()));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.values[i], expected[i], 1e-15);
}

TEST(Attention, IdenticalTokensGetUniformWeights) {
  Rng rng(10);
  AttentionLayer attn(3, rng);
  std::vector<double> tokens;
  const auto one = fixtures::random_vector(rng, 3);
  for (int t = 0; t < 5; ++t) tokens.insert(tokens.end(), one.begin(), one.end());
  const auto out = attn.forward_with_weights(Tensor::from({1, 5, 3}, tokens));
  for (double w : out.weights.data()) EXPECT_NEAR(w, 0.2, 1e-15);
  EXPECT_THROW(attn.forward(Tensor::zeros({1, 5, 4})), DimensionError);
}

TEST(Attention, GradCheckIncludingProjections) {
  Rng rng(11);
  for (int point = 0; point < 10; ++point) {
    AttentionLayer attn(4, rng);
    std::vector<Tensor> wrt = attn.parameters();
    wrt.push_back(random_tensor(rng, {1, 3, 4}));
    EXPECT_LT(grad_check([&] { return fixtures::contract(attn.forward(wrt.back())); }, wrt), 1e-4);
  }
}

TEST(Backbone, ConvLevelsAndEmbeddingAreDeterministic) {
  Rng rng(12);
  const ToyBackbone b = ToyBackbone::conv(1, {2, 3, 4}, {32, 16}, rng);
  const Tensor img = image(rng, 1, 32);
  const BackboneOutput a = backbone_forward(b, img);
  const BackboneOutput again = backbone_forward(b, img);
  EXPECT_EQ(a.embedding.to_vector(), again.embedding.to_vector());
  EXPECT_EQ(a.embedding.shape(), (Shape{2, 4}));
  ASSERT_EQ(a.levels.size(), 3u);
  EXPECT_EQ(b.level_sizes(32), (std::vector<std::size_t>{16, 8, 4}));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(a.levels[i].dim(2), b.level_sizes(32)[i]);
  EXPECT_EQ(backbone_forward(b, image(rng, 1, 16)).levels.back().dim(2), 2u);
  EXPECT_THROW(backbone_forward(b, image(rng, 1, 24)), ConfigError);
}

TEST(Backbone, FrozenReceivesNoGradient) {
  Rng rng(13);
  const ToyBackbone b = ToyBackbone::conv(1, {2, 2}, {16}, rng, true);
  LinearLayer head(2, 1, rng);
  backward(mean(square(head.forward(b.forward(image(rng, 1, 16)).embedding))));
  for (const Tensor& p : b.parameters()) EXPECT_TRUE(all_zero(p));
  EXPECT_FALSE(all_zero(head.weight()));
}

TEST(Backbone, UnfrozenReceivesGradient) {
  Rng rng(14);
  const ToyBackbone b = ToyBackbone::dense(5, 4, rng, false);
  backward(sum(square(b.forward(random_tensor(rng, {3, 5}, -1, 1, false)).embedding)));
  bool any = false;
  for (const Tensor& p : b.parameters()) any = any || !all_zero(p);
  EXPECT_TRUE(any);
  EXPECT_TRUE(b.is_dense());
  EXPECT_THROW(b.forward(Tensor::zeros({3, 6})), ConfigError);
}
