#include <gtest/gtest.h>

#include <set>

#include "adreg/backbone.hpp"
#include "adreg/errors.hpp"
#include "gradcheck_suite.hpp"
#include "test_util.hpp"

using namespace adreg;
using adreg::testing::random_feature_set;
using adreg::testing::random_points;

TEST(Backbone, DefaultTable) {
  const auto l = default_layer_configs();
  ASSERT_EQ(l.size(), 3u);
  EXPECT_EQ(l[0].points, 1024);
  EXPECT_EQ(l[0].group, 64);
  EXPECT_EQ(l[0].detector, (std::vector<int>{32, 32, 64}));
  EXPECT_EQ(l[0].descriptor, (std::vector<int>{32, 32, 64}));
  EXPECT_EQ(l[1].points, 512);
  EXPECT_EQ(l[1].group, 32);
  EXPECT_EQ(l[1].descriptor, (std::vector<int>{64, 64, 128}));
  EXPECT_EQ(l[2].points, 256);
  EXPECT_EQ(l[2].group, 16);
  EXPECT_EQ(l[2].descriptor, (std::vector<int>{128, 128, 256}));

  const auto q = default_layer_configs(0.25);
  EXPECT_EQ(q[0].points, 256);
  EXPECT_EQ(q[1].points, 128);
  EXPECT_EQ(q[2].points, 64);
  EXPECT_EQ(q[2].group, 16);
}

TEST(Backbone, FullScaleShapes) {
  std::mt19937_64 rng(1);
  Backbone b(default_layer_configs());
  b.init(rng);
  const BackboneOutput o = b.forward(random_points(rng, 2048, 20), 3, nn::Mode::Eval);
  EXPECT_EQ(o.fine.size(), 512);
  EXPECT_EQ(o.fine.width(), 128);
  EXPECT_EQ(o.coarse.size(), 256);
  EXPECT_EQ(o.coarse.width(), 256);
}

TEST(Backbone, DeskScaleShapesAndDeterminism) {
  std::mt19937_64 rng(2);
  Backbone b(default_layer_configs(0.25));
  b.init(rng);
  const Points cloud = random_points(rng, 512, 15);
  const BackboneOutput a = b.forward(cloud, 9, nn::Mode::Eval);
  const BackboneOutput c = b.forward(cloud, 9, nn::Mode::Eval);
  EXPECT_EQ(a.coarse.size(), 64);
  EXPECT_EQ(a.fine.size(), 128);
  EXPECT_EQ(a.coarse.points, c.coarse.points);
  EXPECT_EQ(a.coarse.descriptors, c.coarse.descriptors);
  EXPECT_EQ(a.fine.uncertainties, c.fine.uncertainties);
  for (const FeatureSet* fs : {&a.fine, &a.coarse}) {
    EXPECT_EQ(fs->points.rows(), fs->descriptors.rows());
    EXPECT_EQ(fs->points.rows(), fs->uncertainties.size());
    EXPECT_GT(fs->uncertainties.minCoeff(), 0.0);
    EXPECT_LT(fs->uncertainties.maxCoeff(), 1.0);
  }
}

TEST(Backbone, TooSmallCloudThrows) {
  std::mt19937_64 rng(3);
  Backbone b(default_layer_configs(0.25));
  b.init(rng);
  EXPECT_THROW(b.forward(random_points(rng, 100, 5), 0, nn::Mode::Eval), ArgumentError);
}

TEST(Backbone, SelfGroupKeepsPoints) {
  std::mt19937_64 rng(4);
  const FeatureSet in = random_feature_set(rng, 16, 8);
  BackboneLayer layer({16, 1, {8, 8}, {8, 16}}, 8);
  layer.init(rng);
  BackboneLayer::Cache cache;
  const FeatureSet out = layer.forward(in, false, 5, nn::Mode::Train, &cache);
  ASSERT_EQ(out.size(), 16);
  for (int i = 0; i < 16; ++i) {
    EXPECT_EQ(cache.weights(i, 0), 1.0);
    EXPECT_EQ(out.points.row(i), in.points.row(cache.sampled[i]));
  }
}

TEST(Backbone, UniformWeightsGiveGroupCentroid) {
  std::mt19937_64 rng(5);
  const FeatureSet in = random_feature_set(rng, 40, 8);
  BackboneLayer layer({10, 4, {8, 8}, {8, 16}}, 8);
  layer.init(rng);
  layer.visit("", [](const std::string& name, nn::Parameter& p) {
    if (name.rfind("detector.", 0) == 0) p.value.setZero();
  });
  BackboneLayer::Cache cache;
  const FeatureSet out = layer.forward(in, true, 6, nn::Mode::Train, &cache);
  for (int i = 0; i < 10; ++i) {
    Eigen::RowVector3d centroid = Eigen::RowVector3d::Zero();
    for (int k = 0; k < 4; ++k) centroid += in.points.row(cache.groups(i, k));
    EXPECT_LT((out.points.row(i) - centroid / 4.0).norm(), 1e-12);
  }
}

TEST(Backbone, OutputsAreConvexCombinationsOfGroups) {
  std::mt19937_64 rng(6);
  const FeatureSet in = random_feature_set(rng, 60, 8);
  BackboneLayer layer({20, 6, {8, 8}, {8, 16}}, 8);
  layer.init(rng);
  BackboneLayer::Cache cache;
  const FeatureSet out = layer.forward(in, true, 7, nn::Mode::Train, &cache);
  EXPECT_EQ(out.width(), 16);
  for (int i = 0; i < 20; ++i) {
    EXPECT_GE(cache.weights.row(i).minCoeff(), 0.0);
    EXPECT_NEAR(cache.weights.row(i).sum(), 1.0, 1e-12);
    Eigen::RowVector3d p = Eigen::RowVector3d::Zero();
    for (int k = 0; k < 6; ++k) p += cache.weights(i, k) * in.points.row(cache.groups(i, k));
    EXPECT_LT((out.points.row(i) - p).norm(), 1e-12);
    // groups are the 6 nearest inputs of the sampled center
    const NeighborSet ns = knn_search(in.points.row(cache.sampled[i]), in.points, 6);
    for (int k = 0; k < 6; ++k) EXPECT_EQ(cache.groups(i, k), ns.indices(0, k));
  }
}

TEST(Backbone, GradientCheckOnToyCloud) {
  const auto r = adreg::testing::check_backbone(21);
  EXPECT_LT(r.max_rel_error, 1e-3) << r.worst;
  EXPECT_LT(r.max_zero_grad, 1e-6);
}
