#include <gtest/gtest.h>

#include "adreg/diffusion.hpp"
#include "adreg/errors.hpp"
#include "gradcheck_suite.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace adreg;
using adreg::testing::random_feature_set;
using adreg::testing::random_matrix;
using adreg::testing::random_points;

TEST(Diffusion, ScheduleValues) {
  const NoiseSchedule one = make_schedule(1, 1e-4, 0.02);
  EXPECT_EQ(one.alpha_bar[0], 1.0);
  EXPECT_NEAR(one.alpha_bar[1], 1.0 - 1e-4, 1e-15);

  const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  double prod = 1.0;
  for (int t = 1; t <= 1000; ++t) {
    const double beta = 1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0;
    EXPECT_NEAR(s.beta[t], beta, 1e-15);
    prod *= 1.0 - beta;
    EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
  }
  EXPECT_NEAR(s.alpha_bar[1000], prod, 1e-15);
  EXPECT_NEAR(s.alpha_bar[1000], 4.0e-5, 0.1e-5);
  EXPECT_THROW(make_schedule(0, 1e-4, 0.02), ArgumentError);
  EXPECT_THROW(make_schedule(10, 0.5, 0.1), ArgumentError);
  EXPECT_THROW(make_schedule(10, 0.0, 0.1), ArgumentError);
}

TEST(Diffusion, QSampleRoundTrip) {
  const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  std::mt19937_64 rng(1);
  const nn::Matrix c0 = random_matrix(rng, 7, 3), eps = random_matrix(rng, 7, 3);
  for (int t : {1, 10, 500, 1000}) {
    const nn::Matrix ct = q_sample(s, c0, t, eps);
    EXPECT_LT((recover_noise(s, c0, ct, t) - eps).cwiseAbs().maxCoeff(), 1e-12);
  }
  const nn::Matrix zero = q_sample(s, c0, 300, nn::Matrix::Zero(7, 3));
  EXPECT_LT((zero - std::sqrt(s.alpha_bar[300]) * c0).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((q_sample(s, c0, 1000, eps) - eps).cwiseAbs().maxCoeff(), 0.02);
  EXPECT_THROW(q_sample(s, c0, 0, eps), ArgumentError);
  EXPECT_THROW(q_sample(s, c0, 1001, eps), ArgumentError);
}

TEST(Diffusion, SinkhornUniformAndMarginals) {
  const nn::Matrix u = sinkhorn(nn::Matrix::Zero(4, 6), 0.1, 10);
  EXPECT_LT((u.array() - 1.0 / 24.0).abs().maxCoeff(), 1e-15);

  std::mt19937_64 rng(2);
  const nn::Matrix cost = random_matrix(rng, 32, 32).cwiseAbs();
  const nn::Matrix p = sinkhorn(cost, 0.1, 100);
  EXPECT_GT(p.minCoeff(), 0.0);
  EXPECT_LT((p.rowwise().sum().array() - 1.0 / 32).abs().maxCoeff(), 1e-4);
  EXPECT_LT((p.colwise().sum().array() - 1.0 / 32).abs().maxCoeff(), 1e-4);
  EXPECT_LT((sinkhorn_log(cost, 0.1, 100).array().exp().matrix() - p).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Diffusion, SinkhornRecoversPermutation) {
  std::mt19937_64 rng(3);
  std::vector<int> perm(16);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  nn::Matrix cost = nn::Matrix::Constant(16, 16, 10.0);
  for (int i = 0; i < 16; ++i) cost(i, perm[i]) -= 1.0;
  const nn::Matrix p = sinkhorn(cost, 0.01, 100);
  for (int i = 0; i < 16; ++i) {
    Eigen::Index j;
    p.row(i).maxCoeff(&j);
    EXPECT_EQ(j, perm[i]);
  }
}

TEST(Diffusion, GtCorrespondenceExactMatches) {
  std::mt19937_64 rng(4);
  const Points s = random_points(rng, 40, 5);
  const RigidTransform gt = random_rigid_transform(rng, 20, 2);
  const Points t = apply_transform(gt, s);
  const GtCorrespondence c1 = build_gt_correspondence(s, t, gt, 1, 0.1, 100);
  for (int i = 0; i < 40; ++i) {
    EXPECT_EQ(c1.candidates(i, 0), i);
    EXPECT_NEAR(c1.probabilities(i, 0), 1.0, 1e-12);
    EXPECT_NEAR(c1.values(i, 0), 1.0, 1e-12);
  }
}

TEST(Diffusion, GtCorrespondenceUnderJitter) {
  std::mt19937_64 rng(5);
  const Points s = random_points(rng, 128, 10);
  const RigidTransform gt = random_rigid_transform(rng, 10, 2);
  const Points t = apply_transform(gt, s) + 0.01 * random_points(rng, 128, 1);
  const GtCorrespondence c = build_gt_correspondence(s, t, gt, 3, 0.1, 100);
  int hits = 0;
  for (int i = 0; i < 128; ++i) {
    Eigen::Index k;
    c.probabilities.row(i).maxCoeff(&k);
    hits += c.candidates(i, k) == i;
    EXPECT_NEAR(c.probabilities.row(i).sum(), 1.0, 1e-9);
  }
  EXPECT_GE(hits, static_cast<int>(0.95 * 128));
  EXPECT_LT((c.values - to_diffusion_space(c.probabilities)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((from_diffusion_space(c.values) - c.probabilities).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Diffusion, TimeEmbedding) {
  const Eigen::RowVectorXd e = time_embedding(250, 1000);
  ASSERT_EQ(e.size(), kTimeEmbedding);
  for (int i = 0; i < 8; ++i) {
    const double a = 0.25 * M_PI * std::pow(2.0, i);
    EXPECT_NEAR(e(2 * i), std::sin(a), 1e-12);
    EXPECT_NEAR(e(2 * i + 1), std::cos(a), 1e-12);
  }
}

TEST(Diffusion, DenoiserShapesAndZeroNetwork) {
  std::mt19937_64 rng(6);
  const FeatureSet s = random_feature_set(rng, 9, 5), t = random_feature_set(rng, 9, 5);
  const IndexMatrix cand = knn_search(s.points, t.points, 3).indices;
  const CandidateFeatures f = assemble_candidate_features(s.points, s, t, cand, false);
  EXPECT_EQ(f.descriptor.cols(), descriptor_channels(5, false));
  Denoiser d(5, 1000);
  d.init(rng);
  EXPECT_EQ(d.in(), 1 + kTimeEmbedding + kGeometricChannels + descriptor_channels(5, false));
  const nn::Matrix ct = random_matrix(rng, 9, 3);
  const nn::Matrix out = d.forward(ct, 500, f, nn::Mode::Eval);
  EXPECT_EQ(out.rows(), 9);
  EXPECT_EQ(out.cols(), 3);
  d.visit("", [](const std::string&, nn::Parameter& p) { p.value.setZero(); });
  EXPECT_EQ(d.forward(ct, 500, f, nn::Mode::Eval).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(d.forward(random_matrix(rng, 9, 2), 500, f, nn::Mode::Eval), ArgumentError);
}

TEST(Diffusion, DenoiserAndFineStepGradients) {
  for (const auto& r : {adreg::testing::check_denoiser(41), adreg::testing::check_fine_step(42)}) {
    EXPECT_LT(r.max_rel_error, 1e-3) << r.path << " " << r.worst;
    EXPECT_LT(r.max_zero_grad, 1e-6) << r.path;
  }
}

TEST(Diffusion, DecodeWeights) {
  nn::Matrix c(2, 3);
  c << 1, -1, -1, 0.3, 0.3, 0.3;
  const nn::Matrix w = decode_weights(c, 0.02);
  EXPECT_NEAR(w(0, 0), 1.0, 1e-15);
  EXPECT_LT((w.row(1).array() - 1.0 / 3).abs().maxCoeff(), 1e-15);
}

TEST(Diffusion, OneHotCorrespondenceRecoversTransform) {
  std::mt19937_64 rng(7);
  FeatureSet t = random_feature_set(rng, 30, 4);
  ConfidenceHead conf(4);
  conf.init(rng);
  for (const RigidTransform& offset : {RigidTransform::identity(), random_rigid_transform(rng, 15, 1)}) {
    // warped source whose true matches are the target rows under `offset`
    const Points warped = apply_transform(invert(offset), Points(t.points));
    const IndexMatrix cand = knn_search(warped, t.points, 3).indices;
    nn::Matrix c0 = nn::Matrix::Constant(30, 3, -1.0);
    for (int i = 0; i < 30; ++i) {
      for (int k = 0; k < 3; ++k) {
        if (cand(i, k) == i) c0(i, k) = 1.0;
      }
    }
    const StepResult r = correspondence_to_transform(c0, warped, cand, t, conf, 0.02, false);
    EXPECT_LT(adreg::testing::rotation_gap(r.step, offset), 1e-9);
    EXPECT_LT(adreg::testing::translation_gap(r.step, offset), 1e-9);
  }
}

TEST(Diffusion, UniformCorrespondenceGivesValidTransform) {
  std::mt19937_64 rng(8);
  const FeatureSet t = random_feature_set(rng, 20, 4);
  const Points warped = random_points(rng, 20, 3);
  const IndexMatrix cand = knn_search(warped, t.points, 3).indices;
  ConfidenceHead conf(4);
  conf.init(rng);
  const StepResult r = correspondence_to_transform(nn::Matrix::Zero(20, 3), warped, cand, t, conf, 0.02, false);
  EXPECT_TRUE(r.step.is_valid());
  for (int i = 0; i < 20; ++i) {
    Eigen::RowVector3d centroid = Eigen::RowVector3d::Zero();
    for (int k = 0; k < 3; ++k) centroid += t.points.row(cand(i, k)) / 3.0;
    EXPECT_LT((r.fused.points.row(i) - centroid).norm(), 1e-12);
  }
}

TEST(Diffusion, DdimTimesteps) {
  EXPECT_EQ(ddim_timesteps(1000, 1), (std::vector<int>{1000, 0}));
  EXPECT_EQ(ddim_timesteps(1000, 3), (std::vector<int>{1000, 667, 333, 0}));
  EXPECT_EQ(ddim_timesteps(1000, 10).size(), 11u);
}

TEST(Diffusion, DdimStepBoundaryAndErrors) {
  const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  std::mt19937_64 rng(9);
  const nn::Matrix ct = random_matrix(rng, 5, 3), c0 = random_matrix(rng, 5, 3);
  EXPECT_EQ(ddim_step(s, ct, c0, 400, 0), c0);
  EXPECT_EQ(ddim_step(s, ct, c0, 400, 100), ddim_step(s, ct, c0, 400, 100));
  EXPECT_THROW(ddim_step(s, ct, c0, 100, 100), ArgumentError);
  EXPECT_THROW(ddim_step(s, ct, c0, 100, 200), ArgumentError);
}

TEST(Diffusion, OracleDdimPathIndependence) {
  const NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
  std::mt19937_64 rng(10);
  const nn::Matrix c0 = random_matrix(rng, 6, 3);
  for (int steps : {1, 2, 3, 7, 10, 50}) {
    nn::Matrix c = random_matrix(rng, 6, 3);
    const auto ts = ddim_timesteps(1000, steps);
    for (std::size_t i = 0; i + 1 < ts.size(); ++i) c = ddim_step(s, c, c0, ts[i], ts[i + 1]);
    EXPECT_LT((c - c0).cwiseAbs().maxCoeff(), 1e-9) << "S=" << steps;
  }
}

TEST(Diffusion, OracleInferenceRecoversGroundTruth) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const auto r = adreg::testing::oracle_inference_trial(seed, 3, 3);
    EXPECT_LT(r.rte, 1e-6);
    EXPECT_LT(r.rre_deg, 1e-6);
  }
}

TEST(Diffusion, InferenceBufferAndFixedCandidates) {
  const auto r = adreg::testing::oracle_inference_trial(4, 3, 3);
  const InferenceResult& inf = r.inference;
  ASSERT_EQ(inf.steps.size(), 3u);
  RigidTransform running = r.coarse;
  for (const auto& st : inf.steps) {
    running = compose(st.step, running);
    EXPECT_LT(adreg::testing::rotation_gap(running, st.cumulative), 1e-12);
    EXPECT_LT(adreg::testing::translation_gap(running, st.cumulative), 1e-12);
    EXPECT_EQ(st.candidates, inf.candidates);
  }
  EXPECT_EQ(inf.steps.front().t, 1000);
  EXPECT_EQ(inf.steps.back().t_prev, 0);
  EXPECT_LT(adreg::testing::rotation_gap(inf.transform, inf.steps.back().cumulative), 1e-15);
}

TEST(Diffusion, SingleStepInferenceIsValid) {
  const auto r = adreg::testing::oracle_inference_trial(5, 1, 1);
  EXPECT_EQ(r.inference.steps.size(), 1u);
  EXPECT_TRUE(r.inference.transform.is_valid());
}

TEST(Diffusion, NanCorrespondenceAborts) {
  std::mt19937_64 rng(11);
  const FeatureSet s = random_feature_set(rng, 20, 4), t = random_feature_set(rng, 20, 4);
  ConfidenceHead conf(4);
  conf.init(rng);
  const NoiseSchedule sched = make_schedule(1000, 1e-4, 0.02);
  DenoiseFn bad = [](const DenoiseRequest& r) {
    return nn::Matrix::Constant(r.ct.rows(), r.ct.cols(), std::numeric_limits<double>::quiet_NaN());
  };
  EXPECT_THROW(autoregressive_infer(RigidTransform::identity(), s, t, bad, conf, sched, {}), NumericalError);
}
