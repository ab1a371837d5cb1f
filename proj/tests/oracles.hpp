#pragma once

#include <random>

#include "adreg/diffusion.hpp"
#include "adreg/metrics.hpp"
#include "adreg/training.hpp"
#include "gradcheck_suite.hpp"

namespace adreg::testing {

struct OracleTrial {
  double rte = 0.0;
  double rre_deg = 0.0;
  RigidTransform coarse;
  InferenceResult inference;
};

/// Noiseless synthetic pair at fine-superpoint size, a coarse estimate a little off the truth, and
/// a denoiser that ignores its input and returns C_gt on the candidates it is shown.
inline OracleTrial oracle_inference_trial(std::uint64_t seed, int sampling_steps, int candidates) {
  std::mt19937_64 rng(seed);
  const SyntheticPair pair = gen_synthetic_pair(rng, 128, 10.0, 2.0, 0.0, 0);
  FeatureSet src = random_feature_set(rng, 128, 8), tgt = random_feature_set(rng, 128, 8);
  src.points = pair.source;
  tgt.points = pair.target;

  const RigidTransform nudge = random_rigid_transform(rng, 0.5, 0.05);
  OracleTrial out;
  out.coarse = compose(nudge, pair.gt);

  ConfidenceHead conf(8);
  conf.init(rng);
  const NoiseSchedule sched = make_schedule(1000, 1e-4, 0.02);
  DenoiseFn oracle = [&](const DenoiseRequest& req) {
    return build_gt_correspondence(src.points, tgt.points, pair.gt, req.features.candidates, 0.1, 100).values;
  };
  InferenceOptions opts;
  opts.sampling_steps = sampling_steps;
  opts.candidates = candidates;
  opts.seed = seed;
  out.inference = autoregressive_infer(out.coarse, src, tgt, oracle, conf, sched, opts);
  const PairMetrics m = registration_metrics(out.inference.transform, pair.gt);
  out.rte = m.rte;
  out.rre_deg = m.rre;
  return out;
}

}  // namespace adreg::testing
