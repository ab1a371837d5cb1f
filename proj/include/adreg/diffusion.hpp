#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "adreg/backbone.hpp"
#include "adreg/coarse.hpp"
#include "adreg/geometry.hpp"
#include "adreg/nnet.hpp"

namespace adreg {

/// Linear β ramp. Arrays are indexed 0..T with β₀ = 0 and ᾱ₀ = 1.
struct NoiseSchedule {
  int steps = 0;  // T
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
};

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end);

/// c_t = sqrt(ᾱ_t) c0 + sqrt(1 - ᾱ_t) ε for 1 <= t <= T.
nn::Matrix q_sample(const NoiseSchedule& s, const nn::Matrix& c0, int t, const nn::Matrix& eps);
/// The noise implied by (c0, c_t): (c_t - sqrt(ᾱ_t) c0) / sqrt(1 - ᾱ_t).
nn::Matrix recover_noise(const NoiseSchedule& s, const nn::Matrix& c0, const nn::Matrix& ct, int t);

/// Entropic transport plan with uniform marginals, scaled in the log domain. The last half-step
/// scales columns, so column marginals are exact and row marginals carry the residual.
nn::Matrix sinkhorn(const nn::Matrix& cost, double eps, int iters);
/// Natural log of the same plan; finite even where the plan underflows.
nn::Matrix sinkhorn_log(const nn::Matrix& cost, double eps, int iters);

inline nn::Matrix to_diffusion_space(const nn::Matrix& p) { return (2.0 * p.array() - 1.0).matrix(); }
inline nn::Matrix from_diffusion_space(const nn::Matrix& c) { return ((c.array() + 1.0) * 0.5).matrix(); }

struct GtCorrespondence {
  nn::Matrix probabilities;  // N x K, rows sum to 1
  nn::Matrix values;         // 2p - 1
  IndexMatrix candidates;    // N x K target indices
};

/// Warps `src` by `gt`, solves Sinkhorn on pairwise distances, gathers each row's plan entries at
/// its k nearest targets (by coordinate, around the warped source) and renormalizes.
GtCorrespondence build_gt_correspondence(const Points& src, const Points& tgt, const RigidTransform& gt, int k,
                                         double sinkhorn_eps, int sinkhorn_iters);
/// Same, gathered on a fixed candidate matrix.
GtCorrespondence build_gt_correspondence(const Points& src, const Points& tgt, const RigidTransform& gt,
                                         const IndexMatrix& candidates, double sinkhorn_eps, int sinkhorn_iters);

inline constexpr int kTimeEmbedding = 16;

/// sin/cos pairs of (t/T)·π·2^i for i = 0..7.
Eigen::RowVectorXd time_embedding(int t, int steps);

/// Per-candidate CBR stack (64, 64, 32) with a scalar head over [c_t, time, F_G, F_D].
class Denoiser {
 public:
  struct Cache {
    nn::CbrStack::Cache net;
  };

  Denoiser() = default;
  Denoiser(int descriptor_width, int steps);

  void init(std::mt19937_64& rng);
  nn::Matrix forward(const nn::Matrix& ct, int t, const CandidateFeatures& f, nn::Mode mode, Cache* cache = nullptr);
  /// Returns the input gradient split into the F_G and F_D blocks.
  void backward(const Cache& cache, const nn::Matrix& grad_out, nn::Matrix& grad_geometric, nn::Matrix& grad_descriptor);

  void visit(const std::string& prefix, const nn::ParamVisitor& fn) { net_.visit(prefix, fn); }
  void visit_buffers(const std::string& prefix, const nn::BufferVisitor& fn) { net_.visit_buffers(prefix, fn); }
  int steps() const { return steps_; }
  int in() const { return net_.in(); }

 private:
  int steps_ = 0;
  nn::CbrStack net_;
};

/// softmax over each row of ((c + 1) / 2) / τ.
nn::Matrix decode_weights(const nn::Matrix& c0_hat, double temperature);
nn::Matrix decode_weights_backward(const nn::Matrix& weights, const nn::Matrix& grad_weights, double temperature);

struct StepResult {
  RigidTransform step;
  nn::Matrix weights;
  FusedCandidates fused;
  Eigen::VectorXd confidence;
  ConfidenceHead::Cache confidence_cache;
  WeightedSvdCache svd_cache;
};

/// Decodes Ĉ₀ into candidate weights, fuses targets, scores them and solves the weighted SVD
/// between the current warped source and the fused targets.
StepResult correspondence_to_transform(const nn::Matrix& c0_hat, const Points& warped_src,
                                       const IndexMatrix& candidates, const FeatureSet& tgt,
                                       const ConfidenceHead& confidence, double temperature, bool keep_cache);

/// Gradients of dL/dR, dL/dt of the step with respect to Ĉ₀, the warped source and the target set.
void correspondence_to_transform_backward(const StepResult& res, const nn::Matrix& c0_hat,
                                          const IndexMatrix& candidates, const FeatureSet& tgt,
                                          ConfidenceHead& confidence, double temperature,
                                          const Eigen::Matrix3d& grad_rotation, const Eigen::Vector3d& grad_translation,
                                          nn::Matrix& grad_c0, Points& grad_warped, FeatureGrad& grad_tgt);

/// S + 1 integers evenly spaced from T down to 0.
std::vector<int> ddim_timesteps(int steps, int sampling_steps);

/// ε = (c_t - sqrt(ᾱ_t) Ĉ₀)/sqrt(1 - ᾱ_t); returns sqrt(ᾱ_prev) Ĉ₀ + sqrt(1 - ᾱ_prev - σ²) ε + σ z.
nn::Matrix ddim_step(const NoiseSchedule& s, const nn::Matrix& ct, const nn::Matrix& c0_hat, int t, int t_prev,
                     double sigma = 0.0, const nn::Matrix* z = nullptr);

struct DenoiseRequest {
  const nn::Matrix& ct;
  int t;
  const CandidateFeatures& features;  // F_G from the current warped source, F_D without similarity
  const Points& warped_src;
};
using DenoiseFn = std::function<nn::Matrix(const DenoiseRequest&)>;

struct InferenceStep {
  int t = 0;
  int t_prev = 0;
  RigidTransform step;
  RigidTransform cumulative;
  double mean_abs_c0 = 0.0;
  IndexMatrix candidates;  // the fixed candidate matrix as seen by this step
};

struct InferenceResult {
  RigidTransform transform;
  std::vector<InferenceStep> steps;
  IndexMatrix candidates;
};

struct InferenceOptions {
  int candidates = 3;  // K
  int sampling_steps = 3;  // S
  double temperature = 0.02;
  std::uint64_t seed = 0;
};

/// Autoregressive refinement: candidates are fixed by coordinate KNN around the coarsely warped
/// source; each step predicts Ĉ₀, solves a step transform, left-multiplies it onto the running
/// product and advances the correspondence by one DDIM step. Throws NumericalError on NaN.
InferenceResult autoregressive_infer(const RigidTransform& coarse, const FeatureSet& src, const FeatureSet& tgt,
                                     const DenoiseFn& denoise, const ConfidenceHead& confidence,
                                     const NoiseSchedule& schedule, const InferenceOptions& opts);

/// Learned parts of the fine stage.
struct FineHead {
  Denoiser denoiser;
  ConfidenceHead confidence;

  FineHead() = default;
  FineHead(int descriptor_width, int steps);
  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const nn::ParamVisitor& fn);
  void visit_buffers(const std::string& prefix, const nn::BufferVisitor& fn);
  /// The network as a DenoiseFn in evaluation mode.
  DenoiseFn as_denoise_fn();
};

}  // namespace adreg
