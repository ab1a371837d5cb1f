#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "adreg/backbone.hpp"
#include "adreg/bgmm.hpp"
#include "adreg/coarse.hpp"
#include "adreg/diffusion.hpp"
#include "adreg/io.hpp"
#include "adreg/nnet.hpp"

namespace adreg {

/// A source/target pair with its ground-truth source-to-target transform.
struct RegistrationPair {
  Points source;
  Points target;
  RigidTransform gt;
};

/// splitmix64 of (base, tag); used to give every random consumer its own stream.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag);

/// All trainable state plus the configuration it was built from.
class Model {
 public:
  explicit Model(const RunConfig& cfg);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;

  void init(std::uint64_t seed);

  void visit(const nn::ParamVisitor& fn);
  void visit_buffers(const nn::BufferVisitor& fn);
  std::vector<nn::Parameter*> parameters();
  void zero_grad();

  /// Parameters, buffers, config snapshot and (optionally) the Adam state.
  Checkpoint to_checkpoint(const nn::Adam* optimizer = nullptr);
  /// Rebuilds the model from a checkpoint's config snapshot and loads every tensor by name.
  /// Throws CheckpointError on a missing tensor or a size mismatch.
  static Model from_checkpoint(const Checkpoint& ckpt, nn::Adam* optimizer = nullptr);

  RunConfig config;
  Backbone backbone;
  CoarseHead coarse;
  FineHead fine;
  NoiseSchedule schedule;
};

/// Coarse and fine superpoints after bidirectional GMM rejection.
struct PurifiedSets {
  FeatureSet src_coarse, tgt_coarse;
  FeatureSet src_fine, tgt_fine;
  std::vector<char> src_coarse_keep, tgt_coarse_keep;
  std::vector<char> src_fine_keep, tgt_fine_keep;
  bool filtered = true;  // false when rejection left too few points and the raw sets were used
};

/// Fits J-component mixtures to both coarse sets, drops outlier components and carries the
/// decision down to the fine sets by assigning fine points to the coarse mixtures.
PurifiedSets purify(const BackboneOutput& src, const BackboneOutput& tgt, const RunConfig& cfg, std::uint64_t seed);

struct RegistrationDiagnostics {
  Eigen::Index src_coarse_kept = 0, tgt_coarse_kept = 0;
  Eigen::Index src_fine_kept = 0, tgt_fine_kept = 0;
  bool filtered = true;
  double mean_coarse_confidence = 0.0;
  Eigen::VectorXd coarse_confidence;
};

struct RegistrationOutput {
  RigidTransform coarse;
  RigidTransform fine;
  InferenceResult inference;
  RegistrationDiagnostics diagnostics;
};

struct RegisterOptions {
  std::optional<int> sampling_steps;  // overrides config S
  std::optional<int> candidates;      // overrides config K (both stages)
  std::uint64_t seed = 0;
};

/// Full pipeline in evaluation mode. Stage failures are rethrown with the stage name prefixed.
RegistrationOutput register_pair(Model& model, const Points& src, const Points& tgt, const RegisterOptions& opts);

}  // namespace adreg
