#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "adreg/geometry.hpp"
#include "adreg/io.hpp"
#include "adreg/model.hpp"
#include "adreg/nnet.hpp"

namespace adreg {

struct LossWeights {
  double alpha = 4.0;  // rotation
  double beta = 1.0;   // translation
  double gamma = 1.0;  // diffusion
};

/// |t_est - t_gt|; gradient w.r.t. t_est, zero at the minimum.
double translation_loss(const Eigen::Vector3d& est, const Eigen::Vector3d& gt, Eigen::Vector3d* grad = nullptr);
/// |R_estᵀ R_gt - I|_F; gradient w.r.t. R_est, zero at the minimum.
double rotation_loss(const Eigen::Matrix3d& est, const Eigen::Matrix3d& gt, Eigen::Matrix3d* grad = nullptr);
/// Mean squared error over all entries.
double diffusion_loss(const nn::Matrix& c0_hat, const nn::Matrix& c_gt, nn::Matrix* grad = nullptr);

struct LossTerms {
  double trans = 0.0;  // summed over both stages
  double rot = 0.0;
  double diff = 0.0;
  double total = 0.0;
};

struct LossGrads {
  Eigen::Matrix3d coarse_rotation = Eigen::Matrix3d::Zero();
  Eigen::Vector3d coarse_translation = Eigen::Vector3d::Zero();
  Eigen::Matrix3d fine_rotation = Eigen::Matrix3d::Zero();
  Eigen::Vector3d fine_translation = Eigen::Vector3d::Zero();
  nn::Matrix c0;
};

/// β·ΣL_trans + α·ΣL_rot + γ·L_diff over the coarse and fine estimates.
LossTerms loss_total(const RigidTransform& coarse, const RigidTransform& fine, const RigidTransform& gt,
                     const nn::Matrix& c0_hat, const nn::Matrix& c_gt, const LossWeights& w,
                     LossGrads* grads = nullptr);

struct SyntheticPair : RegistrationPair {
  std::vector<char> source_outlier;  // per point, 1 for injected outlier-cluster points
  std::vector<char> target_outlier;
};

/// Ground patch, walls and blobs inside a 15 m radius; the target is the transformed source plus
/// Gaussian jitter. Each side then gets its own outlier clusters (n/32 points each) at 40–50 m
/// range, on azimuths interleaved between the two sides.
SyntheticPair gen_synthetic_pair(std::mt19937_64& rng, int n_points, double max_rot_deg, double max_trans,
                                 double jitter, int outlier_clusters);

/// `count` pairs from the config's synthetic settings, pair i drawn from derive_seed(seed, i).
std::vector<SyntheticPair> make_synthetic_set(const RunConfig& cfg, std::uint64_t seed, int count);
std::vector<RegistrationPair> as_registration_pairs(const std::vector<SyntheticPair>& pairs);

/// pair_XXXX_src.bin / pair_XXXX_tgt.bin plus gt.txt with one pose line per pair.
void write_pair_directory(const std::filesystem::path& dir, const std::vector<RegistrationPair>& pairs);
std::vector<RegistrationPair> read_pair_directory(const std::filesystem::path& dir);

/// Learning rate for a 0-based epoch: lr · decay^floor(epoch / every).
double learning_rate_at(const RunConfig& cfg, int epoch);

struct PairStep {
  LossTerms terms;
  RigidTransform coarse;
  RigidTransform fine;
  nn::Matrix target;  // C_gt in diffusion space
};

/// Forward and backward pass on one pair in training mode. Parameter gradients are accumulated
/// (scaled by `grad_scale`), not zeroed. Gradients of the fine terms also reach the coarse stage
/// through the transform that warps the fine source. C_gt is a stop-gradient target; passing
/// `fixed_target` replaces it (gradient checks hold it constant this way).
PairStep train_pair(Model& model, const RegistrationPair& pair, std::uint64_t seed, double grad_scale = 1.0,
                    const nn::Matrix* fixed_target = nullptr);

/// Loss of one pair without touching gradients; uses the same random draws as train_pair.
LossTerms pair_loss(Model& model, const RegistrationPair& pair, std::uint64_t seed,
                    const nn::Matrix* fixed_target = nullptr);

struct EpochLog {
  int epoch = 0;
  double loss_trans = 0.0;
  double loss_rot = 0.0;
  double loss_diff = 0.0;
  double loss_total = 0.0;
  double val_rte = 0.0;
  double val_rre = 0.0;
  double lr = 0.0;
};

/// `epoch,loss_trans,loss_rot,loss_diff,val_rte,val_rre`.
std::string format_training_log(const std::vector<EpochLog>& log);

struct TrainResult {
  Checkpoint checkpoint;  // last good state when aborted
  std::vector<EpochLog> log;
  bool aborted = false;
  std::string message;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Adam over shuffled minibatches; the learning rate follows learning_rate_at. A non-finite loss
/// stops training and returns the checkpoint of the last completed epoch.
TrainResult train(const RunConfig& cfg, const std::vector<RegistrationPair>& train_set,
                  const std::vector<RegistrationPair>& val_set, const EpochCallback& on_epoch = {});

}  // namespace adreg
