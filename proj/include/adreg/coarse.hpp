#pragma once

#include <random>
#include <string>

#include "adreg/backbone.hpp"
#include "adreg/geometry.hpp"
#include "adreg/nnet.hpp"

namespace adreg {

inline constexpr int kGeometricChannels = 10;

/// Per-candidate features, one row per (source point i, candidate k) at row i*K + k.
struct CandidateFeatures {
  IndexMatrix candidates;  // N x K target indices
  nn::Matrix geometric;    // [s, t, s - t, |s - t|]
  nn::Matrix descriptor;   // [d_s, d_t, u_s, u_t] plus cosine similarity when requested
  bool with_similarity = true;

  Eigen::Index rows() const { return candidates.rows(); }
  Eigen::Index k() const { return candidates.cols(); }
  nn::Matrix concatenated() const;
};

/// Descriptor width of the per-candidate F_D block for descriptor width `c`.
inline int descriptor_channels(int c, bool with_similarity) { return 2 * c + 2 + (with_similarity ? 1 : 0); }

/// Builds features for given candidates. `src_points` replaces `src.points` for the geometric
/// block (the fine stage passes the warped source).
CandidateFeatures assemble_candidate_features(const Points& src_points, const FeatureSet& src, const FeatureSet& tgt,
                                              const IndexMatrix& candidates, bool with_similarity);

/// Descriptor-space KNN for the top-k candidates, then the full feature set with similarity.
CandidateFeatures build_candidate_features(const FeatureSet& src, const FeatureSet& tgt, int k);

/// Gradient of the candidate features with respect to their inputs. Accumulates into the outputs,
/// which must already be sized like the inputs.
void candidate_features_backward(const Points& src_points, const FeatureSet& src, const FeatureSet& tgt,
                                 const CandidateFeatures& f, const nn::Matrix& grad_geometric,
                                 const nn::Matrix& grad_descriptor, Points& grad_src_points, FeatureGrad& grad_src,
                                 FeatureGrad& grad_tgt);

/// Cosine similarity with 0 when either vector is (numerically) zero.
double cosine_similarity(const Eigen::Ref<const Eigen::RowVectorXd>& a, const Eigen::Ref<const Eigen::RowVectorXd>& b);

/// Shared per-candidate CBR stack (64, 64, 32) with a scalar head, softmax over each row of K.
class CandidatePredictor {
 public:
  struct Cache {
    nn::CbrStack::Cache net;
    nn::Matrix weights;
  };

  CandidatePredictor() = default;
  CandidatePredictor(int geometric_width, int descriptor_width);

  void init(std::mt19937_64& rng);
  nn::Matrix forward(const CandidateFeatures& f, nn::Mode mode, Cache* cache = nullptr);
  /// Returns d/d(concatenated features).
  nn::Matrix backward(const Cache& cache, const nn::Matrix& grad_weights);

  void visit(const std::string& prefix, const nn::ParamVisitor& fn) { net_.visit(prefix, fn); }
  void visit_buffers(const std::string& prefix, const nn::BufferVisitor& fn) { net_.visit_buffers(prefix, fn); }
  int in() const { return net_.in(); }

 private:
  nn::CbrStack net_;
};

struct FusedCandidates {
  Points points;           // N x 3
  nn::Matrix descriptors;  // N x C
};

FusedCandidates fuse_candidates(const nn::Matrix& weights, const IndexMatrix& candidates, const Points& tgt_points,
                                const nn::Matrix& tgt_descriptors);

/// Accumulates into `grad_weights` (N x K), `grad_tgt_points` and `grad_tgt_descriptors`.
void fuse_candidates_backward(const nn::Matrix& weights, const IndexMatrix& candidates, const Points& tgt_points,
                              const nn::Matrix& tgt_descriptors, const Points& grad_points,
                              const nn::Matrix& grad_descriptors, nn::Matrix& grad_weights, Points& grad_tgt_points,
                              nn::Matrix& grad_tgt_descriptors);

/// MLP (64, 1) with a sigmoid, one confidence per row of fused descriptors.
class ConfidenceHead {
 public:
  struct Cache {
    nn::Mlp::Cache mlp;
    nn::Matrix out;
  };

  ConfidenceHead() = default;
  explicit ConfidenceHead(int width);

  void init(std::mt19937_64& rng) { mlp_.init(rng); }
  Eigen::VectorXd forward(const nn::Matrix& fused_descriptors, Cache* cache = nullptr) const;
  nn::Matrix backward(const Cache& cache, const Eigen::VectorXd& grad_out);
  void visit(const std::string& prefix, const nn::ParamVisitor& fn) { mlp_.visit(prefix, fn); }
  int in() const { return width_; }

 private:
  int width_ = 0;
  nn::Mlp mlp_;
};

inline constexpr double kWeightFloor = 1e-12;

struct WeightedSvdCache {
  Points src, tgt;
  Eigen::VectorXd normalized;  // w / sum(w)
  double total = 0.0;
  Eigen::Vector3d src_centroid, tgt_centroid;
  Eigen::Matrix3d u, v;
  Eigen::Vector3d sigma;
  double det_sign = 1.0;
  Eigen::Matrix3d rotation;
};

struct WeightedSvdGrad {
  Points src;
  Points tgt;
  Eigen::VectorXd weights;
};

/// Minimizes Σ wᵢ |R sᵢ + t - tᵢ|² with det(R) = +1. Throws DegeneracyError for fewer than three
/// points, a non-positive weight sum, or rank(H) < 2.
RigidTransform weighted_svd(const Points& src, const Points& tgt, const Eigen::VectorXd& weights,
                            WeightedSvdCache* cache = nullptr);

/// Gradient of a loss through weighted_svd given dL/dR and dL/dt.
WeightedSvdGrad weighted_svd_backward(const WeightedSvdCache& cache, const Eigen::Matrix3d& grad_rotation,
                                      const Eigen::Vector3d& grad_translation);

/// Learned parts of the coarse stage.
struct CoarseHead {
  CandidatePredictor predictor;
  ConfidenceHead confidence;

  CoarseHead() = default;
  explicit CoarseHead(int descriptor_width);
  void init(std::mt19937_64& rng);
  void visit(const std::string& prefix, const nn::ParamVisitor& fn);
  void visit_buffers(const std::string& prefix, const nn::BufferVisitor& fn);
};

/// One forward pass from purified superpoints to a transform, with everything needed for backward.
struct CoarseResult {
  RigidTransform transform;
  CandidateFeatures features;
  nn::Matrix weights;
  FusedCandidates fused;
  Eigen::VectorXd confidence;
  CandidatePredictor::Cache predictor_cache;
  ConfidenceHead::Cache confidence_cache;
  WeightedSvdCache svd_cache;
};

CoarseResult coarse_forward(CoarseHead& head, const FeatureSet& src, const FeatureSet& tgt, int k, nn::Mode mode,
                            bool keep_cache);

/// Backpropagates dL/dR, dL/dt into the head parameters and returns gradients on the two inputs.
void coarse_backward(CoarseHead& head, const FeatureSet& src, const FeatureSet& tgt, const CoarseResult& res,
                     const Eigen::Matrix3d& grad_rotation, const Eigen::Vector3d& grad_translation,
                     FeatureGrad& grad_src, FeatureGrad& grad_tgt);

}  // namespace adreg
