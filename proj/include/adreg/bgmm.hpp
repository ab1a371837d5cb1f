#pragma once

#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "adreg/geometry.hpp"

namespace adreg {

struct GaussianComponent {
  double weight = 0.0;
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  Eigen::Matrix3d covariance = Eigen::Matrix3d::Identity();
};

struct GmmModel {
  std::vector<GaussianComponent> components;
  std::vector<int> assignment;  // per point, argmax responsibility

  int size() const { return static_cast<int>(components.size()); }
};

struct GmmFitOptions {
  int clusters = 8;
  int max_iters = 100;
  double tol = 1e-6;          // on the per-point mean log-likelihood gain
  std::uint64_t seed = 0;
  double covariance_floor = 1e-4;  // m², lower bound on covariance eigenvalues
  int kmeans_iters = 10;
};

/// Per-iteration record of an EM run. `reseeded[i]` marks iterations whose M-step re-seeded an
/// empty component, which is the only step allowed to lower the likelihood.
struct GmmFitTrace {
  std::vector<double> log_likelihood;
  std::vector<char> reseeded;
};

/// EM over a full-covariance mixture, seeded by k-means++ and 10 Lloyd iterations. Points are
/// processed in lexicographic coordinate order, which makes the fit independent of input order.
GmmModel fit_gmm(const Points& pts, const GmmFitOptions& opts, GmmFitTrace* trace = nullptr);

/// Σᵢ log Σⱼ πⱼ N(xᵢ | μⱼ, Σⱼ) with log-sum-exp over components.
double gmm_log_likelihood(const GmmModel& model, const Points& pts);

/// Hard assignment of each point to its most responsible component.
std::vector<int> assign_components(const GmmModel& model, const Points& pts);

struct OutlierRejection {
  std::vector<char> source_kept;  // per point
  std::vector<char> target_kept;
  std::vector<char> source_outlier_components;  // per component
  std::vector<char> target_outlier_components;
  Points source;  // purified clouds, original order preserved
  Points target;
};

/// Drops components that are not among the k nearest same-side components of their nearest
/// cross-side counterpart (means compared by Euclidean distance), along with their points.
/// Components without any assigned point take no part in the matching. If a side would lose
/// every point, its component of the closest populated cross pair is kept.
OutlierRejection remove_outliers(const GmmModel& src, const Points& src_pts, const GmmModel& tgt,
                                 const Points& tgt_pts, int k);

}  // namespace adreg
