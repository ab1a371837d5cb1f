#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace adreg {

/// N x 3 coordinates in meters, one point per row.
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using IndexMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct PointCloud {
  Points points;

  PointCloud() = default;
  /// Throws ArgumentError if any coordinate is not finite.
  explicit PointCloud(Points pts);

  Eigen::Index size() const { return points.rows(); }
  bool empty() const { return points.rows() == 0; }
};

class RigidTransform {
 public:
  RigidTransform() : rotation_(Eigen::Matrix3d::Identity()), translation_(Eigen::Vector3d::Zero()) {}
  RigidTransform(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation)
      : rotation_(rotation), translation_(translation) {}

  static RigidTransform identity() { return {}; }
  static RigidTransform from_axis_angle(const Eigen::Vector3d& axis, double angle_rad,
                                        const Eigen::Vector3d& translation = Eigen::Vector3d::Zero());

  const Eigen::Matrix3d& rotation() const { return rotation_; }
  const Eigen::Vector3d& translation() const { return translation_; }

  /// RᵀR = I and det(R) = +1 within `tol`, translation finite.
  bool is_valid(double tol = 1e-9) const;

  RigidTransform inverse() const;
  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation_ * p + translation_; }
  /// Rotation angle in radians, in [0, pi].
  double angle() const;

  /// Row-major 3x4 [R | t].
  Eigen::Matrix<double, 3, 4> matrix3x4() const;

 private:
  Eigen::Matrix3d rotation_;
  Eigen::Vector3d translation_;
};

/// Applies `b` first, then `a`.
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
RigidTransform invert(const RigidTransform& t);
Points apply_transform(const RigidTransform& t, const Points& pts);
PointCloud apply_transform(const RigidTransform& t, const PointCloud& cloud);

/// Nearest rotation to `m` in Frobenius norm (U Vᵀ with the determinant forced to +1).
Eigen::Matrix3d project_to_rotation(const Eigen::Matrix3d& m);

/// One centroid per occupied voxel, ordered by (floor(x/v), floor(y/v), floor(z/v)).
PointCloud voxel_downsample(const PointCloud& cloud, double voxel);

/// Greedy farthest point sampling starting at `start`. With weights, each step picks the
/// unchosen point maximizing weight × min-distance to the chosen set. Ties go to the lower index.
std::vector<int> farthest_point_sample_from(const Points& pts, int n, std::optional<std::span<const double>> weights,
                                            int start);
/// As above with the first point drawn uniformly from a generator seeded with `seed`.
std::vector<int> farthest_point_sample(const Points& pts, int n, std::optional<std::span<const double>> weights,
                                       std::uint64_t seed);

struct NeighborSet {
  IndexMatrix indices;       // queries x k
  Eigen::MatrixXd distances; // queries x k, ascending per row

  Eigen::Index rows() const { return indices.rows(); }
  Eigen::Index k() const { return indices.cols(); }
};

/// k nearest targets per query by Euclidean distance, ties broken by lower target index.
/// Uses a kd-tree above kKdTreeThreshold targets and brute force otherwise.
NeighborSet knn_search(const Points& queries, const Points& targets, int k);
NeighborSet knn_search_brute(const Points& queries, const Points& targets, int k);

/// Brute-force k nearest neighbors between rows of arbitrary-width feature matrices.
NeighborSet knn_search_features(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& targets, int k);

inline constexpr Eigen::Index kKdTreeThreshold = 1024;

/// Static 3-d tree over a borrowed point matrix; queries are read-only.
class KdTree {
 public:
  explicit KdTree(const Points& pts);
  KdTree(const KdTree&) = delete;
  KdTree& operator=(const KdTree&) = delete;

  /// Fills `out_idx`/`out_dist` (length k) for a single query.
  void query(const Eigen::Vector3d& q, int k, int* out_idx, double* out_dist) const;

 private:
  struct Node {
    int begin, end;  // range in order_
    int left = -1, right = -1;
    int axis = -1;   // -1 for leaves
    double split = 0.0;
  };
  int build(int begin, int end);

  const Points& pts_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
};

/// Rotation about a uniformly random axis with angle uniform in [0, max_rot_deg]; each translation
/// component uniform in [-max_trans, max_trans].
RigidTransform random_rigid_transform(std::mt19937_64& rng, double max_rot_deg, double max_trans);

inline double deg2rad(double d) { return d * M_PI / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / M_PI; }

}  // namespace adreg
