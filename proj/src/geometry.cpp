#include "adreg/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <queue>
#include <string>

#include <Eigen/SVD>

#include "adreg/errors.hpp"

namespace adreg {

PointCloud::PointCloud(Points pts) : points(std::move(pts)) {
  if (!points.allFinite()) throw ArgumentError("point cloud contains non-finite coordinates");
}

RigidTransform RigidTransform::from_axis_angle(const Eigen::Vector3d& axis, double angle_rad,
                                               const Eigen::Vector3d& translation) {
  return {Eigen::AngleAxisd(angle_rad, axis.normalized()).toRotationMatrix(), translation};
}

bool RigidTransform::is_valid(double tol) const {
  if (!rotation_.allFinite() || !translation_.allFinite()) return false;
  const double ortho = (rotation_.transpose() * rotation_ - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  return ortho <= tol && std::abs(rotation_.determinant() - 1.0) <= tol;
}

RigidTransform RigidTransform::inverse() const {
  const Eigen::Matrix3d rt = rotation_.transpose();
  return {rt, -rt * translation_};
}

double RigidTransform::angle() const {
  // atan2 of (2 sin, 2 cos); same value as acos((tr - 1) / 2) but accurate near 0 and pi
  const Eigen::Matrix3d& r = rotation_;
  const Eigen::Vector3d v(r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1));
  return std::atan2(v.norm(), r.trace() - 1.0);
}

Eigen::Matrix<double, 3, 4> RigidTransform::matrix3x4() const {
  Eigen::Matrix<double, 3, 4> m;
  m.leftCols<3>() = rotation_;
  m.col(3) = translation_;
  return m;
}

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  return {a.rotation() * b.rotation(), a.rotation() * b.translation() + a.translation()};
}

RigidTransform invert(const RigidTransform& t) { return t.inverse(); }

Points apply_transform(const RigidTransform& t, const Points& pts) {
  Points out(pts.rows(), 3);
  out.noalias() = pts * t.rotation().transpose();
  out.rowwise() += t.translation().transpose();
  return out;
}

PointCloud apply_transform(const RigidTransform& t, const PointCloud& cloud) {
  PointCloud out;
  out.points = apply_transform(t, cloud.points);
  return out;
}

Eigen::Matrix3d project_to_rotation(const Eigen::Matrix3d& m) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Matrix3d u = svd.matrixU();
  const Eigen::Matrix3d v = svd.matrixV();
  Eigen::Vector3d d(1.0, 1.0, (u * v.transpose()).determinant() < 0.0 ? -1.0 : 1.0);
  return u * d.asDiagonal() * v.transpose();
}

PointCloud voxel_downsample(const PointCloud& cloud, double voxel) {
  if (!(voxel > 0.0)) throw ArgumentError("voxel size must be positive, got " + std::to_string(voxel));
  struct Acc {
    Eigen::Vector3d sum = Eigen::Vector3d::Zero();
    long count = 0;
  };
  std::map<std::array<std::int64_t, 3>, Acc> cells;
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    const Eigen::Vector3d p = cloud.points.row(i).transpose();
    std::array<std::int64_t, 3> key{};
    for (int a = 0; a < 3; ++a) key[a] = static_cast<std::int64_t>(std::floor(p[a] / voxel));
    auto& acc = cells[key];
    acc.sum += p;
    ++acc.count;
  }
  Points out(static_cast<Eigen::Index>(cells.size()), 3);
  Eigen::Index r = 0;
  for (const auto& [key, acc] : cells) out.row(r++) = (acc.sum / static_cast<double>(acc.count)).transpose();
  return PointCloud(std::move(out));
}

std::vector<int> farthest_point_sample_from(const Points& pts, int n, std::optional<std::span<const double>> weights,
                                            int start) {
  const auto total = static_cast<int>(pts.rows());
  if (n < 1 || n > total) {
    throw ArgumentError("farthest_point_sample: requested " + std::to_string(n) + " of " + std::to_string(total) +
                        " points");
  }
  if (start < 0 || start >= total) throw ArgumentError("farthest_point_sample: start index out of range");
  if (weights && static_cast<int>(weights->size()) != total) {
    throw ArgumentError("farthest_point_sample: weight count does not match cloud size");
  }

  std::vector<int> chosen;
  chosen.reserve(static_cast<std::size_t>(n));
  std::vector<double> min_d2(static_cast<std::size_t>(total), std::numeric_limits<double>::infinity());
  std::vector<char> taken(static_cast<std::size_t>(total), 0);

  int current = start;
  for (int step = 0; step < n; ++step) {
    chosen.push_back(current);
    taken[static_cast<std::size_t>(current)] = 1;
    if (step + 1 == n) break;
    const Eigen::RowVector3d c = pts.row(current);
    int best = -1;
    double best_score = -1.0;
    for (int i = 0; i < total; ++i) {
      const double dx = pts(i, 0) - c[0], dy = pts(i, 1) - c[1], dz = pts(i, 2) - c[2];
      const double d2 = dx * dx + dy * dy + dz * dz;
      auto& m = min_d2[static_cast<std::size_t>(i)];
      if (d2 < m) m = d2;
      if (taken[static_cast<std::size_t>(i)]) continue;
      double score = std::sqrt(m);
      if (weights) score *= (*weights)[static_cast<std::size_t>(i)];
      if (score > best_score) {
        best_score = score;
        best = i;
      }
    }
    current = best;
  }
  return chosen;
}

std::vector<int> farthest_point_sample(const Points& pts, int n, std::optional<std::span<const double>> weights,
                                       std::uint64_t seed) {
  if (pts.rows() == 0) throw ArgumentError("farthest_point_sample: empty cloud");
  std::mt19937_64 rng(seed);
  const int start = static_cast<int>(rng() % static_cast<std::uint64_t>(pts.rows()));
  return farthest_point_sample_from(pts, n, weights, start);
}

namespace {

inline double squared_distance(const Eigen::Vector3d& q, const Points& pts, int i) {
  const double dx = pts(i, 0) - q[0], dy = pts(i, 1) - q[1], dz = pts(i, 2) - q[2];
  return dx * dx + dy * dy + dz * dz;
}

// (squared distance, index) ordered lexicographically so equal distances resolve to lower index.
using Candidate = std::pair<double, int>;

void check_knn_args(Eigen::Index targets, int k) {
  if (k < 1) throw ArgumentError("knn_search: k must be >= 1");
  if (targets < k) {
    throw ArgumentError("knn_search: k=" + std::to_string(k) + " exceeds target count " + std::to_string(targets));
  }
}

}  // namespace

NeighborSet knn_search_brute(const Points& queries, const Points& targets, int k) {
  check_knn_args(targets.rows(), k);
  const auto nq = queries.rows();
  const auto nt = static_cast<int>(targets.rows());
  NeighborSet out{IndexMatrix(nq, k), Eigen::MatrixXd(nq, k)};
  std::vector<Candidate> cands(static_cast<std::size_t>(nt));
  for (Eigen::Index q = 0; q < nq; ++q) {
    const Eigen::Vector3d qp = queries.row(q).transpose();
    for (int i = 0; i < nt; ++i) cands[static_cast<std::size_t>(i)] = {squared_distance(qp, targets, i), i};
    std::partial_sort(cands.begin(), cands.begin() + k, cands.end());
    for (int j = 0; j < k; ++j) {
      out.indices(q, j) = cands[static_cast<std::size_t>(j)].second;
      out.distances(q, j) = std::sqrt(cands[static_cast<std::size_t>(j)].first);
    }
  }
  return out;
}

KdTree::KdTree(const Points& pts) : pts_(pts), order_(static_cast<std::size_t>(pts.rows())) {
  std::iota(order_.begin(), order_.end(), 0);
  if (!order_.empty()) build(0, static_cast<int>(order_.size()));
}

int KdTree::build(int begin, int end) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{begin, end});
  constexpr int kLeafSize = 16;
  if (end - begin <= kLeafSize) return id;

  // Split along the axis of largest extent.
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity());
  Eigen::Vector3d hi = -lo;
  for (int i = begin; i < end; ++i) {
    const Eigen::Vector3d p = pts_.row(order_[static_cast<std::size_t>(i)]).transpose();
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  const int mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](int a, int b) { return pts_(a, axis) < pts_(b, axis); });
  const double split = pts_(order_[static_cast<std::size_t>(mid)], axis);

  const int left = build(begin, mid);
  const int right = build(mid, end);
  auto& node = nodes_[static_cast<std::size_t>(id)];
  node.axis = axis;
  node.split = split;
  node.left = left;
  node.right = right;
  return id;
}

void KdTree::query(const Eigen::Vector3d& q, int k, int* out_idx, double* out_dist) const {
  // Max-heap of the best k candidates; top is the current worst.
  std::priority_queue<Candidate> heap;
  auto worst = [&]() { return static_cast<int>(heap.size()) < k ? std::numeric_limits<double>::infinity() : heap.top().first; };

  auto visit = [&](auto&& self, int id) -> void {
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    if (node.axis < 0) {
      for (int i = node.begin; i < node.end; ++i) {
        const int idx = order_[static_cast<std::size_t>(i)];
        const Candidate c{squared_distance(q, pts_, idx), idx};
        if (static_cast<int>(heap.size()) < k) {
          heap.push(c);
        } else if (c < heap.top()) {
          heap.pop();
          heap.push(c);
        }
      }
      return;
    }
    const double diff = q[node.axis] - node.split;
    const int near = diff < 0.0 ? node.left : node.right;
    const int far = diff < 0.0 ? node.right : node.left;
    self(self, near);
    // Points on the splitting plane can sit on either side; only prune strictly farther cells.
    if (diff * diff <= worst()) self(self, far);
  };
  visit(visit, 0);

  for (int j = k - 1; j >= 0; --j) {
    out_idx[j] = heap.top().second;
    out_dist[j] = std::sqrt(heap.top().first);
    heap.pop();
  }
}

NeighborSet knn_search(const Points& queries, const Points& targets, int k) {
  if (targets.rows() <= kKdTreeThreshold) return knn_search_brute(queries, targets, k);
  check_knn_args(targets.rows(), k);
  const KdTree tree(targets);
  NeighborSet out{IndexMatrix(queries.rows(), k), Eigen::MatrixXd(queries.rows(), k)};
  std::vector<int> idx(static_cast<std::size_t>(k));
  std::vector<double> dist(static_cast<std::size_t>(k));
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    tree.query(queries.row(q).transpose(), k, idx.data(), dist.data());
    for (int j = 0; j < k; ++j) {
      out.indices(q, j) = idx[static_cast<std::size_t>(j)];
      out.distances(q, j) = dist[static_cast<std::size_t>(j)];
    }
  }
  return out;
}

NeighborSet knn_search_features(const Eigen::MatrixXd& queries, const Eigen::MatrixXd& targets, int k) {
  check_knn_args(targets.rows(), k);
  if (queries.cols() != targets.cols()) throw ArgumentError("knn_search_features: feature widths differ");
  const auto nq = queries.rows();
  const auto nt = static_cast<int>(targets.rows());
  NeighborSet out{IndexMatrix(nq, k), Eigen::MatrixXd(nq, k)};
  std::vector<Candidate> cands(static_cast<std::size_t>(nt));
  for (Eigen::Index q = 0; q < nq; ++q) {
    for (int i = 0; i < nt; ++i) cands[static_cast<std::size_t>(i)] = {(targets.row(i) - queries.row(q)).squaredNorm(), i};
    std::partial_sort(cands.begin(), cands.begin() + k, cands.end());
    for (int j = 0; j < k; ++j) {
      out.indices(q, j) = cands[static_cast<std::size_t>(j)].second;
      out.distances(q, j) = std::sqrt(cands[static_cast<std::size_t>(j)].first);
    }
  }
  return out;
}

RigidTransform random_rigid_transform(std::mt19937_64& rng, double max_rot_deg, double max_trans) {
  if (max_rot_deg < 0.0 || max_trans < 0.0) throw ArgumentError("random_rigid_transform: negative bound");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Eigen::Vector3d axis;
  do {
    axis = Eigen::Vector3d(normal(rng), normal(rng), normal(rng));
  } while (axis.norm() < 1e-12);
  const double angle = deg2rad(max_rot_deg) * unit(rng);
  Eigen::Vector3d t;
  for (int a = 0; a < 3; ++a) t[a] = max_trans * (2.0 * unit(rng) - 1.0);
  return RigidTransform::from_axis_angle(axis, angle, t);
}

}  // namespace adreg
