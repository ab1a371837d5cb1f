#include "adreg/coarse.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/SVD>

#include "adreg/errors.hpp"

namespace adreg {

namespace {

constexpr double kNormGuard = 1e-12;

nn::Matrix flatten_rows(const nn::Matrix& m) {
  nn::Matrix out(m.size(), 1);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) out(i * m.cols() + j, 0) = m(i, j);
  }
  return out;
}

nn::Matrix unflatten_rows(const nn::Matrix& col, Eigen::Index rows, Eigen::Index cols) {
  nn::Matrix out(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = col(i * cols + j, 0);
  }
  return out;
}

}  // namespace

nn::Matrix CandidateFeatures::concatenated() const {
  nn::Matrix out(geometric.rows(), geometric.cols() + descriptor.cols());
  out << geometric, descriptor;
  return out;
}

double cosine_similarity(const Eigen::Ref<const Eigen::RowVectorXd>& a, const Eigen::Ref<const Eigen::RowVectorXd>& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na < kNormGuard || nb < kNormGuard) return 0.0;
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

CandidateFeatures assemble_candidate_features(const Points& src_points, const FeatureSet& src, const FeatureSet& tgt,
                                              const IndexMatrix& candidates, bool with_similarity) {
  if (src.width() != tgt.width()) throw ArgumentError("candidate features: descriptor widths differ");
  if (src_points.rows() != src.size() || candidates.rows() != src.size()) {
    throw ArgumentError("candidate features: source row counts differ");
  }
  const Eigen::Index n = candidates.rows();
  const Eigen::Index k = candidates.cols();
  const int c = src.width();
  CandidateFeatures f;
  f.candidates = candidates;
  f.with_similarity = with_similarity;
  f.geometric.resize(n * k, kGeometricChannels);
  f.descriptor.resize(n * k, descriptor_channels(c, with_similarity));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) {
      const int m = candidates(i, j);
      if (m < 0 || m >= tgt.size()) throw ArgumentError("candidate features: candidate index out of range");
      const Eigen::Index row = i * k + j;
      const Eigen::RowVector3d s = src_points.row(i);
      const Eigen::RowVector3d t = tgt.points.row(m);
      f.geometric.block<1, 3>(row, 0) = s;
      f.geometric.block<1, 3>(row, 3) = t;
      f.geometric.block<1, 3>(row, 6) = s - t;
      f.geometric(row, 9) = (s - t).norm();
      f.descriptor.block(row, 0, 1, c) = src.descriptors.row(i);
      f.descriptor.block(row, c, 1, c) = tgt.descriptors.row(m);
      f.descriptor(row, 2 * c) = src.uncertainties[i];
      f.descriptor(row, 2 * c + 1) = tgt.uncertainties[m];
      if (with_similarity) f.descriptor(row, 2 * c + 2) = cosine_similarity(src.descriptors.row(i), tgt.descriptors.row(m));
    }
  }
  return f;
}

CandidateFeatures build_candidate_features(const FeatureSet& src, const FeatureSet& tgt, int k) {
  if (src.width() != tgt.width()) throw ArgumentError("candidate features: descriptor widths differ");
  if (k < 1 || k > tgt.size()) {
    throw ArgumentError("candidate features: k = " + std::to_string(k) + " with " + std::to_string(tgt.size()) +
                        " targets");
  }
  const NeighborSet nbrs = knn_search_features(src.descriptors, tgt.descriptors, k);
  return assemble_candidate_features(src.points, src, tgt, nbrs.indices, true);
}

void candidate_features_backward(const Points& src_points, const FeatureSet& src, const FeatureSet& tgt,
                                 const CandidateFeatures& f, const nn::Matrix& grad_geometric,
                                 const nn::Matrix& grad_descriptor, Points& grad_src_points, FeatureGrad& grad_src,
                                 FeatureGrad& grad_tgt) {
  const Eigen::Index n = f.rows();
  const Eigen::Index k = f.k();
  const int c = src.width();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) {
      const int m = f.candidates(i, j);
      const Eigen::Index row = i * k + j;
      const Eigen::RowVector3d diff = src_points.row(i) - tgt.points.row(m);
      Eigen::RowVector3d gs = grad_geometric.block<1, 3>(row, 0) + grad_geometric.block<1, 3>(row, 6);
      Eigen::RowVector3d gt = grad_geometric.block<1, 3>(row, 3) - grad_geometric.block<1, 3>(row, 6);
      const double norm = diff.norm();
      if (norm > kNormGuard) {
        gs += grad_geometric(row, 9) * diff / norm;
        gt -= grad_geometric(row, 9) * diff / norm;
      }
      grad_src_points.row(i) += gs;
      grad_tgt.points.row(m) += gt;

      grad_src.descriptors.row(i) += grad_descriptor.block(row, 0, 1, c);
      grad_tgt.descriptors.row(m) += grad_descriptor.block(row, c, 1, c);
      grad_src.uncertainties[i] += grad_descriptor(row, 2 * c);
      grad_tgt.uncertainties[m] += grad_descriptor(row, 2 * c + 1);
      if (f.with_similarity) {
        const double g = grad_descriptor(row, 2 * c + 2);
        const auto a = src.descriptors.row(i);
        const auto b = tgt.descriptors.row(m);
        const double na = a.norm();
        const double nb = b.norm();
        if (g != 0.0 && na >= kNormGuard && nb >= kNormGuard) {
          const double cs = a.dot(b) / (na * nb);
          grad_src.descriptors.row(i) += g * (b / (na * nb) - cs * a / (na * na));
          grad_tgt.descriptors.row(m) += g * (a / (na * nb) - cs * b / (nb * nb));
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------

CandidatePredictor::CandidatePredictor(int geometric_width, int descriptor_width)
    : net_(geometric_width + descriptor_width, {64, 64, 32}, 1) {}

void CandidatePredictor::init(std::mt19937_64& rng) { net_.init(rng); }

nn::Matrix CandidatePredictor::forward(const CandidateFeatures& f, nn::Mode mode, Cache* cache) {
  if (f.geometric.cols() + f.descriptor.cols() != net_.in()) {
    throw ArgumentError("candidate predictor: expected " + std::to_string(net_.in()) + " channels, got " +
                        std::to_string(f.geometric.cols() + f.descriptor.cols()));
  }
  const nn::Matrix scores = net_.forward(f.concatenated(), mode, cache ? &cache->net : nullptr);
  nn::Matrix weights = nn::softmax_rows(unflatten_rows(scores, f.rows(), f.k()));
  if (cache) cache->weights = weights;
  return weights;
}

nn::Matrix CandidatePredictor::backward(const Cache& cache, const nn::Matrix& grad_weights) {
  const nn::Matrix g_scores = nn::softmax_rows_backward(cache.weights, grad_weights);
  return net_.backward(cache.net, flatten_rows(g_scores));
}

FusedCandidates fuse_candidates(const nn::Matrix& weights, const IndexMatrix& candidates, const Points& tgt_points,
                                const nn::Matrix& tgt_descriptors) {
  if (weights.rows() != candidates.rows() || weights.cols() != candidates.cols()) {
    throw ArgumentError("fuse_candidates: weight and candidate shapes differ");
  }
  FusedCandidates out;
  out.points = Points::Zero(weights.rows(), 3);
  out.descriptors = nn::Matrix::Zero(weights.rows(), tgt_descriptors.cols());
  for (Eigen::Index i = 0; i < weights.rows(); ++i) {
    for (Eigen::Index j = 0; j < weights.cols(); ++j) {
      out.points.row(i) += weights(i, j) * tgt_points.row(candidates(i, j));
      out.descriptors.row(i) += weights(i, j) * tgt_descriptors.row(candidates(i, j));
    }
  }
  return out;
}

void fuse_candidates_backward(const nn::Matrix& weights, const IndexMatrix& candidates, const Points& tgt_points,
                              const nn::Matrix& tgt_descriptors, const Points& grad_points,
                              const nn::Matrix& grad_descriptors, nn::Matrix& grad_weights, Points& grad_tgt_points,
                              nn::Matrix& grad_tgt_descriptors) {
  for (Eigen::Index i = 0; i < weights.rows(); ++i) {
    for (Eigen::Index j = 0; j < weights.cols(); ++j) {
      const int m = candidates(i, j);
      grad_weights(i, j) += grad_points.row(i).dot(tgt_points.row(m)) + grad_descriptors.row(i).dot(tgt_descriptors.row(m));
      grad_tgt_points.row(m) += weights(i, j) * grad_points.row(i);
      grad_tgt_descriptors.row(m) += weights(i, j) * grad_descriptors.row(i);
    }
  }
}

ConfidenceHead::ConfidenceHead(int width) : width_(width), mlp_(width, {64, 1}) {}

Eigen::VectorXd ConfidenceHead::forward(const nn::Matrix& fused_descriptors, Cache* cache) const {
  if (fused_descriptors.cols() != width_) {
    throw ArgumentError("confidence head: expected width " + std::to_string(width_) + ", got " +
                        std::to_string(fused_descriptors.cols()));
  }
  nn::Matrix out = nn::sigmoid(mlp_.forward(fused_descriptors, cache ? &cache->mlp : nullptr));
  if (cache) cache->out = out;
  return out.col(0);
}

nn::Matrix ConfidenceHead::backward(const Cache& cache, const Eigen::VectorXd& grad_out) {
  return mlp_.backward(cache.mlp, nn::sigmoid_backward(cache.out, nn::Matrix(grad_out)));
}

// ---------------------------------------------------------------------------
// Weighted SVD
// ---------------------------------------------------------------------------

RigidTransform weighted_svd(const Points& src, const Points& tgt, const Eigen::VectorXd& weights,
                            WeightedSvdCache* cache) {
  const Eigen::Index n = src.rows();
  if (tgt.rows() != n || weights.size() != n) throw ArgumentError("weighted_svd: row counts differ");
  if (n < 3) throw DegeneracyError("weighted_svd: need at least 3 correspondences, got " + std::to_string(n));
  if ((weights.array() < 0.0).any() || !weights.allFinite()) {
    throw DegeneracyError("weighted_svd: weights must be finite and nonnegative");
  }
  const double total = weights.sum();
  if (!(total > 0.0)) throw DegeneracyError("weighted_svd: weights sum to zero");

  const Eigen::VectorXd w = weights / total;
  const Eigen::Vector3d cs = (src.transpose() * w);
  const Eigen::Vector3d ct = (tgt.transpose() * w);
  const Eigen::Matrix3d h = src.transpose() * w.asDiagonal() * tgt - cs * ct.transpose();

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sigma = svd.singularValues();
  if (!(sigma[0] > 0.0) || sigma[1] <= 1e-10 * sigma[0]) {
    throw DegeneracyError("weighted_svd: degenerate geometry (rank(H) < 2)");
  }
  const Eigen::Matrix3d& u = svd.matrixU();
  const Eigen::Matrix3d& v = svd.matrixV();
  const double d = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  const Eigen::Matrix3d r = v * Eigen::Vector3d(1.0, 1.0, d).asDiagonal() * u.transpose();
  const Eigen::Vector3d t = ct - r * cs;

  if (cache) {
    cache->src = src;
    cache->tgt = tgt;
    cache->normalized = w;
    cache->total = total;
    cache->src_centroid = cs;
    cache->tgt_centroid = ct;
    cache->u = u;
    cache->v = v;
    cache->sigma = sigma;
    cache->det_sign = d;
    cache->rotation = r;
  }
  return {r, t};
}

WeightedSvdGrad weighted_svd_backward(const WeightedSvdCache& c, const Eigen::Matrix3d& grad_rotation,
                                      const Eigen::Vector3d& grad_translation) {
  const Eigen::Index n = c.src.rows();
  const Eigen::Matrix3d& r = c.rotation;

  // t = c_t - R c_s
  Eigen::Matrix3d g_r = grad_rotation - grad_translation * c.src_centroid.transpose();
  Eigen::Vector3d g_cs = -r.transpose() * grad_translation;
  Eigen::Vector3d g_ct = grad_translation;

  // R is the rotation factor of Hᵀ = R S with S = U diag(λ) Uᵀ.
  const Eigen::Vector3d lambda(c.sigma[0], c.sigma[1], c.det_sign * c.sigma[2]);
  const Eigen::Matrix3d x = c.u.transpose() * r.transpose() * g_r * c.u;
  Eigen::Matrix3d y = Eigen::Matrix3d::Zero();
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i == j) continue;
      const double den = lambda[i] + lambda[j];
      if (std::abs(den) > 1e-12 * std::max(1.0, c.sigma[0])) y(i, j) = x(i, j) / den;
    }
  }
  const Eigen::Matrix3d z = c.u * y * c.u.transpose();
  const Eigen::Matrix3d g_h = (r * (z - z.transpose())).transpose();

  WeightedSvdGrad out{Points::Zero(n, 3), Points::Zero(n, 3), Eigen::VectorXd::Zero(n)};
  g_cs -= g_h * c.tgt_centroid;
  g_ct -= g_h.transpose() * c.src_centroid;
  Eigen::VectorXd g_what(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Eigen::Vector3d s = c.src.row(i).transpose();
    const Eigen::Vector3d t = c.tgt.row(i).transpose();
    const double wi = c.normalized[i];
    g_what[i] = s.dot(g_h * t) + g_cs.dot(s) + g_ct.dot(t);
    out.src.row(i) = (wi * (g_h * t + g_cs)).transpose();
    out.tgt.row(i) = (wi * (g_h.transpose() * s + g_ct)).transpose();
  }
  const double mean = c.normalized.dot(g_what);
  out.weights = (g_what.array() - mean) / c.total;
  return out;
}

// ---------------------------------------------------------------------------
// Coarse head
// ---------------------------------------------------------------------------

CoarseHead::CoarseHead(int descriptor_width)
    : predictor(kGeometricChannels, descriptor_channels(descriptor_width, true)), confidence(descriptor_width) {}

void CoarseHead::init(std::mt19937_64& rng) {
  predictor.init(rng);
  confidence.init(rng);
}

void CoarseHead::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  predictor.visit(prefix + "predictor.", fn);
  confidence.visit(prefix + "confidence.", fn);
}

void CoarseHead::visit_buffers(const std::string& prefix, const nn::BufferVisitor& fn) {
  predictor.visit_buffers(prefix + "predictor.", fn);
}

CoarseResult coarse_forward(CoarseHead& head, const FeatureSet& src, const FeatureSet& tgt, int k, nn::Mode mode,
                            bool keep_cache) {
  CoarseResult res;
  res.features = build_candidate_features(src, tgt, k);
  res.weights = head.predictor.forward(res.features, mode, keep_cache ? &res.predictor_cache : nullptr);
  res.fused = fuse_candidates(res.weights, res.features.candidates, tgt.points, tgt.descriptors);
  res.confidence = head.confidence.forward(res.fused.descriptors, keep_cache ? &res.confidence_cache : nullptr);
  const Eigen::VectorXd w = res.confidence.array() + kWeightFloor;
  res.transform = weighted_svd(src.points, res.fused.points, w, keep_cache ? &res.svd_cache : nullptr);
  return res;
}

void coarse_backward(CoarseHead& head, const FeatureSet& src, const FeatureSet& tgt, const CoarseResult& res,
                     const Eigen::Matrix3d& grad_rotation, const Eigen::Vector3d& grad_translation,
                     FeatureGrad& grad_src, FeatureGrad& grad_tgt) {
  const WeightedSvdGrad g_svd = weighted_svd_backward(res.svd_cache, grad_rotation, grad_translation);
  grad_src.points += g_svd.src;
  const nn::Matrix g_fused_desc = head.confidence.backward(res.confidence_cache, g_svd.weights);

  nn::Matrix g_weights = nn::Matrix::Zero(res.weights.rows(), res.weights.cols());
  fuse_candidates_backward(res.weights, res.features.candidates, tgt.points, tgt.descriptors, g_svd.tgt, g_fused_desc,
                           g_weights, grad_tgt.points, grad_tgt.descriptors);
  const nn::Matrix g_in = head.predictor.backward(res.predictor_cache, g_weights);
  const nn::Matrix g_geo = g_in.leftCols(kGeometricChannels);
  const nn::Matrix g_desc = g_in.rightCols(g_in.cols() - kGeometricChannels);
  candidate_features_backward(src.points, src, tgt, res.features, g_geo, g_desc, grad_src.points, grad_src, grad_tgt);
}

}  // namespace adreg
