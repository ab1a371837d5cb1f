#include "adreg/bgmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "adreg/errors.hpp"

namespace adreg {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

Eigen::Matrix3d floor_covariance(const Eigen::Matrix3d& cov, double floor) {
  const Eigen::Matrix3d sym = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(sym);
  const Eigen::Vector3d ev = es.eigenvalues().cwiseMax(floor);
  const Eigen::Matrix3d out = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
  return 0.5 * (out + out.transpose());
}

struct ComponentDensity {
  Eigen::Matrix3d chol_l;
  double log_norm = 0.0;  // log π - 1.5 log 2π - 0.5 log|Σ|
};

std::vector<ComponentDensity> prepare(const GmmModel& model) {
  std::vector<ComponentDensity> out;
  out.reserve(model.components.size());
  for (const auto& c : model.components) {
    Eigen::LLT<Eigen::Matrix3d> llt(c.covariance);
    ComponentDensity d;
    d.chol_l = llt.matrixL();
    const double logdet = 2.0 * d.chol_l.diagonal().array().log().sum();
    d.log_norm = std::log(c.weight) - 1.5 * kLog2Pi - 0.5 * logdet;
    out.push_back(d);
  }
  return out;
}

/// log(π_j N(x | μ_j, Σ_j)) for every point/component, and per-point log-sum-exp.
void log_joint(const GmmModel& model, const Points& pts, Eigen::MatrixXd& logp, Eigen::VectorXd& ll) {
  const auto dens = prepare(model);
  const auto n = pts.rows();
  const int j_count = model.size();
  logp.resize(n, j_count);
  ll.resize(n);
  for (int j = 0; j < j_count; ++j) {
    const auto& c = model.components[static_cast<std::size_t>(j)];
    const auto& d = dens[static_cast<std::size_t>(j)];
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Vector3d diff = pts.row(i).transpose() - c.mean;
      const Eigen::Vector3d z = d.chol_l.triangularView<Eigen::Lower>().solve(diff);
      logp(i, j) = d.log_norm - 0.5 * z.squaredNorm();
    }
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = logp.row(i).maxCoeff();
    ll[i] = m + std::log((logp.row(i).array() - m).exp().sum());
  }
}

std::vector<int> argmax_rows(const Eigen::MatrixXd& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < m.cols(); ++j) {
      if (m(i, j) > m(i, best)) best = j;
    }
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

Eigen::Matrix3d sample_covariance(const Points& pts, const Eigen::Vector3d& mean) {
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (Eigen::Index i = 0; i < pts.rows(); ++i) {
    const Eigen::Vector3d d = pts.row(i).transpose() - mean;
    cov += d * d.transpose();
  }
  return pts.rows() > 0 ? Eigen::Matrix3d(cov / static_cast<double>(pts.rows())) : cov;
}

/// k-means++ seeding followed by Lloyd iterations; returns the initial mixture.
GmmModel kmeans_init(const Points& pts, const GmmFitOptions& opts) {
  const auto n = pts.rows();
  const int j_count = opts.clusters;
  std::mt19937_64 rng(opts.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<Eigen::Vector3d> centers;
  centers.push_back(pts.row(static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(n))).transpose());
  Eigen::VectorXd d2 = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  while (static_cast<int>(centers.size()) < j_count) {
    for (Eigen::Index i = 0; i < n; ++i) d2[i] = std::min(d2[i], (pts.row(i).transpose() - centers.back()).squaredNorm());
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double r = unit(rng) * total;
      for (pick = 0; pick < n - 1; ++pick) {
        r -= d2[pick];
        if (r < 0.0) break;
      }
    } else {
      pick = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(n));
    }
    centers.push_back(pts.row(pick).transpose());
  }

  std::vector<int> label(static_cast<std::size_t>(n), 0);
  for (int it = 0; it < opts.kmeans_iters; ++it) {
    for (Eigen::Index i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int j = 0; j < j_count; ++j) {
        const double d = (pts.row(i).transpose() - centers[static_cast<std::size_t>(j)]).squaredNorm();
        if (d < best) {
          best = d;
          label[static_cast<std::size_t>(i)] = j;
        }
      }
    }
    std::vector<Eigen::Vector3d> sum(static_cast<std::size_t>(j_count), Eigen::Vector3d::Zero());
    std::vector<int> count(static_cast<std::size_t>(j_count), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sum[static_cast<std::size_t>(label[static_cast<std::size_t>(i)])] += pts.row(i).transpose();
      ++count[static_cast<std::size_t>(label[static_cast<std::size_t>(i)])];
    }
    for (int j = 0; j < j_count; ++j) {
      if (count[static_cast<std::size_t>(j)] > 0) centers[static_cast<std::size_t>(j)] = sum[static_cast<std::size_t>(j)] / count[static_cast<std::size_t>(j)];
    }
  }

  Eigen::Vector3d centroid = pts.colwise().mean().transpose();
  const Eigen::Matrix3d global_cov = floor_covariance(sample_covariance(pts, centroid), opts.covariance_floor);
  GmmModel model;
  model.components.resize(static_cast<std::size_t>(j_count));
  std::vector<Eigen::Matrix3d> scatter(static_cast<std::size_t>(j_count), Eigen::Matrix3d::Zero());
  std::vector<int> count(static_cast<std::size_t>(j_count), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto j = static_cast<std::size_t>(label[static_cast<std::size_t>(i)]);
    const Eigen::Vector3d d = pts.row(i).transpose() - centers[j];
    scatter[j] += d * d.transpose();
    ++count[j];
  }
  double wsum = 0.0;
  for (int j = 0; j < j_count; ++j) {
    auto& c = model.components[static_cast<std::size_t>(j)];
    const int cnt = count[static_cast<std::size_t>(j)];
    c.mean = centers[static_cast<std::size_t>(j)];
    c.weight = std::max(cnt, 1) / static_cast<double>(n);
    c.covariance = cnt > 1 ? floor_covariance(scatter[static_cast<std::size_t>(j)] / cnt, opts.covariance_floor) : global_cov;
    wsum += c.weight;
  }
  for (auto& c : model.components) c.weight /= wsum;
  return model;
}

}  // namespace

double gmm_log_likelihood(const GmmModel& model, const Points& pts) {
  Eigen::MatrixXd logp;
  Eigen::VectorXd ll;
  log_joint(model, pts, logp, ll);
  return ll.sum();
}

std::vector<int> assign_components(const GmmModel& model, const Points& pts) {
  Eigen::MatrixXd logp;
  Eigen::VectorXd ll;
  log_joint(model, pts, logp, ll);
  return argmax_rows(logp);
}

GmmModel fit_gmm(const Points& input, const GmmFitOptions& opts, GmmFitTrace* trace) {
  const auto n = input.rows();
  const int j_count = opts.clusters;
  if (j_count < 1) throw ArgumentError("fit_gmm: need at least one component");
  if (n < j_count) {
    throw ArgumentError("fit_gmm: " + std::to_string(n) + " points cannot support " + std::to_string(j_count) +
                        " components");
  }

  // Canonical (lexicographic) order so that shuffled inputs give identical fits.
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    for (int k = 0; k < 3; ++k) {
      if (input(a, k) != input(b, k)) return input(a, k) < input(b, k);
    }
    return a < b;
  });
  Points pts(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) pts.row(i) = input.row(order[static_cast<std::size_t>(i)]);

  GmmModel model = kmeans_init(pts, opts);
  Eigen::MatrixXd logp, resp;
  Eigen::VectorXd ll;
  double prev = -std::numeric_limits<double>::infinity();
  const Eigen::Vector3d centroid = pts.colwise().mean().transpose();
  const Eigen::Matrix3d global_cov = floor_covariance(sample_covariance(pts, centroid), opts.covariance_floor);

  for (int it = 0; it < opts.max_iters; ++it) {
    log_joint(model, pts, logp, ll);
    const double total = ll.sum();
    if (trace) trace->log_likelihood.push_back(total);
    const double gain = (total - prev) / static_cast<double>(n);
    if (it > 0 && gain < opts.tol) break;
    prev = total;

    // M-step.
    resp = (logp.colwise() - ll).array().exp();
    bool reseeded = false;
    for (int j = 0; j < j_count; ++j) {
      auto& c = model.components[static_cast<std::size_t>(j)];
      const double nj = resp.col(j).sum();
      if (nj < 1e-8) {
        // Empty component: move it to the point the mixture explains worst.
        Eigen::Index worst = 0;
        ll.minCoeff(&worst);
        c.mean = pts.row(worst).transpose();
        c.covariance = global_cov;
        c.weight = 1.0 / static_cast<double>(n);
        reseeded = true;
        continue;
      }
      Eigen::Vector3d mean = (resp.col(j).transpose() * pts).transpose() / nj;
      Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
      for (Eigen::Index i = 0; i < n; ++i) {
        const Eigen::Vector3d d = pts.row(i).transpose() - mean;
        cov += resp(i, j) * (d * d.transpose());
      }
      c.mean = mean;
      c.covariance = floor_covariance(cov / nj, opts.covariance_floor);
      c.weight = nj / static_cast<double>(n);
    }
    double wsum = 0.0;
    for (const auto& c : model.components) wsum += c.weight;
    for (auto& c : model.components) c.weight /= wsum;
    if (trace) trace->reseeded.push_back(reseeded ? 1 : 0);
  }
  if (trace) trace->reseeded.resize(trace->log_likelihood.size(), 0);

  log_joint(model, pts, logp, ll);
  const auto sorted_assign = argmax_rows(logp);
  model.assignment.assign(static_cast<std::size_t>(n), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    model.assignment[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = sorted_assign[static_cast<std::size_t>(i)];
  }
  return model;
}

namespace {

std::vector<int> populated(const GmmModel& model, std::size_t n_points) {
  std::vector<int> count(model.components.size(), 0);
  if (model.assignment.size() != n_points) throw ArgumentError("remove_outliers: assignment length does not match cloud");
  for (int a : model.assignment) {
    if (a < 0 || a >= model.size()) throw ArgumentError("remove_outliers: assignment index out of range");
    ++count[static_cast<std::size_t>(a)];
  }
  std::vector<int> out;
  for (int j = 0; j < model.size(); ++j) {
    if (count[static_cast<std::size_t>(j)] > 0) out.push_back(j);
  }
  return out;
}

/// Marks components of `own` that fail the rule against `other`.
std::vector<char> flag_outliers(const GmmModel& own, const std::vector<int>& own_live, const GmmModel& other,
                                const std::vector<int>& other_live, int k) {
  std::vector<char> outlier(own.components.size(), 0);
  auto dist = [](const GaussianComponent& a, const GaussianComponent& b) { return (a.mean - b.mean).squaredNorm(); };
  for (int i : own_live) {
    const auto& ci = own.components[static_cast<std::size_t>(i)];
    int nearest = -1;
    double best = std::numeric_limits<double>::infinity();
    for (int j : other_live) {
      const double d = dist(ci, other.components[static_cast<std::size_t>(j)]);
      if (d < best) {
        best = d;
        nearest = j;
      }
    }
    // k nearest own-side components of that counterpart, ties to the lower index.
    const auto& cj = other.components[static_cast<std::size_t>(nearest)];
    std::vector<std::pair<double, int>> ranked;
    for (int m : own_live) ranked.emplace_back(dist(own.components[static_cast<std::size_t>(m)], cj), m);
    std::sort(ranked.begin(), ranked.end());
    const auto top = std::min<std::size_t>(static_cast<std::size_t>(k), ranked.size());
    bool found = false;
    for (std::size_t r = 0; r < top; ++r) found = found || ranked[r].second == i;
    outlier[static_cast<std::size_t>(i)] = found ? 0 : 1;
  }
  return outlier;
}

}  // namespace

OutlierRejection remove_outliers(const GmmModel& src, const Points& src_pts, const GmmModel& tgt,
                                 const Points& tgt_pts, int k) {
  if (k < 1) throw ArgumentError("remove_outliers: k must be >= 1");
  if (k > src.size() || k > tgt.size()) {
    throw ArgumentError("remove_outliers: k=" + std::to_string(k) + " exceeds the component count");
  }
  const auto src_live = populated(src, static_cast<std::size_t>(src_pts.rows()));
  const auto tgt_live = populated(tgt, static_cast<std::size_t>(tgt_pts.rows()));

  OutlierRejection out;
  if (src_live.empty() || tgt_live.empty()) {
    out.source_outlier_components.assign(src.components.size(), 0);
    out.target_outlier_components.assign(tgt.components.size(), 0);
  } else {
    out.source_outlier_components = flag_outliers(src, src_live, tgt, tgt_live, k);
    out.target_outlier_components = flag_outliers(tgt, tgt_live, src, src_live, k);

    auto all_dropped = [](const std::vector<char>& flags, const std::vector<int>& live) {
      return std::all_of(live.begin(), live.end(), [&](int j) { return flags[static_cast<std::size_t>(j)] != 0; });
    };
    if (all_dropped(out.source_outlier_components, src_live) || all_dropped(out.target_outlier_components, tgt_live)) {
      int bi = src_live.front(), bj = tgt_live.front();
      double best = std::numeric_limits<double>::infinity();
      for (int i : src_live) {
        for (int j : tgt_live) {
          const double d = (src.components[static_cast<std::size_t>(i)].mean - tgt.components[static_cast<std::size_t>(j)].mean).squaredNorm();
          if (d < best) {
            best = d;
            bi = i;
            bj = j;
          }
        }
      }
      if (all_dropped(out.source_outlier_components, src_live)) out.source_outlier_components[static_cast<std::size_t>(bi)] = 0;
      if (all_dropped(out.target_outlier_components, tgt_live)) out.target_outlier_components[static_cast<std::size_t>(bj)] = 0;
    }
  }

  auto apply = [](const GmmModel& model, const std::vector<char>& flags, const Points& pts, std::vector<char>& kept,
                  Points& purified) {
    kept.resize(static_cast<std::size_t>(pts.rows()));
    Eigen::Index count = 0;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      kept[static_cast<std::size_t>(i)] = flags[static_cast<std::size_t>(model.assignment[static_cast<std::size_t>(i)])] ? 0 : 1;
      count += kept[static_cast<std::size_t>(i)];
    }
    purified.resize(count, 3);
    Eigen::Index r = 0;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) {
      if (kept[static_cast<std::size_t>(i)]) purified.row(r++) = pts.row(i);
    }
  };
  apply(src, out.source_outlier_components, src_pts, out.source_kept, out.source);
  apply(tgt, out.target_outlier_components, tgt_pts, out.target_kept, out.target);
  return out;
}

}  // namespace adreg
