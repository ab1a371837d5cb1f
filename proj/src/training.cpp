#include "adreg/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "adreg/errors.hpp"
#include "adreg/metrics.hpp"

namespace adreg {

double translation_loss(const Eigen::Vector3d& est, const Eigen::Vector3d& gt, Eigen::Vector3d* grad) {
  const Eigen::Vector3d d = est - gt;
  const double n = d.norm();
  if (grad) *grad = n > 0.0 ? Eigen::Vector3d(d / n) : Eigen::Vector3d::Zero();
  return n;
}

namespace {

constexpr double kRotationKink = 1e-12;

}  // namespace

double rotation_loss(const Eigen::Matrix3d& est, const Eigen::Matrix3d& gt, Eigen::Matrix3d* grad) {
  const Eigen::Matrix3d e = est.transpose() * gt - Eigen::Matrix3d::Identity();
  const double f = e.norm();
  // RᵀR rounds to about 1e-16 off I at the minimum; treat that as the kink, where 0 is a subgradient
  if (grad) *grad = f > kRotationKink ? Eigen::Matrix3d(gt * e.transpose() / f) : Eigen::Matrix3d::Zero();
  return f;
}

double diffusion_loss(const nn::Matrix& c0_hat, const nn::Matrix& c_gt, nn::Matrix* grad) {
  if (c0_hat.rows() != c_gt.rows() || c0_hat.cols() != c_gt.cols()) {
    throw ArgumentError("diffusion loss: prediction and target shapes differ");
  }
  if (c0_hat.size() == 0) {
    if (grad) grad->resize(c0_hat.rows(), c0_hat.cols());
    return 0.0;
  }
  const nn::Matrix d = c0_hat - c_gt;
  const double n = static_cast<double>(d.size());
  if (grad) *grad = 2.0 * d / n;
  return d.squaredNorm() / n;
}

LossTerms loss_total(const RigidTransform& coarse, const RigidTransform& fine, const RigidTransform& gt,
                     const nn::Matrix& c0_hat, const nn::Matrix& c_gt, const LossWeights& w, LossGrads* grads) {
  LossTerms l;
  Eigen::Vector3d gtc, gtf;
  Eigen::Matrix3d grc, grf;
  nn::Matrix gd;
  const double tc = translation_loss(coarse.translation(), gt.translation(), &gtc);
  const double tf = translation_loss(fine.translation(), gt.translation(), &gtf);
  const double rc = rotation_loss(coarse.rotation(), gt.rotation(), &grc);
  const double rf = rotation_loss(fine.rotation(), gt.rotation(), &grf);
  l.trans = tc + tf;
  l.rot = rc + rf;
  l.diff = diffusion_loss(c0_hat, c_gt, &gd);
  l.total = w.beta * l.trans + w.alpha * l.rot + w.gamma * l.diff;
  if (grads) {
    grads->coarse_translation = w.beta * gtc;
    grads->fine_translation = w.beta * gtf;
    grads->coarse_rotation = w.alpha * grc;
    grads->fine_rotation = w.alpha * grf;
    grads->c0 = w.gamma * gd;
  }
  return l;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

namespace {

constexpr double kSceneHalfWidth = 10.0;

Eigen::RowVector3d uniform_box(std::mt19937_64& rng, double lo_xy, double hi_xy, double lo_z, double hi_z) {
  std::uniform_real_distribution<double> xy(lo_xy, hi_xy), z(lo_z, hi_z);
  const double x = xy(rng);
  const double y = xy(rng);
  return {x, y, z(rng)};
}

Points make_scene(std::mt19937_64& rng, int n) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  Points pts(n, 3);
  const int n_ground = n / 4;
  const int n_walls = (2 * n) / 5;
  const int n_blobs = n - n_ground - n_walls;

  int row = 0;
  for (int i = 0; i < n_ground; ++i, ++row) {
    pts.row(row) = uniform_box(rng, -kSceneHalfWidth, kSceneHalfWidth, 0.0, 0.0);
    pts(row, 2) = 0.02 * normal(rng);
  }

  const int walls = 4;
  for (int w = 0; w < walls; ++w) {
    const int count = n_walls / walls + (w < n_walls % walls ? 1 : 0);
    const Eigen::RowVector3d center = uniform_box(rng, -7.0, 7.0, 0.0, 0.0);
    const double heading = 2.0 * M_PI * u01(rng);
    const double length = 4.0 + 6.0 * u01(rng);
    const double height = 2.0 + 3.0 * u01(rng);
    const Eigen::RowVector3d dir(std::cos(heading), std::sin(heading), 0.0);
    for (int i = 0; i < count; ++i, ++row) {
      pts.row(row) = center + (u01(rng) - 0.5) * length * dir;
      pts(row, 2) = height * u01(rng);
    }
  }

  const int blobs = 5;
  for (int b = 0; b < blobs; ++b) {
    const int count = n_blobs / blobs + (b < n_blobs % blobs ? 1 : 0);
    const Eigen::RowVector3d center = uniform_box(rng, -8.0, 8.0, 0.5, 3.0);
    const double sigma = 0.3 + 0.7 * u01(rng);
    for (int i = 0; i < count; ++i, ++row) {
      pts.row(row) = center + sigma * Eigen::RowVector3d(normal(rng), normal(rng), normal(rng));
    }
  }
  return pts;
}

void add_outlier_cluster(std::mt19937_64& rng, double azimuth, Points& pts, int first, int count) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double range = 40.0 + 10.0 * u01(rng);
  const Eigen::RowVector3d center(range * std::cos(azimuth), range * std::sin(azimuth), 5.0 * u01(rng));
  for (int i = 0; i < count; ++i) {
    Eigen::RowVector3d d(normal(rng), normal(rng), normal(rng));
    d *= 2.0 * std::cbrt(u01(rng)) / std::max(d.norm(), 1e-12);  // uniform in a 2 m ball
    pts.row(first + i) = center + d;
  }
}

}  // namespace

SyntheticPair gen_synthetic_pair(std::mt19937_64& rng, int n_points, double max_rot_deg, double max_trans,
                                 double jitter, int outlier_clusters) {
  if (n_points < 64) throw ArgumentError("synthetic pair needs at least 64 points");
  if (outlier_clusters < 0) throw ArgumentError("outlier cluster count must be nonnegative");
  const int per_cluster = std::max(1, n_points / 32);
  const int n_out = outlier_clusters * per_cluster;
  const int n_in = n_points - n_out;
  if (n_in < 32) throw ArgumentError("too many outlier clusters for " + std::to_string(n_points) + " points");

  SyntheticPair pair;
  const Points scene = make_scene(rng, n_in);
  pair.gt = random_rigid_transform(rng, max_rot_deg, max_trans);

  pair.source.resize(n_points, 3);
  pair.target.resize(n_points, 3);
  pair.source.topRows(n_in) = scene;
  Points moved = apply_transform(pair.gt, scene);
  if (jitter > 0.0) {
    std::normal_distribution<double> noise(0.0, jitter);
    for (Eigen::Index i = 0; i < moved.rows(); ++i) {
      for (int c = 0; c < 3; ++c) moved(i, c) += noise(rng);
    }
  }
  pair.target.topRows(n_in) = moved;

  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double offset = 2.0 * M_PI * u01(rng);
  const int slots = 2 * outlier_clusters;
  for (int c = 0; c < outlier_clusters; ++c) {
    const double az_src = offset + 2.0 * M_PI * (2 * c + 0.25 + 0.5 * u01(rng)) / slots;
    const double az_tgt = offset + 2.0 * M_PI * (2 * c + 1.25 + 0.5 * u01(rng)) / slots;
    add_outlier_cluster(rng, az_src, pair.source, n_in + c * per_cluster, per_cluster);
    add_outlier_cluster(rng, az_tgt, pair.target, n_in + c * per_cluster, per_cluster);
  }
  pair.source_outlier.assign(static_cast<std::size_t>(n_points), 0);
  pair.target_outlier.assign(static_cast<std::size_t>(n_points), 0);
  std::fill(pair.source_outlier.begin() + n_in, pair.source_outlier.end(), 1);
  std::fill(pair.target_outlier.begin() + n_in, pair.target_outlier.end(), 1);

  // Shuffle the target so point order carries no correspondence.
  std::vector<int> perm(static_cast<std::size_t>(n_points));
  std::iota(perm.begin(), perm.end(), 0);
  for (int i = n_points - 1; i > 0; --i) {
    std::uniform_int_distribution<int> pick(0, i);
    std::swap(perm[i], perm[pick(rng)]);
  }
  Points shuffled(n_points, 3);
  std::vector<char> mask(static_cast<std::size_t>(n_points));
  for (int i = 0; i < n_points; ++i) {
    shuffled.row(i) = pair.target.row(perm[i]);
    mask[i] = pair.target_outlier[perm[i]];
  }
  pair.target = std::move(shuffled);
  pair.target_outlier = std::move(mask);
  return pair;
}

std::vector<SyntheticPair> make_synthetic_set(const RunConfig& cfg, std::uint64_t seed, int count) {
  std::vector<SyntheticPair> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    out.push_back(gen_synthetic_pair(rng, cfg.synthetic_points, cfg.max_rot_deg, cfg.max_trans, cfg.jitter,
                                     cfg.outlier_clusters));
  }
  return out;
}

std::vector<RegistrationPair> as_registration_pairs(const std::vector<SyntheticPair>& pairs) {
  return {pairs.begin(), pairs.end()};
}

namespace {

std::string pair_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair_%04zu", i);
  return buf;
}

}  // namespace

void write_pair_directory(const std::filesystem::path& dir, const std::vector<RegistrationPair>& pairs) {
  std::filesystem::create_directories(dir);
  std::vector<RigidTransform> poses;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    write_lidar_bin(dir / (pair_stem(i) + "_src.bin"), PointCloud(pairs[i].source));
    write_lidar_bin(dir / (pair_stem(i) + "_tgt.bin"), PointCloud(pairs[i].target));
    poses.push_back(pairs[i].gt);
  }
  write_pose_file(dir / "gt.txt", poses);
}

std::vector<RegistrationPair> read_pair_directory(const std::filesystem::path& dir) {
  const std::vector<PoseRecord> poses = read_pose_file(dir / "gt.txt");
  std::vector<RegistrationPair> pairs;
  for (std::size_t i = 0; i < poses.size(); ++i) {
    RegistrationPair p;
    p.source = read_lidar_bin(dir / (pair_stem(i) + "_src.bin")).points;
    p.target = read_lidar_bin(dir / (pair_stem(i) + "_tgt.bin")).points;
    p.gt = poses[i].transform;
    pairs.push_back(std::move(p));
  }
  return pairs;
}

double learning_rate_at(const RunConfig& cfg, int epoch) {
  return cfg.learning_rate * std::pow(cfg.lr_decay, epoch / cfg.lr_decay_every);
}

// ---------------------------------------------------------------------------
// One training pass over a pair
// ---------------------------------------------------------------------------

namespace {

PairStep run_pair(Model& model, const RegistrationPair& pair, std::uint64_t seed, bool backward, double grad_scale,
                  const nn::Matrix* fixed_target) {
  const RunConfig& cfg = model.config;
  const int k = cfg.candidates;
  const LossWeights weights{cfg.alpha, cfg.beta, cfg.gamma};
  if (!pair.gt.rotation().allFinite() || !pair.gt.translation().allFinite()) {
    throw NumericalError("non-finite ground-truth pose");
  }

  Backbone::Cache src_cache, tgt_cache;
  const BackboneOutput src_out =
      model.backbone.forward(pair.source, derive_seed(seed, 10), nn::Mode::Train, backward ? &src_cache : nullptr);
  const BackboneOutput tgt_out =
      model.backbone.forward(pair.target, derive_seed(seed, 11), nn::Mode::Train, backward ? &tgt_cache : nullptr);
  const PurifiedSets sets = purify(src_out, tgt_out, cfg, derive_seed(seed, 12));

  // Coarse stage.
  const CoarseResult coarse =
      coarse_forward(model.coarse, sets.src_coarse, sets.tgt_coarse, k, nn::Mode::Train, backward);

  // Fine stage, one denoising step from a noised ground-truth correspondence.
  const FeatureSet& sf = sets.src_fine;
  const FeatureSet& tf = sets.tgt_fine;
  const RigidTransform& tc = coarse.transform;
  const Points warped = apply_transform(tc, sf.points);
  const IndexMatrix cand = knn_search(warped, tf.points, k).indices;
  nn::Matrix target;
  if (fixed_target) {
    if (fixed_target->rows() != cand.rows() || fixed_target->cols() != cand.cols()) {
      throw ArgumentError("fixed correspondence target has the wrong shape");
    }
    target = *fixed_target;
  } else {
    target = build_gt_correspondence(sf.points, tf.points, pair.gt, cand, cfg.sinkhorn_eps, cfg.sinkhorn_iters).values;
  }

  std::mt19937_64 rng(derive_seed(seed, 20));
  std::uniform_int_distribution<int> pick_t(1, model.schedule.steps);
  const int t = pick_t(rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  nn::Matrix eps(cand.rows(), cand.cols());
  for (Eigen::Index i = 0; i < eps.rows(); ++i) {
    for (Eigen::Index j = 0; j < eps.cols(); ++j) eps(i, j) = normal(rng);
  }
  const nn::Matrix ct = q_sample(model.schedule, target, t, eps);
  const CandidateFeatures ff = assemble_candidate_features(warped, sf, tf, cand, false);
  Denoiser::Cache den_cache;
  const nn::Matrix c0 = model.fine.denoiser.forward(ct, t, ff, nn::Mode::Train, backward ? &den_cache : nullptr);
  const StepResult step =
      correspondence_to_transform(c0, warped, cand, tf, model.fine.confidence, cfg.decode_temperature, backward);
  const RigidTransform fine = compose(step.step, tc);

  LossGrads g;
  PairStep out;
  out.terms = loss_total(tc, fine, pair.gt, c0, target, weights, backward ? &g : nullptr);
  out.coarse = tc;
  out.target = target;
  out.fine = fine;
  if (!backward || !std::isfinite(out.terms.total)) return out;

  // Fine backward. R_f = R_s R_c and t_f = R_s t_c + t_s; the coarse estimate also enters
  // through the warped source.
  const Eigen::Matrix3d& rs = step.step.rotation();
  const Eigen::Matrix3d g_rf = grad_scale * g.fine_rotation;
  const Eigen::Vector3d g_tf = grad_scale * g.fine_translation;
  const Eigen::Matrix3d g_rs = g_rf * tc.rotation().transpose() + g_tf * tc.translation().transpose();
  nn::Matrix g_c0 = grad_scale * g.c0;
  Points g_warped = Points::Zero(warped.rows(), 3);
  FeatureGrad g_sf = FeatureGrad::zeros_like(sf);
  FeatureGrad g_tf_set = FeatureGrad::zeros_like(tf);
  correspondence_to_transform_backward(step, c0, cand, tf, model.fine.confidence, cfg.decode_temperature, g_rs, g_tf,
                                       g_c0, g_warped, g_tf_set);
  nn::Matrix g_geo, g_desc;
  model.fine.denoiser.backward(den_cache, g_c0, g_geo, g_desc);
  candidate_features_backward(warped, sf, tf, ff, g_geo, g_desc, g_warped, g_sf, g_tf_set);
  g_sf.points += g_warped * tc.rotation();

  // Coarse backward with the direct coarse terms plus everything routed through T_c.
  const Eigen::Matrix3d g_rc = grad_scale * g.coarse_rotation + rs.transpose() * g_rf +
                               g_warped.transpose() * sf.points;
  const Eigen::Vector3d g_tc = grad_scale * g.coarse_translation + rs.transpose() * g_tf +
                               g_warped.colwise().sum().transpose();
  FeatureGrad g_sc = FeatureGrad::zeros_like(sets.src_coarse);
  FeatureGrad g_tc_set = FeatureGrad::zeros_like(sets.tgt_coarse);
  coarse_backward(model.coarse, sets.src_coarse, sets.tgt_coarse, coarse, g_rc, g_tc, g_sc, g_tc_set);

  FeatureGrad src_fine = FeatureGrad::zeros_like(src_out.fine);
  FeatureGrad tgt_fine = FeatureGrad::zeros_like(tgt_out.fine);
  FeatureGrad src_coarse = FeatureGrad::zeros_like(src_out.coarse);
  FeatureGrad tgt_coarse = FeatureGrad::zeros_like(tgt_out.coarse);
  src_fine.scatter_add(sets.src_fine_keep, g_sf);
  tgt_fine.scatter_add(sets.tgt_fine_keep, g_tf_set);
  src_coarse.scatter_add(sets.src_coarse_keep, g_sc);
  tgt_coarse.scatter_add(sets.tgt_coarse_keep, g_tc_set);
  model.backbone.backward(src_cache, src_fine, src_coarse);
  model.backbone.backward(tgt_cache, tgt_fine, tgt_coarse);
  return out;
}

}  // namespace

PairStep train_pair(Model& model, const RegistrationPair& pair, std::uint64_t seed, double grad_scale,
                    const nn::Matrix* fixed_target) {
  return run_pair(model, pair, seed, true, grad_scale, fixed_target);
}

LossTerms pair_loss(Model& model, const RegistrationPair& pair, std::uint64_t seed, const nn::Matrix* fixed_target) {
  return run_pair(model, pair, seed, false, 1.0, fixed_target).terms;
}

std::string format_training_log(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os << "epoch,loss_trans,loss_rot,loss_diff,val_rte,val_rre\n";
  char buf[256];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.loss_trans, e.loss_rot, e.loss_diff,
                  e.val_rte, e.val_rre);
    os << buf;
  }
  return os.str();
}

TrainResult train(const RunConfig& cfg, const std::vector<RegistrationPair>& train_set,
                  const std::vector<RegistrationPair>& val_set, const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_set.empty()) throw ArgumentError("training set is empty");
  Model model(cfg);
  model.init(cfg.seed);
  nn::Adam adam(cfg.learning_rate);
  const std::vector<nn::Parameter*> params = model.parameters();

  TrainResult result;
  result.checkpoint = model.to_checkpoint(&adam);
  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, 30));
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    adam.lr = learning_rate_at(cfg, epoch);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(shuffle_rng)]);
    }
    const std::uint64_t epoch_seed = derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch));
    EpochLog log;
    log.epoch = epoch;
    log.lr = adam.lr;
    int used = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      model.zero_grad();
      int in_batch = 0;
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        PairStep ps;
        try {
          ps = train_pair(model, train_set[idx], derive_seed(epoch_seed, idx), 1.0 / static_cast<double>(end - start));
        } catch (const DegeneracyError&) {
          continue;  // a pair whose alignment collapses contributes nothing this epoch
        } catch (const NumericalError& e) {
          result.aborted = true;
          result.message = std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", pair " + std::to_string(idx);
          return result;
        }
        if (!std::isfinite(ps.terms.total)) {
          result.aborted = true;
          result.message = "non-finite loss at epoch " + std::to_string(epoch) + ", pair " + std::to_string(idx);
          return result;
        }
        log.loss_trans += ps.terms.trans;
        log.loss_rot += ps.terms.rot;
        log.loss_diff += ps.terms.diff;
        log.loss_total += ps.terms.total;
        ++in_batch;
      }
      if (in_batch == 0) continue;
      used += in_batch;
      for (nn::Parameter* p : params) {
        if (!p->grad.allFinite()) {
          result.aborted = true;
          result.message = "non-finite gradient at epoch " + std::to_string(epoch);
          return result;
        }
      }
      adam.step(params);
    }
    if (used > 0) {
      log.loss_trans /= used;
      log.loss_rot /= used;
      log.loss_diff /= used;
      log.loss_total /= used;
    }
    if (!val_set.empty()) {
      EvalOptions eo;
      eo.seed = derive_seed(cfg.seed, 50);
      const MetricsReport rep = evaluate_dataset(model, val_set, eo);
      double rte = 0.0, rre = 0.0;
      int n = 0;
      for (const auto& p : rep.pairs) {
        if (!std::isfinite(p.rte) || !std::isfinite(p.rre)) continue;
        rte += p.rte;
        rre += p.rre;
        ++n;
      }
      log.val_rte = n ? rte / n : std::nan("");
      log.val_rre = n ? rre / n : std::nan("");
    }
    result.log.push_back(log);
    result.checkpoint = model.to_checkpoint(&adam);
    if (on_epoch) on_epoch(log);
  }
  return result;
}

}  // namespace adreg
