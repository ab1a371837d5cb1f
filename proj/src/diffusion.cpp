#include "adreg/diffusion.hpp"

#include <cmath>
#include <string>

#include "adreg/errors.hpp"

namespace adreg {

namespace {

void check_t(const NoiseSchedule& s, int t) {
  if (t < 1 || t > s.steps) {
    throw ArgumentError("diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(s.steps) + "]");
  }
}

double log_sum_exp(const Eigen::Ref<const Eigen::VectorXd>& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ArgumentError("schedule needs at least one step");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw ArgumentError("schedule bounds must satisfy 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta.assign(steps + 1, 0.0);
  s.alpha.assign(steps + 1, 1.0);
  s.alpha_bar.assign(steps + 1, 1.0);
  for (int t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
    s.beta[t] = beta_start + frac * (beta_end - beta_start);
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
  }
  return s;
}

nn::Matrix q_sample(const NoiseSchedule& s, const nn::Matrix& c0, int t, const nn::Matrix& eps) {
  check_t(s, t);
  if (c0.rows() != eps.rows() || c0.cols() != eps.cols()) throw ArgumentError("q_sample: noise shape differs");
  const double ab = s.alpha_bar[t];
  return std::sqrt(ab) * c0 + std::sqrt(1.0 - ab) * eps;
}

nn::Matrix recover_noise(const NoiseSchedule& s, const nn::Matrix& c0, const nn::Matrix& ct, int t) {
  check_t(s, t);
  const double ab = s.alpha_bar[t];
  return (ct - std::sqrt(ab) * c0) / std::sqrt(1.0 - ab);
}

nn::Matrix sinkhorn_log(const nn::Matrix& cost, double eps, int iters) {
  if (!(eps > 0.0) || iters < 1) throw ArgumentError("sinkhorn: eps must be positive and iters >= 1");
  if (cost.size() == 0 || !cost.allFinite()) throw ArgumentError("sinkhorn: cost must be finite and nonempty");
  const Eigen::Index n = cost.rows();
  const Eigen::Index m = cost.cols();
  const nn::Matrix log_k = -cost / eps;
  const double log_a = -std::log(static_cast<double>(n));
  const double log_b = -std::log(static_cast<double>(m));
  Eigen::VectorXd f = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(m);
  Eigen::VectorXd buf_n(m), buf_m(n);
  for (int it = 0; it < iters; ++it) {
    for (Eigen::Index i = 0; i < n; ++i) {
      buf_n = log_k.row(i).transpose() + g;
      f[i] = log_a - log_sum_exp(buf_n);
    }
    for (Eigen::Index j = 0; j < m; ++j) {
      buf_m = log_k.col(j) + f;
      g[j] = log_b - log_sum_exp(buf_m);
    }
  }
  return (log_k.colwise() + f).rowwise() + g.transpose();
}

nn::Matrix sinkhorn(const nn::Matrix& cost, double eps, int iters) { return sinkhorn_log(cost, eps, iters).array().exp(); }

GtCorrespondence build_gt_correspondence(const Points& src, const Points& tgt, const RigidTransform& gt, int k,
                                         double sinkhorn_eps, int sinkhorn_iters) {
  if (k < 1 || k > tgt.rows()) throw ArgumentError("gt correspondence: k out of range");
  const Points warped = apply_transform(gt, src);
  return build_gt_correspondence(src, tgt, gt, knn_search(warped, tgt, k).indices, sinkhorn_eps, sinkhorn_iters);
}

GtCorrespondence build_gt_correspondence(const Points& src, const Points& tgt, const RigidTransform& gt,
                                         const IndexMatrix& candidates, double sinkhorn_eps, int sinkhorn_iters) {
  if (candidates.rows() != src.rows()) throw ArgumentError("gt correspondence: candidate rows differ from source");
  const Points warped = apply_transform(gt, src);
  nn::Matrix cost(warped.rows(), tgt.rows());
  for (Eigen::Index i = 0; i < warped.rows(); ++i) {
    cost.row(i) = (tgt.rowwise() - warped.row(i)).rowwise().norm().transpose();
  }
  const nn::Matrix log_plan = sinkhorn_log(cost, sinkhorn_eps, sinkhorn_iters);

  GtCorrespondence out;
  out.candidates = candidates;
  nn::Matrix gathered(candidates.rows(), candidates.cols());
  for (Eigen::Index i = 0; i < candidates.rows(); ++i) {
    for (Eigen::Index j = 0; j < candidates.cols(); ++j) {
      const int m = candidates(i, j);
      if (m < 0 || m >= tgt.rows()) throw ArgumentError("gt correspondence: candidate index out of range");
      gathered(i, j) = log_plan(i, m);
    }
  }
  // Row renormalization of the gathered plan entries, done in the log domain.
  out.probabilities = nn::softmax_rows(gathered);
  out.values = to_diffusion_space(out.probabilities);
  return out;
}

Eigen::RowVectorXd time_embedding(int t, int steps) {
  Eigen::RowVectorXd e(kTimeEmbedding);
  const double x = static_cast<double>(t) / steps;
  for (int i = 0; i < kTimeEmbedding / 2; ++i) {
    const double w = M_PI * std::ldexp(1.0, i);
    e[2 * i] = std::sin(x * w);
    e[2 * i + 1] = std::cos(x * w);
  }
  return e;
}

// ---------------------------------------------------------------------------

Denoiser::Denoiser(int descriptor_width, int steps)
    : steps_(steps),
      net_(1 + kTimeEmbedding + kGeometricChannels + descriptor_channels(descriptor_width, false), {64, 64, 32}, 1) {}

void Denoiser::init(std::mt19937_64& rng) { net_.init(rng); }

nn::Matrix Denoiser::forward(const nn::Matrix& ct, int t, const CandidateFeatures& f, nn::Mode mode, Cache* cache) {
  if (ct.rows() != f.rows() || ct.cols() != f.k()) throw ArgumentError("denoiser: correspondence shape differs");
  if (t < 0 || t > steps_) throw ArgumentError("denoiser: step outside [0, T]");
  const Eigen::Index width = 1 + kTimeEmbedding + f.geometric.cols() + f.descriptor.cols();
  if (width != net_.in()) {
    throw ArgumentError("denoiser: expected " + std::to_string(net_.in()) + " channels, got " + std::to_string(width));
  }
  const Eigen::RowVectorXd emb = time_embedding(t, steps_);
  const Eigen::Index n = ct.rows();
  const Eigen::Index k = ct.cols();
  nn::Matrix x(n * k, width);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) {
      const Eigen::Index row = i * k + j;
      x(row, 0) = ct(i, j);
      x.block(row, 1, 1, kTimeEmbedding) = emb;
    }
  }
  x.block(0, 1 + kTimeEmbedding, n * k, f.geometric.cols()) = f.geometric;
  x.rightCols(f.descriptor.cols()) = f.descriptor;
  const nn::Matrix y = net_.forward(x, mode, cache ? &cache->net : nullptr);
  nn::Matrix out(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) out(i, j) = y(i * k + j, 0);
  }
  return out;
}

void Denoiser::backward(const Cache& cache, const nn::Matrix& grad_out, nn::Matrix& grad_geometric,
                        nn::Matrix& grad_descriptor) {
  const Eigen::Index n = grad_out.rows();
  const Eigen::Index k = grad_out.cols();
  nn::Matrix g(n * k, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < k; ++j) g(i * k + j, 0) = grad_out(i, j);
  }
  const nn::Matrix gx = net_.backward(cache.net, g);
  grad_geometric = gx.block(0, 1 + kTimeEmbedding, n * k, kGeometricChannels);
  grad_descriptor = gx.rightCols(gx.cols() - 1 - kTimeEmbedding - kGeometricChannels);
}

nn::Matrix decode_weights(const nn::Matrix& c0_hat, double temperature) {
  if (!(temperature > 0.0)) throw ArgumentError("decode temperature must be positive");
  return nn::softmax_rows(from_diffusion_space(c0_hat) / temperature);
}

nn::Matrix decode_weights_backward(const nn::Matrix& weights, const nn::Matrix& grad_weights, double temperature) {
  return nn::softmax_rows_backward(weights, grad_weights) * (0.5 / temperature);
}

StepResult correspondence_to_transform(const nn::Matrix& c0_hat, const Points& warped_src,
                                       const IndexMatrix& candidates, const FeatureSet& tgt,
                                       const ConfidenceHead& confidence, double temperature, bool keep_cache) {
  if (c0_hat.rows() != candidates.rows() || c0_hat.cols() != candidates.cols() ||
      warped_src.rows() != candidates.rows()) {
    throw ArgumentError("correspondence_to_transform: shapes differ");
  }
  StepResult res;
  res.weights = decode_weights(c0_hat, temperature);
  res.fused = fuse_candidates(res.weights, candidates, tgt.points, tgt.descriptors);
  res.confidence = confidence.forward(res.fused.descriptors, keep_cache ? &res.confidence_cache : nullptr);
  const Eigen::VectorXd w = res.confidence.array() + kWeightFloor;
  res.step = weighted_svd(warped_src, res.fused.points, w, keep_cache ? &res.svd_cache : nullptr);
  return res;
}

void correspondence_to_transform_backward(const StepResult& res, const nn::Matrix& c0_hat,
                                          const IndexMatrix& candidates, const FeatureSet& tgt,
                                          ConfidenceHead& confidence, double temperature,
                                          const Eigen::Matrix3d& grad_rotation, const Eigen::Vector3d& grad_translation,
                                          nn::Matrix& grad_c0, Points& grad_warped, FeatureGrad& grad_tgt) {
  const WeightedSvdGrad g_svd = weighted_svd_backward(res.svd_cache, grad_rotation, grad_translation);
  grad_warped += g_svd.src;
  const nn::Matrix g_fused_desc = confidence.backward(res.confidence_cache, g_svd.weights);
  nn::Matrix g_weights = nn::Matrix::Zero(c0_hat.rows(), c0_hat.cols());
  fuse_candidates_backward(res.weights, candidates, tgt.points, tgt.descriptors, g_svd.tgt, g_fused_desc, g_weights,
                           grad_tgt.points, grad_tgt.descriptors);
  grad_c0 += decode_weights_backward(res.weights, g_weights, temperature);
}

std::vector<int> ddim_timesteps(int steps, int sampling_steps) {
  if (steps < 1 || sampling_steps < 1) throw ArgumentError("ddim_timesteps: counts must be positive");
  if (sampling_steps > steps) throw ArgumentError("ddim_timesteps: more sampling steps than diffusion steps");
  std::vector<int> ts(sampling_steps + 1);
  for (int i = 0; i <= sampling_steps; ++i) {
    ts[i] = static_cast<int>(std::lround(static_cast<double>(steps) * (sampling_steps - i) / sampling_steps));
  }
  return ts;
}

nn::Matrix ddim_step(const NoiseSchedule& s, const nn::Matrix& ct, const nn::Matrix& c0_hat, int t, int t_prev,
                     double sigma, const nn::Matrix* z) {
  check_t(s, t);
  if (t_prev < 0 || t_prev >= t) throw ArgumentError("ddim_step: need t > t_prev >= 0");
  const double ab_prev = s.alpha_bar[t_prev];
  const double dir = 1.0 - ab_prev - sigma * sigma;
  if (dir < 0.0) throw ArgumentError("ddim_step: sigma too large for this step");
  const nn::Matrix eps = recover_noise(s, c0_hat, ct, t);
  nn::Matrix out = std::sqrt(ab_prev) * c0_hat + std::sqrt(dir) * eps;
  if (sigma != 0.0) {
    if (!z) throw ArgumentError("ddim_step: sigma > 0 needs a noise sample");
    out += sigma * *z;
  }
  return out;
}

InferenceResult autoregressive_infer(const RigidTransform& coarse, const FeatureSet& src, const FeatureSet& tgt,
                                     const DenoiseFn& denoise, const ConfidenceHead& confidence,
                                     const NoiseSchedule& schedule, const InferenceOptions& opts) {
  if (opts.candidates < 1 || opts.candidates > tgt.size()) throw ArgumentError("inference: K out of range");
  const std::vector<int> ts = ddim_timesteps(schedule.steps, opts.sampling_steps);

  InferenceResult result;
  RigidTransform cumulative = coarse;
  Points warped = apply_transform(cumulative, src.points);
  result.candidates = knn_search(warped, tgt.points, opts.candidates).indices;

  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  nn::Matrix c(src.size(), opts.candidates);
  for (Eigen::Index i = 0; i < c.rows(); ++i) {
    for (Eigen::Index j = 0; j < c.cols(); ++j) c(i, j) = normal(rng);
  }

  for (std::size_t s = 0; s + 1 < ts.size(); ++s) {
    const int t = ts[s];
    const int t_prev = ts[s + 1];
    const CandidateFeatures f = assemble_candidate_features(warped, src, tgt, result.candidates, false);
    const nn::Matrix c0 = denoise(DenoiseRequest{c, t, f, warped});
    if (!c0.allFinite()) {
      throw NumericalError("inference: non-finite correspondence at step t=" + std::to_string(t) + " (" +
                           std::to_string(s + 1) + " of " + std::to_string(ts.size() - 1) + ")");
    }
    const StepResult step = correspondence_to_transform(c0, warped, result.candidates, tgt, confidence,
                                                        opts.temperature, false);
    cumulative = compose(step.step, cumulative);
    warped = apply_transform(cumulative, src.points);
    c = ddim_step(schedule, c, c0, t, t_prev);
    if (!c.allFinite()) throw NumericalError("inference: non-finite correspondence after DDIM step t=" + std::to_string(t));
    result.steps.push_back({t, t_prev, step.step, cumulative, c0.cwiseAbs().mean(), result.candidates});
  }
  result.transform = cumulative;
  return result;
}

// ---------------------------------------------------------------------------

FineHead::FineHead(int descriptor_width, int steps) : denoiser(descriptor_width, steps), confidence(descriptor_width) {}

void FineHead::init(std::mt19937_64& rng) {
  denoiser.init(rng);
  confidence.init(rng);
}

void FineHead::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  denoiser.visit(prefix + "denoiser.", fn);
  confidence.visit(prefix + "confidence.", fn);
}

void FineHead::visit_buffers(const std::string& prefix, const nn::BufferVisitor& fn) {
  denoiser.visit_buffers(prefix + "denoiser.", fn);
}

DenoiseFn FineHead::as_denoise_fn() {
  return [this](const DenoiseRequest& r) { return denoiser.forward(r.ct, r.t, r.features, nn::Mode::Eval); };
}

}  // namespace adreg
