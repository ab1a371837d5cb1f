#include "adreg/backbone.hpp"

#include <cmath>
#include <string>

#include "adreg/errors.hpp"

namespace adreg {

FeatureSet FeatureSet::select(const std::vector<char>& keep) const {
  if (static_cast<Eigen::Index>(keep.size()) != size()) throw ArgumentError("FeatureSet::select: mask length mismatch");
  Eigen::Index n = 0;
  for (char k : keep) n += k ? 1 : 0;
  FeatureSet out;
  out.points.resize(n, 3);
  out.descriptors.resize(n, descriptors.cols());
  out.uncertainties.resize(n);
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < size(); ++i) {
    if (!keep[static_cast<std::size_t>(i)]) continue;
    out.points.row(r) = points.row(i);
    out.descriptors.row(r) = descriptors.row(i);
    out.uncertainties[r] = uncertainties[i];
    ++r;
  }
  return out;
}

FeatureGrad FeatureGrad::zeros_like(const FeatureSet& fs) {
  return {Points::Zero(fs.size(), 3), nn::Matrix::Zero(fs.size(), fs.descriptors.cols()),
          Eigen::VectorXd::Zero(fs.size())};
}

void FeatureGrad::add(const FeatureGrad& other) {
  points += other.points;
  descriptors += other.descriptors;
  uncertainties += other.uncertainties;
}

void FeatureGrad::scatter_add(const std::vector<char>& keep, const FeatureGrad& sub) {
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    if (!keep[static_cast<std::size_t>(i)]) continue;
    points.row(i) += sub.points.row(r);
    descriptors.row(i) += sub.descriptors.row(r);
    uncertainties[i] += sub.uncertainties[r];
    ++r;
  }
}

std::vector<LayerConfig> default_layer_configs(double scale) {
  if (!(scale > 0.0)) throw ArgumentError("backbone scale must be positive");
  auto scaled = [&](int n) { return std::max(1, static_cast<int>(std::lround(n * scale))); };
  return {
      {scaled(1024), 64, {32, 32, 64}, {32, 32, 64}},
      {scaled(512), 32, {64, 64, 128}, {64, 64, 128}},
      {scaled(256), 16, {128, 128, 256}, {128, 128, 256}},
  };
}

// ---------------------------------------------------------------------------
// BackboneLayer
// ---------------------------------------------------------------------------

BackboneLayer::BackboneLayer(const LayerConfig& cfg, int in_width)
    : cfg_(cfg),
      in_width_(in_width),
      detector_(3 + in_width + 1, cfg.detector, 1),
      descriptor_(3 + in_width + 1, cfg.descriptor, 0),
      uncertainty_(cfg.descriptor.back(), 1) {}

void BackboneLayer::init(std::mt19937_64& rng) {
  detector_.init(rng);
  descriptor_.init(rng);
  uncertainty_.init(rng);
}

FeatureSet BackboneLayer::forward(const FeatureSet& in, bool weighted, std::uint64_t seed, nn::Mode mode,
                                  Cache* cache, const Cache* replay) {
  const int n = cfg_.points;
  const int k = cfg_.group;
  if (in.size() < n || in.size() < k) {
    throw ArgumentError("backbone layer needs at least " + std::to_string(std::max(n, k)) + " input points, got " +
                        std::to_string(in.size()));
  }
  if (in.width() != in_width_) throw ArgumentError("backbone layer: input feature width mismatch");

  std::vector<int> sampled;
  IndexMatrix groups;
  if (replay) {
    if (static_cast<int>(replay->sampled.size()) != n || replay->groups.rows() != n || replay->groups.cols() != k) {
      throw ArgumentError("backbone layer: replayed selection does not match the layer shape");
    }
    sampled = replay->sampled;
    groups = replay->groups;
  } else {
    if (weighted) {
      std::vector<double> w(static_cast<std::size_t>(in.size()));
      for (Eigen::Index i = 0; i < in.size(); ++i) w[static_cast<std::size_t>(i)] = 1.0 - in.uncertainties[i];
      sampled = farthest_point_sample(in.points, n, std::span<const double>(w), seed);
    } else {
      sampled = farthest_point_sample(in.points, n, std::nullopt, seed);
    }
  }
  Points centers(n, 3);
  for (int i = 0; i < n; ++i) centers.row(i) = in.points.row(sampled[static_cast<std::size_t>(i)]);
  if (!replay) groups = knn_search(centers, in.points, k).indices;

  // Grouped member rows: [relative coordinate | member feature | member uncertainty].
  const int width = 3 + in_width_ + 1;
  nn::Matrix x(static_cast<Eigen::Index>(n) * k, width);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) {
      const int m = groups(i, j);
      const Eigen::Index row = static_cast<Eigen::Index>(i) * k + j;
      x.block(row, 0, 1, 3) = in.points.row(m) - centers.row(i);
      x.block(row, 3, 1, in_width_) = in.descriptors.row(m);
      x(row, width - 1) = in.uncertainties[m];
    }
  }

  nn::CbrStack::Cache det_cache, desc_cache;
  const nn::Matrix logits_flat = detector_.forward(x, mode, cache ? &det_cache : nullptr);
  nn::Matrix member_desc = descriptor_.forward(x, mode, cache ? &desc_cache : nullptr);
  const nn::Matrix logits = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      logits_flat.data(), n, k);
  const nn::Matrix weights = nn::softmax_rows(logits);

  FeatureSet out;
  const int c = static_cast<int>(member_desc.cols());
  out.points = Points::Zero(n, 3);
  out.descriptors = nn::Matrix::Zero(n, c);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) {
      const double w = weights(i, j);
      out.points.row(i) += w * in.points.row(groups(i, j));
      out.descriptors.row(i) += w * member_desc.row(static_cast<Eigen::Index>(i) * k + j);
    }
  }
  nn::Linear::Cache unc_cache;
  const nn::Matrix unc = nn::sigmoid(uncertainty_.forward(out.descriptors, cache ? &unc_cache : nullptr));
  out.uncertainties = unc.col(0);

  if (cache) {
    cache->sampled = std::move(sampled);
    cache->groups = groups;
    cache->detector = std::move(det_cache);
    cache->descriptor = std::move(desc_cache);
    cache->uncertainty = std::move(unc_cache);
    cache->weights = weights;
    cache->member_desc = std::move(member_desc);
    cache->uncertainty_out = unc;
  }
  return out;
}

FeatureGrad BackboneLayer::backward(const FeatureSet& in, const Cache& cache, const FeatureGrad& grad_out) {
  const int n = cfg_.points;
  const int k = cfg_.group;
  nn::Matrix g_desc = grad_out.descriptors;
  {
    const nn::Matrix g_unc = nn::sigmoid_backward(cache.uncertainty_out, nn::Matrix(grad_out.uncertainties));
    g_desc += uncertainty_.backward(cache.uncertainty, g_unc);
  }

  FeatureGrad g_in = FeatureGrad::zeros_like(in);
  nn::Matrix g_weights(n, k);
  nn::Matrix g_member(static_cast<Eigen::Index>(n) * k, cache.member_desc.cols());
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) {
      const int m = cache.groups(i, j);
      const Eigen::Index row = static_cast<Eigen::Index>(i) * k + j;
      g_weights(i, j) = grad_out.points.row(i).dot(in.points.row(m)) + g_desc.row(i).dot(cache.member_desc.row(row));
      g_member.row(row) = cache.weights(i, j) * g_desc.row(i);
      g_in.points.row(m) += cache.weights(i, j) * grad_out.points.row(i);
    }
  }
  const nn::Matrix g_logits = nn::softmax_rows_backward(cache.weights, g_weights);
  nn::Matrix g_logits_flat(static_cast<Eigen::Index>(n) * k, 1);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < k; ++j) g_logits_flat(static_cast<Eigen::Index>(i) * k + j, 0) = g_logits(i, j);
  }
  nn::Matrix g_x = detector_.backward(cache.detector, g_logits_flat);
  g_x += descriptor_.backward(cache.descriptor, g_member);

  const int width = 3 + in_width_ + 1;
  for (int i = 0; i < n; ++i) {
    const int center = cache.sampled[static_cast<std::size_t>(i)];
    for (int j = 0; j < k; ++j) {
      const int m = cache.groups(i, j);
      const Eigen::Index row = static_cast<Eigen::Index>(i) * k + j;
      g_in.points.row(m) += g_x.block(row, 0, 1, 3);
      g_in.points.row(center) -= g_x.block(row, 0, 1, 3);
      g_in.descriptors.row(m) += g_x.block(row, 3, 1, in_width_);
      g_in.uncertainties[m] += g_x(row, width - 1);
    }
  }
  return g_in;
}

void BackboneLayer::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  detector_.visit(prefix + "detector.", fn);
  descriptor_.visit(prefix + "descriptor.", fn);
  uncertainty_.visit(prefix + "uncertainty.", fn);
}

void BackboneLayer::visit_buffers(const std::string& prefix, const nn::BufferVisitor& fn) {
  detector_.visit_buffers(prefix + "detector.", fn);
  descriptor_.visit_buffers(prefix + "descriptor.", fn);
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

Backbone::Backbone(std::vector<LayerConfig> layers) : lift_(3, kLiftWidth) {
  if (layers.size() != 3) throw ArgumentError("backbone expects exactly three layers");
  int width = kLiftWidth;
  for (const auto& cfg : layers) {
    layers_.emplace_back(cfg, width);
    width = cfg.descriptor.back();
  }
}

void Backbone::init(std::mt19937_64& rng) {
  lift_.init(rng);
  for (auto& l : layers_) l.init(rng);
}

BackboneOutput Backbone::forward(const Points& cloud, std::uint64_t seed, nn::Mode mode, Cache* cache,
                                 const Cache* replay) {
  if (cloud.rows() < layers_.front().config().points) {
    throw ArgumentError("backbone: cloud has " + std::to_string(cloud.rows()) + " points, first layer samples " +
                        std::to_string(layers_.front().config().points));
  }
  FeatureSet current;
  current.points = cloud;
  current.descriptors = lift_.forward(nn::Matrix(cloud), cache ? &cache->lift : nullptr);
  current.uncertainties = Eigen::VectorXd::Zero(cloud.rows());
  if (cache) {
    cache->inputs.clear();
    cache->layers.assign(layers_.size(), {});
  }
  std::vector<FeatureSet> outputs;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    if (cache) cache->inputs.push_back(current);
    const std::uint64_t layer_seed = seed * 0x9E3779B97F4A7C15ULL + l;
    current = layers_[l].forward(current, l > 0, layer_seed, mode, cache ? &cache->layers[l] : nullptr,
                                 replay ? &replay->layers.at(l) : nullptr);
    outputs.push_back(current);
  }
  return {outputs[1], outputs[2]};
}

void Backbone::backward(const Cache& cache, const FeatureGrad& grad_fine, const FeatureGrad& grad_coarse) {
  FeatureGrad g = layers_[2].backward(cache.inputs[2], cache.layers[2], grad_coarse);
  g.add(grad_fine);
  g = layers_[1].backward(cache.inputs[1], cache.layers[1], g);
  g = layers_[0].backward(cache.inputs[0], cache.layers[0], g);
  lift_.backward(cache.lift, g.descriptors);
}

void Backbone::visit(const std::string& prefix, const nn::ParamVisitor& fn) {
  lift_.visit(prefix + "lift.", fn);
  for (std::size_t l = 0; l < layers_.size(); ++l) layers_[l].visit(prefix + "layer" + std::to_string(l + 1) + ".", fn);
}

void Backbone::visit_buffers(const std::string& prefix, const nn::BufferVisitor& fn) {
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    layers_[l].visit_buffers(prefix + "layer" + std::to_string(l + 1) + ".", fn);
  }
}

}  // namespace adreg
