#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "adreg/geometry.hpp"
#include "adreg/nnet.hpp"

namespace adreg {

/// Superpoints with descriptors (rows x C) and uncertainties in [0, 1].
struct FeatureSet {
  Points points;
  nn::Matrix descriptors;
  Eigen::VectorXd uncertainties;

  Eigen::Index size() const { return points.rows(); }
  int width() const { return static_cast<int>(descriptors.cols()); }
  /// Rows where `keep` is nonzero, order preserved.
  FeatureSet select(const std::vector<char>& keep) const;
};

/// Gradient with respect to each field of a FeatureSet.
struct FeatureGrad {
  Points points;
  nn::Matrix descriptors;
  Eigen::VectorXd uncertainties;

  static FeatureGrad zeros_like(const FeatureSet& fs);
  void add(const FeatureGrad& other);
  /// Adds `sub` (gradient of the rows kept by `keep`) back into full-size rows.
  void scatter_add(const std::vector<char>& keep, const FeatureGrad& sub);
};

struct LayerConfig {
  int points = 0;  // N_l
  int group = 0;   // K_l
  std::vector<int> detector;
  std::vector<int> descriptor;
};

/// Three-layer table (1024/64, 512/32, 256/16 with 32-32-64, 64-64-128, 128-128-256 convs)
/// with every N scaled by `scale` and rounded; group sizes and widths are unchanged.
std::vector<LayerConfig> default_layer_configs(double scale = 1.0);

inline constexpr int kLiftWidth = 32;

/// One detector/descriptor level: sample, group, weight the group members, fuse.
class BackboneLayer {
 public:
  struct Cache {
    std::vector<int> sampled;
    IndexMatrix groups;        // N x K input indices
    nn::CbrStack::Cache detector;
    nn::CbrStack::Cache descriptor;
    nn::Linear::Cache uncertainty;
    nn::Matrix weights;        // N x K softmax over group members
    nn::Matrix member_desc;    // (N*K) x C
    nn::Matrix uncertainty_out;  // N x 1
  };

  BackboneLayer() = default;
  BackboneLayer(const LayerConfig& cfg, int in_width);

  void init(std::mt19937_64& rng);
  /// `weighted` selects WFPS with weights (1 - uncertainty); otherwise plain FPS. With `replay`, the
  /// sampled centers and groups are taken from an earlier pass instead.
  FeatureSet forward(const FeatureSet& in, bool weighted, std::uint64_t seed, nn::Mode mode, Cache* cache,
                     const Cache* replay = nullptr);
  FeatureGrad backward(const FeatureSet& in, const Cache& cache, const FeatureGrad& grad_out);

  void visit(const std::string& prefix, const nn::ParamVisitor& fn);
  void visit_buffers(const std::string& prefix, const nn::BufferVisitor& fn);
  const LayerConfig& config() const { return cfg_; }

 private:
  LayerConfig cfg_;
  int in_width_ = 0;
  nn::CbrStack detector_;
  nn::CbrStack descriptor_;
  nn::Linear uncertainty_;
};

struct BackboneOutput {
  FeatureSet fine;    // layer 2
  FeatureSet coarse;  // layer 3
};

class Backbone {
 public:
  struct Cache {
    nn::Linear::Cache lift;
    std::vector<FeatureSet> inputs;  // input of each layer
    std::vector<BackboneLayer::Cache> layers;
  };

  Backbone() = default;
  explicit Backbone(std::vector<LayerConfig> layers);

  void init(std::mt19937_64& rng);
  /// Throws ArgumentError if the cloud is smaller than the first layer's sample count. `replay`
  /// reuses the sampling and grouping of a cached pass, which makes the output smooth in the
  /// parameters (gradient checks use it).
  BackboneOutput forward(const Points& cloud, std::uint64_t seed, nn::Mode mode, Cache* cache = nullptr,
                         const Cache* replay = nullptr);
  /// Accumulates parameter gradients from gradients on the fine and coarse outputs.
  void backward(const Cache& cache, const FeatureGrad& grad_fine, const FeatureGrad& grad_coarse);

  void visit(const std::string& prefix, const nn::ParamVisitor& fn);
  void visit_buffers(const std::string& prefix, const nn::BufferVisitor& fn);
  const std::vector<BackboneLayer>& layers() const { return layers_; }

 private:
  nn::Linear lift_;
  std::vector<BackboneLayer> layers_;
};

}  // namespace adreg
