#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "adreg/geometry.hpp"

namespace adreg {

// ---------------------------------------------------------------------------
// Point clouds and poses
// ---------------------------------------------------------------------------

/// KITTI velodyne layout: little-endian float32 (x, y, z, reflectance), 16-byte stride.
/// Reflectance is dropped.
PointCloud parse_lidar_bin(std::string_view bytes);
PointCloud read_lidar_bin(const std::filesystem::path& path);
void write_lidar_bin(const std::filesystem::path& path, const PointCloud& cloud);

/// ASCII PLY with float x, y, z vertex properties; other vertex properties are skipped.
PointCloud parse_ply(std::string_view text);
PointCloud read_ply(const std::filesystem::path& path);
void write_ply(const std::filesystem::path& path, const PointCloud& cloud);

/// Dispatches on extension: `.bin` or `.ply`.
PointCloud read_cloud(const std::filesystem::path& path);

struct PoseRecord {
  int frame = 0;
  RigidTransform transform;
};

/// One pose per line, 12 reals as a row-major 3x4 [R | t]. Rotations are projected onto SO(3).
std::vector<PoseRecord> parse_pose_file(std::string_view text);
std::vector<PoseRecord> read_pose_file(const std::filesystem::path& path);
std::string format_pose_line(const RigidTransform& t);
void write_pose_file(const std::filesystem::path& path, const std::vector<RigidTransform>& poses);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<double> values;
};

/// Ordered list of named float64 tensors. Model parameters, optimizer moments, schedule constants
/// and the config snapshot all travel as entries (see Model::to_checkpoint).
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(std::string_view name) const;
  const NamedTensor& at(std::string_view name) const;  // throws CheckpointError
};

/// `ADRG` | u32 version | repeated { u32 name length | name | u64 count | f64 LE payload }.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::string_view bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
  // Data preparation.
  double voxel_size = 0.3;
  int num_points = 16384;
  int frame_interval = 10;

  // Registration.
  int clusters = 8;          // J
  int gmm_topk = 2;          // k of the bidirectional rejection rule
  int gmm_max_iters = 100;
  double gmm_tol = 1e-6;
  int candidates = 3;        // K
  int sampling_steps = 3;    // S
  double backbone_scale = 0.25;
  double decode_temperature = 0.02;

  // Loss weights.
  double alpha = 4.0;  // rotation
  double beta = 1.0;   // translation
  double gamma = 1.0;  // diffusion

  // Diffusion.
  int diffusion_steps = 1000;  // T
  double beta_start = 1e-4;
  double beta_end = 0.02;
  double sinkhorn_eps = 0.1;
  int sinkhorn_iters = 100;

  // Optimization.
  double learning_rate = 1e-3;
  double lr_decay = 0.5;
  int lr_decay_every = 10;
  int epochs = 50;
  int batch_size = 4;
  int train_pairs = 32;
  int val_pairs = 8;

  // Synthetic data.
  int synthetic_points = 512;
  double max_rot_deg = 10.0;
  double max_trans = 2.0;
  double jitter = 0.05;
  int outlier_clusters = 2;

  std::uint64_t seed = 0;

  /// Throws ArgumentError when a count is < 1 or a weight is negative.
  void validate() const;

  /// Every key in serialization order with its value widened to double.
  std::vector<std::pair<std::string, double>> items() const;
  /// Sets a key; throws ArgumentError for unknown keys or non-integral counts.
  void set(const std::string& key, double value);
};

/// `key = value` lines, `#` starts a comment.
RunConfig parse_config(std::string_view text);
RunConfig read_config(const std::filesystem::path& path);
std::string serialize_config(const RunConfig& cfg);

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::string_view bytes);

}  // namespace adreg
