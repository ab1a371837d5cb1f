#include "adreg/io.hpp"

#include <bit>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "adreg/errors.hpp"

namespace adreg {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

namespace {

template <typename T>
T load_le(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void append_le(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> tokens;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) tokens.push_back(line.substr(i, j - i));
    i = j;
  }
  return tokens;
}

bool parse_double(std::string_view tok, double& out) {
  // from_chars for double is available in libstdc++ 11.
  const auto* end = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(tok.data(), end, out);
  return ec == std::errc() && ptr == end;
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) {
      if (start < text.size()) lines.push_back(text.substr(start));
      break;
    }
    std::string_view line = text.substr(start, nl - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    start = nl + 1;
  }
  return lines;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// LiDAR binary
// ---------------------------------------------------------------------------

PointCloud parse_lidar_bin(std::string_view bytes) {
  constexpr std::size_t kStride = 16;
  if (bytes.size() % kStride != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % kStride;
    throw FormatError("lidar bin: truncated record at byte offset " + std::to_string(offset) + " (length " +
                      std::to_string(bytes.size()) + " is not a multiple of 16)");
  }
  const auto n = static_cast<Eigen::Index>(bytes.size() / kStride);
  Points pts(n, 3);
  for (Eigen::Index i = 0; i < n; ++i) {
    const char* rec = bytes.data() + static_cast<std::size_t>(i) * kStride;
    for (int a = 0; a < 3; ++a) {
      const float v = load_le<float>(rec + 4 * a);
      if (!std::isfinite(v)) {
        throw FormatError("lidar bin: non-finite coordinate at byte offset " +
                          std::to_string(static_cast<std::size_t>(i) * kStride + 4 * static_cast<std::size_t>(a)));
      }
      pts(i, a) = static_cast<double>(v);
    }
  }
  return PointCloud(std::move(pts));
}

PointCloud read_lidar_bin(const std::filesystem::path& path) { return parse_lidar_bin(read_file_bytes(path)); }

void write_lidar_bin(const std::filesystem::path& path, const PointCloud& cloud) {
  std::string out;
  out.reserve(static_cast<std::size_t>(cloud.size()) * 16);
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    for (int a = 0; a < 3; ++a) append_le<float>(out, static_cast<float>(cloud.points(i, a)));
    append_le<float>(out, 0.0f);
  }
  write_file_bytes(path, out);
}

// ---------------------------------------------------------------------------
// PLY (ASCII)
// ---------------------------------------------------------------------------

PointCloud parse_ply(std::string_view text) {
  const auto lines = split_lines(text);
  auto fail = [](std::size_t line, const std::string& what) {
    throw FormatError("ply line " + std::to_string(line + 1) + ": " + what);
  };
  if (lines.empty() || trim(lines[0]) != "ply") fail(0, "missing 'ply' magic");

  long vertex_count = -1;
  bool in_vertex = false;
  std::vector<std::string> props;
  std::size_t header_end = 0;
  bool found_end = false;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto tok = split_ws(lines[i]);
    if (tok.empty()) continue;
    if (tok[0] == "end_header") {
      header_end = i + 1;
      found_end = true;
      break;
    }
    if (tok[0] == "format") {
      if (tok.size() < 2 || tok[1] != "ascii") fail(i, "only ascii format is supported");
    } else if (tok[0] == "comment" || tok[0] == "obj_info") {
      continue;
    } else if (tok[0] == "element") {
      if (tok.size() != 3) fail(i, "malformed element line");
      if (tok[1] == "vertex") {
        double c = 0;
        if (!parse_double(tok[2], c) || c < 0) fail(i, "bad vertex count");
        vertex_count = static_cast<long>(c);
        in_vertex = true;
      } else {
        double c = 0;
        if (!parse_double(tok[2], c)) fail(i, "bad element count");
        if (c != 0) fail(i, "unsupported element '" + std::string(tok[1]) + "'");
        in_vertex = false;
      }
    } else if (tok[0] == "property") {
      if (!in_vertex) continue;
      if (tok.size() < 3 || tok[1] == "list") fail(i, "unsupported vertex property");
      props.emplace_back(tok.back());
    } else {
      fail(i, "unknown header keyword '" + std::string(tok[0]) + "'");
    }
  }
  if (!found_end) fail(lines.size() ? lines.size() - 1 : 0, "missing end_header");
  if (vertex_count < 0) fail(header_end - 1, "no vertex element");
  int ix = -1, iy = -1, iz = -1;
  for (std::size_t p = 0; p < props.size(); ++p) {
    if (props[p] == "x") ix = static_cast<int>(p);
    if (props[p] == "y") iy = static_cast<int>(p);
    if (props[p] == "z") iz = static_cast<int>(p);
  }
  if (ix < 0 || iy < 0 || iz < 0) fail(header_end - 1, "vertex element lacks x, y, z");

  Points pts(vertex_count, 3);
  std::size_t line = header_end;
  for (long v = 0; v < vertex_count; ++v, ++line) {
    while (line < lines.size() && trim(lines[line]).empty()) ++line;
    if (line >= lines.size()) fail(line, "expected " + std::to_string(vertex_count) + " vertices");
    const auto tok = split_ws(lines[line]);
    if (tok.size() != props.size()) fail(line, "vertex has wrong property count");
    const int idx[3] = {ix, iy, iz};
    for (int a = 0; a < 3; ++a) {
      double val = 0;
      if (!parse_double(tok[static_cast<std::size_t>(idx[a])], val) || !std::isfinite(val)) fail(line, "bad coordinate");
      pts(v, a) = val;
    }
  }
  return PointCloud(std::move(pts));
}

PointCloud read_ply(const std::filesystem::path& path) { return parse_ply(read_file_bytes(path)); }

void write_ply(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ostringstream out;
  out << "ply\nformat ascii 1.0\nelement vertex " << cloud.size()
      << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  out.precision(9);
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    out << cloud.points(i, 0) << ' ' << cloud.points(i, 1) << ' ' << cloud.points(i, 2) << '\n';
  }
  write_file_bytes(path, out.str());
}

PointCloud read_cloud(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".bin") return read_lidar_bin(path);
  if (ext == ".ply") return read_ply(path);
  throw FormatError("unsupported point cloud extension '" + ext + "' for " + path.string());
}

// ---------------------------------------------------------------------------
// Poses
// ---------------------------------------------------------------------------

std::vector<PoseRecord> parse_pose_file(std::string_view text) {
  std::vector<PoseRecord> poses;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto tok = split_ws(lines[i]);
    if (tok.empty()) continue;
    if (tok.size() != 12) {
      throw FormatError("pose line " + std::to_string(i + 1) + ": expected 12 values, got " +
                        std::to_string(tok.size()));
    }
    Eigen::Matrix<double, 3, 4> m;
    for (int k = 0; k < 12; ++k) {
      double v = 0;
      if (!parse_double(tok[static_cast<std::size_t>(k)], v) || !std::isfinite(v)) {
        throw FormatError("pose line " + std::to_string(i + 1) + ": bad number '" +
                          std::string(tok[static_cast<std::size_t>(k)]) + "'");
      }
      m(k / 4, k % 4) = v;
    }
    poses.push_back({static_cast<int>(i), RigidTransform(project_to_rotation(m.leftCols<3>()), m.col(3))});
  }
  return poses;
}

std::vector<PoseRecord> read_pose_file(const std::filesystem::path& path) {
  return parse_pose_file(read_file_bytes(path));
}

std::string format_pose_line(const RigidTransform& t) {
  const auto m = t.matrix3x4();
  std::ostringstream out;
  out.precision(17);
  for (int k = 0; k < 12; ++k) out << (k ? " " : "") << m(k / 4, k % 4);
  return out.str();
}

void write_pose_file(const std::filesystem::path& path, const std::vector<RigidTransform>& poses) {
  std::string out;
  for (const auto& p : poses) out += format_pose_line(p) + "\n";
  write_file_bytes(path, out);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const NamedTensor* Checkpoint::find(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

const NamedTensor& Checkpoint::at(std::string_view name) const {
  const auto* t = find(name);
  if (!t) throw CheckpointError("checkpoint has no tensor '" + std::string(name) + "'");
  return *t;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out = "ADRG";
  append_le<std::uint32_t>(out, ckpt.version);
  for (const auto& t : ckpt.tensors) {
    append_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    append_le<std::uint64_t>(out, static_cast<std::uint64_t>(t.values.size()));
    for (double v : t.values) append_le<double>(out, v);
  }
  return out;
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < 8 || bytes.substr(0, 4) != "ADRG") throw CheckpointError("bad checkpoint magic");
  Checkpoint ckpt;
  ckpt.version = load_le<std::uint32_t>(bytes.data() + 4);
  if (ckpt.version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version mismatch: file has " + std::to_string(ckpt.version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  std::size_t pos = 8;
  auto need = [&](std::size_t n, const char* what) {
    if (bytes.size() - pos < n) {
      throw CheckpointError(std::string("truncated checkpoint reading ") + what + " at byte " + std::to_string(pos));
    }
  };
  while (pos < bytes.size()) {
    need(4, "name length");
    const auto name_len = load_le<std::uint32_t>(bytes.data() + pos);
    pos += 4;
    need(name_len, "name");
    NamedTensor t;
    t.name.assign(bytes.data() + pos, name_len);
    pos += name_len;
    need(8, "element count");
    const auto count = load_le<std::uint64_t>(bytes.data() + pos);
    pos += 8;
    if (count > (bytes.size() - pos) / 8) need(bytes.size() - pos + 1, "tensor payload");
    t.values.resize(count);
    std::memcpy(t.values.data(), bytes.data() + pos, count * 8);
    pos += count * 8;
    ckpt.tensors.push_back(std::move(t));
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file_bytes(path);
  } catch (const FormatError& e) {
    throw CheckpointError(e.what());
  }
  return deserialize_checkpoint(bytes);
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

namespace {

template <typename Cfg, typename F>
void for_each_field(Cfg& c, F&& f) {
  f("voxel_size", c.voxel_size);
  f("num_points", c.num_points);
  f("frame_interval", c.frame_interval);
  f("clusters", c.clusters);
  f("gmm_topk", c.gmm_topk);
  f("gmm_max_iters", c.gmm_max_iters);
  f("gmm_tol", c.gmm_tol);
  f("candidates", c.candidates);
  f("sampling_steps", c.sampling_steps);
  f("backbone_scale", c.backbone_scale);
  f("decode_temperature", c.decode_temperature);
  f("alpha", c.alpha);
  f("beta", c.beta);
  f("gamma", c.gamma);
  f("diffusion_steps", c.diffusion_steps);
  f("beta_start", c.beta_start);
  f("beta_end", c.beta_end);
  f("sinkhorn_eps", c.sinkhorn_eps);
  f("sinkhorn_iters", c.sinkhorn_iters);
  f("learning_rate", c.learning_rate);
  f("lr_decay", c.lr_decay);
  f("lr_decay_every", c.lr_decay_every);
  f("epochs", c.epochs);
  f("batch_size", c.batch_size);
  f("train_pairs", c.train_pairs);
  f("val_pairs", c.val_pairs);
  f("synthetic_points", c.synthetic_points);
  f("max_rot_deg", c.max_rot_deg);
  f("max_trans", c.max_trans);
  f("jitter", c.jitter);
  f("outlier_clusters", c.outlier_clusters);
  f("seed", c.seed);
}

}  // namespace

void RunConfig::validate() const {
  for_each_field(*this, [](const char* name, const auto& v) {
    using T = std::decay_t<decltype(v)>;
    if constexpr (std::is_same_v<T, int>) {
      if (v < 1 && std::string_view(name) != "outlier_clusters") {
        throw ArgumentError(std::string("config: ") + name + " must be >= 1");
      }
      if (v < 0) throw ArgumentError(std::string("config: ") + name + " must be >= 0");
    } else if constexpr (std::is_same_v<T, double>) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ArgumentError(std::string("config: ") + name + " must be finite and >= 0");
    }
  });
  if (!(voxel_size > 0.0)) throw ArgumentError("config: voxel_size must be > 0");
  if (!(backbone_scale > 0.0)) throw ArgumentError("config: backbone_scale must be > 0");
  if (!(decode_temperature > 0.0)) throw ArgumentError("config: decode_temperature must be > 0");
  if (!(sinkhorn_eps > 0.0)) throw ArgumentError("config: sinkhorn_eps must be > 0");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ArgumentError("config: require 0 < beta_start <= beta_end < 1");
  }
  if (gmm_topk > clusters) throw ArgumentError("config: gmm_topk must not exceed clusters");
}

std::vector<std::pair<std::string, double>> RunConfig::items() const {
  std::vector<std::pair<std::string, double>> out;
  for_each_field(*this, [&](const char* name, const auto& v) { out.emplace_back(name, static_cast<double>(v)); });
  return out;
}

void RunConfig::set(const std::string& key, double value) {
  bool found = false;
  for_each_field(*this, [&](const char* name, auto& field) {
    if (key != name) return;
    found = true;
    using T = std::decay_t<decltype(field)>;
    if constexpr (std::is_same_v<T, double>) {
      field = value;
    } else {
      if (value != std::floor(value) || value < 0) {
        throw ArgumentError("config: " + key + " expects a non-negative integer");
      }
      field = static_cast<T>(value);
    }
  });
  if (!found) throw ArgumentError("config: unknown key '" + key + "'");
}

RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    std::string_view line = lines[i];
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw FormatError("config line " + std::to_string(i + 1) + ": expected key = value");
    const std::string key(trim(line.substr(0, eq)));
    const auto val_text = trim(line.substr(eq + 1));
    double v = 0;
    if (!parse_double(val_text, v)) {
      throw FormatError("config line " + std::to_string(i + 1) + ": bad value '" + std::string(val_text) + "'");
    }
    try {
      cfg.set(key, v);
    } catch (const ArgumentError& e) {
      throw FormatError("config line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig read_config(const std::filesystem::path& path) { return parse_config(read_file_bytes(path)); }

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, value] : cfg.items()) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    (void)ec;
    out += key + " = " + std::string(buf, ptr) + "\n";
  }
  return out;
}

}  // namespace adreg
