#include <malloc.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "adreg/bgmm.hpp"
#include "adreg/errors.hpp"
#include "adreg/io.hpp"
#include "adreg/metrics.hpp"
#include "adreg/model.hpp"
#include "adreg/training.hpp"

namespace fs = std::filesystem;
using namespace adreg;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

// Seed tags for synthetic splits, kept apart so held-out pairs never overlap training pairs.
constexpr std::uint64_t kTrainSplit = 1;
constexpr std::uint64_t kValSplit = 2;
constexpr std::uint64_t kEvalSplit = 3;

RunConfig load_config(const std::string& path) { return path.empty() ? RunConfig{} : read_config(path); }

/// Large scans are voxelized and subsampled to the configured point budget; small clouds pass through.
Points prepare_cloud(const PointCloud& cloud, const RunConfig& cfg, std::uint64_t seed) {
  if (cloud.size() <= cfg.num_points) return cloud.points;
  PointCloud v = cfg.voxel_size > 0.0 ? voxel_downsample(cloud, cfg.voxel_size) : cloud;
  if (v.size() <= cfg.num_points) return v.points;
  std::mt19937_64 rng(seed);
  std::vector<int> idx(static_cast<std::size_t>(v.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.num_points); ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(static_cast<std::size_t>(cfg.num_points));
  std::sort(idx.begin(), idx.end());
  Points out(cfg.num_points, 3);
  for (int i = 0; i < cfg.num_points; ++i) out.row(i) = v.points.row(idx[static_cast<std::size_t>(i)]);
  return out;
}

std::vector<RegistrationPair> load_pairs(const std::string& data, const RunConfig& cfg, std::uint64_t seed,
                                         std::uint64_t split, int count) {
  if (data == "synthetic") return as_registration_pairs(make_synthetic_set(cfg, derive_seed(seed, split), count));
  std::vector<RegistrationPair> pairs = read_pair_directory(data);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    pairs[i].source = prepare_cloud(PointCloud(pairs[i].source), cfg, derive_seed(seed, 2 * i));
    pairs[i].target = prepare_cloud(PointCloud(pairs[i].target), cfg, derive_seed(seed, 2 * i + 1));
  }
  return pairs;
}

/// Inference-time keys that a --config file may override on a loaded checkpoint.
void apply_inference_overrides(RunConfig& model_cfg, const RunConfig& file_cfg) {
  model_cfg.clusters = file_cfg.clusters;
  model_cfg.gmm_topk = file_cfg.gmm_topk;
  model_cfg.gmm_max_iters = file_cfg.gmm_max_iters;
  model_cfg.gmm_tol = file_cfg.gmm_tol;
  model_cfg.candidates = file_cfg.candidates;
  model_cfg.sampling_steps = file_cfg.sampling_steps;
  model_cfg.decode_temperature = file_cfg.decode_temperature;
  model_cfg.voxel_size = file_cfg.voxel_size;
  model_cfg.num_points = file_cfg.num_points;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ---------------------------------------------------------------------------

struct RegisterArgs {
  std::string src, tgt, model, config, trace, gt;
  std::uint64_t seed = 0;
};

int cmd_register(const RegisterArgs& a) {
  Model model = Model::from_checkpoint(load_checkpoint(a.model));
  if (!a.config.empty()) apply_inference_overrides(model.config, read_config(a.config));
  const Points src = prepare_cloud(read_cloud(a.src), model.config, derive_seed(a.seed, 0));
  const Points tgt = prepare_cloud(read_cloud(a.tgt), model.config, derive_seed(a.seed, 1));
  RegisterOptions ro;
  ro.seed = a.seed;
  const RegistrationOutput out = register_pair(model, src, tgt, ro);
  std::cout << format_pose_line(out.fine) << "\n";

  std::optional<RigidTransform> gt;
  if (!a.gt.empty()) {
    const auto poses = read_pose_file(a.gt);
    if (poses.empty()) throw FormatError("pose file " + a.gt + " is empty");
    gt = poses.front().transform;
    const PairMetrics m = registration_metrics(out.fine, *gt);
    std::cout << "RTE " << fmt(m.rte) << " m  RRE " << fmt(m.rre) << " deg  " << (m.success ? "success" : "failure")
              << "\n";
  }
  if (!a.trace.empty()) {
    std::ostringstream os;
    os << "step,t,rte,rre,mean_abs_c0\n";
    for (std::size_t i = 0; i < out.inference.steps.size(); ++i) {
      const auto& s = out.inference.steps[i];
      double rte = std::nan(""), rre = std::nan("");
      if (gt) {
        const PairMetrics m = registration_metrics(s.cumulative, *gt);
        rte = m.rte;
        rre = m.rre;
      }
      os << i + 1 << ',' << s.t << ',' << fmt(rte) << ',' << fmt(rre) << ',' << fmt(s.mean_abs_c0) << '\n';
    }
    write_file_bytes(a.trace, os.str());
  }
  return kOk;
}

struct TrainArgs {
  std::string config, out, data = "synthetic", log;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
  RunConfig cfg = load_config(a.config);
  if (a.seed) cfg.seed = *a.seed;
  const auto train_set = load_pairs(a.data, cfg, cfg.seed, kTrainSplit, cfg.train_pairs);
  std::vector<RegistrationPair> val_set;
  if (a.data == "synthetic") {
    val_set = load_pairs(a.data, cfg, cfg.seed, kValSplit, cfg.val_pairs);
  } else {
    val_set.assign(train_set.begin(), train_set.begin() + std::min<std::ptrdiff_t>(cfg.val_pairs, train_set.size()));
  }
  const TrainResult res = train(cfg, train_set, val_set, [](const EpochLog& e) {
    std::cerr << "epoch " << e.epoch << "  lr " << fmt(e.lr) << "  loss " << fmt(e.loss_total) << "  val RTE "
              << fmt(e.val_rte) << "  val RRE " << fmt(e.val_rre) << "\n";
  });
  save_checkpoint(res.checkpoint, a.out);
  write_file_bytes(a.log.empty() ? a.out + ".log.csv" : a.log, format_training_log(res.log));
  if (res.aborted) {
    std::cerr << "training aborted: " << res.message << " (last good checkpoint written)\n";
    return kNumerical;
  }
  return kOk;
}

struct EvalArgs {
  std::string data, model, report, config;
  std::uint64_t seed = 0;
  int pairs = 50;
  std::optional<int> steps, candidates;
};

int cmd_eval(const EvalArgs& a) {
  Model model = Model::from_checkpoint(load_checkpoint(a.model));
  if (!a.config.empty()) apply_inference_overrides(model.config, read_config(a.config));
  const auto pairs = load_pairs(a.data, model.config, a.seed, kEvalSplit, a.pairs);
  EvalOptions eo;
  eo.seed = a.seed;
  eo.sampling_steps = a.steps;
  eo.candidates = a.candidates;
  const MetricsReport rep = evaluate_dataset(model, pairs, eo);
  write_file_bytes(a.report, format_report_csv(rep));
  std::cout << format_report_summary(rep);
  return kOk;
}

struct GmmArgs {
  std::string src, tgt, out;
  int clusters = 8, topk = 2;
  std::uint64_t seed = 0;
};

int cmd_gmm_filter(const GmmArgs& a) {
  const Points src = read_cloud(a.src).points;
  const Points tgt = read_cloud(a.tgt).points;
  GmmFitOptions opts;
  opts.clusters = a.clusters;
  opts.seed = derive_seed(a.seed, 1);
  const GmmModel ms = fit_gmm(src, opts);
  opts.seed = derive_seed(a.seed, 2);
  const GmmModel mt = fit_gmm(tgt, opts);
  const OutlierRejection rej = remove_outliers(ms, src, mt, tgt, a.topk);
  std::ostringstream os;
  os << "cloud,point,x,y,z,component,kept\n";
  auto dump = [&](const char* name, const Points& p, const GmmModel& m, const std::vector<char>& kept) {
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      os << name << ',' << i << ',' << fmt(p(i, 0)) << ',' << fmt(p(i, 1)) << ',' << fmt(p(i, 2)) << ','
         << m.assignment[static_cast<std::size_t>(i)] << ',' << int(kept[static_cast<std::size_t>(i)]) << '\n';
    }
  };
  dump("source", src, ms, rej.source_kept);
  dump("target", tgt, mt, rej.target_kept);
  write_file_bytes(a.out, os.str());
  std::cout << "kept " << rej.source.rows() << "/" << src.rows() << " source, " << rej.target.rows() << "/"
            << tgt.rows() << " target points\n";
  return kOk;
}

struct SynthArgs {
  std::string out, config;
  int pairs = 10;
  std::uint64_t seed = 0;
  std::optional<int> points, outliers;
};

int cmd_make_synthetic(const SynthArgs& a) {
  RunConfig cfg = load_config(a.config);
  if (a.points) cfg.synthetic_points = *a.points;
  if (a.outliers) cfg.outlier_clusters = *a.outliers;
  write_pair_directory(a.out, as_registration_pairs(make_synthetic_set(cfg, derive_seed(a.seed, kEvalSplit), a.pairs)));
  std::cout << "wrote " << a.pairs << " pairs to " << a.out << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  // Layer activations are freed and reallocated every pass; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"Rigid point-cloud registration with GMM outlier rejection and diffusion refinement"};
  app.require_subcommand(1);

  RegisterArgs ra;
  auto* reg = app.add_subcommand("register", "Register a source cloud to a target cloud");
  reg->add_option("--src", ra.src, "Source cloud (.bin or .ply)")->required();
  reg->add_option("--tgt", ra.tgt, "Target cloud (.bin or .ply)")->required();
  reg->add_option("--model", ra.model, "Checkpoint")->required();
  reg->add_option("--config", ra.config, "Config overriding inference settings");
  reg->add_option("--trace", ra.trace, "Per-step CSV trace");
  reg->add_option("--gt", ra.gt, "Pose file whose first line is the ground truth");
  reg->add_option("--seed", ra.seed, "Random seed");

  TrainArgs ta;
  std::uint64_t train_seed = 0;
  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", ta.config, "Config file");
  tr->add_option("--out", ta.out, "Output checkpoint")->required();
  tr->add_option("--data", ta.data, "'synthetic' or a pair directory");
  tr->add_option("--log", ta.log, "Training log CSV (default <out>.log.csv)");
  auto* seed_opt = tr->add_option("--seed", train_seed, "Random seed (overrides the config)");

  EvalArgs ea;
  int eval_steps = 0, eval_k = 0;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  ev->add_option("--data", ea.data, "'synthetic' or a pair directory")->required();
  ev->add_option("--model", ea.model, "Checkpoint")->required();
  ev->add_option("--report", ea.report, "Per-pair CSV")->required();
  ev->add_option("--config", ea.config, "Config overriding inference settings");
  ev->add_option("--seed", ea.seed, "Random seed");
  ev->add_option("--pairs", ea.pairs, "Synthetic pair count")->check(CLI::PositiveNumber);
  auto* steps_opt = ev->add_option("--steps", eval_steps, "Override sampling steps S")->check(CLI::PositiveNumber);
  auto* k_opt = ev->add_option("--candidates", eval_k, "Override candidate count K")->check(CLI::PositiveNumber);

  GmmArgs ga;
  auto* gm = app.add_subcommand("gmm-filter", "Dump bidirectional GMM outlier rejection");
  gm->add_option("--src", ga.src, "Source cloud")->required();
  gm->add_option("--tgt", ga.tgt, "Target cloud")->required();
  gm->add_option("--clusters", ga.clusters, "Mixture components J")->check(CLI::PositiveNumber);
  gm->add_option("--topk", ga.topk, "Neighbor count k")->check(CLI::PositiveNumber);
  gm->add_option("--out", ga.out, "Output CSV")->required();
  gm->add_option("--seed", ga.seed, "Random seed");

  SynthArgs sa;
  int synth_points = 0, synth_outliers = 0;
  auto* sy = app.add_subcommand("make-synthetic", "Write a synthetic pair directory");
  sy->add_option("--out", sa.out, "Output directory")->required();
  sy->add_option("--pairs", sa.pairs, "Pair count")->check(CLI::PositiveNumber);
  sy->add_option("--seed", sa.seed, "Random seed");
  sy->add_option("--config", sa.config, "Config file");
  auto* pts_opt = sy->add_option("--points", synth_points, "Points per cloud")->check(CLI::PositiveNumber);
  auto* out_opt = sy->add_option("--outliers", synth_outliers, "Outlier clusters per cloud")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*reg) return cmd_register(ra);
    if (*tr) {
      if (*seed_opt) ta.seed = train_seed;
      return cmd_train(ta);
    }
    if (*ev) {
      if (*steps_opt) ea.steps = eval_steps;
      if (*k_opt) ea.candidates = eval_k;
      return cmd_eval(ea);
    }
    if (*gm) return cmd_gmm_filter(ga);
    if (*sy) {
      if (*pts_opt) sa.points = synth_points;
      if (*out_opt) sa.outliers = synth_outliers;
      return cmd_make_synthetic(sa);
    }
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "file error: " << e.what() << "\n";
    return kData;
  } catch (const DegeneracyError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
