#pragma once

#include <string>
#include <vector>

#include "adreg/geometry.hpp"
#include "adreg/model.hpp"

namespace adreg {

inline constexpr double kSuccessRte = 2.0;  // m
inline constexpr double kSuccessRre = 5.0;  // deg

struct PairMetrics {
  double rte = 0.0;  // m
  double rre = 0.0;  // deg
  bool success = false;
};

/// RTE = |t_est - t_gt|, RRE = geodesic angle of R_gtᵀ R_est in degrees, i.e.
/// arccos((tr - 1) / 2) evaluated through atan2 so it stays finite and accurate near 0.
PairMetrics registration_metrics(const RigidTransform& est, const RigidTransform& gt);

struct PairRecord {
  int index = 0;
  double rte = 0.0, rre = 0.0;
  double coarse_rte = 0.0, coarse_rre = 0.0;
  bool success = false;
  double time_ms = 0.0;
  std::string error;  // nonempty when the pipeline threw
};

struct MetricsReport {
  std::vector<PairRecord> pairs;  // sorted by index
  double rte_mean = 0.0, rte_std = 0.0;
  double rre_mean = 0.0, rre_std = 0.0;
  double coarse_rte_mean = 0.0, coarse_rre_mean = 0.0;
  double recall = 0.0;
  double time_mean_ms = 0.0;
  int successes = 0;
};

/// Aggregates over successful pairs only; recall is over all pairs.
MetricsReport summarize(std::vector<PairRecord> records);

struct EvalOptions {
  std::uint64_t seed = 0;
  std::optional<int> sampling_steps;
  std::optional<int> candidates;
};

/// Registers every pair; a throwing pair is recorded as a failure and the sweep continues.
MetricsReport evaluate_dataset(Model& model, const std::vector<RegistrationPair>& pairs, const EvalOptions& opts);

/// `pair,rte,rre,success,coarse_rte,coarse_rre,error`. Timing is left out so reruns are
/// byte-identical.
std::string format_report_csv(const MetricsReport& report);
std::string format_report_summary(const MetricsReport& report);

}  // namespace adreg
