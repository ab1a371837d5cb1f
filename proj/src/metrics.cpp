#include "adreg/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace adreg {

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = sd = 0.0;
  if (v.empty()) return;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  for (double x : v) sd += (x - mean) * (x - mean);
  sd = std::sqrt(sd / static_cast<double>(v.size()));
}

}  // namespace

PairMetrics registration_metrics(const RigidTransform& est, const RigidTransform& gt) {
  PairMetrics m;
  m.rte = (est.translation() - gt.translation()).norm();
  m.rre = rad2deg(RigidTransform(gt.rotation().transpose() * est.rotation(), Eigen::Vector3d::Zero()).angle());
  m.success = m.rte < kSuccessRte && m.rre < kSuccessRre;
  return m;
}

MetricsReport summarize(std::vector<PairRecord> records) {
  std::stable_sort(records.begin(), records.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
  MetricsReport r;
  std::vector<double> rte, rre, crte, crre;
  double time = 0.0;
  for (const auto& p : records) {
    time += p.time_ms;
    if (!p.success) continue;
    rte.push_back(p.rte);
    rre.push_back(p.rre);
    crte.push_back(p.coarse_rte);
    crre.push_back(p.coarse_rre);
  }
  double unused = 0.0;
  mean_std(rte, r.rte_mean, r.rte_std);
  mean_std(rre, r.rre_mean, r.rre_std);
  mean_std(crte, r.coarse_rte_mean, unused);
  mean_std(crre, r.coarse_rre_mean, unused);
  r.successes = static_cast<int>(rte.size());
  r.recall = records.empty() ? 0.0 : static_cast<double>(r.successes) / static_cast<double>(records.size());
  r.time_mean_ms = records.empty() ? 0.0 : time / static_cast<double>(records.size());
  r.pairs = std::move(records);
  return r;
}

MetricsReport evaluate_dataset(Model& model, const std::vector<RegistrationPair>& pairs, const EvalOptions& opts) {
  std::vector<PairRecord> records;
  records.reserve(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    PairRecord rec;
    rec.index = static_cast<int>(i);
    const auto start = std::chrono::steady_clock::now();
    try {
      RegisterOptions ro;
      ro.seed = derive_seed(opts.seed, i);
      ro.sampling_steps = opts.sampling_steps;
      ro.candidates = opts.candidates;
      const RegistrationOutput out = register_pair(model, pairs[i].source, pairs[i].target, ro);
      const PairMetrics fine = registration_metrics(out.fine, pairs[i].gt);
      const PairMetrics coarse = registration_metrics(out.coarse, pairs[i].gt);
      rec.rte = fine.rte;
      rec.rre = fine.rre;
      rec.success = fine.success;
      rec.coarse_rte = coarse.rte;
      rec.coarse_rre = coarse.rre;
    } catch (const std::exception& e) {
      rec.success = false;
      rec.rte = rec.rre = rec.coarse_rte = rec.coarse_rre = std::nan("");
      rec.error = e.what();
    }
    rec.time_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    records.push_back(std::move(rec));
  }
  return summarize(std::move(records));
}

std::string format_report_csv(const MetricsReport& report) {
  std::ostringstream os;
  os << "pair,rte,rre,success,coarse_rte,coarse_rre,error\n";
  for (const auto& p : report.pairs) {
    std::string err = p.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    os << p.index << ',' << fmt(p.rte) << ',' << fmt(p.rre) << ',' << (p.success ? 1 : 0) << ',' << fmt(p.coarse_rte)
       << ',' << fmt(p.coarse_rre) << ',' << err << '\n';
  }
  return os.str();
}

std::string format_report_summary(const MetricsReport& r) {
  std::ostringstream os;
  os << "pairs " << r.pairs.size() << "  recall " << fmt(r.recall) << "\n"
     << "RTE (m)   " << fmt(r.rte_mean) << " +/- " << fmt(r.rte_std) << "  (coarse " << fmt(r.coarse_rte_mean) << ")\n"
     << "RRE (deg) " << fmt(r.rre_mean) << " +/- " << fmt(r.rre_std) << "  (coarse " << fmt(r.coarse_rre_mean) << ")\n"
     << "time (ms) " << fmt(r.time_mean_ms) << "\n";
  return os.str();
}

}  // namespace adreg
