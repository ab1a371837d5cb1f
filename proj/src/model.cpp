#include "adreg/model.hpp"

#include <algorithm>
#include <string>

#include "adreg/errors.hpp"

namespace adreg {

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t tag) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

int coarse_width(const RunConfig& cfg) { return default_layer_configs(cfg.backbone_scale)[2].descriptor.back(); }
int fine_width(const RunConfig& cfg) { return default_layer_configs(cfg.backbone_scale)[1].descriptor.back(); }

std::vector<double> flatten(const nn::Matrix& m) {
  std::vector<double> out(static_cast<std::size_t>(m.size()));
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(out.data(), m.rows(), m.cols()) = m;
  return out;
}

void unflatten(const NamedTensor& t, nn::Matrix& m) {
  if (static_cast<Eigen::Index>(t.values.size()) != m.size()) {
    throw CheckpointError("checkpoint tensor '" + t.name + "' has " + std::to_string(t.values.size()) +
                          " values, model expects " + std::to_string(m.size()));
  }
  m = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(t.values.data(),
                                                                                                 m.rows(), m.cols());
}

template <typename F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const DegeneracyError& e) {
    throw DegeneracyError(std::string(name) + ": " + e.what());
  } catch (const NumericalError& e) {
    throw NumericalError(std::string(name) + ": " + e.what());
  } catch (const ArgumentError& e) {
    throw ArgumentError(std::string(name) + ": " + e.what());
  }
}

std::vector<char> keep_from_components(const std::vector<int>& assignment, const std::vector<char>& outlier_components) {
  std::vector<char> keep(assignment.size());
  for (std::size_t i = 0; i < assignment.size(); ++i) keep[i] = outlier_components[assignment[i]] ? 0 : 1;
  return keep;
}

Eigen::Index count(const std::vector<char>& m) { return std::count(m.begin(), m.end(), 1); }

}  // namespace

Model::Model(const RunConfig& cfg)
    : config(cfg),
      backbone(default_layer_configs(cfg.backbone_scale)),
      coarse(coarse_width(cfg)),
      fine(fine_width(cfg), cfg.diffusion_steps),
      schedule(make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)) {
  cfg.validate();
}

void Model::init(std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, 100));
  backbone.init(rng);
  coarse.init(rng);
  fine.init(rng);
}

void Model::visit(const nn::ParamVisitor& fn) {
  backbone.visit("backbone.", fn);
  coarse.visit("coarse.", fn);
  fine.visit("fine.", fn);
}

void Model::visit_buffers(const nn::BufferVisitor& fn) {
  backbone.visit_buffers("backbone.", fn);
  coarse.visit_buffers("coarse.", fn);
  fine.visit_buffers("fine.", fn);
}

std::vector<nn::Parameter*> Model::parameters() {
  std::vector<nn::Parameter*> out;
  visit([&](const std::string&, nn::Parameter& p) { out.push_back(&p); });
  return out;
}

void Model::zero_grad() {
  visit([](const std::string&, nn::Parameter& p) { p.zero_grad(); });
}

Checkpoint Model::to_checkpoint(const nn::Adam* optimizer) {
  Checkpoint ck;
  for (const auto& [key, value] : config.items()) ck.tensors.push_back({"config." + key, {value}});
  ck.tensors.push_back({"schedule.alpha_bar", schedule.alpha_bar});
  visit([&](const std::string& name, nn::Parameter& p) { ck.tensors.push_back({name, flatten(p.value)}); });
  visit_buffers([&](const std::string& name, nn::Matrix& m) { ck.tensors.push_back({name, flatten(m)}); });
  if (optimizer) {
    ck.tensors.push_back({"adam.lr", {optimizer->lr}});
    ck.tensors.push_back({"adam.steps", {static_cast<double>(optimizer->steps)}});
    for (std::size_t i = 0; i < optimizer->first_moment.size(); ++i) {
      ck.tensors.push_back({"adam.m." + std::to_string(i), flatten(optimizer->first_moment[i])});
      ck.tensors.push_back({"adam.v." + std::to_string(i), flatten(optimizer->second_moment[i])});
    }
  }
  return ck;
}

Model Model::from_checkpoint(const Checkpoint& ck, nn::Adam* optimizer) {
  RunConfig cfg;
  for (const auto& [key, unused] : cfg.items()) {
    (void)unused;
    const NamedTensor& t = ck.at("config." + key);
    if (t.values.size() != 1) throw CheckpointError("checkpoint config entry '" + key + "' must hold one value");
    try {
      cfg.set(key, t.values[0]);
    } catch (const ArgumentError& e) {
      throw CheckpointError(std::string("checkpoint config: ") + e.what());
    }
  }
  Model model(cfg);
  model.visit([&](const std::string& name, nn::Parameter& p) {
    unflatten(ck.at(name), p.value);
    p.zero_grad();
  });
  model.visit_buffers([&](const std::string& name, nn::Matrix& m) { unflatten(ck.at(name), m); });
  if (optimizer && ck.find("adam.lr")) {
    optimizer->lr = ck.at("adam.lr").values.at(0);
    optimizer->steps = static_cast<std::int64_t>(ck.at("adam.steps").values.at(0));
    optimizer->first_moment.clear();
    optimizer->second_moment.clear();
    for (nn::Parameter* p : model.parameters()) {
      const std::size_t i = optimizer->first_moment.size();
      nn::Matrix m(p->value.rows(), p->value.cols()), v(p->value.rows(), p->value.cols());
      unflatten(ck.at("adam.m." + std::to_string(i)), m);
      unflatten(ck.at("adam.v." + std::to_string(i)), v);
      optimizer->first_moment.push_back(std::move(m));
      optimizer->second_moment.push_back(std::move(v));
    }
  }
  return model;
}

PurifiedSets purify(const BackboneOutput& src, const BackboneOutput& tgt, const RunConfig& cfg, std::uint64_t seed) {
  PurifiedSets out;
  GmmFitOptions opts;
  opts.clusters = cfg.clusters;
  opts.max_iters = cfg.gmm_max_iters;
  opts.tol = cfg.gmm_tol;
  opts.seed = derive_seed(seed, 1);
  const GmmModel src_model = fit_gmm(src.coarse.points, opts);
  opts.seed = derive_seed(seed, 2);
  const GmmModel tgt_model = fit_gmm(tgt.coarse.points, opts);
  const OutlierRejection rej = remove_outliers(src_model, src.coarse.points, tgt_model, tgt.coarse.points,
                                               std::min(cfg.gmm_topk, cfg.clusters));

  out.src_coarse_keep = rej.source_kept;
  out.tgt_coarse_keep = rej.target_kept;
  out.src_fine_keep = keep_from_components(assign_components(src_model, src.fine.points), rej.source_outlier_components);
  out.tgt_fine_keep = keep_from_components(assign_components(tgt_model, tgt.fine.points), rej.target_outlier_components);

  const Eigen::Index need = std::max(3, cfg.candidates);
  if (count(out.src_coarse_keep) < need || count(out.tgt_coarse_keep) < need || count(out.src_fine_keep) < need ||
      count(out.tgt_fine_keep) < need) {
    out.filtered = false;
    out.src_coarse_keep.assign(static_cast<std::size_t>(src.coarse.size()), 1);
    out.tgt_coarse_keep.assign(static_cast<std::size_t>(tgt.coarse.size()), 1);
    out.src_fine_keep.assign(static_cast<std::size_t>(src.fine.size()), 1);
    out.tgt_fine_keep.assign(static_cast<std::size_t>(tgt.fine.size()), 1);
  }
  out.src_coarse = src.coarse.select(out.src_coarse_keep);
  out.tgt_coarse = tgt.coarse.select(out.tgt_coarse_keep);
  out.src_fine = src.fine.select(out.src_fine_keep);
  out.tgt_fine = tgt.fine.select(out.tgt_fine_keep);
  return out;
}

RegistrationOutput register_pair(Model& model, const Points& src, const Points& tgt, const RegisterOptions& opts) {
  const RunConfig& cfg = model.config;
  const int k = opts.candidates.value_or(cfg.candidates);
  const int s = opts.sampling_steps.value_or(cfg.sampling_steps);

  const BackboneOutput src_out =
      stage("backbone", [&] { return model.backbone.forward(src, derive_seed(opts.seed, 10), nn::Mode::Eval); });
  const BackboneOutput tgt_out =
      stage("backbone", [&] { return model.backbone.forward(tgt, derive_seed(opts.seed, 11), nn::Mode::Eval); });
  RunConfig pcfg = cfg;
  pcfg.candidates = k;
  const PurifiedSets sets = stage("bgmm", [&] { return purify(src_out, tgt_out, pcfg, derive_seed(opts.seed, 12)); });

  RegistrationOutput out;
  const CoarseResult coarse = stage("coarse", [&] {
    return coarse_forward(model.coarse, sets.src_coarse, sets.tgt_coarse, k, nn::Mode::Eval, false);
  });
  out.coarse = coarse.transform;

  InferenceOptions io;
  io.candidates = k;
  io.sampling_steps = s;
  io.temperature = cfg.decode_temperature;
  io.seed = derive_seed(opts.seed, 13);
  const DenoiseFn denoise = model.fine.as_denoise_fn();
  out.inference = stage("diffusion", [&] {
    return autoregressive_infer(out.coarse, sets.src_fine, sets.tgt_fine, denoise, model.fine.confidence,
                                model.schedule, io);
  });
  out.fine = out.inference.transform;

  auto& d = out.diagnostics;
  d.src_coarse_kept = sets.src_coarse.size();
  d.tgt_coarse_kept = sets.tgt_coarse.size();
  d.src_fine_kept = sets.src_fine.size();
  d.tgt_fine_kept = sets.tgt_fine.size();
  d.filtered = sets.filtered;
  d.coarse_confidence = coarse.confidence;
  d.mean_coarse_confidence = coarse.confidence.mean();
  return out;
}

}  // namespace adreg
