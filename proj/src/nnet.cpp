#include "adreg/nnet.hpp"

#include <algorithm>
#include <cmath>

#include "adreg/errors.hpp"

namespace adreg::nn {

namespace {

std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

}  // namespace

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

Linear::Linear(int in, int out) : weight(out, in), bias(1, out) {}

void Linear::init(std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in() + out()));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index i = 0; i < weight.value.size(); ++i) weight.value.data()[i] = u(rng);
  bias.value.setZero();
}

Matrix Linear::forward(const Matrix& x, Cache* cache) const {
  if (x.cols() != in()) {
    throw ArgumentError("linear: input " + shape_str(x) + " does not match weight " + shape_str(weight.value));
  }
  Matrix out = x * weight.value.transpose();
  out.rowwise() += bias.value.row(0);
  if (cache) cache->input = x;
  return out;
}

Matrix Linear::backward(const Cache& cache, const Matrix& grad_out) {
  if (grad_out.cols() != out() || grad_out.rows() != cache.input.rows()) {
    throw ArgumentError("linear backward: gradient " + shape_str(grad_out) + " does not match output");
  }
  weight.grad.noalias() += grad_out.transpose() * cache.input;
  bias.grad.row(0) += grad_out.colwise().sum();
  return grad_out * weight.value;
}

void Linear::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + "weight", weight);
  fn(prefix + "bias", bias);
}

// ---------------------------------------------------------------------------
// BatchNorm
// ---------------------------------------------------------------------------

BatchNorm::BatchNorm(int channels, double momentum, double eps)
    : scale(1, channels),
      shift(1, channels),
      running_mean(Matrix::Zero(1, channels)),
      running_var(Matrix::Ones(1, channels)),
      momentum(momentum),
      eps(eps) {
  scale.value.setOnes();
}

Matrix BatchNorm::forward(const Matrix& x, Mode mode, Cache* cache) {
  if (x.cols() != channels()) throw ArgumentError("batchnorm: expected " + std::to_string(channels()) + " channels");
  RowVector mean, var;
  if (mode == Mode::Train) {
    if (x.rows() < 2) throw ArgumentError("batchnorm: training mode needs a batch of at least 2 rows");
    mean = x.colwise().mean();
    var = (x.rowwise() - mean).array().square().colwise().mean().matrix();
    const double n = static_cast<double>(x.rows());
    running_mean = momentum * running_mean + (1.0 - momentum) * mean;
    running_var = momentum * running_var + (1.0 - momentum) * var * (n / (n - 1.0));
  } else {
    mean = running_mean.row(0);
    var = running_var.row(0);
  }
  const RowVector inv_std = (var.array() + eps).rsqrt().matrix();
  Matrix xhat = (x.rowwise() - mean).array().rowwise() * inv_std.array();
  Matrix out = xhat.array().rowwise() * scale.value.row(0).array();
  out.rowwise() += shift.value.row(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std;
    cache->mode = mode;
  }
  return out;
}

Matrix BatchNorm::backward(const Cache& cache, const Matrix& grad_out) {
  scale.grad.row(0) += (grad_out.array() * cache.xhat.array()).colwise().sum().matrix();
  shift.grad.row(0) += grad_out.colwise().sum();
  const Matrix g_xhat = grad_out.array().rowwise() * scale.value.row(0).array();
  if (cache.mode == Mode::Eval) return g_xhat.array().rowwise() * cache.inv_std.array();
  // dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))
  const RowVector mean_g = g_xhat.colwise().mean();
  const RowVector mean_gx = (g_xhat.array() * cache.xhat.array()).colwise().mean().matrix();
  Matrix dx = g_xhat.rowwise() - mean_g;
  dx.array() -= cache.xhat.array().rowwise() * mean_gx.array();
  dx.array().rowwise() *= cache.inv_std.array();
  return dx;
}

void BatchNorm::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + "scale", scale);
  fn(prefix + "shift", shift);
}

void BatchNorm::visit_buffers(const std::string& prefix, const BufferVisitor& fn) {
  fn(prefix + "running_mean", running_mean);
  fn(prefix + "running_var", running_var);
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

Matrix relu_backward(const Matrix& x, const Matrix& grad_out) {
  return (x.array() > 0.0).select(grad_out, 0.0);
}

Matrix sigmoid(const Matrix& x) {
  return x.unaryExpr([](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

Matrix sigmoid_backward(const Matrix& y, const Matrix& grad_out) {
  return grad_out.array() * y.array() * (1.0 - y.array());
}

Matrix softmax_rows(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    y.row(r) = (x.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  return y;
}

Matrix softmax_rows_backward(const Matrix& y, const Matrix& grad_out) {
  const Eigen::VectorXd dot = (y.array() * grad_out.array()).rowwise().sum();
  return y.array() * (grad_out.colwise() - dot).array();
}

// ---------------------------------------------------------------------------
// CbrStack / Mlp
// ---------------------------------------------------------------------------

CbrStack::CbrStack(int in, std::vector<int> widths, int head_out) : in_(in) {
  int prev = in;
  for (int w : widths) {
    linear_.emplace_back(prev, w);
    norm_.emplace_back(w);
    prev = w;
  }
  if (head_out > 0) head_.emplace(prev, head_out);
}

int CbrStack::out() const {
  if (head_) return head_->out();
  return linear_.empty() ? in_ : linear_.back().out();
}

void CbrStack::init(std::mt19937_64& rng) {
  for (auto& l : linear_) l.init(rng);
  if (head_) head_->init(rng);
}

Matrix CbrStack::forward(const Matrix& x, Mode mode, Cache* cache) {
  if (cache) {
    cache->linear.resize(linear_.size());
    cache->norm.resize(norm_.size());
    cache->pre_activation.resize(linear_.size());
  }
  Matrix h = x;
  for (std::size_t i = 0; i < linear_.size(); ++i) {
    Matrix z = linear_[i].forward(h, cache ? &cache->linear[i] : nullptr);
    z = norm_[i].forward(z, mode, cache ? &cache->norm[i] : nullptr);
    h = relu(z);
    if (cache) cache->pre_activation[i] = std::move(z);
  }
  if (head_) h = head_->forward(h, cache ? &cache->head : nullptr);
  return h;
}

Matrix CbrStack::backward(const Cache& cache, const Matrix& grad_out) {
  Matrix g = grad_out;
  if (head_) g = head_->backward(cache.head, g);
  for (std::size_t i = linear_.size(); i-- > 0;) {
    g = relu_backward(cache.pre_activation[i], g);
    g = norm_[i].backward(cache.norm[i], g);
    g = linear_[i].backward(cache.linear[i], g);
  }
  return g;
}

void CbrStack::visit(const std::string& prefix, const ParamVisitor& fn) {
  for (std::size_t i = 0; i < linear_.size(); ++i) {
    linear_[i].visit(prefix + "block" + std::to_string(i) + ".conv.", fn);
    norm_[i].visit(prefix + "block" + std::to_string(i) + ".bn.", fn);
  }
  if (head_) head_->visit(prefix + "head.", fn);
}

void CbrStack::visit_buffers(const std::string& prefix, const BufferVisitor& fn) {
  for (std::size_t i = 0; i < norm_.size(); ++i) norm_[i].visit_buffers(prefix + "block" + std::to_string(i) + ".bn.", fn);
}

Mlp::Mlp(int in, std::vector<int> widths) {
  int prev = in;
  for (int w : widths) {
    layers_.emplace_back(prev, w);
    prev = w;
  }
}

void Mlp::init(std::mt19937_64& rng) {
  for (auto& l : layers_) l.init(rng);
}

Matrix Mlp::forward(const Matrix& x, Cache* cache) const {
  if (cache) {
    cache->linear.resize(layers_.size());
    cache->pre_activation.resize(layers_.size());
  }
  Matrix h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Matrix z = layers_[i].forward(h, cache ? &cache->linear[i] : nullptr);
    if (i + 1 < layers_.size()) {
      h = relu(z);
      if (cache) cache->pre_activation[i] = std::move(z);
    } else {
      h = std::move(z);
    }
  }
  return h;
}

Matrix Mlp::backward(const Cache& cache, const Matrix& grad_out) {
  Matrix g = grad_out;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    if (i + 1 < layers_.size()) g = relu_backward(cache.pre_activation[i], g);
    g = layers_[i].backward(cache.linear[i], g);
  }
  return g;
}

void Mlp::visit(const std::string& prefix, const ParamVisitor& fn) {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i].visit(prefix + "fc" + std::to_string(i) + ".", fn);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void Adam::step(const std::vector<Parameter*>& params) {
  if (first_moment.empty()) {
    for (const auto* p : params) {
      first_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
      second_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    }
  }
  if (first_moment.size() != params.size()) throw ArgumentError("adam: parameter count changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = *params[i];
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols() ||
        first_moment[i].rows() != p.value.rows() || first_moment[i].cols() != p.value.cols()) {
      throw ArgumentError("adam: shape mismatch for parameter " + std::to_string(i));
    }
  }
  ++steps;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = *params[i];
    auto& m = first_moment[i];
    auto& v = second_moment[i];
    m = beta1 * m + (1.0 - beta1) * p.grad;
    v = beta2 * v + (1.0 - beta2) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradCheckReport finite_diff_check(const std::function<double()>& loss, const std::function<void()>& analytic,
                                  const std::vector<GradTarget>& targets, double h, int max_entries) {
  if (!(h > 0.0)) throw ArgumentError("finite_diff_check: step must be positive");
  analytic();
  std::vector<Matrix> grads;
  grads.reserve(targets.size());
  for (const auto& t : targets) grads.push_back(*t.grad);

  const double base = loss();
  GradCheckReport report;
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    auto& value = *targets[ti].value;
    const auto& grad = grads[ti];
    const Eigen::Index n = value.size();
    if (n == 0) continue;
    const double floor = 1e-6 + 1e-6 * grad.cwiseAbs().maxCoeff();
    const Eigen::Index stride = std::max<Eigen::Index>(1, n / std::max(1, max_entries));
    for (Eigen::Index e = 0; e < n; e += stride) {
      double& x = value.data()[e];
      const double saved = x;
      const double a = grad.data()[e];
      auto rel_error = [&](double numeric) {
        return std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      };
      double step = h, up = 0.0, down = 0.0;
      auto probe = [&] {
        x = saved + step;
        up = loss();
        x = saved - step;
        down = loss();
        x = saved;
      };
      auto one_sided_disagree = [&] {
        const double fwd = (up - base) / step, bwd = (base - down) / step;
        return std::abs(fwd - bwd) > 1e-3 * std::max({std::abs(fwd), std::abs(bwd), floor});
      };
      probe();
      for (int refine = 0; refine < 2 && one_sided_disagree(); ++refine) {
        step /= 10.0;
        probe();
      }
      double rel = rel_error((up - down) / (2.0 * step));
      if (one_sided_disagree()) {
        ++report.kinks;
        rel = std::min({rel, rel_error((up - base) / step), rel_error((base - down) / step)});
      }
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        const Eigen::Index r = e % value.rows(), c = e / value.rows();
        report.worst = targets[ti].name + "[" + std::to_string(r) + "," + std::to_string(c) + "]";
      }
    }
  }
  return report;
}

GradCheckReport finite_diff_check(CbrStack& stack, Matrix input, double h, Mode mode) {
  std::vector<GradTarget> targets;
  std::vector<Parameter*> params;
  stack.visit("", [&](const std::string& name, Parameter& p) {
    params.push_back(&p);
    targets.push_back({name, &p.value, &p.grad});
  });
  Matrix input_grad = Matrix::Zero(input.rows(), input.cols());
  targets.push_back({"input", &input, &input_grad});

  auto loss = [&]() { return 0.5 * stack.forward(input, mode).squaredNorm(); };
  auto analytic = [&]() {
    for (auto* p : params) p->zero_grad();
    CbrStack::Cache cache;
    const Matrix out = stack.forward(input, mode, &cache);
    input_grad = stack.backward(cache, out);
  };
  return finite_diff_check(loss, analytic, targets, h);
}

}  // namespace adreg::nn
