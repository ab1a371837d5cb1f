#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace adreg::nn {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;

enum class Mode { Train, Eval };

struct Parameter {
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(Eigen::Index rows, Eigen::Index cols) : value(Matrix::Zero(rows, cols)), grad(Matrix::Zero(rows, cols)) {}
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

using ParamVisitor = std::function<void(const std::string&, Parameter&)>;
using BufferVisitor = std::function<void(const std::string&, Matrix&)>;

/// Shared affine map applied to every row: out = x·Wᵀ + b.
class Linear {
 public:
  struct Cache {
    Matrix input;
  };

  Linear() = default;
  Linear(int in, int out);

  /// Uniform in ±sqrt(6 / (fan_in + fan_out)); bias zero.
  void init(std::mt19937_64& rng);

  Matrix forward(const Matrix& x, Cache* cache = nullptr) const;
  /// Accumulates parameter gradients and returns d(loss)/d(input).
  Matrix backward(const Cache& cache, const Matrix& grad_out);

  void visit(const std::string& prefix, const ParamVisitor& fn);
  int in() const { return static_cast<int>(weight.value.cols()); }
  int out() const { return static_cast<int>(weight.value.rows()); }

  Parameter weight;  // out x in
  Parameter bias;    // 1 x out
};

/// Per-channel batch normalization over rows. Momentum applies to the running estimates:
/// running = momentum * running + (1 - momentum) * batch.
class BatchNorm {
 public:
  struct Cache {
    Matrix xhat;
    RowVector inv_std;
    Mode mode = Mode::Train;
  };

  BatchNorm() = default;
  explicit BatchNorm(int channels, double momentum = 0.9, double eps = 1e-5);

  /// Training mode needs at least two rows and updates the running statistics.
  Matrix forward(const Matrix& x, Mode mode, Cache* cache = nullptr);
  Matrix backward(const Cache& cache, const Matrix& grad_out);

  void visit(const std::string& prefix, const ParamVisitor& fn);
  void visit_buffers(const std::string& prefix, const BufferVisitor& fn);
  int channels() const { return static_cast<int>(scale.value.cols()); }

  Parameter scale;  // 1 x C
  Parameter shift;  // 1 x C
  Matrix running_mean;
  Matrix running_var;
  double momentum = 0.9;
  double eps = 1e-5;
};

Matrix relu(const Matrix& x);
Matrix relu_backward(const Matrix& x, const Matrix& grad_out);
Matrix sigmoid(const Matrix& x);
Matrix sigmoid_backward(const Matrix& y, const Matrix& grad_out);

/// Row-wise softmax with per-row max subtraction.
Matrix softmax_rows(const Matrix& x);
Matrix softmax_rows_backward(const Matrix& y, const Matrix& grad_out);

/// Stack of (Linear, BatchNorm, ReLU) blocks, optionally followed by a plain linear head.
class CbrStack {
 public:
  struct Cache {
    std::vector<Linear::Cache> linear;
    std::vector<BatchNorm::Cache> norm;
    std::vector<Matrix> pre_activation;
    Linear::Cache head;
  };

  CbrStack() = default;
  /// `head_out` = 0 means no head; the last block's activations are the output.
  CbrStack(int in, std::vector<int> widths, int head_out = 0);

  void init(std::mt19937_64& rng);
  Matrix forward(const Matrix& x, Mode mode, Cache* cache = nullptr);
  Matrix backward(const Cache& cache, const Matrix& grad_out);

  void visit(const std::string& prefix, const ParamVisitor& fn);
  void visit_buffers(const std::string& prefix, const BufferVisitor& fn);

  int in() const { return in_; }
  int out() const;

 private:
  int in_ = 0;
  std::vector<Linear> linear_;
  std::vector<BatchNorm> norm_;
  std::optional<Linear> head_;
};

/// Linear layers with ReLU between them (none after the last).
class Mlp {
 public:
  struct Cache {
    std::vector<Linear::Cache> linear;
    std::vector<Matrix> pre_activation;
  };

  Mlp() = default;
  Mlp(int in, std::vector<int> widths);

  void init(std::mt19937_64& rng);
  Matrix forward(const Matrix& x, Cache* cache = nullptr) const;
  Matrix backward(const Cache& cache, const Matrix& grad_out);
  void visit(const std::string& prefix, const ParamVisitor& fn);

 private:
  std::vector<Linear> layers_;
};

/// Bias-corrected Adam over an ordered parameter list; moments are matched by position.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr(lr), beta1(beta1), beta2(beta2), eps(eps) {}

  /// Applies one update from each parameter's `grad`. Throws ArgumentError on shape mismatch
  /// with the stored moments.
  void step(const std::vector<Parameter*>& params);

  double lr, beta1, beta2, eps;
  std::int64_t steps = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
};

struct GradTarget {
  std::string name;
  Matrix* value;
  const Matrix* grad;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst;  // "name[r,c]"
  int kinks = 0;      // entries where the two one-sided slopes disagree
};

/// Compares analytic gradients against central differences of a scalar loss.
/// `analytic` must recompute the loss and fill every target's `grad`; `loss` evaluates the loss
/// only. Relative error per entry is |a - n| / max(|a|, |n|, floor) where floor scales with the
/// tensor's largest analytic gradient. At most `max_entries` entries per tensor are probed.
/// When the forward and backward slopes differ by more than 0.1% the step is cut tenfold, at most
/// twice, to get off a nearby kink (a ReLU crossing zero). An entry still split after that is
/// counted as a kink and may match either one-sided slope instead.
GradCheckReport finite_diff_check(const std::function<double()>& loss, const std::function<void()>& analytic,
                                  const std::vector<GradTarget>& targets, double h, int max_entries = 64);

/// Convenience: gradient check of 0.5·||stack(x)||² over every parameter of `stack` and the input.
GradCheckReport finite_diff_check(CbrStack& stack, Matrix input, double h, Mode mode = Mode::Train);

}  // namespace adreg::nn
