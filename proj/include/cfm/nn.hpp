#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cfm/matrix.hpp"

namespace cfm {

// Row-wise softmax with max-subtraction. Rejects non-finite input.
Matrix softmax_rows(const Matrix& m);

// Per-row standardization followed by the affine map gain * xhat + bias.
// gain/bias are 1 x cols. eps guards zero-variance rows.
Matrix layer_norm_rows(const Matrix& m, const Matrix& gain, const Matrix& bias, Real eps = Real(1e-5));

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {
    grad = Matrix::zeros(value.rows, value.cols);
  }

  void zero_grad() { grad.fill(Real(0)); }
};

struct AdamConfig {
  Real lr = Real(1e-3);
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.999);
  Real eps = Real(1e-8);
};

// Bias-corrected Adam. Moments are kept per parameter in registration order.
struct AdamState {
  AdamConfig cfg;
  int64_t step_count = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;

  void init(const std::vector<Parameter*>& params);

  // Applies one update using each parameter's .grad. lr_scale multiplies the
  // base learning rate (warm-up). A non-finite gradient aborts the whole
  // step (no parameter touched) and reports the offending parameter.
  void step(const std::vector<Parameter*>& params, Real lr_scale = Real(1));
};

inline void adam_step(AdamState& state, const std::vector<Parameter*>& params, Real lr_scale = Real(1)) {
  state.step(params, lr_scale);
}

struct GradCheckResult {
  double max_rel_err = 0;
  std::string worst_param;
  int worst_index = -1;  // flat index within the worst parameter
  double analytic = 0;
  double numeric = 0;
};

// Central-difference check of the analytic gradients already stored in each
// parameter's .grad. loss_fn must recompute the scalar loss from the current
// parameter values. Perturbs every coordinate of every parameter by +-h.
// Error metric per coordinate: |analytic - numeric| / max(1, |analytic|).
GradCheckResult finite_diff_grad_check(const std::function<double()>& loss_fn,
                                       const std::vector<Parameter*>& params, double h);

}  // namespace cfm
