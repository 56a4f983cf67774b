#include "cfm/nn.hpp"

#include <algorithm>
#include <cmath>

namespace cfm {

Matrix softmax_rows(const Matrix& m) {
  if (!m.all_finite()) throw std::invalid_argument("softmax_rows: non-finite input");
  Matrix out(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r) {
    const Real* row = m.row_ptr(r);
    Real mx = row[0];
    for (int c = 1; c < m.cols; ++c) mx = std::max(mx, row[c]);
    Real sum = 0;
    Real* o = out.row_ptr(r);
    for (int c = 0; c < m.cols; ++c) {
      o[c] = std::exp(row[c] - mx);
      sum += o[c];
    }
    const Real inv = Real(1) / sum;
    for (int c = 0; c < m.cols; ++c) o[c] *= inv;
  }
  return out;
}

Matrix layer_norm_rows(const Matrix& m, const Matrix& gain, const Matrix& bias, Real eps) {
  if (gain.rows != 1 || gain.cols != m.cols || bias.rows != 1 || bias.cols != m.cols)
    throw std::invalid_argument("layer_norm_rows: gain/bias must be 1 x cols");
  Matrix out(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r) {
    const Real* row = m.row_ptr(r);
    Real mean = 0;
    for (int c = 0; c < m.cols; ++c) mean += row[c];
    mean /= m.cols;
    Real var = 0;
    for (int c = 0; c < m.cols; ++c) {
      const Real d = row[c] - mean;
      var += d * d;
    }
    var /= m.cols;
    const Real istd = Real(1) / std::sqrt(var + eps);
    Real* o = out.row_ptr(r);
    for (int c = 0; c < m.cols; ++c) o[c] = (row[c] - mean) * istd * gain(0, c) + bias(0, c);
  }
  return out;
}

void AdamState::init(const std::vector<Parameter*>& params) {
  step_count = 0;
  m.clear();
  v.clear();
  m.reserve(params.size());
  v.reserve(params.size());
  for (const Parameter* p : params) {
    m.push_back(Matrix::zeros(p->value.rows, p->value.cols));
    v.push_back(Matrix::zeros(p->value.rows, p->value.cols));
  }
}

void AdamState::step(const std::vector<Parameter*>& params, Real lr_scale) {
  if (params.size() != m.size()) throw std::invalid_argument("AdamState::step: not initialized for these params");
  for (size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->value.same_shape(m[i])) throw std::invalid_argument("AdamState::step: shape drift in " + params[i]->name);
    if (!params[i]->grad.all_finite())
      throw std::runtime_error("AdamState::step: non-finite gradient in parameter '" + params[i]->name + "'");
  }
  ++step_count;
  const Real lr = cfg.lr * lr_scale;
  const Real bc1 = Real(1) - std::pow(cfg.beta1, static_cast<Real>(step_count));
  const Real bc2 = Real(1) - std::pow(cfg.beta2, static_cast<Real>(step_count));
  for (size_t i = 0; i < params.size(); ++i) {
    Matrix& val = params[i]->value;
    const Matrix& g = params[i]->grad;
    Matrix& mi = m[i];
    Matrix& vi = v[i];
    for (size_t j = 0; j < val.data.size(); ++j) {
      mi.data[j] = cfg.beta1 * mi.data[j] + (Real(1) - cfg.beta1) * g.data[j];
      vi.data[j] = cfg.beta2 * vi.data[j] + (Real(1) - cfg.beta2) * g.data[j] * g.data[j];
      const Real mhat = mi.data[j] / bc1;
      const Real vhat = vi.data[j] / bc2;
      val.data[j] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

GradCheckResult finite_diff_grad_check(const std::function<double()>& loss_fn,
                                       const std::vector<Parameter*>& params, double h) {
  if (h <= 0) throw std::invalid_argument("finite_diff_grad_check: h must be positive");
  GradCheckResult res;
  for (Parameter* p : params) {
    for (size_t j = 0; j < p->value.data.size(); ++j) {
      const Real saved = p->value.data[j];
      p->value.data[j] = saved + static_cast<Real>(h);
      const double up = loss_fn();
      p->value.data[j] = saved - static_cast<Real>(h);
      const double down = loss_fn();
      p->value.data[j] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = static_cast<double>(p->grad.data[j]);
      const double rel = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = p->name;
        res.worst_index = static_cast<int>(j);
        res.analytic = analytic;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace cfm
