#include "cfm/matrix.hpp"

namespace cfm {

void matmul_accum(const Matrix& a, const Matrix& b, Matrix& c) {
  if (a.cols != b.rows || c.rows != a.rows || c.cols != b.cols)
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a) + " * " + shape_str(b));
  const int n = b.cols;
  for (int i = 0; i < a.rows; ++i) {
    const Real* arow = a.row_ptr(i);
    Real* crow = c.row_ptr(i);
    for (int k = 0; k < a.cols; ++k) {
      const Real aik = arow[k];
      if (aik == Real(0)) continue;
      const Real* brow = b.row_ptr(k);
      for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows, b.cols);
  matmul_accum(a, b, c);
  return c;
}

void matmul_tn_accum(const Matrix& a, const Matrix& b, Matrix& c) {
  // c (a.cols x b.cols) += a^T * b
  if (a.rows != b.rows || c.rows != a.cols || c.cols != b.cols)
    throw std::invalid_argument("matmul_tn: shape mismatch");
  const int n = b.cols;
  for (int k = 0; k < a.rows; ++k) {
    const Real* arow = a.row_ptr(k);
    const Real* brow = b.row_ptr(k);
    for (int i = 0; i < a.cols; ++i) {
      const Real aki = arow[i];
      if (aki == Real(0)) continue;
      Real* crow = c.row_ptr(i);
      for (int j = 0; j < n; ++j) crow[j] += aki * brow[j];
    }
  }
}

void matmul_nt_accum(const Matrix& a, const Matrix& b, Matrix& c) {
  // c (a.rows x b.rows) += a * b^T
  if (a.cols != b.cols || c.rows != a.rows || c.cols != b.rows)
    throw std::invalid_argument("matmul_nt: shape mismatch");
  for (int i = 0; i < a.rows; ++i) {
    const Real* arow = a.row_ptr(i);
    Real* crow = c.row_ptr(i);
    for (int j = 0; j < b.rows; ++j) {
      const Real* brow = b.row_ptr(j);
      Real acc = 0;
      for (int k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
      crow[j] += acc;
    }
  }
}

}  // namespace cfm
