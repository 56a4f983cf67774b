#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace cfm {

#ifdef CFM_REAL32
using Real = float;
#else
using Real = double;
#endif

// Dense row-major matrix. Rows of size 0 are legal (empty question blocks).
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<Real> data;

  Matrix() = default;
  Matrix(int r, int c, Real fill = Real(0))
      : rows(r), cols(c), data(static_cast<size_t>(r) * static_cast<size_t>(c), fill) {
    if (r < 0 || c < 0) throw std::invalid_argument("Matrix: negative shape");
  }

  static Matrix zeros(int r, int c) { return Matrix(r, c, Real(0)); }

  Real& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
  Real operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }

  Real* row_ptr(int r) { return data.data() + static_cast<size_t>(r) * cols; }
  const Real* row_ptr(int r) const { return data.data() + static_cast<size_t>(r) * cols; }

  size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (Real v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void fill(Real v) { std::fill(data.begin(), data.end(), v); }

  void add_inplace(const Matrix& o) {
    if (!same_shape(o)) throw std::invalid_argument("Matrix::add_inplace: shape mismatch");
    for (size_t i = 0; i < data.size(); ++i) data[i] += o.data[i];
  }

  void scale_inplace(Real s) {
    for (Real& v : data) v *= s;
  }
};

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

// C += A * B  (plain triple loop in ikj order; the k-loop body vectorizes)
void matmul_accum(const Matrix& a, const Matrix& b, Matrix& c);
Matrix matmul(const Matrix& a, const Matrix& b);
// C += A^T * B
void matmul_tn_accum(const Matrix& a, const Matrix& b, Matrix& c);
// C += A * B^T
void matmul_nt_accum(const Matrix& a, const Matrix& b, Matrix& c);

}  // namespace cfm
