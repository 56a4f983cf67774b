#include "cfm/graph.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

#include "cfm/nn.hpp"

namespace cfm {

namespace {

thread_local bool t_grad_enabled = true;

NodePtr make_node(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

bool any_requires(const std::vector<Var>& vars) {
  for (const auto& v : vars)
    if (v.node->requires_grad) return true;
  return false;
}

// Attaches parents + backward only when grads are on and some parent needs them.
Var finish(NodePtr n, std::vector<Var> parents, std::function<void(Node&)> bw) {
  if (grad_enabled() && any_requires(parents)) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node);
    n->backward = std::move(bw);
  }
  return Var{std::move(n)};
}

constexpr Real kNegInf = -std::numeric_limits<Real>::infinity();

}  // namespace

bool grad_enabled() { return t_grad_enabled; }
void set_grad_enabled(bool on) { t_grad_enabled = on; }

Var constant(Matrix m) { return Var{make_node(std::move(m))}; }

Var leaf(Matrix m) {
  auto n = make_node(std::move(m));
  n->requires_grad = grad_enabled();
  return Var{std::move(n)};
}

void backward(const Var& root) {
  if (!root.defined()) throw std::invalid_argument("backward: undefined root");
  if (root.rows() != 1 || root.cols() != 1) throw std::invalid_argument("backward: root must be 1x1");
  if (!root.node->requires_grad) return;

  // reverse post-order over parent edges = consumers before producers
  std::vector<Node*> order;
  std::vector<std::pair<Node*, size_t>> stack;
  std::unordered_set<Node*> visited;
  stack.emplace_back(root.node.get(), 0);
  visited.insert(root.node.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  std::reverse(order.begin(), order.end());

  root.node->ensure_grad()(0, 0) = Real(1);
  for (Node* n : order) {
    if (n->backward) {
      n->ensure_grad();
      n->backward(*n);
    }
  }
}

Var matmul(const Var& a, const Var& b) {
  Matrix out = matmul(a.val(), b.val());
  return finish(make_node(std::move(out)), {a, b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad) matmul_nt_accum(n.grad, pb.value, pa.ensure_grad());
    if (pb.requires_grad) matmul_tn_accum(pa.value, n.grad, pb.ensure_grad());
  });
}

Var add(const Var& a, const Var& b) {
  if (!a.val().same_shape(b.val())) throw std::invalid_argument("add: shape mismatch");
  Matrix out = a.val();
  out.add_inplace(b.val());
  return finish(make_node(std::move(out)), {a, b}, [](Node& n) {
    for (int s = 0; s < 2; ++s) {
      Node& p = *n.parents[s];
      if (p.requires_grad) p.ensure_grad().add_inplace(n.grad);
    }
  });
}

Var scale(const Var& a, Real s) {
  Matrix out = a.val();
  out.scale_inplace(s);
  return finish(make_node(std::move(out)), {a}, [s](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    Matrix& g = p.ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += s * n.grad.data[i];
  });
}

Var add_row_bias(const Var& a, const Var& bias) {
  if (bias.rows() != 1 || bias.cols() != a.cols()) throw std::invalid_argument("add_row_bias: bad bias shape");
  Matrix out = a.val();
  for (int r = 0; r < out.rows; ++r) {
    Real* row = out.row_ptr(r);
    const Real* b = bias.val().row_ptr(0);
    for (int c = 0; c < out.cols; ++c) row[c] += b[c];
  }
  return finish(make_node(std::move(out)), {a, bias}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad) pa.ensure_grad().add_inplace(n.grad);
    if (pb.requires_grad) {
      Real* gb = pb.ensure_grad().row_ptr(0);
      for (int r = 0; r < n.grad.rows; ++r) {
        const Real* g = n.grad.row_ptr(r);
        for (int c = 0; c < n.grad.cols; ++c) gb[c] += g[c];
      }
    }
  });
}

Var gelu(const Var& a) {
  constexpr Real kInvSqrt2 = Real(0.70710678118654752440);
  constexpr Real kInvSqrt2Pi = Real(0.39894228040143267794);
  Matrix out = a.val();
  for (Real& v : out.data) v = Real(0.5) * v * (Real(1) + std::erf(v * kInvSqrt2));
  return finish(make_node(std::move(out)), {a}, [](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    Matrix& g = p.ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) {
      const Real x = p.value.data[i];
      const Real cdf = Real(0.5) * (Real(1) + std::erf(x * kInvSqrt2));
      const Real pdf = kInvSqrt2Pi * std::exp(Real(-0.5) * x * x);
      g.data[i] += n.grad.data[i] * (cdf + x * pdf);
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, Real eps) {
  const Matrix& m = x.val();
  if (gain.rows() != 1 || gain.cols() != m.cols || bias.rows() != 1 || bias.cols() != m.cols)
    throw std::invalid_argument("layer_norm: gain/bias must be 1 x cols");
  const int c = m.cols;
  auto xhat = std::make_shared<Matrix>(m.rows, c);
  auto istd = std::make_shared<std::vector<Real>>(static_cast<size_t>(m.rows));
  Matrix out(m.rows, c);
  for (int r = 0; r < m.rows; ++r) {
    const Real* row = m.row_ptr(r);
    Real mean = 0;
    for (int j = 0; j < c; ++j) mean += row[j];
    mean /= c;
    Real var = 0;
    for (int j = 0; j < c; ++j) {
      const Real d = row[j] - mean;
      var += d * d;
    }
    var /= c;
    const Real is = Real(1) / std::sqrt(var + eps);
    (*istd)[r] = is;
    Real* xh = xhat->row_ptr(r);
    Real* o = out.row_ptr(r);
    const Real* g = gain.val().row_ptr(0);
    const Real* b = bias.val().row_ptr(0);
    for (int j = 0; j < c; ++j) {
      xh[j] = (row[j] - mean) * is;
      o[j] = xh[j] * g[j] + b[j];
    }
  }
  return finish(make_node(std::move(out)), {x, gain, bias}, [xhat, istd](Node& n) {
    Node& px = *n.parents[0];
    Node& pg = *n.parents[1];
    Node& pb = *n.parents[2];
    const int cc = n.value.cols;
    const Real* gn = pg.value.row_ptr(0);
    for (int r = 0; r < n.value.rows; ++r) {
      const Real* dy = n.grad.row_ptr(r);
      const Real* xh = xhat->row_ptr(r);
      if (pg.requires_grad) {
        Real* gg = pg.ensure_grad().row_ptr(0);
        for (int j = 0; j < cc; ++j) gg[j] += dy[j] * xh[j];
      }
      if (pb.requires_grad) {
        Real* gb = pb.ensure_grad().row_ptr(0);
        for (int j = 0; j < cc; ++j) gb[j] += dy[j];
      }
      if (px.requires_grad) {
        Real sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int j = 0; j < cc; ++j) {
          const Real dxh = dy[j] * gn[j];
          sum_dxhat += dxh;
          sum_dxhat_xhat += dxh * xh[j];
        }
        const Real mean_dxhat = sum_dxhat / cc;
        const Real mean_dxhat_xhat = sum_dxhat_xhat / cc;
        Real* gx = px.ensure_grad().row_ptr(r);
        const Real is = (*istd)[r];
        for (int j = 0; j < cc; ++j) {
          const Real dxh = dy[j] * gn[j];
          gx[j] += is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
      }
    }
  });
}

Var softmax_rows_node(const Var& a) {
  auto probs = std::make_shared<Matrix>(softmax_rows(a.val()));
  Matrix out = *probs;
  return finish(make_node(std::move(out)), {a}, [probs](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    Matrix& g = p.ensure_grad();
    for (int r = 0; r < n.value.rows; ++r) {
      const Real* dy = n.grad.row_ptr(r);
      const Real* pr = probs->row_ptr(r);
      Real dot = 0;
      for (int j = 0; j < n.value.cols; ++j) dot += dy[j] * pr[j];
      Real* gx = g.row_ptr(r);
      for (int j = 0; j < n.value.cols; ++j) gx[j] += pr[j] * (dy[j] - dot);
    }
  });
}

Var attention_core(const Var& q, const Var& k, const Var& v, int heads, const Matrix* mask_bias,
                   std::vector<Matrix>* probs_out) {
  const Matrix& qm = q.val();
  const Matrix& km = k.val();
  const Matrix& vm = v.val();
  const int g = qm.rows;
  const int d = qm.cols;
  if (km.rows != g || vm.rows != g || km.cols != d || vm.cols != d)
    throw std::invalid_argument("attention_core: q/k/v shape mismatch");
  if (heads <= 0 || d % heads != 0) throw std::invalid_argument("attention_core: d not divisible by heads");
  if (mask_bias && (mask_bias->rows != g || mask_bias->cols != g))
    throw std::invalid_argument("attention_core: mask shape mismatch");
  const int dh = d / heads;
  const Real inv_sqrt_dh = Real(1) / std::sqrt(static_cast<Real>(dh));

  auto probs = std::make_shared<std::vector<Matrix>>();
  probs->reserve(heads);
  Matrix out(g, d);
  Matrix scores(g, g);
  for (int h = 0; h < heads; ++h) {
    const int co = h * dh;
    for (int i = 0; i < g; ++i) {
      const Real* qi = qm.row_ptr(i) + co;
      Real* srow = scores.row_ptr(i);
      for (int j = 0; j < g; ++j) {
        const Real* kj = km.row_ptr(j) + co;
        Real acc = 0;
        for (int t = 0; t < dh; ++t) acc += qi[t] * kj[t];
        srow[j] = acc * inv_sqrt_dh;
        if (mask_bias) srow[j] += (*mask_bias)(i, j);
      }
    }
    Matrix p(g, g);
    for (int i = 0; i < g; ++i) {
      const Real* srow = scores.row_ptr(i);
      Real mx = kNegInf;
      for (int j = 0; j < g; ++j) mx = std::max(mx, srow[j]);
      if (mx == kNegInf) throw std::logic_error("attention_core: query with zero unmasked keys");
      Real* prow = p.row_ptr(i);
      Real sum = 0;
      for (int j = 0; j < g; ++j) {
        const Real e = std::exp(srow[j] - mx);
        prow[j] = e;
        sum += e;
      }
      const Real inv = Real(1) / sum;
      for (int j = 0; j < g; ++j) prow[j] *= inv;
    }
    for (int i = 0; i < g; ++i) {
      const Real* prow = p.row_ptr(i);
      Real* orow = out.row_ptr(i) + co;
      for (int t = 0; t < dh; ++t) orow[t] = 0;
      for (int j = 0; j < g; ++j) {
        const Real pij = prow[j];
        if (pij == Real(0)) continue;
        const Real* vj = vm.row_ptr(j) + co;
        for (int t = 0; t < dh; ++t) orow[t] += pij * vj[t];
      }
    }
    probs->push_back(std::move(p));
  }
  if (probs_out) *probs_out = *probs;

  return finish(make_node(std::move(out)), {q, k, v}, [probs, heads, dh, inv_sqrt_dh](Node& n) {
    Node& pq = *n.parents[0];
    Node& pk = *n.parents[1];
    Node& pv = *n.parents[2];
    const int g = n.value.rows;
    Matrix dp(g, g);
    Matrix ds(g, g);
    for (int h = 0; h < heads; ++h) {
      const int co = h * dh;
      const Matrix& p = (*probs)[h];
      // dP = dCtx * V^T (per-head slice)
      for (int i = 0; i < g; ++i) {
        const Real* dout = n.grad.row_ptr(i) + co;
        Real* dprow = dp.row_ptr(i);
        for (int j = 0; j < g; ++j) {
          const Real* vj = pv.value.row_ptr(j) + co;
          Real acc = 0;
          for (int t = 0; t < dh; ++t) acc += dout[t] * vj[t];
          dprow[j] = acc;
        }
      }
      if (pv.requires_grad) {
        Matrix& gv = pv.ensure_grad();
        for (int j = 0; j < g; ++j) {
          Real* gvj = gv.row_ptr(j) + co;
          for (int i = 0; i < g; ++i) {
            const Real pij = p(i, j);
            if (pij == Real(0)) continue;
            const Real* dout = n.grad.row_ptr(i) + co;
            for (int t = 0; t < dh; ++t) gvj[t] += pij * dout[t];
          }
        }
      }
      // dS = P o (dP - rowdot(dP, P)); masked entries have P == 0, so stay 0
      for (int i = 0; i < g; ++i) {
        const Real* prow = p.row_ptr(i);
        const Real* dprow = dp.row_ptr(i);
        Real dot = 0;
        for (int j = 0; j < g; ++j) dot += dprow[j] * prow[j];
        Real* dsrow = ds.row_ptr(i);
        for (int j = 0; j < g; ++j) dsrow[j] = prow[j] * (dprow[j] - dot) * inv_sqrt_dh;
      }
      if (pq.requires_grad) {
        Matrix& gq = pq.ensure_grad();
        for (int i = 0; i < g; ++i) {
          const Real* dsrow = ds.row_ptr(i);
          Real* gqi = gq.row_ptr(i) + co;
          for (int j = 0; j < g; ++j) {
            const Real dsij = dsrow[j];
            if (dsij == Real(0)) continue;
            const Real* kj = pk.value.row_ptr(j) + co;
            for (int t = 0; t < dh; ++t) gqi[t] += dsij * kj[t];
          }
        }
      }
      if (pk.requires_grad) {
        Matrix& gk = pk.ensure_grad();
        for (int i = 0; i < g; ++i) {
          const Real* dsrow = ds.row_ptr(i);
          const Real* qi = pq.value.row_ptr(i) + co;
          for (int j = 0; j < g; ++j) {
            const Real dsij = dsrow[j];
            if (dsij == Real(0)) continue;
            Real* gkj = gk.row_ptr(j) + co;
            for (int t = 0; t < dh; ++t) gkj[t] += dsij * qi[t];
          }
        }
      }
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  int cols = -1, total = 0;
  for (const auto& p : parts) {
    if (cols == -1)
      cols = p.cols();
    else if (p.rows() > 0 && p.cols() != cols)
      throw std::invalid_argument("concat_rows: column mismatch");
    total += p.rows();
  }
  Matrix out(total, cols);
  int r = 0;
  for (const auto& p : parts) {
    std::copy(p.val().data.begin(), p.val().data.end(), out.row_ptr(r));
    r += p.rows();
  }
  return finish(make_node(std::move(out)), parts, [](Node& n) {
    int r = 0;
    for (auto& pp : n.parents) {
      Node& p = *pp;
      const int pr = p.value.rows;
      if (p.requires_grad && pr > 0) {
        Matrix& g = p.ensure_grad();
        for (size_t i = 0; i < g.data.size(); ++i)
          g.data[i] += n.grad.data[static_cast<size_t>(r) * n.grad.cols + i];
      }
      r += pr;
    }
  });
}

Var slice_rows(const Var& a, int r0, int r1) {
  if (r0 < 0 || r1 < r0 || r1 > a.rows()) throw std::out_of_range("slice_rows: bad range");
  Matrix out(r1 - r0, a.cols());
  std::copy(a.val().row_ptr(r0), a.val().row_ptr(r0) + out.size(), out.data.begin());
  return finish(make_node(std::move(out)), {a}, [r0](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    Matrix& g = p.ensure_grad();
    Real* dst = g.row_ptr(r0);
    for (size_t i = 0; i < n.grad.data.size(); ++i) dst[i] += n.grad.data[i];
  });
}

Var gather_rows(const Var& a, std::vector<int> idx) {
  Matrix out(static_cast<int>(idx.size()), a.cols());
  for (size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= a.rows()) throw std::out_of_range("gather_rows: index out of range");
    std::copy(a.val().row_ptr(idx[r]), a.val().row_ptr(idx[r]) + a.cols(), out.row_ptr(static_cast<int>(r)));
  }
  auto indices = std::make_shared<std::vector<int>>(std::move(idx));
  return finish(make_node(std::move(out)), {a}, [indices](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    Matrix& g = p.ensure_grad();
    for (size_t r = 0; r < indices->size(); ++r) {
      Real* dst = g.row_ptr((*indices)[r]);
      const Real* src = n.grad.row_ptr(static_cast<int>(r));
      for (int c = 0; c < n.grad.cols; ++c) dst[c] += src[c];
    }
  });
}

Var overlap_mean(const std::vector<Var>& parts, const std::vector<int>& spans, int total_rows) {
  if (parts.size() != spans.size()) throw std::invalid_argument("overlap_mean: parts/spans mismatch");
  if (parts.empty()) throw std::invalid_argument("overlap_mean: no parts");
  const int cols = parts[0].cols();
  auto counts = std::make_shared<std::vector<int>>(static_cast<size_t>(total_rows), 0);
  Matrix out(total_rows, cols);
  for (size_t k = 0; k < parts.size(); ++k) {
    const Matrix& pm = parts[k].val();
    if (pm.cols != cols) throw std::invalid_argument("overlap_mean: column mismatch");
    if (spans[k] < 0 || spans[k] + pm.rows > total_rows) throw std::invalid_argument("overlap_mean: span out of range");
    for (int r = 0; r < pm.rows; ++r) {
      Real* dst = out.row_ptr(spans[k] + r);
      const Real* src = pm.row_ptr(r);
      for (int c = 0; c < cols; ++c) dst[c] += src[c];
      ++(*counts)[static_cast<size_t>(spans[k] + r)];
    }
  }
  for (int r = 0; r < total_rows; ++r) {
    const int cnt = (*counts)[static_cast<size_t>(r)];
    if (cnt == 0) throw std::invalid_argument("overlap_mean: uncovered row " + std::to_string(r));
    if (cnt > 1) {
      Real* row = out.row_ptr(r);
      const Real inv = Real(1) / static_cast<Real>(cnt);
      for (int c = 0; c < cols; ++c) row[c] *= inv;
    }
  }
  auto span_copy = std::make_shared<std::vector<int>>(spans);
  return finish(make_node(std::move(out)), parts, [counts, span_copy](Node& n) {
    for (size_t k = 0; k < n.parents.size(); ++k) {
      Node& p = *n.parents[k];
      if (!p.requires_grad) continue;
      Matrix& g = p.ensure_grad();
      const int s = (*span_copy)[k];
      for (int r = 0; r < p.value.rows; ++r) {
        const Real inv = Real(1) / static_cast<Real>((*counts)[static_cast<size_t>(s + r)]);
        Real* dst = g.row_ptr(r);
        const Real* src = n.grad.row_ptr(s + r);
        for (int c = 0; c < n.grad.cols; ++c) dst[c] += src[c] * inv;
      }
    }
  });
}

Var mul_mask(const Var& a, Matrix mask) {
  if (!a.val().same_shape(mask)) throw std::invalid_argument("mul_mask: shape mismatch");
  Matrix out = a.val();
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= mask.data[i];
  auto m = std::make_shared<Matrix>(std::move(mask));
  return finish(make_node(std::move(out)), {a}, [m](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    Matrix& g = p.ensure_grad();
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * m->data[i];
  });
}

Var cross_entropy_rows(const Var& logits, const std::vector<int>& positions, const std::vector<int>& targets) {
  if (positions.size() != targets.size() || positions.empty())
    throw std::invalid_argument("cross_entropy_rows: bad positions/targets");
  const Matrix& lm = logits.val();
  Real total = 0;
  for (size_t i = 0; i < positions.size(); ++i) {
    const int p = positions[i];
    const int t = targets[i];
    if (p < 0 || p >= lm.rows) throw std::out_of_range("cross_entropy_rows: position out of range");
    if (t < 0 || t >= lm.cols) throw std::out_of_range("cross_entropy_rows: target out of range");
    const Real* row = lm.row_ptr(p);
    Real mx = row[0];
    for (int j = 1; j < lm.cols; ++j) mx = std::max(mx, row[j]);
    Real sum = 0;
    for (int j = 0; j < lm.cols; ++j) sum += std::exp(row[j] - mx);
    total += std::log(sum) + mx - row[t];
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<Real>(positions.size());
  auto pos = std::make_shared<std::vector<int>>(positions);
  auto tgt = std::make_shared<std::vector<int>>(targets);
  return finish(make_node(std::move(out)), {logits}, [pos, tgt](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    Matrix& g = p.ensure_grad();
    const Real gscale = n.grad(0, 0) / static_cast<Real>(pos->size());
    for (size_t i = 0; i < pos->size(); ++i) {
      const int r = (*pos)[i];
      const Real* row = p.value.row_ptr(r);
      Real mx = row[0];
      for (int j = 1; j < p.value.cols; ++j) mx = std::max(mx, row[j]);
      Real sum = 0;
      for (int j = 0; j < p.value.cols; ++j) sum += std::exp(row[j] - mx);
      const Real inv = Real(1) / sum;
      Real* grow = g.row_ptr(r);
      for (int j = 0; j < p.value.cols; ++j) grow[j] += gscale * std::exp(row[j] - mx) * inv;
      grow[(*tgt)[i]] -= gscale;
    }
  });
}

}  // namespace cfm
