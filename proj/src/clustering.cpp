#include "cfm/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cfm/rng.hpp"

namespace cfm {

namespace {

double dist2(const Real* a, const Real* b, int d) {
  double acc = 0;
  for (int i = 0; i < d; ++i) {
    const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += diff * diff;
  }
  return acc;
}

double row_norm(const Real* a, int d) {
  double acc = 0;
  for (int i = 0; i < d; ++i) acc += static_cast<double>(a[i]) * static_cast<double>(a[i]);
  return std::sqrt(acc);
}

double cosine(const Real* a, const Real* b, int d, double na, double nb) {
  double dot = 0;
  for (int i = 0; i < d; ++i) dot += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return dot / (na * nb);
}

}  // namespace

void MemoryBank::push(const Matrix& rows) {
  if (capacity_ == 0) throw std::logic_error("MemoryBank: zero capacity");
  if (rows.rows == 0) return;
  if (rows.cols != dim_) throw std::invalid_argument("MemoryBank: row width mismatch");
  for (int r = 0; r < rows.rows; ++r) {
    std::vector<Real> row(rows.row_ptr(r), rows.row_ptr(r) + dim_);
    if (!full_) {
      rows_.push_back(std::move(row));
      if (rows_.size() == capacity_) full_ = true;
    } else {
      rows_[head_] = std::move(row);
      head_ = (head_ + 1) % capacity_;
    }
  }
}

Matrix MemoryBank::snapshot() const {
  Matrix out(static_cast<int>(rows_.size()), dim_);
  int r = 0;
  if (full_) {
    for (size_t i = head_; i < rows_.size(); ++i, ++r)
      std::copy(rows_[i].begin(), rows_[i].end(), out.row_ptr(r));
    for (size_t i = 0; i < head_; ++i, ++r) std::copy(rows_[i].begin(), rows_[i].end(), out.row_ptr(r));
  } else {
    for (const auto& row : rows_) std::copy(row.begin(), row.end(), out.row_ptr(r++));
  }
  return out;
}

void MemoryBank::assign_rows(const Matrix& rows) {
  if (rows.cols != dim_ && rows.rows > 0) throw std::invalid_argument("MemoryBank: row width mismatch");
  if (static_cast<size_t>(rows.rows) > capacity_) throw std::invalid_argument("MemoryBank: more rows than capacity");
  rows_.clear();
  head_ = 0;
  full_ = false;
  for (int r = 0; r < rows.rows; ++r) rows_.emplace_back(rows.row_ptr(r), rows.row_ptr(r) + dim_);
  if (rows_.size() == capacity_) full_ = true;
}

void memory_push(MemoryBank& bank, const Matrix& rows) { bank.push(rows); }

KMeansResult kmeans(const Matrix& points, int p, int iters, uint64_t seed) {
  const int n = points.rows;
  const int d = points.cols;
  if (p < 1) throw std::invalid_argument("kmeans: need p >= 1");
  if (n < p) throw std::invalid_argument("kmeans: fewer points than clusters");

  Rng rng(seed);
  Matrix centroids(p, d);
  std::vector<double> min_d2(static_cast<size_t>(n));

  // greedy k-means++: several candidates per step, keep the one that
  // lowers the total potential the most
  const int first = rng.uniform_int(n);
  std::copy(points.row_ptr(first), points.row_ptr(first) + d, centroids.row_ptr(0));
  for (int i = 0; i < n; ++i) min_d2[static_cast<size_t>(i)] = dist2(points.row_ptr(i), centroids.row_ptr(0), d);
  const int n_candidates = 2 + static_cast<int>(std::log2(static_cast<double>(p) + 1.0));
  for (int c = 1; c < p; ++c) {
    double total = std::accumulate(min_d2.begin(), min_d2.end(), 0.0);
    int best = -1;
    if (total <= 0) {
      // all remaining points coincide with chosen centroids
      best = 0;
    } else {
      double best_potential = 0;
      for (int t = 0; t < n_candidates; ++t) {
        double r = rng.uniform() * total;
        int cand = n - 1;
        for (int i = 0; i < n; ++i) {
          r -= min_d2[static_cast<size_t>(i)];
          if (r <= 0) {
            cand = i;
            break;
          }
        }
        double potential = 0;
        for (int i = 0; i < n; ++i)
          potential += std::min(min_d2[static_cast<size_t>(i)], dist2(points.row_ptr(i), points.row_ptr(cand), d));
        if (best < 0 || potential < best_potential) {
          best = cand;
          best_potential = potential;
        }
      }
    }
    std::copy(points.row_ptr(best), points.row_ptr(best) + d, centroids.row_ptr(c));
    for (int i = 0; i < n; ++i)
      min_d2[static_cast<size_t>(i)] = std::min(min_d2[static_cast<size_t>(i)], dist2(points.row_ptr(i), points.row_ptr(best), d));
  }

  KMeansResult res;
  res.assignment.assign(static_cast<size_t>(n), 0);
  std::vector<int> counts(static_cast<size_t>(p));
  for (int it = 0; it < iters; ++it) {
    // assign
    bool changed = false;
    for (int i = 0; i < n; ++i) {
      int best = 0;
      double best_d = dist2(points.row_ptr(i), centroids.row_ptr(0), d);
      for (int c = 1; c < p; ++c) {
        const double dd = dist2(points.row_ptr(i), centroids.row_ptr(c), d);
        if (dd < best_d) {
          best_d = dd;
          best = c;
        }
      }
      if (res.assignment[static_cast<size_t>(i)] != best) {
        res.assignment[static_cast<size_t>(i)] = best;
        changed = true;
      }
    }
    // update
    centroids.fill(Real(0));
    std::fill(counts.begin(), counts.end(), 0);
    for (int i = 0; i < n; ++i) {
      const int c = res.assignment[static_cast<size_t>(i)];
      ++counts[static_cast<size_t>(c)];
      Real* crow = centroids.row_ptr(c);
      const Real* prow = points.row_ptr(i);
      for (int j = 0; j < d; ++j) crow[j] += prow[j];
    }
    for (int c = 0; c < p; ++c)
      if (counts[static_cast<size_t>(c)] > 0) {
        Real* crow = centroids.row_ptr(c);
        const Real inv = Real(1) / static_cast<Real>(counts[static_cast<size_t>(c)]);
        for (int j = 0; j < d; ++j) crow[j] *= inv;
      }
    // re-seed empties to the point farthest from its own centroid
    std::vector<bool> claimed(static_cast<size_t>(n), false);
    for (int c = 0; c < p; ++c) {
      if (counts[static_cast<size_t>(c)] > 0) continue;
      int far = -1;
      double far_d = -1;
      for (int i = 0; i < n; ++i) {
        if (claimed[static_cast<size_t>(i)]) continue;
        const double dd = dist2(points.row_ptr(i), centroids.row_ptr(res.assignment[static_cast<size_t>(i)]), d);
        if (dd > far_d) {
          far_d = dd;
          far = i;
        }
      }
      if (far >= 0) {
        claimed[static_cast<size_t>(far)] = true;
        std::copy(points.row_ptr(far), points.row_ptr(far) + d, centroids.row_ptr(c));
      }
    }
    double sse = 0;
    for (int i = 0; i < n; ++i) sse += dist2(points.row_ptr(i), centroids.row_ptr(res.assignment[static_cast<size_t>(i)]), d);
    res.sse_trace.push_back(sse);
    if (!changed && it > 0) break;
  }
  res.centroids = std::move(centroids);
  return res;
}

Centroids order_centroids_greedy(const Matrix& raw) {
  const int p = raw.rows;
  if (p < 1) throw std::invalid_argument("order_centroids_greedy: need at least one centroid");
  std::vector<double> norms(static_cast<size_t>(p));
  for (int i = 0; i < p; ++i) {
    norms[static_cast<size_t>(i)] = row_norm(raw.row_ptr(i), raw.cols);
    if (norms[static_cast<size_t>(i)] == 0)
      throw std::invalid_argument("order_centroids_greedy: zero-norm centroid " + std::to_string(i));
  }
  Centroids out;
  out.vectors = Matrix(p, raw.cols);
  std::vector<bool> used(static_cast<size_t>(p), false);
  int prev = 0;
  used[0] = true;
  std::copy(raw.row_ptr(0), raw.row_ptr(0) + raw.cols, out.vectors.row_ptr(0));
  for (int i = 1; i < p; ++i) {
    int best = -1;
    double best_sim = 0;
    for (int c = 0; c < p; ++c) {
      if (used[static_cast<size_t>(c)]) continue;
      const double sim = cosine(raw.row_ptr(prev), raw.row_ptr(c), raw.cols, norms[static_cast<size_t>(prev)],
                                norms[static_cast<size_t>(c)]);
      if (best < 0 || sim > best_sim) {
        best = c;
        best_sim = sim;
      }
    }
    used[static_cast<size_t>(best)] = true;
    std::copy(raw.row_ptr(best), raw.row_ptr(best) + raw.cols, out.vectors.row_ptr(i));
    prev = best;
  }
  return out;
}

std::vector<int> assign_clusters(const Matrix& rows, const Centroids& centroids) {
  const Matrix& c = centroids.vectors;
  if (rows.cols != c.cols) throw std::invalid_argument("assign_clusters: width mismatch");
  std::vector<double> cnorms(static_cast<size_t>(c.rows));
  for (int i = 0; i < c.rows; ++i) {
    cnorms[static_cast<size_t>(i)] = row_norm(c.row_ptr(i), c.cols);
    if (cnorms[static_cast<size_t>(i)] == 0) throw std::invalid_argument("assign_clusters: zero-norm centroid");
  }
  std::vector<int> v(static_cast<size_t>(rows.rows));
  for (int r = 0; r < rows.rows; ++r) {
    const double rn = row_norm(rows.row_ptr(r), rows.cols);
    if (rn == 0) {
      v[static_cast<size_t>(r)] = 0;  // cosine undefined; fixed fallback
      continue;
    }
    int best = 0;
    double best_sim = cosine(rows.row_ptr(r), c.row_ptr(0), c.cols, rn, cnorms[0]);
    for (int i = 1; i < c.rows; ++i) {
      const double sim = cosine(rows.row_ptr(r), c.row_ptr(i), c.cols, rn, cnorms[static_cast<size_t>(i)]);
      if (sim > best_sim) {
        best_sim = sim;
        best = i;
      }
    }
    v[static_cast<size_t>(r)] = best;
  }
  return v;
}

ClusterRoute make_route(const std::vector<int>& v, int m) {
  if (m < 1) throw std::invalid_argument("make_route: need m >= 1");
  const int t = static_cast<int>(v.size());
  ClusterRoute route;
  route.assignment = v;
  route.permutation.resize(static_cast<size_t>(t));
  std::iota(route.permutation.begin(), route.permutation.end(), 0);
  std::stable_sort(route.permutation.begin(), route.permutation.end(),
                   [&v](int a, int b) { return v[static_cast<size_t>(a)] < v[static_cast<size_t>(b)]; });
  route.inverse.resize(static_cast<size_t>(t));
  for (int i = 0; i < t; ++i) route.inverse[static_cast<size_t>(route.permutation[static_cast<size_t>(i)])] = i;
  for (int start = 0; start < t; start += m) {
    const int end = std::min(start + m, t);
    route.groups.emplace_back(route.permutation.begin() + start, route.permutation.begin() + end);
  }
  return route;
}

std::vector<TokenGroup> sort_and_chunk(const FlatState& flat, const ClusterRoute& route) {
  std::vector<TokenGroup> chunks;
  chunks.reserve(route.groups.size());
  for (const auto& group : route.groups) {
    TokenGroup g;
    g.states = gather_rows(flat.rows, group);
    g.positions.reserve(group.size());
    for (int idx : group) g.positions.push_back(flat.positions[static_cast<size_t>(idx)]);
    chunks.push_back(std::move(g));
  }
  return chunks;
}

Var scatter_back(const std::vector<TokenGroup>& chunk_outputs, const ClusterRoute& route) {
  if (chunk_outputs.size() != route.groups.size()) throw std::invalid_argument("scatter_back: chunk count mismatch");
  std::vector<Var> parts;
  parts.reserve(chunk_outputs.size());
  int total = 0;
  for (size_t k = 0; k < chunk_outputs.size(); ++k) {
    if (chunk_outputs[k].states.rows() != static_cast<int>(route.groups[k].size()))
      throw std::invalid_argument("scatter_back: chunk " + std::to_string(k) + " size mismatch");
    parts.push_back(chunk_outputs[k].states);
    total += chunk_outputs[k].states.rows();
  }
  if (total != static_cast<int>(route.inverse.size())) throw std::invalid_argument("scatter_back: total row mismatch");
  Var sorted = parts.size() == 1 ? parts[0] : concat_rows(parts);
  return gather_rows(sorted, route.inverse);
}

Centroids initial_random_centroids(int p, int d, uint64_t seed) {
  if (p < 1 || d < 1) throw std::invalid_argument("initial_random_centroids: bad shape");
  Rng rng(seed);
  Matrix raw(p, d);
  for (int r = 0; r < p; ++r) {
    double norm = 0;
    Real* row = raw.row_ptr(r);
    for (int c = 0; c < d; ++c) {
      row[c] = static_cast<Real>(rng.normal());
      norm += static_cast<double>(row[c]) * static_cast<double>(row[c]);
    }
    norm = std::sqrt(norm);
    if (norm == 0) {
      row[0] = Real(1);
    } else {
      for (int c = 0; c < d; ++c) row[c] = static_cast<Real>(row[c] / norm);
    }
  }
  Centroids out = order_centroids_greedy(raw);
  out.epoch_tag = 0;
  return out;
}

CentroidUpdateResult maybe_update_centroids(const MemoryBank& bank, const UpdateSchedule& schedule,
                                            uint64_t iteration, Centroids& centroids) {
  if (schedule.frequency < 1) throw std::invalid_argument("maybe_update_centroids: frequency must be >= 1");
  CentroidUpdateResult res;
  if (schedule.frequency == kNeverUpdate || iteration % schedule.frequency != 0) return res;
  res.fired = true;
  const int p = centroids.vectors.rows;
  if (bank.size() < static_cast<size_t>(p)) {
    res.warning = "centroid update skipped: bank holds " + std::to_string(bank.size()) + " rows, need " + std::to_string(p);
    return res;
  }
  try {
    KMeansResult km = kmeans(bank.snapshot(), p, schedule.kmeans_iterations, schedule.seed);
    Centroids ordered = order_centroids_greedy(km.centroids);
    centroids.vectors = std::move(ordered.vectors);
    centroids.epoch_tag += 1;
    res.updated = true;
  } catch (const std::invalid_argument& e) {
    res.warning = std::string("centroid update skipped: ") + e.what();
  }
  return res;
}

LayerState routed_attention_layer(const LayerState& state, const std::function<std::vector<int>(const Matrix&)>& assign_fn,
                                  const TransformerLayerVars& w, const AttentionConfig& cfg, MaskSpec mask,
                                  DropoutCtx* dropout, const ClusterRoute* frozen_route, ClusterRoute* capture_route) {
  FlatState flat = flatten_state(state);
  ClusterRoute local;
  const ClusterRoute* route = frozen_route;
  if (!route) {
    local = make_route(assign_fn(flat.rows.val()), state.layout.m);
    route = &local;
  }
  if (static_cast<int>(route->permutation.size()) != flat.rows.rows())
    throw std::invalid_argument("routed_attention_layer: route length mismatch");
  if (capture_route) *capture_route = *route;
  std::vector<TokenGroup> chunks = sort_and_chunk(flat, *route);
  std::vector<TokenGroup> outputs;
  outputs.reserve(chunks.size());
  for (const TokenGroup& chunk : chunks) outputs.push_back(transformer_layer(chunk, w, cfg, mask, dropout));
  Var restored = scatter_back(outputs, *route);
  return unflatten_state(restored, state.layout);
}

LayerState cluster_former_layer(const LayerState& state, const Centroids& centroids, const TransformerLayerVars& w,
                                const AttentionConfig& cfg, MaskSpec mask, DropoutCtx* dropout,
                                const ClusterRoute* frozen_route, ClusterRoute* capture_route) {
  auto assign = [&centroids](const Matrix& rows) { return assign_clusters(rows, centroids); };
  return routed_attention_layer(state, assign, w, cfg, mask, dropout, frozen_route, capture_route);
}

}  // namespace cfm
