#include "cfm/baselines.hpp"

#include "cfm/rng.hpp"

namespace cfm {

ClusterRoute sparse_position_route(const ChunkLayout& layout) {
  ClusterRoute route;
  const int t = layout.total_flat_rows();
  route.assignment.resize(static_cast<size_t>(t));
  // flat offset of each chunk's contribution
  std::vector<int> offsets(static_cast<size_t>(layout.chunks));
  int off = 0;
  for (int k = 0; k < layout.chunks; ++k) {
    offsets[static_cast<size_t>(k)] = off;
    off += layout.q + layout.flat_context_rows(k);
  }
  for (int j = 0; j < layout.q + layout.m; ++j) {
    std::vector<int> group;
    for (int k = 0; k < layout.chunks; ++k) {
      if (j < layout.q + layout.flat_context_rows(k)) group.push_back(offsets[static_cast<size_t>(k)] + j);
    }
    if (group.empty()) continue;
    for (int idx : group) route.assignment[static_cast<size_t>(idx)] = j;
    route.groups.push_back(std::move(group));
  }
  route.permutation.reserve(static_cast<size_t>(t));
  for (const auto& g : route.groups) route.permutation.insert(route.permutation.end(), g.begin(), g.end());
  route.inverse.resize(static_cast<size_t>(t));
  for (int i = 0; i < t; ++i) route.inverse[static_cast<size_t>(route.permutation[static_cast<size_t>(i)])] = i;
  return route;
}

LayerState sparse_position_layer(const LayerState& state, const TransformerLayerVars& w, const AttentionConfig& cfg,
                                 MaskSpec mask, DropoutCtx* dropout) {
  FlatState flat = flatten_state(state);
  ClusterRoute route = sparse_position_route(state.layout);
  std::vector<TokenGroup> groups = sort_and_chunk(flat, route);
  std::vector<TokenGroup> outputs;
  outputs.reserve(groups.size());
  for (const TokenGroup& g : groups) outputs.push_back(transformer_layer(g, w, cfg, mask, dropout));
  Var restored = scatter_back(outputs, route);
  return unflatten_state(restored, state.layout);
}

std::vector<int> lsh_assign(const Matrix& rows, const Matrix& hyperplanes) {
  if (rows.cols != hyperplanes.cols) throw std::invalid_argument("lsh_assign: width mismatch");
  if (hyperplanes.rows < 1) throw std::invalid_argument("lsh_assign: need at least one hashing vector");
  std::vector<int> buckets(static_cast<size_t>(rows.rows));
  for (int r = 0; r < rows.rows; ++r) {
    const Real* row = rows.row_ptr(r);
    int best = 0;
    Real best_proj = 0;
    for (int b = 0; b < hyperplanes.rows; ++b) {
      const Real* h = hyperplanes.row_ptr(b);
      Real proj = 0;
      for (int c = 0; c < rows.cols; ++c) proj += row[c] * h[c];
      if (b == 0 || proj > best_proj) {
        best_proj = proj;
        best = b;
      }
    }
    buckets[static_cast<size_t>(r)] = best;
  }
  return buckets;
}

Matrix make_lsh_hyperplanes(int buckets, int d, uint64_t seed) {
  if (buckets < 1 || d < 1) throw std::invalid_argument("make_lsh_hyperplanes: bad shape");
  Rng rng(seed);
  return rng.gaussian_matrix(buckets, d, 1.0);
}

LayerState lsh_layer(const LayerState& state, const Matrix& hyperplanes, const TransformerLayerVars& w,
                     const AttentionConfig& cfg, MaskSpec mask, DropoutCtx* dropout,
                     const ClusterRoute* frozen_route, ClusterRoute* capture_route) {
  auto assign = [&hyperplanes](const Matrix& rows) { return lsh_assign(rows, hyperplanes); };
  return routed_attention_layer(state, assign, w, cfg, mask, dropout, frozen_route, capture_route);
}

}  // namespace cfm
