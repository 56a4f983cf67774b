#pragma once

#include "cfm/clustering.hpp"

namespace cfm {

// Cross-chunk attention over pre-selected positions: groups the j-th row
// of every chunk's flattened contribution (j in [0, q+m)) into one token
// group, encodes each group, and scatters rows back to their sources.
LayerState sparse_position_layer(const LayerState& state, const TransformerLayerVars& w, const AttentionConfig& cfg,
                                 MaskSpec mask, DropoutCtx* dropout = nullptr);

// The grouping permutation used by sparse_position_layer, exposed for
// inspection and tests.
ClusterRoute sparse_position_route(const ChunkLayout& layout);

// bucket id = argmax over the b random projections; ties to the lowest
// index. Hyperplanes are fixed at model construction.
std::vector<int> lsh_assign(const Matrix& rows, const Matrix& hyperplanes);

Matrix make_lsh_hyperplanes(int buckets, int d, uint64_t seed);

// Identical pipeline to cluster_former_layer with the centroid assignment
// swapped for random-projection hashing.
LayerState lsh_layer(const LayerState& state, const Matrix& hyperplanes, const TransformerLayerVars& w,
                     const AttentionConfig& cfg, MaskSpec mask, DropoutCtx* dropout = nullptr,
                     const ClusterRoute* frozen_route = nullptr, ClusterRoute* capture_route = nullptr);

}  // namespace cfm
