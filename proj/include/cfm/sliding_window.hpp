#pragma once

#include <vector>

#include "cfm/attention.hpp"

namespace cfm {

// Chunking plan for a q-question / x-context sequence with window l and
// stride m. Chunk k covers context rows [m*k, min(m*k + l, x)).
struct ChunkLayout {
  int q = 0;
  int x = 0;
  int l = 0;
  int m = 0;
  int chunks = 0;

  int slice_begin(int k) const { return m * k; }
  int slice_end(int k) const { return std::min(m * k + l, x); }
  int slice_rows(int k) const { return slice_end(k) - slice_begin(k); }

  // rows chunk k contributes to the flattened representation:
  // its q question rows plus context rows [m*k, min(m*(k+1), x))
  int flat_context_end(int k) const { return std::min(m * (k + 1), x); }
  int flat_context_rows(int k) const { return flat_context_end(k) - slice_begin(k); }
  int total_flat_rows() const { return q * chunks + x; }
};

ChunkLayout plan_chunks(int q, int x, int l, int m);

// Deduplicated inter-layer state: one row per context token plus one
// independent question copy per chunk.
struct LayerState {
  std::vector<Var> question_copies;  // chunks entries, each q x d (absent when q == 0)
  Var context;                       // x x d
  ChunkLayout layout;
};

TokenGroup gather_chunk(const LayerState& state, int k);

// Averages overlapping chunk outputs back into a deduplicated state.
// Context rows are summed over covering chunks in ascending chunk order,
// then divided once by the contributor count. Question rows are taken
// verbatim from each chunk's output.
LayerState scatter_merge(const std::vector<TokenGroup>& outputs, const ChunkLayout& layout);

LayerState sliding_window_layer(const LayerState& state, const TransformerLayerVars& w, const AttentionConfig& cfg,
                                MaskSpec mask, DropoutCtx* dropout = nullptr);

// Flattened view used by the routed (cluster / lsh) layers: for each chunk
// in order, its question copy followed by its owned context rows.
struct FlatState {
  Var rows;                         // (q*chunks + x) x d
  std::vector<int64_t> positions;   // sentinels for question rows, absolute indices otherwise
};

FlatState flatten_state(const LayerState& state);
LayerState unflatten_state(const Var& rows, const ChunkLayout& layout);

}  // namespace cfm
