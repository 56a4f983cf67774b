#include "cfm/sliding_window.hpp"

namespace cfm {

ChunkLayout plan_chunks(int q, int x, int l, int m) {
  if (x < 1) throw std::invalid_argument("plan_chunks: context must be non-empty");
  if (q < 0) throw std::invalid_argument("plan_chunks: negative question length");
  if (m < 1 || m > l) throw std::invalid_argument("plan_chunks: need 0 < m <= l");
  ChunkLayout layout;
  layout.q = q;
  layout.x = x;
  layout.l = l;
  layout.m = m;
  layout.chunks = (x + m - 1) / m;
  return layout;
}

TokenGroup gather_chunk(const LayerState& state, int k) {
  const ChunkLayout& lay = state.layout;
  if (k < 0 || k >= lay.chunks) throw std::out_of_range("gather_chunk: chunk index out of range");
  const int s0 = lay.slice_begin(k);
  const int s1 = lay.slice_end(k);
  Var slice = slice_rows(state.context, s0, s1);
  TokenGroup group;
  if (lay.q > 0) {
    group.states = concat_rows({state.question_copies[static_cast<size_t>(k)], slice});
  } else {
    group.states = slice;
  }
  group.positions.reserve(static_cast<size_t>(lay.q + s1 - s0));
  for (int j = 0; j < lay.q; ++j) group.positions.push_back(question_sentinel(k, j, lay.q));
  for (int i = s0; i < s1; ++i) group.positions.push_back(i);
  return group;
}

LayerState scatter_merge(const std::vector<TokenGroup>& outputs, const ChunkLayout& layout) {
  if (static_cast<int>(outputs.size()) != layout.chunks)
    throw std::invalid_argument("scatter_merge: expected " + std::to_string(layout.chunks) + " chunk outputs");
  std::vector<Var> context_parts;
  std::vector<int> spans;
  context_parts.reserve(outputs.size());
  spans.reserve(outputs.size());
  LayerState merged;
  merged.layout = layout;
  for (int k = 0; k < layout.chunks; ++k) {
    const TokenGroup& out = outputs[static_cast<size_t>(k)];
    const int expected = layout.q + layout.slice_rows(k);
    if (out.states.rows() != expected)
      throw std::invalid_argument("scatter_merge: chunk " + std::to_string(k) + " has " +
                                  std::to_string(out.states.rows()) + " rows, expected " + std::to_string(expected));
    if (layout.q > 0) merged.question_copies.push_back(slice_rows(out.states, 0, layout.q));
    context_parts.push_back(slice_rows(out.states, layout.q, out.states.rows()));
    spans.push_back(layout.slice_begin(k));
  }
  merged.context = overlap_mean(context_parts, spans, layout.x);
  return merged;
}

LayerState sliding_window_layer(const LayerState& state, const TransformerLayerVars& w, const AttentionConfig& cfg,
                                MaskSpec mask, DropoutCtx* dropout) {
  std::vector<TokenGroup> outputs;
  outputs.reserve(static_cast<size_t>(state.layout.chunks));
  for (int k = 0; k < state.layout.chunks; ++k)
    outputs.push_back(transformer_layer(gather_chunk(state, k), w, cfg, mask, dropout));
  return scatter_merge(outputs, state.layout);
}

FlatState flatten_state(const LayerState& state) {
  const ChunkLayout& lay = state.layout;
  std::vector<Var> parts;
  FlatState flat;
  flat.positions.reserve(static_cast<size_t>(lay.total_flat_rows()));
  for (int k = 0; k < lay.chunks; ++k) {
    if (lay.q > 0) {
      parts.push_back(state.question_copies[static_cast<size_t>(k)]);
      for (int j = 0; j < lay.q; ++j) flat.positions.push_back(question_sentinel(k, j, lay.q));
    }
    const int c0 = lay.slice_begin(k);
    const int c1 = lay.flat_context_end(k);
    parts.push_back(slice_rows(state.context, c0, c1));
    for (int i = c0; i < c1; ++i) flat.positions.push_back(i);
  }
  flat.rows = parts.size() == 1 ? parts[0] : concat_rows(parts);
  return flat;
}

LayerState unflatten_state(const Var& rows, const ChunkLayout& layout) {
  if (rows.rows() != layout.total_flat_rows())
    throw std::invalid_argument("unflatten_state: row count mismatch");
  LayerState state;
  state.layout = layout;
  std::vector<Var> context_parts;
  int r = 0;
  for (int k = 0; k < layout.chunks; ++k) {
    if (layout.q > 0) {
      state.question_copies.push_back(slice_rows(rows, r, r + layout.q));
      r += layout.q;
    }
    const int n = layout.flat_context_rows(k);
    context_parts.push_back(slice_rows(rows, r, r + n));
    r += n;
  }
  state.context = context_parts.size() == 1 ? context_parts[0] : concat_rows(context_parts);
  return state;
}

}  // namespace cfm
