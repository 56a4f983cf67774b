#include "cfm/attention.hpp"

#include <limits>

namespace cfm {

std::optional<Matrix> build_mask_bias(const std::vector<int64_t>& positions, MaskSpec mask) {
  if (mask.mode == MaskMode::None) return std::nullopt;
  const int g = static_cast<int>(positions.size());
  Matrix bias(g, g);
  const Real ninf = -std::numeric_limits<Real>::infinity();
  for (int i = 0; i < g; ++i)
    for (int j = 0; j < g; ++j)
      if (positions[j] > positions[i]) bias(i, j) = ninf;
  return bias;
}

Var multi_head_attention(const TokenGroup& group, const TransformerLayerVars& w, const AttentionConfig& cfg,
                         MaskSpec mask, DropoutCtx* dropout, std::vector<Matrix>* probs_out) {
  cfg.validate();
  if (!group.states.defined() || group.states.rows() == 0) throw std::invalid_argument("multi_head_attention: empty group");
  if (group.states.cols() != cfg.d) throw std::invalid_argument("multi_head_attention: d mismatch");
  if (static_cast<int>(group.positions.size()) != group.states.rows())
    throw std::invalid_argument("multi_head_attention: positions/rows mismatch");
  if (mask.mode == MaskMode::CausalByPosition && group.positions.empty())
    throw std::invalid_argument("multi_head_attention: causal mask requires positions");

  const Var& x = group.states;
  Var q = add_row_bias(matmul(x, w.wq), w.bq);
  Var k = add_row_bias(matmul(x, w.wk), w.bk);
  Var v = add_row_bias(matmul(x, w.wv), w.bv);
  std::optional<Matrix> bias = build_mask_bias(group.positions, mask);
  Var ctx = attention_core(q, k, v, cfg.heads, bias ? &*bias : nullptr, probs_out);
  if (dropout && dropout->active()) ctx = mul_mask(ctx, dropout->sample_mask(ctx.rows(), ctx.cols()));
  return add_row_bias(matmul(ctx, w.wo), w.bo);
}

TokenGroup transformer_layer(const TokenGroup& group, const TransformerLayerVars& w, const AttentionConfig& cfg,
                             MaskSpec mask, DropoutCtx* dropout) {
  Var attn = multi_head_attention(group, w, cfg, mask, dropout);
  Var h = layer_norm(add(group.states, attn), w.ln1_gain, w.ln1_bias, Real(1e-5));
  Var act = gelu(add_row_bias(matmul(h, w.w1), w.b1));
  if (dropout && dropout->active()) act = mul_mask(act, dropout->sample_mask(act.rows(), act.cols()));
  Var ffn = add_row_bias(matmul(act, w.w2), w.b2);
  Var out = layer_norm(add(h, ffn), w.ln2_gain, w.ln2_bias, Real(1e-5));
  return TokenGroup{out, group.positions};
}

uint64_t attention_cost(uint64_t x, uint64_t q, uint64_t l, uint64_t m, CostPattern pattern, uint64_t d) {
  if (x == 0 || l == 0 || m == 0 || d == 0) throw std::invalid_argument("attention_cost: parameters must be positive");
  if (m > l) throw std::invalid_argument("attention_cost: stride m must not exceed window l");
  const uint64_t k = (x + m - 1) / m;
  switch (pattern) {
    case CostPattern::Full:
      return (q + x) * (q + x) * d;
    case CostPattern::Sliding:
      return k * (q + l) * (q + l) * d;
    case CostPattern::Cluster:
    case CostPattern::Lsh: {
      const uint64_t t = q * k + x;
      return ((t + m - 1) / m) * m * m * d;
    }
    case CostPattern::SparsePosition:
      return (q + m) * k * k * d;
  }
  throw std::logic_error("attention_cost: unknown pattern");
}

}  // namespace cfm
