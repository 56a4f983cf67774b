#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "cfm/graph.hpp"
#include "cfm/rng.hpp"

namespace cfm {

struct AttentionConfig {
  int d = 64;
  int heads = 4;
  int ffn_dim = 128;
  Real dropout = Real(0);
  bool causal = false;

  void validate() const {
    if (d <= 0 || heads <= 0 || d % heads != 0)
      throw std::invalid_argument("AttentionConfig: d must be positive and divisible by heads");
    if (ffn_dim <= 0) throw std::invalid_argument("AttentionConfig: ffn_dim must be positive");
    if (dropout < Real(0) || dropout >= Real(1)) throw std::invalid_argument("AttentionConfig: dropout must be in [0,1)");
  }
};

enum class MaskMode { None, CausalByPosition };

struct MaskSpec {
  MaskMode mode = MaskMode::None;
};

// A group of token states plus each row's position in the original
// sequence. Question tokens carry negative sentinel positions so a causal
// comparison leaves them attendable by every context token.
struct TokenGroup {
  Var states;
  std::vector<int64_t> positions;
};

inline int64_t question_sentinel(int chunk, int j, int q) {
  return -static_cast<int64_t>(chunk) * q - j - 1;
}

// One transformer layer's weights bound into the current graph.
struct TransformerLayerVars {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
  Var ln1_gain, ln1_bias;
  Var w1, b1, w2, b2;
  Var ln2_gain, ln2_bias;
};

// Dropout context for one forward pass; absent or p == 0 means no dropout.
struct DropoutCtx {
  Real p = Real(0);
  Rng* rng = nullptr;

  bool active() const { return p > Real(0) && rng; }
  Matrix sample_mask(int rows, int cols) {
    Matrix m(rows, cols);
    const Real keep_scale = Real(1) / (Real(1) - p);
    for (Real& v : m.data) v = (rng->uniform() < static_cast<double>(p)) ? Real(0) : keep_scale;
    return m;
  }
};

// Additive attention bias from positions: 0 where key visible, -inf where
// masked. Returns nullopt in mode None (no bias needed).
std::optional<Matrix> build_mask_bias(const std::vector<int64_t>& positions, MaskSpec mask);

// Attention block only: projections, masked softmax attention, output
// projection. probs_out optionally receives the per-head weights.
Var multi_head_attention(const TokenGroup& group, const TransformerLayerVars& w, const AttentionConfig& cfg,
                         MaskSpec mask, DropoutCtx* dropout = nullptr, std::vector<Matrix>* probs_out = nullptr);

// Post-norm transformer layer: LN(x + Attn(x)), then LN(h + FFN(h)).
// Positions pass through unchanged.
TokenGroup transformer_layer(const TokenGroup& group, const TransformerLayerVars& w, const AttentionConfig& cfg,
                             MaskSpec mask, DropoutCtx* dropout = nullptr);

enum class CostPattern { Full, Sliding, Cluster, Lsh, SparsePosition };

// Closed-form multiply-accumulate count for the score computation of one
// layer under a sparsity pattern. Chunk counts are treated as uniformly
// full-sized (ceil division), matching the accounting convention:
//   full            (q+x)^2 * d
//   sliding         K (q+l)^2 * d            K = ceil(x/m)
//   cluster, lsh    ceil(T/m) m^2 d          T = qK + x
//   sparse-position (q+m) K^2 d
uint64_t attention_cost(uint64_t x, uint64_t q, uint64_t l, uint64_t m, CostPattern pattern, uint64_t d = 1);

}  // namespace cfm
