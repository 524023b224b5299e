#pragma once

#include "cracknet/layers.hpp"

namespace cracknet {

// Context-Aware Global Module: low-rank linear self-attention over the
// flattened bottleneck feature map.
struct CagmConfig {
  int64_t channels = 0;  // C
  int64_t d_k = 0;       // query/key width
  int64_t rank = 0;      // projected key/value length, <= seq_len
  int64_t h_b = 0;       // bottleneck spatial dims fixing the sequence length
  int64_t w_b = 0;

  int64_t seq_len() const { return h_b * w_b; }
  void validate() const;
};

struct CagmParams {
  Dense w_q, w_k, w_v;     // C -> d_k
  Tensor e_proj, f_proj;   // [N, rank], learned low-rank projections
  Dense w_o;               // d_k -> C

  static CagmParams make(const CagmConfig& cfg, Rng& rng);
  int64_t param_count() const;
};

// [B,C,H,W] -> [B,N,C] with sequence index n = i*W + j (row-major spatial).
Tensor flatten_spatial(const Tensor& f3);
Tensor unflatten_spatial(const Tensor& x, int64_t h, int64_t w);

struct AttentionResult {
  Tensor context;  // Z: [B,N,d_k]
  Tensor weights;  // A: [B,N,rank], rows sum to 1
};

AttentionResult linear_attention(const Tensor& x, const CagmParams& params,
                                 const CagmConfig& cfg);

// Shape-preserving forward. When `attention` is non-null the softmax weights
// are copied out for inspection.
Tensor cagm_forward(const Tensor& f3, const CagmParams& params,
                    const CagmConfig& cfg, Tensor* attention = nullptr);

// Analytic per-image FLOP breakdown; multiply and add counted separately.
struct CagmFlops {
  int64_t qkv_projection = 0;
  int64_t low_rank_projection = 0;
  int64_t attention_scores = 0;
  int64_t softmax_cost = 0;
  int64_t attention_apply = 0;
  int64_t output_projection = 0;

  int64_t attention_term() const { return attention_scores + attention_apply; }
  int64_t total() const {
    return qkv_projection + low_rank_projection + attention_scores +
           softmax_cost + attention_apply + output_projection;
  }
};

CagmFlops complexity_estimate(const CagmConfig& cfg);

// Full N x N softmax attention cost with the same projections, for comparison.
CagmFlops naive_attention_flops(const CagmConfig& cfg);

}  // namespace cracknet
