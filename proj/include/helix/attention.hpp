#pragma once

#include <cstdint>
#include <functional>
#include <optional>

#include "helix/tensor.hpp"
#include "helix/text_embedding.hpp"

// Attention blocks over per-domain feature streams laid out as [b, c, hw].
// Every block adds its result residually to the stream it updates.

namespace helix::attention {

struct DomainFeatures {
  ad::Tensor f_image;  // [b, c, hw]
  ad::Tensor f_annot;  // [b, c, hw]
  ad::Tensor f_ref;    // optional [b, c, hw]
};

/// Query/key projections are [c x d]; the value projection is [c x c_out].
struct AttentionProjections {
  ad::Tensor wq, wk, wv;
  int heads = 1;

  std::int64_t d() const { return wq.dim(1); }
  double scale() const;  // 1 / sqrt(d / heads)
};

struct ScoreMap {
  ad::Tensor values;  // [b, hw, n_tokens]
  bool normalized = true;
};

struct ConcatAttentionResult {
  ad::Tensor f_image, f_annot;       // [b, c, hw]
  ad::Tensor ii, ia, ai, aa;         // [b, hw, hw] blocks of the joint softmax
};

/// Baseline attention over the concatenation [image tokens | annotation tokens]
/// with one shared set of projections; the softmax runs over all 2 hw keys.
ConcatAttentionResult concat_attention(const DomainFeatures& df, const AttentionProjections& proj);

/// 1x1 convolution applied to the reference stream: weight [c, c], bias [c].
struct ZeroConv {
  ad::Tensor weight, bias;
};

/// Image stream: queries from F^I, keys and values from zeta(F^R) + F^I.
ad::Tensor image_cross_attention(const DomainFeatures& df, const AttentionProjections& proj,
                                 const ZeroConv& zeta);

/// Annotation stream: queries, keys and values all from F^A.
ad::Tensor annotation_self_attention(const DomainFeatures& df, const AttentionProjections& proj);

/// Projections for the score-map block.
struct SsmProjections {
  ad::Tensor wq_image;  // [c, d]
  ad::Tensor wq_annot;  // [c, d]
  ad::Tensor wk_text;   // [d_text, d]
  ad::Tensor wv_text;   // [d_text, c]
};

/// Fusion convolutions over the stacked-map axis, one per arity.
struct SsmFusion {
  ad::Tensor w2, b2;  // [2, 2, 1, 1], [2]
  ad::Tensor w3, b3;  // [2, 3, 1, 1], [2]
};

/// Image-to-text and annotation-to-text score maps; `text` is shared by the batch.
std::pair<ScoreMap, ScoreMap> semantic_score_maps(const DomainFeatures& df, const TextEmbedding& text,
                                                  const SsmProjections& proj);

/// Broadcast a binary mask [b, hw] over n_tokens columns, each active row
/// carrying 1 / n_tokens per token.
ScoreMap rasterize_control(const ad::Tensor& mask, std::int64_t n_tokens);

struct SsmResult {
  ad::Tensor f_image, f_annot;  // [b, c, hw]
  ScoreMap s_image, s_annot;    // fused maps
};

/// Fused maps eta(stack) + mean(stack), then each domain stream receives its
/// fused map times the text values.
SsmResult ssm_fuse(const DomainFeatures& df, const ScoreMap& s_image, const ScoreMap& s_annot,
                   const ScoreMap* s_control, const SsmFusion& eta, const TextEmbedding& text,
                   const SsmProjections& proj);

enum class Domain { image, annot, ref };

/// Magnitude of d(output domain)/d(input domain) of `block`: the larger of the
/// exact gradient norm of sum(output) and the root-mean-square of 16 central
/// finite-difference directional derivatives (h = 1e-6, Gaussian directions).
/// Exactly 0.0 when no computational path exists.
double cross_jacobian_norm(const std::function<DomainFeatures(const DomainFeatures&)>& block,
                           Domain input, Domain output, const DomainFeatures& probe,
                           std::uint64_t seed = 0x5eedULL);

/// [b, c, hw] -> [b, hw, c] token view and back.
ad::Tensor to_tokens(const ad::Tensor& features);
ad::Tensor from_tokens(const ad::Tensor& tokens);

}  // namespace helix::attention
