#pragma once

// Scaled dot-product attention and its two uses in the entailment model:
// self-attention within one branch and text-to-image attention across
// branches.

#include <cmath>
#include <vector>
#include <string>

#include "vekit/numcore.hpp"

namespace vekit {

struct AttentionResult {
  Var mask;      // N x M, each row a distribution over the query rows
  Var attended;  // N x d_k, mask * query
};

/// mask = softmax_rows(reference * query^T / sqrt(d_k)), attended = mask * query.
///
/// query is M x d_k, reference is N x d_k. Rows of the mask are normalized
/// across the M query rows, so every attended row is a convex combination of
/// query rows. `valid_query` optionally excludes query rows (padding) from
/// every distribution.
inline AttentionResult sdp_attention(Var query, Var reference, const std::vector<bool>& valid_query = {}) {
  if (query.value().rank() != 2 || reference.value().rank() != 2 || query.cols() != reference.cols()) {
    throw DimensionError("sdp_attention: feature dimension mismatch between query " + shape_str(query.shape()) +
                         " and reference " + shape_str(reference.shape()));
  }
  const auto dk = static_cast<real>(query.cols());
  Var scores = scale(matmul(reference, transpose(query)), real(1) / std::sqrt(dk));
  Var mask = softmax_rows(scores, valid_query);
  return {mask, matmul(mask, query)};
}

/// Self-attention: query and reference are the same T x d_k matrix. The
/// output replaces the input (no residual) and keeps its shape.
inline Var self_attend(Var x, const std::vector<bool>& valid_rows = {}) {
  return sdp_attention(x, x, valid_rows).attended;
}

/// Attends over M image rows with the single text row as reference. The
/// attended field is the 1 x d_k fused image vector; mask is 1 x M.
inline AttentionResult text_image_attend(Var image_feats, Var text_feat) {
  if (text_feat.value().rank() != 2 || text_feat.rows() != 1) {
    throw DimensionError("text_image_attend: text feature must be a single row, got " + shape_str(text_feat.shape()));
  }
  return sdp_attention(image_feats, text_feat);
}

}  // namespace vekit
