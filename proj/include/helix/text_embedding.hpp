#pragma once

#include <string>

#include "helix/tensor.hpp"

namespace helix {

/// Token embeddings of one prompt: tokens is [n_tokens, d_text].
struct TextEmbedding {
  ad::Tensor tokens;
  std::string prompt;

  std::int64_t n_tokens() const { return tokens.dim(0); }
};

}  // namespace helix
