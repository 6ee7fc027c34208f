#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "helix/attention.hpp"
#include "helix/diffusion.hpp"
#include "helix/params.hpp"

namespace helix::backbone {

/// Which encoder/decoder blocks carry DDA and SSM. Decoder blocks are numbered
/// in execution order, so decoder block 0 runs at the lowest resolution.
struct BlockPlacement {
  std::set<int> dda_encoder, dda_decoder, ssm_encoder, ssm_decoder;

  /// "default", "none", "tab7-1" ... "tab7-4". "All blocks" means [0, depth)
  /// and "every other block" means the even indices.
  static BlockPlacement preset(const std::string& name, int depth = 4);
  static const std::vector<std::string>& preset_names();
  void validate(int depth) const;
  std::string describe() const;
};

struct BackboneConfig {
  int image_size = 32;
  int base_channels = 16;  // per domain
  int depth = 4;
  std::vector<int> channel_mult{1, 2, 2, 2};
  int heads = 1;
  int vocab_size = 1;
  int d_text = 16;
  int gn_groups = 4;  // over both domains; must split evenly at the domain boundary
  bool ungrouped_debug = false;  // negative control: CNN convs mix domains

  int channels(int level) const { return base_channels * channel_mult[static_cast<std::size_t>(level)]; }
  int time_dim() const { return 4 * base_channels; }
  void validate() const;

  /// 8x8, depth 2, 4 channels per domain.
  static BackboneConfig micro();
};

/// Lowercased, whitespace-split prompt vocabulary. Row 0 is the OOV row.
class PromptVocabulary {
 public:
  PromptVocabulary();
  /// Builds from every token in `prompts`, sorted and deduplicated.
  static PromptVocabulary from_prompts(const std::vector<std::string>& prompts);
  static PromptVocabulary from_tokens(std::vector<std::string> tokens);

  static std::vector<std::string> tokenize(const std::string& prompt);
  std::int64_t index_of(const std::string& token) const;
  std::vector<std::int64_t> encode(const std::string& prompt) const;
  std::int64_t size() const { return static_cast<std::int64_t>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  static constexpr const char* kOov = "<oov>";

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::int64_t> index_;
};

/// One table row per token. Throws ValidationError on an empty prompt.
TextEmbedding embed_prompt(const std::string& prompt, const PromptVocabulary& vocab, const ad::Tensor& table);

/// Standard sinusoidal embedding, [t.size(), dim].
ad::Tensor timestep_embedding(std::span<const int> t, int dim);

class HelixUNet : public diffusion::NoisePredictor {
 public:
  HelixUNet(BackboneConfig cfg, BlockPlacement placement, PromptVocabulary vocab, std::uint64_t seed);

  diffusion::NoiseSample predict(const diffusion::JointLatent& z_t, const diffusion::Conditioning& cond,
                                 const ad::Tensor& reference_t) const override;

  /// Reference features per encoder level, each [b, c_level, hw].
  std::vector<ad::Tensor> encode_condition(const ad::Tensor& reference_t) const;
  /// Noises the reference with the image-part noise at t, then encodes it.
  std::vector<ad::Tensor> encode_condition(const ad::Tensor& reference, const ad::Tensor& support,
                                           const ad::Tensor& eps_image, std::span<const int> t,
                                           const diffusion::NoiseSchedule& s) const;

  TextEmbedding embed(const std::string& prompt) const;

  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  const BackboneConfig& config() const { return cfg_; }
  const BlockPlacement& placement() const { return placement_; }
  const PromptVocabulary& vocabulary() const { return vocab_; }

  struct Conv {
    ad::Tensor w, b;
    int groups = 1;
    int pad = 0;
  };
  struct Norm {
    ad::Tensor gamma, beta;  // scale is 1 + gamma
  };
  struct Res {
    Norm n1, n2;
    Conv c1, c2, skip;  // skip.w undefined when channels match
    ad::Tensor temb_w, temb_b;
  };
  struct Dda {
    attention::AttentionProjections img, ann;
    attention::ZeroConv zeta;
  };
  struct Ssm {
    attention::SsmProjections proj;
    attention::SsmFusion eta;
  };
  struct Stage {
    Res res;
    bool has_dda = false, has_ssm = false;
    Dda dda;
    Ssm ssm;
    int channels = 0;
  };

 private:
  void build(std::uint64_t seed);
  ad::Tensor res_block(const ad::Tensor& x, const Res& p, const ad::Tensor& temb) const;
  ad::Tensor apply_stage_modules(const ad::Tensor& h, const Stage& st, int level, const ad::Tensor* ref,
                                 const diffusion::Conditioning& cond) const;

  BackboneConfig cfg_;
  BlockPlacement placement_;
  PromptVocabulary vocab_;
  ParameterStore store_;
  ad::Tensor text_table_;
  ad::Tensor time_w1_, time_b1_, time_w2_, time_b2_;
  Conv in_img_, in_ann_, out_img_, out_ann_;
  Norm out_norm_;
  std::vector<Conv> cond_convs_;
  std::vector<Stage> encoder_, decoder_;
  Res mid_;
};

/// Scalar parameter count of a freshly built model.
std::int64_t count_parameters(const BackboneConfig& cfg, const BlockPlacement& placement);

}  // namespace helix::backbone
