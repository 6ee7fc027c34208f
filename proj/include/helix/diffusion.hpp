#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "helix/rng.hpp"
#include "helix/tensor.hpp"
#include "helix/text_embedding.hpp"

namespace helix::diffusion {

struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;      // 1 - beta
  std::vector<double> alpha_bar;  // running product of alpha
};

/// beta linearly spaced from beta_start to beta_end over T steps.
NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end);

/// Image part [b,3,h,w] and annotation part [b,1,h,w] of the joint latent,
/// with one timestep per batch item (shared by both parts).
struct JointLatent {
  ad::Tensor image;
  ad::Tensor annot;
  std::vector<int> t;

  std::int64_t batch() const { return image.dim(0); }
};

struct NoiseSample {
  ad::Tensor image;
  ad::Tensor annot;
};

/// Standard normal draws shaped like z: every image entry first, then every
/// annotation entry, row-major.
NoiseSample draw_noise(const JointLatent& like, Rng& rng);

/// Conditioning passed to the noise predictor alongside the latent.
struct Conditioning {
  std::vector<TextEmbedding> text;  // one per batch item
  ad::Tensor reference;             // [b,3,h,w], zero outside `support`
  ad::Tensor support;               // [b,1,h,w] in {0,1}
  ad::Tensor control;               // optional [b,1,h,w] in {0,1}
};

class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  /// `reference_t` is the reference noised to the latent's timesteps.
  virtual NoiseSample predict(const JointLatent& z_t, const Conditioning& cond,
                              const ad::Tensor& reference_t) const = 0;
};

/// sqrt(abar_t) z0 + sqrt(1 - abar_t) eps on both parts, per batch item.
JointLatent q_sample(const JointLatent& z0, std::span<const int> t, const NoiseSample& eps,
                     const NoiseSchedule& s);
JointLatent q_sample(const JointLatent& z0, int t, const NoiseSample& eps, const NoiseSchedule& s);

/// The reference corrupted with the image-part noise restricted to its support:
/// support * (sqrt(abar_t) r + sqrt(1 - abar_t) eps_image).
ad::Tensor noise_reference(const ad::Tensor& reference, const ad::Tensor& support,
                           const ad::Tensor& eps_image, std::span<const int> t,
                           const NoiseSchedule& s);

/// Mean squared noise-prediction error over every element of both parts.
ad::Tensor dh_loss(const NoisePredictor& model, const JointLatent& z0, std::span<const int> t,
                   const NoiseSample& eps, const Conditioning& cond, const NoiseSchedule& s);
ad::Tensor dh_loss(const NoisePredictor& model, const JointLatent& z0, int t,
                   const NoiseSample& eps, const Conditioning& cond, const NoiseSchedule& s);

/// One ancestral step from t to t-1. Adds sqrt(beta_tilde_t) noise drawn from
/// `rng` when t > 0; the t = 0 step draws nothing.
JointLatent reverse_step(const JointLatent& z_t, const NoiseSample& eps_pred, int t,
                         const NoiseSchedule& s, Rng& rng);

struct SampleResult {
  ad::Tensor image;  // clamped to [-1, 1]
  ad::Tensor annot;  // clamped to [-1, 1]
};

/// Full reverse chain from pure noise. The reference is noised at the first
/// step with the initial image noise and afterwards with the previous step's
/// predicted image noise.
SampleResult sample(const NoisePredictor& model, const Conditioning& cond, std::int64_t batch,
                    std::int64_t image_size, const NoiseSchedule& s, Rng& rng);

}  // namespace helix::diffusion
