#include "helix/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "helix/errors.hpp"
#include "helix/ops.hpp"

namespace helix::diffusion {

using ad::Tensor;

namespace {

void check_t(int t, const NoiseSchedule& s) {
  if (t < 0 || t >= s.T)
    throw UsageError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(s.T) + ")");
}

Tensor combine(const Tensor& a, std::span<const double> ca, const Tensor& b, std::span<const double> cb) {
  if (a.shape() != b.shape())
    throw DimensionError("latent/noise shape mismatch: " + ad::to_string(a.shape()) + " vs " +
                         ad::to_string(b.shape()));
  const std::int64_t n = a.dim(0);
  if (static_cast<std::int64_t>(ca.size()) != n)
    throw DimensionError("expected " + std::to_string(n) + " timesteps, got " + std::to_string(ca.size()));
  const auto per = static_cast<std::size_t>(a.numel() / n);
  std::vector<double> out(static_cast<std::size_t>(a.numel()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ca[i / per] * a.data()[i] + cb[i / per] * b.data()[i];
  return Tensor::from(a.shape(), std::move(out));
}

Tensor random_like(const Tensor& like, Rng& rng) {
  std::vector<double> v(static_cast<std::size_t>(like.numel()));
  for (auto& x : v) x = rng.normal();
  return Tensor::from(like.shape(), std::move(v));
}

Tensor clamp_unit(const Tensor& x) {
  std::vector<double> v(x.data().begin(), x.data().end());
  for (auto& e : v) e = std::clamp(e, -1.0, 1.0);
  return Tensor::from(x.shape(), std::move(v));
}

}  // namespace

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw ConfigError("schedule needs T >= 1, got " + std::to_string(T));
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
    throw ConfigError("schedule needs 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  double running = 1.0;
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    const double beta = beta_start + (beta_end - beta_start) * frac;
    s.beta.push_back(beta);
    s.alpha.push_back(1.0 - beta);
    running *= 1.0 - beta;
    s.alpha_bar.push_back(running);
  }
  return s;
}

NoiseSample draw_noise(const JointLatent& like, Rng& rng) {
  NoiseSample eps;
  eps.image = random_like(like.image, rng);
  eps.annot = random_like(like.annot, rng);
  return eps;
}

JointLatent q_sample(const JointLatent& z0, std::span<const int> t, const NoiseSample& eps,
                     const NoiseSchedule& s) {
  std::vector<double> keep, mix;
  for (int ti : t) {
    check_t(ti, s);
    keep.push_back(std::sqrt(s.alpha_bar[static_cast<std::size_t>(ti)]));
    mix.push_back(std::sqrt(1.0 - s.alpha_bar[static_cast<std::size_t>(ti)]));
  }
  if (z0.annot.dim(0) != z0.image.dim(0)) throw DimensionError("latent parts disagree on batch size");
  JointLatent out;
  out.image = combine(z0.image, keep, eps.image, mix);
  out.annot = combine(z0.annot, keep, eps.annot, mix);
  out.t.assign(t.begin(), t.end());
  return out;
}

JointLatent q_sample(const JointLatent& z0, int t, const NoiseSample& eps, const NoiseSchedule& s) {
  const std::vector<int> ts(static_cast<std::size_t>(z0.batch()), t);
  return q_sample(z0, ts, eps, s);
}

Tensor noise_reference(const Tensor& reference, const Tensor& support, const Tensor& eps_image,
                       std::span<const int> t, const NoiseSchedule& s) {
  std::vector<double> keep, mix;
  for (int ti : t) {
    check_t(ti, s);
    keep.push_back(std::sqrt(s.alpha_bar[static_cast<std::size_t>(ti)]));
    mix.push_back(std::sqrt(1.0 - s.alpha_bar[static_cast<std::size_t>(ti)]));
  }
  const Tensor noised = combine(reference, keep, eps_image, mix);
  const std::int64_t b = reference.dim(0), c = reference.dim(1);
  if (support.ndim() != 4 || support.dim(0) != b || support.dim(1) != 1 ||
      support.dim(2) != reference.dim(2) || support.dim(3) != reference.dim(3))
    throw DimensionError("reference support " + ad::to_string(support.shape()) +
                         " does not match reference " + ad::to_string(reference.shape()));
  const std::int64_t hw = reference.dim(2) * reference.dim(3);
  std::vector<double> out(noised.data().begin(), noised.data().end());
  for (std::int64_t n = 0; n < b; ++n)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t p = 0; p < hw; ++p) out[static_cast<std::size_t>((n * c + ch) * hw + p)] *= support.at(n * hw + p);
  return Tensor::from(reference.shape(), std::move(out));
}

Tensor dh_loss(const NoisePredictor& model, const JointLatent& z0, std::span<const int> t,
               const NoiseSample& eps, const Conditioning& cond, const NoiseSchedule& s) {
  if (static_cast<std::int64_t>(cond.text.size()) != z0.batch())
    throw UsageError("dh_loss needs one prompt embedding per batch item (" + std::to_string(z0.batch()) +
                     "), got " + std::to_string(cond.text.size()));
  for (const auto& e : cond.text)
    if (!e.tokens.defined()) throw UsageError("dh_loss: missing prompt embedding");
  const JointLatent z_t = q_sample(z0, t, eps, s);
  const Tensor ref_t = noise_reference(cond.reference, cond.support, eps.image, t, s);
  const NoiseSample pred = model.predict(z_t, cond, ref_t);
  const double ni = static_cast<double>(eps.image.numel()), na = static_cast<double>(eps.annot.numel());
  return ad::add(ad::scale(ad::mse(pred.image, eps.image), ni / (ni + na)),
                 ad::scale(ad::mse(pred.annot, eps.annot), na / (ni + na)));
}

Tensor dh_loss(const NoisePredictor& model, const JointLatent& z0, int t, const NoiseSample& eps,
               const Conditioning& cond, const NoiseSchedule& s) {
  const std::vector<int> ts(static_cast<std::size_t>(z0.batch()), t);
  return dh_loss(model, z0, ts, eps, cond, s);
}

JointLatent reverse_step(const JointLatent& z_t, const NoiseSample& eps_pred, int t,
                         const NoiseSchedule& s, Rng& rng) {
  check_t(t, s);
  const auto ti = static_cast<std::size_t>(t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha[ti]);
  const double eps_coef = s.beta[ti] / std::sqrt(1.0 - s.alpha_bar[ti]);
  const std::vector<double> a(static_cast<std::size_t>(z_t.batch()), inv_sqrt_alpha);
  const std::vector<double> b(a.size(), -eps_coef * inv_sqrt_alpha);
  JointLatent out;
  out.image = combine(z_t.image, a, eps_pred.image, b);
  out.annot = combine(z_t.annot, a, eps_pred.annot, b);
  if (t > 0) {
    const double var = s.beta[ti] * (1.0 - s.alpha_bar[ti - 1]) / (1.0 - s.alpha_bar[ti]);
    const std::vector<double> one(a.size(), 1.0), sd(a.size(), std::sqrt(var));
    const NoiseSample z = draw_noise(out, rng);
    out.image = combine(out.image, one, z.image, sd);
    out.annot = combine(out.annot, one, z.annot, sd);
  }
  out.t.assign(a.size(), t - 1);
  return out;
}

SampleResult sample(const NoisePredictor& model, const Conditioning& cond, std::int64_t batch,
                    std::int64_t image_size, const NoiseSchedule& s, Rng& rng) {
  ad::NoGradGuard no_grad;
  JointLatent z;
  z.image = Tensor::zeros({batch, 3, image_size, image_size});
  z.annot = Tensor::zeros({batch, 1, image_size, image_size});
  const NoiseSample init = draw_noise(z, rng);
  z.image = init.image;
  z.annot = init.annot;
  Tensor ref_noise = init.image;
  for (int t = s.T - 1; t >= 0; --t) {
    z.t.assign(static_cast<std::size_t>(batch), t);
    const Tensor ref_t = noise_reference(cond.reference, cond.support, ref_noise, z.t, s);
    const NoiseSample pred = model.predict(z, cond, ref_t);
    ref_noise = pred.image;
    z = reverse_step(z, pred, t, s, rng);
  }
  return {clamp_unit(z.image), clamp_unit(z.annot)};
}

}  // namespace helix::diffusion
