#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "helix/backbone.hpp"

// Property checks shared by `helix-diff check` and the acceptance runner.
// Each returns named results with a pass flag and the metric it was judged on.

namespace helix::checks {

struct CheckResult {
  std::string name;
  bool pass = false;
  double metric = 0.0;

  /// "PASS <name> <metric>" or "FAIL <name> <metric>".
  std::string line() const;
};

/// Largest cross-domain Jacobian of random DDA blocks (image branch w.r.t. the
/// annotation stream, annotation branch w.r.t. image and reference). Passes at exactly 0.
CheckResult dda_decoupling(int cases, std::uint64_t seed);

/// Same probes on concatenated attention (must exceed 1e-3) plus the largest
/// row-sum deviation of its four score blocks (must stay within 1e-9).
std::vector<CheckResult> concat_entanglement(int cases, std::uint64_t seed);

/// Freshly initialized DDA and SSM parameters reduce to self-attention and to
/// the plain map mean, within 1e-12.
std::vector<CheckResult> zero_init_reductions(int cases, std::uint64_t seed);

/// Residual of SSM feature updates after projection onto the span of the text values; below 1e-9.
CheckResult ssm_value_purity(int cases, std::uint64_t seed);

/// Micro-model loss gradients against central differences; max relative error below 1e-4.
CheckResult gradient_fidelity(int seeds, int coords_per_seed, std::uint64_t seed);

/// q_sample moments at t = 1, T/2, T-1 over `draws` samples, plus the single-step inversion.
std::vector<CheckResult> schedule_statistics(int draws, int T, double beta_start, double beta_end, std::uint64_t seed);

/// Raw-mask grids against a per-pixel brute force on random masks, including
/// non-divisible sizes, and the single-pixel case.
CheckResult raw_mask_oracle(int cases, std::uint64_t seed);

/// Annotation output of a DDA-only backbone under image and reference
/// perturbation: largest output change and input-gradient norm, passes at exactly 0.
CheckResult backbone_decoupling(const backbone::BackboneConfig& cfg, std::uint64_t seed);

/// Image and checkpoint encode/decode/encode identity and checksum detection; metric counts failures.
CheckResult io_round_trip(std::uint64_t seed);

struct SuiteOptions {
  std::uint64_t seed = 1;
  backbone::BackboneConfig backbone;  // architecture for the backbone decoupling check
  int T = 50;
  double beta_start = 1e-4, beta_end = 0.02;
};

/// Every check at reduced case counts.
std::vector<CheckResult> invariant_suite(const SuiteOptions& options);

}  // namespace helix::checks
