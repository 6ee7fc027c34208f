#pragma once

#include <cstdint>
#include <functional>

#include "helix/tensor.hpp"

namespace helix::ad {

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / 2 eps for every
/// coordinate of x. `f` receives a perturbed copy; x itself is untouched.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double eps = 1e-6);

/// Central difference of `f` along one coordinate of `param`, perturbing the
/// tensor in place and restoring it bit-exactly afterwards.
double finite_difference_at(const std::function<double()>& f, Tensor& param, std::int64_t index,
                            double eps = 1e-6);

/// Fourth-order five-point stencil along one coordinate. Truncation error is
/// O(eps^4), so a step near 1e-4 keeps both truncation and round-off small
/// for gradients far below the loss scale.
double finite_difference_at_5pt(const std::function<double()>& f, Tensor& param, std::int64_t index,
                                double eps = 1e-4);

/// |a - b| / max(|a|, |b|, floor). The floor keeps coordinates whose true
/// gradient is near zero from being judged on round-off alone.
double relative_error(double a, double b, double floor = 1e-6);

}  // namespace helix::ad
