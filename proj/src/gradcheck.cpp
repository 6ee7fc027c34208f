#include "helix/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "helix/errors.hpp"

namespace helix::ad {

Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double eps) {
  Tensor probe = x.clone();
  auto values = probe.mutable_data();
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double plus = f(probe);
    values[i] = saved - eps;
    const double minus = f(probe);
    values[i] = saved;
    out[i] = (plus - minus) / (2.0 * eps);
  }
  return Tensor::from(x.shape(), std::move(out));
}

double finite_difference_at(const std::function<double()>& f, Tensor& param, std::int64_t index,
                            double eps) {
  if (index < 0 || index >= param.numel())
    throw UsageError("finite_difference_at: index " + std::to_string(index) + " out of range");
  auto values = param.mutable_data();
  const auto i = static_cast<std::size_t>(index);
  const double saved = values[i];
  values[i] = saved + eps;
  const double plus = f();
  values[i] = saved - eps;
  const double minus = f();
  values[i] = saved;
  return (plus - minus) / (2.0 * eps);
}

double finite_difference_at_5pt(const std::function<double()>& f, Tensor& param, std::int64_t index, double eps) {
  if (index < 0 || index >= param.numel())
    throw UsageError("finite_difference_at_5pt: index " + std::to_string(index) + " out of range");
  auto values = param.mutable_data();
  const auto i = static_cast<std::size_t>(index);
  const double saved = values[i];
  auto at = [&](double offset) {
    values[i] = saved + offset;
    return f();
  };
  const double p2 = at(2.0 * eps), p1 = at(eps), m1 = at(-eps), m2 = at(-2.0 * eps);
  values[i] = saved;
  return (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
}

double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace helix::ad
