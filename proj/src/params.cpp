#include "helix/params.hpp"

#include <cmath>

#include "helix/errors.hpp"

namespace helix {

ad::Tensor ParameterStore::create(const std::string& name, ad::Shape shape, InitKind init, Rng& rng,
                                  std::int64_t fan_in, std::int64_t fan_out) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  ad::Tensor t = ad::Tensor::zeros(std::move(shape), true);
  auto values = t.mutable_data();
  if (init == InitKind::uniform_scaled) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (auto& v : values) v = rng.uniform(-a, a);
  } else if (init == InitKind::normal_scaled) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : values) v = s * rng.normal();
  }
  index_.emplace(name, params_.size());
  params_.push_back({name, t, init});
  return t;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? nullptr : &params_[it->second];
}

ad::Tensor ParameterStore::get(const std::string& name) const {
  const Parameter* p = find(name);
  if (!p) throw ConfigError("unknown parameter: " + name);
  return p->tensor;
}

std::int64_t ParameterStore::scalar_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

Adam::Adam(ParameterStore& store, AdamOptions options) : store_(store), options_(options) {
  for (const auto& p : store_.all()) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  auto& params = store_.all();
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto g = params[k].tensor.grad();
    auto w = params[k].tensor.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = options_.beta1 * m[i] + (1.0 - options_.beta1) * g[i];
      v[i] = options_.beta2 * v[i] + (1.0 - options_.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }
}

}  // namespace helix
