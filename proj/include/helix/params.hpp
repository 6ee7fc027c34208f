#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "helix/rng.hpp"
#include "helix/tensor.hpp"

namespace helix {

enum class InitKind {
  zero,
  uniform_scaled,  // U(-a, a), a = sqrt(6 / (fan_in + fan_out))
  normal_scaled,   // N(0, 1 / fan_in)
};

struct Parameter {
  std::string name;
  ad::Tensor tensor;
  InitKind init = InitKind::zero;
};

/// Named, ordered collection of trainable tensors. Creation order is the
/// iteration order, so initialization and checkpoints are deterministic.
class ParameterStore {
 public:
  /// Creates and initializes a parameter. Names must be unique.
  ad::Tensor create(const std::string& name, ad::Shape shape, InitKind init, Rng& rng,
                    std::int64_t fan_in = 1, std::int64_t fan_out = 1);

  const std::vector<Parameter>& all() const { return params_; }
  std::vector<Parameter>& all() { return params_; }
  const Parameter* find(const std::string& name) const;
  ad::Tensor get(const std::string& name) const;

  std::size_t size() const { return params_.size(); }
  /// Total number of scalar entries.
  std::int64_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over every parameter of a store.
class Adam {
 public:
  Adam(ParameterStore& store, AdamOptions options);

  void step();
  std::int64_t steps() const { return t_; }
  const AdamOptions& options() const { return options_; }

 private:
  ParameterStore& store_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace helix
