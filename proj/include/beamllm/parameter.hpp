#pragma once

#include <cstddef>
#include <deque>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "beamllm/tensor.hpp"

namespace beamllm {

class Rng;

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
  Tensor grad;
  bool has_grad = false;

  void accumulate_grad(const Tensor& g);
  void clear_grad() noexcept;
};

/// Ordered registry of named parameters. Addresses are stable for the lifetime
/// of the set, so modules keep raw pointers to their own entries.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;

  Parameter& add(std::string name, Tensor value, bool trainable);
  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  bool contains(std::string_view name) const;

  std::size_t size() const noexcept { return params_.size(); }
  auto begin() noexcept { return params_.begin(); }
  auto end() noexcept { return params_.end(); }
  auto begin() const noexcept { return params_.begin(); }
  auto end() const noexcept { return params_.end(); }

  std::size_t total_count() const noexcept;
  std::size_t trainable_count() const noexcept;
  void clear_grads() noexcept;

  /// Snapshot / restore of values, used for best-epoch selection.
  std::vector<Tensor> snapshot() const;
  void restore(const std::vector<Tensor>& values);

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

/// Weight initializers.
Tensor uniform_init(const Shape& shape, double bound, Rng& rng);
Tensor normal_init(const Shape& shape, double stddev, Rng& rng);

}  // namespace beamllm
