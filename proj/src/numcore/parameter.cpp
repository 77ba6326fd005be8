#include "beamllm/parameter.hpp"

#include "beamllm/error.hpp"
#include "beamllm/random.hpp"

namespace beamllm {

void Parameter::accumulate_grad(const Tensor& g) {
  if (g.shape() != value.shape()) {
    throw Error(ErrorKind::dimension, "gradient shape " + shape_str(g.shape()) + " does not match parameter " +
                                          name + " " + shape_str(value.shape()));
  }
  if (!has_grad) {
    grad = g;
    has_grad = true;
    return;
  }
  auto dst = grad.data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Parameter::clear_grad() noexcept {
  grad = Tensor();
  has_grad = false;
}

Parameter& ParameterSet::add(std::string name, Tensor value, bool trainable) {
  if (index_.contains(name)) throw Error(ErrorKind::config, "duplicate parameter name " + name);
  index_.emplace(name, params_.size());
  params_.push_back(Parameter{std::move(name), std::move(value), trainable, Tensor(), false});
  return params_.back();
}

Parameter& ParameterSet::get(std::string_view name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorKind::index, "no parameter named " + std::string(name));
  return params_[it->second];
}

const Parameter& ParameterSet::get(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorKind::index, "no parameter named " + std::string(name));
  return params_[it->second];
}

bool ParameterSet::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

std::size_t ParameterSet::total_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::size_t ParameterSet::trainable_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) {
    if (p.trainable) n += p.value.size();
  }
  return n;
}

void ParameterSet::clear_grads() noexcept {
  for (auto& p : params_) p.clear_grad();
}

std::vector<Tensor> ParameterSet::snapshot() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

void ParameterSet::restore(const std::vector<Tensor>& values) {
  if (values.size() != params_.size()) throw Error(ErrorKind::contract, "snapshot size mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != params_[i].value.shape()) {
      throw Error(ErrorKind::dimension, "snapshot shape mismatch for " + params_[i].name);
    }
    params_[i].value = values[i];
  }
}

Tensor uniform_init(const Shape& shape, double bound, Rng& rng) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

Tensor normal_init(const Shape& shape, double stddev, Rng& rng) {
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.normal(0.0, stddev);
  return t;
}

}  // namespace beamllm
