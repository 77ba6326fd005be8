#include "beamllm/optim.hpp"

#include <algorithm>
#include <cmath>

#include "beamllm/error.hpp"

namespace beamllm {

Adam::Adam(AdamConfig cfg) : cfg_(cfg) {
  if (!(cfg_.lr > 0.0) || cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0 ||
      !(cfg_.eps > 0.0)) {
    throw Error(ErrorKind::config, "invalid Adam hyperparameters");
  }
}

void Adam::step(ParameterSet& params, double grad_divisor) {
  if (!(grad_divisor > 0.0)) throw Error(ErrorKind::contract, "Adam: grad divisor must be positive");
  for (const Parameter& p : params) {
    if (p.trainable && !p.has_grad) throw Error(ErrorKind::contract, "Adam: trainable parameter " + p.name + " has no gradient");
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (Parameter& p : params) {
    if (!p.trainable) continue;
    Moments& mom = moments_[p.name];
    if (mom.m.size() != p.value.size()) {
      mom.m.assign(p.value.size(), 0.0);
      mom.v.assign(p.value.size(), 0.0);
    }
    auto theta = p.value.data();
    auto grad = p.grad.data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double g = grad[i] / grad_divisor;
      mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * g;
      mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * g * g;
      const double m_hat = mom.m[i] / bc1;
      const double v_hat = mom.v[i] / bc2;
      theta[i] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
    }
  }
  params.clear_grads();
}

void LrSchedule::validate() const {
  if (!(base_lr > 0.0) || !(gamma > 0.0)) throw Error(ErrorKind::config, "lr schedule needs base_lr > 0 and gamma > 0");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] < 0 || (i > 0 && milestones[i] <= milestones[i - 1])) {
      throw Error(ErrorKind::config, "lr milestones must be non-negative and strictly increasing");
    }
  }
}

double LrSchedule::lr_at(int epoch) const {
  if (epoch < 0) throw Error(ErrorKind::domain, "lr_at: negative epoch");
  const auto crossed = std::count_if(milestones.begin(), milestones.end(), [epoch](int m) { return m <= epoch; });
  return base_lr * std::pow(gamma, static_cast<double>(crossed));
}

}  // namespace beamllm
