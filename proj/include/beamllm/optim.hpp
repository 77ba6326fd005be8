#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "beamllm/parameter.hpp"

namespace beamllm {

struct AdamConfig {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a ParameterSet. Frozen parameters are skipped.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {});

  void set_lr(double lr) noexcept { cfg_.lr = lr; }
  double lr() const noexcept { return cfg_.lr; }
  std::uint64_t step_count() const noexcept { return step_; }

  /// Applies one update using grad / grad_divisor, then clears all grads.
  /// Throws ErrorKind::contract when a trainable parameter has no gradient.
  void step(ParameterSet& params, double grad_divisor = 1.0);

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };

  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

/// Piecewise-constant decay: base_lr * gamma^(#milestones <= epoch).
struct LrSchedule {
  std::vector<int> milestones{1, 5, 10, 15, 20, 25, 30, 40};
  double gamma = 0.9;
  double base_lr = 0.01;

  void validate() const;
  double lr_at(int epoch) const;
};

inline double lr_at(const LrSchedule& schedule, int epoch) { return schedule.lr_at(epoch); }

}  // namespace beamllm
