#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "beamllm/parameter.hpp"
#include "beamllm/tape.hpp"

namespace beamllm {

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t n_checked = 0;
  std::string worst;  // "<name>[<flat index>]" of the largest deviation
};

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
/// gradient is ~0 from dominating through finite-difference round-off.
double relative_error(double analytic, double numeric, double floor = 1e-6) noexcept;

/// Central finite differences over every element of every trainable parameter
/// against the tape's analytic gradient. `build_loss` must record a scalar loss
/// on the tape it is given; it is also evaluated on value-only tapes.
GradcheckResult check_parameter_gradients(ParameterSet& params, const std::function<Var(Tape&)>& build_loss,
                                          double h = 1e-5);

/// Same check for the inputs of an operator. The output is reduced to a
/// scalar with fixed pseudo-random weights so every output element matters.
GradcheckResult check_input_gradients(std::vector<Tensor> inputs,
                                      const std::function<Var(Tape&, std::span<const Var>)>& op, double h = 1e-5,
                                      std::uint64_t weight_seed = 17);

}  // namespace beamllm
