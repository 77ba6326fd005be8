#include "beamllm/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "beamllm/error.hpp"
#include "beamllm/random.hpp"

namespace beamllm {

double relative_error(double analytic, double numeric, double floor) noexcept {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

namespace {

void note(GradcheckResult& r, double err, const std::string& name, std::size_t i) {
  ++r.n_checked;
  if (err > r.max_rel_error || r.worst.empty()) {
    if (err >= r.max_rel_error) {
      r.max_rel_error = err;
      r.worst = name + "[" + std::to_string(i) + "]";
    }
  }
}

double eval_scalar(const std::function<Var(Tape&)>& build_loss) {
  Tape tape(false);
  return build_loss(tape).value().item();
}

}  // namespace

GradcheckResult check_parameter_gradients(ParameterSet& params, const std::function<Var(Tape&)>& build_loss,
                                          double h) {
  params.clear_grads();
  {
    Tape tape;
    Var loss = build_loss(tape);
    tape.backward(loss);
  }
  GradcheckResult result;
  for (Parameter& p : params) {
    if (!p.trainable) continue;
    const Tensor analytic = p.has_grad ? p.grad : Tensor(p.value.shape());
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      const double up = eval_scalar(build_loss);
      p.value[i] = saved - h;
      const double down = eval_scalar(build_loss);
      p.value[i] = saved;
      note(result, relative_error(analytic[i], (up - down) / (2.0 * h)), p.name, i);
    }
  }
  params.clear_grads();
  return result;
}

GradcheckResult check_input_gradients(std::vector<Tensor> inputs,
                                      const std::function<Var(Tape&, std::span<const Var>)>& op, double h,
                                      std::uint64_t weight_seed) {
  Tensor weights;
  auto reduce = [&](Tape& tape, Var out) {
    if (weights.shape() != out.value().shape()) {
      Rng rng(weight_seed);
      weights = Tensor(out.value().shape());
      for (auto& w : weights.data()) w = rng.uniform(-1.0, 1.0);
    }
    return sum(mul(out, tape.constant(weights)));
  };
  auto evaluate = [&](bool with_grad, std::vector<Tensor>* grads) {
    Tape tape(with_grad);
    std::vector<Var> vars;
    vars.reserve(inputs.size());
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t, true));
    Var loss = reduce(tape, op(tape, vars));
    if (with_grad) {
      tape.backward(loss);
      for (const Var& v : vars) grads->push_back(tape.grad(v));
    }
    return loss.value().item();
  };
  std::vector<Tensor> analytic;
  evaluate(true, &analytic);
  GradcheckResult result;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double saved = inputs[k][i];
      inputs[k][i] = saved + h;
      const double up = evaluate(false, nullptr);
      inputs[k][i] = saved - h;
      const double down = evaluate(false, nullptr);
      inputs[k][i] = saved;
      note(result, relative_error(analytic[k][i], (up - down) / (2.0 * h)), "input" + std::to_string(k), i);
    }
  }
  return result;
}

}  // namespace beamllm
