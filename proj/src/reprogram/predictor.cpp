#include "beamllm/predictor.hpp"

#include <algorithm>

#include "beamllm/error.hpp"

namespace beamllm {

Tensor BeamPrediction::probabilities() const { return softmax(scores, 0); }

std::vector<std::size_t> predict_beams(const BeamPrediction& pred) {
  const std::size_t m = pred.n_beams();
  const std::size_t t = pred.horizon();
  std::vector<std::size_t> out(t, 0);
  for (std::size_t j = 0; j < t; ++j) {
    for (std::size_t i = 1; i < m; ++i) {
      if (pred.scores(i, j) > pred.scores(out[j], j)) out[j] = i;
    }
  }
  return out;
}

BeamPrediction Predictor::predict(const Tensor& history) {
  const Tensor* one[1] = {&history};
  return std::move(predict_all(one, 1).front());
}

std::vector<BeamPrediction> Predictor::predict_all(std::span<const Tensor* const> histories, std::size_t chunk) {
  if (chunk == 0) throw Error(ErrorKind::config, "predict_all: chunk must be >= 1");
  const std::size_t tp = t_pred();
  const std::size_t m = n_beams();
  std::vector<BeamPrediction> out;
  out.reserve(histories.size());
  for (std::size_t start = 0; start < histories.size(); start += chunk) {
    const std::size_t n = std::min(chunk, histories.size() - start);
    Tape tape(false);
    const Tensor logits = forward_batch(tape, histories.subspan(start, n)).value();
    for (std::size_t b = 0; b < n; ++b) {
      BeamPrediction p{Tensor({m, tp})};
      for (std::size_t j = 0; j < tp; ++j) {
        for (std::size_t i = 0; i < m; ++i) p.scores(i, j) = logits(b * tp + j, i);
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

}  // namespace beamllm
