#include "beamllm/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "beamllm/error.hpp"
#include "beamllm/reprogram.hpp"

namespace beamllm {

bool in_top_k(const Tensor& scores, std::size_t step, std::size_t label, std::size_t k) {
  const std::size_t m = scores.dim(0);
  if (label >= m) throw Error(ErrorKind::index, "label " + std::to_string(label) + " outside [0," + std::to_string(m) + ")");
  const double s = scores(label, step);
  std::size_t ahead = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const double v = scores(i, step);
    if (v > s || (v == s && i < label)) ++ahead;
  }
  return ahead < k;
}

double top_k_accuracy(std::span<const BeamPrediction> preds, std::span<const std::vector<std::size_t>> labels,
                      std::size_t k, std::size_t step) {
  if (preds.size() != labels.size()) throw Error(ErrorKind::dimension, "top_k_accuracy: predictions and labels differ in count");
  if (preds.empty()) throw Error(ErrorKind::dimension, "top_k_accuracy: no samples");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const Tensor& s = preds[i].scores;
    if (k == 0 || k > s.dim(0)) {
      throw Error(ErrorKind::domain, "top_k_accuracy: K=" + std::to_string(k) + " outside [1," + std::to_string(s.dim(0)) + "]");
    }
    if (step >= s.dim(1) || step >= labels[i].size()) {
      throw Error(ErrorKind::index, "top_k_accuracy: step " + std::to_string(step) + " beyond the horizon");
    }
    hits += in_top_k(s, step, labels[i][step], k);
  }
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double TopKReport::mean(std::size_t k_index) const {
  const auto& row = per_step.at(k_index);
  double sum = 0.0;
  for (double v : row) sum += v;
  return sum / static_cast<double>(row.size());
}

double TopKReport::degradation(std::size_t k_index) const {
  const auto& row = per_step.at(k_index);
  return row.front() - row.back();
}

double TopKReport::mean_for(std::size_t k) const {
  for (std::size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] == k) return mean(i);
  }
  throw Error(ErrorKind::domain, "K=" + std::to_string(k) + " was not evaluated");
}

TopKReport report_from(std::span<const BeamPrediction> preds, std::span<const WindowSample> windows,
                       std::size_t n_beams, const std::string& model, const std::string& mode, const std::string& pap) {
  if (windows.empty()) throw Error(ErrorKind::dimension, "evaluate: no windows");
  std::vector<std::vector<std::size_t>> labels;
  labels.reserve(windows.size());
  for (const WindowSample& w : windows) labels.push_back(w.future_beams);
  TopKReport r;
  r.model = model;
  r.mode = mode;
  r.pap = pap;
  r.n_test = windows.size();
  const std::size_t horizon = preds.front().horizon();
  for (std::size_t k : {1, 3, 5}) {
    if (k > n_beams) continue;
    r.ks.push_back(k);
    std::vector<double> row;
    for (std::size_t j = 0; j < horizon; ++j) row.push_back(top_k_accuracy(preds, labels, k, j));
    r.per_step.push_back(std::move(row));
  }
  return r;
}

TopKReport evaluate(Predictor& model, std::span<const WindowSample> windows, Mode mode) {
  if (mode_of(model) != mode) {
    throw Error(ErrorKind::config, "model was built for " + mode_name(mode_of(model)) + " prediction, not " + mode_name(mode));
  }
  std::vector<const Tensor*> hist;
  hist.reserve(windows.size());
  for (const WindowSample& w : windows) hist.push_back(&w.history);
  const auto preds = model.predict_all(hist);
  std::string pap = "n/a";
  if (const auto* b = dynamic_cast<const BeamLlmModel*>(&model)) pap = b->config().pap ? "on" : "off";
  return report_from(preds, windows, model.n_beams(), model.kind(), mode_name(mode), pap);
}

TopKReport evaluate_majority(std::span<const WindowSample> train, std::span<const WindowSample> windows,
                             std::size_t n_beams, Mode mode) {
  std::vector<std::size_t> freq(n_beams, 0);
  for (const WindowSample& w : train) {
    for (std::size_t b : w.future_beams) {
      if (b >= n_beams) throw Error(ErrorKind::validation, "beam label " + std::to_string(b) + " out of range");
      ++freq[b];
    }
  }
  const std::size_t horizon = horizon_of(mode).t_pred;
  // score = frequency; equal counts fall back to the lower index through in_top_k
  BeamPrediction p{Tensor({n_beams, horizon})};
  for (std::size_t i = 0; i < n_beams; ++i) {
    for (std::size_t j = 0; j < horizon; ++j) p.scores(i, j) = static_cast<double>(freq[i]);
  }
  const std::vector<BeamPrediction> preds(windows.size(), p);
  return report_from(preds, windows, n_beams, "majority", mode_name(mode), "n/a");
}

std::string format_metrics_csv(std::span<const TopKReport> reports) {
  std::string out = "model,mode,pap,K,step,accuracy,n_test\n";
  char buf[256];
  auto row = [&](const TopKReport& r, std::size_t k, const std::string& step, double acc) {
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%zu,%s,%.6f,%zu\n", r.model.c_str(), r.mode.c_str(), r.pap.c_str(), k,
                  step.c_str(), acc, r.n_test);
    out += buf;
  };
  for (const TopKReport& r : reports) {
    for (std::size_t ki = 0; ki < r.ks.size(); ++ki) {
      for (std::size_t j = 0; j < r.per_step[ki].size(); ++j) row(r, r.ks[ki], std::to_string(j + 1), r.per_step[ki][j]);
      row(r, r.ks[ki], "mean", r.mean(ki));
      row(r, r.ks[ki], "degradation", r.degradation(ki));
    }
  }
  return out;
}

ComplexityRow complexity_report(Predictor& model, const Tensor& history, std::size_t runs, std::size_t warmup) {
  ComplexityRow row;
  row.model = model.kind();
  row.total_params = model.total_params();
  row.trainable_params = model.trainable_params();
  row.runs = runs;
  auto* bllm = dynamic_cast<BeamLlmModel*>(&model);
  if (bllm) {
    bllm->set_cache_enabled(false);
    bllm->clear_cache();
  }
  double sink = 0.0;
  for (std::size_t i = 0; i < warmup; ++i) sink += model.predict(history).scores[0];
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < runs; ++i) sink += model.predict(history).scores[0];
  const auto t1 = std::chrono::steady_clock::now();
  if (bllm) bllm->set_cache_enabled(true);
  row.mean_inference_sec = runs ? std::chrono::duration<double>(t1 - t0).count() / static_cast<double>(runs) : 0.0;
  if (!std::isfinite(sink)) throw Error(ErrorKind::numeric, "complexity_report: non-finite prediction");
  return row;
}

std::string format_complexity_csv(std::span<const ComplexityRow> rows) {
  std::string out = "model,total_params,trainable_params,mean_inference_sec,runs\n";
  char buf[256];
  for (const ComplexityRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%zu,%.6e,%zu\n", r.model.c_str(), r.total_params, r.trainable_params,
                  r.mean_inference_sec, r.runs);
    out += buf;
  }
  return out;
}

}  // namespace beamllm
