#include "beamllm/training.hpp"

#include <cstdio>
#include <numeric>

#include "beamllm/baselines.hpp"
#include "beamllm/checkpoint.hpp"
#include "beamllm/error.hpp"
#include "beamllm/json_fields.hpp"
#include "beamllm/random.hpp"
#include "beamllm/reprogram.hpp"

namespace beamllm {

std::string mode_name(Mode mode) { return mode == Mode::standard ? "standard" : "fewshot"; }

Mode parse_mode(const std::string& name) {
  if (name == "standard") return Mode::standard;
  if (name == "fewshot") return Mode::fewshot;
  throw Error(ErrorKind::config, "unknown mode \"" + name + "\" (standard, fewshot)");
}

Horizon horizon_of(Mode mode) { return mode == Mode::standard ? Horizon{8, 5} : Horizon{3, 10}; }

Mode mode_of(const Predictor& model) {
  for (Mode m : {Mode::standard, Mode::fewshot}) {
    const Horizon h = horizon_of(m);
    if (model.t_hist() == h.t_hist && model.t_pred() == h.t_pred) return m;
  }
  throw Error(ErrorKind::config, "model horizon (" + std::to_string(model.t_hist()) + ", " +
                                     std::to_string(model.t_pred()) + ") matches no mode");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw Error(ErrorKind::config, "train.batch_size must be >= 1");
  schedule.validate();
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig cfg;
  FieldReader r(j, "train");
  r.read("batch_size", cfg.batch_size);
  r.read("epochs", cfg.epochs);
  r.read("base_lr", cfg.schedule.base_lr);
  r.read("gamma", cfg.schedule.gamma);
  r.read("milestones", cfg.schedule.milestones);
  r.read("seed", cfg.seed);
  std::string mode = mode_name(cfg.mode);
  r.read("mode", mode);
  cfg.mode = parse_mode(mode);
  r.read("pap", cfg.pap);
  r.finish();
  cfg.validate();
  return cfg;
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"batch_size", cfg.batch_size},
          {"epochs", cfg.epochs},
          {"base_lr", cfg.schedule.base_lr},
          {"gamma", cfg.schedule.gamma},
          {"milestones", cfg.schedule.milestones},
          {"seed", cfg.seed},
          {"mode", mode_name(cfg.mode)},
          {"pap", cfg.pap}};
}

std::unique_ptr<Predictor> make_predictor(const std::string& kind, Mode mode, std::uint64_t seed, bool pap) {
  const Horizon h = horizon_of(mode);
  if (kind == "beamllm") {
    BeamLlmConfig c;
    c.t_hist = h.t_hist;
    c.t_pred = h.t_pred;
    if (mode == Mode::fewshot) {
      c.patch_len = 2;
      c.stride = 1;
    }
    c.pap = pap;
    c.seed = seed;
    return std::make_unique<BeamLlmModel>(c);
  }
  RecurrentConfig c;
  c.kind = parse_cell(kind);
  c.t_hist = h.t_hist;
  c.t_pred = h.t_pred;
  c.seed = seed;
  return std::make_unique<RecurrentModel>(c);
}

std::unique_ptr<Predictor> load_predictor(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  const std::string kind = ck.meta.value("kind", "");
  if (!ck.meta.contains("config")) throw Error(ErrorKind::load, path.string() + ": checkpoint has no model config");
  std::unique_ptr<Predictor> model;
  try {
    if (kind == "beamllm") {
      model = std::make_unique<BeamLlmModel>(beamllm_config_from_json(ck.meta.at("config")));
    } else if (kind == "rnn" || kind == "gru" || kind == "lstm") {
      model = std::make_unique<RecurrentModel>(recurrent_config_from_json(ck.meta.at("config")));
    } else {
      throw Error(ErrorKind::load, path.string() + ": unknown model kind \"" + kind + "\"");
    }
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::load) throw;
    throw Error(ErrorKind::load, path.string() + ": " + e.what());
  }
  model->load(path);
  return model;
}

namespace {

std::vector<std::size_t> batch_labels(const Predictor& model, std::span<const WindowSample* const> batch) {
  const std::size_t tp = model.t_pred();
  std::vector<std::size_t> labels;
  labels.reserve(batch.size() * tp);
  for (const WindowSample* w : batch) {
    if (w->future_beams.size() != tp) {
      throw Error(ErrorKind::validation, "window has " + std::to_string(w->future_beams.size()) +
                                            " future beams, model predicts " + std::to_string(tp));
    }
    for (std::size_t b : w->future_beams) {
      if (b >= model.n_beams()) {
        throw Error(ErrorKind::validation, "beam label " + std::to_string(b) + " outside [0," +
                                               std::to_string(model.n_beams()) + ")");
      }
      labels.push_back(b);
    }
  }
  return labels;
}

std::size_t count_top1(const Tensor& logits, std::span<const std::size_t> labels) {
  std::size_t hits = 0;
  const std::size_t m = logits.dim(1);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < m; ++i) {
      if (logits(r, i) > logits(r, best)) best = i;
    }
    hits += best == labels[r];
  }
  return hits;
}

}  // namespace

Var loss_batch(Tape& tape, Predictor& model, std::span<const WindowSample* const> batch) {
  if (batch.empty()) throw Error(ErrorKind::dimension, "loss_batch: empty batch");
  const auto labels = batch_labels(model, batch);
  std::vector<const Tensor*> hist;
  hist.reserve(batch.size());
  for (const WindowSample* w : batch) hist.push_back(&w->history);
  return scale(cross_entropy(model.forward_batch(tape, hist), labels), 1.0 / static_cast<double>(batch.size()));
}

BatchStats evaluate_loss(Predictor& model, std::span<const WindowSample> windows, std::size_t chunk) {
  BatchStats s;
  if (windows.empty()) return s;
  double loss = 0.0;
  std::size_t hits = 0;
  for (std::size_t start = 0; start < windows.size(); start += chunk) {
    const std::size_t n = std::min(chunk, windows.size() - start);
    std::vector<const WindowSample*> batch;
    for (std::size_t i = 0; i < n; ++i) batch.push_back(&windows[start + i]);
    const auto labels = batch_labels(model, batch);
    std::vector<const Tensor*> hist;
    for (const WindowSample* w : batch) hist.push_back(&w->history);
    Tape tape(false);
    const Var logits = model.forward_batch(tape, hist);
    loss += cross_entropy(logits, labels).value()[0];
    hits += count_top1(logits.value(), labels);
  }
  s.loss = loss / static_cast<double>(windows.size());
  s.top1 = static_cast<double>(hits) / static_cast<double>(windows.size() * model.t_pred());
  return s;
}

TrainResult train(Predictor& model, const DatasetSplit& split, const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (split.train.empty()) throw Error(ErrorKind::config, "train: the training split is empty");
  Adam adam;
  Rng rng(derive_seed(cfg.seed, 7));
  std::vector<std::size_t> order(split.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result;
  std::vector<Tensor> best;
  bool have_best = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = cfg.schedule.lr_at(static_cast<int>(epoch));
    adam.set_lr(rec.lr);
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::vector<const WindowSample*> batch;
      std::vector<const Tensor*> hist;
      for (std::size_t i = 0; i < n; ++i) {
        batch.push_back(&split.train[order[start + i]]);
        hist.push_back(&batch.back()->history);
      }
      const auto labels = batch_labels(model, batch);
      Tape tape;
      const Var logits = model.forward_batch(tape, hist);
      const Var loss = scale(cross_entropy(logits, labels), 1.0 / static_cast<double>(n));
      tape.backward(loss);
      adam.step(model.trainable());
      loss_sum += loss.value()[0] * static_cast<double>(n);
      hits += count_top1(logits.value(), labels);
    }
    rec.train_loss = loss_sum / static_cast<double>(order.size());
    rec.train_top1 = static_cast<double>(hits) / static_cast<double>(order.size() * model.t_pred());
    if (!split.val.empty()) {
      const BatchStats v = evaluate_loss(model, split.val);
      rec.val_loss = v.loss;
      rec.val_top1 = v.top1;
      if (!have_best || v.top1 > result.best_val_top1) {
        result.best_val_top1 = v.top1;
        result.best_epoch = epoch;
        best = model.trainable().snapshot();
        have_best = true;
      }
    } else {
      result.best_epoch = epoch;
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (have_best) model.trainable().restore(best);
  return result;
}

std::string format_history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,lr,train_loss,val_loss,train_top1\n";
  char buf[160];
  for (const EpochRecord& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,%.10g\n", r.epoch, r.lr, r.train_loss, r.val_loss,
                  r.train_top1);
    out += buf;
  }
  return out;
}

}  // namespace beamllm
