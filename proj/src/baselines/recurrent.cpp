#include "beamllm/baselines.hpp"

#include <cmath>

#include "beamllm/checkpoint.hpp"
#include "beamllm/error.hpp"
#include "beamllm/json_fields.hpp"
#include "beamllm/random.hpp"

namespace beamllm {

std::string cell_name(CellKind kind) {
  switch (kind) {
    case CellKind::rnn:
      return "rnn";
    case CellKind::gru:
      return "gru";
    case CellKind::lstm:
      return "lstm";
  }
  return "?";
}

CellKind parse_cell(const std::string& name) {
  if (name == "rnn") return CellKind::rnn;
  if (name == "gru") return CellKind::gru;
  if (name == "lstm") return CellKind::lstm;
  throw Error(ErrorKind::config, "unknown recurrent cell \"" + name + "\" (rnn, gru, lstm)");
}

std::size_t gate_count(CellKind kind) {
  switch (kind) {
    case CellKind::rnn:
      return 1;
    case CellKind::gru:
      return 3;
    case CellKind::lstm:
      return 4;
  }
  return 0;
}

void RecurrentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::config, "recurrent." + msg); };
  if (t_hist == 0) fail("t_hist must be >= 1");
  if (t_pred == 0) fail("t_pred must be >= 1");
  if (n_inputs == 0) fail("n_inputs must be >= 1");
  if (hidden == 0) fail("hidden must be >= 1");
  if (n_layers == 0) fail("n_layers must be >= 1");
  if (n_beams == 0) fail("n_beams must be >= 1");
}

RecurrentConfig recurrent_config_from_json(const nlohmann::json& j) {
  RecurrentConfig cfg;
  FieldReader r(j, "recurrent");
  std::string kind = cell_name(cfg.kind);
  r.read("kind", kind);
  cfg.kind = parse_cell(kind);
  r.read("t_hist", cfg.t_hist);
  r.read("t_pred", cfg.t_pred);
  r.read("n_inputs", cfg.n_inputs);
  r.read("hidden", cfg.hidden);
  r.read("n_layers", cfg.n_layers);
  r.read("n_beams", cfg.n_beams);
  r.read("seed", cfg.seed);
  r.finish();
  cfg.validate();
  return cfg;
}

nlohmann::json to_json(const RecurrentConfig& cfg) {
  return {{"kind", cell_name(cfg.kind)}, {"t_hist", cfg.t_hist},     {"t_pred", cfg.t_pred},
          {"n_inputs", cfg.n_inputs},   {"hidden", cfg.hidden},      {"n_layers", cfg.n_layers},
          {"n_beams", cfg.n_beams},     {"seed", cfg.seed}};
}

std::size_t recurrent_layer_params(CellKind kind, std::size_t in, std::size_t hidden) {
  return gate_count(kind) * (in * hidden + hidden * hidden + 2 * hidden);
}

RecurrentModel::RecurrentModel(const RecurrentConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(derive_seed(cfg_.seed, 2));
  const std::string pre = cell_name(cfg_.kind) + ".";
  const std::size_t h = cfg_.hidden;
  const std::size_t gh = gate_count(cfg_.kind) * h;
  auto add = [&](const std::string& name, Shape shape, std::size_t fan_in) {
    return &params_.add(pre + name, uniform_init(shape, 1.0 / std::sqrt(double(fan_in)), rng), true);
  };
  in_w_ = add("input.w", {cfg_.n_inputs, h}, cfg_.n_inputs);
  in_b_ = add("input.b", {h}, cfg_.n_inputs);
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    // torch convention: every recurrent tensor uses 1/sqrt(hidden)
    const std::string n = "layer" + std::to_string(l) + ".";
    Layer L;
    L.w_ih = add(n + "w_ih", {h, gh}, h);
    L.w_hh = add(n + "w_hh", {h, gh}, h);
    L.b_ih = add(n + "b_ih", {gh}, h);
    L.b_hh = add(n + "b_hh", {gh}, h);
    layers_.push_back(L);
  }
  out_w_ = add("readout.w", {h, cfg_.n_beams}, h);
  out_b_ = add("readout.b", {cfg_.n_beams}, h);
}

Var RecurrentModel::step(Tape& tape, const Layer& L, Var x, State& s) {
  const std::size_t h = cfg_.hidden;
  Var gi = linear(x, tape.param(*L.w_ih), tape.param(*L.b_ih));
  Var gh = linear(s.h, tape.param(*L.w_hh), tape.param(*L.b_hh));
  switch (cfg_.kind) {
    case CellKind::rnn:
      s.h = tanh(add(gi, gh));
      break;
    case CellKind::gru: {
      Var r = sigmoid(add(slice_cols(gi, 0, h), slice_cols(gh, 0, h)));
      Var z = sigmoid(add(slice_cols(gi, h, h), slice_cols(gh, h, h)));
      Var n = tanh(add(slice_cols(gi, 2 * h, h), mul(r, slice_cols(gh, 2 * h, h))));
      // (1 - z) n + z h
      s.h = add(n, mul(z, sub(s.h, n)));
      break;
    }
    case CellKind::lstm: {
      Var g = add(gi, gh);
      Var i = sigmoid(slice_cols(g, 0, h));
      Var f = sigmoid(slice_cols(g, h, h));
      Var c_new = tanh(slice_cols(g, 2 * h, h));
      Var o = sigmoid(slice_cols(g, 3 * h, h));
      s.c = add(mul(f, s.c), mul(i, c_new));
      s.h = mul(o, tanh(s.c));
      break;
    }
  }
  return s.h;
}

Var RecurrentModel::forward_batch(Tape& tape, std::span<const Tensor* const> histories) {
  const std::size_t B = histories.size();
  if (B == 0) throw Error(ErrorKind::dimension, "forward_batch: empty batch");
  const std::size_t T = cfg_.t_hist;
  const std::size_t F = cfg_.n_inputs;
  for (const Tensor* hp : histories) {
    if (hp->rank() != 2 || hp->dim(0) != F || hp->dim(1) != T) {
      throw Error(ErrorKind::dimension, "forward_batch: expected " + std::to_string(F) + " x " + std::to_string(T) +
                                            " history, got " + shape_str(hp->shape()));
    }
    require_finite(*hp, "forward_batch input");
  }
  auto column = [&](std::size_t t) {
    Tensor x({B, F});
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t f = 0; f < F; ++f) x(b, f) = (*histories[b])(f, t);
    }
    return linear(tape.constant(std::move(x)), tape.param(*in_w_), tape.param(*in_b_));
  };

  std::vector<State> states(layers_.size());
  for (State& s : states) {
    s.h = tape.constant(Tensor({B, cfg_.hidden}));
    s.c = tape.constant(Tensor({B, cfg_.hidden}));
  }
  auto advance = [&](Var x) {
    for (std::size_t l = 0; l < layers_.size(); ++l) x = step(tape, layers_[l], x, states[l]);
    return x;
  };
  for (std::size_t t = 0; t < T; ++t) advance(column(t));

  const Var last = column(T - 1);
  std::vector<Var> steps;
  for (std::size_t j = 0; j < cfg_.t_pred; ++j) {
    steps.push_back(linear(advance(last), tape.param(*out_w_), tape.param(*out_b_)));
  }
  // B x (T_pred * M) -> row b * T_pred + j
  return reshape(concat_cols(steps), {B * cfg_.t_pred, cfg_.n_beams});
}

nlohmann::json RecurrentModel::describe() const { return {{"kind", kind()}, {"config", to_json(cfg_)}}; }

void RecurrentModel::save(const std::filesystem::path& path) const {
  write_bytes(path, encode_checkpoint(std::vector<const ParameterSet*>{&params_}, describe()));
}

void RecurrentModel::load(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  if (ck.meta.value("kind", "") != kind()) throw Error(ErrorKind::load, path.string() + " is not a " + kind() + " checkpoint");
  if (ck.meta.at("config") != to_json(cfg_)) {
    throw Error(ErrorKind::load, "checkpoint architecture differs from the model: " + ck.meta.at("config").dump());
  }
  load_parameters(ck, std::vector<ParameterSet*>{&params_});
}

}  // namespace beamllm
