#include "beamllm/reprogram.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "beamllm/checkpoint.hpp"
#include "beamllm/error.hpp"
#include "beamllm/json_fields.hpp"
#include "beamllm/random.hpp"

namespace beamllm {

std::vector<double> revin_normalize(std::span<const double> row, RevinStats& stats, double eps) {
  if (row.empty()) throw Error(ErrorKind::dimension, "revin: empty row");
  const double n = static_cast<double>(row.size());
  double mean = 0.0;
  for (double v : row) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : row) var += (v - mean) * (v - mean);
  var /= n;
  stats.mean = mean;
  stats.stdev = std::sqrt(var + eps);
  std::vector<double> out(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) out[i] = (row[i] - mean) / stats.stdev;
  return out;
}

std::vector<double> revin_invert(std::span<const double> normalized, const RevinStats& stats) {
  std::vector<double> out(normalized.size());
  for (std::size_t i = 0; i < normalized.size(); ++i) out[i] = normalized[i] * stats.stdev + stats.mean;
  return out;
}

void PatchConfig::validate() const {
  if (t_hist == 0) throw Error(ErrorKind::config, "patch: T_hist must be >= 1");
  if (patch_len == 0 || patch_len > t_hist) {
    throw Error(ErrorKind::config, "patch: need 1 <= L_p <= T_hist, got L_p=" + std::to_string(patch_len) +
                                       " T_hist=" + std::to_string(t_hist));
  }
  if (stride == 0) throw Error(ErrorKind::config, "patch: stride must be >= 1");
}

std::size_t PatchConfig::n_patches() const {
  validate();
  return (t_hist - patch_len) / stride + 2;
}

Tensor patchify(std::span<const double> row, const PatchConfig& cfg) {
  const std::size_t n = cfg.n_patches();
  if (row.size() != cfg.t_hist) {
    throw Error(ErrorKind::dimension, "patchify: row length " + std::to_string(row.size()) + " != T_hist " +
                                          std::to_string(cfg.t_hist));
  }
  std::vector<double> padded(row.begin(), row.end());
  padded.insert(padded.end(), cfg.stride, row.back());
  Tensor out({n, cfg.patch_len});
  for (std::size_t p = 0; p < n; ++p) {
    std::copy_n(padded.begin() + static_cast<std::ptrdiff_t>(p * cfg.stride), cfg.patch_len, out.raw() + p * cfg.patch_len);
  }
  return out;
}

std::string format_4g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string PromptText::full() const { return dataset_desc + " " + task_desc + " " + stats_desc; }

PromptText build_prompt(const Tensor& history, std::size_t channel, std::size_t t_pred) {
  if (history.rank() != 2 || history.dim(0) != 4 || channel >= 4) {
    throw Error(ErrorKind::dimension, "build_prompt: expected a 4 x T_hist window and channel < 4");
  }
  const std::size_t t = history.dim(1);
  std::vector<double> x(history.raw() + channel * t, history.raw() + (channel + 1) * t);

  PromptText p;
  p.dataset_desc = std::string("Dataset description: V2I mmWave bounding-box features of a vehicle seen by a roadside "
                               "camera; this channel is the ") +
                   kChannelNames[channel] + " component.";
  p.task_desc = "Task description: predict the optimal beam indices for the next " + std::to_string(t_pred) +
                " steps given the previous " + std::to_string(t) + " steps of bounding-box information.";

  std::vector<double> sorted = x;
  std::sort(sorted.begin(), sorted.end());
  const double median = t % 2 == 1 ? sorted[t / 2] : 0.5 * (sorted[t / 2 - 1] + sorted[t / 2]);
  const double delta = x.back() - x.front();
  const char* trend = delta > 0.0 ? "up" : (delta < 0.0 ? "down" : "flat");

  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(t);
  double denom = 0.0;
  for (double v : x) denom += (v - mean) * (v - mean);
  std::vector<std::pair<double, std::size_t>> acf;
  for (std::size_t lag = 1; lag < t; ++lag) {
    double num = 0.0;
    for (std::size_t i = 0; i + lag < t; ++i) num += (x[i] - mean) * (x[i + lag] - mean);
    acf.emplace_back(denom > 0.0 ? std::abs(num / denom) : 0.0, lag);
  }
  std::stable_sort(acf.begin(), acf.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::string lags;
  for (std::size_t k = 0; k < std::min<std::size_t>(3, acf.size()); ++k) lags += " " + std::to_string(acf[k].second);

  p.stats_label = "Input statistics (min, max, median, trend, top 3 lags):";
  p.stats_values = format_4g(sorted.front()) + " " + format_4g(sorted.back()) + " " + format_4g(median) + " " + trend + lags;
  p.stats_desc = p.stats_label + " " + p.stats_values;
  return p;
}

void BeamLlmConfig::validate() const {
  patch().validate();
  backbone.validate();
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::config, "beamllm." + msg); };
  if (t_pred == 0) fail("t_pred must be >= 1");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) fail("d_model must be a positive multiple of n_heads");
  if (n_prototypes == 0) fail("n_prototypes must be >= 1");
  if (n_beams == 0) fail("n_beams must be >= 1");
  if (fuse_hidden1 == 0 || fuse_hidden2 == 0) fail("fusion widths must be >= 1");
  if (patch().n_patches() > backbone.max_seq) fail("patch count exceeds backbone max_seq");
}

BeamLlmConfig beamllm_config_from_json(const nlohmann::json& j) {
  BeamLlmConfig cfg;
  FieldReader r(j, "beamllm");
  r.read("t_hist", cfg.t_hist);
  r.read("t_pred", cfg.t_pred);
  r.read("patch_len", cfg.patch_len);
  r.read("stride", cfg.stride);
  r.read("d_model", cfg.d_model);
  r.read("n_heads", cfg.n_heads);
  r.read("n_prototypes", cfg.n_prototypes);
  r.read("n_beams", cfg.n_beams);
  r.read("fuse_hidden1", cfg.fuse_hidden1);
  r.read("fuse_hidden2", cfg.fuse_hidden2);
  r.read("pap", cfg.pap);
  r.read("seed", cfg.seed);
  if (const auto* b = r.child("backbone")) cfg.backbone = backbone_config_from_json(*b);
  r.finish();
  cfg.validate();
  return cfg;
}

nlohmann::json to_json(const BeamLlmConfig& cfg) {
  return {{"t_hist", cfg.t_hist},
          {"t_pred", cfg.t_pred},
          {"patch_len", cfg.patch_len},
          {"stride", cfg.stride},
          {"d_model", cfg.d_model},
          {"n_heads", cfg.n_heads},
          {"n_prototypes", cfg.n_prototypes},
          {"n_beams", cfg.n_beams},
          {"fuse_hidden1", cfg.fuse_hidden1},
          {"fuse_hidden2", cfg.fuse_hidden2},
          {"pap", cfg.pap},
          {"seed", cfg.seed},
          {"backbone", to_json(cfg.backbone)}};
}

BeamLlmModel::BeamLlmModel(const BeamLlmConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  backbone_ = std::make_unique<Backbone>(cfg_.backbone);
  Rng rng(derive_seed(cfg_.seed, 1));
  auto linear_w = [&](const std::string& name, std::size_t fan_in, std::size_t fan_out) {
    return &params_.add("reprogram." + name, uniform_init({fan_in, fan_out}, 1.0 / std::sqrt(double(fan_in)), rng), true);
  };
  auto linear_b = [&](const std::string& name, std::size_t fan_in, std::size_t fan_out) {
    return &params_.add("reprogram." + name, uniform_init({fan_out}, 1.0 / std::sqrt(double(fan_in)), rng), true);
  };
  const std::size_t d = cfg_.backbone.hidden;
  const std::size_t dk = cfg_.d_model / cfg_.n_heads;
  patch_w_ = linear_w("patch.w", cfg_.patch_len, cfg_.d_model);
  patch_b_ = linear_b("patch.b", cfg_.patch_len, cfg_.d_model);
  proto_w_ = linear_w("proto.w", cfg_.backbone.vocab_size, cfg_.n_prototypes);
  for (std::size_t k = 0; k < cfg_.n_heads; ++k) {
    const std::string h = "head" + std::to_string(k) + ".";
    wq_.push_back(linear_w(h + "wq", cfg_.d_model, dk));
    wk_.push_back(linear_w(h + "wk", d, dk));
    wv_.push_back(linear_w(h + "wv", d, dk));
  }
  out_w_ = linear_w("out.w", cfg_.d_model, d);
  out_b_ = linear_b("out.b", cfg_.d_model, d);
  const std::size_t flat_in = cfg_.patch().n_patches() * d;
  flat_w_ = linear_w("flat.w", flat_in, cfg_.t_pred);
  flat_b_ = linear_b("flat.b", flat_in, cfg_.t_pred);
  const std::size_t widths[4] = {4, cfg_.fuse_hidden1, cfg_.fuse_hidden2, cfg_.n_beams};
  for (std::size_t i = 0; i < 3; ++i) {
    fuse_w_.push_back(linear_w("fuse" + std::to_string(i) + ".w", widths[i], widths[i + 1]));
    fuse_b_.push_back(linear_b("fuse" + std::to_string(i) + ".b", widths[i], widths[i + 1]));
  }
}

std::size_t BeamLlmModel::total_params() const { return params_.total_count() + backbone_->params().total_count(); }

void BeamLlmModel::clear_cache() {
  head_cache_.clear();
  tail_cache_.clear();
  cache_bytes_ = 0;
}

ContextPtr BeamLlmModel::head_context(std::size_t channel) {
  if (head_cache_.empty()) head_cache_.resize(4);
  if (head_cache_[channel]) return head_cache_[channel];
  // the head text does not depend on values, any window of the right size works
  const PromptText p = build_prompt(Tensor({4, cfg_.t_hist}), channel, cfg_.t_pred);
  const auto ids = tokenize(p.dataset_desc + " " + p.task_desc + " " + p.stats_label, cfg_.backbone.vocab_size);
  ContextPtr ctx = backbone_->encode_prefix(backbone_->embed_tokens(ids));
  if (cache_enabled_) head_cache_[channel] = ctx;
  return ctx;
}

ContextPtr BeamLlmModel::prompt_context(const Tensor& history, std::size_t channel) {
  const PromptText p = build_prompt(history, channel, cfg_.t_pred);
  const auto ids = tokenize(p.stats_values, cfg_.backbone.vocab_size);
  std::vector<std::size_t> key;
  if (cache_enabled_) {
    key.reserve(ids.size() + 1);
    key.push_back(channel);
    key.insert(key.end(), ids.begin(), ids.end());
    if (auto it = tail_cache_.find(key); it != tail_cache_.end()) return it->second;
  }
  ContextPtr ctx = backbone_->encode_prefix(backbone_->embed_tokens(ids), head_context(channel));
  if (cache_enabled_ && ctx && cache_bytes_ + ctx->bytes() <= cfg_.cache_budget_bytes) {
    cache_bytes_ += ctx->bytes();
    tail_cache_.emplace(std::move(key), ctx);
  }
  return ctx;
}

Var BeamLlmModel::prototypes(Tape& tape) {
  return matmul(transpose(tape.param(*proto_w_)), tape.param(backbone_->embedding()));
}

Var BeamLlmModel::reprogram(Tape& tape, Var embedded, Var protos) {
  std::vector<Var> q, k, v;
  for (std::size_t h = 0; h < cfg_.n_heads; ++h) {
    q.push_back(tape.param(*wq_[h]));
    k.push_back(tape.param(*wk_[h]));
    v.push_back(tape.param(*wv_[h]));
  }
  Var Q = matmul(embedded, concat_cols(q));
  Var K = matmul(protos, concat_cols(k));
  Var V = matmul(protos, concat_cols(v));
  Var Z = multi_head_attention(Q, K, V, cfg_.n_heads);
  return linear(Z, tape.param(*out_w_), tape.param(*out_b_));
}

Tensor BeamLlmModel::attention_weights(const Tensor& embedded, std::size_t head) {
  if (head >= cfg_.n_heads) throw Error(ErrorKind::index, "attention_weights: head out of range");
  Tape tape(false);
  const Tensor protos = prototypes(tape).value();
  const Tensor q = matmul(embedded, wq_[head]->value);
  const Tensor k = matmul(protos, wk_[head]->value);
  Tensor s = matmul(q, transpose(k));
  const double scl = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model / cfg_.n_heads));
  for (auto& x : s.data()) x *= scl;
  return softmax(s, 1);
}

Var BeamLlmModel::forward_batch(Tape& tape, std::span<const Tensor* const> histories) {
  const std::size_t B = histories.size();
  if (B == 0) throw Error(ErrorKind::dimension, "forward_batch: empty batch");
  const PatchConfig pc = cfg_.patch();
  const std::size_t np = pc.n_patches();
  const std::size_t groups = 4 * B;

  Tensor patches({groups * np, cfg_.patch_len});
  std::vector<ContextPtr> contexts;
  if (cfg_.pap) contexts.reserve(groups);
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor& h = *histories[b];
    if (h.rank() != 2 || h.dim(0) != 4 || h.dim(1) != cfg_.t_hist) {
      throw Error(ErrorKind::dimension, "forward_batch: expected 4 x " + std::to_string(cfg_.t_hist) + " history, got " +
                                            shape_str(h.shape()));
    }
    require_finite(h, "forward_batch input");
    for (std::size_t c = 0; c < 4; ++c) {
      RevinStats st;
      const auto norm = revin_normalize(std::span<const double>(h.raw() + c * cfg_.t_hist, cfg_.t_hist), st);
      const Tensor p = patchify(norm, pc);
      std::copy(p.data().begin(), p.data().end(), patches.raw() + (b * 4 + c) * np * cfg_.patch_len);
      if (cfg_.pap) contexts.push_back(prompt_context(h, c));
    }
  }

  Var emb = linear(tape.constant(std::move(patches)), tape.param(*patch_w_), tape.param(*patch_b_));
  Var rep = reprogram(tape, emb, prototypes(tape));
  Var out = backbone_->forward(tape, rep, np, contexts);
  Var flat = reshape(out, {groups, np * cfg_.backbone.hidden});
  Var per_step = linear(flat, tape.param(*flat_w_), tape.param(*flat_b_));  // (B*4) x T_pred
  Var x = block_transpose(per_step, B);                                     // (B*T_pred) x 4
  for (std::size_t i = 0; i < 3; ++i) {
    x = linear(x, tape.param(*fuse_w_[i]), tape.param(*fuse_b_[i]));
    if (i < 2) x = relu(x);
  }
  return x;
}

nlohmann::json BeamLlmModel::describe() const { return {{"kind", "beamllm"}, {"config", to_json(cfg_)}}; }

void BeamLlmModel::save(const std::filesystem::path& path) const {
  write_bytes(path, encode_checkpoint(std::vector<const ParameterSet*>{&params_, &backbone_->params()}, describe()));
}

void BeamLlmModel::load(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  if (ck.meta.value("kind", "") != "beamllm") throw Error(ErrorKind::load, path.string() + " is not a beamllm checkpoint");
  if (ck.meta.at("config") != to_json(cfg_)) {
    throw Error(ErrorKind::load, "checkpoint architecture differs from the model: " + ck.meta.at("config").dump());
  }
  load_parameters(ck, std::vector<ParameterSet*>{&params_, &backbone_->params()});
  clear_cache();
}

}  // namespace beamllm
