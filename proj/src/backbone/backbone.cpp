#include "beamllm/backbone.hpp"

#include <algorithm>
#include <cctype>

#include "beamllm/checkpoint.hpp"
#include "beamllm/error.hpp"
#include "beamllm/json_fields.hpp"
#include "beamllm/random.hpp"

namespace beamllm {

namespace {

constexpr double kInitStd = 0.02;
constexpr double kLnEps = 1e-5;

bool is_token_char(unsigned char c) {
  if (c >= 0x80) return true;
  return std::isalnum(c) != 0;
}

Tensor position_rows(const Tensor& wpe, std::size_t start, std::size_t count) {
  const std::size_t d = wpe.cols();
  Tensor out({count, d});
  std::copy_n(wpe.raw() + start * d, count * d, out.raw());
  return out;
}

AttentionContext layer_context(const PrefixContext* ctx, std::size_t layer) {
  std::vector<const PrefixContext*> chain;
  for (const PrefixContext* c = ctx; c != nullptr; c = c->base.get()) {
    if (c->length > 0) chain.push_back(c);
  }
  AttentionContext out;
  for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
    out.key_segments.push_back(&(*it)->keys[layer]);
    out.value_segments.push_back(&(*it)->values[layer]);
  }
  return out;
}

Tensor copy_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  const std::size_t rows = x.rank() == 2 ? x.dim(0) : 1;
  Tensor out({rows, count});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.raw() + r * x.cols() + begin, count, out.raw() + r * count);
  }
  return out;
}

}  // namespace

void BackboneConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::config, "backbone." + msg); };
  if (vocab_size < 2) fail("vocab_size must be >= 2");
  if (hidden == 0 || n_heads == 0 || hidden % n_heads != 0) fail("hidden must be a positive multiple of n_heads");
  if (n_layers == 0) fail("n_layers must be >= 1");
  if (max_seq == 0) fail("max_seq must be >= 1");
}

BackboneConfig backbone_config_from_json(const nlohmann::json& j) {
  BackboneConfig cfg;
  FieldReader r(j, "backbone");
  r.read("vocab_size", cfg.vocab_size);
  r.read("hidden", cfg.hidden);
  r.read("n_layers", cfg.n_layers);
  r.read("n_heads", cfg.n_heads);
  r.read("max_seq", cfg.max_seq);
  r.read("seed", cfg.seed);
  r.finish();
  cfg.validate();
  return cfg;
}

nlohmann::json to_json(const BackboneConfig& cfg) {
  return {{"vocab_size", cfg.vocab_size}, {"hidden", cfg.hidden},   {"n_layers", cfg.n_layers},
          {"n_heads", cfg.n_heads},       {"max_seq", cfg.max_seq}, {"seed", cfg.seed}};
}

std::uint64_t fnv1a64(std::string_view bytes) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::vector<std::size_t> tokenize(std::string_view text, std::size_t vocab_size) {
  if (vocab_size < 2) throw Error(ErrorKind::config, "tokenize: vocab_size must be >= 2");
  std::vector<std::size_t> ids;
  std::string token;
  auto flush = [&] {
    if (token.empty()) return;
    ids.push_back(1 + static_cast<std::size_t>(fnv1a64(token) % (vocab_size - 1)));
    token.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_token_char(c)) {
      token.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
    } else {
      flush();
    }
  }
  flush();
  return ids;
}

std::size_t PrefixContext::bytes() const noexcept {
  std::size_t n = 0;
  for (const auto& k : keys) n += k.size();
  for (const auto& v : values) n += v.size();
  return n * sizeof(double) + sizeof(PrefixContext);
}

Backbone::Backbone(const BackboneConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  const std::size_t d = cfg_.hidden;
  auto weight = [&](const std::string& name, Shape shape) {
    return &params_.add("backbone." + name, normal_init(shape, kInitStd, rng), false);
  };
  auto constant = [&](const std::string& name, std::size_t n, double v) {
    return &params_.add("backbone." + name, Tensor({n}, v), false);
  };
  wte_ = weight("wte", {cfg_.vocab_size, d});
  wpe_ = weight("wpe", {cfg_.max_seq, d});
  for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "h" + std::to_string(l) + ".";
    Layer L{};
    L.ln1_g = constant(p + "ln1.gain", d, 1.0);
    L.ln1_b = constant(p + "ln1.bias", d, 0.0);
    L.attn_w = weight(p + "attn.w", {d, 3 * d});
    L.attn_b = constant(p + "attn.b", 3 * d, 0.0);
    L.proj_w = weight(p + "proj.w", {d, d});
    L.proj_b = constant(p + "proj.b", d, 0.0);
    L.ln2_g = constant(p + "ln2.gain", d, 1.0);
    L.ln2_b = constant(p + "ln2.bias", d, 0.0);
    L.fc_w = weight(p + "fc.w", {d, 4 * d});
    L.fc_b = constant(p + "fc.b", 4 * d, 0.0);
    L.fc2_w = weight(p + "fc2.w", {4 * d, d});
    L.fc2_b = constant(p + "fc2.b", d, 0.0);
    layers_.push_back(L);
  }
  lnf_g_ = constant("lnf.gain", d, 1.0);
  lnf_b_ = constant("lnf.bias", d, 0.0);
}

Tensor Backbone::embed_tokens(std::span<const std::size_t> ids) const {
  const std::size_t d = cfg_.hidden;
  Tensor out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= cfg_.vocab_size) {
      throw Error(ErrorKind::index, "token id " + std::to_string(ids[i]) + " >= vocab " + std::to_string(cfg_.vocab_size));
    }
    std::copy_n(wte_->value.raw() + ids[i] * d, d, out.raw() + i * d);
  }
  return out;
}

ContextPtr Backbone::encode_prefix(const Tensor& rows, ContextPtr base) const {
  const std::size_t d = cfg_.hidden;
  const std::size_t n = rows.rank() == 2 ? rows.dim(0) : 0;
  if (rows.rank() != 2 || rows.dim(1) != d) {
    throw Error(ErrorKind::dimension, "encode_prefix: expected L x " + std::to_string(d) + ", got " + shape_str(rows.shape()));
  }
  if (n == 0) return base;
  const std::size_t start = base ? base->total_length : 0;
  if (start + n > cfg_.max_seq) {
    throw Error(ErrorKind::length, "prefix of " + std::to_string(start + n) + " positions exceeds max_seq " +
                                       std::to_string(cfg_.max_seq));
  }
  auto ctx = std::make_shared<PrefixContext>();
  ctx->base = base;
  ctx->length = n;
  ctx->total_length = start + n;

  Tape tape(false);
  Var x = add(tape.constant(rows), tape.constant(position_rows(wpe_->value, start, n)));
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& L = layers_[l];
    Var h = layer_norm(x, tape.constant(L.ln1_g->value), tape.constant(L.ln1_b->value), kLnEps);
    Var qkv = linear(h, tape.constant(L.attn_w->value), tape.constant(L.attn_b->value));
    ctx->keys.push_back(copy_cols(qkv.value(), d, d));
    ctx->values.push_back(copy_cols(qkv.value(), 2 * d, d));
    std::vector<AttentionContext> ac;
    if (base) ac.push_back(layer_context(base.get(), l));
    Var a = causal_self_attention(qkv, cfg_.n_heads, n, std::move(ac));
    x = add(x, linear(a, tape.constant(L.proj_w->value), tape.constant(L.proj_b->value)));
    Var m = layer_norm(x, tape.constant(L.ln2_g->value), tape.constant(L.ln2_b->value), kLnEps);
    m = gelu(linear(m, tape.constant(L.fc_w->value), tape.constant(L.fc_b->value)));
    x = add(x, linear(m, tape.constant(L.fc2_w->value), tape.constant(L.fc2_b->value)));
  }
  return ctx;
}

Var Backbone::forward(Tape& tape, Var x, std::size_t group_len, std::span<const ContextPtr> contexts) {
  const std::size_t d = cfg_.hidden;
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || xv.dim(1) != d) {
    throw Error(ErrorKind::dimension, "backbone forward: expected n x " + std::to_string(d) + ", got " + shape_str(xv.shape()));
  }
  const std::size_t rows = xv.dim(0);
  if (group_len == 0 || rows % group_len != 0) throw Error(ErrorKind::dimension, "backbone forward: bad group length");
  const std::size_t groups = rows / group_len;
  if (!contexts.empty() && contexts.size() != groups) {
    throw Error(ErrorKind::dimension, "backbone forward: one context per group required");
  }

  Tensor pos({rows, d});
  for (std::size_t g = 0; g < groups; ++g) {
    const std::size_t start = contexts.empty() || !contexts[g] ? 0 : contexts[g]->total_length;
    if (start + group_len > cfg_.max_seq) {
      throw Error(ErrorKind::length, "sequence of " + std::to_string(start + group_len) + " positions exceeds max_seq " +
                                         std::to_string(cfg_.max_seq));
    }
    std::copy_n(wpe_->value.raw() + start * d, group_len * d, pos.raw() + g * group_len * d);
  }
  const bool any_context = std::any_of(contexts.begin(), contexts.end(), [](const ContextPtr& c) { return c != nullptr; });
  auto keep = any_context ? std::make_shared<std::vector<ContextPtr>>(contexts.begin(), contexts.end()) : nullptr;

  Var h = add(x, tape.constant(std::move(pos)));
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& L = layers_[l];
    Var a = layer_norm(h, tape.param(*L.ln1_g), tape.param(*L.ln1_b), kLnEps);
    Var qkv = linear(a, tape.param(*L.attn_w), tape.param(*L.attn_b));
    std::vector<AttentionContext> ac;
    if (any_context) {
      ac.reserve(groups);
      for (std::size_t g = 0; g < groups; ++g) ac.push_back(layer_context(contexts[g].get(), l));
    }
    a = causal_self_attention(qkv, cfg_.n_heads, group_len, std::move(ac), keep);
    h = add(h, linear(a, tape.param(*L.proj_w), tape.param(*L.proj_b)));
    Var m = layer_norm(h, tape.param(*L.ln2_g), tape.param(*L.ln2_b), kLnEps);
    m = gelu(linear(m, tape.param(*L.fc_w), tape.param(*L.fc_b)));
    h = add(h, linear(m, tape.param(*L.fc2_w), tape.param(*L.fc2_b)));
  }
  return layer_norm(h, tape.param(*lnf_g_), tape.param(*lnf_b_), kLnEps);
}

Tensor Backbone::forward(const Tensor& x) {
  Tape tape(false);
  return forward(tape, tape.constant(x), x.dim(0), {}).value();
}

Tensor Backbone::forward_with_prefix(const Tensor& prefix, const Tensor& body) {
  if (body.rank() != 2 || body.dim(0) == 0) throw Error(ErrorKind::dimension, "forward_with_prefix: empty body");
  const ContextPtr ctx = encode_prefix(prefix);
  Tape tape(false);
  const ContextPtr contexts[1] = {ctx};
  return forward(tape, tape.constant(body), body.dim(0), contexts).value();
}

void Backbone::save(const std::filesystem::path& path) const {
  save_checkpoint(path, params_, {{"kind", "backbone"}, {"config", to_json(cfg_)}});
}

void Backbone::load(const std::filesystem::path& path) {
  const Checkpoint ck = read_checkpoint(path);
  BackboneConfig stored;
  try {
    stored = backbone_config_from_json(ck.meta.at("config"));
  } catch (const std::exception& e) {
    throw Error(ErrorKind::load, std::string("backbone checkpoint has no usable config: ") + e.what());
  }
  stored.seed = cfg_.seed;
  if (!(stored == cfg_)) throw Error(ErrorKind::load, "backbone checkpoint config does not match the requested shape");
  load_parameters(ck, params_);
}

}  // namespace beamllm
