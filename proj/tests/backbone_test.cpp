#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "beamllm/backbone.hpp"
#include "beamllm/error.hpp"
#include "beamllm/random.hpp"

using namespace beamllm;

namespace {

BackboneConfig small() {
  BackboneConfig cfg;
  cfg.vocab_size = 50;
  cfg.hidden = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.max_seq = 32;
  cfg.seed = 3;
  return cfg;
}

Tensor random_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  return normal_init({n, d}, 1.0, rng);
}

Tensor stack(const Tensor& a, const Tensor& b) {
  Tensor out({a.dim(0) + b.dim(0), a.dim(1)});
  std::copy(a.data().begin(), a.data().end(), out.raw());
  std::copy(b.data().begin(), b.data().end(), out.raw() + a.size());
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Backbone, SameSeedBitIdenticalAndAllFrozen) {
  Backbone a(small());
  Backbone b(small());
  ASSERT_EQ(a.params().size(), b.params().size());
  auto it = b.params().begin();
  for (const Parameter& p : a.params()) {
    EXPECT_FALSE(p.trainable) << p.name;
    EXPECT_EQ(p.value, it->value) << p.name;
    ++it;
  }
  EXPECT_EQ(a.params().trainable_count(), 0u);
  BackboneConfig other = small();
  other.seed = 4;
  Backbone c(other);
  EXPECT_NE(c.embedding_table(), a.embedding_table());
}

TEST(Backbone, DefaultParameterCount) {
  Backbone bb(BackboneConfig{});
  const std::size_t d = 128;
  const std::size_t per_layer = 4 * d + (d * 3 * d + 3 * d) + (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
  EXPECT_EQ(bb.params().total_count(), 1000 * d + 256 * d + 4 * per_layer + 2 * d);
}

TEST(Backbone, ShapeAndCausality) {
  Backbone bb(small());
  Tensor x = random_rows(6, 16, 1);
  const Tensor y = bb.forward(x);
  EXPECT_EQ(y.shape(), (Shape{6, 16}));
  EXPECT_EQ(bb.forward(x), y);
  for (std::size_t c = 0; c < 16; ++c) x(4, c) += 0.1 * static_cast<double>(c % 5);
  const Tensor z = bb.forward(x);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 16; ++c) EXPECT_EQ(z(r, c), y(r, c));
  }
  EXPECT_GT(max_abs_diff(z, y), 1e-6);
}

TEST(Backbone, PrefixMatchesFullSequence) {
  Backbone bb(small());
  const Tensor prefix = random_rows(5, 16, 2);
  const Tensor body = random_rows(3, 16, 3);
  const Tensor full = bb.forward(stack(prefix, body));
  const Tensor tail = bb.forward_with_prefix(prefix, body);
  ASSERT_EQ(tail.shape(), (Shape{3, 16}));
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(tail(r, c), full(5 + r, c), 1e-12);
  }
  // a prefix encoded in two stacked segments is the same context
  const Tensor head = random_rows(2, 16, 2);
  const Tensor rest = random_rows(3, 16, 5);
  const ContextPtr chained = bb.encode_prefix(rest, bb.encode_prefix(head));
  EXPECT_EQ(chained->total_length, 5u);
  Tape tape(false);
  const ContextPtr ctx[1] = {chained};
  const Tensor via_chain = bb.forward(tape, tape.constant(body), 3, ctx).value();
  const Tensor direct = bb.forward_with_prefix(stack(head, rest), body);
  EXPECT_LT(max_abs_diff(via_chain, direct), 1e-12);
}

TEST(Backbone, PrefixConditioningIsLive) {
  Backbone bb(small());
  const Tensor body = random_rows(3, 16, 9);
  const Tensor p1 = random_rows(4, 16, 10);
  const Tensor p2 = random_rows(4, 16, 11);
  EXPECT_GT(max_abs_diff(bb.forward_with_prefix(p1, body), bb.forward_with_prefix(p2, body)), 1e-6);
  EXPECT_EQ(bb.forward_with_prefix(Tensor({0, 16}), body), bb.forward(body));
}

TEST(Backbone, GroupsAreIndependent) {
  Backbone bb(small());
  const Tensor a = random_rows(3, 16, 20);
  const Tensor b = random_rows(3, 16, 21);
  const ContextPtr pa = bb.encode_prefix(random_rows(2, 16, 22));
  const ContextPtr pb = bb.encode_prefix(random_rows(4, 16, 23));
  Tape tape(false);
  const ContextPtr ctx[2] = {pa, pb};
  const Tensor both = bb.forward(tape, tape.constant(stack(a, b)), 3, ctx).value();
  Tape t1(false), t2(false);
  const ContextPtr ca[1] = {pa};
  const ContextPtr cb[1] = {pb};
  const Tensor ya = bb.forward(t1, t1.constant(a), 3, ca).value();
  const Tensor yb = bb.forward(t2, t2.constant(b), 3, cb).value();
  for (std::size_t i = 0; i < ya.size(); ++i) EXPECT_NEAR(both[i], ya[i], 1e-13);
  for (std::size_t i = 0; i < yb.size(); ++i) EXPECT_NEAR(both[ya.size() + i], yb[i], 1e-13);
}

TEST(Backbone, LengthOverflow) {
  Backbone bb(small());
  try {
    bb.forward_with_prefix(random_rows(30, 16, 1), random_rows(3, 16, 2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::length);
  }
}

TEST(Backbone, SaveLoadAndMismatch) {
  Backbone a(small());
  const auto path = std::filesystem::temp_directory_path() / "beamllm_backbone.ckpt";
  a.save(path);
  BackboneConfig cfg = small();
  cfg.seed = 99;
  Backbone b(cfg);
  b.load(path);
  EXPECT_EQ(b.embedding_table(), a.embedding_table());
  BackboneConfig wide = small();
  wide.hidden = 32;
  Backbone c(wide);
  try {
    c.load(path);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::load);
  }
  std::filesystem::remove(path);
}

TEST(Tokenizer, Examples) {
  EXPECT_TRUE(tokenize("", 1000).empty());
  const auto beam = tokenize("beam beam", 1000);
  ASSERT_EQ(beam.size(), 2u);
  EXPECT_EQ(beam[0], beam[1]);
  EXPECT_EQ(tokenize("Beam, BEAM!", 1000), beam);
  // FNV-1a 64 reference values
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(tokenize("a", 1000), (std::vector<std::size_t>{1 + 0xaf63dc4c8601ec8cULL % 999}));
  for (std::size_t id : tokenize("the quick brown fox jumps 0 1 2 3.14", 7)) {
    EXPECT_GE(id, 1u);
    EXPECT_LT(id, 7u);
  }
}

TEST(Tokenizer, EmbedTokens) {
  Backbone bb(small());
  const std::vector<std::size_t> ids{3, 7, 3};
  const Tensor e = bb.embed_tokens(ids);
  EXPECT_EQ(e.row(0), e.row(2));
  EXPECT_EQ(e.row(1), bb.embedding_table().row(7));
  EXPECT_EQ(bb.embed_tokens(std::vector<std::size_t>{}).shape(), (Shape{0, 16}));
  EXPECT_THROW(bb.embed_tokens(std::vector<std::size_t>{50}), Error);
}
