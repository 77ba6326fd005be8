#include <cmath>
#include <filesystem>
#include <vector>

#include <gtest/gtest.h>

#include "beamllm/baselines.hpp"
#include "beamllm/error.hpp"
#include "beamllm/gradcheck.hpp"
#include "beamllm/random.hpp"

using namespace beamllm;

namespace {

Tensor random_window(std::size_t t, Rng& rng) {
  Tensor h({4, t});
  for (double& v : h.data()) v = rng.uniform();
  return h;
}

RecurrentConfig small(CellKind kind) {
  RecurrentConfig c;
  c.kind = kind;
  c.t_hist = 3;
  c.t_pred = 2;
  c.hidden = 4;
  c.n_layers = 2;
  c.n_beams = 5;
  c.seed = 3;
  return c;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Straight loops over the stored weights, written independently of the tape.
std::vector<std::vector<double>> reference_logits(RecurrentModel& m, const Tensor& hist) {
  const RecurrentConfig& c = m.config();
  ParameterSet& p = m.trainable();
  const std::string pre = cell_name(c.kind) + ".";
  const std::size_t H = c.hidden;
  auto affine = [](const Tensor& w, const Tensor& b, const std::vector<double>& x) {
    std::vector<double> y(w.dim(1));
    for (std::size_t j = 0; j < y.size(); ++j) {
      y[j] = b[j];
      for (std::size_t i = 0; i < x.size(); ++i) y[j] += x[i] * w(i, j);
    }
    return y;
  };
  std::vector<std::vector<double>> hs(c.n_layers, std::vector<double>(H, 0.0)), cs = hs;
  auto advance = [&](std::vector<double> x) {
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const std::string n = pre + "layer" + std::to_string(l) + ".";
      const auto gi = affine(p.get(n + "w_ih").value, p.get(n + "b_ih").value, x);
      const auto gh = affine(p.get(n + "w_hh").value, p.get(n + "b_hh").value, hs[l]);
      std::vector<double> h(H);
      for (std::size_t k = 0; k < H; ++k) {
        if (c.kind == CellKind::rnn) {
          h[k] = std::tanh(gi[k] + gh[k]);
        } else if (c.kind == CellKind::gru) {
          const double r = sig(gi[k] + gh[k]);
          const double z = sig(gi[H + k] + gh[H + k]);
          const double nn = std::tanh(gi[2 * H + k] + r * gh[2 * H + k]);
          h[k] = (1.0 - z) * nn + z * hs[l][k];
        } else {
          const double i = sig(gi[k] + gh[k]);
          const double f = sig(gi[H + k] + gh[H + k]);
          const double g = std::tanh(gi[2 * H + k] + gh[2 * H + k]);
          const double o = sig(gi[3 * H + k] + gh[3 * H + k]);
          cs[l][k] = f * cs[l][k] + i * g;
          h[k] = o * std::tanh(cs[l][k]);
        }
      }
      hs[l] = h;
      x = h;
    }
    return x;
  };
  auto input = [&](std::size_t t) {
    std::vector<double> col(4);
    for (std::size_t f = 0; f < 4; ++f) col[f] = hist(f, t);
    return affine(p.get(pre + "input.w").value, p.get(pre + "input.b").value, col);
  };
  for (std::size_t t = 0; t < c.t_hist; ++t) advance(input(t));
  std::vector<std::vector<double>> out;
  for (std::size_t j = 0; j < c.t_pred; ++j) {
    out.push_back(affine(p.get(pre + "readout.w").value, p.get(pre + "readout.b").value, advance(input(c.t_hist - 1))));
  }
  return out;
}

}  // namespace

TEST(Recurrent, LayerParameterCounts) {
  EXPECT_EQ(recurrent_layer_params(CellKind::lstm, 32, 32), 8448u);
  EXPECT_EQ(recurrent_layer_params(CellKind::gru, 32, 32), 6336u);
  EXPECT_EQ(recurrent_layer_params(CellKind::rnn, 32, 32), 2112u);
  // gate-count ratio
  EXPECT_EQ(3 * recurrent_layer_params(CellKind::lstm, 32, 32), 4 * recurrent_layer_params(CellKind::gru, 32, 32));
  EXPECT_EQ(recurrent_layer_params(CellKind::lstm, 32, 32), 4 * recurrent_layer_params(CellKind::rnn, 32, 32));
}

TEST(Recurrent, DefaultModelCounts) {
  for (CellKind k : {CellKind::rnn, CellKind::gru, CellKind::lstm}) {
    RecurrentConfig c;
    c.kind = k;
    RecurrentModel m(c);
    const std::size_t expect = (4 * 32 + 32) + 4 * recurrent_layer_params(k, 32, 32) + (32 * 32 + 32);
    EXPECT_EQ(m.total_params(), expect);
    EXPECT_EQ(m.trainable_params(), expect);
    EXPECT_EQ(m.trainable().get(cell_name(k) + ".input.w").value.size() + 32, 160u);
  }
}

TEST(Recurrent, OutputShapes) {
  Rng rng(1);
  for (auto [th, tp] : {std::pair<std::size_t, std::size_t>{8, 5}, {3, 10}}) {
    RecurrentConfig c;
    c.t_hist = th;
    c.t_pred = tp;
    RecurrentModel m(c);
    const BeamPrediction p = m.predict(random_window(th, rng));
    EXPECT_EQ(p.n_beams(), 32u);
    EXPECT_EQ(p.horizon(), tp);
  }
}

TEST(Recurrent, ZeroWeightsGiveUniformProbabilities) {
  RecurrentModel m(small(CellKind::lstm));
  for (Parameter& p : m.trainable()) p.value.fill(0.0);
  Rng rng(2);
  const Tensor probs = m.predict(random_window(3, rng)).probabilities();
  for (double v : probs.data()) EXPECT_NEAR(v, 1.0 / 5.0, 1e-15);
}

TEST(Recurrent, MatchesLoopReference) {
  Rng rng(4);
  for (CellKind k : {CellKind::rnn, CellKind::gru, CellKind::lstm}) {
    RecurrentModel m(small(k));
    std::vector<Tensor> ws;
    for (int i = 0; i < 3; ++i) ws.push_back(random_window(3, rng));
    std::vector<const Tensor*> ptrs;
    for (const auto& w : ws) ptrs.push_back(&w);
    Tape tape(false);
    const Tensor logits = m.forward_batch(tape, ptrs).value();
    for (std::size_t b = 0; b < ws.size(); ++b) {
      const auto ref = reference_logits(m, ws[b]);
      for (std::size_t j = 0; j < 2; ++j) {
        for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(logits(b * 2 + j, c), ref[j][c], 1e-12) << cell_name(k);
      }
    }
  }
}

TEST(Recurrent, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  for (CellKind k : {CellKind::rnn, CellKind::gru, CellKind::lstm}) {
    RecurrentModel m(small(k));
    std::vector<Tensor> ws;
    for (int i = 0; i < 3; ++i) ws.push_back(random_window(3, rng));
    std::vector<const Tensor*> ptrs;
    for (const auto& w : ws) ptrs.push_back(&w);
    const std::vector<std::size_t> targets{0, 4, 2, 2, 1, 3};
    const auto r = check_parameter_gradients(m.trainable(), [&](Tape& tape) {
      return scale(cross_entropy(m.forward_batch(tape, ptrs), targets), 1.0 / 3.0);
    });
    EXPECT_LE(r.max_rel_error, 1e-4) << cell_name(k) << " " << r.worst;
    EXPECT_EQ(r.n_checked, m.trainable().total_count());
  }
}

TEST(Recurrent, SaveLoadAndKindCheck) {
  const auto dir = std::filesystem::temp_directory_path();
  RecurrentModel a(small(CellKind::gru));
  a.save(dir / "gru.ckpt");
  RecurrentConfig c = small(CellKind::gru);
  c.seed = 99;
  RecurrentModel b(small(CellKind::gru));
  for (Parameter& p : b.trainable()) p.value.fill(0.0);
  b.load(dir / "gru.ckpt");
  Rng rng(6);
  const Tensor h = random_window(3, rng);
  EXPECT_EQ(a.predict(h).scores, b.predict(h).scores);
  RecurrentModel l(small(CellKind::lstm));
  EXPECT_THROW(l.load(dir / "gru.ckpt"), Error);
  RecurrentModel other_seed(c);
  EXPECT_THROW(other_seed.load(dir / "gru.ckpt"), Error);
}

TEST(Recurrent, ConfigJson) {
  const RecurrentConfig c = recurrent_config_from_json({{"kind", "gru"}, {"hidden", 8}});
  EXPECT_EQ(c.kind, CellKind::gru);
  EXPECT_EQ(c.hidden, 8u);
  EXPECT_EQ(recurrent_config_from_json(to_json(c)).hidden, 8u);
  EXPECT_THROW(recurrent_config_from_json({{"kind", "transformer"}}), Error);
  EXPECT_THROW(recurrent_config_from_json({{"widht", 3}}), Error);
  EXPECT_THROW(recurrent_config_from_json({{"n_layers", 0}}), Error);
}
