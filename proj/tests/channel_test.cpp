#include <cmath>
#include <complex>
#include <numbers>

#include <gtest/gtest.h>

#include "beamllm/channel.hpp"
#include "beamllm/error.hpp"

using namespace beamllm;

namespace {

CVector random_channel(Rng& rng, std::size_t n) {
  CVector h(n);
  for (auto& v : h) v = {rng.normal(), rng.normal()};
  return h;
}

// Independent sweep: accumulates the inner product by explicit real arithmetic.
std::size_t sweep_argmax(const CVector& h, const BeamCodebook& cb) {
  std::size_t best = 0;
  double best_gain = -1.0;
  for (std::size_t m = 0; m < cb.n_beams; ++m) {
    double re = 0.0;
    double im = 0.0;
    for (std::size_t n = 0; n < h.size(); ++n) {
      const double hr = h[n].real(), hi = -h[n].imag();
      const double fr = cb.vectors[m][n].real(), fi = cb.vectors[m][n].imag();
      re += hr * fr - hi * fi;
      im += hr * fi + hi * fr;
    }
    const double g = re * re + im * im;
    if (g > best_gain) {
      best_gain = g;
      best = m;
    }
  }
  return best;
}

}  // namespace

TEST(Codebook, SingleAntenna) {
  const BeamCodebook cb = dft_codebook(1, 5);
  for (const auto& f : cb.vectors) {
    ASSERT_EQ(f.size(), 1u);
    EXPECT_NEAR(std::abs(f[0] - cdouble{1.0, 0.0}), 0.0, 1e-15);
  }
}

TEST(Codebook, CriticalGramIsIdentity) {
  for (std::size_t n : {2u, 4u, 16u}) {
    const BeamCodebook cb = dft_codebook(n, n);
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = 0; b < n; ++b) {
        cdouble ip{0.0, 0.0};
        for (std::size_t k = 0; k < n; ++k) ip += std::conj(cb.vectors[a][k]) * cb.vectors[b][k];
        EXPECT_NEAR(std::abs(ip - cdouble(a == b ? 1.0 : 0.0)), 0.0, 1e-12);
      }
    }
  }
}

TEST(Codebook, AdjacentOverlapsAreEqual) {
  const BeamCodebook cb = dft_codebook(16, 32);
  // Dirichlet kernel at a sine offset of 2/M = 1/16: |sin(N*pi*d/2) / (N sin(pi*d/2))|
  const double d = 2.0 / 32.0;
  const double expected = std::abs(std::sin(16 * std::numbers::pi * d / 2) / (16 * std::sin(std::numbers::pi * d / 2)));
  for (std::size_t m = 0; m + 1 < cb.n_beams; ++m) {
    cdouble ip{0.0, 0.0};
    for (std::size_t k = 0; k < 16; ++k) ip += std::conj(cb.vectors[m][k]) * cb.vectors[m + 1][k];
    EXPECT_NEAR(std::abs(ip), expected, 1e-12);
  }
  for (const auto& f : cb.vectors) {
    double norm = 0.0;
    for (auto v : f) norm += std::norm(v);
    EXPECT_NEAR(norm, 1.0, 1e-12);
  }
}

TEST(Codebook, UndersampledRejectedUnlessAllowed) {
  try {
    dft_codebook(16, 8);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::config);
  }
  EXPECT_EQ(dft_codebook(16, 8, true).n_beams, 8u);
}

TEST(Steering, Examples) {
  for (auto v : steering_vector(4, 0.0)) EXPECT_NEAR(std::abs(v - cdouble{1, 0}), 0.0, 1e-15);
  const CVector a = steering_vector(2, 1.0);
  EXPECT_NEAR(std::abs(a[1] - cdouble{-1, 0}), 0.0, 1e-15);
  for (double s : {-1.0, -0.3, 0.7}) {
    double total = 0.0;
    for (auto v : steering_vector(16, s)) total += std::norm(v);
    EXPECT_NEAR(total, 16.0, 1e-12);
  }
  EXPECT_THROW(steering_vector(4, 1.01), Error);
}

TEST(LosChannel, BroadsideAndDistance) {
  const Vec3 bs{0, 0, 0};
  const Vec3 axis{1, 0, 0};
  const ChannelSnapshot s = los_channel(8, bs, {0, 1, 0}, axis, 1.0);
  for (auto v : s.h) EXPECT_NEAR(std::abs(v - cdouble{1, 0}), 0.0, 1e-15);

  auto norm = [](const CVector& h) {
    double t = 0.0;
    for (auto v : h) t += std::norm(v);
    return std::sqrt(t);
  };
  const double n1 = norm(los_channel(8, bs, {3, 4, 0}, axis, 2.0).h);
  const double n2 = norm(los_channel(8, bs, {6, 8, 0}, axis, 2.0).h);
  EXPECT_NEAR(n2, n1 / 2.0, 1e-12);
  try {
    los_channel(8, bs, bs, axis, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::geometry);
  }
}

TEST(LosChannel, GridDirectionsSelectTheirBeam) {
  const BeamCodebook cb = dft_codebook(16, 32);
  for (std::size_t m = 0; m < cb.n_beams; ++m) {
    const double s = cb.beam_sines[m];
    const Vec3 ue{10.0 * s, 10.0 * std::sqrt(1.0 - s * s), 0.0};
    EXPECT_EQ(optimal_beam(los_channel(16, {0, 0, 0}, ue, {1, 0, 0}, 1.0).h, cb), m);
  }
}

TEST(Gain, Examples) {
  const CVector h{{1, 2}, {-0.5, 0.3}, {2, -1}};
  double hn2 = 0.0;
  for (auto v : h) hn2 += std::norm(v);
  CVector f = h;
  for (auto& v : f) v /= std::sqrt(hn2);
  EXPECT_NEAR(beamforming_gain(h, f), hn2, 1e-12);

  const double r = 1.0 / std::sqrt(2.0);
  EXPECT_NEAR(beamforming_gain({{1, 0}, {1, 0}}, {{r, 0}, {-r, 0}}), 0.0, 1e-15);
  EXPECT_THROW(beamforming_gain({{1, 0}}, {{1, 0}, {0, 0}}), Error);

  const cdouble rot = std::polar(1.0, 0.77);
  CVector hr = h;
  for (auto& v : hr) v *= rot;
  const CVector g{{0.1, 0.2}, {0.3, -0.4}, {0.5, 0.0}};
  EXPECT_NEAR(beamforming_gain(hr, g), beamforming_gain(h, g), 1e-12);
}

TEST(OptimalBeam, Examples) {
  const BeamCodebook cb = dft_codebook(16, 32);
  CVector h = cb.vectors[5];
  for (auto& v : h) v *= 3.0;
  EXPECT_EQ(optimal_beam(h, cb), 5u);
  EXPECT_EQ(optimal_beam(CVector(16), cb), 0u);

  Rng rng(42);
  for (int i = 0; i < 1000; ++i) {
    const CVector rh = random_channel(rng, 16);
    const std::size_t m = optimal_beam(rh, cb);
    EXPECT_EQ(m, sweep_argmax(rh, cb));
    CVector scaled = rh;
    const cdouble c{rng.normal(), rng.normal()};
    for (auto& v : scaled) v *= c;
    EXPECT_EQ(optimal_beam(scaled, cb), m);
  }
}

TEST(SimulateRx, NoiselessNoiseMomentsAndDeterminism) {
  const BeamCodebook cb = dft_codebook(16, 32);
  Rng rng(7);
  const CVector h = random_channel(rng, 16);
  const cdouble clean = simulate_rx(h, cb.vectors[3], {1, 0}, 0.0, rng);
  cdouble ip{0, 0};
  for (std::size_t n = 0; n < 16; ++n) ip += std::conj(h[n]) * cb.vectors[3][n];
  EXPECT_EQ(clean, ip);

  const double var = 0.25;
  Rng noise(99);
  double acc = 0.0;
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) acc += std::norm(simulate_rx(h, cb.vectors[3], {1, 0}, var, noise) - ip);
  EXPECT_NEAR(acc / draws, var, 0.05 * var);

  Rng a(5), b(5);
  for (int i = 0; i < 20; ++i) {
    EXPECT_EQ(simulate_rx(h, cb.vectors[0], {1, 0}, var, a), simulate_rx(h, cb.vectors[0], {1, 0}, var, b));
  }
  EXPECT_THROW(simulate_rx(h, cb.vectors[0], {1, 0}, -1.0, a), Error);
}
