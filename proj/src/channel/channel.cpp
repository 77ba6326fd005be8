#include "beamllm/channel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "beamllm/error.hpp"

namespace beamllm {

void RxConfig::validate() const {
  if (!(tx_power > 0.0) || !std::isfinite(tx_power)) {
    throw Error(ErrorKind::config, "tx_power must be positive");
  }
  if (!(noise_var >= 0.0) || !std::isfinite(noise_var)) {
    throw Error(ErrorKind::domain, "noise_var must be non-negative");
  }
}

CVector steering_vector(std::size_t n_antennas, double sine) {
  if (!(sine >= -1.0 && sine <= 1.0)) {
    throw Error(ErrorKind::domain, "steering sine outside [-1, 1]: " + std::to_string(sine));
  }
  CVector a(n_antennas);
  for (std::size_t n = 0; n < n_antennas; ++n) {
    a[n] = std::polar(1.0, -std::numbers::pi * static_cast<double>(n) * sine);
  }
  return a;
}

BeamCodebook dft_codebook(std::size_t n_antennas, std::size_t n_beams, bool allow_undersampled) {
  if (n_antennas == 0 || n_beams == 0) throw Error(ErrorKind::config, "codebook needs N >= 1 and M >= 1");
  if (n_beams < n_antennas && !allow_undersampled) {
    throw Error(ErrorKind::config, "undersampled codebook: M=" + std::to_string(n_beams) +
                                       " < N=" + std::to_string(n_antennas));
  }
  BeamCodebook cb;
  cb.n_antennas = n_antennas;
  cb.n_beams = n_beams;
  cb.vectors.reserve(n_beams);
  cb.beam_sines.reserve(n_beams);
  const double norm = 1.0 / std::sqrt(static_cast<double>(n_antennas));
  const double m_total = static_cast<double>(n_beams);
  for (std::size_t m = 0; m < n_beams; ++m) {
    const double sine = -1.0 + (2.0 * static_cast<double>(m) + 1.0) / m_total;
    CVector f = steering_vector(n_antennas, sine);
    for (auto& v : f) v *= norm;
    cb.vectors.push_back(std::move(f));
    cb.beam_sines.push_back(sine);
  }
  return cb;
}

ChannelSnapshot los_channel(std::size_t n_antennas, const Vec3& bs_pos, const Vec3& ue_pos, const Vec3& array_axis,
                            double ref_gain, long t) {
  const double dx = ue_pos.x - bs_pos.x;
  const double dy = ue_pos.y - bs_pos.y;
  const double dz = ue_pos.z - bs_pos.z;
  const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
  if (!(d > 0.0)) throw Error(ErrorKind::geometry, "UE and BS positions coincide");
  const double axis_norm = std::sqrt(array_axis.x * array_axis.x + array_axis.y * array_axis.y +
                                     array_axis.z * array_axis.z);
  if (!(axis_norm > 0.0)) throw Error(ErrorKind::geometry, "array axis has zero length");
  double sine = (dx * array_axis.x + dy * array_axis.y + dz * array_axis.z) / (d * axis_norm);
  sine = std::clamp(sine, -1.0, 1.0);
  ChannelSnapshot snap;
  snap.t = t;
  snap.h = steering_vector(n_antennas, sine);
  const double g = ref_gain / d;
  for (auto& v : snap.h) v *= g;
  return snap;
}

double beamforming_gain(const CVector& h, const CVector& f) {
  if (h.size() != f.size()) {
    throw Error(ErrorKind::dimension, "gain: channel length " + std::to_string(h.size()) + " vs beam length " +
                                          std::to_string(f.size()));
  }
  cdouble acc{0.0, 0.0};
  for (std::size_t n = 0; n < h.size(); ++n) acc += std::conj(h[n]) * f[n];
  return std::norm(acc);
}

std::vector<double> beam_gains(const CVector& h, const BeamCodebook& cb) {
  std::vector<double> out;
  out.reserve(cb.n_beams);
  for (const auto& f : cb.vectors) out.push_back(beamforming_gain(h, f));
  return out;
}

std::size_t optimal_beam(const CVector& h, const BeamCodebook& cb) {
  std::size_t best = 0;
  double best_gain = -1.0;
  for (std::size_t m = 0; m < cb.n_beams; ++m) {
    const double g = beamforming_gain(h, cb.vectors[m]);
    if (g > best_gain) {
      best_gain = g;
      best = m;
    }
  }
  return best;
}

cdouble simulate_rx(const CVector& h, const CVector& f, cdouble s, double noise_var, Rng& rng) {
  if (!(noise_var >= 0.0)) throw Error(ErrorKind::domain, "noise variance must be non-negative");
  if (h.size() != f.size()) throw Error(ErrorKind::dimension, "simulate_rx: channel/beam length mismatch");
  cdouble y{0.0, 0.0};
  for (std::size_t n = 0; n < h.size(); ++n) y += std::conj(h[n]) * f[n];
  y *= s;
  if (noise_var > 0.0) {
    const double sd = std::sqrt(noise_var / 2.0);
    const double re = rng.normal(0.0, sd);
    const double im = rng.normal(0.0, sd);
    y += cdouble{re, im};
  }
  return y;
}

}  // namespace beamllm
