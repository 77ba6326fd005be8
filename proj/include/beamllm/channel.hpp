#pragma once

#include <complex>
#include <cstddef>
#include <vector>

#include "beamllm/random.hpp"

namespace beamllm {

using cdouble = std::complex<double>;
using CVector = std::vector<cdouble>;

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

struct BeamCodebook {
  std::size_t n_antennas = 0;
  std::size_t n_beams = 0;
  std::vector<CVector> vectors;
  std::vector<double> beam_sines;  // grid point of each beam
};

struct ChannelSnapshot {
  CVector h;
  long t = 0;
};

struct RxConfig {
  double tx_power = 1.0;
  double noise_var = 0.0;
  void validate() const;
};

/// Oversampled DFT grid in sine space: sin(theta_m) = -1 + (2m + 1) / M.
/// M < N is rejected unless allow_undersampled is set.
BeamCodebook dft_codebook(std::size_t n_antennas, std::size_t n_beams, bool allow_undersampled = false);

/// Unnormalized half-wavelength ULA response, element n = exp(-j*pi*n*sine).
CVector steering_vector(std::size_t n_antennas, double sine);

/// Line-of-sight channel with amplitude ref_gain / distance. The sine is taken
/// between the bs->ue direction and array_axis (the array lies along that axis).
ChannelSnapshot los_channel(std::size_t n_antennas, const Vec3& bs_pos, const Vec3& ue_pos, const Vec3& array_axis,
                            double ref_gain, long t = 0);

double beamforming_gain(const CVector& h, const CVector& f);
std::vector<double> beam_gains(const CVector& h, const BeamCodebook& cb);

/// Argmax of |h^H f_m|^2, lowest index on ties. All-zero h gives 0.
std::size_t optimal_beam(const CVector& h, const BeamCodebook& cb);

/// y = h^H f s + n, n ~ CN(0, noise_var).
cdouble simulate_rx(const CVector& h, const CVector& f, cdouble s, double noise_var, Rng& rng);

}  // namespace beamllm
