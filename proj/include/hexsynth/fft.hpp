#pragma once

#include <complex>
#include <span>
#include <vector>

namespace hexsynth {

using Complex = std::complex<double>;

// Thin wrappers over FFTW real transforms. Plans are cached per size and the
// cache is guarded, so these may be called from several threads.

// Forward real FFT of `in` (length n) into n/2+1 bins.
void rfft(std::span<const double> in, std::span<Complex> out);
std::vector<Complex> rfft(std::span<const double> in);

// Unnormalized inverse: out[t] = sum over the full Hermitian spectrum of
// in[k] e^{+2 pi i k t / n}. Divide by n for the true inverse.
void irfft_unnormalized(std::span<const Complex> in, std::span<double> out);

// Smallest size >= n whose only prime factors are 2, 3 and 5.
std::size_t good_fft_size(std::size_t n);

// Linear convolution of a and b, length a.size() + b.size() - 1.
std::vector<double> fft_convolve(std::span<const double> a, std::span<const double> b);

}  // namespace hexsynth
