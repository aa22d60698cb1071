#pragma once

// Complex baseband primitives: FIR filtering, DFTs, filter frequency
// responses and the epsilon distortion measure.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "rfprint/errors.hpp"

namespace rfprint {

using Complex = std::complex<double>;

namespace detail {

inline bool all_finite(std::span<const Complex> xs) {
  return std::all_of(xs.begin(), xs.end(), [](const Complex& c) {
    return std::isfinite(c.real()) && std::isfinite(c.imag());
  });
}

}  // namespace detail

/// N >= 1 finite complex baseband samples.
class IQFrame {
 public:
  IQFrame() = default;
  explicit IQFrame(std::vector<Complex> samples) : samples_(std::move(samples)) {
    detail::require(!samples_.empty(), "IQFrame: empty frame");
    detail::require(detail::all_finite(samples_), "IQFrame: non-finite sample");
  }

  std::size_t size() const noexcept { return samples_.size(); }
  bool empty() const noexcept { return samples_.empty(); }
  const Complex& operator[](std::size_t i) const { return samples_[i]; }
  std::span<const Complex> samples() const noexcept { return samples_; }
  const std::vector<Complex>& vec() const noexcept { return samples_; }
  auto begin() const noexcept { return samples_.begin(); }
  auto end() const noexcept { return samples_.end(); }

  friend bool operator==(const IQFrame&, const IQFrame&) = default;

 private:
  std::vector<Complex> samples_;
};

/// M >= 1 complex taps; phi[0] multiplies the current sample.
class FirFilter {
 public:
  FirFilter() : taps_{Complex{1.0, 0.0}} {}
  explicit FirFilter(std::vector<Complex> taps) : taps_(std::move(taps)) {
    detail::require(!taps_.empty(), "FirFilter: needs at least one tap");
    detail::require(detail::all_finite(taps_), "FirFilter: non-finite tap");
  }

  static FirFilter identity(std::size_t num_taps = 1) {
    detail::require(num_taps >= 1, "FirFilter: needs at least one tap");
    std::vector<Complex> taps(num_taps, Complex{});
    taps[0] = 1.0;
    return FirFilter(std::move(taps));
  }

  std::size_t size() const noexcept { return taps_.size(); }
  const Complex& operator[](std::size_t k) const { return taps_[k]; }
  std::span<const Complex> taps() const noexcept { return taps_; }
  const std::vector<Complex>& vec() const noexcept { return taps_; }

  bool is_identity() const {
    if (taps_[0] != Complex{1.0, 0.0}) return false;
    return std::all_of(taps_.begin() + 1, taps_.end(),
                       [](const Complex& c) { return c == Complex{}; });
  }

  friend bool operator==(const FirFilter&, const FirFilter&) = default;

 private:
  std::vector<Complex> taps_;
};

/// DFT coefficients, one per bin, in natural order (bin 0 first).
class SpectrumFrame {
 public:
  SpectrumFrame() = default;
  explicit SpectrumFrame(std::vector<Complex> bins) : bins_(std::move(bins)) {}

  std::size_t size() const noexcept { return bins_.size(); }
  bool empty() const noexcept { return bins_.empty(); }
  const Complex& operator[](std::size_t i) const { return bins_[i]; }
  Complex& operator[](std::size_t i) { return bins_[i]; }
  std::span<const Complex> bins() const noexcept { return bins_; }
  const std::vector<Complex>& vec() const noexcept { return bins_; }

 private:
  std::vector<Complex> bins_;
};

/// Zero-padded causal convolution, output truncated to the input length:
///   out[n] = sum_k taps[k] * x[n - k],   x[m < 0] = 0.
inline std::vector<Complex> convolve_truncated(std::span<const Complex> x,
                                               std::span<const Complex> taps) {
  const std::size_t n = x.size();
  const std::size_t m = taps.size();
  std::vector<Complex> out(n, Complex{});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t kmax = std::min(m, i + 1);
    double re = 0.0;
    double im = 0.0;
    for (std::size_t k = 0; k < kmax; ++k) {
      const Complex& p = taps[k];
      const Complex& s = x[i - k];
      // (pR + j pI)(xR + j xI), expanded in real arithmetic
      re += p.real() * s.real() - p.imag() * s.imag();
      im += p.real() * s.imag() + p.imag() * s.real();
    }
    out[i] = {re, im};
  }
  return out;
}

inline IQFrame apply_fir(const IQFrame& x, const FirFilter& phi) {
  detail::require(!x.empty(), "apply_fir: empty frame");
  return IQFrame(convolve_truncated(x.samples(), phi.taps()));
}

/// Full linear convolution of two tap sets, length M + K - 1.
inline FirFilter compose(const FirFilter& a, const FirFilter& b) {
  std::vector<Complex> out(a.size() + b.size() - 1, Complex{});
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) out[i + j] += a[i] * b[j];
  return FirFilter(std::move(out));
}

/// Circular convolution of two equal-length sequences.
inline std::vector<Complex> circular_convolve(std::span<const Complex> x,
                                              std::span<const Complex> y) {
  detail::require(x.size() == y.size() && !x.empty(),
                  "circular_convolve: length mismatch");
  const std::size_t n = x.size();
  std::vector<Complex> out(n, Complex{});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < n; ++k) out[i] += y[k] * x[(i + n - k) % n];
  return out;
}

namespace detail {

inline bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 transform. sign = -1 forward, +1 inverse (unscaled).
inline void fft_pow2(std::vector<Complex>& a, int sign) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * std::numbers::pi / static_cast<double>(len);
    const std::size_t half = len / 2;
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < half; ++k) {
        // exact twiddles per index keep round-off independent of n
        const double t = ang * static_cast<double>(k);
        const Complex w{std::cos(t), std::sin(t)};
        const Complex u = a[i + k];
        const Complex v = a[i + k + half] * w;
        a[i + k] = u + v;
        a[i + k + half] = u - v;
      }
    }
  }
}

inline std::vector<Complex> dft_any(std::span<const Complex> x, int sign) {
  const std::size_t n = x.size();
  std::vector<Complex> out(x.begin(), x.end());
  if (is_pow2(n)) {
    fft_pow2(out, sign);
    return out;
  }
  for (std::size_t k = 0; k < n; ++k) {
    Complex acc{};
    for (std::size_t t = 0; t < n; ++t) {
      const double ang = sign * 2.0 * std::numbers::pi *
                         static_cast<double>((k * t) % n) / static_cast<double>(n);
      acc += x[t] * Complex{std::cos(ang), std::sin(ang)};
    }
    out[k] = acc;
  }
  return out;
}

}  // namespace detail

/// Unnormalised forward transform X[k] = sum_n x[n] e^{-j 2 pi k n / N}.
inline std::vector<Complex> dft(std::span<const Complex> x) {
  detail::require(!x.empty(), "dft: empty input");
  return detail::dft_any(x, -1);
}

/// Inverse transform with the 1/N factor, so idft(dft(x)) == x.
inline std::vector<Complex> idft(std::span<const Complex> spectrum) {
  detail::require(!spectrum.empty(), "idft: empty input");
  auto out = detail::dft_any(spectrum, +1);
  const double scale = 1.0 / static_cast<double>(out.size());
  for (auto& c : out) c *= scale;
  return out;
}

inline SpectrumFrame dft(const IQFrame& x) { return SpectrumFrame(dft(x.samples())); }
inline IQFrame idft(const SpectrumFrame& s) { return IQFrame(idft(s.bins())); }

/// DFT of the taps zero-padded to n_bins.
inline SpectrumFrame frequency_response(const FirFilter& phi, std::size_t n_bins) {
  detail::require(n_bins >= phi.size(), "frequency_response: n_bins must be >= number of taps");
  std::vector<Complex> padded(n_bins, Complex{});
  std::copy(phi.vec().begin(), phi.vec().end(), padded.begin());
  return SpectrumFrame(dft(padded));
}

/// Bins used for epsilon by default: one 64-point OFDM symbol.
inline constexpr std::size_t kEpsilonBins = 64;

/// max over bins of |Phi(w) - 1|. Zero for the identity filter; a single tap
/// phi_0 reduces to |phi_0 - 1|. Uses max(n_bins, M) bins.
inline double epsilon_of(const FirFilter& phi, std::size_t n_bins = kEpsilonBins) {
  const auto resp = frequency_response(phi, std::max(n_bins, phi.size()));
  double eps = 0.0;
  for (const auto& b : resp.bins()) eps = std::max(eps, std::abs(b - 1.0));
  return eps;
}

/// Shrinks phi toward the identity so that epsilon_of(result) <= eps_max.
/// Scales Phi(w) - 1 uniformly across bins, which in the tap domain is
/// identity + c (phi - identity) and keeps the tap count unchanged.
inline FirFilter project_epsilon(const FirFilter& phi, double eps_max,
                                 std::size_t n_bins = kEpsilonBins) {
  detail::require(eps_max >= 0.0, "project_epsilon: eps_max must be non-negative");
  const double eps = epsilon_of(phi, n_bins);
  // slack of a few ulps keeps the projection idempotent under rounding
  if (eps <= eps_max * (1.0 + 8 * std::numeric_limits<double>::epsilon())) return phi;
  const double c = eps_max / eps;
  std::vector<Complex> taps = phi.vec();
  for (std::size_t k = 0; k < taps.size(); ++k) {
    const Complex id = k == 0 ? Complex{1.0, 0.0} : Complex{};
    taps[k] = id + c * (taps[k] - id);
  }
  return FirFilter(std::move(taps));
}

}  // namespace rfprint
