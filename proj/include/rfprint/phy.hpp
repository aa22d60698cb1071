#pragma once

// Minimal OFDM physical layer: QPSK over an 802.11a-like subcarrier plan, a
// known training symbol for channel estimation, synthetic transmitter
// impairments, multipath channels, receiver-side FIR compensation and link
// statistics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rfprint/errors.hpp"
#include "rfprint/iqcore.hpp"

namespace rfprint::phy {

namespace detail {
using rfprint::detail::require;
}  // namespace detail

using Rng = std::mt19937_64;
using Bits = std::vector<std::uint8_t>;

struct OfdmConfig {
  std::size_t fft_size = 64;
  std::size_t data_subcarriers = 48;
  std::size_t pilot_subcarriers = 4;
  std::size_t cp_len = 16;
  std::size_t symbols_per_example = 6;
  /// Frames per second used to express throughput in kbit/s.
  double nominal_frame_rate = 200.0;

  std::size_t used_subcarriers() const { return data_subcarriers + pilot_subcarriers; }
  std::size_t symbol_length() const { return fft_size + cp_len; }
  std::size_t bits_per_symbol() const { return 2 * data_subcarriers; }
  std::size_t bits_per_example() const { return bits_per_symbol() * symbols_per_example; }
  /// Payload I/Q values per classifier example (48 * 6 = 288 by default).
  std::size_t payload_length() const { return data_subcarriers * symbols_per_example; }
  std::size_t frame_length(std::size_t data_symbols) const {
    return (1 + data_symbols) * symbol_length();
  }
  std::size_t example_frame_length() const { return frame_length(symbols_per_example); }

  void validate() const {
    detail::require(fft_size >= 4, "OfdmConfig: fft_size too small");
    detail::require(data_subcarriers >= 1, "OfdmConfig: needs data subcarriers");
    // DC stays empty
    detail::require(used_subcarriers() + 1 <= fft_size,
                    "OfdmConfig: data + pilot + guard subcarriers exceed fft_size");
    detail::require(symbols_per_example >= 1, "OfdmConfig: symbols_per_example must be >= 1");
    detail::require(nominal_frame_rate > 0.0, "OfdmConfig: nominal_frame_rate must be positive");
  }

  /// Linear channel + FIR memory must fit inside the cyclic prefix.
  void validate_link(std::size_t channel_taps, std::size_t fir_taps) const {
    validate();
    detail::require(cp_len + 1 >= channel_taps + fir_taps,
                    "OfdmConfig: cp_len must be >= channel taps + FIR taps - 1 (cp_len=" +
                        std::to_string(cp_len) + ", channel taps=" +
                        std::to_string(channel_taps) + ", FIR taps=" + std::to_string(fir_taps) +
                        ")");
  }

  friend bool operator==(const OfdmConfig&, const OfdmConfig&) = default;
};

/// FNV-1a digest of the layout parameters, hex encoded.
inline std::string digest(const OfdmConfig& cfg) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFFu;
      h *= 1099511628211ULL;
    }
  };
  mix(cfg.fft_size);
  mix(cfg.data_subcarriers);
  mix(cfg.pilot_subcarriers);
  mix(cfg.cp_len);
  mix(cfg.symbols_per_example);
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 0; i < 16; ++i) out[15 - i] = hex[(h >> (4 * i)) & 0xFu];
  return out;
}

/// Subcarrier plan. Used bins sit symmetrically around DC (negative
/// frequencies first); pilots are spread evenly over the used bins.
struct SubcarrierMap {
  std::vector<std::size_t> used;   // natural-order bin indices, low to high frequency
  std::vector<std::size_t> data;
  std::vector<std::size_t> pilot;

  explicit SubcarrierMap(const OfdmConfig& cfg) {
    cfg.validate();
    const std::size_t n = cfg.fft_size;
    const std::size_t u = cfg.used_subcarriers();
    const std::size_t neg = u / 2;
    const std::size_t pos = u - neg;
    for (std::size_t i = neg; i >= 1; --i) used.push_back(n - i);
    for (std::size_t i = 1; i <= pos; ++i) used.push_back(i);
    std::vector<bool> is_pilot(u, false);
    for (std::size_t p = 0; p < cfg.pilot_subcarriers; ++p) {
      const std::size_t idx = (2 * p + 1) * u / (2 * cfg.pilot_subcarriers);
      is_pilot[idx] = true;
    }
    for (std::size_t i = 0; i < u; ++i) (is_pilot[i] ? pilot : data).push_back(used[i]);
  }
};

namespace detail {

// x^7 + x^4 + 1 scrambler sequence, all-ones seed.
inline std::vector<double> pn_signs(std::size_t count) {
  std::vector<double> out;
  out.reserve(count);
  unsigned state = 0x7F;
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned bit = ((state >> 6) ^ (state >> 3)) & 1u;
    state = ((state << 1) | bit) & 0x7Fu;
    out.push_back(bit ? -1.0 : 1.0);
  }
  return out;
}

inline double pilot_value(std::size_t p, std::size_t count) {
  return (count > 1 && p + 1 == count) ? -1.0 : 1.0;
}

inline std::vector<Complex> ofdm_symbol_time(const std::vector<Complex>& spectrum,
                                             std::size_t cp_len) {
  const double scale = std::sqrt(static_cast<double>(spectrum.size()));
  auto t = rfprint::idft(spectrum);
  for (auto& c : t) c *= scale;
  std::vector<Complex> out;
  out.reserve(t.size() + cp_len);
  out.insert(out.end(), t.end() - static_cast<std::ptrdiff_t>(cp_len), t.end());
  out.insert(out.end(), t.begin(), t.end());
  return out;
}

// Unitary DFT of one symbol (CP stripped) starting at `offset`.
inline std::vector<Complex> symbol_spectrum(std::span<const Complex> rx, std::size_t offset,
                                            const OfdmConfig& cfg) {
  const auto body = rx.subspan(offset + cfg.cp_len, cfg.fft_size);
  auto spec = rfprint::dft(body);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.fft_size));
  for (auto& c : spec) c *= scale;
  return spec;
}

inline std::size_t data_symbol_count(const IQFrame& rx, const OfdmConfig& cfg) {
  const std::size_t len = cfg.symbol_length();
  if (rx.size() < 2 * len || rx.size() % len != 0)
    throw EstimationFailure("frame length " + std::to_string(rx.size()) +
                            " does not hold a training symbol plus whole data symbols");
  return rx.size() / len - 1;
}

}  // namespace detail

/// Known training symbol: +-1 on every used bin.
inline std::vector<Complex> training_spectrum(const OfdmConfig& cfg) {
  const SubcarrierMap map(cfg);
  const auto signs = detail::pn_signs(map.used.size());
  std::vector<Complex> spec(cfg.fft_size, Complex{});
  for (std::size_t i = 0; i < map.used.size(); ++i) spec[map.used[i]] = signs[i];
  return spec;
}

/// Gray-mapped unit-energy QPSK point.
inline Complex qpsk_map(std::uint8_t b0, std::uint8_t b1) {
  const double a = 1.0 / std::numbers::sqrt2;
  return {b0 ? -a : a, b1 ? -a : a};
}

/// Symbols carried by the data subcarriers, in transmission order.
inline std::vector<Complex> qpsk_payload(const Bits& bits) {
  detail::require(bits.size() % 2 == 0, "qpsk_payload: odd bit count");
  std::vector<Complex> out;
  out.reserve(bits.size() / 2);
  for (std::size_t i = 0; i < bits.size(); i += 2) out.push_back(qpsk_map(bits[i], bits[i + 1]));
  return out;
}

/// Training symbol followed by one OFDM symbol per 2*data_subcarriers bits.
inline IQFrame modulate(const Bits& bits, const OfdmConfig& cfg) {
  const SubcarrierMap map(cfg);
  const std::size_t per_symbol = cfg.bits_per_symbol();
  detail::require(!bits.empty() && bits.size() % per_symbol == 0,
                  "modulate: bit count " + std::to_string(bits.size()) +
                      " is not a multiple of " + std::to_string(per_symbol));
  const std::size_t n_sym = bits.size() / per_symbol;
  const auto payload = qpsk_payload(bits);

  std::vector<Complex> frame;
  frame.reserve(cfg.frame_length(n_sym));
  auto pre = detail::ofdm_symbol_time(training_spectrum(cfg), cfg.cp_len);
  frame.insert(frame.end(), pre.begin(), pre.end());
  for (std::size_t s = 0; s < n_sym; ++s) {
    std::vector<Complex> spec(cfg.fft_size, Complex{});
    for (std::size_t d = 0; d < map.data.size(); ++d)
      spec[map.data[d]] = payload[s * map.data.size() + d];
    for (std::size_t p = 0; p < map.pilot.size(); ++p)
      spec[map.pilot[p]] = detail::pilot_value(p, map.pilot.size());
    auto sym = detail::ofdm_symbol_time(spec, cfg.cp_len);
    frame.insert(frame.end(), sym.begin(), sym.end());
  }
  return IQFrame(std::move(frame));
}

inline Bits random_bits(std::size_t count, Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  Bits out(count);
  for (auto& b : out) b = coin(rng) ? 1 : 0;
  return out;
}

/// Filters the data symbols of a frame (the training symbol is sent
/// unfiltered so the receiver's channel estimate excludes the filter).
inline IQFrame transmit_filtered(const IQFrame& frame, const FirFilter& phi,
                                 const OfdmConfig& cfg) {
  const std::size_t start = cfg.symbol_length();
  detail::require(frame.size() > start, "transmit_filtered: frame has no data symbols");
  std::vector<Complex> out = frame.vec();
  const auto filtered = convolve_truncated(frame.samples().subspan(start), phi.taps());
  std::copy(filtered.begin(), filtered.end(), out.begin() + static_cast<std::ptrdiff_t>(start));
  return IQFrame(std::move(out));
}

// ---------------------------------------------------------------------------
// Transmitter impairments

struct DeviceProfile {
  int device_id = 0;
  double iq_gain_imbalance = 1.0;   // linear ratio of Q to I branch gain
  double iq_phase_imbalance = 0.0;  // radians
  Complex dc_offset{};
  double cfo = 0.0;                 // cycles per sample
  double phase_noise_std = 0.0;     // radians per sample
  std::array<double, 3> pa_coeffs{1.0, 0.0, 0.0};  // a1 x + a3 |x|^2 x + a5 |x|^4 x

  static DeviceProfile neutral(int id = 0) {
    DeviceProfile p;
    p.device_id = id;
    return p;
  }

  void validate() const {
    detail::require(iq_gain_imbalance > 0.0, "DeviceProfile: iq_gain_imbalance must be > 0");
    detail::require(phase_noise_std >= 0.0, "DeviceProfile: phase_noise_std must be >= 0");
  }

  friend bool operator==(const DeviceProfile&, const DeviceProfile&) = default;
};

/// PA polynomial -> I/Q imbalance -> DC offset -> CFO -> phase-noise walk.
inline IQFrame apply_impairments(const IQFrame& x, const DeviceProfile& dev, Rng& rng) {
  dev.validate();
  std::vector<Complex> y(x.begin(), x.end());
  const auto [a1, a3, a5] = dev.pa_coeffs;
  if (a1 != 1.0 || a3 != 0.0 || a5 != 0.0) {
    for (auto& s : y) {
      const double p = std::norm(s);
      s *= a1 + a3 * p + a5 * p * p;
    }
  }
  if (dev.iq_gain_imbalance != 1.0 || dev.iq_phase_imbalance != 0.0) {
    const double g = dev.iq_gain_imbalance;
    const double c = std::cos(dev.iq_phase_imbalance);
    const double sn = std::sin(dev.iq_phase_imbalance);
    for (auto& s : y) s = {s.real(), g * (s.imag() * c + s.real() * sn)};
  }
  if (dev.dc_offset != Complex{})
    for (auto& s : y) s += dev.dc_offset;
  if (dev.cfo != 0.0) {
    for (std::size_t n = 0; n < y.size(); ++n)
      y[n] *= std::polar(1.0, 2.0 * std::numbers::pi * dev.cfo * static_cast<double>(n));
  }
  if (dev.phase_noise_std > 0.0) {
    std::normal_distribution<double> step(0.0, dev.phase_noise_std);
    double theta = 0.0;
    for (auto& s : y) {
      theta += step(rng);
      s *= std::polar(1.0, theta);
    }
  }
  return IQFrame(std::move(y));
}

// ---------------------------------------------------------------------------
// Channel

struct ChannelModel {
  std::vector<Complex> taps_h{Complex{1.0, 0.0}};
  double noise_std = 0.0;  // per real component
  std::uint64_t seed = 0;

  void validate() const {
    detail::require(!taps_h.empty(), "ChannelModel: needs at least one tap");
    detail::require(noise_std >= 0.0, "ChannelModel: noise_std must be >= 0");
  }
};

/// z = h (*) x + w, truncated to the input length.
inline IQFrame apply_channel(const IQFrame& x, const ChannelModel& ch, Rng& rng) {
  ch.validate();
  auto y = convolve_truncated(x.samples(), ch.taps_h);
  if (ch.noise_std > 0.0) {
    std::normal_distribution<double> w(0.0, ch.noise_std);
    for (auto& s : y) {
      const double re = w(rng);
      const double im = w(rng);
      s += Complex{re, im};
    }
  }
  return IQFrame(std::move(y));
}

inline IQFrame apply_channel(const IQFrame& x, const ChannelModel& ch) {
  Rng rng(ch.seed);
  return apply_channel(x, ch, rng);
}

/// Statistics of a block-fading multipath channel: exponential power-delay
/// profile with a Rician line-of-sight component on the first tap.
struct FadingProfile {
  std::size_t num_taps = 4;
  double decay = 1.5;         // taps; power of tap k proportional to exp(-k / decay)
  double k_factor_db = 15.0;  // line-of-sight to scattered power ratio

  void validate() const {
    detail::require(num_taps >= 1, "FadingProfile: needs at least one tap");
    detail::require(decay > 0.0, "FadingProfile: decay must be positive");
  }
};

/// One unit-average-power channel realization.
inline std::vector<Complex> draw_channel_taps(const FadingProfile& prof, Rng& rng) {
  prof.validate();
  std::vector<double> pdp(prof.num_taps);
  for (std::size_t k = 0; k < pdp.size(); ++k) pdp[k] = std::exp(-static_cast<double>(k) / prof.decay);
  double total = 0.0;
  for (double p : pdp) total += p;
  const double k_lin = std::pow(10.0, prof.k_factor_db / 10.0);
  const double los = std::sqrt(k_lin / (k_lin + 1.0));
  const double nlos = std::sqrt(1.0 / (k_lin + 1.0));
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::vector<Complex> taps(prof.num_taps);
  for (std::size_t k = 0; k < taps.size(); ++k) {
    const double sd = std::sqrt(pdp[k] / total / 2.0);
    const double re = g(rng);
    const double im = g(rng);
    taps[k] = nlos * sd * Complex{re, im};
  }
  taps[0] += los * std::polar(1.0, phase(rng));
  return taps;
}

// ---------------------------------------------------------------------------
// Receiver

/// Least-squares estimate H(w) = Y(w) / P(w) on every used bin of the training
/// symbol. Unused bins are zero.
inline SpectrumFrame estimate_channel(const IQFrame& rx, const OfdmConfig& cfg) {
  const SubcarrierMap map(cfg);
  detail::data_symbol_count(rx, cfg);
  const auto y = detail::symbol_spectrum(rx.samples(), 0, cfg);
  const auto ref = training_spectrum(cfg);
  double energy = 0.0;
  for (auto b : map.used) energy += std::norm(y[b]);
  if (!(energy / static_cast<double>(map.used.size()) > 1e-12))
    throw EstimationFailure("no training symbol energy at the start of the frame");
  std::vector<Complex> h(cfg.fft_size, Complex{});
  for (auto b : map.used) h[b] = y[b] / ref[b];
  return SpectrumFrame(std::move(h));
}

/// Analytic response of a tap set on the OFDM grid, restricted to used bins.
inline SpectrumFrame channel_response(std::span<const Complex> taps, const OfdmConfig& cfg) {
  const SubcarrierMap map(cfg);
  detail::require(taps.size() <= cfg.fft_size, "channel_response: too many taps");
  std::vector<Complex> padded(cfg.fft_size, Complex{});
  std::copy(taps.begin(), taps.end(), padded.begin());
  const auto full = rfprint::dft(padded);
  std::vector<Complex> h(cfg.fft_size, Complex{});
  for (auto b : map.used) h[b] = full[b];
  return SpectrumFrame(std::move(h));
}

namespace detail {

inline IQFrame equalize_impl(const IQFrame& rx, const OfdmConfig& cfg, const SpectrumFrame& h,
                             const SpectrumFrame* phi_resp) {
  const SubcarrierMap map(cfg);
  const std::size_t n_sym = data_symbol_count(rx, cfg);
  detail::require(h.size() == cfg.fft_size, "equalize: channel estimate has wrong size");
  std::vector<Complex> out;
  out.reserve(n_sym * map.data.size());
  for (std::size_t s = 0; s < n_sym; ++s) {
    const auto y = symbol_spectrum(rx.samples(), (s + 1) * cfg.symbol_length(), cfg);
    for (auto b : map.data) {
      Complex denom = h[b];
      if (phi_resp) denom *= (*phi_resp)[b];
      if (denom == Complex{}) throw EstimationFailure("zero channel estimate on a data bin");
      out.push_back(y[b] / denom);
    }
  }
  return IQFrame(std::move(out));
}

}  // namespace detail

/// Per-subcarrier division by H only; the transmit filter stays in the
/// output. Returns data-subcarrier values symbol by symbol (48 * symbols).
inline IQFrame equalized_payload(const IQFrame& rx, const OfdmConfig& cfg,
                                 const SpectrumFrame& h_est) {
  return detail::equalize_impl(rx, cfg, h_est, nullptr);
}

inline constexpr double kCompensationFloor = 1e-3;

/// Divides each data bin by H(w) Phi(w), undoing both channel and transmit
/// filter. Same output layout as equalized_payload.
inline IQFrame compensate_fir(const IQFrame& rx, const FirFilter& phi, const SpectrumFrame& h_est,
                              const OfdmConfig& cfg, double floor = kCompensationFloor) {
  const SubcarrierMap map(cfg);
  const auto resp = frequency_response(phi, cfg.fft_size);
  for (auto b : map.used) {
    if (std::abs(resp[b]) < floor)
      throw IllConditionedFilter("filter response " + std::to_string(std::abs(resp[b])) +
                                 " below floor " + std::to_string(floor) + " on bin " +
                                 std::to_string(b));
  }
  return detail::equalize_impl(rx, cfg, h_est, &resp);
}

/// Hard-decision Gray QPSK demapping.
inline Bits demap_payload(const IQFrame& payload) {
  Bits out;
  out.reserve(2 * payload.size());
  for (const auto& s : payload) {
    out.push_back(s.real() < 0.0 ? 1 : 0);
    out.push_back(s.imag() < 0.0 ? 1 : 0);
  }
  return out;
}

inline Bits demodulate(const IQFrame& rx, const OfdmConfig& cfg, const SpectrumFrame& h_est) {
  return demap_payload(equalized_payload(rx, cfg, h_est));
}

struct LinkReport {
  double ber = 0.0;
  double per = 0.0;
  double throughput_kbps = 0.0;
  std::size_t bits = 0;
  std::size_t bit_errors = 0;
  std::size_t frames = 0;
  std::size_t frame_errors = 0;
};

/// Counts bit and frame errors over consecutive frames of frame_len bits.
/// Throughput is (1 - PER) times the nominal payload rate.
inline LinkReport measure_link(const Bits& tx, const Bits& rx, std::size_t frame_len,
                               double frame_rate = OfdmConfig{}.nominal_frame_rate) {
  detail::require(tx.size() == rx.size(), "measure_link: bit stream length mismatch");
  detail::require(frame_len >= 1 && tx.size() % frame_len == 0 && !tx.empty(),
                  "measure_link: streams must hold whole frames");
  LinkReport r;
  r.bits = tx.size();
  r.frames = tx.size() / frame_len;
  for (std::size_t f = 0; f < r.frames; ++f) {
    std::size_t errs = 0;
    for (std::size_t i = f * frame_len; i < (f + 1) * frame_len; ++i) errs += tx[i] != rx[i];
    r.bit_errors += errs;
    r.frame_errors += errs > 0;
  }
  r.ber = static_cast<double>(r.bit_errors) / static_cast<double>(r.bits);
  r.per = static_cast<double>(r.frame_errors) / static_cast<double>(r.frames);
  r.throughput_kbps = (1.0 - r.per) * static_cast<double>(frame_len) * frame_rate / 1000.0;
  return r;
}

/// Gaussian tail probability.
inline double q_function(double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); }

/// Uncoded Gray QPSK bit error rate over AWGN at the given Es/N0.
inline double qpsk_ber_awgn(double es_n0_db) {
  return q_function(std::sqrt(std::pow(10.0, es_n0_db / 10.0)));
}

// ---------------------------------------------------------------------------
// Link-level simulation with transmit filtering and receiver compensation

struct LinkScenario {
  OfdmConfig ofdm{};
  FadingProfile fading{};
  double noise_std = 0.05;
  std::optional<DeviceProfile> device{};  // impairments, none when empty
  double compensation_floor = kCompensationFloor;
};

/// Produces the transmit filter for frame i.
using FilterSource = std::function<FirFilter(std::size_t frame, Rng& rng)>;

/// Single tap with I in [1-eps, 1+eps] and Q in [-eps, eps].
inline FirFilter random_single_tap(double eps, Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double re = u(rng);
  const double im = u(rng);
  return FirFilter({Complex{1.0 + eps * re, eps * im}});
}

/// Sends `frames` random payloads through filter -> impairments -> fading
/// channel -> estimation -> compensation -> demapping. Bits, channel and
/// noise come from `seed`; the filter source has its own stream, so two runs
/// with the same seed see identical channels and noise (common random
/// numbers across filter settings).
inline LinkReport simulate_link(const LinkScenario& sc, const FilterSource& filters,
                                std::size_t frames, std::uint64_t seed) {
  detail::require(frames >= 1, "simulate_link: needs at least one frame");
  const auto& cfg = sc.ofdm;
  Rng data_rng(seed);
  Rng filter_rng(seed ^ 0x9E3779B97F4A7C15ULL);
  const std::size_t frame_bits = cfg.bits_per_example();
  Bits tx_all;
  Bits rx_all;
  tx_all.reserve(frames * frame_bits);
  rx_all.reserve(frames * frame_bits);
  for (std::size_t f = 0; f < frames; ++f) {
    const auto bits = random_bits(frame_bits, data_rng);
    const auto phi = filters(f, filter_rng);
    cfg.validate_link(sc.fading.num_taps, phi.size());
    auto frame = transmit_filtered(modulate(bits, cfg), phi, cfg);
    if (sc.device) frame = apply_impairments(frame, *sc.device, data_rng);
    ChannelModel ch;
    ch.taps_h = draw_channel_taps(sc.fading, data_rng);
    ch.noise_std = sc.noise_std;
    const auto rx = apply_channel(frame, ch, data_rng);
    const auto h = estimate_channel(rx, cfg);
    const auto rx_bits = demap_payload(compensate_fir(rx, phi, h, cfg, sc.compensation_floor));
    tx_all.insert(tx_all.end(), bits.begin(), bits.end());
    rx_all.insert(rx_all.end(), rx_bits.begin(), rx_bits.end());
  }
  return measure_link(tx_all, rx_all, frame_bits, cfg.nominal_frame_rate);
}

/// Bisection (in log noise) for the noise level giving `target_per` with
/// unfiltered transmissions. PER grows with noise, so the bracket is monotone
/// up to Monte Carlo error.
inline double calibrate_noise_std(LinkScenario sc, double target_per, std::size_t frames,
                                  std::uint64_t seed, double lo = 1e-3, double hi = 1.0,
                                  int iterations = 14) {
  detail::require(target_per > 0.0 && target_per < 1.0, "calibrate_noise_std: target out of range");
  const FilterSource identity = [](std::size_t, Rng&) { return FirFilter::identity(); };
  double llo = std::log(lo);
  double lhi = std::log(hi);
  for (int it = 0; it < iterations; ++it) {
    const double mid = 0.5 * (llo + lhi);
    sc.noise_std = std::exp(mid);
    const auto rep = simulate_link(sc, identity, frames, seed);
    (rep.per < target_per ? llo : lhi) = mid;
  }
  return std::exp(0.5 * (llo + lhi));
}

}  // namespace rfprint::phy
