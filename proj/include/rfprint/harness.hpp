#pragma once

// Experiment orchestration: synthetic device fleets and recordings, the
// classify / optimise / re-classify pipeline, adversary runs, PSA and PBA
// metrics, confusion matrices, CSV reports and paired statistics.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <locale>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include "rfprint/cnn.hpp"
#include "rfprint/errors.hpp"
#include "rfprint/iqcore.hpp"
#include "rfprint/phy.hpp"
#include "rfprint/recording.hpp"
#include "rfprint/wop.hpp"

namespace rfprint::harness {

namespace detail {
using rfprint::detail::require;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}
}  // namespace detail

/// Independent stream seed for (seed, tag, a, b).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t a = 0,
                                 std::uint64_t b = 0) {
  std::uint64_t s = detail::splitmix64(seed ^ detail::splitmix64(tag));
  s = detail::splitmix64(s ^ detail::splitmix64(a + 0x1234567ULL));
  return detail::splitmix64(s ^ detail::splitmix64(b + 0x7654321ULL));
}

enum SeedTag : std::uint64_t {
  kPayloadTag = 1,
  kProfileTag = 2,
  kTrainChannelTag = 3,
  kEvalChannelTag = 4,
  kShiftTag = 5,
  kLinkTag = 6,
  kTrainTag = 7,
  kModelTag = 8,
};

// ---------------------------------------------------------------------------
// Configuration

/// Half-widths (or bounds) of the uniform draws for device impairments.
struct ImpairmentRanges {
  double iq_gain_spread = 0.05;
  double iq_phase_spread = 0.05;  // radians
  double dc_spread = 0.03;
  double cfo_spread = 2e-4;       // cycles per sample
  double phase_noise_min = 2e-3;
  double phase_noise_max = 8e-3;
  double pa_a3_min = -0.10;
  double pa_a3_max = -0.02;
};

struct ExperimentConfig {
  std::size_t num_devices = 5;
  std::size_t slice_size = 25;        // S
  std::size_t slices_per_batch = 12;  // B
  std::size_t num_taps = 5;           // M
  phy::OfdmConfig ofdm{};
  phy::FadingProfile fading{};
  double noise_std = 0.02;

  // train-day capture: several sessions per device, one channel each
  std::size_t train_sessions = 4;
  std::size_t train_examples_per_session = 100;
  double heldout_fraction = 0.2;

  // eval-day capture: new multipath draw plus a per-device CFO perturbation
  // of channel_shift * cfo_shift_std * N(0, 1)
  double channel_shift = 2.0;
  double cfo_shift_std = 1e-4;

  bool neutral_devices = false;  // every device without impairments
  ImpairmentRanges ranges{};

  cnn::ModelSpec model = cnn::ModelSpec::conv_stack(5, 288, 8, 8, 64, 32, 0.2);
  cnn::TrainConfig train{.learning_rate = 1e-3, .epochs = 16};

  std::size_t t_max = 30;
  double eps_max = 0.2;

  double link_noise_std = 0.12;
  std::size_t link_frames = 0;  // 0 skips the link check

  std::optional<double> trigger_period_s{};
  std::optional<double> accuracy_floor{};

  std::uint64_t seed = 1;

  std::size_t input_length() const { return ofdm.payload_length(); }
  std::size_t eval_examples() const { return slice_size * slices_per_batch; }

  void validate() const {
    detail::require(num_devices >= 1, "config: num_devices must be >= 1");
    detail::require(slice_size >= 1 && slices_per_batch >= 1, "config: S and B must be >= 1");
    detail::require(num_taps >= 1, "config: M must be >= 1");
    detail::require(train_sessions >= 1 && train_examples_per_session >= 1,
                    "config: train sessions and examples must be >= 1");
    detail::require(heldout_fraction >= 0.0 && heldout_fraction < 1.0,
                    "config: heldout_fraction must lie in [0, 1)");
    detail::require(noise_std >= 0.0 && link_noise_std >= 0.0, "config: noise must be >= 0");
    detail::require(channel_shift >= 0.0 && cfo_shift_std >= 0.0, "config: shift must be >= 0");
    detail::require(eps_max > 0.0, "config: eps_max must be positive");
    detail::require(ranges.phase_noise_min >= 0.0 && ranges.phase_noise_min <= ranges.phase_noise_max,
                    "config: bad phase noise range");
    detail::require(ranges.pa_a3_min <= ranges.pa_a3_max, "config: bad PA range");
    ofdm.validate();
    fading.validate();
    ofdm.validate_link(fading.num_taps, num_taps);
    train.validate();
    detail::require(model.num_classes == num_devices,
                    "config: model has " + std::to_string(model.num_classes) + " classes for " +
                        std::to_string(num_devices) + " devices");
    detail::require(model.input_width == input_length() && model.input_height == 2 &&
                        model.input_channels == 1,
                    "config: model input must be 1x2x" + std::to_string(input_length()));
    if (trigger_period_s || accuracy_floor) trigger().validate();
  }

  wop::EpochTrigger trigger() const {
    wop::EpochTrigger t;
    if (trigger_period_s) t.period = std::chrono::duration<double>(*trigger_period_s);
    t.accuracy_floor = accuracy_floor;
    return t;
  }

  wop::OptimizeOptions optimize_options() const {
    wop::OptimizeOptions o;
    o.num_taps = num_taps;
    o.t_max = t_max;
    o.eps_max = eps_max;
    return o;
  }
};

/// Compact network of the testbed topology sized for a fleet.
inline cnn::ModelSpec default_model(std::size_t devices, std::size_t width) {
  return cnn::ModelSpec::conv_stack(devices, width, 8, 8, 64, 32, 0.2);
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["num_devices"] = c.num_devices;
  j["slice_size"] = c.slice_size;
  j["slices_per_batch"] = c.slices_per_batch;
  j["num_taps"] = c.num_taps;
  j["ofdm"] = {{"fft_size", c.ofdm.fft_size},
               {"data_subcarriers", c.ofdm.data_subcarriers},
               {"pilot_subcarriers", c.ofdm.pilot_subcarriers},
               {"cp_len", c.ofdm.cp_len},
               {"symbols_per_example", c.ofdm.symbols_per_example},
               {"nominal_frame_rate", c.ofdm.nominal_frame_rate}};
  j["fading"] = {{"num_taps", c.fading.num_taps},
                 {"decay", c.fading.decay},
                 {"k_factor_db", c.fading.k_factor_db}};
  j["noise_std"] = c.noise_std;
  j["train_sessions"] = c.train_sessions;
  j["train_examples_per_session"] = c.train_examples_per_session;
  j["heldout_fraction"] = c.heldout_fraction;
  j["channel_shift"] = c.channel_shift;
  j["cfo_shift_std"] = c.cfo_shift_std;
  j["neutral_devices"] = c.neutral_devices;
  j["impairments"] = {{"iq_gain_spread", c.ranges.iq_gain_spread},
                      {"iq_phase_spread", c.ranges.iq_phase_spread},
                      {"dc_spread", c.ranges.dc_spread},
                      {"cfo_spread", c.ranges.cfo_spread},
                      {"phase_noise_min", c.ranges.phase_noise_min},
                      {"phase_noise_max", c.ranges.phase_noise_max},
                      {"pa_a3_min", c.ranges.pa_a3_min},
                      {"pa_a3_max", c.ranges.pa_a3_max}};
  j["model"] = cnn::to_json(c.model);
  j["train"] = {{"learning_rate", c.train.learning_rate},
                {"l2_lambda", c.train.l2_lambda},
                {"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},
                {"seed", c.train.seed}};
  j["t_max"] = c.t_max;
  j["eps_max"] = c.eps_max;
  j["link_noise_std"] = c.link_noise_std;
  j["link_frames"] = c.link_frames;
  j["trigger_period_s"] = c.trigger_period_s ? nlohmann::json(*c.trigger_period_s) : nlohmann::json();
  j["accuracy_floor"] = c.accuracy_floor ? nlohmann::json(*c.accuracy_floor) : nlohmann::json();
  j["seed"] = c.seed;
  return j;
}

/// Missing keys keep their defaults; the model defaults to the compact
/// network for the configured fleet size.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  try {
    ExperimentConfig c;
    auto get = [&j](const char* key, auto& field) {
      if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("num_devices", c.num_devices);
    get("slice_size", c.slice_size);
    get("slices_per_batch", c.slices_per_batch);
    get("num_taps", c.num_taps);
    if (j.contains("ofdm")) {
      const auto& o = j.at("ofdm");
      c.ofdm.fft_size = o.value("fft_size", c.ofdm.fft_size);
      c.ofdm.data_subcarriers = o.value("data_subcarriers", c.ofdm.data_subcarriers);
      c.ofdm.pilot_subcarriers = o.value("pilot_subcarriers", c.ofdm.pilot_subcarriers);
      c.ofdm.cp_len = o.value("cp_len", c.ofdm.cp_len);
      c.ofdm.symbols_per_example = o.value("symbols_per_example", c.ofdm.symbols_per_example);
      c.ofdm.nominal_frame_rate = o.value("nominal_frame_rate", c.ofdm.nominal_frame_rate);
    }
    if (j.contains("fading")) {
      const auto& f = j.at("fading");
      c.fading.num_taps = f.value("num_taps", c.fading.num_taps);
      c.fading.decay = f.value("decay", c.fading.decay);
      c.fading.k_factor_db = f.value("k_factor_db", c.fading.k_factor_db);
    }
    get("noise_std", c.noise_std);
    get("train_sessions", c.train_sessions);
    get("train_examples_per_session", c.train_examples_per_session);
    get("heldout_fraction", c.heldout_fraction);
    get("channel_shift", c.channel_shift);
    get("cfo_shift_std", c.cfo_shift_std);
    get("neutral_devices", c.neutral_devices);
    if (j.contains("impairments")) {
      const auto& r = j.at("impairments");
      auto& g = c.ranges;
      g.iq_gain_spread = r.value("iq_gain_spread", g.iq_gain_spread);
      g.iq_phase_spread = r.value("iq_phase_spread", g.iq_phase_spread);
      g.dc_spread = r.value("dc_spread", g.dc_spread);
      g.cfo_spread = r.value("cfo_spread", g.cfo_spread);
      g.phase_noise_min = r.value("phase_noise_min", g.phase_noise_min);
      g.phase_noise_max = r.value("phase_noise_max", g.phase_noise_max);
      g.pa_a3_min = r.value("pa_a3_min", g.pa_a3_min);
      g.pa_a3_max = r.value("pa_a3_max", g.pa_a3_max);
    }
    c.model = j.contains("model") ? cnn::model_spec_from_json(j.at("model"))
                                  : default_model(c.num_devices, c.ofdm.payload_length());
    if (j.contains("train")) {
      const auto& t = j.at("train");
      c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
      c.train.l2_lambda = t.value("l2_lambda", c.train.l2_lambda);
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
      c.train.epochs = t.value("epochs", c.train.epochs);
      c.train.seed = t.value("seed", c.train.seed);
    }
    get("t_max", c.t_max);
    get("eps_max", c.eps_max);
    get("link_noise_std", c.link_noise_std);
    get("link_frames", c.link_frames);
    if (j.contains("trigger_period_s") && !j.at("trigger_period_s").is_null())
      c.trigger_period_s = j.at("trigger_period_s").get<double>();
    if (j.contains("accuracy_floor") && !j.at("accuracy_floor").is_null())
      c.accuracy_floor = j.at("accuracy_floor").get<double>();
    get("seed", c.seed);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("experiment config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Devices and recordings

/// Seeded fleet of D device profiles with ids 1..D.
inline std::vector<phy::DeviceProfile> make_devices(const ExperimentConfig& cfg) {
  std::vector<phy::DeviceProfile> out;
  for (std::size_t d = 0; d < cfg.num_devices; ++d) {
    const int id = static_cast<int>(d + 1);
    if (cfg.neutral_devices) {
      out.push_back(phy::DeviceProfile::neutral(id));
      continue;
    }
    phy::Rng rng(derive_seed(cfg.seed, kProfileTag, d));
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const auto& r = cfg.ranges;
    phy::DeviceProfile p;
    p.device_id = id;
    p.iq_gain_imbalance = 1.0 + r.iq_gain_spread * u(rng);
    p.iq_phase_imbalance = r.iq_phase_spread * u(rng);
    const double dre = u(rng);
    const double dim = u(rng);
    p.dc_offset = r.dc_spread * Complex{dre, dim};
    p.cfo = r.cfo_spread * u(rng);
    p.phase_noise_std = r.phase_noise_min + (r.phase_noise_max - r.phase_noise_min) * unit(rng);
    p.pa_coeffs = {1.0, r.pa_a3_min + (r.pa_a3_max - r.pa_a3_min) * unit(rng), 0.0};
    out.push_back(p);
  }
  return out;
}

/// The eval-day version of a device: same hardware, CFO drifted by the
/// configured shift.
inline phy::DeviceProfile shifted_profile(const ExperimentConfig& cfg, const phy::DeviceProfile& dev,
                                          std::size_t index) {
  if (cfg.neutral_devices) return dev;
  phy::Rng rng(derive_seed(cfg.seed, kShiftTag, index));
  std::normal_distribution<double> g(0.0, 1.0);
  auto out = dev;
  out.cfo += cfg.channel_shift * cfg.cfo_shift_std * g(rng);
  return out;
}

/// The payload every device sends; identical across the fleet.
inline phy::Bits fleet_payload(const ExperimentConfig& cfg) {
  phy::Rng rng(derive_seed(cfg.seed, kPayloadTag));
  return phy::random_bits(cfg.ofdm.bits_per_example(), rng);
}

/// n received frames of one device over one channel realization (drawn
/// from channel_seed), transmitted through tx_phi.
inline io::Recording capture(const ExperimentConfig& cfg, const phy::DeviceProfile& dev,
                             io::CaptureEpoch epoch, std::size_t session, std::size_t n,
                             std::uint64_t channel_seed, const FirFilter& tx_phi = FirFilter()) {
  detail::require(n >= 1, "capture: needs at least one example");
  cfg.ofdm.validate_link(cfg.fading.num_taps, tx_phi.size());
  phy::Rng rng(channel_seed);
  phy::ChannelModel ch;
  ch.taps_h = phy::draw_channel_taps(cfg.fading, rng);
  ch.noise_std = cfg.noise_std;
  ch.seed = channel_seed;
  const auto frame = phy::modulate(fleet_payload(cfg), cfg.ofdm);
  const auto tx = tx_phi.is_identity() ? frame : phy::transmit_filtered(frame, tx_phi, cfg.ofdm);
  io::Recording rec;
  rec.device_id = dev.device_id;
  rec.epoch = epoch;
  rec.session = session;
  rec.channel_seed = channel_seed;
  rec.frames.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    rec.frames.push_back(phy::apply_channel(phy::apply_impairments(tx, dev, rng), ch, rng));
  return rec;
}

struct RecordingSet {
  std::vector<phy::DeviceProfile> devices;
  std::vector<io::Recording> train;  // device-major, train_sessions per device
  std::vector<io::Recording> eval;   // one per device, B * S examples

  const io::Recording& eval_for(std::size_t device_index) const {
    detail::require(device_index < eval.size(), "recordings: no eval capture for device index " +
                                                    std::to_string(device_index));
    return eval[device_index];
  }
};

inline io::Recording eval_capture(const ExperimentConfig& cfg, const phy::DeviceProfile& dev,
                                  std::size_t index, const FirFilter& tx_phi = FirFilter()) {
  return capture(cfg, shifted_profile(cfg, dev, index), io::CaptureEpoch::eval, 0,
                 cfg.eval_examples(), derive_seed(cfg.seed, kEvalChannelTag, index), tx_phi);
}

/// Deterministic per cfg.seed.
inline RecordingSet generate_dataset(const ExperimentConfig& cfg) {
  cfg.validate();
  RecordingSet set;
  set.devices = make_devices(cfg);
  for (std::size_t d = 0; d < set.devices.size(); ++d) {
    for (std::size_t s = 0; s < cfg.train_sessions; ++s)
      set.train.push_back(capture(cfg, set.devices[d], io::CaptureEpoch::train, s,
                                  cfg.train_examples_per_session,
                                  derive_seed(cfg.seed, kTrainChannelTag, d, s)));
    set.eval.push_back(eval_capture(cfg, set.devices[d], d));
    set.eval.back().device_id = set.devices[d].device_id;
  }
  return set;
}

/// Classifier inputs of a recording: the equalized payload of every frame.
inline std::vector<IQFrame> classifier_inputs(const io::Recording& rec, const phy::OfdmConfig& ofdm) {
  std::vector<IQFrame> out;
  out.reserve(rec.frames.size());
  for (const auto& f : rec.frames) out.push_back(phy::equalized_payload(f, ofdm, phy::estimate_channel(f, ofdm)));
  return out;
}

/// Train-day examples split per session into a training part and a held-out
/// tail. Labels are 0-based device indices.
struct TrainingData {
  cnn::Dataset train;
  cnn::Dataset heldout;
};

inline TrainingData training_data(const ExperimentConfig& cfg, const RecordingSet& set) {
  TrainingData out;
  for (const auto& rec : set.train) {
    const auto idx = static_cast<std::size_t>(rec.device_id - 1);
    detail::require(idx < cfg.num_devices, "training_data: device id outside the fleet");
    const auto xs = classifier_inputs(rec, cfg.ofdm);
    const auto keep = xs.size() - static_cast<std::size_t>(cfg.heldout_fraction * static_cast<double>(xs.size()));
    for (std::size_t i = 0; i < xs.size(); ++i) {
      auto& ds = i < keep ? out.train : out.heldout;
      ds.inputs.push_back(cnn::to_tensor(xs[i]));
      ds.labels.push_back(idx);
    }
  }
  return out;
}

inline cnn::Model train_model(const ExperimentConfig& cfg, const cnn::Dataset& data) {
  cnn::Model model(cfg.model, derive_seed(cfg.seed, kModelTag));
  auto tc = cfg.train;
  tc.seed = derive_seed(cfg.seed, kTrainTag, cfg.train.seed);
  cnn::train(model, data, tc);
  return model;
}

/// Splits consecutive inputs into B slices of S.
inline wop::Batch make_batch(const std::vector<IQFrame>& inputs, std::size_t slice_size,
                             std::size_t slices) {
  detail::require(slice_size >= 1 && slices >= 1, "make_batch: S and B must be >= 1");
  detail::require(inputs.size() >= slice_size * slices,
                  "make_batch: recording holds " + std::to_string(inputs.size()) +
                      " examples, batch needs " + std::to_string(slice_size * slices));
  std::vector<wop::Slice> out;
  for (std::size_t b = 0; b < slices; ++b)
    out.emplace_back(std::vector<IQFrame>(inputs.begin() + static_cast<std::ptrdiff_t>(b * slice_size),
                                          inputs.begin() + static_cast<std::ptrdiff_t>((b + 1) * slice_size)));
  return wop::Batch(std::move(out));
}

// ---------------------------------------------------------------------------
// Metrics

inline std::size_t classify(const cnn::Model& model, const IQFrame& x, const FirFilter& phi) {
  return cnn::forward(model, cnn::to_tensor(phi.is_identity() ? x : apply_fir(x, phi))).argmax();
}

/// Fraction of the slice whose filtered input is classified as true_class.
inline double compute_psa(const cnn::Model& model, const wop::Slice& slice, const FirFilter& phi,
                          std::size_t true_class) {
  detail::require(slice.size() >= 1, "compute_psa: empty slice");
  detail::require(true_class < model.num_classes(), "compute_psa: class out of range");
  std::size_t hits = 0;
  for (const auto& x : slice.inputs) hits += classify(model, x, phi) == true_class;
  return static_cast<double>(hits) / static_cast<double>(slice.size());
}

inline std::vector<double> psa_per_slice(const cnn::Model& model, const wop::Batch& batch,
                                         const FirFilter& phi, std::size_t true_class) {
  detail::require(batch.size() >= 1, "compute_pba: empty batch");
  std::vector<double> out;
  for (const auto& s : batch.slices) out.push_back(compute_psa(model, s, phi, true_class));
  return out;
}

inline double mean(const std::vector<double>& xs) {
  detail::require(!xs.empty(), "mean: empty sample");
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

inline double compute_pba(const cnn::Model& model, const wop::Batch& batch, const FirFilter& phi,
                          std::size_t true_class) {
  return mean(psa_per_slice(model, batch, phi, true_class));
}

class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t classes) : d_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const noexcept { return d_; }
  std::size_t& at(std::size_t truth, std::size_t pred) { return counts_.at(truth * d_ + pred); }
  std::size_t at(std::size_t truth, std::size_t pred) const { return counts_.at(truth * d_ + pred); }
  std::size_t row_sum(std::size_t truth) const {
    std::size_t s = 0;
    for (std::size_t p = 0; p < d_; ++p) s += at(truth, p);
    return s;
  }
  void add(std::size_t truth, std::size_t pred) { ++at(truth, pred); }
  void merge(const ConfusionMatrix& o) {
    detail::require(o.d_ == d_, "ConfusionMatrix: size mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t d_ = 0;
  std::vector<std::size_t> counts_;
};

inline ConfusionMatrix confusion(const cnn::Model& model, const wop::Batch& batch, const FirFilter& phi,
                                 std::size_t true_class) {
  ConfusionMatrix cm(model.num_classes());
  for (const auto& s : batch.slices)
    for (const auto& x : s.inputs) cm.add(true_class, classify(model, x, phi));
  return cm;
}

/// Outcome of one pipeline or adversary run. For an adversary run the PSA
/// fields count inputs classified as the target (victim); the *_self fields
/// count inputs classified as the transmitting device.
struct MetricsReport {
  std::string experiment = "fingerprint";
  std::uint64_t seed = 0;
  int device_id = 1;  // transmitting device
  int target_id = 1;  // class the filter was optimized for

  std::vector<double> psa_before_per_slice;
  std::vector<double> psa_after_per_slice;
  double psa_before = 0.0;  // first slice
  double psa_after = 0.0;
  double pba_before = 0.0;
  double pba_after = 0.0;
  std::optional<double> psa_self_before{};
  std::optional<double> psa_self_after{};
  std::optional<double> pba_self_before{};
  std::optional<double> pba_self_after{};

  ConfusionMatrix confusion_before;
  ConfusionMatrix confusion_after;

  wop::FilterMessage filter;
  std::size_t iterations = 0;

  std::optional<phy::LinkReport> link_unfiltered{};
  std::optional<phy::LinkReport> link_filtered{};

  double psa_gain() const { return psa_after - psa_before; }
  double pba_gain() const { return pba_after - pba_before; }
};

// ---------------------------------------------------------------------------
// Pipeline

namespace detail {

inline std::size_t class_index(const ExperimentConfig& cfg, int device_id, const char* what) {
  require(device_id >= 1 && static_cast<std::size_t>(device_id) <= cfg.num_devices,
          std::string(what) + ": device id " + std::to_string(device_id) + " outside 1.." +
              std::to_string(cfg.num_devices));
  return static_cast<std::size_t>(device_id - 1);
}

inline void check_model(const ExperimentConfig& cfg, const cnn::Model& model) {
  require(model.num_classes() == cfg.num_devices,
          "model has " + std::to_string(model.num_classes()) + " classes, config has " +
              std::to_string(cfg.num_devices) + " devices");
  require(model.spec().input_width == cfg.input_length(),
          "model input width " + std::to_string(model.spec().input_width) +
              " does not match the payload length " + std::to_string(cfg.input_length()));
}

inline void fill_metrics(MetricsReport& r, const cnn::Model& model, const wop::Batch& batch,
                         const FirFilter& before, const FirFilter& after, std::size_t target,
                         std::size_t self) {
  r.psa_before_per_slice = psa_per_slice(model, batch, before, target);
  r.psa_after_per_slice = psa_per_slice(model, batch, after, target);
  r.psa_before = r.psa_before_per_slice.front();
  r.psa_after = r.psa_after_per_slice.front();
  r.pba_before = mean(r.psa_before_per_slice);
  r.pba_after = mean(r.psa_after_per_slice);
  r.confusion_before = confusion(model, batch, before, self);
  r.confusion_after = confusion(model, batch, after, self);
}

}  // namespace detail

/// Classifies the device's eval-day capture with the currently deployed
/// filter, optimizes a new filter on the first slice (warm-started from the
/// current one), and measures PSA on that slice and PBA over the B slices.
/// The classifier sees the filtered equalized payload; no FIR compensation
/// happens before classification. When cfg.link_frames > 0 the link is also
/// simulated with compensation, unfiltered and with the new filter.
inline MetricsReport run_fingerprint_pipeline(const ExperimentConfig& cfg, int device_id,
                                              const cnn::Model& model, const io::Recording& eval,
                                              const std::optional<FirFilter>& current_phi = std::nullopt,
                                              std::size_t epoch_index = 0) {
  cfg.validate();
  detail::check_model(cfg, model);
  const auto cls = detail::class_index(cfg, device_id, "run_fingerprint_pipeline");
  detail::require(eval.device_id == device_id, "run_fingerprint_pipeline: recording belongs to device " +
                                                   std::to_string(eval.device_id));
  const auto batch = make_batch(classifier_inputs(eval, cfg.ofdm), cfg.slice_size, cfg.slices_per_batch);
  const FirFilter current = current_phi ? *current_phi : FirFilter::identity(cfg.num_taps);

  auto opts = cfg.optimize_options();
  opts.warm_start = current;
  const auto res = wop::optimize_fir(model, batch.slices.front(), cls, opts);

  MetricsReport r;
  r.seed = cfg.seed;
  r.device_id = device_id;
  r.target_id = device_id;
  detail::fill_metrics(r, model, batch, current, res.phi, cls, cls);
  r.filter = {device_id, epoch_index, res.phi, epsilon_of(res.phi, cfg.ofdm.fft_size),
              res.objective_before, res.objective_after};
  r.iterations = res.iterations.size();

  if (cfg.link_frames > 0) {
    phy::LinkScenario sc;
    sc.ofdm = cfg.ofdm;
    sc.fading = cfg.fading;
    sc.noise_std = cfg.link_noise_std;
    const auto link_seed = derive_seed(cfg.seed, kLinkTag, cls, epoch_index);
    r.link_unfiltered = phy::simulate_link(
        sc, [&](std::size_t, phy::Rng&) { return FirFilter::identity(cfg.num_taps); }, cfg.link_frames,
        link_seed);
    r.link_filtered =
        phy::simulate_link(sc, [&](std::size_t, phy::Rng&) { return res.phi; }, cfg.link_frames, link_seed);
  }
  return r;
}

inline MetricsReport run_fingerprint_pipeline(const ExperimentConfig& cfg, int device_id,
                                              const cnn::Model& model, const RecordingSet& set,
                                              const std::optional<FirFilter>& current_phi = std::nullopt,
                                              std::size_t epoch_index = 0) {
  const auto cls = detail::class_index(cfg, device_id, "run_fingerprint_pipeline");
  return run_fingerprint_pipeline(cfg, device_id, model, set.eval_for(cls), current_phi, epoch_index);
}

/// The adversary's eval-day capture classified without and with the victim's
/// filter. Headline PSA/PBA count classified-as-victim; *_self count
/// classified-as-adversary.
inline MetricsReport run_adversary(const ExperimentConfig& cfg, int adversary_id, int victim_id,
                                   const FirFilter& victim_phi, const cnn::Model& model,
                                   const io::Recording& adversary_eval) {
  cfg.validate();
  detail::check_model(cfg, model);
  const auto adv = detail::class_index(cfg, adversary_id, "run_adversary");
  const auto vic = detail::class_index(cfg, victim_id, "run_adversary");
  detail::require(adversary_eval.device_id == adversary_id,
                  "run_adversary: recording belongs to device " + std::to_string(adversary_eval.device_id));
  detail::require(epsilon_of(victim_phi, cfg.ofdm.fft_size) <= cfg.eps_max * (1.0 + 1e-9),
                  "run_adversary: victim filter violates eps_max");
  const auto batch = make_batch(classifier_inputs(adversary_eval, cfg.ofdm), cfg.slice_size,
                                cfg.slices_per_batch);
  const auto none = FirFilter::identity(victim_phi.size());
  MetricsReport r;
  r.experiment = "adversary";
  r.seed = cfg.seed;
  r.device_id = adversary_id;
  r.target_id = victim_id;
  detail::fill_metrics(r, model, batch, none, victim_phi, vic, adv);
  const auto self_before = psa_per_slice(model, batch, none, adv);
  const auto self_after = psa_per_slice(model, batch, victim_phi, adv);
  r.psa_self_before = self_before.front();
  r.psa_self_after = self_after.front();
  r.pba_self_before = mean(self_before);
  r.pba_self_after = mean(self_after);
  r.filter = {victim_id, 0, victim_phi, epsilon_of(victim_phi, cfg.ofdm.fft_size), 0.0, 0.0};
  return r;
}

/// Random M-tap filter with epsilon_of(result) == eps (control arm).
inline FirFilter random_filter_with_epsilon(std::size_t num_taps, double eps, phy::Rng& rng,
                                            std::size_t n_bins = kEpsilonBins) {
  detail::require(num_taps >= 1 && eps >= 0.0, "random_filter_with_epsilon: bad arguments");
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<Complex> dev(num_taps);
  for (auto& c : dev) {
    const double re = g(rng);
    const double im = g(rng);
    c = {re, im};
  }
  std::vector<Complex> taps = dev;
  taps[0] += 1.0;
  const double e = epsilon_of(FirFilter(taps), n_bins);
  if (e == 0.0) return FirFilter::identity(num_taps);
  for (std::size_t k = 0; k < num_taps; ++k) taps[k] = (k == 0 ? 1.0 : 0.0) + dev[k] * (eps / e);
  return FirFilter(std::move(taps));
}

// ---------------------------------------------------------------------------
// Statistics

struct PairedTest {
  std::size_t n = 0;
  double mean_difference = 0.0;  // mean of after - before
  double t = 0.0;
  double p_greater = 1.0;  // H1: mean difference > 0
  double p_less = 1.0;     // H1: mean difference < 0
};

/// One-sided paired t-tests on after - before.
inline PairedTest paired_t_test(const std::vector<double>& before, const std::vector<double>& after) {
  detail::require(before.size() == after.size() && before.size() >= 2,
                  "paired_t_test: needs two equal-length samples of size >= 2");
  PairedTest out;
  out.n = before.size();
  std::vector<double> d(out.n);
  for (std::size_t i = 0; i < out.n; ++i) d[i] = after[i] - before[i];
  out.mean_difference = mean(d);
  double ss = 0.0;
  for (double x : d) ss += (x - out.mean_difference) * (x - out.mean_difference);
  const double sd = std::sqrt(ss / static_cast<double>(out.n - 1));
  if (sd == 0.0) {
    out.t = out.mean_difference > 0.0   ? std::numeric_limits<double>::infinity()
            : out.mean_difference < 0.0 ? -std::numeric_limits<double>::infinity()
                                        : 0.0;
    out.p_greater = out.mean_difference > 0.0 ? 0.0 : 1.0;
    out.p_less = out.mean_difference < 0.0 ? 0.0 : 1.0;
    if (out.mean_difference == 0.0) out.p_greater = out.p_less = 0.5;
    return out;
  }
  out.t = out.mean_difference / (sd / std::sqrt(static_cast<double>(out.n)));
  boost::math::students_t dist(static_cast<double>(out.n - 1));
  out.p_greater = boost::math::cdf(boost::math::complement(dist, out.t));
  out.p_less = boost::math::cdf(dist, out.t);
  return out;
}

inline double median(std::vector<double> xs) {
  detail::require(!xs.empty(), "median: empty sample");
  std::sort(xs.begin(), xs.end());
  const auto n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

// ---------------------------------------------------------------------------
// CSV reports
//
// Columns: experiment,seed,device_id,target_id,metric,value
// Rows follow report order, then the fixed metric order of report_rows().

struct ReportRow {
  std::string experiment;
  std::uint64_t seed = 0;
  int device_id = 0;
  int target_id = 0;
  std::string metric;
  double value = 0.0;

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

inline constexpr const char* kReportHeader = "experiment,seed,device_id,target_id,metric,value";

inline std::vector<ReportRow> report_rows(const MetricsReport& r) {
  std::vector<ReportRow> rows;
  auto add = [&](const std::string& metric, double v) {
    rows.push_back({r.experiment, r.seed, r.device_id, r.target_id, metric, v});
  };
  add("psa_before", r.psa_before);
  add("psa_after", r.psa_after);
  add("pba_before", r.pba_before);
  add("pba_after", r.pba_after);
  if (r.psa_self_before) add("psa_self_before", *r.psa_self_before);
  if (r.psa_self_after) add("psa_self_after", *r.psa_self_after);
  if (r.pba_self_before) add("pba_self_before", *r.pba_self_before);
  if (r.pba_self_after) add("pba_self_after", *r.pba_self_after);
  add("epsilon", r.filter.epsilon);
  add("objective_before", r.filter.objective_before);
  add("objective_after", r.filter.objective_after);
  add("iterations", static_cast<double>(r.iterations));
  if (r.link_unfiltered) {
    add("per_unfiltered", r.link_unfiltered->per);
    add("ber_unfiltered", r.link_unfiltered->ber);
    add("throughput_kbps_unfiltered", r.link_unfiltered->throughput_kbps);
  }
  if (r.link_filtered) {
    add("per_filtered", r.link_filtered->per);
    add("ber_filtered", r.link_filtered->ber);
    add("throughput_kbps_filtered", r.link_filtered->throughput_kbps);
  }
  for (std::size_t i = 0; i < r.psa_before_per_slice.size(); ++i)
    add("psa_before_slice_" + std::to_string(i + 1), r.psa_before_per_slice[i]);
  for (std::size_t i = 0; i < r.psa_after_per_slice.size(); ++i)
    add("psa_after_slice_" + std::to_string(i + 1), r.psa_after_per_slice[i]);
  return rows;
}

namespace detail {
inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  return os.str();
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  return os;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}
}  // namespace detail

inline void emit_report(const std::vector<MetricsReport>& reports, const std::filesystem::path& path) {
  auto os = detail::open_out(path);
  os << kReportHeader << '\n';
  for (const auto& r : reports)
    for (const auto& row : report_rows(r))
      os << row.experiment << ',' << row.seed << ',' << row.device_id << ',' << row.target_id << ','
         << row.metric << ',' << detail::fmt_double(row.value) << '\n';
  if (!os) throw Error("write to '" + path.string() + "' failed");
}

inline std::vector<ReportRow> read_report(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line) || line != kReportHeader)
    throw CorruptFile("'" + path.string() + "' lacks the report header");
  std::vector<ReportRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c = detail::split_csv(line);
    if (c.size() != 6) throw CorruptFile("'" + path.string() + "': bad row '" + line + "'");
    try {
      rows.push_back({c[0], std::stoull(c[1]), std::stoi(c[2]), std::stoi(c[3]), c[4], std::stod(c[5])});
    } catch (const std::logic_error&) {
      throw CorruptFile("'" + path.string() + "': bad row '" + line + "'");
    }
  }
  return rows;
}

/// Dense CSV: header "true,pred_1,...,pred_D", one row per true class.
inline void emit_confusion(const ConfusionMatrix& cm, const std::filesystem::path& path) {
  auto os = detail::open_out(path);
  os << "true";
  for (std::size_t p = 0; p < cm.classes(); ++p) os << ",pred_" << p + 1;
  os << '\n';
  for (std::size_t t = 0; t < cm.classes(); ++t) {
    os << t + 1;
    for (std::size_t p = 0; p < cm.classes(); ++p) os << ',' << cm.at(t, p);
    os << '\n';
  }
  if (!os) throw Error("write to '" + path.string() + "' failed");
}

inline ConfusionMatrix read_confusion(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(is, line)) throw CorruptFile("'" + path.string() + "' is empty");
  const auto d = detail::split_csv(line).size() - 1;
  ConfusionMatrix cm(d);
  for (std::size_t t = 0; t < d; ++t) {
    if (!std::getline(is, line)) throw CorruptFile("'" + path.string() + "': missing rows");
    const auto c = detail::split_csv(line);
    if (c.size() != d + 1) throw CorruptFile("'" + path.string() + "': bad row '" + line + "'");
    try {
      for (std::size_t p = 0; p < d; ++p) cm.at(t, p) = std::stoull(c[p + 1]);
    } catch (const std::logic_error&) {
      throw CorruptFile("'" + path.string() + "': bad row '" + line + "'");
    }
  }
  return cm;
}

}  // namespace rfprint::harness
