#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "oracles.hpp"
#include "rfprint/harness.hpp"

using namespace rfprint;
using namespace rfprint::harness;
using oracle::Rng;

namespace {

namespace fs = std::filesystem;

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("rfprint_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

ExperimentConfig tiny_config(std::uint64_t seed = 3) {
  ExperimentConfig c;
  c.train_sessions = 1;
  c.train_examples_per_session = 6;
  c.slice_size = 3;
  c.slices_per_batch = 2;
  c.seed = seed;
  return c;
}

/// Two classes decided by the sign of the first I sample.
cnn::Model sign_model(std::size_t width) {
  cnn::ModelSpec s;
  s.input_width = width;
  s.num_classes = 2;
  s.layers = {cnn::DenseSpec{2}};
  cnn::Model m(s, 1);
  auto& w = m.layers()[0].weights;
  std::fill(w.begin(), w.end(), 0.0);
  w[0] = 10.0;
  w[2 * width] = -10.0;
  return m;
}

IQFrame first_sample(double v, std::size_t width) {
  std::vector<Complex> x(width, Complex{0.1, 0.1});
  x[0] = v;
  return IQFrame(x);
}

/// One trained five-device model shared by the slow tests.
struct Trained {
  ExperimentConfig cfg;
  RecordingSet set;
  TrainingData data;
  cnn::Model model;

  static const Trained& get() {
    static const Trained t = [] {
      Trained x;
      x.cfg.seed = 1;
      x.set = generate_dataset(x.cfg);
      x.data = training_data(x.cfg, x.set);
      x.model = train_model(x.cfg, x.data.train);
      return x;
    }();
    return t;
  }
};

}  // namespace

TEST(Config, JsonRoundtrip) {
  ExperimentConfig c;
  c.num_taps = 7;
  c.eps_max = 0.3;
  c.accuracy_floor = 0.5;
  c.ranges.cfo_spread = 1e-3;
  c.train.epochs = 3;
  const auto back = experiment_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_NO_THROW(back.validate());
}

TEST(Config, Validation) {
  ExperimentConfig c;
  c.num_devices = 4;
  EXPECT_THROW(c.validate(), InvalidInput);
  c.model = default_model(4, 288);
  EXPECT_NO_THROW(c.validate());
  c.slice_size = 0;
  EXPECT_THROW(c.validate(), InvalidInput);
  ExperimentConfig d;
  d.num_taps = 14;
  EXPECT_THROW(generate_dataset(d), InvalidInput);
  EXPECT_THROW(experiment_config_from_json(nlohmann::json{{"num_devices", "five"}}), InvalidInput);
}

TEST(Dataset, SameSeedIsIdentical) {
  const auto a = generate_dataset(tiny_config());
  const auto b = generate_dataset(tiny_config());
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].frames, b.train[i].frames);
  for (std::size_t i = 0; i < a.eval.size(); ++i) EXPECT_EQ(a.eval[i].frames, b.eval[i].frames);
  EXPECT_EQ(a.devices, b.devices);
  const auto c = generate_dataset(tiny_config(4));
  EXPECT_NE(a.eval[0].frames, c.eval[0].frames);
}

TEST(Dataset, LayoutAndSharedPayload) {
  const auto cfg = tiny_config();
  const auto set = generate_dataset(cfg);
  EXPECT_EQ(set.train.size(), cfg.num_devices * cfg.train_sessions);
  EXPECT_EQ(set.eval.size(), cfg.num_devices);
  for (const auto& r : set.eval) {
    EXPECT_EQ(r.frames.size(), cfg.eval_examples());
    EXPECT_EQ(r.epoch, io::CaptureEpoch::eval);
    for (const auto& f : r.frames) EXPECT_EQ(f.size(), cfg.ofdm.example_frame_length());
  }
  // every device sends the same payload bits
  auto neutral = cfg;
  neutral.neutral_devices = true;
  neutral.noise_std = 0.0;
  const auto clean = generate_dataset(neutral);
  const auto a = classifier_inputs(clean.eval[0], cfg.ofdm);
  const auto b = classifier_inputs(clean.eval[3], cfg.ofdm);
  EXPECT_LE(oracle::max_abs_diff(a[0].vec(), b[1].vec()), 1e-9);
}

TEST(Recording, FileRoundtrip) {
  const auto dir = temp_dir("rec");
  const auto cfg = tiny_config();
  const auto set = generate_dataset(cfg);
  const auto& rec = set.eval[2];
  io::write_recording(dir / "r", rec, cfg.ofdm);
  const auto back = io::read_recording(dir / "r", cfg.ofdm);
  EXPECT_EQ(back.device_id, rec.device_id);
  EXPECT_EQ(back.epoch, rec.epoch);
  EXPECT_EQ(back.channel_seed, rec.channel_seed);
  ASSERT_EQ(back.frames.size(), rec.frames.size());
  for (std::size_t i = 0; i < rec.frames.size(); ++i)
    for (std::size_t k = 0; k < rec.frames[i].size(); ++k) {
      EXPECT_EQ(back.frames[i][k].real(), static_cast<double>(static_cast<float>(rec.frames[i][k].real())));
      EXPECT_EQ(back.frames[i][k].imag(), static_cast<double>(static_cast<float>(rec.frames[i][k].imag())));
    }
  EXPECT_EQ(fs::file_size(dir / "r.iq"), rec.frames.size() * rec.frames[0].size() * 8);

  // same seed, byte-identical sample files
  io::write_recording(dir / "again", generate_dataset(cfg).eval[2], cfg.ofdm);
  EXPECT_EQ(slurp(dir / "r.iq"), slurp(dir / "again.iq"));

  phy::OfdmConfig other;
  other.cp_len = 12;
  EXPECT_THROW(io::read_recording(dir / "r", other), InvalidInput);
  fs::resize_file(dir / "r.iq", fs::file_size(dir / "r.iq") - 8);
  EXPECT_THROW(io::read_recording(dir / "r", cfg.ofdm), CorruptFile);
  {
    std::ofstream os(dir / "r.json");
    os << "{\"device_id\": 1}";
  }
  EXPECT_THROW(io::read_recording(dir / "r", cfg.ofdm), CorruptFile);
  fs::remove_all(dir);
}

TEST(Metrics, PsaCounting) {
  const auto m = sign_model(8);
  const wop::Slice all({first_sample(1, 8), first_sample(2, 8)});
  EXPECT_EQ(compute_psa(m, all, FirFilter(), 0), 1.0);
  const wop::Slice three({first_sample(1, 8), first_sample(2, 8), first_sample(-1, 8), first_sample(3, 8)});
  EXPECT_EQ(compute_psa(m, three, FirFilter(), 0), 0.75);
  EXPECT_EQ(compute_psa(m, three, FirFilter({Complex{-1}}), 0), 0.25);
  EXPECT_THROW(compute_psa(m, wop::Slice(), FirFilter(), 0), InvalidInput);
}

TEST(Metrics, PbaIsMeanOfPsa) {
  Rng rng(5);
  const auto m = sign_model(8);
  std::vector<IQFrame> xs;
  for (int i = 0; i < 5 * 7; ++i) xs.push_back(oracle::random_frame(8, rng));
  const auto batch = make_batch(xs, 5, 7);
  const auto phi = oracle::random_filter(3, rng);
  const auto per = psa_per_slice(m, batch, phi, 1);
  double s = 0.0;
  for (double v : per) s += v;
  EXPECT_NEAR(compute_pba(m, batch, phi, 1), s / 7.0, 1e-12);
  EXPECT_THROW(make_batch(xs, 5, 8), InvalidInput);
}

TEST(Metrics, ConfusionRowSums) {
  Rng rng(6);
  const auto m = sign_model(8);
  std::vector<IQFrame> xs;
  for (int i = 0; i < 12; ++i) xs.push_back(oracle::random_frame(8, rng));
  const auto cm = confusion(m, make_batch(xs, 4, 3), FirFilter(), 1);
  EXPECT_EQ(cm.row_sum(1), 12u);
  EXPECT_EQ(cm.row_sum(0), 0u);
}

TEST(Stats, PairedTTestMatchesReference) {
  const std::vector<double> before{0.52, 0.61, 0.44, 0.70, 0.58, 0.49, 0.66, 0.55};
  const std::vector<double> after{0.71, 0.69, 0.52, 0.88, 0.61, 0.60, 0.79, 0.57};
  const auto r = paired_t_test(before, after);
  EXPECT_NEAR(r.t, 4.62122460808852, 1e-10);
  EXPECT_NEAR(r.p_greater, 0.0012113191125348239, 1e-12);
  EXPECT_NEAR(r.p_less, 0.9987886808874652, 1e-12);
  const auto same = paired_t_test(before, before);
  EXPECT_EQ(same.mean_difference, 0.0);
  EXPECT_THROW(paired_t_test({1.0}, {2.0}), InvalidInput);
  EXPECT_EQ(median({3.0, 1.0, 2.0, 10.0}), 2.5);
}

TEST(Report, EmptyListGivesHeaderOnly) {
  const auto dir = temp_dir("empty");
  emit_report({}, dir / "r.csv");
  EXPECT_EQ(slurp(dir / "r.csv"), std::string(kReportHeader) + "\n");
  EXPECT_TRUE(read_report(dir / "r.csv").empty());
  fs::remove_all(dir);
}

TEST(Report, RoundtripIsExact) {
  const auto dir = temp_dir("roundtrip");
  MetricsReport a;
  a.seed = 42;
  a.device_id = 2;
  a.target_id = 2;
  a.psa_before = 1.0 / 3.0;
  a.psa_after = 0.1 + 0.2;
  a.pba_before = 1e-300;
  a.pba_after = 0.987654321987654321;
  a.psa_before_per_slice = {1.0 / 3.0, 0.7};
  a.psa_after_per_slice = {0.1 + 0.2, 0.9};
  a.filter.epsilon = 0.19999999999999998;
  a.link_filtered = phy::LinkReport{1e-5, 0.021, 56.3, 1000, 1, 10, 1};
  MetricsReport b = a;
  b.experiment = "adversary";
  b.device_id = 1;
  b.psa_self_before = 0.4;
  b.psa_self_after = 0.35;
  emit_report({a, b}, dir / "r.csv");
  auto want = report_rows(a);
  const auto more = report_rows(b);
  want.insert(want.end(), more.begin(), more.end());
  EXPECT_EQ(read_report(dir / "r.csv"), want);
  emit_report({a, b}, dir / "again.csv");
  EXPECT_EQ(slurp(dir / "r.csv"), slurp(dir / "again.csv"));
  fs::remove_all(dir);
}

TEST(Report, ConfusionCsv) {
  const auto dir = temp_dir("confusion");
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 5;
  cm.at(0, 2) = 1;
  cm.at(1, 1) = 6;
  cm.at(2, 0) = 2;
  cm.at(2, 2) = 4;
  emit_confusion(cm, dir / "c.csv");
  const auto back = read_confusion(dir / "c.csv");
  EXPECT_EQ(back, cm);
  for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(back.row_sum(t), 6u);
  fs::remove_all(dir);
}

TEST(Control, RandomFilterHasRequestedEpsilon) {
  Rng rng(7);
  for (double eps : {0.05, 0.2, 0.5}) {
    const auto phi = random_filter_with_epsilon(5, eps, rng);
    EXPECT_NEAR(epsilon_of(phi), eps, 1e-12);
  }
}

TEST(Dataset, NullHypothesisGivesChance) {
  ExperimentConfig cfg;
  cfg.neutral_devices = true;
  cfg.train_sessions = 2;
  cfg.train_examples_per_session = 100;
  cfg.train.epochs = 6;
  cfg.seed = 9;
  const auto set = generate_dataset(cfg);
  const auto data = training_data(cfg, set);
  const auto model = train_model(cfg, data.train);
  EXPECT_LE(cnn::accuracy(model, data.heldout), 1.0 / 5.0 + 0.15);
}

TEST(Trained, SeparableHeldOut) {
  const auto& t = Trained::get();
  EXPECT_GE(cnn::accuracy(t.model, t.data.heldout), 0.9);
}

TEST(Trained, ZeroIterationsLeavesMetricsUnchanged) {
  const auto& t = Trained::get();
  auto cfg = t.cfg;
  cfg.t_max = 0;
  const auto r = run_fingerprint_pipeline(cfg, 2, t.model, t.set);
  EXPECT_TRUE(r.filter.taps.is_identity());
  EXPECT_EQ(r.psa_after, r.psa_before);
  EXPECT_EQ(r.pba_after, r.pba_before);
  EXPECT_EQ(r.psa_after_per_slice, r.psa_before_per_slice);
  EXPECT_EQ(r.confusion_after, r.confusion_before);
}

TEST(Trained, PipelineIsDeterministicAndBounded) {
  const auto& t = Trained::get();
  auto cfg = t.cfg;
  cfg.t_max = 4;
  cfg.link_frames = 50;
  const auto a = run_fingerprint_pipeline(cfg, 3, t.model, t.set);
  const auto b = run_fingerprint_pipeline(cfg, 3, t.model, t.set);
  EXPECT_EQ(report_rows(a), report_rows(b));
  EXPECT_EQ(a.filter.taps, b.filter.taps);
  EXPECT_LE(a.filter.epsilon, cfg.eps_max + 1e-9);
  EXPECT_LE(epsilon_of(a.filter.taps), cfg.eps_max + 1e-9);
  ASSERT_TRUE(a.link_filtered && a.link_unfiltered);
  EXPECT_EQ(a.link_filtered->frames, 50u);
  EXPECT_NEAR(a.pba_after, mean(a.psa_after_per_slice), 1e-12);
  EXPECT_NEAR(a.pba_before, mean(a.psa_before_per_slice), 1e-12);
  EXPECT_EQ(a.confusion_before.row_sum(2), cfg.eval_examples());
}

TEST(Trained, WarmStartContinuesFromCurrentFilter) {
  const auto& t = Trained::get();
  auto cfg = t.cfg;
  cfg.t_max = 2;
  const auto first = run_fingerprint_pipeline(cfg, 4, t.model, t.set);
  cfg.t_max = 0;
  const auto second = run_fingerprint_pipeline(cfg, 4, t.model, t.set, first.filter.taps, 1);
  EXPECT_EQ(second.filter.taps, first.filter.taps);
  EXPECT_EQ(second.filter.epoch_index, 1u);
  EXPECT_EQ(second.psa_before, first.psa_after);
}

TEST(Trained, AdversaryAsVictimReducesToPipeline) {
  const auto& t = Trained::get();
  auto cfg = t.cfg;
  cfg.t_max = 3;
  const auto r = run_fingerprint_pipeline(cfg, 2, t.model, t.set);
  const auto a = run_adversary(cfg, 2, 2, r.filter.taps, t.model, t.set.eval_for(1));
  EXPECT_EQ(a.psa_before, r.psa_before);
  EXPECT_EQ(a.psa_after, r.psa_after);
  EXPECT_EQ(a.pba_before, r.pba_before);
  EXPECT_EQ(a.pba_after, r.pba_after);
  EXPECT_EQ(*a.psa_self_after, a.psa_after);
  EXPECT_THROW(run_adversary(cfg, 2, 3, FirFilter({Complex{1.5}}), t.model, t.set.eval_for(1)), InvalidInput);
  EXPECT_THROW(run_adversary(cfg, 1, 3, r.filter.taps, t.model, t.set.eval_for(1)), InvalidInput);
}

TEST(Trained, ClassifierSeesTheFilter) {
  // Captured through a transmit filter, the classifier input is the
  // equalized payload with the filter still in it, not the compensated one.
  const auto& t = Trained::get();
  auto cfg = t.cfg;
  cfg.noise_std = 0.0;
  cfg.neutral_devices = true;
  cfg.slices_per_batch = 1;
  cfg.slice_size = 2;
  Rng rng(8);
  const auto phi = project_epsilon(oracle::random_filter(5, rng), 0.2);
  const auto plain = eval_capture(cfg, phy::DeviceProfile::neutral(1), 0);
  const auto filtered = eval_capture(cfg, phy::DeviceProfile::neutral(1), 0, phi);
  const auto x_plain = classifier_inputs(plain, cfg.ofdm);
  const auto x_filt = classifier_inputs(filtered, cfg.ofdm);
  const auto resp = frequency_response(phi, cfg.ofdm.fft_size);
  const auto& data = phy::SubcarrierMap(cfg.ofdm).data;
  for (std::size_t i = 0; i < x_plain[0].size(); ++i)
    EXPECT_LE(std::abs(x_filt[0][i] - resp[data[i % data.size()]] * x_plain[0][i]), 1e-9);
  const auto& rx = filtered.frames[0];
  const auto comp = phy::compensate_fir(rx, phi, phy::estimate_channel(rx, cfg.ofdm), cfg.ofdm);
  EXPECT_LE(oracle::max_abs_diff(comp.vec(), x_plain[0].vec()), 1e-9);
  EXPECT_GT(oracle::max_abs_diff(x_filt[0].vec(), x_plain[0].vec()), 1e-3);
}

TEST(Trained, OptimizationUsuallyClimbs) {
  // Objective trace strictly increases for at least one iteration in >= 90%
  // of 20 runs (5 devices x 4 slices of the shifted eval-day capture).
  const auto& t = Trained::get();
  int climbed = 0;
  for (std::size_t d = 0; d < 5; ++d) {
    const auto batch = make_batch(classifier_inputs(t.set.eval[d], t.cfg.ofdm), t.cfg.slice_size,
                                  t.cfg.slices_per_batch);
    for (std::size_t s = 0; s < 4; ++s) {
      auto o = t.cfg.optimize_options();
      o.t_max = 3;
      const auto r = wop::optimize_fir(t.model, batch.slices[s], d, o);
      bool up = false;
      for (std::size_t i = 1; i < r.trace.size(); ++i) up = up || r.trace[i] > r.trace[i - 1];
      climbed += up;
      EXPECT_LE(epsilon_of(r.phi), o.eps_max + 1e-9);
    }
  }
  EXPECT_GE(climbed, 18);
}
