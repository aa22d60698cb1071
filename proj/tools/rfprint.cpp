// rfprint: synthetic radio fingerprinting experiments from the command line.
//
// Every experiment lives in one directory:
//   config.json            configuration snapshot
//   recordings/*.iq|json   train-day and eval-day captures
//   model.rfpm             trained classifier
//   filters/*.json         filter feedback messages
//   *.csv                  reports and confusion matrices
//
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rfprint/harness.hpp"

namespace fs = std::filesystem;
using namespace rfprint;

namespace {

struct Overrides {
  std::optional<std::size_t> devices, slice_size, slices, taps, t_max, epochs, link_frames, sessions,
      examples;
  std::optional<double> eps_max, shift, lr, noise, link_noise;
};

void add_overrides(CLI::App* app, Overrides& o) {
  app->add_option("--devices", o.devices, "number of devices D");
  app->add_option("--slice-size", o.slice_size, "inputs per slice S");
  app->add_option("--slices", o.slices, "slices per batch B");
  app->add_option("--taps", o.taps, "FIR taps M");
  app->add_option("--t-max", o.t_max, "optimizer iterations");
  app->add_option("--eps-max", o.eps_max, "epsilon bound");
  app->add_option("--channel-shift", o.shift, "eval-day shift magnitude");
  app->add_option("--epochs", o.epochs, "training epochs");
  app->add_option("--lr", o.lr, "learning rate");
  app->add_option("--noise", o.noise, "capture noise std");
  app->add_option("--sessions", o.sessions, "train-day sessions per device");
  app->add_option("--examples", o.examples, "examples per train-day session");
  app->add_option("--link-frames", o.link_frames, "frames for the link check (0 skips it)");
  app->add_option("--link-noise", o.link_noise, "noise std for the link check");
}

void apply(const Overrides& o, harness::ExperimentConfig& c) {
  if (o.devices) {
    c.num_devices = *o.devices;
    c.model.num_classes = *o.devices;
    std::get<cnn::DenseSpec>(c.model.layers.back()).units = *o.devices;
  }
  if (o.slice_size) c.slice_size = *o.slice_size;
  if (o.slices) c.slices_per_batch = *o.slices;
  if (o.taps) c.num_taps = *o.taps;
  if (o.t_max) c.t_max = *o.t_max;
  if (o.eps_max) c.eps_max = *o.eps_max;
  if (o.shift) c.channel_shift = *o.shift;
  if (o.epochs) c.train.epochs = *o.epochs;
  if (o.lr) c.train.learning_rate = *o.lr;
  if (o.noise) c.noise_std = *o.noise;
  if (o.sessions) c.train_sessions = *o.sessions;
  if (o.examples) c.train_examples_per_session = *o.examples;
  if (o.link_frames) c.link_frames = *o.link_frames;
  if (o.link_noise) c.link_noise_std = *o.link_noise;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw InvalidInput("cannot open '" + p.string() + "'");
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput("'" + p.string() + "': " + e.what());
  }
}

void write_json(const fs::path& p, const nlohmann::json& j) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw Error("cannot open '" + p.string() + "' for writing");
  os << j.dump(2) << '\n';
}

harness::ExperimentConfig load_experiment(const fs::path& dir, std::uint64_t seed, const Overrides& o) {
  auto cfg = harness::experiment_config_from_json(read_json(dir / "config.json"));
  if (cfg.seed != seed)
    throw InvalidInput("--seed " + std::to_string(seed) + " does not match the experiment seed " +
                       std::to_string(cfg.seed));
  apply(o, cfg);
  cfg.validate();
  return cfg;
}

std::string rec_name(const io::Recording& r) {
  if (r.epoch == io::CaptureEpoch::eval) return "eval_dev" + std::to_string(r.device_id);
  return "train_dev" + std::to_string(r.device_id) + "_s" + std::to_string(r.session);
}

harness::RecordingSet load_recordings(const fs::path& dir, const harness::ExperimentConfig& cfg) {
  const auto rdir = dir / "recordings";
  if (!fs::is_directory(rdir)) throw InvalidInput("no recordings in '" + dir.string() + "'; run simulate first");
  std::vector<fs::path> bases;
  for (const auto& e : fs::directory_iterator(rdir))
    if (e.path().extension() == ".json") bases.push_back(e.path().parent_path() / e.path().stem());
  std::sort(bases.begin(), bases.end());
  harness::RecordingSet set;
  set.devices = harness::make_devices(cfg);
  std::map<int, io::Recording> eval;
  for (const auto& b : bases) {
    auto rec = io::read_recording(b, cfg.ofdm);
    if (rec.device_id < 1 || static_cast<std::size_t>(rec.device_id) > cfg.num_devices)
      throw InvalidInput("recording '" + b.string() + "' has device id outside the registry");
    if (rec.epoch == io::CaptureEpoch::eval)
      eval[rec.device_id] = std::move(rec);
    else
      set.train.push_back(std::move(rec));
  }
  for (std::size_t d = 1; d <= cfg.num_devices; ++d) {
    auto it = eval.find(static_cast<int>(d));
    if (it == eval.end()) throw InvalidInput("missing eval-day recording for device " + std::to_string(d));
    set.eval.push_back(std::move(it->second));
  }
  return set;
}

cnn::Model load_model(const fs::path& dir) {
  const auto p = dir / "model.rfpm";
  if (!fs::exists(p)) throw InvalidInput("no model in '" + dir.string() + "'; run train first");
  return cnn::load(p.string());
}

fs::path filter_path(const fs::path& dir, int device, std::size_t epoch) {
  return dir / "filters" / ("device" + std::to_string(device) + "_epoch" + std::to_string(epoch) + ".json");
}

/// Latest filter message for a device, if any.
std::optional<wop::FilterMessage> latest_filter(const fs::path& dir, int device) {
  std::optional<wop::FilterMessage> best;
  const auto fdir = dir / "filters";
  if (!fs::is_directory(fdir)) return best;
  for (const auto& e : fs::directory_iterator(fdir)) {
    if (e.path().extension() != ".json") continue;
    auto msg = wop::filter_message_from_json(read_json(e.path()));
    if (msg.device_id == device && (!best || msg.epoch_index > best->epoch_index)) best = std::move(msg);
  }
  return best;
}

void print_report(const harness::MetricsReport& r) {
  std::printf("device %d target %d  PSA %.3f -> %.3f  PBA %.3f -> %.3f  eps %.4f\n", r.device_id,
              r.target_id, r.psa_before, r.psa_after, r.pba_before, r.pba_after, r.filter.epsilon);
  if (r.link_unfiltered && r.link_filtered)
    std::printf("  link PER %.4f -> %.4f  throughput %.3f -> %.3f kbit/s\n", r.link_unfiltered->per,
                r.link_filtered->per, r.link_unfiltered->throughput_kbps, r.link_filtered->throughput_kbps);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic RF fingerprinting with transmitter-side FIR optimization"};
  app.require_subcommand(1);

  std::string config_path, dir_str;
  std::uint64_t seed = 0;
  Overrides ov;
  int device = 1, adversary = 1;
  std::size_t epoch_index = 0;

  auto* sim = app.add_subcommand("simulate", "generate train-day and eval-day recordings");
  sim->add_option("--config", config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
  sim->add_option("--out", dir_str, "experiment directory")->required();
  sim->add_option("--seed", seed, "experiment seed")->required();
  add_overrides(sim, ov);

  auto* trn = app.add_subcommand("train", "train the classifier on train-day recordings");
  auto* opt = app.add_subcommand("optimize", "optimize a filter for one device");
  auto* evl = app.add_subcommand("evaluate", "run the pipeline for every device");
  auto* adv = app.add_subcommand("adversary", "replay victims' filters on an adversary");
  for (auto* sc : {trn, opt, evl, adv}) {
    sc->add_option("--dir", dir_str, "experiment directory")->required()->check(CLI::ExistingDirectory);
    sc->add_option("--seed", seed, "experiment seed")->required();
    add_overrides(sc, ov);
  }
  opt->add_option("--device", device, "device id (1-based)")->required();
  opt->add_option("--epoch", epoch_index, "epoch index; warm-starts from the previous epoch's filter");
  adv->add_option("--adversary", adversary, "adversary device id (1-based)")->required();

  auto* rep = app.add_subcommand("report", "summarize an experiment's CSV reports");
  rep->add_option("--dir", dir_str, "experiment directory")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  const fs::path dir(dir_str);
  try {
    if (*sim) {
      harness::ExperimentConfig cfg;
      if (!config_path.empty()) cfg = harness::experiment_config_from_json(read_json(config_path));
      cfg.seed = seed;
      apply(ov, cfg);
      cfg.validate();
      auto set = harness::generate_dataset(cfg);
      write_json(dir / "config.json", harness::to_json(cfg));
      fs::create_directories(dir / "recordings");
      for (const auto* group : {&set.train, &set.eval})
        for (const auto& r : *group) io::write_recording(dir / "recordings" / rec_name(r), r, cfg.ofdm);
      std::printf("wrote %zu train-day and %zu eval-day recordings to %s\n", set.train.size(),
                  set.eval.size(), dir.string().c_str());
    } else if (*trn) {
      const auto cfg = load_experiment(dir, seed, ov);
      const auto set = load_recordings(dir, cfg);
      const auto data = harness::training_data(cfg, set);
      const auto t0 = std::chrono::steady_clock::now();
      const auto model = harness::train_model(cfg, data.train);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      cnn::save(model, (dir / "model.rfpm").string());
      std::printf("trained on %zu examples in %.1f s; train accuracy %.4f", data.train.inputs.size(), secs,
                  cnn::accuracy(model, data.train));
      if (!data.heldout.inputs.empty()) std::printf(", held-out accuracy %.4f", cnn::accuracy(model, data.heldout));
      std::printf("\n");
    } else if (*opt) {
      const auto cfg = load_experiment(dir, seed, ov);
      const auto set = load_recordings(dir, cfg);
      const auto model = load_model(dir);
      std::optional<FirFilter> current;
      if (epoch_index > 0) {
        const auto p = filter_path(dir, device, epoch_index - 1);
        if (!fs::exists(p)) throw InvalidInput("no filter for epoch " + std::to_string(epoch_index - 1));
        current = wop::filter_message_from_json(read_json(p)).taps;
      }
      const auto r = harness::run_fingerprint_pipeline(cfg, device, model, set, current, epoch_index);
      write_json(filter_path(dir, device, epoch_index), wop::to_json(r.filter));
      harness::emit_report({r}, dir / ("optimize_device" + std::to_string(device) + ".csv"));
      print_report(r);
    } else if (*evl) {
      const auto cfg = load_experiment(dir, seed, ov);
      const auto set = load_recordings(dir, cfg);
      const auto model = load_model(dir);
      std::vector<harness::MetricsReport> reports;
      harness::ConfusionMatrix before(cfg.num_devices), after(cfg.num_devices);
      for (std::size_t d = 1; d <= cfg.num_devices; ++d) {
        const int id = static_cast<int>(d);
        auto r = harness::run_fingerprint_pipeline(cfg, id, model, set);
        write_json(filter_path(dir, id, 0), wop::to_json(r.filter));
        before.merge(r.confusion_before);
        after.merge(r.confusion_after);
        print_report(r);
        reports.push_back(std::move(r));
      }
      harness::emit_report(reports, dir / "evaluate.csv");
      harness::emit_confusion(before, dir / "confusion_before.csv");
      harness::emit_confusion(after, dir / "confusion_after.csv");
    } else if (*adv) {
      const auto cfg = load_experiment(dir, seed, ov);
      const auto set = load_recordings(dir, cfg);
      const auto model = load_model(dir);
      std::vector<harness::MetricsReport> reports;
      for (std::size_t v = 1; v <= cfg.num_devices; ++v) {
        const int victim = static_cast<int>(v);
        if (victim == adversary) continue;
        auto msg = latest_filter(dir, victim);
        if (!msg) {
          const auto r = harness::run_fingerprint_pipeline(cfg, victim, model, set);
          write_json(filter_path(dir, victim, 0), wop::to_json(r.filter));
          msg = r.filter;
        }
        auto r = harness::run_adversary(cfg, adversary, victim, msg->taps, model,
                                        set.eval_for(static_cast<std::size_t>(adversary - 1)));
        std::printf("adversary %d as victim %d  PSA %.3f -> %.3f  PBA %.3f -> %.3f  (as self PBA %.3f -> %.3f)\n",
                    adversary, victim, r.psa_before, r.psa_after, r.pba_before, r.pba_after,
                    *r.pba_self_before, *r.pba_self_after);
        reports.push_back(std::move(r));
      }
      harness::emit_report(reports, dir / ("adversary" + std::to_string(adversary) + ".csv"));
    } else if (*rep) {
      std::vector<fs::path> csvs;
      for (const auto& e : fs::directory_iterator(dir))
        if (e.path().extension() == ".csv" && e.path().stem().string().rfind("confusion", 0) != 0)
          csvs.push_back(e.path());
      std::sort(csvs.begin(), csvs.end());
      if (csvs.empty()) throw InvalidInput("no reports in '" + dir.string() + "'");
      for (const auto& p : csvs) {
        std::map<std::string, std::pair<double, std::size_t>> acc;
        for (const auto& row : harness::read_report(p)) {
          if (row.metric.find("_slice_") != std::string::npos) continue;
          auto& a = acc[row.metric];
          a.first += row.value;
          ++a.second;
        }
        std::printf("%s\n", p.filename().string().c_str());
        for (const auto& [metric, a] : acc)
          std::printf("  %-28s mean %.6g over %zu rows\n", metric.c_str(), a.first / static_cast<double>(a.second),
                      a.second);
      }
    }
  } catch (const InvalidInput& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
