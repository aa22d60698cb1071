#pragma once

// Recording files: `<name>.iq` holds little-endian float32 I/Q pairs
// (I0 Q0 I1 Q1 ...) of consecutive received frames; `<name>.json` is the
// sidecar with device id, sample count, frame length, OFDM layout digest,
// channel seed, capture epoch and creation time.

#include <bit>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rfprint/errors.hpp"
#include "rfprint/iqcore.hpp"
#include "rfprint/phy.hpp"

namespace rfprint::io {

enum class CaptureEpoch { train, eval };

inline std::string to_string(CaptureEpoch e) { return e == CaptureEpoch::train ? "train-day" : "eval-day"; }

inline CaptureEpoch capture_epoch_from_string(const std::string& s) {
  if (s == "train-day") return CaptureEpoch::train;
  if (s == "eval-day") return CaptureEpoch::eval;
  throw InvalidInput("unknown capture epoch '" + s + "'");
}

/// Received frames of one device from one capture session.
struct Recording {
  int device_id = 1;
  CaptureEpoch epoch = CaptureEpoch::train;
  std::size_t session = 0;
  std::uint64_t channel_seed = 0;
  std::vector<IQFrame> frames;
};

struct RecordingMeta {
  int device_id = 1;
  std::size_t sample_count = 0;
  std::size_t frame_length = 0;
  std::string ofdm_digest;
  std::uint64_t channel_seed = 0;
  CaptureEpoch epoch = CaptureEpoch::train;
  std::size_t session = 0;
  std::string created;
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline nlohmann::json to_json(const RecordingMeta& m) {
  return {{"device_id", m.device_id},     {"sample_count", m.sample_count},
          {"frame_length", m.frame_length}, {"ofdm_config_digest", m.ofdm_digest},
          {"channel_seed", m.channel_seed}, {"capture_epoch", to_string(m.epoch)},
          {"session", m.session},         {"created", m.created}};
}

inline RecordingMeta recording_meta_from_json(const nlohmann::json& j) {
  try {
    RecordingMeta m;
    m.device_id = j.at("device_id").get<int>();
    m.sample_count = j.at("sample_count").get<std::size_t>();
    m.frame_length = j.at("frame_length").get<std::size_t>();
    m.ofdm_digest = j.at("ofdm_config_digest").get<std::string>();
    m.channel_seed = j.at("channel_seed").get<std::uint64_t>();
    m.epoch = capture_epoch_from_string(j.at("capture_epoch").get<std::string>());
    m.session = j.value("session", std::size_t{0});
    m.created = j.value("created", std::string{});
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(std::string("recording sidecar: ") + e.what());
  }
}

inline void write_iq(const std::filesystem::path& path, const std::vector<IQFrame>& frames) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  for (const auto& f : frames) {
    for (const auto& s : f) {
      for (float v : {static_cast<float>(s.real()), static_cast<float>(s.imag())}) {
        auto bits = std::bit_cast<std::uint32_t>(v);
        unsigned char b[4] = {static_cast<unsigned char>(bits), static_cast<unsigned char>(bits >> 8),
                              static_cast<unsigned char>(bits >> 16),
                              static_cast<unsigned char>(bits >> 24)};
        os.write(reinterpret_cast<const char*>(b), 4);
      }
    }
  }
  if (!os) throw Error("write to '" + path.string() + "' failed");
}

inline std::vector<Complex> read_iq(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path.string() + "'");
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (raw.size() % 8 != 0)
    throw CorruptFile("'" + path.string() + "' does not hold whole I/Q float32 pairs");
  std::vector<Complex> out(raw.size() / 8);
  auto rd = [&raw](std::size_t off) {
    const std::uint32_t bits = static_cast<std::uint32_t>(raw[off]) |
                               (static_cast<std::uint32_t>(raw[off + 1]) << 8) |
                               (static_cast<std::uint32_t>(raw[off + 2]) << 16) |
                               (static_cast<std::uint32_t>(raw[off + 3]) << 24);
    return static_cast<double>(std::bit_cast<float>(bits));
  };
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {rd(8 * i), rd(8 * i + 4)};
  return out;
}

/// Writes `<base>.iq` and `<base>.json`.
inline void write_recording(const std::filesystem::path& base, const Recording& rec,
                            const phy::OfdmConfig& cfg) {
  detail::require(!rec.frames.empty(), "write_recording: no frames");
  RecordingMeta meta;
  meta.device_id = rec.device_id;
  meta.frame_length = rec.frames.front().size();
  for (const auto& f : rec.frames) {
    detail::require(f.size() == meta.frame_length, "write_recording: frames differ in length");
    meta.sample_count += f.size();
  }
  meta.ofdm_digest = phy::digest(cfg);
  meta.channel_seed = rec.channel_seed;
  meta.epoch = rec.epoch;
  meta.session = rec.session;
  meta.created = utc_timestamp();
  write_iq(base.string() + ".iq", rec.frames);
  std::ofstream js(base.string() + ".json", std::ios::trunc);
  if (!js) throw Error("cannot open '" + base.string() + ".json' for writing");
  js << to_json(meta).dump(2) << '\n';
}

inline Recording read_recording(const std::filesystem::path& base, const phy::OfdmConfig& cfg) {
  std::ifstream js(base.string() + ".json");
  if (!js) throw Error("cannot open '" + base.string() + ".json'");
  nlohmann::json j;
  try {
    js >> j;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(std::string("recording sidecar: ") + e.what());
  }
  const auto meta = recording_meta_from_json(j);
  if (meta.ofdm_digest != phy::digest(cfg))
    throw InvalidInput("recording '" + base.string() + "' was made with a different OFDM layout");
  const auto samples = read_iq(base.string() + ".iq");
  if (samples.size() != meta.sample_count || meta.frame_length == 0 ||
      samples.size() % meta.frame_length != 0)
    throw CorruptFile("recording '" + base.string() + "': sample count does not match sidecar");
  Recording rec;
  rec.device_id = meta.device_id;
  rec.epoch = meta.epoch;
  rec.session = meta.session;
  rec.channel_seed = meta.channel_seed;
  for (std::size_t off = 0; off < samples.size(); off += meta.frame_length)
    rec.frames.emplace_back(std::vector<Complex>(samples.begin() + static_cast<std::ptrdiff_t>(off),
                                                 samples.begin() + static_cast<std::ptrdiff_t>(off + meta.frame_length)));
  return rec;
}

}  // namespace rfprint::io
