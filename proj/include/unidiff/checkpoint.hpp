#pragma once

// Checkpoint directory: `manifest` (JSON: parameter-set names, shapes, offsets,
// schedule, digests, free-form state) + `params.bin` (little-endian float32).

#include <cstring>
#include <filesystem>
#include <map>
#include <string>

#include <nlohmann/json.hpp>

#include "unidiff/dataset.hpp"
#include "unidiff/diffusion.hpp"
#include "unidiff/model.hpp"
#include "unidiff/params.hpp"

namespace unidiff {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  NoiseSchedule schedule = default_schedule();
  std::string config_digest;  // digest of the run configuration that produced it
  std::map<std::string, ParamSet<float>> sets;
  nlohmann::json state = nlohmann::json::object();
};

inline std::string schedule_digest(const NoiseSchedule& s) {
  const std::string txt = std::to_string(s.t_max()) + ":" + std::to_string(s.beta(1)) + ":" + std::to_string(s.beta(s.t_max()));
  return hex32(crc32_bytes(txt.data(), txt.size()));
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  std::vector<float> blob;
  nlohmann::json sets = nlohmann::json::object();
  for (const auto& [set_name, ps] : ck.sets) {
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& [name, t] : ps.entries()) {
      entries.push_back({{"name", name}, {"shape", t.shape()}, {"offset", blob.size()}});
      blob.insert(blob.end(), t.vec().begin(), t.vec().end());
    }
    sets[set_name] = entries;
  }
  nlohmann::json m = {{"format", "unidiff-checkpoint"},
                      {"version", kCheckpointVersion},
                      {"model", ck.model.to_json()},
                      {"architecture_digest", ck.model.digest()},
                      {"config_digest", ck.config_digest},
                      {"schedule",
                       {{"t_max", ck.schedule.t_max()},
                        {"beta_start", ck.schedule.beta(1)},
                        {"beta_end", ck.schedule.beta(ck.schedule.t_max())},
                        {"digest", schedule_digest(ck.schedule)}}},
                      {"blob_floats", blob.size()},
                      {"blob_crc32", hex32(crc32_bytes(blob.data(), blob.size() * sizeof(float)))},
                      {"sets", sets},
                      {"state", ck.state}};
  detail::write_atomic(dir / "params.bin", blob.data(), blob.size() * sizeof(float));
  const std::string text = m.dump(1);
  detail::write_atomic(dir / "manifest", text.data(), text.size());
}

/// Loads a checkpoint. When `expected_model` is given, its architecture digest
/// must match the stored one.
inline Checkpoint load_checkpoint(const std::filesystem::path& dir, const ModelConfig* expected_model = nullptr) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(detail::read_file(dir / "manifest"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed checkpoint manifest in '" + dir.string() + "': " + e.what());
  }
  if (m.value("format", "") != "unidiff-checkpoint") throw FormatError("'" + dir.string() + "' is not a checkpoint");
  if (m.value("version", -1) != kCheckpointVersion)
    throw VersionMismatchError("checkpoint version " + m["version"].dump() + ", expected " +
                               std::to_string(kCheckpointVersion));
  Checkpoint ck;
  ck.model = ModelConfig::from_json(m.at("model"));
  if (ck.model.digest() != m.at("architecture_digest").get<std::string>())
    throw DigestMismatchError("stored architecture digest does not match stored model config");
  if (expected_model && expected_model->digest() != ck.model.digest())
    throw DigestMismatchError("checkpoint architecture " + ck.model.digest() + " differs from configured " +
                              expected_model->digest());
  const auto& sj = m.at("schedule");
  ck.schedule = build_schedule(sj.at("t_max"), sj.at("beta_start"), sj.at("beta_end"));
  if (schedule_digest(ck.schedule) != sj.at("digest").get<std::string>())
    throw DigestMismatchError("schedule digest mismatch");
  ck.config_digest = m.at("config_digest");
  ck.state = m.at("state");

  const std::string raw = detail::read_file(dir / "params.bin");
  const std::size_t floats = m.at("blob_floats");
  if (raw.size() != floats * sizeof(float))
    throw TruncatedBlobError("params.bin holds " + std::to_string(raw.size()) + " bytes, manifest expects " +
                             std::to_string(floats * sizeof(float)));
  if (hex32(crc32_bytes(raw.data(), raw.size())) != m.at("blob_crc32").get<std::string>())
    throw ChecksumError("checksum mismatch in '" + (dir / "params.bin").string() + "'");
  std::vector<float> blob(floats);
  std::memcpy(blob.data(), raw.data(), raw.size());
  const float* base = blob.data();
  for (const auto& [set_name, entries] : m.at("sets").items()) {
    ParamSet<float> ps;
    for (const auto& e : entries) {
      Shape shape = e.at("shape").get<Shape>();
      const std::size_t off = e.at("offset"), n = shape_size(shape);
      if (off + n > floats) throw TruncatedBlobError("parameter '" + e.at("name").get<std::string>() + "' exceeds blob");
      ps.add(e.at("name"), Tensor<float>(shape, std::vector<float>(base + off, base + off + n)));
    }
    ck.sets.emplace(set_name, std::move(ps));
  }
  return ck;
}

}  // namespace unidiff
