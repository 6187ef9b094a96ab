#pragma once

// On-disk container for samples: `manifest` (JSON) next to `tensors.bin`
// (little-endian float32, one contiguous record per sample).

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unidiff/losses.hpp"
#include "unidiff/params.hpp"
#include "unidiff/scene.hpp"

namespace unidiff {

inline constexpr int kDatasetVersion = 1;

/// Origin of a generated image in a synthetic store.
struct Provenance {
  std::string source_id;
  int source_t = 0;
  std::string theta_digest;
  std::uint64_t noise_seed = 0;

  bool operator==(const Provenance&) const = default;
};

struct Dataset {
  std::string kind = "dataset";  // or "synthetic-store"
  int resolution = 32;
  std::vector<Sample> samples;
  std::vector<Provenance> provenance;  // parallel to samples for stores
  nlohmann::json meta = nlohmann::json::object();

  int size() const { return static_cast<int>(samples.size()); }
};

static_assert(std::endian::native == std::endian::little, "tensors.bin is written in native little-endian order");

namespace detail {

inline void append(std::vector<float>& buf, std::span<const float> v) { buf.insert(buf.end(), v.begin(), v.end()); }

inline std::vector<float> sample_record(const Sample& s, bool labels) {
  std::vector<float> r;
  append(r, s.image.span());
  if (labels) {
    append(r, s.normals.span());
    append(r, s.depth.span());
    for (int c : s.seg) r.push_back(static_cast<float>(c));
    for (auto v : s.valid) r.push_back(v ? 1.0f : 0.0f);
  }
  append(r, s.descriptor);
  return r;
}

inline std::size_t record_floats(int res, bool labels, int desc) {
  const std::size_t hw = static_cast<std::size_t>(res) * res;
  return 3 * hw + (labels ? 3 * hw + hw + hw + hw : 0) + static_cast<std::size_t>(desc);
}

inline void write_atomic(const std::filesystem::path& path, const void* data, std::size_t bytes) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open '" + tmp + "' for writing");
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
    if (!f) throw IoError("write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename '" + tmp + "': " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace detail

inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
  const bool labels = ds.samples.empty() || ds.samples.front().has_labels();
  const int desc = ds.samples.empty() ? kDescriptorDim : static_cast<int>(ds.samples.front().descriptor.size());
  std::vector<float> blob;
  nlohmann::json items = nlohmann::json::array();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    if (s.size() != ds.resolution) throw ShapeError("sample '" + s.id + "' resolution differs from dataset");
    if (s.has_labels() != labels) throw ShapeError("sample '" + s.id + "' label presence differs from dataset");
    if (static_cast<int>(s.descriptor.size()) != desc) throw ShapeError("sample '" + s.id + "' descriptor size");
    std::vector<float> rec = detail::sample_record(s, labels);
    nlohmann::json item = {{"id", s.id},
                           {"offset", blob.size()},
                           {"floats", rec.size()},
                           {"crc32", hex32(crc32_bytes(rec.data(), rec.size() * sizeof(float)))},
                           {"style", to_string(s.style)}};
    if (i < ds.provenance.size()) {
      const Provenance& p = ds.provenance[i];
      item["source_id"] = p.source_id;
      item["source_t"] = p.source_t;
      item["theta_digest"] = p.theta_digest;
      item["noise_seed"] = p.noise_seed;
    }
    items.push_back(item);
    blob.insert(blob.end(), rec.begin(), rec.end());
  }
  nlohmann::json m = {{"format", "unidiff-samples"},
                      {"version", kDatasetVersion},
                      {"kind", ds.kind},
                      {"resolution", ds.resolution},
                      {"count", ds.samples.size()},
                      {"labels", labels},
                      {"descriptor_dim", desc},
                      {"num_classes", kNumClasses},
                      {"blob_floats", blob.size()},
                      {"blob_crc32", hex32(crc32_bytes(blob.data(), blob.size() * sizeof(float)))},
                      {"meta", ds.meta},
                      {"samples", items}};
  detail::write_atomic(dir / "tensors.bin", blob.data(), blob.size() * sizeof(float));
  const std::string text = m.dump(1);
  detail::write_atomic(dir / "manifest", text.data(), text.size());
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(detail::read_file(dir / "manifest"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed manifest in '" + dir.string() + "': " + e.what());
  }
  if (m.value("format", "") != "unidiff-samples") throw FormatError("'" + dir.string() + "' is not a sample container");
  if (m.value("version", -1) != kDatasetVersion)
    throw VersionMismatchError("container version " + m["version"].dump() + ", expected " +
                               std::to_string(kDatasetVersion));
  const std::string raw = detail::read_file(dir / "tensors.bin");
  const std::size_t floats = m.at("blob_floats");
  if (raw.size() != floats * sizeof(float))
    throw TruncatedBlobError("tensors.bin holds " + std::to_string(raw.size()) + " bytes, manifest expects " +
                             std::to_string(floats * sizeof(float)));
  std::vector<float> blob(floats);
  std::memcpy(blob.data(), raw.data(), raw.size());

  Dataset ds;
  ds.kind = m.at("kind");
  ds.resolution = m.at("resolution");
  ds.meta = m.value("meta", nlohmann::json::object());
  const bool labels = m.at("labels");
  const int desc = m.at("descriptor_dim");
  const int r = ds.resolution, hw = r * r;
  const std::size_t expect = detail::record_floats(r, labels, desc);
  const auto& items = m.at("samples");
  if (items.size() != m.at("count").get<std::size_t>()) throw FormatError("manifest count disagrees with sample list");
  for (const auto& it : items) {
    const std::size_t off = it.at("offset"), n = it.at("floats");
    if (n != expect) throw FormatError("sample record size " + std::to_string(n) + ", expected " + std::to_string(expect));
    if (off + n > blob.size()) throw TruncatedBlobError("sample '" + it.at("id").get<std::string>() + "' exceeds blob");
    const float* p = blob.data() + off;
    if (hex32(crc32_bytes(p, n * sizeof(float))) != it.at("crc32").get<std::string>())
      throw ChecksumError("checksum mismatch for sample '" + it.at("id").get<std::string>() + "'");
    Sample s;
    s.id = it.at("id");
    s.style = parse_style(it.at("style"));
    s.image = Tensor<float>({3, r, r}, std::vector<float>(p, p + 3 * hw));
    p += 3 * hw;
    if (labels) {
      s.normals = Tensor<float>({3, r, r}, std::vector<float>(p, p + 3 * hw));
      p += 3 * hw;
      s.depth = Tensor<float>({1, r, r}, std::vector<float>(p, p + hw));
      p += hw;
      s.seg.resize(static_cast<std::size_t>(hw));
      for (int i = 0; i < hw; ++i) s.seg[static_cast<std::size_t>(i)] = static_cast<int>(p[i]);
      p += hw;
      s.valid.resize(static_cast<std::size_t>(hw));
      for (int i = 0; i < hw; ++i) s.valid[static_cast<std::size_t>(i)] = p[i] != 0.0f;
      p += hw;
    }
    s.descriptor.assign(p, p + desc);
    ds.samples.push_back(std::move(s));
    if (it.contains("source_id"))
      ds.provenance.push_back({it.at("source_id"), it.at("source_t"), it.at("theta_digest"), it.at("noise_seed")});
  }
  return ds;
}

/// Stacked network inputs and targets for a subset of samples.
struct Batch {
  Tensor<float> images;        // (n, 3, h, w)
  Tensor<float> targets;       // (n, c, h, w) task label map
  Mask mask;                   // (n * h * w)
  std::vector<Condition<float>> conds;
};

/// Label map of one sample for a task: normals (3,h,w), seg (1,h,w) indices, depth (1,h,w).
inline Tensor<float> task_target(const Sample& s, Task task) {
  switch (task) {
    case Task::normals: return s.normals;
    case Task::depth: return s.depth;
    case Task::segmentation: {
      Tensor<float> t({1, s.size(), s.size()});
      for (std::size_t i = 0; i < s.seg.size(); ++i) t[i] = static_cast<float>(s.seg[i]);
      return t;
    }
  }
  throw ParameterError("unknown task");
}

inline Batch make_batch(const std::vector<Sample>& samples, std::span<const int> idx, Task task,
                        bool conditioned = true) {
  std::vector<Tensor<float>> im, tg;
  Batch b;
  for (int i : idx) {
    const Sample& s = samples.at(static_cast<std::size_t>(i));
    im.push_back(s.image);
    if (s.has_labels()) {
      tg.push_back(task_target(s, task));
      b.mask.insert(b.mask.end(), s.valid.begin(), s.valid.end());
    }
    b.conds.push_back(conditioned ? Condition<float>::of(s.descriptor)
                                  : Condition<float>::null(static_cast<int>(s.descriptor.size())));
  }
  b.images = stack(std::span<const Tensor<float>>(im));
  if (!tg.empty()) b.targets = stack(std::span<const Tensor<float>>(tg));
  return b;
}

}  // namespace unidiff
