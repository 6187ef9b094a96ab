#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "unidiff/dataset.hpp"

using namespace unidiff;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("unidiff_test_dataset_" + name);
  fs::remove_all(p);
  return p;
}

bool same_tensor(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

Dataset ten_samples() {
  Dataset ds;
  ds.samples = render_dataset(10, Style::A, 16, 77, "s");
  ds.resolution = 16;
  return ds;
}

void flip_byte(const fs::path& file, std::size_t at) {
  std::fstream f(file, std::ios::binary | std::ios::in | std::ios::out);
  f.seekg(static_cast<std::streamoff>(at));
  char c;
  f.read(&c, 1);
  c = static_cast<char>(c ^ 0x5a);
  f.seekp(static_cast<std::streamoff>(at));
  f.write(&c, 1);
}

}  // namespace

TEST(DatasetIo, RoundTripIsBitExact) {
  const fs::path dir = scratch("roundtrip");
  const Dataset ds = ten_samples();
  write_dataset(ds, dir);
  const Dataset back = read_dataset(dir);
  ASSERT_EQ(back.size(), ds.size());
  EXPECT_EQ(back.resolution, 16);
  for (int i = 0; i < ds.size(); ++i) {
    const Sample &a = ds.samples[static_cast<std::size_t>(i)], &b = back.samples[static_cast<std::size_t>(i)];
    EXPECT_TRUE(same_tensor(a.image, b.image));
    EXPECT_TRUE(same_tensor(a.normals, b.normals));
    EXPECT_TRUE(same_tensor(a.depth, b.depth));
    EXPECT_EQ(a.seg, b.seg);
    EXPECT_EQ(a.valid, b.valid);
    EXPECT_EQ(a.descriptor, b.descriptor);
    EXPECT_EQ(a.id, b.id);
    EXPECT_EQ(a.style, b.style);
  }
  fs::remove_all(dir);
}

TEST(DatasetIo, ManifestCountMatchesStoredRecords) {
  const fs::path dir = scratch("count");
  write_dataset(ten_samples(), dir);
  const auto m = nlohmann::json::parse(std::ifstream(dir / "manifest"));
  EXPECT_EQ(m.at("count").get<int>(), 10);
  EXPECT_EQ(m.at("samples").size(), 10u);
  const std::size_t per = m.at("samples")[0].at("floats");
  EXPECT_EQ(fs::file_size(dir / "tensors.bin"), 10 * per * sizeof(float));
  fs::remove_all(dir);
}

TEST(DatasetIo, ImageOnlyStoreWithProvenance) {
  const fs::path dir = scratch("store");
  Dataset ds;
  ds.kind = "synthetic-store";
  ds.resolution = 16;
  for (int i = 0; i < 3; ++i) {
    Sample s;
    s.image = Tensor<float>({3, 16, 16}, 0.25f * static_cast<float>(i));
    s.descriptor.assign(kDescriptorDim, 0.5f);
    s.id = "g" + std::to_string(i);
    ds.samples.push_back(s);
    ds.provenance.push_back({"ref" + std::to_string(i), 600, "abcd1234", 1000u + static_cast<unsigned>(i)});
  }
  write_dataset(ds, dir);
  const Dataset back = read_dataset(dir);
  EXPECT_EQ(back.kind, "synthetic-store");
  ASSERT_EQ(back.provenance.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(back.provenance[static_cast<std::size_t>(i)], ds.provenance[static_cast<std::size_t>(i)]);
    EXPECT_FALSE(back.samples[static_cast<std::size_t>(i)].has_labels());
    EXPECT_TRUE(same_tensor(back.samples[static_cast<std::size_t>(i)].image, ds.samples[static_cast<std::size_t>(i)].image));
  }
  fs::remove_all(dir);
}

TEST(DatasetIo, CorruptedByteRaisesChecksumError) {
  const fs::path dir = scratch("corrupt");
  write_dataset(ten_samples(), dir);
  flip_byte(dir / "tensors.bin", 4 * 1000 + 1);
  EXPECT_THROW(read_dataset(dir), ChecksumError);
  fs::remove_all(dir);
}

TEST(DatasetIo, TruncatedBlobRaisesTruncationError) {
  const fs::path dir = scratch("truncated");
  write_dataset(ten_samples(), dir);
  fs::resize_file(dir / "tensors.bin", fs::file_size(dir / "tensors.bin") - 8);
  EXPECT_THROW(read_dataset(dir), TruncatedBlobError);
  fs::remove_all(dir);
}

TEST(DatasetIo, VersionMismatchIsDistinct) {
  const fs::path dir = scratch("version");
  write_dataset(ten_samples(), dir);
  auto m = nlohmann::json::parse(std::ifstream(dir / "manifest"));
  m["version"] = 99;
  std::ofstream(dir / "manifest") << m.dump();
  EXPECT_THROW(read_dataset(dir), VersionMismatchError);
  fs::remove_all(dir);
}

TEST(DatasetIo, MissingDirectoryIsIoError) { EXPECT_THROW(read_dataset(scratch("missing")), IoError); }

TEST(Batches, StackImagesTargetsAndMasks) {
  const Dataset ds = ten_samples();
  const std::vector<int> idx{3, 7};
  const Batch b = make_batch(ds.samples, idx, Task::segmentation);
  EXPECT_EQ(b.images.shape(), (Shape{2, 3, 16, 16}));
  EXPECT_EQ(b.targets.shape(), (Shape{2, 1, 16, 16}));
  EXPECT_EQ(b.mask.size(), 2u * 256);
  EXPECT_EQ(b.targets[0], static_cast<float>(ds.samples[3].seg[0]));
  EXPECT_FALSE(b.conds[0].null_flag);
  const Batch u = make_batch(ds.samples, idx, Task::normals, false);
  EXPECT_TRUE(u.conds[1].null_flag);
  EXPECT_EQ(u.targets.shape(), (Shape{2, 3, 16, 16}));
}
