// Copyright 2026 The SBEV Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <fstream>

#include "roundtrip_checks.hpp"
#include "sbev/dataset_io.hpp"
#include "test_util.hpp"

namespace sbev {
namespace {

std::string slurp(const fs::path& p) { return read_file_bytes(p); }

void spill(const fs::path& p, const std::string& bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << bytes;
}

TEST(DatasetIo, SampleRoundTripIsExact) {
  const fs::path dir = testing::temp_dir("io_sample");
  for (std::uint64_t seed : {3u, 11u, 42u}) EXPECT_EQ(testing::sample_roundtrip(dir, seed), "") << seed;
}

TEST(DatasetIo, DepthFileLayout) {
  const fs::path dir = testing::temp_dir("io_depth");
  const std::vector<float> depth{1.5f, -0.0f, 3.25f, 1e30f, 0.0f, 7.0f};
  write_depth(dir / "d.bin", 3, 2, depth);
  const std::string bytes = slurp(dir / "d.bin");
  ASSERT_EQ(bytes.size(), 8u + 24u);
  EXPECT_EQ(bytes.substr(0, 4), "DPTH");
  EXPECT_EQ(std::uint8_t(bytes[4]), 3);
  EXPECT_EQ(std::uint8_t(bytes[5]), 0);
  EXPECT_EQ(std::uint8_t(bytes[6]), 2);
  EXPECT_EQ(std::uint8_t(bytes[7]), 0);
  // 1.5f = 0x3FC00000, little-endian.
  EXPECT_EQ(std::uint8_t(bytes[8]), 0x00);
  EXPECT_EQ(std::uint8_t(bytes[10]), 0xC0);
  EXPECT_EQ(std::uint8_t(bytes[11]), 0x3F);
  int w = 0, h = 0;
  EXPECT_TRUE(testing::same_bits(read_depth(dir / "d.bin", w, h), depth));
  EXPECT_EQ(w, 3);
  EXPECT_EQ(h, 2);
}

TEST(DatasetIo, TruncatedFilesAreRejectedWithPath) {
  const fs::path dir = testing::temp_dir("io_trunc");
  LayoutSpec layout;
  StereoRig rig;
  const Sample s = synthesize_sample("t", sample_scene(8, SceneParams{}, layout, rig), rig, GroundPlane{}, layout);
  const SampleRecord rec = testing::record_for("t");
  for (const std::string* file : {&rec.left, &rec.right, &rec.depth, &rec.gt, &rec.mask, &rec.front}) {
    write_sample(dir, rec, s, nullptr);
    const std::string bytes = slurp(dir / *file);
    spill(dir / *file, bytes.substr(0, bytes.size() - 5));
    try {
      read_sample(dir, rec, layout.n_classes);
      ADD_FAILURE() << "truncated " << *file << " accepted";
    } catch (const DataError& e) {
      EXPECT_NE(std::string(e.what()).find(*file), std::string::npos) << e.what();
    }
  }
}

TEST(DatasetIo, BadMagicAndDimensionsAreRejected) {
  const fs::path dir = testing::temp_dir("io_magic");
  spill(dir / "a.ppm", "P5\n2 2\n255\nabcd");
  EXPECT_THROW(read_ppm(dir / "a.ppm"), DataError);
  spill(dir / "b.bin", std::string("DPTX\x01\x00\x01\x00\x00\x00\x00\x00", 12));
  int w = 0, h = 0;
  EXPECT_THROW(read_depth(dir / "b.bin", w, h), DataError);
  spill(dir / "c.pgm", "P5\n0 2\n255\n");
  EXPECT_THROW(read_pgm(dir / "c.pgm", w, h), DataError);
  EXPECT_THROW(read_pgm(dir / "missing.pgm", w, h), DataError);
}

TEST(DatasetIo, ClassValueOutOfRangeIsRejected) {
  const fs::path dir = testing::temp_dir("io_class");
  LayoutSpec layout;
  StereoRig rig;
  Sample s = synthesize_sample("c", sample_scene(9, SceneParams{}, layout, rig), rig, GroundPlane{}, layout);
  s.gt.classes[17] = std::uint8_t(layout.n_classes);
  const SampleRecord rec = testing::record_for("c");
  write_sample(dir, rec, s, nullptr);
  EXPECT_THROW(read_sample(dir, rec, layout.n_classes), DataError);
  EXPECT_NO_THROW(read_sample(dir, rec, layout.n_classes + 1));
}

TEST(DatasetIo, MaskValuesMustBeBinary) {
  const fs::path dir = testing::temp_dir("io_mask");
  LayoutSpec layout;
  StereoRig rig;
  const Sample s = synthesize_sample("m", sample_scene(10, SceneParams{}, layout, rig), rig, GroundPlane{}, layout);
  const SampleRecord rec = testing::record_for("m");
  write_sample(dir, rec, s, nullptr);
  std::string bytes = slurp(dir / rec.mask);
  bytes.back() = char(7);
  spill(dir / rec.mask, bytes);
  EXPECT_THROW(read_sample(dir, rec, layout.n_classes), DataError);
}

TEST(DatasetIo, ManifestRoundTrip) {
  EXPECT_EQ(testing::manifest_roundtrip(testing::temp_dir("io_manifest")), "");
}

TEST(DatasetIo, ManifestMissingFileDetected) {
  const fs::path dir = testing::temp_dir("io_missing");
  const DatasetManifest m = make_dataset(2, 1, StereoRig{}, GroundPlane{}, LayoutSpec{}, dir, "test");
  fs::remove(dir / m.samples[1].depth);
  try {
    read_manifest(dir / "test.json");
    FAIL() << "missing file accepted";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find(m.samples[1].depth), std::string::npos);
  }
}

TEST(DatasetIo, ManifestSchemaViolationsRejected) {
  const fs::path dir = testing::temp_dir("io_schema");
  make_dataset(1, 1, StereoRig{}, GroundPlane{}, LayoutSpec{}, dir, "train");
  const json good = json::parse(slurp(dir / "train.json"));
  auto expect_reject = [&](json j) {
    spill(dir / "bad.json", j.dump());
    EXPECT_THROW(read_manifest(dir / "bad.json"), DataError) << j.dump().substr(0, 80);
  };
  json j = good;
  j["format_version"] = 99;
  expect_reject(j);
  j = good;
  j.erase("rig");
  expect_reject(j);
  j = good;
  j["classes"].erase(j["classes"].size() - 1);  // palette shorter than N_C
  expect_reject(j);
  j = good;
  j["layout"]["nx"] = "wide";
  expect_reject(j);
  spill(dir / "bad.json", "{not json");
  EXPECT_THROW(read_manifest(dir / "bad.json"), DataError);
}

TEST(DatasetIo, ManifestUnknownFieldsIgnored) {
  const fs::path dir = testing::temp_dir("io_unknown");
  make_dataset(1, 1, StereoRig{}, GroundPlane{}, LayoutSpec{}, dir, "train");
  json j = json::parse(slurp(dir / "train.json"));
  j["comment"] = "extra";
  j["samples"][0]["note"] = 1;
  spill(dir / "extra.json", j.dump());
  ::testing::internal::CaptureStderr();
  const DatasetManifest m = read_manifest(dir / "extra.json");
  const std::string err = ::testing::internal::GetCapturedStderr();
  EXPECT_EQ(m.samples.size(), 1u);
  EXPECT_NE(err.find("comment"), std::string::npos);
  EXPECT_NE(err.find("note"), std::string::npos);
}

TEST(DatasetIo, SplitFilterAndFraction) {
  const fs::path dir = testing::temp_dir("io_split");
  const DatasetManifest train = make_dataset(4, 2, StereoRig{}, GroundPlane{}, LayoutSpec{}, dir, "train");
  EXPECT_EQ(filter_split(train, "train").samples.size(), 4u);
  EXPECT_TRUE(filter_split(train, "test").samples.empty());
  EXPECT_EQ(take_fraction(train, 0.25).samples.size(), 1u);
  EXPECT_EQ(take_fraction(train, 0.5).samples.size(), 2u);
  EXPECT_EQ(take_fraction(train, 0.6).samples.size(), 3u);
  EXPECT_EQ(take_fraction(train, 1.0).samples, train.samples);
  EXPECT_EQ(take_fraction(train, 0.5).samples[1], train.samples[1]);
  EXPECT_THROW(take_fraction(train, 0.0), std::invalid_argument);
}

TEST(DatasetIo, GenerationIsDeterministicAndSplitsDisjoint) {
  const fs::path a = testing::temp_dir("io_gen_a"), b = testing::temp_dir("io_gen_b");
  const DatasetManifest ma = make_dataset(3, 7, StereoRig{}, GroundPlane{}, LayoutSpec{}, a, "train");
  make_dataset(3, 7, StereoRig{}, GroundPlane{}, LayoutSpec{}, b, "train");
  const DatasetManifest test = make_dataset(3, 7, StereoRig{}, GroundPlane{}, LayoutSpec{}, a, "test");
  ASSERT_EQ(ma.samples.size(), 3u);
  for (const auto& rec : ma.samples) {
    for (const std::string* f : {&rec.left, &rec.right, &rec.depth, &rec.gt, &rec.mask, &rec.scene, &rec.front}) {
      EXPECT_EQ(slurp(a / *f), slurp(b / *f)) << *f;
    }
    for (const auto& t : test.samples) EXPECT_NE(rec.seed, t.seed);
  }
  EXPECT_EQ(slurp(a / "train.json"), slurp(b / "train.json"));
  EXPECT_EQ(read_all_samples(read_manifest(a / "train.json")).size(), 3u);
}

TEST(DatasetIo, AtomicWriteLeavesNoTemporaries) {
  const fs::path dir = testing::temp_dir("io_atomic");
  write_file_atomic(dir / "x.txt", "one");
  write_file_atomic(dir / "x.txt", "two");
  EXPECT_EQ(slurp(dir / "x.txt"), "two");
  int n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.is_regular_file();
  EXPECT_EQ(n, 1);
}

}  // namespace
}  // namespace sbev
