#include <gtest/gtest.h>

#include <random>

#include "emphseg/binary_io.hpp"
#include "emphseg/core_data.hpp"
#include "emphseg/errors.hpp"
#include "test_support.hpp"

using namespace emphseg;
using emphseg::testing::random_volume;
using emphseg::testing::TempDir;

namespace {

CtVolume small_volume() {
  Dims3 d{2, 2, 2};
  return CtVolume("S1", ScannerTag("A"), d, {-1000, -960, -900, 40, -1024, -951, -949, 0}, {1, 1, 1, 0, 1, 1, 1, 0},
                  {1, 0, 0, 0, 1, 1, 0, 0});
}

}  // namespace

TEST(CtVolume, RejectsEmphysemaOutsideLung) {
  EXPECT_THROW(CtVolume("x", ScannerTag("A"), {1, 1, 2}, {0, 0}, {1, 0}, {0, 1}), ContractError);
}

TEST(CtVolume, RejectsOutOfRangeHu) {
  EXPECT_THROW(CtVolume("x", ScannerTag("A"), {1, 1, 1}, {-1025}, {0}, {0}), ContractError);
  EXPECT_THROW(CtVolume("x", ScannerTag("A"), {1, 1, 1}, {3072}, {0}, {0}), ContractError);
}

TEST(CtVolume, RejectsShapeMismatchAndBadIds) {
  EXPECT_THROW(CtVolume("x", ScannerTag("A"), {1, 1, 2}, {0}, {0, 0}, {0, 0}), ContractError);
  EXPECT_THROW(CtVolume("", ScannerTag("A"), {1, 1, 1}, {0}, {0}, {0}), ContractError);
  EXPECT_THROW(CtVolume("x", ScannerTag(""), {1, 1, 1}, {0}, {0}, {0}), ContractError);
  EXPECT_THROW(CtVolume("x", ScannerTag("A"), {1, 1, 1}, {0}, {2}, {0}), ContractError);
}

TEST(CtVolume, ReservedMetadataKeysRejected) {
  EXPECT_THROW(CtVolume("x", ScannerTag("A"), {1, 1, 1}, {0}, {0}, {0}, {{"scanner", "B"}}), ContractError);
  EXPECT_THROW(CtVolume("x", ScannerTag("A"), {1, 1, 1}, {0}, {0}, {0}, {{"a=b", "1"}}), ContractError);
}

TEST(CtVolume, SliceQueries) {
  auto v = small_volume();
  EXPECT_EQ(v.lung_voxels(), 6u);
  EXPECT_TRUE(v.slice_has_lung(0));
  EXPECT_TRUE(v.slice_has_lung(1));
  auto s = extract_slice(v, 1);
  EXPECT_EQ(s.index, 1u);
  EXPECT_EQ(s.hu, (std::vector<std::int16_t>{-1024, -951, -949, 0}));
  EXPECT_EQ(s.emph_mask, (std::vector<std::uint8_t>{1, 1, 0, 0}));
  EXPECT_THROW(extract_slice(v, 2), ContractError);
}

TEST(PercentEmphysema, CountsInsideLungOnly) {
  auto v = small_volume();
  EXPECT_DOUBLE_EQ(percent_emphysema(v, v.emph()), 100.0 * 3.0 / 6.0);
  EXPECT_DOUBLE_EQ(percent_emphysema(v, Mask3::zeros(v.dims())), 0.0);
  // voxels outside the lung never count
  Mask3 outside(v.dims(), {0, 0, 0, 1, 0, 0, 0, 1});
  EXPECT_DOUBLE_EQ(percent_emphysema(v, outside), 0.0);
}

TEST(PercentEmphysema, EmptyLungIsDegenerate) {
  CtVolume v("x", ScannerTag("A"), {1, 1, 2}, {0, 0}, {0, 0}, {0, 0});
  EXPECT_THROW(percent_emphysema(v, v.emph()), DegenerateInputError);
}

TEST(VolumeFile, RoundTripRandomized) {
  std::mt19937_64 rng(20240601);
  std::uniform_int_distribution<std::size_t> dim(1, 9);
  for (int trial = 0; trial < 150; ++trial) {
    Dims3 d{dim(rng), dim(rng), dim(rng)};
    auto v = random_volume(rng, d, "scan-" + std::to_string(trial), trial % 2 ? "GE VCT" : "SIEMENS");
    if (trial % 3 == 0) v = v.with_metadata({{"note", "t" + std::to_string(trial)}, {"kernel", "B35f"}});
    const auto bytes = encode_volume(v);
    const auto back = decode_volume(bytes);
    ASSERT_EQ(back, v) << "trial " << trial;
    ASSERT_EQ(encode_volume(back), bytes);
  }
}

TEST(VolumeFile, RejectsCorruption) {
  const auto bytes = encode_volume(small_volume());
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_volume(bad), FormatError);

  bad = bytes;
  bad[4] = 9;  // version
  EXPECT_THROW(decode_volume(bad), FormatError);

  std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 3);
  EXPECT_THROW(decode_volume(cut), TruncatedError);

  auto longer = bytes;
  longer.push_back(0);
  EXPECT_THROW(decode_volume(longer), DimensionError);

  bad = bytes;
  bad[6] = 0;  // slices = 0
  bad[7] = bad[8] = bad[9] = 0;
  EXPECT_THROW(decode_volume(bad), DimensionError);

  bad = bytes;
  bad[6] = 200;  // dims far beyond the payload
  EXPECT_THROW(decode_volume(bad), TruncatedError);
}

TEST(VolumeFile, InvalidContentBecomesFormatError) {
  auto bytes = encode_volume(small_volume());
  // first lung byte sits after magic(4) + version(2) + dims(12) + hu(16)
  bytes[4 + 2 + 12 + 16 + 0] = 0;  // voxel 0 is emphysema, now outside the lung
  EXPECT_THROW(decode_volume(bytes), FormatError);
}

TEST(VolumeFile, WritesAndReadsFromDisk) {
  TempDir dir("vol");
  const auto v = small_volume();
  write_volume(v, dir / "nested/v.ctph");
  EXPECT_EQ(read_volume(dir / "nested/v.ctph"), v);
  EXPECT_THROW(read_volume(dir / "missing.ctph"), IoError);
}

TEST(Manifest, TextRoundTrip) {
  std::vector<ManifestRecord> recs{
      {"A-000", ScannerTag("A"), Split::kTrain, "volumes/A-000.ctph", true, 0.1234567890123},
      {"A-001", ScannerTag("A"), Split::kVal, "volumes/A-001.ctph", false, std::nullopt},
      {"D-000", ScannerTag("D"), Split::kTestOod, "/abs/D-000.ctph", true, 12.5},
  };
  DatasetManifest m(recs, "/data");
  auto back = DatasetManifest::from_text(m.to_text(), "/data");
  EXPECT_EQ(back.records(), m.records());
  EXPECT_EQ(back.resolve(back.records()[0]), std::filesystem::path("/data/volumes/A-000.ctph"));
  EXPECT_EQ(back.resolve(back.records()[2]), std::filesystem::path("/abs/D-000.ctph"));
  EXPECT_EQ(back.scanners(), (std::vector<ScannerTag>{ScannerTag("A"), ScannerTag("D")}));
  EXPECT_EQ(back.with_split(Split::kTestOod).size(), 1u);
  EXPECT_THROW(back.find("nope"), ConfigError);
}

TEST(Manifest, ValidationCatchesLeaksAndDuplicates) {
  DatasetManifest dup({{"A", ScannerTag("S"), Split::kTrain, "a", false, {}},
                       {"A", ScannerTag("S"), Split::kVal, "b", false, {}}});
  EXPECT_THROW(dup.validate(), FormatError);
  DatasetManifest leak({{"A", ScannerTag("S"), Split::kTrain, "a", false, {}},
                        {"B", ScannerTag("S"), Split::kTestOod, "b", false, {}}});
  EXPECT_THROW(leak.validate(), FormatError);
  EXPECT_THROW(DatasetManifest::from_text("A\tS\tbogus\tp\t0\t-\n"), FormatError);
  EXPECT_THROW(DatasetManifest::from_text("A\tS\ttrain\tp\t0\n"), FormatError);
}

TEST(SliceSampling, OnlyLungSlicesSortedAndDeterministic) {
  std::mt19937_64 rng(5);
  Dims3 d{20, 4, 4};
  std::vector<std::int16_t> hu(d.voxels(), -900);
  std::vector<std::uint8_t> lung(d.voxels(), 0), emph(d.voxels(), 0);
  std::vector<std::size_t> lung_slices{1, 3, 4, 8, 9, 10, 15, 19};
  for (auto s : lung_slices) lung[s * 16 + 5] = 1;
  CtVolume v("x", ScannerTag("A"), d, hu, lung, emph);

  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto idx = sample_slice_indices(v, 5, seed);
    ASSERT_EQ(idx.size(), 5u);
    EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
    for (auto i : idx) EXPECT_TRUE(v.slice_has_lung(i));
    EXPECT_EQ(idx, sample_slice_indices(v, 5, seed));
  }
  // more requested than available: every lung slice once
  EXPECT_EQ(sample_slice_indices(v, 50, 1), lung_slices);
  EXPECT_NE(sample_slice_indices(v, 4, 1), sample_slice_indices(v, 4, 2));
  EXPECT_THROW(sample_slice_indices(v, 0, 1), ContractError);
}

TEST(SliceSampling, NoLungIsDegenerate) {
  CtVolume v("x", ScannerTag("A"), {3, 2, 2}, std::vector<std::int16_t>(12, 0), std::vector<std::uint8_t>(12, 0),
             std::vector<std::uint8_t>(12, 0));
  EXPECT_THROW(sample_slices(v, 2, 0), DegenerateInputError);
}

TEST(BinaryIo, DoubleTextRoundTripsExactly) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int i = 0; i < 200; ++i) {
    const double v = u(rng) * std::pow(10.0, i % 20 - 10);
    EXPECT_EQ(io::parse_double(io::format_double(v)), v);
  }
  EXPECT_THROW(io::parse_double("1.0x"), FormatError);
}
