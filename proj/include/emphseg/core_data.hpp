#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace emphseg {

inline constexpr std::int16_t kMinHu = -1024;
inline constexpr std::int16_t kMaxHu = 3071;

/// Identifies a (simulated) scanner type, e.g. "SYN-A".
struct ScannerTag {
  std::string id;

  explicit ScannerTag(std::string value = {});
  auto operator<=>(const ScannerTag&) const = default;
};

struct Dims3 {
  std::size_t slices = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t voxels() const { return slices * height * width; }
  std::size_t slice_size() const { return height * width; }
  auto operator<=>(const Dims3&) const = default;
};

/// Binary voxel grid, one byte per voxel (0 or 1).
struct Mask3 {
  Dims3 dims;
  std::vector<std::uint8_t> data;

  Mask3() = default;
  Mask3(Dims3 d, std::vector<std::uint8_t> values);
  static Mask3 zeros(Dims3 d) { return Mask3(d, std::vector<std::uint8_t>(d.voxels(), 0)); }

  std::size_t count() const;
  bool operator==(const Mask3&) const = default;
};

/// HU volume with lung and ground-truth emphysema masks. Immutable once built;
/// the constructor enforces range, shape and containment invariants.
class CtVolume {
 public:
  using Metadata = std::map<std::string, std::string>;

  CtVolume(std::string scan_id, ScannerTag scanner, Dims3 dims, std::vector<std::int16_t> hu,
           std::vector<std::uint8_t> lung_mask, std::vector<std::uint8_t> emph_mask,
           Metadata extra = {});

  const std::string& scan_id() const { return scan_id_; }
  const ScannerTag& scanner() const { return scanner_; }
  const Dims3& dims() const { return dims_; }
  std::span<const std::int16_t> hu() const { return hu_; }
  std::span<const std::uint8_t> lung_mask() const { return lung_; }
  std::span<const std::uint8_t> emph_mask() const { return emph_; }
  const Metadata& metadata() const { return extra_; }

  Mask3 lung() const { return Mask3(dims_, lung_); }
  Mask3 emph() const { return Mask3(dims_, emph_); }

  std::size_t lung_voxels() const;
  bool slice_has_lung(std::size_t slice) const;

  /// Copy with new HU values and scanner tag; masks are carried over untouched.
  CtVolume with_hu(std::vector<std::int16_t> hu, ScannerTag scanner) const;
  CtVolume with_metadata(Metadata extra) const;

  bool operator==(const CtVolume&) const = default;

 private:
  std::string scan_id_;
  ScannerTag scanner_;
  Dims3 dims_;
  std::vector<std::int16_t> hu_;
  std::vector<std::uint8_t> lung_;
  std::vector<std::uint8_t> emph_;
  Metadata extra_;
};

/// One axial slice of a CtVolume.
struct CtSlice {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int16_t> hu;
  std::vector<std::uint8_t> lung_mask;
  std::vector<std::uint8_t> emph_mask;
  std::string scan_id;
  std::size_t index = 0;
};

CtSlice extract_slice(const CtVolume& v, std::size_t index);

enum class Split { kTrain, kVal, kTestId, kTestOod };

std::string to_string(Split s);
Split parse_split(const std::string& text);

struct ManifestRecord {
  std::string scan_id;
  ScannerTag scanner;
  Split split = Split::kTrain;
  std::string path;
  bool never_smoker = false;
  std::optional<double> pct950;

  bool operator==(const ManifestRecord&) const = default;
};

/// Scan listing with split assignment. Relative paths resolve against base_dir.
class DatasetManifest {
 public:
  DatasetManifest() = default;
  explicit DatasetManifest(std::vector<ManifestRecord> records,
                           std::filesystem::path base_dir = {});

  const std::vector<ManifestRecord>& records() const { return records_; }
  const std::filesystem::path& base_dir() const { return base_dir_; }
  std::filesystem::path resolve(const ManifestRecord& r) const;

  std::vector<ManifestRecord> with_split(Split s) const;
  std::vector<ManifestRecord> with_scanner(const ScannerTag& tag) const;
  /// Scanner tags in first-appearance order.
  std::vector<ScannerTag> scanners() const;
  const ManifestRecord& find(const std::string& scan_id) const;

  /// Checks id uniqueness and that OOD scanners never appear in train/val.
  void validate() const;

  std::string to_text() const;
  static DatasetManifest from_text(const std::string& text, std::filesystem::path base_dir = {});

 private:
  std::vector<ManifestRecord> records_;
  std::filesystem::path base_dir_;
};

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path);
/// Reads a manifest; relative record paths resolve against the manifest's directory.
DatasetManifest read_manifest(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_volume(const CtVolume& v);
CtVolume decode_volume(std::span<const std::uint8_t> bytes);
void write_volume(const CtVolume& v, const std::filesystem::path& path);
CtVolume read_volume(const std::filesystem::path& path);

/// 100 * |mask ∩ lung| / |lung|. Throws DegenerateInputError on an empty lung.
double percent_emphysema(const CtVolume& v, const Mask3& mask);

/// Up to n distinct lung-containing slices, ascending index, deterministic in seed.
std::vector<std::size_t> sample_slice_indices(const CtVolume& v, std::size_t n,
                                              std::uint64_t seed);
std::vector<CtSlice> sample_slices(const CtVolume& v, std::size_t n, std::uint64_t seed);

}  // namespace emphseg
