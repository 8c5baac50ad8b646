#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "emphseg/core_data.hpp"

namespace emphseg::cdf {

inline constexpr double kEmphysemaThresholdHu = -950.0;

/// Uniform HU binning. Defaults cover the lung window [-1024, -700] with 512 bins.
struct BinEdges {
  double lo = -1024.0;
  double hi = -700.0;
  std::size_t bins = 512;

  /// lo + (hi - lo) * i / bins; exact whenever the bin width is a dyadic rational.
  double edge(std::size_t i) const;
  double width() const { return (hi - lo) / static_cast<double>(bins); }
  void validate() const;
  bool operator==(const BinEdges&) const = default;
};

/// Lung-voxel counts per bin. Bin i holds voxels with edge(i) < hu <= edge(i+1);
/// values below lo land in bin 0 and values above hi in the last bin.
class HuHistogram {
 public:
  explicit HuHistogram(BinEdges edges);

  void add(std::int16_t hu);
  void add_lung(const CtVolume& v);
  void merge(const HuHistogram& other);

  const BinEdges& edges() const { return edges_; }
  const std::vector<std::uint64_t>& counts() const { return counts_; }
  std::uint64_t total() const { return total_; }
  std::vector<std::uint64_t> cumulative() const;

 private:
  std::size_t bin_of(std::int16_t hu) const;

  BinEdges edges_;
  std::vector<std::uint64_t> counts_;
  std::vector<std::uint16_t> lut_;  // indexed by hu - kMinHu
  std::uint64_t total_ = 0;
};

enum class CdfKind { kScanner, kScan, kDiff };

std::string to_string(CdfKind k);
CdfKind parse_cdf_kind(const std::string& s);

/// Cumulative lung-HU distribution (or a difference of two).
struct CdfFeature {
  CdfKind kind = CdfKind::kScan;
  BinEdges edges;
  std::vector<double> values;
  std::vector<std::string> sources;

  void validate() const;
  bool operator==(const CdfFeature&) const = default;
};

/// Percentage of lung voxels strictly below -950 HU.
double pct_below_950(const CtVolume& v);

/// Smallest HU h such that at least 15% of lung voxels have hu <= h.
std::int16_t perc15(const CtVolume& v);

CdfFeature cdf_from_histogram(const HuHistogram& h, CdfKind kind, std::vector<std::string> sources);
CdfFeature cdf_of_scan(const CtVolume& v, const BinEdges& edges = {});
/// CDF of all lung voxels pooled across volumes.
CdfFeature cdf_of_scanner(std::span<const CtVolume> volumes, const BinEdges& edges = {});
CdfFeature cdf_diff(const CdfFeature& scan, const CdfFeature& scanner);

using Pct950Lookup = std::function<double(const ManifestRecord&)>;

/// Uses the manifest's pct950 column when present, otherwise loads the volume.
Pct950Lookup manifest_pct950_lookup(const DatasetManifest& manifest);

/// The k never-smoker scans of `scanner` whose %-950 is closest to the (lower) median.
/// Ties break on scan_id. Throws ConfigError when no scan is eligible.
std::vector<std::string> select_reference_scans(const DatasetManifest& manifest,
                                                const ScannerTag& scanner, std::size_t k,
                                                const Pct950Lookup& pct950);
std::vector<std::string> select_reference_scans(const DatasetManifest& manifest,
                                                const ScannerTag& scanner, std::size_t k = 10);

/// Reference selection + pooled CDF for one scanner.
CdfFeature scanner_prior(const DatasetManifest& manifest, const ScannerTag& scanner,
                         const BinEdges& edges = {}, std::size_t k = 10);

/// Text format: "cdf <kind> <bins> <lo> <hi>", a tab-separated "sources" line,
/// then one %.17g value per line.
std::string cdf_to_text(const CdfFeature& f);
CdfFeature cdf_from_text(const std::string& text);
void write_cdf(const CdfFeature& f, const std::filesystem::path& path);
CdfFeature read_cdf(const std::filesystem::path& path);

}  // namespace emphseg::cdf
