#include "emphseg/cdf_features.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "emphseg/binary_io.hpp"
#include "emphseg/errors.hpp"

namespace emphseg::cdf {

double BinEdges::edge(std::size_t i) const {
  return lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
}

void BinEdges::validate() const {
  if (bins == 0 || bins > 65535) throw ConfigError("bin count must be in [1, 65535]");
  if (!(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi)) {
    throw ConfigError("bin range must satisfy lo < hi");
  }
}

HuHistogram::HuHistogram(BinEdges edges) : edges_(edges), counts_(edges.bins, 0) {
  edges_.validate();
  lut_.resize(static_cast<std::size_t>(kMaxHu - kMinHu + 1));
  std::size_t bin = 0;
  for (int hu = kMinHu; hu <= kMaxHu; ++hu) {
    while (bin + 1 < edges_.bins && static_cast<double>(hu) > edges_.edge(bin + 1)) ++bin;
    lut_[static_cast<std::size_t>(hu - kMinHu)] = static_cast<std::uint16_t>(bin);
  }
}

std::size_t HuHistogram::bin_of(std::int16_t hu) const {
  return lut_[static_cast<std::size_t>(hu - kMinHu)];
}

void HuHistogram::add(std::int16_t hu) {
  ++counts_[bin_of(hu)];
  ++total_;
}

void HuHistogram::add_lung(const CtVolume& v) {
  auto hu = v.hu();
  auto lung = v.lung_mask();
  for (std::size_t i = 0; i < hu.size(); ++i) {
    if (lung[i]) add(hu[i]);
  }
}

void HuHistogram::merge(const HuHistogram& other) {
  if (!(other.edges_ == edges_)) throw ConfigError("cannot merge histograms with different edges");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  total_ += other.total_;
}

std::vector<std::uint64_t> HuHistogram::cumulative() const {
  std::vector<std::uint64_t> out(counts_.size());
  std::uint64_t run = 0;
  for (std::size_t i = 0; i < counts_.size(); ++i) {
    run += counts_[i];
    out[i] = run;
  }
  return out;
}

std::string to_string(CdfKind k) {
  switch (k) {
    case CdfKind::kScanner: return "scanner";
    case CdfKind::kScan: return "scan";
    case CdfKind::kDiff: return "diff";
  }
  return "?";
}

CdfKind parse_cdf_kind(const std::string& s) {
  if (s == "scanner") return CdfKind::kScanner;
  if (s == "scan") return CdfKind::kScan;
  if (s == "diff") return CdfKind::kDiff;
  throw FormatError("unknown cdf kind '" + s + "'");
}

void CdfFeature::validate() const {
  edges.validate();
  if (values.size() != edges.bins) throw FormatError("cdf value count does not match bin count");
  if (kind == CdfKind::kDiff) {
    for (double v : values) {
      if (!(v >= -1.0 && v <= 1.0)) throw FormatError("cdf diff value outside [-1, 1]");
    }
    return;
  }
  double prev = 0.0;
  for (double v : values) {
    if (!(v >= 0.0 && v <= 1.0) || v < prev) {
      throw FormatError("cdf values must be non-decreasing within [0, 1]");
    }
    prev = v;
  }
  if (std::abs(values.back() - 1.0) > 1e-9) throw FormatError("cdf must end at 1");
}

double pct_below_950(const CtVolume& v) {
  std::size_t lung = 0, below = 0;
  auto hu = v.hu();
  auto mask = v.lung_mask();
  for (std::size_t i = 0; i < hu.size(); ++i) {
    if (!mask[i]) continue;
    ++lung;
    if (hu[i] < kEmphysemaThresholdHu) ++below;
  }
  if (lung == 0) throw DegenerateInputError("pct_below_950: empty lung mask in '" + v.scan_id() + "'");
  return 100.0 * static_cast<double>(below) / static_cast<double>(lung);
}

std::int16_t perc15(const CtVolume& v) {
  std::vector<std::int16_t> values;
  auto hu = v.hu();
  auto mask = v.lung_mask();
  for (std::size_t i = 0; i < hu.size(); ++i) {
    if (mask[i]) values.push_back(hu[i]);
  }
  if (values.empty()) throw DegenerateInputError("perc15: empty lung mask in '" + v.scan_id() + "'");
  // rank k = ceil(0.15 n), computed in integers
  const std::size_t k = (15 * values.size() + 99) / 100;
  auto nth = values.begin() + static_cast<std::ptrdiff_t>(k - 1);
  std::nth_element(values.begin(), nth, values.end());
  return *nth;
}

CdfFeature cdf_from_histogram(const HuHistogram& h, CdfKind kind, std::vector<std::string> sources) {
  if (h.total() == 0) throw DegenerateInputError("cdf of an empty lung");
  CdfFeature f;
  f.kind = kind;
  f.edges = h.edges();
  f.sources = std::move(sources);
  const auto cum = h.cumulative();
  const double total = static_cast<double>(h.total());
  f.values.resize(cum.size());
  for (std::size_t i = 0; i < cum.size(); ++i) f.values[i] = static_cast<double>(cum[i]) / total;
  return f;
}

CdfFeature cdf_of_scan(const CtVolume& v, const BinEdges& edges) {
  HuHistogram h(edges);
  h.add_lung(v);
  if (h.total() == 0) throw DegenerateInputError("cdf_of_scan: empty lung mask in '" + v.scan_id() + "'");
  return cdf_from_histogram(h, CdfKind::kScan, {v.scan_id()});
}

CdfFeature cdf_of_scanner(std::span<const CtVolume> volumes, const BinEdges& edges) {
  if (volumes.empty()) throw ContractError("cdf_of_scanner: no volumes");
  HuHistogram pooled(edges);
  std::vector<std::string> sources;
  for (const auto& v : volumes) {
    HuHistogram h(edges);
    h.add_lung(v);
    if (h.total() == 0) {
      throw DegenerateInputError("cdf_of_scanner: empty lung mask in '" + v.scan_id() + "'");
    }
    pooled.merge(h);
    sources.push_back(v.scan_id());
  }
  return cdf_from_histogram(pooled, CdfKind::kScanner, std::move(sources));
}

CdfFeature cdf_diff(const CdfFeature& scan, const CdfFeature& scanner) {
  if (scan.kind != CdfKind::kScan || scanner.kind != CdfKind::kScanner) {
    throw ConfigError("cdf_diff expects a scan CDF and a scanner CDF");
  }
  if (!(scan.edges == scanner.edges) || scan.values.size() != scanner.values.size()) {
    throw ConfigError("cdf_diff: bin edges differ");
  }
  CdfFeature f;
  f.kind = CdfKind::kDiff;
  f.edges = scan.edges;
  f.values.resize(scan.values.size());
  for (std::size_t i = 0; i < f.values.size(); ++i) f.values[i] = scan.values[i] - scanner.values[i];
  f.sources = scan.sources;
  f.sources.insert(f.sources.end(), scanner.sources.begin(), scanner.sources.end());
  return f;
}

Pct950Lookup manifest_pct950_lookup(const DatasetManifest& manifest) {
  return [manifest](const ManifestRecord& r) {
    if (r.pct950) return *r.pct950;
    return pct_below_950(read_volume(manifest.resolve(r)));
  };
}

std::vector<std::string> select_reference_scans(const DatasetManifest& manifest,
                                                const ScannerTag& scanner, std::size_t k,
                                                const Pct950Lookup& pct950) {
  struct Candidate {
    std::string id;
    double pct;
  };
  std::vector<Candidate> pool;
  for (const auto& r : manifest.records()) {
    if (r.scanner == scanner && r.never_smoker) pool.push_back({r.scan_id, pct950(r)});
  }
  if (pool.empty()) {
    throw ConfigError("no never-smoker reference scans for scanner '" + scanner.id + "'");
  }
  // order by id first so the lower median is independent of manifest order
  std::sort(pool.begin(), pool.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  std::vector<double> sorted;
  for (const auto& c : pool) sorted.push_back(c.pct);
  std::sort(sorted.begin(), sorted.end());
  const double median = sorted[(sorted.size() - 1) / 2];
  std::stable_sort(pool.begin(), pool.end(), [median](const auto& a, const auto& b) {
    return std::abs(a.pct - median) < std::abs(b.pct - median);
  });
  const std::size_t n = std::min(k, pool.size());
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(pool[i].id);
  return out;
}

std::vector<std::string> select_reference_scans(const DatasetManifest& manifest,
                                                const ScannerTag& scanner, std::size_t k) {
  return select_reference_scans(manifest, scanner, k, manifest_pct950_lookup(manifest));
}

CdfFeature scanner_prior(const DatasetManifest& manifest, const ScannerTag& scanner,
                         const BinEdges& edges, std::size_t k) {
  auto ids = select_reference_scans(manifest, scanner, k);
  std::vector<CtVolume> volumes;
  volumes.reserve(ids.size());
  for (const auto& id : ids) volumes.push_back(read_volume(manifest.resolve(manifest.find(id))));
  return cdf_of_scanner(volumes, edges);
}

std::string cdf_to_text(const CdfFeature& f) {
  std::ostringstream os;
  os << "cdf " << to_string(f.kind) << ' ' << f.edges.bins << ' ' << io::format_double(f.edges.lo)
     << ' ' << io::format_double(f.edges.hi) << '\n';
  os << "sources";
  for (const auto& id : f.sources) os << '\t' << id;
  os << '\n';
  for (double v : f.values) os << io::format_double(v) << '\n';
  return os.str();
}

CdfFeature cdf_from_text(const std::string& text) {
  std::istringstream is(text);
  std::string header;
  if (!std::getline(is, header)) throw FormatError("empty cdf file");
  std::istringstream hs(header);
  std::string magic, kind, lo, hi;
  std::size_t bins = 0;
  if (!(hs >> magic >> kind >> bins >> lo >> hi) || magic != "cdf") {
    throw FormatError("malformed cdf header: '" + header + "'");
  }
  std::string rest;
  if (hs >> rest) throw FormatError("trailing tokens in cdf header");
  CdfFeature f;
  f.kind = parse_cdf_kind(kind);
  f.edges = BinEdges{io::parse_double(lo), io::parse_double(hi), bins};
  std::string line;
  if (!std::getline(is, line) || line.rfind("sources", 0) != 0) throw FormatError("cdf file lacks a sources line");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  for (std::size_t pos = line.find('\t'); pos != std::string::npos;) {
    const auto next = line.find('\t', pos + 1);
    f.sources.push_back(line.substr(pos + 1, next == std::string::npos ? std::string::npos : next - pos - 1));
    pos = next;
  }
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    f.values.push_back(io::parse_double(line));
  }
  try {
    f.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("cdf file: ") + e.what());
  }
  return f;
}

void write_cdf(const CdfFeature& f, const std::filesystem::path& path) {
  io::write_text_file(path, cdf_to_text(f));
}

CdfFeature read_cdf(const std::filesystem::path& path) {
  return cdf_from_text(io::read_text_file(path));
}

}  // namespace emphseg::cdf
