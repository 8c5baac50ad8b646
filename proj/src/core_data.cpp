#include "emphseg/core_data.hpp"

#include <algorithm>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "emphseg/binary_io.hpp"
#include "emphseg/errors.hpp"

namespace emphseg {

namespace {

constexpr char kVolumeMagic[4] = {'C', 'T', 'P', 'H'};
constexpr std::uint16_t kVolumeVersion = 1;

void check_metadata_token(const std::string& s, const char* what) {
  if (s.find('\n') != std::string::npos || s.find('\r') != std::string::npos) {
    throw ContractError(std::string(what) + " must not contain line breaks: '" + s + "'");
  }
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find('\t', start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace

ScannerTag::ScannerTag(std::string value) : id(std::move(value)) {}

Mask3::Mask3(Dims3 d, std::vector<std::uint8_t> values) : dims(d), data(std::move(values)) {
  if (data.size() != dims.voxels()) {
    throw ContractError("mask size " + std::to_string(data.size()) + " does not match dims");
  }
}

std::size_t Mask3::count() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto b) { return b != 0; }));
}

CtVolume::CtVolume(std::string scan_id, ScannerTag scanner, Dims3 dims,
                   std::vector<std::int16_t> hu, std::vector<std::uint8_t> lung_mask,
                   std::vector<std::uint8_t> emph_mask, Metadata extra)
    : scan_id_(std::move(scan_id)),
      scanner_(std::move(scanner)),
      dims_(dims),
      hu_(std::move(hu)),
      lung_(std::move(lung_mask)),
      emph_(std::move(emph_mask)),
      extra_(std::move(extra)) {
  const auto n = dims_.voxels();
  if (hu_.size() != n || lung_.size() != n || emph_.size() != n) {
    throw ContractError("volume grids do not share dimensions");
  }
  if (scan_id_.empty()) throw ContractError("scan_id must be non-empty");
  if (scanner_.id.empty()) throw ContractError("scanner tag must be non-empty");
  check_metadata_token(scan_id_, "scan_id");
  check_metadata_token(scanner_.id, "scanner tag");
  for (const auto& [k, v] : extra_) {
    check_metadata_token(k, "metadata key");
    check_metadata_token(v, "metadata value");
    if (k.empty() || k.find('=') != std::string::npos) {
      throw ContractError("invalid metadata key '" + k + "'");
    }
    if (k == "scan_id" || k == "scanner") {
      throw ContractError("metadata key '" + k + "' is reserved");
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (hu_[i] < kMinHu || hu_[i] > kMaxHu) {
      throw ContractError("HU value " + std::to_string(hu_[i]) + " outside [-1024, 3071]");
    }
    if (lung_[i] > 1 || emph_[i] > 1) throw ContractError("mask values must be 0 or 1");
    if (emph_[i] && !lung_[i]) throw ContractError("emphysema voxel outside lung mask");
  }
}

std::size_t CtVolume::lung_voxels() const {
  return static_cast<std::size_t>(std::count(lung_.begin(), lung_.end(), std::uint8_t{1}));
}

bool CtVolume::slice_has_lung(std::size_t slice) const {
  const auto sz = dims_.slice_size();
  auto first = lung_.begin() + static_cast<std::ptrdiff_t>(slice * sz);
  return std::find(first, first + static_cast<std::ptrdiff_t>(sz), std::uint8_t{1}) !=
         first + static_cast<std::ptrdiff_t>(sz);
}

CtVolume CtVolume::with_hu(std::vector<std::int16_t> hu, ScannerTag scanner) const {
  return CtVolume(scan_id_, std::move(scanner), dims_, std::move(hu), lung_, emph_, extra_);
}

CtVolume CtVolume::with_metadata(Metadata extra) const {
  return CtVolume(scan_id_, scanner_, dims_, hu_, lung_, emph_, std::move(extra));
}

CtSlice extract_slice(const CtVolume& v, std::size_t index) {
  const auto& d = v.dims();
  if (index >= d.slices) throw ContractError("slice index out of range");
  const auto sz = d.slice_size();
  const auto off = index * sz;
  CtSlice s;
  s.height = d.height;
  s.width = d.width;
  s.hu.assign(v.hu().begin() + off, v.hu().begin() + off + sz);
  s.lung_mask.assign(v.lung_mask().begin() + off, v.lung_mask().begin() + off + sz);
  s.emph_mask.assign(v.emph_mask().begin() + off, v.emph_mask().begin() + off + sz);
  s.scan_id = v.scan_id();
  s.index = index;
  return s;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTestId: return "test_id";
    case Split::kTestOod: return "test_ood";
  }
  return "?";
}

Split parse_split(const std::string& text) {
  if (text == "train") return Split::kTrain;
  if (text == "val") return Split::kVal;
  if (text == "test_id") return Split::kTestId;
  if (text == "test_ood") return Split::kTestOod;
  throw FormatError("unknown split '" + text + "'");
}

DatasetManifest::DatasetManifest(std::vector<ManifestRecord> records, std::filesystem::path base_dir)
    : records_(std::move(records)), base_dir_(std::move(base_dir)) {}

std::filesystem::path DatasetManifest::resolve(const ManifestRecord& r) const {
  std::filesystem::path p(r.path);
  if (p.is_absolute() || base_dir_.empty()) return p;
  return base_dir_ / p;
}

std::vector<ManifestRecord> DatasetManifest::with_split(Split s) const {
  std::vector<ManifestRecord> out;
  std::copy_if(records_.begin(), records_.end(), std::back_inserter(out),
               [s](const auto& r) { return r.split == s; });
  return out;
}

std::vector<ManifestRecord> DatasetManifest::with_scanner(const ScannerTag& tag) const {
  std::vector<ManifestRecord> out;
  std::copy_if(records_.begin(), records_.end(), std::back_inserter(out),
               [&](const auto& r) { return r.scanner == tag; });
  return out;
}

std::vector<ScannerTag> DatasetManifest::scanners() const {
  std::vector<ScannerTag> out;
  for (const auto& r : records_) {
    if (std::find(out.begin(), out.end(), r.scanner) == out.end()) out.push_back(r.scanner);
  }
  return out;
}

const ManifestRecord& DatasetManifest::find(const std::string& scan_id) const {
  auto it = std::find_if(records_.begin(), records_.end(),
                         [&](const auto& r) { return r.scan_id == scan_id; });
  if (it == records_.end()) throw ConfigError("scan '" + scan_id + "' not in manifest");
  return *it;
}

void DatasetManifest::validate() const {
  std::set<std::string> ids;
  std::set<ScannerTag> seen_in_training, ood;
  for (const auto& r : records_) {
    if (r.scan_id.empty() || r.scanner.id.empty()) throw FormatError("empty scan_id or scanner");
    if (!ids.insert(r.scan_id).second) throw FormatError("duplicate scan_id '" + r.scan_id + "'");
    if (r.split == Split::kTrain || r.split == Split::kVal) seen_in_training.insert(r.scanner);
    if (r.split == Split::kTestOod) ood.insert(r.scanner);
  }
  for (const auto& tag : ood) {
    if (seen_in_training.count(tag)) {
      throw FormatError("test_ood scanner '" + tag.id + "' also appears in train/val");
    }
  }
}

std::string DatasetManifest::to_text() const {
  std::ostringstream os;
  os << "# scan_id\tscanner\tsplit\tpath\tnever_smoker\tpct950\n";
  for (const auto& r : records_) {
    os << r.scan_id << '\t' << r.scanner.id << '\t' << to_string(r.split) << '\t' << r.path << '\t'
       << (r.never_smoker ? 1 : 0) << '\t'
       << (r.pct950 ? io::format_double(*r.pct950) : std::string("-")) << '\n';
  }
  return os.str();
}

DatasetManifest DatasetManifest::from_text(const std::string& text, std::filesystem::path base_dir) {
  std::vector<ManifestRecord> records;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    auto f = split_tabs(line);
    if (f.size() != 6) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": expected 6 fields, got " +
                        std::to_string(f.size()));
    }
    ManifestRecord r;
    r.scan_id = f[0];
    r.scanner = ScannerTag(f[1]);
    r.split = parse_split(f[2]);
    r.path = f[3];
    if (f[4] != "0" && f[4] != "1") {
      throw FormatError("manifest line " + std::to_string(lineno) + ": never_smoker must be 0/1");
    }
    r.never_smoker = f[4] == "1";
    if (f[5] != "-") r.pct950 = io::parse_double(f[5]);
    records.push_back(std::move(r));
  }
  DatasetManifest m(std::move(records), std::move(base_dir));
  m.validate();
  return m;
}

void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  io::write_text_file(path, m.to_text());
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  return DatasetManifest::from_text(io::read_text_file(path), path.parent_path());
}

std::vector<std::uint8_t> encode_volume(const CtVolume& v) {
  io::ByteWriter w;
  w.text(std::string_view(kVolumeMagic, 4));
  w.le(kVolumeVersion);
  w.le(static_cast<std::uint32_t>(v.dims().slices));
  w.le(static_cast<std::uint32_t>(v.dims().height));
  w.le(static_cast<std::uint32_t>(v.dims().width));
  for (auto h : v.hu()) w.le(h);
  w.bytes(v.lung_mask());
  w.bytes(v.emph_mask());
  std::string meta = "scan_id=" + v.scan_id() + "\nscanner=" + v.scanner().id + "\n";
  for (const auto& [k, val] : v.metadata()) meta += k + "=" + val + "\n";
  w.string(meta);
  return w.take();
}

CtVolume decode_volume(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (bytes.size() < 4 || !std::equal(kVolumeMagic, kVolumeMagic + 4, bytes.begin())) {
    throw FormatError("bad magic: not a CTPH volume");
  }
  r.bytes(4);
  auto version = r.le<std::uint16_t>();
  if (version != kVolumeVersion) {
    throw FormatError("unsupported volume format version " + std::to_string(version));
  }
  Dims3 d;
  d.slices = r.le<std::uint32_t>();
  d.height = r.le<std::uint32_t>();
  d.width = r.le<std::uint32_t>();
  if (d.slices == 0 || d.height == 0 || d.width == 0) {
    throw DimensionError("volume dimensions must be positive");
  }
  const std::size_t n = d.voxels();
  // 4 bytes per voxel in total; reject dims that cannot fit in the file before allocating
  if (n > r.remaining() / 4 + 1) {
    throw TruncatedError("payload shorter than declared dimensions");
  }
  std::vector<std::int16_t> hu(n);
  for (auto& h : hu) h = r.le<std::int16_t>();
  auto lung_raw = r.bytes(n);
  auto emph_raw = r.bytes(n);
  std::vector<std::uint8_t> lung(lung_raw.begin(), lung_raw.end());
  std::vector<std::uint8_t> emph(emph_raw.begin(), emph_raw.end());
  auto meta = r.string();
  if (r.remaining() != 0) {
    throw DimensionError("trailing bytes after metadata: payload does not match dimensions");
  }

  std::string scan_id, scanner;
  CtVolume::Metadata extra;
  bool have_id = false, have_scanner = false;
  std::istringstream ms(meta);
  std::string line;
  while (std::getline(ms, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("metadata line without '=': " + line);
    auto key = line.substr(0, eq);
    auto val = line.substr(eq + 1);
    if (key == "scan_id") {
      scan_id = val;
      have_id = true;
    } else if (key == "scanner") {
      scanner = val;
      have_scanner = true;
    } else {
      extra[key] = val;
    }
  }
  if (!have_id || !have_scanner) throw FormatError("metadata lacks scan_id or scanner");
  try {
    return CtVolume(scan_id, ScannerTag(scanner), d, std::move(hu), std::move(lung), std::move(emph),
                    std::move(extra));
  } catch (const ContractError& e) {
    throw FormatError(std::string("invalid volume content: ") + e.what());
  }
}

void write_volume(const CtVolume& v, const std::filesystem::path& path) {
  io::write_file(path, encode_volume(v));
}

CtVolume read_volume(const std::filesystem::path& path) {
  return decode_volume(io::read_file(path));
}

double percent_emphysema(const CtVolume& v, const Mask3& mask) {
  if (mask.dims != v.dims()) throw ContractError("mask dimensions differ from volume");
  std::size_t lung = 0, hit = 0;
  auto lm = v.lung_mask();
  for (std::size_t i = 0; i < lm.size(); ++i) {
    if (lm[i]) {
      ++lung;
      if (mask.data[i]) ++hit;
    }
  }
  if (lung == 0) throw DegenerateInputError("percent_emphysema: empty lung mask");
  return 100.0 * static_cast<double>(hit) / static_cast<double>(lung);
}

std::vector<std::size_t> sample_slice_indices(const CtVolume& v, std::size_t n,
                                              std::uint64_t seed) {
  if (n == 0) throw ContractError("sample_slices: n must be >= 1");
  std::vector<std::size_t> candidates;
  for (std::size_t s = 0; s < v.dims().slices; ++s) {
    if (v.slice_has_lung(s)) candidates.push_back(s);
  }
  if (candidates.empty()) {
    throw DegenerateInputError("sample_slices: volume '" + v.scan_id() + "' has no lung slices");
  }
  if (n < candidates.size()) {
    std::mt19937_64 rng(seed);
    // partial Fisher-Yates: the first n entries become a uniform n-subset
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, candidates.size() - 1);
      std::swap(candidates[i], candidates[pick(rng)]);
    }
    candidates.resize(n);
    std::sort(candidates.begin(), candidates.end());
  }
  return candidates;
}

std::vector<CtSlice> sample_slices(const CtVolume& v, std::size_t n, std::uint64_t seed) {
  std::vector<CtSlice> out;
  for (auto idx : sample_slice_indices(v, n, seed)) out.push_back(extract_slice(v, idx));
  return out;
}

}  // namespace emphseg
