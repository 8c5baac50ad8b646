#include "emphseg/checkpoint.hpp"

#include <sstream>

#include "emphseg/binary_io.hpp"
#include "emphseg/errors.hpp"

namespace emphseg {

namespace {

constexpr char kMagic[4] = {'E', 'M', 'C', 'K'};
constexpr std::uint16_t kVersion = 1;

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  io::ByteWriter w;
  w.text(std::string_view(kMagic, 4));
  w.le(kVersion);
  w.string(c.config.to_config().to_text());
  std::string meta;
  for (const auto& [k, v] : c.metadata) {
    if (k.find('=') != std::string::npos || k.find('\n') != std::string::npos ||
        v.find('\n') != std::string::npos) {
      throw ContractError("checkpoint metadata entries must be single-line key=value");
    }
    meta += k + "=" + v + "\n";
  }
  w.string(meta);
  w.le(static_cast<std::uint32_t>(c.arrays.all().size()));
  for (const auto& p : c.arrays.all()) {
    w.string(p.name);
    w.le(static_cast<std::uint32_t>(p.shape.size()));
    for (auto d : p.shape) w.le(static_cast<std::uint64_t>(d));
    for (double v : p.values) w.le(v);
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || !std::equal(kMagic, kMagic + 4, bytes.begin())) {
    throw FormatError("bad magic: not a checkpoint file");
  }
  io::ByteReader r(bytes);
  r.bytes(4);
  const auto version = r.le<std::uint16_t>();
  if (version != kVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  try {
    c.config = net::NetworkConfig::from_config(KeyValueConfig::parse(r.string()).global());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config: ") + e.what());
  }
  std::istringstream ms(r.string());
  std::string line;
  while (std::getline(ms, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint metadata line without '='");
    c.metadata[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = r.le<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.string();
    const auto rank = r.le<std::uint32_t>();
    if (rank > 8) throw FormatError("array '" + name + "' has implausible rank");
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    const std::size_t budget = r.remaining() / sizeof(double);
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.le<std::uint64_t>());
      // saturate instead of overflowing so absurd dims still read as truncation
      n = (d != 0 && n > budget / d) ? budget + 1 : n * d;
    }
    if (n > r.remaining() / sizeof(double)) throw TruncatedError("array '" + name + "' payload truncated");
    if (c.arrays.contains(name)) throw FormatError("duplicate checkpoint array '" + name + "'");
    auto& p = c.arrays.add(name, shape);
    for (auto& v : p.values) v = r.le<double>();
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after checkpoint arrays");
  return c;
}

void write_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(c));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(io::read_file(path));
}

template <class T>
void store_params(ModelParams<double>& arrays, const ModelParams<T>& params, const std::string& prefix) {
  for (const auto& p : params.all()) {
    auto& q = arrays.add(prefix + p.name, p.shape);
    for (std::size_t i = 0; i < p.values.size(); ++i) q.values[i] = static_cast<double>(p.values[i]);
  }
}

template <class T>
ModelParams<T> load_params(const ModelParams<double>& arrays, const ModelParams<T>& like, const std::string& prefix) {
  ModelParams<T> out;
  for (const auto& p : like.all()) {
    if (!arrays.contains(prefix + p.name)) {
      throw ConfigError("checkpoint lacks parameter '" + prefix + p.name + "'");
    }
    const auto& src = arrays.at(prefix + p.name);
    if (src.shape != p.shape) throw ConfigError("checkpoint parameter '" + p.name + "' has the wrong shape");
    auto& q = out.add(p.name, p.shape);
    for (std::size_t i = 0; i < q.values.size(); ++i) q.values[i] = static_cast<T>(src.values[i]);
  }
  return out;
}

template void store_params<float>(ModelParams<double>&, const ModelParams<float>&, const std::string&);
template void store_params<double>(ModelParams<double>&, const ModelParams<double>&, const std::string&);
template ModelParams<float> load_params<float>(const ModelParams<double>&, const ModelParams<float>&,
                                               const std::string&);
template ModelParams<double> load_params<double>(const ModelParams<double>&, const ModelParams<double>&,
                                                 const std::string&);

}  // namespace emphseg
