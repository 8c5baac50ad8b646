#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "emphseg/network.hpp"
#include "emphseg/tensor.hpp"

namespace emphseg {

/// Versioned container: network config echo, string metadata, and named
/// shape-tagged float64 arrays in a fixed order.
///
/// Layout (little-endian): "EMCK", u16 version, u32-prefixed config text,
/// u32-prefixed metadata text (key=value lines), u32 array count, then per array
/// u32-prefixed name, u32 rank, u64 dims[rank], f64 values[prod(dims)].
struct Checkpoint {
  net::NetworkConfig config;
  std::map<std::string, std::string> metadata;
  ModelParams<double> arrays;

  bool operator==(const Checkpoint&) const = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies `params` into arrays under `prefix + name`.
template <class T>
void store_params(ModelParams<double>& arrays, const ModelParams<T>& params, const std::string& prefix = "");

/// Inverse of store_params; the layout must match `like` exactly.
template <class T>
ModelParams<T> load_params(const ModelParams<double>& arrays, const ModelParams<T>& like,
                           const std::string& prefix = "");

}  // namespace emphseg
