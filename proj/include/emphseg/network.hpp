#pragma once

#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "emphseg/config.hpp"
#include "emphseg/core_data.hpp"
#include "emphseg/tensor.hpp"

namespace emphseg::net {

enum class Variant { kPlainUnet, kDattnScanner, kDattnDiff };

std::string to_string(Variant v);
Variant parse_variant(const std::string& s);
inline bool uses_domain(Variant v) { return v != Variant::kPlainUnet; }

/// Where the domain-attention block sits in each decoder stage.
enum class DattnPosition { kAfterDoubleConv, kBeforeDoubleConv };

struct NetworkConfig {
  std::size_t input_size = 64;
  std::size_t base_channels = 16;
  std::size_t n_down_stages = 3;
  std::size_t max_channels = 512;
  std::size_t dattn_hidden = 256;
  std::size_t n_cdf_bins = 512;
  std::size_t gn_groups = 8;
  Variant variant = Variant::kDattnDiff;
  DattnPosition dattn_position = DattnPosition::kAfterDoubleConv;
  std::uint64_t seed = 0;

  /// Channel width after `stage` downsamples (stage 0 is the stem width).
  std::size_t channels(std::size_t stage) const;
  void validate() const;

  KeyValueConfig to_config() const;
  static NetworkConfig from_config(const ConfigSection& s);
  bool operator==(const NetworkConfig&) const = default;
};

/// Maps HU to [0, 1]: -1024 -> 0, 0 -> 1, clamped.
std::vector<float> normalize_slice(const CtSlice& s);
float normalize_hu(std::int16_t hu);

template <class T>
ModelParams<T> init_params(const NetworkConfig& cfg);

/// Activations kept for the backward pass. Filled by forward when requested.
template <class T>
struct ForwardCache {
  struct ConvBlock {
    Tensor<T> xhat;      // normalized input
    std::vector<T> inv_std;
    Tensor<T> normed;    // gamma * xhat + beta, i.e. conv input
    Tensor<T> output;    // post-ReLU
  };
  struct Dattn {
    Tensor<T> features;
    std::vector<T> hidden_pre;  // N x hidden
    std::vector<T> attention;   // N x C
  };
  struct DecoderStage {
    Tensor<T> up_input;
    ConvBlock conv1, conv2;
    Dattn dattn;
  };

  Tensor<T> images;
  Tensor<T> stem_out;
  std::vector<ConvBlock> enc_conv, enc_down;
  std::vector<DecoderStage> dec;  // index = stage (0 is the full-resolution stage)
  Tensor<T> head_input;
  Tensor<T> domain;
};

template <class T>
struct EncoderOutput {
  Tensor<T> bottleneck;
  std::vector<Tensor<T>> skips;  // skips[s] at resolution input / 2^s
};

template <class T>
EncoderOutput<T> encoder_forward(const NetworkConfig& cfg, const ModelParams<T>& params,
                                 const Tensor<T>& images, ForwardCache<T>* cache = nullptr);

/// sigmoid(FC2(relu(FC1(domain)))) scaling of each channel. `prefix` names the stage,
/// e.g. "dec.0.dattn". domain has shape (N, bins, 1, 1).
template <class T>
Tensor<T> dattn_forward(const ModelParams<T>& params, const std::string& prefix,
                        const Tensor<T>& features, const Tensor<T>& domain,
                        typename ForwardCache<T>::Dattn* cache = nullptr);

/// Attention weights alone, N x C.
template <class T>
std::vector<T> dattn_weights(const ModelParams<T>& params, const std::string& prefix,
                             std::size_t channels, const Tensor<T>& domain);

template <class T>
Tensor<T> decoder_forward(const NetworkConfig& cfg, const ModelParams<T>& params,
                          const EncoderOutput<T>& enc, const std::type_identity_t<Tensor<T>>* domain,
                          ForwardCache<T>* cache = nullptr);

/// Full forward pass: logits of shape (N, 2, H, W).
template <class T>
Tensor<T> forward(const NetworkConfig& cfg, const ModelParams<T>& params, const Tensor<T>& images,
                  const std::type_identity_t<Tensor<T>>* domain, ForwardCache<T>* cache = nullptr);

/// Accumulates d(loss)/d(params) into grads given d(loss)/d(logits).
template <class T>
void backward(const NetworkConfig& cfg, const ModelParams<T>& params, const ForwardCache<T>& cache,
              const Tensor<T>& dlogits, ModelParams<T>& grads);

/// Per-pixel softmax over the channel axis.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& logits);

}  // namespace emphseg::net
