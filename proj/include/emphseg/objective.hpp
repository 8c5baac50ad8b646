#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emphseg/cdf_features.hpp"
#include "emphseg/core_data.hpp"
#include "emphseg/network.hpp"
#include "emphseg/tensor.hpp"

namespace emphseg {

inline constexpr double kLossEps = 1e-6;

/// total = ce_term - dice_term.
struct LossValue {
  double total = 0.0;
  double ce_term = 0.0;
  double dice_term = 0.0;
};

/// Joint cross-entropy + soft Dice on probabilities. y is one-hot (N, 2, H, W);
/// channel 1 is the emphysema class. CE is averaged per pixel, Dice is batch-global.
/// When dyhat is given it receives d(total)/d(yhat).
template <class T>
LossValue segmentation_loss(const Tensor<T>& y, const Tensor<T>& yhat, Tensor<T>* dyhat = nullptr);

/// Same loss evaluated from logits (CE through log-softmax), with d(total)/d(logits).
template <class T>
LossValue segmentation_loss_from_logits(const Tensor<T>& y, const Tensor<T>& logits,
                                        Tensor<T>* dlogits = nullptr);

/// One-hot (N, 2, H, W) labels from N stacked binary masks of size H*W.
template <class T>
Tensor<T> one_hot(std::span<const std::uint8_t> masks, std::size_t n, std::size_t h, std::size_t w);

/// 2|P∩R| / (|P|+|R|); 1 when both are empty.
double dsc(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> ref);
double dsc(const Mask3& pred, const Mask3& ref);

struct ConfusionCounts {
  std::size_t tp = 0, fn = 0, fp = 0, tn = 0;
};
ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> ref);

struct ScanEval {
  std::string scan_id;
  ScannerTag scanner;
  double pct_emph_ref = 0.0;
  double pct_emph_pred = 0.0;
  double signed_error = 0.0;  // ref - pred
  double dsc = 0.0;
};

ScanEval eval_scan(const Mask3& pred, const CtVolume& volume);

/// Scanner priors plus the variant that decides which domain feature a scan receives.
struct DomainContext {
  net::Variant variant = net::Variant::kPlainUnet;
  std::map<ScannerTag, cdf::CdfFeature> priors;

  /// CDF_diff against the scan's scanner prior (dattn_diff), the prior itself
  /// (dattn_scanner), or nothing (plain_unet). Throws ConfigError when the prior is missing.
  std::optional<std::vector<float>> feature_for(const CtVolume& v) const;
  const cdf::CdfFeature& prior_for(const ScannerTag& tag) const;
};

struct Model {
  net::NetworkConfig config;
  ModelParams<float> params;
};

/// Logits for a batch of slices, chunked to bound memory.
Tensor<float> predict_logits(const Model& model, const Tensor<float>& images,
                             const std::optional<std::vector<float>>& domain);

/// Argmax (ties -> background) per lung slice, restricted to the lung mask.
Mask3 predict_scan(const Model& model, const CtVolume& volume, const DomainContext& ctx);

/// (N, 1, H, W) normalized images for the given slices.
Tensor<float> slices_to_tensor(const std::vector<CtSlice>& slices);

}  // namespace emphseg
