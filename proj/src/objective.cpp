#include "emphseg/objective.hpp"

#include <algorithm>
#include <cmath>

#include "emphseg/errors.hpp"

namespace emphseg {

namespace {

template <class T>
void check_pair(const Tensor<T>& y, const Tensor<T>& other) {
  if (!y.same_shape(other) || y.c() != 2) {
    throw ContractError("loss: expected matching (N, 2, H, W) tensors");
  }
}

struct DiceSums {
  double inter = 0.0, sum_y = 0.0, sum_p = 0.0;
  double value() const { return (2.0 * inter + kLossEps) / (sum_y + sum_p + kLossEps); }
  // d(dice)/d(p_fg) at a pixel with foreground label y_fg
  double grad(double y_fg) const {
    const double den = sum_y + sum_p + kLossEps;
    return (2.0 * y_fg * den - (2.0 * inter + kLossEps)) / (den * den);
  }
};

template <class T>
DiceSums dice_sums(const Tensor<T>& y, const Tensor<T>& p) {
  DiceSums d;
  for (std::size_t n = 0; n < y.n(); ++n) {
    const T* yf = y.channel(n, 1);
    const T* pf = p.channel(n, 1);
    for (std::size_t i = 0; i < y.plane(); ++i) {
      d.inter += static_cast<double>(yf[i]) * static_cast<double>(pf[i]);
      d.sum_y += static_cast<double>(yf[i]);
      d.sum_p += static_cast<double>(pf[i]);
    }
  }
  return d;
}

}  // namespace

template <class T>
LossValue segmentation_loss(const Tensor<T>& y, const Tensor<T>& yhat, Tensor<T>* dyhat) {
  check_pair(y, yhat);
  const double pixels = static_cast<double>(y.n() * y.plane());
  double ce = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double t = static_cast<double>(y.data()[i]);
    if (t != 0.0) ce -= t * std::log(std::max(static_cast<double>(yhat.data()[i]), kLossEps));
  }
  ce /= pixels;
  const auto d = dice_sums(y, yhat);
  LossValue out{ce - d.value(), ce, d.value()};
  if (dyhat) {
    *dyhat = Tensor<T>(y.n(), y.c(), y.h(), y.w());
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double t = static_cast<double>(y.data()[i]);
      const double p = static_cast<double>(yhat.data()[i]);
      dyhat->data()[i] = static_cast<T>(p > kLossEps ? -t / (pixels * p) : 0.0);
    }
    for (std::size_t n = 0; n < y.n(); ++n) {
      const T* yf = y.channel(n, 1);
      T* g = dyhat->channel(n, 1);
      for (std::size_t i = 0; i < y.plane(); ++i) g[i] -= static_cast<T>(d.grad(static_cast<double>(yf[i])));
    }
  }
  return out;
}

template <class T>
LossValue segmentation_loss_from_logits(const Tensor<T>& y, const Tensor<T>& logits, Tensor<T>* dlogits) {
  check_pair(y, logits);
  const double pixels = static_cast<double>(y.n() * y.plane());
  auto p = net::softmax_channels(logits);
  double ce = 0.0;
  for (std::size_t n = 0; n < y.n(); ++n) {
    for (std::size_t i = 0; i < y.plane(); ++i) {
      const double l0 = static_cast<double>(logits.channel(n, 0)[i]);
      const double l1 = static_cast<double>(logits.channel(n, 1)[i]);
      const double mx = std::max(l0, l1);
      const double lse = mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
      ce -= static_cast<double>(y.channel(n, 0)[i]) * (l0 - lse) + static_cast<double>(y.channel(n, 1)[i]) * (l1 - lse);
    }
  }
  ce /= pixels;
  const auto d = dice_sums(y, p);
  LossValue out{ce - d.value(), ce, d.value()};
  if (dlogits) {
    *dlogits = Tensor<T>(y.n(), y.c(), y.h(), y.w());
    for (std::size_t n = 0; n < y.n(); ++n) {
      for (std::size_t i = 0; i < y.plane(); ++i) {
        const double p0 = static_cast<double>(p.channel(n, 0)[i]);
        const double p1 = static_cast<double>(p.channel(n, 1)[i]);
        const double y0 = static_cast<double>(y.channel(n, 0)[i]);
        const double y1 = static_cast<double>(y.channel(n, 1)[i]);
        // softmax Jacobian for two classes: dp1/dl1 = p0 p1 = -dp1/dl0
        const double gd = -d.grad(y1) * p0 * p1;
        dlogits->channel(n, 0)[i] = static_cast<T>((p0 - y0) / pixels - gd);
        dlogits->channel(n, 1)[i] = static_cast<T>((p1 - y1) / pixels + gd);
      }
    }
  }
  return out;
}

template <class T>
Tensor<T> one_hot(std::span<const std::uint8_t> masks, std::size_t n, std::size_t h, std::size_t w) {
  if (masks.size() != n * h * w) throw ContractError("one_hot: mask size mismatch");
  Tensor<T> y(n, 2, h, w);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t i = 0; i < h * w; ++i) {
      const bool fg = masks[s * h * w + i] != 0;
      y.channel(s, 0)[i] = fg ? T(0) : T(1);
      y.channel(s, 1)[i] = fg ? T(1) : T(0);
    }
  }
  return y;
}

template LossValue segmentation_loss<float>(const Tensor<float>&, const Tensor<float>&, Tensor<float>*);
template LossValue segmentation_loss<double>(const Tensor<double>&, const Tensor<double>&, Tensor<double>*);
template LossValue segmentation_loss_from_logits<float>(const Tensor<float>&, const Tensor<float>&, Tensor<float>*);
template LossValue segmentation_loss_from_logits<double>(const Tensor<double>&, const Tensor<double>&,
                                                         Tensor<double>*);
template Tensor<float> one_hot<float>(std::span<const std::uint8_t>, std::size_t, std::size_t, std::size_t);
template Tensor<double> one_hot<double>(std::span<const std::uint8_t>, std::size_t, std::size_t, std::size_t);

ConfusionCounts confusion(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> ref) {
  if (pred.size() != ref.size()) throw ContractError("confusion: shape mismatch");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, r = ref[i] != 0;
    if (p && r) {
      ++c.tp;
    } else if (r) {
      ++c.fn;
    } else if (p) {
      ++c.fp;
    } else {
      ++c.tn;
    }
  }
  return c;
}

double dsc(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> ref) {
  const auto c = confusion(pred, ref);
  const auto denom = 2 * c.tp + c.fn + c.fp;
  if (denom == 0) return 1.0;
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

double dsc(const Mask3& pred, const Mask3& ref) {
  if (pred.dims != ref.dims) throw ContractError("dsc: shape mismatch");
  return dsc(std::span<const std::uint8_t>(pred.data), std::span<const std::uint8_t>(ref.data));
}

ScanEval eval_scan(const Mask3& pred, const CtVolume& volume) {
  if (pred.dims != volume.dims()) throw ContractError("eval_scan: prediction shape differs from volume");
  ScanEval e;
  e.scan_id = volume.scan_id();
  e.scanner = volume.scanner();
  e.pct_emph_ref = percent_emphysema(volume, volume.emph());
  e.pct_emph_pred = percent_emphysema(volume, pred);
  e.signed_error = e.pct_emph_ref - e.pct_emph_pred;
  e.dsc = dsc(pred.data, std::span<const std::uint8_t>(volume.emph_mask()));
  return e;
}

const cdf::CdfFeature& DomainContext::prior_for(const ScannerTag& tag) const {
  auto it = priors.find(tag);
  if (it == priors.end()) throw ConfigError("no scanner prior for '" + tag.id + "'");
  return it->second;
}

std::optional<std::vector<float>> DomainContext::feature_for(const CtVolume& v) const {
  if (!net::uses_domain(variant)) return std::nullopt;
  const auto& prior = prior_for(v.scanner());
  std::vector<double> values;
  if (variant == net::Variant::kDattnDiff) {
    values = cdf::cdf_diff(cdf::cdf_of_scan(v, prior.edges), prior).values;
  } else {
    values = prior.values;
  }
  return std::vector<float>(values.begin(), values.end());
}

Tensor<float> slices_to_tensor(const std::vector<CtSlice>& slices) {
  if (slices.empty()) return {};
  Tensor<float> t(slices.size(), 1, slices[0].height, slices[0].width);
  for (std::size_t i = 0; i < slices.size(); ++i) {
    auto norm = net::normalize_slice(slices[i]);
    if (norm.size() != t.sample_size()) throw ContractError("slices differ in size");
    std::copy(norm.begin(), norm.end(), t.sample(i));
  }
  return t;
}

Tensor<float> predict_logits(const Model& model, const Tensor<float>& images,
                             const std::optional<std::vector<float>>& domain) {
  constexpr std::size_t kChunk = 16;
  const bool needs_domain = net::uses_domain(model.config.variant);
  if (needs_domain && !domain) throw ConfigError("model variant requires a domain feature");
  Tensor<float> out(images.n(), 2, images.h(), images.w());
  for (std::size_t first = 0; first < images.n(); first += kChunk) {
    const std::size_t count = std::min(kChunk, images.n() - first);
    auto batch = images.slice_batch(first, count);
    Tensor<float> dom;
    if (needs_domain) {
      dom = Tensor<float>(count, domain->size(), 1, 1);
      for (std::size_t i = 0; i < count; ++i) std::copy(domain->begin(), domain->end(), dom.sample(i));
    }
    auto logits = net::forward(model.config, model.params, batch, needs_domain ? &dom : nullptr);
    std::copy(logits.data(), logits.data() + logits.size(), out.sample(first));
  }
  return out;
}

Mask3 predict_scan(const Model& model, const CtVolume& volume, const DomainContext& ctx) {
  const auto& d = volume.dims();
  auto pred = Mask3::zeros(d);
  std::vector<CtSlice> slices;
  for (std::size_t s = 0; s < d.slices; ++s) {
    if (volume.slice_has_lung(s)) slices.push_back(extract_slice(volume, s));
  }
  if (slices.empty()) return pred;
  std::optional<std::vector<float>> domain;
  if (net::uses_domain(model.config.variant)) {
    DomainContext local = ctx;
    local.variant = model.config.variant;
    domain = local.feature_for(volume);
  }
  auto logits = predict_logits(model, slices_to_tensor(slices), domain);
  const auto plane = d.slice_size();
  auto lung = volume.lung_mask();
  for (std::size_t i = 0; i < slices.size(); ++i) {
    const auto off = slices[i].index * plane;
    const float* bg = logits.channel(i, 0);
    const float* fg = logits.channel(i, 1);
    for (std::size_t p = 0; p < plane; ++p) {
      pred.data[off + p] = (fg[p] > bg[p] && lung[off + p]) ? 1 : 0;
    }
  }
  return pred;
}

}  // namespace emphseg
