#include "emphseg/network.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "emphseg/errors.hpp"

namespace emphseg::net {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

constexpr double kGroupNormEps = 1e-5;

// Patch geometry shared by conv (image = input, grid = output) and
// transposed conv (image = output, grid = input).
struct Geometry {
  std::size_t channels, img_h, img_w, k, stride, pad, grid_h, grid_w;
  std::size_t rows() const { return channels * k * k; }
  std::size_t cols() const { return grid_h * grid_w; }
};

template <class T>
void im2col(const T* img, const Geometry& g, T* cols) {
  const auto gw = g.grid_w, gh = g.grid_h;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* plane = img + c * g.img_h * g.img_w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = cols + ((c * g.k + ky) * g.k + kx) * gh * gw;
        for (std::size_t oy = 0; oy < gh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          T* out = row + oy * gw;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.img_h)) {
            std::fill(out, out + gw, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.img_w;
          for (std::size_t ox = 0; ox < gw; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.img_w)) ? T(0) : src[ix];
          }
        }
      }
    }
  }
}

// adjoint of im2col; accumulates into img
template <class T>
void col2im(const T* cols, const Geometry& g, T* img) {
  const auto gw = g.grid_w, gh = g.grid_h;
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* plane = img + c * g.img_h * g.img_w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = cols + ((c * g.k + ky) * g.k + kx) * gh * gw;
        for (std::size_t oy = 0; oy < gh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.img_h)) continue;
          T* dst = plane + static_cast<std::size_t>(iy) * g.img_w;
          const T* in = row + oy * gw;
          for (std::size_t ox = 0; ox < gw; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.img_w)) dst[ix] += in[ox];
          }
        }
      }
    }
  }
}

struct ConvSpec {
  std::size_t k, stride, pad;
};

constexpr ConvSpec kConv3{3, 1, 1};
constexpr ConvSpec kDown3{3, 2, 1};
constexpr ConvSpec kUp4{4, 2, 1};
constexpr ConvSpec kPointwise{1, 1, 0};

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Param<T>& w, const Param<T>& b, ConvSpec spec) {
  const std::size_t cout = w.shape[0], cin = w.shape[1];
  if (x.c() != cin) throw ContractError("conv " + w.name + ": expected " + std::to_string(cin) + " channels");
  const std::size_t ho = (x.h() + 2 * spec.pad - spec.k) / spec.stride + 1;
  const std::size_t wo = (x.w() + 2 * spec.pad - spec.k) / spec.stride + 1;
  const Geometry g{cin, x.h(), x.w(), spec.k, spec.stride, spec.pad, ho, wo};
  Tensor<T> y(x.n(), cout, ho, wo);
  const bool pointwise = spec.k == 1 && spec.stride == 1 && spec.pad == 0;
  std::vector<T> cols(pointwise ? 0 : g.rows() * g.cols());
  ConstMatMap<T> W(w.values.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(g.rows()));
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> B(b.values.data(), static_cast<Eigen::Index>(cout));
  for (std::size_t n = 0; n < x.n(); ++n) {
    const T* src = x.sample(n);
    if (!pointwise) {
      im2col(src, g, cols.data());
      src = cols.data();
    }
    ConstMatMap<T> C(src, static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
    MatMap<T> Y(y.sample(n), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(g.cols()));
    Y.noalias() = W * C;
    Y.colwise() += B;
  }
  return y;
}

template <class T>
void conv2d_backward(const Tensor<T>& x, const Param<T>& w, ConvSpec spec, const Tensor<T>& dy, T* dw,
                     T* db, Tensor<T>* dx) {
  const std::size_t cout = w.shape[0], cin = w.shape[1];
  const Geometry g{cin, x.h(), x.w(), spec.k, spec.stride, spec.pad, dy.h(), dy.w()};
  const bool pointwise = spec.k == 1 && spec.stride == 1 && spec.pad == 0;
  std::vector<T> cols(pointwise ? 0 : g.rows() * g.cols());
  std::vector<T> dcols(pointwise || !dx ? 0 : g.rows() * g.cols());
  ConstMatMap<T> W(w.values.data(), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(g.rows()));
  MatMap<T> dW(dw, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(g.rows()));
  if (dx) *dx = Tensor<T>(x.n(), x.c(), x.h(), x.w());
  for (std::size_t n = 0; n < x.n(); ++n) {
    const T* src = x.sample(n);
    if (!pointwise) {
      im2col(src, g, cols.data());
      src = cols.data();
    }
    ConstMatMap<T> C(src, static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
    ConstMatMap<T> dY(dy.sample(n), static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(g.cols()));
    dW.noalias() += dY * C.transpose();
    // plain loop: Eigen's vectorized reductions depend on buffer alignment, which breaks run-to-run bit equality
    for (std::size_t r = 0; r < cout; ++r) {
      const T* row = dy.sample(n) + r * g.cols();
      T s = 0;
      for (std::size_t j = 0; j < g.cols(); ++j) s += row[j];
      db[r] += s;
    }
    if (dx) {
      if (pointwise) {
        MatMap<T> dX(dx->sample(n), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(g.cols()));
        dX.noalias() = W.transpose() * dY;
      } else {
        MatMap<T> dC(dcols.data(), static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
        dC.noalias() = W.transpose() * dY;
        col2im(dcols.data(), g, dx->sample(n));
      }
    }
  }
}

// weight layout (Cin, Cout, k, k)
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Param<T>& w, const Param<T>& b, ConvSpec spec) {
  const std::size_t cin = w.shape[0], cout = w.shape[1];
  if (x.c() != cin) throw ContractError("upconv " + w.name + ": channel mismatch");
  const std::size_t ho = (x.h() - 1) * spec.stride + spec.k - 2 * spec.pad;
  const std::size_t wo = (x.w() - 1) * spec.stride + spec.k - 2 * spec.pad;
  const Geometry g{cout, ho, wo, spec.k, spec.stride, spec.pad, x.h(), x.w()};
  Tensor<T> y(x.n(), cout, ho, wo);
  std::vector<T> cols(g.rows() * g.cols());
  ConstMatMap<T> W(w.values.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(g.rows()));
  MatMap<T> C(cols.data(), static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
  for (std::size_t n = 0; n < x.n(); ++n) {
    ConstMatMap<T> X(x.sample(n), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(g.cols()));
    C.noalias() = W.transpose() * X;
    col2im(cols.data(), g, y.sample(n));
    for (std::size_t c = 0; c < cout; ++c) {
      T* p = y.channel(n, c);
      std::for_each(p, p + y.plane(), [v = b.values[c]](T& e) { e += v; });
    }
  }
  return y;
}

template <class T>
void conv_transpose2d_backward(const Tensor<T>& x, const Param<T>& w, ConvSpec spec, const Tensor<T>& dy,
                               T* dw, T* db, Tensor<T>& dx) {
  const std::size_t cin = w.shape[0], cout = w.shape[1];
  const Geometry g{cout, dy.h(), dy.w(), spec.k, spec.stride, spec.pad, x.h(), x.w()};
  std::vector<T> cols(g.rows() * g.cols());
  ConstMatMap<T> W(w.values.data(), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(g.rows()));
  MatMap<T> dW(dw, static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(g.rows()));
  ConstMatMap<T> C(cols.data(), static_cast<Eigen::Index>(g.rows()), static_cast<Eigen::Index>(g.cols()));
  dx = Tensor<T>(x.n(), x.c(), x.h(), x.w());
  for (std::size_t n = 0; n < x.n(); ++n) {
    im2col(dy.sample(n), g, cols.data());
    ConstMatMap<T> X(x.sample(n), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(g.cols()));
    MatMap<T> dX(dx.sample(n), static_cast<Eigen::Index>(cin), static_cast<Eigen::Index>(g.cols()));
    dX.noalias() = W * C;
    dW.noalias() += X * C.transpose();
    for (std::size_t c = 0; c < cout; ++c) {
      const T* p = dy.channel(n, c);
      T acc = 0;
      for (std::size_t i = 0; i < dy.plane(); ++i) acc += p[i];
      db[c] += acc;
    }
  }
}

template <class T>
Tensor<T> group_norm(const Tensor<T>& x, const Param<T>& gamma, const Param<T>& beta, std::size_t groups,
                     Tensor<T>* xhat_out, std::vector<T>* inv_std_out) {
  const std::size_t per_group = x.c() / groups;
  const std::size_t count = per_group * x.plane();
  Tensor<T> y(x.n(), x.c(), x.h(), x.w());
  Tensor<T> xhat(x.n(), x.c(), x.h(), x.w());
  std::vector<T> inv_stds(x.n() * groups);
  for (std::size_t n = 0; n < x.n(); ++n) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const T* src = x.channel(n, gi * per_group);
      double sum = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < count; ++i) sum += static_cast<double>(src[i]);
      const double mean = sum / static_cast<double>(count);
      for (std::size_t i = 0; i < count; ++i) {
        const double d = static_cast<double>(src[i]) - mean;
        sq += d * d;
      }
      const double inv_std = 1.0 / std::sqrt(sq / static_cast<double>(count) + kGroupNormEps);
      inv_stds[n * groups + gi] = static_cast<T>(inv_std);
      T* xh = xhat.channel(n, gi * per_group);
      T* out = y.channel(n, gi * per_group);
      for (std::size_t c = 0; c < per_group; ++c) {
        const T gm = gamma.values[gi * per_group + c], bt = beta.values[gi * per_group + c];
        for (std::size_t i = c * x.plane(); i < (c + 1) * x.plane(); ++i) {
          xh[i] = static_cast<T>((static_cast<double>(src[i]) - mean) * inv_std);
          out[i] = gm * xh[i] + bt;
        }
      }
    }
  }
  if (xhat_out) *xhat_out = std::move(xhat);
  if (inv_std_out) *inv_std_out = std::move(inv_stds);
  return y;
}

template <class T>
Tensor<T> group_norm_backward(const Tensor<T>& xhat, const std::vector<T>& inv_std, const Param<T>& gamma,
                              const Tensor<T>& dy, std::size_t groups, T* dgamma, T* dbeta) {
  const std::size_t per_group = xhat.c() / groups;
  const std::size_t plane = xhat.plane();
  const std::size_t count = per_group * plane;
  Tensor<T> dx(xhat.n(), xhat.c(), xhat.h(), xhat.w());
  std::vector<T> dxhat(count);
  for (std::size_t n = 0; n < xhat.n(); ++n) {
    for (std::size_t gi = 0; gi < groups; ++gi) {
      const T* xh = xhat.channel(n, gi * per_group);
      const T* g = dy.channel(n, gi * per_group);
      double mean_d = 0.0, mean_dx = 0.0;
      for (std::size_t c = 0; c < per_group; ++c) {
        const std::size_t ch = gi * per_group + c;
        double sg = 0.0, sb = 0.0;
        for (std::size_t i = c * plane; i < (c + 1) * plane; ++i) {
          sg += static_cast<double>(g[i]) * static_cast<double>(xh[i]);
          sb += static_cast<double>(g[i]);
          dxhat[i] = g[i] * gamma.values[ch];
          mean_d += static_cast<double>(dxhat[i]);
          mean_dx += static_cast<double>(dxhat[i]) * static_cast<double>(xh[i]);
        }
        dgamma[ch] += static_cast<T>(sg);
        dbeta[ch] += static_cast<T>(sb);
      }
      mean_d /= static_cast<double>(count);
      mean_dx /= static_cast<double>(count);
      const double is = static_cast<double>(inv_std[n * groups + gi]);
      T* out = dx.channel(n, gi * per_group);
      for (std::size_t i = 0; i < count; ++i) {
        out[i] = static_cast<T>(is * (static_cast<double>(dxhat[i]) - mean_d - static_cast<double>(xh[i]) * mean_dx));
      }
    }
  }
  return dx;
}

template <class T>
void relu_inplace(Tensor<T>& t) {
  for (auto& v : t.values()) v = v > T(0) ? v : T(0);
}

template <class T>
void relu_mask_inplace(Tensor<T>& grad, const Tensor<T>& output) {
  auto& g = grad.values();
  const auto& o = output.values();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(o[i] > T(0))) g[i] = T(0);
  }
}

template <class T>
void add_inplace(Tensor<T>& acc, const Tensor<T>& other) {
  auto& a = acc.values();
  const auto& b = other.values();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) throw ContractError("concat: shape mismatch");
  Tensor<T> out(a.n(), a.c() + b.c(), a.h(), a.w());
  for (std::size_t n = 0; n < a.n(); ++n) {
    std::copy(a.sample(n), a.sample(n) + a.sample_size(), out.sample(n));
    std::copy(b.sample(n), b.sample(n) + b.sample_size(), out.sample(n) + a.sample_size());
  }
  return out;
}

template <class T>
void split_channels(const Tensor<T>& t, std::size_t first_c, Tensor<T>& a, Tensor<T>& b) {
  a = Tensor<T>(t.n(), first_c, t.h(), t.w());
  b = Tensor<T>(t.n(), t.c() - first_c, t.h(), t.w());
  for (std::size_t n = 0; n < t.n(); ++n) {
    std::copy(t.sample(n), t.sample(n) + a.sample_size(), a.sample(n));
    std::copy(t.sample(n) + a.sample_size(), t.sample(n) + t.sample_size(), b.sample(n));
  }
}

// GN -> conv -> ReLU
template <class T>
Tensor<T> conv_block(const NetworkConfig& cfg, const ModelParams<T>& p, const std::string& prefix,
                     const Tensor<T>& x, ConvSpec spec, typename ForwardCache<T>::ConvBlock* cache) {
  Tensor<T> xhat;
  std::vector<T> inv_std;
  auto normed = group_norm(x, p.at(prefix + ".gn.gamma"), p.at(prefix + ".gn.beta"), cfg.gn_groups,
                           cache ? &xhat : nullptr, cache ? &inv_std : nullptr);
  auto y = conv2d(normed, p.at(prefix + ".conv.w"), p.at(prefix + ".conv.b"), spec);
  relu_inplace(y);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->normed = std::move(normed);
    cache->output = y;
  }
  return y;
}

template <class T>
Tensor<T> conv_block_backward(const NetworkConfig& cfg, const ModelParams<T>& p, const std::string& prefix,
                              const typename ForwardCache<T>::ConvBlock& cache, ConvSpec spec, Tensor<T> dy,
                              ModelParams<T>& grads) {
  relu_mask_inplace(dy, cache.output);
  Tensor<T> dnormed;
  conv2d_backward(cache.normed, p.at(prefix + ".conv.w"), spec, dy, grads.data(prefix + ".conv.w"),
                  grads.data(prefix + ".conv.b"), &dnormed);
  return group_norm_backward(cache.xhat, cache.inv_std, p.at(prefix + ".gn.gamma"), dnormed, cfg.gn_groups,
                             grads.data(prefix + ".gn.gamma"), grads.data(prefix + ".gn.beta"));
}

template <class T>
Tensor<T> dattn_backward(const ModelParams<T>& p, const std::string& prefix,
                         const typename ForwardCache<T>::Dattn& cache, const Tensor<T>& domain,
                         const Tensor<T>& dout, ModelParams<T>& grads) {
  const auto& feat = cache.features;
  const std::size_t N = feat.n(), C = feat.c(), plane = feat.plane();
  const auto& w1 = p.at(prefix + ".fc1.w");
  const auto& w2 = p.at(prefix + ".fc2.w");
  const std::size_t hidden = w1.shape[0], bins = w1.shape[1];
  T* dw1 = grads.data(prefix + ".fc1.w");
  T* db1 = grads.data(prefix + ".fc1.b");
  T* dw2 = grads.data(prefix + ".fc2.w");
  T* db2 = grads.data(prefix + ".fc2.b");

  Tensor<T> dfeat(N, C, feat.h(), feat.w());
  std::vector<T> dz(C), dh(hidden);
  for (std::size_t n = 0; n < N; ++n) {
    const T* a = cache.attention.data() + n * C;
    const T* hpre = cache.hidden_pre.data() + n * hidden;
    for (std::size_t c = 0; c < C; ++c) {
      const T* g = dout.channel(n, c);
      const T* f = feat.channel(n, c);
      T* df = dfeat.channel(n, c);
      double da = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        da += static_cast<double>(g[i]) * static_cast<double>(f[i]);
        df[i] = g[i] * a[c];
      }
      dz[c] = static_cast<T>(da) * a[c] * (T(1) - a[c]);
    }
    std::fill(dh.begin(), dh.end(), T(0));
    for (std::size_t c = 0; c < C; ++c) {
      db2[c] += dz[c];
      const T* wrow = w2.values.data() + c * hidden;
      T* dwrow = dw2 + c * hidden;
      for (std::size_t j = 0; j < hidden; ++j) {
        const T r = hpre[j] > T(0) ? hpre[j] : T(0);
        dwrow[j] += dz[c] * r;
        dh[j] += wrow[j] * dz[c];
      }
    }
    const T* d = domain.sample(n);
    for (std::size_t j = 0; j < hidden; ++j) {
      if (!(hpre[j] > T(0))) continue;
      db1[j] += dh[j];
      T* dwrow = dw1 + j * bins;
      for (std::size_t b = 0; b < bins; ++b) dwrow[b] += dh[j] * d[b];
    }
  }
  return dfeat;
}

std::string enc_name(std::size_t s, const char* part) { return "enc." + std::to_string(s) + "." + part; }
std::string dec_name(std::size_t s, const char* part) { return "dec." + std::to_string(s) + "." + part; }

template <class T>
void check_domain(const NetworkConfig& cfg, const Tensor<T>* domain, std::size_t batch) {
  if (!uses_domain(cfg.variant)) return;
  if (!domain) throw ContractError("variant " + to_string(cfg.variant) + " requires a domain feature");
  if (domain->n() != batch) throw ContractError("domain feature batch size mismatch");
  if (domain->sample_size() != cfg.n_cdf_bins) {
    throw ConfigError("domain feature has " + std::to_string(domain->sample_size()) + " bins, expected " +
                      std::to_string(cfg.n_cdf_bins));
  }
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kPlainUnet: return "plain_unet";
    case Variant::kDattnScanner: return "dattn_scanner";
    case Variant::kDattnDiff: return "dattn_diff";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "plain_unet") return Variant::kPlainUnet;
  if (s == "dattn_scanner") return Variant::kDattnScanner;
  if (s == "dattn_diff") return Variant::kDattnDiff;
  throw ConfigError("unknown variant '" + s + "' (expected plain_unet, dattn_scanner or dattn_diff)");
}

std::size_t NetworkConfig::channels(std::size_t stage) const {
  return std::min(base_channels << stage, max_channels);
}

void NetworkConfig::validate() const {
  if (n_down_stages == 0) throw ConfigError("n_down_stages must be >= 1");
  const std::size_t factor = std::size_t{1} << n_down_stages;
  if (input_size < factor || input_size % factor != 0) {
    throw ConfigError("input_size must be a positive multiple of 2^n_down_stages");
  }
  if (base_channels == 0 || gn_groups == 0 || dattn_hidden == 0 || n_cdf_bins == 0) {
    throw ConfigError("channel, group, hidden and bin counts must be positive");
  }
  for (std::size_t s = 0; s <= n_down_stages; ++s) {
    if (channels(s) % gn_groups != 0) {
      throw ConfigError("gn_groups=" + std::to_string(gn_groups) + " does not divide channel width " +
                        std::to_string(channels(s)));
    }
  }
}

KeyValueConfig NetworkConfig::to_config() const {
  KeyValueConfig kv;
  auto& g = kv.global();
  g.set("input_size", std::to_string(input_size));
  g.set("base_channels", std::to_string(base_channels));
  g.set("n_down_stages", std::to_string(n_down_stages));
  g.set("max_channels", std::to_string(max_channels));
  g.set("dattn_hidden", std::to_string(dattn_hidden));
  g.set("n_cdf_bins", std::to_string(n_cdf_bins));
  g.set("gn_groups", std::to_string(gn_groups));
  g.set("variant", to_string(variant));
  g.set("dattn_position", dattn_position == DattnPosition::kAfterDoubleConv ? "after" : "before");
  g.set("seed", std::to_string(seed));
  return kv;
}

NetworkConfig NetworkConfig::from_config(const ConfigSection& s) {
  s.reject_unknown({"input_size", "base_channels", "n_down_stages", "max_channels", "dattn_hidden", "n_cdf_bins",
                    "gn_groups", "variant", "dattn_position", "seed"});
  NetworkConfig c;
  auto as_size = [&](const char* key, std::size_t fallback) {
    const auto v = s.get_int(key, static_cast<long long>(fallback));
    if (v < 0) throw ConfigError(std::string(key) + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  c.input_size = as_size("input_size", c.input_size);
  c.base_channels = as_size("base_channels", c.base_channels);
  c.n_down_stages = as_size("n_down_stages", c.n_down_stages);
  c.max_channels = as_size("max_channels", c.max_channels);
  c.dattn_hidden = as_size("dattn_hidden", c.dattn_hidden);
  c.n_cdf_bins = as_size("n_cdf_bins", c.n_cdf_bins);
  c.gn_groups = as_size("gn_groups", c.gn_groups);
  c.variant = parse_variant(s.get_string("variant", to_string(c.variant)));
  const auto pos = s.get_string("dattn_position", "after");
  if (pos != "after" && pos != "before") throw ConfigError("dattn_position must be 'after' or 'before'");
  c.dattn_position = pos == "after" ? DattnPosition::kAfterDoubleConv : DattnPosition::kBeforeDoubleConv;
  c.seed = s.get_u64("seed", c.seed);
  c.validate();
  return c;
}

float normalize_hu(std::int16_t hu) {
  const int clamped = std::clamp<int>(hu, -1024, 0);
  return static_cast<float>(clamped + 1024) / 1024.0f;
}

std::vector<float> normalize_slice(const CtSlice& s) {
  std::vector<float> out(s.hu.size());
  std::transform(s.hu.begin(), s.hu.end(), out.begin(), normalize_hu);
  return out;
}

template <class T>
ModelParams<T> init_params(const NetworkConfig& cfg) {
  cfg.validate();
  ModelParams<double> p;
  std::mt19937_64 rng(cfg.seed);
  auto uniform_fill = [&](Param<double>& prm, double fan_in) {
    std::uniform_real_distribution<double> dist(-1.0 / std::sqrt(fan_in), 1.0 / std::sqrt(fan_in));
    for (auto& v : prm.values) v = dist(rng);
  };
  auto add_conv = [&](const std::string& prefix, std::size_t cout, std::size_t cin, std::size_t k) {
    const double fan_in = static_cast<double>(cin * k * k);
    uniform_fill(p.add(prefix + ".w", {cout, cin, k, k}), fan_in);
    uniform_fill(p.add(prefix + ".b", {cout}), fan_in);
  };
  auto add_gn = [&](const std::string& prefix, std::size_t c) {
    p.add(prefix + ".gamma", {c}, 1.0);
    p.add(prefix + ".beta", {c}, 0.0);
  };
  auto add_block = [&](const std::string& prefix, std::size_t cout, std::size_t cin) {
    add_gn(prefix + ".gn", cin);
    add_conv(prefix + ".conv", cout, cin, 3);
  };
  auto add_fc = [&](const std::string& prefix, std::size_t out, std::size_t in) {
    uniform_fill(p.add(prefix + ".w", {out, in}), static_cast<double>(in));
    uniform_fill(p.add(prefix + ".b", {out}), static_cast<double>(in));
  };

  add_conv("enc.stem.conv", cfg.channels(0), 1, 3);
  for (std::size_t s = 0; s < cfg.n_down_stages; ++s) {
    add_block(enc_name(s, "conv"), cfg.channels(s), cfg.channels(s));
    add_block(enc_name(s, "down"), cfg.channels(s + 1), cfg.channels(s));
  }
  for (std::size_t i = cfg.n_down_stages; i-- > 0;) {
    const std::size_t c = cfg.channels(i), cin = cfg.channels(i + 1);
    // stride-2 kernel-4 upconv: each output pixel sees cin * (4/2)^2 inputs
    {
      const double fan_in = static_cast<double>(cin * 4);
      uniform_fill(p.add(dec_name(i, "up.w"), {cin, c, 4, 4}), fan_in);
      uniform_fill(p.add(dec_name(i, "up.b"), {c}), fan_in);
    }
    const bool before = cfg.dattn_position == DattnPosition::kBeforeDoubleConv;
    add_block(dec_name(i, "conv1"), c, 2 * c);
    add_block(dec_name(i, "conv2"), c, c);
    if (uses_domain(cfg.variant)) {
      const std::size_t att_c = before ? 2 * c : c;
      add_fc(dec_name(i, "dattn.fc1"), cfg.dattn_hidden, cfg.n_cdf_bins);
      add_fc(dec_name(i, "dattn.fc2"), att_c, cfg.dattn_hidden);
    }
  }
  add_conv("head.conv", 2, cfg.channels(0), 1);
  if constexpr (std::is_same_v<T, double>) {
    return p;
  } else {
    return p.template cast<T>();
  }
}

template <class T>
EncoderOutput<T> encoder_forward(const NetworkConfig& cfg, const ModelParams<T>& params, const Tensor<T>& images,
                                 ForwardCache<T>* cache) {
  if (images.c() != 1 || images.h() != cfg.input_size || images.w() != cfg.input_size) {
    throw ConfigError("encoder input must be N x 1 x " + std::to_string(cfg.input_size) + " x " +
                      std::to_string(cfg.input_size));
  }
  auto x = conv2d(images, params.at("enc.stem.conv.w"), params.at("enc.stem.conv.b"), kConv3);
  relu_inplace(x);
  if (cache) {
    cache->images = images;
    cache->stem_out = x;
    cache->enc_conv.assign(cfg.n_down_stages, {});
    cache->enc_down.assign(cfg.n_down_stages, {});
  }
  EncoderOutput<T> out;
  for (std::size_t s = 0; s < cfg.n_down_stages; ++s) {
    auto skip = conv_block(cfg, params, enc_name(s, "conv"), x, kConv3, cache ? &cache->enc_conv[s] : nullptr);
    x = conv_block(cfg, params, enc_name(s, "down"), skip, kDown3, cache ? &cache->enc_down[s] : nullptr);
    out.skips.push_back(std::move(skip));
  }
  out.bottleneck = std::move(x);
  return out;
}

template <class T>
std::vector<T> dattn_weights(const ModelParams<T>& params, const std::string& prefix, std::size_t channels,
                             const Tensor<T>& domain, std::vector<T>* hidden_pre) {
  const auto& w1 = params.at(prefix + ".fc1.w");
  const auto& b1 = params.at(prefix + ".fc1.b");
  const auto& w2 = params.at(prefix + ".fc2.w");
  const auto& b2 = params.at(prefix + ".fc2.b");
  const std::size_t hidden = w1.shape[0], bins = w1.shape[1];
  if (domain.sample_size() != bins) throw ConfigError("domain feature length does not match n_cdf_bins");
  if (w2.shape[0] != channels) throw ConfigError("attention width does not match feature channels");
  const std::size_t N = domain.n();
  ConstMatMap<T> W1(w1.values.data(), static_cast<Eigen::Index>(hidden), static_cast<Eigen::Index>(bins));
  ConstMatMap<T> W2(w2.values.data(), static_cast<Eigen::Index>(channels), static_cast<Eigen::Index>(hidden));
  ConstMatMap<T> D(domain.data(), static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(bins));
  RowMat<T> H = D * W1.transpose();
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t j = 0; j < hidden; ++j) H(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(j)) += b1.values[j];
  }
  if (hidden_pre) hidden_pre->assign(H.data(), H.data() + H.size());
  RowMat<T> R = H.cwiseMax(T(0));
  RowMat<T> Z = R * W2.transpose();
  std::vector<T> a(N * channels);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const T z = Z(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(c)) + b2.values[c];
      a[n * channels + c] = T(1) / (T(1) + std::exp(-z));
    }
  }
  return a;
}

template <class T>
std::vector<T> dattn_weights(const ModelParams<T>& params, const std::string& prefix, std::size_t channels,
                             const Tensor<T>& domain) {
  return dattn_weights<T>(params, prefix, channels, domain, nullptr);
}

template <class T>
Tensor<T> dattn_forward(const ModelParams<T>& params, const std::string& prefix, const Tensor<T>& features,
                        const Tensor<T>& domain, typename ForwardCache<T>::Dattn* cache) {
  if (domain.n() != features.n()) throw ContractError("dattn: batch size mismatch");
  std::vector<T> hidden_pre;
  auto a = dattn_weights<T>(params, prefix, features.c(), domain, cache ? &hidden_pre : nullptr);
  Tensor<T> out = features;
  for (std::size_t n = 0; n < features.n(); ++n) {
    for (std::size_t c = 0; c < features.c(); ++c) {
      T* p = out.channel(n, c);
      const T w = a[n * features.c() + c];
      std::for_each(p, p + out.plane(), [w](T& v) { v *= w; });
    }
  }
  if (cache) {
    cache->features = features;
    cache->hidden_pre = std::move(hidden_pre);
    cache->attention = std::move(a);
  }
  return out;
}

template <class T>
Tensor<T> decoder_forward(const NetworkConfig& cfg, const ModelParams<T>& params, const EncoderOutput<T>& enc,
                          const std::type_identity_t<Tensor<T>>* domain, ForwardCache<T>* cache) {
  if (enc.skips.size() != cfg.n_down_stages) throw ContractError("decoder: wrong number of skip features");
  check_domain(cfg, domain, enc.bottleneck.n());
  const bool attn = uses_domain(cfg.variant);
  const bool before = cfg.dattn_position == DattnPosition::kBeforeDoubleConv;
  if (cache) {
    cache->dec.assign(cfg.n_down_stages, {});
    if (attn) cache->domain = *domain;
  }
  Tensor<T> x = enc.bottleneck;
  for (std::size_t s = cfg.n_down_stages; s-- > 0;) {
    auto* sc = cache ? &cache->dec[s] : nullptr;
    auto up = conv_transpose2d(x, params.at(dec_name(s, "up.w")), params.at(dec_name(s, "up.b")), kUp4);
    if (sc) sc->up_input = std::move(x);
    auto cat = concat_channels(up, enc.skips[s]);
    if (attn && before) cat = dattn_forward(params, dec_name(s, "dattn"), cat, *domain, sc ? &sc->dattn : nullptr);
    auto d1 = conv_block(cfg, params, dec_name(s, "conv1"), cat, kConv3, sc ? &sc->conv1 : nullptr);
    x = conv_block(cfg, params, dec_name(s, "conv2"), d1, kConv3, sc ? &sc->conv2 : nullptr);
    if (attn && !before) x = dattn_forward(params, dec_name(s, "dattn"), x, *domain, sc ? &sc->dattn : nullptr);
  }
  if (cache) cache->head_input = x;
  return conv2d(x, params.at("head.conv.w"), params.at("head.conv.b"), kPointwise);
}

template <class T>
Tensor<T> forward(const NetworkConfig& cfg, const ModelParams<T>& params, const Tensor<T>& images,
                  const std::type_identity_t<Tensor<T>>* domain, ForwardCache<T>* cache) {
  check_domain(cfg, domain, images.n());
  auto enc = encoder_forward(cfg, params, images, cache);
  return decoder_forward(cfg, params, enc, domain, cache);
}

template <class T>
void backward(const NetworkConfig& cfg, const ModelParams<T>& params, const ForwardCache<T>& cache,
              const Tensor<T>& dlogits, ModelParams<T>& grads) {
  const bool attn = uses_domain(cfg.variant);
  const bool before = cfg.dattn_position == DattnPosition::kBeforeDoubleConv;
  const std::size_t S = cfg.n_down_stages;

  Tensor<T> dx;
  conv2d_backward(cache.head_input, params.at("head.conv.w"), kPointwise, dlogits, grads.data("head.conv.w"),
                  grads.data("head.conv.b"), &dx);

  std::vector<Tensor<T>> dskips(S);
  for (std::size_t s = 0; s < S; ++s) {
    const auto& sc = cache.dec[s];
    if (attn && !before) dx = dattn_backward(params, dec_name(s, "dattn"), sc.dattn, cache.domain, dx, grads);
    dx = conv_block_backward(cfg, params, dec_name(s, "conv2"), sc.conv2, kConv3, std::move(dx), grads);
    dx = conv_block_backward(cfg, params, dec_name(s, "conv1"), sc.conv1, kConv3, std::move(dx), grads);
    if (attn && before) dx = dattn_backward(params, dec_name(s, "dattn"), sc.dattn, cache.domain, dx, grads);
    Tensor<T> dup;
    split_channels(dx, cfg.channels(s), dup, dskips[s]);
    conv_transpose2d_backward(sc.up_input, params.at(dec_name(s, "up.w")), kUp4, dup, grads.data(dec_name(s, "up.w")),
                              grads.data(dec_name(s, "up.b")), dx);
  }
  // dx is now the bottleneck gradient
  for (std::size_t s = S; s-- > 0;) {
    auto dskip = conv_block_backward(cfg, params, enc_name(s, "down"), cache.enc_down[s], kDown3, std::move(dx), grads);
    add_inplace(dskip, dskips[s]);
    dx = conv_block_backward(cfg, params, enc_name(s, "conv"), cache.enc_conv[s], kConv3, std::move(dskip), grads);
  }
  relu_mask_inplace(dx, cache.stem_out);
  conv2d_backward<T>(cache.images, params.at("enc.stem.conv.w"), kConv3, dx, grads.data("enc.stem.conv.w"),
                     grads.data("enc.stem.conv.b"), nullptr);
}

template <class T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  Tensor<T> out(logits.n(), logits.c(), logits.h(), logits.w());
  const std::size_t plane = logits.plane(), C = logits.c();
  for (std::size_t n = 0; n < logits.n(); ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      T mx = logits.channel(n, 0)[i];
      for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, logits.channel(n, c)[i]);
      T sum = 0;
      for (std::size_t c = 0; c < C; ++c) {
        const T e = std::exp(logits.channel(n, c)[i] - mx);
        out.channel(n, c)[i] = e;
        sum += e;
      }
      for (std::size_t c = 0; c < C; ++c) out.channel(n, c)[i] /= sum;
    }
  }
  return out;
}

#define EMPHSEG_INSTANTIATE(T)                                                                                    \
  template ModelParams<T> init_params<T>(const NetworkConfig&);                                                   \
  template EncoderOutput<T> encoder_forward<T>(const NetworkConfig&, const ModelParams<T>&, const Tensor<T>&,     \
                                               ForwardCache<T>*);                                                 \
  template Tensor<T> dattn_forward<T>(const ModelParams<T>&, const std::string&, const Tensor<T>&,                \
                                      const Tensor<T>&, typename ForwardCache<T>::Dattn*);                        \
  template std::vector<T> dattn_weights<T>(const ModelParams<T>&, const std::string&, std::size_t,                \
                                           const Tensor<T>&);                                                     \
  template Tensor<T> decoder_forward<T>(const NetworkConfig&, const ModelParams<T>&, const EncoderOutput<T>&,     \
                                        const Tensor<T>*, ForwardCache<T>*);                                      \
  template Tensor<T> forward<T>(const NetworkConfig&, const ModelParams<T>&, const Tensor<T>&, const Tensor<T>*,  \
                                ForwardCache<T>*);                                                                \
  template void backward<T>(const NetworkConfig&, const ModelParams<T>&, const ForwardCache<T>&,                  \
                            const Tensor<T>&, ModelParams<T>&);                                                   \
  template Tensor<T> softmax_channels<T>(const Tensor<T>&);

EMPHSEG_INSTANTIATE(float)
EMPHSEG_INSTANTIATE(double)

#undef EMPHSEG_INSTANTIATE

}  // namespace emphseg::net
