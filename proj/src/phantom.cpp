#include "emphseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "emphseg/binary_io.hpp"
#include "emphseg/cdf_features.hpp"
#include "emphseg/errors.hpp"

namespace emphseg::phantom {

namespace {

std::vector<double> gaussian_kernel(double sigma) {
  const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * static_cast<double>(i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = w;
    sum += w;
  }
  for (auto& w : k) w /= sum;
  return k;
}

// half-sample symmetric extension: ... b a | a b c ... x y | y x ...
std::size_t reflect(std::ptrdiff_t i, std::ptrdiff_t n) {
  const std::ptrdiff_t period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - 1 - i);
}

// convolve `count` lines of length n laid out with the given strides
void blur_axis(std::span<double> data, std::size_t n, std::size_t stride, std::size_t count,
               std::size_t line_stride, const std::vector<double>& kernel) {
  const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  std::vector<double> line(n), out(n);
  for (std::size_t l = 0; l < count; ++l) {
    const std::size_t base = l * line_stride;
    for (std::size_t i = 0; i < n; ++i) line[i] = data[base + i * stride];
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::ptrdiff_t j = -radius; j <= radius; ++j) {
        acc += kernel[static_cast<std::size_t>(j + radius)] *
               line[reflect(static_cast<std::ptrdiff_t>(i) + j, static_cast<std::ptrdiff_t>(n))];
      }
      out[i] = acc;
    }
    for (std::size_t i = 0; i < n; ++i) data[base + i * stride] = out[i];
  }
}

std::int16_t clamp_hu(double value) {
  const double r = std::nearbyint(value);
  return static_cast<std::int16_t>(std::clamp(r, static_cast<double>(kMinHu), static_cast<double>(kMaxHu)));
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t h = splitmix64(base);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ (b * 0x9E3779B97F4A7C15ULL));
  h = splitmix64(h ^ (c * 0xD1B54A32D192ED03ULL));
  return h;
}

void ScannerProfile::validate() const {
  if (tag.id.empty()) throw ConfigError("scanner profile needs a tag");
  if (!(smoothing_sigma >= 0.0)) throw ConfigError("smoothing_sigma must be >= 0");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (!(std::abs(hu_bias) <= 50.0)) throw ConfigError("|hu_bias| must be <= 50");
}

void PhantomConfig::validate() const {
  if (slices < 1 || height < 16 || width < 16) throw ConfigError("phantom dims must be >= 16 in-plane");
  if (!(emph_target_fraction >= 0.0 && emph_target_fraction <= 0.65)) {
    throw ConfigError("emph_target_fraction must lie in [0, 0.65]");
  }
  if (!(emph_mean_hu < cdf::kEmphysemaThresholdHu && cdf::kEmphysemaThresholdHu < parenchyma_mean_hu)) {
    throw ConfigError("require emph_mean_hu < -950 < parenchyma_mean_hu");
  }
  if (parenchyma_sigma < 0 || emph_sigma < 0 || blob_scale <= 0) {
    throw ConfigError("sigmas must be >= 0 and blob_scale > 0");
  }
}

void SplitPlan::validate() const {
  if (scans_per_scanner == 0) throw ConfigError("scans_per_scanner must be positive");
  if (train_per_scanner + val_per_scanner > scans_per_scanner) {
    throw ConfigError("train + val scans exceed scans_per_scanner");
  }
  if (!(never_smoker_fraction >= 0.0 && never_smoker_fraction <= 1.0)) {
    throw ConfigError("never_smoker_fraction must lie in [0, 1]");
  }
  if (!(min_emph_fraction >= 0.0 && min_emph_fraction <= max_emph_fraction && max_emph_fraction <= 0.65)) {
    throw ConfigError("require 0 <= min_emph_fraction <= max_emph_fraction <= 0.65");
  }
  if (!(emph_skew > 0.0)) throw ConfigError("emph_skew must be positive");
}

std::vector<ScannerProfile> default_scanner_suite() {
  return {
      {ScannerTag("SYN-A"), 0.0, 0.0, 15.0, false},
      {ScannerTag("SYN-B"), 8.0, 0.5, 10.0, false},
      {ScannerTag("SYN-C"), -8.0, 1.0, 20.0, false},
      {ScannerTag("SYN-D"), 4.0, 1.5, 12.0, true},
  };
}

DatasetConfig default_dataset_config() {
  DatasetConfig cfg;
  cfg.profiles = default_scanner_suite();
  return cfg;
}

DatasetConfig dataset_config_from(const KeyValueConfig& kv) {
  DatasetConfig cfg = default_dataset_config();
  const auto& g = kv.global();
  auto& a = cfg.anatomy;
  a.slices = static_cast<std::size_t>(g.get_int("slices", static_cast<long long>(a.slices)));
  a.height = static_cast<std::size_t>(g.get_int("height", static_cast<long long>(a.height)));
  a.width = static_cast<std::size_t>(g.get_int("width", static_cast<long long>(a.width)));
  a.parenchyma_mean_hu = g.get_double("parenchyma_mean_hu", a.parenchyma_mean_hu);
  a.parenchyma_sigma = g.get_double("parenchyma_sigma", a.parenchyma_sigma);
  a.emph_mean_hu = g.get_double("emph_mean_hu", a.emph_mean_hu);
  a.emph_sigma = g.get_double("emph_sigma", a.emph_sigma);
  a.body_hu = g.get_double("body_hu", a.body_hu);
  a.blob_scale = g.get_double("blob_scale", a.blob_scale);
  auto& p = cfg.plan;
  p.scans_per_scanner =
      static_cast<std::size_t>(g.get_int("scans_per_scanner", static_cast<long long>(p.scans_per_scanner)));
  p.train_per_scanner =
      static_cast<std::size_t>(g.get_int("train_per_scanner", static_cast<long long>(p.train_per_scanner)));
  p.val_per_scanner =
      static_cast<std::size_t>(g.get_int("val_per_scanner", static_cast<long long>(p.val_per_scanner)));
  p.never_smoker_fraction = g.get_double("never_smoker_fraction", p.never_smoker_fraction);
  p.min_emph_fraction = g.get_double("min_emph_fraction", p.min_emph_fraction);
  p.max_emph_fraction = g.get_double("max_emph_fraction", p.max_emph_fraction);
  p.emph_skew = g.get_double("emph_skew", p.emph_skew);
  g.reject_unknown({"slices", "height", "width", "parenchyma_mean_hu", "parenchyma_sigma", "emph_mean_hu",
                    "emph_sigma", "body_hu", "blob_scale", "scans_per_scanner", "train_per_scanner",
                    "val_per_scanner", "never_smoker_fraction", "min_emph_fraction", "max_emph_fraction",
                    "emph_skew"});

  auto blocks = kv.sections("scanner");
  if (!blocks.empty()) {
    cfg.profiles.clear();
    for (const auto* s : blocks) {
      s->reject_unknown({"tag", "hu_bias", "smoothing_sigma", "noise_sigma", "ood"});
      ScannerProfile prof;
      prof.tag = ScannerTag(s->require_string("tag"));
      prof.hu_bias = s->get_double("hu_bias", 0.0);
      prof.smoothing_sigma = s->get_double("smoothing_sigma", 0.0);
      prof.noise_sigma = s->get_double("noise_sigma", 0.0);
      prof.ood = s->get_bool("ood", false);
      cfg.profiles.push_back(prof);
    }
  }
  for (const auto& s : kv.all_sections()) {
    if (s.name() != "scanner") throw ConfigError("unknown section [" + s.name() + "]");
  }
  a.validate();
  p.validate();
  for (const auto& prof : cfg.profiles) prof.validate();
  return cfg;
}

void gaussian_blur_2d(std::span<double> image, std::size_t height, std::size_t width, double sigma) {
  if (image.size() != height * width) throw ContractError("blur: image size mismatch");
  if (sigma <= 0.0) return;
  const auto k = gaussian_kernel(sigma);
  blur_axis(image, width, 1, height, width, k);
  blur_axis(image, height, width, width, 1, k);
}

void gaussian_blur_3d(std::span<double> volume, const Dims3& dims, double sigma) {
  if (volume.size() != dims.voxels()) throw ContractError("blur: volume size mismatch");
  if (sigma <= 0.0) return;
  const auto k = gaussian_kernel(sigma);
  const auto plane = dims.slice_size();
  for (std::size_t s = 0; s < dims.slices; ++s) {
    gaussian_blur_2d(volume.subspan(s * plane, plane), dims.height, dims.width, sigma);
  }
  if (dims.slices > 1) blur_axis(volume, dims.slices, plane, plane, 1, k);
}

CtVolume generate_anatomy(const PhantomConfig& cfg, const std::string& scan_id) {
  cfg.validate();
  const Dims3 dims{cfg.slices, cfg.height, cfg.width};
  const auto n = dims.voxels();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> jitter(-1.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // shape parameters, jittered per scan by up to ~8%
  const double W = static_cast<double>(cfg.width), H = static_cast<double>(cfg.height);
  struct Ellipse {
    double cx, cy, ax, ay;
  };
  Ellipse left{0.31 * W * (1 + 0.04 * jitter(rng)), 0.5 * H * (1 + 0.04 * jitter(rng)),
               0.15 * W * (1 + 0.08 * jitter(rng)), 0.33 * H * (1 + 0.08 * jitter(rng))};
  Ellipse right{0.69 * W * (1 + 0.04 * jitter(rng)), 0.5 * H * (1 + 0.04 * jitter(rng)),
                0.15 * W * (1 + 0.08 * jitter(rng)), 0.33 * H * (1 + 0.08 * jitter(rng))};

  std::vector<std::uint8_t> lung(n, 0), emph(n, 0);
  const double S = static_cast<double>(cfg.slices);
  for (std::size_t z = 0; z < cfg.slices; ++z) {
    // lungs taper towards apex and base; the outermost tenth of slices has no lung
    const double t = (static_cast<double>(z) + 0.5) / S;
    if (cfg.slices > 2 && (t < 0.1 || t > 0.9)) continue;
    const double scale = 0.65 + 0.35 * std::sin(std::numbers::pi * t);
    for (std::size_t y = 0; y < cfg.height; ++y) {
      for (std::size_t x = 0; x < cfg.width; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        bool inside = false;
        for (const auto& e : {left, right}) {
          const double dx = (px - e.cx) / (e.ax * scale), dy = (py - e.cy) / (e.ay * scale);
          inside = inside || (dx * dx + dy * dy <= 1.0);
        }
        lung[(z * cfg.height + y) * cfg.width + x] = inside ? 1 : 0;
      }
    }
  }

  std::vector<double> field(n);
  for (auto& f : field) f = gauss(rng);
  gaussian_blur_3d(field, dims, cfg.blob_scale);

  std::size_t lung_count = 0;
  double fmin = 0.0, fmax = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!lung[i]) continue;
    if (lung_count == 0 || field[i] < fmin) fmin = field[i];
    if (lung_count == 0 || field[i] > fmax) fmax = field[i];
    ++lung_count;
  }
  if (lung_count == 0) throw GenerationError("phantom has no lung voxels; increase dims");

  if (cfg.emph_target_fraction > 0.0) {
    const double target = cfg.emph_target_fraction;
    auto fraction_above = [&](double thr) {
      std::size_t c = 0;
      for (std::size_t i = 0; i < n; ++i) c += (lung[i] && field[i] > thr) ? 1 : 0;
      return static_cast<double>(c) / static_cast<double>(lung_count);
    };
    double lo = fmin - 1e-9, hi = fmax;  // fraction_above is decreasing in thr
    double best_thr = lo, best_err = std::abs(fraction_above(lo) - target);
    for (int it = 0; it < 80; ++it) {
      const double mid = 0.5 * (lo + hi);
      const double frac = fraction_above(mid);
      const double err = std::abs(frac - target);
      if (err < best_err) {
        best_err = err;
        best_thr = mid;
      }
      if (frac > target) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    if (best_err > 0.2 * target) {
      throw GenerationError("could not reach emphysema fraction " + std::to_string(target));
    }
    for (std::size_t i = 0; i < n; ++i) emph[i] = (lung[i] && field[i] > best_thr) ? 1 : 0;
  }

  std::vector<std::int16_t> hu(n);
  for (std::size_t i = 0; i < n; ++i) {
    double value = cfg.body_hu;
    if (emph[i]) {
      value = cfg.emph_mean_hu + cfg.emph_sigma * gauss(rng);
    } else if (lung[i]) {
      value = cfg.parenchyma_mean_hu + cfg.parenchyma_sigma * gauss(rng);
    }
    hu[i] = clamp_hu(value);
  }
  char target_buf[32];
  std::snprintf(target_buf, sizeof(target_buf), "%.6f", cfg.emph_target_fraction);
  return CtVolume(scan_id, ScannerTag("latent"), dims, std::move(hu), std::move(lung), std::move(emph),
                  {{"emph_target_fraction", target_buf}});
}

CtVolume apply_scanner(const CtVolume& latent, const ScannerProfile& profile, std::uint64_t seed) {
  profile.validate();
  const auto& d = latent.dims();
  std::vector<double> work(latent.hu().begin(), latent.hu().end());
  if (profile.smoothing_sigma > 0.0) {
    const auto plane = d.slice_size();
    for (std::size_t s = 0; s < d.slices; ++s) {
      gaussian_blur_2d(std::span(work).subspan(s * plane, plane), d.height, d.width,
                       profile.smoothing_sigma);
    }
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::int16_t> out(work.size());
  for (std::size_t i = 0; i < work.size(); ++i) {
    double v = work[i] + profile.hu_bias;
    if (profile.noise_sigma > 0.0) v += profile.noise_sigma * gauss(rng);
    out[i] = clamp_hu(v);
  }
  return latent.with_hu(std::move(out), profile.tag);
}

DatasetManifest build_dataset(const DatasetConfig& cfg, std::uint64_t seed,
                              const std::filesystem::path& out_dir) {
  cfg.anatomy.validate();
  cfg.plan.validate();
  if (cfg.profiles.size() < 2) throw ConfigError("build_dataset needs at least two scanner profiles");
  const auto n_ood = std::count_if(cfg.profiles.begin(), cfg.profiles.end(), [](const auto& p) { return p.ood; });
  if (n_ood != 1) throw ConfigError("exactly one scanner profile must be marked ood");
  for (std::size_t i = 0; i < cfg.profiles.size(); ++i) {
    cfg.profiles[i].validate();
    for (std::size_t j = 0; j < i; ++j) {
      if (cfg.profiles[i].tag == cfg.profiles[j].tag) throw ConfigError("duplicate scanner tag");
    }
  }

  const auto& plan = cfg.plan;
  const std::size_t n = plan.scans_per_scanner;
  const auto n_never =
      static_cast<std::size_t>(std::floor(plan.never_smoker_fraction * static_cast<double>(n) + 1e-9));

  std::vector<ManifestRecord> records;
  for (std::size_t p = 0; p < cfg.profiles.size(); ++p) {
    const auto& prof = cfg.profiles[p];

    std::vector<Split> splits(n, Split::kTestOod);
    if (!prof.ood) {
      std::vector<std::size_t> order(n);
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      std::mt19937_64 split_rng(derive_seed(seed, p, 0, 1));
      std::shuffle(order.begin(), order.end(), split_rng);
      for (std::size_t r = 0; r < n; ++r) {
        splits[order[r]] = r < plan.train_per_scanner                          ? Split::kTrain
                           : r < plan.train_per_scanner + plan.val_per_scanner ? Split::kVal
                                                                               : Split::kTestId;
      }
    }

    for (std::size_t i = 0; i < n; ++i) {
      std::mt19937_64 scan_rng(derive_seed(seed, p, i, 2));
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      PhantomConfig anat = cfg.anatomy;
      const bool never_smoker = i < n_never;
      const double u = unit(scan_rng);
      anat.emph_target_fraction =
          never_smoker ? 0.0
                       : plan.min_emph_fraction +
                             (plan.max_emph_fraction - plan.min_emph_fraction) * std::pow(u, plan.emph_skew);
      anat.seed = derive_seed(seed, p, i, 3);

      char id_buf[24];
      std::snprintf(id_buf, sizeof(id_buf), "%03zu", i);
      const std::string scan_id = prof.tag.id + "-" + id_buf;
      auto latent = generate_anatomy(anat, scan_id);
      auto scanned = apply_scanner(latent, prof, derive_seed(seed, p, i, 4));

      const std::string rel = "volumes/" + scan_id + ".ctph";
      write_volume(scanned, out_dir / rel);

      ManifestRecord rec;
      rec.scan_id = scan_id;
      rec.scanner = prof.tag;
      rec.split = splits[i];
      rec.path = rel;
      rec.never_smoker = never_smoker;
      rec.pct950 = cdf::pct_below_950(scanned);
      records.push_back(std::move(rec));
    }
  }
  DatasetManifest manifest(std::move(records), out_dir);
  manifest.validate();
  write_manifest(manifest, out_dir / "manifest.tsv");
  return manifest;
}

}  // namespace emphseg::phantom
