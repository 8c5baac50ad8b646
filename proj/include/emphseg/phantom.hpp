#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "emphseg/config.hpp"
#include "emphseg/core_data.hpp"

namespace emphseg::phantom {

/// Intensity transform that distinguishes one simulated scanner from another.
struct ScannerProfile {
  ScannerTag tag;
  double hu_bias = 0.0;          // additive HU shift
  double smoothing_sigma = 0.0;  // in-plane Gaussian blur, pixels
  double noise_sigma = 0.0;      // additive Gaussian noise, HU
  bool ood = false;              // held out of training

  void validate() const;
};

/// Latent anatomy parameters. The HU means straddle the -950 HU threshold.
struct PhantomConfig {
  std::size_t slices = 10;
  std::size_t height = 64;
  std::size_t width = 64;
  double emph_target_fraction = 0.1;
  double parenchyma_mean_hu = -870.0;
  double parenchyma_sigma = 35.0;
  double emph_mean_hu = -990.0;
  double emph_sigma = 20.0;
  double body_hu = -50.0;
  double blob_scale = 2.0;  // smoothing of the emphysema noise field, pixels
  std::uint64_t seed = 0;

  void validate() const;
};

/// Per-scanner dataset layout.
struct SplitPlan {
  std::size_t scans_per_scanner = 30;
  std::size_t train_per_scanner = 16;
  std::size_t val_per_scanner = 4;  // remainder of in-distribution scans go to test_id
  double never_smoker_fraction = 0.3;
  double min_emph_fraction = 0.01;
  double max_emph_fraction = 0.4;
  double emph_skew = 2.5;  // target = min + (max - min) * u^skew, u ~ U(0,1)

  void validate() const;
};

struct DatasetConfig {
  PhantomConfig anatomy;
  std::vector<ScannerProfile> profiles;
  SplitPlan plan;
};

/// The four-scanner default suite; the last profile is the held-out scanner.
std::vector<ScannerProfile> default_scanner_suite();
DatasetConfig default_dataset_config();

/// Reads global anatomy/plan keys plus one `[scanner]` block per profile.
/// Missing blocks fall back to the default suite.
DatasetConfig dataset_config_from(const KeyValueConfig& cfg);

/// Separable truncated Gaussian (radius ceil(3 sigma)) with mirror-reflect borders.
void gaussian_blur_2d(std::span<double> image, std::size_t height, std::size_t width, double sigma);
void gaussian_blur_3d(std::span<double> volume, const Dims3& dims, double sigma);

/// Pre-scanner volume: two elliptical lungs per slice, emphysema as a smoothed-noise
/// excursion set hitting the target fraction. Tagged with scanner "latent".
CtVolume generate_anatomy(const PhantomConfig& cfg, const std::string& scan_id = "latent");

/// blur + bias + noise, clamped to the HU range. Masks pass through untouched.
CtVolume apply_scanner(const CtVolume& latent, const ScannerProfile& profile, std::uint64_t seed);

/// Generates every scan, writes volumes under out_dir/volumes and out_dir/manifest.tsv.
DatasetManifest build_dataset(const DatasetConfig& cfg, std::uint64_t seed,
                              const std::filesystem::path& out_dir);

/// Deterministic seed derivation for independent per-scan streams.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0);

}  // namespace emphseg::phantom
