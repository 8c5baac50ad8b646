#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emphseg/cdf_features.hpp"
#include "emphseg/checkpoint.hpp"
#include "emphseg/core_data.hpp"
#include "emphseg/network.hpp"
#include "emphseg/objective.hpp"

namespace emphseg::eval {

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for a single value
};

MeanStd mean_std(std::span<const double> values);

/// min, lower quartile, median, upper quartile, max (linear interpolation between order statistics).
struct FiveNumber {
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
};

FiveNumber five_number(std::vector<double> values);

struct Aggregate {
  std::size_t count = 0;
  MeanStd ref, pred, error, dsc;
  FiveNumber error_box, dsc_box;
};

Aggregate aggregate(std::span<const ScanEval> scans);

struct EvalReport {
  net::Variant variant = net::Variant::kPlainUnet;
  Split split = Split::kTestId;
  std::vector<ScanEval> scans;                    // sorted by scan_id
  std::map<ScannerTag, Aggregate> per_scanner;
  Aggregate global;

  /// Sorts scans and recomputes every aggregate from them.
  static EvalReport build(net::Variant variant, Split split, std::vector<ScanEval> scans);
};

std::string report_to_text(const EvalReport& r);
/// Reads the per-scan section back; aggregates are recomputed, not parsed.
EvalReport report_from_text(const std::string& text);
void write_report(const EvalReport& r, const std::filesystem::path& path);
EvalReport read_report(const std::filesystem::path& path);

/// Rebuilds a float model from a checkpoint, checking the arrays against the config.
Model model_from_checkpoint(const Checkpoint& c);

using Predictor = std::function<Mask3(const CtVolume&)>;

/// Evaluates every scan of `split` with an arbitrary predictor (scan_id order).
EvalReport evaluate_split(const Predictor& predict, const DatasetManifest& manifest, Split split,
                          net::Variant variant);

/// predict_scan over all lung slices of every scan in `split`. Every scanner in the
/// split needs a prior unless the model is plain_unet.
EvalReport run_eval(const Checkpoint& checkpoint, const DatasetManifest& manifest, Split split,
                    const std::map<ScannerTag, cdf::CdfFeature>& priors);

struct ComparisonRow {
  net::Variant variant;
  Aggregate global;
  double delta_error = 0.0;  // |mean error| minus the baseline's
  double delta_dsc = 0.0;    // mean DSC minus the baseline's
};

/// Rows in variant order; the baseline is plain_unet when present, else the first row.
struct Comparison {
  Split split = Split::kTestId;
  std::vector<ComparisonRow> rows;
  net::Variant best_error;  // smallest |mean signed error|
  net::Variant best_dsc;    // largest mean DSC
};

/// Throws ContractError unless all reports share split and scan set and no variant repeats.
Comparison compare_variants(const std::vector<EvalReport>& reports);
std::string comparison_to_text(const Comparison& c);

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  std::array<std::uint8_t, 3> pixel(std::size_t y, std::size_t x) const {
    const auto* p = rgb.data() + 3 * (y * width + x);
    return {p[0], p[1], p[2]};
  }
};

inline constexpr std::array<std::uint8_t, 3> kTruePositive{0, 255, 0};
inline constexpr std::array<std::uint8_t, 3> kFalseNegative{255, 255, 0};
inline constexpr std::array<std::uint8_t, 3> kFalsePositive{255, 0, 0};

/// Lung-window gray background (HU -1024..-300) with TP green, FN yellow, FP red.
RgbImage render_overlay(const CtSlice& slice, std::span<const std::uint8_t> pred, std::span<const std::uint8_t> ref);

std::vector<std::uint8_t> encode_ppm(const RgbImage& img);
void write_ppm(const RgbImage& img, const std::filesystem::path& path);

}  // namespace emphseg::eval
