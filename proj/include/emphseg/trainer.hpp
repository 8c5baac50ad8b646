#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "emphseg/checkpoint.hpp"
#include "emphseg/config.hpp"
#include "emphseg/core_data.hpp"
#include "emphseg/network.hpp"
#include "emphseg/objective.hpp"

namespace emphseg::train {

struct TrainConfig {
  double lr_max = 2e-4;
  double lr_min = 1e-8;
  std::size_t constant_epochs = 25;
  std::vector<std::size_t> restart_periods{10, 20};
  std::size_t max_epochs = 50;
  std::size_t batch_size = 8;
  std::size_t early_stop_patience = 25;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  std::size_t slices_per_train_scan = 50;
  std::size_t slices_per_val_scan = 25;
  // U(-a, a) noise on the scanner CDF for the dattn_scanner variant
  double scanner_noise_amplitude = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
  KeyValueConfig to_config() const;
  static TrainConfig from_config(const ConfigSection& s);
  bool operator==(const TrainConfig&) const = default;
};

/// Constant lr_max for constant_epochs, then cosine periods that start at lr_max
/// and land on lr_min at their last epoch. Throws ContractError outside [0, max_epochs).
double lr_at(std::size_t epoch, const TrainConfig& cfg);

template <class T>
struct AdamState {
  ModelParams<T> m, v;
  std::uint64_t step = 0;

  static AdamState like(const ModelParams<T>& params) {
    return {params.zeros_like(), params.zeros_like(), 0};
  }
};

/// Decoupled weight decay, then a bias-corrected Adam update.
/// Throws DivergenceError on a non-finite gradient before touching anything.
template <class T>
void adamw_step(ModelParams<T>& params, const ModelParams<T>& grads, AdamState<T>& state, double lr,
                const TrainConfig& cfg);

/// "No improvement for more than `patience` epochs" on a lower-is-better score.
class EarlyStopper {
 public:
  explicit EarlyStopper(std::size_t patience) : patience_(patience) {}

  /// Records the score of `epoch`; returns true if it is a new best.
  bool update(std::size_t epoch, double score);
  bool should_stop(std::size_t epoch) const;

  double best_score() const { return best_score_; }
  long long best_epoch() const { return best_epoch_; }
  void restore(double best_score, long long best_epoch) {
    best_score_ = best_score;
    best_epoch_ = best_epoch;
  }

 private:
  std::size_t patience_;
  double best_score_ = std::numeric_limits<double>::infinity();
  long long best_epoch_ = -1;
};

/// Slices sampled once from every scan of one split, normalized, with the per-scan
/// domain feature (empty for plain_unet).
struct SampleSet {
  std::size_t height = 0, width = 0, bins = 0;
  std::vector<float> images;         // N * H * W
  std::vector<std::uint8_t> masks;   // N * H * W
  std::vector<float> domain;         // N * bins, or empty
  std::vector<std::string> scan_ids;
  std::vector<ScannerTag> scanners;

  std::size_t size() const { return scan_ids.size(); }
};

SampleSet load_samples(const DatasetManifest& manifest, Split split, std::size_t slices_per_scan,
                       const DomainContext& ctx, std::uint64_t seed);

struct Batch {
  Tensor<float> images;
  Tensor<float> labels;   // one-hot
  Tensor<float> domain;   // (N, bins, 1, 1), empty for plain_unet
  bool has_domain() const { return !domain.empty(); }
};

/// One epoch worth of batches. Training batches are shuffled per epoch and, for
/// dattn_scanner, get fresh U(-a, a) feature noise; validation keeps sample order and
/// clean features.
std::vector<Batch> assemble_epoch(const SampleSet& samples, Split split, net::Variant variant,
                                  const TrainConfig& cfg, std::size_t epoch);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_dsc = 0.0;
  bool is_best = false;
};

std::string format_log(const std::vector<EpochLog>& log);

/// Mean loss and pooled foreground DSC of `params` over a set of batches.
struct Validation {
  double loss = 0.0;
  double dsc = 0.0;
};
Validation validate_batches(const net::NetworkConfig& net_cfg, const ModelParams<float>& params,
                            const std::vector<Batch>& batches);

/// Epoch-by-epoch training driver. Owns the full mutable state so that a snapshot
/// taken between epochs resumes onto the identical trajectory.
class Trainer {
 public:
  Trainer(net::NetworkConfig net_cfg, TrainConfig cfg, SampleSet train, SampleSet val);

  /// Runs one epoch. Returns false (and does nothing) once finished.
  bool step_epoch();
  /// Runs until early stop or max_epochs, or until `limit` further epochs.
  void run(std::size_t limit = std::numeric_limits<std::size_t>::max());
  bool finished() const;

  const std::vector<EpochLog>& log() const { return log_; }
  std::size_t next_epoch() const { return next_epoch_; }
  const ModelParams<float>& params() const { return params_; }
  const net::NetworkConfig& net_config() const { return net_cfg_; }

  /// Checkpoint of the best epoch so far (ContractError before the first epoch).
  Checkpoint best_checkpoint() const;
  Model best_model() const;

  /// Complete resumable state.
  Checkpoint snapshot() const;
  static Trainer resume(const Checkpoint& state, TrainConfig cfg, SampleSet train, SampleSet val);

 private:
  double train_epoch(std::size_t epoch, double lr);

  net::NetworkConfig net_cfg_;
  TrainConfig cfg_;
  SampleSet train_, val_;
  ModelParams<float> params_, best_params_;
  AdamState<float> adam_;
  EarlyStopper stopper_;
  std::size_t next_epoch_ = 0;
  bool stopped_ = false;
  std::vector<EpochLog> log_;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLog> log;
};

/// Full recipe: sample train/val slices, attach domain features from `priors`, train.
TrainResult train(const DatasetManifest& manifest, const net::NetworkConfig& net_cfg, const TrainConfig& cfg,
                  const std::map<ScannerTag, cdf::CdfFeature>& priors);

}  // namespace emphseg::train
