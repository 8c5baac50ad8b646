#include "emphseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include "emphseg/binary_io.hpp"
#include "emphseg/errors.hpp"
#include "emphseg/phantom.hpp"

namespace emphseg::train {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kNoiseStream = 0x4e4f;
constexpr std::uint64_t kSampleStream = 0x534c;

std::size_t as_size(const ConfigSection& s, const char* key, std::size_t fallback) {
  const auto v = s.get_int(key, static_cast<long long>(fallback));
  if (v < 0) throw ConfigError(std::string(key) + " must be non-negative");
  return static_cast<std::size_t>(v);
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr_min >= 0.0 && lr_min < lr_max)) throw ConfigError("need 0 <= lr_min < lr_max");
  if (restart_periods.empty()) throw ConfigError("at least one restart period is required");
  for (auto p : restart_periods) {
    if (p == 0) throw ConfigError("restart periods must be positive");
  }
  if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
  if (early_stop_patience > max_epochs) throw ConfigError("early_stop_patience exceeds max_epochs");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be positive");
  if (slices_per_train_scan == 0 || slices_per_val_scan == 0) throw ConfigError("slices per scan must be positive");
  if (!(scanner_noise_amplitude >= 0.0)) throw ConfigError("scanner_noise_amplitude must be non-negative");
}

KeyValueConfig TrainConfig::to_config() const {
  KeyValueConfig kv;
  auto& g = kv.global();
  g.set("lr_max", io::format_double(lr_max));
  g.set("lr_min", io::format_double(lr_min));
  g.set("constant_epochs", std::to_string(constant_epochs));
  std::string periods;
  for (std::size_t i = 0; i < restart_periods.size(); ++i) {
    periods += (i ? "," : "") + std::to_string(restart_periods[i]);
  }
  g.set("restart_periods", periods);
  g.set("max_epochs", std::to_string(max_epochs));
  g.set("batch_size", std::to_string(batch_size));
  g.set("early_stop_patience", std::to_string(early_stop_patience));
  g.set("weight_decay", io::format_double(weight_decay));
  g.set("beta1", io::format_double(beta1));
  g.set("beta2", io::format_double(beta2));
  g.set("adam_eps", io::format_double(adam_eps));
  g.set("slices_per_train_scan", std::to_string(slices_per_train_scan));
  g.set("slices_per_val_scan", std::to_string(slices_per_val_scan));
  g.set("scanner_noise_amplitude", io::format_double(scanner_noise_amplitude));
  g.set("seed", std::to_string(seed));
  return kv;
}

TrainConfig TrainConfig::from_config(const ConfigSection& s) {
  s.reject_unknown({"lr_max", "lr_min", "constant_epochs", "restart_periods", "max_epochs", "batch_size",
                    "early_stop_patience", "weight_decay", "beta1", "beta2", "adam_eps",
                    "slices_per_train_scan", "slices_per_val_scan", "scanner_noise_amplitude", "seed"});
  TrainConfig c;
  c.lr_max = s.get_double("lr_max", c.lr_max);
  c.lr_min = s.get_double("lr_min", c.lr_min);
  c.constant_epochs = as_size(s, "constant_epochs", c.constant_epochs);
  if (s.has("restart_periods")) {
    c.restart_periods.clear();
    for (double p : s.get_double_list("restart_periods", {})) {
      if (p < 1.0 || p != std::floor(p)) throw ConfigError("restart_periods must be positive integers");
      c.restart_periods.push_back(static_cast<std::size_t>(p));
    }
  }
  c.max_epochs = as_size(s, "max_epochs", c.max_epochs);
  c.batch_size = as_size(s, "batch_size", c.batch_size);
  c.early_stop_patience = as_size(s, "early_stop_patience", c.early_stop_patience);
  c.weight_decay = s.get_double("weight_decay", c.weight_decay);
  c.beta1 = s.get_double("beta1", c.beta1);
  c.beta2 = s.get_double("beta2", c.beta2);
  c.adam_eps = s.get_double("adam_eps", c.adam_eps);
  c.slices_per_train_scan = as_size(s, "slices_per_train_scan", c.slices_per_train_scan);
  c.slices_per_val_scan = as_size(s, "slices_per_val_scan", c.slices_per_val_scan);
  c.scanner_noise_amplitude = s.get_double("scanner_noise_amplitude", c.scanner_noise_amplitude);
  c.seed = s.get_u64("seed", c.seed);
  c.validate();
  return c;
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch >= cfg.max_epochs) {
    throw ContractError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(cfg.max_epochs) + ")");
  }
  if (epoch < cfg.constant_epochs) return cfg.lr_max;
  std::size_t start = cfg.constant_epochs;
  for (auto period : cfg.restart_periods) {
    if (epoch < start + period) {
      if (period == 1) return cfg.lr_max;
      const double t = static_cast<double>(epoch - start);
      const double len = static_cast<double>(period - 1);
      return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * t / len)) / 2.0;
    }
    start += period;
  }
  throw ContractError("lr_at: epoch " + std::to_string(epoch) + " lies beyond the configured restart periods");
}

template <class T>
void adamw_step(ModelParams<T>& params, const ModelParams<T>& grads, AdamState<T>& state, double lr,
                const TrainConfig& cfg) {
  const auto& ps = params.all();
  const auto& gs = grads.all();
  if (gs.size() != ps.size() || state.m.all().size() != ps.size() || state.v.all().size() != ps.size()) {
    throw ContractError("adamw_step: parameter sets differ");
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (gs[i].shape != ps[i].shape || state.m.all()[i].shape != ps[i].shape) {
      throw ContractError("adamw_step: shape mismatch for '" + ps[i].name + "'");
    }
    for (T g : gs[i].values) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw DivergenceError("non-finite gradient in '" + ps[i].name + "'");
      }
    }
  }
  ++state.step;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double decay = 1.0 - lr * cfg.weight_decay;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& p = params.all()[i].values;
    const auto& g = gs[i].values;
    auto& m = state.m.all()[i].values;
    auto& v = state.v.all()[i].values;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * gj;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = lr * (mj / c1) / (std::sqrt(vj / c2) + cfg.adam_eps);
      p[j] = static_cast<T>(static_cast<double>(p[j]) * decay - update);
    }
  }
}

template void adamw_step<float>(ModelParams<float>&, const ModelParams<float>&, AdamState<float>&, double,
                                const TrainConfig&);
template void adamw_step<double>(ModelParams<double>&, const ModelParams<double>&, AdamState<double>&, double,
                                 const TrainConfig&);

bool EarlyStopper::update(std::size_t epoch, double score) {
  if (score < best_score_) {
    best_score_ = score;
    best_epoch_ = static_cast<long long>(epoch);
    return true;
  }
  return false;
}

bool EarlyStopper::should_stop(std::size_t epoch) const {
  if (best_epoch_ < 0) return false;
  return static_cast<long long>(epoch) - best_epoch_ > static_cast<long long>(patience_);
}

SampleSet load_samples(const DatasetManifest& manifest, Split split, std::size_t slices_per_scan,
                       const DomainContext& ctx, std::uint64_t seed) {
  SampleSet out;
  const auto records = manifest.with_split(split);
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto volume = read_volume(manifest.resolve(records[r]));
    const auto feature = ctx.feature_for(volume);
    const auto slices = sample_slices(volume, slices_per_scan, phantom::derive_seed(seed, kSampleStream, r));
    for (const auto& s : slices) {
      if (out.scan_ids.empty()) {
        out.height = s.height;
        out.width = s.width;
        out.bins = feature ? feature->size() : 0;
      } else if (s.height != out.height || s.width != out.width) {
        throw DimensionError("scan " + volume.scan_id() + " differs in slice size from earlier scans");
      }
      const auto norm = net::normalize_slice(s);
      out.images.insert(out.images.end(), norm.begin(), norm.end());
      out.masks.insert(out.masks.end(), s.emph_mask.begin(), s.emph_mask.end());
      if (feature) {
        if (feature->size() != out.bins) throw ConfigError("domain features differ in length");
        out.domain.insert(out.domain.end(), feature->begin(), feature->end());
      }
      out.scan_ids.push_back(volume.scan_id());
      out.scanners.push_back(volume.scanner());
    }
  }
  return out;
}

std::vector<Batch> assemble_epoch(const SampleSet& samples, Split split, net::Variant variant,
                                  const TrainConfig& cfg, std::size_t epoch) {
  if (split != Split::kTrain && split != Split::kVal) throw ContractError("assemble_epoch: train or val only");
  const bool training = split == Split::kTrain;
  const bool with_domain = net::uses_domain(variant);
  if (with_domain && samples.bins == 0 && samples.size() > 0) {
    throw ConfigError("variant " + net::to_string(variant) + " needs domain features but samples have none");
  }
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  if (training) {
    std::mt19937_64 rng(phantom::derive_seed(cfg.seed, kShuffleStream, epoch));
    std::shuffle(order.begin(), order.end(), rng);
  }
  const bool noisy = training && variant == net::Variant::kDattnScanner && cfg.scanner_noise_amplitude > 0.0;
  const std::size_t plane = samples.height * samples.width;
  std::vector<Batch> batches;
  for (std::size_t first = 0, b = 0; first < order.size(); first += cfg.batch_size, ++b) {
    const std::size_t count = std::min(cfg.batch_size, order.size() - first);
    Batch batch;
    batch.images = Tensor<float>(count, 1, samples.height, samples.width);
    std::vector<std::uint8_t> masks(count * plane);
    if (with_domain) batch.domain = Tensor<float>(count, samples.bins, 1, 1);
    std::mt19937_64 noise_rng(phantom::derive_seed(cfg.seed, kNoiseStream, epoch, b));
    std::uniform_real_distribution<double> noise(-cfg.scanner_noise_amplitude, cfg.scanner_noise_amplitude);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t src = order[first + i];
      std::copy_n(samples.images.begin() + static_cast<std::ptrdiff_t>(src * plane), plane, batch.images.sample(i));
      std::copy_n(samples.masks.begin() + static_cast<std::ptrdiff_t>(src * plane), plane,
                  masks.begin() + static_cast<std::ptrdiff_t>(i * plane));
      if (with_domain) {
        const float* f = samples.domain.data() + src * samples.bins;
        float* dst = batch.domain.sample(i);
        for (std::size_t k = 0; k < samples.bins; ++k) {
          dst[k] = noisy ? static_cast<float>(static_cast<double>(f[k]) + noise(noise_rng)) : f[k];
        }
      }
    }
    batch.labels = one_hot<float>(masks, count, samples.height, samples.width);
    batches.push_back(std::move(batch));
  }
  return batches;
}

std::string format_log(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  for (const auto& e : log) {
    os << e.epoch << '\t' << io::format_double(e.lr) << '\t' << io::format_double(e.train_loss) << '\t'
       << io::format_double(e.val_loss) << '\t' << io::format_double(e.val_dsc) << '\t' << (e.is_best ? 1 : 0)
       << '\n';
  }
  return os.str();
}

Validation validate_batches(const net::NetworkConfig& net_cfg, const ModelParams<float>& params,
                            const std::vector<Batch>& batches) {
  Validation v;
  double weight = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const auto& b : batches) {
    auto logits = net::forward(net_cfg, params, b.images, b.has_domain() ? &b.domain : nullptr);
    const auto loss = segmentation_loss_from_logits(b.labels, logits);
    v.loss += loss.total * static_cast<double>(b.images.n());
    weight += static_cast<double>(b.images.n());
    for (std::size_t n = 0; n < logits.n(); ++n) {
      const float* bg = logits.channel(n, 0);
      const float* fg = logits.channel(n, 1);
      const float* y = b.labels.channel(n, 1);
      for (std::size_t i = 0; i < logits.plane(); ++i) {
        const bool p = fg[i] > bg[i], r = y[i] > 0.5f;
        tp += p && r;
        fp += p && !r;
        fn += !p && r;
      }
    }
  }
  if (weight > 0.0) v.loss /= weight;
  const auto denom = 2 * tp + fp + fn;
  v.dsc = denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  return v;
}

Trainer::Trainer(net::NetworkConfig net_cfg, TrainConfig cfg, SampleSet train, SampleSet val)
    : net_cfg_(std::move(net_cfg)),
      cfg_(std::move(cfg)),
      train_(std::move(train)),
      val_(std::move(val)),
      stopper_(cfg_.early_stop_patience) {
  net_cfg_.validate();
  cfg_.validate();
  if (train_.size() == 0) throw DegenerateInputError("no training samples");
  if (val_.size() == 0) throw DegenerateInputError("no validation samples");
  for (const auto* s : {&train_, &val_}) {
    if (s->height != net_cfg_.input_size || s->width != net_cfg_.input_size) {
      throw ConfigError("slices are " + std::to_string(s->height) + "x" + std::to_string(s->width) +
                        " but the network expects " + std::to_string(net_cfg_.input_size));
    }
    if (net::uses_domain(net_cfg_.variant) && s->bins != net_cfg_.n_cdf_bins) {
      throw ConfigError("domain features have " + std::to_string(s->bins) + " bins, network expects " +
                        std::to_string(net_cfg_.n_cdf_bins));
    }
  }
  params_ = net::init_params<float>(net_cfg_);
  adam_ = AdamState<float>::like(params_);
}

bool Trainer::finished() const { return stopped_ || next_epoch_ >= cfg_.max_epochs; }

double Trainer::train_epoch(std::size_t epoch, double lr) {
  const auto batches = assemble_epoch(train_, Split::kTrain, net_cfg_.variant, cfg_, epoch);
  double total = 0.0, weight = 0.0;
  auto grads = params_.zeros_like();
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const auto& batch = batches[b];
    net::ForwardCache<float> cache;
    auto logits = net::forward(net_cfg_, params_, batch.images, batch.has_domain() ? &batch.domain : nullptr, &cache);
    Tensor<float> dlogits;
    const auto loss = segmentation_loss_from_logits(batch.labels, logits, &dlogits);
    if (!std::isfinite(loss.total)) {
      throw DivergenceError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(b));
    }
    grads.fill(0.0f);
    net::backward(net_cfg_, params_, cache, dlogits, grads);
    adamw_step(params_, grads, adam_, lr, cfg_);
    total += loss.total * static_cast<double>(batch.images.n());
    weight += static_cast<double>(batch.images.n());
  }
  return total / weight;
}

bool Trainer::step_epoch() {
  if (finished()) return false;
  const std::size_t epoch = next_epoch_;
  EpochLog entry;
  entry.epoch = epoch;
  entry.lr = lr_at(epoch, cfg_);
  entry.train_loss = train_epoch(epoch, entry.lr);
  const auto val = validate_batches(net_cfg_, params_, assemble_epoch(val_, Split::kVal, net_cfg_.variant, cfg_, epoch));
  if (!std::isfinite(val.loss)) {
    throw DivergenceError("non-finite validation loss at epoch " + std::to_string(epoch));
  }
  entry.val_loss = val.loss;
  entry.val_dsc = val.dsc;
  entry.is_best = stopper_.update(epoch, val.loss);
  if (entry.is_best) best_params_ = params_;
  log_.push_back(entry);
  ++next_epoch_;
  if (stopper_.should_stop(epoch)) stopped_ = true;
  return true;
}

void Trainer::run(std::size_t limit) {
  for (std::size_t i = 0; i < limit && step_epoch(); ++i) {
  }
}

Checkpoint Trainer::best_checkpoint() const {
  if (stopper_.best_epoch() < 0) throw ContractError("no epoch has completed yet");
  Checkpoint c;
  c.config = net_cfg_;
  c.metadata["best_epoch"] = std::to_string(stopper_.best_epoch());
  c.metadata["best_val_loss"] = io::format_double(stopper_.best_score());
  c.metadata["variant"] = net::to_string(net_cfg_.variant);
  store_params(c.arrays, best_params_);
  return c;
}

Model Trainer::best_model() const {
  if (stopper_.best_epoch() < 0) throw ContractError("no epoch has completed yet");
  return Model{net_cfg_, best_params_};
}

Checkpoint Trainer::snapshot() const {
  Checkpoint c;
  c.config = net_cfg_;
  c.metadata["kind"] = "train_state";
  c.metadata["next_epoch"] = std::to_string(next_epoch_);
  c.metadata["stopped"] = stopped_ ? "1" : "0";
  c.metadata["adam_step"] = std::to_string(adam_.step);
  c.metadata["best_epoch"] = std::to_string(stopper_.best_epoch());
  c.metadata["best_val_loss"] = io::format_double(stopper_.best_score());
  std::string cfg_text = cfg_.to_config().to_text();
  std::replace(cfg_text.begin(), cfg_text.end(), '\n', ';');
  c.metadata["train_config"] = cfg_text;
  auto& log = c.arrays.add("log", {log_.size(), 6});
  for (std::size_t i = 0; i < log_.size(); ++i) {
    const auto& e = log_[i];
    const double row[6] = {static_cast<double>(e.epoch), e.lr, e.train_loss, e.val_loss, e.val_dsc,
                           e.is_best ? 1.0 : 0.0};
    std::copy(row, row + 6, log.values.begin() + static_cast<std::ptrdiff_t>(i * 6));
  }
  store_params(c.arrays, params_, "param.");
  store_params(c.arrays, adam_.m, "adam.m.");
  store_params(c.arrays, adam_.v, "adam.v.");
  if (stopper_.best_epoch() >= 0) store_params(c.arrays, best_params_, "best.");
  return c;
}

Trainer Trainer::resume(const Checkpoint& state, TrainConfig cfg, SampleSet train, SampleSet val) {
  const auto& md = state.metadata;
  auto get = [&](const char* key) {
    auto it = md.find(key);
    if (it == md.end()) throw FormatError(std::string("train state lacks '") + key + "'");
    return it->second;
  };
  if (get("kind") != "train_state") throw FormatError("checkpoint is not a training state");
  Trainer t(state.config, std::move(cfg), std::move(train), std::move(val));
  try {
    t.next_epoch_ = std::stoull(get("next_epoch"));
    t.stopped_ = get("stopped") == "1";
    t.adam_.step = std::stoull(get("adam_step"));
    const long long best_epoch = std::stoll(get("best_epoch"));
    t.stopper_.restore(io::parse_double(get("best_val_loss")), best_epoch);
  } catch (const std::logic_error&) {
    throw FormatError("train state metadata is malformed");
  }
  t.params_ = load_params(state.arrays, t.params_, "param.");
  t.adam_.m = load_params(state.arrays, t.params_, "adam.m.");
  t.adam_.v = load_params(state.arrays, t.params_, "adam.v.");
  if (t.stopper_.best_epoch() >= 0) t.best_params_ = load_params(state.arrays, t.params_, "best.");
  if (state.arrays.contains("log")) {
    const auto& log = state.arrays.at("log");
    if (log.shape.size() != 2 || log.shape[1] != 6) throw FormatError("train state log has the wrong shape");
    for (std::size_t i = 0; i < log.shape[0]; ++i) {
      const double* r = log.values.data() + i * 6;
      t.log_.push_back({static_cast<std::size_t>(r[0]), r[1], r[2], r[3], r[4], r[5] != 0.0});
    }
  }
  return t;
}

TrainResult train(const DatasetManifest& manifest, const net::NetworkConfig& net_cfg, const TrainConfig& cfg,
                  const std::map<ScannerTag, cdf::CdfFeature>& priors) {
  net_cfg.validate();
  cfg.validate();
  DomainContext ctx{net_cfg.variant, priors};
  auto train_set = load_samples(manifest, Split::kTrain, cfg.slices_per_train_scan, ctx,
                                phantom::derive_seed(cfg.seed, static_cast<std::uint64_t>(Split::kTrain)));
  auto val_set = load_samples(manifest, Split::kVal, cfg.slices_per_val_scan, ctx,
                              phantom::derive_seed(cfg.seed, static_cast<std::uint64_t>(Split::kVal)));
  Trainer trainer(net_cfg, cfg, std::move(train_set), std::move(val_set));
  trainer.run();
  return {trainer.best_checkpoint(), trainer.log()};
}

}  // namespace emphseg::train
