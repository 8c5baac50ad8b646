// emphseg: phantom generation, scanner priors, training, evaluation and overlays.
//
// Exit codes: 0 success, 2 usage, 3 configuration or data error, 4 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "emphseg/binary_io.hpp"
#include "emphseg/cdf_features.hpp"
#include "emphseg/checkpoint.hpp"
#include "emphseg/core_data.hpp"
#include "emphseg/errors.hpp"
#include "emphseg/evaluator.hpp"
#include "emphseg/phantom.hpp"
#include "emphseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace emphseg;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitRuntime = 4;

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string config;
  bool deterministic = false;
};

// Output directories must not already exist as regular files; created lazily.
void prepare_out(const fs::path& out) {
  if (fs::exists(out) && !fs::is_directory(out)) throw ConfigError("--out " + out.string() + " is not a directory");
  fs::create_directories(out);
}

std::map<ScannerTag, cdf::CdfFeature> load_priors(const std::string& dir) {
  std::map<ScannerTag, cdf::CdfFeature> priors;
  if (dir.empty()) return priors;
  if (!fs::is_directory(dir)) throw ConfigError("--priors " + dir + " is not a directory");
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() != ".cdf") continue;
    auto f = cdf::read_cdf(entry.path());
    if (f.kind != cdf::CdfKind::kScanner) throw ConfigError(entry.path().string() + " is not a scanner prior");
    priors.emplace(ScannerTag(entry.path().stem().string()), std::move(f));
  }
  if (priors.empty()) throw ConfigError("no .cdf prior files in " + dir);
  return priors;
}

void require_priors(const std::map<ScannerTag, cdf::CdfFeature>& priors, const DatasetManifest& manifest,
                    std::initializer_list<Split> splits, std::size_t bins) {
  for (auto split : splits) {
    for (const auto& r : manifest.with_split(split)) {
      auto it = priors.find(r.scanner);
      if (it == priors.end()) throw ConfigError("no prior file for scanner '" + r.scanner.id + "'");
      if (it->second.values.size() != bins) {
        throw ConfigError("prior for '" + r.scanner.id + "' has " + std::to_string(it->second.values.size()) +
                          " bins, the network expects " + std::to_string(bins));
      }
    }
  }
}

int cmd_gen(const Globals& g, const std::string& config, const fs::path& out) {
  auto cfg = phantom::default_dataset_config();
  const std::string path = config.empty() ? g.config : config;
  if (!path.empty()) cfg = phantom::dataset_config_from(KeyValueConfig::load(path));
  prepare_out(out);
  const auto manifest = phantom::build_dataset(cfg, g.seed, out);
  std::map<std::string, std::size_t> counts;
  for (const auto& r : manifest.records()) ++counts[to_string(r.split)];
  std::cout << manifest.records().size() << " scans from " << manifest.scanners().size() << " scanners:";
  for (const auto& [split, n] : counts) std::cout << ' ' << split << '=' << n;
  std::cout << "\nmanifest: " << (out / "manifest.tsv").string() << '\n';
  return 0;
}

int cmd_priors(const std::string& manifest_path, const std::string& scanner, const fs::path& out,
               std::size_t bins, std::size_t references) {
  const auto manifest = read_manifest(manifest_path);
  std::vector<ScannerTag> tags;
  if (scanner == "all") {
    tags = manifest.scanners();
  } else {
    tags.push_back(ScannerTag(scanner));
    if (manifest.with_scanner(tags.back()).empty()) throw ConfigError("scanner '" + scanner + "' not in manifest");
  }
  cdf::BinEdges edges;
  edges.bins = bins;
  edges.validate();
  std::vector<std::pair<ScannerTag, cdf::CdfFeature>> priors;
  for (const auto& t : tags) priors.emplace_back(t, cdf::scanner_prior(manifest, t, edges, references));
  prepare_out(out);
  for (const auto& [t, f] : priors) {
    const auto path = out / (t.id + ".cdf");
    cdf::write_cdf(f, path);
    std::cout << t.id << ": " << f.sources.size() << " reference scans -> " << path.string() << '\n';
  }
  return 0;
}

struct TrainArgs {
  std::string manifest, variant, net_config, train_config, priors, resume;
  fs::path out;
  std::optional<std::size_t> epochs;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  net::NetworkConfig net_cfg;
  if (!a.net_config.empty()) net_cfg = net::NetworkConfig::from_config(KeyValueConfig::load(a.net_config).global());
  if (!a.variant.empty()) net_cfg.variant = net::parse_variant(a.variant);
  train::TrainConfig cfg;
  const std::string train_path = a.train_config.empty() ? g.config : a.train_config;
  if (!train_path.empty()) cfg = train::TrainConfig::from_config(KeyValueConfig::load(train_path).global());
  if (a.epochs) {
    cfg.max_epochs = *a.epochs;
    cfg.early_stop_patience = std::min(cfg.early_stop_patience, cfg.max_epochs);
  }
  if (g.seed_given) {
    cfg.seed = g.seed;
    net_cfg.seed = g.seed;
  }
  net_cfg.validate();
  cfg.validate();

  const auto manifest = read_manifest(a.manifest);
  manifest.validate();
  const auto priors = load_priors(a.priors);
  if (net::uses_domain(net_cfg.variant)) {
    if (a.priors.empty()) {
      throw ConfigError("variant " + net::to_string(net_cfg.variant) + " needs --priors (a directory of .cdf files)");
    }
    require_priors(priors, manifest, {Split::kTrain, Split::kVal}, net_cfg.n_cdf_bins);
  }
  std::optional<Checkpoint> state;
  if (!a.resume.empty()) state = read_checkpoint(a.resume);

  const DomainContext ctx{net_cfg.variant, priors};
  auto train_set = train::load_samples(manifest, Split::kTrain, cfg.slices_per_train_scan, ctx,
                                       phantom::derive_seed(cfg.seed, static_cast<std::uint64_t>(Split::kTrain)));
  auto val_set = train::load_samples(manifest, Split::kVal, cfg.slices_per_val_scan, ctx,
                                     phantom::derive_seed(cfg.seed, static_cast<std::uint64_t>(Split::kVal)));
  auto trainer = state ? train::Trainer::resume(*state, cfg, std::move(train_set), std::move(val_set))
                       : train::Trainer(net_cfg, cfg, std::move(train_set), std::move(val_set));
  if (state && trainer.net_config().variant != net_cfg.variant) {
    throw ConfigError("resume state was trained as " + net::to_string(trainer.net_config().variant));
  }
  prepare_out(a.out);
  while (trainer.step_epoch()) {
    const auto& e = trainer.log().back();
    std::printf("epoch %zu lr %.3g train %.5f val %.5f dsc %.4f%s\n", e.epoch, e.lr, e.train_loss, e.val_loss,
                e.val_dsc, e.is_best ? " *" : "");
    std::fflush(stdout);
  }
  write_checkpoint(trainer.best_checkpoint(), a.out / "best.ckpt");
  write_checkpoint(trainer.snapshot(), a.out / "state.ckpt");
  io::write_text_file(a.out / "train_log.tsv", train::format_log(trainer.log()));
  std::cout << "best checkpoint: " << (a.out / "best.ckpt").string() << '\n';
  return 0;
}

std::vector<Split> eval_splits(const std::string& s) {
  if (s == "both") return {Split::kTestId, Split::kTestOod};
  const auto split = parse_split(s);
  if (split != Split::kTestId && split != Split::kTestOod) throw ConfigError("--split must be test_id, test_ood or both");
  return {split};
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest_path, const std::string& split,
             const std::string& priors_dir, const fs::path& out) {
  const auto splits = eval_splits(split);
  const auto ck = read_checkpoint(checkpoint);
  const auto manifest = read_manifest(manifest_path);
  const auto priors = load_priors(priors_dir);
  if (net::uses_domain(ck.config.variant)) {
    if (priors_dir.empty()) throw ConfigError("the checkpoint's variant needs --priors");
    for (auto s : splits) require_priors(priors, manifest, {s}, ck.config.n_cdf_bins);
  }
  eval::model_from_checkpoint(ck);
  prepare_out(out);
  for (auto s : splits) {
    const auto report = eval::run_eval(ck, manifest, s, priors);
    const auto path = out / ("report_" + to_string(s) + ".tsv");
    eval::write_report(report, path);
    std::printf("%s %s: %zu scans, mean error %.3f%%, DSC %.4f -> %s\n", net::to_string(report.variant).c_str(),
                to_string(s).c_str(), report.global.count, report.global.error.mean, report.global.dsc.mean,
                path.string().c_str());
  }
  return 0;
}

int cmd_compare(const std::vector<std::string>& paths, const fs::path& out) {
  std::vector<eval::EvalReport> reports;
  for (const auto& p : paths) reports.push_back(eval::read_report(p));
  const auto table = eval::compare_variants(reports);
  prepare_out(out);
  const auto text = eval::comparison_to_text(table);
  io::write_text_file(out / "comparison.tsv", text);
  std::cout << text;
  return 0;
}

int cmd_overlay(const std::string& checkpoint, const std::string& manifest_path, const std::string& scan_id,
                const std::string& priors_dir, const fs::path& out) {
  const auto ck = read_checkpoint(checkpoint);
  const auto manifest = read_manifest(manifest_path);
  const auto& record = manifest.find(scan_id);
  const auto model = eval::model_from_checkpoint(ck);
  const auto priors = load_priors(priors_dir);
  if (net::uses_domain(model.config.variant) && !priors.count(record.scanner)) {
    throw ConfigError("no prior for scanner '" + record.scanner.id + "'");
  }
  const auto volume = read_volume(manifest.resolve(record));
  const auto pred = predict_scan(model, volume, DomainContext{model.config.variant, priors});
  prepare_out(out);
  const auto plane = volume.dims().slice_size();
  std::size_t written = 0;
  for (std::size_t s = 0; s < volume.dims().slices; ++s) {
    if (!volume.slice_has_lung(s)) continue;
    const auto slice = extract_slice(volume, s);
    const std::span<const std::uint8_t> p(pred.data.data() + s * plane, plane);
    const auto img = eval::render_overlay(slice, p, slice.emph_mask);
    char name[64];
    std::snprintf(name, sizeof name, "_s%03zu.ppm", s);
    eval::write_ppm(img, out / (scan_id + name));
    ++written;
  }
  std::cout << written << " overlays written to " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"emphseg: scanner-robust emphysema segmentation on synthetic CT phantoms"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random stream (default 0)")->each([&](const std::string&) {
    g.seed_given = true;
  });
  app.add_option("--config", g.config,
                 "Default config file: phantom config for gen, train config for train (key=value text)");
  app.add_flag("--deterministic", g.deterministic,
               "Single-worker mode; every stage already runs single-threaded, so this only records intent");

  auto* gen = app.add_subcommand("gen", "Generate a multi-scanner phantom dataset (volumes/*.ctph + manifest.tsv)");
  std::string gen_config;
  fs::path gen_out;
  gen->add_option("--config", gen_config, "Phantom config: anatomy/plan keys plus [scanner] blocks");
  gen->add_option("--out", gen_out, "Output dataset directory")->required();

  auto* pri = app.add_subcommand("priors", "Derive scanner CDF priors from never-smoker reference scans");
  std::string pri_manifest, pri_scanner = "all";
  fs::path pri_out;
  std::size_t pri_bins = 512, pri_refs = 10;
  pri->add_option("--manifest", pri_manifest, "Dataset manifest (manifest.tsv)")->required()->check(CLI::ExistingFile);
  pri->add_option("--scanner", pri_scanner, "Scanner tag, or 'all' for one file per tag")->capture_default_str();
  pri->add_option("--bins", pri_bins, "CDF bins over [-1024, -700] HU")->capture_default_str();
  pri->add_option("--references", pri_refs, "Reference scans per scanner")->capture_default_str();
  pri->add_option("--out", pri_out, "Output directory; writes <tag>.cdf (text, format v1)")->required();

  auto* trn = app.add_subcommand("train", "Train a UNet variant; writes best.ckpt, state.ckpt, train_log.tsv");
  TrainArgs ta;
  std::size_t epochs = 0;
  trn->add_option("--manifest", ta.manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  trn->add_option("--variant", ta.variant, "plain_unet, dattn_scanner or dattn_diff")
      ->check(CLI::IsMember({"plain_unet", "dattn_scanner", "dattn_diff"}));
  trn->add_option("--net-config", ta.net_config, "Network config (key=value)")->check(CLI::ExistingFile);
  trn->add_option("--train-config", ta.train_config, "Training config (key=value)")->check(CLI::ExistingFile);
  trn->add_option("--priors", ta.priors, "Directory of <tag>.cdf scanner priors (dattn variants)");
  trn->add_option("--resume", ta.resume, "Resume from a state.ckpt")->check(CLI::ExistingFile);
  auto* epochs_opt = trn->add_option("--epochs", epochs, "Override max_epochs");
  trn->add_option("--out", ta.out, "Output directory")->required();

  auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint; writes report_<split>.tsv per split");
  std::string ev_ck, ev_manifest, ev_split = "both", ev_priors;
  fs::path ev_out;
  evl->add_option("--checkpoint", ev_ck, "Checkpoint (EMCK v1)")->required()->check(CLI::ExistingFile);
  evl->add_option("--manifest", ev_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  evl->add_option("--split", ev_split, "test_id, test_ood or both")->capture_default_str();
  evl->add_option("--priors", ev_priors, "Directory of <tag>.cdf scanner priors");
  evl->add_option("--out", ev_out, "Output directory")->required();

  auto* cmp = app.add_subcommand("compare", "Side-by-side variant table from evaluation reports");
  std::vector<std::string> cmp_reports;
  fs::path cmp_out;
  cmp->add_option("--reports", cmp_reports, "Report files, one per variant")->required()->check(CLI::ExistingFile);
  cmp->add_option("--out", cmp_out, "Output directory; writes comparison.tsv")->required();

  auto* ovl = app.add_subcommand("overlay", "TP/FN/FP overlays (binary PPM) for every lung slice of one scan");
  std::string ov_ck, ov_manifest, ov_scan, ov_priors;
  fs::path ov_out;
  ovl->add_option("--checkpoint", ov_ck, "Checkpoint")->required()->check(CLI::ExistingFile);
  ovl->add_option("--manifest", ov_manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  ovl->add_option("--scan", ov_scan, "Scan id")->required();
  ovl->add_option("--priors", ov_priors, "Directory of <tag>.cdf scanner priors");
  ovl->add_option("--out", ov_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen(g, gen_config, gen_out);
    if (*pri) return cmd_priors(pri_manifest, pri_scanner, pri_out, pri_bins, pri_refs);
    if (*trn) {
      if (epochs_opt->count()) ta.epochs = epochs;
      return cmd_train(g, ta);
    }
    if (*evl) return cmd_eval(ev_ck, ev_manifest, ev_split, ev_priors, ev_out);
    if (*cmp) return cmd_compare(cmp_reports, cmp_out);
    if (*ovl) return cmd_overlay(ov_ck, ov_manifest, ov_scan, ov_priors, ov_out);
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const GenerationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
