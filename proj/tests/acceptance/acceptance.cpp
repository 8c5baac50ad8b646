// Acceptance checks. One PASS/FAIL line per criterion; `--criterion N` runs one.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "emphseg/binary_io.hpp"
#include "emphseg/cdf_features.hpp"
#include "emphseg/checkpoint.hpp"
#include "emphseg/core_data.hpp"
#include "emphseg/evaluator.hpp"
#include "emphseg/network.hpp"
#include "emphseg/objective.hpp"
#include "emphseg/phantom.hpp"
#include "emphseg/trainer.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using namespace emphseg;
using emphseg::testing::TempDir;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 6) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool rel_close(double a, double b, double tol) { return std::abs(a - b) <= tol * std::max(std::abs(a), std::abs(b)); }

// 1. Finite-difference gradient check through the full attention UNet.
Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  double worst_abs = 0.0;
  std::size_t samples = 0, tiny = 0;
  std::string worst_name;
  for (auto pos : {net::DattnPosition::kAfterDoubleConv, net::DattnPosition::kBeforeDoubleConv}) {
    const auto p = testing::small_grad_problem(net::Variant::kDattnDiff, pos, 11);
    for (const auto& g : testing::check_gradients(p, 1)) {
      if (std::max(std::abs(g.analytic), std::abs(g.numeric)) < testing::kFdResolvable) {
        ++tiny;
        worst_abs = std::max(worst_abs, std::abs(g.analytic - g.numeric));
        continue;
      }
      ++samples;
      if (g.rel_error > worst) {
        worst = g.rel_error;
        worst_name = g.name;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {samples >= 25 && worst <= 1e-4 && worst_abs <= testing::kFdAbsTol && secs < 60.0,
          std::to_string(samples) + " samples, worst rel error " + fmt(worst, 3) + " (" + worst_name + "); " +
              std::to_string(tiny) + " sub-resolution entries, worst abs error " + fmt(worst_abs, 3) + "; " +
              fmt(secs, 3) + " s"};
}

// 2. Saturated attention reduces the default-size network to the plain UNet.
Outcome saturation_equivalence() {
  net::NetworkConfig cfg;
  cfg.input_size = 64;
  cfg.base_channels = 16;
  cfg.variant = net::Variant::kDattnDiff;
  auto params = net::init_params<float>(cfg);
  const auto plain_params = testing::saturate_and_strip(params);
  auto plain_cfg = cfg;
  plain_cfg.variant = net::Variant::kPlainUnet;

  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Tensor<float> x(2, 1, 64, 64), d(2, cfg.n_cdf_bins, 1, 1);
  for (auto& v : x.values()) v = u(rng);
  for (auto& v : d.values()) v = 2.0f * u(rng) - 1.0f;
  const auto a = net::forward(cfg, params, x, &d);
  const auto b = net::forward(plain_cfg, plain_params, x, nullptr);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.values().size(); ++i) {
    diff = std::max(diff, static_cast<double>(std::abs(a.values()[i] - b.values()[i])));
  }
  return {diff <= 1e-5, "max abs logit diff " + fmt(diff, 3)};
}

// 3. Scanner CDF equals the pooled brute-force CDF; a singleton prior gives a zero diff.
Outcome cdf_oracle() {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::size_t> dim(2, 12);
  std::vector<CtVolume> vols;
  for (int i = 0; i < 20; ++i) {
    auto v = testing::random_volume(rng, {dim(rng), dim(rng), dim(rng)}, "v" + std::to_string(i), "S", 0.7, -1024,
                                    -600);
    if (v.lung_voxels() > 0) vols.push_back(std::move(v));
  }
  const cdf::BinEdges edges;
  const bool pooled = cdf::cdf_of_scanner(vols, edges).values == testing::brute_force_cdf(vols, edges);
  std::size_t nonzero = 0;
  for (const auto& v : vols) {
    const std::vector<CtVolume> one{v};
    const auto diff = cdf::cdf_diff(cdf::cdf_of_scan(v, edges), cdf::cdf_of_scanner(one, edges));
    for (double x : diff.values) nonzero += x != 0.0;
  }
  return {pooled && nonzero == 0 && vols.size() == 20,
          std::to_string(vols.size()) + " volumes, pooled match " + (pooled ? "exact" : "MISMATCH") +
              ", nonzero singleton diff entries " + std::to_string(nonzero)};
}

// 4. Schedule against an independent closed form, plus the spot values.
Outcome schedule_exactness() {
  const train::TrainConfig cfg;
  const double lr_max = 2e-4, lr_min = 1e-8;
  auto closed = [&](std::size_t e) {
    if (e < 25) return lr_max;
    const auto [start, len] = e < 35 ? std::pair{25.0, 10.0} : std::pair{35.0, 20.0};
    const double t = static_cast<double>(e) - start;
    return lr_min + (lr_max - lr_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * t / (len - 1.0)));
  };
  std::size_t bad = 0;
  for (std::size_t e = 0; e < 50; ++e) bad += !rel_close(train::lr_at(e, cfg), closed(e), 1e-12);
  const double l0 = train::lr_at(0, cfg), l34 = train::lr_at(34, cfg), l35 = train::lr_at(35, cfg);
  const bool spots = rel_close(l0, 2e-4, 1e-12) && rel_close(l35, 2e-4, 1e-12) && l34 <= 1.1e-8;
  return {bad == 0 && spots, std::to_string(bad) + " epochs off the closed form; lr(0)=" + fmt(l0, 17) +
                                 " lr(34)=" + fmt(l34, 17) + " lr(35)=" + fmt(l35, 17)};
}

// 5. Loss landmarks on a 2x16x16 half-foreground batch.
Outcome loss_landmarks() {
  const std::size_t n = 2, s = 16;
  std::vector<std::uint8_t> mask(n * s * s);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (i % 2) ? 1 : 0;
  const auto y = one_hot<double>(mask, n, s, s);
  const auto perfect = segmentation_loss(y, y);
  Tensor<double> half(n, 2, s, s);
  for (auto& v : half.values()) v = 0.5;
  const auto uniform = segmentation_loss(y, half);
  const bool ok_perfect = std::abs(perfect.total + 1.0) <= 1e-6;
  const bool ok_ce = std::abs(uniform.ce_term - std::numbers::ln2) <= 1e-9;
  const bool ok_dice = std::abs(uniform.dice_term - 2.0 / 3.0) <= 1e-6;
  return {ok_perfect && ok_ce && ok_dice, "perfect total " + fmt(perfect.total, 12) + ", uniform ce " +
                                              fmt(uniform.ce_term, 12) + ", uniform dice " +
                                              fmt(uniform.dice_term, 12) + " (expected 2/3)"};
}

// 6. Eight phantom slices, full-batch steps, until training DSC > 0.95.
Outcome overfit_smoke() {
  constexpr double kLr = 2e-4;
  constexpr std::size_t kSteps = 200;
  const auto t0 = std::chrono::steady_clock::now();
  TempDir dir("accept6");
  auto dcfg = testing::tiny_dataset_config(64, 4);
  const auto m = phantom::build_dataset(dcfg, 6, dir.path());
  std::map<ScannerTag, cdf::CdfFeature> priors;
  for (const auto& tag : m.scanners()) priors[tag] = cdf::scanner_prior(m, tag);
  const DomainContext ctx{net::Variant::kDattnDiff, priors};
  auto all = train::load_samples(m, Split::kTrain, 50, ctx, 6);

  // the eight slices with the most emphysema
  std::vector<std::size_t> order(all.size());
  const std::size_t px = all.height * all.width;
  std::vector<std::size_t> fg(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    order[i] = i;
    for (std::size_t k = 0; k < px; ++k) fg[i] += all.masks[i * px + k];
  }
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return fg[a] > fg[b]; });
  train::SampleSet eight{all.height, all.width, all.bins, {}, {}, {}, {}, {}};
  for (std::size_t j = 0; j < 8; ++j) {
    const auto i = order[j];
    eight.images.insert(eight.images.end(), all.images.begin() + i * px, all.images.begin() + (i + 1) * px);
    eight.masks.insert(eight.masks.end(), all.masks.begin() + i * px, all.masks.begin() + (i + 1) * px);
    eight.domain.insert(eight.domain.end(), all.domain.begin() + i * all.bins,
                        all.domain.begin() + (i + 1) * all.bins);
    eight.scan_ids.push_back(all.scan_ids[i]);
    eight.scanners.push_back(all.scanners[i]);
  }

  net::NetworkConfig nc;
  nc.input_size = 64;
  nc.base_channels = 16;
  nc.variant = net::Variant::kDattnDiff;
  train::TrainConfig tc;
  tc.lr_max = kLr;
  tc.lr_min = 0.0;
  tc.constant_epochs = kSteps;
  tc.restart_periods = {1};
  tc.max_epochs = kSteps;
  tc.early_stop_patience = kSteps;
  tc.batch_size = 8;  // one optimizer step per epoch
  tc.seed = 6;
  train::Trainer trainer(nc, tc, eight, eight);
  double best = 0.0;
  std::size_t reached = 0;
  while (trainer.step_epoch()) {
    best = std::max(best, trainer.log().back().val_dsc);
    if (best > 0.95) {
      reached = trainer.log().size();
      break;
    }
  }
  const double secs = seconds_since(t0);
  return {reached > 0 && secs < 300.0,
          (reached ? "DSC > 0.95 after " + std::to_string(reached) + " steps"
                   : "best DSC " + fmt(best, 4) + " after " + std::to_string(kSteps) + " steps") +
              ", " + fmt(secs, 3) + " s"};
}

// 7. Three seeds, three variants on the default suite; directional OOD comparison.
Outcome directional_ood() {
  const std::vector<net::Variant> variants{net::Variant::kPlainUnet, net::Variant::kDattnScanner,
                                           net::Variant::kDattnDiff};
  std::map<net::Variant, double> dsc, err;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    TempDir dir("accept7");
    const auto m = phantom::build_dataset(phantom::default_dataset_config(), seed, dir.path());
    std::map<ScannerTag, cdf::CdfFeature> priors;
    for (const auto& tag : m.scanners()) priors[tag] = cdf::scanner_prior(m, tag);
    for (auto v : variants) {
      net::NetworkConfig nc;
      nc.input_size = 64;
      nc.base_channels = 8;
      nc.gn_groups = 4;
      nc.variant = v;
      nc.seed = seed;
      train::TrainConfig tc;
      tc.seed = seed;
      const auto result = train::train(m, nc, tc, priors);
      const auto r = eval::run_eval(result.best, m, Split::kTestOod, priors);
      dsc[v] += r.global.dsc.mean / 3.0;
      err[v] += r.global.error.mean / 3.0;
      std::cerr << "  seed " << seed << " " << net::to_string(v) << ": OOD DSC " << fmt(r.global.dsc.mean, 4)
                << ", mean error " << fmt(r.global.error.mean, 4) << " (" << result.log.size() << " epochs, "
                << fmt(seconds_since(t0), 4) << " s)\n";
    }
  }
  using V = net::Variant;
  const bool a = dsc[V::kDattnDiff] > dsc[V::kPlainUnet];
  const bool b = std::abs(err[V::kDattnDiff]) <= std::abs(err[V::kPlainUnet]);
  const bool c = dsc[V::kDattnDiff] >= dsc[V::kDattnScanner] && dsc[V::kDattnScanner] >= dsc[V::kPlainUnet];
  std::string detail;
  for (auto v : variants) {
    detail += net::to_string(v) + " DSC " + fmt(dsc[v], 4) + " err " + fmt(err[v], 4) + "; ";
  }
  detail += std::string("(a) ") + (a ? "ok" : "no") + " (b) " + (b ? "ok" : "no") + " (c) " + (c ? "ok" : "no") +
            ", " + fmt(seconds_since(t0), 4) + " s";
  return {a && b && c && seconds_since(t0) < 7200.0, detail};
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(EMPHSEG_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// 8. Two full CLI pipelines with the same seed produce identical reports.
Outcome cli_determinism() {
  TempDir dir("accept8");
  const std::string cfgs = EMPHSEG_CONFIG_DIR;
  std::vector<std::vector<std::uint8_t>> reports[2];
  for (int run = 0; run < 2; ++run) {
    const auto root = dir / ("run" + std::to_string(run));
    const auto log = dir / "log.txt";
    const std::string pre = "--seed 17 --deterministic ";
    const std::string manifest = (root / "ds" / "manifest.tsv").string();
    const std::vector<std::string> steps{
        "gen --config " + cfgs + "/phantom_smoke.cfg --out " + (root / "ds").string(),
        "priors --manifest " + manifest + " --out " + (root / "priors").string(),
        "train --manifest " + manifest + " --variant dattn_diff --net-config " + cfgs +
            "/net_smoke.cfg --train-config " + cfgs + "/train_smoke.cfg --epochs 2 --priors " +
            (root / "priors").string() + " --out " + (root / "model").string(),
        "eval --checkpoint " + (root / "model" / "best.ckpt").string() + " --manifest " + manifest +
            " --priors " + (root / "priors").string() + " --out " + (root / "eval").string()};
    for (const auto& s : steps) {
      if (const int code = run_cli(pre + s, log); code != 0) {
        return {false, "step failed with exit " + std::to_string(code) + ": " + s + "\n" + io::read_text_file(log)};
      }
    }
    for (const char* name : {"report_test_id.tsv", "report_test_ood.tsv"}) {
      reports[run].push_back(io::read_file(root / "eval" / name));
    }
  }
  const bool same = reports[0] == reports[1];
  return {same, std::string("two runs, reports ") + (same ? "byte-identical" : "DIFFER") + " (" +
                    std::to_string(reports[0][0].size() + reports[0][1].size()) + " bytes)"};
}

// 9. Randomized round trips for the three file formats.
Outcome round_trips() {
  constexpr int kCases = 100;
  TempDir dir("accept9");
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<std::size_t> dim(1, 9), bins(1, 600);
  int vol_ok = 0, cdf_ok = 0, ckpt_ok = 0;
  for (int t = 0; t < kCases; ++t) {
    auto v = testing::random_volume(rng, {dim(rng), dim(rng), dim(rng)}, "scan-" + std::to_string(t),
                                    t % 2 ? "GE VCT" : "SIEMENS");
    if (t % 3 == 0) v = v.with_metadata({{"case", std::to_string(t)}});
    const auto vpath = dir / "v.ctph";
    write_volume(v, vpath);
    vol_ok += read_volume(vpath) == v && encode_volume(read_volume(vpath)) == io::read_file(vpath);

    auto lungish = testing::random_volume(rng, {dim(rng), dim(rng), dim(rng)}, "c" + std::to_string(t), "S", 0.9,
                                          -1024, -600);
    cdf::CdfFeature f;
    const cdf::BinEdges edges{-1024.0, -700.0, bins(rng)};
    if (lungish.lung_voxels() == 0) {
      f = cdf::cdf_of_scan(testing::random_volume(rng, {1, 1, 1}, "one", "S", 1.0, -900, -900), edges);
    } else if (t % 2) {
      f = cdf::cdf_of_scan(lungish, edges);
    } else {
      const std::vector<CtVolume> one{lungish};
      const auto scan = cdf::cdf_of_scan(lungish, edges);
      auto prior = cdf::cdf_of_scanner(one, edges);
      // perturb the prior so the diff carries non-trivial doubles
      for (auto& x : prior.values) x = std::nextafter(x * 0.75, 0.0);
      prior.values.back() = 1.0;
      f = cdf::cdf_diff(scan, prior);
    }
    const auto fpath = dir / "f.cdf";
    cdf::write_cdf(f, fpath);
    cdf_ok += cdf::read_cdf(fpath) == f;

    const auto c = testing::random_checkpoint(rng, t);
    const auto cpath = dir / "c.ckpt";
    write_checkpoint(c, cpath);
    ckpt_ok += read_checkpoint(cpath) == c && encode_checkpoint(read_checkpoint(cpath)) == io::read_file(cpath);
  }
  return {vol_ok == kCases && cdf_ok == kCases && ckpt_ok == kCases,
          "volumes " + std::to_string(vol_ok) + "/" + std::to_string(kCases) + ", cdf " + std::to_string(cdf_ok) +
              "/" + std::to_string(kCases) + ", checkpoints " + std::to_string(ckpt_ok) + "/" +
              std::to_string(kCases)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"emphseg acceptance checks"};
  int only = 0;
  app.add_option("--criterion", only, "Run a single criterion (1-9)")->check(CLI::Range(1, 9));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::function<Outcome()>> criteria{gradient_suite,  saturation_equivalence, cdf_oracle,
                                                       schedule_exactness, loss_landmarks,     overfit_smoke,
                                                       directional_ood, cli_determinism,        round_trips};
  int failures = 0;
  for (int i = 1; i <= static_cast<int>(criteria.size()); ++i) {
    if (only != 0 && only != i) continue;
    Outcome o;
    try {
      o = criteria[static_cast<std::size_t>(i - 1)]();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i << ": " << o.detail << std::endl;
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}
