#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "emphseg/errors.hpp"
#include "emphseg/evaluator.hpp"
#include "emphseg/trainer.hpp"
#include "test_support.hpp"

using namespace emphseg;
using namespace emphseg::eval;
using emphseg::testing::TempDir;

namespace {

ScanEval scan(const std::string& id, const std::string& scanner, double ref, double pred, double d) {
  return {id, ScannerTag(scanner), ref, pred, ref - pred, d};
}

std::vector<ScanEval> random_scans(std::mt19937_64& rng, std::size_t n) {
  std::uniform_real_distribution<double> pct(0.0, 20.0), unit(0.0, 1.0);
  std::vector<ScanEval> out;
  const char* scanners[] = {"SYN-A", "SYN-B", "SYN-C"};
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(scan("S" + std::to_string(1000 + i), scanners[i % 3], pct(rng), pct(rng), unit(rng)));
  }
  return out;
}

// Thirty scans whose means hit the requested error and DSC exactly.
EvalReport table_report(net::Variant v, double mean_error, double mean_dsc) {
  std::vector<ScanEval> scans;
  for (int i = 0; i < 30; ++i) {
    const double wiggle = (i % 2 ? 1.0 : -1.0) * 0.125;
    const double ref = 3.0 + wiggle;
    scans.push_back(scan("M" + std::to_string(i), "SYN-D", ref, ref - mean_error - wiggle, mean_dsc + wiggle));
  }
  return EvalReport::build(v, Split::kTestOod, scans);
}

}  // namespace

TEST(Stats, MeanStdAndFiveNumber) {
  const std::vector<double> v{2, 4, 4, 4, 5, 5, 7, 9};
  const auto ms = mean_std(v);
  EXPECT_DOUBLE_EQ(ms.mean, 5.0);
  EXPECT_NEAR(ms.std, std::sqrt(32.0 / 7.0), 1e-15);
  EXPECT_EQ(mean_std(std::vector<double>{3.0}).std, 0.0);

  const auto f = five_number({7, 1, 3, 5});
  EXPECT_EQ(f.min, 1.0);
  EXPECT_EQ(f.max, 7.0);
  EXPECT_DOUBLE_EQ(f.median, 4.0);
  EXPECT_DOUBLE_EQ(f.q1, 2.5);
  EXPECT_DOUBLE_EQ(f.q3, 5.5);
}

TEST(Report, GlobalErrorIdentityAndWeightedMeans) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto r = EvalReport::build(net::Variant::kDattnDiff, Split::kTestId, random_scans(rng, 4 + trial));
    EXPECT_NEAR(r.global.error.mean, r.global.ref.mean - r.global.pred.mean, 1e-12);
    double err = 0.0, dsc_sum = 0.0;
    std::size_t n = 0;
    for (const auto& [tag, a] : r.per_scanner) {
      err += a.error.mean * static_cast<double>(a.count);
      dsc_sum += a.dsc.mean * static_cast<double>(a.count);
      n += a.count;
    }
    EXPECT_EQ(n, r.global.count);
    EXPECT_NEAR(err / static_cast<double>(n), r.global.error.mean, 1e-12);
    EXPECT_NEAR(dsc_sum / static_cast<double>(n), r.global.dsc.mean, 1e-12);
    EXPECT_TRUE(std::is_sorted(r.scans.begin(), r.scans.end(),
                               [](const ScanEval& a, const ScanEval& b) { return a.scan_id < b.scan_id; }));
  }
}

TEST(Report, TextRoundTripAndDeterminism) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto scans = random_scans(rng, 3 + trial);
    const auto r = EvalReport::build(net::Variant::kDattnScanner, Split::kTestOod, scans);
    std::shuffle(scans.begin(), scans.end(), rng);
    const auto text = report_to_text(r);
    // input order does not leak into the output
    EXPECT_EQ(report_to_text(EvalReport::build(net::Variant::kDattnScanner, Split::kTestOod, scans)), text);
    const auto back = report_from_text(text);
    EXPECT_EQ(report_to_text(back), text);
    EXPECT_EQ(back.variant, r.variant);
    EXPECT_EQ(back.split, r.split);
    ASSERT_EQ(back.scans.size(), r.scans.size());
    for (std::size_t i = 0; i < r.scans.size(); ++i) EXPECT_EQ(back.scans[i].signed_error, r.scans[i].signed_error);
  }
  EXPECT_THROW(report_from_text("nonsense\n"), FormatError);
  EXPECT_THROW(EvalReport::build(net::Variant::kPlainUnet, Split::kTestId,
                                 {scan("a", "A", 1, 1, 1), scan("a", "A", 2, 2, 1)}),
               ContractError);
}

TEST(Report, FileRoundTrip) {
  std::mt19937_64 rng(3);
  const auto r = EvalReport::build(net::Variant::kPlainUnet, Split::kTestId, random_scans(rng, 7));
  TempDir dir("report");
  write_report(r, dir / "r.tsv");
  EXPECT_EQ(report_to_text(read_report(dir / "r.tsv")), report_to_text(r));
}

class EvaluateOnPhantom : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new TempDir("evalds");
    manifest_ = new DatasetManifest(
        phantom::build_dataset(emphseg::testing::tiny_dataset_config(32, 6), 13, dir_->path()));
  }
  static void TearDownTestSuite() {
    delete manifest_;
    delete dir_;
  }
  static TempDir* dir_;
  static DatasetManifest* manifest_;
};
TempDir* EvaluateOnPhantom::dir_ = nullptr;
DatasetManifest* EvaluateOnPhantom::manifest_ = nullptr;

TEST_F(EvaluateOnPhantom, OraclePredictorIsPerfect) {
  const auto r = evaluate_split([](const CtVolume& v) { return v.emph(); }, *manifest_, Split::kTestId,
                                net::Variant::kPlainUnet);
  EXPECT_EQ(r.scans.size(), 6u);
  for (const auto& s : r.scans) {
    EXPECT_EQ(s.dsc, 1.0);
    EXPECT_EQ(s.signed_error, 0.0);
  }
  EXPECT_EQ(r.global.error.mean, 0.0);
}

TEST_F(EvaluateOnPhantom, AllBackgroundErrorEqualsReference) {
  const auto r = evaluate_split([](const CtVolume& v) { return Mask3::zeros(v.dims()); }, *manifest_,
                                Split::kTestOod, net::Variant::kPlainUnet);
  EXPECT_NEAR(r.global.error.mean, r.global.ref.mean, 1e-12);
  for (const auto& s : r.scans) {
    const auto& rec = manifest_->find(s.scan_id);
    const auto v = read_volume(manifest_->resolve(rec));
    EXPECT_EQ(s.dsc, v.emph().count() == 0 ? 1.0 : 0.0);
  }
}

TEST_F(EvaluateOnPhantom, RunEvalIsDeterministicAndNeedsPriors) {
  net::NetworkConfig cfg;
  cfg.input_size = 32;
  cfg.base_channels = 4;
  cfg.n_down_stages = 2;
  cfg.gn_groups = 2;
  cfg.dattn_hidden = 4;
  cfg.variant = net::Variant::kDattnDiff;
  Checkpoint ckpt{cfg, {}, {}};
  store_params(ckpt.arrays, net::init_params<float>(cfg));

  std::map<ScannerTag, cdf::CdfFeature> priors;
  for (const auto& tag : manifest_->scanners()) priors[tag] = cdf::scanner_prior(*manifest_, tag);
  const auto a = report_to_text(run_eval(ckpt, *manifest_, Split::kTestOod, priors));
  const auto b = report_to_text(run_eval(ckpt, *manifest_, Split::kTestOod, priors));
  EXPECT_EQ(a, b);

  priors.erase(ScannerTag("SYN-D"));
  EXPECT_THROW(run_eval(ckpt, *manifest_, Split::kTestOod, priors), ConfigError);
  EXPECT_NO_THROW(run_eval(ckpt, *manifest_, Split::kTestId, priors));

  auto broken = ckpt;
  broken.config.dattn_hidden = 5;
  EXPECT_THROW(model_from_checkpoint(broken), ConfigError);
}

TEST(Compare, IdenticalReportsHaveZeroDeltas) {
  std::mt19937_64 rng(4);
  const auto scans = random_scans(rng, 9);
  std::vector<EvalReport> reports;
  for (auto v : {net::Variant::kPlainUnet, net::Variant::kDattnScanner, net::Variant::kDattnDiff}) {
    reports.push_back(EvalReport::build(v, Split::kTestId, scans));
  }
  const auto c = compare_variants(reports);
  ASSERT_EQ(c.rows.size(), 3u);
  for (const auto& row : c.rows) {
    EXPECT_EQ(row.delta_error, 0.0);
    EXPECT_EQ(row.delta_dsc, 0.0);
  }
}

TEST(Compare, AblationMeansPickDattnDiff) {
  const auto plain = table_report(net::Variant::kPlainUnet, 0.84, 0.5845);
  const auto scanner = table_report(net::Variant::kDattnScanner, 0.27, 0.6066);
  const auto diff = table_report(net::Variant::kDattnDiff, 0.15, 0.6580);
  const auto c = compare_variants({scanner, diff, plain});
  EXPECT_EQ(c.best_dsc, net::Variant::kDattnDiff);
  EXPECT_EQ(c.best_error, net::Variant::kDattnDiff);
  ASSERT_EQ(c.rows.size(), 3u);
  EXPECT_EQ(c.rows[0].variant, net::Variant::kPlainUnet);
  EXPECT_NEAR(c.rows[0].global.dsc.mean, 0.5845, 1e-12);
  EXPECT_NEAR(c.rows[2].global.dsc.mean, 0.6580, 1e-12);
  EXPECT_NEAR(c.rows[2].delta_dsc, 0.6580 - 0.5845, 1e-12);
  EXPECT_NEAR(c.rows[2].delta_error, 0.15 - 0.84, 1e-12);
  EXPECT_NEAR(c.rows[1].delta_dsc, 0.6066 - 0.5845, 1e-12);

  const auto text = comparison_to_text(c);
  EXPECT_NE(text.find("dattn_diff\t30\t0.15\t"), std::string::npos) << text;
  EXPECT_NE(text.find("\t65.80\t"), std::string::npos) << text;
  EXPECT_NE(text.find("\t58.45\t"), std::string::npos) << text;

  // order invariance
  EXPECT_EQ(comparison_to_text(compare_variants({plain, diff, scanner})), text);
  EXPECT_EQ(comparison_to_text(compare_variants({diff, scanner, plain})), text);
}

TEST(Compare, MismatchesAreContractErrors) {
  std::mt19937_64 rng(5);
  const auto scans = random_scans(rng, 6);
  auto fewer = scans;
  fewer.pop_back();
  const auto a = EvalReport::build(net::Variant::kPlainUnet, Split::kTestId, scans);
  EXPECT_THROW(compare_variants({a, EvalReport::build(net::Variant::kDattnDiff, Split::kTestId, fewer)}),
               ContractError);
  EXPECT_THROW(compare_variants({a, EvalReport::build(net::Variant::kDattnDiff, Split::kTestOod, scans)}),
               ContractError);
  EXPECT_THROW(compare_variants({a, a}), ContractError);
  EXPECT_THROW(compare_variants({}), ContractError);
}

TEST(Overlay, ColorCountsMatchConfusion) {
  std::mt19937_64 rng(6);
  std::bernoulli_distribution b(0.3);
  std::uniform_int_distribution<int> hu(-1100, 100);
  for (int trial = 0; trial < 25; ++trial) {
    CtSlice s;
    s.height = 5 + trial % 4;
    s.width = 7;
    const std::size_t n = s.height * s.width;
    std::vector<std::uint8_t> pred(n), ref(n);
    for (std::size_t i = 0; i < n; ++i) {
      s.hu.push_back(static_cast<std::int16_t>(std::max(-1024, hu(rng))));
      pred[i] = b(rng);
      ref[i] = b(rng);
    }
    s.lung_mask.assign(n, 1);
    s.emph_mask = ref;
    const auto img = render_overlay(s, pred, ref);
    std::size_t green = 0, yellow = 0, red = 0;
    for (std::size_t y = 0; y < s.height; ++y) {
      for (std::size_t x = 0; x < s.width; ++x) {
        const auto px = img.pixel(y, x);
        green += px == kTruePositive;
        yellow += px == kFalseNegative;
        red += px == kFalsePositive;
      }
    }
    const auto c = confusion(pred, ref);
    EXPECT_EQ(green, c.tp);
    EXPECT_EQ(yellow, c.fn);
    EXPECT_EQ(red, c.fp);
  }
}

TEST(Overlay, SpecialCasesAndPpm) {
  CtSlice s;
  s.height = 1;
  s.width = 4;
  s.hu = {-1024, -662, -300, 500};
  s.lung_mask = {1, 1, 1, 1};
  s.emph_mask = {0, 0, 0, 0};
  const std::vector<std::uint8_t> none(4, 0);
  const auto bg = render_overlay(s, none, none);
  EXPECT_EQ(bg.pixel(0, 0), (std::array<std::uint8_t, 3>{0, 0, 0}));
  EXPECT_EQ(bg.pixel(0, 1), (std::array<std::uint8_t, 3>{128, 128, 128}));
  EXPECT_EQ(bg.pixel(0, 2), (std::array<std::uint8_t, 3>{255, 255, 255}));
  EXPECT_EQ(bg.pixel(0, 3), (std::array<std::uint8_t, 3>{255, 255, 255}));

  const std::vector<std::uint8_t> some{1, 0, 1, 0};
  const auto same = render_overlay(s, some, some);
  EXPECT_EQ(same.pixel(0, 0), kTruePositive);
  EXPECT_EQ(same.pixel(0, 2), kTruePositive);
  const auto missed = render_overlay(s, none, some);
  EXPECT_EQ(missed.pixel(0, 0), kFalseNegative);
  EXPECT_THROW(render_overlay(s, std::vector<std::uint8_t>(3), none), ContractError);

  const auto ppm = encode_ppm(bg);
  const std::string header = "P6\n4 1\n255\n";
  ASSERT_EQ(ppm.size(), header.size() + 12);
  EXPECT_TRUE(std::equal(header.begin(), header.end(), ppm.begin()));
  EXPECT_EQ(ppm[header.size() + 3], 128);
}
